//! Datasets, splits and normalization.
//!
//! Sources:
//!
//! * `synthetic:blobs[:key=value,...]` — keys `classes` (4), `samples` (800),
//!   `spread` (1.0), `side` (8: samples are `side×side×1`)
//! * `synthetic:rings[:...]` — keys `classes` (2), `samples` (600), `noise` (0.1)
//! * `synthetic:digits[:...]` — keys `samples` (1500), `noise` (0.3), `flip` (0.04)
//! * `idx:<images>,<labels>` — IDX image and label files
//! * `csv:<path>[:classes=N]` — header `label,f0,f1,...`
//!
//! Every synthetic source also takes `seed`, overriding the run seed. The
//! default split is 80/10/10 after a seeded shuffle.

pub mod idx;
pub mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: String,
    /// `[h, w, c]` of one sample.
    pub shape: [usize; 3],
    pub classes: usize,
    /// Normalized features, one row per sample.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub norm: Normalization,
}

impl Dataset {
    /// Builds a dataset from raw rows: shuffles with `seed`, splits 80/10/10
    /// and standardizes with training statistics.
    pub fn from_raw(
        source: &str,
        shape: [usize; 3],
        classes: usize,
        mut features: Vec<f64>,
        labels: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let dim: usize = shape.iter().product();
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} feature values for {} samples of shape {shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!("sample {i}: label {l} out of range for {classes} classes")));
        }
        if labels.len() < 3 {
            return Err(Error::Data("need at least 3 samples to split".into()));
        }
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a));
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let train = order[..n_train].to_vec();
        let val = order[n_train..n_train + n_val].to_vec();
        let test = order[n_train + n_val..].to_vec();

        let mut mean = vec![0.0; dim];
        for &i in &train {
            for (m, v) in mean.iter_mut().zip(&features[i * dim..(i + 1) * dim]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= train.len().max(1) as f64);
        let mut var = vec![0.0; dim];
        for &i in &train {
            for ((s, v), m) in var.iter_mut().zip(&features[i * dim..(i + 1) * dim]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / train.len().max(1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        for row in features.chunks_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        Ok(Self {
            source: source.to_string(),
            shape,
            classes,
            features,
            labels,
            train,
            val,
            test,
            norm: Normalization { mean, std },
        })
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// NHWC batch tensor and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&self.features[i * dim..(i + 1) * dim]);
        }
        let [h, w, c] = self.shape;
        let t = Tensor::new(vec![indices.len(), h, w, c], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn options(spec: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("expected key=value, got `{part}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(opts: &mut HashMap<String, String>, key: &str, default: T) -> Result<T> {
    match opts.remove(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Data(format!("bad value `{v}` for `{key}`"))),
        None => Ok(default),
    }
}

fn reject_leftovers(opts: &HashMap<String, String>, source: &str) -> Result<()> {
    match opts.keys().next() {
        Some(k) => Err(Error::Data(format!("unknown option `{k}` for {source}"))),
        None => Ok(()),
    }
}

/// Loads or generates a dataset. `seed` drives generation and the split shuffle.
pub fn load_dataset(source: &str, seed: u64) -> Result<Dataset> {
    if let Some(rest) = source.strip_prefix("synthetic:") {
        let (name, opt_str) = rest.split_once(':').unwrap_or((rest, ""));
        let mut opts = options(opt_str)?;
        let seed = take(&mut opts, "seed", seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = match name {
            "blobs" => {
                let classes = take(&mut opts, "classes", 4usize)?;
                let samples = take(&mut opts, "samples", 800usize)?;
                let spread = take(&mut opts, "spread", 1.0f64)?;
                let side = take(&mut opts, "side", 8usize)?;
                if classes < 2 || side == 0 || !(spread.is_finite() && spread >= 0.0) {
                    return Err(Error::Data("blobs need ≥2 classes, side ≥1 and a finite spread".into()));
                }
                synthetic::blobs(&mut rng, classes, samples, [side, side, 1], spread)
            }
            "rings" => {
                let classes = take(&mut opts, "classes", 2usize)?;
                let samples = take(&mut opts, "samples", 600usize)?;
                let noise = take(&mut opts, "noise", 0.1f64)?;
                if classes < 2 || !(noise.is_finite() && noise >= 0.0) {
                    return Err(Error::Data("rings need ≥2 classes and finite noise".into()));
                }
                synthetic::rings(&mut rng, classes, samples, noise)
            }
            "digits" => {
                let samples = take(&mut opts, "samples", 1500usize)?;
                let noise = take(&mut opts, "noise", 0.3f64)?;
                let flip = take(&mut opts, "flip", 0.04f64)?;
                if !(noise.is_finite() && noise >= 0.0 && (0.0..=1.0).contains(&flip)) {
                    return Err(Error::Data("digits need finite noise and flip in [0, 1]".into()));
                }
                synthetic::digits(&mut rng, samples, noise, flip)
            }
            other => return Err(Error::Data(format!("unknown synthetic dataset `{other}`"))),
        };
        reject_leftovers(&opts, source)?;
        return Dataset::from_raw(source, g.shape, g.classes, g.features, g.labels, seed);
    }
    if let Some(rest) = source.strip_prefix("idx:") {
        let (images, labels) = rest
            .split_once(',')
            .ok_or_else(|| Error::Data("idx source needs `idx:<images>,<labels>`".into()))?;
        return load_idx(source, Path::new(images), Path::new(labels), seed);
    }
    if let Some(rest) = source.strip_prefix("csv:") {
        let (path, opt_str) = match rest.rsplit_once(':') {
            Some((p, o)) if o.contains('=') => (p, o),
            _ => (rest, ""),
        };
        let mut opts = options(opt_str)?;
        let classes: Option<usize> = match opts.remove("classes") {
            Some(v) => Some(v.parse().map_err(|_| Error::Data(format!("bad classes `{v}`")))?),
            None => None,
        };
        reject_leftovers(&opts, source)?;
        let text = std::fs::read_to_string(path)?;
        return parse_csv(source, &text, classes, seed);
    }
    Err(Error::Data(format!(
        "unknown dataset source `{source}` (expected synthetic:, idx: or csv:)"
    )))
}

fn load_idx(source: &str, images: &Path, labels: &Path, seed: u64) -> Result<Dataset> {
    let img = idx::parse_idx(&std::fs::read(images)?)
        .map_err(|e| Error::Data(format!("{}: {e}", images.display())))?;
    let lab = idx::parse_idx(&std::fs::read(labels)?)
        .map_err(|e| Error::Data(format!("{}: {e}", labels.display())))?;
    if lab.dims.len() != 1 {
        return Err(Error::Data(format!("label file must be 1-D, got dims {:?}", lab.dims)));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::Data(format!("{n} images but {} labels", lab.dims[0])));
    }
    let shape = match img.dims[1..] {
        [] => [1, 1, 1],
        [d] => [1, 1, d],
        [h, w] => [h, w, 1],
        [h, w, c] => [h, w, c],
        _ => return Err(Error::Data(format!("unsupported image dims {:?}", img.dims))),
    };
    let mut labels = Vec::with_capacity(n);
    for (i, &v) in lab.values.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Data(format!("label {i} is not a class index: {v}")));
        }
        labels.push(v as usize);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::from_raw(source, shape, classes, img.values, labels, seed)
}

/// Parses `label,f0,f1,...` rows. Errors name the 1-based line.
pub fn parse_csv(source: &str, text: &str, classes: Option<usize>, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::Data("line 1: header must be `label,f0,f1,...`".into()));
    }
    let width = header.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        if record.len() != width {
            return Err(Error::Data(format!(
                "line {line}: expected {width} fields, found {}",
                record.len()
            )));
        }
        let raw = &record[0];
        let label: i64 = raw
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: label `{raw}` is not an integer")))?;
        if label < 0 || classes.is_some_and(|c| label as usize >= c) {
            return Err(Error::Data(format!(
                "line {line}: label {label} out of range{}",
                classes.map(|c| format!(" for {c} classes")).unwrap_or_default()
            )));
        }
        labels.push(label as usize);
        for (j, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: field {j} `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: field {j} is not finite")));
            }
            features.push(v);
        }
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::from_raw(source, [1, 1, width - 1], classes, features, labels, seed)
}
