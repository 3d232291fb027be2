//! Network descriptions: layer list, file format, presets and shape checks.
//!
//! A spec file is TOML:
//!
//! ```toml
//! name = "tiny"
//! input = [8, 8, 1]        # height, width, channels
//! classes = 3
//!
//! [[layer]]
//! name = "conv1"
//! kind = "conv2d"
//! out_channels = 4
//! kernel = 3
//! padding = 1
//! pin = "T"                # optional: fix this layer's choice
//!
//! [[layer]]
//! name = "relu1"
//! kind = "relu"
//!
//! [[layer]]
//! name = "flat"
//! kind = "flatten"
//!
//! [[layer]]
//! name = "fc"
//! kind = "dense"
//! units = 3
//! ```
//!
//! Keys per layer: `name`, `kind`, `input` (source layer, default the
//! previous one), `inputs` (concat sources), `out_channels`, `kernel`,
//! `stride` (default 1, pools default to `kernel`), `padding` (default 0),
//! `units`, `searchable` (default true for conv2d/dense, must be false or
//! absent otherwise) and `pin`. Unknown keys are rejected.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::choice::ChoiceKey;
use crate::operators::{ConvGeometry, LayerKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerType {
    Conv2d,
    Dense,
    Relu,
    Maxpool,
    Avgpool,
    GlobalAvgpool,
    Concat,
    Flatten,
}

impl LayerType {
    pub fn has_weights(self) -> bool {
        matches!(self, LayerType::Conv2d | LayerType::Dense)
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerType::Conv2d => "conv2d",
            LayerType::Dense => "dense",
            LayerType::Relu => "relu",
            LayerType::Maxpool => "maxpool",
            LayerType::Avgpool => "avgpool",
            LayerType::GlobalAvgpool => "global-avgpool",
            LayerType::Concat => "concat",
            LayerType::Flatten => "flatten",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub searchable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pin: Option<String>,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerType) -> Self {
        Self {
            name: name.to_string(),
            kind,
            input: None,
            inputs: Vec::new(),
            out_channels: None,
            kernel: None,
            stride: None,
            padding: None,
            units: None,
            searchable: None,
            pin: None,
        }
    }

    pub fn conv(name: &str, out_channels: usize, kernel: usize, padding: usize) -> Self {
        Self {
            out_channels: Some(out_channels),
            kernel: Some(kernel),
            padding: Some(padding),
            ..Self::new(name, LayerType::Conv2d)
        }
    }

    pub fn dense(name: &str, units: usize) -> Self {
        Self {
            units: Some(units),
            ..Self::new(name, LayerType::Dense)
        }
    }

    pub fn pool(name: &str, kind: LayerType, kernel: usize) -> Self {
        Self {
            kernel: Some(kernel),
            ..Self::new(name, kind)
        }
    }

    pub fn from(mut self, source: &str) -> Self {
        self.input = Some(source.to_string());
        self
    }

    pub fn is_searchable(&self) -> bool {
        self.kind.has_weights() && self.searchable.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// `[height, width, channels]` of one sample.
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// `[h, w, c]`
    Image(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn numel(self) -> usize {
        match self {
            Shape::Image(h, w, c) => h * w * c,
            Shape::Flat(n) => n,
        }
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            Shape::Image(h, w, c) => vec![h, w, c],
            Shape::Flat(n) => vec![n],
        }
    }
}

/// Geometry of a weighted layer once its input shape is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightedGeometry {
    Conv {
        in_h: usize,
        in_w: usize,
        in_channels: usize,
        out_channels: usize,
        conv: ConvGeometry,
    },
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
}

impl WeightedGeometry {
    pub fn layer_kind(&self) -> LayerKind {
        match self {
            WeightedGeometry::Conv { .. } => LayerKind::Conv2d,
            WeightedGeometry::Dense { .. } => LayerKind::Dense,
        }
    }

    pub fn conv(&self) -> Option<ConvGeometry> {
        match self {
            WeightedGeometry::Conv { conv, .. } => Some(*conv),
            WeightedGeometry::Dense { .. } => None,
        }
    }

    /// Shape of the weight matrix: `[out, k·k·in]` or `[fan_out, fan_in]`.
    pub fn weight_shape(&self) -> [usize; 2] {
        match *self {
            WeightedGeometry::Conv {
                in_channels,
                out_channels,
                conv,
                ..
            } => [out_channels, conv.kernel * conv.kernel * in_channels],
            WeightedGeometry::Dense { fan_in, fan_out } => [fan_out, fan_in],
        }
    }

    pub fn fans(&self) -> (usize, usize) {
        match *self {
            WeightedGeometry::Conv {
                in_channels,
                out_channels,
                conv,
                ..
            } => {
                let taps = conv.kernel * conv.kernel;
                (taps * in_channels, taps * out_channels)
            }
            WeightedGeometry::Dense { fan_in, fan_out } => (fan_in, fan_out),
        }
    }

    /// Multiply-accumulates per sample: `oh·ow·out·k·k·in` or `fan_in·fan_out`.
    pub fn macs(&self) -> u64 {
        match *self {
            WeightedGeometry::Conv {
                in_h,
                in_w,
                in_channels,
                out_channels,
                conv,
            } => {
                let (oh, ow) = conv.window().output_hw(in_h, in_w).unwrap_or((0, 0));
                (oh * ow * out_channels * conv.kernel * conv.kernel * in_channels) as u64
            }
            WeightedGeometry::Dense { fan_in, fan_out } => (fan_in * fan_out) as u64,
        }
    }

    /// Weights excluding biases.
    pub fn weights(&self) -> u64 {
        let [o, q] = self.weight_shape();
        (o * q) as u64
    }
}

/// Index of the network input among layer sources.
pub const NETWORK_INPUT: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    /// Source layer indices, [`NETWORK_INPUT`] for the input tensor.
    pub sources: Vec<usize>,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub weighted: Option<WeightedGeometry>,
    /// Position among searchable layers.
    pub search_index: Option<usize>,
    pub pin: Option<ChoiceKey>,
}

/// A shape-checked network.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedNetwork {
    pub spec: NetworkSpec,
    pub layers: Vec<ResolvedLayer>,
}

/// Costs of one searchable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub n_ops: u64,
    pub n_weights: u64,
}

fn net_err(msg: impl Into<String>) -> Error {
    Error::Network(msg.into())
}

/// `N_OP,i` of a searchable layer given its per-sample input shape.
pub fn count_macs(layer: &LayerSpec, input: Shape) -> Result<u64> {
    Ok(weighted_geometry(layer, input)?.macs())
}

/// `N_W,i` of a searchable layer given its per-sample input shape.
pub fn count_weights(layer: &LayerSpec, input: Shape) -> Result<u64> {
    Ok(weighted_geometry(layer, input)?.weights())
}

pub fn weighted_geometry(layer: &LayerSpec, input: Shape) -> Result<WeightedGeometry> {
    match layer.kind {
        LayerType::Conv2d => {
            let Shape::Image(h, w, c) = input else {
                return Err(net_err(format!(
                    "layer `{}`: conv2d needs an image input, got {input:?}",
                    layer.name
                )));
            };
            let out_channels = need(layer, layer.out_channels, "out_channels")?;
            let kernel = need(layer, layer.kernel, "kernel")?;
            let conv = ConvGeometry {
                kernel,
                stride: layer.stride.unwrap_or(1),
                padding: layer.padding.unwrap_or(0),
            };
            if conv.window().output_hw(h, w).is_none() || out_channels == 0 {
                return Err(net_err(format!(
                    "layer `{}`: {conv:?} does not fit a {h}×{w} input",
                    layer.name
                )));
            }
            Ok(WeightedGeometry::Conv {
                in_h: h,
                in_w: w,
                in_channels: c,
                out_channels,
                conv,
            })
        }
        LayerType::Dense => {
            let Shape::Flat(fan_in) = input else {
                return Err(net_err(format!(
                    "layer `{}`: dense needs a flat input (add a flatten layer), got {input:?}",
                    layer.name
                )));
            };
            let fan_out = need(layer, layer.units, "units")?;
            if fan_out == 0 {
                return Err(net_err(format!("layer `{}`: units must be positive", layer.name)));
            }
            Ok(WeightedGeometry::Dense { fan_in, fan_out })
        }
        other => Err(net_err(format!(
            "layer `{}` of kind {other} has no weights to count",
            layer.name
        ))),
    }
}

fn need(layer: &LayerSpec, v: Option<usize>, key: &str) -> Result<usize> {
    v.ok_or_else(|| net_err(format!("layer `{}` ({}) needs `{key}`", layer.name, layer.kind)))
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| net_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Shape-checks the network end to end.
    pub fn resolve(&self) -> Result<ResolvedNetwork> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 || self.classes == 0 {
            return Err(net_err("input dimensions and class count must be positive"));
        }
        if self.layers.is_empty() {
            return Err(net_err("network has no layers"));
        }
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        let mut layers: Vec<ResolvedLayer> = Vec::with_capacity(self.layers.len());
        let mut search_count = 0;
        let input_shape = Shape::Image(h, w, c);
        for (i, spec) in self.layers.iter().enumerate() {
            if by_name.contains_key(spec.name.as_str()) {
                return Err(net_err(format!("duplicate layer name `{}`", spec.name)));
            }
            if spec.searchable == Some(true) && !spec.kind.has_weights() {
                return Err(net_err(format!(
                    "layer `{}`: only conv2d and dense layers can be searchable",
                    spec.name
                )));
            }
            let lookup = |name: &str| -> Result<usize> {
                by_name
                    .get(name)
                    .copied()
                    .ok_or_else(|| net_err(format!("layer `{}` reads unknown layer `{name}`", spec.name)))
            };
            let sources = if spec.kind == LayerType::Concat {
                if spec.inputs.len() < 2 {
                    return Err(net_err(format!("concat `{}` needs ≥2 inputs", spec.name)));
                }
                spec.inputs.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?
            } else {
                if !spec.inputs.is_empty() {
                    return Err(net_err(format!("only concat layers take `inputs` (`{}`)", spec.name)));
                }
                match &spec.input {
                    Some(n) => vec![lookup(n)?],
                    None if i == 0 => vec![NETWORK_INPUT],
                    None => vec![i - 1],
                }
            };
            let shape_of = |s: usize| {
                if s == NETWORK_INPUT {
                    input_shape
                } else {
                    layers[s].out_shape
                }
            };
            let in_shape = shape_of(sources[0]);
            let mut weighted = None;
            let out_shape = match spec.kind {
                LayerType::Conv2d | LayerType::Dense => {
                    let geom = weighted_geometry(spec, in_shape)?;
                    weighted = Some(geom);
                    match geom {
                        WeightedGeometry::Conv {
                            in_h,
                            in_w,
                            out_channels,
                            conv,
                            ..
                        } => {
                            let (oh, ow) = conv.window().output_hw(in_h, in_w).expect("checked");
                            Shape::Image(oh, ow, out_channels)
                        }
                        WeightedGeometry::Dense { fan_out, .. } => Shape::Flat(fan_out),
                    }
                }
                LayerType::Relu => in_shape,
                LayerType::Maxpool | LayerType::Avgpool => {
                    let Shape::Image(ih, iw, ic) = in_shape else {
                        return Err(net_err(format!("pool `{}` needs an image input", spec.name)));
                    };
                    let k = need(spec, spec.kernel, "kernel")?;
                    let window = crate::tensor::Window2d::square(
                        k,
                        spec.stride.unwrap_or(k),
                        spec.padding.unwrap_or(0),
                    );
                    if spec.padding.unwrap_or(0) >= k {
                        return Err(net_err(format!("pool `{}`: padding must be < kernel", spec.name)));
                    }
                    let (oh, ow) = window.output_hw(ih, iw).ok_or_else(|| {
                        net_err(format!("pool `{}` does not fit a {ih}×{iw} input", spec.name))
                    })?;
                    Shape::Image(oh, ow, ic)
                }
                LayerType::GlobalAvgpool => match in_shape {
                    Shape::Image(_, _, ic) => Shape::Flat(ic),
                    Shape::Flat(_) => {
                        return Err(net_err(format!("`{}` needs an image input", spec.name)))
                    }
                },
                LayerType::Flatten => Shape::Flat(in_shape.numel()),
                LayerType::Concat => {
                    let shapes: Vec<Shape> = sources.iter().map(|&s| shape_of(s)).collect();
                    concat_shape(&spec.name, &shapes)?
                }
            };
            let pin = match &spec.pin {
                Some(token) => {
                    if !spec.is_searchable() {
                        return Err(net_err(format!(
                            "layer `{}`: `pin` applies only to searchable layers",
                            spec.name
                        )));
                    }
                    Some(token.parse::<ChoiceKey>().map_err(net_err)?)
                }
                None => None,
            };
            let search_index = spec.is_searchable().then(|| {
                search_count += 1;
                search_count - 1
            });
            by_name.insert(&spec.name, i);
            layers.push(ResolvedLayer {
                spec: spec.clone(),
                sources,
                in_shape,
                out_shape,
                weighted,
                search_index,
                pin,
            });
        }
        let last = layers.last().expect("non-empty").out_shape;
        if last != Shape::Flat(self.classes) {
            return Err(net_err(format!(
                "network output {last:?} does not match {} classes",
                self.classes
            )));
        }
        Ok(ResolvedNetwork {
            spec: self.clone(),
            layers,
        })
    }
}

fn concat_shape(name: &str, shapes: &[Shape]) -> Result<Shape> {
    match shapes[0] {
        Shape::Image(h, w, _) => {
            let mut c = 0;
            for s in shapes {
                match *s {
                    Shape::Image(sh, sw, sc) if sh == h && sw == w => c += sc,
                    other => {
                        return Err(net_err(format!(
                            "concat `{name}`: {other:?} does not match spatial size {h}×{w}"
                        )))
                    }
                }
            }
            Ok(Shape::Image(h, w, c))
        }
        Shape::Flat(_) => {
            let mut n = 0;
            for s in shapes {
                match *s {
                    Shape::Flat(k) => n += k,
                    other => {
                        return Err(net_err(format!("concat `{name}`: cannot mix {other:?} with flat inputs")))
                    }
                }
            }
            Ok(Shape::Flat(n))
        }
    }
}

impl ResolvedNetwork {
    pub fn searchable(&self) -> impl Iterator<Item = &ResolvedLayer> {
        self.layers.iter().filter(|l| l.search_index.is_some())
    }

    pub fn num_searchable(&self) -> usize {
        self.searchable().count()
    }

    pub fn layer_costs(&self) -> Vec<LayerCost> {
        self.searchable()
            .map(|l| {
                let g = l.weighted.expect("searchable layers carry weights");
                LayerCost {
                    name: l.spec.name.clone(),
                    n_ops: g.macs(),
                    n_weights: g.weights(),
                }
            })
            .collect()
    }

    pub fn input_shape(&self) -> Shape {
        let [h, w, c] = self.spec.input;
        Shape::Image(h, w, c)
    }
}

/// Built-in network names.
pub const PRESETS: [&str; 2] = ["mini-cnn", "mini-squeeze"];

/// Builds a preset for `input = [h, w, c]` samples and `classes` outputs.
pub fn preset(name: &str, input: [usize; 3], classes: usize) -> Result<NetworkSpec> {
    let [h, w, _] = input;
    let layers = match name {
        "mini-cnn" => {
            let pooled = h >= 2 && w >= 2;
            let mut layers = vec![
                LayerSpec::conv("conv1", 4, 3, 1),
                LayerSpec::new("relu1", LayerType::Relu),
            ];
            if pooled {
                layers.push(LayerSpec::pool("pool1", LayerType::Maxpool, 2));
            }
            layers.extend([
                LayerSpec::conv("conv2", 8, 3, 1),
                LayerSpec::new("relu2", LayerType::Relu),
                LayerSpec::new("flatten", LayerType::Flatten),
                LayerSpec::dense("fc", classes),
            ]);
            layers
        }
        "mini-squeeze" => {
            let mut layers = vec![
                LayerSpec::conv("conv1", 8, 3, 1),
                LayerSpec::new("relu1", LayerType::Relu),
            ];
            if h >= 2 && w >= 2 {
                layers.push(LayerSpec::pool("pool1", LayerType::Maxpool, 2));
            }
            for f in 1..=3 {
                fire(&mut layers, f, 4, 8);
            }
            layers.push(LayerSpec::new("gap", LayerType::GlobalAvgpool));
            layers.push(LayerSpec::dense("fc", classes));
            layers
        }
        other => {
            return Err(net_err(format!(
                "unknown preset `{other}` (available: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(NetworkSpec {
        name: name.to_string(),
        input,
        classes,
        layers,
    })
}

/// Squeeze 1×1 → relu → {expand 1×1, expand 3×3} → relu → concat.
fn fire(layers: &mut Vec<LayerSpec>, index: usize, squeeze: usize, expand: usize) {
    let p = format!("fire{index}");
    let sq = format!("{p}_squeeze");
    let sq_relu = format!("{p}_squeeze_relu");
    layers.push(LayerSpec::conv(&sq, squeeze, 1, 0));
    layers.push(LayerSpec::new(&sq_relu, LayerType::Relu));
    layers.push(LayerSpec::conv(&format!("{p}_expand1"), expand, 1, 0).from(&sq_relu));
    layers.push(LayerSpec::new(&format!("{p}_expand1_relu"), LayerType::Relu));
    layers.push(LayerSpec::conv(&format!("{p}_expand3"), expand, 3, 1).from(&sq_relu));
    layers.push(LayerSpec::new(&format!("{p}_expand3_relu"), LayerType::Relu));
    layers.push(LayerSpec {
        inputs: vec![format!("{p}_expand1_relu"), format!("{p}_expand3_relu")],
        ..LayerSpec::new(&format!("{p}_concat"), LayerType::Concat)
    });
}
