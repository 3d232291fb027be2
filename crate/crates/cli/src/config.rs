//! Run configuration: a flat TOML key set layered as defaults < file < flags.
//!
//! Keys: `dataset`, `net`, `energy_table`, `out`, plus every search key
//! (`strategy`, `mode`, `lambda`, `gamma`, `cim_budget`, `epochs`,
//! `relearn_epochs`, `samples`, `lr_theta`, `lr_alpha`, `steepness`, `sign_scaling`,
//! `batch_size`, `patience`, `min_delta`, `seed`, `reinit`).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use opsearch_core::data::{load_dataset, Dataset};
use opsearch_core::energy::EnergyTable;
use opsearch_core::network::{preset, NetworkSpec, PRESETS};
use opsearch_core::search::SearchConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    /// Preset name or path to a network spec file.
    pub net: String,
    pub energy_table: Option<PathBuf>,
    pub out: PathBuf,
    pub search: SearchConfig,
}

const RUN_KEYS: [&str; 4] = ["dataset", "net", "energy_table", "out"];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic:blobs".into(),
            net: "mini-cnn".into(),
            energy_table: None,
            out: PathBuf::from("runs/latest"),
            search: SearchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        let mut cfg = RunConfig::default();
        let take_str = |table: &mut toml::Table, key: &str| -> Result<Option<String>> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s)),
                Some(other) => bail!("config key `{key}` must be a string, got {}", other.type_str()),
            }
        };
        if let Some(v) = take_str(&mut table, "dataset")? {
            cfg.dataset = v;
        }
        if let Some(v) = take_str(&mut table, "net")? {
            cfg.net = v;
        }
        if let Some(v) = take_str(&mut table, "energy_table")? {
            cfg.energy_table = Some(v.into());
        }
        if let Some(v) = take_str(&mut table, "out")? {
            cfg.out = v.into();
        }
        cfg.search = table.try_into().map_err(|e: toml::de::Error| anyhow!("config: {}", e.message()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Flat TOML with every key spelled out.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::new();
        table.insert("dataset".into(), self.dataset.clone().into());
        table.insert("net".into(), self.net.clone().into());
        if let Some(p) = &self.energy_table {
            table.insert("energy_table".into(), p.display().to_string().into());
        }
        table.insert("out".into(), self.out.display().to_string().into());
        let search = toml::Table::try_from(&self.search).expect("search config serializes");
        for (k, v) in search {
            debug_assert!(!RUN_KEYS.contains(&k.as_str()));
            table.insert(k, v);
        }
        toml::to_string(&table).expect("flat table serializes")
    }

    pub fn table(&self) -> Result<EnergyTable> {
        match &self.energy_table {
            Some(p) => EnergyTable::load(p).with_context(|| format!("energy table {}", p.display())),
            None => Ok(EnergyTable::default()),
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.dataset, self.search.seed).with_context(|| format!("dataset `{}`", self.dataset))
    }

    /// Resolves `net` against the dataset's sample shape and class count.
    pub fn network(&self, ds: &Dataset) -> Result<NetworkSpec> {
        resolve_net(&self.net, ds.shape, ds.classes)
    }
}

pub fn resolve_net(net: &str, input: [usize; 3], classes: usize) -> Result<NetworkSpec> {
    if PRESETS.contains(&net) {
        return Ok(preset(net, input, classes)?);
    }
    let path = Path::new(net);
    if path.exists() {
        return NetworkSpec::load(path).with_context(|| format!("network spec {}", path.display()));
    }
    bail!("`{net}` is neither a preset ({}) nor a spec file", PRESETS.join(", "))
}
