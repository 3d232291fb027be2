//! Search strategies: single-level, bi-level, sequential and variational,
//! each in digital or hybrid (digital + CiM) mode, plus finalize-and-relearn.

mod finalize;
mod phases;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::{assignment_energy, total_weight_bits, Budget, EnergyReport, EnergyTable, Regularizer};
use crate::network::{Assignment, ChoiceKey, Model, ModelSnapshot, ResolvedNetwork, SearchMode};
use crate::operators::CorrelationOptions;
use crate::train::Objective;
use crate::{Error, Result};

pub use finalize::Finalized;
use finalize::finalize;
pub use phases::alpha_terms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Single,
    Bilevel,
    Sequential,
    Variational,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Single,
        Strategy::Bilevel,
        Strategy::Sequential,
        Strategy::Variational,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::Bilevel => "bilevel",
            Strategy::Sequential => "sequential",
            Strategy::Variational => "variational",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (single, bilevel, sequential, variational)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub strategy: Strategy,
    pub mode: SearchMode,
    pub lambda: f64,
    pub gamma: f64,
    /// CiM capacity in weight-bits or as a percentage; hybrid mode only.
    pub cim_budget: Option<Budget>,
    /// Search epochs (per round for sequential search).
    pub epochs: usize,
    pub relearn_epochs: usize,
    /// Population size for variational search.
    pub samples: usize,
    pub lr_theta: f64,
    pub lr_alpha: f64,
    pub steepness: f64,
    /// Scale weight signs in binary and multiplication-free layers by each
    /// filter's mean `|w|`, keeping outputs on the scale of the typical path.
    pub sign_scaling: bool,
    pub batch_size: usize,
    /// Early-stop patience in epochs; 0 disables early stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    /// Re-initialize θ before relearning instead of warm-starting.
    pub reinit: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Single,
            mode: SearchMode::Digital,
            lambda: 0.1,
            gamma: 1.0,
            cim_budget: None,
            epochs: 30,
            relearn_epochs: 10,
            samples: 16,
            lr_theta: 1e-3,
            lr_alpha: 3e-3,
            steepness: 10.0,
            sign_scaling: true,
            batch_size: 32,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
            reinit: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and ≥ 0, got {}", self.lambda));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!("gamma must be finite and ≥ 0, got {}", self.gamma));
        }
        for (name, lr) in [("lr_theta", self.lr_theta), ("lr_alpha", self.lr_alpha)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be finite and ≥ 0, got {lr}"));
            }
        }
        if !(self.steepness.is_finite() && self.steepness > 0.0) {
            return bad(format!("steepness must be positive, got {}", self.steepness));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.strategy == Strategy::Variational && self.samples == 0 {
            return bad("variational search needs samples ≥ 1".into());
        }
        match (self.mode, self.cim_budget) {
            (SearchMode::Hybrid, None) => bad("hybrid mode needs a CiM budget".into()),
            (SearchMode::Digital, Some(_)) => bad("a CiM budget only applies in hybrid mode".into()),
            _ => Ok(()),
        }
    }

    /// Budget in bits for a network, if hybrid.
    pub fn budget_bits(&self, net: &ResolvedNetwork, table: &EnergyTable) -> Option<u64> {
        self.cim_budget
            .filter(|_| self.mode == SearchMode::Hybrid)
            .map(|b| b.resolve(total_weight_bits(&net.layer_costs(), table)))
    }

    fn correlation(&self) -> CorrelationOptions {
        CorrelationOptions {
            steepness: self.steepness,
            sign_scaling: self.sign_scaling,
            ..Default::default()
        }
    }
}

/// Seed for sub-stream `index` of `base` (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_RELEARN: u64 = 3;

/// One line of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// `search`, `round-<r>` (sequential) or `relearn`.
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Expected energy of the current α over the all-typical digital baseline.
    pub expected_energy: f64,
    /// `γ·((B − U)/T)²` for the current α; hybrid mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_cim_bits: Option<f64>,
    /// softmax(α) per searchable layer.
    pub alpha: Vec<Vec<f64>>,
}

/// One freeze of sequential search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub layer: String,
    pub layer_index: usize,
    pub choice: String,
    pub probability: f64,
    /// Fixed choice per searchable layer after this round.
    pub fixed: Vec<Option<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub test_acc: f64,
    /// Test accuracy with 8-bit digital / 4-bit CiM fake quantization.
    pub test_acc_quantized: f64,
    pub relearn_epochs: usize,
}

/// A sampled variational candidate after relearning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub seed: u64,
    pub assignment: String,
    pub val_acc: f64,
    pub test_acc: f64,
    pub test_acc_quantized: f64,
    pub energy_fj: f64,
    pub energy_norm: f64,
    pub cim_bits: u64,
    pub feasible: bool,
    pub winner: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub config: SearchConfig,
    pub layer_names: Vec<String>,
    pub assignment: Assignment,
    pub metrics: FinalMetrics,
    pub energy: EnergyReport,
    /// False when the winner exceeds the CiM budget.
    pub feasible: bool,
    pub population: Vec<Candidate>,
    pub history: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    pub model: ModelSnapshot,
}

/// Shared, read-only inputs of a run.
pub(crate) struct Context<'a> {
    pub ds: &'a Dataset,
    pub table: &'a EnergyTable,
    pub cfg: &'a SearchConfig,
    pub costs: Vec<crate::network::LayerCost>,
    pub budget_bits: Option<u64>,
}

impl Context<'_> {
    pub fn objective(&self) -> Objective<'_> {
        Objective {
            costs: &self.costs,
            table: self.table,
            reg: Regularizer {
                lambda: self.cfg.lambda,
                cim: self.budget_bits.map(|b| (self.cfg.gamma, b as f64)),
            },
        }
    }

    pub fn report(&self, assignment: &[ChoiceKey]) -> Result<EnergyReport> {
        assignment_energy(assignment, &self.costs, self.table, self.budget_bits)
    }
}

fn check_classes(net: &ResolvedNetwork, ds: &Dataset) -> Result<()> {
    if net.spec.classes != ds.classes {
        return Err(Error::Config(format!(
            "network `{}` has {} classes but the dataset has {}",
            net.spec.name, net.spec.classes, ds.classes
        )));
    }
    if net.spec.input != ds.shape {
        return Err(Error::Config(format!(
            "network input {:?} does not match sample shape {:?}",
            net.spec.input, ds.shape
        )));
    }
    Ok(())
}

fn prepare<'a>(
    net: &ResolvedNetwork,
    ds: &'a Dataset,
    table: &'a EnergyTable,
    cfg: &'a SearchConfig,
) -> Result<Context<'a>> {
    cfg.validate()?;
    check_classes(net, ds)?;
    Ok(Context {
        ds,
        table,
        cfg,
        costs: net.layer_costs(),
        budget_bits: cfg.budget_bits(net, table),
    })
}

/// Runs the configured strategy end to end.
pub fn search(net: ResolvedNetwork, ds: &Dataset, table: &EnergyTable, cfg: &SearchConfig) -> Result<SearchOutcome> {
    let ctx = prepare(&net, ds, table, cfg)?;
    let mut model = Model::new(
        net,
        cfg.mode,
        cfg.correlation(),
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT)),
    )?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let relearn_base = derive_seed(cfg.seed, STREAM_RELEARN);

    log::info!(
        "{} search, {} mode, λ={}, {} searchable layers",
        cfg.strategy,
        cfg.mode,
        cfg.lambda,
        model.mixtures.len()
    );
    let mut rounds = Vec::new();
    let mut history = match cfg.strategy {
        Strategy::Single | Strategy::Variational => phases::joint(&ctx, &mut model, &mut shuffle, "search")?,
        Strategy::Bilevel => phases::bilevel(&ctx, &mut model, &mut shuffle)?,
        Strategy::Sequential => {
            let (h, r) = phases::sequential(&ctx, &mut model, &mut shuffle)?;
            rounds = r;
            h
        }
    };

    if cfg.strategy == Strategy::Variational {
        let mut sampler = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SAMPLE));
        let assignments: Vec<Assignment> = (0..cfg.samples).map(|_| model.sample(&mut sampler)).collect();
        let (winner, population) = finalize::population(&ctx, &model, &assignments, relearn_base)?;
        history.extend(winner.history.iter().cloned());
        return Ok(outcome(&ctx, winner, history, rounds, population));
    }

    let assignment = model.argmax();
    let done = finalize(&ctx, model, &assignment, derive_seed(relearn_base, 0))?;
    history.extend(done.history.iter().cloned());
    Ok(outcome(&ctx, done, history, rounds, Vec::new()))
}

/// Trains a fixed assignment from scratch for `cfg.relearn_epochs`, with the
/// same initialization as [`search`]. Used for uniform baselines.
pub fn train_assignment(
    net: ResolvedNetwork,
    ds: &Dataset,
    table: &EnergyTable,
    cfg: &SearchConfig,
    assignment: &[ChoiceKey],
) -> Result<SearchOutcome> {
    let ctx = prepare(&net, ds, table, cfg)?;
    let model = Model::new(
        net,
        cfg.mode,
        cfg.correlation(),
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT)),
    )?;
    let seed = derive_seed(derive_seed(cfg.seed, STREAM_RELEARN), 0);
    let done = finalize(&ctx, model, assignment, seed)?;
    let history = done.history.clone();
    Ok(outcome(&ctx, done, history, Vec::new(), Vec::new()))
}

fn outcome(
    ctx: &Context<'_>,
    done: Finalized,
    history: Vec<EpochRecord>,
    rounds: Vec<RoundRecord>,
    population: Vec<Candidate>,
) -> SearchOutcome {
    SearchOutcome {
        config: ctx.cfg.clone(),
        layer_names: done.model.layer_names(),
        feasible: done.energy.feasible,
        assignment: done.assignment,
        metrics: done.metrics,
        energy: done.energy,
        population,
        history,
        rounds,
        model: done.model.snapshot(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let bad = SearchConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let hybrid = SearchConfig {
            mode: SearchMode::Hybrid,
            ..Default::default()
        };
        assert!(hybrid.validate().is_err());
        let hybrid = SearchConfig {
            mode: SearchMode::Hybrid,
            cim_budget: Some(Budget::Percent(25.0)),
            ..Default::default()
        };
        assert!(hybrid.validate().is_ok());
        let v = SearchConfig {
            strategy: Strategy::Variational,
            samples: 0,
            ..Default::default()
        };
        assert!(v.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = SearchConfig {
            strategy: Strategy::Sequential,
            mode: SearchMode::Hybrid,
            cim_budget: Some(Budget::Percent(25.0)),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("cim_budget = \"25%\""), "{text}");
        assert_eq!(toml::from_str::<SearchConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<SearchConfig>("lamda = 1.0").is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), s.len());
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }

    #[test]
    fn strategy_tokens() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("darts".parse::<Strategy>().is_err());
    }
}
