//! Accelerator cost model.
//!
//! Per-operation energies and per-weight CiM area for each
//! (operator, compute mode) choice, the differentiable expected-energy and
//! expected-CiM-usage terms used during search, and exact accounting for a
//! fixed assignment.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::network::{ChoiceKey, ComputeMode, LayerCost};
use crate::operators::OperatorKind;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// One row of the energy table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorChoice {
    pub operator: OperatorKind,
    pub mode: ComputeMode,
    /// Energy per multiply-accumulate, femtojoules.
    pub energy_fj: f64,
    /// CiM storage per weight, bits. Zero for digital.
    pub area_bits: u32,
}

impl OperatorChoice {
    pub fn key(&self) -> ChoiceKey {
        ChoiceKey::new(self.operator, self.mode)
    }
}

const DEFAULTS: [OperatorChoice; 6] = [
    OperatorChoice { operator: OperatorKind::Typical, mode: ComputeMode::Digital8, energy_fj: 295.7, area_bits: 0 },
    OperatorChoice { operator: OperatorKind::MultiplicationFree, mode: ComputeMode::Digital8, energy_fj: 64.0, area_bits: 0 },
    OperatorChoice { operator: OperatorKind::Binary, mode: ComputeMode::Digital8, energy_fj: 32.0, area_bits: 0 },
    OperatorChoice { operator: OperatorKind::Typical, mode: ComputeMode::CiM4, energy_fj: 51.78, area_bits: 4 },
    OperatorChoice { operator: OperatorKind::MultiplicationFree, mode: ComputeMode::CiM4, energy_fj: 12.95, area_bits: 4 },
    OperatorChoice { operator: OperatorKind::Binary, mode: ComputeMode::CiM4, energy_fj: 6.47, area_bits: 1 },
];

pub const TABLE_HEADER: [&str; 4] = ["operator", "mode", "energy_fj", "area_bits"];

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    entries: Vec<OperatorChoice>,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            entries: DEFAULTS.to_vec(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct TableRow {
    operator: String,
    mode: String,
    energy_fj: f64,
    area_bits: u32,
}

impl EnergyTable {
    pub fn entries(&self) -> &[OperatorChoice] {
        &self.entries
    }

    pub fn get(&self, key: ChoiceKey) -> Result<&OperatorChoice> {
        self.entries
            .iter()
            .find(|e| e.key() == key)
            .ok_or_else(|| Error::Energy(format!("no energy entry for {key}")))
    }

    pub fn energy(&self, key: ChoiceKey) -> Result<f64> {
        Ok(self.get(key)?.energy_fj)
    }

    pub fn area(&self, key: ChoiceKey) -> Result<u32> {
        Ok(self.get(key)?.area_bits)
    }

    /// Replaces or adds an entry after validating it.
    pub fn set(&mut self, entry: OperatorChoice) -> Result<()> {
        validate(&entry)?;
        match self.entries.iter_mut().find(|e| e.key() == entry.key()) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    /// Defaults overridden by the rows of a CSV table with header
    /// `operator,mode,energy_fj,area_bits`.
    pub fn from_csv_overrides(text: &str) -> Result<Self> {
        let mut table = Self::default();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Energy(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != TABLE_HEADER {
            return Err(Error::Energy(format!(
                "expected header `{}`, found `{}`",
                TABLE_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        for (i, row) in reader.deserialize::<TableRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Energy(format!("line {line}: {e}")))?;
            let operator = OperatorKind::from_str(&row.operator)
                .map_err(|e| Error::Energy(format!("line {line}: {e}")))?;
            let mode = ComputeMode::from_str(&row.mode)
                .map_err(|e| Error::Energy(format!("line {line}: {e}")))?;
            table
                .set(OperatorChoice {
                    operator,
                    mode,
                    energy_fj: row.energy_fj,
                    area_bits: row.area_bits,
                })
                .map_err(|e| Error::Energy(format!("line {line}: {e}")))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv_overrides(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = TABLE_HEADER.join(",");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.operator, e.mode, e.energy_fj, e.area_bits));
        }
        out
    }

    /// Largest per-weight CiM area in the table.
    pub fn max_area(&self) -> u32 {
        self.entries.iter().map(|e| e.area_bits).max().unwrap_or(0)
    }
}

fn validate(e: &OperatorChoice) -> Result<()> {
    if !(e.energy_fj.is_finite() && e.energy_fj > 0.0) {
        return Err(Error::Energy(format!("{}: energy must be positive", e.key())));
    }
    let digital = e.mode == ComputeMode::Digital8;
    if digital != (e.area_bits == 0) {
        return Err(Error::Energy(format!(
            "{}: area must be zero exactly for digital choices",
            e.key()
        )));
    }
    Ok(())
}

/// `Σ N_OP,i · E(Typical, Digital8)`: the all-typical digital reference.
pub fn baseline_energy(costs: &[LayerCost], table: &EnergyTable) -> Result<f64> {
    let e = table.energy(ChoiceKey::digital(OperatorKind::Typical))?;
    Ok(costs.iter().map(|c| c.n_ops as f64 * e).sum())
}

/// Weight-bits of the network at the widest CiM precision; a budget this
/// large never binds.
pub fn total_weight_bits(costs: &[LayerCost], table: &EnergyTable) -> u64 {
    costs.iter().map(|c| c.n_weights).sum::<u64>() * u64::from(table.max_area())
}

fn check_layers(alphas: &[Var], choices: &[Vec<ChoiceKey>], costs: &[LayerCost]) -> Result<()> {
    if alphas.len() != costs.len() || choices.len() != costs.len() {
        return Err(Error::Energy(format!(
            "{} alpha vectors / {} choice sets for {} layers",
            alphas.len(),
            choices.len(),
            costs.len()
        )));
    }
    Ok(())
}

/// `Σ_i weight_i · Σ_j softmax(α_i)_j · value_j`.
fn expected_sum(
    g: &mut Graph,
    alphas: &[Var],
    per_choice: &[Vec<f64>],
    layer_weight: impl Fn(usize) -> f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, (&alpha, values)) in alphas.iter().zip(per_choice).enumerate() {
        let probs = g.softmax(alpha)?;
        if g.value(probs).numel() != values.len() {
            return Err(Error::Energy(format!(
                "layer {i}: {} logits for {} choices",
                g.value(probs).numel(),
                values.len()
            )));
        }
        let v = g.constant(Tensor::vector(values.clone()));
        let weighted = g.mul(probs, v)?;
        let s = g.sum(weighted);
        let term = g.scale(s, layer_weight(i));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// `Σ_i N_OP,i Σ_j softmax(α_ij) E_OP,j` in femtojoules.
pub fn expected_energy(
    g: &mut Graph,
    alphas: &[Var],
    choices: &[Vec<ChoiceKey>],
    costs: &[LayerCost],
    table: &EnergyTable,
) -> Result<Var> {
    check_layers(alphas, choices, costs)?;
    let energies = choices
        .iter()
        .map(|set| set.iter().map(|&k| table.energy(k)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    expected_sum(g, alphas, &energies, |i| costs[i].n_ops as f64)
}

/// `Σ_i N_W,i Σ_j softmax(α_ij) A_j` in bits.
pub fn expected_cim_usage(
    g: &mut Graph,
    alphas: &[Var],
    choices: &[Vec<ChoiceKey>],
    costs: &[LayerCost],
    table: &EnergyTable,
) -> Result<Var> {
    check_layers(alphas, choices, costs)?;
    let areas = choices
        .iter()
        .map(|set| set.iter().map(|&k| table.area(k).map(f64::from)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    expected_sum(g, alphas, &areas, |i| costs[i].n_weights as f64)
}

/// `Σ_i A_j(i) · N_W,i`.
pub fn assignment_cim_usage(assignment: &[ChoiceKey], costs: &[LayerCost], table: &EnergyTable) -> Result<u64> {
    check_assignment_len(assignment, costs)?;
    assignment
        .iter()
        .zip(costs)
        .map(|(&k, c)| Ok(u64::from(table.area(k)?) * c.n_weights))
        .sum()
}

/// `γ·(B − usage)²`.
pub fn lagrangian_penalty(g: &mut Graph, gamma: f64, budget: f64, usage: Var) -> Result<Var> {
    let b = g.constant(Tensor::scalar(budget));
    let d = g.sub(b, usage)?;
    let sq = g.mul(d, d)?;
    Ok(g.scale(sq, gamma))
}

fn check_assignment_len(assignment: &[ChoiceKey], costs: &[LayerCost]) -> Result<()> {
    if assignment.len() != costs.len() {
        return Err(Error::Energy(format!(
            "assignment has {} entries for {} searchable layers",
            assignment.len(),
            costs.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub choice: String,
    pub n_ops: u64,
    pub n_weights: u64,
    pub energy_fj: f64,
    pub cim_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub total_fj: f64,
    pub baseline_fj: f64,
    /// `total / baseline`; 1.0 for an all-typical digital assignment.
    pub normalized: f64,
    pub cim_bits: u64,
    pub budget_bits: Option<u64>,
    /// `cim_bits ≤ budget_bits`; true without a budget.
    pub feasible: bool,
}

impl EnergyReport {
    /// Difference between the budget and the usage, in bits.
    pub fn budget_residual(&self) -> Option<i64> {
        self.budget_bits.map(|b| b as i64 - self.cim_bits as i64)
    }
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer,choice,n_ops,n_weights,energy_fj,cim_bits")?;
        for l in &self.layers {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                l.name, l.choice, l.n_ops, l.n_weights, l.energy_fj, l.cim_bits
            )?;
        }
        writeln!(f, "total_fj={}", self.total_fj)?;
        writeln!(f, "baseline_fj={}", self.baseline_fj)?;
        writeln!(f, "normalized={}", self.normalized)?;
        writeln!(f, "cim_bits={}", self.cim_bits)?;
        match self.budget_bits {
            Some(b) => writeln!(f, "budget_bits={b}")?,
            None => writeln!(f, "budget_bits=none")?,
        }
        write!(f, "feasible={}", self.feasible)
    }
}

/// Exact energy and CiM usage of a fixed assignment.
pub fn assignment_energy(
    assignment: &[ChoiceKey],
    costs: &[LayerCost],
    table: &EnergyTable,
    budget_bits: Option<u64>,
) -> Result<EnergyReport> {
    check_assignment_len(assignment, costs)?;
    let mut layers = Vec::with_capacity(costs.len());
    for (&key, cost) in assignment.iter().zip(costs) {
        let entry = table.get(key)?;
        layers.push(LayerEnergy {
            name: cost.name.clone(),
            choice: key.to_string(),
            n_ops: cost.n_ops,
            n_weights: cost.n_weights,
            energy_fj: cost.n_ops as f64 * entry.energy_fj,
            cim_bits: u64::from(entry.area_bits) * cost.n_weights,
        });
    }
    let total_fj = layers.iter().map(|l| l.energy_fj).sum();
    let cim_bits = layers.iter().map(|l| l.cim_bits).sum();
    let baseline_fj = baseline_energy(costs, table)?;
    let normalized = if baseline_fj > 0.0 { total_fj / baseline_fj } else { 0.0 };
    Ok(EnergyReport {
        layers,
        total_fj,
        baseline_fj,
        normalized,
        cim_bits,
        budget_bits,
        feasible: budget_bits.is_none_or(|b| cim_bits <= b),
    })
}

/// Regularizer settings for [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub lambda: f64,
    /// `(gamma, budget_bits)`; present only in hybrid mode.
    pub cim: Option<(f64, f64)>,
}

/// The pieces of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// Expected energy / all-typical digital baseline.
    pub energy_norm: Var,
    /// `γ·((B − usage)/T)²` with `T` the total weight-bits; absent in digital mode.
    pub penalty: Option<Var>,
    pub cim_usage: Option<Var>,
}

/// `L_acc + λ·E_expected/E_baseline [+ γ·((B − U_expected)/T)²]`.
///
/// Normalizing by the baseline energy `E_baseline` and total weight-bits `T`
/// makes λ and γ dimensionless, so the same values transfer between networks.
pub fn total_loss(
    g: &mut Graph,
    acc_loss: Var,
    alphas: &[Var],
    choices: &[Vec<ChoiceKey>],
    costs: &[LayerCost],
    table: &EnergyTable,
    reg: &Regularizer,
) -> Result<LossParts> {
    let energy = expected_energy(g, alphas, choices, costs, table)?;
    let baseline = baseline_energy(costs, table)?;
    let energy_norm = g.scale(energy, if baseline > 0.0 { 1.0 / baseline } else { 0.0 });
    let weighted = g.scale(energy_norm, reg.lambda);
    let mut total = g.add(acc_loss, weighted)?;
    let (mut penalty, mut cim_usage) = (None, None);
    if let Some((gamma, budget)) = reg.cim {
        let usage = expected_cim_usage(g, alphas, choices, costs, table)?;
        let t = total_weight_bits(costs, table).max(1) as f64;
        let usage_frac = g.scale(usage, 1.0 / t);
        let p = lagrangian_penalty(g, gamma, budget / t, usage_frac)?;
        total = g.add(total, p)?;
        penalty = Some(p);
        cim_usage = Some(usage);
    }
    Ok(LossParts {
        total,
        energy_norm,
        penalty,
        cim_usage,
    })
}

/// A CiM budget as given on the command line: raw bits or a percentage of
/// [`total_weight_bits`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Budget {
    Bits(u64),
    Percent(f64),
}

impl Budget {
    pub fn resolve(&self, total_bits: u64) -> u64 {
        match *self {
            Budget::Bits(b) => b,
            Budget::Percent(p) => (p / 100.0 * total_bits as f64).floor() as u64,
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(p) = s.strip_suffix('%') {
            let v: f64 = p.trim().parse().map_err(|_| format!("bad budget percentage `{s}`"))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(format!("budget percentage `{s}` outside 0–100"));
            }
            Ok(Budget::Percent(v))
        } else {
            s.parse::<u64>()
                .map(Budget::Bits)
                .map_err(|_| format!("bad budget `{s}` (bits or N%)"))
        }
    }
}

impl From<Budget> for String {
    fn from(b: Budget) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for Budget {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Bits(b) => write!(f, "{b}"),
            Budget::Percent(p) => write!(f, "{p}%"),
        }
    }
}
