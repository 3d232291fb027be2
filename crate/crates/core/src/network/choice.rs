use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::operators::OperatorKind;

/// Where a layer's multiply-accumulates run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComputeMode {
    Digital8,
    CiM4,
}

impl ComputeMode {
    /// Inference precision of the mode.
    pub fn bits(self) -> u32 {
        match self {
            ComputeMode::Digital8 => 8,
            ComputeMode::CiM4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ComputeMode::Digital8 => "Digital8",
            ComputeMode::CiM4 => "CiM4",
        }
    }
}

impl fmt::Display for ComputeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComputeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "digital8" | "digital" | "d" | "d8" => Ok(ComputeMode::Digital8),
            "cim4" | "cim" | "c" => Ok(ComputeMode::CiM4),
            _ => Err(format!("unknown compute mode `{s}`")),
        }
    }
}

/// One entry of a layer's choice set: an operator run in a compute mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChoiceKey {
    pub operator: OperatorKind,
    pub mode: ComputeMode,
}

impl ChoiceKey {
    pub const fn new(operator: OperatorKind, mode: ComputeMode) -> Self {
        Self { operator, mode }
    }

    pub const fn digital(operator: OperatorKind) -> Self {
        Self::new(operator, ComputeMode::Digital8)
    }
}

/// Token form: `T`, `MF`, `B` for digital; `T:CiM`, `MF:CiM`, `B:CiM` for CiM.
impl fmt::Display for ChoiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            ComputeMode::Digital8 => f.write_str(self.operator.token()),
            ComputeMode::CiM4 => write!(f, "{}:CiM", self.operator.token()),
        }
    }
}

impl FromStr for ChoiceKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (op, mode) = match s.split_once(':') {
            Some((op, mode)) => (op, mode.parse::<ComputeMode>().map_err(|_| bad_token(s))?),
            None => (s, ComputeMode::Digital8),
        };
        let operator = op.parse::<OperatorKind>().map_err(|_| bad_token(s))?;
        Ok(Self { operator, mode })
    }
}

fn bad_token(s: &str) -> String {
    format!("malformed assignment token `{s}`")
}

/// Which choices every searchable layer may pick from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Three operators, all digital.
    #[default]
    Digital,
    /// Three operators × {digital, CiM}.
    Hybrid,
}

impl SearchMode {
    pub fn choices(self) -> Vec<ChoiceKey> {
        let modes: &[ComputeMode] = match self {
            SearchMode::Digital => &[ComputeMode::Digital8],
            SearchMode::Hybrid => &[ComputeMode::Digital8, ComputeMode::CiM4],
        };
        modes
            .iter()
            .flat_map(|&m| OperatorKind::ALL.iter().map(move |&op| ChoiceKey::new(op, m)))
            .collect()
    }
}

impl FromStr for SearchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "digital" => Ok(SearchMode::Digital),
            "hybrid" => Ok(SearchMode::Hybrid),
            _ => Err(format!("unknown search mode `{s}`")),
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMode::Digital => "digital",
            SearchMode::Hybrid => "hybrid",
        })
    }
}

/// Per-searchable-layer choices, in layer order.
pub type Assignment = Vec<ChoiceKey>;

pub fn format_assignment(assignment: &[ChoiceKey]) -> String {
    assignment
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses `T,MF,B:CiM,...`. An empty string is the empty assignment.
pub fn parse_assignment(s: &str) -> Result<Assignment, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}
