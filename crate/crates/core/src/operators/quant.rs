//! Per-tensor symmetric fixed-point quantization.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scale: f64,
}

impl QuantSpec {
    /// Largest representable magnitude, `2^(bits−1) − 1`.
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }
}

pub fn qmax(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// `scale = max|t| / qmax`; values round half away from zero and clamp to
/// `[−qmax, qmax]`. An all-zero input gets scale 1.
pub fn quantize(values: &[f64], bits: u32) -> Result<(Vec<i32>, QuantSpec)> {
    if !(2..=16).contains(&bits) {
        return Err(TensorError::Geometry {
            op: "quantize",
            msg: format!("unsupported bit width {bits}"),
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "quantize", index });
    }
    let q = qmax(bits);
    let max_abs = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / f64::from(q) };
    let ints = values
        .iter()
        .map(|v| ((v / scale).round() as i32).clamp(-q, q))
        .collect();
    Ok((ints, QuantSpec { bits, scale }))
}

pub fn dequantize(ints: &[i32], spec: &QuantSpec) -> Vec<f64> {
    ints.iter().map(|&i| f64::from(i) * spec.scale).collect()
}

/// Quantize-then-dequantize in one step.
pub fn fake_quantize(values: &[f64], bits: u32) -> Result<Vec<f64>> {
    let (ints, spec) = quantize(values, bits)?;
    Ok(dequantize(&ints, &spec))
}
