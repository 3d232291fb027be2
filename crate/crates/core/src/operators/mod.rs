//! The three correlation operators and their layer-level application.
//!
//! * typical: `Σ xᵢ·wᵢ`
//! * multiplication-free: `Σ sign(xᵢ)·|wᵢ| + sign(wᵢ)·|xᵢ|`
//! * binary: `Σ xᵢ·binarize(wᵢ)`
//!
//! `sign(0)` is `+1` throughout. Non-differentiable pieces use surrogate
//! gradients from [`Graph`]: a Gaussian for `sign`, `tanh` for `abs`, and a
//! clipped straight-through estimator for `binarize`.

pub mod quant;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result, Tensor, TensorError, Var, Window2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    Typical,
    #[serde(rename = "MF")]
    MultiplicationFree,
    Binary,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 3] = [
        OperatorKind::Typical,
        OperatorKind::MultiplicationFree,
        OperatorKind::Binary,
    ];

    /// Short token used in assignment strings: `T`, `MF`, `B`.
    pub fn token(self) -> &'static str {
        match self {
            OperatorKind::Typical => "T",
            OperatorKind::MultiplicationFree => "MF",
            OperatorKind::Binary => "B",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Typical => "Typical",
            OperatorKind::MultiplicationFree => "MF",
            OperatorKind::Binary => "Binary",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t" | "typical" => Ok(OperatorKind::Typical),
            "mf" | "mulfree" | "multiplicationfree" | "multiplication-free" => {
                Ok(OperatorKind::MultiplicationFree)
            }
            "b" | "binary" => Ok(OperatorKind::Binary),
            _ => Err(format!("unknown operator `{s}`")),
        }
    }
}

/// Knobs for the surrogate gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOptions {
    /// Steepness `k` of the sign/abs surrogates.
    pub steepness: f64,
    /// Straight-through window `|w| ≤ clip` for binarize.
    pub ste_clip: f64,
    /// Multiply every weight sign (binary filters, and `sign(w)` in f_M) by
    /// its filter's mean `|w|`. Layer ops only; the scale is a constant in
    /// the backward pass.
    pub sign_scaling: bool,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self {
            steepness: 10.0,
            ste_clip: 1.0,
            sign_scaling: false,
        }
    }
}

fn check_same_len(g: &Graph, op: &'static str, x: Var, w: Var) -> Result<()> {
    if g.value(x).numel() != g.value(w).numel() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(w).to_vec(),
        });
    }
    Ok(())
}

/// `f_T(x, w)` for two equal-length vectors.
pub fn op_typical(g: &mut Graph, x: Var, w: Var, _opts: &CorrelationOptions) -> Result<Var> {
    check_same_len(g, "op_typical", x, w)?;
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// `f_M(x, w)` for two equal-length vectors.
pub fn op_mulfree(g: &mut Graph, x: Var, w: Var, opts: &CorrelationOptions) -> Result<Var> {
    check_same_len(g, "op_mulfree", x, w)?;
    let k = opts.steepness;
    let sx = g.surrogate_sign(x, k);
    let aw = g.surrogate_abs(w, k);
    let sw = g.surrogate_sign(w, k);
    let ax = g.surrogate_abs(x, k);
    let left = g.mul(sx, aw)?;
    let right = g.mul(sw, ax)?;
    let total = g.add(left, right)?;
    Ok(g.sum(total))
}

/// `f_B(x, w)` for two equal-length vectors.
pub fn op_binary(g: &mut Graph, x: Var, w: Var, opts: &CorrelationOptions) -> Result<Var> {
    check_same_len(g, "op_binary", x, w)?;
    let b = g.ste_binarize(w, opts.ste_clip);
    let p = g.mul(x, b)?;
    Ok(g.sum(p))
}

pub fn op_vector(
    g: &mut Graph,
    kind: OperatorKind,
    x: Var,
    w: Var,
    opts: &CorrelationOptions,
) -> Result<Var> {
    match kind {
        OperatorKind::Typical => op_typical(g, x, w, opts),
        OperatorKind::MultiplicationFree => op_mulfree(g, x, w, opts),
        OperatorKind::Binary => op_binary(g, x, w, opts),
    }
}

/// Applies `kind` between every row of `rows[p×q]` and every filter of
/// `weights[o×q]`, giving `[p×o]`.
pub fn correlate_rows(
    g: &mut Graph,
    kind: OperatorKind,
    rows: Var,
    weights: Var,
    opts: &CorrelationOptions,
) -> Result<Var> {
    let k = opts.steepness;
    match kind {
        OperatorKind::Typical => {
            let wt = g.transpose(weights)?;
            g.matmul(rows, wt)
        }
        OperatorKind::MultiplicationFree => {
            // Σ sign(x)|w| + sign(w)|x| splits into two ordinary products.
            let sx = g.surrogate_sign(rows, k);
            let mut sw = g.surrogate_sign(weights, k);
            if opts.sign_scaling {
                let fs = g.constant(filter_scales(g.value(weights)));
                sw = g.mul(sw, fs)?;
            }
            let aw = g.surrogate_abs(weights, k);
            let awt = g.transpose(aw)?;
            let left = g.matmul(sx, awt)?;
            let ax = g.surrogate_abs(rows, k);
            let swt = g.transpose(sw)?;
            let right = g.matmul(ax, swt)?;
            g.add(left, right)
        }
        OperatorKind::Binary => {
            let mut b = g.ste_binarize(weights, opts.ste_clip);
            if opts.sign_scaling {
                let scale = filter_scales(g.value(weights));
                let s = g.constant(scale);
                b = g.mul(b, s)?;
            }
            let bt = g.transpose(b)?;
            g.matmul(rows, bt)
        }
    }
}

/// Per-filter mean `|w|`, broadcast to the weight shape.
fn filter_scales(w: &Tensor) -> Tensor {
    let (o, q) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(o * q);
    for row in w.data().chunks(q.max(1)) {
        let mean = row.iter().map(|v| v.abs()).sum::<f64>() / q.max(1) as f64;
        out.extend(std::iter::repeat_n(mean, q));
    }
    Tensor::new(vec![o, q], out).expect("same shape as weights")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv2d,
}

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn window(&self) -> Window2d {
        Window2d::square(self.kernel, self.stride, self.padding)
    }
}

/// Runs one layer with a fixed operator.
///
/// Dense: `input[n×f]`, `weights[o×f]` → `[n×o]`.
/// Conv2d: `input[n×h×w×c]` (NHWC), `weights[o×(k·k·c)]` with columns
/// ordered `(ky, kx, c)` → `[n×oh×ow×o]`. The bias is added after the
/// correlation in full precision.
#[allow(clippy::too_many_arguments)]
pub fn apply_operator(
    g: &mut Graph,
    kind: OperatorKind,
    layer: LayerKind,
    input: Var,
    weights: Var,
    bias: Option<Var>,
    geometry: Option<ConvGeometry>,
    opts: &CorrelationOptions,
) -> Result<Var> {
    match layer {
        LayerKind::Dense => {
            let (in_shape, w_shape) = (g.shape(input).to_vec(), g.shape(weights).to_vec());
            if in_shape.len() != 2 || w_shape.len() != 2 || in_shape[1] != w_shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "dense",
                    lhs: in_shape,
                    rhs: w_shape,
                });
            }
            let y = correlate_rows(g, kind, input, weights, opts)?;
            match bias {
                Some(b) => g.add_bias(y, b),
                None => Ok(y),
            }
        }
        LayerKind::Conv2d => {
            let geom = geometry.ok_or_else(|| TensorError::Geometry {
                op: "conv2d",
                msg: "missing convolution geometry".into(),
            })?;
            let in_shape = g.shape(input).to_vec();
            let w_shape = g.shape(weights).to_vec();
            let [n, h, w, c] = in_shape[..] else {
                return Err(TensorError::BadRank {
                    op: "conv2d",
                    expected: 4,
                    shape: in_shape,
                });
            };
            if w_shape.len() != 2 || w_shape[1] != geom.kernel * geom.kernel * c {
                return Err(TensorError::Geometry {
                    op: "conv2d",
                    msg: format!(
                        "weights {w_shape:?} do not match a {k}×{k} kernel over {c} channels",
                        k = geom.kernel
                    ),
                });
            }
            let window = geom.window();
            let (oh, ow) = window.output_hw(h, w).ok_or_else(|| TensorError::Geometry {
                op: "conv2d",
                msg: format!("{geom:?} does not fit a {h}×{w} input"),
            })?;
            let cols = g.im2col(input, window)?;
            let mut y = correlate_rows(g, kind, cols, weights, opts)?;
            if let Some(b) = bias {
                y = g.add_bias(y, b)?;
            }
            g.reshape(y, &[n, oh, ow, w_shape[0]])
        }
    }
}
