use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sliding-window geometry over NHWC activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window2d {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window2d {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    /// Output spatial size for an `h×w` input, or `None` if the window does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return None;
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddBias(Var, Var),
    Softmax(Var),
    Index(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SurrogateSign(Var, f64),
    SurrogateAbs(Var, f64),
    SteBinarize(Var, f64),
    Im2Col {
        input: Var,
        window: Window2d,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: Window2d,
    },
    GlobalAvgPool(Var),
    ConcatLast(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Operations recorded in creation order, which is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of every `requires_grad` leaf after one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf registered with `requires_grad`; zero-filled when
    /// the leaf did not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

fn broadcast_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (n, m) if n == m => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        _ => b.iter().map(|&y| f(a[0], y)).collect(),
    }
}

/// Reduces `grad` onto an operand of `len` values (sums when it was broadcast).
fn reduce_to(grad: Vec<f64>, len: usize) -> Vec<f64> {
    if grad.len() == len {
        grad
    } else {
        vec![grad.iter().sum()]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor. Leaves with `requires_grad` get a gradient
    /// from every [`Graph::backward`] call.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shapes(name, va, vb)?;
        let data = zip_broadcast(va.data(), vb.data(), f);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Exact sign in the forward pass (`sign(0) = +1`); the backward pass
    /// uses the steep Gaussian `(2k/√π)·exp(−(kx)²)`.
    pub fn surrogate_sign(&mut self, a: Var, steepness: f64) -> Var {
        self.unary(a, sign, Op::SurrogateSign(a, steepness))
    }

    /// Exact `|x|` forward; backward uses `tanh(kx)`.
    pub fn surrogate_abs(&mut self, a: Var, steepness: f64) -> Var {
        self.unary(a, f64::abs, Op::SurrogateAbs(a, steepness))
    }

    /// `sign(w)` forward with a clipped straight-through backward: the
    /// upstream gradient passes where `|w| ≤ clip` and is zero elsewhere.
    pub fn ste_binarize(&mut self, a: Var, clip: f64) -> Var {
        self.unary(a, sign, Op::SteBinarize(a, clip))
    }

    // ---- reductions and shape ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let data = kernels::transpose(self.nodes[a.0].value.data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), &[a]))
    }

    fn dims2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match *self.nodes[a.0].value.shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    fn dims4(&self, op: &'static str, a: Var) -> Result<[usize; 4]> {
        match *self.nodes[a.0].value.shape() {
            [n, h, w, c] => Ok([n, h, w, c]),
            ref s => Err(TensorError::BadRank {
                op,
                expected: 4,
                shape: s.to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = kernels::matmul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[cols]` bias to every row of a `[rows, cols]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_bias", a)?;
        let b = &self.nodes[bias.0].value;
        if b.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: b.shape().to_vec(),
            });
        }
        let bd = b.data();
        let mut data = self.nodes[a.0].value.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(bd) {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Softmax of a 1-D vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 1 {
            return Err(TensorError::BadRank {
                op: "softmax",
                expected: 1,
                shape: v.shape().to_vec(),
            });
        }
        if let Some(index) = v.data().iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax", index });
        }
        let value = Tensor::vector(kernels::softmax(v.data()));
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Element `i` of a tensor as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if i >= v.numel() {
            return Err(TensorError::Geometry {
                op: "index",
                msg: format!("index {i} out of bounds for {} values", v.numel()),
            });
        }
        let value = Tensor::scalar(v.data()[i]);
        Ok(self.push(value, Op::Index(a, i), &[a]))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        let data = self.nodes[logits.0].value.data();
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "cross_entropy",
                index,
            });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, (chunk, &label)) in data.chunks(c).zip(labels).enumerate() {
            if label >= c {
                return Err(TensorError::LabelOutOfRange {
                    row,
                    label,
                    classes: c,
                });
            }
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + chunk.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += log_z - chunk[label];
            probs.extend(chunk.iter().map(|x| (x - log_z).exp()));
        }
        let value = Tensor::scalar(loss / b as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[logits]))
    }

    // ---- spatial ops over NHWC --------------------------------------

    /// Unfolds `[n, h, w, c]` into `[n·oh·ow, kh·kw·c]` rows, one per output
    /// position, columns ordered `(ky, kx, channel)`. Padding reads zeros.
    pub fn im2col(&mut self, input: Var, window: Window2d) -> Result<Var> {
        let [n, h, w, c] = self.dims4("im2col", input)?;
        let (oh, ow) = window.output_hw(h, w).ok_or_else(|| TensorError::Geometry {
            op: "im2col",
            msg: format!("window {window:?} does not fit a {h}×{w} input"),
        })?;
        let cols = window.kernel_h * window.kernel_w * c;
        let src = self.nodes[input.0].value.data();
        let mut out = vec![0.0; n * oh * ow * cols];
        for_each_window(n, h, w, c, window, |row, col, src_idx| {
            if let Some(s) = src_idx {
                out[row * cols + col..row * cols + col + c].copy_from_slice(&src[s..s + c]);
            }
        });
        let value = Tensor::new(vec![n * oh * ow, cols], out)?;
        Ok(self.push(value, Op::Im2Col { input, window }, &[input]))
    }

    pub fn max_pool(&mut self, input: Var, window: Window2d) -> Result<Var> {
        let [n, h, w, c] = self.dims4("max_pool", input)?;
        let (oh, ow) = window.output_hw(h, w).ok_or_else(|| TensorError::Geometry {
            op: "max_pool",
            msg: format!("window {window:?} does not fit a {h}×{w} input"),
        })?;
        let src = self.nodes[input.0].value.data();
        let mut out = vec![f64::NEG_INFINITY; n * oh * ow * c];
        let mut argmax = vec![usize::MAX; n * oh * ow * c];
        for_each_window(n, h, w, c, window, |row, _col, src_idx| {
            if let Some(s) = src_idx {
                for ch in 0..c {
                    let o = row * c + ch;
                    if src[s + ch] > out[o] || argmax[o] == usize::MAX {
                        out[o] = src[s + ch];
                        argmax[o] = s + ch;
                    }
                }
            }
        });
        // a window lying entirely in padding pools to zero
        for (o, a) in out.iter_mut().zip(&argmax) {
            if *a == usize::MAX {
                *o = 0.0;
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Average pooling; padded taps count as zeros in the mean.
    pub fn avg_pool(&mut self, input: Var, window: Window2d) -> Result<Var> {
        let [n, h, w, c] = self.dims4("avg_pool", input)?;
        let (oh, ow) = window.output_hw(h, w).ok_or_else(|| TensorError::Geometry {
            op: "avg_pool",
            msg: format!("window {window:?} does not fit a {h}×{w} input"),
        })?;
        let src = self.nodes[input.0].value.data();
        let inv = 1.0 / (window.kernel_h * window.kernel_w) as f64;
        let mut out = vec![0.0; n * oh * ow * c];
        for_each_window(n, h, w, c, window, |row, _col, src_idx| {
            if let Some(s) = src_idx {
                for ch in 0..c {
                    out[row * c + ch] += src[s + ch] * inv;
                }
            }
        });
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.push(value, Op::AvgPool { input, window }, &[input]))
    }

    /// `[n, h, w, c]` → `[n, c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, h, w, c] = self.dims4("global_avg_pool", input)?;
        let src = self.nodes[input.0].value.data();
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for p in 0..h * w {
                let base = (b * h * w + p) * c;
                for ch in 0..c {
                    out[b * c + ch] += src[base + ch] * inv;
                }
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::Geometry {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let lead: Vec<usize> = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[v.0].value.data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatLast(inputs.to_vec()), inputs))
    }

    // ---- backward ---------------------------------------------------

    /// Reverse pass from a scalar `loss`. Each node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                node.requires_grad.then(|| {
                    let data = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Tensor::new(node.value.shape().to_vec(), data)
                        .expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (la, lb) = (self.val(*a).len(), self.val(*b).len());
                if self.wants(*b) {
                    self.accumulate(grads, *b, reduce_to(g.clone(), lb));
                }
                self.accumulate(grads, *a, reduce_to(g, la));
            }
            Op::Sub(a, b) => {
                let (la, lb) = (self.val(*a).len(), self.val(*b).len());
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, reduce_to(neg, lb));
                }
                self.accumulate(grads, *a, reduce_to(g, la));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let ga = zip_broadcast(&g, vb, |gv, y| gv * y);
                    self.accumulate(grads, *a, reduce_to(ga, va.len()));
                }
                if self.wants(*b) {
                    let gb = zip_broadcast(&g, va, |gv, x| gv * x);
                    self.accumulate(grads, *b, reduce_to(gb, vb.len()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.into_iter().map(|v| -v).collect()),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.into_iter().map(|v| c * v).collect()),
            Op::Relu(a) => {
                let x = self.val(*a);
                let d = g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 });
                self.accumulate(grads, *a, d.collect());
            }
            Op::Exp(a) => {
                let d = g.iter().zip(out.data()).map(|(gv, y)| gv * y);
                self.accumulate(grads, *a, d.collect());
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y));
                self.accumulate(grads, *a, d.collect());
            }
            Op::SurrogateSign(a, k) => {
                let x = self.val(*a);
                let d = g.iter().zip(x).map(|(gv, &xv)| {
                    let kx = k * xv;
                    gv * k * FRAC_2_SQRT_PI * (-kx * kx).exp()
                });
                self.accumulate(grads, *a, d.collect());
            }
            Op::SurrogateAbs(a, k) => {
                let x = self.val(*a);
                let d = g.iter().zip(x).map(|(gv, &xv)| gv * (k * xv).tanh());
                self.accumulate(grads, *a, d.collect());
            }
            Op::SteBinarize(a, clip) => {
                let x = self.val(*a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv.abs() <= *clip { *gv } else { 0.0 });
                self.accumulate(grads, *a, d.collect());
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::Transpose(a) => {
                let s = out.shape();
                self.accumulate(grads, *a, kernels::transpose(&g, s[0], s[1]));
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    // dA = G·Bᵀ
                    let da = kernels::matmul_nt(&g, self.val(*b), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ·G
                    let db = kernels::matmul_tn(self.val(*a), &g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(a, bias) => {
                let c = out.shape()[1];
                if self.wants(*bias) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a) => {
                let y = out.data();
                let dot: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                let d = y.iter().zip(&g).map(|(yv, gv)| yv * (gv - dot));
                self.accumulate(grads, *a, d.collect());
            }
            Op::Index(a, i) => {
                let mut d = vec![0.0; self.val(*a).len()];
                d[*i] = g[0];
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * c + label] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Im2Col { input, window } => {
                let s = self.nodes[input.0].value.shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let cols = window.kernel_h * window.kernel_w * c;
                let mut d = vec![0.0; n * h * w * c];
                for_each_window(n, h, w, c, *window, |row, col, src_idx| {
                    if let Some(si) = src_idx {
                        let base = row * cols + col;
                        for ch in 0..c {
                            d[si + ch] += g[base + ch];
                        }
                    }
                });
                self.accumulate(grads, *input, d);
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.val(*input).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    if src != usize::MAX {
                        d[src] += gv;
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::AvgPool { input, window } => {
                let s = self.nodes[input.0].value.shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let inv = 1.0 / (window.kernel_h * window.kernel_w) as f64;
                let mut d = vec![0.0; n * h * w * c];
                for_each_window(n, h, w, c, *window, |row, _col, src_idx| {
                    if let Some(si) = src_idx {
                        for ch in 0..c {
                            d[si + ch] += g[row * c + ch] * inv;
                        }
                    }
                });
                self.accumulate(grads, *input, d);
            }
            Op::GlobalAvgPool(input) => {
                let s = self.nodes[input.0].value.shape();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let inv = 1.0 / hw as f64;
                let mut d = vec![0.0; n * hw * c];
                for b in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            d[(b * hw + p) * c + ch] = g[b * c + ch] * inv;
                        }
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::ConcatLast(inputs) => {
                let total = *out.shape().last().expect("rank ≥ 1");
                let rows = out.numel() / total;
                let mut offset = 0;
                for &v in inputs {
                    let wd = *self.shape(v).last().expect("rank ≥ 1");
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + wd]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    offset += wd;
                }
            }
        }
    }
}

/// `sign` with `sign(0) = +1`.
pub(crate) fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Visits every (output row, column offset, source offset) triple of a
/// sliding window over NHWC data. `src` is `None` for padded taps; offsets
/// address the first channel of the tap.
fn for_each_window(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    window: Window2d,
    mut f: impl FnMut(usize, usize, Option<usize>),
) {
    let Some((oh, ow)) = window.output_hw(h, w) else {
        return;
    };
    let pad = window.padding as isize;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                for ky in 0..window.kernel_h {
                    let iy = (oy * window.stride + ky) as isize - pad;
                    for kx in 0..window.kernel_w {
                        let ix = (ox * window.stride + kx) as isize - pad;
                        let col = (ky * window.kernel_w + kx) * c;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        let src = inside.then(|| ((b * h + iy as usize) * w + ix as usize) * c);
                        f(row, col, src);
                    }
                }
            }
        }
    }
}
