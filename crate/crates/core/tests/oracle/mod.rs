//! Independent reference implementations used by the integration and
//! acceptance tests: central finite differences, smoothed stand-ins for the
//! surrogate-gradient ops, and brute-force operators and convolution.
#![allow(dead_code)]

use opsearch_core::energy::{total_loss, EnergyTable, Regularizer};
use opsearch_core::network::{preset, ChoiceKey, Model, Route, SearchMode, Trainable};
use opsearch_core::operators::{
    apply_operator, correlate_rows, op_binary, op_mulfree, op_typical, ConvGeometry, CorrelationOptions,
    LayerKind, OperatorKind,
};
use opsearch_core::tensor::{Graph, Tensor, TensorError, Var, Window2d};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEEPNESS: f64 = 10.0;
pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `±[gap, hi)`, keeping values off kinks at zero.
pub fn off_zero(rng: &mut impl Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A random permutation of well-separated values, so max-pool winners are
/// stable under a finite-difference step.
pub fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of `f` with respect to every entry of every input;
/// `f` also receives the index of the input being perturbed.
pub fn numeric_grads(f: &dyn Fn(&[Tensor], usize) -> f64, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[t].numel());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + FD_STEP;
            let up = f(&work, t);
            work[t].data_mut()[i] = orig - FD_STEP;
            let down = f(&work, t);
            work[t].data_mut()[i] = orig;
            g.push((up - down) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let denom = norm(a) + norm(n);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

/// Builds `Σ r ⊙ build(inputs)` with a fixed random `r`, so every output
/// entry carries a distinct upstream gradient.
fn projected(g: &mut Graph, build: &Build, vars: &[Var], r: &Tensor) -> Var {
    let y = build(g, vars).unwrap();
    let y = if g.value(y).is_scalar() { y } else { g.reshape(y, &[g.value(y).numel()]).unwrap() };
    let rv = g.constant(if g.value(y).is_scalar() { Tensor::scalar(r.data()[0]) } else { r.clone() });
    let p = g.mul(y, rv).unwrap();
    g.sum(p)
}

/// `oracle(inputs, wrt)`: a forward pass that is smooth in input `wrt`.
pub type Oracle = dyn Fn(&[Tensor], usize) -> Vec<f64>;

/// A named check that returns its relative gradient error for one draw.
pub type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> f64>);

/// Largest relative error between the graph's gradients of `build` and
/// finite differences of `oracle`. With `oracle = None` the graph's own
/// forward pass is differenced.
pub fn check(rng: &mut impl Rng, inputs: Vec<Tensor>, build: &Build, oracle: Option<&Oracle>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let probe = build(&mut g, &vars).unwrap();
    let n_out = g.value(probe).numel();
    let r = uniform(rng, &[n_out], -1.0, 1.0);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = projected(&mut g, build, &vars, &r);
    let grads = g.backward(loss).unwrap();

    let f = |ts: &[Tensor], wrt: usize| -> f64 {
        match oracle {
            Some(o) => o(ts, wrt).iter().zip(r.data()).map(|(y, w)| y * w).sum(),
            None => {
                let mut g = Graph::new();
                let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
                let l = projected(&mut g, build, &vars, &r);
                g.value(l).item()
            }
        }
    };
    let numeric = numeric_grads(&f, &inputs);
    vars.iter()
        .zip(&numeric)
        .map(|(&v, n)| {
            let a = grads.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n.len()]);
            rel_err(&a, n)
        })
        .fold(0.0, f64::max)
}

// ---- scalar references ------------------------------------------------

pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Smooth stand-in for `sign`: its derivative is the steep Gaussian.
pub fn smooth_sign(x: f64) -> f64 {
    libm::erf(STEEPNESS * x)
}

/// Smooth stand-in for `|x|`: `ln cosh(kx)/k`, derivative `tanh(kx)`.
pub fn smooth_abs(x: f64) -> f64 {
    let z = (STEEPNESS * x).abs();
    (z + (-2.0 * z).exp().ln_1p() - std::f64::consts::LN_2) / STEEPNESS
}

/// Smooth stand-in for the clipped straight-through binarize.
pub fn smooth_binarize(w: f64) -> f64 {
    w.clamp(-1.0, 1.0)
}

pub fn pair_typical(x: f64, w: f64) -> f64 {
    x * w
}

pub fn pair_mulfree(x: f64, w: f64) -> f64 {
    sign(x) * w.abs() + sign(w) * x.abs()
}

pub fn pair_binary(x: f64, w: f64) -> f64 {
    x * sign(w)
}

/// f_M smoothed in `x`; `w` enters through its exact sign and magnitude.
pub fn pair_mulfree_smooth_x(x: f64, w: f64) -> f64 {
    smooth_sign(x) * w.abs() + sign(w) * smooth_abs(x)
}

/// f_M smoothed in `w`.
pub fn pair_mulfree_smooth_w(x: f64, w: f64) -> f64 {
    sign(x) * smooth_abs(w) + smooth_sign(w) * x.abs()
}

pub fn pair_binary_smooth_w(x: f64, w: f64) -> f64 {
    x * smooth_binarize(w)
}

pub fn pair_for(kind: OperatorKind) -> fn(f64, f64) -> f64 {
    match kind {
        OperatorKind::Typical => pair_typical,
        OperatorKind::MultiplicationFree => pair_mulfree,
        OperatorKind::Binary => pair_binary,
    }
}

/// The pair function smoothed in input `wrt` (0 = activations, 1 = weights).
pub fn smooth_pair_for(kind: OperatorKind, wrt: usize) -> fn(f64, f64) -> f64 {
    match (kind, wrt) {
        (OperatorKind::Typical, _) => pair_typical,
        (OperatorKind::MultiplicationFree, 0) => pair_mulfree_smooth_x,
        (OperatorKind::MultiplicationFree, _) => pair_mulfree_smooth_w,
        (OperatorKind::Binary, 0) => pair_binary,
        (OperatorKind::Binary, _) => pair_binary_smooth_w,
    }
}

pub fn vector_op(pair: fn(f64, f64) -> f64, x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(&a, &b)| pair(a, b)).sum()
}

/// Brute-force sliding window over an NHWC input. Padded taps read zero
/// and still pass through `pair`. Weights are `[o, k·k·c]` in `(ky, kx, c)`
/// column order.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    pair: fn(f64, f64) -> f64,
    x: &[f64],
    [n, h, w, c]: [usize; 4],
    weights: &[f64],
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let q = kernel * kernel * c;
    let mut out = Vec::with_capacity(n * oh * ow * out_ch);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..out_ch {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            for ch in 0..c {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x[((b * h + iy as usize) * w + ix as usize) * c + ch]
                                };
                                acc += pair(v, weights[o * q + (ky * kernel + kx) * c + ch]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (out, [n, oh, ow, out_ch])
}

pub fn dense_oracle(pair: fn(f64, f64) -> f64, x: &[f64], n: usize, weights: &[f64], out: usize) -> Vec<f64> {
    let f = weights.len() / out;
    let mut y = Vec::with_capacity(n * out);
    for b in 0..n {
        for o in 0..out {
            y.push(vector_op(pair, &x[b * f..(b + 1) * f], &weights[o * f..(o + 1) * f]));
        }
    }
    y
}

fn opts() -> CorrelationOptions {
    CorrelationOptions::default()
}

pub const KINDS: [OperatorKind; 3] = [
    OperatorKind::Typical,
    OperatorKind::MultiplicationFree,
    OperatorKind::Binary,
];

// ---- suites ------------------------------------------------------------

/// Named exact ops, each checked against differences of its own forward pass.
pub fn exact_op_cases() -> Vec<Case> {
    fn case(
        name: &'static str,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'static,
    ) -> Case {
        (
            name,
            Box::new(move |r: &mut ChaCha8Rng| {
                let inputs = make(r);
                check(r, inputs, &build, None)
            }),
        )
    }
    let win = Window2d::square(2, 2, 0);
    let padded = Window2d::square(3, 1, 1);
    vec![
        case("add", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |g, v| g.add(v[0], v[1])),
        case("sub", |r| vec![uniform(r, &[5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)], |g, v| g.sub(v[0], v[1])),
        case("mul", |r| vec![uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2, 3], -2.0, 2.0)], |g, v| g.mul(v[0], v[1])),
        case("mul_self", |r| vec![uniform(r, &[4], -2.0, 2.0)], |g, v| g.mul(v[0], v[0])),
        case("neg", |r| vec![uniform(r, &[4], -1.0, 1.0)], |g, v| Ok(g.neg(v[0]))),
        case("scale", |r| vec![uniform(r, &[4], -1.0, 1.0)], |g, v| Ok(g.scale(v[0], -1.7))),
        case("relu", |r| vec![off_zero(r, &[6], 1e-3, 1.0)], |g, v| Ok(g.relu(v[0]))),
        case("exp", |r| vec![uniform(r, &[5], -2.0, 2.0)], |g, v| Ok(g.exp(v[0]))),
        case("tanh", |r| vec![uniform(r, &[5], -2.0, 2.0)], |g, v| Ok(g.tanh(v[0]))),
        case("sum", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| Ok(g.sum(v[0]))),
        case("mean", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| Ok(g.mean(v[0]))),
        case("reshape", |r| vec![uniform(r, &[2, 6], -1.0, 1.0)], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let z = g.mul(y, y)?;
            Ok(z)
        }),
        case("transpose", |r| vec![uniform(r, &[2, 5], -1.0, 1.0)], |g, v| g.transpose(v[0])),
        case("matmul", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        case("add_bias", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], |g, v| {
            g.add_bias(v[0], v[1])
        }),
        case("softmax", |r| vec![uniform(r, &[6], -3.0, 3.0)], |g, v| g.softmax(v[0])),
        case("index", |r| vec![uniform(r, &[6], -1.0, 1.0)], |g, v| {
            let a = g.index(v[0], 2)?;
            let b = g.index(v[0], 5)?;
            g.mul(a, b)
        }),
        case("cross_entropy", |r| vec![uniform(r, &[4, 5], -3.0, 3.0)], |g, v| {
            g.cross_entropy(v[0], &[0, 4, 2, 2])
        }),
        case("im2col", |r| vec![uniform(r, &[2, 4, 4, 2], -1.0, 1.0)], move |g, v| g.im2col(v[0], padded)),
        case("max_pool", |r| vec![distinct(r, &[2, 4, 4, 3])], move |g, v| g.max_pool(v[0], win)),
        case("avg_pool", |r| vec![uniform(r, &[2, 5, 5, 2], -1.0, 1.0)], move |g, v| g.avg_pool(v[0], padded)),
        case("global_avg_pool", |r| vec![uniform(r, &[2, 3, 3, 4], -1.0, 1.0)], |g, v| {
            g.global_avg_pool(v[0])
        }),
        case("concat_last", |r| vec![uniform(r, &[2, 2, 2, 3], -1.0, 1.0), uniform(r, &[2, 2, 2, 1], -1.0, 1.0)], |g, v| {
            g.concat_last(&[v[0], v[1]])
        }),
        case("dense_typical", |r| vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[2, 5], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)], |g, v| {
            apply_operator(g, OperatorKind::Typical, LayerKind::Dense, v[0], v[1], Some(v[2]), None, &opts())
        }),
        case("conv_typical", |r| vec![uniform(r, &[2, 5, 5, 2], -1.0, 1.0), uniform(r, &[3, 18], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], |g, v| {
            let geom = ConvGeometry { kernel: 3, stride: 2, padding: 1 };
            apply_operator(g, OperatorKind::Typical, LayerKind::Conv2d, v[0], v[1], Some(v[2]), Some(geom), &opts())
        }),
    ]
}

/// Surrogate ops, each against differences of its smoothed stand-in.
pub fn surrogate_cases() -> Vec<Case> {
    type Boxed = Box<Oracle>;
    fn case(
        name: &'static str,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'static,
        oracle: Boxed,
    ) -> Case {
        (
            name,
            Box::new(move |r: &mut ChaCha8Rng| {
                let inputs = make(r);
                check(r, inputs, &build, Some(&*oracle))
            }),
        )
    }
    let map = |f: fn(f64) -> f64| -> Boxed { Box::new(move |t: &[Tensor], _| t[0].data().iter().map(|&x| f(x)).collect()) };
    let k = STEEPNESS;
    let mut cases = vec![
        case("surrogate_sign", |r| vec![uniform(r, &[8], -0.3, 0.3)], move |g, v| Ok(g.surrogate_sign(v[0], k)), map(smooth_sign)),
        case("surrogate_abs", |r| vec![uniform(r, &[8], -0.5, 0.5)], move |g, v| Ok(g.surrogate_abs(v[0], k)), map(smooth_abs)),
        case("ste_binarize", |r| vec![off_zero(r, &[8], 1e-3, 2.0)], |g, v| Ok(g.ste_binarize(v[0], 1.0)), map(smooth_binarize)),
        case(
            "op_mulfree",
            |r| vec![uniform(r, &[7], -0.5, 0.5), uniform(r, &[7], -0.5, 0.5)],
            |g, v| op_mulfree(g, v[0], v[1], &opts()),
            Box::new(|t: &[Tensor], wrt| {
                vec![vector_op(smooth_pair_for(OperatorKind::MultiplicationFree, wrt), t[0].data(), t[1].data())]
            }),
        ),
        case(
            "op_binary",
            |r| vec![uniform(r, &[7], -1.0, 1.0), off_zero(r, &[7], 1e-3, 1.5)],
            |g, v| op_binary(g, v[0], v[1], &opts()),
            Box::new(|t: &[Tensor], wrt| {
                vec![vector_op(smooth_pair_for(OperatorKind::Binary, wrt), t[0].data(), t[1].data())]
            }),
        ),
    ];
    for kind in [OperatorKind::MultiplicationFree, OperatorKind::Binary] {
        cases.push(case(
            if kind == OperatorKind::Binary { "dense_binary" } else { "dense_mulfree" },
            |r| vec![uniform(r, &[3, 6], -0.5, 0.5), off_zero(r, &[2, 6], 1e-3, 0.5)],
            move |g, v| correlate_rows(g, kind, v[0], v[1], &opts()),
            Box::new(move |t: &[Tensor], wrt| dense_oracle(smooth_pair_for(kind, wrt), t[0].data(), 3, t[1].data(), 2)),
        ));
        cases.push(case(
            if kind == OperatorKind::Binary { "conv_binary" } else { "conv_mulfree" },
            |r| vec![uniform(r, &[1, 4, 4, 2], -0.5, 0.5), off_zero(r, &[2, 18], 1e-3, 0.5)],
            move |g, v| {
                let geom = ConvGeometry { kernel: 3, stride: 1, padding: 0 };
                apply_operator(g, kind, LayerKind::Conv2d, v[0], v[1], None, Some(geom), &opts())
            },
            Box::new(move |t: &[Tensor], wrt| {
                conv_oracle(smooth_pair_for(kind, wrt), t[0].data(), [1, 4, 4, 2], t[1].data(), 2, 3, 1, 0).0
            }),
        ));
    }
    cases
}

/// Cross-entropy plus the energy regularizer and CiM penalty on a small
/// hybrid model, restricted to paths where the loss is smooth: α of one
/// open mixture layer at a time, θ and biases through all-typical.
pub fn total_loss_case(r: &mut ChaCha8Rng) -> f64 {
    let spec = preset("mini-cnn", [4, 4, 1], 3).unwrap();
    let mut model = Model::new(spec.resolve().unwrap(), SearchMode::Hybrid, opts(), r).unwrap();
    for m in &mut model.mixtures {
        for a in &mut m.alpha {
            *a = r.random_range(-1.0..1.0);
        }
    }
    let x = uniform(r, &[3, 4, 4, 1], -1.0, 1.0);
    let labels = [0usize, 2, 1];
    let table = EnergyTable::default();
    let costs = model.network.layer_costs();
    let reg = Regularizer {
        lambda: 0.7,
        cim: Some((2.0, 0.3 * opsearch_core::energy::total_weight_bits(&costs, &table) as f64)),
    };
    let typical = vec![ChoiceKey::digital(OperatorKind::Typical); model.mixtures.len()];

    let loss_of = |model: &Model, route: Route<'_>, g: &mut Graph| -> (Var, opsearch_core::network::BoundParams) {
        let p = model.bind(g, Trainable::BOTH);
        let xv = g.constant(x.clone());
        let logits = model.forward(g, &p, xv, route, false).unwrap();
        let ce = g.cross_entropy(logits, &labels).unwrap();
        let choices: Vec<Vec<ChoiceKey>> = model.mixtures.iter().map(|m| m.choices.clone()).collect();
        let parts = total_loss(g, ce, &p.alpha, &choices, &costs, &table, &reg).unwrap();
        (parts.total, p)
    };
    let value = |model: &Model, route: Route<'_>| {
        let mut g = Graph::new();
        let (l, _) = loss_of(model, route, &mut g);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;

    // α of one open mixture at a time, the rest fixed to typical, so no
    // surrogate sits downstream of the logits being checked.
    for i in 0..model.mixtures.len() {
        let mut open = model.clone();
        for (l, m) in open.mixtures.iter_mut().enumerate() {
            if l != i {
                m.fix(0);
            }
        }
        let mut g = Graph::new();
        let (l, p) = loss_of(&open, Route::Mixture, &mut g);
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(p.alpha[i]).unwrap().data().to_vec();
        let mut numeric = Vec::new();
        for j in 0..open.mixtures[i].alpha.len() {
            let mut m = open.clone();
            m.mixtures[i].alpha[j] += FD_STEP;
            let up = value(&m, Route::Mixture);
            m.mixtures[i].alpha[j] -= 2.0 * FD_STEP;
            let down = value(&m, Route::Mixture);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }

    // θ and biases through the all-typical route.
    let route = Route::Assigned(&typical);
    let mut g = Graph::new();
    let (l, p) = loss_of(&model, route, &mut g);
    let grads = g.backward(l).unwrap();
    for w in 0..model.weights.len() {
        for (var, is_bias) in [(p.theta[w], false), (p.bias[w], true)] {
            let analytic = grads.get(var).unwrap().data().to_vec();
            let len = analytic.len();
            let mut numeric = Vec::with_capacity(len);
            for j in 0..len {
                let mut m = model.clone();
                let nudge = |m: &mut Model, d: f64| {
                    let lw = &mut m.weights[w];
                    let t = if is_bias { &mut lw.bias } else { &mut lw.theta };
                    t.data_mut()[j] += d;
                };
                nudge(&mut m, FD_STEP);
                let up = value(&m, route);
                nudge(&mut m, -2.0 * FD_STEP);
                let down = value(&m, route);
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    worst
}

/// Plain f64 helper: `f_T`, `f_M`, `f_B` through the graph for two vectors.
pub fn graph_vector_op(kind: OperatorKind, x: &[f64], w: &[f64]) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::vector(x.to_vec()));
    let wv = g.constant(Tensor::vector(w.to_vec()));
    let y = match kind {
        OperatorKind::Typical => op_typical(&mut g, xv, wv, &opts()),
        OperatorKind::MultiplicationFree => op_mulfree(&mut g, xv, wv, &opts()),
        OperatorKind::Binary => op_binary(&mut g, xv, wv, &opts()),
    }
    .unwrap();
    g.value(y).item()
}

/// A random vector with some exact zeros, so `sign(0) = +1` is exercised.
pub fn vector_with_zeros(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if r.random_bool(0.1) { 0.0 } else { r.random_range(-3.0..3.0) })
        .collect()
}

/// Runs `apply_operator` for one conv layer without a bias.
pub fn graph_conv(kind: OperatorKind, x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = apply_operator(&mut g, kind, LayerKind::Conv2d, xv, wv, None, Some(geom), &opts()).unwrap();
    g.value(y).clone()
}
