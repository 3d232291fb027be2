//! Adam, mini-batch training steps and evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::energy::{total_loss, EnergyTable, Regularizer};
use crate::network::{ChoiceKey, LayerCost, Model, Route, Trainable};
use crate::parallel::map_slice;
use crate::tensor::{Gradients, Graph, Tensor};
use crate::{Error, Result};

pub const DEFAULT_BATCH: usize = 32;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One parameter of a group, with its gradient (`None` skips the update).
pub struct ParamGrad<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: Option<&'a [f64]>,
}

/// Adam state for one parameter group. Slots are positional: the same
/// parameter must be passed at the same index on every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected adaptive-moment update. Every gradient is checked
    /// before anything is written, so a NaN leaves the group untouched.
    pub fn step(&mut self, group: &mut [ParamGrad<'_>]) -> Result<()> {
        for p in group.iter() {
            if let Some(grad) = p.grad {
                if grad.len() != p.value.len() {
                    return Err(Error::Config(format!(
                        "gradient for `{}` has {} entries, parameter has {}",
                        p.name,
                        grad.len(),
                        p.value.len()
                    )));
                }
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
                }
            }
        }
        if self.m.len() < group.len() {
            self.m.resize(group.len(), Vec::new());
            self.v.resize(group.len(), Vec::new());
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, p) in group.iter_mut().enumerate() {
            let Some(grad) = p.grad else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            if m.len() != grad.len() {
                *m = vec![0.0; grad.len()];
                *v = vec![0.0; grad.len()];
            }
            for i in 0..grad.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Separate optimizers for the weights θ (and biases) and the logits α.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub theta: Adam,
    pub alpha: Adam,
}

impl Optimizers {
    pub fn new(lr_theta: f64, lr_alpha: f64) -> Self {
        Self {
            theta: Adam::new(AdamConfig::with_lr(lr_theta)),
            alpha: Adam::new(AdamConfig::with_lr(lr_alpha)),
        }
    }
}

/// Energy and CiM terms added to the cross-entropy while α is searched.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub costs: &'a [LayerCost],
    pub table: &'a EnergyTable,
    pub reg: Regularizer,
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cross_entropy: f64,
    pub energy_norm: f64,
    pub penalty: Option<f64>,
    pub cim_usage: Option<f64>,
}

/// Builds the loss for one batch. The regularizer applies only on the
/// mixture route.
fn batch_graph(
    model: &Model,
    x: Tensor,
    labels: &[usize],
    route: Route<'_>,
    trainable: Trainable,
    objective: Option<&Objective<'_>>,
) -> Result<(Graph, crate::network::BoundParams, crate::tensor::Var, LossValues)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, trainable);
    let xv = g.constant(x);
    let logits = model.forward(&mut g, &params, xv, route, false)?;
    let ce = g.cross_entropy(logits, labels)?;
    let mut values = LossValues {
        cross_entropy: g.value(ce).item(),
        ..Default::default()
    };
    let loss = match (objective, route) {
        (Some(obj), Route::Mixture) => {
            let choices: Vec<Vec<ChoiceKey>> = model.mixtures.iter().map(|m| m.choices.clone()).collect();
            let parts = total_loss(&mut g, ce, &params.alpha, &choices, obj.costs, obj.table, &obj.reg)?;
            values.energy_norm = g.value(parts.energy_norm).item();
            values.penalty = parts.penalty.map(|p| g.value(p).item());
            values.cim_usage = parts.cim_usage.map(|u| g.value(u).item());
            parts.total
        }
        _ => ce,
    };
    values.total = g.value(loss).item();
    if !values.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((g, params, loss, values))
}

fn apply_grads(
    model: &mut Model,
    opts: &mut Optimizers,
    params: &crate::network::BoundParams,
    grads: &Gradients,
    trainable: Trainable,
) -> Result<()> {
    if trainable.theta {
        let names: Vec<String> = model
            .weights
            .iter()
            .map(|w| model.network.layers[w.layer].spec.name.clone())
            .collect();
        let mut group = Vec::with_capacity(model.weights.len() * 2);
        for (i, w) in model.weights.iter_mut().enumerate() {
            group.push(ParamGrad {
                name: format!("{}.theta", names[i]),
                value: w.theta.data_mut(),
                grad: grads.get(params.theta[i]).map(Tensor::data),
            });
            group.push(ParamGrad {
                name: format!("{}.bias", names[i]),
                value: w.bias.data_mut(),
                grad: grads.get(params.bias[i]).map(Tensor::data),
            });
        }
        opts.theta.step(&mut group)?;
    }
    if trainable.alpha {
        let names: Vec<String> = model.layer_names();
        let mut group: Vec<ParamGrad<'_>> = model
            .mixtures
            .iter_mut()
            .enumerate()
            .map(|(i, m)| ParamGrad {
                name: format!("{}.alpha", names[i]),
                grad: if m.fixed.is_some() {
                    None
                } else {
                    grads.get(params.alpha[i]).map(Tensor::data)
                },
                value: &mut m.alpha,
            })
            .collect();
        opts.alpha.step(&mut group)?;
    }
    Ok(())
}

/// One gradient step on the given samples.
pub fn train_step(
    model: &mut Model,
    opts: &mut Optimizers,
    ds: &Dataset,
    indices: &[usize],
    route: Route<'_>,
    trainable: Trainable,
    objective: Option<&Objective<'_>>,
) -> Result<LossValues> {
    let (x, labels) = ds.batch(indices);
    let (g, params, loss, values) = batch_graph(model, x, &labels, route, trainable, objective)?;
    if trainable != Trainable::NONE {
        let grads = g.backward(loss)?;
        apply_grads(model, opts, &params, &grads, trainable)?;
    }
    Ok(values)
}

/// Shuffled batches of `indices`; the order depends only on `rng`.
pub fn shuffled_batches(indices: &[usize], batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// One pass over the training split. Returns the sample-weighted mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    opts: &mut Optimizers,
    ds: &Dataset,
    batch: usize,
    rng: &mut impl Rng,
    route: Route<'_>,
    trainable: Trainable,
    objective: Option<&Objective<'_>>,
) -> Result<LossValues> {
    let mut sum = LossValues::default();
    let mut count = 0usize;
    for b in shuffled_batches(&ds.train, batch, rng) {
        let v = train_step(model, opts, ds, &b, route, trainable, objective)?;
        let w = b.len() as f64;
        sum.total += v.total * w;
        sum.cross_entropy += v.cross_entropy * w;
        sum.energy_norm = v.energy_norm;
        sum.penalty = v.penalty;
        sum.cim_usage = v.cim_usage;
        count += b.len();
    }
    let n = count.max(1) as f64;
    sum.total /= n;
    sum.cross_entropy /= n;
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy on a split. Chunks run in parallel and
/// are merged in order, so the result does not depend on thread count.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split, route: Route<'_>, quantized: bool) -> Result<Evaluation> {
    let idx = ds.split(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_CHUNK).collect();
    let parts = map_slice(&chunks, |chunk| -> Result<(usize, f64)> {
        let (x, labels) = ds.batch(chunk);
        let mut g = Graph::new();
        let params = model.bind(&mut g, Trainable::NONE);
        let xv = g.constant(x);
        let logits = model.forward(&mut g, &params, xv, route, quantized)?;
        let ce = g.cross_entropy(logits, &labels)?;
        let out = g.value(logits);
        let classes = out.shape()[1];
        let correct = out
            .data()
            .chunks(classes)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok((correct, g.value(ce).item() * chunk.len() as f64))
    });
    let mut correct = 0;
    let mut loss = 0.0;
    for p in parts {
        let (c, l) = p?;
        correct += c;
        loss += l;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / idx.len() as f64,
        loss: loss / idx.len() as f64,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stops after `patience` checks without an improvement of at least `min_delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a validation loss; true once training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self::new(5, 1e-4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use crate::network::{preset, SearchMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(adam: &mut Adam, name: &str, value: &mut [f64], grad: &[f64]) -> Result<()> {
        adam.step(&mut [ParamGrad {
            name: name.into(),
            value,
            grad: Some(grad),
        }])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        let mut w = [0.5];
        run(&mut adam, "w", &mut w, &[1.0]).unwrap();
        assert!((w[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        let mut w = [0.25, -2.0];
        for _ in 0..3 {
            run(&mut adam, "w", &mut w, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(w, [0.25, -2.0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
        let mut w = [1.0];
        let e = run(&mut adam, "conv1.theta", &mut w, &[f64::NAN]).unwrap_err().to_string();
        assert!(e.contains("conv1.theta"), "{e}");
        assert_eq!(w, [1.0]);
    }

    #[test]
    fn groups_update_independently() {
        let ds = load_dataset("synthetic:blobs:classes=2,samples=64", 1).unwrap();
        let net = preset("mini-cnn", [8, 8, 1], 2).unwrap().resolve().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(net, SearchMode::Digital, Default::default(), &mut rng).unwrap();
        let batch = &ds.train[..16];

        let mut m = model.clone();
        let mut opts = Optimizers::new(1e-2, 1e-1);
        train_step(&mut m, &mut opts, &ds, batch, Route::Mixture, Trainable::ALPHA, None).unwrap();
        assert_eq!(m.weights, model.weights);
        assert_ne!(m.mixtures, model.mixtures);
        assert_eq!((opts.theta.steps(), opts.alpha.steps()), (0, 1));

        let mut m = model.clone();
        let mut opts = Optimizers::new(1e-2, 1e-1);
        train_step(&mut m, &mut opts, &ds, batch, Route::Mixture, Trainable::THETA, None).unwrap();
        assert_eq!(m.mixtures, model.mixtures);
        assert_ne!(m.weights, model.weights);
    }

    #[test]
    fn memorizes_a_small_set() {
        let ds = load_dataset("synthetic:blobs:classes=2,samples=20,spread=0.5", 3).unwrap();
        let net = preset("mini-cnn", [8, 8, 1], 2).unwrap().resolve().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::new(net, SearchMode::Digital, Default::default(), &mut rng).unwrap();
        let all = vec![ChoiceKey::digital(crate::operators::OperatorKind::Typical); model.mixtures.len()];
        let mut opts = Optimizers::new(1e-2, 0.0);
        let train: Vec<usize> = ds.train.clone();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = train_step(&mut model, &mut opts, &ds, &train, Route::Assigned(&all), Trainable::THETA, None)
                .unwrap()
                .total;
        }
        assert!(last < 0.05, "loss {last}");
        let e = evaluate(&model, &ds, Split::Train, Route::Assigned(&all), false).unwrap();
        assert_eq!(e.accuracy, 1.0);
    }

    #[test]
    fn shuffling_depends_only_on_seed() {
        let idx: Vec<usize> = (0..100).collect();
        let a = shuffled_batches(&idx, 32, &mut ChaCha8Rng::seed_from_u64(5));
        let b = shuffled_batches(&idx, 32, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[3].len(), 4);
    }

    #[test]
    fn early_stop_patience() {
        let mut s = EarlyStop::new(2, 1e-4);
        assert!(!s.update(1.0));
        assert!(!s.update(0.5));
        assert!(!s.update(0.49995));
        assert!(s.update(0.6));
    }
}
