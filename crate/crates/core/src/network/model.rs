use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::choice::{Assignment, ChoiceKey, ComputeMode, SearchMode};
use super::spec::{LayerType, NetworkSpec, ResolvedNetwork, Shape, NETWORK_INPUT};
use crate::operators::quant::fake_quantize;
use crate::operators::{apply_operator, CorrelationOptions, OperatorKind};
use crate::tensor::{kernels, Graph, Tensor, Var, Window2d};
use crate::{Error, Result};

/// Logit magnitude used to pin a layer's softmax to one choice.
pub const SATURATION: f64 = 40.0;

/// Weights of one conv2d/dense layer. `theta` is shared by every operator path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub layer: usize,
    pub theta: Tensor,
    pub bias: Tensor,
}

/// Search state of one searchable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureLayer {
    /// Index into the network's layer list.
    pub layer: usize,
    /// Index into [`Model::weights`].
    pub weights: usize,
    pub alpha: Vec<f64>,
    pub choices: Vec<ChoiceKey>,
    /// A fixed layer runs only this choice and its alpha is not trained.
    pub fixed: Option<usize>,
}

impl MixtureLayer {
    pub fn probabilities(&self) -> Vec<f64> {
        kernels::softmax(&self.alpha)
    }

    /// Pins the layer: alpha becomes `±SATURATION` one-hot.
    pub fn fix(&mut self, choice: usize) {
        for (j, a) in self.alpha.iter_mut().enumerate() {
            *a = if j == choice { SATURATION } else { -SATURATION };
        }
        self.fixed = Some(choice);
    }
}

/// How searchable layers pick their operator in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Route<'a> {
    /// Softmax-weighted blend of every open choice.
    Mixture,
    /// One choice per searchable layer.
    Assigned(&'a [ChoiceKey]),
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub theta: bool,
    pub alpha: bool,
}

impl Trainable {
    pub const BOTH: Trainable = Trainable { theta: true, alpha: true };
    pub const THETA: Trainable = Trainable { theta: true, alpha: false };
    pub const ALPHA: Trainable = Trainable { theta: false, alpha: true };
    pub const NONE: Trainable = Trainable { theta: false, alpha: false };
}

/// Parameters registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub theta: Vec<Var>,
    pub bias: Vec<Var>,
    /// One per mixture layer.
    pub alpha: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub network: ResolvedNetwork,
    pub mode: SearchMode,
    pub weights: Vec<LayerWeights>,
    pub mixtures: Vec<MixtureLayer>,
    pub opts: CorrelationOptions,
}

/// Serializable form of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub spec: NetworkSpec,
    pub mode: SearchMode,
    pub opts: CorrelationOptions,
    pub weights: Vec<LayerWeights>,
    pub mixtures: Vec<MixtureLayer>,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax_assignment(alpha: &[f64]) -> usize {
    let mut best = 0;
    for (j, &a) in alpha.iter().enumerate() {
        if a > alpha[best] {
            best = j;
        }
    }
    best
}

/// Draws one choice from `multinomial(softmax(alpha))`.
pub fn sample_assignment<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> usize {
    let probs = kernels::softmax(alpha);
    WeightedIndex::new(&probs)
        .expect("softmax weights are positive and finite")
        .sample(rng)
}

fn glorot(rng: &mut impl Rng, shape: [usize; 2], fans: (usize, usize)) -> Tensor {
    let limit = (6.0 / (fans.0 + fans.1) as f64).sqrt();
    let data = (0..shape[0] * shape[1])
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("weight shape")
}

impl Model {
    /// Fresh weights and all-zero logits (uniform belief over the choice set).
    pub fn new(
        network: ResolvedNetwork,
        mode: SearchMode,
        opts: CorrelationOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let choices = mode.choices();
        let mut weights = Vec::new();
        let mut mixtures = Vec::new();
        for (i, layer) in network.layers.iter().enumerate() {
            let Some(geom) = layer.weighted else { continue };
            let shape = geom.weight_shape();
            weights.push(LayerWeights {
                layer: i,
                theta: glorot(rng, shape, geom.fans()),
                bias: Tensor::zeros(&[shape[0]]),
            });
            if layer.search_index.is_some() {
                let mut m = MixtureLayer {
                    layer: i,
                    weights: weights.len() - 1,
                    alpha: vec![0.0; choices.len()],
                    choices: choices.clone(),
                    fixed: None,
                };
                if let Some(pin) = layer.pin {
                    let j = choices.iter().position(|c| *c == pin).ok_or_else(|| {
                        Error::Network(format!(
                            "layer `{}` is pinned to {pin}, which is not in the {mode} choice set",
                            layer.spec.name
                        ))
                    })?;
                    m.fix(j);
                }
                mixtures.push(m);
            }
        }
        Ok(Self {
            network,
            mode,
            weights,
            mixtures,
            opts,
        })
    }

    pub fn reinit_weights(&mut self, rng: &mut impl Rng) {
        for w in &mut self.weights {
            let geom = self.network.layers[w.layer].weighted.expect("weighted layer");
            w.theta = glorot(rng, geom.weight_shape(), geom.fans());
            w.bias = Tensor::zeros(w.bias.shape());
        }
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            spec: self.network.spec.clone(),
            mode: self.mode,
            opts: self.opts,
            weights: self.weights.clone(),
            mixtures: self.mixtures.clone(),
        }
    }

    pub fn from_snapshot(s: ModelSnapshot) -> Result<Self> {
        let network = s.spec.resolve()?;
        let mut model = Model {
            network,
            mode: s.mode,
            weights: Vec::new(),
            mixtures: Vec::new(),
            opts: s.opts,
        };
        let expected: Vec<usize> = model
            .network
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weighted.is_some())
            .map(|(i, _)| i)
            .collect();
        let got: Vec<usize> = s.weights.iter().map(|w| w.layer).collect();
        if expected != got || s.mixtures.len() != model.network.num_searchable() {
            return Err(Error::Network("snapshot does not match its network spec".into()));
        }
        for w in &s.weights {
            let geom = model.network.layers[w.layer].weighted.expect("weighted");
            if w.theta.shape() != geom.weight_shape() {
                return Err(Error::Network(format!(
                    "snapshot weights for layer {} have shape {:?}",
                    w.layer,
                    w.theta.shape()
                )));
            }
        }
        model.weights = s.weights;
        model.mixtures = s.mixtures;
        Ok(model)
    }

    pub fn argmax(&self) -> Assignment {
        self.mixtures
            .iter()
            .map(|m| m.choices[m.fixed.unwrap_or_else(|| argmax_assignment(&m.alpha))])
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        self.mixtures
            .iter()
            .map(|m| m.choices[m.fixed.unwrap_or_else(|| sample_assignment(&m.alpha, rng))])
            .collect()
    }

    /// Fixes every searchable layer to `assignment`.
    pub fn fix_all(&mut self, assignment: &[ChoiceKey]) -> Result<()> {
        self.check_assignment(assignment)?;
        for (m, key) in self.mixtures.iter_mut().zip(assignment) {
            let j = m.choices.iter().position(|c| c == key).ok_or_else(|| {
                Error::Network(format!("choice {key} is not in the {} choice set", self.mode))
            })?;
            m.fix(j);
        }
        Ok(())
    }

    pub fn check_assignment(&self, assignment: &[ChoiceKey]) -> Result<()> {
        if assignment.len() != self.mixtures.len() {
            return Err(Error::Network(format!(
                "assignment has {} entries but the network has {} searchable layers",
                assignment.len(),
                self.mixtures.len()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> BoundParams {
        let mut theta = Vec::with_capacity(self.weights.len());
        let mut bias = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            theta.push(g.leaf(w.theta.clone(), trainable.theta));
            bias.push(g.leaf(w.bias.clone(), trainable.theta));
        }
        let alpha = self
            .mixtures
            .iter()
            .map(|m| g.leaf(Tensor::vector(m.alpha.clone()), trainable.alpha && m.fixed.is_none()))
            .collect();
        BoundParams { theta, bias, alpha }
    }

    /// Logits `[n, classes]` for an NHWC batch `x`.
    ///
    /// With `quantized`, each weighted layer runs on fake-quantized weights and
    /// per-sample fake-quantized inputs at its mode's precision (8 bits for
    /// digital and non-searchable layers, 4 bits for CiM). Biases stay in
    /// full precision.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        x: Var,
        route: Route<'_>,
        quantized: bool,
    ) -> Result<Var> {
        if let Route::Assigned(a) = route {
            self.check_assignment(a)?;
        }
        if quantized && matches!(route, Route::Mixture) {
            return Err(Error::Network("quantized evaluation needs a fixed assignment".into()));
        }
        let n = g.shape(x)[0];
        let mut outs: Vec<Var> = Vec::with_capacity(self.network.layers.len());
        let mut weight_slot = 0;
        let mut mixture_slot = 0;
        for layer in &self.network.layers {
            let src = |s: usize| if s == NETWORK_INPUT { x } else { outs[s] };
            let input = src(layer.sources[0]);
            let spec = &layer.spec;
            let out = match spec.kind {
                LayerType::Conv2d | LayerType::Dense => {
                    let geom = layer.weighted.expect("weighted");
                    let wi = weight_slot;
                    weight_slot += 1;
                    let mix = layer.search_index.map(|_| {
                        mixture_slot += 1;
                        mixture_slot - 1
                    });
                    let choice = match (mix, route) {
                        (None, _) => Some(ChoiceKey::digital(OperatorKind::Typical)),
                        (Some(mi), Route::Assigned(a)) => Some(a[mi]),
                        (Some(mi), Route::Mixture) => {
                            let m = &self.mixtures[mi];
                            m.fixed.map(|j| m.choices[j])
                        }
                    };
                    let theta = params.theta[wi];
                    let bias = params.bias[wi];
                    let y = match choice {
                        Some(key) => {
                            let (input, theta) = if quantized {
                                let bits = key.mode.bits();
                                (quantize_rows(g, input, n, bits)?, quantize_whole(g, theta, bits)?)
                            } else {
                                (input, theta)
                            };
                            apply_operator(
                                g,
                                key.operator,
                                geom.layer_kind(),
                                input,
                                theta,
                                None,
                                geom.conv(),
                                &self.opts,
                            )?
                        }
                        None => {
                            let mi = mix.expect("mixture route on a searchable layer");
                            self.mixture_forward(g, mi, params.alpha[mi], input, theta, geom)?
                        }
                    };
                    add_channel_bias(g, y, bias)?
                }
                LayerType::Relu => g.relu(input),
                LayerType::Maxpool | LayerType::Avgpool => {
                    let k = spec.kernel.expect("checked at resolve");
                    let window = Window2d::square(k, spec.stride.unwrap_or(k), spec.padding.unwrap_or(0));
                    if spec.kind == LayerType::Maxpool {
                        g.max_pool(input, window)?
                    } else {
                        g.avg_pool(input, window)?
                    }
                }
                LayerType::GlobalAvgpool => g.global_avg_pool(input)?,
                LayerType::Flatten => g.reshape(input, &[n, layer.in_shape.numel()])?,
                LayerType::Concat => {
                    let vars: Vec<Var> = layer.sources.iter().map(|&s| src(s)).collect();
                    g.concat_last(&vars)?
                }
            };
            outs.push(out);
        }
        Ok(*outs.last().expect("non-empty network"))
    }

    /// `Σ_j softmax(α)_j · f_j(x, θ)`; choices sharing an operator share one path.
    fn mixture_forward(
        &self,
        g: &mut Graph,
        mi: usize,
        alpha: Var,
        input: Var,
        theta: Var,
        geom: super::spec::WeightedGeometry,
    ) -> Result<Var> {
        let m = &self.mixtures[mi];
        let probs = g.softmax(alpha)?;
        let mut acc: Option<Var> = None;
        for op in OperatorKind::ALL {
            let mut coef: Option<Var> = None;
            for (j, c) in m.choices.iter().enumerate() {
                if c.operator == op {
                    let p = g.index(probs, j)?;
                    coef = Some(match coef {
                        Some(prev) => g.add(prev, p)?,
                        None => p,
                    });
                }
            }
            let Some(coef) = coef else { continue };
            let y = apply_operator(g, op, geom.layer_kind(), input, theta, None, geom.conv(), &self.opts)?;
            let term = g.mul(y, coef)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::Network("empty choice set".into()))
    }

    /// Searchable layer names, in assignment order.
    pub fn layer_names(&self) -> Vec<String> {
        self.mixtures
            .iter()
            .map(|m| self.network.layers[m.layer].spec.name.clone())
            .collect()
    }

    pub fn input_shape(&self) -> Shape {
        self.network.input_shape()
    }

    pub fn all_modes(&self) -> Vec<ComputeMode> {
        let mut v: Vec<ComputeMode> = self.mode.choices().iter().map(|c| c.mode).collect();
        v.dedup();
        v
    }
}

/// Adds a per-output-channel bias to `[n, …, c]` activations.
fn add_channel_bias(g: &mut Graph, y: Var, bias: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let c = *shape.last().expect("rank ≥ 1");
    let rows = shape.iter().product::<usize>() / c;
    let flat = g.reshape(y, &[rows, c])?;
    let out = g.add_bias(flat, bias)?;
    Ok(g.reshape(out, &shape)?)
}

fn quantize_whole(g: &mut Graph, v: Var, bits: u32) -> Result<Var> {
    let t = g.value(v);
    let q = Tensor::new(t.shape().to_vec(), fake_quantize(t.data(), bits)?)?;
    Ok(g.constant(q))
}

/// Quantizes each of the `n` samples of a batch with its own scale.
fn quantize_rows(g: &mut Graph, v: Var, n: usize, bits: u32) -> Result<Var> {
    let t = g.value(v);
    let per = t.numel() / n;
    let mut data = Vec::with_capacity(t.numel());
    for row in t.data().chunks(per) {
        data.extend(fake_quantize(row, bits)?);
    }
    let q = Tensor::new(t.shape().to_vec(), data)?;
    Ok(g.constant(q))
}
