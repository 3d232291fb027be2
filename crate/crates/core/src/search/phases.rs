use rand_chacha::ChaCha8Rng;

use super::{Context, EpochRecord, RoundRecord};
use crate::data::Split;
use crate::energy::total_loss;
use crate::network::{ChoiceKey, Model, Route, Trainable};
use crate::tensor::{Graph, Tensor};
use crate::train::{evaluate, shuffled_batches, train_epoch, train_step, EarlyStop, LossValues, Objective, Optimizers};
use crate::Result;

/// Normalized expected energy, penalty and expected CiM bits of the
/// current α, independent of any data.
pub fn alpha_terms(model: &Model, obj: &Objective<'_>) -> Result<LossValues> {
    let mut g = Graph::new();
    let alphas: Vec<_> = model
        .mixtures
        .iter()
        .map(|m| g.constant(Tensor::vector(m.alpha.clone())))
        .collect();
    let choices: Vec<Vec<ChoiceKey>> = model.mixtures.iter().map(|m| m.choices.clone()).collect();
    let zero = g.constant(Tensor::scalar(0.0));
    let parts = total_loss(&mut g, zero, &alphas, &choices, obj.costs, obj.table, &obj.reg)?;
    Ok(LossValues {
        total: g.value(parts.total).item(),
        cross_entropy: 0.0,
        energy_norm: g.value(parts.energy_norm).item(),
        penalty: parts.penalty.map(|p| g.value(p).item()),
        cim_usage: parts.cim_usage.map(|u| g.value(u).item()),
    })
}

/// Logs the epoch and returns the validation objective used for early stopping.
fn record(ctx: &Context<'_>, model: &Model, phase: &str, epoch: usize, train_loss: f64) -> Result<(EpochRecord, f64)> {
    let val = evaluate(model, ctx.ds, Split::Val, Route::Mixture, false)?;
    let terms = alpha_terms(model, &ctx.objective())?;
    let rec = EpochRecord {
        phase: phase.to_string(),
        epoch,
        train_loss,
        val_loss: val.loss,
        val_acc: val.accuracy,
        expected_energy: terms.energy_norm,
        penalty: terms.penalty,
        expected_cim_bits: terms.cim_usage,
        alpha: model.mixtures.iter().map(|m| m.probabilities()).collect(),
    };
    log::debug!(
        "{phase} epoch {epoch}: train {train_loss:.4} val {:.4} acc {:.3} energy {:.4}",
        val.loss,
        val.accuracy,
        terms.energy_norm
    );
    Ok((rec, val.loss + terms.total))
}

fn joint_with(
    ctx: &Context<'_>,
    model: &mut Model,
    opts: &mut Optimizers,
    rng: &mut ChaCha8Rng,
    phase: &str,
) -> Result<Vec<EpochRecord>> {
    let obj = ctx.objective();
    let mut stop = EarlyStop::new(ctx.cfg.patience, ctx.cfg.min_delta);
    let mut history = Vec::new();
    for epoch in 1..=ctx.cfg.epochs {
        let loss = train_epoch(
            model,
            opts,
            ctx.ds,
            ctx.cfg.batch_size,
            rng,
            Route::Mixture,
            Trainable::BOTH,
            Some(&obj),
        )?;
        let (rec, val) = record(ctx, model, phase, epoch, loss.total)?;
        history.push(rec);
        if stop.update(val) {
            log::info!("{phase}: early stop after epoch {epoch}");
            break;
        }
    }
    Ok(history)
}

/// Single-level search: θ and α descend the same training loss together.
pub(super) fn joint(ctx: &Context<'_>, model: &mut Model, rng: &mut ChaCha8Rng, phase: &str) -> Result<Vec<EpochRecord>> {
    let mut opts = Optimizers::new(ctx.cfg.lr_theta, ctx.cfg.lr_alpha);
    joint_with(ctx, model, &mut opts, rng, phase)
}

/// First-order bi-level search: per training batch, one α step on a
/// validation batch, then one θ step on the training batch.
pub(super) fn bilevel(ctx: &Context<'_>, model: &mut Model, rng: &mut ChaCha8Rng) -> Result<Vec<EpochRecord>> {
    let obj = ctx.objective();
    let mut opts = Optimizers::new(ctx.cfg.lr_theta, ctx.cfg.lr_alpha);
    let mut stop = EarlyStop::new(ctx.cfg.patience, ctx.cfg.min_delta);
    let mut history = Vec::new();
    let bs = ctx.cfg.batch_size;
    let mut val_batches = Vec::new().into_iter();
    for epoch in 1..=ctx.cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for train in shuffled_batches(&ctx.ds.train, bs, rng) {
            let val = match val_batches.next() {
                Some(v) => v,
                None => {
                    val_batches = shuffled_batches(&ctx.ds.val, bs, rng).into_iter();
                    val_batches.next().unwrap_or_default()
                }
            };
            if !val.is_empty() {
                train_step(model, &mut opts, ctx.ds, &val, Route::Mixture, Trainable::ALPHA, Some(&obj))?;
            }
            let v = train_step(model, &mut opts, ctx.ds, &train, Route::Mixture, Trainable::THETA, Some(&obj))?;
            sum += v.total * train.len() as f64;
            count += train.len();
        }
        let (rec, val) = record(ctx, model, "search", epoch, sum / count.max(1) as f64)?;
        history.push(rec);
        if stop.update(val) {
            break;
        }
    }
    Ok(history)
}

/// The open (layer, choice) with the largest softmax(α); ties go to the
/// lowest layer, then the lowest choice.
pub(super) fn strongest_open(model: &Model) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, m) in model.mixtures.iter().enumerate() {
        if m.fixed.is_some() {
            continue;
        }
        for (j, p) in m.probabilities().into_iter().enumerate() {
            if best.is_none_or(|(_, _, bp)| p > bp) {
                best = Some((i, j, p));
            }
        }
    }
    best
}

/// Sequential search: one round per open layer; each round trains θ and α,
/// then freezes the strongest open (layer, choice) pair.
pub(super) fn sequential(
    ctx: &Context<'_>,
    model: &mut Model,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<EpochRecord>, Vec<RoundRecord>)> {
    let mut opts = Optimizers::new(ctx.cfg.lr_theta, ctx.cfg.lr_alpha);
    let mut history = Vec::new();
    let mut rounds = Vec::new();
    let names = model.layer_names();
    let mut round = 0;
    while strongest_open(model).is_some() {
        round += 1;
        history.extend(joint_with(ctx, model, &mut opts, rng, &format!("round-{round}"))?);
        let (i, j, p) = strongest_open(model).expect("open layer remains");
        model.mixtures[i].fix(j);
        let choice = model.mixtures[i].choices[j];
        log::info!("round {round}: {} fixed to {choice} (p={p:.4})", names[i]);
        rounds.push(RoundRecord {
            round,
            layer: names[i].clone(),
            layer_index: i,
            choice: choice.to_string(),
            probability: p,
            fixed: model
                .mixtures
                .iter()
                .map(|m| m.fixed.map(|f| m.choices[f].to_string()))
                .collect(),
        });
    }
    Ok((history, rounds))
}
