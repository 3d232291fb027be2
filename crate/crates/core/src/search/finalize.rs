use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::phases::alpha_terms;
use super::{derive_seed, Candidate, Context, EpochRecord, FinalMetrics};
use crate::data::Split;
use crate::energy::EnergyReport;
use crate::network::{format_assignment, Assignment, ChoiceKey, Model, Route, Trainable};
use crate::parallel::map_indices;
use crate::train::{evaluate, train_epoch, EarlyStop, Optimizers};
use crate::Result;

/// A relearned network with its fixed assignment.
#[derive(Debug, Clone)]
pub struct Finalized {
    pub model: Model,
    pub assignment: Assignment,
    pub metrics: FinalMetrics,
    pub energy: EnergyReport,
    pub history: Vec<EpochRecord>,
}

/// Fixes every layer to `assignment`, relearns θ and reports float and
/// quantized accuracy. `seed` drives shuffling and optional re-initialization.
pub(crate) fn finalize(ctx: &Context<'_>, mut model: Model, assignment: &[ChoiceKey], seed: u64) -> Result<Finalized> {
    let cfg = ctx.cfg;
    model.fix_all(assignment)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cfg.reinit {
        model.reinit_weights(&mut rng);
    }
    let route = Route::Assigned(assignment);
    let energy = ctx.report(assignment)?;
    let terms = alpha_terms(&model, &ctx.objective())?;
    let mut opts = Optimizers::new(cfg.lr_theta, 0.0);
    let mut stop = EarlyStop::new(cfg.patience, cfg.min_delta);
    let mut history = Vec::new();
    let mut epochs = 0;
    for epoch in 1..=cfg.relearn_epochs {
        let loss = train_epoch(
            &mut model,
            &mut opts,
            ctx.ds,
            cfg.batch_size,
            &mut rng,
            route,
            Trainable::THETA,
            None,
        )?;
        let val = evaluate(&model, ctx.ds, Split::Val, route, false)?;
        epochs = epoch;
        history.push(EpochRecord {
            phase: "relearn".into(),
            epoch,
            train_loss: loss.total,
            val_loss: val.loss,
            val_acc: val.accuracy,
            expected_energy: energy.normalized,
            penalty: terms.penalty,
            expected_cim_bits: terms.cim_usage,
            alpha: model.mixtures.iter().map(|m| m.probabilities()).collect(),
        });
        if stop.update(val.loss) {
            break;
        }
    }
    let train = evaluate(&model, ctx.ds, Split::Train, route, false)?;
    let val = evaluate(&model, ctx.ds, Split::Val, route, false)?;
    let test = evaluate(&model, ctx.ds, Split::Test, route, false)?;
    let quant = evaluate(&model, ctx.ds, Split::Test, route, true)?;
    let metrics = FinalMetrics {
        train_acc: train.accuracy,
        val_acc: val.accuracy,
        val_loss: val.loss,
        test_acc: test.accuracy,
        test_acc_quantized: quant.accuracy,
        relearn_epochs: epochs,
    };
    log::info!(
        "finalized {}: test {:.3} (quantized {:.3}), energy {:.4}",
        format_assignment(assignment),
        test.accuracy,
        quant.accuracy,
        energy.normalized
    );
    Ok(Finalized {
        model,
        assignment: assignment.to_vec(),
        metrics,
        energy,
        history,
    })
}

/// Relearns every candidate (in parallel, each with its own seed) and picks
/// the feasible one with the best validation accuracy; ties go to the lowest
/// index. With no feasible candidate the most accurate one is returned and
/// stays flagged infeasible.
pub(crate) fn population(
    ctx: &Context<'_>,
    trained: &Model,
    assignments: &[Assignment],
    base_seed: u64,
) -> Result<(Finalized, Vec<Candidate>)> {
    let results = map_indices(assignments.len(), |i| {
        finalize(ctx, trained.clone(), &assignments[i], derive_seed(base_seed, i as u64))
    });
    let results: Vec<Finalized> = results.into_iter().collect::<Result<_>>()?;

    let pick = |feasible_only: bool| {
        let mut best: Option<usize> = None;
        for (i, r) in results.iter().enumerate() {
            if feasible_only && !r.energy.feasible {
                continue;
            }
            if best.is_none_or(|b| r.metrics.val_acc > results[b].metrics.val_acc) {
                best = Some(i);
            }
        }
        best
    };
    let winner = pick(true).or_else(|| pick(false)).expect("population is non-empty");
    if !results[winner].energy.feasible {
        log::warn!("no candidate meets the CiM budget");
    }
    let candidates = results
        .iter()
        .enumerate()
        .map(|(i, r)| Candidate {
            index: i,
            seed: derive_seed(base_seed, i as u64),
            assignment: format_assignment(&r.assignment),
            val_acc: r.metrics.val_acc,
            test_acc: r.metrics.test_acc,
            test_acc_quantized: r.metrics.test_acc_quantized,
            energy_fj: r.energy.total_fj,
            energy_norm: r.energy.normalized,
            cim_bits: r.energy.cim_bits,
            feasible: r.energy.feasible,
            winner: i == winner,
        })
        .collect();
    let winner = results.into_iter().nth(winner).expect("winner index");
    Ok((winner, candidates))
}
