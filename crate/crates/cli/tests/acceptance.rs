//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fail. Runs as a plain binary so the lines always reach the console.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use opsearch_core::data::{load_dataset, Dataset};
use opsearch_core::energy::{assignment_energy, Budget, EnergyTable};
use opsearch_core::network::{
    format_assignment, preset, ChoiceKey, ComputeMode, Model, NetworkSpec, SearchMode,
};
use opsearch_core::operators::{ConvGeometry, OperatorKind};
use opsearch_core::search::{search, train_assignment, SearchConfig, SearchOutcome, Strategy};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn table() -> EnergyTable {
    EnergyTable::default()
}

fn net(name: &str, ds: &Dataset) -> NetworkSpec {
    preset(name, ds.shape, ds.classes).unwrap()
}

fn run(spec: &NetworkSpec, ds: &Dataset, cfg: &SearchConfig) -> SearchOutcome {
    search(spec.resolve().unwrap(), ds, &table(), cfg).unwrap()
}

fn uniform_assignment(len: usize, key: ChoiceKey) -> Vec<ChoiceKey> {
    vec![key; len]
}

fn digital(op: OperatorKind) -> ChoiceKey {
    ChoiceKey::digital(op)
}

fn cim(op: OperatorKind) -> ChoiceKey {
    ChoiceKey::new(op, ComputeMode::CiM4)
}

fn energy_ratio() -> Outcome {
    let costs = preset("mini-squeeze", [8, 8, 1], 10).unwrap().resolve().unwrap().layer_costs();
    let n = costs.len();
    let t = assignment_energy(&uniform_assignment(n, digital(OperatorKind::Typical)), &costs, &table(), None).unwrap();
    let b = assignment_energy(&uniform_assignment(n, digital(OperatorKind::Binary)), &costs, &table(), None).unwrap();
    let ratio = t.total_fj / b.total_fj;
    ensure((ratio - 9.2406).abs() <= 1e-4, format!("T/B = {ratio:.6}, want 9.2406 ± 1e-4"))
}

fn cim_ratio() -> Outcome {
    let costs = preset("mini-cnn", [8, 8, 1], 4).unwrap().resolve().unwrap().layer_costs();
    let n = costs.len();
    let d = assignment_energy(&uniform_assignment(n, digital(OperatorKind::Typical)), &costs, &table(), None).unwrap();
    let c = assignment_energy(&uniform_assignment(n, cim(OperatorKind::Typical)), &costs, &table(), None).unwrap();
    let ratio = d.total_fj / c.total_fj;
    ensure((ratio - 5.711).abs() <= 1e-3, format!("digital/CiM = {ratio:.6}, want 5.711 ± 1e-3"))
}

fn gradients() -> Outcome {
    const INSTANCES: usize = 20;
    let mut worst_exact: (f64, &str) = (0.0, "");
    let mut r = oracle::rng(31);
    for (name, case) in oracle::exact_op_cases() {
        for _ in 0..INSTANCES {
            let e = case(&mut r);
            if e > worst_exact.0 {
                worst_exact = (e, name);
            }
        }
    }
    for _ in 0..INSTANCES {
        let e = oracle::total_loss_case(&mut r);
        if e > worst_exact.0 {
            worst_exact = (e, "total_loss");
        }
    }
    let mut worst_surrogate: (f64, &str) = (0.0, "");
    for (name, case) in oracle::surrogate_cases() {
        for _ in 0..INSTANCES {
            let e = case(&mut r);
            if e > worst_surrogate.0 {
                worst_surrogate = (e, name);
            }
        }
    }
    ensure(
        worst_exact.0 < 1e-4 && worst_surrogate.0 < 1e-3,
        format!(
            "{INSTANCES} instances per op; worst exact {:.2e} ({}), worst surrogate {:.2e} ({})",
            worst_exact.0, worst_exact.1, worst_surrogate.0, worst_surrogate.1
        ),
    )
}

fn algebra() -> Outcome {
    let mut r = oracle::rng(41);
    let mut failures = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..40);
        let x = oracle::vector_with_zeros(&mut r, n);
        let w = oracle::vector_with_zeros(&mut r, n);
        let mf = |a: &[f64], b: &[f64]| oracle::graph_vector_op(OperatorKind::MultiplicationFree, a, b);
        let bin: Vec<f64> = w.iter().map(|&v| oracle::sign(v)).collect();
        let ok = mf(&x, &w) == mf(&w, &x)
            && mf(&x, &x) == 2.0 * x.iter().sum::<f64>()
            && oracle::graph_vector_op(OperatorKind::Binary, &x, &w)
                == oracle::graph_vector_op(OperatorKind::Typical, &x, &bin);
        if !ok {
            failures += 1;
        }
    }
    ensure(failures == 0, format!("1000 vectors, {failures} violations"))
}

fn convolution() -> Outcome {
    let mut r = oracle::rng(51);
    let mut worst = [0.0f64; 3];
    let geoms = [
        ConvGeometry { kernel: 3, stride: 1, padding: 0 },
        ConvGeometry { kernel: 3, stride: 1, padding: 1 },
        ConvGeometry { kernel: 2, stride: 2, padding: 0 },
    ];
    for trial in 0..10 {
        let c = 1 + trial % 3;
        let x = oracle::uniform(&mut r, &[2, 6, 6, c], -1.0, 1.0);
        for geom in geoms {
            let w = oracle::uniform(&mut r, &[3, geom.kernel * geom.kernel * c], -1.0, 1.0);
            for (k, kind) in oracle::KINDS.into_iter().enumerate() {
                let got = oracle::graph_conv(kind, &x, &w, geom);
                let (want, _) = oracle::conv_oracle(
                    oracle::pair_for(kind),
                    x.data(),
                    [2, 6, 6, c],
                    w.data(),
                    3,
                    geom.kernel,
                    geom.stride,
                    geom.padding,
                );
                let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst[k] = worst[k].max(diff);
            }
        }
    }
    // f_M accumulates its two halves separately, so it may differ in the last bits.
    ensure(
        worst[0] == 0.0 && worst[2] == 0.0 && worst[1] <= 1e-12,
        format!("max |Δ| T {:.1e}, MF {:.1e}, B {:.1e}", worst[0], worst[1], worst[2]),
    )
}

struct Sweep {
    outcomes: Vec<(f64, SearchOutcome)>,
}

fn lambda_sweep() -> Sweep {
    let ds = load_dataset("synthetic:blobs", 7).unwrap();
    let spec = net("mini-cnn", &ds);
    let outcomes = std::thread::scope(|s| {
        let handles: Vec<_> = [0.0, 0.1, 1.0, 10.0]
            .into_iter()
            .map(|lambda| {
                let (ds, spec) = (&ds, &spec);
                s.spawn(move || {
                    let cfg = SearchConfig { lambda, seed: 7, ..Default::default() };
                    (lambda, run(spec, ds, &cfg))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    Sweep { outcomes }
}

fn monotone(sweep: &Sweep) -> Outcome {
    let norms: Vec<f64> = sweep.outcomes.iter().map(|(_, o)| o.energy.normalized).collect();
    let rows: Vec<String> = sweep
        .outcomes
        .iter()
        .map(|(l, o)| format!("λ={l}: {} {:.4}", format_assignment(&o.assignment), o.energy.normalized))
        .collect();
    let last = &sweep.outcomes.last().unwrap().1.assignment;
    let all_binary = last.iter().all(|k| *k == digital(OperatorKind::Binary));
    ensure(norms.windows(2).all(|w| w[1] <= w[0]) && all_binary, rows.join("; "))
}

fn quantized(sweep: &Sweep) -> Outcome {
    let (lambda, o) = &sweep.outcomes[1];
    let gap = (o.metrics.test_acc - o.metrics.test_acc_quantized).abs();
    ensure(
        gap <= 0.02,
        format!(
            "λ={lambda} seed 7: float {:.4}, quantized {:.4}, gap {:.4}",
            o.metrics.test_acc, o.metrics.test_acc_quantized, gap
        ),
    )
}

fn digits() -> Dataset {
    load_dataset("synthetic:digits", 7).unwrap()
}

fn mixed_beats_binary() -> (Outcome, Outcome) {
    let ds = digits();
    let spec = net("mini-squeeze", &ds);
    let cfg = SearchConfig {
        strategy: Strategy::Sequential,
        lambda: 0.5,
        seed: 7,
        ..Default::default()
    };
    let seq = run(&spec, &ds, &cfg);
    // The baseline trains for as many epochs as the whole search used.
    let epochs = seq.history.len();
    let baseline_cfg = SearchConfig { relearn_epochs: epochs, ..cfg.clone() };
    let layers = seq.assignment.len();
    let binary = train_assignment(
        spec.resolve().unwrap(),
        &ds,
        &table(),
        &baseline_cfg,
        &uniform_assignment(layers, digital(OperatorKind::Binary)),
    )
    .unwrap();
    let accuracy = ensure(
        seq.energy.normalized <= 0.5 && seq.metrics.test_acc >= binary.metrics.test_acc,
        format!(
            "sequential {} energy {:.4} acc {:.4}; all-B acc {:.4} ({} epoch budget)",
            format_assignment(&seq.assignment),
            seq.energy.normalized,
            seq.metrics.test_acc,
            binary.metrics.test_acc,
            epochs
        ),
    );
    (accuracy, sequential_contract(&seq))
}

fn sequential_contract(seq: &SearchOutcome) -> Outcome {
    let layers = seq.assignment.len();
    let mut prev: Vec<Option<String>> = vec![None; layers];
    for (r, round) in seq.rounds.iter().enumerate() {
        let newly: Vec<usize> = (0..layers)
            .filter(|&i| prev[i].is_none() && round.fixed[i].is_some())
            .collect();
        if newly != [round.layer_index] {
            return Err(format!("round {} fixed {:?}", r + 1, newly));
        }
        if let Some(i) = (0..layers).find(|&i| prev[i].is_some() && prev[i] != round.fixed[i]) {
            return Err(format!("round {} changed layer {i}", r + 1));
        }
        prev = round.fixed.clone();
    }
    let complete = prev.iter().all(Option::is_some)
        && prev.iter().map(|c| c.clone().unwrap()).collect::<Vec<_>>().join(",") == format_assignment(&seq.assignment);
    ensure(
        seq.rounds.len() == layers && complete,
        format!("{} rounds for {layers} layers, one new layer each, none changed", seq.rounds.len()),
    )
}

fn sampling() -> Outcome {
    let ds = digits();
    let spec = net("mini-squeeze", &ds);
    let mut r = oracle::rng(61);
    let mut model = Model::new(spec.resolve().unwrap(), SearchMode::Hybrid, Default::default(), &mut r).unwrap();
    for m in &mut model.mixtures {
        for a in &mut m.alpha {
            *a = r.random_range(-2.0..2.0);
        }
    }
    const DRAWS: usize = 10_000;
    let mut counts: Vec<Vec<usize>> = model.mixtures.iter().map(|m| vec![0; m.choices.len()]).collect();
    for _ in 0..DRAWS {
        for (l, key) in model.sample(&mut r).iter().enumerate() {
            let j = model.mixtures[l].choices.iter().position(|c| c == key).unwrap();
            counts[l][j] += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for (m, c) in model.mixtures.iter().zip(&counts) {
        for (p, &n) in m.probabilities().iter().zip(c) {
            worst = worst.max((n as f64 / DRAWS as f64 - p).abs());
        }
    }
    ensure(
        worst <= 0.02,
        format!("{} layers × 6 choices, max |freq − p| = {worst:.4}", model.mixtures.len()),
    )
}

fn hybrid() -> Outcome {
    let ds = digits();
    let spec = net("mini-squeeze", &ds);
    let cfg = |budget| SearchConfig {
        strategy: Strategy::Variational,
        mode: SearchMode::Hybrid,
        cim_budget: Some(budget),
        seed: 7,
        ..Default::default()
    };
    let quarter = run(&spec, &ds, &cfg(Budget::Percent(25.0)));
    let zero = run(&spec, &ds, &cfg(Budget::Bits(0)));
    let budget = quarter.energy.budget_bits.unwrap();
    let within = quarter.energy.cim_bits <= budget && quarter.feasible;
    let digital_only = zero.energy.cim_bits == 0 && zero.assignment.iter().all(|k| k.mode == ComputeMode::Digital8);
    let penalties: Vec<f64> = quarter
        .history
        .iter()
        .filter(|h| h.phase == "search")
        .filter_map(|h| h.penalty)
        .collect();
    let (first, last) = (penalties[0], *penalties.last().unwrap());
    ensure(
        within && digital_only && last <= 0.5 * first,
        format!(
            "B=25%: winner {} bits ≤ {budget}; B=0: winner {}; penalty {first:.3e} → {last:.3e} over {} epochs",
            quarter.energy.cim_bits,
            format_assignment(&zero.assignment),
            penalties.len()
        ),
    )
}

fn determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_opsearch");
    let dir = tempfile::tempdir().unwrap();
    let invoke = |out: &Path| {
        let status = Command::new(exe)
            .args(["search", "--dataset", "synthetic:blobs", "--seed", "5", "--strategy", "variational"])
            .args(["--samples", "4", "--epochs", "10", "--relearn-epochs", "4", "--out"])
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    invoke(&a);
    invoke(&b);
    let mut same = Vec::new();
    for file in ["assignment.txt", "metrics.jsonl", "summary.json", "population.csv", "model.json"] {
        let (x, y) = (std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap());
        if x != y {
            return Err(format!("{file} differs"));
        }
        same.push(file);
    }
    Ok(format!("byte-identical: {}", same.join(", ")))
}

fn main() -> ExitCode {
    type Check = Box<dyn FnOnce() -> Outcome>;
    let sweep = std::rc::Rc::new(std::cell::OnceCell::new());
    let seq = std::rc::Rc::new(std::cell::OnceCell::new());
    let (s1, s2) = (sweep.clone(), sweep.clone());
    let (q1, q2) = (seq.clone(), seq.clone());
    let checks: Vec<(&str, Check)> = vec![
        ("energy ratio all-T / all-B", Box::new(energy_ratio)),
        ("energy ratio digital / CiM", Box::new(cim_ratio)),
        ("gradient suite", Box::new(gradients)),
        ("operator algebra", Box::new(algebra)),
        ("convolution vs sliding window", Box::new(convolution)),
        ("λ-sweep monotone, λ=10 all-B", Box::new(move || monotone(s1.get_or_init(lambda_sweep)))),
        ("sequential beats all-B at energy ≤ 0.5", Box::new(move || q1.get_or_init(mixed_beats_binary).0.clone())),
        ("sequential freeze contract", Box::new(move || q2.get_or_init(mixed_beats_binary).1.clone())),
        ("variational sampling fidelity", Box::new(sampling)),
        ("hybrid budget feasibility", Box::new(hybrid)),
        ("determinism of `search`", Box::new(determinism)),
        ("quantized within 2 points", Box::new(move || quantized(s2.get_or_init(lambda_sweep)))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS {:>2} {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
