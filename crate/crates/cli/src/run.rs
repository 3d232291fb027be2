use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use opsearch_core::data::{load_dataset, Split};
use opsearch_core::energy::{assignment_energy, total_weight_bits, EnergyReport, EnergyTable};
use opsearch_core::network::{format_assignment, parse_assignment, Assignment, Model, NetworkSpec, ResolvedNetwork, Route};
use opsearch_core::search::{self, SearchOutcome};
use opsearch_core::train::evaluate;
use serde::Serialize;

use crate::config::{resolve_net, RunConfig};
use crate::svg::{scatter, Point};
use crate::{Classify, EnergyArgs, EvalArgs, Failure};

pub const PARETO_HEADER: [&str; 7] = [
    "lambda",
    "strategy",
    "accuracy",
    "energy_fj",
    "energy_norm",
    "cim_bits",
    "assignment",
];

#[derive(Serialize)]
struct Summary<'a> {
    strategy: String,
    mode: String,
    layers: &'a [String],
    assignment: String,
    metrics: &'a search::FinalMetrics,
    feasible: bool,
    rounds: &'a [search::RoundRecord],
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes every artifact of a run into `dir`.
fn write_run(dir: &Path, cfg: &RunConfig, spec: &NetworkSpec, out: &SearchOutcome) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(dir.join("netspec.toml"), spec.to_toml())?;
    let mut metrics = String::new();
    for rec in &out.history {
        metrics.push_str(&serde_json::to_string(rec)?);
        metrics.push('\n');
    }
    fs::write(dir.join("metrics.jsonl"), metrics)?;
    fs::write(dir.join("assignment.txt"), format!("{}\n", format_assignment(&out.assignment)))?;
    write_json(&dir.join("energy.json"), &out.energy)?;
    write_json(&dir.join("model.json"), &out.model)?;
    write_json(
        &dir.join("summary.json"),
        &Summary {
            strategy: out.config.strategy.to_string(),
            mode: out.config.mode.to_string(),
            layers: &out.layer_names,
            assignment: format_assignment(&out.assignment),
            metrics: &out.metrics,
            feasible: out.feasible,
            rounds: &out.rounds,
        },
    )?;
    if !out.population.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("population.csv"))?;
        for c in &out.population {
            w.serialize(c)?;
        }
        w.flush()?;
    }
    Ok(())
}

struct Prepared {
    ds: opsearch_core::data::Dataset,
    spec: NetworkSpec,
    net: ResolvedNetwork,
    table: EnergyTable,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, Failure> {
    let ds = cfg.dataset().config_err()?;
    let spec = cfg.network(&ds).config_err()?;
    let net = spec.resolve().config_err()?;
    let table = cfg.table().config_err()?;
    Ok(Prepared { ds, spec, net, table })
}

pub fn search(cfg: &RunConfig) -> Result<(), Failure> {
    let p = prepare(cfg)?;
    let out = search::search(p.net, &p.ds, &p.table, &cfg.search).run_err()?;
    write_run(&cfg.out, cfg, &p.spec, &out).run_err()?;
    println!("assignment: {}", format_assignment(&out.assignment));
    println!(
        "test accuracy: {:.4} (quantized {:.4})",
        out.metrics.test_acc, out.metrics.test_acc_quantized
    );
    println!("energy: {} fJ, normalized {:.6}", out.energy.total_fj, out.energy.normalized);
    println!("cim bits: {}", out.energy.cim_bits);
    println!("run directory: {}", cfg.out.display());
    if !out.feasible {
        return Err(Failure::Infeasible(format!(
            "winner uses {} CiM bits, budget is {}",
            out.energy.cim_bits,
            out.energy.budget_bits.unwrap_or(0)
        )));
    }
    Ok(())
}

fn lambda_dir(i: usize, lambda: f64) -> String {
    format!("lambda-{i:02}-{lambda}")
}

/// One search per λ, in parallel threads, with the same seed everywhere so
/// rows differ only by λ. Rows are ordered by λ as given.
pub fn pareto(cfg: &RunConfig, lambdas: &[f64]) -> Result<(), Failure> {
    if lambdas.len() < 2 {
        return Err(Failure::Config(anyhow!("pareto needs at least two λ values")));
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Failure::Config(anyhow!("λ must be finite and ≥ 0, got {l}")));
    }
    let p = prepare(cfg)?;
    let results: Vec<anyhow::Result<SearchOutcome>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lambdas
            .iter()
            .enumerate()
            .map(|(i, &lambda)| {
                let p = &p;
                scope.spawn(move || -> anyhow::Result<SearchOutcome> {
                    let mut run = cfg.clone();
                    run.search.lambda = lambda;
                    run.out = cfg.out.join(lambda_dir(i, lambda));
                    let out = search::search(p.net.clone(), &p.ds, &p.table, &run.search)?;
                    write_run(&run.out, &run, &p.spec, &out)?;
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("search thread panicked"))))
            .collect()
    });

    let write = || -> anyhow::Result<usize> {
        fs::create_dir_all(&cfg.out)?;
        let mut rows = csv::Writer::from_path(cfg.out.join("pareto.csv"))?;
        rows.write_record(PARETO_HEADER)?;
        let mut status = csv::Writer::from_path(cfg.out.join("pareto_status.csv"))?;
        status.write_record(["lambda", "status", "message"])?;
        let mut points = Vec::new();
        let mut failures = 0;
        for (&lambda, r) in lambdas.iter().zip(&results) {
            match r {
                Ok(out) => {
                    rows.write_record([
                        lambda.to_string(),
                        cfg.search.strategy.to_string(),
                        out.metrics.test_acc.to_string(),
                        out.energy.total_fj.to_string(),
                        out.energy.normalized.to_string(),
                        out.energy.cim_bits.to_string(),
                        format_assignment(&out.assignment),
                    ])?;
                    let state = if out.feasible { "ok" } else { "infeasible" };
                    status.write_record([lambda.to_string(), state.into(), String::new()])?;
                    points.push(Point {
                        x: out.energy.normalized,
                        y: out.metrics.test_acc,
                        label: format!("λ={lambda}"),
                    });
                }
                Err(e) => {
                    failures += 1;
                    status.write_record([lambda.to_string(), "failed".into(), format!("{e:#}")])?;
                }
            }
        }
        rows.flush()?;
        status.flush()?;
        let svg = scatter(
            &format!("{} search on {}", cfg.search.strategy, p.spec.name),
            "energy / all-typical digital energy",
            "test accuracy",
            &points,
        );
        fs::write(cfg.out.join("pareto.svg"), svg)?;
        Ok(failures)
    };
    let failures = write().run_err()?;
    println!("wrote {}", cfg.out.join("pareto.csv").display());
    if failures > 0 {
        return Err(Failure::Run(anyhow!("{failures} of {} λ runs failed", lambdas.len())));
    }
    Ok(())
}

/// Parses `T,MF,...` or `all:<choice>` for `layers` searchable layers.
pub fn expand_assignment(text: &str, layers: usize) -> anyhow::Result<Assignment> {
    if let Some(choice) = text.strip_prefix("all:") {
        let key = choice.parse().map_err(|e: String| anyhow!(e))?;
        return Ok(vec![key; layers]);
    }
    let a = parse_assignment(text).map_err(|e| anyhow!(e))?;
    if a.len() != layers {
        bail!("assignment has {} entries but the network has {layers} searchable layers", a.len());
    }
    Ok(a)
}

fn energy_report(args: &EnergyArgs) -> anyhow::Result<EnergyReport> {
    if let Some(dir) = &args.run {
        let cfg = RunConfig::load(&dir.join("config.toml"))?;
        let spec = NetworkSpec::load(&dir.join("netspec.toml"))?;
        let net = spec.resolve()?;
        let table = cfg.table()?;
        let text = fs::read_to_string(dir.join("assignment.txt"))?;
        let assignment = expand_assignment(text.trim(), net.num_searchable())?;
        let budget = cfg.search.budget_bits(&net, &table);
        return Ok(assignment_energy(&assignment, &net.layer_costs(), &table, budget)?);
    }
    let [h, w, c] = <[usize; 3]>::try_from(args.input.as_slice())
        .map_err(|_| anyhow!("--input needs three values h,w,c"))?;
    let net = resolve_net(&args.net, [h, w, c], args.classes)?.resolve()?;
    let table = match &args.energy_table {
        Some(p) => EnergyTable::load(p)?,
        None => EnergyTable::default(),
    };
    let text = args
        .assignment
        .as_deref()
        .ok_or_else(|| anyhow!("--assignment is required without --run"))?;
    let assignment = expand_assignment(text, net.num_searchable())?;
    let costs = net.layer_costs();
    let budget = args.cim_budget.map(|b| b.resolve(total_weight_bits(&costs, &table)));
    Ok(assignment_energy(&assignment, &costs, &table, budget)?)
}

pub fn energy(args: &EnergyArgs) -> Result<(), Failure> {
    let report = energy_report(args).config_err()?;
    if args.json {
        let text = serde_json::to_string_pretty(&report).run_err()?;
        println!("{text}");
    } else {
        println!("{report}");
        let ratio = if report.total_fj > 0.0 {
            report.baseline_fj / report.total_fj
        } else {
            0.0
        };
        println!("baseline_ratio={ratio:.6}");
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let dir = &args.run;
    let cfg = RunConfig::load(&dir.join("config.toml")).config_err()?;
    let split: Split = args.split.parse().map_err(|e: String| Failure::Config(anyhow!(e)))?;
    let source = args.dataset.as_deref().unwrap_or(&cfg.dataset);
    let ds = load_dataset(source, cfg.search.seed).config_err()?;
    let text = fs::read_to_string(dir.join("model.json"))
        .with_context(|| format!("reading {}", dir.join("model.json").display()))
        .config_err()?;
    let model = Model::from_snapshot(serde_json::from_str(&text).config_err()?).config_err()?;
    let assignment = model.argmax();
    let e = evaluate(&model, &ds, split, Route::Assigned(&assignment), args.quantized).run_err()?;
    println!("assignment={}", format_assignment(&assignment));
    println!("accuracy={}", e.accuracy);
    println!("loss={}", e.loss);
    Ok(())
}

pub fn dump_defaults() {
    let mut out = std::io::stdout().lock();
    let _ = write!(out, "{}", EnergyTable::default().to_csv());
    let _ = writeln!(out);
    let _ = writeln!(out, "# run configuration defaults");
    let _ = write!(out, "{}", RunConfig::default().to_toml());
}
