//! Command line front end: seeded simulation of the benchmark designs,
//! streaming runs of the personalized online ensemble over CSV panels, and a
//! benchmark harness comparing it against a pooled-only online ensemble and a
//! one-shot V-fold ensemble on identical data.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use posl::cv::{vfold_variant_folds, CvScheme, FoldSpec};
use posl::engine::{Engine, EngineConfig, StepOutput};
use posl::learners::{fit, FittedLearner, LearnerSpec, Scope, TrainRow};
use posl::panel::{
    make_summary, read_panel_csv, write_panel_csv, Panel, PanelRecord, SubjectId, Time,
};
use posl::selector::{nnls_weights, EnsembleWeights, MetaDesign, MetaRow, WeightMode};
use posl::simgen::{build_simulation, Simulation, TruthTrace};

#[derive(Parser)]
#[command(name = "posl", version, about = "Personalized online ensembling for panel time-series")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate one of the four seeded study designs as CSV files.
    Simulate(SimulateArgs),
    /// Stream a target series against a historical panel and write forecasts.
    Run(RunArgs),
    /// Compare strategies on simulated data over several replicates.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Study design, 1 through 4.
    #[arg(long)]
    which: u8,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of historical subjects.
    #[arg(long, default_value_t = 30)]
    subjects: usize,
    /// Series length per subject.
    #[arg(long, default_value_t = 540)]
    tau: Time,
}

#[derive(Args)]
struct RunArgs {
    /// Historical panel CSV (columns id,t[,entry,exit][,x..][,w..],y).
    #[arg(long)]
    panel: PathBuf,
    /// Target subject CSV in the same schema (single subject).
    #[arg(long)]
    target: PathBuf,
    /// Optional truth CSV (id,t,psi0) enabling oracle reports.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Engine configuration TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the ensembling mode: discrete, convex, or conditional.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Study design, 1 through 4.
    #[arg(long)]
    which: u8,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long, default_value_t = 30)]
    subjects: usize,
    #[arg(long, default_value_t = 540)]
    tau: Time,
    /// Ensembling mode for the online strategies.
    #[arg(long, default_value = "convex")]
    mode: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy)]
enum ExitKind {
    Usage = 2,
    Io = 3,
    Compute = 4,
}

struct CliError {
    kind: ExitKind,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self { kind: ExitKind::Usage, msg: msg.into() }
    }

    fn io(msg: impl std::fmt::Display) -> Self {
        Self { kind: ExitKind::Io, msg: msg.to_string() }
    }

    fn compute(msg: impl std::fmt::Display) -> Self {
        Self { kind: ExitKind::Compute, msg: msg.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    seed: Option<u64>,
    which: Option<u8>,
    replicates: Option<usize>,
    subjects: Option<usize>,
    tau: Option<Time>,
    mode: Option<String>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<EngineConfig>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(&args),
        Cmd::Run(args) => cmd_run(&args),
        Cmd::Bench(args) => cmd_bench(&args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.msg);
        std::process::exit(e.kind as i32);
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CliError::io)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> CliResult<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(CliError::compute)?;
    fs::write(dir.join("manifest.json"), json + "\n").map_err(CliError::io)
}

fn parse_mode(name: &str) -> CliResult<WeightMode> {
    match name {
        "discrete" => Ok(WeightMode::Discrete),
        "convex" => Ok(WeightMode::Convex),
        "conditional" => Ok(WeightMode::Conditional),
        other => Err(CliError::usage(format!(
            "unknown mode '{other}' (expected discrete, convex, or conditional)"
        ))),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    ensure_dir(&args.out_dir)?;
    let sim = build_simulation(args.which, args.subjects, args.tau, args.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    write_panel_csv(&sim.historical, &args.out_dir.join("historical.csv"))
        .map_err(CliError::io)?;
    let target_panel =
        Panel::new(vec![sim.target.clone()], args.tau).map_err(CliError::compute)?;
    write_panel_csv(&target_panel, &args.out_dir.join("target.csv")).map_err(CliError::io)?;
    sim.truth.write_csv(&args.out_dir.join("truth.csv")).map_err(CliError::io)?;
    write_manifest(
        &args.out_dir,
        &RunManifest {
            tool: "posl",
            version: env!("CARGO_PKG_VERSION"),
            command: "simulate".into(),
            seed: Some(args.seed),
            which: Some(args.which),
            replicates: None,
            subjects: Some(args.subjects),
            tau: Some(args.tau),
            mode: None,
            outputs: vec![
                "historical.csv".into(),
                "target.csv".into(),
                "truth.csv".into(),
            ],
            config: None,
        },
    )
}

fn load_config(path: Option<&Path>, mode: Option<&str>) -> CliResult<EngineConfig> {
    let mut config = match path {
        None => EngineConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(CliError::io)?;
            toml::from_str(&text)
                .map_err(|e| CliError::usage(format!("bad config {}: {e}", p.display())))?
        }
    };
    if let Some(m) = mode {
        config.mode = parse_mode(m)?;
    }
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(config)
}

/// Streams the target through the engine in batches, returning one output per
/// step alongside the chronological step boundaries.
fn stream_target(
    engine: &mut Engine,
    target_full: &PanelRecord,
) -> CliResult<Vec<StepOutput>> {
    let batch = engine.config().batch_size as usize;
    let mut outs = Vec::new();
    let mut t = engine.target().last_time();
    let last = target_full.last_time();
    while t < last {
        let upper = (t + batch as Time).min(last);
        let rows: Vec<(Vec<f64>, f64)> = ((t + 1)..=upper)
            .map(|s| {
                let w = target_full.covariates_at(s).unwrap_or(&[]).to_vec();
                let y = target_full.outcome_at(s).expect("time within record");
                (w, y)
            })
            .collect();
        outs.push(engine.step(&rows).map_err(CliError::compute)?);
        t = upper;
    }
    Ok(outs)
}

fn seed_record(target: &PanelRecord, seed_len: usize) -> CliResult<PanelRecord> {
    if target.len() <= seed_len {
        return Err(CliError::usage(format!(
            "target series has {} observations; need more than {seed_len}",
            target.len()
        )));
    }
    let cut = target.first_time() + seed_len as Time - 1;
    target
        .truncated(cut)
        .ok_or_else(|| CliError::usage("target series is empty"))
}

fn write_forecasts_csv(
    path: &Path,
    outs: &[StepOutput],
    names: &[String],
) -> CliResult<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(CliError::io)?;
    wtr.write_record(["t", "h", "source", "yhat"]).map_err(CliError::io)?;
    for out in outs {
        for (h, v) in out.ensemble_forecast.iter().enumerate() {
            wtr.write_record([
                out.chron_time.to_string(),
                (h + 1).to_string(),
                "ensemble".to_string(),
                v.to_string(),
            ])
            .map_err(CliError::io)?;
        }
        for (j, fc) in out.learner_forecasts.iter().enumerate() {
            let Some(fc) = fc else { continue };
            for (h, v) in fc.iter().enumerate() {
                wtr.write_record([
                    out.chron_time.to_string(),
                    (h + 1).to_string(),
                    names[j].clone(),
                    v.to_string(),
                ])
                .map_err(CliError::io)?;
            }
        }
    }
    wtr.flush().map_err(CliError::io)
}

fn write_weights_csv(path: &Path, outs: &[StepOutput], names: &[String]) -> CliResult<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(CliError::io)?;
    wtr.write_record(["t", "learner", "alpha", "selected"]).map_err(CliError::io)?;
    for out in outs {
        for (j, a) in out.weights.alpha.iter().enumerate() {
            wtr.write_record([
                out.chron_time.to_string(),
                names[j].clone(),
                a.to_string(),
                u8::from(out.selected == Some(j)).to_string(),
            ])
            .map_err(CliError::io)?;
        }
    }
    wtr.flush().map_err(CliError::io)
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    ensure_dir(&args.out_dir)?;
    let config = load_config(args.config.as_deref(), args.mode.as_deref())?;
    let panel = read_panel_csv(&args.panel, None).map_err(CliError::io)?;
    let target_panel = read_panel_csv(&args.target, None).map_err(CliError::io)?;
    let target = target_panel
        .records()
        .first()
        .cloned()
        .ok_or_else(|| CliError::usage("target CSV contains no observations"))?;
    if target_panel.records().len() > 1 {
        return Err(CliError::usage("target CSV must contain exactly one subject"));
    }
    let truth = match &args.truth {
        Some(p) => Some(TruthTrace::read_csv(p).map_err(CliError::io)?),
        None => None,
    };

    let names: Vec<String> = config.learners.iter().map(|l| l.name.clone()).collect();
    let seed = seed_record(&target, config.batch_size as usize)?;
    let mut engine =
        Engine::new(config.clone(), panel, seed).map_err(CliError::compute)?;

    let mut outs = Vec::new();
    let mut oracle_rows: Vec<(Time, String)> = Vec::new();
    let batch = config.batch_size as usize;
    let mut t = engine.target().last_time();
    let last = target.last_time();
    while t < last {
        let upper = (t + batch as Time).min(last);
        let rows: Vec<(Vec<f64>, f64)> = ((t + 1)..=upper)
            .map(|s| {
                (
                    target.covariates_at(s).unwrap_or(&[]).to_vec(),
                    target.outcome_at(s).expect("time within record"),
                )
            })
            .collect();
        let out = engine.step(&rows).map_err(CliError::compute)?;
        if let Some(truth) = &truth {
            if let Ok(report) = engine.oracle_eval(truth) {
                let mut row = String::new();
                write!(
                    row,
                    "{},{},{},{},{},{}",
                    report.selected_choice,
                    report.oracle_choice,
                    report.selected_risk,
                    report.oracle_risk,
                    report.ratio,
                    report.ensemble_risk.map(|v| v.to_string()).unwrap_or_default()
                )
                .unwrap();
                oracle_rows.push((out.chron_time, row));
            }
        }
        outs.push(out);
        t = upper;
    }

    write_forecasts_csv(&args.out_dir.join("forecasts.csv"), &outs, &names)?;
    write_weights_csv(&args.out_dir.join("weights.csv"), &outs, &names)?;
    engine
        .decayed_risk_table()
        .write_csv(&args.out_dir.join("risks.csv"))
        .map_err(CliError::io)?;
    let mut outputs = vec!["forecasts.csv".into(), "weights.csv".into(), "risks.csv".into()];
    if truth.is_some() {
        let mut text =
            String::from("t,selected,oracle,selected_risk,oracle_risk,ratio,ensemble_risk\n");
        for (t, row) in &oracle_rows {
            writeln!(text, "{t},{row}").unwrap();
        }
        fs::write(args.out_dir.join("oracle.csv"), text).map_err(CliError::io)?;
        outputs.push("oracle.csv".into());
    }
    write_manifest(
        &args.out_dir,
        &RunManifest {
            tool: "posl",
            version: env!("CARGO_PKG_VERSION"),
            command: "run".into(),
            seed: None,
            which: None,
            replicates: None,
            subjects: None,
            tau: None,
            mode: Some(mode_name(config.mode).into()),
            outputs,
            config: Some(config),
        },
    )
}

fn mode_name(mode: WeightMode) -> &'static str {
    match mode {
        WeightMode::Discrete => "discrete",
        WeightMode::Convex => "convex",
        WeightMode::Conditional => "conditional",
    }
}

/// Mean squared error of 5-step-ahead forecast trajectories against the
/// realized series, averaged over every horizon step with a realized outcome.
fn horizon_mse(
    forecasts: &[(Time, Vec<f64>)],
    target: &PanelRecord,
    horizon: usize,
) -> Option<f64> {
    let mut num = 0.0;
    let mut count = 0usize;
    for (t, fc) in forecasts {
        for h in 1..=horizon {
            let Some(&yhat) = fc.get(h - 1) else { continue };
            let Some(y) = target.outcome_at(t + h as Time) else { continue };
            if yhat.is_finite() {
                num += (y - yhat) * (y - yhat);
                count += 1;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some(num / count as f64)
    }
}

fn run_online(
    config: &EngineConfig,
    historical: &Panel,
    target: &PanelRecord,
) -> CliResult<Vec<(Time, Vec<f64>)>> {
    let seed = seed_record(target, config.batch_size as usize)?;
    let mut engine =
        Engine::new(config.clone(), historical.clone(), seed).map_err(CliError::compute)?;
    let outs = stream_target(&mut engine, target)?;
    Ok(outs.into_iter().map(|o| (o.chron_time, o.ensemble_forecast)).collect())
}

/// Classical one-shot ensemble: pooled learners are cross-validated once over
/// historical subjects with a V-fold split, the convex weights are frozen,
/// and every later forecast reuses them.
fn run_oneshot_vfold(
    config: &EngineConfig,
    historical: &Panel,
    target: &PanelRecord,
) -> CliResult<Vec<(Time, Vec<f64>)>> {
    let specs: Vec<&LearnerSpec> =
        config.learners.iter().filter(|l| l.scope == Scope::Historical).collect();
    let subjects: BTreeSet<SubjectId> =
        historical.records().iter().map(|r| r.subject_id).collect();
    let v = subjects.len().min(5).max(2);
    let fold_spec = FoldSpec {
        scheme: CvScheme::RollingOriginVfold,
        sample_folds: v,
        ..config.fold_spec
    };
    let t_max = historical
        .records()
        .iter()
        .map(|r| r.last_time())
        .min()
        .ok_or_else(|| CliError::usage("historical panel is empty"))?;
    let folds =
        vfold_variant_folds(&fold_spec, &subjects, t_max).map_err(CliError::compute)?;

    let rows_for = |record: &PanelRecord, spec: &LearnerSpec, times: &[Time]| -> Vec<TrainRow> {
        times
            .iter()
            .filter_map(|&s| {
                let z = make_summary(record, &spec.summary, s).ok()?;
                let y = record.outcome_at(s)?;
                Some(TrainRow {
                    subject_id: record.subject_id,
                    x: record.baseline.clone(),
                    z: z.values,
                    t: s,
                    y,
                })
            })
            .collect()
    };

    let mut meta = MetaDesign::default();
    for fold in &folds {
        let mut fold_fits: Vec<Option<FittedLearner>> = Vec::new();
        for spec in &specs {
            let mut rows = Vec::new();
            for r in historical.records() {
                let times: Vec<Time> = fold
                    .train
                    .iter()
                    .filter(|&&(i, _)| i == r.subject_id)
                    .map(|&(_, s)| s)
                    .collect();
                rows.extend(rows_for(r, *spec, &times));
            }
            fold_fits.push(fit(*spec, &rows).ok());
        }
        for &(i, s) in &fold.validation {
            let Some(record) = historical.record(i) else { continue };
            let Some(y) = record.outcome_at(s) else { continue };
            let mut preds = vec![f64::NAN; specs.len()];
            for (j, spec) in specs.iter().enumerate() {
                let Some(f) = &fold_fits[j] else { continue };
                let Ok(z) = make_summary(record, &spec.summary, s) else { continue };
                if let Ok(p) = f.predict(i, &record.baseline, &z.values, s) {
                    preds[j] = p;
                }
            }
            if preds.iter().all(|p| p.is_finite()) {
                meta.rows.push(MetaRow {
                    subject_id: i,
                    chron_time: s,
                    subject_time: s,
                    x: record.baseline.clone(),
                    preds,
                    y,
                    weight: 1.0,
                });
            }
        }
    }
    let weights = nnls_weights(&meta)
        .unwrap_or_else(|_| EnsembleWeights::uniform(specs.len()));

    // Final fits on the full historical panel.
    let mut fits = Vec::new();
    for spec in &specs {
        let mut rows = Vec::new();
        for r in historical.records() {
            rows.extend(rows_for(r, *spec, &r.times().to_vec()));
        }
        fits.push(fit(*spec, &rows).map_err(CliError::compute)?);
    }

    let batch = config.batch_size as usize;
    let horizon = config.forecast_horizon;
    let seed_end = target.first_time() + config.batch_size - 1;
    let mut out = Vec::new();
    let mut t = seed_end;
    let last = target.last_time();
    while t < last {
        t = (t + batch as Time).min(last);
        let rec = target.truncated(t).expect("t within record");
        let mut combined = vec![0.0; horizon];
        let mut total = 0.0;
        for (j, f) in fits.iter().enumerate() {
            if weights.alpha[j] <= 0.0 {
                continue;
            }
            if let Ok(fc) = f.forecast_recursive(&rec, horizon) {
                for (h, v) in fc.iter().enumerate() {
                    combined[h] += weights.alpha[j] * v;
                }
                total += weights.alpha[j];
            }
        }
        if total > 0.0 {
            for v in combined.iter_mut() {
                *v /= total;
            }
        }
        out.push((t, combined));
    }
    Ok(out)
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    ensure_dir(&args.out_dir)?;
    if args.replicates == 0 {
        return Err(CliError::usage("need at least one replicate"));
    }
    let mode = parse_mode(&args.mode)?;
    let config = EngineConfig { mode, ..EngineConfig::default() };
    let pooled_config = EngineConfig {
        learners: config
            .learners
            .iter()
            .filter(|l| l.scope == Scope::Historical)
            .cloned()
            .collect(),
        ..config.clone()
    };

    let mut rows: Vec<(usize, &'static str, f64, f64)> = Vec::new();
    for rep in 0..args.replicates {
        let sim: Simulation =
            build_simulation(args.which, args.subjects, args.tau, args.seed + rep as u64)
                .map_err(|e| CliError::usage(e.to_string()))?;
        let horizon = config.forecast_horizon;
        let entries: [(&'static str, Vec<(Time, Vec<f64>)>); 3] = [
            ("posl", run_online(&config, &sim.historical, &sim.target)?),
            ("pooled_online", run_online(&pooled_config, &sim.historical, &sim.target)?),
            ("vfold_oneshot", run_oneshot_vfold(&config, &sim.historical, &sim.target)?),
        ];
        for (name, forecasts) in entries {
            let mse = horizon_mse(&forecasts, &sim.target, horizon)
                .ok_or_else(|| CliError::compute(format!("no scored forecasts for {name}")))?;
            // Steady-state error: the final quarter of the update sequence.
            let tail_start = forecasts.len() - forecasts.len() / 4;
            let mse_tail = horizon_mse(&forecasts[tail_start..], &sim.target, horizon)
                .unwrap_or(mse);
            rows.push((rep, name, mse, mse_tail));
        }
    }

    let mut text = String::from("replicate,method,mse,mse_tail\n");
    for (rep, name, mse, mse_tail) in &rows {
        writeln!(text, "{rep},{name},{mse},{mse_tail}").unwrap();
    }
    fs::write(args.out_dir.join("mse.csv"), text).map_err(CliError::io)?;
    write_manifest(
        &args.out_dir,
        &RunManifest {
            tool: "posl",
            version: env!("CARGO_PKG_VERSION"),
            command: "bench".into(),
            seed: Some(args.seed),
            which: Some(args.which),
            replicates: Some(args.replicates),
            subjects: Some(args.subjects),
            tau: Some(args.tau),
            mode: Some(args.mode.clone()),
            outputs: vec!["mse.csv".into()],
            config: Some(config),
        },
    )
}
