use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use trajfed_core::fpo::{
    build_dataset, evaluate_models, run_on_dataset, Models, RunConfig, RunOutput, RunReport, TaskMetric,
};
use trajfed_core::secure_agg::{run_aggregation_round, RoundConfig};
use trajfed_core::surrogate::{load_checkpoint, save_checkpoint};
use trajfed_core::tasks::TaskKind;
use trajfed_core::tke::{sample_layers, selection_probabilities};
use trajfed_core::tpa::TpaParams;
use trajfed_core::traj::{save_csv, Trajectory};

use crate::{CliConfig, CliError, Common};

const AGG_TOLERANCE: f64 = 1e-9;
const SELECT_TOLERANCE: f64 = 0.005;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Configuration file (or defaults) with command-line overrides applied.
fn load_config(common: &Common) -> Result<CliConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    cfg.output.json |= common.json;
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

pub fn gen_data(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let ds = build_dataset(&cfg.run)?;
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let write = |name: &str, trajs: Vec<Trajectory>| -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        save_csv(&trajs, &path).map_err(runtime)?;
        Ok(path)
    };
    let files = [
        write("train.csv", ds.train.iter().map(|s| s.traj.clone()).collect())?,
        write("test.csv", ds.test.iter().map(|s| s.traj.clone()).collect())?,
        write("train_clean.csv", ds.train.iter().map(|s| s.clean.clone()).collect())?,
        write("test_clean.csv", ds.test.iter().map(|s| s.clean.clone()).collect())?,
    ];
    #[derive(Serialize)]
    struct Summary<'a> {
        seed: u64,
        clients: usize,
        train_trajectories: usize,
        test_trajectories: usize,
        points: usize,
        files: Vec<String>,
        partition: &'a trajfed_core::traj::RegionPartition,
    }
    let summary = Summary {
        seed: cfg.run.seed,
        clients: cfg.run.clients,
        train_trajectories: ds.train.len(),
        test_trajectories: ds.test.len(),
        points: ds.train.iter().chain(&ds.test).map(|s| s.traj.len()).sum(),
        files: files.iter().map(|p| p.display().to_string()).collect(),
        partition: &ds.partition,
    };
    write_file(&dir.join("dataset.json"), to_json(&summary))?;
    if cfg.output.json {
        println!("{}", to_json(&summary));
    } else {
        println!(
            "generated {} train and {} test trajectories ({} points) for {} clients",
            summary.train_trajectories, summary.test_trajectories, summary.points, summary.clients
        );
        for f in &summary.files {
            println!("  {f}");
        }
    }
    Ok(())
}

fn save_models(out: &RunOutput, cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    ensure_dir(dir)?;
    save_checkpoint(&out.llm, dir.join("llm")).map_err(runtime)?;
    for (k, (slm, tpa)) in out.slms.iter().zip(&out.tpas).enumerate() {
        save_checkpoint(slm, dir.join(format!("slm_{k}"))).map_err(runtime)?;
        write_file(&dir.join(format!("tpa_{k}.json")), serde_json::to_string(tpa).expect("serializable"))?;
    }
    write_file(&dir.join("run_config.json"), to_json(cfg))
}

fn load_models(cfg: &RunConfig, dir: &Path) -> Result<Models, CliError> {
    let llm = load_checkpoint(dir.join("llm")).map_err(runtime)?;
    let mut slms = Vec::with_capacity(cfg.clients);
    let mut tpas = Vec::with_capacity(cfg.clients);
    for k in 0..cfg.clients {
        slms.push(load_checkpoint(dir.join(format!("slm_{k}"))).map_err(runtime)?);
        let path = dir.join(format!("tpa_{k}.json"));
        let text = fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let tpa: TpaParams = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        tpas.push(tpa);
    }
    Ok(Models { llm, slms, tpas })
}

pub fn train(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let start = Instant::now();
    let ds = build_dataset(&cfg.run)?;
    let mut out = run_on_dataset(&cfg.run, &ds)?;
    let elapsed = start.elapsed();
    out.report.header.generated_at = Some(timestamp());
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    write_file(&dir.join("report.json"), to_json(&out.report))?;
    if cfg.output.checkpoints {
        save_models(&out, &cfg.run, &dir.join("checkpoints"))?;
    }
    if cfg.output.json {
        println!("{}", to_json(&out.report));
    } else {
        print_summary(&out.report);
        println!("trained in {:.1}s; report written to {}", elapsed.as_secs_f64(), dir.join("report.json").display());
    }
    Ok(())
}

fn parse_task(s: &str) -> Result<TaskKind, CliError> {
    TaskKind::ALL
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| CliError::Config(format!("unknown task `{s}`")))
}

pub fn eval(common: &Common, checkpoint: Option<PathBuf>, tasks: &[String]) -> Result<(), CliError> {
    let base = load_config(common)?;
    let dir = checkpoint.unwrap_or_else(|| base.output.dir.join("checkpoints"));
    let mut run = if common.config.is_some() {
        base.run.clone()
    } else {
        let path = dir.join("run_config.json");
        let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    if let Some(s) = common.seed {
        run.seed = s;
    }
    let wanted: Vec<TaskKind> = tasks.iter().filter(|t| !t.is_empty()).map(|t| parse_task(t)).collect::<Result<_, _>>()?;
    for t in &wanted {
        if !run.all_tasks().contains(t) {
            run.unseen_tasks.push(*t);
        }
    }
    run.validate()?;
    let ds = build_dataset(&run)?;
    let models = load_models(&run, &dir)?;
    let out = evaluate_models(&run, &ds, models)?;
    let metrics: Vec<TaskMetric> = out
        .report
        .metrics
        .into_iter()
        .filter(|m| wanted.is_empty() || wanted.contains(&m.report.task))
        .collect();
    ensure_dir(&base.output.dir)?;
    write_file(&base.output.dir.join("eval_report.json"), to_json(&metrics))?;
    if base.output.json {
        println!("{}", to_json(&metrics));
    } else {
        print_metrics(&metrics);
        for t in wanted.iter().filter(|t| !metrics.iter().any(|m| m.report.task == **t)) {
            println!("{:<6} no test items (the configured corruptions produce no labels for it)", t.name());
        }
    }
    Ok(())
}

pub fn agg_demo(common: &Common, clients: usize, len: usize) -> Result<(), CliError> {
    if clients < 1 || len < 1 {
        return Err(CliError::Config("clients and len must be positive".into()));
    }
    let seed = common.seed.unwrap_or(42);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Vec<f64>> = (0..clients).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let out = run_aggregation_round(&params, &RoundConfig::new(seed, 0)).map_err(runtime)?;
    let plain: Vec<f64> = (0..len).map(|j| params.iter().map(|p| p[j]).sum::<f64>() / clients as f64).collect();
    let gap = out
        .per_client
        .iter()
        .flat_map(|p| p.iter().zip(&plain).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let pass = gap <= AGG_TOLERANCE;
    if common.json {
        #[derive(Serialize)]
        struct Out {
            clients: usize,
            len: usize,
            seed: u64,
            max_abs_error: f64,
            messages: usize,
            bytes: usize,
            pass: bool,
        }
        let o = Out { clients, len, seed, max_abs_error: gap, messages: out.trace.len(), bytes: out.bytes_sent(), pass };
        println!("{}", to_json(&o));
    } else {
        println!("clients {clients}, block length {len}, seed {seed}");
        println!("messages {} ({} bytes)", out.trace.len(), out.bytes_sent());
        println!("max |masked-mean - plain-mean| = {gap:.3e}");
        println!("{}", if pass { "PASS" } else { "FAIL" });
    }
    if pass {
        Ok(())
    } else {
        Err(runtime(format!("masked mean differs from plain mean by {gap:e}")))
    }
}

pub fn select_demo(common: &Common, n: usize, nm: usize, ratios: &str, trials: usize) -> Result<(), CliError> {
    let r: Vec<f64> = ratios
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::Config(format!("ratio `{s}`: {e}"))))
        .collect::<Result<_, _>>()?;
    if r.len() != n {
        return Err(CliError::Config(format!("{} ratios given for {n} layers", r.len())));
    }
    if trials == 0 {
        return Err(CliError::Config("trials must be positive".into()));
    }
    let closed = selection_probabilities(&r, nm).map_err(|e| CliError::Config(e.to_string()))?;
    let seed = common.seed.unwrap_or(42);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; n];
    for _ in 0..trials {
        for l in sample_layers(&r, nm, &mut rng).map_err(runtime)? {
            counts[l] += 1;
        }
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let gap = closed.iter().zip(&empirical).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = gap <= SELECT_TOLERANCE;
    if common.json {
        #[derive(Serialize)]
        struct Out<'a> {
            n: usize,
            nm: usize,
            trials: usize,
            seed: u64,
            ratios: &'a [f64],
            closed_form: &'a [f64],
            empirical: &'a [f64],
            max_gap: f64,
            pass: bool,
        }
        let o = Out { n, nm, trials, seed, ratios: &r, closed_form: &closed, empirical: &empirical, max_gap: gap, pass };
        println!("{}", to_json(&o));
    } else {
        println!("N = {n}, N_m = {nm}, {trials} trials, seed {seed}");
        println!("{:>5} {:>8} {:>12} {:>10} {:>8}", "layer", "ratio", "closed form", "empirical", "gap");
        for i in 0..n {
            println!(
                "{i:>5} {:>8.4} {:>12.5} {:>10.5} {:>8.5}",
                r[i],
                closed[i],
                empirical[i],
                (closed[i] - empirical[i]).abs()
            );
        }
        println!("sum of closed form = {:.9}", closed.iter().sum::<f64>());
        println!("max gap = {gap:.5}");
        println!("{}", if pass { "PASS" } else { "FAIL" });
    }
    if pass {
        Ok(())
    } else {
        Err(runtime(format!("empirical frequencies differ from the closed form by {gap}")))
    }
}

pub fn report(common: &Common, input: Option<PathBuf>) -> Result<(), CliError> {
    let path = match input {
        Some(p) => p,
        None => load_config(common)?.output.dir.join("report.json"),
    };
    let text = fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let report: RunReport = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    if common.json {
        println!("{}", to_json(&report));
    } else {
        print_summary(&report);
    }
    Ok(())
}

fn print_metrics(metrics: &[TaskMetric]) {
    println!("{:<6} {:<6} {:>8} {:>10} {:>10}", "task", "seen", "support", "score", "reference");
    for m in metrics {
        let r = &m.report;
        let (score, unit) = match (r.f1, r.sed) {
            (Some(f), _) => (f, "F1"),
            (None, Some(s)) => (s, "SED m"),
            _ => (f64::NAN, ""),
        };
        println!(
            "{:<6} {:<6} {:>8} {:>10.4} {:>10.4}  {unit}",
            r.task.name(),
            if m.seen { "yes" } else { "no" },
            r.support,
            score,
            r.reference.unwrap_or(f64::NAN)
        );
    }
}

fn print_summary(report: &RunReport) {
    let d = &report.data;
    if let Some(ts) = &report.header.generated_at {
        println!("generated {ts}");
    }
    println!(
        "{} clients, {} rounds, seed {}; {} train / {} test trajectories, {} train items ({} cross-client)",
        report.config.clients,
        report.config.rounds,
        report.config.seed,
        d.train_trajectories,
        d.test_trajectories,
        d.train_items,
        d.cross_train_items
    );
    if let Some(last) = report.rounds.last() {
        let s = &last.server.losses;
        println!("final round {}: server forward KL {:.4}, task {:.4}", last.round, s.forward_kl, s.task);
        for c in &last.clients {
            let l = &c.losses;
            println!(
                "  client {}: reconstruction {:.2e}, reverse KL {:.4}, task {:.4}",
                c.client, l.reconstruction, l.reverse_kl, l.task
            );
        }
    }
    println!();
    print_metrics(&report.metrics);
    println!();
    println!("{:<18} {:<10} {:>8} {:>14}", "direction", "category", "frames", "bytes");
    for e in &report.comm_totals {
        println!(
            "{:<18} {:<10} {:>8} {:>14}",
            format!("{:?}", e.direction),
            format!("{:?}", e.category),
            e.frames,
            e.bytes
        );
    }
}
