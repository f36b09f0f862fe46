//! `magcla` command line: train policies, evaluate them on frozen trial
//! sets, run malfunction suites, compare runs and export traces.
//!
//! Every command that writes outputs also writes a `manifest.json` with the
//! full config snapshot, seed and artifact version, so a run can be
//! reproduced bit-for-bit. `MAGCLA_LOG_LEVEL` controls verbosity.

use std::path::{Path, PathBuf};
use std::process::Command as ProcessCommand;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use magcla::env::{generate_trials, parse_trials, read_trials, write_trials};
use magcla::eval::{
    malfunction_suite, significance_matrix, success_rate, trace_rows, trace_svg, trace_to_csv,
    EvalReport, line_chart_svg,
};
use magcla::{
    AlgorithmVariant, EnvConfig, Ensemble, Environment, MalfunctionMask, ReachConfig, ReachEnv,
    RotationEnv, TrainConfig, Trial,
};

#[derive(Parser)]
#[command(name = "magcla", version, about = "Multi-agent rotation-task lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy ensemble and write logs plus checkpoints.
    Train(TrainArgs),
    /// Success rate of a checkpoint on a frozen trial set.
    Eval(EvalArgs),
    /// Baseline plus one disable-test per agent, with reduction accounting.
    Malfunction(EvalArgs),
    /// Pairwise N-1 chi-squared significance over eval reports.
    Compare(CompareArgs),
    /// Export one trial's trajectory as CSV (optionally SVG).
    Trace(TraceArgs),
    /// Generate the frozen validation (50) and testing (100) trial files.
    MakeTrials(MakeTrialsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; defaults to the desk-scale rotation setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs one training per seed in child processes, each writing to
    /// `<out>/seed-<n>/`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Overrides the config variant, e.g. `magcla+sher`.
    #[arg(long)]
    variant: Option<String>,
    /// Validation trial file; generated from the seed when absent.
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing completed run.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frozen trial set to evaluate on.
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more eval report JSON files.
    #[arg(required = true, num_args = 2..)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Inline trial `seed,goal_radians`.
    #[arg(long, conflicts_with_all = ["trials", "index"])]
    trial: Option<String>,
    /// Trial file to pick from.
    #[arg(long, requires = "index")]
    trials: Option<PathBuf>,
    /// Index into `--trials`.
    #[arg(long)]
    index: Option<usize>,
    /// Disable this agent id for the whole trial.
    #[arg(long)]
    disable: Option<usize>,
    /// Also write an SVG plot next to the CSV.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeTrialsArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    validation: usize,
    #[arg(long, default_value_t = 100)]
    testing: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Which environment a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Task {
    Rotation,
    Reach,
}

/// On-disk run configuration: task selector plus the training and
/// environment sections. Missing keys take the documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    task: Task,
    train: TrainConfig,
    env: EnvConfig,
    reach: ReachConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Rotation,
            train: TrainConfig::desk_scale(),
            env: EnvConfig::default(),
            reach: ReachConfig::default(),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact_version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    variant: Option<String>,
    config: &'a RunConfig,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    let completed =
        dir.join("checkpoint_final.json").exists() || dir.join("manifest.json").exists();
    if completed && !force {
        bail!(
            "{} already holds a completed run; pass --force to overwrite",
            dir.display()
        );
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_ensemble(path: &Path, cfg: &RunConfig) -> Result<Ensemble> {
    Ensemble::load_checkpoint(path, cfg.train.ensemble_config())
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_env_dims<E: Environment>(env: &E, ens: &Ensemble) -> Result<()> {
    if env.x_dim() != ens.x_dim() || env.action_dim() != ens.action_dim() {
        bail!(
            "checkpoint dims (x={}, action={}) do not match the configured environment (x={}, action={})",
            ens.x_dim(),
            ens.action_dim(),
            env.x_dim(),
            env.action_dim()
        );
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    if !args.seeds.is_empty() {
        return spawn_seed_children(args);
    }
    let started = Instant::now();
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = &args.variant {
        cfg.train.variant = v.parse::<AlgorithmVariant>()?;
    }
    ensure_out_dir(&args.out, args.force)?;
    let validation = match &args.trials {
        Some(p) => Some(read_trials(p)?),
        None => None,
    };
    log::info!(
        "training {} on the {:?} task, seed {} -> {}",
        cfg.train.variant,
        cfg.task,
        cfg.train.seed,
        args.out.display()
    );
    let log = match cfg.task {
        Task::Rotation => {
            let env = RotationEnv::new(cfg.env.clone())?;
            magcla::trainer::train(&cfg.train, &env, validation, Some(&args.out))?.log
        }
        Task::Reach => {
            let env = ReachEnv::new(cfg.reach.clone())?;
            magcla::trainer::train(&cfg.train, &env, validation, Some(&args.out))?.log
        }
    };
    let curve: Vec<(f64, f64)> = log
        .rows
        .iter()
        .map(|r| (r.epoch as f64, r.success_rate))
        .collect();
    std::fs::write(
        args.out.join("learning_curve.svg"),
        line_chart_svg("validation success rate", &[("success", curve)]),
    )?;
    let mut outputs = vec![
        "train_log.csv".to_string(),
        "checkpoint_final.json".to_string(),
        "learning_curve.svg".to_string(),
    ];
    for row in &log.rows {
        outputs.push(format!("checkpoint_epoch_{}.json", row.epoch));
    }
    write_manifest(
        &args.out,
        &Manifest {
            artifact_version: env!("CARGO_PKG_VERSION"),
            command: "train",
            seed: Some(cfg.train.seed),
            variant: Some(cfg.train.variant.to_string()),
            config: &cfg,
            outputs,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    let last = log.rows.last().expect("at least one log row");
    log::info!(
        "done in {:.1}s: {} validation points, final success rate {:.3}",
        started.elapsed().as_secs_f64(),
        log.rows.len(),
        last.success_rate
    );
    println!("final_success_rate {}", last.success_rate);
    Ok(())
}

fn spawn_seed_children(args: &TrainArgs) -> Result<()> {
    let exe = std::env::current_exe().context("resolving current executable")?;
    let mut children = Vec::new();
    for &seed in &args.seeds {
        let out = args.out.join(format!("seed-{seed}"));
        let mut cmd = ProcessCommand::new(&exe);
        cmd.arg("train")
            .arg("--seed")
            .arg(seed.to_string())
            .arg("--out")
            .arg(&out);
        if let Some(c) = &args.config {
            cmd.arg("--config").arg(c);
        }
        if let Some(v) = &args.variant {
            cmd.arg("--variant").arg(v);
        }
        if let Some(t) = &args.trials {
            cmd.arg("--trials").arg(t);
        }
        if args.force {
            cmd.arg("--force");
        }
        log::info!("spawning seed {seed} -> {}", out.display());
        children.push((seed, cmd.spawn().context("spawning child run")?));
    }
    let mut failed = Vec::new();
    for (seed, mut child) in children {
        let status = child.wait()?;
        if !status.success() {
            failed.push(seed);
        }
    }
    if !failed.is_empty() {
        bail!("seed runs failed: {failed:?}");
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(args.config.as_deref())?;
    let ens = load_ensemble(&args.checkpoint, &cfg)?;
    let trials = read_trials(&args.trials)?;
    let outcome = match cfg.task {
        Task::Rotation => {
            let env = RotationEnv::new(cfg.env.clone())?;
            check_env_dims(&env, &ens)?;
            success_rate(&ens, &env, &trials, MalfunctionMask::none())?
        }
        Task::Reach => {
            let env = ReachEnv::new(cfg.reach.clone())?;
            check_env_dims(&env, &ens)?;
            success_rate(&ens, &env, &trials, MalfunctionMask::none())?
        }
    };
    let report = EvalReport {
        checkpoint: args.checkpoint.display().to_string(),
        trials_path: args.trials.display().to_string(),
        variant: ens.variant().to_string(),
        trials: outcome.trials,
        successes: outcome.successes,
        success_rate: outcome.success_rate,
    };
    println!(
        "success_rate {} ({}/{})",
        report.success_rate, report.successes, report.trials
    );
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("eval_report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        write_manifest(
            dir,
            &Manifest {
                artifact_version: env!("CARGO_PKG_VERSION"),
                command: "eval",
                seed: None,
                variant: Some(report.variant.clone()),
                config: &cfg,
                outputs: vec!["eval_report.json".to_string()],
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            },
        )?;
    }
    Ok(())
}

fn cmd_malfunction(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(args.config.as_deref())?;
    if cfg.task != Task::Rotation {
        bail!("the malfunction suite needs the rotation task (it disables fingers and the wrist)");
    }
    let ens = load_ensemble(&args.checkpoint, &cfg)?;
    let env = RotationEnv::new(cfg.env.clone())?;
    check_env_dims(&env, &ens)?;
    let trials = read_trials(&args.trials)?;
    let report = malfunction_suite(&ens, &env, &trials)?;
    let fmt_rd = |r: Option<f64>| match r {
        Some(v) => format!("{v:.2}"),
        None => "n/a".to_string(),
    };
    println!(
        "baseline sr {:.3} ({}/{})",
        report.baseline_sr, report.baseline_successes, report.trials
    );
    for e in &report.entries {
        println!(
            "{:<14} sr {:.3}  rd {}",
            e.label,
            e.success_rate,
            fmt_rd(e.reduction)
        );
    }
    println!(
        "average finger rd {}",
        fmt_rd(report.average_finger_reduction)
    );
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("malfunction_report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        write_manifest(
            dir,
            &Manifest {
                artifact_version: env!("CARGO_PKG_VERSION"),
                command: "malfunction",
                seed: None,
                variant: Some(ens.variant().to_string()),
                config: &cfg,
                outputs: vec!["malfunction_report.json".to_string()],
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            },
        )?;
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let mut names = Vec::new();
    let mut groups = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing report {}", path.display()))?;
        names.push(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        );
        groups.push((report.successes, report.trials));
    }
    let matrix = significance_matrix(&groups)?;
    let width = names.iter().map(String::len).max().unwrap_or(8).max(8);
    print!("{:width$}", "");
    for n in &names {
        print!(" {n:>width$}");
    }
    println!();
    for (i, row) in matrix.iter().enumerate() {
        print!("{:width$}", names[i]);
        for (j, cell) in row.iter().enumerate() {
            if i == j {
                print!(" {:>width$}", "-");
            } else {
                print!(" {:>width$.1e}", cell.p_two_tailed);
            }
        }
        println!();
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let doc = serde_json::json!({
            "groups": names.iter().zip(groups.iter())
                .map(|(n, (s, t))| serde_json::json!({"name": n, "successes": s, "trials": t}))
                .collect::<Vec<_>>(),
            "p_two_tailed": matrix.iter()
                .map(|row| row.iter().map(|c| c.p_two_tailed).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "chi2_n1": matrix.iter()
                .map(|row| row.iter().map(|c| c.chi2_n1).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        });
        std::fs::write(
            dir.join("significance.json"),
            serde_json::to_string_pretty(&doc)?,
        )?;
    }
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    if cfg.task != Task::Rotation {
        bail!("trace export needs the rotation task");
    }
    let ens = load_ensemble(&args.checkpoint, &cfg)?;
    let env = RotationEnv::new(cfg.env.clone())?;
    check_env_dims(&env, &ens)?;
    let trial = resolve_trial(args)?;
    let mask = match args.disable {
        Some(id) => MalfunctionMask::disable(id),
        None => MalfunctionMask::none(),
    };
    std::fs::create_dir_all(&args.out)?;
    let rows = trace_rows(&ens, &env, trial, mask)?;
    let csv_path = args.out.join("trace.csv");
    std::fs::write(&csv_path, trace_to_csv(&rows))?;
    let mut outputs = vec!["trace.csv".to_string()];
    if args.svg {
        std::fs::write(args.out.join("trace.svg"), trace_svg(&rows))?;
        outputs.push("trace.svg".to_string());
    }
    write_manifest(
        &args.out,
        &Manifest {
            artifact_version: env!("CARGO_PKG_VERSION"),
            command: "trace",
            seed: Some(trial.seed),
            variant: Some(ens.variant().to_string()),
            config: &cfg,
            outputs,
            wall_clock_seconds: 0.0,
        },
    )?;
    println!("wrote {} ({} rows)", csv_path.display(), rows.len());
    Ok(())
}

fn resolve_trial(args: &TraceArgs) -> Result<Trial> {
    if let Some(inline) = &args.trial {
        let trials = parse_trials(inline)?;
        return trials
            .first()
            .copied()
            .ok_or_else(|| anyhow!("empty --trial argument"));
    }
    let path = args
        .trials
        .as_ref()
        .ok_or_else(|| anyhow!("pass either --trial or --trials with --index"))?;
    let index = args.index.unwrap_or(0);
    let trials = read_trials(path)?;
    trials
        .get(index)
        .copied()
        .ok_or_else(|| anyhow!("trial index {index} out of range ({} trials)", trials.len()))
}

fn cmd_make_trials(args: &MakeTrialsArgs) -> Result<()> {
    use magcla::rng_from_seed;
    std::fs::create_dir_all(&args.out)?;
    let mut rng = rng_from_seed(args.seed);
    let validation = generate_trials(args.validation, &mut rng);
    let testing = generate_trials(args.testing, &mut rng);
    let vpath = args.out.join("validation.trials");
    let tpath = args.out.join("testing.trials");
    write_trials(&vpath, &validation)?;
    write_trials(&tpath, &testing)?;
    println!(
        "wrote {} ({} trials) and {} ({} trials)",
        vpath.display(),
        validation.len(),
        tpath.display(),
        testing.len()
    );
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("MAGCLA_LOG_LEVEL", "info"),
    )
    .format_timestamp(None)
    .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Malfunction(args) => cmd_malfunction(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Trace(args) => cmd_trace(args),
        Command::MakeTrials(args) => cmd_make_trials(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
