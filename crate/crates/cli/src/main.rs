mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cotdyn::belief_case::{run_belief_case, write_beliefs};
use cotdyn::error::{Error, ErrorClass, Result};
use cotdyn::harness::{run_ablation, run_pipeline, run_transfer, write_json, write_rows};
use cotdyn::langevin::run_study;
use cotdyn::synth::generate;
use cotdyn::trajectories::{load_trajectories, save_trajectories, Format, TrajectorySet};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cotdyn", version, about = "Stochastic drift dynamics of reasoning trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories from a random ground-truth SLDS.
    Synth(Common),
    /// Filter, standardize, project, fit and evaluate.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Trajectory file (JSONL or CSV).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit on one set and score on others.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Test trajectory file; repeatable.
        #[arg(long = "test")]
        tests: Vec<PathBuf>,
    },
    /// Full, NR, NP, NSD and ridge on one split.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Double-well stationary law and Arrhenius rates.
    Langevin(Common),
    /// Poisoned-trajectory belief case.
    Belief(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

fn load_set(path: &Path) -> Result<TrajectorySet> {
    load_trajectories(path, Format::from_path(path)).map_err(|e| e.in_stage("load"))
}

fn tag(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn input_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.input.clone())
        .ok_or_else(|| Error::Config("an input trajectory file is required (--input or \"input\")".into()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn synth(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let s = generate(&cfg.synth(), cfg.seed())?;
    prepare_out(&common.out)?;
    save_trajectories(&s.set, &common.out.join("trajectories.jsonl"), Format::Jsonl)?;
    write_json(&common.out.join("ground_truth.json"), &s.truth.to_json("ground_truth_basis.json"))?;
    if let cotdyn::slds::Manifold::Projected(basis) = s.truth.manifold() {
        write_json(&common.out.join("ground_truth_basis.json"), &basis.to_json())?;
    }
    log::info!("wrote {} trajectories", s.set.len());
    Ok(())
}

fn pipeline(common: &Common, input: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let pc = cfg.pipeline()?;
    let set = load_set(&input_path(input, &cfg)?)?;
    let run = run_pipeline(&set, &pc, cfg.seed())?;
    prepare_out(&common.out)?;
    run.write(&common.out)?;
    log::info!("slds r2 {:.4}, ridge r2 {:.4}", run.report.slds.r2, run.report.ridge_r2);
    Ok(())
}

fn transfer(common: &Common, input: &Option<PathBuf>, tests: &[PathBuf]) -> Result<()> {
    let cfg = load_config(common)?;
    let pc = cfg.pipeline()?;
    let train_path = input_path(input, &cfg)?;
    let test_paths: Vec<PathBuf> = if tests.is_empty() {
        cfg.tests.clone().unwrap_or_default()
    } else {
        tests.to_vec()
    };
    let train = load_set(&train_path)?;
    let test_sets = test_paths
        .iter()
        .map(|p| Ok((tag(p), load_set(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = run_transfer(&train, &tag(&train_path), &test_sets, &pc, cfg.seed())?;
    prepare_out(&common.out)?;
    write_rows(&common.out.join("transfer.csv"), &rows, &["train_tag", "test_tag", "r2", "nll"])
}

fn ablate(common: &Common, input: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let pc = cfg.pipeline()?;
    let set = load_set(&input_path(input, &cfg)?)?;
    let rows = run_ablation(&set, &pc, cfg.seed())?;
    prepare_out(&common.out)?;
    write_rows(&common.out.join("ablation.csv"), &rows, &["variant", "r2", "nll"])
}

fn langevin(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let study = run_study(&cfg.langevin(), cfg.seed())?;
    prepare_out(&common.out)?;
    let density: Vec<(f64, f64, f64)> = study
        .grid
        .iter()
        .zip(&study.analytic)
        .zip(&study.empirical)
        .map(|((x, a), e)| (*x, *a, *e))
        .collect();
    write_rows(&common.out.join("density.csv"), &density, &["x", "analytic", "empirical"])?;
    write_rows(&common.out.join("series.csv"), &study.series, &["t", "x"])?;
    write_rows(
        &common.out.join("arrhenius.csv"),
        &study.arrhenius,
        &["noise_d", "inv_d", "crossings", "rate", "ln_rate"],
    )?;
    write_json(&common.out.join("langevin_report.json"), &study.report)
}

fn belief(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let run = run_belief_case(&cfg.belief(), cfg.seed())?;
    prepare_out(&common.out)?;
    write_json(&common.out.join("belief_report.json"), &run.report)?;
    write_json(&common.out.join("scenario.json"), &run.scenario.to_json())?;
    write_beliefs(&common.out.join("beliefs.csv"), &run.data)
}

fn common(command: &Command) -> &Common {
    match command {
        Command::Synth(c) | Command::Langevin(c) | Command::Belief(c) => c,
        Command::Pipeline { common, .. } | Command::Transfer { common, .. } | Command::Ablate { common, .. } => common,
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = common(&cli.command).threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Pipeline { common, input } => pipeline(common, input),
        Command::Transfer { common, input, tests } => transfer(common, input, tests),
        Command::Ablate { common, input } => ablate(common, input),
        Command::Langevin(c) => langevin(c),
        Command::Belief(c) => belief(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
