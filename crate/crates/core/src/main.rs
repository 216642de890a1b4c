use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use wholebody::ablation::{run_ablation, Study};
use wholebody::body_model::build_toy_model;
use wholebody::diagnostics::gradient_suite;
use wholebody::pipeline::{init_weights, PipelineConfig, Profile};
use wholebody::synth::{content_hash, load_dataset, make_split, save_dataset, Sample};
use wholebody::train::{dataset_loss, dataset_metrics, train, Checkpoint, RunConfig, CHECKPOINT_VERSION};
use wholebody::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "wholebody", version, about = "Toy-scale whole-body pose and mesh recovery")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults to the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Toy)]
    profile: ProfileArg,
    /// Threads used for data generation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Toy,
    Reference,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic split and write a checkpoint, loss curve and report.
    Train,
    /// Metrics of a checkpoint on a dataset file or on the configured test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable stage.
    Gradcheck,
    /// Train and evaluate every ablation variant on one shared split.
    Ablate {
        /// Comma-separated studies; all when omitted.
        #[arg(long, value_delimiter = ',')]
        studies: Vec<String>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Render the configured train and test splits to dataset files.
    GenData,
}

enum Failure {
    Config(String),
    Check(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownMode(_) | Error::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type CliResult = std::result::Result<(), Failure>;

fn load_config(c: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
        None => RunConfig {
            pipeline: PipelineConfig::for_profile(match c.profile {
                ProfileArg::Toy => Profile::Toy,
                ProfileArg::Reference => Profile::Reference,
            }),
            ..RunConfig::toy()
        },
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.workers == 0 {
        return Err(Failure::Config("--workers must be positive".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn splits(cfg: &RunConfig, workers: usize) -> std::result::Result<(Vec<Sample>, Vec<Sample>), Failure> {
    let model = build_toy_model(&cfg.pipeline.model);
    let d = &cfg.data;
    let train_set = make_split(&model, &cfg.pipeline, &cfg.synth, d.train_size, d.train_seed, workers)?;
    let test_set = make_split(&model, &cfg.pipeline, &cfg.synth, d.test_size, d.test_seed, workers)?;
    Ok((train_set, test_set))
}

fn cmd_train(c: &Common) -> CliResult {
    let cfg = load_config(c)?;
    let (train_set, test_set) = splits(&cfg, c.workers)?;
    std::fs::create_dir_all(&c.out_dir)?;
    let weights = init_weights(&cfg.pipeline, cfg.seed)?;
    let (pipe, report) = train(&cfg, weights, &train_set, |p| {
        if let Some(m) = p.monitor {
            eprintln!("step {:>6} epoch {:>3} lr {:.1e} batch {:.5} train {:.5}", p.step, p.epoch, p.lr, p.batch.total, m.total);
        }
    })?;
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        step: report.steps,
        config: cfg.clone(),
        weights: pipe.weights.clone(),
    };
    checkpoint.save(&c.out_dir.join("checkpoint.json"))?;
    eprintln!("wrote {}", c.out_dir.join("checkpoint.json").display());
    write_json(&c.out_dir.join("loss_curve.json"), &report.curve)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        steps: usize,
        initial_loss: f64,
        final_loss: f64,
        stopped_early: bool,
        test_loss: wholebody::losses::LossBreakdown,
        test_metrics: &'a wholebody::metrics::MetricReport,
    }
    let metrics = dataset_metrics(&pipe, &test_set)?;
    let summary = Summary {
        steps: report.steps,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        stopped_early: report.stopped_early,
        test_loss: dataset_loss(&pipe, &test_set, false)?,
        test_metrics: &metrics,
    };
    write_json(&c.out_dir.join("report.json"), &summary)?;
    println!(
        "trained {} steps: loss {:.5} -> {:.5}; test MPVPE all {:.2} mm, hands {:.2} mm",
        report.steps, report.initial_loss, report.final_loss, metrics.all.mpvpe, metrics.hands_pelvis_mpvpe
    );
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: &Path, dataset: Option<&Path>) -> CliResult {
    let ck = Checkpoint::load(checkpoint)?;
    let pipe = ck.pipeline()?;
    let samples = match dataset {
        Some(path) => load_dataset(path)?,
        None => splits(&ck.config, c.workers)?.1,
    };
    let metrics = dataset_metrics(&pipe, &samples)?;
    std::fs::create_dir_all(&c.out_dir)?;
    write_json(&c.out_dir.join("metrics.json"), &metrics)?;
    println!("{:<8} {:>9} {:>9} {:>9} {:>9}", "part", "MPJPE", "PA-MPJPE", "MPVPE", "PA-MPVPE");
    for (name, p) in [
        ("all", &metrics.all),
        ("body", &metrics.body),
        ("lhand", &metrics.lhand),
        ("rhand", &metrics.rhand),
        ("hands", &metrics.hands_avg),
        ("face", &metrics.face),
    ] {
        println!("{name:<8} {:>9.2} {:>9.2} {:>9.2} {:>9.2}", p.mpjpe, p.pa_mpjpe, p.mpvpe, p.pa_mpvpe);
    }
    println!("hands MPVPE (pelvis-rooted) {:.2}", metrics.hands_pelvis_mpvpe);
    Ok(())
}

fn cmd_gradcheck(c: &Common) -> CliResult {
    let cfg = load_config(c)?;
    let cases = gradient_suite(&cfg, cfg.seed)?;
    let mut failed = Vec::new();
    for case in &cases {
        let verdict = if case.report.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<22} max rel err {:.3e} (tol {:.0e})", case.name, case.report.max_rel_error(), case.report.tol);
        if !case.report.passed() {
            eprintln!("{}", case.report);
            failed.push(case.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_ablate(c: &Common, studies: &[String], seeds: &[u64]) -> CliResult {
    let cfg = load_config(c)?;
    let studies: Vec<Study> = if studies.is_empty() {
        Study::ALL.to_vec()
    } else {
        studies.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    let (train_set, test_set) = splits(&cfg, c.workers)?;
    let report = run_ablation(&cfg, &studies, seeds, &train_set, &test_set, |line| eprintln!("{line}"))?;
    std::fs::create_dir_all(&c.out_dir)?;
    write_json(&c.out_dir.join("ablation.json"), &report)?;
    let table = report.to_table();
    std::fs::write(c.out_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gen_data(c: &Common) -> CliResult {
    let cfg = load_config(c)?;
    let (train_set, test_set) = splits(&cfg, c.workers)?;
    std::fs::create_dir_all(&c.out_dir)?;
    for (name, set) in [("train", &train_set), ("test", &test_set)] {
        let path = c.out_dir.join(format!("{name}.wbd"));
        save_dataset(&path, set)?;
        println!("{}: {} samples, first {}", path.display(), set.len(), content_hash(&set[0]));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match &cli.command {
        Command::Train => cmd_train(c),
        Command::Eval { checkpoint, dataset } => cmd_eval(c, checkpoint, dataset.as_deref()),
        Command::Gradcheck => cmd_gradcheck(c),
        Command::Ablate { studies, seeds } => cmd_ablate(c, studies, seeds),
        Command::GenData => cmd_gen_data(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Check(m)) => {
            eprintln!("{m}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
