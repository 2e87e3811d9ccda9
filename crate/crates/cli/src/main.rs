use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use toflow::config::{PolicyTag, RunConfig};
use toflow::metrics::{self, bits_per_dim, Checkpoint};
use toflow::plot;
use toflow::rng::{self, Stream};
use toflow::toydata::{Dataset, DatasetSpec};
use toflow::train::{self, RunArtifacts, TrainState, Trainer};
use toflow::Tensor;

#[derive(Parser)]
#[command(name = "toflow", version, about = "Continuous normalizing flows with a learnable integration horizon")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, or continue a run with --resume.
    Train(TrainArgs),
    /// Held-out NLL of a checkpoint.
    Eval(EvalArgs),
    /// Draw samples from a checkpoint as CSV.
    Sample(SampleArgs),
    /// Toy dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Render SVG charts for a run directory.
    Plot { run_dir: PathBuf },
    /// One run per value of a temporal hyperparameter, plus overlay charts.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> toflow::Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.set),
            None => RunConfig::from_overrides(&self.set),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue the run stored in this directory.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on this dataset instead of the one the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<Dataset>,
    /// Number of held-out points.
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, short)]
    n: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Sampling seed; derived from the run seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write sampled training batches as CSV.
    Dump(DumpArgs),
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    dataset: Dataset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Points per batch.
    #[arg(long, short, default_value_t = 512)]
    n: usize,
    /// Number of consecutive batches.
    #[arg(long, default_value_t = 1)]
    batches: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Alpha,
    Epsilon,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Axis::Alpha => "policy.alpha",
            Axis::Epsilon => "policy.epsilon",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Epsilon => "epsilon",
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values, at least two.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    values: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Sample(a) => cmd_sample(a).map(|_| true),
        Command::Data { command: DataCommand::Dump(a) } => cmd_dump(a).map(|_| true),
        Command::Plot { run_dir } => cmd_plot(&run_dir).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn report(art: &RunArtifacts, scheduled: u64) {
    let dir = art.run_dir.as_deref().map(|d| d.display().to_string()).unwrap_or_default();
    println!("run_dir: {dir}");
    println!("iterations: {}/{}", art.state.iteration, scheduled);
    match art.final_test_loss() {
        Some(l) => println!("final_test_loss: {l:.6} nats"),
        None => println!("final_test_loss: n/a"),
    }
    println!("average_nfe: {:.2}", art.mean_nfe());
    println!("wall_time: {:.2} s", art.total_wall_ms() / 1e3);
    if let Some(e) = &art.error {
        eprintln!("error: {e}");
    }
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    let trainer = match &a.resume {
        Some(dir) => Trainer::resume(dir, &a.cfg.set)?,
        None => {
            let cfg = a.cfg.load()?;
            cfg.validate()?;
            let dir = cfg.resolved_out_dir();
            Trainer::new(&cfg, Some(&dir))?
        }
    };
    let scheduled = trainer.cfg.schedule.iterations;
    let art = trainer.run()?;
    report(&art, scheduled);
    Ok(art.completed())
}

fn load_state(checkpoint: &Path, overrides: &[String]) -> Result<(RunConfig, TrainState)> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::from_value(ck.config.clone(), overrides)?;
    let state = TrainState::from_checkpoint(&cfg, ck)?;
    Ok((cfg, state))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(d) = a.dataset {
        overrides.push(format!("dataset.name={}", d.name()));
    }
    if let Some(n) = a.n_test {
        overrides.push(format!("dataset.test_size={n}"));
    }
    let (cfg, state) = load_state(&a.checkpoint, &overrides)?;
    let test = cfg.dataset_spec().test_set(cfg.dataset.test_size);
    let (loss, nfe) = train::evaluate(&cfg, &state.model, state.policy.eval_t_end(), &test)?;
    let out = json!({
        "dataset": cfg.dataset_name().name(),
        "n_test": test.rows(),
        "test_loss": loss,
        "bpd": cfg.dataset.quantized_8bit.then(|| bits_per_dim(-loss, test.cols())),
        "nfe": nfe,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let (cfg, state) = load_state(&a.checkpoint, &[])?;
    let points = if a.n == 0 {
        Tensor::zeros(0, cfg.dataset_name().dim())
    } else {
        let mut model = state.model;
        model.t_end = state.policy.eval_t_end();
        model.sample(a.n, a.seed.unwrap_or_else(|| rng::derive_seed(cfg.seed, Stream::Sample, 0)))?
    };
    metrics::write_points_csv(output(a.out.as_deref())?, &points)?;
    Ok(())
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let spec = DatasetSpec::new(a.dataset, a.seed, a.n);
    let mut points = Tensor::zeros(0, a.dataset.dim());
    for k in 0..a.batches {
        points = points.concat_rows(&spec.sample_batch(k)?);
    }
    metrics::write_points_csv(output(a.out.as_deref())?, &points)?;
    Ok(())
}

fn cmd_plot(run_dir: &Path) -> Result<()> {
    for p in plot::plot_run(run_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<bool> {
    if a.values.len() < 2 {
        bail!("ablation over `{}` needs at least two values, got {}", a.axis.key(), a.values.len());
    }
    let base = a.cfg.load()?;
    base.validate()?;
    if base.policy.tag != PolicyTag::Temporal {
        bail!("ablation over `{}` requires policy.tag = temporal", a.axis.key());
    }
    let root = base.resolved_out_dir();
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    let mut all_ok = true;
    for v in &a.values {
        let label = format!("{}={v}", a.axis.name());
        let dir = root.join(format!("{}_{v}", a.axis.name()));
        let mut set = a.cfg.set.clone();
        set.push(format!("{}={v}", a.axis.key()));
        let result = a.cfg.config.as_deref().map_or_else(|| RunConfig::from_overrides(&set), |p| RunConfig::load(p, &set));
        let outcome = result.and_then(|cfg| train::train(&cfg, Some(&dir)).map(|art| (cfg, art)));
        println!("== {label}");
        match outcome {
            Ok((cfg, art)) => {
                report(&art, cfg.schedule.iterations);
                all_ok &= art.completed();
                let grad: Vec<f64> = art.rows.iter().map(|r| r.grad_norm_pre_clip).collect();
                let t: Vec<f64> = art.rows.iter().map(|r| r.t_current).collect();
                summary.push(json!({
                    "value": v,
                    "run_dir": dir,
                    "completed": art.completed(),
                    "final_test_loss": art.final_test_loss(),
                    "mean_nfe": art.mean_nfe(),
                    "grad_norm_total_variation": metrics::total_variation(&grad),
                    "T_total_variation": metrics::total_variation(&t),
                    "error": art.error.as_ref().map(|e| e.to_string()),
                }));
            }
            Err(e) => {
                eprintln!("error: {label}: {e}");
                all_ok = false;
                summary.push(json!({ "value": v, "run_dir": dir, "completed": false, "error": e.to_string() }));
            }
        }
        runs.push((label, dir));
    }
    metrics::write_json(&root.join("ablation.json"), &json!({ "axis": a.axis.key(), "runs": summary }))?;
    match plot::plot_overlay(&runs, &root.join("overlay")) {
        Ok(paths) => paths.iter().for_each(|p| println!("{}", p.display())),
        Err(e) => {
            eprintln!("error: overlay: {e}");
            all_ok = false;
        }
    }
    Ok(all_ok)
}
