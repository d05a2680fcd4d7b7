//! Command-line driver: dataset generation, training, slimming, evaluation,
//! rank sweeps, rendering and bound verification.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use slimtensor::render::{render_image, RenderConfig};
use slimtensor::scene::{generate_scene, make_dataset, Dataset, DatasetConfig, RayPool, Split};
use slimtensor::slim::{config_hash, evaluate, load_checkpoint, rank_sweep, save_checkpoint, slim};
use slimtensor::theory::{check_lemma1, check_lemma2, probe_rays, BoundReport};
use slimtensor::train::{train, TrainConfig, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const THREADS_ENV: &str = "SLIMTENSOR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "slimtensor", version, about = "Slimmable tensorial radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene and render its train/test views.
    GenScene(GenSceneArgs),
    /// Train a model on a dataset and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Truncate a checkpoint to its leading components.
    Slim(SlimArgs),
    /// Mean test-split PSNR of a checkpoint.
    Eval(EvalArgs),
    /// Render the test views of a dataset to PNG files.
    Render(RenderArgs),
    /// PSNR and size at every retained rank, as CSV.
    Sweep(SweepArgs),
    /// Empirical gradient-bound checks on a checkpoint.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct GenSceneArgs {
    /// Dataset settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of training views.
    #[arg(long)]
    views: Option<usize>,
    /// Image width and height in pixels.
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<TrainMode>,
    /// Total rank R.
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Debug, Args)]
struct SlimArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Training settings whose render section is used (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate after slimming to this rank.
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rank: Option<usize>,
    /// Jitter seed; stratum midpoints when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Use training rays and pixel colors from this dataset; random probes otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of (ray, element) samples per check.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Bound report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure attributable to the invocation rather than to the computation.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn require_exists(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(UsageError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => {
            require_exists(p, "config file")?;
            Ok(TrainConfig::load(p)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn render_config(path: Option<&Path>) -> anyhow::Result<RenderConfig> {
    Ok(load_train_config(path)?.render)
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    require_exists(path, "dataset directory")?;
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path, rank: Option<usize>) -> anyhow::Result<slimtensor::Model> {
    require_exists(path, "checkpoint")?;
    let model = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(match rank {
        Some(r) => slim(&model, r)?,
        None => model,
    })
}

/// `m.ckpt` → `m.loss.csv`.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

fn gen_scene(a: GenSceneArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_exists(p, "config file")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<DatasetConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.views {
        cfg.n_train = v;
    }
    if let Some(s) = a.size {
        cfg.width = s;
        cfg.height = s;
    }
    let scene = generate_scene(a.seed, cfg.n_primitives)?;
    let ds = make_dataset(&scene, &cfg, &a.out)?;
    println!("wrote {} views of {} to {}", ds.views.len(), ds.scene_id, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_train_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(r) = a.rank {
        cfg.model.rank = r;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let pool = RayPool::from_views(&ds.load_split(Split::Train)?);
    let out = train(&cfg, &pool, ds.bbox)?;
    save_checkpoint(&out.model, &a.out)?;
    let hist = history_path(&a.out);
    out.history.write_csv(&hist)?;
    if out.rank_never_incremented {
        eprintln!("warning: the rank gate never fired (upsilon {}); the model is rank 1", cfg.upsilon);
    }
    println!(
        "trained {} iterations, final loss {:.6}, increments {:?}; wrote {} and {}",
        cfg.max_iter,
        out.history.entries.last().map_or(f64::NAN, |e| e.loss),
        out.history.increments,
        a.out.display(),
        hist.display()
    );
    Ok(())
}

fn slim_cmd(a: SlimArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model, Some(a.rank))?;
    save_checkpoint(&model, &a.out)?;
    println!("wrote rank-{} checkpoint {}", a.rank, a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = render_config(a.config.as_deref())?;
    let model = load_model(&a.model, a.rank)?;
    let ds = load_dataset(&a.data)?;
    let psnr = evaluate(&model, &ds.load_split(Split::Test)?, &cfg)?;
    println!("rank {} psnr_db {psnr:.4}", model.field.rank());
    Ok(())
}

fn render_cmd(a: RenderArgs) -> anyhow::Result<()> {
    let cfg = render_config(a.config.as_deref())?;
    let model = load_model(&a.model, a.rank)?;
    let ds = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, view) in ds.split(Split::Test).enumerate() {
        let path = a.out.join(format!("test_{i:03}.png"));
        render_image(&model, &view.camera, &cfg, a.seed).save(&path)?;
    }
    println!("rendered {} views to {}", ds.split(Split::Test).count(), a.out.display());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> anyhow::Result<()> {
    let text = match &a.config {
        Some(p) => {
            require_exists(p, "config file")?;
            fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    let cfg = render_config(a.config.as_deref())?;
    let model = load_model(&a.model, None)?;
    let ds = load_dataset(&a.data)?;
    let rep = rank_sweep(&model, &ds.load_split(Split::Test)?, &cfg, &ds.scene_id, &config_hash(&text))?;
    rep.write_csv(&a.out)?;
    print!("{}", rep.to_csv());
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> anyhow::Result<()> {
    let cfg = render_config(a.config.as_deref())?;
    let model = load_model(&a.model, None)?;
    let (rays, targets): (Vec<_>, Vec<_>) = match &a.data {
        Some(d) => {
            let pool = RayPool::from_views(&load_dataset(d)?.load_split(Split::Train)?);
            let step = (pool.len() / 200).max(1);
            let idx: Vec<usize> = (0..pool.len()).step_by(step).take(200).collect();
            (idx.iter().map(|&i| pool.rays[i]).collect(), idx.iter().map(|&i| pool.colors[i]).collect())
        }
        None => {
            let rays = probe_rays(model.field.bbox(), 200, a.seed);
            let targets = (0..rays.len()).map(|i| [(i % 5) as f64 / 4.0, 0.5, 1.0 - (i % 3) as f64 / 2.0]).collect();
            (rays, targets)
        }
    };
    let per_ray = a.samples.div_ceil(rays.len());
    let report = BoundReport {
        checks: vec![
            check_lemma1(&model, &rays, &cfg, a.samples, a.seed)?,
            check_lemma2(&model, &rays, &targets, &cfg, per_ray, a.seed)?,
        ],
    };
    print!("{report}");
    if let Some(out) = &a.out {
        fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    }
    if !report.passed() {
        bail!("gradient bound violated");
    }
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| UsageError(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?;
    // Ignored when a global pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::Train(a) => train_cmd(a),
        Command::Slim(a) => slim_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

/// Parse `argv` (program name first), execute, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
