use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvgen::dataset::{generate_dataset, Dataset, DatasetConfig, Split};
use mvgen::manifest::RunManifest;
use mvgen::models::ArchConfig;
use mvgen::objectives::LossVariant;
use mvgen::sampling::{self, Interpolate, TileLatents};
use mvgen::train::{self, ModelBundle, ModelKind, RunDir, TrainConfig, BUNDLE_FILE};
use mvgen::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "mvgen", version, about = "Multi-view generative models on a synthetic shapes dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or export the synthetic dataset.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model and write its bundle, log and sample snapshots.
    Train(TrainArgs),
    /// Render a sample grid or an interpolation strip.
    Sample(SampleArgs),
    /// Run the evaluation battery on a trained bundle.
    Eval(EvalArgs),
    /// Check every autodiff op and a composed model against finite differences.
    Gradcheck,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Render a dataset file.
    Gen(GenArgs),
    /// Write every image of a dataset as PPM plus a CSV manifest.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training objects.
    #[arg(long = "objects", default_value_t = 80)]
    train_objects: usize,
    #[arg(long = "views", default_value_t = 24)]
    train_views: usize,
    #[arg(long, default_value_t = 20)]
    test_objects: usize,
    #[arg(long, default_value_t = 8)]
    test_views: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Total iterations.
    #[arg(long, default_value_t = 8000)]
    steps: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Generator (and encoder) learning rate; defaults depend on the model.
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value = "nonsaturating")]
    loss: LossVariant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    content_dim: usize,
    #[arg(long, default_value_t = 8)]
    view_dim: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    /// Write an 8x8 sample grid every N steps (0 disables).
    #[arg(long, default_value_t = 1000)]
    snapshot_every: u64,
    /// Print a progress line every N steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    /// Continue the run in `--out` up to `--steps`; other flags come from the bundle.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Bundle directory.
    #[arg(long)]
    model: PathBuf,
    /// Output image; `.png` for PNG, anything else for PPM.
    #[arg(long)]
    out: PathBuf,
    /// `ROWSxCOLS`: row i shares a content code, column j a view code.
    #[arg(long, conflicts_with = "interpolate")]
    grid: Option<String>,
    /// Interpolate `content` or `view` between two endpoints per row.
    #[arg(long)]
    interpolate: Option<Interpolate>,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    rows: usize,
    /// JSON file `{"a": [...], "b": [...]}` with interpolation endpoints.
    #[arg(long, requires = "interpolate")]
    endpoints: Option<PathBuf>,
    /// Dataset to draw conditioning inputs from (conditional models).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Bundle directory.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Directory caching the embedder and attribute classifiers.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pairs: usize,
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file overriding evaluator training settings (any subset of fields).
    #[arg(long)]
    evaluator_config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Keep large activation buffers on the heap instead of fresh mmaps, which
/// page-fault on every step.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

fn threads() -> usize {
    if let Ok(v) = std::env::var("MVGEN_THREADS") {
        if v.trim() != "1" {
            eprintln!("note: MVGEN_THREADS={v} ignored; execution is single-threaded");
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Gen(a)) => dataset_gen(a),
        Command::Dataset(DatasetCommand::Export(a)) => dataset_export(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck => gradcheck_cmd(),
    }
}

fn ensure_free(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if !force {
            return Err(Error::Exists { path: path.to_path_buf() });
        }
        let removed = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
        removed.map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    }
    Ok(())
}

fn incomplete(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".incomplete");
    PathBuf::from(s)
}

fn rename(from: &Path, to: &Path) -> Result<()> {
    fs::rename(from, to).map_err(|e| Error::Io { path: to.to_path_buf(), source: e })
}

fn dataset_gen(a: GenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        train_objects: a.train_objects,
        train_views: a.train_views,
        test_objects: a.test_objects,
        test_views: a.test_views,
        image_size: a.image_size,
        seed: a.seed,
    };
    cfg.validate()?;
    ensure_free(&a.out, a.force)?;
    let ds = generate_dataset(&cfg)?;
    ds.write(&a.out)?;
    let mut m = RunManifest::new("dataset gen", serde_json::to_value(cfg)?, cfg.seed);
    m.outputs.push(a.out.clone());
    m.threads = threads();
    let stats = [Split::Train, Split::Test].map(|s| ds.stats(s));
    m.extra = serde_json::to_value(stats)?;
    m.write(&RunManifest::path_for(&a.out))?;
    for (name, s) in ["train", "test"].iter().zip(&stats) {
        println!(
            "{name}: objects {} views min {} mean {:.1} max {} images {}",
            s.objects, s.views_min, s.views_mean, s.views_max, s.images
        );
    }
    Ok(())
}

fn dataset_export(a: ExportArgs) -> Result<()> {
    let ds = Dataset::read(&a.dataset)?;
    ensure_free(&a.out, a.force)?;
    let work = incomplete(&a.out);
    ensure_free(&work, true)?;
    ds.export(&work)?;
    let mut m = RunManifest::new("dataset export", serde_json::to_value(&ds.header)?, ds.header.config.seed);
    m.inputs.push(a.dataset);
    m.outputs.push(a.out.clone());
    m.threads = threads();
    m.write(&work.join("run_manifest.json"))?;
    rename(&work, &a.out)?;
    println!("exported {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = Dataset::read(&a.dataset)?;
    let work = incomplete(&a.out);
    let bundle = if a.resume {
        if !work.join(BUNDLE_FILE).exists() {
            if !a.out.join(BUNDLE_FILE).exists() {
                return Err(Error::Invalid(format!("nothing to resume in {}", a.out.display())));
            }
            rename(&a.out, &work)?;
        }
        let mut b = ModelBundle::load(&work)?;
        b.config.steps = a.steps;
        b
    } else {
        ensure_free(&a.out, a.force)?;
        ensure_free(&work, a.force)?;
        let mut cfg = TrainConfig::new(a.model);
        cfg.batch = a.batch;
        cfg.steps = a.steps;
        cfg.lr_g = a.lr_g.unwrap_or(cfg.lr_g);
        cfg.lr_d = a.lr_d.unwrap_or(cfg.lr_d);
        cfg.beta1 = a.beta1;
        cfg.loss = a.loss;
        cfg.seed = a.seed;
        cfg.checkpoint_every = a.checkpoint_every;
        cfg.arch = ArchConfig {
            image_size: ds.image_size(),
            content_dim: a.content_dim,
            view_dim: a.view_dim,
            width: a.width,
            ..ArchConfig::default()
        };
        ModelBundle::init(&cfg)?
    };
    let cfg = bundle.config;
    let mut m = RunManifest::new("train", serde_json::to_value(cfg)?, cfg.seed);
    m.inputs.push(a.dataset.clone());
    m.outputs.push(a.out.clone());
    m.threads = threads();
    m.extra = serde_json::json!({ "snapshot_every": a.snapshot_every, "resumed_from": bundle.step() });
    fs::create_dir_all(&work).map_err(|e| Error::Io { path: work.clone(), source: e })?;
    m.write(&work.join("run_manifest.json"))?;

    let run = RunDir { dir: work.clone() };
    let snapshots = work.join("samples");
    train::train(bundle, &ds, Some(&run), |log, b| {
        if a.log_every > 0 && (log.step % a.log_every == 0 || log.step == cfg.steps) {
            eprintln!(
                "step {:>6}  d {:.4}  g {:.4}  D(real) {:.3}  D(fake) {:.3}  {:.0} ms",
                log.step, log.d_loss, log.g_loss, log.d_real, log.d_fake, log.wall_ms
            );
        }
        if a.snapshot_every > 0 && log.step % a.snapshot_every == 0 {
            let lat = sampling::grid_latents(b, Some(&ds), 8, 8, cfg.seed)?;
            sampling::write_grid(&snapshots.join(format!("step_{:06}.ppm", log.step)), b, &lat)?;
        }
        Ok(())
    })?;
    rename(&work, &a.out)?;
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("grid `{s}` is not ROWSxCOLS"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

#[derive(serde::Deserialize)]
struct Endpoints {
    a: Vec<f32>,
    b: Vec<f32>,
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let ds = a.dataset.as_deref().map(Dataset::read).transpose()?;
    ensure_free(&a.out, a.force)?;
    let lat: TileLatents = match (&a.grid, a.interpolate) {
        (_, Some(mode)) => {
            let ends = match &a.endpoints {
                Some(p) => {
                    let text = fs::read(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    let e: Endpoints = serde_json::from_slice(&text)?;
                    Some((e.a, e.b))
                }
                None => None,
            };
            sampling::interpolation_latents(&bundle, ds.as_ref(), mode, a.rows, a.steps, a.seed, ends)?
        }
        (Some(g), None) => {
            let (r, c) = parse_grid(g)?;
            sampling::grid_latents(&bundle, ds.as_ref(), r, c, a.seed)?
        }
        (None, None) => sampling::grid_latents(&bundle, ds.as_ref(), 8, 8, a.seed)?,
    };
    sampling::write_grid(&a.out, &bundle, &lat)?;
    let config = serde_json::json!({
        "grid": a.grid, "interpolate": a.interpolate, "steps": a.steps, "rows": a.rows,
        "endpoints": a.endpoints, "model_kind": bundle.kind(), "model_step": bundle.step(),
    });
    let mut m = RunManifest::new("sample", config, a.seed);
    m.inputs.push(a.model.clone());
    m.inputs.extend(a.dataset.clone());
    m.outputs.push(a.out.clone());
    m.threads = threads();
    m.extra = serde_json::to_value(&lat)?;
    m.write(&RunManifest::path_for(&a.out))?;
    println!("wrote {}x{} tiles to {}", lat.rows, lat.cols, a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    use mvgen::evaluation::{self, EvalOptions, EvaluatorConfig};
    let bundle = ModelBundle::load(&a.model)?;
    let ds = Dataset::read(&a.dataset)?;
    ensure_free(&a.out, a.force)?;
    let opts = EvalOptions { pairs: a.pairs, samples: a.samples, seed: a.seed, cache: a.cache.clone(), verbose: true };
    let cfg: EvaluatorConfig = match &a.evaluator_config {
        Some(p) => serde_json::from_slice(&fs::read(p).map_err(|e| Error::Io { path: p.clone(), source: e })?)?,
        None => EvaluatorConfig::default(),
    };
    let report = evaluation::evaluate_with(&bundle, &ds, &opts, &cfg)?;
    mvgen::nn::checkpoint::write_atomic(&a.out, &serde_json::to_vec_pretty(&report)?)?;
    let mut m = RunManifest::new("eval", serde_json::json!({ "options": opts, "evaluators": cfg }), a.seed);
    m.inputs.push(a.model);
    m.inputs.push(a.dataset);
    m.outputs.push(a.out.clone());
    m.threads = threads();
    m.write(&RunManifest::path_for(&a.out))?;
    println!("{}", serde_json::to_string_pretty(&report.metrics)?);
    Ok(())
}

fn gradcheck_cmd() -> Result<()> {
    let results = verify::gradcheck_suite()?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<45} max rel err {:.3e}  ({} entries, {} skipped)", r.name, r.max_rel_error, r.entries, r.skipped);
        worst = worst.max(r.max_rel_error);
    }
    println!("worst {worst:.3e} over {} checks", results.len());
    if worst >= 1e-4 {
        return Err(Error::Invalid(format!("gradient check failed: worst relative error {worst:.3e}")));
    }
    Ok(())
}
