//! `ernf` command-line driver.
//!
//! Exit codes: 0 on success, 1 on invalid input (flags, config, dataset,
//! checkpoint), 2 when a run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ernf::checkpoint::Checkpoint;
use ernf::collide;
use ernf::config::TrainConfig;
use ernf::eval::{psnr, EvalReport, FrameScore};
use ernf::fieldrepr::Backbone;
use ernf::geom::FrameBuffer;
use ernf::gradcheck::{self, GradModule};
use ernf::nets::GateOverride;
use ernf::regionattn::AttentionKind;
use ernf::render::{render_frame, render_torso, ConditionedHead, RenderOptions};
use ernf::scene::{self, Dataset, GenerateOptions, Split, SyntheticScene};
use ernf::train::{self, TrainOptions};
use ernf::{parallel, ppm, Error};

#[derive(Parser, Debug)]
#[command(name = "ernf", version, about = "Conditioned neural radiance fields for talking portraits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic talking-head dataset.
    GenData(GenData),
    /// Train the head field (pixel stage, then patch stage).
    TrainHead(TrainHead),
    /// Train the torso field over the head layer.
    TrainTorso(TrainTorso),
    /// Render dataset frames from a checkpoint.
    Render(Render),
    /// Hash-collision sweep of the 3D grid against the tri-plane.
    Collisions(Collisions),
    /// Compare every adjoint with central finite differences.
    Gradcheck(Gradcheck),
    /// Score a checkpoint against the dataset's validation frames.
    Eval(Eval),
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed [default: config value, 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Single worker; logs carry no wall-clock times
    #[arg(long, default_value_t = false)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct GenData {
    /// Output directory
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Number of frames
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 128)]
    size: u32,
    /// Focal length in pixels
    #[arg(long, default_value_t = 160.0)]
    focal: f64,
    /// Scale of head rotation and translation
    #[arg(long, default_value_t = 1.0)]
    motion: f64,
    /// Seed of the scene and the sequence
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainHead {
    /// Dataset directory
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// TOML training config [default: built-in desk profile]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for head.ckpt and metrics.jsonl
    #[arg(long, default_value = "runs/head")]
    out: PathBuf,
    /// Pixel-stage iterations [default: config value, 2000]
    #[arg(long)]
    iters_coarse: Option<usize>,
    /// Patch-stage iterations [default: config value, 500]
    #[arg(long)]
    iters_fine: Option<usize>,
    /// Head backbone [default: config value, trihash]
    #[arg(long, value_parser = ["trihash", "hash3d"])]
    backbone: Option<String>,
    /// Region-attention variant [default: config value, channel]
    #[arg(long, value_parser = ["channel", "feature", "concat"])]
    attention: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainTorso {
    /// Dataset directory
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// TOML training config [default: built-in desk profile]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Head checkpoint rendered behind the torso [default: none, uses the
    /// dataset's head-only images]
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory for torso.ckpt and metrics.jsonl
    #[arg(long, default_value = "runs/torso")]
    out: PathBuf,
    /// Torso iterations [default: config value, 1500]
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Render {
    /// Checkpoint to render
    #[arg(long, default_value = "none")]
    ckpt: String,
    /// Dataset supplying cameras and conditions
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Output directory for NNNN.ppm frames
    #[arg(long, default_value = "renders")]
    out: PathBuf,
    /// Samples per ray
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Render only validation frames
    #[arg(long, default_value_t = false)]
    val_only: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Collisions {
    /// Image side of the headline point
    #[arg(long = "R", default_value_t = 256)]
    r: u32,
    /// Samples per ray of the headline point
    #[arg(long = "N", default_value_t = 16)]
    n: usize,
    /// Grid resolution of the counted level
    #[arg(long, default_value_t = 512)]
    level_res: u32,
    /// log2 of the total table entries
    #[arg(long, default_value_t = 14)]
    table_log2: u32,
    /// Output directory for collisions.csv
    #[arg(long, default_value = "runs/collisions")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Module name or `all`
    #[arg(long, default_value = "all")]
    module: String,
    /// Random instances per module
    #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
    instances: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Eval {
    /// Checkpoint to score
    #[arg(long, default_value = "none")]
    ckpt: String,
    /// Dataset directory
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Output directory for report.json
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
    /// Samples per ray
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[command(flatten)]
    common: Common,
}

type CmdResult = Result<(), Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    let deterministic = match &cmd {
        Command::GenData(_) => false,
        Command::TrainHead(a) => a.common.deterministic,
        Command::TrainTorso(a) => a.common.deterministic,
        Command::Render(a) => a.common.deterministic,
        Command::Collisions(a) => a.common.deterministic,
        Command::Gradcheck(a) => a.common.deterministic,
        Command::Eval(a) => a.common.deterministic,
    };
    let workers = parallel::configure(deterministic);
    log::debug!("{workers} worker(s)");
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainHead(a) => train_head(a),
        Command::TrainTorso(a) => train_torso(a),
        Command::Render(a) => render(a),
        Command::Collisions(a) => collisions(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Eval(a) => eval(a),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, data: &[u8]) -> CmdResult {
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, Error> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_checkpoint(arg: &str) -> Result<Checkpoint, Error> {
    if arg == "none" {
        return Err(Error::Config("checkpoint required (--ckpt PATH)".into()));
    }
    Checkpoint::load(Path::new(arg))
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, Error> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| Error::Config(e.to_string()))
}

fn gen_data(a: GenData) -> CmdResult {
    if !(a.motion >= 0.0 && a.motion.is_finite()) {
        return Err(Error::Config("--motion must be non-negative".into()));
    }
    let scene = SyntheticScene::standard(a.seed);
    let opts = GenerateOptions {
        frames: a.frames,
        size: a.size,
        focal: a.focal,
        seed: a.seed,
        trajectory: scene::Trajectory::default().with_motion(a.motion),
    };
    let m = scene::generate_dataset(&scene, &opts, &a.out)?;
    println!("wrote {} frames to {}", m.frames.len(), a.out.display());
    Ok(())
}

fn write_metrics(dir: &Path, log: &[train::MetricRecord]) -> CmdResult {
    let path = dir.join("metrics.jsonl");
    let mut buf = Vec::new();
    train::write_log(log, &mut buf).map_err(|e| Error::io(&path, e))?;
    write_file(&path, &buf)
}

fn train_head(a: TrainHead) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref(), a.common.seed)?;
    if let Some(n) = a.iters_coarse {
        cfg.coarse_iters = n;
    }
    if let Some(n) = a.iters_fine {
        cfg.fine_iters = n;
    }
    if let Some(b) = &a.backbone {
        cfg.backbone = parse_enum::<Backbone>(b)?;
    }
    if let Some(k) = &a.attention {
        cfg.attention = parse_enum::<AttentionKind>(k)?;
    }
    cfg.validate()?;
    let ds = scene::load_dataset(&a.data)?;
    create_dir(&a.out)?;
    let result = train::train_head(&ds, &cfg, TrainOptions { deterministic: a.common.deterministic })?;
    write_metrics(&a.out, &result.log)?;
    result.checkpoint(&ds).save(&a.out.join("head.ckpt"))?;
    if result.skipped_steps > 0 {
        log::warn!("{} optimizer steps skipped on non-finite gradients", result.skipped_steps);
    }
    match result.final_psnr() {
        Some(p) => println!("validation PSNR {p:.2} dB"),
        None => println!("no validation run"),
    }
    Ok(())
}

fn train_torso(a: TrainTorso) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref(), a.common.seed)?;
    if let Some(n) = a.iters {
        cfg.torso_iters = n;
    }
    cfg.validate()?;
    let ds = scene::load_dataset(&a.data)?;
    let head = a.ckpt.as_deref().map(Checkpoint::load).transpose()?;
    let head_parts = match &head {
        Some(c) => {
            let field = c.head.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no head field".into()))?;
            Some((field, c.occupancy.as_ref()))
        }
        None => None,
    };
    let bgs = train::head_backgrounds(&ds, head_parts, cfg.samples_per_ray)?;
    create_dir(&a.out)?;
    let result = train::train_torso(&ds, &bgs, &cfg, TrainOptions { deterministic: a.common.deterministic })?;
    write_metrics(&a.out, &result.log)?;
    if !result.degenerate_frames.is_empty() {
        log::warn!("frames skipped for degenerate poses: {:?}", result.degenerate_frames);
    }
    let ckpt = Checkpoint {
        aabb: ds.aabb,
        head: head.as_ref().and_then(|c| c.head.clone()),
        occupancy: head.as_ref().and_then(|c| c.occupancy.clone()),
        torso: Some(result.field),
    };
    ckpt.save(&a.out.join("torso.ckpt"))?;
    if let Some(p) = result.log.iter().rev().find_map(|r| r.psnr_val) {
        println!("validation PSNR {p:.2} dB");
    }
    Ok(())
}

/// Renders one frame: head from the checkpoint (or the dataset's head-only
/// image when it has none), then the torso on top when present.
fn render_one(ckpt: &Checkpoint, ds: &Dataset, f: &scene::Frame, samples: usize) -> Result<FrameBuffer, Error> {
    let view = f.view();
    let head = match &ckpt.head {
        Some(field) => {
            let mut opts = RenderOptions::new(ds.aabb);
            opts.samples = samples;
            opts.occupancy = ckpt.occupancy.as_ref();
            let h = ConditionedHead {
                field,
                condition: f.condition,
                gates: GateOverride::None,
            };
            render_frame(&h, &ds.intrinsics, &view, &opts)?
        }
        None => f.head_image.clone(),
    };
    match &ckpt.torso {
        Some(t) => Ok(render_torso(t, &ds.intrinsics, &view, &head)?.0),
        None => Ok(head),
    }
}

fn render(a: Render) -> CmdResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    if a.samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let ds = scene::load_dataset(&a.data)?;
    create_dir(&a.out)?;
    let mut n = 0;
    for f in ds.frames.iter().filter(|f| !a.val_only || f.split == Split::Val) {
        let img = render_one(&ckpt, &ds, f, a.samples)?;
        ppm::write(&a.out.join(format!("{:04}.ppm", f.index)), &img)?;
        n += 1;
    }
    println!("rendered {n} frames to {}", a.out.display());
    Ok(())
}

fn collisions(a: Collisions) -> CmdResult {
    if a.r < 4 || a.n < 2 {
        return Err(Error::Config("--R must be at least 4 and --N at least 2".into()));
    }
    let mut rs = vec![a.r / 4, a.r / 2, a.r];
    rs.dedup();
    let mut ns: Vec<usize> = [1, 2, 4, 8, 16].into_iter().filter(|&n| n < a.n).collect();
    ns.push(a.n);
    // The sweep covers every N at the headline R and every R at the
    // headline N; other pairs are not needed for the fits.
    let mut rows = collide::complexity_sweep(&[a.r], &ns, a.level_res, a.table_log2)?;
    rows.extend(collide::complexity_sweep(&rs[..rs.len() - 1], &[a.n], a.level_res, a.table_log2)?);
    create_dir(&a.out)?;
    let path = a.out.join("collisions.csv");
    let mut buf = Vec::new();
    collide::write_csv(&rows, &mut buf).map_err(|e| Error::io(&path, e))?;
    write_file(&path, &buf)?;
    let s = collide::summarize(&rows, a.r, a.n)?;
    println!("collision ratio 3D/tri-plane at R={}, N={}: {:.2}", s.r, s.n, s.ratio);
    println!("slope ratio vs N: {:.2}", s.slope_ratio);
    println!("3D exponent vs R: {:.3}", s.exponent_3d);
    Ok(())
}

fn gradcheck(a: Gradcheck) -> CmdResult {
    let seed = a.common.seed.unwrap_or(0);
    if a.instances == 0 {
        return Err(Error::Config("--instances must be positive".into()));
    }
    let reports = if a.module == "all" {
        gradcheck::check_all(a.instances, seed)?
    } else {
        vec![gradcheck::check(a.module.parse::<GradModule>()?, a.instances, seed)?]
    };
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<16} max rel err {:.3e} over {} instances ({} redrawn) {}",
            r.module.name(),
            r.max_rel_err,
            r.instances,
            r.redrawn,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.module.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Training {
            stage: "gradcheck",
            iteration: 0,
            reason: format!("tolerance {:e} exceeded by {}", gradcheck::TOLERANCE, failed.join(", ")),
        })
    }
}

fn eval(a: Eval) -> CmdResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    if a.samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let ds = scene::load_dataset(&a.data)?;
    if ckpt.aabb != ds.aabb {
        return Err(Error::Checkpoint("checkpoint bounds differ from the dataset's".into()));
    }
    let mut scores = Vec::new();
    for f in ds.val_frames() {
        let img = render_one(&ckpt, &ds, f, a.samples)?;
        // A head-only model is scored against the head-only frames.
        let target = if ckpt.torso.is_some() { &f.image } else { &f.head_image };
        let p = psnr(&img, target)?;
        println!("frame {:04}: {p:.2} dB", f.index);
        scores.push(FrameScore { frame: f.index, psnr: p });
    }
    let report = EvalReport::from_scores(scores);
    println!("mean PSNR {:.2} dB over {} frames", report.mean_psnr, report.frames.len());
    create_dir(&a.out)?;
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&a.out.join("report.json"), &json)
}
