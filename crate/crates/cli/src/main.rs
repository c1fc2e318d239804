//! Command-line surface: phantom dataset synthesis, training, rendering at
//! arbitrary (view, t), and evaluation. Machine output is JSON on stdout;
//! progress goes to stderr.

mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use radsplat::{
    evaluate, generate_phantom, make_circular_trajectory, make_dataset, read_checkpoint, render,
    train, write_pfm, Aabb, BolusParams, Dataset, DetectorParams, EvalSplit, ImageRole,
    RasterConfig, SrMode, TimeMode, TrainConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "radsplat",
    version,
    about = "Dynamic radiative Gaussian splatting for sparse X-ray projections"
)]
struct Cli {
    /// Worker threads for rendering and dataset synthesis (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dynamic vascular phantom dataset with exact projections.
    Phantom(PhantomArgs),
    /// Optimize a kernel scene and attenuation field against a dataset.
    Train(TrainArgs),
    /// Render one projection from a checkpoint at any view and time.
    Render(RenderArgs),
    /// Score a checkpoint against a dataset split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    views: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Square high-resolution detector size in pixels; must be divisible by 4.
    #[arg(long, default_value_t = 256)]
    hr: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    branches: usize,
    #[arg(long, default_value_t = 24)]
    blobs_per_branch: usize,
    /// Angular span of the acquisition arc, degrees.
    #[arg(long, default_value_t = 180.0)]
    span: f64,
    /// Source-to-isocenter distance, mm.
    #[arg(long, default_value_t = 700.0)]
    source_distance: f64,
    /// Isocenter-to-detector distance, mm.
    #[arg(long, default_value_t = 400.0)]
    detector_distance: f64,
    /// Physical detector width, mm.
    #[arg(long, default_value_t = 200.0)]
    detector_width: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `phantom`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// TOML configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pseudo-label source: off | bicubic | dir=PATH.
    #[arg(long, value_parser = config::parse_sr_mode)]
    sr_mode: Option<SrMode>,
    /// Initial kernel count.
    #[arg(long)]
    kernels: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory supplying camera geometry and default resolution.
    #[arg(long)]
    data: PathBuf,
    /// View id from the dataset geometry.
    #[arg(long)]
    view: u32,
    /// Normalized acquisition time in [0, 1].
    #[arg(long)]
    t: f64,
    /// Output PFM path.
    #[arg(long)]
    out: PathBuf,
    /// Square output resolution; defaults to the dataset HR resolution.
    #[arg(long)]
    res: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
    All,
}

impl From<SplitArg> for EvalSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => EvalSplit::Train,
            SplitArg::Heldout => EvalSplit::Heldout,
            SplitArg::All => EvalSplit::All,
        }
    }
}

fn main() -> ExitCode {
    // clap exits 0 for --help/--version and 2 for usage errors.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: failed to size worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    let bbox = Aabb::default_scene();
    let blobs = generate_phantom(args.seed, args.branches, args.blobs_per_branch, &bbox)?;
    let detector = DetectorParams {
        width_px: args.hr,
        height_px: args.hr,
        width_mm: args.detector_width,
        distance_mm: args.detector_distance,
    };
    let trajectory = make_circular_trajectory(
        args.views,
        args.span,
        args.source_distance,
        detector,
        TimeMode::Static,
    )?;
    eprintln!(
        "synthesizing {} views x {} frames at {}x{} into {}",
        args.views,
        args.frames,
        args.hr,
        args.hr,
        args.out.display()
    );
    let manifest = make_dataset(
        &blobs,
        &BolusParams::default(),
        &trajectory,
        args.frames,
        (args.hr, args.hr),
        &args.out,
    )?;
    let summary = serde_json::json!({
        "out": args.out,
        "n_blobs": blobs.len(),
        "manifest": manifest,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = args
        .config
        .as_deref()
        .map(config::FileConfig::load)
        .transpose()?;
    let iters = args
        .iters
        .or(file.as_ref().and_then(|f| f.iters))
        .unwrap_or(3000);
    let mut cfg = TrainConfig::for_iters(iters);
    if let Some(f) = &file {
        f.apply(&mut cfg)?;
    }
    // Flags win over file values.
    if let Some(i) = args.iters {
        cfg.iters = i;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.sr_mode {
        cfg.sr_mode = m;
    }
    if let Some(k) = args.kernels {
        cfg.n_init_kernels = k;
    }
    let dataset = Dataset::load(&args.data)?;
    eprintln!(
        "training {} iters on {} ({} views x {} frames)",
        cfg.iters,
        args.data.display(),
        dataset.manifest.n_views,
        dataset.manifest.n_frames
    );
    let report = train(&dataset, &cfg, &args.out)?;
    eprintln!(
        "done in {:.1}s, {} kernels, final loss {:?}",
        report.wall_seconds, report.n_kernels, report.final_loss
    );
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.t) {
        return Err(radsplat::Error::InvalidTime { t: args.t }.into());
    }
    let dataset = Dataset::load(&args.data)?;
    let (scene, field, _meta) = read_checkpoint(&args.checkpoint)?;
    let view = dataset
        .views
        .iter()
        .find(|v| v.view_id == args.view)
        .with_context(|| format!("view {} not found in dataset geometry", args.view))?;
    let (w, h) = match args.res {
        Some(r) => (r, r),
        None => dataset.manifest.hr_dims,
    };
    let out = render(
        &scene,
        &field,
        view,
        w,
        h,
        args.t,
        ImageRole::RenderHr,
        &RasterConfig::default(),
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    write_pfm(&args.out, &out.image)?;
    let summary = serde_json::json!({
        "out": args.out,
        "width": w,
        "height": h,
        "view_id": args.view,
        "t": args.t,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let report = evaluate(&args.checkpoint, &dataset, args.split.into())?;
    if report.n_images == 0 {
        bail!("split {:?} selects no images", args.split);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
