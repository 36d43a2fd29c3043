//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{flop_report, quality, time_render, FlopReport, RenderPath, Timing};
use crate::checkpoint::load_checkpoint;
use crate::data::{generate_dataset, load_dataset, Dataset};
use crate::field::{ArchitectureDescriptor, DerfModel, EvalMode};
use crate::geometry::{Camera, Vec3};
use crate::imagebuf::FloatImage;
use crate::render::{painter_render_image, pixel_rng, render_image, RenderSettings};
use crate::scene::SceneDescription;
use crate::train::{train_run, SiteLayout, TrainConfig};
use crate::voronoi::hard_assign;

#[derive(Debug, Parser)]
#[command(name = "derf", version, about = "Voronoi-decomposed radiance fields on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene into a multi-view dataset.
    Gen(GenArgs),
    /// Train a decomposed model on a dataset.
    Train(TrainArgs),
    /// Render one dataset view from a checkpoint.
    Render(RenderArgs),
    /// Report PSNR/SSIM on the held-out views.
    Eval(EvalArgs),
    /// FLOP accounting and render timings.
    Bench(BenchArgs),
    /// Color each pixel by the cell its ray first becomes opaque in.
    VizCells(VizArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    Monolithic,
    Painter,
}

impl From<PathArg> for RenderPath {
    fn from(p: PathArg) -> Self {
        match p {
            PathArg::Monolithic => RenderPath::Monolithic,
            PathArg::Painter => RenderPath::Painter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SitesArg {
    Random,
    Grid,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene JSON file, or one of the presets `three-blob`, `two-blob`.
    #[arg(long, default_value = "three-blob")]
    pub scene: String,
    #[arg(long, default_value_t = 40)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    pub out: PathBuf,
    /// Base configuration as JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "heads")]
    pub heads: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long = "iters-pre")]
    pub iters_pre: Option<u64>,
    #[arg(long = "iters-main")]
    pub iters_main: Option<u64>,
    #[arg(long = "beta-final")]
    pub beta_final: Option<f64>,
    #[arg(long, value_enum)]
    pub sites: Option<SitesArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "checkpoint-every")]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset providing the camera.
    #[arg(long)]
    pub data: PathBuf,
    /// Frame index whose camera is used.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long, value_enum, default_value = "monolithic")]
    pub path: PathArg,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Output directory for `bench_report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_scene(spec: &str) -> anyhow::Result<SceneDescription> {
    let scene = match spec {
        "three-blob" => SceneDescription::three_blob(),
        "two-blob" => SceneDescription::two_blob(),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading scene {path}"))?;
            serde_json::from_str(&text).map_err(|e| crate::error::DerfError::parse(path, e))?
        }
    };
    scene.validate()?;
    Ok(scene)
}

fn train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut config = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| crate::error::DerfError::parse(p, e))?
        }
        None => TrainConfig::default(),
    };
    let mut descriptor = config.descriptor;
    if let Some(d) = args.depth {
        descriptor = ArchitectureDescriptor::new(d, descriptor.width);
    }
    if let Some(w) = args.width {
        descriptor.width = w;
    }
    config.descriptor = descriptor;
    macro_rules! set {
        ($field:ident, $arg:expr) => {
            if let Some(v) = $arg {
                config.$field = v;
            }
        };
    }
    set!(seed, args.seed);
    set!(n_heads, args.heads);
    set!(n_samples, args.samples);
    set!(batch_rays, args.batch);
    set!(iters_pretrain, args.iters_pre);
    set!(iters_main, args.iters_main);
    set!(beta_final, args.beta_final);
    set!(lr, args.lr);
    set!(checkpoint_every, args.checkpoint_every);
    if let Some(s) = args.sites {
        config.sites = match s {
            SitesArg::Random => SiteLayout::Random,
            SitesArg::Grid => SiteLayout::Grid,
        };
    }
    config.validate()?;
    Ok(config)
}

struct View {
    model: DerfModel,
    camera: Camera,
    settings: RenderSettings,
}

fn load_view(args: &ViewArgs) -> anyhow::Result<View> {
    let state = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let Some(frame) = dataset.frames.get(args.frame) else {
        bail!("frame {} out of range (dataset has {})", args.frame, dataset.frames.len());
    };
    if args.samples == 0 {
        bail!("--samples must be >= 1");
    }
    Ok(View {
        model: state.model,
        camera: frame.camera.clone(),
        settings: RenderSettings {
            n_samples: args.samples,
            seed: args.seed,
            background: dataset.background,
        },
    })
}

#[derive(Debug, Serialize)]
struct FrameQuality {
    frame: usize,
    file_path: String,
    psnr: f64,
    ssim: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    frames: Vec<FrameQuality>,
    mean_psnr: f64,
    mean_ssim: Option<f64>,
}

pub fn evaluate_heldout(model: &DerfModel, dataset: &Dataset, settings: &RenderSettings) -> anyhow::Result<Vec<(usize, f64, Option<f64>)>> {
    let (_, test) = dataset.split();
    test.into_iter()
        .map(|i| {
            let f = &dataset.frames[i];
            let img = render_image(model, &f.camera, settings, EvalMode::Hard);
            let (p, s) = quality(&img, &f.image)?;
            Ok((i, p, s))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct Machine {
    threads: usize,
    profile: &'static str,
    os: &'static str,
    arch: &'static str,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    machine: Machine,
    flops: FlopReport,
    timings: Vec<Timing>,
    caveats: Vec<&'static str>,
}

/// Distinct, stable color per cell index.
pub fn cell_color(cell: usize) -> Vec3 {
    let h = (cell as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    Vec3::new(0.15 + 0.8 * r, 0.15 + 0.8 * g, 0.15 + 0.8 * b)
}

/// Cell index of the sample at which each pixel's accumulated opacity first
/// reaches one half, or `None` for rays that stay mostly transparent.
pub fn first_hit_cells(m: &DerfModel, camera: &Camera, settings: &RenderSettings) -> Vec<Option<usize>> {
    use crate::field::RadianceField;
    use crate::geometry::stratified_samples;
    let field = m.field(EvalMode::Hard);
    (0..camera.pixel_count())
        .map(|p| {
            let col = (p % camera.width as usize) as u32;
            let row = (p / camera.width as usize) as u32;
            let ray = m.normalization.apply_ray(&camera.pixel_ray(col, row));
            let samples = stratified_samples(&ray, settings.n_samples, &mut pixel_rng(settings.seed, p)).ok()?;
            let points: Vec<Vec3> = samples.t.iter().map(|&t| ray.at(t)).collect();
            let values = field.eval_batch(&points, &vec![ray.direction; points.len()]);
            let mut transmittance = 1.0;
            for ((x, v), d) in points.iter().zip(&values).zip(&samples.delta) {
                transmittance *= (-v.sigma * d).exp();
                if transmittance <= 0.5 {
                    return Some(hard_assign(x, &m.decomposition));
                }
            }
            None
        })
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let scene = load_scene(&a.scene)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let ds = generate_dataset(&scene, a.views, a.resolution, &mut rng, &a.out)?;
            fs::write(a.out.join("scene.json"), serde_json::to_string_pretty(&scene)?)?;
            println!("wrote {} views to {}", ds.frames.len(), a.out.display());
        }
        Command::Train(a) => {
            let config = train_config(&a)?;
            let dataset = load_dataset(&a.data)?;
            let state = train_run(config, &dataset, Some(&a.out))?;
            println!(
                "trained {} iterations, checkpoint at {}",
                state.iter,
                a.out.join("final.ckpt").display()
            );
        }
        Command::Render(a) => {
            let v = load_view(&a.view)?;
            let img = match a.path {
                PathArg::Monolithic => render_image(&v.model, &v.camera, &v.settings, EvalMode::Hard),
                PathArg::Painter => painter_render_image(&v.model, &v.camera, &v.settings),
            };
            img.save_png(&a.out)?;
        }
        Command::Eval(a) => {
            let state = load_checkpoint(&a.checkpoint)?;
            let dataset = load_dataset(&a.data)?;
            if a.samples == 0 {
                bail!("--samples must be >= 1");
            }
            let settings = RenderSettings {
                n_samples: a.samples,
                seed: a.seed,
                background: dataset.background,
            };
            let rows = evaluate_heldout(&state.model, &dataset, &settings)?;
            if rows.is_empty() {
                bail!("dataset has no held-out frames");
            }
            let frames: Vec<FrameQuality> = rows
                .into_iter()
                .map(|(i, psnr, ssim)| FrameQuality {
                    frame: i,
                    file_path: dataset.frames[i].file_path.clone(),
                    psnr,
                    ssim,
                })
                .collect();
            let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / frames.len() as f64;
            let mean_ssim = frames
                .iter()
                .map(|f| f.ssim)
                .sum::<Option<f64>>()
                .map(|s| s / frames.len() as f64);
            println!("held-out PSNR {mean_psnr:.3} dB over {} frames", frames.len());
            write_json(
                &EvalReport {
                    frames,
                    mean_psnr,
                    mean_ssim,
                },
                &a.out,
            )?;
        }
        Command::Bench(a) => {
            let v = load_view(&a.view)?;
            let mut flops = flop_report(
                &v.model.descriptor,
                v.model.n_heads(),
                v.camera.pixel_count() as u64,
                v.settings.n_samples as u64,
            );
            let timings: Vec<Timing> = [RenderPath::Monolithic, RenderPath::Painter]
                .into_iter()
                .map(|p| time_render(&v.model, &v.camera, &v.settings, p, a.repeats))
                .collect();
            if let Some(per_cell) = timings.iter().find_map(|t| t.samples_per_cell.clone()) {
                flops.samples_per_head = per_cell.into_iter().map(|n| n as u64).collect();
            }
            let report = BenchReport {
                machine: Machine {
                    threads: rayon::current_num_threads(),
                    profile: if cfg!(debug_assertions) { "debug" } else { "release" },
                    os: std::env::consts::OS,
                    arch: std::env::consts::ARCH,
                },
                flops,
                timings,
                caveats: vec![
                    "FLOPs count MLP multiply-adds only (2 per MAC); encoding, activation and compositing work is excluded",
                    "one network evaluation per sample; no separate coarse and fine passes",
                ],
            };
            write_json(&report, &a.out.join("bench_report.json"))?;
            for t in &report.timings {
                println!("{:?}: median {:.4} s", t.path, t.median_seconds);
            }
        }
        Command::VizCells(a) => {
            let v = load_view(&a.view)?;
            let cells = first_hit_cells(&v.model, &v.camera, &v.settings);
            let pixels = cells
                .into_iter()
                .map(|c| c.map(cell_color).unwrap_or(v.settings.background))
                .collect();
            FloatImage::new(v.camera.width, v.camera.height, pixels)?.save_png(&a.out)?;
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
