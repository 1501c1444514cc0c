//! Command-line front end: flags and config files are resolved into a
//! [`RunConfig`], echoed to `config.json` in the output directory, then run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    branch_erf, branch_heatmap, count_params_flops, export_density, write_heatmap, Branch, ErfConfig,
};
use crate::data::{generate_dataset, rasterize, read_annotation_csv, read_dataset, read_pnm, write_dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::model::{FfNet, Fusion, ModelConfig, DENSITY_STRIDE};
use crate::tensor::Shape;
use crate::trainer::{
    ablation_report, evaluate, full_density, load_checkpoint, save_checkpoint, train, write_loss_csv, AblationRun,
    MetricsReport, TrainConfig, TrainOptions,
};

pub const CONFIG_ECHO: &str = "config.json";

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error: unknown flag, bad flag value, bad FFLAB_THREADS
  3  invalid configuration
  4  missing or unreadable file, or unwritable output
  5  malformed dataset, image or annotation
  6  bad checkpoint
  7  training stopped on a non-finite loss (last good weights kept)
  8  argument rejected by the model or data (input shape, branch, image channels)

Environment:
  FFLAB_THREADS  worker threads for evaluation and analysis (default: all cores)";

/// Exit status for an error, as listed in `--help`.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 3,
        Error::Io { .. } => 4,
        Error::Format { .. } | Error::Dataset(_) | Error::PointOutOfBounds { .. } | Error::Csv(_) => 5,
        Error::Checkpoint(_) => 6,
        Error::NonFiniteLoss { .. } => 7,
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::EmptyTarget => 8,
        Error::NonScalarLoss(_) | Error::StaleGraph => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "fflab", version, about = "Desk-scale crowd-counting laboratory", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dot-annotated dataset.
    GenData(GenDataArgs),
    /// Train a model and evaluate it on the training set.
    Train(TrainArgs),
    /// Count every image of a dataset with a checkpoint.
    Eval(EvalArgs),
    /// Parameter, MAC and FLOP accounting of a model config.
    Analyze(AnalyzeArgs),
    /// Effective receptive fields of the branch maps.
    Erf(ErfArgs),
    /// Per-branch activation heatmaps of one image.
    Heatmap(HeatmapArgs),
    /// Predicted density of one image as PGM and CSV.
    ExportDensity(ExportArgs),
    /// Side-by-side table of several training runs.
    Report(ReportArgs),
    /// Run again from an echoed config.json.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Scene config JSON; flags below override it.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Image width and height.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Mean number of crowd clusters.
    #[arg(long)]
    pub parents: Option<f64>,
    /// Mean number of heads per cluster.
    #[arg(long)]
    pub offspring_mean: Option<f64>,
    /// Cluster standard deviation in pixels.
    #[arg(long)]
    pub spread: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TrainPreset {
    /// lr 1e-3, 2000 steps, batch 8.
    Overfit,
    /// lr 1e-5, weight decay 5e-3, batch 8, 1000 steps.
    Paper,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model config JSON (default: the toy model).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training config JSON; replaces the preset.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TrainPreset::Overfit)]
    pub preset: TrainPreset,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Square crop side, a multiple of 32 (default: 256 or the largest that fits).
    #[arg(long)]
    pub crop: Option<usize>,
    /// Seeds both weight initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<Fusion>,
    /// Feed backbone features straight to fusion.
    #[arg(long)]
    pub no_ftm: bool,
    /// Run label used by `report` (default: the output directory name).
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write metrics.txt and metrics.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelPreset {
    Toy,
    ConvnextTiny,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Model config JSON; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelPreset::Toy)]
    pub preset: ModelPreset,
    /// `n,c,h,w` (default: 1,<input channels>,512,512).
    #[arg(long, value_parser = parse_shape)]
    pub input_shape: Option<Shape>,
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<Fusion>,
    #[arg(long)]
    pub no_ftm: bool,
    /// Also write report.txt and report.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ErfArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// 1, 2 or 3 (default: all).
    #[arg(long, value_parser = parse_branch)]
    pub branch: Option<Branch>,
    #[arg(long, default_value_t = 16)]
    pub probes: usize,
    /// Side of the square synthetic probe scenes.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PGM or PPM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_branch)]
    pub branch: Option<Branch>,
    /// Annotation CSV; reports the correlation of each map with its dot map.
    #[arg(long)]
    pub annotation: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directories of `train`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub config: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_fusion(s: &str) -> std::result::Result<Fusion, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_branch(s: &str) -> std::result::Result<Branch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_shape(s: &str) -> std::result::Result<Shape, String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("{d:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 4]>::try_from(dims).map_err(|d| format!("expected n,c,h,w, got {} values", d.len()))
}

/// Everything a subcommand needs, with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RunConfig {
    GenData {
        out: PathBuf,
        count: usize,
        scene: SceneConfig,
    },
    Train {
        data: PathBuf,
        out: PathBuf,
        label: String,
        model: ModelConfig,
        train: TrainConfig,
    },
    Eval {
        data: PathBuf,
        checkpoint: PathBuf,
        out: Option<PathBuf>,
    },
    Analyze {
        model: ModelConfig,
        input_shape: Shape,
        out: Option<PathBuf>,
    },
    Erf {
        checkpoint: PathBuf,
        out: PathBuf,
        branches: Vec<Branch>,
        erf: ErfConfig,
        threshold: f64,
    },
    Heatmap {
        checkpoint: PathBuf,
        image: PathBuf,
        annotation: Option<PathBuf>,
        out: PathBuf,
        branches: Vec<Branch>,
    },
    ExportDensity {
        checkpoint: PathBuf,
        image: PathBuf,
        out: PathBuf,
    },
    Report {
        runs: Vec<PathBuf>,
        out: PathBuf,
    },
}

impl RunConfig {
    pub fn out(&self) -> Option<&Path> {
        match self {
            RunConfig::GenData { out, .. }
            | RunConfig::Train { out, .. }
            | RunConfig::Erf { out, .. }
            | RunConfig::Heatmap { out, .. }
            | RunConfig::ExportDensity { out, .. }
            | RunConfig::Report { out, .. } => Some(out),
            RunConfig::Eval { out, .. } | RunConfig::Analyze { out, .. } => out.as_deref(),
        }
    }

    fn set_out(&mut self, dir: PathBuf) {
        match self {
            RunConfig::GenData { out, .. }
            | RunConfig::Train { out, .. }
            | RunConfig::Erf { out, .. }
            | RunConfig::Heatmap { out, .. }
            | RunConfig::ExportDensity { out, .. }
            | RunConfig::Report { out, .. } => *out = dir,
            RunConfig::Eval { out, .. } | RunConfig::Analyze { out, .. } => *out = Some(dir),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn model_overrides(model: &mut ModelConfig, fusion: Option<Fusion>, no_ftm: bool) {
    if let Some(f) = fusion {
        model.fusion = f;
    }
    if no_ftm {
        model.ftm.enabled = false;
    }
}

fn branches(b: Option<Branch>) -> Vec<Branch> {
    b.map_or_else(|| Branch::ALL.to_vec(), |b| vec![b])
}

/// Turns parsed flags into a validated [`RunConfig`] without running anything.
pub fn resolve(command: Command) -> Result<RunConfig> {
    Ok(match command {
        Command::GenData(a) => {
            let mut scene = match &a.scene {
                Some(p) => read_json(p)?,
                None => SceneConfig::default(),
            };
            if let Some(s) = a.size {
                scene.width = s;
                scene.height = s;
            }
            if let Some(v) = a.seed {
                scene.seed = v;
            }
            if let Some(v) = a.channels {
                scene.channels = v;
            }
            if let Some(v) = a.parents {
                scene.parents = v;
            }
            if let Some(v) = a.offspring_mean {
                scene.offspring_mean = v;
            }
            if let Some(v) = a.spread {
                scene.spread = v;
            }
            scene.validate()?;
            if a.count == 0 {
                return Err(Error::Config("count must be at least 1".into()));
            }
            RunConfig::GenData {
                out: a.out,
                count: a.count,
                scene,
            }
        }
        Command::Train(a) => {
            let mut model = match &a.config {
                Some(p) => ModelConfig::load(p)?,
                None => ModelConfig::toy(),
            };
            let mut train = match (&a.train_config, a.preset) {
                (Some(p), _) => read_json(p)?,
                (None, TrainPreset::Overfit) => TrainConfig::overfit(),
                (None, TrainPreset::Paper) => TrainConfig::default(),
            };
            model_overrides(&mut model, a.fusion, a.no_ftm);
            if let Some(v) = a.seed {
                train.seed = v;
                model.seed = v;
            }
            if let Some(v) = a.steps {
                train.steps = v;
            }
            if let Some(v) = a.lr {
                train.optimizer.lr = v;
            }
            if let Some(v) = a.batch_size {
                train.batch_size = v;
            }
            let manifest: crate::data::Manifest = read_json(&a.data.join("manifest.json"))?;
            let side = manifest.scene.width.min(manifest.scene.height) / 32 * 32;
            train.crop = match a.crop {
                Some(c) => c,
                None if a.train_config.is_some() => train.crop,
                None => train.crop.min(side),
            };
            if train.crop > side {
                return Err(Error::Config(format!(
                    "crop {} exceeds the {}x{} images of {}",
                    train.crop,
                    manifest.scene.width,
                    manifest.scene.height,
                    a.data.display()
                )));
            }
            model.validate()?;
            train.validate()?;
            let label = a.label.unwrap_or_else(|| {
                a.out
                    .file_name()
                    .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
            });
            RunConfig::Train {
                data: a.data,
                out: a.out,
                label,
                model,
                train,
            }
        }
        Command::Eval(a) => RunConfig::Eval {
            data: a.data,
            checkpoint: a.checkpoint,
            out: a.out,
        },
        Command::Analyze(a) => {
            let mut model = match (&a.config, a.preset) {
                (Some(p), _) => ModelConfig::load(p)?,
                (None, ModelPreset::Toy) => ModelConfig::toy(),
                (None, ModelPreset::ConvnextTiny) => ModelConfig::convnext_tiny(),
            };
            model_overrides(&mut model, a.fusion, a.no_ftm);
            model.validate()?;
            let input_shape = a.input_shape.unwrap_or([1, model.backbone.input_channels, 512, 512]);
            RunConfig::Analyze {
                model,
                input_shape,
                out: a.out,
            }
        }
        Command::Erf(a) => {
            if a.probes == 0 || a.size == 0 || a.size % 32 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "need at least one probe and a positive size divisible by 32, got {} probes of {}",
                    a.probes, a.size
                )));
            }
            RunConfig::Erf {
                checkpoint: a.checkpoint,
                out: a.out,
                branches: branches(a.branch),
                erf: ErfConfig {
                    probes: a.probes,
                    seed: a.seed,
                    size: a.size,
                },
                threshold: a.threshold,
            }
        }
        Command::Heatmap(a) => RunConfig::Heatmap {
            checkpoint: a.checkpoint,
            image: a.image,
            annotation: a.annotation,
            out: a.out,
            branches: branches(a.branch),
        },
        Command::ExportDensity(a) => RunConfig::ExportDensity {
            checkpoint: a.checkpoint,
            image: a.image,
            out: a.out,
        },
        Command::Report(a) => RunConfig::Report {
            runs: a.runs,
            out: a.out,
        },
        Command::Replay(a) => {
            let mut run = RunConfig::load(&a.config)?;
            if let Some(out) = a.out {
                run.set_out(out);
            }
            run
        }
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<FfNet> {
    load_checkpoint(path)
}

fn check_channels(model: &FfNet, image: &crate::data::Image, path: &Path) -> Result<()> {
    if image.channels != model.config.backbone.input_channels {
        return Err(Error::InvalidArgument(format!(
            "{} has {} channels, the model expects {}",
            path.display(),
            image.channels,
            model.config.backbone.input_channels
        )));
    }
    Ok(())
}

/// Echoes the config into the output directory, then runs it.
pub fn execute(run: &RunConfig) -> Result<()> {
    if let Some(out) = run.out() {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write(&out.join(CONFIG_ECHO), &run.to_json())?;
    }
    match run {
        RunConfig::GenData { out, count, scene } => {
            let ds = generate_dataset(scene, *count)?;
            let manifest = write_dataset(out, &ds)?;
            let heads: usize = manifest.entries.iter().map(|e| e.count).sum();
            println!("wrote {} images with {heads} heads to {}", manifest.entries.len(), out.display());
        }
        RunConfig::Train {
            data,
            out,
            label,
            model: config,
            train: cfg,
        } => {
            let ds = read_dataset(data)?;
            let mut model = FfNet::<f64>::new(config.clone())?;
            let opts = TrainOptions {
                last_good: Some(out.join("last_good.ffck")),
            };
            let every = (cfg.steps / 20).max(1);
            let outcome = train(&mut model, &ds, cfg, &opts, |r| {
                if r.step % every == 0 || r.step + 1 == cfg.steps {
                    eprintln!(
                        "step {:>5}  total {:.5}  count {:.5}  ot {:.3e}  variation {:.5}",
                        r.step, r.total, r.count, r.ot, r.variation
                    );
                }
            })?;
            write_loss_csv(&out.join("loss.csv"), &outcome.curve)?;
            save_checkpoint(&out.join("model.ffck"), &model)?;
            let metrics = evaluate(&model, &ds)?;
            write_metrics(out, &metrics)?;
            let density = full_density(&model, &ds.samples[0].image)?;
            let summary = AblationRun {
                label: label.clone(),
                fusion: config.fusion.to_string(),
                ftm: config.ftm.enabled,
                params: model.store.trainable_count(),
                density_shape: density.shape(),
                curve: outcome.curve,
                metrics: metrics.clone(),
            };
            write(&out.join("run.json"), &serde_json::to_string_pretty(&summary)?)?;
            print!("{}", metrics.to_text());
        }
        RunConfig::Eval { data, checkpoint, out } => {
            let ds = read_dataset(data)?;
            let model = load_model(checkpoint)?;
            let metrics = evaluate(&model, &ds)?;
            if let Some(out) = out {
                write_metrics(out, &metrics)?;
            }
            print!("{}", metrics.to_text());
        }
        RunConfig::Analyze {
            model,
            input_shape,
            out,
        } => {
            let report = count_params_flops(model, *input_shape)?;
            if let Some(out) = out {
                write(&out.join("report.txt"), &report.to_text())?;
                write(&out.join("report.json"), &report.to_json())?;
            }
            print!("{}", report.to_text());
        }
        RunConfig::Erf {
            checkpoint,
            out,
            branches,
            erf,
            threshold,
        } => {
            let model = load_model(checkpoint)?;
            let mut summary = Vec::new();
            for &b in branches {
                let map = branch_erf(&model, b, erf)?;
                crate::data::write_pnm(&out.join(format!("erf_{b}.pgm")), &map.to_image())?;
                let area = map.area(*threshold);
                println!("{b}: area {area} px at threshold {threshold}, support {:?}", map.support());
                summary.push(serde_json::json!({
                    "branch": b.to_string(),
                    "threshold": threshold,
                    "area": area,
                    "support": map.support(),
                }));
            }
            write(&out.join("erf.json"), &serde_json::to_string_pretty(&summary)?)?;
        }
        RunConfig::Heatmap {
            checkpoint,
            image,
            annotation,
            out,
            branches,
        } => {
            let model = load_model(checkpoint)?;
            let img = read_pnm(image)?;
            check_channels(&model, &img, image)?;
            let dots = match annotation {
                Some(p) => Some(rasterize::<f64>(
                    &read_annotation_csv(p, img.width, img.height)?,
                    DENSITY_STRIDE,
                    crate::data::RasterMode::Additive,
                )?),
                None => None,
            };
            for &b in branches {
                let map = branch_heatmap(&model, &img, b)?;
                let path = out.join(format!("heatmap_{b}.pgm"));
                write_heatmap(&path, &map)?;
                match &dots {
                    Some(d) => println!("{b}: {} (correlation with dots {:.3})", path.display(), map.correlation(d)?),
                    None => println!("{b}: {}", path.display()),
                }
            }
        }
        RunConfig::ExportDensity { checkpoint, image, out } => {
            let model = load_model(checkpoint)?;
            let img = read_pnm(image)?;
            check_channels(&model, &img, image)?;
            let e = export_density(&model, &img, &out.join("density"))?;
            println!("count {:.4} over {}x{} cells -> {}", e.count, e.rows, e.cols, e.csv.display());
        }
        RunConfig::Report { runs, out } => {
            let mut loaded = Vec::with_capacity(runs.len());
            for dir in runs {
                loaded.push(read_json::<AblationRun>(&dir.join("run.json"))?);
            }
            let table = ablation_report(&loaded);
            write(&out.join("report.md"), &table)?;
            write(&out.join("curves.csv"), &curves_csv(&loaded))?;
            print!("{table}");
        }
    }
    Ok(())
}

/// Total loss per step, one column per run.
fn curves_csv(runs: &[AblationRun]) -> String {
    let mut s = String::from("step");
    for r in runs {
        s.push(',');
        s.push_str(&r.label);
    }
    s.push('\n');
    let steps = runs.iter().map(|r| r.curve.len()).max().unwrap_or(0);
    for i in 0..steps {
        s.push_str(&i.to_string());
        for r in runs {
            s.push(',');
            if let Some(c) = r.curve.get(i) {
                s.push_str(&c.total.to_string());
            }
        }
        s.push('\n');
    }
    s
}

fn write_metrics(out: &Path, m: &MetricsReport) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("metrics.txt"), &m.to_text())?;
    write(&out.join("metrics.json"), &serde_json::to_string_pretty(m)?)
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("FFLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("FFLAB_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Entry point of the `fflab` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(m) = configure_threads() {
        eprintln!("error: {m}");
        return ExitCode::from(2);
    }
    let result = resolve(cli.command).and_then(|run| execute(&run));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonFiniteLoss {
                last_good: Some(p), ..
            } = &e
            {
                eprintln!("last good weights: {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
