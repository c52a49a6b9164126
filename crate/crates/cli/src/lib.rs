//! Command-line front end. Every subcommand accepts `--config file.json`
//! whose keys are the camelCase flag names; flags given on the command line
//! win over the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use boxsnake::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use boxsnake::data_io::{generate_instances, load_dataset, parse_shape_mix, DataError, DirSource, SynthConfig};
use boxsnake::geometry::{BBox, Contour, InstanceMode};
use boxsnake::image::{Image, ImageError};
use boxsnake::metrics::{EvalReport, MetricsError};
use boxsnake::model::ModelError;
use boxsnake::trainer::{evaluate_dataset, evaluate_polygons, train, TrainConfig, TrainError};
use boxsnake_service::{AppState, RefineResponse, SnapshotConfig};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("server: {0}")]
    Serve(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "boxsnake", version, about = "Box-to-contour annotation: train, evaluate, predict, serve, synthesize")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or given polygons) against a manifest.
    Eval(EvalArgs),
    /// Predict one contour from a box.
    Predict(PredictArgs),
    /// Run the HTTP annotation service.
    Serve(ServeArgs),
    /// Write a synthetic shape dataset.
    Synth(SynthArgs),
}

macro_rules! fill_from {
    ($a:ident, $b:ident; $($f:ident),* $(,)?) => {
        $( if $a.$f.is_none() { $a.$f = $b.$f; } )*
    };
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct TrainArgs {
    /// JSON file with defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training manifest; images are resolved relative to it.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// per-component or per-instance.
    #[arg(long)]
    pub mode: Option<InstanceMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the vertex loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Search scale.
    #[arg(long)]
    pub s: Option<f64>,
    /// Vertices per contour.
    #[arg(long = "K", alias = "k")]
    #[serde(rename = "K", alias = "k")]
    pub k: Option<usize>,
    /// Random horizontal flips.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub flip: Option<bool>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Also write the per-epoch loss history as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Manifest of predicted polygons (same instance ids) instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    pub predictions: Option<PathBuf>,
    /// Ground-truth manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Report JSON to write.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<InstanceMode>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct PredictArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// PNG image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Box as x0,y0,x1,y1 in image pixels.
    #[arg(long)]
    pub bbox: Option<String>,
    /// Polygon JSON to write; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct ServeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Address to bind (default 127.0.0.1).
    #[arg(long)]
    pub host: Option<String>,
    /// Port (default 8080).
    #[arg(long)]
    pub port: Option<u16>,
    /// Session snapshot file, restored at start and rewritten periodically.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Seconds between snapshots (default 30).
    #[arg(long)]
    pub snapshot_secs: Option<u64>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, rename_all = "camelCase", deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of shape instances.
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory (manifest.json and images/).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Side of the square images (default 128).
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Comma-separated families: ellipse, polygon, star.
    #[arg(long)]
    pub families: Option<String>,
    /// Chance that an instance has two separate pieces.
    #[arg(long)]
    pub two_component_prob: Option<f64>,
}

fn read_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Write { path: path.to_owned(), source })
}

impl TrainArgs {
    fn merged(mut self) -> Result<Self, CliError> {
        let file: TrainArgs = read_config(&self.config)?;
        fill_from!(self, file; manifest, out, mode, seed, epochs, batch_size, learning_rate, alpha, s, k, flip, tau, history);
        Ok(self)
    }

    /// Training configuration: defaults overridden by the given values.
    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            seed: self.seed.unwrap_or(d.seed),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            alpha: self.alpha.unwrap_or(d.alpha),
            search_scale: self.s.unwrap_or(d.search_scale),
            k: self.k.unwrap_or(d.k),
            mode: self.mode.unwrap_or(d.mode),
            flip: self.flip.unwrap_or(d.flip),
            tau: self.tau.unwrap_or(d.tau),
        }
    }
}

fn dataset_with_images(manifest: &Path) -> Result<(boxsnake::data_io::Dataset, DirSource), CliError> {
    let ds = load_dataset(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let images = DirSource::new(root, &ds);
    Ok((ds, images))
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let args = args.merged()?;
    let cfg = args.train_config();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = required(args.manifest.clone(), "manifest")?;
    let out = required(args.out.clone(), "out")?;
    let (ds, images) = dataset_with_images(&manifest)?;
    let outcome = train(&ds, &images, &cfg, |s| {
        eprintln!("epoch {:>3}  loss {:.5}  vertex {:.5}  dice {:.5}", s.epoch, s.loss, s.vertex, s.dice)
    })?;
    save_checkpoint(&Checkpoint { model: outcome.model, train: Some(cfg) }, &out)?;
    if let Some(path) = &args.history {
        write_file(path, serde_json::to_string_pretty(&outcome.history).expect("history serializes").as_bytes())?;
    }
    Ok(())
}

fn run_eval(mut args: EvalArgs) -> Result<(), CliError> {
    let file: EvalArgs = read_config(&args.config)?;
    fill_from!(args, file; ckpt, predictions, manifest, report, mode);
    let manifest = required(args.manifest, "manifest")?;
    let mode = args.mode.unwrap_or_default();
    let report: EvalReport = match (args.ckpt, args.predictions) {
        (Some(ckpt), None) => {
            let model = load_checkpoint(&ckpt)?.model;
            let (ds, images) = dataset_with_images(&manifest)?;
            evaluate_dataset(&model, &ds, &images, mode)?
        }
        (None, Some(pred)) => {
            let ds = load_dataset(&manifest)?;
            let preds: BTreeMap<_, _> = load_dataset(&pred)?.instances.into_iter().map(|i| (i.id, i.polygons)).collect();
            evaluate_polygons(&ds, &preds)?
        }
        _ => return Err(CliError::Usage("give exactly one of --ckpt or --predictions".into())),
    };
    if let Some(path) = &args.report {
        write_file(path, report.to_json()?.as_bytes())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn parse_bbox(s: &str) -> Result<BBox, CliError> {
    let usage = || CliError::Usage(format!("--bbox expects x0,y0,x1,y1, got `{s}`"));
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| usage())?;
    let [x0, y0, x1, y1] = v[..] else { return Err(usage()) };
    BBox::new(x0, y0, x1, y1).map_err(|e| CliError::Usage(format!("--bbox: {e}")))
}

/// Polygon JSON shared with the service: `{"vertices": [[x, y], ...]}`.
pub fn polygon_json(c: &Contour) -> String {
    let body = RefineResponse { vertices: c.vertices().iter().map(|p| [p.x, p.y]).collect() };
    serde_json::to_string_pretty(&body).expect("polygon serializes")
}

fn run_predict(mut args: PredictArgs) -> Result<(), CliError> {
    let file: PredictArgs = read_config(&args.config)?;
    fill_from!(args, file; ckpt, image, bbox, out);
    let b = parse_bbox(&required(args.bbox, "bbox")?)?;
    let ckpt = required(args.ckpt, "ckpt")?;
    let image = required(args.image, "image")?;
    let model = load_checkpoint(&ckpt)?.model;
    let img = Image::load_png(&image)?;
    let json = polygon_json(&model.predict_contour(&img, &b)?);
    match &args.out {
        Some(path) => write_file(path, json.as_bytes()),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn run_serve(mut args: ServeArgs) -> Result<(), CliError> {
    let file: ServeArgs = read_config(&args.config)?;
    fill_from!(args, file; ckpt, host, port, snapshot, snapshot_secs);
    let ckpt = required(args.ckpt, "ckpt")?;
    let host = args.host.unwrap_or_else(|| "127.0.0.1".into());
    let addr: SocketAddr = format!("{host}:{}", args.port.unwrap_or(8080))
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid --host/--port: {e}")))?;
    let snapshot = args.snapshot.map(|path| SnapshotConfig { path, every: Duration::from_secs(args.snapshot_secs.unwrap_or(30).max(1)) });
    let state = Arc::new(AppState::new(load_checkpoint(&ckpt)?.model));
    let rt = tokio::runtime::Runtime::new().map_err(CliError::Serve)?;
    rt.block_on(boxsnake_service::serve(addr, state, snapshot)).map_err(CliError::Serve)
}

fn run_synth(mut args: SynthArgs) -> Result<(), CliError> {
    let file: SynthArgs = read_config(&args.config)?;
    fill_from!(args, file; seed, n, out, image_size, families, two_component_prob);
    let out = required(args.out, "out")?;
    let d = SynthConfig::default();
    let families = match &args.families {
        Some(f) => parse_shape_mix(f).map_err(|e| CliError::Usage(e.to_string()))?,
        None => d.families.clone(),
    };
    let n = args.n.unwrap_or(500);
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let cfg = SynthConfig {
        seed: args.seed.unwrap_or(d.seed),
        images: n,
        image_size: args.image_size.unwrap_or(d.image_size),
        families,
        two_component_prob: args.two_component_prob.unwrap_or(d.two_component_prob),
    };
    let set = generate_instances(&cfg, n)?;
    let manifest = set.write_to(&out)?;
    eprintln!("wrote {} instances on {} images to {}", set.dataset.instances.len(), set.dataset.images.len(), manifest.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Serve(a) => run_serve(a),
        Command::Synth(a) => run_synth(a),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code: 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("\nFor more information, try '--help'.");
            }
            e.exit_code()
        }
    }
}
