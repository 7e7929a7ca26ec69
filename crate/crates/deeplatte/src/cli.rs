//! Command-line surface: scene generation, training, prediction, evaluation,
//! variogram reports, and ablation comparisons.
//!
//! Exit codes: 0 success, 2 validation/parse error, 3 numeric divergence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use deeplatte::baselines::{idw_predict, ok_predict, BaselineError, ObservationSet};
use deeplatte::grid::{split_locations, GridSpec, LabelGrid, Splits};
use deeplatte::io::{self, IoError, RunManifest, VariogramReport};
use deeplatte::losses::LossError;
use deeplatte::network::{Model, ModelConfig};
use deeplatte::synthetic::{generate_scene, SceneConfig, SceneError};
use deeplatte::training::{
    evaluate, fine_tune, predict_model, pretrain_autoencoder, train, Metrics, TrainConfig,
    TrainError, TrainHistory,
};
use deeplatte::variogram::{empirical_semivariogram, fit_gaussian_model, pairwise_lags};
use deeplatte::autodiff::Tensor;

#[derive(Parser)]
#[command(name = "deeplatte", version, about = "Fine-scale spatiotemporal prediction from sparse sensors")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with full ground truth.
    Generate(GenerateArgs),
    /// Pretrain and train the model on a data directory.
    Train(TrainArgs),
    /// Predict a grid over a time range with the model or a baseline.
    Predict(PredictArgs),
    /// Compute RMSE/R² of a prediction against labels, per split.
    Evaluate(EvaluateArgs),
    /// Fit and report a semivariogram from points/values or sensor data.
    Variogram(VariogramArgs),
    /// Train the full model and one ablated variant, and compare.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene config JSON; omit for the built-in default scene.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Data directory (from `generate` or assembled in the same layout).
    #[arg(long)]
    data: PathBuf,
    /// Train config JSON (`{"train": {...}, "model": {...}}`); omit for defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from an existing checkpoint (fine-tuning) instead of
    /// training from scratch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Model,
    Idw,
    Ok,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; required for `--method model`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    method: Method,
    /// Inclusive-exclusive time range `A..B`; defaults to all feasible times.
    #[arg(long, value_parser = parse_range)]
    time_range: Option<(usize, usize)>,
    /// Restrict baseline observations to the train split of this splits JSON.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a flat CSV of the predictions.
    #[arg(long)]
    export_csv: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction directory written by `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// Labels: a data directory (sensor labels) or a `.latg` truth tensor.
    #[arg(long)]
    labels: PathBuf,
    /// Splits JSON for per-split metrics.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VariogramArgs {
    /// Point matrix `[n, d]` in LATG layout.
    #[arg(long, requires = "values")]
    points: Option<PathBuf>,
    /// Values `[n]` in LATG layout.
    #[arg(long)]
    values: Option<PathBuf>,
    /// Sensor CSV alternative to points/values.
    #[arg(long, conflicts_with = "points")]
    sensors: Option<PathBuf>,
    /// Time index used with --sensors.
    #[arg(long, default_value_t = 0)]
    time_index: usize,
    #[arg(long, default_value_t = 0.1)]
    lag_size: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DropPart {
    FeatureSelection,
    Autocorrelation,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    drop: DropPart,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Grid(#[from] deeplatte::grid::GridError),
    #[error(transparent)]
    Variogram(#[from] deeplatte::variogram::VariogramError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 for validation problems, 3 for numeric divergence.
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::Divergence { .. }) => 3,
            CliError::Train(TrainError::Loss(LossError::NonFinite { .. })) => 3,
            CliError::Variogram(deeplatte::variogram::VariogramError::FitDiverged(_)) => 3,
            _ => 2,
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Variogram(args) => cmd_variogram(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got {s}"))?;
    let a = a.parse::<usize>().map_err(|e| e.to_string())?;
    let b = b.parse::<usize>().map_err(|e| e.to_string())?;
    if a >= b {
        return Err(format!("empty time range {s}"));
    }
    Ok((a, b))
}

struct ManifestBuilder {
    command: String,
    config_hash: Option<String>,
    seed: Option<u64>,
    inputs: Vec<io::FileDigest>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.into(),
            config_hash: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), IoError> {
        if path.is_file() {
            self.inputs.push(io::FileDigest {
                path: path.display().to_string(),
                sha256: io::sha256_file(path)?,
            });
        }
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(self, dir: &Path) -> Result<(), IoError> {
        std::fs::create_dir_all(dir)?;
        io::write_json(
            &dir.join("run_manifest.json"),
            &RunManifest {
                command: self.command,
                config_hash: self.config_hash,
                seed: self.seed,
                inputs: self.inputs,
                outputs: self.outputs,
                wall_time_s: self.started.elapsed().as_secs_f64(),
            },
        )
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("generate");
    let mut config: SceneConfig = match &args.config {
        Some(path) => {
            manifest.input(path)?;
            manifest.config_hash = Some(io::sha256_file(path)?);
            io::read_json(path)?
        }
        None => SceneConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    manifest.seed = Some(config.seed);
    let scene = generate_scene(&config)?;
    let splits = split_locations(
        &io::labeled_cell_set(&scene.labels),
        &scene.features.spec,
        config.seed,
    )?;
    io::write_scene_dir(&args.out, &scene, &splits)?;
    io::write_json(&args.out.join("scene_config.json"), &config)?;
    for name in [
        "manifest.json",
        "dynamic.latg",
        "static.latg",
        "truth.latg",
        "sensors.csv",
        "splits.json",
        "scene_config.json",
    ] {
        manifest.output(&args.out.join(name));
    }
    manifest.write(&args.out)?;
    println!(
        "generated {}x{} scene, {} time steps, {} sensors -> {}",
        config.height,
        config.width,
        config.time_steps,
        config.n_sensors,
        args.out.display()
    );
    Ok(())
}

/// On-disk train config: optimizer settings plus optional model overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    pub train: TrainConfig,
    pub model: ModelOverrides,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOverrides {
    pub latent_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub kernels: Option<Vec<usize>>,
    pub tau: Option<f64>,
    pub window: Option<usize>,
    pub k_s: Option<usize>,
    pub k_t: Option<usize>,
}

impl ModelOverrides {
    fn apply(&self, mut config: ModelConfig) -> ModelConfig {
        if let Some(v) = self.latent_dim {
            config.latent_dim = v;
        }
        if let Some(v) = self.hidden {
            config.hidden = v;
        }
        if let Some(v) = &self.kernels {
            config.kernels = v.clone();
        }
        if let Some(v) = self.tau {
            config.tau = v;
        }
        if let Some(v) = self.window {
            config.window = v;
        }
        if let Some(v) = self.k_s {
            config.k_s = v;
        }
        if let Some(v) = self.k_t {
            config.k_t = v;
        }
        config
    }
}

fn load_train_config(
    path: &Option<PathBuf>,
    manifest: &mut ManifestBuilder,
) -> Result<TrainFileConfig, CliError> {
    match path {
        Some(p) => {
            manifest.input(p)?;
            manifest.config_hash = Some(io::sha256_file(p)?);
            Ok(io::read_json(p)?)
        }
        None => Ok(TrainFileConfig::default()),
    }
}

fn load_splits(
    scene: &io::SceneDir,
    out_dir: &Path,
    seed: u64,
) -> Result<Splits, CliError> {
    match &scene.splits {
        Some(s) => Ok(s.clone()),
        None => {
            let splits = split_locations(
                &io::labeled_cell_set(&scene.labels),
                &scene.manifest.grid,
                seed,
            )?;
            io::write_json(&out_dir.join("splits.json"), &splits)?;
            Ok(splits)
        }
    }
}

fn run_training_pipeline(
    scene: &io::SceneDir,
    file_cfg: &TrainFileConfig,
    splits: &Splits,
    out: &Path,
    resume_from: Option<&Path>,
) -> Result<(Model, TrainHistory), CliError> {
    let cfg = &file_cfg.train;
    let (mut model, finetuning) = match resume_from {
        Some(dir) => (io::load_checkpoint(dir)?, true),
        None => {
            let model_cfg = file_cfg.model.apply(ModelConfig::new(scene.features.channels()));
            (
                Model::new(model_cfg, cfg.seed).map_err(TrainError::from)?,
                false,
            )
        }
    };
    if !finetuning && cfg.pretrain_epochs > 0 {
        pretrain_autoencoder(&mut model, &scene.features, cfg.pretrain_epochs, cfg.pretrain_lr)?;
    }
    let history = if finetuning {
        fine_tune(&mut model, &scene.features, &scene.labels, splits, cfg)?
    } else {
        train(&mut model, &scene.features, &scene.labels, splits, cfg)?
    };
    std::fs::create_dir_all(out).map_err(IoError::from)?;
    io::save_checkpoint(&out.join("checkpoint"), &model)?;
    io::write_history_csv(&out.join("history.csv"), &history)?;
    for refit in &history.refits {
        io::write_variogram_report(
            &out.join(format!("variogram_epoch_{:03}.json", refit.epoch)),
            &VariogramReport {
                bins: refit.bins.clone(),
                fit: refit.fit.clone(),
            },
        )?;
    }
    Ok((model, history))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("train");
    let mut file_cfg = load_train_config(&args.config, &mut manifest)?;
    if let Some(seed) = args.seed {
        file_cfg.train.seed = seed;
    }
    manifest.seed = Some(file_cfg.train.seed);
    let scene = io::read_scene_dir(&args.data)?;
    for name in ["manifest.json", "dynamic.latg", "static.latg", "sensors.csv"] {
        manifest.input(&args.data.join(name))?;
    }
    std::fs::create_dir_all(&args.out).map_err(IoError::from)?;
    let splits = load_splits(&scene, &args.out, file_cfg.train.seed)?;
    let (model, history) = run_training_pipeline(
        &scene,
        &file_cfg,
        &splits,
        &args.out,
        args.checkpoint.as_deref(),
    )?;
    manifest.output(&args.out.join("checkpoint"));
    manifest.output(&args.out.join("history.csv"));
    manifest.write(&args.out)?;
    println!(
        "trained {} epochs, best val RMSE {:.4} at epoch {}, {} features selected -> {}",
        history.epochs.len(),
        history.best_val_rmse,
        history.best_epoch,
        model.sparse.selected_count(),
        args.out.display()
    );
    Ok(())
}

/// Baseline prediction over a time range from per-time observations.
fn baseline_predictions(
    method: Method,
    labels: &LabelGrid,
    grid: &GridSpec,
    times: &[usize],
    restrict: Option<&Splits>,
) -> Result<Tensor, CliError> {
    let (h, w) = (grid.height, grid.width);
    let cells = h * w;
    let targets: Vec<(f64, f64)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| grid.cell_center(r, c))
        .collect();
    let mut out = Vec::with_capacity(times.len() * cells);
    for &t in times {
        let mut obs = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if let Some(v) = labels.value_at(t, r, c) {
                    if restrict.map_or(true, |s| s.train.contains(&(r, c))) {
                        let (x, y) = grid.cell_center(r, c);
                        obs.push((x, y, v));
                    }
                }
            }
        }
        let obs = ObservationSet::new(obs)?;
        let preds = match method {
            Method::Idw => idw_predict(&obs, &targets, 2.0),
            Method::Ok => ok_predict(&obs, &targets, 10)?,
            Method::Model => unreachable!("handled by the caller"),
        };
        out.extend(preds);
    }
    Tensor::from_vec(&[times.len(), h, w], out)
        .map_err(|e| CliError::Usage(format!("baseline produced invalid values: {e}")))
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("predict");
    let scene = io::read_scene_dir(&args.data)?;
    for name in ["manifest.json", "dynamic.latg", "static.latg", "sensors.csv"] {
        manifest.input(&args.data.join(name))?;
    }
    let t_total = scene.manifest.time_steps;
    let (times, values, method_name) = match args.method {
        Method::Model => {
            let ckpt = args.checkpoint.as_ref().ok_or_else(|| {
                CliError::Usage("--method model requires --checkpoint".into())
            })?;
            manifest.input(&ckpt.join("params.latg"))?;
            let model = io::load_checkpoint(ckpt)?;
            let range = args
                .time_range
                .map(|(a, b)| a..b)
                .unwrap_or(0..t_total);
            let (times, values) = predict_model(&model, &scene.features, range)?;
            (times, values, "model")
        }
        m => {
            let restrict = args
                .split
                .as_ref()
                .map(|p| io::read_json::<Splits>(p))
                .transpose()?;
            let (a, b) = args.time_range.unwrap_or((0, t_total));
            let times: Vec<usize> = (a..b.min(t_total)).collect();
            let values = baseline_predictions(
                m,
                &scene.labels,
                &scene.manifest.grid,
                &times,
                restrict.as_ref(),
            )?;
            (times, values, if m == Method::Idw { "idw" } else { "ok" })
        }
    };
    if times.is_empty() {
        return Err(CliError::Usage("no predictable times in the requested range".into()));
    }
    let values_path = io::write_predictions(&args.out, &scene.manifest.grid, &times, &values, method_name)?;
    manifest.output(&values_path);
    if args.export_csv {
        let csv_path = args.out.join("predictions.csv");
        io::write_predictions_csv(&csv_path, &times, &values)?;
        manifest.output(&csv_path);
    }
    manifest.write(&args.out)?;
    println!(
        "predicted {} time steps with {method_name} -> {}",
        times.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluationOutput {
    per_split: BTreeMap<String, Metrics>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("evaluate");
    let (pred_manifest, pred) = io::read_predictions(&args.pred)?;
    manifest.input(&args.pred.join("predictions.latg"))?;
    let (h, w) = (pred.shape()[1], pred.shape()[2]);
    let cells = h * w;

    // labels: a scene dir (sensor labels) or a bare truth tensor
    let (label_values, label_mask, t_label) = if args.labels.is_dir() {
        let scene = io::read_scene_dir(&args.labels)?;
        manifest.input(&args.labels.join("sensors.csv"))?;
        let t = scene.labels.time_steps();
        (scene.labels.values.clone(), scene.labels.mask.clone(), t)
    } else {
        manifest.input(&args.labels)?;
        let truth = io::read_latg(&args.labels)?;
        let t = truth.shape()[0];
        let len = truth.len();
        (truth, vec![true; len], t)
    };

    let splits: Option<Splits> = match &args.split {
        Some(p) => {
            manifest.input(p)?;
            Some(io::read_json(p)?)
        }
        None => None,
    };

    let mut subsets: Vec<(String, Option<&std::collections::BTreeSet<(usize, usize)>>)> =
        vec![("all".into(), None)];
    if let Some(s) = &splits {
        subsets.push(("train".into(), Some(&s.train)));
        subsets.push(("val".into(), Some(&s.val)));
        subsets.push(("test".into(), Some(&s.test)));
    }

    let mut per_split = BTreeMap::new();
    for (name, cells_filter) in subsets {
        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        let mut mask = Vec::new();
        for (wi, &t) in pred_manifest.times.iter().enumerate() {
            if t >= t_label {
                continue;
            }
            for r in 0..h {
                for c in 0..w {
                    if let Some(filter) = cells_filter {
                        if !filter.contains(&(r, c)) {
                            continue;
                        }
                    }
                    let idx = (t * h + r) * w + c;
                    predictions.push(pred.data()[(wi * h + r) * w + c]);
                    labels.push(label_values.data()[idx]);
                    mask.push(label_mask[idx]);
                }
            }
        }
        if mask.iter().any(|m| *m) {
            per_split.insert(name, evaluate(&predictions, &labels, &mask)?);
        }
    }
    let _ = cells;

    let output = EvaluationOutput { per_split };
    io::write_json(&args.out, &output)?;
    manifest.output(&args.out);
    if let Some(parent) = args.out.parent() {
        manifest.write(parent)?;
    }
    println!("{}", serde_json::to_string_pretty(&output).map_err(IoError::from)?);
    Ok(())
}

fn cmd_variogram(args: VariogramArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("variogram");
    let (points, values): (Vec<Vec<f64>>, Vec<f64>) = if let Some(sensors_path) = &args.sensors {
        manifest.input(sensors_path)?;
        let readings = io::read_sensors_csv(sensors_path)?;
        let at_t: Vec<_> = readings
            .iter()
            .filter(|r| r.time_index == args.time_index)
            .collect();
        if at_t.len() < 2 {
            return Err(CliError::Usage(format!(
                "need at least 2 readings at time {}, found {}",
                args.time_index,
                at_t.len()
            )));
        }
        (
            at_t.iter().map(|r| vec![r.easting, r.northing]).collect(),
            at_t.iter().map(|r| r.value).collect(),
        )
    } else {
        let points_path = args
            .points
            .as_ref()
            .ok_or_else(|| CliError::Usage("provide --points/--values or --sensors".into()))?;
        let values_path = args.values.as_ref().expect("clap requires values with points");
        manifest.input(points_path)?;
        manifest.input(values_path)?;
        let p = io::read_latg(points_path)?;
        let v = io::read_latg(values_path)?;
        if p.shape().len() != 2 || v.shape().len() != 1 || p.shape()[0] != v.shape()[0] {
            return Err(CliError::Usage(format!(
                "points {:?} and values {:?} must be [n,d] and [n]",
                p.shape(),
                v.shape()
            )));
        }
        let d = p.shape()[1];
        (
            p.data().chunks_exact(d).map(|c| c.to_vec()).collect(),
            v.data().to_vec(),
        )
    };

    let lags = pairwise_lags(&points)?;
    let bins = empirical_semivariogram(&lags, &values, args.lag_size)?;
    let fit = fit_gaussian_model(&bins, true)?;
    let report = VariogramReport { bins, fit };
    std::fs::create_dir_all(&args.out).map_err(IoError::from)?;
    let json_path = args.out.join("variogram.json");
    let csv_path = args.out.join("variogram.csv");
    io::write_variogram_report(&json_path, &report)?;
    io::write_variogram_csv(&csv_path, &report)?;
    manifest.output(&json_path);
    manifest.output(&csv_path);
    manifest.write(&args.out)?;
    println!(
        "fitted variogram: nugget {:.4}, sill {:.4}, range {:.4}{}",
        report.fit.model.nugget,
        report.fit.model.sill,
        report.fit.model.range,
        if report.fit.range_pinned_low {
            " (range pinned at lower bound)"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationSide {
    val_rmse: f64,
    selected_features: usize,
    full_field_rmse: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AblationOutput {
    dropped: String,
    full: AblationSide,
    ablated: AblationSide,
    /// Percent RMSE increase of the ablated run over the full run
    /// (full-field when truth exists, validation otherwise).
    rmse_increase_pct: f64,
}

fn full_field_rmse(model: &Model, scene: &io::SceneDir) -> Result<Option<f64>, CliError> {
    let Some(truth) = &scene.truth else {
        return Ok(None);
    };
    let (times, preds) = predict_model(model, &scene.features, 0..scene.manifest.time_steps)?;
    let (h, w) = (scene.manifest.grid.height, scene.manifest.grid.width);
    let cells = h * w;
    let (mut ss, mut n) = (0.0, 0usize);
    for (wi, &t) in times.iter().enumerate() {
        for cell in 0..cells {
            let err = truth.data()[t * cells + cell] - preds.data()[wi * cells + cell];
            ss += err * err;
            n += 1;
        }
    }
    Ok(Some((ss / n as f64).sqrt()))
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("ablate");
    let mut file_cfg = load_train_config(&args.config, &mut manifest)?;
    if let Some(seed) = args.seed {
        file_cfg.train.seed = seed;
    }
    manifest.seed = Some(file_cfg.train.seed);
    let scene = io::read_scene_dir(&args.data)?;
    for name in ["manifest.json", "dynamic.latg", "static.latg", "sensors.csv"] {
        manifest.input(&args.data.join(name))?;
    }
    std::fs::create_dir_all(&args.out).map_err(IoError::from)?;
    let splits = load_splits(&scene, &args.out, file_cfg.train.seed)?;

    let mut ablated_cfg = file_cfg.clone();
    let dropped = match args.drop {
        DropPart::FeatureSelection => {
            ablated_cfg.train.weights.alpha = 0.0;
            "feature_selection"
        }
        DropPart::Autocorrelation => {
            ablated_cfg.train.weights.eta = 0.0;
            "autocorrelation"
        }
    };

    let (full_model, full_history) =
        run_training_pipeline(&scene, &file_cfg, &splits, &args.out.join("full"), None)?;
    let (ablated_model, ablated_history) =
        run_training_pipeline(&scene, &ablated_cfg, &splits, &args.out.join("ablated"), None)?;

    let full_ff = full_field_rmse(&full_model, &scene)?;
    let ablated_ff = full_field_rmse(&ablated_model, &scene)?;
    let (base, other) = match (full_ff, ablated_ff) {
        (Some(a), Some(b)) => (a, b),
        _ => (full_history.best_val_rmse, ablated_history.best_val_rmse),
    };
    let output = AblationOutput {
        dropped: dropped.into(),
        full: AblationSide {
            val_rmse: full_history.best_val_rmse,
            selected_features: full_model.sparse.selected_count(),
            full_field_rmse: full_ff,
        },
        ablated: AblationSide {
            val_rmse: ablated_history.best_val_rmse,
            selected_features: ablated_model.sparse.selected_count(),
            full_field_rmse: ablated_ff,
        },
        rmse_increase_pct: (other - base) / base * 100.0,
    };
    let out_path = args.out.join("ablation.json");
    io::write_json(&out_path, &output)?;
    manifest.output(&out_path);
    manifest.write(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&output).map_err(IoError::from)?);
    Ok(())
}
