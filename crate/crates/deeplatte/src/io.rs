//! File formats: LATG binary tensors, sensor CSV, primitive JSON, scene
//! directories, model checkpoints, variogram reports, and history CSV.
//!
//! The LATG layout is `b"LATG"`, `u32` version, `u32` dimension count, the
//! `u32` dimensions, then the values as little-endian `f64`, row-major.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::grid::{FeatureGrid, GridError, GridSpec, LabelGrid, SensorReading, Splits};
use crate::network::{FeatureScaler, Model, ModelConfig};
use crate::synthetic::SyntheticScene;
use crate::variogram::{VariogramBins, VariogramFit};

pub const LATG_MAGIC: &[u8; 4] = b"LATG";
pub const LATG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("bad file format in {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes one tensor in the LATG layout.
pub fn write_latg(path: &Path, tensor: &Tensor) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_latg_record(&mut w, tensor)?;
    Ok(())
}

fn write_latg_record(w: &mut impl Write, tensor: &Tensor) -> Result<(), IoError> {
    w.write_all(LATG_MAGIC)?;
    w.write_all(&LATG_VERSION.to_le_bytes())?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in tensor.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor in the LATG layout.
pub fn read_latg(path: &Path) -> Result<Tensor, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    read_latg_record(&mut r, path)
}

fn read_latg_record(r: &mut impl Read, path: &Path) -> Result<Tensor, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LATG_MAGIC {
        return Err(format_err(path, "missing LATG magic"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != LATG_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let ndims = u32::from_le_bytes(buf4) as usize;
    if ndims > 8 {
        return Err(format_err(path, format!("implausible rank {ndims}")));
    }
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0.0f64; len];
    let mut buf8 = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf8)?;
        *v = f64::from_le_bytes(buf8);
    }
    Tensor::from_vec(&shape, data).map_err(|e| format_err(path, e.to_string()))
}

pub const SENSORS_HEADER: [&str; 5] = ["sensor_id", "easting_m", "northing_m", "time_index", "value"];

pub fn write_sensors_csv(path: &Path, readings: &[SensorReading]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e))?;
    w.write_record(SENSORS_HEADER).map_err(|e| csv_err(path, 0, e))?;
    for (i, r) in readings.iter().enumerate() {
        w.write_record(&[
            r.sensor_id.clone(),
            r.easting.to_string(),
            r.northing.to_string(),
            r.time_index.to_string(),
            r.value.to_string(),
        ])
        .map_err(|e| csv_err(path, i + 2, e))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(path: &Path, line: usize, e: impl std::fmt::Display) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

pub fn read_sensors_csv(path: &Path) -> Result<Vec<SensorReading>, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, 0, e))?;
    {
        let headers = reader.headers().map_err(|e| csv_err(path, 1, e))?;
        let expected: Vec<&str> = SENSORS_HEADER.to_vec();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(csv_err(
                path,
                1,
                format!("expected header {SENSORS_HEADER:?}, got {headers:?}"),
            ));
        }
    }
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| csv_err(path, line, e))?;
        let field = |i: usize, name: &str| -> Result<&str, IoError> {
            record
                .get(i)
                .ok_or_else(|| csv_err(path, line, format!("missing field {name}")))
        };
        let parse_f64 = |i: usize, name: &str| -> Result<f64, IoError> {
            field(i, name)?
                .parse::<f64>()
                .map_err(|e| csv_err(path, line, format!("field {name}: {e}")))
        };
        let value = parse_f64(4, "value")?;
        if !value.is_finite() {
            return Err(csv_err(path, line, "non-finite value"));
        }
        out.push(SensorReading {
            sensor_id: field(0, "sensor_id")?.to_string(),
            easting: parse_f64(1, "easting_m")?,
            northing: parse_f64(2, "northing_m")?,
            time_index: field(3, "time_index")?
                .parse::<usize>()
                .map_err(|e| csv_err(path, line, format!("field time_index: {e}")))?,
            value,
        });
    }
    Ok(out)
}

pub fn read_primitives_json(path: &Path) -> Result<Vec<crate::grid::GeoPrimitive>, IoError> {
    let file = File::open(path)?;
    let prims: Vec<crate::grid::GeoPrimitive> = serde_json::from_reader(BufReader::new(file))?;
    for p in &prims {
        p.validate()?;
    }
    Ok(prims)
}

/// Scene directory manifest (`manifest.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub grid: GridSpec,
    pub time_steps: usize,
    pub feature_names: Vec<String>,
    pub dynamic_file: String,
    pub static_file: String,
    pub sensors_file: String,
    #[serde(default)]
    pub truth_file: Option<String>,
    #[serde(default)]
    pub splits_file: Option<String>,
}

/// Writes a synthetic scene as a data directory the rest of the pipeline
/// consumes: manifest, feature tensors, truth, sensors, splits.
pub fn write_scene_dir(dir: &Path, scene: &SyntheticScene, splits: &Splits) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    write_latg(&dir.join("dynamic.latg"), &scene.features.dynamic)?;
    write_latg(&dir.join("static.latg"), &scene.features.static_features)?;
    write_latg(&dir.join("truth.latg"), &scene.truth)?;
    write_sensors_csv(&dir.join("sensors.csv"), &scene.sensors)?;
    write_json(&dir.join("splits.json"), splits)?;
    let manifest = SceneManifest {
        grid: scene.features.spec.clone(),
        time_steps: scene.features.time_steps,
        feature_names: scene.features.feature_names.clone(),
        dynamic_file: "dynamic.latg".into(),
        static_file: "static.latg".into(),
        sensors_file: "sensors.csv".into(),
        truth_file: Some("truth.latg".into()),
        splits_file: Some("splits.json".into()),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// A loaded data directory.
pub struct SceneDir {
    pub manifest: SceneManifest,
    pub features: FeatureGrid,
    pub labels: LabelGrid,
    pub rejected_readings: Vec<SensorReading>,
    pub truth: Option<Tensor>,
    pub splits: Option<Splits>,
}

pub fn read_scene_dir(dir: &Path) -> Result<SceneDir, IoError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: SceneManifest = read_json(&manifest_path)?;
    let dynamic = read_latg(&dir.join(&manifest.dynamic_file))?;
    let static_features = read_latg(&dir.join(&manifest.static_file))?;
    let features = FeatureGrid::new(
        manifest.grid.clone(),
        manifest.time_steps,
        dynamic,
        static_features,
        manifest.feature_names.clone(),
    )?;
    let sensors = read_sensors_csv(&dir.join(&manifest.sensors_file))?;
    let (labels, rejected_readings) =
        crate::grid::map_sensors_to_labels(&sensors, &manifest.grid, manifest.time_steps)?;
    let truth = manifest
        .truth_file
        .as_ref()
        .map(|f| read_latg(&dir.join(f)))
        .transpose()?;
    let splits = manifest
        .splits_file
        .as_ref()
        .map(|f| read_json::<Splits>(&dir.join(f)))
        .transpose()?;
    Ok(SceneDir {
        manifest,
        features,
        labels,
        rejected_readings,
        truth,
        splits,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    prior_train_cells: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Saves a model checkpoint: `manifest.json` plus `params.latg` holding the
/// named tensors (parameters and scaler) as concatenated LATG records in
/// manifest order.
pub fn save_checkpoint(dir: &Path, model: &Model) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let mut tensors: Vec<(String, Tensor)> = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    tensors.push(("scaler.mean".into(), model.scaler.mean.clone()));
    tensors.push(("scaler.inv_std".into(), model.scaler.inv_std.clone()));
    let manifest = CheckpointManifest {
        version: LATG_VERSION,
        model: model.config.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        prior_train_cells: model.prior_train_cells.iter().copied().collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let mut w = BufWriter::new(File::create(dir.join("params.latg"))?);
    for (_, t) in &tensors {
        write_latg_record(&mut w, t)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model, IoError> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let params_path = dir.join("params.latg");
    let mut r = BufReader::new(File::open(&params_path)?);
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let t = read_latg_record(&mut r, &params_path)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(format_err(
                &params_path,
                format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                ),
            ));
        }
        tensors.push((entry.name.clone(), t));
    }
    let mut model = Model::new(manifest.model.clone(), 0)
        .map_err(|e| format_err(&params_path, e.to_string()))?;
    let mut mean = None;
    let mut inv_std = None;
    {
        let mut slots = model.params_mut();
        for (name, tensor) in &tensors {
            match name.as_str() {
                "scaler.mean" => mean = Some(tensor.clone()),
                "scaler.inv_std" => inv_std = Some(tensor.clone()),
                _ => {
                    let slot = slots
                        .iter_mut()
                        .find(|(n, _)| n == name)
                        .ok_or_else(|| format_err(&params_path, format!("unknown tensor {name}")))?;
                    if slot.1.shape() != tensor.shape() {
                        return Err(format_err(
                            &params_path,
                            format!("tensor {name} shape mismatch with model config"),
                        ));
                    }
                    *slot.1 = tensor.clone();
                }
            }
        }
    }
    match (mean, inv_std) {
        (Some(mean), Some(inv_std)) => model.scaler = FeatureScaler { mean, inv_std },
        _ => return Err(format_err(&params_path, "checkpoint is missing the feature scaler")),
    }
    model.prior_train_cells = manifest.prior_train_cells.into_iter().collect();
    Ok(model)
}

/// Variogram report: bins, fitted parameters, and validity diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariogramReport {
    pub bins: VariogramBins,
    pub fit: VariogramFit,
}

pub fn write_variogram_report(path: &Path, report: &VariogramReport) -> Result<(), IoError> {
    write_json(path, report)
}

/// Plot-ready CSV: lag center, empirical γ, pair count, fitted f(h).
pub fn write_variogram_csv(path: &Path, report: &VariogramReport) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e))?;
    w.write_record(["lag_center", "gamma", "pairs", "fitted"])
        .map_err(|e| csv_err(path, 0, e))?;
    for bin in &report.bins.bins {
        w.write_record(&[
            bin.center.to_string(),
            bin.gamma.map_or(String::new(), |g| g.to_string()),
            bin.count.to_string(),
            report.fit.model.evaluate(bin.center).to_string(),
        ])
        .map_err(|e| csv_err(path, 0, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_csv(path: &Path, history: &crate::training::TrainHistory) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e))?;
    w.write_record([
        "epoch",
        "loss_pred",
        "loss_sp",
        "loss_ae",
        "loss_stc",
        "loss_ac",
        "loss_total",
        "val_rmse",
        "nugget",
        "sill",
        "range",
        "selected_features",
        "ac_warning",
    ])
    .map_err(|e| csv_err(path, 0, e))?;
    for e in &history.epochs {
        w.write_record(&[
            e.epoch.to_string(),
            e.loss_pred.to_string(),
            e.loss_sp.to_string(),
            e.loss_ae.to_string(),
            e.loss_stc.to_string(),
            e.loss_ac.to_string(),
            e.loss_total.to_string(),
            e.val_rmse.to_string(),
            e.nugget.to_string(),
            e.sill.to_string(),
            e.range.to_string(),
            e.selected_features.to_string(),
            e.ac_warning.to_string(),
        ])
        .map_err(|err| csv_err(path, 0, err))?;
    }
    w.flush()?;
    Ok(())
}

/// Prediction artifact manifest: which times the `[n, H, W]` grid covers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub grid: GridSpec,
    pub times: Vec<usize>,
    pub method: String,
    pub values_file: String,
}

pub fn write_predictions(
    dir: &Path,
    grid: &GridSpec,
    times: &[usize],
    values: &Tensor,
    method: &str,
) -> Result<PathBuf, IoError> {
    fs::create_dir_all(dir)?;
    let values_file = "predictions.latg";
    write_latg(&dir.join(values_file), values)?;
    write_json(
        &dir.join("predictions.json"),
        &PredictionManifest {
            grid: grid.clone(),
            times: times.to_vec(),
            method: method.into(),
            values_file: values_file.into(),
        },
    )?;
    Ok(dir.join(values_file))
}

pub fn read_predictions(dir: &Path) -> Result<(PredictionManifest, Tensor), IoError> {
    let manifest: PredictionManifest = read_json(&dir.join("predictions.json"))?;
    let values = read_latg(&dir.join(&manifest.values_file))?;
    Ok((manifest, values))
}

/// Writes predictions as a flat CSV for inspection.
pub fn write_predictions_csv(
    path: &Path,
    times: &[usize],
    values: &Tensor,
) -> Result<(), IoError> {
    let (h, w) = (values.shape()[1], values.shape()[2]);
    let mut out = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e))?;
    out.write_record(["time_index", "row", "col", "value"])
        .map_err(|e| csv_err(path, 0, e))?;
    for (wi, &t) in times.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                out.write_record(&[
                    t.to_string(),
                    r.to_string(),
                    c.to_string(),
                    values.data()[(wi * h + r) * w + c].to_string(),
                ])
                .map_err(|e| csv_err(path, 0, e))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-command provenance record; every artifact-producing command writes one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Labeled cells of a label grid as a sorted set (for splitting).
pub fn labeled_cell_set(labels: &LabelGrid) -> BTreeSet<(usize, usize)> {
    labels.labeled_cells().into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PrimitiveKind;
    use tempfile::tempdir;

    #[test]
    fn latg_round_trip_preserves_shape_and_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.latg");
        let t = Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, 3.125, f64::MIN_POSITIVE, 9.9]).unwrap();
        write_latg(&path, &t).unwrap();
        let back = read_latg(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.iter().zip(t.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn latg_rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.latg");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(read_latg(&path), Err(IoError::Format { .. })));
    }

    #[test]
    fn sensors_csv_round_trip_and_parse_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sensors.csv");
        let readings = vec![
            SensorReading {
                sensor_id: "a".into(),
                easting: 100.5,
                northing: 200.25,
                time_index: 3,
                value: -7.75,
            },
            SensorReading {
                sensor_id: "b".into(),
                easting: 0.0,
                northing: 1.0,
                time_index: 0,
                value: 12.0,
            },
        ];
        write_sensors_csv(&path, &readings).unwrap();
        assert_eq!(read_sensors_csv(&path).unwrap(), readings);

        let bad = dir.path().join("bad.csv");
        std::fs::write(
            &bad,
            "sensor_id,easting_m,northing_m,time_index,value\na,1.0,2.0,zero,3.0\n",
        )
        .unwrap();
        match read_sensors_csv(&bad) {
            Err(IoError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("time_index"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn primitives_json_parses_kind_and_coords() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("prims.json");
        std::fs::write(
            &path,
            r#"[{"kind":"polyline","coords":[[0.0,0.0],[10.0,0.0]],"attribute":1.0},
                {"kind":"point","coords":[[3.0,4.0]],"attribute":2.5}]"#,
        )
        .unwrap();
        let prims = read_primitives_json(&path).unwrap();
        assert_eq!(prims.len(), 2);
        assert_eq!(prims[0].kind, PrimitiveKind::Polyline);
        assert_eq!(prims[1].coords[0], (3.0, 4.0));
    }

    #[test]
    fn checkpoint_round_trip_restores_everything() {
        let dir = tempdir().unwrap();
        let mut cfg = ModelConfig::new(6);
        cfg.latent_dim = 4;
        cfg.hidden = 3;
        cfg.kernels = vec![1, 3];
        let mut model = Model::new(cfg, 99).unwrap();
        model.prior_train_cells.insert((2, 5));
        model.prior_train_cells.insert((0, 1));
        model.scaler.mean = Tensor::from_vec(&[6], vec![0.1; 6]).unwrap();
        save_checkpoint(dir.path(), &model).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.prior_train_cells, model.prior_train_cells);
        assert_eq!(back.scaler.mean.data(), model.scaler.mean.data());
        for ((na, ta), (nb, tb)) in back.params().iter().zip(model.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
    }

    #[test]
    fn scene_dir_round_trip() {
        use crate::synthetic::{generate_scene, SceneConfig, SensorPlacement};
        let dir = tempdir().unwrap();
        let scene = generate_scene(&SceneConfig {
            height: 6,
            width: 6,
            time_steps: 5,
            dynamic_features: 2,
            static_features: 2,
            n_relevant: 2,
            n_sensors: 8,
            sensor_placement: SensorPlacement::Uniform,
            noise_std: 0.1,
            spatial_corr_length: 1.0,
            temporal_ar: 0.3,
            seed: 5,
            cell_size: 100.0,
        })
        .unwrap();
        let splits = crate::grid::split_locations(
            &labeled_cell_set(&scene.labels),
            &scene.features.spec,
            1,
        )
        .unwrap();
        write_scene_dir(dir.path(), &scene, &splits).unwrap();
        let back = read_scene_dir(dir.path()).unwrap();
        assert_eq!(back.features.dynamic.data(), scene.features.dynamic.data());
        assert_eq!(back.truth.unwrap().data(), scene.truth.data());
        assert_eq!(back.splits.unwrap(), splits);
        assert!(back.rejected_readings.is_empty());
        assert_eq!(back.labels.mask, scene.labels.mask);
    }
}
