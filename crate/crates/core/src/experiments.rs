//! Experiment commands: data generation, training, inference, evaluation,
//! cross-validation, zero-shot transfer, ablations and parameter counts.
//!
//! Every command writes its reports into an output directory together with
//! a JSON manifest naming inputs and outputs by SHA-256 content hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convnet::{count_parameters_for, load_checkpoint, save_checkpoint, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::inference::{infer, InferenceConfig, Strategy};
use crate::metrics::{signed_error_map, write_csv, MetricRow};
use crate::optim::AdamState;
use crate::patches::{DomainImage, NormStats, SamplerConfig};
use crate::raster::{read_ascii_grid, write_ascii_grid, write_pgm, Raster};
use crate::synthetic::{build_domain, make_splits, Rating, SplitSpec, TerrainPreset, NODATA};
use crate::tensor::Tensor;
use crate::training::{cross_validate, evaluate, fit, zero_shot_eval, Datasets, EpochRecord};

pub const DATA_MANIFEST: &str = "manifest.json";
pub const RUN_MANIFEST: &str = "run.json";
pub const CHECKPOINT: &str = "model.ftck";
pub const NORM_STATS: &str = "norm.json";
pub const HISTORY: &str = "history.csv";

const FIDELITY_NOTE: &str = "synthetic valley with a flat per-column water surface above the channel bed; \
no momentum, roughness or unsteady effects";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub preset: String,
    pub splits: SplitSpec,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            rows: 256,
            cols: 512,
            preset: "source".into(),
            splits: SplitSpec::bey(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub domain: DomainSpec,
    pub train: crate::training::TrainConfig,
    /// Epoch cap per cross-validation fold.
    pub xval_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: 256x512 domain, patch 64, depth 3, width 8 and
    /// 200 patches per image, capped at 24 epochs (about 20 min on one core).
    pub fn desk() -> Self {
        let patch = 64;
        Self {
            run_id: "desk".into(),
            domain: DomainSpec::default(),
            train: crate::training::TrainConfig {
                model: UNetConfig::new(3, 8),
                max_epochs: DESK_EPOCHS,
                patience: 75,
                lr: DESK_LR,
                sampler: SamplerConfig {
                    patch_size: patch,
                    patches_per_image: 200,
                    ..Default::default()
                },
                validation: InferenceConfig::new(Strategy::CenterCrop, patch),
                ..Default::default()
            },
            xval_epochs: DESK_EPOCHS,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Learning rate of the desk preset.
pub const DESK_LR: f64 = 1e-3;
pub const DESK_EPOCHS: usize = 24;

/// Command-line overrides; set fields win over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub patch_size: Option<usize>,
    pub patches_per_image: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub strategy: Option<Strategy>,
    pub target_norm: Option<bool>,
    pub run_id: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        if let Some(s) = self.seed {
            t.seed = s;
            t.sampler.seed = s;
        }
        if let Some(d) = self.depth {
            t.model.depth = d;
        }
        if let Some(w) = self.width {
            t.model.width = w;
        }
        if let Some(p) = self.patch_size {
            t.sampler.patch_size = p;
            t.validation.patch_size = p;
        }
        if let Some(n) = self.patches_per_image {
            t.sampler.patches_per_image = n;
        }
        if let Some(e) = self.max_epochs {
            t.max_epochs = e;
        }
        if let Some(p) = self.patience {
            t.patience = p;
        }
        if let Some(lr) = self.lr {
            t.lr = lr;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(s) = self.strategy {
            t.validation.strategy = s;
        }
        if let Some(n) = self.target_norm {
            t.target_norm = n;
        }
        if let Some(id) = &self.run_id {
            cfg.run_id = id.clone();
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Hashes the named files inside `dir`.
fn hash_outputs(dir: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    names.iter().map(|n| Ok((n.clone(), hash_file(dir.join(n))?))).collect()
}

pub fn target_file(q: f64) -> String {
    format!("water_q{q}.asc")
}

pub fn mask_file(q: f64) -> String {
    format!("mask_q{q}.asc")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub preset: TerrainPreset,
    pub rating: Rating,
    pub channel: Vec<(usize, usize)>,
    pub discharges: Vec<f64>,
    pub splits: SplitSpec,
    pub fidelity: String,
    pub files: BTreeMap<String, String>,
}

/// Generates a synthetic domain, its water levels for every discharge and
/// the matching masks. Splits are validated before anything is written.
pub fn cmd_gen(spec: &DomainSpec, out: &Path) -> Result<DataManifest> {
    let grid = spec.splits.grid();
    let splits = make_splits(&grid, &spec.splits)?;
    let preset = TerrainPreset::by_name(&spec.preset)?;
    let q_max = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let domain = build_domain(spec.seed, spec.rows, spec.cols, &preset, q_max)?;
    create_dir(out)?;

    let mut names = vec!["dem.asc".to_string()];
    write_ascii_grid(&domain.dem, out.join("dem.asc"))?;
    for &q in &grid {
        let level = domain.simulate_water_level(q)?;
        let mask: Vec<f32> = level.values().iter().map(|&v| if v == NODATA { 0.0 } else { 1.0 }).collect();
        write_ascii_grid(&level, out.join(target_file(q)))?;
        write_ascii_grid(&level.with_values(mask)?, out.join(mask_file(q)))?;
        names.push(target_file(q));
        names.push(mask_file(q));
    }
    let manifest = DataManifest {
        seed: spec.seed,
        rows: spec.rows,
        cols: spec.cols,
        preset,
        rating: domain.rating,
        channel: domain.channel_cells.clone(),
        discharges: grid,
        splits,
        fidelity: FIDELITY_NOTE.into(),
        files: hash_outputs(out, &names)?,
    };
    write_json(&out.join(DATA_MANIFEST), &manifest)?;
    info!("generated {} discharges into {}", manifest.discharges.len(), out.display());
    Ok(manifest)
}

/// A generated data directory, loaded and checked against its manifest.
pub struct LoadedData {
    pub manifest: DataManifest,
    pub manifest_hash: String,
    pub dem: Raster,
    pub datasets: Datasets,
}

impl LoadedData {
    pub fn image(&self, q: f64) -> Result<DomainImage> {
        self.datasets
            .train
            .iter()
            .chain(&self.datasets.val)
            .chain(&self.datasets.test)
            .find(|i| i.discharge() as f64 == q)
            .cloned()
            .ok_or_else(|| Error::Config(format!("discharge {q} is not part of the data set")))
    }

    pub fn all_images(&self) -> Vec<DomainImage> {
        let mut all: Vec<DomainImage> = self
            .datasets
            .train
            .iter()
            .chain(&self.datasets.val)
            .chain(&self.datasets.test)
            .cloned()
            .collect();
        all.sort_by(|a, b| a.discharge().total_cmp(&b.discharge()));
        all
    }
}

pub fn load_data(dir: &Path) -> Result<LoadedData> {
    let manifest_path = dir.join(DATA_MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::Config(format!(
            "data directory {} has no {DATA_MANIFEST}; expected {DATA_MANIFEST}, dem.asc and water_q*.asc from `floodtile gen`",
            dir.display()
        )));
    }
    let manifest: DataManifest = read_json(&manifest_path)?;
    for (name, want) in &manifest.files {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::Config(format!("missing data file {}", path.display())));
        }
        if &hash_file(&path)? != want {
            return Err(Error::Config(format!("{} does not match its manifest hash", path.display())));
        }
    }
    let dem = read_ascii_grid(dir.join("dem.asc"))?;
    let load = |qs: &[f64]| -> Result<Vec<DomainImage>> {
        qs.iter()
            .map(|&q| DomainImage::new(&dem, q as f32, &read_ascii_grid(dir.join(target_file(q)))?))
            .collect()
    };
    let datasets = Datasets {
        train: load(&manifest.splits.train)?,
        val: load(&manifest.splits.val)?,
        test: load(&manifest.splits.test)?,
    };
    Ok(LoadedData {
        manifest_hash: hash_file(&manifest_path)?,
        manifest,
        dem,
        datasets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub parameter_count: usize,
    pub splits: SplitSpec,
    pub norm: NormStats,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub struct TrainSummary {
    pub manifest: RunManifest,
    pub history: Vec<EpochRecord>,
    pub test_rows: Vec<MetricRow>,
    pub train_seconds: f64,
}

fn data_inputs(data: &LoadedData) -> BTreeMap<String, String> {
    let mut inputs: BTreeMap<String, String> =
        data.manifest.files.iter().map(|(k, v)| (format!("data/{k}"), v.clone())).collect();
    inputs.insert(format!("data/{DATA_MANIFEST}"), data.manifest_hash.clone());
    inputs
}

/// Rows for the pooled report followed by one row per image.
fn metric_rows(run_id: &str, split: &str, strategy: Strategy, ev: &crate::training::Evaluation, qs: &[f32]) -> Vec<MetricRow> {
    let mut rows = vec![ev.pooled.row(run_id, split, strategy.name())];
    for (r, q) in ev.per_image.iter().zip(qs) {
        rows.push(r.row(run_id, &format!("{split}/q{q}"), strategy.name()));
    }
    rows
}

/// Trains on a generated data directory and writes checkpoint, history,
/// normalization statistics, test metrics and the run manifest.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.train.validate()?;
    let data = load_data(data_dir)?;
    create_dir(out)?;
    let started = Instant::now();
    let mut fitted = fit(&cfg.train, &data.datasets, Some(&out.join(HISTORY)))?;
    let train_seconds = started.elapsed().as_secs_f64();
    info!("trained {} epochs in {train_seconds:.1} s", fitted.history.len());

    save_checkpoint(out.join(CHECKPOINT), &fitted.model, Some(&fitted.optimizer))?;
    write_json(&out.join(NORM_STATS), &fitted.norm)?;
    let ev = evaluate(&mut fitted.model, &data.datasets.test, &fitted.norm, &cfg.train.validation)?;
    let qs: Vec<f32> = data.datasets.test.iter().map(|i| i.discharge()).collect();
    let test_rows = metric_rows(&cfg.run_id, "test", cfg.train.validation.strategy, &ev, &qs);
    write_csv(out.join("metrics.csv"), &test_rows)?;

    let outputs = [CHECKPOINT, NORM_STATS, HISTORY, "metrics.csv"].map(String::from);
    let manifest = RunManifest {
        command: "train".into(),
        run_id: cfg.run_id.clone(),
        config: cfg.clone(),
        parameter_count: count_parameters_for(&cfg.train.model),
        splits: data.manifest.splits.clone(),
        norm: fitted.norm.clone(),
        best_epoch: fitted.best_epoch,
        epochs_run: fitted.history.len(),
        inputs: data_inputs(&data),
        outputs: hash_outputs(out, &outputs)?,
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    Ok(TrainSummary {
        manifest,
        history: fitted.history,
        test_rows,
        train_seconds,
    })
}

/// A trained run: model, optimizer state and normalization statistics.
pub struct LoadedRun {
    pub model: UNet<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub norm: NormStats,
    pub inputs: BTreeMap<String, String>,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let ck = run_dir.join(CHECKPOINT);
    let norm_path = run_dir.join(NORM_STATS);
    for p in [&ck, &norm_path] {
        if !p.is_file() {
            return Err(Error::Config(format!(
                "run directory {} lacks {}; expected {CHECKPOINT} and {NORM_STATS} from `floodtile train`",
                run_dir.display(),
                p.file_name().unwrap_or_default().to_string_lossy()
            )));
        }
    }
    let (mut model, optimizer) = load_checkpoint(&ck)?;
    model.set_mode(crate::convnet::Mode::Evaluation);
    let norm = read_json(&norm_path)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(format!("run/{CHECKPOINT}"), hash_file(&ck)?);
    inputs.insert(format!("run/{NORM_STATS}"), hash_file(&norm_path)?);
    Ok(LoadedRun {
        model,
        optimizer,
        norm,
        inputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: String,
    pub discharge: f64,
    pub tiles: usize,
    pub seconds: f64,
}

fn prediction_raster(template: &Raster, pred: &[f32], mask: &[bool]) -> Result<Raster> {
    template.with_values(pred.iter().zip(mask).map(|(&p, &m)| if m { p } else { NODATA }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandManifest {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn finish(out: &Path, command: &str, inputs: BTreeMap<String, String>, outputs: &[String]) -> Result<CommandManifest> {
    let m = CommandManifest {
        command: command.into(),
        inputs,
        outputs: hash_outputs(out, outputs)?,
    };
    write_json(&out.join(format!("{command}.json")), &m)?;
    Ok(m)
}

/// Predicts one discharge with each requested strategy; writes one grid per
/// strategy and a timing CSV. Timings cover the stitching loop only.
pub fn cmd_infer(
    run_dir: &Path,
    data_dir: &Path,
    q: f64,
    strategies: &[Strategy],
    tile: &InferenceConfig,
    out: &Path,
) -> Result<Vec<TimingRow>> {
    let run = load_run(run_dir)?;
    let data = load_data(data_dir)?;
    let img = data.image(q)?;
    let mut input = img.input.clone();
    run.norm.normalize_input(&mut input);
    create_dir(out)?;
    let mut timings = Vec::new();
    let mut names = Vec::new();
    for &s in strategies {
        let cfg = InferenceConfig {
            strategy: s,
            ..tile.clone()
        };
        let plan = crate::inference::TilePlan::for_config(img.rows(), img.cols(), &cfg)?;
        let started = Instant::now();
        let raw = infer(&run.model, &input, &cfg)?;
        let seconds = started.elapsed().as_secs_f64();
        let mut pred = raw.into_data();
        run.norm.denormalize_target(&mut pred);
        let name = format!("pred_{}_q{q}.asc", s.name());
        write_ascii_grid(&prediction_raster(&data.dem, &pred, &img.mask)?, out.join(&name))?;
        names.push(name);
        timings.push(TimingRow {
            strategy: s.name().into(),
            discharge: q,
            tiles: plan.origins.len(),
            seconds,
        });
    }
    write_csv(out.join("timing.csv"), &timings)?;
    let mut inputs = run.inputs;
    inputs.extend(data_inputs(&data));
    names.push("timing.csv".into());
    finish(out, "infer", inputs, &names)?;
    Ok(timings)
}

fn split_images<'a>(data: &'a LoadedData, split: &str) -> Result<&'a [DomainImage]> {
    match split {
        "train" => Ok(&data.datasets.train),
        "val" => Ok(&data.datasets.val),
        "test" => Ok(&data.datasets.test),
        other => Err(Error::Config(format!("unknown split {other:?}; use train, val or test"))),
    }
}

/// Pooled and per-image metrics for one split plus signed error maps
/// (prediction minus truth, |error| < 0.01 m shown as zero).
pub fn cmd_eval(run_dir: &Path, data_dir: &Path, split: &str, tile: &InferenceConfig, run_id: &str, out: &Path) -> Result<Vec<MetricRow>> {
    let mut run = load_run(run_dir)?;
    let data = load_data(data_dir)?;
    let images = split_images(&data, split)?;
    if images.is_empty() {
        return Err(Error::Config(format!("split {split} has no images")));
    }
    let ev = evaluate(&mut run.model, images, &run.norm, tile)?;
    create_dir(out)?;
    let qs: Vec<f32> = images.iter().map(|i| i.discharge()).collect();
    let rows = metric_rows(run_id, split, tile.strategy, &ev, &qs);
    let mut names = vec!["eval_metrics.csv".to_string()];
    write_csv(out.join(&names[0]), &rows)?;
    for (img, pred) in images.iter().zip(&ev.predictions) {
        let err = signed_error_map(pred, &img.target, &img.mask)?;
        let grid_name = format!("error_q{}.asc", img.discharge());
        let pgm_name = format!("error_q{}.pgm", img.discharge());
        write_ascii_grid(&data.dem.with_values(err.clone())?, out.join(&grid_name))?;
        let span = err.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(ERROR_MAP_SPAN_FLOOR);
        let grid = Tensor::from_vec(&[img.rows(), img.cols()], err)?;
        write_pgm(&grid, out.join(&pgm_name), -span, span)?;
        names.push(grid_name);
        names.push(pgm_name);
    }
    let mut inputs = run.inputs;
    inputs.extend(data_inputs(&data));
    finish(out, "eval", inputs, &names)?;
    Ok(rows)
}

/// Smallest half-range of an error-map image, m; zero error is mid-gray.
pub const ERROR_MAP_SPAN_FLOOR: f32 = 0.01;

/// Leave-one-discharge-out over every discharge of the data set.
pub fn cmd_xval(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<Vec<crate::training::FoldRow>> {
    let data = load_data(data_dir)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.max_epochs = cfg.xval_epochs;
    let rows = cross_validate(&train_cfg, &data.all_images())?;
    create_dir(out)?;
    write_csv(out.join("xval.csv"), &rows)?;
    finish(out, "xval", data_inputs(&data), &["xval.csv".to_string()])?;
    Ok(rows)
}

/// Applies a trained model to the test split of another domain.
pub fn cmd_zeroshot(run_dir: &Path, foreign_dir: &Path, tile: &InferenceConfig, run_id: &str, out: &Path) -> Result<Vec<MetricRow>> {
    let mut run = load_run(run_dir)?;
    let data = load_data(foreign_dir)?;
    let images = &data.datasets.test;
    let ev = zero_shot_eval(&mut run.model, Some(&run.norm), images, tile)?;
    let qs: Vec<f32> = images.iter().map(|i| i.discharge()).collect();
    let rows = metric_rows(run_id, "zeroshot", tile.strategy, &ev, &qs);
    create_dir(out)?;
    write_csv(out.join("zeroshot.csv"), &rows)?;
    let mut inputs = run.inputs;
    inputs.extend(data_inputs(&data));
    finish(out, "zeroshot", inputs, &["zeroshot.csv".to_string()])?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Depth,
    Width,
    PatchSize,
    PatchAmount,
    TargetNorm,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "depth" => Self::Depth,
            "width" => Self::Width,
            "patch-size" => Self::PatchSize,
            "patch-amount" => Self::PatchAmount,
            "target-norm" => Self::TargetNorm,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; use depth, width, patch-size, patch-amount or target-norm"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: String,
    pub value: String,
    pub parameters: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_rmse_m: f64,
    pub test_rmse_m: f64,
    pub test_nse: f64,
    pub train_seconds: f64,
    pub infer_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub value: String,
    pub update_step: usize,
    pub val_rmse_m: f64,
}

/// Variant of `base` for one grid value. Target-norm values are 0/1.
pub fn ablation_variant(base: &ExperimentConfig, kind: AblationKind, value: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    let t = &mut cfg.train;
    match kind {
        AblationKind::Depth => t.model.depth = value,
        AblationKind::Width => t.model.width = value,
        AblationKind::PatchSize => {
            t.sampler.patch_size = value;
            t.validation.patch_size = value;
        }
        AblationKind::PatchAmount => t.sampler.patches_per_image = value,
        AblationKind::TargetNorm => t.target_norm = value != 0,
    }
    cfg
}

/// One training run per grid value on shared data and seed.
pub fn cmd_ablate(base: &ExperimentConfig, kind: AblationKind, grid: &[usize], data_dir: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let variants: Vec<ExperimentConfig> = grid.iter().map(|&v| ablation_variant(base, kind, v)).collect();
    for v in &variants {
        v.train.validate()?;
    }
    let data = load_data(data_dir)?;
    create_dir(out)?;
    let label = |v: usize| match kind {
        AblationKind::TargetNorm => if v != 0 { "on" } else { "off" }.to_string(),
        _ => v.to_string(),
    };
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (&v, cfg) in grid.iter().zip(&variants) {
        info!("ablation {kind:?} = {}", label(v));
        let started = Instant::now();
        let mut fitted = fit(&cfg.train, &data.datasets, None)?;
        let train_seconds = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let ev = evaluate(&mut fitted.model, &data.datasets.test, &fitted.norm, &cfg.train.validation)?;
        let infer_seconds = started.elapsed().as_secs_f64() / data.datasets.test.len() as f64;
        let steps = cfg.train.steps_per_epoch(data.datasets.train.len());
        curves.extend(fitted.history.iter().map(|h| CurveRow {
            value: label(v),
            update_step: h.epoch * steps,
            val_rmse_m: h.val_rmse,
        }));
        rows.push(AblationRow {
            kind: format!("{kind:?}").to_lowercase(),
            value: label(v),
            parameters: count_parameters_for(&cfg.train.model),
            epochs: fitted.history.len(),
            best_epoch: fitted.best_epoch,
            val_rmse_m: fitted.best_val_rmse,
            test_rmse_m: ev.pooled.rmse,
            test_nse: ev.pooled.nse,
            train_seconds,
            infer_seconds,
        });
    }
    write_csv(out.join("ablation.csv"), &rows)?;
    write_csv(out.join("ablation_curves.csv"), &curves)?;
    finish(out, "ablate", data_inputs(&data), &["ablation.csv".to_string(), "ablation_curves.csv".to_string()])?;
    Ok(rows)
}

/// Parameter count and its value in millions rounded to three decimals.
pub fn cmd_count_params(depth: usize, width: usize) -> Result<(usize, String)> {
    let cfg = UNetConfig::new(depth, width);
    cfg.validate()?;
    let n = count_parameters_for(&cfg);
    Ok((n, format!("{:.3}M", n as f64 / 1e6)))
}
