//! Experiment harness: grids over training/testing set sizes, repeated
//! trials, predictor invocation and per-epoch metric traces, plus the
//! reproducibility statistics computed from them.
//!
//! Every cell `(model, ntrain index, ntest index, trial)` is an independent
//! unit of work with its own seed, so cells can run in any order or in
//! parallel and still reproduce bit for bit.
//!
//! Training and testing subsets are nested along their axes: for a given
//! trial, the subset for axis index `k` is a prefix of one seeded
//! permutation and therefore contains the subset for `k − 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{GridAxis, Trace};
use crate::mask::{self, DatasetSplit, Mask, SoftMask};
use crate::metrics::{self, BatchMean, MetricConfig, MetricIndex, MetricRecord};
use crate::seed;

mod store;

pub use store::{read_sweep_dir, write_sweep_dir, SWEEP_MANIFEST, TRACE_CSV_HEADER};

pub const REQUIRED_PLACEHOLDERS: [&str; 5] = ["{train_manifest}", "{test_manifest}", "{out_dir}", "{seed}", "{epochs}"];

/// Corruption applied by the built-in synthetic predictor. The noise scale at
/// epoch `ep` is `flip_rate · exp(−epoch_decay · ep)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub flip_rate: f64,
    #[serde(default)]
    pub boundary_jitter: f64,
    #[serde(default)]
    pub epoch_decay: f64,
}

impl Degradation {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(Error::invalid(format!("flip_rate {} outside [0, 1]", self.flip_rate)));
        }
        if !(self.boundary_jitter >= 0.0 && self.epoch_decay >= 0.0) {
            return Err(Error::invalid("boundary_jitter and epoch_decay must be nonnegative"));
        }
        Ok(())
    }
}

fn default_timeout() -> f64 {
    3600.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorKind {
    Synthetic(Degradation),
    External {
        command: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: PredictorKind,
    #[serde(default)]
    pub trainable: bool,
}

impl PredictorSpec {
    pub fn synthetic(name: impl Into<String>, deg: Degradation) -> Self {
        PredictorSpec {
            name: name.into(),
            kind: PredictorKind::Synthetic(deg),
            trainable: false,
        }
    }

    pub fn external(name: impl Into<String>, command: impl Into<String>, timeout_secs: f64) -> Self {
        PredictorSpec {
            name: name.into(),
            kind: PredictorKind::External {
                command: command.into(),
                timeout_secs,
            },
            trainable: true,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad_name = self.name.is_empty() || self.name == "." || self.name == ".." || self.name.contains(['/', '\\']);
        if bad_name {
            return Err(Error::invalid(format!(
                "model name {:?} is not a valid directory name",
                self.name
            )));
        }
        match &self.kind {
            PredictorKind::Synthetic(d) => d.validate(),
            PredictorKind::External { command, timeout_secs } => {
                if command.trim().is_empty() {
                    return Err(Error::invalid(format!("model {} has an empty command", self.name)));
                }
                let missing: Vec<&str> = REQUIRED_PLACEHOLDERS
                    .iter()
                    .copied()
                    .filter(|p| !command.contains(p))
                    .collect();
                if !missing.is_empty() {
                    return Err(Error::invalid(format!(
                        "model {} command lacks placeholders {}",
                        self.name,
                        missing.join(" ")
                    )));
                }
                if timeout_secs.is_nan() || *timeout_secs <= 0.0 {
                    return Err(Error::invalid(format!("model {} timeout must be positive", self.name)));
                }
                Ok(())
            }
        }
    }
}

fn default_trials() -> usize {
    8
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub models: Vec<PredictorSpec>,
    pub ntrain_axis: GridAxis,
    pub ntest_axis: GridAxis,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::invalid("sweep needs at least one model"));
        }
        if self.trials == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("trials, epochs and batch_size must be at least 1"));
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            m.validate()?;
            if !names.insert(&m.name) {
                return Err(Error::invalid(format!("duplicate model name {}", m.name)));
            }
        }
        self.metrics.validate()
    }

    pub fn cell_count(&self) -> usize {
        self.models.len() * self.ntrain_axis.len() * self.ntest_axis.len() * self.trials
    }

    /// Cell keys in canonical order: model, ntrain index, ntest index, trial.
    pub fn cell_keys(&self) -> Vec<CellKey> {
        let mut keys = Vec::with_capacity(self.cell_count());
        for m in &self.models {
            for ntr in 1..=self.ntrain_axis.len() {
                for nte in 1..=self.ntest_axis.len() {
                    for trial in 1..=self.trials {
                        keys.push(CellKey {
                            model: m.name.clone(),
                            ntrain_idx: ntr,
                            ntest_idx: nte,
                            trial,
                        });
                    }
                }
            }
        }
        keys
    }

    /// Seed of one cell, stable across runs, platforms and execution order.
    pub fn cell_seed(&self, key: &CellKey) -> u64 {
        seed::combine(&[
            self.seed,
            seed::fnv1a(key.model.as_bytes()),
            key.ntrain_idx as u64,
            key.ntest_idx as u64,
            key.trial as u64,
        ])
    }
}

/// Ground-truth masks with their train/test/validation split.
#[derive(Clone, Debug)]
pub struct Dataset {
    split: DatasetSplit,
    masks: BTreeMap<String, Mask>,
}

impl Dataset {
    pub fn new(masks: Vec<Mask>, split: DatasetSplit) -> Result<Self> {
        let masks: BTreeMap<String, Mask> = masks.into_iter().map(|m| (m.source_id().to_string(), m)).collect();
        let missing: Vec<String> = split
            .train
            .iter()
            .chain(&split.test)
            .chain(&split.validation)
            .filter(|id| !masks.contains_key(*id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnmatchedIds(missing));
        }
        Ok(Dataset { split, masks })
    }

    /// Partitions `masks` by source id.
    pub fn partitioned(masks: Vec<Mask>, ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        let ids: Vec<String> = masks.iter().map(|m| m.source_id().to_string()).collect();
        let split = mask::partition(&ids, ratios, seed)?;
        Dataset::new(masks, split)
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn mask(&self, id: &str) -> Option<&Mask> {
        self.masks.get(id)
    }

    pub fn masks(&self) -> impl Iterator<Item = &Mask> {
        self.masks.values()
    }
}

/// Random filled ellipses, one per id `syn_NNNNN`, for desk-scale sweeps.
pub fn synthetic_masks(count: usize, width: usize, height: usize, seed: u64) -> Vec<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (w, h) = (width as f64, height as f64);
            let cy = rng.gen_range(0.35..0.65) * h;
            let cx = rng.gen_range(0.35..0.65) * w;
            let ry = rng.gen_range(0.18..0.32) * h;
            let rx = rng.gen_range(0.18..0.32) * w;
            Mask::from_fn(width, height, |y, x| {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            })
            .with_source_id(format!("syn_{i:05}"))
        })
        .collect()
}

fn default_cutoff() -> u8 {
    mask::DEFAULT_CUTOFF
}
fn default_min_foreground() -> usize {
    mask::DEFAULT_MIN_FOREGROUND
}
fn default_scale() -> f64 {
    1.0
}
fn default_ratios() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

/// Where the ground-truth masks of a sweep come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A flat directory of mask rasters, filtered, resized and partitioned.
    Directory {
        path: PathBuf,
        #[serde(default = "default_cutoff")]
        cutoff: u8,
        #[serde(default = "default_min_foreground")]
        min_foreground: usize,
        #[serde(default = "default_scale")]
        scale: f64,
        #[serde(default = "default_ratios")]
        ratios: (f64, f64, f64),
        /// Existing split manifest; when absent the masks are partitioned with the sweep seed.
        #[serde(default)]
        split_manifest: Option<PathBuf>,
    },
    Synthetic {
        count: usize,
        width: usize,
        height: usize,
        #[serde(default = "default_ratios")]
        ratios: (f64, f64, f64),
    },
}

impl DataSource {
    /// Builds the dataset. Informative-mask filtering happens before resizing.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                count,
                width,
                height,
                ratios,
            } => Dataset::partitioned(synthetic_masks(*count, *width, *height, seed), *ratios, seed),
            DataSource::Directory {
                path,
                cutoff,
                min_foreground,
                scale,
                ratios,
                split_manifest,
            } => {
                let masks = mask::raster_files(path)?
                    .iter()
                    .map(|p| mask::load_mask(p, *cutoff))
                    .collect::<Result<Vec<_>>>()?;
                let masks = mask::filter_informative(masks, *min_foreground)
                    .iter()
                    .map(|m| mask::resize_mask(m, *scale))
                    .collect::<Result<Vec<_>>>()?;
                match split_manifest {
                    Some(p) => {
                        let text =
                            fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                        Dataset::new(masks, DatasetSplit::from_json(&text)?)
                    }
                    None => Dataset::partitioned(masks, *ratios, seed),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub ntrain_idx: usize,
    pub ntest_idx: usize,
    pub trial: usize,
}

impl CellKey {
    /// `results/<model>/<ntr>/<nte>/<trial>` relative to the sweep root.
    pub fn relative_dir(&self) -> PathBuf {
        PathBuf::from("results")
            .join(&self.model)
            .join(self.ntrain_idx.to_string())
            .join(self.ntest_idx.to_string())
            .join(self.trial.to_string())
    }
}

/// Batch-averaged indices at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPoint {
    pub epoch: usize,
    pub mean: BatchMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum CellFailure {
    #[error("predictor exited with code {code:?}: {stderr_tail}")]
    NonZeroExit { code: Option<i32>, stderr_tail: String },
    #[error("predictor exceeded the {seconds} s timeout")]
    Timeout { seconds: f64 },
    #[error("missing predictions for {}", ids.join(", "))]
    MissingPredictions { epoch: usize, ids: Vec<String> },
    #[error("unexpected predictions for {}", ids.join(", "))]
    ExtraPredictions { epoch: usize, ids: Vec<String> },
    #[error("could not run predictor: {message}")]
    Launch { message: String },
    #[error("evaluation failed: {message}")]
    Evaluation { message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellOutcome {
    Completed(Vec<EpochPoint>),
    Failed(CellFailure),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    pub ntrain_count: usize,
    pub ntest_count: usize,
    pub seed: u64,
    pub outcome: CellOutcome,
}

impl CellResult {
    pub fn points(&self) -> Option<&[EpochPoint]> {
        match &self.outcome {
            CellOutcome::Completed(p) => Some(p),
            CellOutcome::Failed(_) => None,
        }
    }

    /// Per-epoch trace of one index; epochs where it is undefined are skipped.
    pub fn trace(&self, index: MetricIndex) -> Option<Trace> {
        let points = self
            .points()?
            .iter()
            .filter_map(|p| p.mean.record.get(index).map(|v| (p.epoch as f64, v)))
            .collect();
        Trace::new(points).ok()
    }

    /// Value of `index` at the selected epoch.
    pub fn value(&self, index: MetricIndex, selection: EpochSelection) -> Option<f64> {
        let values = self.points()?.iter().filter_map(|p| p.mean.record.get(index));
        match selection {
            EpochSelection::Final => self.points()?.last()?.mean.record.get(index),
            EpochSelection::Best if index.higher_is_better() => values.reduce(f64::max),
            EpochSelection::Best => values.reduce(f64::min),
        }
    }
}

/// Which epoch of a trace represents a cell in aggregate tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EpochSelection {
    #[default]
    Final,
    /// Best value of each index over all epochs.
    Best,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub cells: Vec<CellResult>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tool_version: String,
}

impl SweepResult {
    pub fn completed(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.points().is_some())
    }

    pub fn failed(&self) -> impl Iterator<Item = (&CellKey, &CellFailure)> {
        self.cells.iter().filter_map(|c| match &c.outcome {
            CellOutcome::Failed(f) => Some((&c.key, f)),
            CellOutcome::Completed(_) => None,
        })
    }

    pub fn cell(&self, key: &CellKey) -> Option<&CellResult> {
        self.cells.iter().find(|c| &c.key == key)
    }

    /// Completed cells grouped by `(model, ntrain index, ntest index)`, trials in order.
    pub fn trial_groups(&self) -> BTreeMap<(String, usize, usize), Vec<&CellResult>> {
        let mut groups: BTreeMap<_, Vec<&CellResult>> = BTreeMap::new();
        for c in self.completed() {
            groups
                .entry((c.key.model.clone(), c.key.ntrain_idx, c.key.ntest_idx))
                .or_default()
                .push(c);
        }
        groups
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Scratch root for external predictors; required when any model is external.
    pub workdir: Option<PathBuf>,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn nested_order(ids: &[String], master: u64, role: &str, trial: usize) -> Vec<String> {
    let mut order = ids.to_vec();
    let s = seed::combine(&[master, seed::fnv1a(role.as_bytes()), trial as u64]);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    order
}

/// Training subset of `key`: a prefix of the trial's training permutation.
pub fn training_subset(cfg: &SweepConfig, split: &DatasetSplit, key: &CellKey) -> Result<Vec<String>> {
    let n = cfg.ntrain_axis.count_at(key.ntrain_idx)?;
    let mut order = nested_order(&split.train, cfg.seed, "train", key.trial);
    order.truncate(n);
    Ok(order)
}

/// Testing subset of `key`: a prefix of the trial's testing permutation.
pub fn testing_subset(cfg: &SweepConfig, split: &DatasetSplit, key: &CellKey) -> Result<Vec<String>> {
    let n = cfg.ntest_axis.count_at(key.ntest_idx)?;
    let mut order = nested_order(&split.test, cfg.seed, "test", key.trial);
    order.truncate(n);
    Ok(order)
}

/// Runs every cell of the grid. Predictor failures are recorded per cell
/// and never abort the sweep.
pub fn run_sweep(cfg: &SweepConfig, data: &Dataset, opts: &SweepOptions) -> Result<SweepResult> {
    cfg.validate()?;
    let split = data.split();
    let mut shortfalls = Vec::new();
    for (i, &n) in cfg.ntrain_axis.counts().iter().enumerate() {
        if n > split.train.len() {
            shortfalls.push(format!(
                "ntrain index {} needs {n} of {} training ids",
                i + 1,
                split.train.len()
            ));
        }
    }
    for (i, &n) in cfg.ntest_axis.counts().iter().enumerate() {
        if n > split.test.len() {
            shortfalls.push(format!(
                "ntest index {} needs {n} of {} testing ids",
                i + 1,
                split.test.len()
            ));
        }
    }
    if !shortfalls.is_empty() {
        return Err(Error::InsufficientData(shortfalls.join("; ")));
    }

    let has_external = cfg
        .models
        .iter()
        .any(|m| matches!(m.kind, PredictorKind::External { .. }));
    let mask_dir = match (&opts.workdir, has_external) {
        (None, true) => return Err(Error::invalid("external predictors need a working directory")),
        (Some(root), true) => {
            let dir = root.join("dataset");
            fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            for m in data.masks() {
                mask::save_mask(&dir.join(format!("{}.png", m.source_id())), m)?;
            }
            Some(dir)
        }
        _ => None,
    };

    let started_unix = unix_now();
    let keys = cfg.cell_keys();
    let job = |key: &CellKey| run_cell(cfg, data, key, opts, mask_dir.as_deref());
    let cells: Vec<CellResult> = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(|| keys.par_iter().map(job).collect::<Result<_>>())?,
        None => keys.par_iter().map(job).collect::<Result<_>>()?,
    };
    Ok(SweepResult {
        config: cfg.clone(),
        cells,
        started_unix,
        finished_unix: unix_now(),
        tool_version: crate::TOOL_VERSION.to_string(),
    })
}

fn run_cell(
    cfg: &SweepConfig,
    data: &Dataset,
    key: &CellKey,
    opts: &SweepOptions,
    mask_dir: Option<&Path>,
) -> Result<CellResult> {
    let spec = cfg
        .models
        .iter()
        .find(|m| m.name == key.model)
        .expect("cell keys come from the configured models");
    let cell_seed = cfg.cell_seed(key);
    let train = training_subset(cfg, data.split(), key)?;
    let test = testing_subset(cfg, data.split(), key)?;
    let gts: Vec<&Mask> = test
        .iter()
        .map(|id| data.mask(id).expect("split ids are present in the dataset"))
        .collect();

    let outcome = match &spec.kind {
        PredictorKind::Synthetic(deg) => {
            let mut points = Vec::with_capacity(cfg.epochs);
            for epoch in 1..=cfg.epochs {
                let records: Vec<MetricRecord> = gts
                    .iter()
                    .enumerate()
                    .map(|(i, gt)| {
                        let s = seed::combine(&[cell_seed, epoch as u64, i as u64]);
                        let pr = synthetic_predict(gt, deg, epoch as f64, s);
                        metrics::evaluate_pair(gt, &pr, &cfg.metrics, gt.source_id())
                    })
                    .collect::<Result<_>>()?;
                points.push(EpochPoint {
                    epoch,
                    mean: batched_mean(&records, cfg.batch_size)?,
                });
            }
            CellOutcome::Completed(points)
        }
        PredictorKind::External { command, timeout_secs } => {
            let root = opts.workdir.as_ref().expect("checked before scheduling");
            let job = ExternalJob {
                workdir: root
                    .join("cells")
                    .join(key.relative_dir().strip_prefix("results").unwrap()),
                train_ids: &train,
                test_ids: &test,
                seed: cell_seed,
                epochs: cfg.epochs,
                mask_dir,
                timeout: Duration::from_secs_f64(*timeout_secs),
            };
            match run_external(command, &job) {
                Ok(epochs) => match evaluate_external(&epochs, &gts, cfg) {
                    Ok(points) => CellOutcome::Completed(points),
                    Err(e) => CellOutcome::Failed(CellFailure::Evaluation { message: e.to_string() }),
                },
                Err(f) => CellOutcome::Failed(f),
            }
        }
    };
    Ok(CellResult {
        key: key.clone(),
        ntrain_count: train.len(),
        ntest_count: test.len(),
        seed: cell_seed,
        outcome,
    })
}

/// Mean over consecutive batches of `batch_size` pairs, each batch averaged first.
pub fn batched_mean(records: &[MetricRecord], batch_size: usize) -> Result<BatchMean> {
    let batches = records
        .chunks(batch_size.max(1))
        .map(metrics::batch_mean)
        .collect::<Result<Vec<_>>>()?;
    let batch_records: Vec<MetricRecord> = batches.iter().map(|b| b.record.clone()).collect();
    let mut mean = metrics::batch_mean(&batch_records)?;
    mean.count = records.len();
    mean.hd_undefined = batches.iter().map(|b| b.hd_undefined).sum();
    Ok(mean)
}

fn evaluate_external(
    epochs: &[(usize, BTreeMap<String, SoftMask>)],
    gts: &[&Mask],
    cfg: &SweepConfig,
) -> Result<Vec<EpochPoint>> {
    epochs
        .iter()
        .map(|(epoch, preds)| {
            let records = gts
                .iter()
                .map(|gt| {
                    let pr = &preds[gt.source_id()];
                    metrics::evaluate_pair(gt, pr, &cfg.metrics, gt.source_id())
                        .map_err(|e| Error::invalid(format!("{}: {e}", gt.source_id())))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EpochPoint {
                epoch: *epoch,
                mean: batched_mean(&records, cfg.batch_size)?,
            })
        })
        .collect()
}

/// Corrupts `gt` with seeded boundary jitter and pixel flips whose strength
/// decays with `epoch`. With `flip_rate = 0` and no jitter the output is `gt`.
pub fn synthetic_predict(gt: &Mask, deg: &Degradation, epoch: f64, seed: u64) -> SoftMask {
    let decay = (-deg.epoch_decay * epoch).exp();
    let flip = (deg.flip_rate * decay).clamp(0.0, 1.0);
    let radius = (deg.boundary_jitter * decay).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = gt.clone();
    if radius > 0 {
        let grow = rng.gen_bool(0.5);
        for _ in 0..radius {
            out = morph_step(&out, grow);
        }
    }
    let mut values: Vec<f64> = out.data().iter().map(|&v| f64::from(v)).collect();
    if flip > 0.0 {
        for v in &mut values {
            if rng.gen::<f64>() < flip {
                *v = 1.0 - *v;
            }
        }
    }
    SoftMask::new(gt.width(), gt.height(), values).expect("values are 0 or 1")
}

/// One 4-connected dilation (`grow`) or erosion step.
fn morph_step(m: &Mask, grow: bool) -> Mask {
    let (w, h) = (m.width(), m.height());
    Mask::from_fn(w, h, |y, x| {
        let centre = m.get(y, x);
        let neighbours = [
            (y > 0).then(|| m.get(y - 1, x)),
            (y + 1 < h).then(|| m.get(y + 1, x)),
            (x > 0).then(|| m.get(y, x - 1)),
            (x + 1 < w).then(|| m.get(y, x + 1)),
        ];
        if grow {
            centre || neighbours.iter().flatten().any(|&v| v)
        } else {
            centre && neighbours.iter().flatten().all(|&v| v)
        }
    })
}

/// Inputs of one external predictor invocation.
#[derive(Clone, Debug)]
pub struct ExternalJob<'a> {
    pub workdir: PathBuf,
    pub train_ids: &'a [String],
    pub test_ids: &'a [String],
    pub seed: u64,
    pub epochs: usize,
    /// Substituted for the optional `{mask_dir}` placeholder.
    pub mask_dir: Option<&'a Path>,
    pub timeout: Duration,
}

/// Predictions of one epoch, keyed by test id.
pub type EpochPredictions = (usize, BTreeMap<String, SoftMask>);

/// Runs an external predictor and collects its predictions.
///
/// The command runs under `sh -c` inside `job.workdir` after placeholder
/// substitution. It writes one raster per test id, named `<id>.png` (or
/// `.pgm`), either directly into `{out_dir}` (taken as the final epoch) or
/// into `{out_dir}/epoch_<N>/` subdirectories, one per reported epoch.
pub fn run_external(command: &str, job: &ExternalJob<'_>) -> std::result::Result<Vec<EpochPredictions>, CellFailure> {
    let launch = |message: String| CellFailure::Launch { message };
    let out_dir = job.workdir.join("predictions");
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir).map_err(|e| launch(format!("clearing {}: {e}", out_dir.display())))?;
    }
    fs::create_dir_all(&out_dir).map_err(|e| launch(format!("creating {}: {e}", out_dir.display())))?;
    let train_manifest = job.workdir.join("train.json");
    let test_manifest = job.workdir.join("test.json");
    for (path, ids) in [(&train_manifest, job.train_ids), (&test_manifest, job.test_ids)] {
        let body = serde_json::to_string(ids).expect("id lists serialize");
        fs::write(path, body).map_err(|e| launch(format!("writing {}: {e}", path.display())))?;
    }

    let mut cmd = command
        .replace("{train_manifest}", &train_manifest.to_string_lossy())
        .replace("{test_manifest}", &test_manifest.to_string_lossy())
        .replace("{out_dir}", &out_dir.to_string_lossy())
        .replace("{seed}", &job.seed.to_string())
        .replace("{epochs}", &job.epochs.to_string());
    if let Some(dir) = job.mask_dir {
        cmd = cmd.replace("{mask_dir}", &dir.to_string_lossy());
    }

    let stdout_path = job.workdir.join("stdout.log");
    let stderr_path = job.workdir.join("stderr.log");
    let stdout = File::create(&stdout_path).map_err(|e| launch(e.to_string()))?;
    let stderr = File::create(&stderr_path).map_err(|e| launch(e.to_string()))?;
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .current_dir(&job.workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
        .map_err(|e| launch(format!("spawning sh: {e}")))?;

    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= job.timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(CellFailure::Timeout {
                    seconds: job.timeout.as_secs_f64(),
                });
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(launch(format!("waiting for predictor: {e}"))),
        }
    };
    if !status.success() {
        return Err(CellFailure::NonZeroExit {
            code: status.code(),
            stderr_tail: tail(&stderr_path, 2048),
        });
    }

    collect_predictions(&out_dir, job.test_ids, job.epochs)
}

fn tail(path: &Path, max: usize) -> String {
    let mut buf = Vec::new();
    if let Ok(mut f) = File::open(path) {
        let _ = f.read_to_end(&mut buf);
    }
    let start = buf.len().saturating_sub(max);
    String::from_utf8_lossy(&buf[start..]).trim().to_string()
}

fn collect_predictions(
    out_dir: &Path,
    test_ids: &[String],
    final_epoch: usize,
) -> std::result::Result<Vec<EpochPredictions>, CellFailure> {
    let io = |e: Error| CellFailure::Evaluation { message: e.to_string() };
    let mut epoch_dirs: Vec<(usize, PathBuf)> = Vec::new();
    let entries = fs::read_dir(out_dir).map_err(|e| io(Error::io("listing predictions", e)))?;
    for entry in entries.flatten() {
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|d| d.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            epoch_dirs.push((epoch, path));
        }
    }
    epoch_dirs.sort();
    if epoch_dirs.is_empty() {
        epoch_dirs.push((final_epoch, out_dir.to_path_buf()));
    }

    let wanted: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
    let mut out = Vec::with_capacity(epoch_dirs.len());
    for (epoch, dir) in epoch_dirs {
        let files = mask::raster_files(&dir).map_err(io)?;
        let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
        for f in files {
            found.insert(mask::file_stem(&f), f);
        }
        let missing: Vec<String> = wanted
            .iter()
            .filter(|id| !found.contains_key(**id))
            .map(|s| s.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CellFailure::MissingPredictions { epoch, ids: missing });
        }
        let extra: Vec<String> = found
            .keys()
            .filter(|id| !wanted.contains(id.as_str()))
            .cloned()
            .collect();
        if !extra.is_empty() {
            return Err(CellFailure::ExtraPredictions { epoch, ids: extra });
        }
        let preds = found
            .into_iter()
            .map(|(id, path)| mask::load_soft_mask(&path).map(|m| (id, m)))
            .collect::<Result<BTreeMap<_, _>>>()
            .map_err(io)?;
        out.push((epoch, preds));
    }
    Ok(out)
}

/// Five-number summary plus sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub stddev: f64,
    pub n: usize,
}

/// Quantile of sorted data by linear interpolation between closest ranks.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Sample standard deviation (`n − 1` denominator); 0 for a single value.
pub fn sample_stddev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

pub fn reproducibility_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Empty("box statistics of zero values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("box statistics need finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(BoxStats {
        min: sorted[0],
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        stddev: sample_stddev(values),
        n: values.len(),
    })
}

/// Across-trial standard deviation of `index` per `(model, ntr, nte)` group.
/// Groups with fewer than two defined values are skipped.
pub fn trial_stddevs(
    result: &SweepResult,
    index: MetricIndex,
    selection: EpochSelection,
) -> BTreeMap<(String, usize, usize), f64> {
    result
        .trial_groups()
        .into_iter()
        .filter_map(|(group, cells)| {
            let values: Vec<f64> = cells.iter().filter_map(|c| c.value(index, selection)).collect();
            (values.len() >= 2).then(|| (group, sample_stddev(&values)))
        })
        .collect()
}

/// Indices ordered by mean across-trial standard deviation, most sensitive
/// first; ties are broken by index name. Indices without any group of two or
/// more defined values are left out.
pub fn index_sensitivity_ranking(result: &SweepResult, selection: EpochSelection) -> Result<Vec<(MetricIndex, f64)>> {
    if result.config.trials < 2 {
        return Err(Error::InsufficientData(format!(
            "sensitivity ranking needs at least 2 trials, sweep has {}",
            result.config.trials
        )));
    }
    let mut ranking: Vec<(MetricIndex, f64)> = MetricIndex::ALL
        .iter()
        .filter_map(|&index| {
            let sds = trial_stddevs(result, index, selection);
            (!sds.is_empty()).then(|| (index, sds.values().sum::<f64>() / sds.len() as f64))
        })
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.name().cmp(b.0.name())));
    Ok(ranking)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::fit_exponential;

    fn identity_cfg() -> SweepConfig {
        SweepConfig {
            models: vec![PredictorSpec::synthetic(
                "identity",
                Degradation {
                    flip_rate: 0.0,
                    boundary_jitter: 0.0,
                    epoch_decay: 0.0,
                },
            )],
            ntrain_axis: GridAxis::new(vec![4]).unwrap(),
            ntest_axis: GridAxis::new(vec![3]).unwrap(),
            trials: 1,
            epochs: 5,
            batch_size: 2,
            seed: 1,
            metrics: MetricConfig::default(),
        }
    }

    fn dataset(n: usize) -> Dataset {
        Dataset::partitioned(synthetic_masks(n, 16, 16, 3), (0.6, 0.2, 0.2), 3).unwrap()
    }

    #[test]
    fn identity_predictor_gives_unit_dice() {
        let r = run_sweep(&identity_cfg(), &dataset(30), &SweepOptions::default()).unwrap();
        assert_eq!(r.cells.len(), 1);
        let trace = r.cells[0].trace(MetricIndex::Dice).unwrap();
        assert_eq!(trace.len(), 5);
        assert!(trace.points().iter().all(|&(_, v)| v == 1.0));
    }

    #[test]
    fn grid_cell_count() {
        let cfg = SweepConfig {
            ntrain_axis: GridAxis::new(vec![2, 4]).unwrap(),
            ntest_axis: GridAxis::new(vec![1, 3]).unwrap(),
            trials: 2,
            epochs: 2,
            ..identity_cfg()
        };
        let r = run_sweep(&cfg, &dataset(30), &SweepOptions::default()).unwrap();
        assert_eq!(r.cells.len(), 8);
        assert_eq!(r.completed().count(), 8);
    }

    #[test]
    fn preflight_lists_short_axes() {
        let cfg = SweepConfig {
            ntrain_axis: GridAxis::new(vec![2, 400]).unwrap(),
            ..identity_cfg()
        };
        let err = run_sweep(&cfg, &dataset(30), &SweepOptions::default()).unwrap_err();
        assert!(err.to_string().contains("ntrain index 2"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = identity_cfg();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = identity_cfg();
        cfg.models.push(cfg.models[0].clone());
        assert!(cfg.validate().is_err());
        let mut cfg = identity_cfg();
        cfg.models = vec![PredictorSpec::external("ext", "run {out_dir}", 1.0)];
        assert!(cfg.validate().unwrap_err().to_string().contains("{train_manifest}"));
        let mut cfg = identity_cfg();
        cfg.models[0].name = "a/b".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn subsets_are_nested() {
        let cfg = SweepConfig {
            ntrain_axis: GridAxis::new(vec![2, 5, 9, 12]).unwrap(),
            ntest_axis: GridAxis::new(vec![1, 2, 4]).unwrap(),
            trials: 3,
            ..identity_cfg()
        };
        let data = dataset(40);
        for trial in 1..=3 {
            for ntr in 2..=4 {
                let key = |i| CellKey {
                    model: "identity".into(),
                    ntrain_idx: i,
                    ntest_idx: 1,
                    trial,
                };
                let small = training_subset(&cfg, data.split(), &key(ntr - 1)).unwrap();
                let big = training_subset(&cfg, data.split(), &key(ntr)).unwrap();
                assert!(small.iter().all(|id| big.contains(id)));
            }
            for nte in 2..=3 {
                let key = |i| CellKey {
                    model: "identity".into(),
                    ntrain_idx: 1,
                    ntest_idx: i,
                    trial,
                };
                let small = testing_subset(&cfg, data.split(), &key(nte - 1)).unwrap();
                let big = testing_subset(&cfg, data.split(), &key(nte)).unwrap();
                assert!(small.iter().all(|id| big.contains(id)));
            }
        }
    }

    #[test]
    fn cell_seeds_are_distinct() {
        let cfg = identity_cfg();
        let k = |m: &str, a, b, t| CellKey {
            model: m.into(),
            ntrain_idx: a,
            ntest_idx: b,
            trial: t,
        };
        let seeds: BTreeSet<u64> = [
            k("x", 1, 1, 1),
            k("x", 1, 1, 2),
            k("x", 2, 1, 1),
            k("x", 1, 2, 1),
            k("y", 1, 1, 1),
        ]
        .iter()
        .map(|key| cfg.cell_seed(key))
        .collect();
        assert_eq!(seeds.len(), 5);
    }

    #[test]
    fn zero_flip_rate_is_identity() {
        let gt = Mask::from_fn(9, 7, |y, x| x > y);
        let deg = Degradation {
            flip_rate: 0.0,
            boundary_jitter: 0.0,
            epoch_decay: 0.3,
        };
        for e in 1..5 {
            assert_eq!(synthetic_predict(&gt, &deg, f64::from(e), 99), SoftMask::from(&gt));
        }
    }

    #[test]
    fn full_flip_inverts() {
        let gt = Mask::from_fn(8, 8, |_, x| x < 4);
        let deg = Degradation {
            flip_rate: 1.0,
            boundary_jitter: 0.0,
            epoch_decay: 0.0,
        };
        let pr = synthetic_predict(&gt, &deg, 1.0, 5);
        assert_eq!(pr.threshold(0.5), Mask::from_fn(8, 8, |_, x| x >= 4));
    }

    #[test]
    fn jitter_moves_the_boundary() {
        let gt = Mask::from_fn(20, 20, |y, x| (5..15).contains(&y) && (5..15).contains(&x));
        let deg = Degradation {
            flip_rate: 0.0,
            boundary_jitter: 2.0,
            epoch_decay: 0.0,
        };
        let counts: BTreeSet<usize> = (0..16)
            .map(|s| mask::foreground_count(&synthetic_predict(&gt, &deg, 1.0, s).threshold(0.5)))
            .collect();
        assert!(
            counts.iter().any(|&c| c > 100) && counts.iter().any(|&c| c < 100),
            "{counts:?}"
        );
    }

    #[test]
    fn decaying_noise_saturates_like_an_exponential() {
        let gt = Mask::from_fn(32, 32, |_, x| x < 16);
        let deg = Degradation {
            flip_rate: 0.5,
            boundary_jitter: 0.0,
            epoch_decay: 0.1,
        };
        let cfg = MetricConfig::default();
        let values: Vec<f64> = (1..=60)
            .map(|e| {
                let ep = f64::from(e);
                let mean: f64 = (0..40)
                    .map(|s| {
                        let pr = synthetic_predict(&gt, &deg, ep, seed::combine(&[e as u64, s]));
                        metrics::evaluate_pair(&gt, &pr, &cfg, "").unwrap().dice
                    })
                    .sum::<f64>()
                    / 40.0;
                mean
            })
            .collect();
        let fit = fit_exponential(&Trace::from_values(1.0, &values).unwrap()).unwrap();
        assert!((fit.esr - 0.1).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn box_stats_examples() {
        let b = reproducibility_stats(&[0.8, 0.9, 1.0]).unwrap();
        assert_eq!((b.min, b.median, b.max), (0.8, 0.9, 1.0));
        assert!((b.stddev - 0.1).abs() < 1e-12);
        let one = reproducibility_stats(&[0.42]).unwrap();
        assert_eq!(
            (one.min, one.q1, one.median, one.q3, one.max, one.stddev),
            (0.42, 0.42, 0.42, 0.42, 0.42, 0.0)
        );
        assert_eq!(reproducibility_stats(&[3.0; 6]).unwrap().stddev, 0.0);
        assert!(reproducibility_stats(&[]).is_err());
        let q = reproducibility_stats(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((q.q1, q.median, q.q3), (1.75, 2.5, 3.25));
    }

    #[test]
    fn batched_mean_averages_batches() {
        let rec = |d: f64| MetricRecord {
            pair_id: String::new(),
            dice: d,
            f_score: d,
            iou: d,
            rmse: 0.0,
            loss_bce: 0.0,
            loss_dice: 0.0,
            hausdorff: None,
        };
        let m = batched_mean(&[rec(0.0), rec(1.0), rec(1.0)], 2).unwrap();
        assert_eq!(m.record.dice, 0.75);
        assert_eq!(m.count, 3);
        assert_eq!(m.hd_undefined, 3);
        assert_eq!(m.record.hausdorff, None);
    }
}
