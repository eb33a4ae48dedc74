//! Command implementations behind the `segsense` binary: evaluation of mask
//! directories, fitting and reporting over stored sweeps, model
//! recommendation from fitted scaling surfaces, and volume series.
//!
//! Everything here returns in-memory tables so the binary only does I/O and
//! exit-code mapping. All numbers are written with full double precision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fitting::{
    eval_surface, fit_exponential, fit_surface, AxisUnits, ExpFit, FitRecord, SurfaceFit, SurfaceSample, Trace,
};
use crate::mask::{self, PixelValues};
use crate::metrics::{self, BatchMean, MetricConfig, MetricIndex, MetricRecord};
use crate::sweep::{
    index_sensitivity_ranking, reproducibility_stats, trial_stddevs, CellResult, DataSource, EpochSelection,
    SweepConfig, SweepResult,
};
use crate::volume::{self, Modality, RatioReport, VolumeSample, VolumeSeries};

/// Quantity a scaling surface is fitted to: one of the metric indices or the
/// saturation rate of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SurfaceTarget {
    Metric(MetricIndex),
    Esr,
}

impl SurfaceTarget {
    pub fn all() -> impl Iterator<Item = SurfaceTarget> {
        MetricIndex::ALL
            .into_iter()
            .map(SurfaceTarget::Metric)
            .chain(std::iter::once(SurfaceTarget::Esr))
    }

    pub fn name(self) -> &'static str {
        match self {
            SurfaceTarget::Metric(m) => m.name(),
            SurfaceTarget::Esr => "esr",
        }
    }

    /// Faster saturation is better, like the overlap indices.
    pub fn higher_is_better(self) -> bool {
        match self {
            SurfaceTarget::Metric(m) => m.higher_is_better(),
            SurfaceTarget::Esr => true,
        }
    }
}

impl fmt::Display for SurfaceTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SurfaceTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("esr") {
            Ok(SurfaceTarget::Esr)
        } else {
            s.parse().map(SurfaceTarget::Metric)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataCategory {
    #[default]
    LowVariation,
    HighVariation,
}

impl FromStr for DataCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low-variation" => Ok(DataCategory::LowVariation),
            "high-variation" => Ok(DataCategory::HighVariation),
            other => Err(Error::invalid(format!("unknown data category {other}"))),
        }
    }
}

/// One fit tagged with the model and index it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub model: String,
    pub index: String,
    pub fit: FitRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSet {
    pub fits: Vec<NamedFit>,
}

impl FitSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fits serialize")
    }

    pub fn models(&self) -> BTreeSet<&str> {
        self.fits.iter().map(|f| f.model.as_str()).collect()
    }

    pub fn surface(&self, model: &str, index: &str) -> Option<&SurfaceFit> {
        self.fits.iter().find_map(|f| match &f.fit {
            FitRecord::Surface(s) if f.model == model && f.index == index => Some(s),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model: String,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub index: String,
    pub ntrain: f64,
    pub ntest: f64,
    pub units: AxisUnits,
    pub category: DataCategory,
    pub ranked_models: Vec<RankedModel>,
}

/// Evaluates every model's surface for `target` at `(ntrain, ntest)` and
/// ranks best first: descending for overlap indices and ESR, ascending for
/// losses, RMSE and Hausdorff. Ties go to the alphabetically first model.
pub fn recommend(
    fits: &FitSet,
    ntrain: f64,
    ntest: f64,
    units: AxisUnits,
    target: SurfaceTarget,
    category: DataCategory,
) -> Result<Recommendation> {
    let models = fits.models();
    if models.is_empty() {
        return Err(Error::Empty("fit set has no models".into()));
    }
    let mut ranked = Vec::with_capacity(models.len());
    for model in models {
        let surface = fits.surface(model, target.name()).ok_or_else(|| Error::MissingFit {
            model: model.to_string(),
            index: target.name().to_string(),
        })?;
        ranked.push(RankedModel {
            model: model.to_string(),
            predicted: eval_surface(surface, ntrain, ntest, units)?,
        });
    }
    let descending = target.higher_is_better();
    ranked.sort_by(|a, b| {
        let ord = if descending {
            b.predicted.total_cmp(&a.predicted)
        } else {
            a.predicted.total_cmp(&b.predicted)
        };
        ord.then_with(|| a.model.cmp(&b.model))
    });
    Ok(Recommendation {
        index: target.name().to_string(),
        ntrain,
        ntest,
        units,
        category,
        ranked_models: ranked,
    })
}

pub fn recommendation_csv(rec: &Recommendation) -> Result<String> {
    let mut t = Table::new(&["rank", "model", "index", "predicted"]);
    for (i, r) in rec.ranked_models.iter().enumerate() {
        t.row([
            (i + 1).to_string(),
            r.model.clone(),
            rec.index.clone(),
            r.predicted.to_string(),
        ]);
    }
    t.finish()
}

/// Small CSV builder over `csv::Writer`.
struct Table {
    w: csv::Writer<Vec<u8>>,
    err: Option<csv::Error>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = w.write_record(header).err();
        Table { w, err }
    }

    fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        if self.err.is_none() {
            self.err = self.w.write_record(fields).err();
        }
    }

    fn finish(self) -> Result<String> {
        if let Some(e) = self.err {
            return Err(Error::Parse(e.to_string()));
        }
        let bytes = self.w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |v| v.to_string())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Clone, Debug)]
pub struct EvaluateOutput {
    pub rows: Vec<MetricRecord>,
    pub summary: Option<BatchMean>,
    /// Pairs that could not be evaluated, with the reason.
    pub pair_errors: Vec<(String, String)>,
}

impl EvaluateOutput {
    pub fn csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        metrics::write_metric_csv(&mut buf, &self.rows, self.summary.as_ref().map(|s| &s.record))?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Pairs rasters by file stem and computes every index per pair plus the
/// batch mean. Predictions are read as soft values `intensity / 255`.
pub fn evaluate_dirs(gt_dir: &Path, pr_dir: &Path, cfg: &MetricConfig, cutoff: u8) -> Result<EvaluateOutput> {
    cfg.validate()?;
    let index = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        Ok(mask::raster_files(dir)?
            .into_iter()
            .map(|p| (mask::file_stem(&p), p))
            .collect())
    };
    let gts = index(gt_dir)?;
    let prs = index(pr_dir)?;
    let unmatched: Vec<String> = gts
        .keys()
        .filter(|k| !prs.contains_key(*k))
        .chain(prs.keys().filter(|k| !gts.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedIds(unmatched));
    }
    if gts.is_empty() {
        return Err(Error::Empty(format!("no rasters in {}", gt_dir.display())));
    }

    let mut rows = Vec::new();
    let mut pair_errors = Vec::new();
    for (id, gt_path) in &gts {
        let result = mask::load_mask(gt_path, cutoff).and_then(|gt| {
            let pr = mask::load_soft_mask(&prs[id])?;
            metrics::evaluate_pair(&gt, &pr, cfg, id.clone())
        });
        match result {
            Ok(r) => rows.push(r),
            Err(e) => pair_errors.push((id.clone(), e.to_string())),
        }
    }
    let summary = if rows.is_empty() {
        None
    } else {
        Some(metrics::batch_mean(&rows)?)
    };
    Ok(EvaluateOutput {
        rows,
        summary,
        pair_errors,
    })
}

// ---------------------------------------------------------------------------
// fit

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitKind {
    Exp,
    Surface,
}

impl FromStr for FitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(FitKind::Exp),
            "surface" => Ok(FitKind::Surface),
            other => Err(Error::invalid(format!("unknown fit kind {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub fits: FitSet,
    /// Per-cell exponential fits, or per-point surface residuals.
    pub residuals_csv: String,
    pub warnings: Vec<String>,
}

fn fit_or_best(trace: &Trace) -> (Option<ExpFit>, &'static str) {
    match fit_exponential(trace) {
        Ok(f) if f.degenerate => (Some(f), "degenerate"),
        Ok(f) => (Some(f), "ok"),
        Err(Error::NotConverged { best, .. }) => (Some(*best), "not_converged"),
        Err(_) => (None, "too_short"),
    }
}

/// Per-epoch mean over cells; epochs where no cell has a value are skipped.
fn mean_trace<'a>(cells: impl Iterator<Item = &'a CellResult>, index: MetricIndex) -> Option<Trace> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for c in cells {
        for p in c.points().unwrap_or_default() {
            if let Some(v) = p.mean.record.get(index) {
                let e = acc.entry(p.epoch).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    let points: Vec<(f64, f64)> = acc.into_iter().map(|(e, (s, n))| (e as f64, s / n as f64)).collect();
    (!points.is_empty()).then(|| Trace::new(points).expect("epochs are increasing"))
}

fn models_in_order(result: &SweepResult) -> Vec<String> {
    result.config.models.iter().map(|m| m.name.clone()).collect()
}

/// Exponential fits per cell and index, plus one fit per (model, index) of the
/// trace averaged over that model's cells.
pub fn fit_exponentials(result: &SweepResult) -> Result<FitOutput> {
    let mut t = Table::new(&[
        "model",
        "ntrain_idx",
        "ntest_idx",
        "trial",
        "index",
        "a",
        "esr",
        "c",
        "residual_rms",
        "status",
    ]);
    let mut warnings = Vec::new();
    for c in result.completed() {
        for index in MetricIndex::ALL {
            let Some(trace) = c.trace(index) else { continue };
            let (fit, status) = fit_or_best(&trace);
            let (a, esr, cc, rms) = fit.map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |f| {
                (f.a, f.esr, f.c, f.residual_rms)
            });
            t.row([
                c.key.model.clone(),
                c.key.ntrain_idx.to_string(),
                c.key.ntest_idx.to_string(),
                c.key.trial.to_string(),
                index.name().to_string(),
                a.to_string(),
                esr.to_string(),
                cc.to_string(),
                rms.to_string(),
                status.to_string(),
            ]);
        }
    }
    let mut fits = FitSet::default();
    for model in models_in_order(result) {
        for index in MetricIndex::ALL {
            let cells = result.completed().filter(|c| c.key.model == model);
            let Some(trace) = mean_trace(cells, index) else {
                continue;
            };
            match fit_or_best(&trace) {
                (Some(f), status) => {
                    if status != "ok" {
                        warnings.push(format!("{model}/{index}: mean trace fit {status}"));
                    }
                    fits.fits.push(NamedFit {
                        model: model.clone(),
                        index: index.name().to_string(),
                        fit: FitRecord::Exp(f),
                    });
                }
                (None, status) => warnings.push(format!("{model}/{index}: {status}")),
            }
        }
    }
    Ok(FitOutput {
        fits,
        residuals_csv: t.finish()?,
        warnings,
    })
}

/// Saturation rate of a cell's loss trace, when the fit is informative.
fn cell_esr(c: &CellResult) -> Option<f64> {
    let trace = c.trace(MetricIndex::LossBce)?;
    match fit_exponential(&trace) {
        Ok(f) if !f.degenerate => Some(f.esr),
        _ => None,
    }
}

/// Scaling-surface fits per (model, target) over the trial-averaged value of
/// each grid point. Refused with a rank-deficiency error when the completed
/// cells cannot determine a plane.
pub fn fit_surfaces(result: &SweepResult, units: AxisUnits, selection: EpochSelection) -> Result<FitOutput> {
    let cfg = &result.config;
    let groups = result.trial_groups();
    let coord = |ntr: usize, nte: usize| -> Result<(f64, f64)> {
        Ok((
            cfg.ntrain_axis.coordinate(ntr, units)?,
            cfg.ntest_axis.coordinate(nte, units)?,
        ))
    };

    let mut t = Table::new(&["model", "index", "ntrain", "ntest", "observed", "predicted", "residual"]);
    let mut fits = FitSet::default();
    let mut warnings = Vec::new();
    for model in models_in_order(result) {
        let model_groups: Vec<_> = groups.iter().filter(|((m, _, _), _)| *m == model).collect();
        let mut grid = Vec::new();
        for ((_, ntr, nte), _) in &model_groups {
            let (x, y) = coord(*ntr, *nte)?;
            grid.push(SurfaceSample {
                ntrain: x,
                ntest: y,
                value: 0.0,
            });
        }
        fit_surface(&grid, units).map_err(|e| match e {
            Error::RankDeficient(msg) => Error::RankDeficient(format!("model {model}: {msg}")),
            other => other,
        })?;

        for target in SurfaceTarget::all() {
            let mut samples = Vec::new();
            for ((_, ntr, nte), cells) in &model_groups {
                let values: Vec<f64> = cells
                    .iter()
                    .filter_map(|c| match target {
                        SurfaceTarget::Metric(m) => c.value(m, selection),
                        SurfaceTarget::Esr => cell_esr(c),
                    })
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let (x, y) = coord(*ntr, *nte)?;
                samples.push(SurfaceSample {
                    ntrain: x,
                    ntest: y,
                    value: values.iter().sum::<f64>() / values.len() as f64,
                });
            }
            match fit_surface(&samples, units) {
                Ok(f) => {
                    for s in &samples {
                        let predicted = eval_surface(&f, s.ntrain, s.ntest, units)?;
                        t.row([
                            model.clone(),
                            target.name().to_string(),
                            s.ntrain.to_string(),
                            s.ntest.to_string(),
                            s.value.to_string(),
                            predicted.to_string(),
                            (s.value - predicted).to_string(),
                        ]);
                    }
                    fits.fits.push(NamedFit {
                        model: model.clone(),
                        index: target.name().to_string(),
                        fit: FitRecord::Surface(f),
                    });
                }
                Err(e) => warnings.push(format!("{model}/{target}: {e}")),
            }
        }
    }
    Ok(FitOutput {
        fits,
        residuals_csv: t.finish()?,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the sweep configuration serialized as JSON.
    pub config_hash: String,
    pub tool_version: String,
    pub sweep_tool_version: String,
    pub epoch_selection: String,
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    /// File name → CSV payload.
    pub tables: BTreeMap<String, String>,
    /// Exponential fits of mean traces and scaling surfaces (grid-index units).
    pub fits: FitSet,
    pub provenance: Provenance,
    pub completed_cells: usize,
    pub failed_cells: usize,
    pub warnings: Vec<String>,
}

pub fn config_hash(cfg: &SweepConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Plot-ready tables for a stored sweep: grid means, per-grid-point box
/// statistics over trials, per-model mean standard deviations, the index
/// sensitivity ranking and the failed-cell manifest.
pub fn build_report(result: &SweepResult, selection: EpochSelection) -> Result<ReportBundle> {
    let cfg = &result.config;
    let groups = result.trial_groups();
    let count = |axis: &crate::fitting::GridAxis, i: usize| axis.count_at(i).map(|c| c.to_string());
    let mut warnings = Vec::new();

    let mut means = Table::new(&[
        "model",
        "index",
        "ntrain_idx",
        "ntrain_count",
        "ntest_idx",
        "ntest_count",
        "mean",
        "n",
    ]);
    let mut boxes = Table::new(&[
        "model",
        "index",
        "ntrain_idx",
        "ntrain_count",
        "ntest_idx",
        "ntest_count",
        "n",
        "min",
        "q1",
        "median",
        "q3",
        "max",
        "stddev",
    ]);
    for ((model, ntr, nte), cells) in &groups {
        for index in MetricIndex::ALL {
            let values: Vec<f64> = cells.iter().filter_map(|c| c.value(index, selection)).collect();
            let prefix = [
                model.clone(),
                index.name().to_string(),
                ntr.to_string(),
                count(&cfg.ntrain_axis, *ntr)?,
                nte.to_string(),
                count(&cfg.ntest_axis, *nte)?,
            ];
            let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
            means.row(prefix.iter().cloned().chain([opt(mean), values.len().to_string()]));
            if let Ok(b) = reproducibility_stats(&values) {
                boxes.row(prefix.iter().cloned().chain([
                    b.n.to_string(),
                    b.min.to_string(),
                    b.q1.to_string(),
                    b.median.to_string(),
                    b.q3.to_string(),
                    b.max.to_string(),
                    b.stddev.to_string(),
                ]));
            }
        }
    }

    let mut model_sd = Table::new(&["model", "index", "mean_stddev", "groups"]);
    for index in MetricIndex::ALL {
        let sds = trial_stddevs(result, index, selection);
        let mut per_model: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for ((model, _, _), sd) in &sds {
            per_model.entry(model.as_str()).or_default().push(*sd);
        }
        for (model, v) in per_model {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            model_sd.row([
                model.to_string(),
                index.name().to_string(),
                mean.to_string(),
                v.len().to_string(),
            ]);
        }
    }

    let mut sensitivity = Table::new(&["rank", "index", "mean_stddev"]);
    match index_sensitivity_ranking(result, selection) {
        Ok(ranking) => {
            for (i, (index, sd)) in ranking.iter().enumerate() {
                sensitivity.row([(i + 1).to_string(), index.name().to_string(), sd.to_string()]);
            }
        }
        Err(e) => warnings.push(format!("sensitivity ranking skipped: {e}")),
    }

    let mut failed = Table::new(&["model", "ntrain_idx", "ntest_idx", "trial", "reason", "detail"]);
    let mut failed_cells = 0;
    for (key, failure) in result.failed() {
        failed_cells += 1;
        let reason = serde_json::to_value(failure)
            .ok()
            .and_then(|v| v.get("reason").and_then(|r| r.as_str()).map(str::to_string))
            .unwrap_or_default();
        failed.row([
            key.model.clone(),
            key.ntrain_idx.to_string(),
            key.ntest_idx.to_string(),
            key.trial.to_string(),
            reason,
            failure.to_string(),
        ]);
    }

    let mut fits = FitSet::default();
    if result.completed().next().is_some() {
        let exp = fit_exponentials(result)?;
        warnings.extend(exp.warnings);
        fits.fits.extend(exp.fits.fits);
        match fit_surfaces(result, AxisUnits::Index, selection) {
            Ok(s) => {
                warnings.extend(s.warnings);
                fits.fits.extend(s.fits.fits);
            }
            Err(e) => warnings.push(format!("surface fits skipped: {e}")),
        }
    }

    let mut tables = BTreeMap::new();
    tables.insert("grid_means.csv".to_string(), means.finish()?);
    tables.insert("box_stats.csv".to_string(), boxes.finish()?);
    tables.insert("model_stddev.csv".to_string(), model_sd.finish()?);
    tables.insert("sensitivity.csv".to_string(), sensitivity.finish()?);
    tables.insert("failed_cells.csv".to_string(), failed.finish()?);
    Ok(ReportBundle {
        tables,
        fits,
        provenance: Provenance {
            config_hash: config_hash(cfg),
            tool_version: crate::TOOL_VERSION.to_string(),
            sweep_tool_version: result.tool_version.clone(),
            epoch_selection: match selection {
                EpochSelection::Final => "final".into(),
                EpochSelection::Best => "best".into(),
            },
        },
        completed_cells: result.completed().count(),
        failed_cells,
        warnings,
    })
}

/// Writes each table plus `report.json` (provenance and table index).
pub fn write_report(bundle: &ReportBundle, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    for (name, body) in &bundle.tables {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    let index = serde_json::json!({
        "provenance": bundle.provenance,
        "tables": bundle.tables.keys().collect::<Vec<_>>(),
        "completed_cells": bundle.completed_cells,
        "failed_cells": bundle.failed_cells,
        "warnings": bundle.warnings,
    });
    let p = out.join("fits.json");
    fs::write(&p, bundle.fits.to_json()).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    let p = out.join("report.json");
    fs::write(
        &p,
        serde_json::to_string_pretty(&index).expect("report index serializes"),
    )
    .map_err(|e| Error::io(format!("writing {}", p.display()), e))
}

// ---------------------------------------------------------------------------
// sweep configuration file

/// Sweep configuration file: the sweep fields at top level plus a `data` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    #[serde(flatten)]
    pub sweep: SweepConfig,
    pub data: DataSource,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl SweepFile {
    /// Parses TOML, or JSON when the file extension is `.json`.
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("sweep config: {e}")))
        } else {
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("sweep config: {e}")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        SweepFile::parse(&text, json)
    }
}

// ---------------------------------------------------------------------------
// volume

/// Builds series from a stack manifest CSV with columns `day,modality,stack_dir`.
/// Relative stack directories resolve against the manifest's directory.
pub fn series_from_stack_manifest(path: &Path, cutoff: u8) -> Result<Vec<VolumeSeries>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut by_modality: BTreeMap<Modality, Vec<VolumeSample>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        if row.len() < 3 {
            return Err(Error::Parse(format!(
                "stack manifest row {row:?} needs day,modality,stack_dir"
            )));
        }
        let day: i64 = row[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad day {}", &row[0])))?;
        let modality: Modality = row[1].parse()?;
        let dir = base.join(row[2].trim());
        let stack = mask::load_stack(&dir, cutoff)?;
        by_modality.entry(modality).or_default().push(VolumeSample {
            day,
            stack_id: stack.stack_id().to_string(),
            voxel_count: volume::stack_volume(&stack),
            normalized_volume: None,
        });
    }
    by_modality.into_iter().map(|(m, s)| VolumeSeries::new(m, s)).collect()
}

#[derive(Clone, Debug)]
pub struct VolumeOutput {
    pub series_csv: String,
    pub ratio_csv: Option<String>,
    pub ratio: Option<RatioReport>,
}

/// Normalizes each series and, when both modalities are present, computes the
/// per-day OCT-A/OCT ratio.
pub fn volume_report(series: &[VolumeSeries]) -> Result<VolumeOutput> {
    let normalized = series
        .iter()
        .map(volume::normalize_series)
        .collect::<Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    volume::write_series_csv(&mut buf, &normalized.iter().collect::<Vec<_>>())?;
    let find = |m: Modality| normalized.iter().find(|s| s.modality() == m);
    let (ratio_csv, ratio) = match (find(Modality::OctA), find(Modality::Oct)) {
        (Some(a), Some(b)) => {
            let r = volume::modality_ratio(a, b)?;
            let mut out = Vec::new();
            volume::write_ratio_csv(&mut out, &r)?;
            (Some(String::from_utf8(out).expect("utf-8")), Some(r))
        }
        _ => (None, None),
    };
    Ok(VolumeOutput {
        series_csv: String::from_utf8(buf).expect("utf-8"),
        ratio_csv,
        ratio,
    })
}

/// Writes a split manifest for the masks in `dir` (after informative filtering).
pub fn split_dir(dir: &Path, cutoff: u8, min_count: usize, ratios: (f64, f64, f64), seed: u64) -> Result<String> {
    let masks = mask::raster_files(dir)?
        .iter()
        .map(|p| mask::load_mask(p, cutoff))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = mask::filter_informative(masks, min_count)
        .iter()
        .map(|m| m.source_id().to_string())
        .collect();
    Ok(mask::partition(&ids, ratios, seed)?.to_json())
}

#[allow(dead_code)]
fn _assert_pixel_values_object_safe(_: &dyn PixelValues) {}
