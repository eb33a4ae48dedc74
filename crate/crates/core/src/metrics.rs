//! Performance indices over ground-truth / prediction pairs.
//!
//! Overlap indices are computed from soft confusion sums
//! `TP = Σ gt·pr`, `FP = Σ pr − TP`, `FN = Σ gt − TP`, with a slack term
//! `delta` in numerator and denominator so that empty masks never divide by
//! zero. Predictions are never rounded before summation.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, PixelValues, SOFT_CUTOFF};

/// Physical size of one pixel along rows (`dy`) and columns (`dx`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dy: f64,
    pub dx: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing { dy: 1.0, dx: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub beta: f64,
    pub delta: f64,
    pub bce_clamp: f64,
    pub spacing: Spacing,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            beta: 1.0,
            delta: 1e-5,
            bce_clamp: 1e-7,
            spacing: Spacing::default(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(Error::invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return Err(Error::invalid(format!(
                "bce_clamp must lie in (0, 0.5), got {}",
                self.bce_clamp
            )));
        }
        if !(self.spacing.dy > 0.0 && self.spacing.dx > 0.0) {
            return Err(Error::invalid("pixel spacing must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl ConfusionCounts {
    pub fn new(tp: f64, fp: f64, fn_: f64) -> Self {
        ConfusionCounts { tp, fp, fn_ }
    }
}

fn check_dims(a: &impl PixelValues, b: &impl PixelValues) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims(a.dims(), b.dims()));
    }
    Ok(())
}

pub fn confusion(gt: &Mask, pr: &impl PixelValues) -> Result<ConfusionCounts> {
    check_dims(gt, pr)?;
    let (mut tp, mut sum_gt, mut sum_pr) = (0.0, 0.0, 0.0);
    for k in 0..gt.len() {
        let (g, p) = (gt.value(k), pr.value(k));
        tp += g * p;
        sum_gt += g;
        sum_pr += p;
    }
    // Guard the soft case against -0.0 style cancellation noise.
    Ok(ConfusionCounts {
        tp,
        fp: (sum_pr - tp).max(0.0),
        fn_: (sum_gt - tp).max(0.0),
    })
}

pub fn dice(c: &ConfusionCounts, cfg: &MetricConfig) -> f64 {
    (2.0 * c.tp + cfg.delta) / (c.fn_ + c.fp + 2.0 * c.tp + cfg.delta)
}

pub fn f_score(c: &ConfusionCounts, cfg: &MetricConfig) -> f64 {
    let b2 = cfg.beta * cfg.beta;
    let num = (1.0 + b2) * (c.tp + cfg.delta);
    num / (num + b2 * c.fn_ + c.fp + cfg.delta)
}

pub fn iou(c: &ConfusionCounts, cfg: &MetricConfig) -> f64 {
    (c.tp + cfg.delta) / (c.fn_ + c.fp + c.tp + cfg.delta)
}

pub fn dice_loss(c: &ConfusionCounts, cfg: &MetricConfig) -> f64 {
    1.0 - dice(c, cfg)
}

/// Pixelwise root-mean-square difference.
pub fn rmse(gt: &Mask, pr: &impl PixelValues) -> Result<f64> {
    check_dims(gt, pr)?;
    if gt.is_empty() {
        return Err(Error::Empty("rmse of a 0-pixel mask".into()));
    }
    let sum: f64 = (0..gt.len())
        .map(|k| {
            let d = gt.value(k) - pr.value(k);
            d * d
        })
        .sum();
    Ok((sum / gt.len() as f64).sqrt())
}

/// Mean binary cross-entropy with predictions clamped to `[clamp, 1 - clamp]`.
pub fn bce_loss(gt: &Mask, pr: &impl PixelValues, cfg: &MetricConfig) -> Result<f64> {
    check_dims(gt, pr)?;
    if gt.is_empty() {
        return Err(Error::Empty("cross-entropy of a 0-pixel mask".into()));
    }
    let lo = cfg.bce_clamp;
    let hi = 1.0 - cfg.bce_clamp;
    let sum: f64 = (0..gt.len())
        .map(|k| {
            let g = gt.value(k);
            let p = pr.value(k).clamp(lo, hi);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / gt.len() as f64)
}

/// Symmetric Hausdorff distance between the foreground sets of `gt` and `pr`.
///
/// Soft predictions contribute pixels with value `>= 0.5`. Returns `Some(0.0)`
/// when both sets are empty and `None` (undefined) when exactly one is.
pub fn hausdorff(gt: &Mask, pr: &impl PixelValues, spacing: Spacing) -> Result<Option<f64>> {
    check_dims(gt, pr)?;
    let g: Vec<bool> = (0..gt.len()).map(|k| gt.value(k) >= SOFT_CUTOFF).collect();
    let p: Vec<bool> = (0..pr.len()).map(|k| pr.value(k) >= SOFT_CUTOFF).collect();
    let (w, h) = gt.dims();
    Ok(hausdorff_sets(&g, &p, w, h, spacing))
}

fn hausdorff_sets(g: &[bool], p: &[bool], w: usize, h: usize, spacing: Spacing) -> Option<f64> {
    match (g.iter().any(|&v| v), p.iter().any(|&v| v)) {
        (false, false) => Some(0.0),
        (true, true) => {
            let forward = directed_sq(g, &squared_edt(p, w, h, spacing));
            let backward = directed_sq(p, &squared_edt(g, w, h, spacing));
            Some(forward.max(backward).sqrt())
        }
        _ => None,
    }
}

/// Directed Hausdorff distance `max_{a∈A} min_{b∈B} ‖a − b‖`; `None` if either set is empty.
pub fn directed_hausdorff(from: &Mask, to: &Mask, spacing: Spacing) -> Result<Option<f64>> {
    check_dims(from, to)?;
    let a: Vec<bool> = from.data().iter().map(|&v| v == 1).collect();
    let b: Vec<bool> = to.data().iter().map(|&v| v == 1).collect();
    if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
        return Ok(None);
    }
    let (w, h) = (from.width(), from.height());
    Ok(Some(directed_sq(&a, &squared_edt(&b, w, h, spacing)).sqrt()))
}

fn directed_sq(from: &[bool], dist_sq: &[f64]) -> f64 {
    from.iter()
        .zip(dist_sq)
        .filter(|(&on, _)| on)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Exact squared Euclidean distance to the nearest `true` site, by separable
/// lower envelopes of parabolas (columns, then rows).
fn squared_edt(sites: &[bool], w: usize, h: usize, spacing: Spacing) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    let wy = spacing.dy * spacing.dy;
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        envelope_1d(&f[..h], wy, &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    let wx = spacing.dx * spacing.dx;
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        envelope_1d(&f[..w], wx, &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// `out[p] = min_q f[q] + weight·(p − q)²`, skipping infinite samples.
fn envelope_1d(f: &[f64], weight: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let r = v[k as usize];
            let rf = r as f64;
            let s = ((f[q] + weight * qf * qf) - (f[r] + weight * rf * rf)) / (2.0 * weight * (qf - rf));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while z[j + 1] < pf {
            j += 1;
        }
        let d = pf - v[j] as f64;
        *o = weight * d * d + f[v[j]];
    }
}

/// The per-pair index vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub pair_id: String,
    pub dice: f64,
    pub f_score: f64,
    pub iou: f64,
    pub rmse: f64,
    pub loss_bce: f64,
    pub loss_dice: f64,
    /// `None` when exactly one of the two foreground sets is empty.
    pub hausdorff: Option<f64>,
}

impl MetricRecord {
    pub fn get(&self, index: MetricIndex) -> Option<f64> {
        match index {
            MetricIndex::Dice => Some(self.dice),
            MetricIndex::FScore => Some(self.f_score),
            MetricIndex::Iou => Some(self.iou),
            MetricIndex::Rmse => Some(self.rmse),
            MetricIndex::LossBce => Some(self.loss_bce),
            MetricIndex::LossDice => Some(self.loss_dice),
            MetricIndex::Hausdorff => self.hausdorff,
        }
    }
}

/// Computes every index for one pair.
pub fn evaluate_pair(
    gt: &Mask,
    pr: &impl PixelValues,
    cfg: &MetricConfig,
    pair_id: impl Into<String>,
) -> Result<MetricRecord> {
    let c = confusion(gt, pr)?;
    Ok(MetricRecord {
        pair_id: pair_id.into(),
        dice: dice(&c, cfg),
        f_score: f_score(&c, cfg),
        iou: iou(&c, cfg),
        rmse: rmse(gt, pr)?,
        loss_bce: bce_loss(gt, pr, cfg)?,
        loss_dice: dice_loss(&c, cfg),
        hausdorff: hausdorff(gt, pr, cfg.spacing)?,
    })
}

/// Per-index arithmetic mean of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMean {
    pub record: MetricRecord,
    pub count: usize,
    /// Records whose Hausdorff distance was undefined and left out of its mean.
    pub hd_undefined: usize,
}

pub const BATCH_MEAN_ID: &str = "batch_mean";

/// Averages every index over `records` in input order, without rounding.
/// Undefined Hausdorff values are excluded from that index's mean and counted.
pub fn batch_mean(records: &[MetricRecord]) -> Result<BatchMean> {
    if records.is_empty() {
        return Err(Error::Empty("batch mean of zero records".into()));
    }
    let n = records.len() as f64;
    let mean = |f: fn(&MetricRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let defined: Vec<f64> = records.iter().filter_map(|r| r.hausdorff).collect();
    let hausdorff = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(BatchMean {
        record: MetricRecord {
            pair_id: BATCH_MEAN_ID.to_string(),
            dice: mean(|r| r.dice),
            f_score: mean(|r| r.f_score),
            iou: mean(|r| r.iou),
            rmse: mean(|r| r.rmse),
            loss_bce: mean(|r| r.loss_bce),
            loss_dice: mean(|r| r.loss_dice),
            hausdorff,
        },
        count: records.len(),
        hd_undefined: records.len() - defined.len(),
    })
}

/// The seven per-pair indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricIndex {
    Dice,
    FScore,
    Iou,
    Rmse,
    LossBce,
    LossDice,
    Hausdorff,
}

impl MetricIndex {
    pub const ALL: [MetricIndex; 7] = [
        MetricIndex::Dice,
        MetricIndex::FScore,
        MetricIndex::Iou,
        MetricIndex::Rmse,
        MetricIndex::LossBce,
        MetricIndex::LossDice,
        MetricIndex::Hausdorff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricIndex::Dice => "dice",
            MetricIndex::FScore => "f_score",
            MetricIndex::Iou => "iou",
            MetricIndex::Rmse => "rmse",
            MetricIndex::LossBce => "loss_bce",
            MetricIndex::LossDice => "loss_dice",
            MetricIndex::Hausdorff => "hausdorff",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricIndex::Dice | MetricIndex::FScore | MetricIndex::Iou)
    }
}

impl fmt::Display for MetricIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dice" => MetricIndex::Dice,
            "f_score" | "fscore" | "f" => MetricIndex::FScore,
            "iou" => MetricIndex::Iou,
            "rmse" => MetricIndex::Rmse,
            "loss" | "loss_bce" | "bce" => MetricIndex::LossBce,
            "loss_dice" | "dice_loss" => MetricIndex::LossDice,
            "hausdorff" | "hd" => MetricIndex::Hausdorff,
            other => return Err(Error::invalid(format!("unknown metric index {other}"))),
        })
    }
}

pub const METRIC_CSV_HEADER: [&str; 9] = [
    "pair_id",
    "dice",
    "f_score",
    "iou",
    "rmse",
    "loss_bce",
    "loss_dice",
    "hausdorff",
    "hd_defined",
];

fn record_fields(r: &MetricRecord) -> Vec<String> {
    vec![
        r.pair_id.clone(),
        r.dice.to_string(),
        r.f_score.to_string(),
        r.iou.to_string(),
        r.rmse.to_string(),
        r.loss_bce.to_string(),
        r.loss_dice.to_string(),
        r.hausdorff.map_or_else(|| "NaN".to_string(), |v| v.to_string()),
        u8::from(r.hausdorff.is_some()).to_string(),
    ]
}

/// Writes per-pair rows followed by an optional summary row. Values use the
/// shortest representation that round-trips exactly.
pub fn write_metric_csv<W: Write>(out: W, rows: &[MetricRecord], summary: Option<&MetricRecord>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(METRIC_CSV_HEADER).map_err(csv_err)?;
    for r in rows.iter().chain(summary) {
        w.write_record(record_fields(r)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("writing metrics csv", e))
}

pub fn read_metric_csv<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRIC_CSV_HEADER {
        return Err(Error::Parse(format!("unexpected metrics header {headers:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        out.push(MetricRecord {
            pair_id: row[0].to_string(),
            dice: num(&row[1])?,
            f_score: num(&row[2])?,
            iou: num(&row[3])?,
            rmse: num(&row[4])?,
            loss_bce: num(&row[5])?,
            loss_dice: num(&row[6])?,
            hausdorff: if &row[8] == "1" { Some(num(&row[7])?) } else { None },
        });
    }
    Ok(out)
}
