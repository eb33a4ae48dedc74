//! On-disk layout of a sweep:
//!
//! ```text
//! <root>/sweep.json                                  provenance + cell manifest
//! <root>/results/<model>/<ntr>/<nte>/<trial>/metrics.csv
//! ```
//!
//! `metrics.csv` holds one batch-averaged row per epoch. Timestamps live only
//! in `sweep.json`, so reruns with the same seed produce identical CSV bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellFailure, CellKey, CellOutcome, CellResult, EpochPoint, SweepConfig, SweepResult};
use crate::error::{Error, Result};
use crate::metrics::{BatchMean, MetricRecord, BATCH_MEAN_ID};

pub const SWEEP_MANIFEST: &str = "sweep.json";

pub const TRACE_CSV_HEADER: [&str; 10] = [
    "epoch",
    "dice",
    "f_score",
    "iou",
    "rmse",
    "loss_bce",
    "loss_dice",
    "hausdorff",
    "hd_undefined",
    "n_pairs",
];

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CellStatus {
    Completed,
    Failed,
}

#[derive(Serialize, Deserialize)]
struct CellEntry {
    #[serde(flatten)]
    key: CellKey,
    ntrain_count: usize,
    ntest_count: usize,
    seed: u64,
    status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metrics: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failure: Option<CellFailure>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tool_version: String,
    started_unix: u64,
    finished_unix: u64,
    config: SweepConfig,
    cells: Vec<CellEntry>,
}

fn trace_csv(points: &[EpochPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(TRACE_CSV_HEADER).map_err(err)?;
    for p in points {
        let r = &p.mean.record;
        w.write_record([
            p.epoch.to_string(),
            r.dice.to_string(),
            r.f_score.to_string(),
            r.iou.to_string(),
            r.rmse.to_string(),
            r.loss_bce.to_string(),
            r.loss_dice.to_string(),
            r.hausdorff.map_or_else(|| "NaN".to_string(), |v| v.to_string()),
            p.mean.hd_undefined.to_string(),
            p.mean.count.to_string(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

fn parse_trace_csv(bytes: &[u8], origin: &Path) -> Result<Vec<EpochPoint>> {
    let bad = |msg: String| Error::Parse(format!("{}: {msg}", origin.display()));
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != TRACE_CSV_HEADER {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| row[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", &row[i])));
        let u = |i: usize| row[i].parse::<usize>().map_err(|e| bad(format!("{}: {e}", &row[i])));
        let hd = f(7)?;
        out.push(EpochPoint {
            epoch: u(0)?,
            mean: BatchMean {
                record: MetricRecord {
                    pair_id: BATCH_MEAN_ID.to_string(),
                    dice: f(1)?,
                    f_score: f(2)?,
                    iou: f(3)?,
                    rmse: f(4)?,
                    loss_bce: f(5)?,
                    loss_dice: f(6)?,
                    hausdorff: (!hd.is_nan()).then_some(hd),
                },
                hd_undefined: u(8)?,
                count: u(9)?,
            },
        });
    }
    Ok(out)
}

/// Writes `sweep.json` and one `metrics.csv` per completed cell. Any previous
/// `results/` tree under `root` is replaced.
pub fn write_sweep_dir(result: &SweepResult, root: &Path) -> Result<()> {
    let results = root.join("results");
    if results.exists() {
        fs::remove_dir_all(&results).map_err(|e| Error::io(format!("clearing {}", results.display()), e))?;
    }
    let mut cells = Vec::with_capacity(result.cells.len());
    for c in &result.cells {
        let (status, metrics, failure) = match &c.outcome {
            CellOutcome::Completed(points) => {
                let rel = c.key.relative_dir().join("metrics.csv");
                let path = root.join(&rel);
                let dir = path.parent().expect("metrics path has a parent");
                fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                fs::write(&path, trace_csv(points)?)
                    .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                let rel = rel
                    .components()
                    .map(|p| p.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                (CellStatus::Completed, Some(rel), None)
            }
            CellOutcome::Failed(f) => (CellStatus::Failed, None, Some(f.clone())),
        };
        cells.push(CellEntry {
            key: c.key.clone(),
            ntrain_count: c.ntrain_count,
            ntest_count: c.ntest_count,
            seed: c.seed,
            status,
            metrics,
            failure,
        });
    }
    let manifest = Manifest {
        tool_version: result.tool_version.clone(),
        started_unix: result.started_unix,
        finished_unix: result.finished_unix,
        config: result.config.clone(),
        cells,
    };
    let path = root.join(SWEEP_MANIFEST);
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_sweep_dir(root: &Path) -> Result<SweepResult> {
    let path = root.join(SWEEP_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut cells = Vec::with_capacity(manifest.cells.len());
    for entry in manifest.cells {
        let outcome = match (entry.status, entry.metrics, entry.failure) {
            (CellStatus::Completed, Some(rel), _) => {
                let p = root.join(rel);
                let bytes = fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                CellOutcome::Completed(parse_trace_csv(&bytes, &p)?)
            }
            (CellStatus::Failed, _, Some(f)) => CellOutcome::Failed(f),
            _ => {
                return Err(Error::Parse(format!(
                    "{}: inconsistent entry for cell {:?}",
                    path.display(),
                    entry.key
                )))
            }
        };
        cells.push(CellResult {
            key: entry.key,
            ntrain_count: entry.ntrain_count,
            ntest_count: entry.ntest_count,
            seed: entry.seed,
            outcome,
        });
    }
    Ok(SweepResult {
        config: manifest.config,
        cells,
        started_unix: manifest.started_unix,
        finished_unix: manifest.finished_unix,
        tool_version: manifest.tool_version,
    })
}
