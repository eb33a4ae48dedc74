//! Longitudinal volume estimation from segmented slice stacks and the
//! angiography-to-structural volume ratio.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{foreground_count, MaskStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "OCT")]
    Oct,
    #[serde(rename = "OCT-A")]
    OctA,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Oct => "OCT",
            Modality::OctA => "OCT-A",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "OCT" => Ok(Modality::Oct),
            "OCT-A" | "OCTA" => Ok(Modality::OctA),
            other => Err(Error::Parse(format!("unknown modality {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub day: i64,
    pub stack_id: String,
    pub voxel_count: u64,
    /// `None` until the series is normalized.
    pub normalized_volume: Option<f64>,
}

/// Samples of one modality ordered by strictly increasing day.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSeries {
    modality: Modality,
    samples: Vec<VolumeSample>,
}

impl VolumeSeries {
    pub fn new(modality: Modality, mut samples: Vec<VolumeSample>) -> Result<Self> {
        samples.sort_by_key(|s| s.day);
        if let Some(w) = samples.windows(2).find(|w| w[0].day == w[1].day) {
            return Err(Error::invalid(format!(
                "{modality} series has more than one sample on day {}",
                w[0].day
            )));
        }
        Ok(VolumeSeries { modality, samples })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn samples(&self) -> &[VolumeSample] {
        &self.samples
    }
}

/// Foreground voxel count summed over slices.
pub fn stack_volume(stack: &MaskStack) -> u64 {
    stack.slices().iter().map(|s| foreground_count(s) as u64).sum()
}

/// Physical size of one voxel: slice pitch and in-plane pixel size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpacing {
    pub dz: f64,
    pub dy: f64,
    pub dx: f64,
}

pub fn physical_volume(voxel_count: u64, spacing: VoxelSpacing) -> f64 {
    voxel_count as f64 * spacing.dz * spacing.dy * spacing.dx
}

/// Divides every count by the series maximum, so the maximum maps to 1.0.
pub fn normalize_series(series: &VolumeSeries) -> Result<VolumeSeries> {
    let max = series.samples.iter().map(|s| s.voxel_count).max().unwrap_or(0);
    if max == 0 {
        return Err(Error::InsufficientData(format!(
            "{} series has no nonzero volume to normalize by",
            series.modality
        )));
    }
    let samples = series
        .samples
        .iter()
        .map(|s| VolumeSample {
            normalized_volume: Some(s.voxel_count as f64 / max as f64),
            ..s.clone()
        })
        .collect();
    Ok(VolumeSeries {
        modality: series.modality,
        samples,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatioReport {
    pub ratios: Vec<(i64, f64)>,
    /// Shared days skipped because the structural count was zero.
    pub skipped_days: Vec<i64>,
}

/// `OCT-A count / OCT count` on every day present in both series, from raw counts.
pub fn modality_ratio(octa: &VolumeSeries, oct: &VolumeSeries) -> Result<RatioReport> {
    if octa.modality != Modality::OctA || oct.modality != Modality::Oct {
        return Err(Error::invalid(format!(
            "ratio needs (OCT-A, OCT) series, got ({}, {})",
            octa.modality, oct.modality
        )));
    }
    let structural: BTreeMap<i64, u64> = oct.samples.iter().map(|s| (s.day, s.voxel_count)).collect();
    let mut report = RatioReport::default();
    for s in &octa.samples {
        match structural.get(&s.day) {
            Some(0) => report.skipped_days.push(s.day),
            Some(&base) => report.ratios.push((s.day, s.voxel_count as f64 / base as f64)),
            None => {}
        }
    }
    Ok(report)
}

pub const SERIES_CSV_HEADER: [&str; 5] = ["day", "modality", "stack_id", "voxel_count", "normalized_volume"];

pub fn write_series_csv<W: Write>(out: W, series: &[&VolumeSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(SERIES_CSV_HEADER).map_err(err)?;
    for s in series {
        for sample in &s.samples {
            w.write_record([
                sample.day.to_string(),
                s.modality.to_string(),
                sample.stack_id.clone(),
                sample.voxel_count.to_string(),
                sample.normalized_volume.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("writing series csv", e))
}

/// Reads series rows; `normalized_volume` may be blank. Returns one series per modality present.
pub fn read_series_csv<R: Read>(input: R) -> Result<Vec<VolumeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let mut by_modality: BTreeMap<Modality, Vec<VolumeSample>> = BTreeMap::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let bad = |what: &str| Error::Parse(format!("series row {}: bad {what}", line + 2));
        let day: i64 = field(0).parse().map_err(|_| bad("day"))?;
        let modality: Modality = field(1).parse()?;
        let voxel_count: u64 = field(3).parse().map_err(|_| bad("voxel_count"))?;
        let normalized_volume = match field(4) {
            "" => None,
            v => Some(v.parse().map_err(|_| bad("normalized_volume"))?),
        };
        by_modality.entry(modality).or_default().push(VolumeSample {
            day,
            stack_id: field(2).to_string(),
            voxel_count,
            normalized_volume,
        });
    }
    by_modality
        .into_iter()
        .map(|(m, samples)| VolumeSeries::new(m, samples))
        .collect()
}

pub fn write_ratio_csv<W: Write>(out: W, report: &RatioReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["day", "ratio"]).map_err(err)?;
    for (day, ratio) in &report.ratios {
        w.write_record([day.to_string(), ratio.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("writing ratio csv", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use proptest::prelude::*;

    fn sample(day: i64, count: u64) -> VolumeSample {
        VolumeSample {
            day,
            stack_id: format!("d{day}"),
            voxel_count: count,
            normalized_volume: None,
        }
    }

    fn series(modality: Modality, counts: &[(i64, u64)]) -> VolumeSeries {
        VolumeSeries::new(modality, counts.iter().map(|&(d, c)| sample(d, c)).collect()).unwrap()
    }

    fn slice_with(count: usize) -> Mask {
        Mask::from_fn(8, 8, |y, x| y * 8 + x < count)
    }

    #[test]
    fn stack_volume_examples() {
        assert_eq!(stack_volume(&MaskStack::new("e", vec![], 0).unwrap()), 0);
        let s = MaskStack::new("s", vec![slice_with(10), slice_with(20), slice_with(30)], 0).unwrap();
        assert_eq!(stack_volume(&s), 60);
        let z = MaskStack::new("z", vec![Mask::zeros(8, 8); 4], 0).unwrap();
        assert_eq!(stack_volume(&z), 0);
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_series(&series(Modality::Oct, &[(1, 50), (2, 100), (3, 75)])).unwrap();
        let v: Vec<f64> = n.samples().iter().map(|s| s.normalized_volume.unwrap()).collect();
        assert_eq!(v, vec![0.5, 1.0, 0.75]);
        let single = normalize_series(&series(Modality::Oct, &[(4, 7)])).unwrap();
        assert_eq!(single.samples()[0].normalized_volume, Some(1.0));
        let ties = normalize_series(&series(Modality::Oct, &[(1, 100), (2, 100)])).unwrap();
        assert!(ties.samples().iter().all(|s| s.normalized_volume == Some(1.0)));
        assert!(normalize_series(&series(Modality::Oct, &[(1, 0), (2, 0)])).is_err());
    }

    #[test]
    fn ratio_examples() {
        let octa = series(Modality::OctA, &[(1, 100), (2, 120), (3, 50), (5, 9)]);
        let oct = series(Modality::Oct, &[(1, 100), (2, 100), (3, 0), (4, 10)]);
        let r = modality_ratio(&octa, &oct).unwrap();
        assert_eq!(r.ratios, vec![(1, 1.0), (2, 1.2)]);
        assert_eq!(r.skipped_days, vec![3]);
        assert!(modality_ratio(&oct, &octa).is_err());
    }

    #[test]
    fn duplicate_days_rejected() {
        assert!(VolumeSeries::new(Modality::Oct, vec![sample(1, 1), sample(1, 2)]).is_err());
    }

    #[test]
    fn series_csv_roundtrip() {
        let oct = normalize_series(&series(Modality::Oct, &[(1, 50), (9, 100)])).unwrap();
        let octa = series(Modality::OctA, &[(1, 60)]);
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &[&oct, &octa]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("day,modality,stack_id,voxel_count,normalized_volume\n1,OCT,d1,50,0.5\n"));
        let back = read_series_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![oct, octa]);
    }

    #[test]
    fn physical_units() {
        let v = physical_volume(
            10,
            VoxelSpacing {
                dz: 2.0,
                dy: 3.5,
                dx: 3.5,
            },
        );
        assert!((v - 245.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalization_idempotent(counts in proptest::collection::vec(1u64..10_000, 1..20)) {
            let s = series(Modality::Oct, &counts.iter().enumerate().map(|(i, &c)| (i as i64, c)).collect::<Vec<_>>());
            let once = normalize_series(&s).unwrap();
            prop_assert_eq!(normalize_series(&once).unwrap(), once);
        }

        #[test]
        fn stack_volume_additive(a in proptest::collection::vec(0usize..64, 0..6), b in proptest::collection::vec(0usize..64, 0..6)) {
            let sa = MaskStack::new("a", a.iter().map(|&c| slice_with(c)).collect(), 0).unwrap();
            let sb = MaskStack::new("b", b.iter().map(|&c| slice_with(c)).collect(), 0).unwrap();
            let (va, vb) = (stack_volume(&sa), stack_volume(&sb));
            prop_assert_eq!(stack_volume(&sa.concat(sb).unwrap()), va + vb);
        }
    }
}
