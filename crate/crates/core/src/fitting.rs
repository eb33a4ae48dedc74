//! Convergence and scaling-law fits.
//!
//! Per-epoch traces are fitted to `p = a·exp(−esr·ep) + c`, where `esr` is
//! the saturation rate. Sweep results are fitted to the plane
//! `p = p00 + p10·n_train + p01·n_test`, on either axis indices or raw image
//! counts.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 500;
const STEP_TOLERANCE: f64 = 1e-10;
const ESR_FLOOR: f64 = 1e-6;

/// Ordered `(epoch, value)` samples with strictly increasing epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    points: Vec<(f64, f64)>,
}

impl Trace {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if let Some((ep, p)) = points.iter().find(|(ep, p)| !(ep.is_finite() && p.is_finite())) {
            return Err(Error::invalid(format!("non-finite trace point ({ep}, {p})")));
        }
        if points.iter().any(|(ep, _)| *ep < 0.0) {
            return Err(Error::invalid("trace epochs must be nonnegative"));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("trace epochs must be strictly increasing"));
        }
        Ok(Trace { points })
    }

    /// Trace with epochs `first, first + 1, ...`.
    pub fn from_values(first_epoch: f64, values: &[f64]) -> Result<Self> {
        Trace::new(
            values
                .iter()
                .enumerate()
                .map(|(i, &v)| (first_epoch + i as f64, v))
                .collect(),
        )
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub a: f64,
    pub esr: f64,
    pub c: f64,
    pub residual_rms: f64,
    /// Residual rms of the starting guess; `residual_rms` never exceeds it.
    pub initial_rms: f64,
    pub iterations: usize,
    /// Set for constant traces, where the fit is `(0, 0, value)`.
    pub degenerate: bool,
}

pub fn eval_exponential(f: &ExpFit, ep: f64) -> f64 {
    f.a * (-f.esr * ep).exp() + f.c
}

fn rms(sum_sq: f64, n: usize) -> f64 {
    (sum_sq / n as f64).sqrt()
}

fn sum_sq(points: &[(f64, f64)], a: f64, esr: f64, c: f64) -> f64 {
    points
        .iter()
        .map(|&(t, p)| {
            let r = p - (a * (-esr * t).exp() + c);
            r * r
        })
        .sum()
}

/// Starting point: `c` from the last sample, `a` from the first, and the rate
/// from a log-linear regression of `ln|p − c|` over the first half.
fn initial_guess(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let c0 = points[points.len() - 1].1;
    let a0 = points[0].1 - c0;
    let half = &points[..points.len().div_ceil(2)];
    let logs: Vec<(f64, f64)> = half
        .iter()
        .filter(|(_, p)| (p - c0).abs() > 0.0)
        .map(|&(t, p)| (t, (p - c0).abs().ln()))
        .collect();
    let esr0 = if logs.len() >= 2 {
        let n = logs.len() as f64;
        let mt = logs.iter().map(|l| l.0).sum::<f64>() / n;
        let ml = logs.iter().map(|l| l.1).sum::<f64>() / n;
        let sxy: f64 = logs.iter().map(|&(t, l)| (t - mt) * (l - ml)).sum();
        let sxx: f64 = logs.iter().map(|&(t, _)| (t - mt) * (t - mt)).sum();
        if sxx > 0.0 {
            -sxy / sxx
        } else {
            ESR_FLOOR
        }
    } else {
        ESR_FLOOR
    };
    (a0, esr0.max(ESR_FLOOR), c0)
}

/// Least-squares fit of `a·exp(−esr·ep) + c`.
///
/// Levenberg–Marquardt on `(a, ln esr, c)` so the rate stays positive.
/// Damping starts at 1e-3 and moves by ×10 on rejected and ×0.1 on accepted
/// steps; iteration stops when a step is shorter than 1e-10 or after 500
/// iterations, in which case [`Error::NotConverged`] carries the best fit.
pub fn fit_exponential(trace: &Trace) -> Result<ExpFit> {
    let pts = trace.points();
    if pts.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "exponential fit needs at least 4 points, got {}",
            pts.len()
        )));
    }
    let n = pts.len();
    let (lo, hi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, p)| {
            (lo.min(p), hi.max(p))
        });
    if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
        return Ok(ExpFit {
            a: 0.0,
            esr: 0.0,
            c: pts[0].1,
            residual_rms: rms(sum_sq(pts, 0.0, 0.0, pts[0].1), n),
            initial_rms: 0.0,
            iterations: 0,
            degenerate: true,
        });
    }

    let (a0, esr0, c0) = initial_guess(pts);
    let mut params = Vector3::new(a0, esr0.ln(), c0);
    let cost_of = |q: &Vector3<f64>| sum_sq(pts, q[0], q[1].exp(), q[2]);
    let mut cost = cost_of(&params);
    let initial_rms = rms(cost, n);
    let mut lambda = 1e-3;

    let finish = |q: &Vector3<f64>, cost: f64, iterations: usize| ExpFit {
        a: q[0],
        esr: q[1].exp(),
        c: q[2],
        residual_rms: rms(cost, n),
        initial_rms,
        iterations,
        degenerate: false,
    };

    for iter in 1..=MAX_ITERATIONS {
        if cost == 0.0 {
            return Ok(finish(&params, cost, iter - 1));
        }
        let (a, k) = (params[0], params[1].exp());
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for &(t, p) in pts {
            let e = (-k * t).exp();
            let r = p - (a * e + params[2]);
            let j = Vector3::new(e, -a * t * k * e, 1.0);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let max_diag = jtj.diagonal().max();
        loop {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12 * max_diag);
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&jtr),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e30 {
                        return Ok(finish(&params, cost, iter));
                    }
                    continue;
                }
            };
            let candidate = params + step;
            let new_cost = cost_of(&candidate);
            let small = step.norm() < STEP_TOLERANCE;
            if new_cost.is_finite() && new_cost < cost {
                params = candidate;
                cost = new_cost;
                lambda = (lambda * 0.1).max(1e-15);
                if small {
                    return Ok(finish(&params, cost, iter));
                }
                break;
            }
            if small || lambda > 1e30 {
                return Ok(finish(&params, cost, iter));
            }
            lambda *= 10.0;
            break;
        }
    }
    Err(Error::NotConverged {
        iterations: MAX_ITERATIONS,
        best: Box::new(finish(&params, cost, MAX_ITERATIONS)),
    })
}

/// Axis scale for scaling-surface fits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisUnits {
    /// Grid indices `1..=K`.
    #[default]
    Index,
    /// Actual image counts.
    Images,
}

impl fmt::Display for AxisUnits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AxisUnits::Index => "index",
            AxisUnits::Images => "images",
        })
    }
}

impl FromStr for AxisUnits {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "index" => Ok(AxisUnits::Index),
            "images" => Ok(AxisUnits::Images),
            other => Err(Error::invalid(format!("unknown axis units {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFit {
    pub p00: f64,
    pub p10: f64,
    pub p01: f64,
    pub units: AxisUnits,
    #[serde(default)]
    pub residual_rms: f64,
}

impl SurfaceFit {
    pub fn new(p00: f64, p10: f64, p01: f64, units: AxisUnits) -> Self {
        SurfaceFit {
            p00,
            p10,
            p01,
            units,
            residual_rms: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub ntrain: f64,
    pub ntest: f64,
    pub value: f64,
}

/// Ordinary least-squares plane through `samples`.
///
/// Solved on centred coordinates, which reduces the normal equations to a
/// 2×2 system; the intercept follows from the means.
pub fn fit_surface(samples: &[SurfaceSample], units: AxisUnits) -> Result<SurfaceFit> {
    if samples.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "a plane needs at least 3 samples, got {}",
            samples.len()
        )));
    }
    if samples
        .iter()
        .any(|s| !(s.ntrain.is_finite() && s.ntest.is_finite() && s.value.is_finite()))
    {
        return Err(Error::invalid("non-finite surface sample"));
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.ntrain).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.ntest).sum::<f64>() / n;
    let mz = samples.iter().map(|s| s.value).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let (dx, dy, dz) = (s.ntrain - mx, s.ntest - my, s.value - mz);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
        sxz += dx * dz;
        syz += dy * dz;
    }
    let scale_x = samples.iter().map(|s| s.ntrain.abs()).fold(1.0, f64::max);
    let scale_y = samples.iter().map(|s| s.ntest.abs()).fold(1.0, f64::max);
    if sxx <= 1e-12 * scale_x * scale_x {
        return Err(Error::RankDeficient("N-Train axis has no variation".into()));
    }
    if syy <= 1e-12 * scale_y * scale_y {
        return Err(Error::RankDeficient("N-Test axis has no variation".into()));
    }
    let det = sxx * syy - sxy * sxy;
    if det <= 1e-12 * sxx * syy {
        return Err(Error::RankDeficient("N-Train and N-Test samples are collinear".into()));
    }
    let p10 = (sxz * syy - syz * sxy) / det;
    let p01 = (syz * sxx - sxz * sxy) / det;
    let p00 = mz - p10 * mx - p01 * my;
    let ss: f64 = samples
        .iter()
        .map(|s| {
            let r = s.value - (p00 + p10 * s.ntrain + p01 * s.ntest);
            r * r
        })
        .sum();
    Ok(SurfaceFit {
        p00,
        p10,
        p01,
        units,
        residual_rms: (ss / n).sqrt(),
    })
}

pub fn eval_surface(f: &SurfaceFit, ntrain: f64, ntest: f64, units: AxisUnits) -> Result<f64> {
    if units != f.units {
        return Err(Error::UnitMismatch {
            fit: f.units.to_string(),
            query: units.to_string(),
        });
    }
    Ok(f.p00 + f.p10 * ntrain + f.p01 * ntest)
}

/// Sweep axis: 1-based indices mapped onto strictly increasing image counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct GridAxis {
    counts: Vec<usize>,
}

/// Training-set sizes used for the reproducibility grid.
pub const REFERENCE_TRAINING_COUNTS: [usize; 8] = [402, 801, 1229, 1519, 1879, 2296, 2739, 3230];

impl GridAxis {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("grid axis needs at least one count"));
        }
        if counts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "grid axis counts {counts:?} must strictly increase"
            )));
        }
        Ok(GridAxis { counts })
    }

    pub fn reference_training() -> Self {
        GridAxis {
            counts: REFERENCE_TRAINING_COUNTS.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn max_count(&self) -> usize {
        *self.counts.last().expect("axis is nonempty")
    }

    pub fn count_at(&self, index: usize) -> Result<usize> {
        if index == 0 || index > self.counts.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.counts.len(),
            });
        }
        Ok(self.counts[index - 1])
    }

    pub fn index_of(&self, count: usize) -> Result<usize> {
        self.counts
            .binary_search(&count)
            .map(|i| i + 1)
            .map_err(|_| Error::CountNotOnAxis(count))
    }

    /// Axis coordinate of `index` in the requested units.
    pub fn coordinate(&self, index: usize, units: AxisUnits) -> Result<f64> {
        match units {
            AxisUnits::Index => self.count_at(index).map(|_| index as f64),
            AxisUnits::Images => self.count_at(index).map(|c| c as f64),
        }
    }
}

impl TryFrom<Vec<usize>> for GridAxis {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        GridAxis::new(v)
    }
}

impl From<GridAxis> for Vec<usize> {
    fn from(a: GridAxis) -> Self {
        a.counts
    }
}

/// Serialized fit, tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FitRecord {
    Exp(ExpFit),
    Surface(SurfaceFit),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_trace(a: f64, esr: f64, c: f64, epochs: std::ops::RangeInclusive<u32>) -> Trace {
        Trace::new(
            epochs
                .map(|e| (f64::from(e), a * (-esr * f64::from(e)).exp() + c))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn noiseless_recovery() {
        let fit = fit_exponential(&model_trace(0.5, 0.1, 0.3, 0..=50)).unwrap();
        assert!((fit.a - 0.5).abs() < 1e-6, "{fit:?}");
        assert!((fit.esr - 0.1).abs() < 1e-6, "{fit:?}");
        assert!((fit.c - 0.3).abs() < 1e-6, "{fit:?}");
        assert!(fit.residual_rms < 1e-9);
        assert!(!fit.degenerate);
    }

    #[test]
    fn constant_trace_is_degenerate() {
        let t = Trace::from_values(0.0, &[0.8; 10]).unwrap();
        let fit = fit_exponential(&t).unwrap();
        assert!(fit.degenerate);
        assert_eq!((fit.a, fit.esr, fit.c), (0.0, 0.0, 0.8));
    }

    #[test]
    fn noisy_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let points = (0..=100)
            .map(|e| {
                let ep = f64::from(e);
                (ep, -0.4 * (-0.05 * ep).exp() + 0.9 + rng.gen_range(-1e-3..=1e-3))
            })
            .collect();
        let fit = fit_exponential(&Trace::new(points).unwrap()).unwrap();
        assert!((fit.a + 0.4).abs() < 5e-2, "{fit:?}");
        assert!((fit.esr - 0.05).abs() < 5e-2, "{fit:?}");
        assert!((fit.c - 0.9).abs() < 5e-2, "{fit:?}");
    }

    #[test]
    fn too_short_trace_rejected() {
        let t = Trace::from_values(0.0, &[1.0, 0.5, 0.2]).unwrap();
        assert!(matches!(fit_exponential(&t), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn trace_validation() {
        assert!(Trace::new(vec![(1.0, 0.0), (1.0, 0.1)]).is_err());
        assert!(Trace::new(vec![(-1.0, 0.0)]).is_err());
        assert!(Trace::new(vec![(0.0, f64::NAN)]).is_err());
    }

    #[test]
    fn eval_exponential_examples() {
        let f = ExpFit {
            a: 0.5,
            esr: 0.1,
            c: 0.3,
            residual_rms: 0.0,
            initial_rms: 0.0,
            iterations: 0,
            degenerate: false,
        };
        assert_eq!(eval_exponential(&f, 0.0), 0.8);
        assert!((eval_exponential(&f, 10.0) - (0.5 * (-1.0f64).exp() + 0.3)).abs() < 1e-15);
        assert!((eval_exponential(&f, 10.0) - 0.48394).abs() < 1e-5);
        let fast = ExpFit { esr: 50.0, ..f };
        assert_eq!(eval_exponential(&fast, 1000.0), 0.3);
    }

    fn grid_samples(p00: f64, p10: f64, p01: f64) -> Vec<SurfaceSample> {
        let mut v = Vec::new();
        for i in 1..=8 {
            for j in 1..=8 {
                let (x, y) = (f64::from(i), f64::from(j));
                v.push(SurfaceSample {
                    ntrain: x,
                    ntest: y,
                    value: p00 + p10 * x + p01 * y,
                });
            }
        }
        v
    }

    #[test]
    fn plane_recovered_exactly() {
        let f = fit_surface(&grid_samples(0.729, 0.004, -0.029), AxisUnits::Index).unwrap();
        assert!((f.p00 - 0.729).abs() < 1e-12);
        assert!((f.p10 - 0.004).abs() < 1e-12);
        assert!((f.p01 + 0.029).abs() < 1e-12);
        assert!(f.residual_rms < 1e-10);
    }

    #[test]
    fn flat_samples_give_constant_plane() {
        let f = fit_surface(&grid_samples(0.5, 0.0, 0.0), AxisUnits::Index).unwrap();
        assert!((f.p00 - 0.5).abs() < 1e-14);
        assert!(f.p10.abs() < 1e-14 && f.p01.abs() < 1e-14);
    }

    #[test]
    fn noisy_plane_within_tolerance() {
        let mut samples = grid_samples(0.729, 0.004, -0.029);
        for (k, s) in samples.iter_mut().enumerate() {
            s.value += if k % 2 == 0 { 1e-4 } else { -1e-4 };
        }
        let f = fit_surface(&samples, AxisUnits::Index).unwrap();
        assert!((f.p00 - 0.729).abs() < 1e-3);
        assert!((f.p10 - 0.004).abs() < 1e-3);
        assert!((f.p01 + 0.029).abs() < 1e-3);
    }

    #[test]
    fn rank_deficiency_names_axis() {
        let line: Vec<SurfaceSample> = (1..=5)
            .map(|i| SurfaceSample {
                ntrain: f64::from(i),
                ntest: 1.0,
                value: 0.1 * f64::from(i),
            })
            .collect();
        let err = fit_surface(&line, AxisUnits::Index).unwrap_err();
        assert!(err.to_string().contains("N-Test"), "{err}");
        let diag: Vec<SurfaceSample> = (1..=5)
            .map(|i| SurfaceSample {
                ntrain: f64::from(i),
                ntest: f64::from(i),
                value: 0.0,
            })
            .collect();
        assert!(fit_surface(&diag, AxisUnits::Index)
            .unwrap_err()
            .to_string()
            .contains("collinear"));
        assert!(matches!(
            fit_surface(&line[..1], AxisUnits::Index),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn surface_evaluation_anchors() {
        let benign = SurfaceFit::new(0.729, 0.004, -0.029, AxisUnits::Index);
        assert!((eval_surface(&benign, 8.0, 1.0, AxisUnits::Index).unwrap() - 0.732).abs() < 1e-12);
        assert_eq!(eval_surface(&benign, 0.0, 0.0, AxisUnits::Index).unwrap(), 0.729);
        let malignant_loss = SurfaceFit::new(-0.269, -0.021, -0.145, AxisUnits::Index);
        assert!((eval_surface(&malignant_loss, 1.0, 1.0, AxisUnits::Index).unwrap() + 0.435).abs() < 1e-12);
        assert!(matches!(
            eval_surface(&benign, 1.0, 1.0, AxisUnits::Images),
            Err(Error::UnitMismatch { .. })
        ));
    }

    #[test]
    fn reference_axis_mapping() {
        let axis = GridAxis::reference_training();
        assert_eq!(axis.count_at(1).unwrap(), 402);
        assert_eq!(axis.count_at(4).unwrap(), 1519);
        assert_eq!(axis.index_of(3230).unwrap(), 8);
        assert!(matches!(axis.count_at(0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(axis.count_at(9), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(axis.index_of(1000), Err(Error::CountNotOnAxis(1000))));
        for i in 1..=8 {
            assert_eq!(axis.index_of(axis.count_at(i).unwrap()).unwrap(), i);
        }
        assert!(GridAxis::new(vec![3, 3]).is_err());
        assert!(GridAxis::new(vec![]).is_err());
    }

    #[test]
    fn fit_json_shapes() {
        let s = serde_json::to_value(FitRecord::Surface(SurfaceFit::new(0.1, 0.2, 0.3, AxisUnits::Index))).unwrap();
        assert_eq!(s["kind"], "surface");
        assert_eq!(s["units"], "index");
        assert_eq!(s["p10"], 0.2);
        let fit = fit_exponential(&model_trace(0.5, 0.1, 0.3, 0..=20)).unwrap();
        let e = serde_json::to_value(FitRecord::Exp(fit.clone())).unwrap();
        assert_eq!(e["kind"], "exp");
        assert_eq!(e["esr"], fit.esr);
        let back: FitRecord = serde_json::from_value(e).unwrap();
        assert_eq!(back, FitRecord::Exp(fit));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fit_never_worse_than_start(values in proptest::collection::vec(-1.0f64..1.0, 4..40)) {
            let t = Trace::from_values(0.0, &values).unwrap();
            let fit = match fit_exponential(&t) {
                Ok(f) => f,
                Err(Error::NotConverged { best, .. }) => *best,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert!(fit.esr >= 0.0);
            prop_assert!(fit.residual_rms <= fit.initial_rms || fit.degenerate);
        }

        #[test]
        fn surface_is_affine(p00 in -1.0f64..1.0, p10 in -0.1f64..0.1, p01 in -0.1f64..0.1, x in 0.0f64..10.0, y in 0.0f64..10.0) {
            let f = SurfaceFit::new(p00, p10, p01, AxisUnits::Index);
            let step = eval_surface(&f, x + 1.0, y, AxisUnits::Index).unwrap() - eval_surface(&f, x, y, AxisUnits::Index).unwrap();
            prop_assert!((step - p10).abs() < 1e-12);
        }

        #[test]
        fn planar_data_fits_exactly(p00 in -1.0f64..1.0, p10 in -0.1f64..0.1, p01 in -0.1f64..0.1) {
            let f = fit_surface(&grid_samples(p00, p10, p01), AxisUnits::Index).unwrap();
            prop_assert!(f.residual_rms < 1e-10);
        }
    }
}
