//! Post-hoc calibration fitted on training interventions only: onset shift,
//! per-window isotonic maps, and per-metric sign thresholds.

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Epsilons, Metric, WindowSet, HORIZON};
use crate::evaluation::SignCounts;
use crate::labeling::AnchoredExample;
use crate::model::QuantileForecast;

/// Monotone piecewise-linear map. Empty breakpoints mean the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl IsotonicMap {
    pub fn identity() -> Self {
        IsotonicMap { x: Vec::new(), y: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.x.is_empty()
    }

    pub fn apply(&self, v: f64) -> f64 {
        let n = self.x.len();
        if n == 0 {
            return v;
        }
        if v <= self.x[0] {
            return self.y[0];
        }
        if v >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.x.partition_point(|b| *b <= v);
        let (x0, x1, y0, y1) = (self.x[i - 1], self.x[i], self.y[i - 1], self.y[i]);
        if x1 == x0 {
            return y1;
        }
        y0 + (y1 - y0) * (v - x0) / (x1 - x0)
    }
}

/// Pool-adjacent-violators on points already sorted by `x`; returns the
/// fitted value of every point.
pub fn pav(ys: &[f64], weights: &[f64]) -> Vec<f64> {
    // Blocks as (weighted mean, weight, point count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(ys.len());
    for (&y, &w) in ys.iter().zip(weights) {
        blocks.push((y, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().expect("two blocks") = ((m1 * w1 + m2 * w2) / w, w, c1 + c2);
        }
    }
    blocks.iter().flat_map(|&(m, _, c)| std::iter::repeat_n(m, c)).collect()
}

/// Least-squares monotone fit of `y` on `x`. Fewer than two pairs yields
/// the identity map.
pub fn fit_isotonic(pairs: &[(f64, f64)]) -> IsotonicMap {
    if pairs.len() < 2 {
        warn!("isotonic fit on {} pair(s); using the identity map", pairs.len());
        return IsotonicMap::identity();
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // Tied x values share one fitted value: collapse them first.
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for (x, y) in sorted {
        if xs.last() == Some(&x) {
            let i = xs.len() - 1;
            ys[i] = (ys[i] * ws[i] + y) / (ws[i] + 1.0);
            ws[i] += 1.0;
        } else {
            xs.push(x);
            ys.push(y);
            ws.push(1.0);
        }
    }
    let fitted = pav(&ys, &ws);
    // Keep only the ends of constant runs; interpolation is unchanged.
    let mut map = IsotonicMap::identity();
    for i in 0..xs.len() {
        let first = i == 0 || fitted[i - 1] != fitted[i];
        let last = i + 1 == xs.len() || fitted[i + 1] != fitted[i];
        if first || last {
            map.x.push(xs[i]);
            map.y.push(fitted[i]);
        }
    }
    map
}

/// Minute `k` of the shifted series reads minute `k - shift`; earlier
/// offsets are invalid.
pub fn shift_series(values: &[f64], shift: usize) -> Vec<Option<f64>> {
    (0..values.len()).map(|k| k.checked_sub(shift).map(|j| values[j])).collect()
}

/// Training pairing of one metric's raw median forecast with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub example_id: String,
    pub metric: Metric,
    pub median: Vec<f64>,
    pub delta: Vec<f64>,
    pub valid: Vec<bool>,
    pub sign: Vec<i8>,
}

impl CalibrationRecord {
    /// One record per metric the forecast covers and the example includes.
    pub fn from_forecast(example: &AnchoredExample, forecast: &QuantileForecast) -> Vec<CalibrationRecord> {
        forecast
            .targets
            .iter()
            .filter_map(|&m| {
                let t = example.target(m);
                if !t.included {
                    return None;
                }
                Some(CalibrationRecord {
                    example_id: example.id.clone(),
                    metric: m,
                    median: forecast.median(m)?,
                    delta: t.delta.clone(),
                    valid: t.valid.clone(),
                    sign: t.sign.clone(),
                })
            })
            .collect()
    }
}

/// Mean absolute error of the shifted forecast for each candidate shift.
pub fn onset_mae_curve(records: &[&CalibrationRecord], max_shift: usize) -> Vec<Option<f64>> {
    (0..=max_shift)
        .map(|d| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in records {
                for k in d..r.median.len() {
                    if r.valid[k] {
                        sum += (r.median[k - d] - r.delta[k]).abs();
                        n += 1;
                    }
                }
            }
            (n > 0).then(|| sum / n as f64)
        })
        .collect()
}

/// Argmin of the MAE curve, ties toward the smaller shift.
pub fn fit_onset_shift(records: &[&CalibrationRecord], max_shift: usize) -> usize {
    let curve = onset_mae_curve(records, max_shift);
    let mut best: Option<(usize, f64)> = None;
    for (d, mae) in curve.iter().enumerate() {
        if let Some(m) = *mae {
            match best {
                Some((_, b)) if m >= b - 1e-12 * (1.0 + b.abs()) => {}
                _ => best = Some((d, m)),
            }
        }
    }
    best.map_or(0, |(d, _)| d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdGrid {
    /// Grid values are `i / denominator` for `i` in `first..=last`.
    pub first: u32,
    pub last: u32,
    pub denominator: u32,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid {
            first: 1,
            last: 100,
            denominator: 10,
        }
    }
}

impl ThresholdGrid {
    pub fn values(&self) -> Vec<f64> {
        (self.first..=self.last).map(|i| i as f64 / self.denominator as f64).collect()
    }
}

pub fn call_sign(value: f64, tau: f64) -> i8 {
    if value >= tau {
        1
    } else if value <= -tau {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub tau: f64,
    pub eligible_accuracy: Option<f64>,
    pub called_only_accuracy: Option<f64>,
    /// False when no non-neutral minute existed and `tau` fell back to epsilon.
    pub fitted: bool,
}

/// Ranks candidate thresholds by eligible accuracy, then called-only
/// accuracy (undefined lowest), then the smaller threshold.
pub fn fit_sign_threshold(points: &[(f64, i8)], grid: &[f64], epsilon: f64) -> ThresholdFit {
    let eligible: Vec<(f64, i8)> = points.iter().copied().filter(|(_, s)| *s != 0).collect();
    if eligible.is_empty() || grid.is_empty() {
        warn!("no non-neutral training minutes; threshold defaults to {epsilon}");
        return ThresholdFit {
            tau: epsilon,
            eligible_accuracy: None,
            called_only_accuracy: None,
            fitted: false,
        };
    }
    let score = |tau: f64| {
        let mut c = SignCounts::default();
        for &(v, s) in &eligible {
            c.add(s, call_sign(v, tau));
        }
        (c.eligible_accuracy(), c.called_only_accuracy())
    };
    let key = |e: Option<f64>, c: Option<f64>| (e.unwrap_or(-1.0), c.unwrap_or(-1.0));
    let mut best: Option<ThresholdFit> = None;
    for &tau in grid {
        let (e, c) = score(tau);
        let better = match &best {
            None => true,
            Some(b) => {
                let (ke, kc) = key(e, c);
                let (be, bc) = key(b.eligible_accuracy, b.called_only_accuracy);
                ke > be || (ke == be && (kc > bc || (kc == bc && tau < b.tau)))
            }
        };
        if better {
            best = Some(ThresholdFit {
                tau,
                eligible_accuracy: e,
                called_only_accuracy: c,
                fitted: true,
            });
        }
    }
    best.expect("non-empty grid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub max_shift: usize,
    pub thresholds: ThresholdGrid,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            max_shift: 15,
            thresholds: ThresholdGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCalibration {
    pub metric: Metric,
    pub shift: usize,
    pub onset_mae: Vec<Option<f64>>,
    /// One map per window of the bundle's window set.
    pub maps: Vec<IsotonicMap>,
    pub pairs: Vec<usize>,
    pub threshold: ThresholdFit,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBundle {
    pub windows: WindowSet,
    pub config: CalibrationConfig,
    pub metrics: Vec<MetricCalibration>,
    /// SHA-256 over the sorted training example ids the bundle was fit on.
    pub train_fingerprint: String,
}

pub fn fingerprint<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let set: BTreeSet<&str> = ids.into_iter().collect();
    let mut h = Sha256::new();
    for id in set {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Fits shift, then isotonic maps on shifted medians, then thresholds on
/// the calibrated values: the same order they are applied in.
pub fn fit_metric(
    records: &[&CalibrationRecord],
    metric: Metric,
    windows: &WindowSet,
    config: &CalibrationConfig,
    epsilon: f64,
) -> MetricCalibration {
    let onset_mae = onset_mae_curve(records, config.max_shift);
    let shift = fit_onset_shift(records, config.max_shift);
    let mut per_window: Vec<Vec<(f64, f64)>> = vec![Vec::new(); windows.windows.len()];
    for r in records {
        for (k, v) in shift_series(&r.median, shift).into_iter().enumerate() {
            if let (Some(v), true) = (v, r.valid[k]) {
                if let Some(w) = windows.window_of(k) {
                    per_window[w].push((v, r.delta[k]));
                }
            }
        }
    }
    let maps: Vec<IsotonicMap> = per_window.iter().map(|p| fit_isotonic(p)).collect();
    let mut points = Vec::new();
    for r in records {
        for (k, v) in shift_series(&r.median, shift).into_iter().enumerate() {
            if let (Some(v), true) = (v, r.valid[k]) {
                if let Some(w) = windows.window_of(k) {
                    points.push((maps[w].apply(v), r.sign[k]));
                }
            }
        }
    }
    let threshold = fit_sign_threshold(&points, &config.thresholds.values(), epsilon);
    MetricCalibration {
        metric,
        shift,
        onset_mae,
        maps,
        pairs: per_window.iter().map(Vec::len).collect(),
        threshold,
        records: records.len(),
    }
}

pub fn fit_bundle(
    records: &[CalibrationRecord],
    metrics: &[Metric],
    windows: &WindowSet,
    epsilons: &Epsilons,
    config: &CalibrationConfig,
) -> CalibrationBundle {
    let metrics = metrics
        .iter()
        .map(|&m| {
            let rs: Vec<&CalibrationRecord> = records.iter().filter(|r| r.metric == m).collect();
            fit_metric(&rs, m, windows, config, epsilons.get(m))
        })
        .collect();
    CalibrationBundle {
        windows: windows.clone(),
        config: *config,
        metrics,
        train_fingerprint: fingerprint(records.iter().map(|r| r.example_id.as_str())),
    }
}

/// Calibrated median and called sign per minute offset for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignSeries {
    pub metric: Metric,
    pub value: Vec<Option<f64>>,
    pub sign: Vec<i8>,
}

impl SignSeries {
    /// Offsets made invalid by the onset shift.
    pub fn valid(&self, k: usize) -> bool {
        self.value[k].is_some()
    }
}

impl CalibrationBundle {
    pub fn metric(&self, m: Metric) -> Option<&MetricCalibration> {
        self.metrics.iter().find(|c| c.metric == m)
    }

    /// Shift, map, threshold. Returns `None` for metrics the bundle lacks.
    pub fn predict_sign(&self, metric: Metric, raw_median: &[f64]) -> Option<SignSeries> {
        let cal = self.metric(metric)?;
        let identity = IsotonicMap::identity();
        let mut value = Vec::with_capacity(HORIZON);
        let mut sign = Vec::with_capacity(HORIZON);
        for (k, v) in shift_series(raw_median, cal.shift).into_iter().enumerate() {
            let cv = v.map(|v| {
                let map = self.windows.window_of(k).and_then(|w| cal.maps.get(w)).unwrap_or_else(|| {
                    warn!("no isotonic map for offset {k}; using the identity");
                    &identity
                });
                map.apply(v)
            });
            sign.push(cv.map_or(0, |v| call_sign(v, cal.threshold.tau)));
            value.push(cv);
        }
        Some(SignSeries { metric, value, sign })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(median: Vec<f64>, delta: Vec<f64>, eps: f64) -> CalibrationRecord {
        let n = median.len();
        CalibrationRecord {
            example_id: "u:0000:0".into(),
            metric: Metric::Hr,
            sign: delta.iter().map(|d| crate::labeling::actual_sign(*d, eps)).collect(),
            median,
            delta,
            valid: vec![true; n],
        }
    }

    #[test]
    fn isotonic_examples() {
        let m = fit_isotonic(&[(1.0, 2.0), (2.0, 1.0), (3.0, 3.0)]);
        assert_eq!([m.apply(1.0), m.apply(2.0), m.apply(3.0)], [1.5, 1.5, 3.0]);
        let mono = [(0.0, -1.0), (1.0, 0.5), (4.0, 2.0)];
        let m = fit_isotonic(&mono);
        for (x, y) in mono {
            assert_eq!(m.apply(x), y);
        }
        assert_eq!(m.apply(2.5), 1.25);
        assert_eq!(m.apply(-10.0), -1.0);
        assert_eq!(m.apply(10.0), 2.0);
        let c = fit_isotonic(&[(3.0, 7.0), (-1.0, 7.0), (0.0, 7.0)]);
        assert!([-5.0, 0.0, 2.0, 9.0].iter().all(|x| c.apply(*x) == 7.0));
        assert!(fit_isotonic(&[(1.0, 1.0)]).is_identity());
        assert_eq!(fit_isotonic(&[]).apply(4.2), 4.2);
    }

    #[test]
    fn tied_inputs_share_a_value() {
        let m = fit_isotonic(&[(1.0, 0.0), (1.0, 2.0), (2.0, 3.0)]);
        assert_eq!(m.apply(1.0), 1.0);
        assert_eq!(m.apply(2.0), 3.0);
    }

    #[test]
    fn onset_shift_examples() {
        let f: Vec<f64> = (0..HORIZON).map(|k| ((k as f64) / 9.0).sin() * 10.0 + k as f64 * 0.1).collect();
        let delayed: Vec<f64> = (0..HORIZON).map(|k| f[k.saturating_sub(3)]).collect();
        let r = record(f.clone(), delayed, 1.0);
        assert_eq!(fit_onset_shift(&[&r], 15), 3);
        let same = record(f.clone(), f, 1.0);
        assert_eq!(fit_onset_shift(&[&same], 15), 0);
        let flat = record(vec![2.0; HORIZON], vec![5.0; HORIZON], 1.0);
        assert_eq!(fit_onset_shift(&[&flat], 15), 0);
    }

    #[test]
    fn threshold_examples() {
        let grid = ThresholdGrid::default().values();
        assert_eq!(grid.len(), 100);
        assert_eq!(grid[0], 0.1);
        assert_eq!(grid[99], 10.0);
        assert_eq!(fit_sign_threshold(&[(5.0, 1), (-5.0, -1)], &grid, 1.0).tau, 0.1);
        assert_eq!(fit_sign_threshold(&[(0.0, 1), (0.0, -1)], &grid, 1.0).tau, 0.1);
        let fit = fit_sign_threshold(&[(0.3, -1), (-4.0, -1)], &grid, 1.0);
        assert_eq!(fit.tau, 0.4);
        assert_eq!(fit.eligible_accuracy, Some(0.5));
        assert_eq!(fit.called_only_accuracy, Some(1.0));
        let none = fit_sign_threshold(&[(1.0, 0)], &grid, 2.5);
        assert_eq!((none.tau, none.fitted), (2.5, false));
    }

    #[test]
    fn predict_sign_applies_shift_map_threshold() {
        let bundle = CalibrationBundle {
            windows: WindowSet::default(),
            config: CalibrationConfig::default(),
            metrics: vec![MetricCalibration {
                metric: Metric::Rmssd,
                shift: 2,
                onset_mae: vec![],
                maps: vec![IsotonicMap::identity(); 4],
                pairs: vec![0; 4],
                threshold: ThresholdFit {
                    tau: 2.5,
                    eligible_accuracy: None,
                    called_only_accuracy: None,
                    fitted: true,
                },
                records: 0,
            }],
            train_fingerprint: String::new(),
        };
        let mut raw = vec![0.0; HORIZON];
        raw[0] = 3.0;
        raw[1] = -2.4;
        raw[2] = -2.5;
        let s = bundle.predict_sign(Metric::Rmssd, &raw).unwrap();
        assert_eq!(&s.value[..2], &[None, None]);
        assert_eq!(&s.sign[..5], &[0, 0, 1, 0, -1]);
        assert_eq!(s.value[2], Some(3.0));
        assert!(bundle.predict_sign(Metric::Hr, &raw).is_none());
    }

    #[test]
    fn fingerprint_ignores_order_and_duplicates() {
        assert_eq!(fingerprint(["b", "a", "a"]), fingerprint(["a", "b"]));
        assert_ne!(fingerprint(["a"]), fingerprint(["a", "c"]));
    }
}
