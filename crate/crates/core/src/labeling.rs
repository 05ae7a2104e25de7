//! Intervention-end anchored examples: baselines, percent-change targets,
//! ground-truth signs, inclusion screening and leak-safe splits.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{Category, Epsilons, Metric, Minute, Window, WindowSet, CONTEXT_MINUTES, HORIZON};
use crate::features::FeatureFrame;
use crate::ingest::{Channel, TagRecord};

/// Per-minute metric series on a user's grid, used for baselines and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub start: Minute,
    pub rmssd: Channel,
    pub hr: Channel,
    pub bbi: Channel,
}

impl MetricSeries {
    pub fn get(&self, m: Metric) -> &Channel {
        match m {
            Metric::Rmssd => &self.rmssd,
            Metric::Hr => &self.hr,
            Metric::Bbi => &self.bbi,
        }
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn end(&self) -> Minute {
        self.start + self.len() as i64
    }

    pub fn value_at(&self, m: Metric, minute: Minute) -> Option<f64> {
        let i = minute - self.start;
        if i < 0 {
            return None;
        }
        self.get(m).get(i as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Plausibility {
    pub hr_min: f64,
    pub hr_max: f64,
    pub rmssd_min: f64,
    pub rmssd_max: f64,
}

impl Default for Plausibility {
    fn default() -> Self {
        Plausibility {
            hr_min: 30.0,
            hr_max: 220.0,
            rmssd_min: 1.0,
            rmssd_max: 300.0,
        }
    }
}

/// HR outside the plausible range is invalidated; RMSSD is clipped into it.
pub fn screen_plausibility(series: &mut MetricSeries, p: &Plausibility) {
    for i in 0..series.hr.len() {
        if let Some(v) = series.hr.get(i) {
            if v < p.hr_min || v > p.hr_max {
                series.hr.clear(i);
            }
        }
    }
    for i in 0..series.rmssd.len() {
        if let Some(v) = series.rmssd.get(i) {
            series.rmssd.set(i, v.clamp(p.rmssd_min, p.rmssd_max));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelParams {
    pub windows: WindowSet,
    pub epsilons: Epsilons,
    pub baseline_minutes: usize,
    pub baseline_min_valid: usize,
    /// Minimum fraction of valid minutes in every evaluated window.
    pub min_window_coverage: f64,
    /// Longest tolerated run of invalid minutes inside a window.
    pub max_window_gap: usize,
    pub context_minutes: usize,
    pub plausibility: Plausibility,
    pub metrics: Vec<Metric>,
}

impl Default for LabelParams {
    fn default() -> Self {
        LabelParams {
            windows: WindowSet::default(),
            epsilons: Epsilons::default(),
            baseline_minutes: 30,
            baseline_min_valid: 24,
            min_window_coverage: 0.5,
            max_window_gap: 10,
            context_minutes: CONTEXT_MINUTES,
            plausibility: Plausibility::default(),
            metrics: Metric::ALL.to_vec(),
        }
    }
}

/// Median with the mean-of-middle-two convention. `None` on empty input.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median of the valid values in `[t0 - minutes, t0)`. On too few valid
/// minutes returns the count found as the error.
pub fn compute_baseline(ch: &Channel, start: Minute, t0: Minute, minutes: usize, min_valid: usize) -> Result<f64, usize> {
    let vals: Vec<f64> = (t0 - minutes as i64..t0)
        .filter_map(|m| {
            let i = m - start;
            if i < 0 {
                None
            } else {
                ch.get(i as usize)
            }
        })
        .collect();
    if vals.len() < min_valid {
        return Err(vals.len());
    }
    Ok(median(&vals).expect("non-empty"))
}

pub const PERCENT_FLOOR: f64 = 1e-6;

pub fn percent_change(x: f64, base: f64) -> f64 {
    100.0 * (x - base) / base.abs().max(PERCENT_FLOOR)
}

pub fn actual_sign(delta: f64, epsilon: f64) -> i8 {
    if delta >= epsilon {
        1
    } else if delta <= -epsilon {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum RejectReason {
    BaselineInsufficient { valid: usize, required: usize },
    WindowCoverage { window: Window, valid: usize, required: usize },
    WindowGap { window: Window, run: usize },
    AllMetricsRejected,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::BaselineInsufficient { valid, required } => {
                write!(f, "baseline has {valid} usable minutes, need {required}")
            }
            RejectReason::WindowCoverage { window, valid, required } => {
                write!(f, "window {} has {valid} valid minutes, need {required}", window.label())
            }
            RejectReason::WindowGap { window, run } => {
                write!(f, "window {} has an invalid run of {run} minutes", window.label())
            }
            RejectReason::AllMetricsRejected => write!(f, "every metric rejected"),
        }
    }
}

/// Window-level screening of one metric's target validity mask.
/// `evaluated[w]` marks windows that overlap the recorded data.
pub fn inclusion_check(
    valid: &[bool],
    evaluated: &[bool],
    baseline: Result<f64, usize>,
    params: &LabelParams,
) -> Vec<RejectReason> {
    let mut reasons = Vec::new();
    if let Err(n) = baseline {
        reasons.push(RejectReason::BaselineInsufficient {
            valid: n,
            required: params.baseline_min_valid,
        });
    }
    for (w, window) in params.windows.windows.iter().enumerate() {
        if !evaluated.get(w).copied().unwrap_or(true) {
            continue;
        }
        let minutes = &valid[window.range()];
        let n_valid = minutes.iter().filter(|v| **v).count();
        let required = (params.min_window_coverage * window.len() as f64).ceil() as usize;
        if n_valid < required {
            reasons.push(RejectReason::WindowCoverage {
                window: *window,
                valid: n_valid,
                required,
            });
        }
        let longest = minutes
            .split(|v| *v)
            .map(<[bool]>::len)
            .max()
            .unwrap_or(0);
        if longest > params.max_window_gap {
            reasons.push(RejectReason::WindowGap {
                window: *window,
                run: longest,
            });
        }
    }
    reasons
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTargets {
    pub metric: Metric,
    pub included: bool,
    pub baseline: Option<f64>,
    /// Percent change per offset; NaN where invalid.
    pub delta: Vec<f64>,
    pub valid: Vec<bool>,
    /// Ground-truth sign per offset; 0 where invalid.
    pub sign: Vec<i8>,
}

impl MetricTargets {
    fn excluded(metric: Metric) -> Self {
        MetricTargets {
            metric,
            included: false,
            baseline: None,
            delta: vec![f64::NAN; HORIZON],
            valid: vec![false; HORIZON],
            sign: vec![0; HORIZON],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredExample {
    pub id: String,
    pub user_id: String,
    pub tag_index: usize,
    pub tag_name: String,
    pub category: Category,
    pub t0: Minute,
    pub t1: Minute,
    /// `context_minutes x width`, row-major, oldest minute first.
    pub context: Vec<f64>,
    pub context_valid: Vec<bool>,
    pub feature_width: usize,
    /// Indexed by `Metric::index()`.
    pub targets: Vec<MetricTargets>,
}

impl AnchoredExample {
    pub fn target(&self, m: Metric) -> &MetricTargets {
        &self.targets[m.index()]
    }

    pub fn context_len(&self) -> usize {
        self.context.len() / self.feature_width.max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub example_id: String,
    pub user_id: String,
    pub t1: Minute,
    pub metric: Option<Metric>,
    pub reason: RejectReason,
}

pub fn example_id(user_id: &str, tag_index: usize, t1: Minute) -> String {
    format!("{user_id}:{tag_index:04}:{t1}")
}

/// Builds one metric's targets for an anchor, before screening.
fn metric_targets(series: &MetricSeries, metric: Metric, t0: Minute, t1: Minute, params: &LabelParams) -> (MetricTargets, Result<f64, usize>) {
    let ch = series.get(metric);
    let baseline = compute_baseline(ch, series.start, t0, params.baseline_minutes, params.baseline_min_valid);
    let mut t = MetricTargets::excluded(metric);
    if let Ok(base) = baseline {
        t.baseline = Some(base);
        let eps = params.epsilons.get(metric);
        for k in 0..HORIZON {
            if let Some(x) = series.value_at(metric, t1 + k as i64) {
                let d = percent_change(x, base);
                t.delta[k] = d;
                t.valid[k] = true;
                t.sign[k] = actual_sign(d, eps);
            }
        }
    }
    (t, baseline)
}

/// One candidate per tag; metrics failing inclusion are excluded, and a
/// candidate with no surviving metric is dropped. `series` must already be
/// plausibility-screened.
pub fn make_examples(
    frame: &FeatureFrame,
    series: &MetricSeries,
    tags: &[TagRecord],
    params: &LabelParams,
) -> (Vec<AnchoredExample>, Vec<Rejection>) {
    let mut out = Vec::new();
    let mut rejections = Vec::new();
    let width = frame.width();
    let data_end = series.end();
    for (tag_index, tag) in tags.iter().enumerate() {
        let id = example_id(&tag.user_id, tag_index, tag.t1);
        let evaluated: Vec<bool> = params
            .windows
            .windows
            .iter()
            .map(|w| tag.t1 + (w.start as i64) < data_end)
            .collect();
        let mut targets: Vec<MetricTargets> = Metric::ALL.iter().map(|&m| MetricTargets::excluded(m)).collect();
        let mut any = false;
        for &metric in &params.metrics {
            let (mut t, baseline) = metric_targets(series, metric, tag.t0, tag.t1, params);
            let reasons = inclusion_check(&t.valid, &evaluated, baseline, params);
            if reasons.is_empty() {
                t.included = true;
                any = true;
                targets[metric.index()] = t;
            } else {
                for reason in reasons {
                    rejections.push(Rejection {
                        example_id: id.clone(),
                        user_id: tag.user_id.clone(),
                        t1: tag.t1,
                        metric: Some(metric),
                        reason,
                    });
                }
            }
        }
        if !any {
            rejections.push(Rejection {
                example_id: id,
                user_id: tag.user_id.clone(),
                t1: tag.t1,
                metric: None,
                reason: RejectReason::AllMetricsRejected,
            });
            continue;
        }
        let cm = params.context_minutes;
        let mut context = vec![0.0; cm * width];
        let mut context_valid = vec![false; cm * width];
        for r in 0..cm {
            let minute = tag.t1 - cm as i64 + r as i64;
            let i = minute - frame.start;
            if i < 0 || i as usize >= frame.len() {
                continue;
            }
            let (vals, ok) = frame.row(i as usize);
            for c in 0..width {
                if ok[c] {
                    context[r * width + c] = vals[c];
                    context_valid[r * width + c] = true;
                }
            }
        }
        out.push(AnchoredExample {
            id,
            user_id: tag.user_id.clone(),
            tag_index,
            tag_name: tag.name.clone(),
            category: tag.category,
            t0: tag.t0,
            t1: tag.t1,
            context,
            context_valid,
            feature_width: width,
            targets,
        });
    }
    (out, rejections)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub test: f64,
    pub validation: f64,
    /// Users with fewer examples contribute to train only.
    pub min_examples: usize,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            test: 0.20,
            validation: 0.15,
            min_examples: 3,
        }
    }
}

fn ceil_frac(n: usize, frac: f64) -> usize {
    ((n as f64 * frac) - 1e-9).ceil().max(0.0) as usize
}

/// Per-user chronological split. `keys[i] = (user, end minute)`; output is
/// aligned with `keys`. Examples sharing an end minute across the test
/// boundary are kept out of test.
pub fn split_leak_safe(keys: &[(&str, Minute)], fractions: &SplitFractions) -> Vec<Split> {
    let mut out = vec![Split::Train; keys.len()];
    let mut users: Vec<&str> = keys.iter().map(|k| k.0).collect();
    users.sort_unstable();
    users.dedup();
    for user in users {
        let mut idx: Vec<usize> = (0..keys.len()).filter(|&i| keys[i].0 == user).collect();
        let n = idx.len();
        if n < fractions.min_examples {
            continue;
        }
        idx.sort_by_key(|&i| (keys[i].1, i));
        let mut n_test = ceil_frac(n, fractions.test).min(n);
        while n_test > 0 && n_test < n && keys[idx[n - n_test]].1 == keys[idx[n - n_test - 1]].1 {
            n_test -= 1;
        }
        let n_val = ceil_frac(n, fractions.validation).min(n - n_test);
        for (rank, &i) in idx.iter().enumerate() {
            out[i] = if rank >= n - n_test {
                Split::Test
            } else if rank >= n - n_test - n_val {
                Split::Validation
            } else {
                Split::Train
            };
        }
    }
    out
}
