//! RMSSD from beat intervals and the per-minute context features consumed
//! by the forecaster.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{LocalClock, Minute, MS_PER_MINUTE};
use crate::error::{Error, Result};
use crate::ingest::{BbiEvent, Channel, MinuteGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmssdParams {
    pub window_ms: i64,
    pub step_ms: i64,
    /// Minimum successive differences in a window; 0 disables the floor.
    pub min_intervals: usize,
    /// A recording gap longer than this touching the window invalidates it.
    pub max_gap_ms: i64,
    /// Beats further apart than this are not differenced.
    pub adjacency_ms: i64,
}

impl Default for RmssdParams {
    fn default() -> Self {
        RmssdParams {
            window_ms: 15 * MS_PER_MINUTE,
            step_ms: 30_000,
            min_intervals: 20,
            max_gap_ms: 30 * MS_PER_MINUTE,
            adjacency_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmssdSeries {
    pub start: Minute,
    pub rmssd: Channel,
    /// Smallest difference count among the updates averaged into each minute.
    pub intervals: Vec<usize>,
}

/// RMSSD of a contiguous run of intervals.
pub fn rmssd_of_intervals(intervals: &[f64]) -> Option<f64> {
    if intervals.len() < 2 {
        return None;
    }
    let n = intervals.len() - 1;
    let ss: f64 = intervals.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Some((ss / n as f64).sqrt())
}

/// RMSSD for the trailing window `(end_ms - window, end_ms]`.
/// Returns `(value, N)` or `None` when the window fails the validity rules.
pub fn rmssd_window(events: &[BbiEvent], long_gaps: &[(i64, i64)], end_ms: i64, params: &RmssdParams) -> Option<(f64, usize)> {
    let start_ms = end_ms - params.window_ms;
    // A long gap (a, b) overlaps the window when a < end && b > start.
    let g = long_gaps.partition_point(|&(_, b)| b <= start_ms);
    if long_gaps.get(g).is_some_and(|&(a, _)| a < end_ms) {
        return None;
    }
    let lo = events.partition_point(|e| e.t_ms <= start_ms);
    let hi = events.partition_point(|e| e.t_ms <= end_ms);
    if hi <= lo + 1 {
        return None;
    }
    let mut ss = 0.0;
    let mut n = 0usize;
    for i in lo + 1..hi {
        let (prev, cur) = (events[i - 1], events[i]);
        if cur.t_ms - prev.t_ms > params.adjacency_ms {
            continue;
        }
        let d = cur.interval_ms - prev.interval_ms;
        ss += d * d;
        n += 1;
    }
    if n == 0 || n < params.min_intervals {
        return None;
    }
    Some(((ss / n as f64).sqrt(), n))
}

pub fn long_gaps(events: &[BbiEvent], max_gap_ms: i64) -> Vec<(i64, i64)> {
    events
        .windows(2)
        .filter(|w| w[1].t_ms - w[0].t_ms > max_gap_ms)
        .map(|w| (w[0].t_ms, w[1].t_ms))
        .collect()
}

/// Rolling RMSSD on `len` minutes starting at `start`. Each minute averages
/// the valid updates whose windows end inside it.
pub fn compute_rmssd(events: &[BbiEvent], start: Minute, len: usize, params: &RmssdParams) -> RmssdSeries {
    let mut rmssd = Channel::invalid(len);
    let mut intervals = vec![0; len];
    if events.is_empty() {
        return RmssdSeries { start, rmssd, intervals };
    }
    let gaps = long_gaps(events, params.max_gap_ms);
    let per_minute = (MS_PER_MINUTE / params.step_ms).max(1);
    for (i, n_slot) in intervals.iter_mut().enumerate() {
        let minute_start = (start + i as i64) * MS_PER_MINUTE;
        let mut sum = 0.0;
        let mut count = 0;
        let mut min_n = usize::MAX;
        for s in 1..=per_minute {
            if let Some((v, n)) = rmssd_window(events, &gaps, minute_start + s * params.step_ms, params) {
                sum += v;
                count += 1;
                min_n = min_n.min(n);
            }
        }
        if count > 0 {
            rmssd.set(i, sum / count as f64);
            *n_slot = min_n;
        }
    }
    RmssdSeries { start, rmssd, intervals }
}

/// Mean beat interval per minute; invalid where no beat falls in the minute.
pub fn bbi_minute_means(events: &[BbiEvent], start: Minute, len: usize) -> Channel {
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for e in events {
        let i = e.t_ms.div_euclid(MS_PER_MINUTE) - start;
        if i >= 0 && (i as usize) < len {
            sums[i as usize] += e.interval_ms;
            counts[i as usize] += 1;
        }
    }
    let mut ch = Channel::invalid(len);
    for i in 0..len {
        if counts[i] > 0 {
            ch.set(i, sums[i] / counts[i] as f64);
        }
    }
    ch
}

/// OLS slope over the valid points of a trailing span, x in minutes.
pub fn trailing_slope(values: &[f64], valid: &[bool]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .zip(valid)
        .enumerate()
        .filter(|(_, (_, ok))| **ok)
        .map(|(j, (v, _))| (j as f64, *v))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Slope at each minute over the trailing `span` minutes (current included).
pub fn compute_slope(ch: &Channel, span: usize) -> Channel {
    let len = ch.len();
    let mut out = Channel::invalid(len);
    for i in 0..len {
        let lo = (i + 1).saturating_sub(span);
        // Missing history before the grid start counts as invalid points,
        // so x positions stay aligned with the span.
        let pad = span - (i + 1 - lo);
        let mut vals = vec![0.0; pad];
        let mut ok = vec![false; pad];
        vals.extend_from_slice(&ch.values[lo..=i]);
        ok.extend_from_slice(&ch.valid[lo..=i]);
        if let Some(s) = trailing_slope(&vals, &ok) {
            out.set(i, s);
        }
    }
    out
}

/// `(tod_sin, tod_cos, dow_sin, dow_cos)` with Monday as day 0.
pub fn encode_time(m: Minute, clock: LocalClock) -> [f64; 4] {
    let tod = TAU * clock.minute_of_day(m) as f64 / 1440.0;
    let dow = TAU * clock.day_of_week(m) as f64 / 7.0;
    [tod.sin(), tod.cos(), dow.sin(), dow.cos()]
}

pub const FEATURE_VERSION: u32 = 1;

pub const FEATURE_NAMES: [&str; 18] = [
    "hr",
    "rmssd",
    "respiration",
    "stress",
    "steps",
    "hr_slope5",
    "hr_slope15",
    "rmssd_slope5",
    "rmssd_slope15",
    "respiration_slope5",
    "respiration_slope15",
    "stress_slope5",
    "stress_slope15",
    "tod_sin",
    "tod_cos",
    "dow_sin",
    "dow_cos",
    "sleep_score",
];

pub const FEATURE_WIDTH: usize = FEATURE_NAMES.len();

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub version: u32,
    pub names: Vec<String>,
}

impl Default for FeatureMeta {
    fn default() -> Self {
        FeatureMeta {
            version: FEATURE_VERSION,
            names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl FeatureMeta {
    pub fn width(&self) -> usize {
        self.names.len()
    }
}

/// Row-major per-minute feature matrix with a per-cell validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub start: Minute,
    pub meta: FeatureMeta,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FeatureFrame {
    pub fn width(&self) -> usize {
        self.meta.width()
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.width().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[f64], &[bool]) {
        let w = self.width();
        (&self.values[i * w..(i + 1) * w], &self.valid[i * w..(i + 1) * w])
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.meta.names.iter().position(|n| n == name)
    }

    pub fn get(&self, i: usize, col: usize) -> Option<f64> {
        let w = self.width();
        self.valid[i * w + col].then(|| self.values[i * w + col])
    }
}

pub fn build_feature_frame(grid: &MinuteGrid, rmssd: &RmssdSeries, sleep: &BTreeMap<NaiveDate, f64>) -> Result<FeatureFrame> {
    if rmssd.start != grid.start || rmssd.rmssd.len() != grid.len() {
        return Err(Error::IndexMismatch(format!(
            "grid [{}, +{}) vs rmssd [{}, +{})",
            grid.start,
            grid.len(),
            rmssd.start,
            rmssd.rmssd.len()
        )));
    }
    let len = grid.len();
    let raw: [&Channel; 5] = [&grid.hr, &rmssd.rmssd, &grid.respiration, &grid.stress, &grid.steps];
    let slopes: Vec<Channel> = [&grid.hr, &rmssd.rmssd, &grid.respiration, &grid.stress]
        .iter()
        .flat_map(|ch| [compute_slope(ch, 5), compute_slope(ch, 15)])
        .collect();
    let w = FEATURE_WIDTH;
    let mut values = vec![0.0; len * w];
    let mut valid = vec![false; len * w];
    for i in 0..len {
        let row = &mut values[i * w..(i + 1) * w];
        let mask = &mut valid[i * w..(i + 1) * w];
        let cols = raw.iter().copied().chain(slopes.iter());
        for (c, ch) in cols.enumerate() {
            if let Some(v) = ch.get(i) {
                row[c] = v;
                mask[c] = true;
            } else {
                row[c] = f64::NAN;
            }
        }
        let m = grid.minute_at(i);
        let enc = encode_time(m, grid.clock);
        for (j, v) in enc.iter().enumerate() {
            row[13 + j] = *v;
            mask[13 + j] = true;
        }
        match sleep.get(&grid.clock.local_date(m)) {
            Some(s) => {
                row[17] = *s;
                mask[17] = true;
            }
            None => row[17] = f64::NAN,
        }
    }
    Ok(FeatureFrame {
        start: grid.start,
        meta: FeatureMeta::default(),
        values,
        valid,
    })
}

/// Columnar text: header `minute,<names>`, empty cells for invalid values.
pub fn write_frame(frame: &FeatureFrame) -> String {
    let mut s = String::from("minute");
    for n in &frame.meta.names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for i in 0..frame.len() {
        s.push_str(&(frame.start + i as i64).to_string());
        let (vals, ok) = frame.row(i);
        for (v, k) in vals.iter().zip(ok) {
            s.push(',');
            if *k {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

pub fn read_frame(path: &Path, text: &str, meta: FeatureMeta) -> Result<FeatureFrame> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::malformed(path, "empty frame"))?;
    let expected = std::iter::once("minute".to_string()).chain(meta.names.iter().cloned()).collect::<Vec<_>>().join(",");
    if header != expected {
        return Err(Error::malformed(path, "frame header does not match metadata"));
    }
    let w = meta.width();
    let mut start = None;
    let mut values = Vec::new();
    let mut valid = Vec::new();
    for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let mut parts = line.split(',');
        let m: i64 = parts
            .next()
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| Error::malformed(path, format!("row {i}: bad minute")))?;
        let s = *start.get_or_insert(m);
        if m != s + i as i64 {
            return Err(Error::malformed(path, format!("row {i}: non-contiguous minute")));
        }
        for _ in 0..w {
            let cell = parts.next().unwrap_or("");
            if cell.is_empty() {
                values.push(f64::NAN);
                valid.push(false);
            } else {
                values.push(cell.parse().map_err(|_| Error::malformed(path, format!("row {i}: bad value")))?);
                valid.push(true);
            }
        }
    }
    Ok(FeatureFrame {
        start: start.unwrap_or(0),
        meta,
        values,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{align_minute_grid, GridParams, Sample, StreamBundle};

    fn beats(intervals: &[f64], t0: i64) -> Vec<BbiEvent> {
        let mut t = t0;
        intervals
            .iter()
            .map(|&iv| {
                t += iv as i64;
                BbiEvent { t_ms: t, interval_ms: iv }
            })
            .collect()
    }

    #[test]
    fn toy_window_value() {
        let v = rmssd_of_intervals(&[800.0, 810.0, 790.0, 805.0]).unwrap();
        assert!((v - 15.546).abs() < 1e-3, "{v}");
        // Same window through the rolling path with the floor disabled.
        let ev = beats(&[800.0, 810.0, 790.0, 805.0], 0);
        let params = RmssdParams {
            min_intervals: 0,
            ..Default::default()
        };
        let (w, n) = rmssd_window(&ev, &[], 60_000, &params).unwrap();
        assert_eq!(n, 3);
        assert!((w - v).abs() < 1e-12);
    }

    #[test]
    fn constant_intervals_give_zero() {
        let ev = beats(&vec![800.0; 15 * 75], 0);
        let s = compute_rmssd(&ev, 0, 16, &RmssdParams::default());
        assert_eq!(s.rmssd.get(15), Some(0.0));
    }

    #[test]
    fn nineteen_intervals_invalid() {
        // 20 beats -> 19 successive differences.
        let ev = beats(&[800.0, 820.0].repeat(10), 0);
        let params = RmssdParams::default();
        assert!(rmssd_window(&ev, &[], 60_000, &params).is_none());
        let ev = beats(&[800.0, 820.0].repeat(10).into_iter().chain([800.0]).collect::<Vec<_>>(), 0);
        assert_eq!(rmssd_window(&ev, &[], 60_000, &params).map(|x| x.1), Some(20));
    }

    #[test]
    fn non_adjacent_beats_not_differenced() {
        let mut ev = beats(&[800.0; 30], 0);
        // Drop a stretch so the next beat lands 6 s after its predecessor.
        let jump = ev[10].t_ms + 6_000;
        for (k, e) in ev.iter_mut().skip(11).enumerate() {
            e.t_ms = jump + k as i64 * 800;
        }
        ev[11].interval_ms = 1_500.0;
        let params = RmssdParams {
            min_intervals: 0,
            ..Default::default()
        };
        let (v, n) = rmssd_window(&ev, &[], ev.last().unwrap().t_ms, &params).unwrap();
        // The 11->12 difference (700 ms) is still counted; only 10->11 is skipped.
        assert_eq!(n, 28);
        assert!(v > 0.0);
    }

    #[test]
    fn long_gap_invalidates_window() {
        let mut ev = beats(&[800.0; 100], 0);
        let last = ev.last().unwrap().t_ms;
        ev.extend(beats(&[800.0; 100], last + 31 * MS_PER_MINUTE));
        let gaps = long_gaps(&ev, RmssdParams::default().max_gap_ms);
        assert_eq!(gaps.len(), 1);
        let end = ev.last().unwrap().t_ms;
        assert!(rmssd_window(&ev, &gaps, end, &RmssdParams::default()).is_none());
    }

    #[test]
    fn empty_bbi_fully_invalid() {
        let s = compute_rmssd(&[], 0, 5, &RmssdParams::default());
        assert!(s.rmssd.valid.iter().all(|v| !v));
    }

    #[test]
    fn slope_examples() {
        let line = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(trailing_slope(&line, &[true; 5]), Some(1.0));
        assert_eq!(trailing_slope(&[7.0; 5], &[true; 5]), Some(0.0));
        assert_eq!(trailing_slope(&[2.0, 0.0, 4.0, 0.0], &[true, false, true, false]), None);
    }

    #[test]
    fn compute_slope_uses_trailing_span() {
        let mut ch = Channel::invalid(20);
        for i in 0..20 {
            ch.set(i, 2.0 * i as f64);
        }
        let s5 = compute_slope(&ch, 5);
        assert!(s5.get(0).is_none() && s5.get(1).is_none());
        assert!((s5.get(2).unwrap() - 2.0).abs() < 1e-12);
        assert!((s5.get(19).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn time_encoding_examples() {
        let clock = LocalClock::utc();
        // 2024-03-04 00:00 UTC is a Monday.
        let monday = clock.midnight_of(NaiveDate::from_ymd_opt(2024, 3, 4).unwrap());
        let e = encode_time(monday, clock);
        assert!(e[0].abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);
        assert!(e[2].abs() < 1e-12 && (e[3] - 1.0).abs() < 1e-12);
        let six = encode_time(monday + 360, clock);
        assert!((six[0] - 1.0).abs() < 1e-12 && six[1].abs() < 1e-12);
        let eighteen = encode_time(monday + 18 * 60, clock);
        assert!((eighteen[0] + 1.0).abs() < 1e-12 && eighteen[1].abs() < 1e-12);
    }

    fn small_grid(len: i64) -> MinuteGrid {
        let bundle = StreamBundle {
            user_id: "u".into(),
            hr: (0..len).map(|m| Sample { minute: m, value: 60.0 + m as f64 }).collect(),
            ..Default::default()
        };
        align_minute_grid(&bundle, LocalClock::utc(), GridParams::default()).unwrap()
    }

    #[test]
    fn frame_shape_and_masks() {
        let grid = small_grid(10);
        let mut rm = compute_rmssd(&[], grid.start, grid.len(), &RmssdParams::default());
        rm.rmssd.set(3, 40.0);
        let mut sleep = BTreeMap::new();
        sleep.insert(NaiveDate::from_ymd_opt(1970, 1, 2).unwrap(), 80.0);
        let f = build_feature_frame(&grid, &rm, &sleep).unwrap();
        assert_eq!(f.len(), 10);
        assert_eq!(f.width(), FEATURE_WIDTH);
        let rmssd_col = f.column_index("rmssd").unwrap();
        let hr_col = f.column_index("hr").unwrap();
        assert_eq!(f.get(3, rmssd_col), Some(40.0));
        assert_eq!(f.get(4, rmssd_col), None);
        assert_eq!(f.get(4, hr_col), Some(64.0));
        // No sleep score for 1970-01-01.
        let sleep_col = f.column_index("sleep_score").unwrap();
        assert!((0..10).all(|i| f.get(i, sleep_col).is_none()));
    }

    #[test]
    fn frame_index_mismatch() {
        let grid = small_grid(10);
        let rm = compute_rmssd(&[], grid.start + 1, grid.len(), &RmssdParams::default());
        assert!(matches!(build_feature_frame(&grid, &rm, &BTreeMap::new()), Err(Error::IndexMismatch(_))));
    }

    #[test]
    fn frame_text_round_trip() {
        let grid = small_grid(30);
        let rm = compute_rmssd(&[], grid.start, grid.len(), &RmssdParams::default());
        let f = build_feature_frame(&grid, &rm, &BTreeMap::new()).unwrap();
        let text = write_frame(&f);
        let back = read_frame(Path::new("f.csv"), &text, FeatureMeta::default()).unwrap();
        assert_eq!(back.valid, f.valid);
        for (a, b) in back.values.iter().zip(&f.values) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }
}
