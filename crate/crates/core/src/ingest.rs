//! Raw stream and tag parsing, validation, and alignment onto a per-user
//! 1-minute grid.
//!
//! File layout, one directory per user:
//!
//! | file              | header                          | timestamp            |
//! |-------------------|---------------------------------|----------------------|
//! | `bbi.csv`         | `timestamp,bbi_ms`              | epoch milliseconds   |
//! | `hr.csv`          | `timestamp,hr_bpm`              | ISO-8601 minute      |
//! | `steps.csv`       | `timestamp,steps`               | ISO-8601 minute      |
//! | `respiration.csv` | `timestamp,respiration_brpm`    | ISO-8601 minute      |
//! | `stress.csv`      | `timestamp,stress`              | ISO-8601 minute      |
//! | `sleep.csv`       | `timestamp,sleep_score`         | ISO-8601 date        |
//! | `tags.csv`        | `name,category,start,end,expected_effect` | ISO-8601 minute |
//!
//! ISO timestamps without an explicit offset are read in the configured
//! local clock; the writer always emits UTC (`...Z`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::domain::{Category, ExpectedEffect, LocalClock, Minute, MS_PER_MINUTE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbiEvent {
    /// Beat time, epoch milliseconds.
    pub t_ms: i64,
    pub interval_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub minute: Minute,
    pub value: f64,
}

/// One user's raw streams after validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamBundle {
    pub user_id: String,
    pub bbi: Vec<BbiEvent>,
    pub hr: Vec<Sample>,
    pub steps: Vec<Sample>,
    pub respiration: Vec<Sample>,
    pub stress: Vec<Sample>,
    pub sleep: BTreeMap<NaiveDate, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRecord {
    pub user_id: String,
    pub name: String,
    pub category: Category,
    pub t0: Minute,
    pub t1: Minute,
    pub expected_effect: Option<ExpectedEffect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Bbi,
    Hr,
    Steps,
    Respiration,
    Stress,
    Sleep,
}

impl StreamKind {
    pub const ALL: [StreamKind; 6] = [
        StreamKind::Bbi,
        StreamKind::Hr,
        StreamKind::Steps,
        StreamKind::Respiration,
        StreamKind::Stress,
        StreamKind::Sleep,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            StreamKind::Bbi => "bbi.csv",
            StreamKind::Hr => "hr.csv",
            StreamKind::Steps => "steps.csv",
            StreamKind::Respiration => "respiration.csv",
            StreamKind::Stress => "stress.csv",
            StreamKind::Sleep => "sleep.csv",
        }
    }

    pub fn value_column(self) -> &'static str {
        match self {
            StreamKind::Bbi => "bbi_ms",
            StreamKind::Hr => "hr_bpm",
            StreamKind::Steps => "steps",
            StreamKind::Respiration => "respiration_brpm",
            StreamKind::Stress => "stress",
            StreamKind::Sleep => "sleep_score",
        }
    }

    pub fn header(self) -> String {
        format!("timestamp,{}", self.value_column())
    }

    fn in_range(self, v: f64) -> bool {
        if !v.is_finite() {
            return false;
        }
        match self {
            StreamKind::Bbi | StreamKind::Hr | StreamKind::Respiration => v > 0.0,
            StreamKind::Steps => v >= 0.0,
            StreamKind::Stress | StreamKind::Sleep => (0.0..=100.0).contains(&v),
        }
    }
}

pub const TAG_HEADER: &str = "name,category,start,end,expected_effect";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub rows: usize,
    pub kept: usize,
    pub dropped: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl StreamReport {
    fn drop(&mut self, reason: &str) {
        self.dropped += 1;
        *self.reasons.entry(reason.to_string()).or_default() += 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub rows: usize,
    pub kept: usize,
    pub rejected: usize,
    pub warnings: Vec<String>,
    pub rejections: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub user_id: String,
    pub streams: BTreeMap<StreamKind, StreamReport>,
    pub tags: Option<TagReport>,
}

/// Parses an ISO-8601 minute timestamp, a bare epoch-minute integer, or a
/// date (read as local midnight).
pub fn parse_minute(s: &str, clock: LocalClock) -> Option<Minute> {
    let s = s.trim();
    if let Ok(m) = s.parse::<i64>() {
        return Some(m);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp().div_euclid(60));
    }
    for fmt in ["%Y-%m-%dT%H:%MZ", "%Y-%m-%dT%H:%M:%SZ"] {
        if let Ok(ndt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(ndt.and_utc().timestamp().div_euclid(60));
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(ndt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(ndt.and_utc().timestamp().div_euclid(60) - clock.utc_offset_minutes as i64);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(clock.midnight_of(d));
    }
    None
}

pub fn format_minute(m: Minute) -> String {
    match DateTime::from_timestamp(m * 60, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%MZ").to_string(),
        None => m.to_string(),
    }
}

fn check_header(path: &Path, found: Option<&csv::StringRecord>, expected: &str) -> Result<()> {
    let found_s = found.map(|r| r.iter().map(str::trim).collect::<Vec<_>>().join(",")).unwrap_or_default();
    if found_s != expected {
        return Err(Error::BadHeader {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found_s,
        });
    }
    Ok(())
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

/// Minute-cadence stream text -> validated samples.
pub fn parse_minute_stream(
    kind: StreamKind,
    path: &Path,
    text: &str,
    clock: LocalClock,
) -> Result<(Vec<Sample>, StreamReport)> {
    let mut rdr = csv_reader(text);
    let header = rdr.headers().ok().cloned();
    check_header(path, header.as_ref(), &kind.header())?;
    let mut report = StreamReport::default();
    let mut out: Vec<Sample> = Vec::new();
    for rec in rdr.records() {
        report.rows += 1;
        let Ok(rec) = rec else {
            report.drop("malformed");
            continue;
        };
        let (Some(ts), Some(val)) = (rec.get(0), rec.get(1)) else {
            report.drop("malformed");
            continue;
        };
        let (Some(minute), Ok(value)) = (parse_minute(ts, clock), val.parse::<f64>()) else {
            report.drop("malformed");
            continue;
        };
        if !kind.in_range(value) {
            report.drop("out_of_range");
            continue;
        }
        if out.last().is_some_and(|last| minute <= last.minute) {
            report.drop("non_monotone");
            continue;
        }
        out.push(Sample { minute, value });
    }
    report.kept = out.len();
    Ok((out, report))
}

pub fn parse_bbi_stream(path: &Path, text: &str) -> Result<(Vec<BbiEvent>, StreamReport)> {
    let mut rdr = csv_reader(text);
    let header = rdr.headers().ok().cloned();
    check_header(path, header.as_ref(), &StreamKind::Bbi.header())?;
    let mut report = StreamReport::default();
    let mut out: Vec<BbiEvent> = Vec::new();
    for rec in rdr.records() {
        report.rows += 1;
        let Ok(rec) = rec else {
            report.drop("malformed");
            continue;
        };
        let parsed = rec
            .get(0)
            .and_then(|t| t.parse::<i64>().ok())
            .zip(rec.get(1).and_then(|v| v.parse::<f64>().ok()));
        let Some((t_ms, interval_ms)) = parsed else {
            report.drop("malformed");
            continue;
        };
        if !StreamKind::Bbi.in_range(interval_ms) {
            report.drop("out_of_range");
            continue;
        }
        if out.last().is_some_and(|last| t_ms <= last.t_ms) {
            report.drop("non_monotone");
            continue;
        }
        out.push(BbiEvent { t_ms, interval_ms });
    }
    report.kept = out.len();
    Ok((out, report))
}

pub fn parse_sleep_stream(
    path: &Path,
    text: &str,
) -> Result<(BTreeMap<NaiveDate, f64>, StreamReport)> {
    let mut rdr = csv_reader(text);
    let header = rdr.headers().ok().cloned();
    check_header(path, header.as_ref(), &StreamKind::Sleep.header())?;
    let mut report = StreamReport::default();
    let mut out = BTreeMap::new();
    let mut last: Option<NaiveDate> = None;
    for rec in rdr.records() {
        report.rows += 1;
        let Ok(rec) = rec else {
            report.drop("malformed");
            continue;
        };
        let parsed = rec
            .get(0)
            .and_then(|d| NaiveDate::parse_from_str(d.get(..10).unwrap_or(d), "%Y-%m-%d").ok())
            .zip(rec.get(1).and_then(|v| v.parse::<f64>().ok()));
        let Some((date, score)) = parsed else {
            report.drop("malformed");
            continue;
        };
        if !StreamKind::Sleep.in_range(score) {
            report.drop("out_of_range");
            continue;
        }
        if last.is_some_and(|l| date <= l) {
            report.drop("non_monotone");
            continue;
        }
        last = Some(date);
        out.insert(date, score);
    }
    report.kept = out.len();
    Ok((out, report))
}

fn read_required(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

/// Reads the six stream files in `user_dir`.
pub fn parse_streams(user_dir: &Path, user_id: &str, clock: LocalClock) -> Result<(StreamBundle, ParseReport)> {
    let mut bundle = StreamBundle {
        user_id: user_id.to_string(),
        ..Default::default()
    };
    let mut report = ParseReport {
        user_id: user_id.to_string(),
        ..Default::default()
    };
    for kind in StreamKind::ALL {
        let path = user_dir.join(kind.file_name());
        let text = read_required(&path)?;
        let stream_report = match kind {
            StreamKind::Bbi => {
                let (v, r) = parse_bbi_stream(&path, &text)?;
                bundle.bbi = v;
                r
            }
            StreamKind::Sleep => {
                let (v, r) = parse_sleep_stream(&path, &text)?;
                bundle.sleep = v;
                r
            }
            _ => {
                let (v, r) = parse_minute_stream(kind, &path, &text, clock)?;
                match kind {
                    StreamKind::Hr => bundle.hr = v,
                    StreamKind::Steps => bundle.steps = v,
                    StreamKind::Respiration => bundle.respiration = v,
                    StreamKind::Stress => bundle.stress = v,
                    _ => unreachable!(),
                }
                r
            }
        };
        if stream_report.dropped > 0 {
            warn!(
                "{user_id}/{}: dropped {} of {} rows",
                kind.file_name(),
                stream_report.dropped,
                stream_report.rows
            );
        }
        report.streams.insert(kind, stream_report);
    }
    Ok((bundle, report))
}

pub fn parse_tags_str(user_id: &str, path: &Path, text: &str, clock: LocalClock) -> Result<(Vec<TagRecord>, TagReport)> {
    let mut rdr = csv_reader(text);
    let header = rdr.headers().ok().cloned();
    check_header(path, header.as_ref(), TAG_HEADER)?;
    let mut report = TagReport::default();
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        report.rows += 1;
        let line = row + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.rejected += 1;
                report.rejections.push(format!("line {line}: malformed ({e})"));
                continue;
            }
        };
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let name = field(0);
        let cat_text = field(1);
        let category = match Category::parse_label(&cat_text) {
            Some(c) => c,
            None => {
                let msg = format!("line {line}: unknown category `{cat_text}` mapped to Other");
                warn!("{user_id}: {msg}");
                report.warnings.push(msg);
                Category::Other
            }
        };
        let (Some(t0), Some(t1)) = (parse_minute(&field(2), clock), parse_minute(&field(3), clock)) else {
            report.rejected += 1;
            report.rejections.push(format!("line {line}: unparseable start/end"));
            continue;
        };
        if t0 >= t1 {
            report.rejected += 1;
            report.rejections.push(format!("line {line}: start {t0} not before end {t1}"));
            continue;
        }
        out.push(TagRecord {
            user_id: user_id.to_string(),
            name,
            category,
            t0,
            t1,
            expected_effect: ExpectedEffect::parse(&field(4)),
        });
    }
    sort_tags(&mut out);
    report.kept = out.len();
    Ok((out, report))
}

/// Sorted by (user_id, t1), stable for equal keys.
pub fn sort_tags(tags: &mut [TagRecord]) {
    tags.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.t1.cmp(&b.t1)));
}

pub fn parse_tags(user_dir: &Path, user_id: &str, clock: LocalClock) -> Result<(Vec<TagRecord>, TagReport)> {
    let path = user_dir.join("tags.csv");
    let text = read_required(&path)?;
    parse_tags_str(user_id, &path, &text, clock)
}

// ---------------------------------------------------------------------------
// Writers (the synthetic generator emits these).

pub fn write_minute_stream(kind: StreamKind, samples: &[Sample]) -> String {
    let mut s = String::with_capacity(samples.len() * 24);
    s.push_str(&kind.header());
    s.push('\n');
    for x in samples {
        s.push_str(&format_minute(x.minute));
        s.push(',');
        s.push_str(&x.value.to_string());
        s.push('\n');
    }
    s
}

pub fn write_bbi_stream(events: &[BbiEvent]) -> String {
    let mut s = String::with_capacity(events.len() * 20);
    s.push_str(&StreamKind::Bbi.header());
    s.push('\n');
    for e in events {
        s.push_str(&e.t_ms.to_string());
        s.push(',');
        s.push_str(&e.interval_ms.to_string());
        s.push('\n');
    }
    s
}

pub fn write_sleep_stream(sleep: &BTreeMap<NaiveDate, f64>) -> String {
    let mut s = StreamKind::Sleep.header();
    s.push('\n');
    for (d, v) in sleep {
        s.push_str(&format!("{},{}\n", d.format("%Y-%m-%d"), v));
    }
    s
}

pub fn write_tags(tags: &[TagRecord]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(TAG_HEADER.split(',')).expect("in-memory write");
    for t in tags {
        w.write_record([
            t.name.as_str(),
            t.category.label(),
            &format_minute(t.t0),
            &format_minute(t.t1),
            t.expected_effect.map_or("", |e| e.as_str()),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
}

pub fn write_user_dir(dir: &Path, bundle: &StreamBundle, tags: &[TagRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(StreamKind::Bbi.file_name()), write_bbi_stream(&bundle.bbi))?;
    for (kind, samples) in [
        (StreamKind::Hr, &bundle.hr),
        (StreamKind::Steps, &bundle.steps),
        (StreamKind::Respiration, &bundle.respiration),
        (StreamKind::Stress, &bundle.stress),
    ] {
        fs::write(dir.join(kind.file_name()), write_minute_stream(kind, samples))?;
    }
    fs::write(dir.join(StreamKind::Sleep.file_name()), write_sleep_stream(&bundle.sleep))?;
    fs::write(dir.join("tags.csv"), write_tags(tags))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Minute grid

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    /// NaN wherever `valid` is false.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Channel {
    pub fn invalid(len: usize) -> Self {
        Channel {
            values: vec![f64::NAN; len],
            valid: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        if *self.valid.get(i)? {
            Some(self.values[i])
        } else {
            None
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        self.values[i] = v;
        self.valid[i] = true;
    }

    pub fn clear(&mut self, i: usize) {
        self.values[i] = f64::NAN;
        self.valid[i] = false;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinuteGrid {
    pub user_id: String,
    pub start: Minute,
    pub clock: LocalClock,
    pub hr: Channel,
    pub steps: Channel,
    pub respiration: Channel,
    pub stress: Channel,
    /// Grid indices at which a new local day begins (index 0 excluded).
    pub day_starts: Vec<usize>,
}

impl MinuteGrid {
    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn minute_at(&self, i: usize) -> Minute {
        self.start + i as i64
    }

    pub fn index_of(&self, m: Minute) -> Option<usize> {
        let i = m - self.start;
        (i >= 0 && (i as usize) < self.len()).then_some(i as usize)
    }

    pub fn end(&self) -> Minute {
        self.start + self.len() as i64
    }

    pub fn channels(&self) -> [(&'static str, &Channel); 4] {
        [
            ("hr", &self.hr),
            ("steps", &self.steps),
            ("respiration", &self.respiration),
            ("stress", &self.stress),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    /// Longest run of missing minutes bridged by linear interpolation.
    pub interp_max_gap: usize,
    /// Maximum minutes an observation is carried forward.
    pub carry_cap: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            interp_max_gap: 10,
            carry_cap: 6,
        }
    }
}

fn interpolate_channel(samples: &[Sample], start: Minute, len: usize, max_gap: usize) -> Channel {
    let mut ch = Channel::invalid(len);
    for s in samples {
        ch.set((s.minute - start) as usize, s.value);
    }
    for pair in samples.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let missing = (b.minute - a.minute - 1) as usize;
        if missing == 0 || missing > max_gap {
            continue;
        }
        let span = (b.minute - a.minute) as f64;
        for j in 1..=missing {
            let frac = j as f64 / span;
            let v = a.value + (b.value - a.value) * frac;
            ch.set((a.minute - start) as usize + j, v);
        }
    }
    ch
}

fn carry_forward_channel(samples: &[Sample], start: Minute, len: usize, cap: usize, clock: LocalClock) -> Channel {
    let mut ch = Channel::invalid(len);
    for (i, s) in samples.iter().enumerate() {
        let base = (s.minute - start) as usize;
        ch.set(base, s.value);
        let next = samples.get(i + 1).map(|n| n.minute);
        let day = clock.local_day(s.minute);
        for j in 1..=cap as i64 {
            let m = s.minute + j;
            if next.is_some_and(|n| m >= n) || clock.local_day(m) != day {
                break;
            }
            let idx = (m - start) as usize;
            if idx >= len {
                break;
            }
            ch.set(idx, s.value);
        }
    }
    ch
}

/// Aligns HR/steps (linear interpolation over short gaps) and
/// respiration/stress (capped carry-forward within a local day) onto one
/// minute index spanning every observation, BBI included.
pub fn align_minute_grid(bundle: &StreamBundle, clock: LocalClock, params: GridParams) -> Result<MinuteGrid> {
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for stream in [&bundle.hr, &bundle.steps, &bundle.respiration, &bundle.stress] {
        if let (Some(f), Some(l)) = (stream.first(), stream.last()) {
            lo = lo.min(f.minute);
            hi = hi.max(l.minute);
        }
    }
    if let (Some(f), Some(l)) = (bundle.bbi.first(), bundle.bbi.last()) {
        lo = lo.min(f.t_ms.div_euclid(MS_PER_MINUTE));
        hi = hi.max(l.t_ms.div_euclid(MS_PER_MINUTE));
    }
    if lo > hi {
        return Err(Error::EmptyGrid(bundle.user_id.clone()));
    }
    let len = (hi - lo + 1) as usize;
    let day_starts = (1..len)
        .filter(|&i| clock.local_day(lo + i as i64) != clock.local_day(lo + i as i64 - 1))
        .collect();
    Ok(MinuteGrid {
        user_id: bundle.user_id.clone(),
        start: lo,
        clock,
        hr: interpolate_channel(&bundle.hr, lo, len, params.interp_max_gap),
        steps: interpolate_channel(&bundle.steps, lo, len, params.interp_max_gap),
        respiration: carry_forward_channel(&bundle.respiration, lo, len, params.carry_cap, clock),
        stress: carry_forward_channel(&bundle.stress, lo, len, params.carry_cap, clock),
        day_starts,
    })
}

const GRID_HEADER: &str = "minute,hr,steps,respiration,stress";

fn cell(ch: &Channel, i: usize) -> String {
    ch.get(i).map(|v| v.to_string()).unwrap_or_default()
}

/// Plain-text grid: a `#` metadata line, then one row per minute; invalid
/// cells are empty.
pub fn write_grid(grid: &MinuteGrid) -> String {
    let mut s = String::with_capacity(grid.len() * 40);
    s.push_str(&format!(
        "#user_id={};start={};utc_offset_minutes={}\n",
        grid.user_id, grid.start, grid.clock.utc_offset_minutes
    ));
    s.push_str(GRID_HEADER);
    s.push('\n');
    for i in 0..grid.len() {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            grid.minute_at(i),
            cell(&grid.hr, i),
            cell(&grid.steps, i),
            cell(&grid.respiration, i),
            cell(&grid.stress, i)
        ));
    }
    s
}

pub fn read_grid(path: &Path, text: &str) -> Result<MinuteGrid> {
    let mut lines = text.lines();
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::malformed(path, "missing metadata line"))?;
    let mut user_id = String::new();
    let mut start = None;
    let mut offset = 0i32;
    for kv in meta.split(';') {
        match kv.split_once('=') {
            Some(("user_id", v)) => user_id = v.to_string(),
            Some(("start", v)) => start = v.parse::<i64>().ok(),
            Some(("utc_offset_minutes", v)) => {
                offset = v.parse().map_err(|_| Error::malformed(path, "bad utc offset"))?
            }
            _ => {}
        }
    }
    let start = start.ok_or_else(|| Error::malformed(path, "missing start"))?;
    if lines.next() != Some(GRID_HEADER) {
        return Err(Error::malformed(path, "bad grid header"));
    }
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    let len = rows.len();
    let mut chans = [
        Channel::invalid(len),
        Channel::invalid(len),
        Channel::invalid(len),
        Channel::invalid(len),
    ];
    for (i, row) in rows.iter().enumerate() {
        let mut parts = row.split(',');
        let m: i64 = parts
            .next()
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| Error::malformed(path, format!("row {i}: bad minute")))?;
        if m != start + i as i64 {
            return Err(Error::malformed(path, format!("row {i}: non-contiguous minute {m}")));
        }
        for ch in chans.iter_mut() {
            let c = parts.next().unwrap_or("");
            if !c.is_empty() {
                let v: f64 = c.parse().map_err(|_| Error::malformed(path, format!("row {i}: bad value `{c}`")))?;
                ch.set(i, v);
            }
        }
    }
    let clock = LocalClock {
        utc_offset_minutes: offset,
    };
    let day_starts = (1..len)
        .filter(|&i| clock.local_day(start + i as i64) != clock.local_day(start + i as i64 - 1))
        .collect();
    let [hr, steps, respiration, stress] = chans;
    Ok(MinuteGrid {
        user_id,
        start,
        clock,
        hr,
        steps,
        respiration,
        stress,
        day_starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("test.csv")
    }

    fn samples(pairs: &[(i64, f64)]) -> Vec<Sample> {
        pairs.iter().map(|&(minute, value)| Sample { minute, value }).collect()
    }

    #[test]
    fn hr_rows_pass_through() {
        let text = "timestamp,hr_bpm\n0,62\n1,63\n";
        let (v, r) = parse_minute_stream(StreamKind::Hr, &p(), text, LocalClock::utc()).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1], Sample { minute: 1, value: 63.0 });
        assert_eq!(r.dropped, 0);
    }

    #[test]
    fn stress_out_of_range_dropped() {
        let text = "timestamp,stress\n2024-03-04T08:00Z,40\n2024-03-04T08:03Z,140\n";
        let (v, r) = parse_minute_stream(StreamKind::Stress, &p(), text, LocalClock::utc()).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(r.dropped, 1);
        assert_eq!(r.reasons["out_of_range"], 1);
    }

    #[test]
    fn bbi_non_monotone_dropped() {
        let text = "timestamp,bbi_ms\n1000,800\n900,810\n";
        let (v, r) = parse_bbi_stream(&p(), text).unwrap();
        assert_eq!(v, vec![BbiEvent { t_ms: 1000, interval_ms: 800.0 }]);
        assert_eq!(r.reasons["non_monotone"], 1);
    }

    #[test]
    fn wrong_header_is_fatal() {
        let err = parse_bbi_stream(&p(), "time,bbi\n1,2\n").unwrap_err();
        assert!(matches!(err, Error::BadHeader { .. }));
    }

    #[test]
    fn empty_stream_is_not_fatal() {
        let (v, r) = parse_minute_stream(StreamKind::Steps, &p(), "timestamp,steps\n", LocalClock::utc()).unwrap();
        assert!(v.is_empty());
        assert_eq!(r.rows, 0);
    }

    #[test]
    fn missing_file_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse_streams(dir.path(), "u", LocalClock::utc()).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn naive_timestamps_use_local_clock() {
        let clock = LocalClock::parse("+02:00").unwrap();
        let local = parse_minute("2024-03-04T08:00", clock).unwrap();
        let utc = parse_minute("2024-03-04T06:00Z", clock).unwrap();
        assert_eq!(local, utc);
        assert_eq!(format_minute(utc), "2024-03-04T06:00Z");
    }

    #[test]
    fn tags_parse_sort_and_reject() {
        let text = "name,category,start,end,expected_effect\n\
                    run,Physical Activity: Cardio,100,130,positive\n\
                    odd,Jogging!!,150,300,\n\
                    nap,Rest & Recovery,120,200,unknown\n\
                    bad,Other,50,50,\n";
        let (tags, report) = parse_tags_str("userA", &p(), text, LocalClock::utc()).unwrap();
        assert_eq!(tags.len(), 3);
        assert_eq!(tags.iter().map(|t| t.t1).collect::<Vec<_>>(), vec![130, 200, 300]);
        assert_eq!(tags[0].category, Category::Cardio);
        assert_eq!(tags[2].category, Category::Other);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.rejected, 1);
        assert_eq!(tags[0].expected_effect, Some(ExpectedEffect::Positive));
        assert_eq!(tags[2].expected_effect, None);
    }

    #[test]
    fn tag_writer_round_trips() {
        let tags = vec![TagRecord {
            user_id: "u".into(),
            name: "walk, then tea".into(),
            category: Category::Mindful,
            t0: 28_000_000,
            t1: 28_000_030,
            expected_effect: Some(ExpectedEffect::Negative),
        }];
        let text = write_tags(&tags);
        let (back, _) = parse_tags_str("u", &p(), &text, LocalClock::utc()).unwrap();
        assert_eq!(back, tags);
    }

    fn bundle_with(hr: &[(i64, f64)], resp: &[(i64, f64)]) -> StreamBundle {
        StreamBundle {
            user_id: "u".into(),
            hr: samples(hr),
            respiration: samples(resp),
            ..Default::default()
        }
    }

    #[test]
    fn hr_linear_interpolation() {
        let g = align_minute_grid(&bundle_with(&[(0, 60.0), (3, 66.0)], &[]), LocalClock::utc(), GridParams::default()).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.hr.values, vec![60.0, 62.0, 64.0, 66.0]);
    }

    #[test]
    fn long_hr_gap_stays_invalid() {
        let g = align_minute_grid(&bundle_with(&[(0, 60.0), (12, 66.0)], &[]), LocalClock::utc(), GridParams::default()).unwrap();
        assert!((1..12).all(|i| !g.hr.valid[i]));
        let g = align_minute_grid(&bundle_with(&[(0, 60.0), (11, 66.0)], &[]), LocalClock::utc(), GridParams::default()).unwrap();
        assert!((1..11).all(|i| g.hr.valid[i]));
    }

    #[test]
    fn respiration_carry_cap() {
        let g = align_minute_grid(&bundle_with(&[], &[(0, 14.0), (9, 15.0)]), LocalClock::utc(), GridParams::default()).unwrap();
        for i in 1..=6 {
            assert_eq!(g.respiration.get(i), Some(14.0));
        }
        assert_eq!(g.respiration.get(7), None);
        assert_eq!(g.respiration.get(8), None);
        assert_eq!(g.respiration.get(9), Some(15.0));
    }

    #[test]
    fn stress_not_carried_across_midnight() {
        let clock = LocalClock::parse("-05:00").unwrap();
        let date = chrono::NaiveDate::from_ymd_opt(2024, 3, 5).unwrap();
        let midnight = clock.midnight_of(date);
        let bundle = StreamBundle {
            user_id: "u".into(),
            stress: samples(&[(midnight - 2, 30.0), (midnight + 4, 50.0)]),
            ..Default::default()
        };
        let g = align_minute_grid(&bundle, clock, GridParams::default()).unwrap();
        let at = |m: i64| g.stress.get(g.index_of(m).unwrap());
        assert_eq!(at(midnight - 1), Some(30.0));
        for m in midnight..midnight + 4 {
            assert_eq!(at(m), None, "minute {m}");
        }
        assert_eq!(g.day_starts, vec![g.index_of(midnight).unwrap()]);
    }

    #[test]
    fn empty_bundle_errors() {
        let err = align_minute_grid(&StreamBundle::default(), LocalClock::utc(), GridParams::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyGrid(_)));
    }

    #[test]
    fn grid_extent_covers_bbi() {
        let bundle = StreamBundle {
            user_id: "u".into(),
            hr: samples(&[(10, 60.0)]),
            bbi: vec![BbiEvent { t_ms: 20 * MS_PER_MINUTE + 5, interval_ms: 800.0 }],
            ..Default::default()
        };
        let g = align_minute_grid(&bundle, LocalClock::utc(), GridParams::default()).unwrap();
        assert_eq!(g.start, 10);
        assert_eq!(g.len(), 11);
    }
}
