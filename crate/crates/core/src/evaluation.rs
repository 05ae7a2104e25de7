//! Windowed directional scoring: eligible and called-only accuracy, naive
//! baselines, and called-normalized confusion matrices, pooled by minute.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{Category, Metric, Window, WindowSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    /// Actual +1, predicted -1.
    pub fn_: usize,
    /// Actual -1, predicted +1.
    pub fp: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn called(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    /// Cell percentages of called minutes in the order TP, FN, FP, TN;
    /// `None` when nothing was called.
    pub fn percentages(&self) -> Option<[f64; 4]> {
        let n = self.called();
        (n > 0).then(|| [self.tp, self.fn_, self.fp, self.tn].map(|c| 100.0 * c as f64 / n as f64))
    }

    /// Share of called minutes on the diagonal (TP + TN), rounded to one
    /// decimal.
    pub fn diagonal_pct(&self) -> Option<f64> {
        let n = self.called();
        (n > 0).then(|| pct_1dp(self.tp + self.tn, n))
    }

    /// Same as [`Confusion::percentages`], rounded to one decimal.
    pub fn rounded_percentages(&self) -> Option<[f64; 4]> {
        let n = self.called();
        (n > 0).then(|| [self.tp, self.fn_, self.fp, self.tn].map(|c| pct_1dp(c, n)))
    }
}

/// Minute tallies from which every windowed metric derives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignCounts {
    pub eligible: usize,
    pub correct: usize,
    pub called: usize,
    pub actual_up: usize,
    pub confusion: Confusion,
}

impl SignCounts {
    pub fn add(&mut self, actual: i8, predicted: i8) {
        if actual == 0 {
            return;
        }
        self.eligible += 1;
        if actual > 0 {
            self.actual_up += 1;
        }
        if predicted == actual {
            self.correct += 1;
        }
        if predicted != 0 {
            self.called += 1;
            match (actual > 0, predicted > 0) {
                (true, true) => self.confusion.tp += 1,
                (true, false) => self.confusion.fn_ += 1,
                (false, true) => self.confusion.fp += 1,
                (false, false) => self.confusion.tn += 1,
            }
        }
    }

    pub fn merge(&mut self, o: &SignCounts) {
        self.eligible += o.eligible;
        self.correct += o.correct;
        self.called += o.called;
        self.actual_up += o.actual_up;
        self.confusion.tp += o.confusion.tp;
        self.confusion.fn_ += o.confusion.fn_;
        self.confusion.fp += o.confusion.fp;
        self.confusion.tn += o.confusion.tn;
    }

    pub fn eligible_accuracy(&self) -> Option<f64> {
        ratio(self.correct, self.eligible)
    }

    pub fn called_only_accuracy(&self) -> Option<f64> {
        ratio(self.correct, self.called)
    }

    pub fn call_rate(&self) -> Option<f64> {
        ratio(self.called, self.eligible)
    }

    pub fn always_up(&self) -> Option<f64> {
        ratio(self.actual_up, self.eligible)
    }

    pub fn always_down(&self) -> Option<f64> {
        ratio(self.eligible - self.actual_up, self.eligible)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `100 * num / den` rounded to one decimal, half away from zero, computed
/// in integers so ties are exact.
pub fn pct_1dp(num: usize, den: usize) -> f64 {
    let tenths = (2000 * num as u128 + den as u128) / (2 * den as u128);
    tenths as f64 / 10.0
}

/// Rounds an arbitrary fraction to a one-decimal percentage.
pub fn round_pct(fraction: f64) -> f64 {
    let tenths = (fraction * 1000.0).round();
    tenths / 10.0
}

/// Tallies valid minutes of `window`.
pub fn counts(actual: &[i8], predicted: &[i8], valid: &[bool], window: Window) -> SignCounts {
    let mut c = SignCounts::default();
    for k in window.range() {
        if k < actual.len() && valid[k] {
            c.add(actual[k], predicted[k]);
        }
    }
    c
}

pub fn eligible_accuracy(actual: &[i8], predicted: &[i8], valid: &[bool], window: Window) -> Option<f64> {
    counts(actual, predicted, valid, window).eligible_accuracy()
}

pub fn called_only_accuracy(actual: &[i8], predicted: &[i8], valid: &[bool], window: Window) -> Option<f64> {
    counts(actual, predicted, valid, window).called_only_accuracy()
}

/// Eligible accuracy of the constant predictor `direction` (+1 or -1).
pub fn baseline_accuracy(actual: &[i8], direction: i8, valid: &[bool], window: Window) -> Option<f64> {
    let constant = vec![direction; actual.len()];
    eligible_accuracy(actual, &constant, valid, window)
}

pub fn confusion_matrix(actual: &[i8], predicted: &[i8], valid: &[bool], window: Window) -> Confusion {
    counts(actual, predicted, valid, window).confusion
}

/// Actual and predicted signs of one intervention for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedSeries {
    pub example_id: String,
    pub user_id: String,
    pub category: Category,
    pub metric: Metric,
    pub t1: i64,
    pub actual: Vec<i8>,
    pub predicted: Vec<i8>,
    /// Label valid and not removed by the onset shift.
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    All,
    User,
    Category,
}

impl Grouping {
    pub fn key(self, s: &EvaluatedSeries) -> String {
        match self {
            Grouping::All => "all".into(),
            Grouping::User => s.user_id.clone(),
            Grouping::Category => s.category.key().into(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grouping::All => "all",
            Grouping::User => "user",
            Grouping::Category => "category",
        }
    }
}

impl std::str::FromStr for Grouping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Grouping::All),
            "user" => Ok(Grouping::User),
            "category" => Ok(Grouping::Category),
            _ => Err(format!("unknown grouping `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub grouping: Grouping,
    pub group: String,
    pub metric: Metric,
    pub window: Window,
    pub overall: bool,
    pub interventions: usize,
    pub counts: SignCounts,
    pub eligible_accuracy: Option<f64>,
    pub called_only_accuracy: Option<f64>,
    pub call_rate: Option<f64>,
    pub always_up: Option<f64>,
    pub always_down: Option<f64>,
    pub confusion_pct: Option<[f64; 4]>,
}

impl WindowReport {
    pub fn from_counts(grouping: Grouping, group: String, metric: Metric, window: Window, overall: bool, interventions: usize, c: SignCounts) -> Self {
        WindowReport {
            grouping,
            group,
            metric,
            window,
            overall,
            interventions,
            eligible_accuracy: c.eligible_accuracy(),
            called_only_accuracy: c.called_only_accuracy(),
            call_rate: c.call_rate(),
            always_up: c.always_up(),
            always_down: c.always_down(),
            confusion_pct: c.confusion.percentages(),
            counts: c,
        }
    }
}

/// Pools minutes within each group and emits one report per (group,
/// metric, window), windows first and the overall span last.
pub fn aggregate_report(series: &[EvaluatedSeries], grouping: Grouping, windows: &WindowSet) -> Vec<WindowReport> {
    let mut groups: BTreeMap<(String, Metric), Vec<&EvaluatedSeries>> = BTreeMap::new();
    for s in series {
        groups.entry((grouping.key(s), s.metric)).or_default().push(s);
    }
    let overall = windows.overall();
    let mut out = Vec::new();
    for ((group, metric), members) in groups {
        for (i, w) in windows.with_overall().into_iter().enumerate() {
            let mut c = SignCounts::default();
            for s in &members {
                c.merge(&counts(&s.actual, &s.predicted, &s.valid, w));
            }
            let is_overall = i == windows.windows.len() && w == overall;
            out.push(WindowReport::from_counts(grouping, group.clone(), metric, w, is_overall, members.len(), c));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Group metrics pool minutes across interventions.
    pub pooling: String,
    pub windows: WindowSet,
    pub reports: Vec<WindowReport>,
}

impl EvaluationReport {
    pub fn build(series: &[EvaluatedSeries], groupings: &[Grouping], windows: &WindowSet) -> Self {
        EvaluationReport {
            pooling: "pooled-minute".into(),
            windows: windows.clone(),
            reports: groupings.iter().flat_map(|g| aggregate_report(series, *g, windows)).collect(),
        }
    }

    pub fn find(&self, grouping: Grouping, group: &str, metric: Metric, window: Window) -> Option<&WindowReport> {
        self.reports
            .iter()
            .find(|r| r.grouping == grouping && r.group == group && r.metric == metric && r.window == window)
    }
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", round_pct(x))).unwrap_or_default()
}

pub const REPORT_HEADER: &str = "grouping,group,metric,window,interventions,eligible,called,correct,eligible_accuracy_pct,called_only_accuracy_pct,call_rate_pct,always_up_pct,always_down_pct,tp_pct,fn_pct,fp_pct,tn_pct";

/// Rounded report table, one row per window report.
pub fn report_csv(reports: &[WindowReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        let c = &r.counts;
        let cells = r.counts.confusion.rounded_percentages();
        let cell = |i: usize| cells.map(|p| format!("{:.1}", p[i])).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.grouping.name(),
            r.group,
            r.metric,
            r.window.label(),
            r.interventions,
            c.eligible,
            c.called,
            c.correct,
            opt_pct(r.eligible_accuracy),
            opt_pct(r.called_only_accuracy),
            opt_pct(r.call_rate),
            opt_pct(r.always_up),
            opt_pct(r.always_down),
            cell(0),
            cell(1),
            cell(2),
            cell(3),
        );
    }
    s
}

pub const BAR_HEADER: &str = "grouping,group,metric,window_order,window,eligible_accuracy_pct,called_only_accuracy_pct,always_up_pct,always_down_pct";

/// Bar-chart series: the windows in order, a divider row, then the overall
/// column.
pub fn bar_csv(reports: &[WindowReport]) -> String {
    let mut s = String::from(BAR_HEADER);
    s.push('\n');
    let mut order = 0;
    let mut last: Option<(Grouping, &str, Metric)> = None;
    for r in reports {
        let key = (r.grouping, r.group.as_str(), r.metric);
        if last != Some(key) {
            order = 0;
            last = Some(key);
        }
        if r.overall {
            let _ = writeln!(s, "{},{},{},{},divider,,,,", r.grouping.name(), r.group, r.metric, order);
            order += 1;
        }
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.grouping.name(),
            r.group,
            r.metric,
            order,
            r.window.label(),
            opt_pct(r.eligible_accuracy),
            opt_pct(r.called_only_accuracy),
            opt_pct(r.always_up),
            opt_pct(r.always_down),
        );
        order += 1;
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart for one (group, metric): eligible and called-only
/// accuracy per window, a dashed divider, then the overall column.
/// Undefined values draw no bar.
pub fn bar_svg(reports: &[&WindowReport], title: &str) -> String {
    let slot = 70.0;
    let (left, top, h) = (50.0, 30.0, 200.0);
    let cols = reports.len() as f64 + 0.5;
    let width = left + slot * cols + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
        top + h + 50.0
    );
    let _ = writeln!(s, r#"<text x="{left}" y="16" font-size="13">{}</text>"#, escape(title));
    for tick in [0, 25, 50, 75, 100] {
        let y = top + h - h * tick as f64 / 100.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}%</text>"##,
            width - 20.0,
            left - 4.0,
            y + 4.0
        );
    }
    let mut x = left + 5.0;
    for r in reports {
        if r.overall {
            let dx = x + slot * 0.25 - 5.0;
            let _ = writeln!(
                s,
                r##"<line class="divider" x1="{dx}" x2="{dx}" y1="{top}" y2="{}" stroke="#d62728" stroke-dasharray="5,4"/>"##,
                top + h
            );
            x += slot * 0.5;
        }
        for (i, (v, color, kind)) in [(r.eligible_accuracy, "#4c78a8", "eligible"), (r.called_only_accuracy, "#f58518", "called_only")]
            .into_iter()
            .enumerate()
        {
            if let Some(v) = v {
                let bh = h * v;
                let _ = writeln!(
                    s,
                    r#"<rect class="{kind}" data-window="{}" data-value="{:.1}" x="{}" y="{}" width="25" height="{bh}" fill="{color}"/>"#,
                    r.window.label(),
                    round_pct(v),
                    x + 28.0 * i as f64,
                    top + h - bh
                );
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x + 26.0, top + h + 15.0, r.window.label());
        x += slot;
    }
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{}" width="10" height="10" fill="#4c78a8"/><text x="{}" y="{}">eligible</text><rect x="{}" y="{}" width="10" height="10" fill="#f58518"/><text x="{}" y="{}">called-only</text>"##,
        top + h + 28.0,
        left + 14.0,
        top + h + 37.0,
        left + 80.0,
        top + h + 28.0,
        left + 94.0,
        top + h + 37.0
    );
    s.push_str("</svg>\n");
    s
}

/// 2x2 called-normalized confusion grid: rows actual (+, -), columns
/// predicted (+, -).
pub fn confusion_svg(c: &Confusion, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="260" height="240" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="18" font-size="13">{}</text>"#, escape(title));
    let pct = c.rounded_percentages();
    let cells = [(0, 0, "tp"), (0, 1, "fn"), (1, 0, "fp"), (1, 1, "tn")];
    for (i, (row, col, name)) in cells.into_iter().enumerate() {
        let (x, y) = (70.0 + 80.0 * col as f64, 50.0 + 80.0 * row as f64);
        let v = pct.map(|p| p[i]);
        let shade = v.map_or(255.0, |v| 255.0 - 1.8 * v).round() as u8;
        let _ = writeln!(
            s,
            r##"<rect class="{name}" x="{x}" y="{y}" width="80" height="80" fill="rgb({shade},{shade},255)" stroke="#333"/>"##
        );
        let label = v.map(|v| format!("{v:.1}%")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#, x + 40.0, y + 45.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="110" y="44" text-anchor="middle">pred +</text><text x="190" y="44" text-anchor="middle">pred -</text><text x="64" y="95" text-anchor="end">actual +</text><text x="64" y="175" text-anchor="end">actual -</text>"#
    );
    s.push_str("</svg>\n");
    s
}
