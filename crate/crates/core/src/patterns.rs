//! Per-intervention window sign vectors, average-linkage row ordering, and
//! heatmap rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{Category, Metric, Window, WindowSet};
use crate::evaluation::EvaluatedSeries;

pub const RED: &str = "#d62728";
pub const BLUE: &str = "#1f77b4";
pub const GRAY: &str = "#7f7f7f";
pub const LIGHT_GRAY: &str = "#e0e0e0";

pub const CLUSTER_METHOD: &str = "agglomerative, average linkage";
pub const DISTANCE_METHOD: &str = "mean per-window disagreement (0 equal, 1 different sign, 0.5 one side missing)";

/// Majority vote over called minutes; 0 when calls tie or every valid
/// minute abstains; `None` without valid minutes.
pub fn window_sign(signs: &[i8], valid: &[bool], window: Window) -> Option<i8> {
    let mut any = false;
    let (mut up, mut down) = (0usize, 0usize);
    for k in window.range() {
        if k < signs.len() && valid[k] {
            any = true;
            match signs[k] {
                1 => up += 1,
                -1 => down += 1,
                _ => {}
            }
        }
    }
    any.then(|| match up.cmp(&down) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => -1,
        std::cmp::Ordering::Equal => 0,
    })
}

/// Sign of the window-mean calibrated median thresholded at `tau`.
pub fn window_sign_mean(values: &[Option<f64>], window: Window, tau: f64) -> Option<i8> {
    let v: Vec<f64> = window.range().filter_map(|k| values.get(k).copied().flatten()).collect();
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    Some(crate::calibration::call_sign(m, tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignSource {
    Pred,
    Actual,
}

impl SignSource {
    pub fn suffix(self) -> &'static str {
        match self {
            SignSource::Pred => "pred",
            SignSource::Actual => "actual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignVector {
    pub example_id: String,
    pub user_id: String,
    pub category: Category,
    pub metric: Metric,
    pub t1: i64,
    pub entries: Vec<Option<i8>>,
}

impl SignVector {
    pub fn from_series(s: &EvaluatedSeries, windows: &WindowSet, source: SignSource) -> Self {
        let signs = match source {
            SignSource::Pred => &s.predicted,
            SignSource::Actual => &s.actual,
        };
        SignVector {
            example_id: s.example_id.clone(),
            user_id: s.user_id.clone(),
            category: s.category,
            metric: s.metric,
            t1: s.t1,
            entries: windows.windows.iter().map(|w| window_sign(signs, &s.valid, *w)).collect(),
        }
    }
}

fn entry_distance(a: Option<i8>, b: Option<i8>) -> f64 {
    match (a, b) {
        (None, None) => 0.0,
        (Some(_), None) | (None, Some(_)) => 0.5,
        (Some(x), Some(y)) => {
            if x == y {
                0.0
            } else {
                1.0
            }
        }
    }
}

pub fn distance(a: &[Option<i8>], b: &[Option<i8>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| entry_distance(*x, *y)).sum::<f64>() / a.len() as f64
}

/// Leaf order of an average-linkage dendrogram. Merges take the closest
/// pair; ties and left/right placement follow the earliest end time (then
/// id) in each cluster, so the order does not depend on input order.
pub fn cluster_rows(vectors: &[SignVector]) -> Vec<usize> {
    let n = vectors.len();
    if n == 0 {
        return Vec::new();
    }
    let key = |i: usize| (vectors[i].t1, vectors[i].example_id.as_str());
    let mut clusters: Vec<Option<(Vec<usize>, (i64, &str))>> = (0..n).map(|i| Some((vec![i], key(i)))).collect();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = distance(&vectors[i].entries, &vectors[j].entries);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    for _ in 1..n {
        let mut best: Option<(f64, (i64, &str), (i64, &str), usize, usize)> = None;
        for i in 0..n {
            let Some((_, ki)) = &clusters[i] else { continue };
            for j in i + 1..n {
                let Some((_, kj)) = &clusters[j] else { continue };
                let (a, b, ka, kb) = if ki <= kj { (i, j, *ki, *kj) } else { (j, i, *kj, *ki) };
                let cand = (d[i][j], ka, kb, a, b);
                let better = match &best {
                    None => true,
                    Some(cur) => {
                        cand.0 < cur.0 - 1e-12 || ((cand.0 - cur.0).abs() <= 1e-12 && (cand.1, cand.2) < (cur.1, cur.2))
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (_, ka, _, a, b) = best.expect("at least two clusters remain");
        let (mut la, _) = clusters[a].take().expect("live");
        let (lb, _) = clusters[b].take().expect("live");
        let (na, nb) = (la.len() as f64, lb.len() as f64);
        for c in 0..n {
            if clusters[c].is_some() {
                let v = (na * d[a][c] + nb * d[b][c]) / (na + nb);
                d[a][c] = v;
                d[c][a] = v;
            }
        }
        la.extend(lb);
        clusters[a] = Some((la, ka));
    }
    clusters.into_iter().flatten().next().map(|(l, _)| l).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    All,
    User,
    Category,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::All => "all",
            Level::User => "user",
            Level::Category => "category",
        }
    }

    fn key(self, v: &SignVector) -> String {
        match self {
            Level::All => "all".into(),
            Level::User => v.user_id.clone(),
            Level::Category => v.category.key().into(),
        }
    }
}

pub fn cell_text(e: Option<i8>) -> String {
    e.map_or_else(|| "NA".to_string(), |s| s.to_string())
}

pub fn color(e: Option<i8>) -> &'static str {
    match e {
        Some(1) => RED,
        Some(-1) => BLUE,
        Some(_) => GRAY,
        None => LIGHT_GRAY,
    }
}

/// One rendered heatmap: rows already in cluster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub level: Level,
    pub key: String,
    pub metric: Metric,
    pub source: SignSource,
    pub windows: Vec<Window>,
    pub rows: Vec<SignVector>,
}

impl Heatmap {
    pub fn file_stem(&self) -> String {
        let key: String = self
            .key
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
            .collect();
        format!("heatmap_{}_{}_{}_{}", self.level.name(), key, self.metric, self.source.suffix())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("intervention");
        for w in &self.windows {
            s.push(',');
            s.push_str(&w.label());
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.example_id);
            for e in &r.entries {
                s.push(',');
                s.push_str(&cell_text(*e));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let (cell_w, cell_h, left, top) = (60.0, 14.0, 170.0, 40.0);
        let width = left + cell_w * self.windows.len() as f64 + 20.0;
        let height = top + cell_h * self.rows.len() as f64 + 20.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(s, "<desc>rows: {CLUSTER_METHOD}; distance: {DISTANCE_METHOD}</desc>");
        let _ = writeln!(
            s,
            r#"<text x="4" y="14" font-size="12">{} {} {} ({})</text>"#,
            self.level.name(),
            self.key.replace('&', "&amp;").replace('<', "&lt;"),
            self.metric,
            self.source.suffix()
        );
        for (c, w) in self.windows.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                left + cell_w * (c as f64 + 0.5),
                top - 6.0,
                w.label()
            );
        }
        for (r, row) in self.rows.iter().enumerate() {
            let y = top + cell_h * r as f64;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, y + cell_h - 3.0, row.example_id);
            for (c, e) in row.entries.iter().enumerate() {
                let _ = writeln!(
                    s,
                    r##"<rect data-row="{r}" data-col="{c}" data-sign="{}" x="{}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{}" stroke="#ffffff"/>"##,
                    cell_text(*e),
                    left + cell_w * c as f64,
                    color(*e)
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Reads a heatmap CSV back into `(intervention, cells)` rows.
pub fn parse_heatmap_csv(text: &str) -> Vec<(String, Vec<Option<i8>>)> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut parts = l.split(',');
            let id = parts.next().unwrap_or_default().to_string();
            let cells = parts.map(|c| c.parse::<i8>().ok()).collect();
            (id, cells)
        })
        .collect()
}

/// Builds every heatmap for `level` from evaluated series: one per (group,
/// metric, source).
pub fn heatmaps(series: &[EvaluatedSeries], windows: &WindowSet, level: Level) -> Vec<Heatmap> {
    let mut out = Vec::new();
    for source in [SignSource::Pred, SignSource::Actual] {
        let mut groups: BTreeMap<(String, Metric), Vec<SignVector>> = BTreeMap::new();
        for s in series {
            let v = SignVector::from_series(s, windows, source);
            groups.entry((level.key(&v), v.metric)).or_default().push(v);
        }
        for ((key, metric), vectors) in groups {
            let order = cluster_rows(&vectors);
            out.push(Heatmap {
                level,
                key,
                metric,
                source,
                windows: windows.windows.clone(),
                rows: order.into_iter().map(|i| vectors[i].clone()).collect(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(id: &str, t1: i64, e: [Option<i8>; 4]) -> SignVector {
        SignVector {
            example_id: id.into(),
            user_id: "u".into(),
            category: Category::Other,
            metric: Metric::Bbi,
            t1,
            entries: e.to_vec(),
        }
    }

    #[test]
    fn window_sign_examples() {
        let w = Window::new(0, 4);
        assert_eq!(window_sign(&[1, 1, -1, 0], &[true; 4], w), Some(1));
        assert_eq!(window_sign(&[1, -1], &[true; 2], Window::new(0, 2)), Some(0));
        assert_eq!(window_sign(&[0, 0], &[true; 2], Window::new(0, 2)), Some(0));
        assert_eq!(window_sign(&[1, 1], &[false; 2], Window::new(0, 2)), None);
        assert_eq!(window_sign_mean(&[Some(3.0), Some(-1.0), None], Window::new(0, 3), 0.5), Some(1));
    }

    #[test]
    fn distance_examples() {
        let up = [Some(1); 4];
        let down = [Some(-1); 4];
        assert_eq!(distance(&up, &down), 1.0);
        assert_eq!(distance(&up, &up), 0.0);
        assert_eq!(distance(&[Some(1), None, None, Some(0)], &[Some(1), Some(1), None, Some(0)]), 0.125);
    }

    #[test]
    fn identical_rows_are_adjacent() {
        let v = vec![
            sv("a", 1, [Some(1); 4]),
            sv("b", 2, [Some(-1); 4]),
            sv("c", 3, [Some(1); 4]),
            sv("d", 4, [Some(-1); 4]),
        ];
        let order = cluster_rows(&v);
        assert_eq!(order, vec![0, 2, 1, 3]);
        assert_eq!(cluster_rows(&v[..1]), vec![0]);
    }

    #[test]
    fn svg_and_csv_agree() {
        let h = Heatmap {
            level: Level::All,
            key: "all".into(),
            metric: Metric::Bbi,
            source: SignSource::Pred,
            windows: WindowSet::default().windows,
            rows: vec![sv("a", 1, [Some(1), Some(-1), Some(0), None])],
        };
        let csv = h.to_csv();
        assert_eq!(csv.lines().nth(1), Some("a,1,-1,0,NA"));
        let svg = h.to_svg();
        assert!(svg.contains(&format!(r#"data-sign="1" x="170" y="40" width="60" height="14" fill="{RED}""#)));
        assert!(svg.contains(&format!(r#"data-sign="NA" x="350" y="40" width="60" height="14" fill="{LIGHT_GRAY}""#)));
        assert_eq!(h.file_stem(), "heatmap_all_all_bbi_pred");
        assert_eq!(parse_heatmap_csv(&csv)[0].1, vec![Some(1), Some(-1), Some(0), None]);
    }
}
