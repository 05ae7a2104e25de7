//! Shared vocabulary: metrics, intervention categories, post-end windows and
//! the minute clock everything is indexed on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Minutes since the Unix epoch (UTC).
pub type Minute = i64;

pub const MS_PER_MINUTE: i64 = 60_000;

/// Number of post-end minute offsets forecast and labelled per example.
pub const HORIZON: usize = 120;

/// Context length fed to the forecaster, in minutes.
pub const CONTEXT_MINUTES: usize = 90;

/// Target metrics. The order here is the order of model heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmssd,
    Hr,
    Bbi,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rmssd, Metric::Hr, Metric::Bbi];

    /// Default neutrality half-width in percentage points.
    pub fn default_epsilon(self) -> f64 {
        match self {
            Metric::Rmssd => 2.5,
            Metric::Hr => 1.0,
            Metric::Bbi => 1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmssd => "rmssd",
            Metric::Hr => "hr",
            Metric::Bbi => "bbi",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rmssd" => Ok(Metric::Rmssd),
            "hr" => Ok(Metric::Hr),
            "bbi" => Ok(Metric::Bbi),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Per-metric epsilon bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Epsilons {
    pub rmssd: f64,
    pub hr: f64,
    pub bbi: f64,
}

impl Default for Epsilons {
    fn default() -> Self {
        Epsilons {
            rmssd: Metric::Rmssd.default_epsilon(),
            hr: Metric::Hr.default_epsilon(),
            bbi: Metric::Bbi.default_epsilon(),
        }
    }
}

impl Epsilons {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Rmssd => self.rmssd,
            Metric::Hr => self.hr,
            Metric::Bbi => self.bbi,
        }
    }
}

/// The closed set of nine analysis categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Cardio,
    NonCardio,
    RestRecovery,
    FoodDrink,
    Healthcare,
    Social,
    Mindful,
    Academic,
    Other,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Cardio,
        Category::NonCardio,
        Category::RestRecovery,
        Category::FoodDrink,
        Category::Healthcare,
        Category::Social,
        Category::Mindful,
        Category::Academic,
        Category::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Cardio => "Physical Activity: Cardio",
            Category::NonCardio => "Physical Activity: Non-cardio",
            Category::RestRecovery => "Rest & Recovery",
            Category::FoodDrink => "Food/Drink/Nutrition",
            Category::Healthcare => "Healthcare/Therapy",
            Category::Social => "Socializing/Social Interaction",
            Category::Mindful => "Spirituality/Mindful Activities",
            Category::Academic => "Academic & Educational",
            Category::Other => "Other",
        }
    }

    /// Short file-name friendly key.
    pub fn key(self) -> &'static str {
        match self {
            Category::Cardio => "cardio",
            Category::NonCardio => "non_cardio",
            Category::RestRecovery => "rest_recovery",
            Category::FoodDrink => "food_drink",
            Category::Healthcare => "healthcare",
            Category::Social => "social",
            Category::Mindful => "mindful",
            Category::Academic => "academic",
            Category::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Category::ALL.get(i).copied()
    }

    /// Exact match on the label (case-insensitive, surrounding whitespace ignored).
    pub fn parse_label(s: &str) -> Option<Category> {
        let s = s.trim();
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.label().eq_ignore_ascii_case(s) || c.key().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpectedEffect {
    Positive,
    Negative,
    Neutral,
    Unknown,
}

impl ExpectedEffect {
    pub fn parse(s: &str) -> Option<ExpectedEffect> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" => None,
            "positive" | "+" => Some(ExpectedEffect::Positive),
            "negative" | "-" => Some(ExpectedEffect::Negative),
            "neutral" | "0" => Some(ExpectedEffect::Neutral),
            _ => Some(ExpectedEffect::Unknown),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExpectedEffect::Positive => "positive",
            ExpectedEffect::Negative => "negative",
            ExpectedEffect::Neutral => "neutral",
            ExpectedEffect::Unknown => "unknown",
        }
    }
}

/// Half-open interval of post-end minute offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub const fn new(start: usize, end: usize) -> Self {
        Window { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, k: usize) -> bool {
        k >= self.start && k < self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.start, self.end)
    }
}

/// The four post-end windows plus the overall span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSet {
    pub windows: Vec<Window>,
}

impl Default for WindowSet {
    fn default() -> Self {
        WindowSet {
            windows: vec![
                Window::new(0, 15),
                Window::new(15, 30),
                Window::new(30, 60),
                Window::new(60, 120),
            ],
        }
    }
}

impl WindowSet {
    pub fn overall(&self) -> Window {
        let start = self.windows.first().map_or(0, |w| w.start);
        let end = self.windows.last().map_or(0, |w| w.end);
        Window::new(start, end)
    }

    /// Index of the window containing offset `k`.
    pub fn window_of(&self, k: usize) -> Option<usize> {
        self.windows.iter().position(|w| w.contains(k))
    }

    /// The windows must tile `[0, HORIZON)` contiguously.
    pub fn validate(&self) -> Result<(), String> {
        if self.windows.is_empty() {
            return Err("window set is empty".into());
        }
        let mut cursor = 0;
        for w in &self.windows {
            if w.start != cursor || w.is_empty() {
                return Err(format!("window {} does not continue the partition at {cursor}", w.label()));
            }
            cursor = w.end;
        }
        if cursor != HORIZON {
            return Err(format!("windows end at {cursor}, expected {HORIZON}"));
        }
        Ok(())
    }

    /// Windows followed by the overall span, the column order used in reports.
    pub fn with_overall(&self) -> Vec<Window> {
        let mut v = self.windows.clone();
        v.push(self.overall());
        v
    }
}

/// A fixed offset from UTC used to resolve local civil time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LocalClock {
    pub utc_offset_minutes: i32,
}

impl LocalClock {
    pub fn utc() -> Self {
        LocalClock::default()
    }

    pub fn local_minute(&self, m: Minute) -> i64 {
        m + self.utc_offset_minutes as i64
    }

    /// Local calendar day number (days since 1970-01-01 local).
    pub fn local_day(&self, m: Minute) -> i64 {
        self.local_minute(m).div_euclid(1440)
    }

    pub fn minute_of_day(&self, m: Minute) -> i64 {
        self.local_minute(m).rem_euclid(1440)
    }

    /// Monday = 0. 1970-01-01 was a Thursday.
    pub fn day_of_week(&self, m: Minute) -> i64 {
        (self.local_day(m) + 3).rem_euclid(7)
    }

    pub fn local_date(&self, m: Minute) -> chrono::NaiveDate {
        let epoch = chrono::NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch date");
        epoch + chrono::Duration::days(self.local_day(m))
    }

    /// First UTC minute of the given local date.
    pub fn midnight_of(&self, date: chrono::NaiveDate) -> Minute {
        let epoch = chrono::NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch date");
        (date - epoch).num_days() * 1440 - self.utc_offset_minutes as i64
    }

    /// Parses `+HH:MM`, `-HH:MM`, `Z` or `UTC`.
    pub fn parse(s: &str) -> Result<LocalClock, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("utc") || s == "Z" || s.is_empty() {
            return Ok(LocalClock::utc());
        }
        let (sign, rest) = match s.as_bytes()[0] {
            b'+' => (1, &s[1..]),
            b'-' => (-1, &s[1..]),
            _ => return Err(format!("timezone `{s}` must look like +HH:MM")),
        };
        let (h, m) = rest
            .split_once(':')
            .ok_or_else(|| format!("timezone `{s}` must look like +HH:MM"))?;
        let h: i32 = h.parse().map_err(|_| format!("bad hour in `{s}`"))?;
        let m: i32 = m.parse().map_err(|_| format!("bad minute in `{s}`"))?;
        if h > 14 || m >= 60 {
            return Err(format!("timezone `{s}` out of range"));
        }
        Ok(LocalClock {
            utc_offset_minutes: sign * (h * 60 + m),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_windows_partition_horizon() {
        let ws = WindowSet::default();
        ws.validate().unwrap();
        for k in 0..HORIZON {
            let hits = ws.windows.iter().filter(|w| w.contains(k)).count();
            assert_eq!(hits, 1, "offset {k}");
        }
        assert_eq!(ws.overall(), Window::new(0, 120));
    }

    #[test]
    fn broken_partition_rejected() {
        let ws = WindowSet {
            windows: vec![Window::new(0, 15), Window::new(20, 120)],
        };
        assert!(ws.validate().is_err());
    }

    #[test]
    fn category_labels_round_trip() {
        for c in Category::ALL {
            assert_eq!(Category::parse_label(c.label()), Some(c));
            assert_eq!(Category::from_index(c.index()), Some(c));
        }
        assert_eq!(Category::parse_label("Jogging!!"), None);
    }

    #[test]
    fn clock_day_of_week() {
        // 2024-03-04 is a Monday.
        let clock = LocalClock::parse("+02:00").unwrap();
        let date = chrono::NaiveDate::from_ymd_opt(2024, 3, 4).unwrap();
        let m = clock.midnight_of(date);
        assert_eq!(clock.day_of_week(m), 0);
        assert_eq!(clock.minute_of_day(m), 0);
        assert_eq!(clock.local_date(m), date);
        assert_eq!(clock.day_of_week(m - 1), 6);
    }
}
