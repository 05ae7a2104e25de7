//! Synthetic cohorts with known intervention effects.
//!
//! Beat intervals follow a per-user baseline with a circadian swing, a
//! respiratory sinus oscillation and white noise. After each intervention
//! end the whole interval is scaled by `1 + e(k)`, where `e` ramps up over
//! the onset and then decays exponentially; HR therefore moves inversely.
//! Effects are constant within each minute so that minute means carry the
//! exact injected change.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Category, Epsilons, ExpectedEffect, LocalClock, Metric, Minute, HORIZON, MS_PER_MINUTE};
use crate::error::{Error, Result};
use crate::ingest::{BbiEvent, Sample, StreamBundle, TagRecord};
use crate::labeling::actual_sign;

/// Minutes after an intervention end during which its effect is applied.
pub const EFFECT_SUPPORT: usize = 180;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectTemplate {
    pub category: Category,
    /// `Bbi` scales the whole interval; `Rmssd` scales only the beat-to-beat
    /// variability; `Hr` scales the interval by `1 / (1 + e)`.
    pub metric: Metric,
    pub sign: i8,
    pub peak_pct: f64,
    pub onset_minutes: usize,
    pub decay_minutes: f64,
}

impl EffectTemplate {
    /// Fractional change at minute offset `k` after the end.
    pub fn shape(&self, k: usize) -> f64 {
        if k >= EFFECT_SUPPORT {
            return 0.0;
        }
        let amp = self.sign as f64 * self.peak_pct / 100.0;
        if k < self.onset_minutes {
            amp * (k + 1) as f64 / (self.onset_minutes + 1) as f64
        } else {
            amp * (-((k - self.onset_minutes) as f64) / self.decay_minutes).exp()
        }
    }
}

fn default_sign(c: Category) -> i8 {
    match c {
        Category::Cardio | Category::NonCardio | Category::FoodDrink | Category::Academic | Category::Social => -1,
        Category::RestRecovery | Category::Mindful | Category::Healthcare | Category::Other => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub users: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    pub utc_offset_minutes: i32,
    pub bbi_mean_ms: f64,
    /// Per-user baseline offsets are uniform in `±user_spread_ms`.
    pub user_spread_ms: f64,
    pub circadian_amplitude_ms: f64,
    pub rsa_amplitude_ms: f64,
    pub rsa_period_s: f64,
    pub beat_noise_ms: f64,
    pub hr_noise_bpm: f64,
    /// Noise on respiration, stress and steps.
    pub aux_noise: f64,
    pub effects: Vec<EffectTemplate>,
    /// Per-intervention multiplicative jitter on the peak, uniform in `±`.
    pub effect_jitter: f64,
    pub interventions_per_day: usize,
    pub gap_rate_per_hour: f64,
    pub gap_minutes: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 7,
            days: 14,
            start_date: NaiveDate::from_ymd_opt(2024, 3, 4).expect("valid date"),
            utc_offset_minutes: 0,
            bbi_mean_ms: 850.0,
            user_spread_ms: 80.0,
            circadian_amplitude_ms: 60.0,
            rsa_amplitude_ms: 25.0,
            rsa_period_s: 4.5,
            beat_noise_ms: 12.0,
            hr_noise_bpm: 1.0,
            aux_noise: 1.0,
            effects: Category::ALL
                .iter()
                .map(|&c| EffectTemplate {
                    category: c,
                    metric: Metric::Bbi,
                    sign: default_sign(c),
                    peak_pct: 5.0,
                    onset_minutes: 3,
                    decay_minutes: 30.0,
                })
                .collect(),
            effect_jitter: 0.2,
            interventions_per_day: 3,
            gap_rate_per_hour: 0.01,
            gap_minutes: (5, 40),
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Peaks of 8% (above three times every default epsilon) with a 40 minute
    /// decay.
    pub fn strong() -> Self {
        let mut s = SynthSpec::default();
        for e in &mut s.effects {
            e.peak_pct = 8.0;
            e.decay_minutes = 40.0;
            e.onset_minutes = 2;
        }
        s
    }

    /// No circadian swing, oscillation, noise, gaps or jitter: minute means
    /// equal the baseline times the injected factor.
    pub fn noise_free(mut self) -> Self {
        self.circadian_amplitude_ms = 0.0;
        self.rsa_amplitude_ms = 0.0;
        self.beat_noise_ms = 0.0;
        self.hr_noise_bpm = 0.0;
        self.aux_noise = 0.0;
        self.effect_jitter = 0.0;
        self.gap_rate_per_hour = 0.0;
        self
    }

    pub fn null_effects(mut self) -> Self {
        self.effects.clear();
        self
    }

    pub fn clock(&self) -> LocalClock {
        LocalClock {
            utc_offset_minutes: self.utc_offset_minutes,
        }
    }

    pub fn start_minute(&self) -> Minute {
        self.clock().midnight_of(self.start_date)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.users == 0 || self.days == 0 {
            return bad("users and days must be positive");
        }
        if self.bbi_mean_ms - self.user_spread_ms - self.circadian_amplitude_ms - 3.0 * (self.rsa_amplitude_ms + self.beat_noise_ms) < 300.0 {
            return bad("beat intervals could fall below 300 ms");
        }
        if self.effects.iter().any(|e| !(e.decay_minutes > 0.0) || !(e.peak_pct >= 0.0) || e.peak_pct >= 50.0) {
            return bad("effect decay must be positive and peaks in [0, 50)");
        }
        if self.gap_minutes.0 > self.gap_minutes.1 || self.rsa_period_s <= 0.0 {
            return bad("gap range or oscillation period invalid");
        }
        Ok(())
    }

    /// Whether every template peak exceeds twice the epsilon of the metrics
    /// it moves.
    pub fn is_strong(&self, eps: &Epsilons) -> bool {
        self.effects.iter().all(|e| {
            let need = match e.metric {
                Metric::Bbi => eps.bbi.max(eps.hr).max(eps.rmssd),
                Metric::Hr => eps.hr.max(eps.bbi),
                Metric::Rmssd => eps.rmssd,
            };
            e.peak_pct > 2.0 * need
        })
    }
}

/// True per-minute change for one intervention and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub user_id: String,
    pub tag_index: usize,
    pub t1: Minute,
    pub metric: Metric,
    pub offset: usize,
    pub pct: f64,
    pub sign: i8,
    /// RMSSD rows are nominal: the rolling window smooths the injected step.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUser {
    pub bundle: StreamBundle,
    pub tags: Vec<TagRecord>,
    pub truth: Vec<TruthRow>,
}

pub fn user_id(index: usize) -> String {
    format!("u{index:02}")
}

fn names(c: Category) -> &'static [&'static str] {
    match c {
        Category::Cardio => &["Running", "Cycling", "Swimming"],
        Category::NonCardio => &["Strength training", "Stretching"],
        Category::RestRecovery => &["Nap", "Lying down", "Sauna"],
        Category::FoodDrink => &["Lunch", "Coffee", "Dinner"],
        Category::Healthcare => &["Massage", "Physiotherapy"],
        Category::Social => &["Call with friend", "Board games"],
        Category::Mindful => &["Meditation", "Breathing exercise", "Journaling"],
        Category::Academic => &["Reading", "Study session"],
        Category::Other => &["Walk outside", "Music"],
    }
}

struct Factors {
    bbi: Vec<f64>,
    var: Vec<f64>,
}

fn schedule(spec: &SynthSpec, rng: &mut ChaCha8Rng, uid: &str) -> Vec<TagRecord> {
    let start = spec.start_minute();
    let end = start + spec.days as i64 * 1440;
    let mut tags = Vec::new();
    let mut last_t1 = i64::MIN / 2;
    for d in 0..spec.days as i64 {
        let day = start + d * 1440;
        let mut cursor = day + 7 * 60 + rng.random_range(0..60);
        let close = day + 22 * 60;
        for _ in 0..spec.interventions_per_day {
            let gap = EFFECT_SUPPORT as i64 + 30;
            let t0 = cursor.max(last_t1 + gap) + rng.random_range(0..30);
            let t1 = t0 + rng.random_range(10..=40);
            if t1 + EFFECT_SUPPORT as i64 > close.min(end) {
                break;
            }
            let category = Category::ALL[rng.random_range(0..Category::ALL.len())];
            let pool = names(category);
            let name = pool[rng.random_range(0..pool.len())].to_string();
            let sign = spec
                .effects
                .iter()
                .find(|e| e.category == category)
                .map(|e| if e.metric == Metric::Hr { -e.sign } else { e.sign });
            let expected_effect = match sign {
                Some(1) => Some(ExpectedEffect::Positive),
                Some(-1) => Some(ExpectedEffect::Negative),
                Some(_) => Some(ExpectedEffect::Neutral),
                None => Some(ExpectedEffect::Unknown),
            };
            tags.push(TagRecord {
                user_id: uid.to_string(),
                name,
                category,
                t0,
                t1,
                expected_effect,
            });
            last_t1 = t1;
            cursor = t1;
        }
    }
    tags
}

fn effect_factors(spec: &SynthSpec, rng: &mut ChaCha8Rng, tags: &[TagRecord], len: usize) -> Factors {
    let start = spec.start_minute();
    let mut f = Factors {
        bbi: vec![0.0; len],
        var: vec![0.0; len],
    };
    for tag in tags {
        let jitter = if spec.effect_jitter > 0.0 {
            1.0 + rng.random_range(-spec.effect_jitter..=spec.effect_jitter)
        } else {
            1.0
        };
        for tpl in spec.effects.iter().filter(|e| e.category == tag.category) {
            for k in 0..EFFECT_SUPPORT {
                let i = (tag.t1 - start) as usize + k;
                if i >= len {
                    break;
                }
                let e = tpl.shape(k) * jitter;
                match tpl.metric {
                    Metric::Bbi => f.bbi[i] += e,
                    Metric::Hr => f.bbi[i] += 1.0 / (1.0 + e) - 1.0,
                    Metric::Rmssd => f.var[i] += e,
                }
            }
        }
    }
    f
}

fn truth_rows(spec: &SynthSpec, tags: &[TagRecord], f: &Factors, eps: &Epsilons) -> Vec<TruthRow> {
    let start = spec.start_minute();
    let mut rows = Vec::with_capacity(tags.len() * HORIZON * 3);
    for (ti, tag) in tags.iter().enumerate() {
        for k in 0..HORIZON {
            let i = (tag.t1 - start) as usize + k;
            let (eb, ev) = (f.bbi.get(i).copied().unwrap_or(0.0), f.var.get(i).copied().unwrap_or(0.0));
            let vals = [
                (Metric::Bbi, 100.0 * eb, true),
                (Metric::Hr, 100.0 * (1.0 / (1.0 + eb) - 1.0), true),
                (Metric::Rmssd, 100.0 * ((1.0 + eb) * (1.0 + ev) - 1.0), false),
            ];
            for (metric, pct, exact) in vals {
                rows.push(TruthRow {
                    user_id: tag.user_id.clone(),
                    tag_index: ti,
                    t1: tag.t1,
                    metric,
                    offset: k,
                    pct,
                    sign: actual_sign(pct, eps.get(metric)),
                    exact,
                });
            }
        }
    }
    rows
}

fn gap_mask(spec: &SynthSpec, rng: &mut ChaCha8Rng, len: usize) -> Vec<bool> {
    let mut missing = vec![false; len];
    if spec.gap_rate_per_hour <= 0.0 {
        return missing;
    }
    for hour in 0..len / 60 {
        if rng.random_bool(spec.gap_rate_per_hour.min(1.0)) {
            let s = hour * 60 + rng.random_range(0..60);
            let l = rng.random_range(spec.gap_minutes.0..=spec.gap_minutes.1);
            for m in missing.iter_mut().skip(s).take(l) {
                *m = true;
            }
        }
    }
    missing
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd.max(0.0)).expect("finite sd")
}

/// One user's streams, tags and truth table, deterministic in
/// `(spec.seed, index)`.
pub fn generate_user(spec: &SynthSpec, index: usize, eps: &Epsilons) -> SynthUser {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let uid = user_id(index);
    let clock = spec.clock();
    let start = spec.start_minute();
    let len = spec.days * 1440;

    let base = spec.bbi_mean_ms + rng.random_range(-1.0..=1.0) * spec.user_spread_ms;
    let rsa_phase = rng.random_range(0.0..TAU);
    let tags = schedule(spec, &mut rng, &uid);
    let factors = effect_factors(spec, &mut rng, &tags, len);
    let truth = truth_rows(spec, &tags, &factors, eps);
    let missing = gap_mask(spec, &mut rng, len);

    let beat_noise = normal(spec.beat_noise_ms);
    let start_ms = start * MS_PER_MINUTE;
    let end_ms = start_ms + len as i64 * MS_PER_MINUTE;
    let mut bbi = Vec::with_capacity((len as f64 * 60_000.0 / spec.bbi_mean_ms) as usize + 16);
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    let mut t = start_ms + rng.random_range(0..1000);
    while t < end_ms {
        let i = ((t - start_ms) / MS_PER_MINUTE) as usize;
        let mod_ = clock.minute_of_day(start + i as i64) as f64;
        let circadian = spec.circadian_amplitude_ms * (TAU * (mod_ - 180.0) / 1440.0).cos();
        let osc = spec.rsa_amplitude_ms * (TAU * (t - start_ms) as f64 / 1000.0 / spec.rsa_period_s + rsa_phase).sin();
        let var = (osc + beat_noise.sample(&mut rng)) * (1.0 + factors.var[i]);
        let interval = (base + circadian + var) * (1.0 + factors.bbi[i]);
        if !missing[i] {
            bbi.push(BbiEvent { t_ms: t, interval_ms: interval });
            sums[i] += interval;
            counts[i] += 1;
        }
        t += interval.round().max(250.0) as i64;
    }

    let hr_noise = normal(spec.hr_noise_bpm);
    let aux = normal(spec.aux_noise);
    let mut hr = Vec::with_capacity(len);
    let mut steps = Vec::with_capacity(len);
    let mut respiration = Vec::with_capacity(len / 2);
    let mut stress = Vec::with_capacity(len / 3);
    let active: BTreeMap<i64, Category> = tags
        .iter()
        .flat_map(|tag| (tag.t0..tag.t1).map(move |m| (m, tag.category)))
        .collect();
    let mut last_hr = 60_000.0 / base;
    for i in 0..len {
        let minute = start + i as i64;
        let mod_ = clock.minute_of_day(minute);
        let awake = (7 * 60..23 * 60).contains(&mod_);
        if counts[i] > 0 {
            last_hr = 60_000.0 / (sums[i] / counts[i] as f64) + hr_noise.sample(&mut rng);
            hr.push(Sample { minute, value: last_hr });
        }
        if missing[i] {
            continue;
        }
        let s = match active.get(&minute) {
            Some(Category::Cardio) => 140.0 + 15.0 * aux.sample(&mut rng),
            Some(Category::NonCardio) => 60.0 + 15.0 * aux.sample(&mut rng),
            _ if awake && rng.random_bool(0.06) => rng.random_range(10.0..110.0),
            _ => 0.0,
        };
        steps.push(Sample {
            minute,
            value: s.max(0.0).round(),
        });
        if i % 2 == 0 {
            let r = 14.0 + 1.5 * (TAU * (mod_ as f64 - 180.0) / 1440.0).cos() + 0.7 * aux.sample(&mut rng);
            respiration.push(Sample {
                minute,
                value: (r.max(6.0) * 10.0).round() / 10.0,
            });
        }
        if i % 3 == 0 {
            let v = 30.0 + 1.5 * (last_hr - 60_000.0 / base) + 5.0 * aux.sample(&mut rng);
            stress.push(Sample {
                minute,
                value: v.clamp(0.0, 100.0).round(),
            });
        }
    }
    let mut sleep = BTreeMap::new();
    for d in 0..spec.days as i64 {
        let date = spec.start_date + Duration::days(d);
        sleep.insert(date, rng.random_range(55..=95) as f64);
    }

    SynthUser {
        bundle: StreamBundle {
            user_id: uid,
            bbi,
            hr,
            steps,
            respiration,
            stress,
            sleep,
        },
        tags,
        truth,
    }
}

pub const TRUTH_HEADER: &str = "user_id,tag_index,t1,metric,offset,pct,sign,exact";

pub fn write_truth(rows: &[TruthRow], with_header: bool) -> String {
    let mut s = String::with_capacity(rows.len() * 48);
    if with_header {
        s.push_str(TRUTH_HEADER);
        s.push('\n');
    }
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.user_id, r.tag_index, r.t1, r.metric, r.offset, r.pct, r.sign, r.exact
        );
    }
    s
}

/// Writes every user's ingest files under `root/<user_id>/` plus
/// `root/ground_truth.csv`, one user in memory at a time.
pub fn write_cohort(spec: &SynthSpec, eps: &Epsilons, root: &std::path::Path) -> Result<Vec<String>> {
    spec.validate()?;
    std::fs::create_dir_all(root)?;
    let mut truth = String::from(TRUTH_HEADER);
    truth.push('\n');
    let mut ids = Vec::new();
    for u in 0..spec.users {
        let user = generate_user(spec, u, eps);
        crate::ingest::write_user_dir(&root.join(&user.bundle.user_id), &user.bundle, &user.tags)?;
        truth.push_str(&write_truth(&user.truth, false));
        ids.push(user.bundle.user_id);
    }
    std::fs::write(root.join("ground_truth.csv"), truth)?;
    Ok(ids)
}

/// All users in memory; convenient for small cohorts.
pub fn generate_cohort(spec: &SynthSpec, eps: &Epsilons) -> Vec<SynthUser> {
    (0..spec.users).map(|u| generate_user(spec, u, eps)).collect()
}
