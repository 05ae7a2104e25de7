//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use interv_forecast::calibration::{self, fit_isotonic, fit_onset_shift, fit_sign_threshold, CalibrationRecord, ThresholdGrid};
use interv_forecast::domain::{Category, Metric, Window, WindowSet, HORIZON};
use interv_forecast::evaluation::{self, EvaluatedSeries, EvaluationReport, Grouping, SignCounts};
use interv_forecast::features::{self, RmssdParams, FEATURE_NAMES};
use interv_forecast::ingest::BbiEvent;
use interv_forecast::labeling::{self, AnchoredExample, Split, SplitFractions};
use interv_forecast::model::{self, train::batch_gradient, ModelConfig, Network, Normalizer};
use interv_forecast::patterns::{self, Level};
use interv_forecast::pipeline::{self, PipelineConfig};
use interv_forecast::synth::{self, SynthSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.2}s (limit {}s)", e.as_secs_f64(), limit.as_secs()))
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// 1 -------------------------------------------------------------------------

/// Direct evaluation of the windowed RMSSD definition.
fn rmssd_brute(events: &[BbiEvent], end_ms: i64, p: &RmssdParams) -> Option<f64> {
    let start_ms = end_ms - p.window_ms;
    for w in events.windows(2) {
        let (a, b) = (w[0].t_ms, w[1].t_ms);
        if b - a > p.max_gap_ms && a < end_ms && b > start_ms {
            return None;
        }
    }
    let inside: Vec<&BbiEvent> = events.iter().filter(|e| e.t_ms > start_ms && e.t_ms <= end_ms).collect();
    let diffs: Vec<f64> = inside
        .windows(2)
        .filter(|w| w[1].t_ms - w[0].t_ms <= p.adjacency_ms)
        .map(|w| w[1].interval_ms - w[0].interval_ms)
        .collect();
    if diffs.is_empty() || diffs.len() < p.min_intervals {
        return None;
    }
    Some((diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt())
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let toy = features::rmssd_of_intervals(&[800.0, 810.0, 790.0, 805.0]).unwrap_or(f64::NAN);
    let toy_ok = (toy - 15.546).abs() <= 1e-3;
    let p = RmssdParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut disagreements = 0;
    let mut defined = 0;
    for _ in 0..200 {
        let mut events = Vec::new();
        let mut ts = 0i64;
        let beats = rng.random_range(10..2500);
        for _ in 0..beats {
            let iv: f64 = rng.random_range(400.0..1300.0);
            // Occasional dropouts exercise the adjacency and long-gap rules.
            let skip = match rng.random_range(0..1000) {
                0..=9 => rng.random_range(5_001..60_000),
                10 => rng.random_range(1_800_001..2_400_000),
                _ => 0,
            };
            ts += iv.round() as i64 + skip;
            events.push(BbiEvent { t_ms: ts, interval_ms: iv });
        }
        let end = events[rng.random_range(0..events.len())].t_ms + rng.random_range(0..30_000);
        let gaps = features::long_gaps(&events, p.max_gap_ms);
        let fast = features::rmssd_window(&events, &gaps, end, &p).map(|(v, _)| v);
        let slow = rmssd_brute(&events, end, &p);
        match (fast, slow) {
            (Some(a), Some(b)) => {
                defined += 1;
                worst = worst.max(rel_err(a, b));
            }
            (None, None) => {}
            _ => disagreements += 1,
        }
    }
    let (fast_enough, time) = within(t, Duration::from_secs(1));
    outcome(
        toy_ok && worst < 1e-9 && disagreements == 0 && fast_enough,
        format!("toy {toy:.4} ms; 200 windows ({defined} defined), max rel err {worst:.1e}, validity disagreements {disagreements}; {time}"),
    )
}

// 2 -------------------------------------------------------------------------

fn label_mismatches(spec: &SynthSpec, cfg: &PipelineConfig, null: bool) -> (usize, usize, usize) {
    let (mut checked, mut mismatched, mut rows) = (0, 0, 0);
    for user in synth::generate_cohort(spec, &cfg.epsilons) {
        let feats = pipeline::featurize_user(&user.bundle, cfg).expect("featurize");
        let (examples, _) = pipeline::label_user(&feats, &user.tags, cfg);
        let truth: HashMap<(usize, Metric, usize), i8> = user
            .truth
            .iter()
            .filter(|r| r.exact || null)
            .map(|r| ((r.tag_index, r.metric, r.offset), r.sign))
            .collect();
        rows += truth.len();
        for ex in &examples {
            for m in Metric::ALL {
                let t = ex.target(m);
                if !t.included {
                    continue;
                }
                for k in 0..HORIZON {
                    if !t.valid[k] {
                        continue;
                    }
                    if let Some(&s) = truth.get(&(ex.tag_index, m, k)) {
                        checked += 1;
                        if s != t.sign[k] {
                            mismatched += 1;
                        }
                    }
                }
            }
        }
    }
    (checked, mismatched, rows)
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let cfg = PipelineConfig::default().resolved();
    let mut detail = Vec::new();
    let mut pass = true;
    for (name, null) in [("null", true), ("strong", false)] {
        let mut spec = SynthSpec::strong().noise_free();
        if null {
            spec = spec.null_effects();
        }
        spec.users = 3;
        spec.days = 5;
        let (checked, mismatched, rows) = label_mismatches(&spec, &cfg, null);
        pass &= mismatched == 0 && checked > 0;
        detail.push(format!("{name}: {mismatched} mismatches over {checked} valid minutes ({rows} truth rows)"));
    }
    let (fast_enough, time) = within(t, Duration::from_secs(10));
    outcome(pass && fast_enough, format!("{}; {time}", detail.join("; ")))
}

// 3 -------------------------------------------------------------------------

fn random_keys(rng: &mut ChaCha8Rng) -> Vec<(String, i64)> {
    let users = rng.random_range(1..=8);
    let mut keys = Vec::new();
    for u in 0..users {
        let n = rng.random_range(0..40);
        let mut t1 = rng.random_range(0..10_000i64);
        for _ in 0..n {
            // Roughly one in six interventions shares its end with the previous one.
            if !rng.random_bool(1.0 / 6.0) {
                t1 += rng.random_range(1..600);
            }
            keys.push((format!("u{u}"), t1));
        }
    }
    keys.shuffle(rng);
    keys
}

fn tiny_pipeline_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synth.users = 3;
    cfg.synth.days = 5;
    cfg.model.width = 8;
    cfg.model.heads = 2;
    cfg.model.ffn_hidden = 16;
    cfg.model.depth = 1;
    cfg.model.optimizer.max_epochs = 2;
    cfg.with_seed(seed)
}

fn cohort_examples(cfg: &PipelineConfig) -> Vec<AnchoredExample> {
    let mut out = Vec::new();
    for user in synth::generate_cohort(&cfg.synth, &cfg.epsilons) {
        let feats = pipeline::featurize_user(&user.bundle, cfg).expect("featurize");
        out.extend(pipeline::label_user(&feats, &user.tags, cfg).0);
    }
    out
}

fn bundle_for(examples: &[AnchoredExample], splits: &[Split], cfg: &PipelineConfig) -> calibration::CalibrationBundle {
    let train = pipeline::select(examples, splits, Split::Train);
    let val = pipeline::select(examples, splits, Split::Validation);
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let (m, _) = model::train(&train, &val, &cfg.model, &names).expect("train");
    pipeline::fit_calibration(&m, &train, cfg).expect("calibrate")
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fractions = SplitFractions::default();
    let mut violations = 0;
    let mut test_total = 0;
    for _ in 0..1000 {
        let keys = random_keys(&mut rng);
        let refs: Vec<(&str, i64)> = keys.iter().map(|(u, t)| (u.as_str(), *t)).collect();
        let splits = labeling::split_leak_safe(&refs, &fractions);
        let mut latest_fit: BTreeMap<&str, i64> = BTreeMap::new();
        for ((u, t1), s) in refs.iter().zip(&splits) {
            if *s != Split::Test {
                let e = latest_fit.entry(u).or_insert(i64::MIN);
                *e = (*e).max(*t1);
            }
        }
        for ((u, t1), s) in refs.iter().zip(&splits) {
            if *s == Split::Test {
                test_total += 1;
                if latest_fit.get(u).is_some_and(|latest| t1 <= latest) {
                    violations += 1;
                }
            }
        }
    }

    // Removing every test intervention must leave the fitted model and
    // calibration untouched.
    let mut invariant = 0;
    let cohorts = 3;
    for seed in 0..cohorts {
        let cfg = tiny_pipeline_config(100 + seed);
        let examples = cohort_examples(&cfg);
        let splits = pipeline::assign_splits(&examples, &cfg.split);
        let full = bundle_for(&examples, &splits, &cfg);
        let (kept, kept_splits): (Vec<AnchoredExample>, Vec<Split>) = examples
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s != Split::Test)
            .map(|(e, s)| (e.clone(), *s))
            .unzip();
        let pruned = bundle_for(&kept, &kept_splits, &cfg);
        if full == pruned && kept.len() < examples.len() {
            invariant += 1;
        }
    }
    let (fast_enough, time) = within(t, Duration::from_secs(30));
    outcome(
        violations == 0 && invariant == cohorts && fast_enough,
        format!(
            "1000 cohorts, {test_total} test interventions, {violations} ordering violations; bundles invariant to test deletion in {invariant}/{cohorts} trained cohorts; {time}"
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn random_context(rng: &mut ChaCha8Rng, cfg: &ModelConfig, width: usize, id: usize) -> AnchoredExample {
    let ctx = cfg.context_minutes;
    AnchoredExample {
        id: format!("g:{id}"),
        user_id: "g".into(),
        tag_index: id,
        tag_name: "probe".into(),
        category: Category::from_index(id % Category::ALL.len()).expect("category"),
        t0: 0,
        t1: 10,
        context: (0..ctx * width).map(|_| rng.random_range(-2.0..2.0)).collect(),
        context_valid: (0..ctx * width).map(|_| rng.random_bool(0.85)).collect(),
        feature_width: width,
        targets: Vec::new(),
    }
}

/// Random targets kept at least `margin` away from every kink of the
/// pinball and hinge terms at the current outputs, so finite differences
/// never straddle a kink.
fn attach_targets(rng: &mut ChaCha8Rng, ex: &mut AnchoredExample, raw: &[f64], net: &Network, cfg: &ModelConfig, margin: f64) {
    let median = cfg.median_index();
    ex.targets = Metric::ALL
        .iter()
        .map(|&m| {
            let eps = cfg.epsilons.get(m);
            let t = cfg.targets.iter().position(|x| *x == m).expect("target");
            let valid: Vec<bool> = (0..HORIZON).map(|_| rng.random_bool(0.9)).collect();
            let mut delta = vec![f64::NAN; HORIZON];
            let mut sign = vec![0i8; HORIZON];
            for k in (0..HORIZON).filter(|&k| valid[k]) {
                let qs: Vec<f64> = (0..cfg.quantiles.len()).map(|q| raw[net.output.quantile(t, k, q)]).collect();
                loop {
                    let d: f64 = rng.random_range(-8.0..8.0);
                    let s = labeling::actual_sign(d, eps);
                    let clear_pinball = qs.iter().all(|q| (d - q).abs() >= margin);
                    let clear_hinge = s == 0 || (eps - s as f64 * qs[median]).abs() >= margin;
                    if clear_pinball && clear_hinge {
                        delta[k] = d;
                        sign[k] = s;
                        break;
                    }
                }
            }
            labeling::MetricTargets {
                metric: m,
                included: true,
                baseline: Some(50.0),
                delta,
                valid,
                sign,
            }
        })
        .collect();
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut cfg = ModelConfig::default();
    cfg.width = 8;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    cfg.depth = 1;
    cfg.category_embedding = 4;
    cfg.context_minutes = 16;
    let width = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = Network::new(&cfg, width);
    net.init(&mut rng);
    let mut examples: Vec<AnchoredExample> = (0..3).map(|i| random_context(&mut rng, &cfg, width, i)).collect();
    let norm = Normalizer::fit(width, examples.iter());
    for ex in &mut examples {
        let raw = net.forward(norm.encode(&ex.context, &ex.context_valid), ex.category);
        attach_targets(&mut rng, ex, &raw, &net, &cfg, 0.25);
    }
    let refs: Vec<&AnchoredExample> = examples.iter().collect();
    let total = |net: &Network| model::train::evaluate(net, &norm, &cfg, &refs).weighted(&cfg.loss_weights).total();
    let (parts, grads) = batch_gradient(&net, &norm, &cfg, &refs);
    let all_terms = parts.pinball > 0.0 && parts.median_mse > 0.0 && parts.sign > 0.0 && parts.hazard > 0.0;
    // Five-point central stencil. With kinks out of reach, h can be large
    // enough that rounding in the loss does not swamp small entries.
    let h = 2e-3;
    let mut worst = 0.0f64;
    let mut worst_at = (0, 0, 0.0, 0.0);
    let mut checked = 0;
    for p in 0..net.params.len() {
        for j in 0..net.params[p].data.len() {
            let orig = net.params[p].data[j];
            let mut at = |d: f64| {
                net.params[p].data[j] = orig + d;
                total(&net)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            net.params[p].data[j] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let analytic = grads[p].data[j];
            // Absolute floor for entries that are zero up to rounding.
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            if err > worst {
                worst = err;
                worst_at = (p, j, analytic, numeric);
            }
            checked += 1;
        }
    }
    let (fast_enough, time) = within(t, Duration::from_secs(60));
    outcome(
        worst < 1e-4 && all_terms && fast_enough,
        format!(
            "{checked} parameters, max rel err {worst:.2e} (param {} entry {}: analytic {:.6e}, numeric {:.6e}), all four terms active: {all_terms}; {time}",
            worst_at.0, worst_at.1, worst_at.2, worst_at.3
        ),
    )
}

// 5 -------------------------------------------------------------------------

/// Best monotone least-squares fit by enumerating every partition of the
/// sorted points into contiguous blocks.
fn isotonic_exhaustive(ys: &[f64]) -> Vec<f64> {
    let n = ys.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for i in 0..n {
            if i == n - 1 || mask & (1 << i) != 0 {
                let block = &ys[start..=i];
                let mean = block.iter().sum::<f64>() / block.len() as f64;
                if mean < prev {
                    ok = false;
                    break;
                }
                prev = mean;
                fit.extend(std::iter::repeat_n(mean, block.len()));
                start = i + 1;
            }
        }
        if !ok {
            continue;
        }
        let sse: f64 = fit.iter().zip(ys).map(|(f, y)| (f - y).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    best.expect("the single-block partition is always monotone").1
}

fn criterion_5() -> Outcome {
    let m = fit_isotonic(&[(1.0, 2.0), (2.0, 1.0), (3.0, 3.0)]);
    let exact = [m.apply(1.0), m.apply(2.0), m.apply(3.0)] == [1.5, 1.5, 3.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let mut xs: Vec<f64> = (0..n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
        xs.shuffle(&mut rng);
        let pairs: Vec<(f64, f64)> = xs.iter().map(|&x| (x, rng.random_range(-10.0..10.0))).collect();
        let mut sorted = pairs.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ys: Vec<f64> = sorted.iter().map(|p| p.1).collect();
        let oracle = isotonic_exhaustive(&ys);
        let map = fit_isotonic(&pairs);
        for ((x, _), o) in sorted.iter().zip(&oracle) {
            worst = worst.max((map.apply(*x) - o).abs());
        }
    }
    outcome(
        exact && worst <= 1e-8,
        format!("worked instance exact: {exact}; 100 instances, max abs diff {worst:.1e}"),
    )
}

// 6 -------------------------------------------------------------------------

/// Independent grid search: eligible accuracy, then called-only accuracy
/// (undefined lowest), then the smaller threshold.
fn threshold_exhaustive(points: &[(f64, i8)], grid: &[f64]) -> f64 {
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::INFINITY);
    for &tau in grid {
        let (mut eligible, mut correct, mut called) = (0usize, 0usize, 0usize);
        for &(v, s) in points {
            if s == 0 {
                continue;
            }
            eligible += 1;
            let call = if v >= tau { 1 } else if v <= -tau { -1 } else { 0 };
            if call != 0 {
                called += 1;
                if call == s {
                    correct += 1;
                }
            }
        }
        let e = correct as f64 / eligible as f64;
        let c = if called > 0 { correct as f64 / called as f64 } else { -1.0 };
        if e > best.0 || (e == best.0 && (c > best.1 || (c == best.1 && tau < best.2))) {
            best = (e, c, tau);
        }
    }
    best.2
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut shift_hits = 0;
    let shift_trials = 20;
    for i in 0..shift_trials {
        let f: Vec<f64> = {
            let mut acc = 0.0;
            (0..HORIZON)
                .map(|_| {
                    acc += rng.random_range(-1.0..1.0);
                    acc
                })
                .collect()
        };
        let delayed: Vec<f64> = (0..HORIZON).map(|k| f[k.saturating_sub(3)]).collect();
        let rec = CalibrationRecord {
            example_id: format!("r{i}"),
            metric: Metric::Bbi,
            median: f,
            sign: delayed.iter().map(|d| labeling::actual_sign(*d, 1.0)).collect(),
            delta: delayed,
            valid: vec![true; HORIZON],
        };
        if fit_onset_shift(&[&rec], 15) == 3 {
            shift_hits += 1;
        }
    }
    let grid = ThresholdGrid::default().values();
    let mut agree = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..60);
        let mut points: Vec<(f64, i8)> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-12.0..12.0);
                (((v * 10.0).round() / 10.0), [-1, 0, 1][rng.random_range(0..3)])
            })
            .collect();
        if points.iter().all(|p| p.1 == 0) {
            points.push((1.0, 1));
        }
        let fit = fit_sign_threshold(&points, &grid, 1.0);
        if fit.tau == threshold_exhaustive(&points, &grid) {
            agree += 1;
        }
    }
    outcome(
        shift_hits == shift_trials && agree == 50,
        format!("3-minute delay recovered {shift_hits}/{shift_trials}; threshold agreement {agree}/50"),
    )
}

// 7 -------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut up_down, mut diag, mut order) = (0, 0, 0);
    let (mut up_down_n, mut diag_n, mut order_n) = (0, 0, 0);
    for _ in 0..500 {
        let n = rng.random_range(1..=HORIZON);
        let actual: Vec<i8> = (0..n).map(|_| rng.random_range(-1..=1)).collect();
        let predicted: Vec<i8> = (0..n).map(|_| rng.random_range(-1..=1)).collect();
        let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let w = Window::new(0, n);
        let c = evaluation::counts(&actual, &predicted, &valid, w);
        if let (Some(u), Some(d)) = (c.always_up(), c.always_down()) {
            up_down_n += 1;
            if (u + d - 1.0).abs() < 1e-12 {
                up_down += 1;
            }
        }
        let cm = evaluation::confusion_matrix(&actual, &predicted, &valid, w);
        if let (Some(p), Some(co)) = (cm.diagonal_pct(), c.called_only_accuracy()) {
            diag_n += 1;
            if (p - co * 100.0).abs() <= 0.05 + 1e-9 {
                diag += 1;
            }
        }
        if let (Some(e), Some(co)) = (c.eligible_accuracy(), c.called_only_accuracy()) {
            order_n += 1;
            if co >= e {
                order += 1;
            }
        }
    }
    outcome(
        up_down == up_down_n && diag == diag_n && order == order_n,
        format!("up+down=1 {up_down}/{up_down_n}; diagonal matches called-only {diag}/{diag_n}; called-only >= eligible {order}/{order_n}"),
    )
}

// 8 -------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.synth = SynthSpec::strong();
    cfg.synth.users = 8;
    cfg.synth.days = 28;
    cfg.model.width = 32;
    cfg.model.heads = 4;
    cfg.model.ffn_hidden = 64;
    cfg.model.depth = 1;
    cfg.model.optimizer.max_epochs = 30;
    let cfg = cfg.with_seed(8);
    let strong = cfg.synth.is_strong(&cfg.epsilons);
    let examples = cohort_examples(&cfg);
    let splits = pipeline::assign_splits(&examples, &cfg.split);
    let train = pipeline::select(&examples, &splits, Split::Train);
    let val = pipeline::select(&examples, &splits, Split::Validation);
    let test = pipeline::select(&examples, &splits, Split::Test);
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let (m, _) = match model::train(&train, &val, &cfg.model, &names) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let bundle = pipeline::fit_calibration(&m, &train, &cfg).expect("calibrate");
    let series = pipeline::evaluate_examples(&m, &bundle, &test).expect("evaluate");
    let early = Window::new(0, 60);
    let mut c = SignCounts::default();
    for s in series.iter().filter(|s| s.metric == Metric::Bbi) {
        c.merge(&evaluation::counts(&s.actual, &s.predicted, &s.valid, early));
    }
    let called_only = c.called_only_accuracy().unwrap_or(0.0);
    let call_rate = c.call_rate().unwrap_or(0.0);
    let (fast_enough, time) = within(t, Duration::from_secs(15 * 60));
    outcome(
        strong && called_only >= 0.80 && call_rate >= 0.30 && fast_enough,
        format!(
            "{} train / {} test interventions; BBI [0,60): called-only {:.1}%, call rate {:.1}% over {} eligible minutes; {time}",
            train.len(),
            test.len(),
            called_only * 100.0,
            call_rate * 100.0,
            c.eligible
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn random_series(rng: &mut ChaCha8Rng, n: usize) -> Vec<EvaluatedSeries> {
    (0..n)
        .map(|i| {
            let actual: Vec<i8> = (0..HORIZON).map(|_| rng.random_range(-1..=1)).collect();
            let predicted: Vec<i8> = (0..HORIZON).map(|_| rng.random_range(-1..=1)).collect();
            let valid: Vec<bool> = (0..HORIZON).map(|k| k >= 30 * (i % 2) && rng.random_bool(0.9)).collect();
            EvaluatedSeries {
                example_id: format!("u{}:{i:04}:{}", i % 3, 1000 + i),
                user_id: format!("u{}", i % 3),
                category: Category::ALL[i % 4],
                metric: Metric::ALL[i % 3],
                t1: 1000 + i as i64,
                actual,
                predicted,
                valid,
            }
        })
        .collect()
}

fn svg_cells(svg: &str) -> Vec<(usize, usize, String, String)> {
    let attr = |line: &str, name: &str| -> Option<String> {
        let key = format!("{name}=\"");
        let start = line.find(&key)? + key.len();
        Some(line[start..].split('"').next()?.to_string())
    };
    svg.lines()
        .filter(|l| l.starts_with("<rect"))
        .filter_map(|l| {
            Some((
                attr(l, "data-row")?.parse().ok()?,
                attr(l, "data-col")?.parse().ok()?,
                attr(l, "data-sign")?,
                attr(l, "fill")?,
            ))
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let windows = WindowSet::default();
    let series = random_series(&mut rng, 40);
    let report = EvaluationReport::build(&series, &[Grouping::All, Grouping::User, Grouping::Category], &windows);
    let csv = evaluation::bar_csv(&report.reports);
    let expected = ["0-15", "15-30", "30-60", "60-120", "divider", "0-120"];
    let mut groups: BTreeMap<(String, String, String), Vec<(usize, String)>> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        groups
            .entry((f[0].into(), f[1].into(), f[2].into()))
            .or_default()
            .push((f[3].parse().unwrap_or(usize::MAX), f[4].into()));
    }
    let bars_ok = !groups.is_empty()
        && groups.values().all(|rows| {
            rows.len() == expected.len() && rows.iter().enumerate().all(|(i, (o, w))| *o == i && w == expected[i])
        });

    let key = |e: Option<i8>| match e {
        Some(1) => patterns::RED,
        Some(-1) => patterns::BLUE,
        Some(_) => patterns::GRAY,
        None => patterns::LIGHT_GRAY,
    };
    let mut maps = 0;
    let mut cells = 0;
    let mut heat_ok = true;
    for level in [Level::All, Level::User, Level::Category] {
        for h in patterns::heatmaps(&series, &windows, level) {
            maps += 1;
            let rows = patterns::parse_heatmap_csv(&h.to_csv());
            let svg = svg_cells(&h.to_svg());
            let n: usize = rows.iter().map(|r| r.1.len()).sum();
            heat_ok &= svg.len() == n;
            for (r, c, sign, fill) in svg {
                cells += 1;
                let Some(e) = rows.get(r).and_then(|row| row.1.get(c)).copied() else {
                    heat_ok = false;
                    continue;
                };
                heat_ok &= patterns::cell_text(e) == sign && fill == key(e);
            }
        }
    }
    outcome(
        bars_ok && heat_ok && maps > 0,
        format!("{} bar groups with 4+divider+overall order: {bars_ok}; {maps} heatmaps, {cells} cells agree with CSV and color key: {heat_ok}", groups.len()),
    )
}

// 10 ------------------------------------------------------------------------

fn strip_timestamps(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("generated_at");
            map.values_mut().for_each(strip_timestamps);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let Ok(entries) = std::fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).expect("inside root").to_string_lossy().into_owned();
            let bytes = std::fs::read(&p).expect("read artifact");
            let bytes = if rel.ends_with(".json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).expect("json artifact");
                strip_timestamps(&mut v);
                serde_json::to_vec(&v).expect("json")
            } else {
                bytes
            };
            out.insert(rel, bytes);
        }
    }
}

fn criterion_10() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tmp.path().join("tiny.toml");
    std::fs::write(
        &config,
        "seed = 10\n[synth]\nusers = 3\ndays = 4\n[model]\nwidth = 8\nheads = 2\nffn_hidden = 16\ndepth = 1\n[model.optimizer]\nmax_epochs = 2\n",
    )
    .expect("write config");
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_intervcast"))
            .args(["--config", config.to_str().expect("utf-8"), "--out", out.to_str().expect("utf-8"), "all"])
            .env("RUST_LOG", "error")
            .status()
            .expect("spawn intervcast");
        if !status.success() {
            return outcome(false, format!("run {run} exited with {status}"));
        }
        let mut files = BTreeMap::new();
        collect_files(&out, &out, &mut files);
        trees.push(files);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let same_set = a.keys().eq(b.keys());
    let has_reports = a.contains_key("evaluation/report.json") && a.keys().any(|k| k.starts_with("heatmaps/"));
    let (_, time) = within(t, Duration::from_secs(600));
    outcome(
        same_set && differing.is_empty() && has_reports,
        format!("{} artifacts per run, {} differ (first: {:?}); {time}", a.len(), differing.len(), differing.first()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 RMSSD oracle", criterion_1),
        ("2 labeling exactness", criterion_2),
        ("3 leak safety", criterion_3),
        ("4 gradient check", criterion_4),
        ("5 isotonic oracle", criterion_5),
        ("6 threshold/onset search", criterion_6),
        ("7 metric identities", criterion_7),
        ("8 synthetic forecast quality", criterion_8),
        ("9 output shapes", criterion_9),
        ("10 determinism", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let o = f();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
