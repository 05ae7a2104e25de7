//! Calibration pieces on toy data: isotonic regression, onset-shift
//! search, and the sign-threshold grid search.

use interv_forecast::calibration::{self, CalibrationRecord, ThresholdGrid};
use interv_forecast::domain::{Metric, HORIZON};
use interv_forecast::labeling::actual_sign;

fn main() {
    let map = calibration::fit_isotonic(&[(1.0, 2.0), (2.0, 1.0), (3.0, 3.0)]);
    println!("isotonic: 1 -> {}, 2 -> {}, 2.5 -> {}, 3 -> {}", map.apply(1.0), map.apply(2.0), map.apply(2.5), map.apply(3.0));

    let forecast: Vec<f64> = (0..HORIZON).map(|k| 6.0 * (-(k as f64) / 25.0).exp() * (k as f64 / 3.0).min(1.0)).collect();
    let actual: Vec<f64> = (0..HORIZON).map(|k| forecast[k.saturating_sub(4)]).collect();
    let record = CalibrationRecord {
        example_id: "demo".into(),
        metric: Metric::Bbi,
        median: forecast,
        sign: actual.iter().map(|d| actual_sign(*d, 1.0)).collect(),
        delta: actual,
        valid: vec![true; HORIZON],
    };
    println!("onset shift: {} minutes", calibration::fit_onset_shift(&[&record], 15));

    let points = [(0.3, -1), (-4.0, -1), (2.2, 1), (0.8, 1), (-0.2, 0)];
    let fit = calibration::fit_sign_threshold(&points, &ThresholdGrid::default().values(), 1.0);
    println!(
        "threshold {:.1}: eligible {:?}, called-only {:?}",
        fit.tau, fit.eligible_accuracy, fit.called_only_accuracy
    );
}
