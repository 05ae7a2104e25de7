//! Windowed accuracy, naive baselines, confusion percentages and the
//! bar-chart CSV for a handful of hand-made sign series.

use interv_forecast::domain::{Category, Metric, WindowSet};
use interv_forecast::evaluation::{self, EvaluatedSeries, EvaluationReport, Grouping};

fn main() {
    let series: Vec<EvaluatedSeries> = (0..4)
        .map(|i| {
            let actual: Vec<i8> = (0..120).map(|k| if (k + i * 7) % 5 == 0 { 0 } else { 1 - 2 * ((k / 40 + i) % 2) as i8 }).collect();
            let predicted: Vec<i8> = actual.iter().enumerate().map(|(k, a)| if k % 6 == 0 { 0 } else if k % 9 == 0 { -a } else { *a }).collect();
            EvaluatedSeries {
                example_id: format!("u0:{i:04}:{}", 100 * i),
                user_id: "u0".into(),
                category: [Category::Cardio, Category::Mindful][i % 2],
                metric: Metric::Bbi,
                t1: 100 * i as i64,
                actual,
                predicted,
                valid: vec![true; 120],
            }
        })
        .collect();
    let report = EvaluationReport::build(&series, &[Grouping::All, Grouping::Category], &WindowSet::default());
    print!("{}", evaluation::bar_csv(&report.reports));
    if let Some(r) = report.reports.iter().find(|r| r.overall && r.grouping == Grouping::All) {
        println!("overall confusion (TP, FN, FP, TN %): {:?}", r.counts.confusion.rounded_percentages());
    }
}
