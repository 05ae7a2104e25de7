//! Cluster per-window sign vectors and render a heatmap as CSV and SVG.
//!
//! `cargo run --example heatmap -- [out.svg]`

use interv_forecast::domain::{Category, Metric, WindowSet};
use interv_forecast::evaluation::EvaluatedSeries;
use interv_forecast::patterns::{self, Level};

fn main() -> std::io::Result<()> {
    let patterns_by_row: [[i8; 4]; 6] = [[1, 1, 0, -1], [-1, -1, -1, 0], [1, 1, 0, -1], [0, 1, 1, 1], [-1, -1, -1, -1], [1, 1, 1, -1]];
    let series: Vec<EvaluatedSeries> = patterns_by_row
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let windows = WindowSet::default();
            let mut signs = vec![0i8; 120];
            for (w, s) in windows.windows.iter().zip(p) {
                for k in w.range() {
                    signs[k] = *s;
                }
            }
            EvaluatedSeries {
                example_id: format!("u0:{i:04}:{}", 60 * i),
                user_id: "u0".into(),
                category: Category::RestRecovery,
                metric: Metric::Rmssd,
                t1: 60 * i as i64,
                actual: signs.clone(),
                predicted: signs,
                valid: vec![true; 120],
            }
        })
        .collect();
    let maps = patterns::heatmaps(&series, &WindowSet::default(), Level::User);
    let pred = maps.iter().find(|h| h.file_stem().ends_with("_pred")).expect("predicted heatmap");
    print!("{}", pred.to_csv());
    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, pred.to_svg())?;
        println!("wrote {path}");
    }
    Ok(())
}
