//! RMSSD from beat intervals: the direct formula and the rolling
//! 15-minute series used as a feature.

use interv_forecast::features::{self, RmssdParams};
use interv_forecast::ingest::BbiEvent;

fn main() {
    let toy = [800.0, 810.0, 790.0, 805.0];
    println!("RMSSD{toy:?} = {:.3} ms", features::rmssd_of_intervals(&toy).unwrap());

    let mut t = 0;
    let beats: Vec<BbiEvent> = (0..2000)
        .map(|i| {
            let iv = 850.0 + 30.0 * (i as f64 / 4.0).sin();
            t += iv as i64;
            BbiEvent { t_ms: t, interval_ms: iv }
        })
        .collect();
    let minutes = (t / 60_000) as usize;
    let series = features::compute_rmssd(&beats, 0, minutes, &RmssdParams::default());
    for i in (0..minutes).step_by(5) {
        match series.rmssd.get(i) {
            Some(v) => println!("minute {i:>3}: {v:6.2} ms ({} intervals)", series.intervals[i]),
            None => println!("minute {i:>3}: invalid"),
        }
    }
}
