//! Align raw streams onto the minute grid and report channel coverage.

use interv_forecast::domain::Epsilons;
use interv_forecast::ingest::{self, GridParams};
use interv_forecast::synth::{self, SynthSpec};

fn main() -> interv_forecast::Result<()> {
    let mut spec = SynthSpec::default();
    spec.days = 2;
    spec.gap_rate_per_hour = 0.1;
    let user = synth::generate_user(&spec, 0, &Epsilons::default());
    let grid = ingest::align_minute_grid(&user.bundle, spec.clock(), GridParams::default())?;
    println!("{} minutes from {}", grid.len(), ingest::format_minute(grid.start));
    for (name, ch) in grid.channels() {
        let valid = ch.valid.iter().filter(|v| **v).count();
        println!("{name:<12} {:5.1}% valid", 100.0 * valid as f64 / grid.len() as f64);
    }
    let text = ingest::write_grid(&grid);
    println!("{}", text.lines().take(4).collect::<Vec<_>>().join("\n"));
    Ok(())
}
