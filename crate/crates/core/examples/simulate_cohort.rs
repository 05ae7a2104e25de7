//! Write a small synthetic cohort (raw streams, tags, ground truth) to disk.
//!
//! `cargo run --example simulate_cohort -- [out_dir]`

use interv_forecast::domain::Epsilons;
use interv_forecast::synth::{self, SynthSpec};

fn main() -> interv_forecast::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_cohort".into());
    let mut spec = SynthSpec::default();
    spec.users = 3;
    spec.days = 5;
    let ids = synth::write_cohort(&spec, &Epsilons::default(), out.as_ref())?;
    println!("wrote {} users under {out}: {}", ids.len(), ids.join(", "));
    let user = synth::generate_user(&spec, 0, &Epsilons::default());
    println!("{}: {} beats, {} interventions", ids[0], user.bundle.bbi.len(), user.tags.len());
    for tag in user.tags.iter().take(3) {
        println!("  {:<20} {:?} t0={} t1={}", tag.name, tag.category, tag.t0, tag.t1);
    }
    Ok(())
}
