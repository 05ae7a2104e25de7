//! Build intervention-anchored examples, list rejections, and assign
//! leak-safe splits.

use std::collections::BTreeMap;

use interv_forecast::domain::Metric;
use interv_forecast::pipeline::{self, PipelineConfig};
use interv_forecast::synth;

fn main() -> interv_forecast::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.synth.users = 2;
    cfg.synth.days = 6;
    let cfg = cfg.resolved();
    let mut examples = Vec::new();
    let mut rejections = Vec::new();
    for user in synth::generate_cohort(&cfg.synth, &cfg.epsilons) {
        let feats = pipeline::featurize_user(&user.bundle, &cfg)?;
        let (ex, rej) = pipeline::label_user(&feats, &user.tags, &cfg);
        examples.extend(ex);
        rejections.extend(rej);
    }
    println!("{} examples, {} rejections", examples.len(), rejections.len());
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for r in &rejections {
        *reasons.entry(format!("{:?}", r.reason)).or_default() += 1;
    }
    for (reason, n) in reasons {
        println!("  {n:>3} x {reason}");
    }
    if let Some(ex) = examples.first() {
        let t = ex.target(Metric::Bbi);
        println!("{}: BBI baseline {:?}, first deltas {:?}", ex.id, t.baseline, &t.delta[..5]);
    }
    let splits = pipeline::assign_splits(&examples, &cfg.split);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in splits {
        *counts.entry(format!("{s:?}")).or_default() += 1;
    }
    println!("splits: {counts:?}");
    Ok(())
}
