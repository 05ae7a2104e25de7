//! Train, calibrate and evaluate on a synthetic cohort entirely in memory.
//!
//! `cargo run --release --example synthetic_end_to_end -- [users] [days] [max_epochs]`

use interv_forecast::domain::{Metric, Window};
use interv_forecast::evaluation::SignCounts;
use interv_forecast::labeling::Split;
use interv_forecast::model;
use interv_forecast::pipeline::{self, PipelineConfig};
use interv_forecast::synth::{self, SynthSpec};

fn main() -> interv_forecast::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cfg = PipelineConfig::default();
    cfg.synth = SynthSpec::strong();
    cfg.synth.users = args.first().copied().unwrap_or(8);
    cfg.synth.days = args.get(1).copied().unwrap_or(28);
    cfg.model.width = 32;
    cfg.model.heads = 4;
    cfg.model.ffn_hidden = 64;
    cfg.model.depth = 1;
    cfg.model.optimizer.max_epochs = args.get(2).copied().unwrap_or(30);
    let cfg = cfg.resolved();
    cfg.validate()?;

    let cohort = synth::generate_cohort(&cfg.synth, &cfg.epsilons);
    let mut examples = Vec::new();
    for user in &cohort {
        let feats = pipeline::featurize_user(&user.bundle, &cfg)?;
        examples.extend(pipeline::label_user(&feats, &user.tags, &cfg).0);
    }
    let splits = pipeline::assign_splits(&examples, &cfg.split);
    let train = pipeline::select(&examples, &splits, Split::Train);
    let val = pipeline::select(&examples, &splits, Split::Validation);
    let test = pipeline::select(&examples, &splits, Split::Test);
    println!("examples: train {} validation {} test {}", train.len(), val.len(), test.len());

    let names: Vec<String> = interv_forecast::features::FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let (trained, report) = model::train(&train, &val, &cfg.model, &names)?;
    println!("best epoch {} of {}", report.best_epoch, report.epochs.len());
    let bundle = pipeline::fit_calibration(&trained, &train, &cfg)?;
    let series = pipeline::evaluate_examples(&trained, &bundle, &test)?;

    let early = Window::new(0, 60);
    for m in Metric::ALL {
        let mut c = SignCounts::default();
        for s in series.iter().filter(|s| s.metric == m) {
            for k in early.range() {
                if s.valid[k] {
                    c.add(s.actual[k], s.predicted[k]);
                }
            }
        }
        let cal = bundle.metric(m).expect("calibrated");
        println!(
            "{m}: shift {} tau {:.1} eligible {:?} called-only {:?} call rate {:?}",
            cal.shift,
            cal.threshold.tau,
            c.eligible_accuracy(),
            c.called_only_accuracy(),
            c.call_rate()
        );
    }
    Ok(())
}
