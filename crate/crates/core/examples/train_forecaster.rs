//! Train the forecaster on synthetic interventions and print the epoch log
//! and one forecast.

use interv_forecast::domain::Metric;
use interv_forecast::features::FEATURE_NAMES;
use interv_forecast::labeling::Split;
use interv_forecast::model;
use interv_forecast::pipeline::{self, PipelineConfig};
use interv_forecast::synth::{self, SynthSpec};

fn main() -> interv_forecast::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.synth = SynthSpec::strong();
    cfg.synth.users = 3;
    cfg.synth.days = 8;
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.model.ffn_hidden = 32;
    cfg.model.depth = 1;
    cfg.model.optimizer.max_epochs = 40;
    let cfg = cfg.resolved();
    let mut examples = Vec::new();
    for user in synth::generate_cohort(&cfg.synth, &cfg.epsilons) {
        let feats = pipeline::featurize_user(&user.bundle, &cfg)?;
        examples.extend(pipeline::label_user(&feats, &user.tags, &cfg).0);
    }
    let splits = pipeline::assign_splits(&examples, &cfg.split);
    let train = pipeline::select(&examples, &splits, Split::Train);
    let val = pipeline::select(&examples, &splits, Split::Validation);
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let (trained, report) = model::train(&train, &val, &cfg.model, &names)?;
    println!("{} parameters, {} train / {} validation", report.num_parameters, report.train_examples, report.validation_examples);
    for e in &report.epochs {
        println!("epoch {:>2}: train {:.4} validation pinball {:.4}", e.epoch, e.train.total(), e.validation_pinball);
    }
    if let Some(ex) = val.first() {
        let fc = trained.forecast(ex)?;
        let median = fc.median(Metric::Bbi).expect("bbi target");
        let truth = &ex.target(Metric::Bbi).delta;
        for k in [0, 5, 15, 30, 60, 119] {
            println!("{} +{k:>3} min: forecast {:6.2}%  actual {:6.2}%", ex.id, median[k], truth[k]);
        }
    }
    Ok(())
}
