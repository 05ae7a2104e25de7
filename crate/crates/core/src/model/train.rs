//! Mini-batch Adam training with early stopping on validation pinball loss.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{example_loss, LossBreakdown, LossWeights, TargetView};
use super::network::Network;
use super::tape::{Mat, Tape};
use super::{ModelConfig, Normalizer, TrainedModel};
use crate::error::{Error, Result};
use crate::labeling::AnchoredExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Weighted training loss components, averaged over examples.
    pub train: LossBreakdown,
    /// Weighted validation loss components.
    pub validation: LossBreakdown,
    /// Unweighted validation pinball loss, the early-stopping criterion.
    pub validation_pinball: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_examples: usize,
    pub validation_examples: usize,
    pub num_parameters: usize,
    pub feature_names: Vec<String>,
    /// Validation pinball loss of the initialized model, before any update.
    pub epoch0_validation_pinball: f64,
    pub best_epoch: usize,
    pub best_validation_pinball: f64,
    pub stopped_early: bool,
    /// Whether early stopping monitored the training split because the
    /// validation split was empty.
    pub monitored_train: bool,
    pub epochs: Vec<EpochRecord>,
}

pub(crate) fn target_views<'a>(config: &ModelConfig, ex: &'a AnchoredExample) -> Vec<TargetView<'a>> {
    config
        .targets
        .iter()
        .enumerate()
        .map(|(head, &m)| {
            let t = ex.target(m);
            TargetView {
                head,
                delta: &t.delta,
                valid: &t.valid,
                sign: &t.sign,
                epsilon: config.epsilons.get(m),
            }
        })
        .collect()
}

/// Unweighted loss components of one example under the current parameters.
pub fn evaluate_example(net: &Network, normalizer: &Normalizer, config: &ModelConfig, ex: &AnchoredExample) -> LossBreakdown {
    let input = normalizer.encode(&ex.context, &ex.context_valid);
    let out = net.forward(input, ex.category);
    example_loss(
        &out,
        &net.output,
        &config.quantiles,
        config.median_index(),
        &target_views(config, ex),
        &config.loss_weights,
        config.hazard_run,
        None,
    )
}

/// Mean unweighted loss components over `examples`.
pub fn evaluate(net: &Network, normalizer: &Normalizer, config: &ModelConfig, examples: &[&AnchoredExample]) -> LossBreakdown {
    let mut acc = LossBreakdown::default();
    if examples.is_empty() {
        return acc;
    }
    let s = 1.0 / examples.len() as f64;
    for ex in examples {
        acc.add_scaled(&evaluate_example(net, normalizer, config, ex), s);
    }
    acc
}

/// Mean unweighted loss over `batch` and the gradient of the mean weighted
/// total with respect to every parameter.
pub fn batch_gradient(
    net: &Network,
    normalizer: &Normalizer,
    config: &ModelConfig,
    batch: &[&AnchoredExample],
) -> (LossBreakdown, Vec<Mat>) {
    let mut grads = net.zero_grads();
    let mut acc = LossBreakdown::default();
    let s = 1.0 / batch.len().max(1) as f64;
    let median = config.median_index();
    for ex in batch {
        let mut tape = Tape::new(&net.params);
        let input = normalizer.encode(&ex.context, &ex.context_valid);
        let out = net.graph(&mut tape, input, ex.category);
        let raw = tape.value(out).data.clone();
        let mut g = vec![0.0; raw.len()];
        let parts = example_loss(
            &raw,
            &net.output,
            &config.quantiles,
            median,
            &target_views(config, ex),
            &config.loss_weights,
            config.hazard_run,
            Some(&mut g),
        );
        acc.add_scaled(&parts, s);
        for x in g.iter_mut() {
            *x *= s;
        }
        tape.backward(out, Mat::from_vec(1, g.len(), g), &mut grads);
    }
    (acc, grads)
}

struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    fn new(net: &Network) -> Self {
        Adam {
            m: net.zero_grads(),
            v: net.zero_grads(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Mat], grads: &[Mat], cfg: &super::OptimizerConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for j in 0..p.data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.data[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

fn has_supervision(config: &ModelConfig, ex: &AnchoredExample) -> bool {
    config.targets.iter().any(|m| ex.target(*m).valid.iter().any(|v| *v))
}

/// Trains a fresh model. The normalizer is fit on the training split only.
pub fn train(
    train: &[&AnchoredExample],
    validation: &[&AnchoredExample],
    config: &ModelConfig,
    feature_names: &[String],
) -> Result<(TrainedModel, TrainReport)> {
    config.validate()?;
    let train: Vec<&AnchoredExample> = train.iter().copied().filter(|e| has_supervision(config, e)).collect();
    let validation: Vec<&AnchoredExample> = validation.iter().copied().filter(|e| has_supervision(config, e)).collect();
    if train.is_empty() {
        return Err(Error::NoTrainingData);
    }
    let width = feature_names.len();
    for ex in train.iter().chain(&validation) {
        if ex.feature_width != width {
            return Err(Error::FeatureWidth {
                expected: width,
                found: ex.feature_width,
            });
        }
        if ex.context_len() != config.context_minutes {
            return Err(Error::Config(format!(
                "example {} has {} context minutes, model expects {}",
                ex.id,
                ex.context_len(),
                config.context_minutes
            )));
        }
    }

    let normalizer = Normalizer::fit(width, train.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::new(config, width);
    net.init(&mut rng);

    let monitored_train = validation.is_empty();
    let monitor: &[&AnchoredExample] = if monitored_train { &train } else { &validation };
    let weights: &LossWeights = &config.loss_weights;

    let initial = evaluate(&net, &normalizer, config, monitor);
    let epoch0 = initial.pinball;
    if !epoch0.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: "non-finite initial validation loss".into(),
        });
    }
    let mut best = (0usize, epoch0, net.params.clone());
    let mut records = Vec::new();
    let mut adam = Adam::new(&net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;
    let mut stopped_early = false;
    let opt = &config.optimizer;

    for epoch in 1..=opt.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<&AnchoredExample> = chunk.iter().map(|&i| train[i]).collect();
            let (parts, grads) = batch_gradient(&net, &normalizer, config, &batch);
            if !parts.is_finite() || grads.iter().any(|g| g.data.iter().any(|x| !x.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite loss or gradient: {parts:?}"),
                });
            }
            epoch_loss.add_scaled(&parts, chunk.len() as f64 / train.len() as f64);
            adam.step(&mut net.params, &grads, opt);
        }
        let val = evaluate(&net, &normalizer, config, monitor);
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("non-finite validation loss: {val:?}"),
            });
        }
        debug!("epoch {epoch}: train {:.4} val pinball {:.4}", epoch_loss.weighted(weights).total(), val.pinball);
        records.push(EpochRecord {
            epoch,
            train: epoch_loss.weighted(weights),
            validation: val.weighted(weights),
            validation_pinball: val.pinball,
        });
        if val.pinball < best.1 {
            best = (epoch, val.pinball, net.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opt.patience {
                stopped_early = true;
                break;
            }
        }
    }
    info!("training finished: best epoch {} val pinball {:.4} (epoch 0: {:.4})", best.0, best.1, epoch0);

    net.params = best.2;
    let report = TrainReport {
        train_examples: train.len(),
        validation_examples: validation.len(),
        num_parameters: net.num_parameters(),
        feature_names: feature_names.to_vec(),
        epoch0_validation_pinball: epoch0,
        best_epoch: best.0,
        best_validation_pinball: best.1,
        stopped_early,
        monitored_train,
        epochs: records,
    };
    let model = TrainedModel {
        config: config.clone(),
        feature_names: feature_names.to_vec(),
        normalizer,
        network: net,
    };
    Ok((model, report))
}
