//! Multi-horizon quantile forecaster: configuration, input normalization,
//! inference, and on-disk persistence.

pub mod loss;
pub mod network;
pub mod tape;
pub mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Category, Epsilons, Metric, CONTEXT_MINUTES, HORIZON};
use crate::error::{Error, Result};
use crate::labeling::AnchoredExample;
pub use loss::{LossBreakdown, LossWeights};
pub use network::{Network, OutputLayout};
use tape::Mat;
pub use train::{train, EpochRecord, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            patience: 10,
            max_epochs: 60,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub context_minutes: usize,
    pub quantiles: Vec<f64>,
    pub targets: Vec<Metric>,
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_hidden: usize,
    pub category_embedding: usize,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub epsilons: Epsilons,
    /// Consecutive in-band minutes that count as a return to baseline.
    pub hazard_run: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context_minutes: CONTEXT_MINUTES,
            quantiles: vec![0.1, 0.5, 0.9],
            targets: Metric::ALL.to_vec(),
            depth: 2,
            heads: 4,
            width: 64,
            ffn_hidden: 256,
            category_embedding: 8,
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            epsilons: Epsilons::default(),
            hazard_run: 5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Drops or keeps BBI as a direct target.
    pub fn with_bbi(mut self, include: bool) -> Self {
        self.targets.retain(|m| *m != Metric::Bbi);
        if include {
            self.targets.push(Metric::Bbi);
        }
        self
    }

    pub fn median_index(&self) -> usize {
        self.quantiles
            .iter()
            .position(|q| *q == 0.5)
            .expect("validated config contains the median")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.quantiles.contains(&0.5) {
            return bad("quantile levels must include 0.5".into());
        }
        if self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return bad("quantile levels must lie in (0, 1)".into());
        }
        if self.quantiles.windows(2).any(|w| w[0] >= w[1]) {
            return bad("quantile levels must be strictly increasing".into());
        }
        if self.targets.is_empty() {
            return bad("at least one target metric is required".into());
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return bad("duplicate target metric".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.context_minutes == 0 || self.ffn_hidden == 0 {
            return bad("context and feed-forward width must be positive".into());
        }
        if self.hazard_run == 0 {
            return bad("hazard_run must be positive".into());
        }
        let o = &self.optimizer;
        if o.batch_size == 0 || !(o.learning_rate > 0.0) {
            return bad("batch size and learning rate must be positive".into());
        }
        Ok(())
    }
}

/// Per-feature standardization fit on valid training context cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Normalizer {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn fit<'a>(width: usize, examples: impl IntoIterator<Item = &'a AnchoredExample>) -> Self {
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut n = vec![0usize; width];
        for ex in examples {
            for (i, (&v, &ok)) in ex.context.iter().zip(&ex.context_valid).enumerate() {
                if ok {
                    let j = i % width;
                    sum[j] += v;
                    sq[j] += v * v;
                    n[j] += 1;
                }
            }
        }
        let mut out = Normalizer::identity(width);
        for j in 0..width {
            if n[j] > 0 {
                let m = sum[j] / n[j] as f64;
                let var = (sq[j] / n[j] as f64 - m * m).max(0.0);
                out.mean[j] = m;
                out.std[j] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// `rows x 2F` network input: standardized values with invalid cells set
    /// to zero, then the validity mask.
    pub fn encode(&self, context: &[f64], valid: &[bool]) -> Mat {
        let f = self.width();
        let rows = context.len() / f;
        let mut m = Mat::zeros(rows, 2 * f);
        for r in 0..rows {
            for j in 0..f {
                let i = r * f + j;
                if valid[i] {
                    m.data[r * 2 * f + j] = (context[i] - self.mean[j]) / self.std[j];
                    m.data[r * 2 * f + f + j] = 1.0;
                }
            }
        }
        m
    }
}

/// Emitted forecast: per target, `120 x |Q|` percent changes (sorted per
/// minute) and 120 hazard probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub targets: Vec<Metric>,
    pub quantiles: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub hazard: Vec<Vec<f64>>,
}

impl QuantileForecast {
    pub fn from_raw(raw: &[f64], layout: &OutputLayout, targets: &[Metric], quantiles: &[f64]) -> Self {
        let q = layout.quantiles;
        let mut values = Vec::with_capacity(targets.len());
        let mut hazard = Vec::with_capacity(targets.len());
        for t in 0..targets.len() {
            let mut grid = Vec::with_capacity(layout.horizon * q);
            for k in 0..layout.horizon {
                let start = layout.quantile(t, k, 0);
                let mut row = raw[start..start + q].to_vec();
                row.sort_by(f64::total_cmp);
                grid.extend(row);
            }
            values.push(grid);
            hazard.push((0..layout.horizon).map(|k| loss::sigmoid(raw[layout.hazard(t, k)])).collect());
        }
        QuantileForecast {
            targets: targets.to_vec(),
            quantiles: quantiles.to_vec(),
            values,
            hazard,
        }
    }

    fn slot(&self, metric: Metric) -> Option<usize> {
        self.targets.iter().position(|m| *m == metric)
    }

    pub fn quantile(&self, metric: Metric, k: usize, qi: usize) -> Option<f64> {
        self.slot(metric).map(|t| self.values[t][k * self.quantiles.len() + qi])
    }

    /// The 0.5-quantile trajectory for `metric`.
    pub fn median(&self, metric: Metric) -> Option<Vec<f64>> {
        let t = self.slot(metric)?;
        let mi = self.quantiles.iter().position(|q| *q == 0.5)?;
        let q = self.quantiles.len();
        Some((0..HORIZON).map(|k| self.values[t][k * q + mi]).collect())
    }

    pub fn hazard_of(&self, metric: Metric) -> Option<&[f64]> {
        self.slot(metric).map(|t| self.hazard[t].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    feature_names: Vec<String>,
    normalizer: Normalizer,
    shapes: Vec<ParamShape>,
    num_parameters: usize,
    config_hash: String,
}

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Parameters plus the frozen input contract they were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub feature_names: Vec<String>,
    pub normalizer: Normalizer,
    pub network: Network,
}

impl TrainedModel {
    pub fn feature_width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn check_width(&self, width: usize) -> Result<()> {
        if width != self.feature_width() {
            return Err(Error::FeatureWidth {
                expected: self.feature_width(),
                found: width,
            });
        }
        Ok(())
    }

    /// Raw head outputs for one example.
    pub fn raw_outputs(&self, example: &AnchoredExample) -> Result<Vec<f64>> {
        self.check_width(example.feature_width)?;
        let input = self.normalizer.encode(&example.context, &example.context_valid);
        Ok(self.network.forward(input, example.category))
    }

    pub fn forecast(&self, example: &AnchoredExample) -> Result<QuantileForecast> {
        let raw = self.raw_outputs(example)?;
        Ok(self.to_forecast(&raw))
    }

    pub fn forecast_context(&self, context: &[f64], valid: &[bool], width: usize, category: Category) -> Result<QuantileForecast> {
        self.check_width(width)?;
        let input = self.normalizer.encode(context, valid);
        let raw = self.network.forward(input, category);
        Ok(self.to_forecast(&raw))
    }

    fn to_forecast(&self, raw: &[f64]) -> QuantileForecast {
        QuantileForecast::from_raw(raw, &self.network.output, &self.config.targets, &self.config.quantiles)
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.network.num_parameters() * 8);
        for p in &self.network.params {
            for x in &p.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(dir.join(PARAMS_FILE), bytes)?;
        let manifest = Manifest {
            config: self.config.clone(),
            feature_names: self.feature_names.clone(),
            normalizer: self.normalizer.clone(),
            shapes: self
                .network
                .shapes()
                .into_iter()
                .map(|(name, rows, cols)| ParamShape { name, rows, cols })
                .collect(),
            num_parameters: self.network.num_parameters(),
            config_hash: config_hash.to_string(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a saved model and returns it with the recorded config hash.
    pub fn load(dir: &Path) -> Result<(TrainedModel, String)> {
        let mpath = dir.join(MANIFEST_FILE);
        let ppath = dir.join(PARAMS_FILE);
        for p in [&mpath, &ppath] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        manifest.config.validate()?;
        let mut network = Network::new(&manifest.config, manifest.feature_names.len());
        let expected: Vec<ParamShape> = network
            .shapes()
            .into_iter()
            .map(|(name, rows, cols)| ParamShape { name, rows, cols })
            .collect();
        if expected != manifest.shapes {
            return Err(Error::malformed(&mpath, "parameter shapes do not match the configuration"));
        }
        let bytes = fs::read(&ppath)?;
        if bytes.len() != network.num_parameters() * 8 {
            return Err(Error::malformed(
                &ppath,
                format!("expected {} values, found {} bytes", network.num_parameters(), bytes.len()),
            ));
        }
        let mut chunks = bytes.chunks_exact(8);
        for p in network.params.iter_mut() {
            for x in p.data.iter_mut() {
                let c = chunks.next().expect("length checked");
                *x = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            }
        }
        let model = TrainedModel {
            config: manifest.config,
            feature_names: manifest.feature_names,
            normalizer: manifest.normalizer,
            network,
        };
        Ok((model, manifest.config_hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 8,
            depth: 1,
            heads: 2,
            ffn_hidden: 16,
            category_embedding: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.quantiles = vec![0.1, 0.9];
        assert!(c.validate().is_err());
        c.quantiles = vec![0.5, 0.1];
        assert!(c.validate().is_err());
        c.quantiles = vec![0.0, 0.5];
        assert!(c.validate().is_err());
        let c = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::default().with_bbi(false).targets, vec![Metric::Rmssd, Metric::Hr]);
    }

    #[test]
    fn zero_heads_give_zero_forecast() {
        let cfg = tiny();
        let mut net = Network::new(&cfg, 4);
        net.init(&mut ChaCha8Rng::seed_from_u64(1));
        net.zero_heads();
        let out = net.forward(Mat::zeros(cfg.context_minutes, 8), Category::Social);
        assert!(out.iter().all(|x| *x == 0.0));
        let fc = QuantileForecast::from_raw(&out, &net.output, &cfg.targets, &cfg.quantiles);
        assert!(fc.values.iter().flatten().all(|x| *x == 0.0));
        assert!(fc.hazard.iter().flatten().all(|h| *h == 0.5));
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        let cfg = tiny();
        let mut net = Network::new(&cfg, 3);
        net.init(&mut ChaCha8Rng::seed_from_u64(7));
        let mut input = Mat::zeros(cfg.context_minutes, 6);
        for (i, x) in input.data.iter_mut().enumerate() {
            *x = ((i * 37) % 11) as f64 / 7.0 - 0.6;
        }
        let a = net.forward(input.clone(), Category::Mindful);
        let b = net.forward(input, Category::Mindful);
        assert_eq!(a, b);
    }

    #[test]
    fn feature_permutation_with_weight_permutation_is_equivalent() {
        let cfg = tiny();
        let f = 4;
        let mut net = Network::new(&cfg, f);
        net.init(&mut ChaCha8Rng::seed_from_u64(3));
        let mut input = Mat::zeros(cfg.context_minutes, 2 * f);
        for (i, x) in input.data.iter_mut().enumerate() {
            *x = ((i * 13) % 17) as f64 / 5.0 - 1.5;
        }
        let perm = [2usize, 0, 3, 1];
        // Column c of the permuted input holds original feature perm[c].
        let mut pin = Mat::zeros(input.rows, input.cols);
        for r in 0..input.rows {
            for c in 0..f {
                pin.data[r * 2 * f + c] = input.at(r, perm[c]);
                pin.data[r * 2 * f + f + c] = input.at(r, f + perm[c]);
            }
        }
        let mut pnet = net.clone();
        let wi = net.input_weight_index();
        let w = &net.params[wi];
        let pw = &mut pnet.params[wi];
        for c in 0..f {
            for (dst, src) in [(c, perm[c]), (f + c, f + perm[c])] {
                let cols = w.cols;
                pw.data[dst * cols..(dst + 1) * cols].copy_from_slice(w.row(src));
            }
        }
        let a = net.forward(input, Category::Academic);
        let b = pnet.forward(pin, Category::Academic);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn forecast_sorts_quantiles_and_bounds_hazard() {
        let layout = OutputLayout {
            targets: 1,
            horizon: HORIZON,
            quantiles: 3,
        };
        let mut raw = vec![0.0; layout.total()];
        for k in 0..HORIZON {
            raw[layout.quantile(0, k, 0)] = 3.0;
            raw[layout.quantile(0, k, 1)] = -1.0;
            raw[layout.quantile(0, k, 2)] = 1.0;
            raw[layout.hazard(0, k)] = k as f64 - 60.0;
        }
        let fc = QuantileForecast::from_raw(&raw, &layout, &[Metric::Hr], &[0.1, 0.5, 0.9]);
        assert_eq!(fc.quantile(Metric::Hr, 5, 0), Some(-1.0));
        assert_eq!(fc.median(Metric::Hr).unwrap()[7], 1.0);
        assert!(fc.hazard_of(Metric::Hr).unwrap().iter().all(|h| (0.0..=1.0).contains(h)));
        assert!(fc.median(Metric::Rmssd).is_none());
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = tiny();
        let mut net = Network::new(&cfg, 2);
        net.init(&mut ChaCha8Rng::seed_from_u64(9));
        let model = TrainedModel {
            config: cfg,
            feature_names: vec!["a".into(), "b".into()],
            normalizer: Normalizer::identity(2),
            network: net,
        };
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), "abc").unwrap();
        let (back, hash) = TrainedModel::load(dir.path()).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(back, model);
        assert!(matches!(back.check_width(3), Err(Error::FeatureWidth { expected: 2, found: 3 })));
    }
}
