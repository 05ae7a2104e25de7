//! Configuration, in-memory per-user processing, and the staged on-disk
//! pipeline driven by the `intervcast` binary.
//!
//! Every stage reads its predecessors' artifacts from the run directory,
//! writes its own, and records a stamp (`stamps/<stage>.json`) holding the
//! config hash, the stage version and a digest of each output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{fit_bundle, CalibrationBundle, CalibrationConfig, CalibrationRecord};
use crate::domain::{Category, Epsilons, LocalClock, Metric, Minute, WindowSet};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvaluatedSeries, EvaluationReport, Grouping};
use crate::features::{self, FeatureFrame, FeatureMeta, RmssdParams, RmssdSeries};
use crate::ingest::{self, Channel, GridParams, MinuteGrid, StreamBundle, TagRecord};
use crate::labeling::{self, AnchoredExample, LabelParams, MetricSeries, MetricTargets, Plausibility, Rejection, Split, SplitFractions};
use crate::model::{self, ModelConfig, TrainReport, TrainedModel};
use crate::patterns::{self, Level};
use crate::synth::{self, SynthSpec};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Raw per-user directories. Defaults to `<out>/data`.
    pub root: Option<PathBuf>,
    /// Fixed UTC offset such as `+01:00`, or `UTC`.
    pub timezone: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            timezone: "UTC".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    pub baseline_minutes: usize,
    pub baseline_min_valid: usize,
    pub min_window_coverage: f64,
    pub max_window_gap: usize,
    pub plausibility: Plausibility,
    pub metrics: Vec<Metric>,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        let p = LabelParams::default();
        LabelingConfig {
            baseline_minutes: p.baseline_minutes,
            baseline_min_valid: p.baseline_min_valid,
            min_window_coverage: p.min_window_coverage,
            max_window_gap: p.max_window_gap,
            plausibility: p.plausibility,
            metrics: p.metrics,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSignRule {
    #[default]
    Majority,
    MeanMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub groupings: Vec<Grouping>,
    pub levels: Vec<Level>,
    pub window_sign: WindowSignRule,
    pub svg: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            groupings: vec![Grouping::All, Grouping::User, Grouping::Category],
            levels: vec![Level::All, Level::User, Level::Category],
            window_sign: WindowSignRule::Majority,
            svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; copied into the model and synth sections.
    pub seed: u64,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub windows: WindowSet,
    pub epsilons: Epsilons,
    pub grid: GridParams,
    pub rmssd: RmssdParams,
    pub labeling: LabelingConfig,
    pub split: SplitFractions,
    pub model: ModelConfig,
    pub calibration: CalibrationConfig,
    pub report: ReportConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            data: DataConfig::default(),
            output: OutputConfig::default(),
            windows: WindowSet::default(),
            epsilons: Epsilons::default(),
            grid: GridParams::default(),
            rmssd: RmssdParams::default(),
            labeling: LabelingConfig::default(),
            split: SplitFractions::default(),
            model: ModelConfig::default(),
            calibration: CalibrationConfig::default(),
            report: ReportConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

pub const ENV_PREFIX: &str = "INTERVCAST__";

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table `{p}`")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl PipelineConfig {
    /// Parses TOML text, then applies `INTERVCAST__section__key=value`
    /// overrides from `env` (values are TOML literals; bare words are
    /// strings).
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (k, v) in overrides {
            let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut table, &path, parse_literal(&v))?;
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|_| Error::MissingFile(p.to_path_buf()))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    /// Propagates shared values into the sections that consume them.
    pub fn resolved(mut self) -> Self {
        self.model.seed = self.seed;
        self.synth.seed = self.seed;
        self.model.epsilons = self.epsilons;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn clock(&self) -> Result<LocalClock> {
        LocalClock::parse(&self.data.timezone).map_err(Error::Config)
    }

    pub fn label_params(&self) -> LabelParams {
        LabelParams {
            windows: self.windows.clone(),
            epsilons: self.epsilons,
            baseline_minutes: self.labeling.baseline_minutes,
            baseline_min_valid: self.labeling.baseline_min_valid,
            min_window_coverage: self.labeling.min_window_coverage,
            max_window_gap: self.labeling.max_window_gap,
            context_minutes: self.model.context_minutes,
            plausibility: self.labeling.plausibility,
            metrics: self.labeling.metrics.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for m in Metric::ALL {
            let e = self.epsilons.get(m);
            if !(e > 0.0) || !e.is_finite() {
                return bad(format!("epsilon for {m} must be positive, got {e}"));
            }
        }
        self.windows.validate().map_err(Error::Config)?;
        self.clock()?;
        self.model.validate()?;
        let l = &self.labeling;
        if l.baseline_minutes == 0 || l.baseline_min_valid > l.baseline_minutes {
            return bad("baseline_min_valid must not exceed baseline_minutes".into());
        }
        if !(0.0..=1.0).contains(&l.min_window_coverage) {
            return bad("min_window_coverage must lie in [0, 1]".into());
        }
        if l.metrics.is_empty() {
            return bad("labeling needs at least one metric".into());
        }
        let p = &l.plausibility;
        if !(p.hr_min < p.hr_max && p.rmssd_min < p.rmssd_max) {
            return bad("plausibility ranges are empty".into());
        }
        let s = &self.split;
        if !(0.0..1.0).contains(&s.test) || !(0.0..1.0).contains(&s.validation) || s.test + s.validation >= 1.0 {
            return bad("split fractions must be in [0, 1) and sum below 1".into());
        }
        let t = &self.calibration.thresholds;
        if t.denominator == 0 || t.first == 0 || t.first > t.last {
            return bad("threshold grid must be non-empty and positive".into());
        }
        if self.rmssd.window_ms <= 0 || self.rmssd.step_ms <= 0 {
            return bad("rmssd window and step must be positive".into());
        }
        self.synth.validate()?;
        Ok(())
    }

    /// SHA-256 of the configuration with machine-local paths removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data.root = None;
        c.output.dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// In-memory processing

/// One user's aligned data through feature extraction.
#[derive(Debug, Clone)]
pub struct UserFeatures {
    pub grid: MinuteGrid,
    pub rmssd: RmssdSeries,
    pub bbi: Channel,
    pub frame: FeatureFrame,
}

impl UserFeatures {
    /// Plausibility-screened metric series used for labels.
    pub fn metric_series(&self, p: &Plausibility) -> MetricSeries {
        let mut s = MetricSeries {
            start: self.grid.start,
            rmssd: self.rmssd.rmssd.clone(),
            hr: self.grid.hr.clone(),
            bbi: self.bbi.clone(),
        };
        labeling::screen_plausibility(&mut s, p);
        s
    }
}

pub fn featurize_user(bundle: &StreamBundle, cfg: &PipelineConfig) -> Result<UserFeatures> {
    let clock = cfg.clock()?;
    let grid = ingest::align_minute_grid(bundle, clock, cfg.grid)?;
    let rmssd = features::compute_rmssd(&bundle.bbi, grid.start, grid.len(), &cfg.rmssd);
    let bbi = features::bbi_minute_means(&bundle.bbi, grid.start, grid.len());
    let frame = features::build_feature_frame(&grid, &rmssd, &bundle.sleep)?;
    Ok(UserFeatures { grid, rmssd, bbi, frame })
}

pub fn label_user(feats: &UserFeatures, tags: &[TagRecord], cfg: &PipelineConfig) -> (Vec<AnchoredExample>, Vec<Rejection>) {
    let params = cfg.label_params();
    let series = feats.metric_series(&params.plausibility);
    labeling::make_examples(&feats.frame, &series, tags, &params)
}

pub fn assign_splits(examples: &[AnchoredExample], fractions: &SplitFractions) -> Vec<Split> {
    let keys: Vec<(&str, Minute)> = examples.iter().map(|e| (e.user_id.as_str(), e.t1)).collect();
    labeling::split_leak_safe(&keys, fractions)
}

pub fn select<'a>(examples: &'a [AnchoredExample], splits: &[Split], which: Split) -> Vec<&'a AnchoredExample> {
    examples.iter().zip(splits).filter(|(_, s)| **s == which).map(|(e, _)| e).collect()
}

pub fn calibration_records(model: &TrainedModel, examples: &[&AnchoredExample]) -> Result<Vec<CalibrationRecord>> {
    let mut out = Vec::new();
    for ex in examples {
        let fc = model.forecast(ex)?;
        out.extend(CalibrationRecord::from_forecast(ex, &fc));
    }
    Ok(out)
}

pub fn fit_calibration(model: &TrainedModel, train: &[&AnchoredExample], cfg: &PipelineConfig) -> Result<CalibrationBundle> {
    let records = calibration_records(model, train)?;
    Ok(fit_bundle(&records, &model.config.targets, &cfg.windows, &cfg.epsilons, &cfg.calibration))
}

/// Calibrated sign series for every included target of every example.
pub fn evaluate_examples(model: &TrainedModel, bundle: &CalibrationBundle, examples: &[&AnchoredExample]) -> Result<Vec<EvaluatedSeries>> {
    let mut out = Vec::new();
    for ex in examples {
        let fc = model.forecast(ex)?;
        for &m in &model.config.targets {
            let t = ex.target(m);
            if !t.included {
                continue;
            }
            let Some(median) = fc.median(m) else { continue };
            let Some(sig) = bundle.predict_sign(m, &median) else {
                continue;
            };
            out.push(EvaluatedSeries {
                example_id: ex.id.clone(),
                user_id: ex.user_id.clone(),
                category: ex.category,
                metric: m,
                t1: ex.t1,
                actual: t.sign.clone(),
                predicted: sig.sign.clone(),
                valid: (0..t.valid.len()).map(|k| t.valid[k] && sig.valid(k)).collect(),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persisted example format (NaN-free JSON)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TargetRecord {
    metric: Metric,
    included: bool,
    baseline: Option<f64>,
    delta: Vec<Option<f64>>,
    sign: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExampleRecord {
    id: String,
    user_id: String,
    tag_index: usize,
    tag_name: String,
    category: Category,
    t0: Minute,
    t1: Minute,
    feature_width: usize,
    context: Vec<Option<f64>>,
    targets: Vec<TargetRecord>,
}

impl From<&AnchoredExample> for ExampleRecord {
    fn from(e: &AnchoredExample) -> Self {
        ExampleRecord {
            id: e.id.clone(),
            user_id: e.user_id.clone(),
            tag_index: e.tag_index,
            tag_name: e.tag_name.clone(),
            category: e.category,
            t0: e.t0,
            t1: e.t1,
            feature_width: e.feature_width,
            context: e.context.iter().zip(&e.context_valid).map(|(v, ok)| ok.then_some(*v)).collect(),
            targets: e
                .targets
                .iter()
                .map(|t| TargetRecord {
                    metric: t.metric,
                    included: t.included,
                    baseline: t.baseline,
                    delta: t.delta.iter().zip(&t.valid).map(|(v, ok)| ok.then_some(*v)).collect(),
                    sign: t.sign.clone(),
                })
                .collect(),
        }
    }
}

impl From<ExampleRecord> for AnchoredExample {
    fn from(r: ExampleRecord) -> Self {
        AnchoredExample {
            id: r.id,
            user_id: r.user_id,
            tag_index: r.tag_index,
            tag_name: r.tag_name,
            category: r.category,
            t0: r.t0,
            t1: r.t1,
            feature_width: r.feature_width,
            context_valid: r.context.iter().map(Option::is_some).collect(),
            context: r.context.iter().map(|v| v.unwrap_or(0.0)).collect(),
            targets: r
                .targets
                .into_iter()
                .map(|t| MetricTargets {
                    metric: t.metric,
                    included: t.included,
                    baseline: t.baseline,
                    valid: t.delta.iter().map(Option::is_some).collect(),
                    delta: t.delta.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
                    sign: t.sign,
                })
                .collect(),
        }
    }
}

/// One JSON object per line.
pub fn write_examples(examples: &[AnchoredExample]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(&ExampleRecord::from(e)).expect("example serializes"));
        s.push('\n');
    }
    s
}

pub fn read_examples(path: &Path, text: &str) -> Result<Vec<AnchoredExample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str::<ExampleRecord>(l)
                .map(AnchoredExample::from)
                .map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Staged pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Simulate,
    Ingest,
    Featurize,
    Label,
    Split,
    Train,
    Calibrate,
    Evaluate,
    Heatmap,
}

impl Stage {
    pub const CHAIN: [Stage; 8] = [
        Stage::Ingest,
        Stage::Featurize,
        Stage::Label,
        Stage::Split,
        Stage::Train,
        Stage::Calibrate,
        Stage::Evaluate,
        Stage::Heatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::Featurize => "featurize",
            Stage::Label => "label",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
            Stage::Heatmap => "heatmap",
        }
    }

    pub fn version(self) -> u32 {
        1
    }

    /// Stages whose stamps must exist before this one runs.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Simulate | Stage::Ingest => &[],
            Stage::Featurize => &[Stage::Ingest],
            Stage::Label => &[Stage::Featurize],
            Stage::Split => &[Stage::Label],
            Stage::Train => &[Stage::Split],
            Stage::Calibrate => &[Stage::Train],
            Stage::Evaluate => &[Stage::Calibrate],
            Stage::Heatmap => &[Stage::Evaluate],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: Stage,
    pub stage_version: u32,
    pub config_hash: String,
    /// Relative output path to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub generated_at: String,
}

/// Run directory, resolved configuration and override policy.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub out: PathBuf,
    pub force: bool,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// JSON document wrapper carrying provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub stage: Stage,
    pub stage_version: u32,
    pub config_hash: String,
    pub generated_at: String,
    pub body: T,
}

struct Outputs<'a> {
    ctx: &'a RunContext,
    files: BTreeMap<String, String>,
}

impl<'a> Outputs<'a> {
    fn new(ctx: &'a RunContext) -> Self {
        Outputs { ctx, files: BTreeMap::new() }
    }

    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let bytes = bytes.as_ref();
        self.write_with_digest(rel, bytes, hex::encode(Sha256::digest(bytes)))
    }

    fn write_with_digest(&mut self, rel: &str, bytes: &[u8], digest: String) -> Result<()> {
        let path = self.ctx.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.files.insert(rel.to_string(), digest);
        Ok(())
    }

    /// The recorded digest covers the document minus its timestamp.
    fn json<T: Serialize>(&mut self, rel: &str, stage: Stage, body: T) -> Result<()> {
        let mut doc = Artifact {
            stage,
            stage_version: stage.version(),
            config_hash: self.ctx.config_hash.clone(),
            generated_at: String::new(),
            body,
        };
        let digest = hex::encode(Sha256::digest(serde_json::to_string(&doc)?.as_bytes()));
        doc.generated_at = now();
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        self.write_with_digest(rel, text.as_bytes(), digest)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.ctx.out.join(rel))?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn finish(self, stage: Stage) -> Result<()> {
        let stamp = Stamp {
            stage,
            stage_version: stage.version(),
            config_hash: self.ctx.config_hash.clone(),
            outputs: self.files,
            generated_at: now(),
        };
        let path = self.ctx.stamp_path(stage);
        fs::create_dir_all(path.parent().expect("stamp dir"))?;
        fs::write(path, serde_json::to_string_pretty(&stamp)? + "\n")?;
        Ok(())
    }
}

impl RunContext {
    pub fn new(config: PipelineConfig, out: PathBuf, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(RunContext {
            config_hash: config.hash(),
            config,
            out,
            force,
        })
    }

    pub fn data_root(&self) -> PathBuf {
        self.config.data.root.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out.join("stamps").join(format!("{}.json", stage.name()))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Upstream stamps must exist and carry the current config hash.
    fn check_upstream(&self, stage: Stage) -> Result<()> {
        for up in stage.upstream() {
            let p = self.stamp_path(*up);
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            let stamp: Stamp = serde_json::from_str(&fs::read_to_string(&p)?).map_err(|e| Error::malformed(&p, e.to_string()))?;
            if stamp.config_hash != self.config_hash {
                if self.force {
                    warn!("{}: config hash differs from upstream; continuing (--force)", p.display());
                } else {
                    return Err(Error::ConfigHashMismatch {
                        path: p,
                        expected: self.config_hash.clone(),
                        found: stamp.config_hash,
                    });
                }
            }
        }
        Ok(())
    }

    fn read(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        let p = self.path(rel);
        let text = self.read(rel)?;
        let doc: Artifact<T> = serde_json::from_str(&text).map_err(|e| Error::malformed(&p, e.to_string()))?;
        Ok(doc.body)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        self.check_upstream(stage)?;
        info!("stage {}", stage.name());
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::Ingest => self.ingest(),
            Stage::Featurize => self.featurize(),
            Stage::Label => self.label(),
            Stage::Split => self.split(),
            Stage::Train => self.train(),
            Stage::Calibrate => self.calibrate(),
            Stage::Evaluate => self.evaluate(),
            Stage::Heatmap => self.heatmap(),
        }
    }

    /// Simulates when no data root is configured, then runs every stage.
    pub fn run_all(&self) -> Result<()> {
        if self.config.data.root.is_none() {
            self.run(Stage::Simulate)?;
        }
        for stage in Stage::CHAIN {
            self.run(stage)?;
        }
        Ok(())
    }

    fn users(&self) -> Result<Vec<String>> {
        let body: IngestSummary = self.read_json("ingest/report.json")?;
        Ok(body.users.into_iter().map(|r| r.user_id).collect())
    }

    fn simulate(&self) -> Result<()> {
        let root = self.data_root();
        let ids = synth::write_cohort(&self.config.synth, &self.config.epsilons, &root)?;
        let mut o = Outputs::new(self);
        if let Ok(rel) = root.strip_prefix(&self.out) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            o.record(&format!("{rel}/ground_truth.csv"))?;
            for id in &ids {
                for f in ingest::StreamKind::ALL.iter().map(|k| k.file_name()).chain(["tags.csv"]) {
                    o.record(&format!("{rel}/{id}/{f}"))?;
                }
            }
        }
        o.finish(Stage::Simulate)
    }

    fn ingest(&self) -> Result<()> {
        let root = self.data_root();
        let clock = self.config.clock()?;
        let mut users: Vec<String> = fs::read_dir(&root)
            .map_err(|_| Error::MissingArtifact(root.clone()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        users.sort();
        if users.is_empty() {
            return Err(Error::MissingArtifact(root));
        }
        let mut o = Outputs::new(self);
        let mut reports = Vec::new();
        for uid in users {
            let dir = root.join(&uid);
            let (bundle, mut report) = ingest::parse_streams(&dir, &uid, clock)?;
            let (mut tags, tag_report) = ingest::parse_tags(&dir, &uid, clock)?;
            ingest::sort_tags(&mut tags);
            report.tags = Some(tag_report);
            let grid = ingest::align_minute_grid(&bundle, clock, self.config.grid)?;
            o.write(&format!("ingest/{uid}/grid.csv"), ingest::write_grid(&grid))?;
            o.write(&format!("ingest/{uid}/bbi.csv"), ingest::write_bbi_stream(&bundle.bbi))?;
            o.write(&format!("ingest/{uid}/sleep.csv"), ingest::write_sleep_stream(&bundle.sleep))?;
            o.write(&format!("ingest/{uid}/tags.csv"), ingest::write_tags(&tags))?;
            reports.push(report);
        }
        o.json("ingest/report.json", Stage::Ingest, IngestSummary { users: reports })?;
        o.finish(Stage::Ingest)
    }

    fn featurize(&self) -> Result<()> {
        let mut o = Outputs::new(self);
        for uid in self.users()? {
            let grid_rel = format!("ingest/{uid}/grid.csv");
            let grid = ingest::read_grid(&self.path(&grid_rel), &self.read(&grid_rel)?)?;
            let bbi_rel = format!("ingest/{uid}/bbi.csv");
            let (bbi, _) = ingest::parse_bbi_stream(&self.path(&bbi_rel), &self.read(&bbi_rel)?)?;
            let sleep_rel = format!("ingest/{uid}/sleep.csv");
            let (sleep, _) = ingest::parse_sleep_stream(&self.path(&sleep_rel), &self.read(&sleep_rel)?)?;
            let rmssd = features::compute_rmssd(&bbi, grid.start, grid.len(), &self.config.rmssd);
            let bbi_means = features::bbi_minute_means(&bbi, grid.start, grid.len());
            let frame = features::build_feature_frame(&grid, &rmssd, &sleep)?;
            o.write(&format!("features/{uid}/frame.csv"), features::write_frame(&frame))?;
            let series = MetricSeries {
                start: grid.start,
                rmssd: rmssd.rmssd,
                hr: grid.hr,
                bbi: bbi_means,
            };
            o.write(&format!("features/{uid}/metrics.csv"), write_metric_series(&series))?;
        }
        o.json("features/meta.json", Stage::Featurize, FeatureMeta::default())?;
        o.finish(Stage::Featurize)
    }

    fn label(&self) -> Result<()> {
        let meta: FeatureMeta = self.read_json("features/meta.json")?;
        let params = self.config.label_params();
        let clock = self.config.clock()?;
        let mut all = Vec::new();
        let mut rejections = Vec::new();
        for uid in self.users()? {
            let frame_rel = format!("features/{uid}/frame.csv");
            let frame = features::read_frame(&self.path(&frame_rel), &self.read(&frame_rel)?, meta.clone())?;
            let series_rel = format!("features/{uid}/metrics.csv");
            let mut series = read_metric_series(&self.path(&series_rel), &self.read(&series_rel)?)?;
            labeling::screen_plausibility(&mut series, &params.plausibility);
            let tags_rel = format!("ingest/{uid}/tags.csv");
            let (tags, _) = ingest::parse_tags_str(&uid, &self.path(&tags_rel), &self.read(&tags_rel)?, clock)?;
            let (ex, rej) = labeling::make_examples(&frame, &series, &tags, &params);
            all.extend(ex);
            rejections.extend(rej);
        }
        let mut o = Outputs::new(self);
        o.write("labels/examples.jsonl", write_examples(&all))?;
        o.json(
            "labels/report.json",
            Stage::Label,
            LabelSummary {
                examples: all.len(),
                rejections,
            },
        )?;
        o.finish(Stage::Label)
    }

    fn load_examples(&self) -> Result<Vec<AnchoredExample>> {
        let rel = "labels/examples.jsonl";
        read_examples(&self.path(rel), &self.read(rel)?)
    }

    fn load_splits(&self, examples: &[AnchoredExample]) -> Result<Vec<Split>> {
        let body: SplitSummary = self.read_json("split/split.json")?;
        examples
            .iter()
            .map(|e| {
                body.assignments
                    .get(&e.id)
                    .copied()
                    .ok_or_else(|| Error::malformed(self.path("split/split.json"), format!("no split for {}", e.id)))
            })
            .collect()
    }

    fn split(&self) -> Result<()> {
        let examples = self.load_examples()?;
        let splits = assign_splits(&examples, &self.config.split);
        let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
        for s in &splits {
            *counts.entry(*s).or_default() += 1;
        }
        let assignments = examples.iter().zip(&splits).map(|(e, s)| (e.id.clone(), *s)).collect();
        let mut o = Outputs::new(self);
        o.json("split/split.json", Stage::Split, SplitSummary { counts, assignments })?;
        o.finish(Stage::Split)
    }

    fn load_model(&self) -> Result<TrainedModel> {
        let dir = self.path("model");
        let (model, hash) = TrainedModel::load(&dir)?;
        if hash != self.config_hash && !self.force {
            return Err(Error::ConfigHashMismatch {
                path: dir.join(model::MANIFEST_FILE),
                expected: self.config_hash.clone(),
                found: hash,
            });
        }
        Ok(model)
    }

    fn train(&self) -> Result<()> {
        let examples = self.load_examples()?;
        let splits = self.load_splits(&examples)?;
        let train = select(&examples, &splits, Split::Train);
        let val = select(&examples, &splits, Split::Validation);
        let names: Vec<String> = features::FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let (model, report) = model::train(&train, &val, &self.config.model, &names)?;
        model.save(&self.path("model"), &self.config_hash)?;
        let mut o = Outputs::new(self);
        o.record(&format!("model/{}", model::PARAMS_FILE))?;
        o.record(&format!("model/{}", model::MANIFEST_FILE))?;
        o.json::<TrainReport>("model/train_report.json", Stage::Train, report)?;
        o.finish(Stage::Train)
    }

    fn calibrate(&self) -> Result<()> {
        let examples = self.load_examples()?;
        let splits = self.load_splits(&examples)?;
        let model = self.load_model()?;
        let train = select(&examples, &splits, Split::Train);
        let bundle = fit_calibration(&model, &train, &self.config)?;
        let mut o = Outputs::new(self);
        o.json("calibration/bundle.json", Stage::Calibrate, bundle)?;
        o.finish(Stage::Calibrate)
    }

    fn evaluate(&self) -> Result<()> {
        let examples = self.load_examples()?;
        let splits = self.load_splits(&examples)?;
        let model = self.load_model()?;
        let bundle: CalibrationBundle = self.read_json("calibration/bundle.json")?;
        let test = select(&examples, &splits, Split::Test);
        if test.is_empty() {
            warn!("no test interventions; reports will be empty");
        }
        let series = evaluate_examples(&model, &bundle, &test)?;
        let report = EvaluationReport::build(&series, &self.config.report.groupings, &self.config.windows);
        let mut o = Outputs::new(self);
        o.json("evaluation/series.json", Stage::Evaluate, &series)?;
        o.json("evaluation/report.json", Stage::Evaluate, &report)?;
        o.write("evaluation/report.csv", evaluation::report_csv(&report.reports))?;
        o.write("evaluation/bars.csv", evaluation::bar_csv(&report.reports))?;
        if self.config.report.svg {
            let mut groups: BTreeMap<(Grouping, String, Metric), Vec<&evaluation::WindowReport>> = BTreeMap::new();
            for r in &report.reports {
                groups.entry((r.grouping, r.group.clone(), r.metric)).or_default().push(r);
            }
            for ((g, key, metric), rs) in groups {
                let stem = format!("{}_{}_{}", g.name(), sanitize(&key), metric);
                let title = format!("{} {} {}", g.name(), key, metric);
                o.write(&format!("evaluation/bars_{stem}.svg"), evaluation::bar_svg(&rs, &title))?;
                if let Some(overall) = rs.iter().find(|r| r.overall) {
                    o.write(
                        &format!("evaluation/confusion_{stem}.svg"),
                        evaluation::confusion_svg(&overall.counts.confusion, &title),
                    )?;
                }
            }
        }
        o.finish(Stage::Evaluate)
    }

    fn heatmap(&self) -> Result<()> {
        let mut series: Vec<EvaluatedSeries> = self.read_json("evaluation/series.json")?;
        if self.config.report.window_sign == WindowSignRule::MeanMedian {
            series = self.mean_median_series(series)?;
        }
        let mut o = Outputs::new(self);
        let mut index = Vec::new();
        for &level in &self.config.report.levels {
            for h in patterns::heatmaps(&series, &self.config.windows, level) {
                let stem = h.file_stem();
                o.write(&format!("heatmaps/{stem}.csv"), h.to_csv())?;
                if self.config.report.svg {
                    o.write(&format!("heatmaps/{stem}.svg"), h.to_svg())?;
                }
                index.push(stem);
            }
        }
        o.json(
            "heatmaps/index.json",
            Stage::Heatmap,
            HeatmapIndex {
                clustering: patterns::CLUSTER_METHOD.into(),
                distance: patterns::DISTANCE_METHOD.into(),
                window_sign: self.config.report.window_sign,
                heatmaps: index,
            },
        )?;
        o.finish(Stage::Heatmap)
    }

    /// Replaces predicted minute signs so that each window's majority equals
    /// the sign of its mean calibrated median.
    fn mean_median_series(&self, series: Vec<EvaluatedSeries>) -> Result<Vec<EvaluatedSeries>> {
        let examples = self.load_examples()?;
        let model = self.load_model()?;
        let bundle: CalibrationBundle = self.read_json("calibration/bundle.json")?;
        let by_id: BTreeMap<&str, &AnchoredExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
        let mut out = Vec::with_capacity(series.len());
        for mut s in series {
            let ex = by_id
                .get(s.example_id.as_str())
                .ok_or_else(|| Error::malformed(self.path("evaluation/series.json"), format!("unknown example {}", s.example_id)))?;
            let fc = model.forecast(ex)?;
            let (Some(median), Some(cal)) = (fc.median(s.metric), bundle.metric(s.metric)) else {
                out.push(s);
                continue;
            };
            let sig = bundle.predict_sign(s.metric, &median).expect("metric present");
            for w in &self.config.windows.windows {
                let vals: Vec<Option<f64>> = (0..sig.value.len())
                    .map(|k| if s.valid[k] { sig.value[k] } else { None })
                    .collect();
                let sign = patterns::window_sign_mean(&vals, *w, cal.threshold.tau).unwrap_or(0);
                for k in w.range() {
                    s.predicted[k] = sign;
                }
            }
            out.push(s);
        }
        Ok(out)
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IngestSummary {
    users: Vec<ingest::ParseReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelSummary {
    examples: usize,
    rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitSummary {
    counts: BTreeMap<Split, usize>,
    assignments: BTreeMap<String, Split>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeatmapIndex {
    clustering: String,
    distance: String,
    window_sign: WindowSignRule,
    heatmaps: Vec<String>,
}

const SERIES_HEADER: &str = "minute,rmssd,hr,bbi";

pub fn write_metric_series(s: &MetricSeries) -> String {
    let cell = |c: &Channel, i: usize| c.get(i).map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::with_capacity(s.len() * 32);
    out.push_str(SERIES_HEADER);
    out.push('\n');
    for i in 0..s.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.start + i as i64,
            cell(&s.rmssd, i),
            cell(&s.hr, i),
            cell(&s.bbi, i)
        ));
    }
    out
}

pub fn read_metric_series(path: &Path, text: &str) -> Result<MetricSeries> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != SERIES_HEADER {
        return Err(Error::BadHeader {
            path: path.to_path_buf(),
            expected: SERIES_HEADER.into(),
            found: header.into(),
        });
    }
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    let n = rows.len();
    let mut chans = [Channel::invalid(n), Channel::invalid(n), Channel::invalid(n)];
    let mut start = None;
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != 4 {
            return Err(Error::malformed(path, format!("row {} has {} cells", i + 2, cells.len())));
        }
        let m: Minute = cells[0].parse().map_err(|_| Error::malformed(path, format!("bad minute on row {}", i + 2)))?;
        let s0 = *start.get_or_insert(m);
        if m != s0 + i as i64 {
            return Err(Error::IndexMismatch(format!("{}: minute {m} out of sequence", path.display())));
        }
        for (c, ch) in chans.iter_mut().enumerate() {
            let cell = cells[c + 1];
            if !cell.is_empty() {
                let v: f64 = cell.parse().map_err(|_| Error::malformed(path, format!("bad value on row {}", i + 2)))?;
                ch.set(i, v);
            }
        }
    }
    let [rmssd, hr, bbi] = chans;
    Ok(MetricSeries {
        start: start.unwrap_or(0),
        rmssd,
        hr,
        bbi,
    })
}

/// Exit status for an error: 2 for missing inputs, 3 for configuration
/// violations, 4 for a refused hash mismatch, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingArtifact(_) | Error::MissingFile(_) => 2,
        Error::Config(_) => 3,
        Error::ConfigHashMismatch { .. } => 4,
        _ => 1,
    }
}
