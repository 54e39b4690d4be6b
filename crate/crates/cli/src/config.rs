//! Experiment configuration: TOML sections with a versioned schema.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sidp_core::model::NormKind;

/// Bump when the config or metrics layout changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub dp: Option<DpSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Run identifier; prefixes metrics rows and output file names.
    pub name: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum NormChoice {
    None,
    Layer,
    Batch,
}

impl NormChoice {
    pub fn kind(self) -> Option<NormKind> {
        match self {
            NormChoice::None => None,
            NormChoice::Layer => Some(NormKind::Layer),
            NormChoice::Batch => Some(NormKind::Batch),
        }
    }
}

impl fmt::Display for NormChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormChoice::None => "none",
            NormChoice::Layer => "layer",
            NormChoice::Batch => "batch",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    /// Hidden layer widths (MLP only).
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Channel counts for the two conv blocks (CNN only).
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    pub norm: NormChoice,
}

fn default_hidden() -> Vec<usize> {
    vec![300, 100]
}

fn default_channels() -> Vec<usize> {
    vec![8, 16]
}

impl ModelSection {
    /// Human-readable architecture tag for reports, e.g. `mlp-300-100-ln`.
    pub fn describe(&self) -> String {
        let norm = match self.norm {
            NormChoice::None => "plain",
            NormChoice::Layer => "ln",
            NormChoice::Batch => "bn",
        };
        match self.arch {
            Arch::Mlp => {
                let dims: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
                format!("mlp-{}-{}", dims.join("-"), norm)
            }
            Arch::Cnn => format!("cnn-{}-{}-{}", self.channels[0], self.channels[1], norm),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Idx,
    Synthetic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// IDX file names, resolved against `--data-dir`.
    #[serde(default = "default_train_images")]
    pub train_images: String,
    #[serde(default = "default_train_labels")]
    pub train_labels: String,
    #[serde(default = "default_test_images")]
    pub test_images: String,
    #[serde(default = "default_test_labels")]
    pub test_labels: String,
    /// Synthetic-source parameters.
    #[serde(default = "default_synth_n")]
    pub n: usize,
    #[serde(default = "default_synth_dims")]
    pub dims: usize,
    #[serde(default = "default_synth_classes")]
    pub classes: usize,
    /// Rows drawn from the held-out split as the public batch (0 = none).
    #[serde(default)]
    pub public_size: usize,
}

fn default_train_images() -> String {
    "train-images-idx3-ubyte".into()
}
fn default_train_labels() -> String {
    "train-labels-idx1-ubyte".into()
}
fn default_test_images() -> String {
    "test-images-idx3-ubyte".into()
}
fn default_test_labels() -> String {
    "test-labels-idx1-ubyte".into()
}
fn default_synth_n() -> usize {
    512
}
fn default_synth_dims() -> usize {
    16
}
fn default_synth_classes() -> usize {
    4
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum Optimizer {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "noisy")]
    Noisy,
    #[serde(rename = "dpsgd")]
    DpSgd,
    #[serde(rename = "sidpsgd")]
    SiDpSgd,
    #[serde(rename = "sidpsgd-bn")]
    SiDpSgdBn,
}

impl Optimizer {
    pub fn is_dp(self) -> bool {
        matches!(self, Optimizer::DpSgd | Optimizer::SiDpSgd | Optimizer::SiDpSgdBn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Noisy => "noisy",
            Optimizer::DpSgd => "dpsgd",
            Optimizer::SiDpSgd => "sidpsgd",
            Optimizer::SiDpSgdBn => "sidpsgd-bn",
        }
    }
}

/// Mean-update rule for the non-DP optimizers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    #[default]
    Sgd,
    Adam,
}

impl UpdateRule {
    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Sgd => "sgd",
            UpdateRule::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: Optimizer,
    pub epochs: usize,
    /// Nominal lot size for DP runs; minibatch size otherwise.
    #[serde(default = "default_lot_size")]
    pub lot_size: usize,
    pub lr: f64,
    /// Weight-noise scale for the `noisy` optimizer.
    #[serde(default)]
    pub sigma: f64,
    /// Gradient step applied to the mean (`sgd` or `adam`).
    #[serde(default)]
    pub update: UpdateRule,
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Weight init gain.
    #[serde(default = "default_init_gain")]
    pub init_gain: f64,
}

fn default_lot_size() -> usize {
    64
}
fn default_init_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub clip_norm: f64,
    /// Fixed noise multiplier; mutually exclusive with `target_epsilon`.
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    /// Privacy target; the accountant calibrates the multiplier to reach it.
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Sigma,
    TargetEpsilon,
    NoiseMultiplier,
    Lr,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Sigma => "sigma",
            SweepParam::TargetEpsilon => "target_epsilon",
            SweepParam::NoiseMultiplier => "noise_multiplier",
            SweepParam::Lr => "lr",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config from {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing TOML")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if self.experiment.name.is_empty() {
            bail!("experiment.name must not be empty");
        }
        if self.experiment.seeds.is_empty() {
            bail!("experiment.seeds must list at least one seed");
        }
        match self.model.arch {
            Arch::Mlp => {
                if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
                    bail!("model.hidden must list positive layer widths");
                }
            }
            Arch::Cnn => {
                if self.model.channels.len() != 2 || self.model.channels.contains(&0) {
                    bail!("model.channels must list exactly two positive channel counts");
                }
            }
        }
        if self.data.source == DataSource::Synthetic {
            if self.data.n == 0 || self.data.dims == 0 || self.data.classes == 0 {
                bail!("synthetic data needs positive n, dims, and classes");
            }
            if self.data.classes > self.data.dims {
                bail!("synthetic data needs classes <= dims");
            }
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            bail!("train.lr must be positive");
        }
        if self.train.lot_size == 0 {
            bail!("train.lot_size must be positive");
        }
        if self.train.sigma < 0.0 {
            bail!("train.sigma must be nonnegative");
        }
        if !(self.train.init_gain > 0.0) {
            bail!("train.init_gain must be positive");
        }

        let opt = self.train.optimizer;
        if self.train.update == UpdateRule::Adam && opt.is_dp() {
            bail!("train.update = \"adam\" applies to the sgd and noisy optimizers only");
        }
        if opt == Optimizer::SiDpSgdBn {
            if self.model.norm != NormChoice::Batch {
                bail!("optimizer sidpsgd-bn needs model.norm = \"batch\"");
            }
            if self.data.public_size < 2 {
                bail!("optimizer sidpsgd-bn needs data.public_size >= 2");
            }
        } else if self.model.norm == NormChoice::Batch {
            if opt.is_dp() {
                bail!("batch-normalized DP training is the sidpsgd-bn optimizer");
            }
            if self.data.public_size < 2 {
                bail!("batch-normalized models need data.public_size >= 2 for evaluation");
            }
        }
        if opt.is_dp() {
            let dp = self
                .dp
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("optimizer {} needs a [dp] section", opt.name()))?;
            if !(dp.clip_norm > 0.0 && dp.clip_norm.is_finite()) {
                bail!("dp.clip_norm must be positive");
            }
            if !(dp.delta > 0.0 && dp.delta < 1.0) {
                bail!("dp.delta must lie in (0, 1)");
            }
            match (dp.noise_multiplier, dp.target_epsilon) {
                (Some(z), None) => {
                    if !(z > 0.0) {
                        bail!("dp.noise_multiplier must be positive");
                    }
                }
                (None, Some(eps)) => {
                    if !(eps > 0.0) {
                        bail!("dp.target_epsilon must be positive");
                    }
                }
                (None, None) => bail!("set dp.noise_multiplier or dp.target_epsilon"),
                (Some(_), Some(_)) => {
                    bail!("dp.noise_multiplier and dp.target_epsilon are mutually exclusive")
                }
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                bail!("sweep.values must not be empty");
            }
            match sweep.parameter {
                SweepParam::Sigma => {
                    if opt != Optimizer::Noisy {
                        bail!("sweeping sigma needs the noisy optimizer");
                    }
                    if sweep.values.iter().any(|v| *v < 0.0) {
                        bail!("sigma values must be nonnegative");
                    }
                }
                SweepParam::TargetEpsilon | SweepParam::NoiseMultiplier => {
                    if !opt.is_dp() {
                        bail!("sweeping {} needs a DP optimizer", sweep.parameter.name());
                    }
                    if sweep.values.iter().any(|v| !(*v > 0.0)) {
                        bail!("{} values must be positive", sweep.parameter.name());
                    }
                }
                SweepParam::Lr => {
                    if sweep.values.iter().any(|v| !(*v > 0.0)) {
                        bail!("lr values must be positive");
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies one sweep value, returning the adjusted copy.
    pub fn with_sweep_value(&self, param: SweepParam, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.sweep = None;
        match param {
            SweepParam::Sigma => cfg.train.sigma = value,
            SweepParam::Lr => cfg.train.lr = value,
            SweepParam::TargetEpsilon => {
                let dp = cfg.dp.as_mut().context("sweeping target_epsilon needs [dp]")?;
                dp.target_epsilon = Some(value);
                dp.noise_multiplier = None;
            }
            SweepParam::NoiseMultiplier => {
                let dp = cfg.dp.as_mut().context("sweeping noise_multiplier needs [dp]")?;
                dp.noise_multiplier = Some(value);
                dp.target_epsilon = None;
            }
        }
        cfg.experiment.name = format!("{}-{}{}", cfg.experiment.name, param.name(), value);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The report key for this run: the swept-style quantity and its value.
    pub fn report_key(&self) -> (String, f64) {
        match self.train.optimizer {
            Optimizer::Noisy => ("sigma".into(), self.train.sigma),
            Optimizer::Sgd => ("sigma".into(), 0.0),
            _ => {
                let dp = self.dp.as_ref();
                match dp.and_then(|d| d.target_epsilon) {
                    Some(eps) => ("epsilon".into(), eps),
                    None => (
                        "noise_multiplier".into(),
                        dp.and_then(|d| d.noise_multiplier).unwrap_or(f64::NAN),
                    ),
                }
            }
        }
    }
}
