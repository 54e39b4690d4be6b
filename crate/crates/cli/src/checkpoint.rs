//! Released-weights checkpoints.
//!
//! A checkpoint holds exactly what is safe to publish under the accounted
//! privacy budget: the architecture, the sampled weights, and the public
//! batch identity when one was used. The optimizer's internal mean
//! parameters are deliberately absent; loading and resuming the mean is not
//! supported.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sidp_core::model::{LayerSpec, ModelSpec, NormKind};
use sidp_core::norm::NORM_EPS;

use crate::config::SCHEMA_VERSION;
use crate::metrics::write_atomic;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model: ModelDesc,
    pub norm_eps: f64,
    /// The released weights, flattened in parameter order.
    pub theta: Vec<f64>,
    /// Hash of the public batch the weights were trained with, if any;
    /// inference must use the same batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub public_batch_sha256: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelDesc {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDesc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Dense { outputs: usize, norm: Option<String>, relu: bool },
    Conv { out_channels: usize, kernel: usize, padding: usize, norm: Option<String>, relu: bool },
    MaxPool { size: usize },
}

fn norm_name(norm: Option<NormKind>) -> Option<String> {
    norm.map(|k| match k {
        NormKind::Layer => "layer".into(),
        NormKind::Batch => "batch".into(),
    })
}

fn norm_kind(name: &Option<String>) -> Result<Option<NormKind>> {
    Ok(match name.as_deref() {
        None => None,
        Some("layer") => Some(NormKind::Layer),
        Some("batch") => Some(NormKind::Batch),
        Some(other) => bail!("unknown norm kind {other:?} in checkpoint"),
    })
}

impl ModelDesc {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|layer| match layer {
                LayerSpec::Dense { outputs, norm, relu } => {
                    LayerDesc::Dense { outputs: *outputs, norm: norm_name(*norm), relu: *relu }
                }
                LayerSpec::Conv { out_channels, kernel, padding, norm, relu } => LayerDesc::Conv {
                    out_channels: *out_channels,
                    kernel: *kernel,
                    padding: *padding,
                    norm: norm_name(*norm),
                    relu: *relu,
                },
                LayerSpec::MaxPool { size } => LayerDesc::MaxPool { size: *size },
            })
            .collect();
        ModelDesc { input_shape: spec.input_shape.clone(), layers }
    }

    pub fn to_spec(&self) -> Result<ModelSpec> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push(match layer {
                LayerDesc::Dense { outputs, norm, relu } => {
                    LayerSpec::Dense { outputs: *outputs, norm: norm_kind(norm)?, relu: *relu }
                }
                LayerDesc::Conv { out_channels, kernel, padding, norm, relu } => LayerSpec::Conv {
                    out_channels: *out_channels,
                    kernel: *kernel,
                    padding: *padding,
                    norm: norm_kind(norm)?,
                    relu: *relu,
                },
                LayerDesc::MaxPool { size } => LayerSpec::MaxPool { size: *size },
            });
        }
        let spec = ModelSpec { input_shape: self.input_shape.clone(), layers };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn save(
    path: &Path,
    spec: &ModelSpec,
    theta: &[f64],
    public_batch_sha256: Option<String>,
) -> Result<()> {
    let expected = spec.param_count()?;
    if theta.len() != expected {
        bail!("checkpoint weights have {} values, model expects {expected}", theta.len());
    }
    let ckpt = Checkpoint {
        schema_version: SCHEMA_VERSION,
        model: ModelDesc::from_spec(spec),
        norm_eps: NORM_EPS,
        theta: theta.to_vec(),
        public_batch_sha256,
    };
    let mut text = serde_json::to_string(&ckpt).context("serializing checkpoint")?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint from {}", path.display()))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if ckpt.schema_version != SCHEMA_VERSION {
        bail!(
            "schema version mismatch in {}: file has {}, this build reads {SCHEMA_VERSION}",
            path.display(),
            ckpt.schema_version
        );
    }
    let expected = ckpt.model.to_spec()?.param_count()?;
    if ckpt.theta.len() != expected {
        bail!("checkpoint weights have {} values, model expects {expected}", ckpt.theta.len());
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sidp_core::model::ModelParams;
    use sidp_core::rng::RngStream;

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let spec = ModelSpec::mlp(8, &[6], 3, Some(NormKind::Batch));
        let mut rng = RngStream::seed_from(11);
        let params = ModelParams::init(&spec, &mut rng, 1.0).unwrap();
        let theta = params.flatten();

        save(&path, &spec, &theta, Some("ab".repeat(32))).unwrap();
        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.theta, theta);
        assert_eq!(ckpt.model.to_spec().unwrap(), spec);
        assert_eq!(ckpt.norm_eps, sidp_core::norm::NORM_EPS);
    }

    #[test]
    fn file_mentions_released_weights_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let spec = ModelSpec::mlp(4, &[3], 2, None);
        let theta = vec![0.5; spec.param_count().unwrap()];
        save(&path, &spec, &theta, None).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"theta\""));
        assert!(!text.contains("mu"), "checkpoint must not carry the mean");
    }

    #[test]
    fn size_and_schema_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt.json");
        let spec = ModelSpec::mlp(4, &[3], 2, None);
        assert!(save(&path, &spec, &[1.0, 2.0], None).is_err());

        let theta = vec![0.0; spec.param_count().unwrap()];
        save(&path, &spec, &theta, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace(
            "\"schema_version\":1",
            "\"schema_version\":9",
        );
        std::fs::write(&path, text).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("schema version mismatch"), "{err}");
    }
}
