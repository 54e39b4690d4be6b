//! Training with freshly sampled noisy weights around a mean.
//!
//! Weights are modeled as `theta = mu + sigma * xi` with standard normal
//! `xi`; the gradient of the loss at a sample `theta` is also the gradient
//! with respect to `mu` (the reparametrization has identity Jacobian), so the
//! update rule steps the mean directly. The rule is plain SGD or Adam
//! ([`MeanUpdate`]); at high noise scales SGD stalls because its step size
//! shrinks with the gradient signal, while Adam's normalized steps keep
//! growing the mean until the noise is small relative to it. During training
//! every forward pass draws fresh noise; at evaluation a single sample is
//! drawn and held fixed. Noise is applied to weights and biases only;
//! normalization scales and shifts stay at their mean values.
//!
//! Training reports a structured outcome instead of panicking when it fails:
//! a non-finite loss or a final accuracy at chance level both yield
//! [`TrainStatus::NonConvergence`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::data::{Dataset, PublicBatch};
use crate::error::{Error, Result};
use crate::model::{accuracy, batch_grad, ModelParams, ModelSpec, ParamKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A single tensor-valued parameter with mean, noise scale, and the current
/// noisy sample.
#[derive(Debug, Clone)]
pub struct NoisyParam {
    pub mu: Tensor,
    pub sigma: f64,
    pub theta: Tensor,
}

impl NoisyParam {
    /// Starts with `theta = mu` (no noise drawn yet).
    pub fn new(mu: Tensor, sigma: f64) -> Self {
        let theta = mu.clone();
        NoisyParam { mu, sigma, theta }
    }

    /// Draws a fresh `theta = mu + sigma * xi`. A zero sigma copies the mean
    /// without consuming randomness.
    pub fn resample(&mut self, rng: &mut RngStream) {
        self.theta = self.mu.clone();
        if self.sigma == 0.0 {
            return;
        }
        for v in self.theta.data_mut() {
            *v += self.sigma * rng.standard_normal();
        }
    }
}

/// Fresh noisy sample of a whole model: weights and biases get
/// `N(mu, sigma^2)` noise, normalization parameters are copied as-is.
/// `sigma = 0` copies everything and consumes no randomness.
pub fn sample_model_weights(
    spec: &ModelSpec,
    mu: &ModelParams,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<ModelParams> {
    let infos = spec.param_infos()?;
    if infos.len() != mu.tensors.len() {
        return Err(Error::shape(format!(
            "model has {} parameter tensors, got {}",
            infos.len(),
            mu.tensors.len()
        )));
    }
    let mut sampled = mu.clone();
    if sigma == 0.0 {
        return Ok(sampled);
    }
    for (info, t) in infos.iter().zip(sampled.tensors.iter_mut()) {
        if matches!(info.kind, ParamKind::Weight | ParamKind::Bias) {
            for v in t.data_mut() {
                *v += sigma * rng.standard_normal();
            }
        }
    }
    Ok(sampled)
}

/// Update rule applied to the mean parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanUpdate {
    /// Plain gradient step `mu -= lr * g`.
    #[default]
    Sgd,
    /// Adam with the usual constants (beta1 0.9, beta2 0.999, eps 1e-8).
    Adam,
}

/// First and second moment estimates for Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: alloc::vec![0.0; len], v: alloc::vec![0.0; len], t: 0 }
    }

    /// One bias-corrected Adam step on `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        assert_eq!(params.len(), grad.len(), "parameter/gradient length mismatch");
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(moments) {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        }
    }
}

/// How a training run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainStatus {
    Converged,
    /// Training failed in a detectable way; the reason says how.
    NonConvergence { reason: String },
}

impl TrainStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, TrainStatus::Converged)
    }
}

/// Per-epoch observations handed to the caller's callback.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub status: TrainStatus,
    pub epochs: Vec<EpochStats>,
    /// Final mean parameters.
    pub mu: ModelParams,
    /// The fixed noisy sample used for the final evaluation.
    pub eval_params: ModelParams,
    pub final_accuracy: f64,
    /// First epoch whose test accuracy reached `target_accuracy`, if any.
    pub epochs_to_target: Option<usize>,
}

/// Settings for [`noisy_train`].
#[derive(Debug, Clone, Copy)]
pub struct NoisyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma: f64,
    pub update: MeanUpdate,
    /// Evaluation batch size.
    pub eval_chunk: usize,
    /// Optional accuracy threshold for `epochs_to_target`.
    pub target_accuracy: Option<f64>,
}

impl Default for NoisyTrainConfig {
    fn default() -> Self {
        NoisyTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.1,
            sigma: 0.0,
            update: MeanUpdate::Sgd,
            eval_chunk: 256,
            target_accuracy: None,
        }
    }
}

/// Minibatch training of the mean parameters with freshly sampled noisy
/// weights.
///
/// With `sigma = 0` this is exactly plain training under the chosen update
/// rule. Batch-normalized models need `public` rows for evaluation (their
/// predictions otherwise depend on the test batch composition). Partial
/// trailing minibatches are dropped.
pub fn noisy_train(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &NoisyTrainConfig,
    seed: u64,
    public: Option<&PublicBatch>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    spec.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::arg("epochs and batch_size must be positive"));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::arg(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            train.len()
        )));
    }
    if spec.has_batch_norm() && public.is_none() {
        return Err(Error::arg(
            "batch-normalized model needs public rows for evaluation",
        ));
    }
    let public_rows = match public {
        Some(p) => Some(p.rows_shaped(&spec.input_shape)?),
        None => None,
    };

    let master = RngStream::seed_from(seed);
    let mut init_rng = master.fork(0);
    let mut noise_rng = master.fork(1);
    let mut shuffle_rng = master.fork(2);
    let mut eval_rng = master.fork(3);

    let mut mu = ModelParams::init(spec, &mut init_rng, 1.0)?;
    let example_shape = spec.input_shape.clone();
    let chance = 1.0 / spec.classes()? as f64;
    let mut adam = match cfg.update {
        MeanUpdate::Adam => {
            let n: usize = mu.tensors.iter().map(|t| t.len()).sum();
            Some(AdamState::new(n))
        }
        MeanUpdate::Sgd => None,
    };

    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut epochs_to_target = None;

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut indices);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks_exact(cfg.batch_size) {
            let (x, labels) = train.gather(chunk, &example_shape)?;
            let theta = sample_model_weights(spec, &mu, cfg.sigma, &mut noise_rng)?;
            let (loss, grad) = batch_grad(spec, &theta, x, &labels)?;
            if !loss.is_finite() {
                let eval_params = mu.clone();
                return Ok(TrainOutcome {
                    status: TrainStatus::NonConvergence {
                        reason: format!("loss became non-finite at epoch {epoch}, batch {batches}"),
                    },
                    epochs,
                    final_accuracy: chance,
                    epochs_to_target,
                    mu,
                    eval_params,
                });
            }
            loss_sum += loss;
            batches += 1;
            let mut flat = mu.flatten();
            match adam.as_mut() {
                Some(state) => state.step(&mut flat, &grad, cfg.lr),
                None => {
                    for (m, g) in flat.iter_mut().zip(&grad) {
                        *m -= cfg.lr * g;
                    }
                }
            }
            mu = ModelParams::from_flat(spec, &flat)?;
        }

        let eval_theta = sample_model_weights(spec, &mu, cfg.sigma, &mut eval_rng)?;
        let test_accuracy = accuracy(
            spec,
            &eval_theta,
            test.images(),
            test.labels(),
            public_rows.as_ref(),
            cfg.eval_chunk,
        )?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            test_accuracy,
        };
        if epochs_to_target.is_none() {
            if let Some(t) = cfg.target_accuracy {
                if test_accuracy >= t {
                    epochs_to_target = Some(epoch);
                }
            }
        }
        on_epoch(&stats);
        epochs.push(stats);
    }

    let eval_params = sample_model_weights(spec, &mu, cfg.sigma, &mut eval_rng)?;
    let final_accuracy = accuracy(
        spec,
        &eval_params,
        test.images(),
        test.labels(),
        public_rows.as_ref(),
        cfg.eval_chunk,
    )?;
    let status = if final_accuracy <= chance + 0.02 {
        TrainStatus::NonConvergence {
            reason: format!(
                "final accuracy {final_accuracy:.4} is indistinguishable from chance ({chance:.4})"
            ),
        }
    } else {
        TrainStatus::Converged
    };
    Ok(TrainOutcome { status, epochs, mu, eval_params, final_accuracy, epochs_to_target })
}
