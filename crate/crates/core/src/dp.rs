//! Differentially private optimizers: per-example clipping, the classic
//! noisy-iterate update, and the sampled-weights update.
//!
//! Both optimizers draw Poisson lots, clip each example's gradient to `C` in
//! Euclidean norm, and average by the nominal lot size `L`. They differ in
//! where the Gaussian noise lives:
//!
//! * the classic update adds noise to the iterate itself, so the released
//!   weights accumulate noise variance linearly over steps;
//! * the sampled-weights update keeps a noise-free mean `mu`, computes
//!   gradients at a freshly sampled `theta = mu + (lr * C * z / L) * xi`, and
//!   releases only `theta`, whose distance from the mean has constant
//!   variance regardless of step count.
//!
//! Both are accounted identically: each step is a subsampled Gaussian
//! mechanism with sensitivity `C` on the lot sum; see the accountant module.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::data::{Dataset, LotSampler, PublicBatch};
use crate::error::{Error, Result};
use crate::model::{accuracy, per_sample_grads, ModelParams, ModelSpec};
use crate::noisy::TrainStatus;
use crate::rng::RngStream;
use crate::tensor::l2_norm;
use crate::tensor::Tensor;

/// Rescales `grad` to Euclidean norm at most `c`; returns the pre-clip norm.
pub fn clip_in_place(grad: &mut [f64], c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::arg(format!("clip norm must be positive, got {c}")));
    }
    let norm = l2_norm(grad);
    if norm > c {
        let scale = c / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    Ok(norm)
}

/// Non-destructive version of [`clip_in_place`].
pub fn clip(grad: &[f64], c: f64) -> Result<Vec<f64>> {
    let mut out = grad.to_vec();
    clip_in_place(&mut out, c)?;
    Ok(out)
}

/// Learning-rate schedule over step indices.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Piecewise constant: `(first_step, lr)` entries; the rate of the last
    /// entry whose `first_step <= t` applies. Must start at step 0.
    Piecewise(Vec<(usize, f64)>),
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Piecewise(stages) => {
                let mut lr = stages.first().map_or(0.0, |s| s.1);
                for &(from, rate) in stages {
                    if from <= step {
                        lr = rate;
                    }
                }
                lr
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant(lr) => {
                if !(lr.is_finite() && *lr > 0.0) {
                    return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
                }
            }
            LrSchedule::Piecewise(stages) => {
                if stages.is_empty() || stages[0].0 != 0 {
                    return Err(Error::arg("piecewise schedule must start at step 0"));
                }
                if stages.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::arg("piecewise schedule steps must increase"));
                }
                if stages.iter().any(|(_, lr)| !(lr.is_finite() && *lr > 0.0)) {
                    return Err(Error::arg("piecewise schedule rates must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// The two DP update rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpAlgorithm {
    /// Noise added to the iterate (noise accumulates over steps).
    DpSgd,
    /// Noise-free mean with freshly sampled released weights.
    SiDpSgd,
}

/// Per-step mechanism parameters shared by both update rules.
#[derive(Debug, Clone)]
pub struct DpStepConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Nominal lot size; gradient sums are divided by this.
    pub lot_size: usize,
    pub lr: LrSchedule,
}

impl DpStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::arg("clip_norm must be positive"));
        }
        if self.noise_multiplier < 0.0 {
            return Err(Error::arg("noise_multiplier must be nonnegative"));
        }
        if self.lot_size == 0 {
            return Err(Error::arg("lot_size must be positive"));
        }
        self.lr.validate()
    }
}

/// Optimizer state: the mean parameters and the released weights. The classic
/// update keeps the two identical; the sampled-weights update keeps `theta`
/// a fresh noisy draw around `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ParamState {
    pub fn from_init(init: Vec<f64>) -> Self {
        ParamState { theta: init.clone(), mu: init }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// What one step observed about clipping.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepAudit {
    pub realized_lot: usize,
    pub clipped: usize,
    pub max_pre_clip_norm: f64,
    pub max_post_clip_norm: f64,
}

/// Clips per-example gradients in place and returns their sum / L.
fn clipped_mean(
    grads: &mut [Vec<f64>],
    dim: usize,
    cfg: &DpStepConfig,
    audit: &mut StepAudit,
) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; dim];
    audit.realized_lot = grads.len();
    for g in grads.iter_mut() {
        if g.len() != dim {
            return Err(Error::shape(format!(
                "per-example gradient has {} coordinates, expected {dim}",
                g.len()
            )));
        }
        let pre = clip_in_place(g, cfg.clip_norm)?;
        if pre > cfg.clip_norm {
            audit.clipped += 1;
        }
        audit.max_pre_clip_norm = audit.max_pre_clip_norm.max(pre);
        audit.max_post_clip_norm = audit.max_post_clip_norm.max(l2_norm(g));
        for (m, v) in mean.iter_mut().zip(g.iter()) {
            *m += v;
        }
    }
    let inv_l = 1.0 / cfg.lot_size as f64;
    for m in mean.iter_mut() {
        *m *= inv_l;
    }
    Ok(mean)
}

/// Classic noisy-iterate update at step `t`:
/// `theta <- theta - lr * (clipped_mean + (C * z / L) * xi)`.
/// The mean is kept equal to the iterate.
pub fn dpsgd_step(
    state: &mut ParamState,
    grads: &mut [Vec<f64>],
    cfg: &DpStepConfig,
    t: usize,
    rng: &mut RngStream,
) -> Result<StepAudit> {
    cfg.validate()?;
    let dim = state.dim();
    let mut audit = StepAudit::default();
    let mean = clipped_mean(grads, dim, cfg, &mut audit)?;
    let lr = cfg.lr.at(t);
    let noise_std = cfg.clip_norm * cfg.noise_multiplier / cfg.lot_size as f64;
    for (j, th) in state.theta.iter_mut().enumerate() {
        let noise = if noise_std > 0.0 { noise_std * rng.standard_normal() } else { 0.0 };
        *th -= lr * (mean[j] + noise);
    }
    state.mu.copy_from_slice(&state.theta);
    Ok(audit)
}

/// Sampled-weights update at step `t`: the mean moves by the clipped average
/// gradient only, then the released weights are redrawn around it:
/// `mu <- mu - lr * clipped_mean; theta <- mu + (lr * C * z / L) * xi`.
pub fn sidpsgd_step(
    state: &mut ParamState,
    grads: &mut [Vec<f64>],
    cfg: &DpStepConfig,
    t: usize,
    rng: &mut RngStream,
) -> Result<StepAudit> {
    cfg.validate()?;
    let dim = state.dim();
    let mut audit = StepAudit::default();
    let mean = clipped_mean(grads, dim, cfg, &mut audit)?;
    let lr = cfg.lr.at(t);
    for (m, g) in state.mu.iter_mut().zip(&mean) {
        *m -= lr * g;
    }
    let noise_std = lr * cfg.clip_norm * cfg.noise_multiplier / cfg.lot_size as f64;
    for (th, m) in state.theta.iter_mut().zip(&state.mu) {
        *th = m + if noise_std > 0.0 { noise_std * rng.standard_normal() } else { 0.0 };
    }
    Ok(audit)
}

/// Aggregate clipping statistics over a whole run.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClipAudit {
    pub steps: usize,
    pub examples_seen: usize,
    pub examples_clipped: usize,
    pub max_post_clip_norm: f64,
}

impl ClipAudit {
    fn absorb(&mut self, step: &StepAudit) {
        self.steps += 1;
        self.examples_seen += step.realized_lot;
        self.examples_clipped += step.clipped;
        self.max_post_clip_norm = self.max_post_clip_norm.max(step.max_post_clip_norm);
    }

    pub fn clipped_fraction(&self) -> f64 {
        if self.examples_seen == 0 {
            0.0
        } else {
            self.examples_clipped as f64 / self.examples_seen as f64
        }
    }
}

/// Settings for a full DP training run.
#[derive(Debug, Clone)]
pub struct DpTrainConfig {
    pub algorithm: DpAlgorithm,
    pub step: DpStepConfig,
    pub steps: usize,
    /// Steps between metric rows; defaults to about one pass over the data.
    pub eval_every: usize,
    pub eval_chunk: usize,
    pub target_accuracy: Option<f64>,
    /// Weight init gain (see `ModelParams::init`).
    pub init_gain: f64,
}

impl DpTrainConfig {
    pub fn new(algorithm: DpAlgorithm, step: DpStepConfig, steps: usize, dataset_size: usize) -> Self {
        let eval_every = (dataset_size / step.lot_size).max(1);
        DpTrainConfig {
            algorithm,
            step,
            steps,
            eval_every,
            eval_chunk: 256,
            target_accuracy: None,
            init_gain: 1.0,
        }
    }
}

/// Per-evaluation-window observations.
#[derive(Debug, Clone, Copy)]
pub struct DpEpochStats {
    /// 1-based window index.
    pub epoch: usize,
    pub steps_done: usize,
    /// Mean per-example loss over the window's lots (at the pre-update
    /// weights of each step).
    pub train_loss: f64,
    /// Accuracy of the released weights on the test set.
    pub test_accuracy: f64,
}

/// Result of a DP training run.
#[derive(Debug, Clone)]
pub struct DpOutcome {
    pub status: TrainStatus,
    pub epochs: Vec<DpEpochStats>,
    /// Released weights; safe to publish under the accounted budget.
    pub theta: Vec<f64>,
    /// Internal mean parameters; not part of the release.
    pub mu: Vec<f64>,
    pub final_accuracy: f64,
    pub clip_audit: ClipAudit,
    pub epochs_to_target: Option<usize>,
}

/// Runs DP training with Poisson lots. Gradients are always evaluated at the
/// released weights. Batch-normalized models need `public` rows (they supply
/// batch statistics both for per-example gradients and for evaluation); the
/// rows are verified disjoint from the training set.
pub fn dp_train(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &DpTrainConfig,
    seed: u64,
    public: Option<&PublicBatch>,
    mut on_epoch: impl FnMut(&DpEpochStats),
) -> Result<DpOutcome> {
    spec.validate()?;
    cfg.step.validate()?;
    if cfg.steps == 0 || cfg.eval_every == 0 {
        return Err(Error::arg("steps and eval_every must be positive"));
    }
    if spec.has_batch_norm() && public.is_none() {
        return Err(Error::arg(
            "batch-normalized model needs public rows for per-example gradients",
        ));
    }
    if let Some(p) = public {
        p.ensure_disjoint(train)?;
    }
    let public_rows = match public {
        Some(p) => Some(p.rows_shaped(&spec.input_shape)?),
        None => None,
    };

    let sampler = LotSampler::new(train.len(), cfg.step.lot_size)?;
    let master = RngStream::seed_from(seed);
    let mut init_rng = master.fork(0);
    let mut lot_rng = master.fork(1);
    let mut noise_rng = master.fork(2);

    let init = ModelParams::init(spec, &mut init_rng, cfg.init_gain)?;
    let mut state = ParamState::from_init(init.flatten());
    // The sampled-weights rule releases a draw around the mean from the very
    // first gradient computation.
    if cfg.algorithm == DpAlgorithm::SiDpSgd {
        resample_theta(&mut state, &cfg.step, 0, &mut noise_rng);
    }

    let chance = 1.0 / spec.classes()? as f64;
    let example_shape = spec.input_shape.clone();
    let mut clip_audit = ClipAudit::default();
    let mut epochs = Vec::new();
    let mut epochs_to_target = None;
    let mut window_loss_sum = 0.0;
    let mut window_loss_count = 0usize;

    for t in 0..cfg.steps {
        let lot = sampler.draw(&mut lot_rng);
        let theta_params = ModelParams::from_flat(spec, &state.theta)?;
        let mut grads = if lot.is_empty() {
            Vec::new()
        } else {
            let (x, labels) = train.gather(&lot, &example_shape)?;
            let ps = per_sample_grads(spec, &theta_params, &x, &labels, public_rows.as_ref())?;
            if ps.losses.iter().any(|l| !l.is_finite()) {
                return Ok(finish_diverged(state, epochs, clip_audit, chance, t, epochs_to_target));
            }
            window_loss_sum += ps.losses.iter().sum::<f64>();
            window_loss_count += ps.losses.len();
            ps.grads
        };

        let audit = match cfg.algorithm {
            DpAlgorithm::DpSgd => dpsgd_step(&mut state, &mut grads, &cfg.step, t, &mut noise_rng)?,
            DpAlgorithm::SiDpSgd => sidpsgd_step(&mut state, &mut grads, &cfg.step, t, &mut noise_rng)?,
        };
        clip_audit.absorb(&audit);

        let done = t + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let theta_params = ModelParams::from_flat(spec, &state.theta)?;
            let test_accuracy = accuracy(
                spec,
                &theta_params,
                test.images(),
                test.labels(),
                public_rows.as_ref(),
                cfg.eval_chunk,
            )?;
            let stats = DpEpochStats {
                epoch: epochs.len() + 1,
                steps_done: done,
                train_loss: if window_loss_count > 0 {
                    window_loss_sum / window_loss_count as f64
                } else {
                    f64::NAN
                },
                test_accuracy,
            };
            window_loss_sum = 0.0;
            window_loss_count = 0;
            if epochs_to_target.is_none() {
                if let Some(target) = cfg.target_accuracy {
                    if test_accuracy >= target {
                        epochs_to_target = Some(epochs.len() + 1);
                    }
                }
            }
            on_epoch(&stats);
            epochs.push(stats);
        }
    }

    let theta_params = ModelParams::from_flat(spec, &state.theta)?;
    let final_accuracy = accuracy(
        spec,
        &theta_params,
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
    Ok(DpOutcome {
        status,
        epochs,
        theta: state.theta,
        mu: state.mu,
        final_accuracy,
        clip_audit,
        epochs_to_target,
    })
}

fn resample_theta(state: &mut ParamState, cfg: &DpStepConfig, t: usize, rng: &mut RngStream) {
    let noise_std = cfg.lr.at(t) * cfg.clip_norm * cfg.noise_multiplier / cfg.lot_size as f64;
    for (th, m) in state.theta.iter_mut().zip(&state.mu) {
        *th = m + if noise_std > 0.0 { noise_std * rng.standard_normal() } else { 0.0 };
    }
}

fn finish_diverged(
    state: ParamState,
    epochs: Vec<DpEpochStats>,
    clip_audit: ClipAudit,
    chance: f64,
    step: usize,
    epochs_to_target: Option<usize>,
) -> DpOutcome {
    DpOutcome {
        status: TrainStatus::NonConvergence {
            reason: format!("loss became non-finite at step {step}"),
        },
        epochs,
        theta: state.theta,
        mu: state.mu,
        final_accuracy: chance,
        clip_audit,
        epochs_to_target,
    }
}

/// Trains a batch-normalized model with the sampled-weights rule and a public
/// batch supplying statistics; a thin validation wrapper over [`dp_train`].
pub fn sidpsgd_bn_train(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &DpTrainConfig,
    seed: u64,
    public: &PublicBatch,
    on_epoch: impl FnMut(&DpEpochStats),
) -> Result<DpOutcome> {
    if !spec.has_batch_norm() {
        return Err(Error::arg("sidpsgd_bn_train expects a batch-normalized model"));
    }
    if cfg.algorithm != DpAlgorithm::SiDpSgd {
        return Err(Error::arg("sidpsgd_bn_train uses the sampled-weights rule"));
    }
    dp_train(spec, train, test, cfg, seed, Some(public), on_epoch)
}

/// Predicts classes for `x` with released weights `theta`, using the public
/// rows for batch statistics; each example is scored in its own microbatch.
pub fn sidpsgd_bn_infer(
    spec: &ModelSpec,
    theta: &[f64],
    x: &Tensor,
    public: &PublicBatch,
) -> Result<Vec<usize>> {
    let params = ModelParams::from_flat(spec, theta)?;
    let rows = public.rows_shaped(&spec.input_shape)?;
    crate::model::predict_with_public(spec, &params, x, &rows)
}

/// Measured released-weight variance under zero gradients, for both update
/// rules, as a function of step count.
#[derive(Debug, Clone)]
pub struct VarianceDemo {
    /// Step indices (1-based) at which variance was measured.
    pub steps: Vec<usize>,
    /// Mean squared displacement of the released weights, per rule.
    pub dpsgd_var: Vec<f64>,
    pub sidpsgd_var: Vec<f64>,
    /// Single-step noise variance `(lr * C * z / L)^2`.
    pub theory_per_step: f64,
    /// Least-squares slope of `dpsgd_var` against step count (through 0).
    pub dpsgd_slope: f64,
    pub dpsgd_r2: f64,
    /// Mean of `sidpsgd_var` across steps.
    pub sidpsgd_mean: f64,
    /// Largest relative deviation of `sidpsgd_var` from the theory value.
    pub sidpsgd_max_rel_dev: f64,
}

/// Runs both update rules on a `dim`-dimensional zero-gradient problem
/// (every lot is empty) and measures the variance of the released weights
/// around their start across `trials` independent repetitions.
pub fn variance_demo(
    dim: usize,
    steps: usize,
    trials: usize,
    clip_norm: f64,
    noise_multiplier: f64,
    lot_size: usize,
    lr: f64,
    seed: u64,
) -> Result<VarianceDemo> {
    if dim == 0 || steps == 0 || trials == 0 {
        return Err(Error::arg("dim, steps, and trials must be positive"));
    }
    let cfg = DpStepConfig {
        clip_norm,
        noise_multiplier,
        lot_size,
        lr: LrSchedule::Constant(lr),
    };
    cfg.validate()?;
    if noise_multiplier <= 0.0 {
        return Err(Error::arg("variance demo needs a positive noise multiplier"));
    }

    let samples = (dim * trials) as f64;
    let mut dpsgd_acc = vec![0.0; steps];
    let mut sidpsgd_acc = vec![0.0; steps];
    let master = RngStream::seed_from(seed);

    for trial in 0..trials {
        let mut rng = master.fork(trial as u64);
        let mut state = ParamState::from_init(vec![0.0; dim]);
        for t in 0..steps {
            let mut no_grads: Vec<Vec<f64>> = Vec::new();
            dpsgd_step(&mut state, &mut no_grads, &cfg, t, &mut rng)?;
            dpsgd_acc[t] += state.theta.iter().map(|v| v * v).sum::<f64>();
        }

        let mut rng = master.fork((trials + trial) as u64);
        let mut state = ParamState::from_init(vec![0.0; dim]);
        for t in 0..steps {
            let mut no_grads: Vec<Vec<f64>> = Vec::new();
            sidpsgd_step(&mut state, &mut no_grads, &cfg, t, &mut rng)?;
            sidpsgd_acc[t] += state.theta.iter().map(|v| v * v).sum::<f64>();
        }
    }

    let dpsgd_var: Vec<f64> = dpsgd_acc.iter().map(|s| s / samples).collect();
    let sidpsgd_var: Vec<f64> = sidpsgd_acc.iter().map(|s| s / samples).collect();
    let theory_per_step = {
        let s = lr * clip_norm * noise_multiplier / lot_size as f64;
        s * s
    };

    // Regression through the origin: var_t = slope * t.
    let mut st_num = 0.0;
    let mut st_den = 0.0;
    for (i, v) in dpsgd_var.iter().enumerate() {
        let t = (i + 1) as f64;
        st_num += t * v;
        st_den += t * t;
    }
    let dpsgd_slope = st_num / st_den;
    let mean_v: f64 = dpsgd_var.iter().sum::<f64>() / steps as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (i, v) in dpsgd_var.iter().enumerate() {
        let fit = dpsgd_slope * (i + 1) as f64;
        ss_res += (v - fit) * (v - fit);
        ss_tot += (v - mean_v) * (v - mean_v);
    }
    let dpsgd_r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let sidpsgd_mean = sidpsgd_var.iter().sum::<f64>() / steps as f64;
    let sidpsgd_max_rel_dev = sidpsgd_var
        .iter()
        .fold(0.0f64, |m, v| m.max((v - theory_per_step).abs() / theory_per_step));

    Ok(VarianceDemo {
        steps: (1..=steps).collect(),
        dpsgd_var,
        sidpsgd_var,
        theory_per_step,
        dpsgd_slope,
        dpsgd_r2,
        sidpsgd_mean,
        sidpsgd_max_rel_dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_classification;
    use crate::model::NormKind;

    fn step_cfg(z: f64) -> DpStepConfig {
        DpStepConfig {
            clip_norm: 1.0,
            noise_multiplier: z,
            lot_size: 2,
            lr: LrSchedule::Constant(0.5),
        }
    }

    #[test]
    fn clip_scales_long_gradients_only() {
        let mut g = vec![3.0, 4.0];
        let pre = clip_in_place(&mut g, 1.0).unwrap();
        assert_eq!(pre, 5.0);
        assert!((l2_norm(&g) - 1.0).abs() < 1e-12);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);

        let mut short = vec![0.3, 0.4];
        clip_in_place(&mut short, 1.0).unwrap();
        assert_eq!(short, vec![0.3, 0.4]);

        assert!(clip_in_place(&mut g, 0.0).is_err());
        assert_eq!(clip(&[6.0, 8.0], 5.0).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn noiseless_dpsgd_step_matches_hand_update() {
        // grads (3,4) clips to (0.6,0.8); (0.1,0) stays; sum/L = (0.35,0.4);
        // theta -= 0.5 * that.
        let mut state = ParamState::from_init(vec![1.0, 1.0]);
        let mut grads = vec![vec![3.0, 4.0], vec![0.1, 0.0]];
        let mut rng = RngStream::seed_from(1);
        let audit = dpsgd_step(&mut state, &mut grads, &step_cfg(0.0), 0, &mut rng).unwrap();
        assert!((state.theta[0] - (1.0 - 0.5 * 0.35)).abs() < 1e-12);
        assert!((state.theta[1] - (1.0 - 0.5 * 0.4)).abs() < 1e-12);
        assert_eq!(state.mu, state.theta);
        assert_eq!(audit.clipped, 1);
        assert_eq!(audit.realized_lot, 2);
        assert!(audit.max_post_clip_norm <= 1.0 + 1e-12);
        assert_eq!(rng.draws(), 0);
    }

    #[test]
    fn noiseless_sampled_step_keeps_theta_equal_to_mu() {
        let mut state = ParamState::from_init(vec![1.0, 1.0]);
        let mut grads = vec![vec![3.0, 4.0], vec![0.1, 0.0]];
        let mut rng = RngStream::seed_from(1);
        sidpsgd_step(&mut state, &mut grads, &step_cfg(0.0), 0, &mut rng).unwrap();
        assert_eq!(state.theta, state.mu);
        assert!((state.mu[0] - (1.0 - 0.5 * 0.35)).abs() < 1e-12);
    }

    #[test]
    fn sampled_step_moves_mean_without_noise() {
        // With noise on, mu must still move exactly by the clipped mean.
        let mut state = ParamState::from_init(vec![0.0, 0.0]);
        let mut grads = vec![vec![1.0, 0.0]];
        let mut rng = RngStream::seed_from(9);
        sidpsgd_step(&mut state, &mut grads, &step_cfg(2.0), 0, &mut rng).unwrap();
        assert!((state.mu[0] + 0.5 * 0.5).abs() < 1e-12); // -lr * (1/L)
        assert_eq!(state.mu[1], 0.0);
        assert_ne!(state.theta, state.mu);
    }

    #[test]
    fn empty_lot_is_a_pure_noise_step() {
        let cfg = step_cfg(1.0);
        let mut state = ParamState::from_init(vec![0.5, -0.5]);
        let mut rng = RngStream::seed_from(3);
        let audit = sidpsgd_step(&mut state, &mut [], &cfg, 0, &mut rng).unwrap();
        assert_eq!(audit.realized_lot, 0);
        assert_eq!(state.mu, vec![0.5, -0.5]); // mean untouched
        assert_ne!(state.theta, state.mu); // released weights still redrawn
    }

    #[test]
    fn piecewise_schedule_selects_stage_rates() {
        let lr = LrSchedule::Piecewise(vec![(0, 0.5), (10, 0.1), (20, 0.02)]);
        lr.validate().unwrap();
        assert_eq!(lr.at(0), 0.5);
        assert_eq!(lr.at(9), 0.5);
        assert_eq!(lr.at(10), 0.1);
        assert_eq!(lr.at(25), 0.02);
        assert!(LrSchedule::Piecewise(vec![(1, 0.5)]).validate().is_err());
        assert!(LrSchedule::Constant(-1.0).validate().is_err());
    }

    #[test]
    fn variance_separates_the_two_rules() {
        let demo = variance_demo(8, 40, 300, 1.0, 1.0, 10, 0.5, 77).unwrap();
        // Iterate noise accumulates: late variance far exceeds early.
        assert!(demo.dpsgd_var[39] > 20.0 * demo.dpsgd_var[0]);
        assert!(demo.dpsgd_r2 > 0.95, "r2 {}", demo.dpsgd_r2);
        // Sampled weights stay at the single-step level.
        assert!(
            (demo.sidpsgd_mean - demo.theory_per_step).abs() / demo.theory_per_step < 0.10,
            "mean {} vs theory {}",
            demo.sidpsgd_mean,
            demo.theory_per_step
        );
        assert!(demo.sidpsgd_max_rel_dev < 0.3, "dev {}", demo.sidpsgd_max_rel_dev);
    }

    #[test]
    fn dp_training_learns_easy_blobs() {
        let train = synthetic_classification(400, 8, 4, 50).unwrap();
        let test = synthetic_classification(120, 8, 4, 51).unwrap();
        let spec = ModelSpec::mlp(8, &[16], 4, Some(NormKind::Layer));
        let step = DpStepConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            lot_size: 40,
            lr: LrSchedule::Constant(1.0),
        };
        let cfg = DpTrainConfig::new(DpAlgorithm::SiDpSgd, step, 60, train.len());
        let out = dp_train(&spec, &train, &test, &cfg, 5, None, |_| {}).unwrap();
        assert!(out.status.is_converged(), "{:?}", out.status);
        assert!(out.final_accuracy > 0.8, "accuracy {}", out.final_accuracy);
        assert!(out.clip_audit.max_post_clip_norm <= 1.0 + 1e-9);
        assert_eq!(out.theta.len(), spec.param_count().unwrap());
        // Released weights are a noisy draw, never the mean itself.
        assert_ne!(out.theta, out.mu);
    }

    #[test]
    fn dp_training_is_deterministic_per_seed() {
        let train = synthetic_classification(200, 6, 3, 60).unwrap();
        let test = synthetic_classification(60, 6, 3, 61).unwrap();
        let spec = ModelSpec::mlp(6, &[10], 3, Some(NormKind::Layer));
        let step = DpStepConfig {
            clip_norm: 1.0,
            noise_multiplier: 2.0,
            lot_size: 20,
            lr: LrSchedule::Constant(0.5),
        };
        let cfg = DpTrainConfig::new(DpAlgorithm::DpSgd, step, 20, train.len());
        let a = dp_train(&spec, &train, &test, &cfg, 9, None, |_| {}).unwrap();
        let b = dp_train(&spec, &train, &test, &cfg, 9, None, |_| {}).unwrap();
        assert_eq!(a.theta, b.theta);
        let c = dp_train(&spec, &train, &test, &cfg, 10, None, |_| {}).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn bn_training_requires_disjoint_public_rows() {
        let train = synthetic_classification(100, 6, 3, 70).unwrap();
        let test = synthetic_classification(40, 6, 3, 71).unwrap();
        let spec = ModelSpec::mlp(6, &[8], 3, Some(NormKind::Batch));
        let step = DpStepConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            lot_size: 10,
            lr: LrSchedule::Constant(0.5),
        };
        let cfg = DpTrainConfig::new(DpAlgorithm::SiDpSgd, step, 5, train.len());
        // No public rows at all: rejected.
        assert!(dp_train(&spec, &train, &test, &cfg, 1, None, |_| {}).is_err());

        // Public rows drawn from a disjoint pool: accepted.
        let mut rng = RngStream::seed_from(2);
        let public = PublicBatch::draw(&test, &train, 6, &mut rng).unwrap();
        let out = sidpsgd_bn_train(&spec, &train, &test, &cfg, 1, &public, |_| {}).unwrap();
        assert_eq!(out.theta.len(), spec.param_count().unwrap());

        // Inference path returns one class per example.
        let (x, _) = test.gather(&[0, 1, 2], &[6]).unwrap();
        let preds = sidpsgd_bn_infer(&spec, &out.theta, &x, &public).unwrap();
        assert_eq!(preds.len(), 3);
        assert!(preds.iter().all(|&p| p < 3));
    }
}
