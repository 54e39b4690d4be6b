//! Experiment drivers: dataset loading, seeded runs, sweeps, and the
//! variance demonstration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use sidp_core::accountant::{calibrate_z, training_epsilon, RdpLedger};
use sidp_core::data::{synthetic_classification, Dataset, PublicBatch};
use sidp_core::dp::{
    dp_train, variance_demo, DpAlgorithm, DpStepConfig, DpTrainConfig, LrSchedule, VarianceDemo,
};
use sidp_core::model::{accuracy, ModelParams, ModelSpec};
use sidp_core::noisy::{noisy_train, MeanUpdate, NoisyTrainConfig, TrainStatus};
use sidp_core::rng::RngStream;

use crate::checkpoint;
use crate::config::{Arch, DataSource, ExperimentConfig, Optimizer, UpdateRule};
use crate::idx::load_idx;
use crate::metrics::{
    write_atomic, write_metrics, write_summary, MetricsRecord, SeedOutcome, Summary,
};
use crate::report;

/// Fixed seeds for synthetic corpora so every experiment sees the same data.
const SYNTH_TRAIN_SEED: u64 = 0xD474;
const SYNTH_TEST_SEED: u64 = 0xD475;
/// RNG fork label for the public-batch draw (0..3 belong to the trainers).
const PUBLIC_FORK: u64 = 4;

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig, data_dir: &Path) -> Result<LoadedData> {
    match cfg.data.source {
        DataSource::Idx => {
            let train = load_idx(
                &data_dir.join(&cfg.data.train_images),
                &data_dir.join(&cfg.data.train_labels),
            )?;
            let test = load_idx(
                &data_dir.join(&cfg.data.test_images),
                &data_dir.join(&cfg.data.test_labels),
            )?;
            if train.features() != test.features() {
                bail!(
                    "train images have {} pixels, test images {}",
                    train.features(),
                    test.features()
                );
            }
            Ok(LoadedData { train, test })
        }
        DataSource::Synthetic => {
            let d = &cfg.data;
            let train = synthetic_classification(d.n, d.dims, d.classes, SYNTH_TRAIN_SEED)?;
            let test_n = (d.n / 4).max(2 * d.classes);
            let test = synthetic_classification(test_n, d.dims, d.classes, SYNTH_TEST_SEED)?;
            Ok(LoadedData { train, test })
        }
    }
}

pub fn model_spec_for(cfg: &ExperimentConfig, train: &Dataset) -> Result<ModelSpec> {
    let norm = cfg.model.norm.kind();
    let spec = match cfg.model.arch {
        Arch::Mlp => ModelSpec::mlp(train.features(), &cfg.model.hidden, train.classes(), norm),
        Arch::Cnn => {
            let (h, w) = train
                .image_dims()
                .context("the cnn architecture needs image dimensions (IDX data)")?;
            if h != w {
                bail!("the cnn architecture needs square images, got {h}x{w}");
            }
            let c = &cfg.model.channels;
            ModelSpec::small_cnn(h, [c[0], c[1]], train.classes(), norm)
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn public_batch_for(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    seed: u64,
) -> Result<Option<PublicBatch>> {
    if cfg.data.public_size == 0 {
        return Ok(None);
    }
    eprintln!(
        "warning: drawing the public batch from the held-out split of the same corpus; \
         prefer a separate public corpus when one is available"
    );
    let mut rng = RngStream::seed_from(seed).fork(PUBLIC_FORK);
    let batch = PublicBatch::draw(&data.test, &data.train, cfg.data.public_size, &mut rng)?;
    Ok(Some(batch))
}

/// Output paths derived from one `--out` stem.
pub struct RunPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
    stem: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> RunPaths {
        let stem = match out.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("json") => out.with_extension(""),
            _ => out.to_path_buf(),
        };
        // Suffixes are appended, not set via with_extension, so stems that
        // contain dots (sweep values like `sigma0.5`) keep their full name.
        let append = |suffix: &str| {
            let mut name = stem.file_name().unwrap_or_default().to_os_string();
            name.push(suffix);
            stem.with_file_name(name)
        };
        RunPaths { csv: append(".csv"), json: append(".json"), stem }
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.with_suffix(&format!("-seed{seed}.ckpt"))
    }

    fn with_suffix(&self, suffix: &str) -> PathBuf {
        let mut name = self.stem.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        self.stem.with_file_name(name)
    }
}

pub struct ExperimentResult {
    pub summary: Summary,
    pub records: Vec<MetricsRecord>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = load_data(cfg, data_dir)?;
    let spec = model_spec_for(cfg, &data.train)?;
    let paths = RunPaths::new(out);

    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    let mut checkpoint_paths = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let seeded = run_one_seed(cfg, &spec, &data, seed, &mut records)?;
        let ckpt = paths.checkpoint(seed);
        checkpoint::save(&ckpt, &spec, &seeded.theta, seeded.public_hash.clone())?;
        checkpoint_paths.push(ckpt);
        outcomes.push(seeded.outcome);
    }

    let summary = Summary::from_outcomes(
        &cfg.experiment.name,
        &cfg.model.describe(),
        cfg.train.optimizer.name(),
        cfg.report_key(),
        outcomes,
    );
    write_metrics(&paths.csv, &records, &summary)?;
    write_summary(&paths.json, &summary)?;
    Ok(ExperimentResult {
        summary,
        records,
        csv_path: paths.csv,
        json_path: paths.json,
        checkpoint_paths,
    })
}

struct SeedRun {
    outcome: SeedOutcome,
    theta: Vec<f64>,
    public_hash: Option<String>,
}

fn status_fields(status: &TrainStatus) -> (bool, Option<String>) {
    match status {
        TrainStatus::Converged => (true, None),
        TrainStatus::NonConvergence { reason } => (false, Some(reason.clone())),
    }
}

fn run_one_seed(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    data: &LoadedData,
    seed: u64,
    records: &mut Vec<MetricsRecord>,
) -> Result<SeedRun> {
    let run_id = cfg.experiment.name.clone();
    let public = public_batch_for(cfg, data, seed)?;
    let public_rows = match &public {
        Some(p) => Some(p.rows_shaped(&spec.input_shape)?),
        None => None,
    };
    let started = Instant::now();

    if cfg.train.epochs == 0 {
        // Nothing trains and nothing is spent; score the initial weights so
        // the summary still reports a real accuracy.
        let mut init_rng = RngStream::seed_from(seed).fork(0);
        let params = ModelParams::init(spec, &mut init_rng, cfg.train.init_gain)?;
        let all: Vec<usize> = (0..data.test.len()).collect();
        let (images, labels) = data.test.gather(&all, &spec.input_shape)?;
        let acc = accuracy(spec, &params, &images, &labels, public_rows.as_ref(), 256)?;
        let epsilon = if cfg.train.optimizer.is_dp() { Some(0.0) } else { None };
        return Ok(SeedRun {
            outcome: SeedOutcome {
                seed,
                converged: true,
                reason: None,
                final_accuracy: acc,
                epochs_run: 0,
                epsilon,
            },
            theta: params.flatten(),
            public_hash: public.map(|p| p.batch_hash_hex()),
        });
    }

    match cfg.train.optimizer {
        Optimizer::Sgd | Optimizer::Noisy => {
            let sigma = if cfg.train.optimizer == Optimizer::Sgd { 0.0 } else { cfg.train.sigma };
            let update = match cfg.train.update {
                UpdateRule::Sgd => MeanUpdate::Sgd,
                UpdateRule::Adam => MeanUpdate::Adam,
            };
            let ncfg = NoisyTrainConfig {
                epochs: cfg.train.epochs,
                batch_size: cfg.train.lot_size,
                lr: cfg.train.lr,
                sigma,
                update,
                eval_chunk: 256,
                target_accuracy: cfg.train.target_accuracy,
            };
            let outcome = noisy_train(spec, &data.train, &data.test, &ncfg, seed, public.as_ref(), |e| {
                records.push(MetricsRecord {
                    run_id: run_id.clone(),
                    seed,
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    test_accuracy: e.test_accuracy,
                    epsilon: f64::INFINITY,
                    wall_clock_s: started.elapsed().as_secs_f64(),
                });
            })?;
            let (converged, reason) = status_fields(&outcome.status);
            Ok(SeedRun {
                outcome: SeedOutcome {
                    seed,
                    converged,
                    reason,
                    final_accuracy: outcome.final_accuracy,
                    epochs_run: outcome.epochs.len(),
                    epsilon: None,
                },
                theta: outcome.eval_params.flatten(),
                public_hash: public.map(|p| p.batch_hash_hex()),
            })
        }
        Optimizer::DpSgd | Optimizer::SiDpSgd | Optimizer::SiDpSgdBn => {
            let dp = cfg.dp.as_ref().expect("validated");
            let n = data.train.len();
            let lot = cfg.train.lot_size;
            let steps_per_epoch = (n / lot).max(1);
            let steps = cfg.train.epochs * steps_per_epoch;
            let q = lot as f64 / n as f64;
            let z = match (dp.noise_multiplier, dp.target_epsilon) {
                (Some(z), _) => z,
                (None, Some(target)) => calibrate_z(target, dp.delta, q, steps)?,
                (None, None) => unreachable!("validated"),
            };

            let algorithm = if cfg.train.optimizer == Optimizer::DpSgd {
                DpAlgorithm::DpSgd
            } else {
                DpAlgorithm::SiDpSgd
            };
            let step_cfg = DpStepConfig {
                clip_norm: dp.clip_norm,
                noise_multiplier: z,
                lot_size: lot,
                lr: LrSchedule::Constant(cfg.train.lr),
            };
            let mut tcfg = DpTrainConfig::new(algorithm, step_cfg, steps, n);
            tcfg.target_accuracy = cfg.train.target_accuracy;
            tcfg.init_gain = cfg.train.init_gain;

            // The ledger accumulates across windows; every row is also
            // cross-checked against a from-scratch accounting of the same
            // step count.
            let mut ledger = RdpLedger::with_default_orders();
            let mut prev_steps = 0usize;
            let mut ledger_err: Option<String> = None;
            let outcome = dp_train(spec, &data.train, &data.test, &tcfg, seed, public.as_ref(), |e| {
                let mut epsilon = f64::NAN;
                match ledger.add_subsampled_gaussian(z, q, e.steps_done - prev_steps) {
                    Ok(()) => match (ledger.epsilon(dp.delta), training_epsilon(z, q, e.steps_done, dp.delta)) {
                        (Ok((inc, _)), Ok((fresh, _))) => {
                            if (inc - fresh).abs() > 1e-9 * fresh.max(1.0) {
                                ledger_err = Some(format!(
                                    "accountant cross-check failed at step {}: ledger {inc} vs recomputed {fresh}",
                                    e.steps_done
                                ));
                            }
                            epsilon = fresh;
                        }
                        (Err(err), _) | (_, Err(err)) => ledger_err = Some(err.to_string()),
                    },
                    Err(err) => ledger_err = Some(err.to_string()),
                }
                prev_steps = e.steps_done;
                records.push(MetricsRecord {
                    run_id: run_id.clone(),
                    seed,
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    test_accuracy: e.test_accuracy,
                    epsilon,
                    wall_clock_s: started.elapsed().as_secs_f64(),
                });
            })?;
            if let Some(msg) = ledger_err {
                bail!(msg);
            }

            let executed = outcome.clip_audit.steps;
            let epsilon = if executed == 0 {
                0.0
            } else {
                training_epsilon(z, q, executed, dp.delta)?.0
            };
            let (converged, reason) = status_fields(&outcome.status);
            Ok(SeedRun {
                outcome: SeedOutcome {
                    seed,
                    converged,
                    reason,
                    final_accuracy: outcome.final_accuracy,
                    epochs_run: outcome.epochs.len(),
                    epsilon: Some(epsilon),
                },
                theta: outcome.theta,
                public_hash: public.map(|p| p.batch_hash_hex()),
            })
        }
    }
}

/// Runs one experiment per sweep value, each on its own thread, and writes a
/// combined comparison table next to the per-value outputs.
pub fn run_sweep(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<Vec<ExperimentResult>> {
    cfg.validate()?;
    let sweep = cfg.sweep.clone().context("config has no [sweep] section")?;
    let paths = RunPaths::new(out);

    let results: Vec<Result<ExperimentResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sweep
            .values
            .iter()
            .map(|&value| {
                let paths = &paths;
                scope.spawn(move || {
                    let sub = cfg.with_sweep_value(sweep.parameter, value)?;
                    let sub_out = paths.with_suffix(&format!("-{}{}", sweep.parameter.name(), value));
                    run_experiment(&sub, data_dir, &sub_out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
    });
    let results: Vec<ExperimentResult> = results.into_iter().collect::<Result<_>>()?;

    let summaries: Vec<Summary> = results.iter().map(|r| r.summary.clone()).collect();
    let (_, csv) = report::render(&summaries);
    write_atomic(&paths.with_suffix("-sweep.csv"), csv.as_bytes())?;
    Ok(results)
}

/// Formats the per-step variance table as CSV.
pub fn variance_demo_csv(demo: &VarianceDemo) -> String {
    let mut out = String::from("step,dpsgd_var,sidpsgd_var,theory_per_step\n");
    for (i, &step) in demo.steps.iter().enumerate() {
        out.push_str(&format!(
            "{step},{},{},{}\n",
            demo.dpsgd_var[i], demo.sidpsgd_var[i], demo.theory_per_step
        ));
    }
    out
}

/// Human-readable fit summary for the variance demonstration.
pub fn variance_demo_text(demo: &VarianceDemo) -> String {
    format!(
        "theory_per_step={:.6e}\n\
         dpsgd: slope={:.6e} (theory ratio {:.4}), r2={:.6}\n\
         sidpsgd: mean={:.6e} (theory ratio {:.4}), max_rel_dev={:.4}\n",
        demo.theory_per_step,
        demo.dpsgd_slope,
        demo.dpsgd_slope / demo.theory_per_step,
        demo.dpsgd_r2,
        demo.sidpsgd_mean,
        demo.sidpsgd_mean / demo.theory_per_step,
        demo.sidpsgd_max_rel_dev,
    )
}

pub struct VarianceDemoArgs {
    pub dim: usize,
    pub steps: usize,
    pub trials: usize,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub lot_size: usize,
    pub lr: f64,
    pub seed: u64,
}

pub fn run_variance_demo(args: &VarianceDemoArgs, out: Option<&Path>) -> Result<VarianceDemo> {
    let demo = variance_demo(
        args.dim,
        args.steps,
        args.trials,
        args.clip_norm,
        args.noise_multiplier,
        args.lot_size,
        args.lr,
        args.seed,
    )?;
    if let Some(path) = out {
        write_atomic(path, variance_demo_csv(&demo).as_bytes())?;
    }
    Ok(demo)
}

/// The `accountant` subcommand body: one `key=value` line for scripts.
pub fn accountant_line(
    z: Option<f64>,
    target_eps: Option<f64>,
    q: f64,
    steps: usize,
    delta: f64,
) -> Result<String> {
    match (z, target_eps) {
        (Some(z), None) => {
            let (epsilon, order) = training_epsilon(z, q, steps, delta)?;
            Ok(format!("z={z} q={q} steps={steps} delta={delta} epsilon={epsilon:.6} order={order}"))
        }
        (None, Some(target)) => {
            let z = calibrate_z(target, delta, q, steps)?;
            let (epsilon, order) = training_epsilon(z, q, steps, delta)?;
            Ok(format!(
                "target_eps={target} q={q} steps={steps} delta={delta} z={z:.6} epsilon={epsilon:.6} order={order}"
            ))
        }
        (None, None) => bail!("pass --z to account or --target-eps to calibrate"),
        (Some(_), Some(_)) => bail!("--z and --target-eps are mutually exclusive"),
    }
}
