//! Seeded two-stage tuning loop: supervised warm-up, then preference descent.
//!
//! [`lm_warmup`] fits the model to its dataset's chosen completions by plain
//! likelihood maximisation. Preference margins alone cannot make a randomly
//! initialised model *decode* its preferred strings — the margin saturates
//! by suppressing the rejected side while the argmax stays wherever it
//! started — so a pipeline first warms up, then preference-tunes against the
//! warmed-up snapshot.
//!
//! [`train`] freezes a reference snapshot of the incoming model (warmed-up
//! or not), then runs epochs of mini-batch descent on the preference
//! objective. Every epoch reshuffles a fresh index vector with its own
//! deterministically derived generator (`seed + 1 + epoch`), so a run is
//! bit-reproducible from the config alone and epoch N's order does not
//! depend on how many batches epoch N-1 had.
//!
//! A non-finite batch loss or gradient aborts the run: the model is rolled
//! back to the most recent parameters that produced a finite batch loss and
//! the error names the epoch and batch (both 1-based) that diverged.
//! [`train_with_logs`] additionally writes `ckpt_<epoch>.json` after every
//! completed epoch plus a `metrics.csv` of per-epoch mean losses; metrics
//! include wall-clock seconds and are the one artifact that varies between
//! otherwise identical runs.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::critique::{MARKER_HONEST, MARKER_PERSONA, MARKER_REFUSAL, MARKER_UNSAFE};
use crate::data::Dataset;
use crate::dpo::{dpo_loss_grad, DpoConfig, DpoError};
use crate::model::{ModelError, TinyLM};
use crate::rng::Lcg64;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Dpo(#[from] DpoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("divergence at epoch {epoch}, batch {batch}: non-finite loss or gradient; model rolled back to the last finite state")]
    Divergence { epoch: usize, batch: usize },
    #[error("dataset failed validation with {count} violation(s); first: {first}")]
    InvalidData { count: usize, first: String },
    #[error("model vocabulary does not cover dataset marker {0:?}")]
    MissingMarker(&'static str),
    #[error("could not write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("learning rate must be positive, got {0}")]
    NonPositiveLearningRate(f64),
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("adam decay rates must lie in [0, 1), got beta1={0}, beta2={1}")]
    BadAdamDecay(f64, f64),
    #[error("adam epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Update rule applied to each mini-batch gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Hyperparameters for one training run. The `adam_*` fields are ignored
/// under [`Optimizer::Sgd`] but validated regardless, so a config is either
/// wholly usable or rejected up front. `epochs` may be zero: the run is a
/// validated no-op that leaves the parameters untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub dpo: DpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 8,
            seed: 42,
            optimizer: Optimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            dpo: DpoConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> TrainResult<()> {
        // NaN must fail too, hence the explicit second clauses below.
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(TrainError::NonPositiveLearningRate(self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err(TrainError::ZeroBatchSize);
        }
        let b1_ok = (0.0..1.0).contains(&self.adam_beta1);
        let b2_ok = (0.0..1.0).contains(&self.adam_beta2);
        if !b1_ok || !b2_ok {
            return Err(TrainError::BadAdamDecay(self.adam_beta1, self.adam_beta2));
        }
        if self.adam_epsilon <= 0.0 || self.adam_epsilon.is_nan() {
            return Err(TrainError::NonPositiveEpsilon(self.adam_epsilon));
        }
        // The preference section is part of the config even when a stage
        // ignores it, so an unusable value is rejected up front rather than
        // at the first preference batch.
        self.dpo.check()?;
        Ok(())
    }
}

/// One plain gradient step: `p -= lr * g`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], learning_rate: f64) {
    assert_eq!(params.len(), grad.len());
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= learning_rate * g;
    }
}

/// First- and second-moment accumulators for the adaptive update.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Completed steps; bias correction uses `t` after incrementing.
    t: u64,
}

impl AdamState {
    pub fn new(param_len: usize) -> Self {
        Self {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
        }
    }

    /// One bias-corrected adaptive step, in place:
    ///
    /// ```text
    /// m = b1*m + (1-b1)*g        m_hat = m / (1 - b1^t)
    /// v = b2*v + (1-b2)*g^2      v_hat = v / (1 - b2^t)
    /// p -= lr * m_hat / (sqrt(v_hat) + eps)
    /// ```
    ///
    /// The epsilon sits outside the square root, so a uniformly zero
    /// gradient leaves the parameters exactly unchanged.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let m_correction = 1.0 - beta1.powi(self.t as i32);
        let v_correction = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / m_correction;
            let v_hat = self.v[i] / v_correction;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// What a finished run reports. Per-epoch losses are means over tuples (not
/// over batches), so a ragged final batch is weighted by its true size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_mean_loss: Vec<f64>,
    pub wall_seconds: f64,
}

/// What a training pass optimises per batch.
enum Objective {
    /// Preference loss against the frozen reference (the tuning stage).
    Preference,
    /// Mean negative log-likelihood of the chosen completions (the warm-up
    /// stage); the reference snapshot is ignored.
    ChosenLikelihood,
}

/// Tune `model` on `dataset` in place. The reference is snapshotted from
/// `model` at entry, so callers pass the model exactly once.
pub fn train(model: &mut TinyLM, dataset: &Dataset, cfg: &TrainConfig) -> TrainResult<TrainReport> {
    train_impl(model, dataset, cfg, None, Objective::Preference)
}

/// [`train`], plus `ckpt_<epoch>.json` (1-based) and `metrics.csv`
/// (`epoch,mean_loss,seconds`) under `out_dir`. The directory is created if
/// missing; a diverged run leaves the artifacts of every completed epoch.
pub fn train_with_logs(
    model: &mut TinyLM,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> TrainResult<TrainReport> {
    train_impl(model, dataset, cfg, Some(out_dir), Objective::Preference)
}

/// Supervised warm-up: minimise the mean negative log-likelihood of every
/// tuple's *chosen* completion under its own system prompt. Run this before
/// [`train`] so the preference stage starts from — and is regularised toward —
/// a model that can already decode the preferred strings. `cfg.dpo` is
/// validated but unused. Losses in the report are per-epoch mean NLLs.
pub fn lm_warmup(
    model: &mut TinyLM,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> TrainResult<TrainReport> {
    train_impl(model, dataset, cfg, None, Objective::ChosenLikelihood)
}

/// Mean NLL of the batch's chosen completions and its gradient.
fn chosen_nll_grad(model: &TinyLM, batch: &Dataset) -> (f64, Vec<f64>) {
    let scale = -1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.params().len()];
    let mut logprob_sum = 0.0;
    for t in batch.iter() {
        logprob_sum += model.add_seq_logprob_grad(&t.system, &t.prompt, &t.chosen, scale, &mut grad);
    }
    (-logprob_sum / batch.len() as f64, grad)
}

/// The behavior markers the evaluation rules look for. If a dataset uses one
/// in a completion, a model whose vocabulary cannot represent it could never
/// express the behavior it is being trained toward, so training refuses it.
const BEHAVIOR_MARKERS: [&str; 4] =
    [MARKER_UNSAFE, MARKER_REFUSAL, MARKER_PERSONA, MARKER_HONEST];

fn check_marker_coverage(model: &TinyLM, dataset: &Dataset) -> TrainResult<()> {
    for marker in BEHAVIOR_MARKERS {
        if model.vocab().contains(marker) {
            continue;
        }
        let used = dataset.iter().any(|t| {
            [&t.chosen, &t.rejected]
                .iter()
                .any(|text| text.split_whitespace().any(|tok| tok == marker))
        });
        if used {
            return Err(TrainError::MissingMarker(marker));
        }
    }
    Ok(())
}

fn train_impl(
    model: &mut TinyLM,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    objective: Objective,
) -> TrainResult<TrainReport> {
    cfg.check()?;
    if dataset.is_empty() {
        return Err(DpoError::EmptyDataset.into());
    }
    let violations = crate::data::validate(dataset);
    if let Some(first) = violations.first() {
        return Err(TrainError::InvalidData {
            count: violations.len(),
            first: first.to_string(),
        });
    }
    check_marker_coverage(model, dataset)?;

    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| TrainError::Io { path, source }
    };
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("metrics.csv");
            let mut file = std::fs::File::create(&path).map_err(io_err(&path))?;
            writeln!(file, "epoch,mean_loss,seconds").map_err(io_err(&path))?;
            Some((file, path))
        }
        None => None,
    };

    let start = Instant::now();
    let reference = model.snapshot();
    let mut adam = AdamState::new(model.params().len());
    // Most recent parameters that produced a finite batch loss.
    let mut backup = model.params().to_vec();
    let n = dataset.len();
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Lcg64::new(cfg.seed.wrapping_add(1 + epoch as u64)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (batch_index, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Dataset::from_tuples(
                batch_ids.iter().map(|&i| dataset.tuples()[i].clone()).collect(),
            );
            let (loss, grad) = match objective {
                Objective::Preference => dpo_loss_grad(model, &reference, &batch, &cfg.dpo)?,
                Objective::ChosenLikelihood => chosen_nll_grad(model, &batch),
            };
            let finite = loss.is_finite() && grad.iter().all(|g| g.is_finite());
            if !finite {
                model.params_mut().copy_from_slice(&backup);
                return Err(TrainError::Divergence {
                    epoch: epoch + 1,
                    batch: batch_index + 1,
                });
            }
            backup.copy_from_slice(model.params());
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(model.params_mut(), &grad, cfg.learning_rate),
                Optimizer::Adam => adam.step(
                    model.params_mut(),
                    &grad,
                    cfg.learning_rate,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    cfg.adam_epsilon,
                ),
            }
            // A finite gradient scaled by a huge learning rate can still
            // overflow the parameters; catch that before the next forward.
            if model.params().iter().any(|p| !p.is_finite()) {
                model.params_mut().copy_from_slice(&backup);
                return Err(TrainError::Divergence {
                    epoch: epoch + 1,
                    batch: batch_index + 1,
                });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let mean_loss = loss_sum / n as f64;
        epoch_mean_loss.push(mean_loss);
        if let Some((file, path)) = metrics.as_mut() {
            writeln!(
                file,
                "{},{},{:.3}",
                epoch + 1,
                mean_loss,
                start.elapsed().as_secs_f64()
            )
            .map_err(io_err(path))?;
            let ckpt = out_dir.unwrap().join(format!("ckpt_{}.json", epoch + 1));
            model.save(&ckpt)?;
        }
    }

    Ok(TrainReport {
        epoch_mean_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{cst_augment, CstTuple, PreferencePair, SystemPromptPair};
    use crate::dpo::{dpo_loss, preference_prob, LogProbQuad};
    use crate::model::Vocabulary;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn flipped_toy() -> (Dataset, TinyLM) {
        let sp = SystemPromptPair::new("open", "guarded", "S0", "S1").unwrap();
        let pairs: Vec<PreferencePair> = [
            ("alpha beta", "gamma delta", "epsilon zeta"),
            ("beta gamma", "delta epsilon", "zeta alpha"),
            ("gamma alpha", "zeta beta", "delta gamma"),
            ("alpha zeta", "epsilon beta", "gamma epsilon"),
        ]
        .into_iter()
        .map(|(prompt, original, revised)| PreferencePair {
            prompt: prompt.into(),
            original: original.into(),
            revised: revised.into(),
            source_tag: "toy".into(),
        })
        .collect();
        let dataset = cst_augment(&pairs, &sp).unwrap();
        let vocab = Vocabulary::build(
            &["open guarded alpha beta gamma delta epsilon zeta"],
        )
        .unwrap();
        // K covers the whole rendered sequence, so the system token stays in
        // every prediction window and the flipped halves cannot cancel.
        let model = TinyLM::new(vocab, 12, 8, 16, 42);
        (dataset, model)
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        assert!(ok.check().is_ok());
        let cases: Vec<(TrainConfig, &str)> = vec![
            (TrainConfig { learning_rate: 0.0, ..ok.clone() }, "learning rate"),
            (TrainConfig { batch_size: 0, ..ok.clone() }, "batch size"),
            (TrainConfig { adam_beta1: 1.0, ..ok.clone() }, "decay"),
            (TrainConfig { adam_beta2: -0.1, ..ok.clone() }, "decay"),
            (TrainConfig { adam_epsilon: 0.0, ..ok.clone() }, "epsilon"),
            (TrainConfig { dpo: DpoConfig { beta: -1.0 }, ..ok.clone() }, "beta"),
        ];
        for (cfg, needle) in cases {
            let err = cfg.check().unwrap_err().to_string();
            assert!(err.contains(needle), "{err:?} missing {needle:?}");
        }
    }

    #[test]
    fn zero_epochs_run_is_a_validated_no_op() {
        let (dataset, mut model) = flipped_toy();
        let before = model.params().to_vec();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let report = train_with_logs(&mut model, &dataset, &cfg, dir.path()).unwrap();
        assert!(report.epoch_mean_loss.is_empty());
        let same = model
            .params()
            .iter()
            .zip(&before)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "zero epochs must leave parameters untouched");
        // Validation still runs before the (empty) loop.
        let err = train(&mut model, &Dataset::default(), &cfg).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics, "epoch,mean_loss,seconds\n");
    }

    #[test]
    fn sgd_step_moves_against_the_gradient() {
        let mut params = vec![1.0, 2.0];
        sgd_step(&mut params, &[0.5, -1.0], 0.1);
        assert_eq!(params, vec![0.95, 2.1]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![0.3, -0.7, 1.1];
        let zeros = vec![0.0; 3];
        sgd_step(&mut params, &zeros, 0.5);
        assert_eq!(params, vec![0.3, -0.7, 1.1]);
        let mut adam = AdamState::new(3);
        adam.step(&mut params, &zeros, 0.5, 0.9, 0.999, 1e-8);
        assert_eq!(params, vec![0.3, -0.7, 1.1]);
    }

    #[test]
    fn adam_first_step_magnitude_is_the_learning_rate() {
        // After one step m_hat = g and v_hat = g^2, so the update is
        // lr * g / (|g| + eps) = lr * sign(g) up to the epsilon.
        let mut params = vec![0.0, 0.0, 0.0];
        let grad = vec![0.5, -2.0, 1e-3];
        let mut adam = AdamState::new(3);
        adam.step(&mut params, &grad, 0.01, 0.9, 0.999, 1e-8);
        for (p, g) in params.iter().zip(&grad) {
            let expected = -0.01 * g.signum();
            assert!((p - expected).abs() < 1e-6, "{p} vs {expected}");
        }
    }

    #[test]
    fn adam_trace_matches_direct_geometric_sums() {
        // Independent oracle: expand the moment recurrences into explicit
        // geometric sums over the gradient history and step from those.
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.05, 0.9, 0.999, 1e-8);
        let grads: [[f64; 3]; 5] = [
            [0.5, -1.0, 2.0],
            [0.25, 0.75, -0.5],
            [-1.5, 0.1, 0.0],
            [2.0, -2.0, 1.0],
            [0.0, 0.5, -0.25],
        ];

        let mut expected = vec![0.2, -0.4, 1.0];
        for t in 1..=grads.len() {
            for i in 0..3 {
                let mut m = 0.0;
                let mut v = 0.0;
                for (step, g) in grads.iter().take(t).enumerate() {
                    let age = (t - 1 - step) as i32;
                    m += (1.0 - b1) * b1.powi(age) * g[i];
                    v += (1.0 - b2) * b2.powi(age) * g[i] * g[i];
                }
                let m_hat = m / (1.0 - b1.powi(t as i32));
                let v_hat = v / (1.0 - b2.powi(t as i32));
                expected[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }

        let mut params = vec![0.2, -0.4, 1.0];
        let mut adam = AdamState::new(3);
        for grad in &grads {
            adam.step(&mut params, grad, lr, b1, b2, eps);
        }
        for (p, e) in params.iter().zip(&expected) {
            assert!((p - e).abs() < 1e-12, "{p} vs {e}");
        }
    }

    #[test]
    fn full_batch_sgd_losses_never_increase() {
        let (dataset, mut model) = flipped_toy();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: dataset.len(), // full batch: plain gradient descent
            seed: 7,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let reference = model.snapshot();
        let before = dpo_loss(&model, &reference, &dataset, &cfg.dpo).unwrap();
        assert!((before - LN_2).abs() < 1e-9);
        let report = train(&mut model, &dataset, &cfg).unwrap();
        assert_eq!(report.epoch_mean_loss.len(), 3);
        let mut previous = before;
        for &loss in &report.epoch_mean_loss {
            assert!(loss <= previous + 1e-12, "{loss} > {previous}");
            previous = loss;
        }
        assert!(report.wall_seconds >= 0.0);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let (dataset, model) = flipped_toy();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 3, // ragged batches, so shuffling matters
            seed: 99,
            ..TrainConfig::default()
        };
        let mut a = model.clone();
        let mut b = model.clone();
        let report_a = train(&mut a, &dataset, &cfg).unwrap();
        let report_b = train(&mut b, &dataset, &cfg).unwrap();
        assert_eq!(report_a.epoch_mean_loss, report_b.epoch_mean_loss);
        let same = a
            .params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "same seed must reproduce parameters exactly");
    }

    #[test]
    fn adam_converges_on_flipped_toy_pairs() {
        let (dataset, mut model) = flipped_toy();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 150,
            batch_size: 4,
            seed: 42,
            optimizer: Optimizer::Adam,
            dpo: DpoConfig { beta: 0.25 },
            ..TrainConfig::default()
        };
        let reference = model.snapshot();
        let report = train(&mut model, &dataset, &cfg).unwrap();
        let final_loss = *report.epoch_mean_loss.last().unwrap();
        assert!(final_loss < 0.1 * LN_2, "final loss {final_loss}");
        // Nearly every tuple should now be ordered correctly, flipped
        // halves included.
        let correct = dataset
            .iter()
            .filter(|t| {
                preference_prob(&LogProbQuad::compute(&model, &reference, t), &cfg.dpo) > 0.5
            })
            .count();
        let fraction = correct as f64 / dataset.len() as f64;
        assert!(fraction >= 0.95, "only {correct}/{} tuples ordered", dataset.len());
    }

    #[test]
    fn warmup_makes_chosen_completions_greedy_decodable() {
        let (dataset, mut model) = flipped_toy();
        // The mirrored halves make this slow to fit at this capacity: the
        // loss plateaus near ln(V)/2 for a few hundred epochs before the
        // system conditioning resolves, hence the generous epoch count.
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 800,
            batch_size: 4,
            seed: 42,
            optimizer: Optimizer::Adam,
            ..TrainConfig::default()
        };
        let report = lm_warmup(&mut model, &dataset, &cfg).unwrap();
        let first = report.epoch_mean_loss[0];
        let last = *report.epoch_mean_loss.last().unwrap();
        assert!(last < first, "warm-up NLL did not fall: {first} -> {last}");
        assert!(last < 0.5, "warm-up NLL stalled at {last}");
        // The whole point of the warm-up: every chosen string becomes the
        // greedy decode for its own (system, prompt) context.
        for t in dataset.iter() {
            let decoded = model.greedy_generate(&t.system, &t.prompt, 8);
            assert_eq!(decoded, t.chosen, "under system {:?}", t.system);
        }
    }

    #[test]
    fn training_requires_vocabulary_coverage_of_used_markers() {
        let (_, mut model) = flipped_toy();
        // Valid tuple whose chosen answer uses a behavior marker that the
        // model's vocabulary cannot emit.
        let dataset = Dataset::from_tuples(vec![CstTuple {
            system: "guarded".into(),
            prompt: "alpha beta".into(),
            chosen: "SAFE_REFUSAL gamma".into(),
            rejected: "delta epsilon".into(),
            source_tag: "t".into(),
        }]);
        let err = train(&mut model, &dataset, &TrainConfig::default()).unwrap_err();
        assert!(
            matches!(err, TrainError::MissingMarker("SAFE_REFUSAL")),
            "{err}"
        );
        assert!(err.to_string().contains("vocabulary"), "{err}");
    }

    #[test]
    fn empty_and_invalid_datasets_are_rejected() {
        let (_, mut model) = flipped_toy();
        let cfg = TrainConfig::default();
        let err = train(&mut model, &Dataset::default(), &cfg).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");

        // Pair synthesis refuses identical answers, so a degenerate tuple
        // can only arrive from hand-built or corrupted data.
        let degenerate = Dataset::from_tuples(vec![CstTuple {
            system: "open".into(),
            prompt: "alpha".into(),
            chosen: "beta".into(),
            rejected: "beta".into(),
            source_tag: "t".into(),
        }]);
        let err = train(&mut model, &degenerate, &cfg).unwrap_err();
        assert!(err.to_string().contains("failed validation"), "{err}");
    }

    #[test]
    fn poisoned_parameters_are_caught_at_the_first_batch() {
        let (dataset, mut model) = flipped_toy();
        let last = model.params().len() - 1;
        model.params_mut()[last] = f64::INFINITY;
        let err = train(&mut model, &dataset, &TrainConfig::default()).unwrap_err();
        match err {
            TrainError::Divergence { epoch, batch } => {
                assert_eq!((epoch, batch), (1, 1));
            }
            other => panic!("expected divergence, got {other}"),
        }
        assert!(err_message_names_position());

        fn err_message_names_position() -> bool {
            TrainError::Divergence { epoch: 1, batch: 1 }
                .to_string()
                .contains("epoch 1, batch 1")
        }
    }

    #[test]
    fn runaway_learning_rate_rolls_back_to_finite_parameters() {
        let (dataset, mut model) = flipped_toy();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 20,
            batch_size: 2,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &dataset, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { .. }), "{err}");
        assert!(model.params().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn logged_run_writes_checkpoints_and_metrics() {
        let (dataset, mut model) = flipped_toy();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = train_with_logs(&mut model, &dataset, &cfg, dir.path()).unwrap();
        assert_eq!(report.epoch_mean_loss.len(), 2);

        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], "epoch,mean_loss,seconds");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
        assert!(lines[2].starts_with("2,"));

        // Checkpoints are numbered from 1 and reload to the epoch's exact
        // parameters (the last one matches the final model).
        let reloaded = TinyLM::load(&dir.path().join("ckpt_2.json")).unwrap();
        let same = reloaded
            .params()
            .iter()
            .zip(model.params())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
        assert!(dir.path().join("ckpt_1.json").exists());
    }
}
