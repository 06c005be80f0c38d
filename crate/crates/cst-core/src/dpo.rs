//! Direct preference optimization objective against a frozen reference.
//!
//! For a tuple (system s, prompt x, chosen y+, rejected y−) the implicit
//! preference logit is
//!
//! ```text
//! z = beta * [ (log pi_theta(y+|s,x) - log pi_ref(y+|s,x))
//!            - (log pi_theta(y-|s,x) - log pi_ref(y-|s,x)) ]
//! ```
//!
//! the modelled preference probability is `sigmoid(z)`, and the loss over a
//! dataset is the mean of `-log sigmoid(z)`, computed as `softplus(-z)` so
//! logits with magnitude up to 1e3 stay finite. Both the policy and the
//! reference condition on the tuple's own system prompt; the reference is a
//! [`ReferenceModel`] snapshot, so it cannot move during training.
//!
//! The gradient of one tuple's loss is
//! `-(1 - sigmoid(z)) * beta * (grad lp(y+) - grad lp(y-))`
//! and the dataset gradient is the mean over tuples, accumulated in index
//! order so results are bit-reproducible.

use crate::data::{CstTuple, Dataset};
use crate::model::{ReferenceModel, TinyLM};

#[derive(Debug, thiserror::Error)]
pub enum DpoError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
}

pub type DpoResult<T> = Result<T, DpoError>;

/// Objective hyperparameters. `beta` scales the log-ratio margin; it must be
/// positive.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.1 }
    }
}

impl DpoConfig {
    pub fn new(beta: f64) -> DpoResult<Self> {
        let cfg = Self { beta };
        cfg.check()?;
        Ok(cfg)
    }

    pub(crate) fn check(&self) -> DpoResult<()> {
        // NaN must fail too, hence the explicit second clause.
        if self.beta <= 0.0 || self.beta.is_nan() {
            return Err(DpoError::NonPositiveBeta(self.beta));
        }
        Ok(())
    }
}

/// The four sequence log-probabilities one tuple contributes. All fields are
/// log-probabilities, hence <= 0 when produced by a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbQuad {
    pub policy_chosen: f64,
    pub reference_chosen: f64,
    pub policy_rejected: f64,
    pub reference_rejected: f64,
}

impl LogProbQuad {
    /// Score one tuple under the policy and the frozen reference.
    pub fn compute(policy: &TinyLM, reference: &ReferenceModel, tuple: &CstTuple) -> Self {
        Self {
            policy_chosen: policy.seq_logprob(&tuple.system, &tuple.prompt, &tuple.chosen),
            reference_chosen: reference.seq_logprob(&tuple.system, &tuple.prompt, &tuple.chosen),
            policy_rejected: policy.seq_logprob(&tuple.system, &tuple.prompt, &tuple.rejected),
            reference_rejected: reference.seq_logprob(
                &tuple.system,
                &tuple.prompt,
                &tuple.rejected,
            ),
        }
    }

    /// The same quad with chosen and rejected roles swapped.
    pub fn swapped(&self) -> Self {
        Self {
            policy_chosen: self.policy_rejected,
            reference_chosen: self.reference_rejected,
            policy_rejected: self.policy_chosen,
            reference_rejected: self.reference_chosen,
        }
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(z)` via `softplus(-z)`; finite for |z| up to 1e3 and beyond.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    // softplus(u) with u = -z: ln(1 + e^u) = max(u, 0) + ln(1 + e^-|u|).
    let u = -z;
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Preference logit `z` of a quad: beta times the difference of the policy
/// and reference log-ratio margins.
pub fn preference_logit(quad: &LogProbQuad, cfg: &DpoConfig) -> f64 {
    cfg.beta
        * ((quad.policy_chosen - quad.reference_chosen)
            - (quad.policy_rejected - quad.reference_rejected))
}

/// Modelled probability that chosen beats rejected: `sigmoid(z)`, strictly
/// inside (0, 1) until f64 underflow.
pub fn preference_prob(quad: &LogProbQuad, cfg: &DpoConfig) -> f64 {
    sigmoid(preference_logit(quad, cfg))
}

/// Mean `-log sigmoid(z)` over the dataset. Errors on an empty dataset and
/// on a non-positive beta.
pub fn dpo_loss(
    policy: &TinyLM,
    reference: &ReferenceModel,
    dataset: &Dataset,
    cfg: &DpoConfig,
) -> DpoResult<f64> {
    cfg.check()?;
    if dataset.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    let mut total = 0.0;
    for tuple in dataset.iter() {
        let quad = LogProbQuad::compute(policy, reference, tuple);
        total += neg_log_sigmoid(preference_logit(&quad, cfg));
    }
    Ok(total / dataset.len() as f64)
}

/// Gradient of [`dpo_loss`] with respect to every policy parameter, in the
/// model's layout order. Returns the loss alongside the gradient since the
/// forward quantities are shared.
pub fn dpo_loss_grad(
    policy: &TinyLM,
    reference: &ReferenceModel,
    dataset: &Dataset,
    cfg: &DpoConfig,
) -> DpoResult<(f64, Vec<f64>)> {
    cfg.check()?;
    if dataset.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    let n = dataset.len() as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let mut chosen_grad = vec![0.0; policy.params().len()];
    let mut rejected_grad = vec![0.0; policy.params().len()];
    let mut total = 0.0;
    for tuple in dataset.iter() {
        chosen_grad.iter_mut().for_each(|g| *g = 0.0);
        rejected_grad.iter_mut().for_each(|g| *g = 0.0);
        let policy_chosen = policy.add_seq_logprob_grad(
            &tuple.system,
            &tuple.prompt,
            &tuple.chosen,
            1.0,
            &mut chosen_grad,
        );
        let policy_rejected = policy.add_seq_logprob_grad(
            &tuple.system,
            &tuple.prompt,
            &tuple.rejected,
            1.0,
            &mut rejected_grad,
        );
        let quad = LogProbQuad {
            policy_chosen,
            reference_chosen: reference.seq_logprob(&tuple.system, &tuple.prompt, &tuple.chosen),
            policy_rejected,
            reference_rejected: reference.seq_logprob(
                &tuple.system,
                &tuple.prompt,
                &tuple.rejected,
            ),
        };
        let z = preference_logit(&quad, cfg);
        total += neg_log_sigmoid(z);
        // d/dtheta -log sigmoid(z) = -(1 - sigmoid(z)) * dz/dtheta
        let weight = -(1.0 - sigmoid(z)) * cfg.beta / n;
        for ((g, c), r) in grad.iter_mut().zip(&chosen_grad).zip(&rejected_grad) {
            *g += weight * (c - r);
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{cst_augment, PreferencePair, SystemPromptPair};
    use crate::model::Vocabulary;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn quad(pc: f64, rc: f64, pr: f64, rr: f64) -> LogProbQuad {
        LogProbQuad {
            policy_chosen: pc,
            reference_chosen: rc,
            policy_rejected: pr,
            reference_rejected: rr,
        }
    }

    fn toy_dataset() -> (Dataset, SystemPromptPair) {
        let sp = SystemPromptPair::new("open", "guarded", "S0", "S1").unwrap();
        let pairs = vec![
            PreferencePair {
                prompt: "alpha beta".into(),
                original: "gamma delta".into(),
                revised: "epsilon zeta".into(),
                source_tag: "t".into(),
            },
            PreferencePair {
                prompt: "beta gamma".into(),
                original: "delta".into(),
                revised: "zeta epsilon".into(),
                source_tag: "t".into(),
            },
        ];
        (cst_augment(&pairs, &sp).unwrap(), sp)
    }

    fn toy_model(seed: u64) -> TinyLM {
        let corpus = [
            "open guarded alpha beta gamma delta epsilon zeta",
        ];
        let vocab = Vocabulary::build(&corpus).unwrap();
        TinyLM::new(vocab, 4, 3, 5, seed)
    }

    #[test]
    fn logit_matches_hand_computation() {
        // beta = 0.1, margins (−10 − −12) − (−15 − −11) = 2 − (−4) = 6.
        let q = quad(-10.0, -12.0, -15.0, -11.0);
        let cfg = DpoConfig { beta: 0.1 };
        let z = preference_logit(&q, &cfg);
        assert!((z - 0.6).abs() < 1e-12);
        assert!((preference_prob(&q, &cfg) - 0.6456563062).abs() < 1e-9);
        assert!((neg_log_sigmoid(z) - 0.4374879505).abs() < 1e-9);
    }

    #[test]
    fn prob_is_stable_and_monotone_at_extreme_logits() {
        let cfg = DpoConfig { beta: 1.0 };
        let big = quad(1e3, 0.0, 0.0, 0.0);
        let small = quad(-1e3, 0.0, 0.0, 0.0);
        let p_big = preference_prob(&big, &cfg);
        let p_small = preference_prob(&small, &cfg);
        assert!(p_big.is_finite() && p_small.is_finite());
        assert!(p_big > 0.999999);
        assert!(p_small < 1e-300);
        // The loss stays finite and linear-ish in the tail.
        assert!(neg_log_sigmoid(-1e3).is_finite());
        assert!((neg_log_sigmoid(-1e3) - 1e3).abs() < 1e-9);
        assert!(neg_log_sigmoid(1e3) >= 0.0);
    }

    #[test]
    fn swap_complements_probability() {
        let cfg = DpoConfig { beta: 0.3 };
        let q = quad(-2.0, -5.0, -9.0, -4.0);
        let p = preference_prob(&q, &cfg);
        let p_swapped = preference_prob(&q.swapped(), &cfg);
        assert!((p + p_swapped - 1.0).abs() < 1e-12);
        // And the swapped loss is -log(1 - p) of the original.
        let z = preference_logit(&q, &cfg);
        let swapped_loss = neg_log_sigmoid(preference_logit(&q.swapped(), &cfg));
        assert!((swapped_loss - (-(1.0 - sigmoid(z)).ln())).abs() < 1e-12);
    }

    #[test]
    // The second assert deliberately pins the library constant against an
    // independently written-down decimal value.
    #[allow(clippy::approx_constant)]
    fn loss_at_identity_is_ln_two() {
        let (dataset, _) = toy_dataset();
        let model = toy_model(11);
        let reference = model.snapshot();
        let loss = dpo_loss(&model, &reference, &dataset, &DpoConfig::default()).unwrap();
        assert!((loss - LN_2).abs() < 1e-9, "{loss}");
        assert!((LN_2 - 0.6931471805599453).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let model = toy_model(1);
        let reference = model.snapshot();
        let empty = Dataset::default();
        let err = dpo_loss(&model, &reference, &empty, &DpoConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
        let err = dpo_loss_grad(&model, &reference, &empty, &DpoConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn beta_must_be_positive() {
        assert!(DpoConfig::new(0.0).is_err());
        assert!(DpoConfig::new(-0.5).is_err());
        assert!((DpoConfig::new(0.1).unwrap().beta - 0.1).abs() < 1e-15);
        let (dataset, _) = toy_dataset();
        let model = toy_model(3);
        let reference = model.snapshot();
        let err = dpo_loss(&model, &reference, &dataset, &DpoConfig { beta: 0.0 }).unwrap_err();
        assert!(err.to_string().contains("beta"));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let (dataset, _) = toy_dataset();
        let model = toy_model(777);
        let reference = TinyLM::new(model.vocab().clone(), 4, 3, 5, 778).snapshot();
        let cfg = DpoConfig { beta: 0.25 };
        let (loss, grad) = dpo_loss_grad(&model, &reference, &dataset, &cfg).unwrap();
        assert!((loss - dpo_loss(&model, &reference, &dataset, &cfg).unwrap()).abs() < 1e-12);

        let eps = 1e-5;
        let mut probe = model.clone();
        for (i, &analytic) in grad.iter().enumerate() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + eps;
            let up = dpo_loss(&probe, &reference, &dataset, &cfg).unwrap();
            probe.params_mut()[i] = orig - eps;
            let down = dpo_loss(&probe, &reference, &dataset, &cfg).unwrap();
            probe.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-8 {
                assert!((analytic - numeric).abs() < 1e-8, "param {i}");
            } else {
                assert!(
                    (analytic - numeric).abs() / scale < 1e-4,
                    "param {i}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn mirrored_tuples_cancel_exactly_when_contexts_coincide() {
        // When s0 and s1 render to the same context (both out of vocabulary,
        // hence both UNK), the two augmented tuples are exact mirror images
        // at theta = ref, so their gradient contributions negate.
        let vocab = Vocabulary::build(&["alpha beta gamma delta"]).unwrap();
        let model = TinyLM::new(vocab, 4, 3, 5, 9);
        let reference = model.snapshot();
        let cfg = DpoConfig::default();
        let sp = SystemPromptPair::new("oov-one", "oov-two", "S0", "S1").unwrap();
        let pair = PreferencePair {
            prompt: "alpha".into(),
            original: "beta gamma".into(),
            revised: "delta".into(),
            source_tag: "t".into(),
        };
        let both = cst_augment(std::slice::from_ref(&pair), &sp).unwrap();
        let (_, grad) = dpo_loss_grad(&model, &reference, &both, &cfg).unwrap();
        let max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max < 1e-14, "max |grad| = {max}");

        // With distinct in-vocabulary system prompts the cancellation breaks.
        let vocab = Vocabulary::build(&["alpha beta gamma delta open guarded"]).unwrap();
        let model = TinyLM::new(vocab, 4, 3, 5, 9);
        let reference = model.snapshot();
        let sp = SystemPromptPair::new("open", "guarded", "S0", "S1").unwrap();
        let both = cst_augment(std::slice::from_ref(&pair), &sp).unwrap();
        let (_, grad) = dpo_loss_grad(&model, &reference, &both, &cfg).unwrap();
        let max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max > 1e-10, "expected a nonzero gradient, max |grad| = {max}");
    }

    #[test]
    fn descent_step_raises_preference_prob() {
        let (dataset, _) = toy_dataset();
        let single = Dataset::from_tuples(vec![dataset.iter().next().unwrap().clone()]);
        let model = toy_model(5);
        let reference = model.snapshot();
        let cfg = DpoConfig::default();
        let before = preference_prob(
            &LogProbQuad::compute(&model, &reference, single.iter().next().unwrap()),
            &cfg,
        );
        let (_, grad) = dpo_loss_grad(&model, &reference, &single, &cfg).unwrap();
        let mut stepped = model.clone();
        for (p, g) in stepped.params_mut().iter_mut().zip(&grad) {
            *p -= 1e-3 * g;
        }
        let after = preference_prob(
            &LogProbQuad::compute(&stepped, &reference, single.iter().next().unwrap()),
            &cfg,
        );
        assert!(after > before, "{after} <= {before}");
    }
}
