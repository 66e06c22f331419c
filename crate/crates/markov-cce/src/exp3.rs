//! Per-state exponential-weights learner over one agent's action set.
//!
//! The learner receives full loss vectors (estimated action values minus
//! exploration bonuses) and performs the multiplicative-weights update
//! `x_{t+1,a} ∝ x_{t,a}·exp(−η c_{t,a})`. Because the loss estimates can
//! reach magnitudes of order the episode count, weights are kept in
//! log-space with max-subtraction renormalization.
//!
//! The update admits a deterministic regret certificate: for any comparator
//! distribution `y`,
//! `Σ_t ⟨x_t − y, c_t⟩ ≤ log A/η + η Σ_t Σ_a x_{t,a} c_{t,a}²`,
//! provided every loss satisfies `η c_{t,a} ≥ −1`. That precondition is
//! enforced as a hard error: a violation signals a bonus or estimator bug
//! upstream, not a recoverable condition.

use thiserror::Error;

/// Slack allowed when checking the `η·c ≥ −1` precondition.
const PRECONDITION_SLACK: f64 = 1e-9;

/// Errors from the exponential-weights learner.
#[derive(Debug, Error)]
pub enum Exp3Error {
    #[error(
        "loss precondition violated at action {action}: eta*loss = {value} < -1 \
         (eta={eta}, loss={loss}); bonus or estimator upstream is misconfigured"
    )]
    PreconditionViolated { action: usize, eta: f64, loss: f64, value: f64 },
    #[error("loss vector has length {got}, learner has {expected} actions")]
    WrongArity { expected: usize, got: usize },
}

/// Exponential-weights state for one (agent, state) pair.
#[derive(Clone, Debug)]
pub struct Exp3State {
    /// Unnormalized log-weights, kept max-subtracted for stability.
    log_weights: Vec<f64>,
    /// Learning rate η > 0, fixed for the lifetime of the state.
    eta: f64,
    /// Number of updates applied so far.
    round: usize,
}

impl Exp3State {
    /// Uniform initial state over `action_count` actions.
    pub fn new(action_count: usize, eta: f64) -> Self {
        assert!(action_count >= 1, "need at least one action");
        assert!(eta > 0.0, "eta must be positive");
        Self { log_weights: vec![0.0; action_count], eta, round: 0 }
    }

    /// Number of actions.
    pub fn action_count(&self) -> usize {
        self.log_weights.len()
    }

    /// Learning rate.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Updates applied so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Current normalized action distribution.
    pub fn weights(&self) -> Vec<f64> {
        let max = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = self.log_weights.iter().map(|&w| (w - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        unnorm.into_iter().map(|w| w / total).collect()
    }

    /// Apply one multiplicative-weights update with the given loss vector.
    ///
    /// Fails hard when any component violates `η·c ≥ −1` (beyond a 1e-9
    /// slack) — the regret certificate does not hold past that point.
    pub fn update(&mut self, losses: &[f64]) -> Result<(), Exp3Error> {
        if losses.len() != self.log_weights.len() {
            return Err(Exp3Error::WrongArity {
                expected: self.log_weights.len(),
                got: losses.len(),
            });
        }
        for (action, &loss) in losses.iter().enumerate() {
            let value = self.eta * loss;
            if value < -1.0 - PRECONDITION_SLACK {
                return Err(Exp3Error::PreconditionViolated {
                    action,
                    eta: self.eta,
                    loss,
                    value,
                });
            }
        }
        for (w, &loss) in self.log_weights.iter_mut().zip(losses) {
            *w -= self.eta * loss;
        }
        let max = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for w in &mut self.log_weights {
            *w -= max;
        }
        self.round += 1;
        Ok(())
    }
}

/// Replay a loss history from the uniform start and evaluate the regret
/// certificate against comparator distribution `y`.
///
/// Returns `(lhs, rhs)` where `lhs = Σ_t ⟨x_t − y, c_t⟩` and
/// `rhs = log A/η + η Σ_t Σ_a x_{t,a} c_{t,a}²`; the caller asserts
/// `lhs ≤ rhs`.
pub fn regret_certificate(
    action_count: usize,
    eta: f64,
    loss_history: &[Vec<f64>],
    y: &[f64],
) -> Result<(f64, f64), Exp3Error> {
    let mut state = Exp3State::new(action_count, eta);
    let mut lhs = 0.0;
    let mut quad = 0.0;
    for losses in loss_history {
        let x = state.weights();
        for a in 0..action_count {
            lhs += (x[a] - y[a]) * losses[a];
            quad += x[a] * losses[a] * losses[a];
        }
        state.update(losses)?;
    }
    let rhs = (action_count as f64).ln() / eta + eta * quad;
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_state_is_uniform() {
        let s = Exp3State::new(4, 0.5);
        assert_eq!(s.weights(), vec![0.25; 4]);
        let s1 = Exp3State::new(1, 0.5);
        assert_eq!(s1.weights(), vec![1.0]);
    }

    #[test]
    fn zero_losses_leave_state_unchanged() {
        let mut s = Exp3State::new(3, 0.7);
        s.update(&[0.0, 0.0, 0.0]).unwrap();
        let w = s.weights();
        for &p in &w {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_action_update_matches_closed_form() {
        // Uniform start, η = 0.5, losses (1, 0):
        // weights become (e^{-1/2}, 1) / (1 + e^{-1/2}).
        let mut s = Exp3State::new(2, 0.5);
        s.update(&[1.0, 0.0]).unwrap();
        let w = s.weights();
        let z = 1.0 + (-0.5f64).exp();
        assert!((w[0] - (-0.5f64).exp() / z).abs() < 1e-15);
        assert!((w[1] - 1.0 / z).abs() < 1e-15);
        assert!((w[0] - 0.37754).abs() < 1e-5);
        assert!((w[1] - 0.62246).abs() < 1e-5);
    }

    #[test]
    fn update_is_shift_invariant() {
        let mut a = Exp3State::new(3, 0.3);
        let mut b = Exp3State::new(3, 0.3);
        a.update(&[0.2, 0.9, 0.4]).unwrap();
        b.update(&[1.2, 1.9, 1.4]).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn precondition_violation_is_a_hard_error() {
        let mut s = Exp3State::new(2, 0.5);
        let err = s.update(&[-3.0, 0.0]).unwrap_err();
        match err {
            Exp3Error::PreconditionViolated { action, .. } => assert_eq!(action, 0),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn certificate_holds_for_zero_losses() {
        let history = vec![vec![0.0, 0.0]; 10];
        let (lhs, rhs) = regret_certificate(2, 0.5, &history, &[1.0, 0.0]).unwrap();
        assert_eq!(lhs, 0.0);
        assert!((rhs - 2.0f64.ln() / 0.5).abs() < 1e-12);
    }
}
