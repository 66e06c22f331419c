//! Optimistic value estimation for one layer via ridge regression.
//!
//! For each agent `i`, `K` trajectories roll in with the exploration
//! mixture `π̄` through layer `h−1`; at layer `h` the agent keeps playing
//! `π̄` while its opponents play the freshly learned layer policy `π̃`. The
//! observed `(φ(s, a^i), ℓ^i + V̄(s'))` pairs feed a ridge regression
//!
//! `θ̂ = argmin_θ (1/K)·Σ_k (⟨φ_k, θ⟩ − ℓ̂_k)² + λ‖θ‖²`,
//!
//! and the layer value is the optimistically shifted, clipped aggregate
//! `V̄(s) = Σ_a π̃(a|s)·min{⟨φ(s,a), θ̂⟩ + (3/2)·Gap(s), H−h+1}`,
//! floored at 0.

use nalgebra::{DMatrix, DVector};

use crate::cce_approx::{GapTable, LayerPolicy};
use crate::game_core::{
    sample_trajectory, AgentBehavior, CompositeRollin, LinearMarkovGame, MixturePolicy,
};
use crate::rng::StreamFactory;

/// Stream tag for the per-(episode, agent) rollouts.
const STREAM_ROLLOUT: u64 = 2;

/// Per-agent optimistic values on one layer:
/// `values[agent][state_in_layer] ∈ [0, H−h+1]`.
#[derive(Clone, Debug)]
pub struct ValueEstimate {
    pub values: Vec<Vec<f64>>,
}

/// Ridge regression `θ̂ = (Σφφᵀ/K + λI)⁻¹·(1/K)Σφ·ℓ̂`.
///
/// `λ > 0` guarantees invertibility; solved by Cholesky factorization.
pub fn ridge_theta(
    feature_samples: &[DVector<f64>],
    targets: &[f64],
    lambda: f64,
) -> DVector<f64> {
    assert!(lambda > 0.0, "lambda must be positive");
    assert_eq!(feature_samples.len(), targets.len());
    let d = feature_samples.first().map_or(0, |f| f.len());
    let k = feature_samples.len() as f64;
    let mut gram = DMatrix::<f64>::identity(d, d) * lambda;
    let mut rhs = DVector::<f64>::zeros(d);
    for (phi, &y) in feature_samples.iter().zip(targets) {
        gram += phi * phi.transpose() / k;
        rhs += phi * (y / k);
    }
    gram.cholesky()
        .expect("ridge system is positive definite for lambda > 0")
        .solve(&rhs)
}

/// Estimate the layer-`h` optimistic values for every agent.
///
/// `v_next[agent][state_in_layer_h_plus_1]` is the continuation value
/// (zeros at the terminal layer); `gap` is the matching gap table from the
/// same epoch's layer-`h` learning call. Deterministic given `streams`.
#[allow(clippy::too_many_arguments)]
pub fn run(
    game: &LinearMarkovGame,
    h: usize,
    pi_bar: &MixturePolicy,
    pi_tilde: &LayerPolicy,
    v_next: &[Vec<f64>],
    gap: &GapTable,
    k: usize,
    lambda: f64,
    streams: &StreamFactory,
) -> ValueEstimate {
    let m = game.num_agents();
    let n_states = game.layer_size(h);
    let clip = (game.horizon() - h + 1) as f64;
    let mut values = Vec::with_capacity(m);
    for agent in 0..m {
        let mut feats = Vec::with_capacity(k);
        let mut targets = Vec::with_capacity(k);
        for episode in 0..k {
            let mut rng = streams.stream(&[STREAM_ROLLOUT, episode as u64, agent as u64]);
            let component = pi_bar.sample_component(&mut rng).clone();
            let overrides: Vec<AgentBehavior<'_>> = (0..m)
                .map(|j| {
                    if j == agent {
                        AgentBehavior::Base
                    } else {
                        AgentBehavior::Table(&pi_tilde.dists[j])
                    }
                })
                .collect();
            let rollin = CompositeRollin {
                base: &component,
                override_layer: Some(h),
                overrides,
                stop_after_layer: Some(h),
            };
            let traj = sample_trajectory(game, &rollin, &mut rng);
            let step = traj.at_layer(h).expect("layered game always reaches layer h");
            feats.push(game.feature(agent, h, step.state, step.joint[agent]).clone());
            targets.push(step.losses[agent] + v_next[agent][step.next_state]);
        }
        let theta = ridge_theta(&feats, &targets, lambda);
        let mut per_state = Vec::with_capacity(n_states);
        for s in 0..n_states {
            let g = gap.entries[agent][s].total;
            let mut v = 0.0;
            for (a, &p) in pi_tilde.dists[agent][s].iter().enumerate() {
                let q_bar = (game.feature(agent, h, s, a).dot(&theta) + 1.5 * g).min(clip);
                v += p * q_bar;
            }
            // Flooring at 0 keeps the value-range invariant; the optimistic
            // shift means negative aggregates only occur transiently.
            per_state.push(v.clamp(0.0, clip));
        }
        values.push(per_state);
    }
    ValueEstimate { values }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_targets_give_zero_theta() {
        let feats = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.5, 0.5])];
        let theta = ridge_theta(&feats, &[0.0, 0.0], 0.3);
        assert!(theta.norm() < 1e-14);
    }

    #[test]
    fn single_sample_closed_form() {
        // One sample φ = e₁, target 1, λ = 1: θ̂ = e₁/(1+1).
        let feats = vec![DVector::from_vec(vec![1.0, 0.0])];
        let theta = ridge_theta(&feats, &[1.0], 1.0);
        assert!((theta[0] - 0.5).abs() < 1e-12);
        assert!(theta[1].abs() < 1e-12);
    }
}
