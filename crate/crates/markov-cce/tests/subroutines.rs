//! Subroutine-level tests: the one-layer equilibrium-learning call and the
//! optimistic value regression, checked against closed-form oracles where
//! one exists.

use markov_cce::cce_approx::{self, HyperParams, ScheduleConstants};
use markov_cce::config::{Embedding, GeneratorSpec};
use markov_cce::game_core::{
    exact_q_kernel, opponent_dists_at_layer, LinearMarkovGame, MarkovJointPolicy, MixturePolicy,
};
use markov_cce::rng::StreamFactory;
use markov_cce::v_approx::{self, ridge_theta};
use nalgebra::DVector;
use std::sync::Arc;

fn reference_game() -> LinearMarkovGame {
    markov_cce::config::generate_game(&GeneratorSpec {
        seed: 20_240_601,
        m: 2,
        h: 2,
        states_per_layer: 2,
        actions: vec![2, 2],
        d: None,
        embedding: Embedding::OneHot,
    })
    .expect("generates")
    .0
}

fn uniform_mixture(game: &LinearMarkovGame) -> MixturePolicy {
    MixturePolicy::single(Arc::new(MarkovJointPolicy::uniform(game)))
}

fn constants() -> ScheduleConstants {
    ScheduleConstants {
        c_gamma: 0.01,
        gamma_cap: 0.15,
        gamma_floor: 0.0,
        eta_mult: 4.0,
        beta1_mult: 0.002,
        beta2_mult: 0.002,
        ..ScheduleConstants::default()
    }
}

/// Closed-form check for `d = 1`: ridge regression reduces to the scalar
/// formula `θ = (Σφy/K) / (Σφ²/K + λ)`.
#[test]
fn ridge_matches_scalar_closed_form() {
    let feats: Vec<DVector<f64>> =
        [0.2, 0.7, -0.4, 1.0].iter().map(|&x| DVector::from_vec(vec![x])).collect();
    let targets = [0.1, 0.9, -0.3, 0.8];
    let lambda = 0.05;
    let k = feats.len() as f64;
    let num: f64 = feats.iter().zip(&targets).map(|(f, &y)| f[0] * y).sum::<f64>() / k;
    let den: f64 = feats.iter().map(|f| f[0] * f[0]).sum::<f64>() / k + lambda;
    let theta = ridge_theta(&feats, &targets, lambda);
    assert!((theta[0] - num / den).abs() < 1e-12);
}

/// With vanishing regularization and exactly linear targets, ridge
/// recovers the generating coefficients.
#[test]
fn ridge_recovers_exact_linear_fit() {
    let truth = DVector::from_vec(vec![0.3, -0.6, 0.2]);
    let feats: Vec<DVector<f64>> = vec![
        DVector::from_vec(vec![1.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.0, 1.0, 0.0]),
        DVector::from_vec(vec![0.0, 0.0, 1.0]),
        DVector::from_vec(vec![0.5, 0.5, 0.0]),
        DVector::from_vec(vec![0.2, 0.3, 0.5]),
    ];
    let targets: Vec<f64> = feats.iter().map(|f| f.dot(&truth)).collect();
    let theta = ridge_theta(&feats, &targets, 1e-10);
    assert!((theta - truth).amax() < 1e-6);
}

#[test]
fn learning_call_outputs_are_well_formed() {
    let game = reference_game();
    let k = 256;
    let params = HyperParams::from_schedule(game.feature_dim(), game.horizon(), k, 0.02, &constants());
    let pi_bar = uniform_mixture(&game);
    let v_next = vec![vec![0.0; game.layer_size(3)]; game.num_agents()];
    let out = cce_approx::run(&game, 2, &pi_bar, &v_next, k, &params, &StreamFactory::new(1), true)
        .expect("subroutine runs");

    for agent in 0..game.num_agents() {
        for s in 0..game.layer_size(2) {
            let dist = &out.policy.dists[agent][s];
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "averaged policy is a distribution");
            assert!(dist.iter().all(|&p| p >= 0.0));
            let entry = &out.gap.entries[agent][s];
            assert!(entry.total.is_finite() && entry.total > 0.0, "gap is positive");
            // Components are stored before division by the episode budget;
            // the total is their sum divided by K.
            let rebuilt =
                (entry.reg_term + entry.bias1 + entry.bias2_const + entry.bonus1) / k as f64;
            assert!((entry.total - rebuilt).abs() < 1e-9);
        }
    }
    let trace = out.trace.expect("trace was requested");
    assert_eq!(trace.policies.len(), k, "one snapshot per episode");
    for snap in &trace.policies {
        for agent_tab in snap {
            for dist in agent_tab {
                let sum: f64 = dist.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "every played policy is a distribution");
            }
        }
    }
}

/// At the terminal layer the continuation is zero, so each learner faces a
/// bandit over exact expected losses against (roughly) uniform opponents.
/// Wherever that stage game has a clearly dominant action under uniform
/// opponents, the averaged policy must favor it.
#[test]
fn terminal_layer_learning_favors_dominant_actions() {
    let game = reference_game();
    let k = 2048;
    let params = HyperParams::from_schedule(game.feature_dim(), game.horizon(), k, 0.02, &constants());
    let pi_bar = uniform_mixture(&game);
    let uniform = MarkovJointPolicy::uniform(&game);
    let v_next = vec![vec![0.0; game.layer_size(3)]; game.num_agents()];
    let out = cce_approx::run(&game, 2, &pi_bar, &v_next, k, &params, &StreamFactory::new(2), false)
        .expect("subroutine runs");

    for agent in 0..game.num_agents() {
        let opp = opponent_dists_at_layer(&game, 2, agent, &uniform);
        let zeros = vec![0.0; game.layer_size(3)];
        let q = exact_q_kernel(&game, 2, agent, &opp, &zeros);
        for s in 0..game.layer_size(2) {
            let (best, worst) = (q[s][0].min(q[s][1]), q[s][0].max(q[s][1]));
            if worst - best < 0.1 {
                continue; // no clearly dominant action at this state
            }
            let best_a = if q[s][0] < q[s][1] { 0 } else { 1 };
            assert!(
                out.policy.dists[agent][s][best_a] > 0.5,
                "agent {agent} state {s}: expected weight on action {best_a}, got {:?} (q {:?})",
                out.policy.dists[agent][s],
                q[s]
            );
        }
    }
}

#[test]
fn value_estimates_respect_clip_range() {
    let game = reference_game();
    let k = 256;
    let constants = constants();
    let params = HyperParams::from_schedule(game.feature_dim(), game.horizon(), k, 0.02, &constants);
    let lambda = HyperParams::lambda_from_schedule(game.feature_dim(), k, 0.02, &constants);
    let pi_bar = uniform_mixture(&game);
    let streams = StreamFactory::new(3);
    for h in (1..=game.horizon()).rev() {
        let v_next = vec![vec![0.0; game.layer_size(h + 1)]; game.num_agents()];
        let out = cce_approx::run(&game, h, &pi_bar, &v_next, k, &params, &streams, false)
            .expect("subroutine runs");
        let est = v_approx::run(
            &game, h, &pi_bar, &out.policy, &v_next, &out.gap, k, lambda, &streams,
        );
        let clip = (game.horizon() - h + 1) as f64;
        for per_agent in &est.values {
            for &v in per_agent {
                assert!((0.0..=clip).contains(&v), "value {v} outside [0, {clip}] at layer {h}");
            }
        }
    }
}
