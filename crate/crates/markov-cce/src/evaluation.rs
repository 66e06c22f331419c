//! Exact evaluation oracle: state values, best responses, and CCE regret.
//!
//! Everything here is computed by full enumeration (backward induction over
//! layers), so the results are exact up to floating-point rounding. The
//! learner never uses this module; tests and the experiment summaries do.

use std::sync::Arc;

use crate::game_core::{
    exact_q_kernel, opponent_dists_at_layer, LinearMarkovGame, MarkovJointPolicy,
};

/// Exact per-agent state values of a fixed joint policy.
///
/// `values[agent][global_state]` is `V^agent_π(s)` for decision states;
/// layer `H+1` has value 0 by definition.
#[derive(Clone, Debug)]
pub struct ValueTable {
    pub values: Vec<Vec<f64>>,
}

impl ValueTable {
    /// Value at the initial state for `agent`.
    pub fn at_initial(&self, game: &LinearMarkovGame, agent: usize) -> f64 {
        self.values[agent][game.global_index(1, game.initial_state())]
    }
}

/// Exact backward-induction values `V^i_π` for every agent and state.
pub fn exact_value(game: &LinearMarkovGame, policy: &MarkovJointPolicy) -> ValueTable {
    let m = game.num_agents();
    let h_max = game.horizon();
    let mut values = vec![vec![0.0; game.num_decision_states()]; m];
    // Values at the layer below the one being processed.
    let mut below: Vec<Vec<f64>> = vec![vec![0.0; game.states_per_layer()[h_max]]; m];
    for h in (1..=h_max).rev() {
        let mut current = vec![vec![0.0; game.layer_size(h)]; m];
        for s in 0..game.layer_size(h) {
            let gs = game.global_index(h, s);
            for joint in 0..game.num_joint_actions() {
                let p_joint = policy.joint_prob(game, gs, joint);
                if p_joint == 0.0 {
                    continue;
                }
                let row = game.transition_row(h, s, joint);
                for agent in 0..m {
                    let mut v = game.loss(agent, h, s, joint);
                    for (next, &p_next) in row.iter().enumerate() {
                        v += p_next * below[agent][next];
                    }
                    current[agent][s] += p_joint * v;
                }
            }
            for agent in 0..m {
                values[agent][gs] = current[agent][s];
            }
        }
        below = current;
    }
    ValueTable { values }
}

/// A best response of one agent against fixed opponents: the greedy Markov
/// policy (per-state action) and its exact values.
#[derive(Clone, Debug)]
pub struct BestResponse {
    /// Chosen action per decision state (global index); ties break to the
    /// lowest action index.
    pub actions: Vec<usize>,
    /// `V^i_{†,π^{-i}}(s)` per decision state (global index).
    pub values: Vec<f64>,
}

impl BestResponse {
    /// Best-response value at the initial state.
    pub fn at_initial(&self, game: &LinearMarkovGame) -> f64 {
        self.values[game.global_index(1, game.initial_state())]
    }
}

/// Exact best response of `agent` against the opponent marginals of
/// `policy`, by backward dynamic programming.
///
/// When `policy` has correlated per-state distributions, the opponents are
/// marginalized over the acting agent's action (the best responder cannot
/// condition on a correlation device it does not observe).
pub fn best_response(
    game: &LinearMarkovGame,
    agent: usize,
    policy: &MarkovJointPolicy,
) -> BestResponse {
    let h_max = game.horizon();
    let mut actions = vec![0usize; game.num_decision_states()];
    let mut values = vec![0.0; game.num_decision_states()];
    let mut below: Vec<f64> = vec![0.0; game.states_per_layer()[h_max]];
    for h in (1..=h_max).rev() {
        let opp = opponent_dists_at_layer(game, h, agent, policy);
        let q = exact_q_kernel(game, h, agent, &opp, &below);
        let mut current = vec![0.0; game.layer_size(h)];
        for s in 0..game.layer_size(h) {
            let (best_a, best_v) = q[s]
                .iter()
                .enumerate()
                .fold((0usize, f64::INFINITY), |(ba, bv), (a, &v)| {
                    if v < bv { (a, v) } else { (ba, bv) }
                });
            let gs = game.global_index(h, s);
            actions[gs] = best_a;
            values[gs] = best_v;
            current[s] = best_v;
        }
        below = current;
    }
    BestResponse { actions, values }
}

/// Per-agent CCE regret of a weighted family of policies: the weighted
/// average over the family of
/// `V^i_π(s₁) − V^i_{†,π^{-i}}(s₁)`.
///
/// Each per-policy gap is nonnegative (best response minimizes); the
/// weighted form serves both plain lists (uniform weights) and mixture
/// policies (component weights).
pub fn cce_regret_weighted(
    game: &LinearMarkovGame,
    weighted: &[(f64, &MarkovJointPolicy)],
) -> Vec<f64> {
    assert!(!weighted.is_empty(), "need at least one policy");
    let total_w: f64 = weighted.iter().map(|(w, _)| *w).sum();
    let mut regret = vec![0.0; game.num_agents()];
    for (w, policy) in weighted {
        let value = exact_value(game, policy);
        for (agent, slot) in regret.iter_mut().enumerate() {
            let br = best_response(game, agent, policy);
            let gap = value.at_initial(game, agent) - br.at_initial(game);
            debug_assert!(gap >= -1e-9, "best response must not exceed the policy value");
            *slot += w / total_w * gap;
        }
    }
    regret
}

/// Per-agent CCE regret of a list of policies, uniformly averaged.
pub fn cce_regret(game: &LinearMarkovGame, policies: &[Arc<MarkovJointPolicy>]) -> Vec<f64> {
    let weighted: Vec<(f64, &MarkovJointPolicy)> =
        policies.iter().map(|p| (1.0, p.as_ref())).collect();
    cce_regret_weighted(game, &weighted)
}

/// Exact state-occupancy distribution of `policy` at layer `h` (forward
/// propagation from the initial state).
pub fn state_occupancy(game: &LinearMarkovGame, policy: &MarkovJointPolicy, h: usize) -> Vec<f64> {
    let mut occ = vec![0.0; game.layer_size(1)];
    occ[game.initial_state()] = 1.0;
    for layer in 1..h {
        let mut next = vec![0.0; game.layer_size(layer + 1)];
        for s in 0..game.layer_size(layer) {
            if occ[s] == 0.0 {
                continue;
            }
            let gs = game.global_index(layer, s);
            for joint in 0..game.num_joint_actions() {
                let p_joint = policy.joint_prob(game, gs, joint);
                if p_joint == 0.0 {
                    continue;
                }
                for (t, &p_next) in game.transition_row(layer, s, joint).iter().enumerate() {
                    next[t] += occ[s] * p_joint * p_next;
                }
            }
        }
        occ = next;
    }
    occ
}
