//! Layered Markov games with per-agent linear features, policies, and
//! trajectory sampling.
//!
//! A game has `m` agents, horizon `H`, and a state space layered as
//! `S_1, …, S_{H+1}`: transitions only flow from layer `h` to layer `h+1`,
//! and layer `H+1` is terminal. Each agent `i` owns a finite action set
//! `A^i`; losses `ℓ^i(s, a) ∈ [0,1]` are deterministic functions of the
//! state and the joint action, and a known feature map `φ(s, a^i) ∈ R^d`
//! with `‖φ‖₂ ≤ 1` renders every agent's Q-function linear for arbitrary
//! opponent play.
//!
//! Games are stored tabularly (explicit transition and loss tables); the
//! linear structure is guaranteed by construction for the one-hot embedding
//! and for generator-produced low-rank games.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::rng::sample_discrete;

/// Tolerance for probability normalization checks.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Errors from game construction and policy plumbing.
#[derive(Debug, Error)]
pub enum GameError {
    #[error("feature dimension {d} too small for layer {layer}: needs {needed}")]
    DimensionOverflow { d: usize, layer: usize, needed: usize },
    #[error("invalid game spec: {0}")]
    InvalidSpec(String),
    #[error("policy has wrong dimensions: {0}")]
    InvalidPolicy(String),
}

/// Identifies a state as (layer, index within layer); layers are 1-based
/// and layer `H+1` is terminal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateId {
    pub layer: usize,
    pub index: usize,
}

/// A layered Markov game with per-agent linear features.
///
/// Decision states (layers `1..=H`) are addressed either by `StateId` or by
/// a dense global index that enumerates them layer by layer; all tables are
/// indexed by the global index. Transition rows at layer `h` range over the
/// states of layer `h+1` only.
#[derive(Clone, Debug)]
pub struct LinearMarkovGame {
    m: usize,
    horizon: usize,
    d: usize,
    actions: Vec<usize>,
    states_per_layer: Vec<usize>,
    /// `features[agent][global_state][action]` → φ ∈ R^d.
    features: Vec<Vec<Vec<DVector<f64>>>>,
    /// `transitions[global_state][joint_action][next_index]`.
    transitions: Vec<Vec<Vec<f64>>>,
    /// `losses[agent][global_state][joint_action]`.
    losses: Vec<Vec<Vec<f64>>>,
    /// Index of the initial state within layer 1.
    initial_state: usize,
    /// Global index of the first state of each decision layer (1-based
    /// layer → offset), plus a trailing total count.
    layer_offsets: Vec<usize>,
}

impl LinearMarkovGame {
    /// Assemble a game from raw tables, checking only dimensional sanity.
    /// Numeric invariants are reported by [`validate_game`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        m: usize,
        horizon: usize,
        d: usize,
        actions: Vec<usize>,
        states_per_layer: Vec<usize>,
        features: Vec<Vec<Vec<DVector<f64>>>>,
        transitions: Vec<Vec<Vec<f64>>>,
        losses: Vec<Vec<Vec<f64>>>,
        initial_state: usize,
    ) -> Result<Self, GameError> {
        if states_per_layer.len() != horizon + 1 {
            return Err(GameError::InvalidSpec(format!(
                "expected {} layers, got {}",
                horizon + 1,
                states_per_layer.len()
            )));
        }
        if actions.len() != m {
            return Err(GameError::InvalidSpec("actions list must have one entry per agent".into()));
        }
        if initial_state >= states_per_layer[0] {
            return Err(GameError::InvalidSpec("initial state outside layer 1".into()));
        }
        let mut layer_offsets = vec![0usize; horizon + 1];
        for h in 1..=horizon {
            layer_offsets[h] = layer_offsets[h - 1] + states_per_layer[h - 1];
        }
        let num_decision: usize = states_per_layer[..horizon].iter().sum();
        let num_joint: usize = actions.iter().product();
        if transitions.len() != num_decision || losses.iter().any(|l| l.len() != num_decision) {
            return Err(GameError::InvalidSpec("table sizes do not match state count".into()));
        }
        if features.len() != m || losses.len() != m {
            return Err(GameError::InvalidSpec("per-agent tables must have m entries".into()));
        }
        for agent in 0..m {
            for s in 0..num_decision {
                if features[agent][s].len() != actions[agent] {
                    return Err(GameError::InvalidSpec(format!(
                        "agent {agent} state {s}: feature table has wrong action count"
                    )));
                }
                if losses[agent][s].len() != num_joint {
                    return Err(GameError::InvalidSpec(format!(
                        "agent {agent} state {s}: loss row has wrong joint-action count"
                    )));
                }
            }
        }
        Ok(Self {
            m,
            horizon,
            d,
            actions,
            states_per_layer,
            features,
            transitions,
            losses,
            initial_state,
            layer_offsets,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    /// Per-agent action counts.
    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    /// State counts per layer (layers `1..=H+1`).
    pub fn states_per_layer(&self) -> &[usize] {
        &self.states_per_layer
    }

    /// Number of states in layer `h` (1-based).
    pub fn layer_size(&self, h: usize) -> usize {
        self.states_per_layer[h - 1]
    }

    /// Index of the initial state within layer 1.
    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    /// Total number of decision states (layers `1..=H`).
    pub fn num_decision_states(&self) -> usize {
        self.states_per_layer[..self.horizon].iter().sum()
    }

    /// Global index of state `index` in decision layer `h`.
    pub fn global_index(&self, h: usize, index: usize) -> usize {
        debug_assert!(h >= 1 && h <= self.horizon && index < self.layer_size(h));
        self.layer_offsets[h - 1] + index
    }

    /// Number of joint actions `Π_i |A^i|`.
    pub fn num_joint_actions(&self) -> usize {
        self.actions.iter().product()
    }

    /// Row-major joint action index with agent 0 most significant.
    pub fn joint_index(&self, joint: &[usize]) -> usize {
        debug_assert_eq!(joint.len(), self.m);
        let mut idx = 0;
        for (i, &a) in joint.iter().enumerate() {
            debug_assert!(a < self.actions[i]);
            idx = idx * self.actions[i] + a;
        }
        idx
    }

    /// Inverse of [`joint_index`](Self::joint_index).
    pub fn joint_from_index(&self, mut idx: usize) -> Vec<usize> {
        let mut joint = vec![0usize; self.m];
        for i in (0..self.m).rev() {
            joint[i] = idx % self.actions[i];
            idx /= self.actions[i];
        }
        joint
    }

    /// Number of opponent joint actions `Π_{j≠i} |A^j|`.
    pub fn num_opponent_actions(&self, agent: usize) -> usize {
        self.actions
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != agent)
            .map(|(_, &a)| a)
            .product()
    }

    /// Combine agent `agent`'s action with an opponent combination index
    /// (row-major over agents `j ≠ agent` in increasing order) into a full
    /// joint action index.
    pub fn compose_joint(&self, agent: usize, action: usize, mut opp_idx: usize) -> usize {
        let mut joint = vec![0usize; self.m];
        joint[agent] = action;
        for j in (0..self.m).rev() {
            if j == agent {
                continue;
            }
            joint[j] = opp_idx % self.actions[j];
            opp_idx /= self.actions[j];
        }
        self.joint_index(&joint)
    }

    /// Feature vector φ(s, a) for `agent` at state `(h, index)`.
    pub fn feature(&self, agent: usize, h: usize, index: usize, action: usize) -> &DVector<f64> {
        &self.features[agent][self.global_index(h, index)][action]
    }

    /// Transition row `P(· | s, joint)`, over states of layer `h+1`.
    pub fn transition_row(&self, h: usize, index: usize, joint: usize) -> &[f64] {
        &self.transitions[self.global_index(h, index)][joint]
    }

    /// Loss `ℓ^agent(s, joint)`.
    pub fn loss(&self, agent: usize, h: usize, index: usize, joint: usize) -> f64 {
        self.losses[agent][self.global_index(h, index)][joint]
    }
}

/// One-hot tabular feature embedding: φ(s, a) is the indicator of
/// `(index of s within its layer, a)`, so distinct pairs within a layer are
/// orthonormal. Fails if `d` cannot hold the largest layer block.
pub fn one_hot_tabular_embedding(
    states_per_layer: &[usize],
    actions: &[usize],
    d: usize,
) -> Result<Vec<Vec<Vec<DVector<f64>>>>, GameError> {
    let horizon = states_per_layer.len() - 1;
    let mut features = vec![Vec::new(); actions.len()];
    for (agent, &a_count) in actions.iter().enumerate() {
        for h in 1..=horizon {
            let n_states = states_per_layer[h - 1];
            let needed = n_states * a_count;
            if needed > d {
                return Err(GameError::DimensionOverflow { d, layer: h, needed });
            }
            for s in 0..n_states {
                let mut per_action = Vec::with_capacity(a_count);
                for a in 0..a_count {
                    let mut v = DVector::zeros(d);
                    v[s * a_count + a] = 1.0;
                    per_action.push(v);
                }
                features[agent].push(per_action);
            }
        }
    }
    Ok(features)
}

/// Check every game invariant and return a human-readable list of
/// violations (empty iff the game is well-formed). Reports, never fails.
pub fn validate_game(game: &LinearMarkovGame) -> Vec<String> {
    let mut violations = Vec::new();
    let num_joint = game.num_joint_actions();
    for h in 1..=game.horizon {
        for s in 0..game.layer_size(h) {
            for joint in 0..num_joint {
                let row = game.transition_row(h, s, joint);
                if row.len() != game.states_per_layer[h] {
                    violations.push(format!(
                        "transition row (layer {h}, state {s}, joint {joint}) targets {} states, \
                         layer {} has {}",
                        row.len(),
                        h + 1,
                        game.states_per_layer[h]
                    ));
                    continue;
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOLERANCE {
                    violations.push(format!(
                        "transition row (layer {h}, state {s}, joint {joint}) sums to {sum}"
                    ));
                }
                if row.iter().any(|&p| p < 0.0) {
                    violations.push(format!(
                        "transition row (layer {h}, state {s}, joint {joint}) has negative entry"
                    ));
                }
                for agent in 0..game.m {
                    let l = game.loss(agent, h, s, joint);
                    if !(0.0..=1.0).contains(&l) {
                        violations.push(format!(
                            "loss (agent {agent}, layer {h}, state {s}, joint {joint}) = {l} \
                             outside [0,1]"
                        ));
                    }
                }
            }
            for agent in 0..game.m {
                for a in 0..game.actions[agent] {
                    let norm = game.feature(agent, h, s, a).norm();
                    if norm > 1.0 + PROB_TOLERANCE {
                        violations.push(format!(
                            "feature norm (agent {agent}, layer {h}, state {s}, action {a}) = \
                             {norm} exceeds 1"
                        ));
                    } else if norm < 1.0 / (game.d as f64).sqrt() - PROB_TOLERANCE {
                        violations.push(format!(
                            "warning: feature norm (agent {agent}, layer {h}, state {s}, \
                             action {a}) = {norm} below 1/sqrt(d); value-error bounds assume \
                             norms of at least 1/sqrt(d)"
                        ));
                    }
                }
            }
        }
    }
    violations
}

/// Per-state policy: either a product of per-agent action distributions or
/// an explicit (possibly correlated) joint distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum StatePolicy {
    /// `dists[agent][action]`.
    Product(Vec<Vec<f64>>),
    /// Distribution over joint action indices.
    Joint(Vec<f64>),
}

/// A Markov joint policy: one [`StatePolicy`] per decision state (indexed
/// globally, layer by layer).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkovJointPolicy {
    pub states: Vec<StatePolicy>,
}

impl MarkovJointPolicy {
    /// The uniform product policy on every decision state.
    pub fn uniform(game: &LinearMarkovGame) -> Self {
        let per_state = StatePolicy::Product(
            game.actions()
                .iter()
                .map(|&a| vec![1.0 / a as f64; a])
                .collect(),
        );
        Self { states: vec![per_state; game.num_decision_states()] }
    }

    /// Marginal action distribution of `agent` at the given decision state.
    pub fn marginal(&self, game: &LinearMarkovGame, global_state: usize, agent: usize) -> Vec<f64> {
        match &self.states[global_state] {
            StatePolicy::Product(dists) => dists[agent].clone(),
            StatePolicy::Joint(joint) => {
                let mut out = vec![0.0; game.actions()[agent]];
                for (idx, &p) in joint.iter().enumerate() {
                    out[game.joint_from_index(idx)[agent]] += p;
                }
                out
            }
        }
    }

    /// Distribution over opponent joint actions (agents `j ≠ agent`,
    /// row-major in increasing `j`), marginalizing out `agent`'s action.
    pub fn opponent_dist(
        &self,
        game: &LinearMarkovGame,
        global_state: usize,
        agent: usize,
    ) -> Vec<f64> {
        let n_opp = game.num_opponent_actions(agent);
        let mut out = vec![0.0; n_opp];
        match &self.states[global_state] {
            StatePolicy::Product(dists) => {
                for opp_idx in 0..n_opp {
                    // Decode the opponent combination and multiply marginals.
                    let joint = game.joint_from_index(game.compose_joint(agent, 0, opp_idx));
                    let mut p = 1.0;
                    for (j, dist) in dists.iter().enumerate() {
                        if j != agent {
                            p *= dist[joint[j]];
                        }
                    }
                    out[opp_idx] = p;
                }
            }
            StatePolicy::Joint(joint_dist) => {
                for (idx, &p) in joint_dist.iter().enumerate() {
                    let joint = game.joint_from_index(idx);
                    let mut opp_idx = 0;
                    for (j, &a) in joint.iter().enumerate() {
                        if j != agent {
                            opp_idx = opp_idx * game.actions()[j] + a;
                        }
                    }
                    out[opp_idx] += p;
                }
            }
        }
        out
    }

    /// Probability of a joint action index at a decision state.
    pub fn joint_prob(&self, game: &LinearMarkovGame, global_state: usize, joint_idx: usize) -> f64 {
        match &self.states[global_state] {
            StatePolicy::Product(dists) => {
                let joint = game.joint_from_index(joint_idx);
                dists.iter().enumerate().map(|(j, d)| d[joint[j]]).product()
            }
            StatePolicy::Joint(joint_dist) => joint_dist[joint_idx],
        }
    }

    /// Sample a full joint action at a decision state.
    pub fn sample_joint<R: Rng>(
        &self,
        game: &LinearMarkovGame,
        global_state: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        match &self.states[global_state] {
            StatePolicy::Product(dists) => {
                dists.iter().map(|d| sample_discrete(rng, d)).collect()
            }
            StatePolicy::Joint(joint_dist) => {
                game.joint_from_index(sample_discrete(rng, joint_dist))
            }
        }
    }

    /// Check distribution normalization; returns violations.
    pub fn validate(&self, game: &LinearMarkovGame) -> Vec<String> {
        let mut violations = Vec::new();
        for (s, sp) in self.states.iter().enumerate() {
            let rows: Vec<&Vec<f64>> = match sp {
                StatePolicy::Product(dists) => dists.iter().collect(),
                StatePolicy::Joint(j) => vec![j],
            };
            for row in rows {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOLERANCE || row.iter().any(|&p| p < 0.0) {
                    violations.push(format!("state {s}: distribution sums to {sum} or has negative entries"));
                }
            }
        }
        let _ = game;
        violations
    }
}

/// A mixture of Markov joint policies with execution semantics "draw one
/// component per episode and let every agent follow it".
#[derive(Clone, Debug)]
pub struct MixturePolicy {
    pub components: Vec<(f64, Arc<MarkovJointPolicy>)>,
}

impl MixturePolicy {
    /// Uniform mixture over the given components, merging duplicates by
    /// pointer identity into multiplicities.
    pub fn uniform_over(policies: &[Arc<MarkovJointPolicy>]) -> Self {
        let w = 1.0 / policies.len() as f64;
        let mut components: Vec<(f64, Arc<MarkovJointPolicy>)> = Vec::new();
        for p in policies {
            if let Some(entry) = components.iter_mut().find(|(_, q)| Arc::ptr_eq(q, p)) {
                entry.0 += w;
            } else {
                components.push((w, Arc::clone(p)));
            }
        }
        Self { components }
    }

    /// Mixture with a single component.
    pub fn single(policy: Arc<MarkovJointPolicy>) -> Self {
        Self { components: vec![(1.0, policy)] }
    }

    /// Draw one component according to the weights.
    pub fn sample_component<R: Rng>(&self, rng: &mut R) -> &Arc<MarkovJointPolicy> {
        let weights: Vec<f64> = self.components.iter().map(|(w, _)| *w).collect();
        &self.components[sample_discrete(rng, &weights)].1
    }
}

/// One step of a trajectory: state `(h, index)`, the joint action taken,
/// per-agent losses incurred, and the successor index in layer `h+1`.
#[derive(Clone, Debug)]
pub struct Step {
    pub layer: usize,
    pub state: usize,
    pub joint: Vec<usize>,
    pub losses: Vec<f64>,
    pub next_state: usize,
}

/// A (possibly truncated) trajectory through the layered game.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// The step taken at layer `h`, if the trajectory reaches it.
    pub fn at_layer(&self, h: usize) -> Option<&Step> {
        self.steps.get(h - 1)
    }
}

/// Per-agent behavior override at a single layer.
#[derive(Clone, Copy)]
pub enum AgentBehavior<'a> {
    /// Keep following the episode's base policy.
    Base,
    /// Act from this per-state action table (`[state_in_layer][action]`).
    Table(&'a [Vec<f64>]),
}

/// A composite roll-in: follow `base` everywhere except that at layer
/// `override_layer` individual agents may be redirected to explicit action
/// tables. Sampling stops after `stop_after_layer` when set.
pub struct CompositeRollin<'a> {
    pub base: &'a MarkovJointPolicy,
    pub override_layer: Option<usize>,
    pub overrides: Vec<AgentBehavior<'a>>,
    pub stop_after_layer: Option<usize>,
}

impl<'a> CompositeRollin<'a> {
    /// Plain execution of `base` for the full horizon.
    pub fn plain(base: &'a MarkovJointPolicy) -> Self {
        Self { base, override_layer: None, overrides: Vec::new(), stop_after_layer: None }
    }
}

/// Sample one trajectory under a composite roll-in. The rng fully
/// determines the outcome.
pub fn sample_trajectory<R: Rng>(
    game: &LinearMarkovGame,
    rollin: &CompositeRollin<'_>,
    rng: &mut R,
) -> Trajectory {
    let mut state = game.initial_state();
    let mut steps = Vec::with_capacity(game.horizon());
    let last_layer = rollin.stop_after_layer.unwrap_or(game.horizon()).min(game.horizon());
    for h in 1..=last_layer {
        let gs = game.global_index(h, state);
        let mut joint = rollin.base.sample_joint(game, gs, rng);
        if rollin.override_layer == Some(h) {
            for (agent, behavior) in rollin.overrides.iter().enumerate() {
                if let AgentBehavior::Table(table) = behavior {
                    joint[agent] = sample_discrete(rng, &table[state]);
                }
            }
        }
        let joint_idx = game.joint_index(&joint);
        let losses: Vec<f64> =
            (0..game.num_agents()).map(|i| game.loss(i, h, state, joint_idx)).collect();
        let next = sample_discrete(rng, game.transition_row(h, state, joint_idx));
        steps.push(Step { layer: h, state, joint, losses, next_state: next });
        state = next;
    }
    Trajectory { steps }
}

/// Exact Q-kernel for one agent at layer `h`:
/// `Q(s, a) = E_{a^{-i} ~ opp(s)} [ ℓ^i(s, a, a^{-i}) + Σ_{s'} P(s'|s,·) V(s') ]`,
/// computed by full enumeration.
///
/// `opp_dists[state_in_layer]` is a distribution over opponent joint
/// actions; `v_next[state_in_next_layer]` is the continuation value.
pub fn exact_q_kernel(
    game: &LinearMarkovGame,
    h: usize,
    agent: usize,
    opp_dists: &[Vec<f64>],
    v_next: &[f64],
) -> Vec<Vec<f64>> {
    let a_count = game.actions()[agent];
    let n_states = game.layer_size(h);
    let mut q = vec![vec![0.0; a_count]; n_states];
    for s in 0..n_states {
        for a in 0..a_count {
            let mut total = 0.0;
            for (opp_idx, &p_opp) in opp_dists[s].iter().enumerate() {
                if p_opp == 0.0 {
                    continue;
                }
                let joint = game.compose_joint(agent, a, opp_idx);
                let mut value = game.loss(agent, h, s, joint);
                for (next, &p_next) in game.transition_row(h, s, joint).iter().enumerate() {
                    value += p_next * v_next[next];
                }
                total += p_opp * value;
            }
            q[s][a] = total;
        }
    }
    q
}

/// Opponent joint-action distributions at layer `h` for `agent`, one per
/// state in the layer, derived from a joint policy.
pub fn opponent_dists_at_layer(
    game: &LinearMarkovGame,
    h: usize,
    agent: usize,
    policy: &MarkovJointPolicy,
) -> Vec<Vec<f64>> {
    (0..game.layer_size(h))
        .map(|s| policy.opponent_dist(game, game.global_index(h, s), agent))
        .collect()
}

// ---------------------------------------------------------------------------
// Serialized game spec (JSON-compatible).
// ---------------------------------------------------------------------------

/// One layer in the serialized spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub states: usize,
}

/// Serialized game format.
///
/// States are globally indexed layer by layer over decision layers
/// `1..=H`; transition rows at layer `H` target the states of layer `H+1`.
/// Joint actions are serialized row-major with agent 0 most significant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GameSpec {
    pub m: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub d: usize,
    pub actions: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// `features[agent][state][action][coord]`.
    pub features: Vec<Vec<Vec<Vec<f64>>>>,
    /// `transitions[state][joint_action][next_state]`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `losses[agent][state][joint_action]`.
    pub losses: Vec<Vec<Vec<f64>>>,
    pub initial_state: usize,
}

impl GameSpec {
    /// Build the runtime game from the spec.
    pub fn into_game(self) -> Result<LinearMarkovGame, GameError> {
        let features = self
            .features
            .into_iter()
            .map(|per_agent| {
                per_agent
                    .into_iter()
                    .map(|per_state| {
                        per_state.into_iter().map(DVector::from_vec).collect()
                    })
                    .collect()
            })
            .collect();
        LinearMarkovGame::new(
            self.m,
            self.h,
            self.d,
            self.actions,
            self.layers.iter().map(|l| l.states).collect(),
            features,
            self.transitions,
            self.losses,
            self.initial_state,
        )
    }

    /// Re-serialize a runtime game.
    pub fn from_game(game: &LinearMarkovGame) -> Self {
        Self {
            m: game.m,
            h: game.horizon,
            d: game.d,
            actions: game.actions.clone(),
            layers: game.states_per_layer.iter().map(|&states| LayerSpec { states }).collect(),
            features: game
                .features
                .iter()
                .map(|per_agent| {
                    per_agent
                        .iter()
                        .map(|per_state| {
                            per_state.iter().map(|v| v.iter().cloned().collect()).collect()
                        })
                        .collect()
                })
                .collect(),
            transitions: game.transitions.clone(),
            losses: game.losses.clone(),
            initial_state: game.initial_state,
        }
    }
}
