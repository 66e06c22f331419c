//! Experiment configuration and synthetic game generation.
//!
//! Two generator families are provided:
//!
//! * **one-hot**: tabular games embedded with indicator features, so the
//!   linear-Q assumption holds for arbitrary random transitions and losses;
//! * **low-rank**: dense `d`-dimensional features with transitions
//!   `P(s'|s,a) = q(s') + Σ_i φ̃^i(s,a^i)ᵀw^i(s')` and losses affine in each
//!   agent's own features. A reserved constant ("bias") coordinate makes
//!   every agent's Q-function exactly linear in its own feature map; the
//!   factorization is reconstructed and checked to 1e-10 at generation
//!   time.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::cce_approx::ScheduleConstants;
use crate::game_core::{one_hot_tabular_embedding, GameError, LinearMarkovGame};
use crate::rng::StreamFactory;

/// Feature embedding family for generated games.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Embedding {
    OneHot,
    LowRank,
}

/// Specification of a synthetic game.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub m: usize,
    #[serde(rename = "H")]
    pub h: usize,
    /// States in each decision layer (the terminal layer is a single sink).
    pub states_per_layer: usize,
    /// Action count per agent.
    pub actions: Vec<usize>,
    /// Feature dimension; defaults to the smallest feasible dimension for
    /// the chosen embedding.
    pub d: Option<usize>,
    pub embedding: Embedding,
}

/// Where the experiment's game comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameSource {
    File { path: PathBuf },
    Generator(GeneratorSpec),
}

/// Serde-friendly schedule overrides; every field defaults to the base
/// schedule constant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Overrides {
    pub c_gamma: f64,
    pub gamma_cap: f64,
    pub gamma_floor: f64,
    pub c_bias2: f64,
    pub eta_mult: f64,
    pub beta1_mult: f64,
    pub beta2_mult: f64,
    pub lambda_mult: f64,
}

impl Default for Overrides {
    fn default() -> Self {
        let s = ScheduleConstants::default();
        Self {
            c_gamma: s.c_gamma,
            gamma_cap: s.gamma_cap,
            gamma_floor: s.gamma_floor,
            c_bias2: s.c_bias2,
            eta_mult: s.eta_mult,
            beta1_mult: s.beta1_mult,
            beta2_mult: s.beta2_mult,
            lambda_mult: s.lambda_mult,
        }
    }
}

impl From<&Overrides> for ScheduleConstants {
    fn from(o: &Overrides) -> Self {
        Self {
            c_gamma: o.c_gamma,
            gamma_cap: o.gamma_cap,
            gamma_floor: o.gamma_floor,
            c_bias2: o.c_bias2,
            eta_mult: o.eta_mult,
            beta1_mult: o.beta1_mult,
            beta2_mult: o.beta2_mult,
            lambda_mult: o.lambda_mult,
        }
    }
}

fn default_workers() -> usize {
    1
}

/// A full experiment configuration (JSON on disk).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub game: GameSource,
    /// Epoch count.
    pub t: usize,
    /// Confidence level δ ∈ (0,1).
    pub delta: f64,
    /// Repetitions per layer; defaults to `⌈log₂(1/δ)⌉`.
    pub r: Option<usize>,
    #[serde(default)]
    pub overrides: Overrides,
    /// Root seeds, one independent run each.
    pub seeds: Vec<u64>,
    /// Worker threads for running seeds in parallel.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Output directory (CLI `--out` overrides).
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Validate the invariants the run loop depends on.
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(format!("delta = {} outside (0,1)", self.delta));
        }
        if self.t < 1 {
            return Err("t must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return Err("seeds must be nonempty".into());
        }
        Ok(())
    }

    /// Effective repetition count: explicit override or `⌈log₂(1/δ)⌉`.
    pub fn repetitions(&self) -> usize {
        self.r.unwrap_or_else(|| default_repetitions(self.delta))
    }
}

/// Default repetition count `⌈log₂(1/δ)⌉` (at least 1); each repetition
/// halves the per-state failure probability of the selected gap.
pub fn default_repetitions(delta: f64) -> usize {
    ((1.0 / delta).log2().ceil() as usize).max(1)
}

/// Generate a game from a spec. For low-rank games the returned residual is
/// the largest deviation between the stored transition table and its linear
/// factorization (exactly 0 up to rounding by construction).
pub fn generate_game(spec: &GeneratorSpec) -> Result<(LinearMarkovGame, f64), GameError> {
    match spec.embedding {
        Embedding::OneHot => generate_one_hot(spec).map(|g| (g, 0.0)),
        Embedding::LowRank => generate_low_rank(spec),
    }
}

fn layer_counts(spec: &GeneratorSpec) -> Vec<usize> {
    let mut counts = vec![spec.states_per_layer; spec.h];
    counts.push(1); // terminal sink
    counts
}

/// Random exponential weights normalized into a probability row.
fn random_dist<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn generate_one_hot(spec: &GeneratorSpec) -> Result<LinearMarkovGame, GameError> {
    let counts = layer_counts(spec);
    // All decision layers have the same state count, so the largest block
    // is states_per_layer times the largest action set.
    let needed = spec
        .actions
        .iter()
        .map(|&a| spec.states_per_layer * a)
        .max()
        .unwrap_or(1);
    let d = spec.d.unwrap_or(needed);
    let features = one_hot_tabular_embedding(&counts, &spec.actions, d)?;

    let streams = StreamFactory::new(spec.seed);
    let mut rng = streams.stream(&[0]);
    let num_joint: usize = spec.actions.iter().product();
    let num_decision: usize = counts[..spec.h].iter().sum();
    let mut transitions = Vec::with_capacity(num_decision);
    let mut losses = vec![Vec::with_capacity(num_decision); spec.m];
    for h in 1..=spec.h {
        for _s in 0..counts[h - 1] {
            let next_count = counts[h];
            transitions.push((0..num_joint).map(|_| random_dist(&mut rng, next_count)).collect());
            for agent_losses in losses.iter_mut() {
                agent_losses.push((0..num_joint).map(|_| rng.gen::<f64>()).collect());
            }
        }
    }
    LinearMarkovGame::new(
        spec.m,
        spec.h,
        d,
        spec.actions.clone(),
        counts,
        features,
        transitions,
        losses,
        0,
    )
}

fn generate_low_rank(spec: &GeneratorSpec) -> Result<(LinearMarkovGame, f64), GameError> {
    let counts = layer_counts(spec);
    let d = spec.d.unwrap_or(3);
    if d < 2 {
        return Err(GameError::InvalidSpec("low-rank games need d >= 2".into()));
    }
    let free = d - 1; // last coordinate is the constant ("bias") coordinate
    let bias = 0.6;
    let free_norm_cap = 0.7;

    let streams = StreamFactory::new(spec.seed);
    let mut rng = streams.stream(&[1]);
    let m = spec.m;
    let num_joint: usize = spec.actions.iter().product();
    let num_decision: usize = counts[..spec.h].iter().sum();

    // Features: nonnegative free part with norm ≤ 0.7, bias coordinate 0.6,
    // so ‖φ‖ ∈ [0.6, ~0.92] ⊂ [1/√d, 1] for d ≤ 2.7⁻²… (validated below).
    let mut features: Vec<Vec<Vec<nalgebra::DVector<f64>>>> = vec![Vec::new(); m];
    for (agent, per_agent) in features.iter_mut().enumerate() {
        for _s in 0..num_decision {
            let mut per_state = Vec::with_capacity(spec.actions[agent]);
            for _a in 0..spec.actions[agent] {
                let raw: Vec<f64> = (0..free).map(|_| rng.gen::<f64>()).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let scale = free_norm_cap * rng.gen::<f64>().sqrt() / norm;
                let mut v: Vec<f64> = raw.into_iter().map(|x| x * scale).collect();
                v.push(bias);
                per_state.push(nalgebra::DVector::from_vec(v));
            }
            per_agent.push(per_state);
        }
    }

    // Transitions: P(s'|s,a) = q(s') + Σ_i φ̃^i(s,a^i)ᵀ w^i(s') with
    // Σ_{s'} w^i(s') = 0 so rows sum to exactly 1; the perturbation is
    // scaled to keep rows strictly positive.
    let mut transitions: Vec<Vec<Vec<f64>>> = Vec::with_capacity(num_decision);
    let mut losses: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(num_decision); m];
    let mut residual = 0.0f64;
    let mut gs = 0usize;
    for h in 1..=spec.h {
        let next_count = counts[h];
        for _s in 0..counts[h - 1] {
            // Base distribution bounded away from zero.
            let base = random_dist(&mut rng, next_count);
            let q: Vec<f64> =
                base.iter().map(|&p| 0.5 / next_count as f64 + 0.5 * p).collect();
            let q_min = q.iter().cloned().fold(f64::INFINITY, f64::min);
            // Zero-sum perturbation directions per agent and coordinate.
            let mut w: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m); // [agent][next][free coord]
            for _agent in 0..m {
                let mut per_next: Vec<Vec<f64>> =
                    (0..next_count).map(|_| (0..free).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
                for j in 0..free {
                    let mean: f64 =
                        per_next.iter().map(|row| row[j]).sum::<f64>() / next_count as f64;
                    for row in per_next.iter_mut() {
                        row[j] -= mean;
                    }
                }
                w.push(per_next);
            }
            // Scale perturbations to at most 0.35·q_min across joint actions,
            // keeping rows strictly positive while leaving the losses (not the
            // dynamics) as the dominant driver of the equilibrium structure.
            let mut max_pert = 0.0f64;
            for joint in 0..num_joint {
                let joint_vec = decode_joint(joint, &spec.actions);
                for next in 0..next_count {
                    let mut pert = 0.0;
                    for agent in 0..m {
                        let phi = &features[agent][gs][joint_vec[agent]];
                        for j in 0..free {
                            pert += phi[j] * w[agent][next][j];
                        }
                    }
                    max_pert = max_pert.max(pert.abs());
                }
            }
            let scale = if max_pert > 0.0 { 0.35 * q_min / max_pert } else { 0.0 };

            let mut rows = Vec::with_capacity(num_joint);
            for joint in 0..num_joint {
                let joint_vec = decode_joint(joint, &spec.actions);
                let mut row = Vec::with_capacity(next_count);
                for (next, &q_next) in q.iter().enumerate() {
                    let mut p = q_next;
                    for agent in 0..m {
                        let phi = &features[agent][gs][joint_vec[agent]];
                        for j in 0..free {
                            p += scale * phi[j] * w[agent][next][j];
                        }
                    }
                    row.push(p);
                }
                let sum: f64 = row.iter().sum();
                residual = residual.max((sum - 1.0).abs());
                row
                    .iter()
                    .for_each(|&p| debug_assert!(p > 0.0, "transition probabilities stay positive"));
                rows.push(row);
            }
            transitions.push(rows);

            // Losses affine in each agent's own free features, bounded in
            // [0.05, 0.95]: ℓ^i = c0(a^{-i}) + φ̃^iᵀ c1(a^{-i}).
            for agent in 0..m {
                let n_opp: usize = spec
                    .actions
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != agent)
                    .map(|(_, &a)| a)
                    .product();
                let c0: Vec<f64> = (0..n_opp).map(|_| 0.35 + 0.3 * rng.gen::<f64>()).collect();
                let c1: Vec<Vec<f64>> = (0..n_opp)
                    .map(|_| {
                        (0..free)
                            .map(|_| (rng.gen::<f64>() - 0.5) * 0.6 / free_norm_cap / (free as f64).sqrt())
                            .collect()
                    })
                    .collect();
                let mut row = vec![0.0; num_joint];
                for (joint_idx, slot) in row.iter_mut().enumerate() {
                    let joint_vec = decode_joint(joint_idx, &spec.actions);
                    let mut opp_idx = 0usize;
                    for (j, &a) in joint_vec.iter().enumerate() {
                        if j != agent {
                            opp_idx = opp_idx * spec.actions[j] + a;
                        }
                    }
                    let phi = &features[agent][gs][joint_vec[agent]];
                    let mut l = c0[opp_idx];
                    for j in 0..free {
                        l += phi[j] * c1[opp_idx][j];
                    }
                    debug_assert!((0.0..=1.0).contains(&l));
                    *slot = l;
                }
                losses[agent].push(row);
            }
            gs += 1;
        }
    }

    let game = LinearMarkovGame::new(
        m,
        spec.h,
        d,
        spec.actions.clone(),
        counts,
        features,
        transitions,
        losses,
        0,
    )?;
    Ok((game, residual))
}

fn decode_joint(mut idx: usize, actions: &[usize]) -> Vec<usize> {
    let mut joint = vec![0usize; actions.len()];
    for i in (0..actions.len()).rev() {
        joint[i] = idx % actions[i];
        idx /= actions[i];
    }
    joint
}
