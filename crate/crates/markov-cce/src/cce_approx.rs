//! One-layer equilibrium approximation: covariance-weighted value
//! estimation, magnitude reduction, action-dependent bonuses, per-state
//! exponential weights, and the data-dependent pessimistic gap.
//!
//! For a fixed layer `h` the subroutine runs `K` episodes. Upfront it draws
//! `2K` roll-in trajectories under the exploration mixture `π̄` to form two
//! independent per-agent sample pools: a covariance pool (defining
//! `Σ̂† = (Σ̃ + γI)⁻¹`) and a magnitude pool (defining the offsets `m̂`).
//! Each episode then collects one trajectory per agent — all agents roll in
//! via `π̄` through layer `h−1`; at layer `h` the agent itself keeps playing
//! `π̄` while its opponents play their current exponential-weights policies —
//! and turns the observed `(s, a^i, ℓ^i, s')` into a one-sample estimator
//!
//! `Q̂_k(s,a) = φ(s,a)ᵀθ̂_k − H·(φ(s,a)ᵀΣ̂†φ_k)₋ + m̂(s,a)` with
//! `θ̂_k = Σ̂†·φ_k·(ℓ_k + V̄(s'))`,
//!
//! whose lower tail is lifted by the magnitude-reduction trick while the
//! mean is preserved. The bonus-adjusted losses `Q̂ − B` feed one
//! exponential-weights learner per (agent, state); the returned layer policy
//! is the average of the per-episode policies, and the returned gap table is
//! a data-dependent high-probability upper bound on each agent's per-state
//! regret.

use nalgebra::DVector;
use thiserror::Error;

use crate::exp3::{Exp3Error, Exp3State};
use crate::game_core::{
    sample_trajectory, AgentBehavior, CompositeRollin, LinearMarkovGame, MixturePolicy,
};
use crate::matstat::{CovarianceEstimate, MatStatError};
use crate::rng::StreamFactory;

/// Stream tags for the subroutine's rng paths.
const STREAM_POOL: u64 = 0;
const STREAM_ROUND: u64 = 1;

/// Errors from the one-layer subroutine.
#[derive(Debug, Error)]
pub enum CceError {
    #[error("exponential-weights learner failed: {0}")]
    Exp3(#[from] Exp3Error),
    #[error("covariance estimation failed: {0}")]
    MatStat(#[from] MatStatError),
}

/// Hyper-parameters of one subroutine call.
///
/// Schedule guidance (for episode budget `K`, horizon `H`, feature
/// dimension `d`): `γ ≍ (d/K)·log`, `β₁ ≍ dH·log/√K`, `β₂ ≍ H·log/K`, and
/// `η` small enough that every bonus-adjusted loss satisfies `η·c ≥ −1`.
/// [`HyperParams::check_schedule`] reports deviations; it never rejects.
#[derive(Clone, Debug)]
pub struct HyperParams {
    /// Exponential-weights learning rate.
    pub eta: f64,
    /// Quadratic bonus coefficient.
    pub beta1: f64,
    /// Coordinate-sup bonus coefficient.
    pub beta2: f64,
    /// Covariance regularizer.
    pub gamma: f64,
    /// Confidence level δ.
    pub delta: f64,
    /// Constant in the `(d/β₁)·log(dK/δ)` gap term.
    pub c_bias2: f64,
    /// Constant in `γ = c_γ·(d/K)·log(6d/δ)` (kept for reporting).
    pub c_gamma: f64,
}

/// Multiplicative overrides on the default parameter schedule.
#[derive(Clone, Debug)]
pub struct ScheduleConstants {
    /// Constant in `γ = c_γ·(d/K)·log(6d/δ)`.
    pub c_gamma: f64,
    /// Hard cap on γ (regularizers above 1 only blur the estimators).
    pub gamma_cap: f64,
    /// Hard floor on γ (0 disables; a floor slows the growth of the
    /// covariance quadratic forms that drive the rebuild potential).
    pub gamma_floor: f64,
    /// Constant of the `(d/β₁)·log(dK/δ)` gap term.
    pub c_bias2: f64,
    /// Multiplier on the learning-rate schedule `√d/(√K·H)`.
    pub eta_mult: f64,
    /// Multiplier on the `β₁` schedule `dH·log(4KH/(γδ))/√K`.
    pub beta1_mult: f64,
    /// Multiplier on the `β₂` schedule `H·log(4KH/(γδ))/K`.
    pub beta2_mult: f64,
    /// Multiplier on the ridge schedule `(d/K)·log(dK/δ)`.
    pub lambda_mult: f64,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        Self {
            c_gamma: 5.0,
            gamma_cap: 1.0,
            gamma_floor: 0.0,
            c_bias2: 1.0,
            eta_mult: 1.0,
            beta1_mult: 1.0,
            beta2_mult: 1.0,
            lambda_mult: 1.0,
        }
    }
}

impl HyperParams {
    /// Instantiate the default schedule for a call with episode budget `k`.
    ///
    /// `eta` here is the scheduled rate `η = c·√d/(√K·H)`; [`run`]
    /// additionally clamps it per call against the exact certified loss
    /// floor `min_{s,a}(m̂(s,a) − B(s,a))` so the exponential-weights
    /// precondition `η·(Q̂ − B) ≥ −1` always holds (the estimator
    /// construction guarantees `Q̂ ≥ m̂`).
    pub fn from_schedule(
        d: usize,
        horizon: usize,
        k: usize,
        delta: f64,
        s: &ScheduleConstants,
    ) -> Self {
        let df = d as f64;
        let hf = horizon as f64;
        let kf = k as f64;
        let gamma = (s.c_gamma * (df / kf) * (6.0 * df / delta).ln())
            .min(s.gamma_cap)
            .max(s.gamma_floor);
        let log_term = (4.0 * kf * hf / (gamma * delta)).ln();
        let beta1 = s.beta1_mult * df * hf * log_term / kf.sqrt();
        let beta2 = s.beta2_mult * hf * log_term / kf;
        let eta = s.eta_mult * df.sqrt() / (kf.sqrt() * hf);
        Self { eta, beta1, beta2, gamma, delta, c_bias2: s.c_bias2, c_gamma: s.c_gamma }
    }

    /// Ridge regularizer schedule `λ = λ_mult·(d/K)·log(dK/δ)`.
    pub fn lambda_from_schedule(d: usize, k: usize, delta: f64, s: &ScheduleConstants) -> f64 {
        let df = d as f64;
        let kf = k as f64;
        s.lambda_mult * (df / kf) * (df * kf / delta).ln()
    }

    /// Report schedule-constraint deviations (never rejects).
    pub fn check_schedule(&self, d: usize, horizon: usize, k: usize) -> Vec<String> {
        let df = d as f64;
        let hf = horizon as f64;
        let kf = k as f64;
        let mut report = Vec::new();
        if self.beta1 * 8.0 < df * hf / kf.sqrt() {
            report.push(format!(
                "beta1 = {} is far below the dH/sqrt(K) = {} schedule",
                self.beta1,
                df * hf / kf.sqrt()
            ));
        }
        if self.beta2 * 8.0 < hf / kf {
            report.push(format!(
                "beta2 = {} is far below the H/K = {} schedule",
                self.beta2,
                hf / kf
            ));
        }
        if self.gamma > 1.0 {
            report.push(format!("gamma = {} exceeds 1; estimators will be heavily shrunk", self.gamma));
        }
        if self.eta * kf.sqrt() * hf > 8.0 * df.sqrt() {
            report.push(format!(
                "eta = {} is far above the sqrt(d)/(sqrt(K)H) = {} schedule",
                self.eta,
                df.sqrt() / (kf.sqrt() * hf)
            ));
        }
        report
    }
}

/// Per-agent sample pools drawn under the exploration mixture: layer-`h`
/// feature vectors from `2K` independent trajectories, split into a
/// covariance pool and a magnitude pool.
#[derive(Clone, Debug)]
pub struct AgentSamples {
    pub cov: Vec<DVector<f64>>,
    pub mag: Vec<DVector<f64>>,
}

/// Draw the two independent per-agent feature pools at layer `h`.
///
/// Each of the `2K` trajectories yields one `(s, a^i)` feature sample for
/// every agent simultaneously; the first `K` trajectories feed the
/// covariance pool and the remaining `K` the magnitude pool.
pub fn collect_samples(
    game: &LinearMarkovGame,
    h: usize,
    pi_bar: &MixturePolicy,
    k: usize,
    streams: &StreamFactory,
) -> Vec<AgentSamples> {
    let m = game.num_agents();
    let mut pools: Vec<AgentSamples> = (0..m)
        .map(|_| AgentSamples { cov: Vec::with_capacity(k), mag: Vec::with_capacity(k) })
        .collect();
    for idx in 0..2 * k {
        let mut rng = streams.stream(&[STREAM_POOL, idx as u64]);
        let component = pi_bar.sample_component(&mut rng).clone();
        let rollin = CompositeRollin {
            base: &component,
            override_layer: None,
            overrides: Vec::new(),
            stop_after_layer: Some(h),
        };
        let traj = sample_trajectory(game, &rollin, &mut rng);
        let step = traj.at_layer(h).expect("layered game always reaches layer h");
        for (agent, pool) in pools.iter_mut().enumerate() {
            let phi = game.feature(agent, h, step.state, step.joint[agent]).clone();
            if idx < k {
                pool.cov.push(phi);
            } else {
                pool.mag.push(phi);
            }
        }
    }
    pools
}

/// One agent's per-state gap with its named components.
///
/// Components are stored before division by `K`; `total` is their sum
/// divided by `K`.
#[derive(Clone, Copy, Debug, Default)]
pub struct GapEntry {
    pub total: f64,
    pub reg_term: f64,
    pub bias1: f64,
    pub bias2_const: f64,
    pub bonus1: f64,
}

/// Per-(agent, state) gap table for one layer.
#[derive(Clone, Debug)]
pub struct GapTable {
    /// `entries[agent][state_in_layer]`.
    pub entries: Vec<Vec<GapEntry>>,
}

impl GapTable {
    /// Sum of all agents' totals at a state (the repetition-selection key).
    pub fn agent_sum(&self, state: usize) -> f64 {
        self.entries.iter().map(|per_agent| per_agent[state].total).sum()
    }
}

/// Running sums needed to assemble one (agent, state) gap entry.
#[derive(Clone, Copy, Debug, Default)]
pub struct GapAccumulator {
    /// `Σ_k Σ_a π_k(a|s)·Q̂_k(s,a)²`.
    pub sum_q_sq: f64,
    /// `Σ_k ‖E_{π_k}[φ(s,·)]‖²_{Σ̂†}`.
    pub sum_phi_norm: f64,
    /// `Σ_k (E_{π_k}[φ(s,·)]ᵀθ̂_k)²`.
    pub sum_proj_sq: f64,
    /// `Σ_k Σ_a π_k(a|s)·B(s,a)`.
    pub sum_bonus: f64,
}

/// Assemble one gap entry from its running sums:
///
/// `K·Gap = log A/η + 2η·Σ E[Q̂²]`
/// `      + 8√2·√(2dH²·Σ‖E[φ]‖²_{Σ̂†} + Σ(E[φ]ᵀθ̂)²)·log(4KH/(γδ))`
/// `      + c·(d/β₁)·log(dK/δ) + Σ E[B]`.
pub fn assemble_gap(
    acc: &GapAccumulator,
    params: &HyperParams,
    k: usize,
    action_count: usize,
    d: usize,
    horizon: usize,
) -> GapEntry {
    let kf = k as f64;
    let df = d as f64;
    let hf = horizon as f64;
    let reg_term = (action_count as f64).ln() / params.eta + 2.0 * params.eta * acc.sum_q_sq;
    let bias1 = 8.0
        * f64::sqrt(2.0)
        * (2.0 * df * hf * hf * acc.sum_phi_norm + acc.sum_proj_sq).sqrt()
        * (4.0 * kf * hf / (params.gamma * params.delta)).ln();
    let bias2_const = params.c_bias2 * (df / params.beta1) * (df * kf / params.delta).ln();
    let bonus1 = acc.sum_bonus;
    GapEntry {
        total: (reg_term + bias1 + bias2_const + bonus1) / kf,
        reg_term,
        bias1,
        bias2_const,
        bonus1,
    }
}

/// A per-layer product policy: `dists[agent][state_in_layer][action]`.
#[derive(Clone, Debug)]
pub struct LayerPolicy {
    pub dists: Vec<Vec<Vec<f64>>>,
}

/// Per-episode snapshots (for oracle-based tests): the policies each agent
/// played in every episode.
#[derive(Clone, Debug)]
pub struct CceTrace {
    /// `policies[k][agent][state_in_layer][action]`.
    pub policies: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Result of one subroutine call.
#[derive(Debug)]
pub struct CceOutput {
    /// Averaged layer policy `π̃^i(·|s) = (1/K)Σ_k π_k^i(·|s)`.
    pub policy: LayerPolicy,
    /// Data-dependent pessimistic gap per (agent, state).
    pub gap: GapTable,
    /// Per-agent covariance estimates (reused by the driver's potential).
    pub covariances: Vec<CovarianceEstimate>,
    /// Cumulative bonus-adjusted losses fed to each learner,
    /// `[agent][state][action]` (diagnostic: the sign of pairwise
    /// differences determines where each learner concentrates).
    pub loss_totals: Vec<Vec<Vec<f64>>>,
    /// Episode snapshots, only when requested.
    pub trace: Option<CceTrace>,
}

/// Run the one-layer subroutine for `K` episodes.
///
/// `v_next[agent][state_in_layer_h_plus_1]` is the continuation value
/// (zeros at the terminal layer). Deterministic given `streams`.
pub fn run(
    game: &LinearMarkovGame,
    h: usize,
    pi_bar: &MixturePolicy,
    v_next: &[Vec<f64>],
    k: usize,
    params: &HyperParams,
    streams: &StreamFactory,
    want_trace: bool,
) -> Result<CceOutput, CceError> {
    let m = game.num_agents();
    let d = game.feature_dim();
    let horizon = game.horizon();
    let hf = horizon as f64;
    let n_states = game.layer_size(h);

    // Covariance and magnitude pools, then Σ̂† per agent.
    let pools = collect_samples(game, h, pi_bar, k, streams);
    let covariances: Vec<CovarianceEstimate> = pools
        .iter()
        .map(|p| CovarianceEstimate::from_samples(&p.cov, params.gamma))
        .collect::<Result<_, _>>()?;

    // Per-agent cached per-(s,a) tables: features, magnitude offsets m̂,
    // bonuses B, and Σ̂†φ(s,a).
    let mut features: Vec<Vec<Vec<DVector<f64>>>> = Vec::with_capacity(m);
    let mut sig_phi: Vec<Vec<Vec<DVector<f64>>>> = Vec::with_capacity(m);
    let mut m_hat: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
    let mut bonus: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
    for agent in 0..m {
        let a_count = game.actions()[agent];
        let cov = &covariances[agent];
        let mag_sig: Vec<DVector<f64>> = pools[agent].mag.iter().map(|p| cov.apply(p)).collect();
        let mut feats = Vec::with_capacity(n_states);
        let mut sig = Vec::with_capacity(n_states);
        let mut mh = Vec::with_capacity(n_states);
        for s in 0..n_states {
            let mut f_row = Vec::with_capacity(a_count);
            let mut s_row = Vec::with_capacity(a_count);
            let mut m_row = Vec::with_capacity(a_count);
            for a in 0..a_count {
                let phi = game.feature(agent, h, s, a).clone();
                // m̂(s,a) = (H/K)·Σ_κ (φ(s,a)ᵀΣ̂†φ^mag_κ)₋ — the empirical
                // mean negative part over the independent magnitude pool.
                let mut neg_sum = 0.0;
                for w in &mag_sig {
                    neg_sum += phi.dot(w).min(0.0);
                }
                m_row.push(hf / (k as f64) * neg_sum);
                s_row.push(cov.apply(&phi));
                f_row.push(phi);
            }
            feats.push(f_row);
            sig.push(s_row);
            mh.push(m_row);
        }
        // Coordinate-wise sup of Σ̂†φ over every (state, action) of the layer.
        let mut sup = vec![f64::NEG_INFINITY; d];
        for s_row in &sig {
            for w in s_row {
                for j in 0..d {
                    sup[j] = sup[j].max(w[j]);
                }
            }
        }
        let mut b_tab = Vec::with_capacity(n_states);
        for s in 0..n_states {
            let mut b_row = Vec::with_capacity(a_count);
            for a in 0..a_count {
                let phi = &feats[s][a];
                let quad = phi.dot(&sig[s][a]);
                let sup_term: f64 = (0..d).map(|j| phi[j] * sup[j]).sum();
                let b = params.beta1 * quad + params.beta2 * sup_term;
                // For unit-norm features the bonus is capped by
                // (β₁+β₂)·√d/γ; the √d slack only matters for dense
                // feature maps (one-hot maps meet the tighter (β₁+β₂)/γ).
                debug_assert!(
                    b <= (params.beta1 + params.beta2) * (d as f64).sqrt() / params.gamma + 1e-9
                );
                b_row.push(b);
            }
            b_tab.push(b_row);
        }
        features.push(feats);
        sig_phi.push(sig);
        m_hat.push(mh);
        bonus.push(b_tab);
    }

    // Certified loss floor: every loss fed to a learner is Q̂ − B ≥ m̂ − B
    // (the magnitude lift guarantees Q̂ ≥ m̂, and both tables are fully
    // enumerated above). Clamping η against it makes the precondition
    // η·loss ≥ −1 provably unreachable without tying η to γ.
    let loss_floor = (0..m)
        .flat_map(|agent| {
            let (mh, b) = (&m_hat[agent], &bonus[agent]);
            (0..n_states).flat_map(move |s| {
                (0..mh[s].len()).map(move |a| mh[s][a] - b[s][a])
            })
        })
        .fold(0.0f64, f64::min);
    let eta = if loss_floor < 0.0 {
        params.eta.min(0.99 / (-loss_floor))
    } else {
        params.eta
    };
    let params = HyperParams { eta, ..params.clone() };

    // One exponential-weights learner per (agent, state).
    let mut learners: Vec<Vec<Exp3State>> = (0..m)
        .map(|agent| {
            (0..n_states)
                .map(|_| Exp3State::new(game.actions()[agent], params.eta))
                .collect()
        })
        .collect();
    let mut policy_sums: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|agent| vec![vec![0.0; game.actions()[agent]]; n_states])
        .collect();
    let mut gap_acc: Vec<Vec<GapAccumulator>> =
        vec![vec![GapAccumulator::default(); n_states]; m];
    let mut loss_totals: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|agent| vec![vec![0.0; game.actions()[agent]]; n_states])
        .collect();
    let mut trace = want_trace.then(|| CceTrace { policies: Vec::with_capacity(k) });

    for episode in 0..k {
        // Episode barrier: snapshot every learner before any update.
        let snapshot: Vec<Vec<Vec<f64>>> = learners
            .iter()
            .map(|per_agent| per_agent.iter().map(|l| l.weights()).collect())
            .collect();
        for (agent, per_state) in policy_sums.iter_mut().enumerate() {
            for (s, row) in per_state.iter_mut().enumerate() {
                for (a, slot) in row.iter_mut().enumerate() {
                    *slot += snapshot[agent][s][a];
                }
            }
        }
        if let Some(t) = trace.as_mut() {
            t.policies.push(snapshot.clone());
        }

        for agent in 0..m {
            let mut rng = streams.stream(&[STREAM_ROUND, episode as u64, agent as u64]);
            let component = pi_bar.sample_component(&mut rng).clone();
            // Opponents act from their current learner policies at layer h;
            // the agent itself keeps following the roll-in policy.
            let overrides: Vec<AgentBehavior<'_>> = (0..m)
                .map(|j| {
                    if j == agent {
                        AgentBehavior::Base
                    } else {
                        AgentBehavior::Table(&snapshot[j])
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
            let target = step.losses[agent] + v_next[agent][step.next_state];
            let phi_k = game.feature(agent, h, step.state, step.joint[agent]);
            let w_k = covariances[agent].apply(phi_k); // Σ̂† φ_k
            let theta_hat = &w_k * target;

            for s in 0..n_states {
                let a_count = game.actions()[agent];
                let mut losses = Vec::with_capacity(a_count);
                let mut q_row = Vec::with_capacity(a_count);
                for a in 0..a_count {
                    let u = features[agent][s][a].dot(&w_k); // φ(s,a)ᵀΣ̂†φ_k
                    let q_hat = u * target - hf * u.min(0.0) + m_hat[agent][s][a];
                    debug_assert!(q_hat >= m_hat[agent][s][a] - 1e-12);
                    q_row.push(q_hat);
                    losses.push(q_hat - bonus[agent][s][a]);
                }
                // Gap bookkeeping under the snapshot policy.
                let pi = &snapshot[agent][s];
                let acc = &mut gap_acc[agent][s];
                let mut mean_phi = DVector::<f64>::zeros(d);
                for a in 0..a_count {
                    acc.sum_q_sq += pi[a] * q_row[a] * q_row[a];
                    acc.sum_bonus += pi[a] * bonus[agent][s][a];
                    mean_phi += &features[agent][s][a] * pi[a];
                }
                acc.sum_phi_norm += covariances[agent].quad_form(&mean_phi);
                let proj = mean_phi.dot(&theta_hat);
                acc.sum_proj_sq += proj * proj;

                for (a, &l) in losses.iter().enumerate() {
                    loss_totals[agent][s][a] += l;
                }
                learners[agent][s].update(&losses)?;
            }
        }
    }

    let policy = LayerPolicy {
        dists: policy_sums
            .into_iter()
            .map(|per_state| {
                per_state
                    .into_iter()
                    .map(|row| row.into_iter().map(|x| x / k as f64).collect())
                    .collect()
            })
            .collect(),
    };
    let gap = GapTable {
        entries: (0..m)
            .map(|agent| {
                (0..n_states)
                    .map(|s| {
                        assemble_gap(
                            &gap_acc[agent][s],
                            &params,
                            k,
                            game.actions()[agent],
                            d,
                            horizon,
                        )
                    })
                    .collect()
            })
            .collect(),
    };
    Ok(CceOutput { policy, gap, covariances, loss_totals, trace })
}
