//! The epoch-level driver: potential-tracked lazy policy reuse, repeated
//! per-layer learning with per-state selection, and the output mixture.
//!
//! Epoch `t` starts by playing the previous policy `π̃_{t−1}` for one
//! episode and adding `‖φ(s̃_h, ã_h^i)‖²_{Σ̂†}` (normalized by
//! `64·log(8mHT/δ)`) to the potential `Ψ_{t,h}^i` of every layer/agent
//! pair. While no potential has grown by more than 1 since the last
//! rebuild, the epoch is *lazy*: the policy and its gap tables are reused
//! at the cost of a single trajectory. Otherwise the driver rebuilds: with
//! roll-in mixture `π̄_t` (uniform over all previous policies) it sweeps
//! layers `h = H..1`, runs the one-layer learner `R` times, keeps per state
//! the repetition minimizing the agents' gap sum, and refits the optimistic
//! values. The final output is the uniform mixture of `π̃_0, …, π̃_T`.

use std::sync::Arc;

use crate::cce_approx::{
    self, CceError, GapEntry, GapTable, HyperParams, LayerPolicy, ScheduleConstants,
};
use crate::game_core::{
    sample_trajectory, CompositeRollin, LinearMarkovGame, MarkovJointPolicy, MixturePolicy,
    StatePolicy,
};
use crate::matstat::CovarianceEstimate;
use crate::rng::StreamFactory;
use crate::v_approx;

/// Stream tags for the driver's rng paths.
const STREAM_PLAY: u64 = 10;
const STREAM_EPOCH: u64 = 11;

/// Parameter schedule: confidence level plus the constant overrides that
/// instantiate per-epoch hyper-parameters (episode budget `K = t`).
#[derive(Clone, Debug)]
pub struct Schedule {
    pub delta: f64,
    pub constants: ScheduleConstants,
}

impl Schedule {
    pub fn new(delta: f64) -> Self {
        Self { delta, constants: ScheduleConstants::default() }
    }

    /// Hyper-parameters for a call with episode budget `k`.
    pub fn params_for(&self, d: usize, horizon: usize, k: usize) -> HyperParams {
        HyperParams::from_schedule(d, horizon, k, self.delta, &self.constants)
    }

    /// Ridge regularizer for a call with episode budget `k`.
    pub fn lambda_for(&self, d: usize, k: usize) -> f64 {
        HyperParams::lambda_from_schedule(d, k, self.delta, &self.constants)
    }
}

/// Per-layer gap digest carried in epoch records.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LayerGapSummary {
    /// Maximum gap total over (agent, state).
    pub max_total: f64,
    /// Mean gap total over (agent, state).
    pub mean_total: f64,
}

/// Diagnostics for one epoch.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochRecord {
    pub t: usize,
    /// Whether the epoch reused the previous policy.
    pub lazy: bool,
    /// Epoch index that produced the policy in effect (`t0`).
    pub policy_epoch: usize,
    /// Potentials `Ψ_{t,h}^i`, indexed `[h-1][agent]`.
    pub psi: Vec<Vec<f64>>,
    /// Number of non-lazy epochs so far (potential-condition violations).
    pub violations: usize,
    /// Per-layer gap digests of the tables in effect, indexed `[h-1]`.
    pub gap_summary: Vec<LayerGapSummary>,
    /// Cumulative trajectories consumed.
    pub samples_consumed: u64,
}

/// Result of a driver run.
pub struct AvlprOutput {
    /// Uniform mixture of `π̃_0, …, π̃_T`.
    pub pi_out: MixturePolicy,
    /// The epoch policies themselves (shared pointers; lazy epochs alias).
    pub policies: Vec<Arc<MarkovJointPolicy>>,
    pub records: Vec<EpochRecord>,
}

fn summarize(gap: &GapTable) -> LayerGapSummary {
    let mut max_total = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for per_agent in &gap.entries {
        for e in per_agent {
            max_total = max_total.max(e.total);
            sum += e.total;
            count += 1;
        }
    }
    LayerGapSummary { max_total, mean_total: if count > 0 { sum / count as f64 } else { 0.0 } }
}

/// Run the full driver for `t_max` epochs.
///
/// `r` is the repetition count per layer (`≥ 1`); deterministic given
/// `streams`.
pub fn run(
    game: &LinearMarkovGame,
    t_max: usize,
    schedule: &Schedule,
    r: usize,
    streams: &StreamFactory,
) -> Result<AvlprOutput, CceError> {
    assert!(t_max >= 1, "need at least one epoch");
    assert!(r >= 1, "need at least one repetition");
    let m = game.num_agents();
    let horizon = game.horizon();
    let d = game.feature_dim();
    let denom = 64.0
        * (8.0 * m as f64 * horizon as f64 * t_max as f64 / schedule.delta).ln();

    let mut policies: Vec<Arc<MarkovJointPolicy>> =
        vec![Arc::new(MarkovJointPolicy::uniform(game))];
    let mut records: Vec<EpochRecord> = Vec::with_capacity(t_max);

    // Potentials and their snapshot at the last rebuild.
    let mut psi = vec![vec![0.0f64; m]; horizon];
    let mut psi_at_t0 = vec![vec![0.0f64; m]; horizon];
    // Carried covariance inverses per (layer, agent); empty before the
    // first rebuild (increments then use plain squared norms).
    let mut sigma_dagger: Vec<Vec<Option<CovarianceEstimate>>> = vec![
        {
            let mut row = Vec::with_capacity(m);
            row.resize_with(m, || None);
            row
        };
        horizon
    ];
    let mut t0 = 0usize;
    let mut violations = 0usize;
    let mut samples: u64 = 0;
    let mut current_gaps: Vec<GapTable> = Vec::new();

    for t in 1..=t_max {
        // Play the previous policy for one episode and grow the potentials.
        let played = Arc::clone(policies.last().expect("nonempty"));
        let mut rng = streams.stream(&[STREAM_PLAY, t as u64]);
        let traj = sample_trajectory(game, &CompositeRollin::plain(&played), &mut rng);
        samples += 1;
        for step in &traj.steps {
            let h = step.layer;
            for (agent, slot) in psi[h - 1].iter_mut().enumerate() {
                let phi = game.feature(agent, h, step.state, step.joint[agent]);
                let quad = match &sigma_dagger[h - 1][agent] {
                    Some(cov) => cov.quad_form(phi),
                    None => phi.dot(phi),
                };
                *slot += quad / denom;
            }
        }

        let within_budget = (0..horizon).all(|h| {
            (0..m).all(|agent| psi[h][agent] <= psi_at_t0[h][agent] + 1.0)
        });
        if t0 != 0 && within_budget {
            // Lazy epoch: reuse policy and gap tables.
            policies.push(Arc::clone(&played));
            let record = EpochRecord {
                t,
                lazy: true,
                policy_epoch: t0,
                psi: psi.clone(),
                violations,
                gap_summary: current_gaps.iter().map(summarize).collect(),
                samples_consumed: samples,
            };
            records.push(record);
            continue;
        }

        // Rebuild epoch.
        violations += 1;
        t0 = t;
        psi_at_t0 = psi.clone();
        let k = t;
        let pi_bar = MixturePolicy::uniform_over(&policies);
        let params = schedule.params_for(d, horizon, k);
        let lambda = schedule.lambda_for(d, k);
        let epoch_streams = streams.child(&[STREAM_EPOCH, t as u64]);

        let mut v_next: Vec<Vec<f64>> =
            vec![vec![0.0; game.states_per_layer()[horizon]]; m];
        let mut layer_policies: Vec<LayerPolicy> = Vec::with_capacity(horizon);
        let mut layer_gaps: Vec<GapTable> = Vec::with_capacity(horizon);
        for h in (1..=horizon).rev() {
            let outputs: Vec<cce_approx::CceOutput> = (0..r)
                .map(|rep| {
                    cce_approx::run(
                        game,
                        h,
                        &pi_bar,
                        &v_next,
                        k,
                        &params,
                        &epoch_streams.child(&[h as u64, rep as u64]),
                        false,
                    )
                })
                .collect::<Result<_, _>>()?;
            samples += (r as u64) * ((m as u64 + 2) * k as u64);

            // Per state, keep the repetition with the smallest gap sum over
            // agents (ties break to the lowest repetition index); all agents
            // at a state share the selected repetition.
            let n_states = game.layer_size(h);
            let selected: Vec<usize> = (0..n_states)
                .map(|s| {
                    let mut best = 0usize;
                    let mut best_sum = outputs[0].gap.agent_sum(s);
                    for (rep, out) in outputs.iter().enumerate().skip(1) {
                        let sum = out.gap.agent_sum(s);
                        if sum < best_sum {
                            best = rep;
                            best_sum = sum;
                        }
                    }
                    best
                })
                .collect();
            let policy = LayerPolicy {
                dists: (0..m)
                    .map(|agent| {
                        (0..n_states)
                            .map(|s| outputs[selected[s]].policy.dists[agent][s].clone())
                            .collect()
                    })
                    .collect(),
            };
            let gap = GapTable {
                entries: (0..m)
                    .map(|agent| {
                        (0..n_states)
                            .map(|s| -> GapEntry {
                                outputs[selected[s]].gap.entries[agent][s]
                            })
                            .collect()
                    })
                    .collect(),
            };
            // Carry the first repetition's covariance inverses into the
            // potential bookkeeping of subsequent epochs.
            for (agent, slot) in sigma_dagger[h - 1].iter_mut().enumerate() {
                *slot = Some(outputs[0].covariances[agent].clone());
            }

            let values = v_approx::run(
                game,
                h,
                &pi_bar,
                &policy,
                &v_next,
                &gap,
                k,
                lambda,
                &epoch_streams.child(&[h as u64, r as u64]),
            );
            samples += (m as u64) * k as u64;
            v_next = values.values;
            layer_policies.push(policy);
            layer_gaps.push(gap);
        }
        layer_policies.reverse();
        layer_gaps.reverse();

        // Assemble the epoch policy as a product policy on every state.
        let mut states = Vec::with_capacity(game.num_decision_states());
        for h in 1..=horizon {
            for s in 0..game.layer_size(h) {
                states.push(StatePolicy::Product(
                    (0..m)
                        .map(|agent| layer_policies[h - 1].dists[agent][s].clone())
                        .collect(),
                ));
            }
        }
        policies.push(Arc::new(MarkovJointPolicy { states }));
        current_gaps = layer_gaps;

        records.push(EpochRecord {
            t,
            lazy: false,
            policy_epoch: t0,
            psi: psi.clone(),
            violations,
            gap_summary: current_gaps.iter().map(summarize).collect(),
            samples_consumed: samples,
        });
    }

    let pi_out = MixturePolicy::uniform_over(&policies);
    Ok(AvlprOutput { pi_out, policies, records })
}
