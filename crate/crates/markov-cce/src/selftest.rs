//! Executable checks of the statistical building blocks.
//!
//! Each suite runs a fixed-seed Monte-Carlo or enumeration experiment
//! against one guarantee — the exponential-weights regret certificate, the
//! magnitude-reduction identities, the PSD concentration sandwich, the
//! adaptive martingale deviation bound, gap pessimism, and the optimistic
//! value sandwich — and reports measured rates against thresholds. The CLI
//! `selftest` command and the acceptance tests both call these functions,
//! so the shipped binary can re-verify its own foundations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::cce_approx::{self, HyperParams, ScheduleConstants};
use crate::config::{generate_game, Embedding, GeneratorSpec};
use crate::evaluation::exact_value;
use crate::exp3::regret_certificate;
use crate::game_core::{exact_q_kernel, LinearMarkovGame, MarkovJointPolicy, MixturePolicy};
use crate::matstat::{adaptive_freedman_bound, magnitude_reduce, psd_sandwich_check};
use crate::rng::StreamFactory;
use crate::v_approx;

/// Machine-readable outcome of one suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    /// Trials that satisfied the per-trial predicate.
    pub passed: usize,
    /// Trials run.
    pub total: usize,
    /// Minimum number of passing trials required.
    pub threshold: usize,
    /// Overall verdict.
    pub ok: bool,
    /// Human-readable measurement details.
    pub details: String,
}

impl SuiteReport {
    fn new(name: &str, passed: usize, total: usize, threshold: usize, details: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            total,
            threshold,
            ok: passed >= threshold,
            details,
        }
    }
}

/// The reference desk-scale game: one-hot features, 2 agents, horizon 2,
/// 2 states per layer, 2 actions each (feature dimension 4 per layer block).
pub fn reference_game() -> LinearMarkovGame {
    let spec = GeneratorSpec {
        seed: 20_240_601,
        m: 2,
        h: 2,
        states_per_layer: 2,
        actions: vec![2, 2],
        d: None,
        embedding: Embedding::OneHot,
    };
    generate_game(&spec).expect("reference game generates").0
}

/// Exponential-weights regret certificate on random valid loss sequences:
/// the inequality is deterministic, so every sequence must satisfy it for
/// both the best-fixed-action comparator and the average iterate.
pub fn exp3_suite(seed: u64) -> SuiteReport {
    let trials = 1000;
    let horizon = 200;
    let streams = StreamFactory::new(seed);
    let mut passed = 0;
    let mut worst_margin = f64::INFINITY;
    for trial in 0..trials {
        let mut rng = streams.stream(&[1, trial as u64]);
        let actions = rng.gen_range(2..=8usize);
        let eta = 0.05 + 0.95 * rng.gen::<f64>();
        // Losses kept within the precondition η·c ≥ −1.
        let lo = -1.0 / eta;
        let history: Vec<Vec<f64>> = (0..horizon)
            .map(|_| (0..actions).map(|_| lo + (2.0 - lo) * rng.gen::<f64>()).collect())
            .collect();

        // Comparator 1: best fixed action in hindsight.
        let mut cumulative = vec![0.0; actions];
        for losses in &history {
            for (c, &l) in cumulative.iter_mut().zip(losses) {
                *c += l;
            }
        }
        let best = cumulative
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let mut y_best = vec![0.0; actions];
        y_best[best] = 1.0;
        // Comparator 2: an arbitrary mixed distribution.
        let y_mixed = vec![1.0 / actions as f64; actions];

        let mut ok = true;
        for y in [&y_best, &y_mixed] {
            let (lhs, rhs) = regret_certificate(actions, eta, &history, y).expect("valid losses");
            worst_margin = worst_margin.min(rhs - lhs);
            if lhs > rhs + 1e-9 {
                ok = false;
            }
        }
        if ok {
            passed += 1;
        }
    }
    SuiteReport::new(
        "exp3",
        passed,
        trials,
        trials,
        format!("worst certificate margin (rhs - lhs): {worst_margin:.6}"),
    )
}

/// Magnitude reduction on random finite-support distributions: exact mean
/// preservation, second-moment inflation at most 6×, and the floor at
/// `E[(Z)₋]`, all verified by enumeration.
pub fn magnitude_suite(seed: u64) -> SuiteReport {
    let trials = 50;
    let streams = StreamFactory::new(seed);
    let mut passed = 0;
    let mut worst_ratio = 0.0f64;
    for trial in 0..trials {
        let mut rng = streams.stream(&[2, trial as u64]);
        let support = rng.gen_range(2..=6usize);
        let values: Vec<f64> = (0..support).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect();
        let raw: Vec<f64> = (0..support).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.into_iter().map(|p| p / total).collect();

        let mean: f64 = values.iter().zip(&probs).map(|(&z, &p)| p * z).sum();
        let second: f64 = values.iter().zip(&probs).map(|(&z, &p)| p * z * z).sum();
        let neg_mean: f64 = values.iter().zip(&probs).map(|(&z, &p)| p * z.min(0.0)).sum();

        let reduced: Vec<f64> = values.iter().map(|&z| magnitude_reduce(z, neg_mean)).collect();
        let r_mean: f64 = reduced.iter().zip(&probs).map(|(&z, &p)| p * z).sum();
        let r_second: f64 = reduced.iter().zip(&probs).map(|(&z, &p)| p * z * z).sum();
        let r_min = reduced.iter().cloned().fold(f64::INFINITY, f64::min);

        if second > 0.0 {
            worst_ratio = worst_ratio.max(r_second / second);
        }
        let ok = (r_mean - mean).abs() < 1e-12
            && r_second <= 6.0 * second + 1e-12
            && r_min >= neg_mean - 1e-12;
        if ok {
            passed += 1;
        }
    }
    SuiteReport::new(
        "magnitude",
        passed,
        trials,
        trials,
        format!("worst second-moment inflation: {worst_ratio:.4} (bound 6)"),
    )
}

/// PSD concentration sandwich on rank-1 samples (d = 4, spectral norm ≤ 1,
/// n = 200 per trial): each direction may fail in at most 10% of trials at
/// δ = 0.05.
pub fn matrix_suite(seed: u64) -> SuiteReport {
    let trials = 500;
    let n = 200;
    let d = 4;
    let delta = 0.05;
    let streams = StreamFactory::new(seed);
    // Samples: vvᵀ with v = s·u, u uniform on the sphere, s² ∈ {1/4, 1}
    // equally likely. Population mean: E[s²]·I/d = (5/8)·I/4.
    let population = DMatrix::<f64>::identity(d, d) * (0.625 / d as f64);
    let mut upper_fail = 0;
    let mut lower_fail = 0;
    for trial in 0..trials {
        let mut rng = streams.stream(&[3, trial as u64]);
        let samples: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                let mut v = DVector::<f64>::zeros(d);
                // Gaussian via Box-Muller, then normalize.
                for j in 0..d {
                    let u1: f64 = rng.gen::<f64>().max(1e-12);
                    let u2: f64 = rng.gen();
                    v[j] = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                }
                v /= v.norm().max(1e-12);
                let s = if rng.gen::<bool>() { 1.0 } else { 0.5 };
                v * s
            })
            .collect();
        let empirical = crate::matstat::empirical_covariance(&samples).unwrap();
        let (upper, lower) = psd_sandwich_check(&empirical, &population, n, 1.0, delta).unwrap();
        if !upper {
            upper_fail += 1;
        }
        if !lower {
            lower_fail += 1;
        }
    }
    let allowed = trials / 10;
    let passed = trials - upper_fail.max(lower_fail);
    SuiteReport::new(
        "matrix",
        passed,
        trials,
        trials - allowed,
        format!("failures: upper {upper_fail}/{trials}, lower {lower_fail}/{trials} (allowed {allowed} each)"),
    )
}

/// Adaptive martingale deviation bound on Rademacher and heteroscedastic
/// martingales of length 10⁴: `|Σ X|` may exceed the bound in at most 10%
/// of trials at δ = 0.05.
pub fn freedman_suite(seed: u64) -> SuiteReport {
    let trials = 1000;
    let len = 10_000;
    let delta = 0.05;
    let streams = StreamFactory::new(seed);
    let mut violations = 0;
    let mut worst_ratio = 0.0f64;
    for trial in 0..trials {
        let mut rng = streams.stream(&[4, trial as u64]);
        let heteroscedastic = trial % 2 == 1;
        let mut values = Vec::with_capacity(len);
        let mut cond = Vec::with_capacity(len);
        let mut scale = 1.0f64;
        for _ in 0..len {
            if heteroscedastic {
                // Predictable scale drawn before the increment's sign.
                scale = rng.gen::<f64>();
            }
            let x = if rng.gen::<bool>() { scale } else { -scale };
            values.push(x);
            cond.push(scale * scale);
        }
        let sum: f64 = values.iter().sum();
        let b = adaptive_freedman_bound(&values, &cond, delta).unwrap();
        if b.bound > 0.0 {
            worst_ratio = worst_ratio.max(sum.abs() / b.bound);
        }
        if sum.abs() > b.bound {
            violations += 1;
        }
    }
    let allowed = trials / 10;
    SuiteReport::new(
        "freedman",
        trials - violations,
        trials,
        trials - allowed,
        format!("violations: {violations}/{trials} (allowed {allowed}); worst |sum|/bound: {worst_ratio:.4}"),
    )
}

/// Exact per-state regret of the episode policies, measured against the
/// true kernels and the best fixed action in hindsight.
///
/// Returns `regret[agent][state]` for the layer the trace belongs to.
pub fn realized_layer_regret(
    game: &LinearMarkovGame,
    h: usize,
    trace: &cce_approx::CceTrace,
    v_next: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let m = game.num_agents();
    let n_states = game.layer_size(h);
    let k = trace.policies.len();
    let mut regret = vec![vec![0.0; n_states]; m];
    for agent in 0..m {
        let a_count = game.actions()[agent];
        // Σ_k ⟨π_k, Q_k⟩ and Σ_k Q_k per (state, action).
        let mut played = vec![0.0; n_states];
        let mut totals = vec![vec![0.0; a_count]; n_states];
        for snapshot in &trace.policies {
            // Opponents' product policy at layer h from the snapshot.
            let opp_dists: Vec<Vec<f64>> = (0..n_states)
                .map(|s| {
                    let n_opp = game.num_opponent_actions(agent);
                    let mut dist = vec![1.0; n_opp];
                    for (opp_idx, slot) in dist.iter_mut().enumerate() {
                        let joint =
                            game.joint_from_index(game.compose_joint(agent, 0, opp_idx));
                        for (j, &a) in joint.iter().enumerate() {
                            if j != agent {
                                *slot *= snapshot[j][s][a];
                            }
                        }
                    }
                    dist
                })
                .collect();
            let q = exact_q_kernel(game, h, agent, &opp_dists, &v_next[agent]);
            for s in 0..n_states {
                for a in 0..a_count {
                    played[s] += snapshot[agent][s][a] * q[s][a];
                    totals[s][a] += q[s][a];
                }
            }
        }
        for s in 0..n_states {
            let best = totals[s].iter().cloned().fold(f64::INFINITY, f64::min);
            regret[agent][s] = (played[s] - best) / k as f64;
        }
    }
    regret
}

/// Continuation values of the uniform policy at layer 2 of the reference
/// game (a realistic, nonzero `V̄` for the per-layer suites).
fn uniform_continuation(game: &LinearMarkovGame) -> Vec<Vec<f64>> {
    let uniform = MarkovJointPolicy::uniform(game);
    let table = exact_value(game, &uniform);
    (0..game.num_agents())
        .map(|agent| {
            (0..game.layer_size(2))
                .map(|s| table.values[agent][game.global_index(2, s)])
                .collect()
        })
        .collect()
}

/// Gap pessimism at desk scale: on the reference game, the reported gap
/// upper-bounds the realized per-state regret for every (agent, state) in
/// at least `threshold` of `calls` independent runs.
pub fn gap_pessimism_suite(seed: u64, calls: usize, k: usize) -> SuiteReport {
    let game = reference_game();
    let h = 1;
    let delta = 0.1;
    let v_next = uniform_continuation(&game);
    let params = HyperParams::from_schedule(
        game.feature_dim(),
        game.horizon(),
        k,
        delta,
        &ScheduleConstants::default(),
    );
    let pi_bar = MixturePolicy::single(std::sync::Arc::new(MarkovJointPolicy::uniform(&game)));
    let streams = StreamFactory::new(seed);

    let m = game.num_agents();
    let n_states = game.layer_size(h);
    let mut success = vec![vec![0usize; n_states]; m];
    for call in 0..calls {
        let out = cce_approx::run(
            &game,
            h,
            &pi_bar,
            &v_next,
            k,
            &params,
            &streams.child(&[5, call as u64]),
            true,
        )
        .expect("subroutine runs");
        let realized =
            realized_layer_regret(&game, h, out.trace.as_ref().unwrap(), &v_next);
        for agent in 0..m {
            for s in 0..n_states {
                if out.gap.entries[agent][s].total >= realized[agent][s] - 1e-9 {
                    success[agent][s] += 1;
                }
            }
        }
    }
    let min_success = success.iter().flatten().cloned().min().unwrap_or(0);
    let threshold = (calls * 3) / 4;
    SuiteReport::new(
        "gap-pessimism",
        min_success,
        calls,
        threshold,
        format!("per-(agent,state) successes: {success:?} (need {threshold} each)"),
    )
}

/// Optimistic value sandwich at desk scale: on the reference game, the
/// refitted layer values lie in
/// `[min{E + Gap, H−h+1}, E + 2·Gap]` per state (expectations exact) in at
/// least `threshold` of `trials` runs.
pub fn v_sandwich_suite(seed: u64, trials: usize, k: usize) -> SuiteReport {
    let game = reference_game();
    let h = 1;
    let delta = 0.1;
    let clip = (game.horizon() - h + 1) as f64;
    let v_next = uniform_continuation(&game);
    let constants = ScheduleConstants::default();
    let params =
        HyperParams::from_schedule(game.feature_dim(), game.horizon(), k, delta, &constants);
    let lambda = HyperParams::lambda_from_schedule(game.feature_dim(), k, delta, &constants);
    let pi_bar = MixturePolicy::single(std::sync::Arc::new(MarkovJointPolicy::uniform(&game)));
    let streams = StreamFactory::new(seed);

    let m = game.num_agents();
    let n_states = game.layer_size(h);
    let mut passed = 0;
    let mut worst_low = f64::INFINITY;
    let mut worst_high = f64::INFINITY;
    for trial in 0..trials {
        let trial_streams = streams.child(&[6, trial as u64]);
        let out = cce_approx::run(&game, h, &pi_bar, &v_next, k, &params, &trial_streams, false)
            .expect("subroutine runs");
        let values = v_approx::run(
            &game,
            h,
            &pi_bar,
            &out.policy,
            &v_next,
            &out.gap,
            k,
            lambda,
            &trial_streams,
        );
        let mut ok = true;
        for agent in 0..m {
            // Exact E_{π̃}[ℓ + P·V̄_next] per state, opponents at π̃.
            let opp_dists: Vec<Vec<f64>> = (0..n_states)
                .map(|s| {
                    let n_opp = game.num_opponent_actions(agent);
                    let mut dist = vec![1.0; n_opp];
                    for (opp_idx, slot) in dist.iter_mut().enumerate() {
                        let joint =
                            game.joint_from_index(game.compose_joint(agent, 0, opp_idx));
                        for (j, &a) in joint.iter().enumerate() {
                            if j != agent {
                                *slot *= out.policy.dists[j][s][a];
                            }
                        }
                    }
                    dist
                })
                .collect();
            let q = exact_q_kernel(&game, h, agent, &opp_dists, &v_next[agent]);
            for s in 0..n_states {
                let expectation: f64 = q[s]
                    .iter()
                    .zip(&out.policy.dists[agent][s])
                    .map(|(&qv, &p)| p * qv)
                    .sum();
                let gap = out.gap.entries[agent][s].total;
                let v = values.values[agent][s];
                let low = (expectation + gap).min(clip);
                let high = expectation + 2.0 * gap;
                worst_low = worst_low.min(v - low);
                worst_high = worst_high.min(high - v);
                if v < low - 1e-9 || v > high + 1e-9 {
                    ok = false;
                }
            }
        }
        if ok {
            passed += 1;
        }
    }
    let threshold = (trials * 9) / 10;
    SuiteReport::new(
        "v-sandwich",
        passed,
        trials,
        threshold,
        format!("worst slack: lower {worst_low:.4}, upper {worst_high:.4}"),
    )
}
