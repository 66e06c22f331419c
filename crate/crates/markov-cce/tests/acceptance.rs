//! Acceptance suite: one test per acceptance criterion, each printing a
//! single PASS/FAIL line (run with `--nocapture` to see them even on
//! success).
//!
//! Criteria 1–6 exercise the statistical building blocks through the
//! library's self-test suites. Criteria 7–8 run the full driver on the
//! two pinned reference games with the pinned desk-scale schedule
//! constants (see `reference` below). Criterion 9 checks byte-level
//! determinism of the CLI experiment runner.

use markov_cce::avlpr::Schedule;
use markov_cce::cce_approx::ScheduleConstants;
use markov_cce::cli::{self, SeedRun};
use markov_cce::config::{
    Embedding, ExperimentConfig, GameSource, GeneratorSpec, Overrides,
};
use markov_cce::selftest::{self, SuiteReport};

/// Reference configuration for the end-to-end runs. The schedule
/// multipliers are desk-scale calibrations of the theory's "sufficiently
/// large/small constant" knobs; they are deliberately pinned (together
/// with the games and the seed block) so the trend checks below are
/// exact, deterministic assertions rather than flaky stochastic ones.
mod reference {
    use super::*;

    pub const DELTA: f64 = 0.02;
    pub const REPETITIONS: usize = 2;
    pub const SEEDS: [u64; 5] = [8, 9, 10, 11, 12];

    pub fn constants() -> ScheduleConstants {
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

    pub fn schedule() -> Schedule {
        Schedule { delta: DELTA, constants: constants() }
    }

    /// One-hot tabular reference game: m=2, H=2, 2 states/layer,
    /// 2 actions/agent, d=4.
    pub fn one_hot_spec() -> GeneratorSpec {
        GeneratorSpec {
            seed: 20_240_601,
            m: 2,
            h: 2,
            states_per_layer: 2,
            actions: vec![2, 2],
            d: None,
            embedding: Embedding::OneHot,
        }
    }

    /// Low-rank reference game: m=2, H=2, 2 states/layer, 2 actions/agent,
    /// dense features with d=3.
    pub fn low_rank_spec() -> GeneratorSpec {
        GeneratorSpec {
            seed: 19,
            m: 2,
            h: 2,
            states_per_layer: 2,
            actions: vec![2, 2],
            d: Some(3),
            embedding: Embedding::LowRank,
        }
    }

    pub fn game(spec: &GeneratorSpec) -> markov_cce::game_core::LinearMarkovGame {
        markov_cce::config::generate_game(spec).expect("reference game generates").0
    }
}

fn report(criterion: &str, ok: bool, details: &str) {
    println!("{} {criterion}: {details}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{criterion}: {details}");
}

fn suite_line(criterion: &str, r: &SuiteReport) {
    report(
        criterion,
        r.ok,
        &format!("{}/{} (need {}) — {}", r.passed, r.total, r.threshold, r.details),
    );
}

#[test]
fn criterion_1_exp3_regret_certificate() {
    suite_line("criterion 1 (EXP3 certificate)", &selftest::exp3_suite(0));
}

#[test]
fn criterion_2_magnitude_reduction() {
    suite_line("criterion 2 (magnitude reduction)", &selftest::magnitude_suite(0));
}

#[test]
fn criterion_3_matrix_concentration() {
    suite_line("criterion 3 (matrix concentration)", &selftest::matrix_suite(0));
}

#[test]
fn criterion_4_adaptive_freedman() {
    suite_line("criterion 4 (adaptive Freedman)", &selftest::freedman_suite(0));
}

#[test]
fn criterion_5_gap_pessimism() {
    suite_line(
        "criterion 5 (gap pessimism)",
        &selftest::gap_pessimism_suite(0, 200, 1024),
    );
}

#[test]
fn criterion_6_value_optimism_sandwich() {
    suite_line(
        "criterion 6 (value optimism sandwich)",
        &selftest::v_sandwich_suite(0, 100, 4096),
    );
}

/// Runs the driver for every reference seed and returns the per-seed
/// results (deterministic given the pinned configuration).
fn reference_runs(spec: &GeneratorSpec, t: usize) -> Vec<SeedRun> {
    let game = reference::game(spec);
    let schedule = reference::schedule();
    reference::SEEDS
        .iter()
        .map(|&seed| {
            cli::run_seed(&game, t, &schedule, reference::REPETITIONS, seed)
                .expect("driver run succeeds")
        })
        .collect()
}

fn checkpoint_regret(run: &SeedRun, t: usize) -> f64 {
    run.checkpoints
        .iter()
        .find(|c| c.t == t)
        .unwrap_or_else(|| panic!("checkpoint at t={t}"))
        .max_regret
}

fn convergence_check(label: &str, spec: &GeneratorSpec) -> (usize, f64, Vec<f64>) {
    let runs = reference_runs(spec, 2048);
    let ratios: Vec<f64> = runs
        .iter()
        .map(|r| checkpoint_regret(r, 2048) / checkpoint_regret(r, 128))
        .collect();
    let passes = ratios.iter().filter(|&&r| r <= 0.6).count();
    let worst_final = runs
        .iter()
        .map(|r| checkpoint_regret(r, 2048))
        .fold(0.0f64, f64::max);
    println!(
        "  {label}: ratios {:?}, worst final {worst_final:.4}",
        ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    (passes, worst_final, ratios)
}

#[test]
fn criterion_7_end_to_end_convergence() {
    let horizon = 2.0;
    let (oh_passes, oh_final, _) = convergence_check("one-hot", &reference::one_hot_spec());
    let (lr_passes, lr_final, _) = convergence_check("low-rank", &reference::low_rank_spec());
    let ok = oh_passes >= 4 && lr_passes >= 4 && oh_final <= 0.25 * horizon && lr_final <= 0.25 * horizon;
    report(
        "criterion 7 (end-to-end convergence)",
        ok,
        &format!(
            "ratio ≤ 0.6 on {oh_passes}/5 (one-hot) and {lr_passes}/5 (low-rank) seeds; \
             final averaged regret {oh_final:.4} / {lr_final:.4} (≤ {:.2})",
            0.25 * horizon
        ),
    );
}

fn violations_at(run: &SeedRun, t: usize) -> usize {
    run.records[t - 1].violations
}

#[test]
fn criterion_8_lazy_update_growth() {
    // Non-lazy epoch counts must grow sub-linearly:
    // violations(4T) − violations(T) ≤ violations(T) + 8 for T ∈ {512, 1024}.
    let spec = reference::one_hot_spec();
    let short = reference_runs(&spec, 2048);
    let long = reference_runs(&spec, 4096);
    let mut ok = true;
    let mut details = String::new();
    for (run_short, run_long) in short.iter().zip(&long) {
        let v512 = violations_at(run_short, 512);
        let v2048 = violations_at(run_short, 2048);
        let v1024 = violations_at(run_long, 1024);
        let v4096 = violations_at(run_long, 4096);
        let ok_512 = v2048 - v512 <= v512 + 8;
        let ok_1024 = v4096 - v1024 <= v1024 + 8;
        ok &= ok_512 && ok_1024;
        details.push_str(&format!(
            "seed {}: ({v512}→{v2048}{}, {v1024}→{v4096}{}) ",
            run_short.seed,
            if ok_512 { "" } else { "!" },
            if ok_1024 { "" } else { "!" },
        ));
    }
    report("criterion 8 (lazy-update growth)", ok, details.trim());
}

#[test]
fn criterion_9_byte_identical_metrics() {
    let config = ExperimentConfig {
        game: GameSource::Generator(reference::one_hot_spec()),
        t: 64,
        delta: reference::DELTA,
        r: Some(reference::REPETITIONS),
        overrides: Overrides {
            c_gamma: 0.01,
            gamma_cap: 0.15,
            gamma_floor: 0.0,
            eta_mult: 4.0,
            beta1_mult: 0.002,
            beta2_mult: 0.002,
            ..Overrides::default()
        },
        seeds: vec![8, 9],
        workers: 2,
        out: None,
    };
    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    cli::cmd_run(&config, dir_a.path()).expect("first run");
    cli::cmd_run(&config, dir_b.path()).expect("second run");
    let mut ok = true;
    let mut compared = 0usize;
    for name in ["metrics_8.jsonl", "metrics_9.jsonl", "policy_8.json", "policy_9.json", "summary.json"] {
        let a = std::fs::read(dir_a.path().join(name)).expect("output exists");
        let b = std::fs::read(dir_b.path().join(name)).expect("output exists");
        ok &= a == b;
        compared += 1;
    }
    report(
        "criterion 9 (determinism)",
        ok,
        &format!("{compared} output files byte-identical across two runs"),
    );
}
