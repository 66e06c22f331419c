//! Command implementations behind the binary: game generation, experiment
//! runs, policy evaluation, and the statistical self-test.
//!
//! Every command is an ordinary function so integration tests can drive
//! them without spawning processes. File outputs are deterministic: records
//! are written in seed order with a fixed JSON field order, so two runs of
//! the same configuration produce byte-identical metrics.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::avlpr::{self, EpochRecord, Schedule};
use crate::config::{generate_game, ExperimentConfig, GameSource, GeneratorSpec};
use crate::evaluation::{best_response, cce_regret_weighted, exact_value};
use crate::game_core::{validate_game, GameSpec, LinearMarkovGame, MarkovJointPolicy};
use crate::rng::StreamFactory;
use crate::selftest::{self, SuiteReport};

/// Version stamp for every serialized artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Serialized output policy: a weighted mixture of Markov joint policies.
#[derive(Serialize, Deserialize)]
pub struct PolicyFile {
    pub schema_version: u32,
    pub components: Vec<PolicyComponent>,
}

/// One mixture component with its weight.
#[derive(Serialize, Deserialize)]
pub struct PolicyComponent {
    pub weight: f64,
    pub policy: MarkovJointPolicy,
}

/// Exact-regret measurement of the running output mixture at an epoch
/// checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Epoch the checkpoint was taken at; the mixture averages policies
    /// `0..=t`.
    pub t: usize,
    /// Per-agent equilibrium regret of the mixture.
    pub regret: Vec<f64>,
    /// Maximum over agents (the headline number).
    pub max_regret: f64,
}

/// Everything produced by one seed of an experiment.
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<Checkpoint>,
    /// Output mixture, deduplicated into weighted components.
    pub policy: PolicyFile,
}

/// Per-seed digest written into `summary.json`.
#[derive(Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Non-lazy (rebuild) epochs.
    pub violations: usize,
    /// Trajectories consumed in total.
    pub samples_consumed: u64,
    pub final_regret: Vec<f64>,
    pub final_max_regret: f64,
    pub checkpoints: Vec<Checkpoint>,
}

/// Generate a synthetic game, validate it, and write it as a game spec.
///
/// Returns the linear-factorization residual (0 for one-hot games) and any
/// validation findings.
pub fn cmd_gen_game(spec: &GeneratorSpec, out: &Path) -> Result<(f64, Vec<String>)> {
    let (game, residual) = generate_game(spec).context("game generation failed")?;
    let findings = validate_game(&game);
    if findings.iter().any(|f| !f.starts_with("warning")) {
        bail!("generated game failed validation: {findings:?}");
    }
    let json = serde_json::to_string_pretty(&GameSpec::from_game(&game))?;
    fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    Ok((residual, findings))
}

/// Load the experiment's game from either a file or a generator spec.
pub fn load_game(source: &GameSource) -> Result<LinearMarkovGame> {
    let game = match source {
        GameSource::File { path } => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading game spec {}", path.display()))?;
            let spec: GameSpec = serde_json::from_str(&text).context("parsing game spec")?;
            spec.into_game().context("building game from spec")?
        }
        GameSource::Generator(spec) => generate_game(spec).context("generating game")?.0,
    };
    let findings = validate_game(&game);
    let errors: Vec<&String> = findings.iter().filter(|f| !f.starts_with("warning")).collect();
    if !errors.is_empty() {
        bail!("game failed validation: {errors:?}");
    }
    Ok(game)
}

/// Deduplicate a policy list by pointer identity into weighted components
/// (lazy epochs alias the policy of their last rebuild).
fn dedup_components(policies: &[Arc<MarkovJointPolicy>]) -> Vec<(f64, Arc<MarkovJointPolicy>)> {
    let w = 1.0 / policies.len() as f64;
    let mut components: Vec<(f64, Arc<MarkovJointPolicy>)> = Vec::new();
    for p in policies {
        if let Some(entry) = components.iter_mut().find(|(_, q)| Arc::ptr_eq(q, p)) {
            entry.0 += w;
        } else {
            components.push((w, Arc::clone(p)));
        }
    }
    components
}

/// Exact per-agent regret of the uniform mixture over `policies`.
pub fn mixture_regret(
    game: &LinearMarkovGame,
    policies: &[Arc<MarkovJointPolicy>],
) -> Vec<f64> {
    let components = dedup_components(policies);
    let weighted: Vec<(f64, &MarkovJointPolicy)> =
        components.iter().map(|(w, p)| (*w, p.as_ref())).collect();
    cce_regret_weighted(game, &weighted)
}

/// Checkpoint epochs: powers of two up to `t`, plus `t` itself.
fn checkpoint_epochs(t: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 1usize;
    while p < t {
        out.push(p);
        p *= 2;
    }
    out.push(t);
    out
}

/// Run one seed of an experiment and measure regret at checkpoints.
pub fn run_seed(
    game: &LinearMarkovGame,
    t: usize,
    schedule: &Schedule,
    r: usize,
    seed: u64,
) -> Result<SeedRun> {
    let streams = StreamFactory::new(seed);
    let output = avlpr::run(game, t, schedule, r, &streams).context("driver run failed")?;
    let checkpoints = checkpoint_epochs(t)
        .into_iter()
        .map(|ct| {
            let regret = mixture_regret(game, &output.policies[..=ct]);
            let max_regret = regret.iter().cloned().fold(0.0f64, f64::max);
            Checkpoint { t: ct, regret, max_regret }
        })
        .collect();
    let components = dedup_components(&output.policies)
        .into_iter()
        .map(|(weight, policy)| PolicyComponent { weight, policy: (*policy).clone() })
        .collect();
    Ok(SeedRun {
        seed,
        records: output.records,
        checkpoints,
        policy: PolicyFile { schema_version: SCHEMA_VERSION, components },
    })
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    schema_version: u32,
    seed: u64,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Write one seed's outputs: `metrics_<seed>.jsonl` and
/// `policy_<seed>.json`.
fn write_seed_outputs(dir: &Path, run: &SeedRun) -> Result<()> {
    let metrics_path = dir.join(format!("metrics_{}.jsonl", run.seed));
    let mut file = fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    for record in &run.records {
        let line =
            serde_json::to_string(&MetricsLine { schema_version: SCHEMA_VERSION, seed: run.seed, record })?;
        writeln!(file, "{line}")?;
    }
    let policy_path = dir.join(format!("policy_{}.json", run.seed));
    fs::write(&policy_path, serde_json::to_string(&run.policy)?)?;
    Ok(())
}

/// Run a full experiment: every seed independently (optionally in
/// parallel), outputs written in seed order plus a `summary.json`.
pub fn cmd_run(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<SeedRun>> {
    config.validate().map_err(|e| anyhow::anyhow!(e))?;
    let game = load_game(&config.game)?;
    let schedule = Schedule { delta: config.delta, constants: (&config.overrides).into() };
    let r = config.repetitions();
    fs::create_dir_all(out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .context("building worker pool")?;
    let runs: Result<Vec<SeedRun>> = pool.install(|| {
        use rayon::prelude::*;
        config
            .seeds
            .par_iter()
            .map(|&seed| run_seed(&game, config.t, &schedule, r, seed))
            .collect()
    });
    let runs = runs?;

    let mut summaries = Vec::with_capacity(runs.len());
    for run in &runs {
        write_seed_outputs(out_dir, run)?;
        let last = run.records.last().expect("at least one epoch");
        let final_cp = run.checkpoints.last().expect("at least one checkpoint");
        summaries.push(SeedSummary {
            seed: run.seed,
            violations: last.violations,
            samples_consumed: last.samples_consumed,
            final_regret: final_cp.regret.clone(),
            final_max_regret: final_cp.max_regret,
            checkpoints: run.checkpoints.clone(),
        });
    }
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summaries)?)?;
    Ok(runs)
}

/// Evaluation report for a stored mixture policy.
#[derive(Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Per-agent value of the mixture at the initial state.
    pub value: Vec<f64>,
    /// Per-agent best-response value against the mixture components.
    pub best_response_value: Vec<f64>,
    /// Per-agent equilibrium regret (value minus best response, averaged
    /// over components).
    pub regret: Vec<f64>,
    pub max_regret: f64,
}

/// Evaluate a stored policy file against a game: exact values, exact best
/// responses, exact regret.
pub fn cmd_eval(game_path: &Path, policy_path: &Path) -> Result<EvalReport> {
    let game = load_game(&GameSource::File { path: PathBuf::from(game_path) })?;
    let text = fs::read_to_string(policy_path)
        .with_context(|| format!("reading policy {}", policy_path.display()))?;
    let policy: PolicyFile = serde_json::from_str(&text).context("parsing policy file")?;
    if policy.components.is_empty() {
        bail!("policy file has no components");
    }
    let total_w: f64 = policy.components.iter().map(|c| c.weight).sum();
    let m = game.num_agents();
    let mut value = vec![0.0; m];
    let mut br_value = vec![0.0; m];
    for c in &policy.components {
        if let Some(err) = c.policy.validate(&game).first() {
            bail!("invalid policy component: {err}");
        }
        let v = exact_value(&game, &c.policy);
        for agent in 0..m {
            let br = best_response(&game, agent, &c.policy);
            value[agent] += c.weight / total_w * v.at_initial(&game, agent);
            br_value[agent] += c.weight / total_w * br.at_initial(&game);
        }
    }
    let regret: Vec<f64> = value.iter().zip(&br_value).map(|(v, b)| v - b).collect();
    let max_regret = regret.iter().cloned().fold(0.0f64, f64::max);
    Ok(EvalReport { schema_version: SCHEMA_VERSION, value, best_response_value: br_value, regret, max_regret })
}

/// Names of the available self-test suites, in execution order.
pub const SUITES: &[&str] =
    &["exp3", "magnitude", "matrix", "freedman", "gap-pessimism", "v-sandwich"];

/// Run the named self-test suites (all when `names` is empty).
///
/// The heavier game-level suites (`gap-pessimism`, `v-sandwich`) run at the
/// budgets used for acceptance: 200 calls at K = 1024 and 100 trials at
/// K = 4096 respectively.
pub fn cmd_selftest(names: &[String], seed: u64) -> Result<Vec<SuiteReport>> {
    let selected: Vec<&str> = if names.is_empty() {
        SUITES.to_vec()
    } else {
        names.iter().map(String::as_str).collect()
    };
    let mut reports = Vec::new();
    for name in selected {
        let report = match name {
            "exp3" => selftest::exp3_suite(seed),
            "magnitude" => selftest::magnitude_suite(seed),
            "matrix" => selftest::matrix_suite(seed),
            "freedman" => selftest::freedman_suite(seed),
            "gap-pessimism" => selftest::gap_pessimism_suite(seed, 200, 1024),
            "v-sandwich" => selftest::v_sandwich_suite(seed, 100, 4096),
            other => bail!("unknown suite {other:?}; available: {SUITES:?}"),
        };
        reports.push(report);
    }
    Ok(reports)
}
