//! Property suite behind `tgo-lab verify`.
//!
//! Each check returns a pass/fail verdict with a one-line detail. The fast
//! level skips the bias experiment and reports it as skipped.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::analysis::{
    bias_experiment, calibration_sweep, consistency_experiment, reference_env, shared_row_env,
    AnalysisConfig, CalibrationThreshold, PopulationProblem,
};
use crate::env::{bimodal_suite, make_tabular, RewardSpec, TabularEnv};
use crate::error::Result;
use crate::feedback::{
    confidence_weight, pseudo_label, ScoreModel, ScoreTransform, ScoredRecord, Threshold,
};
use crate::matrix::Matrix;
use crate::objective::{
    dpo_gradient_check, sft_gradient_check, tgo_gradient_check, tgo_loss, tgo_sample_loss,
    NumericMode, PreferencePair, TgoConfig,
};
use crate::policy::{log_partition_function, optimal_policy, TabularPolicy};
use crate::rng::{derive_seed, Stream};
use crate::trainer::{run_offline, run_on_dataset, simulate, Objective, TrainConfig};

/// Environments the identity checks draw.
pub const IDENTITY_ENVS: usize = 100;
/// Random batches per gradient check.
pub const GRADIENT_BATCHES: usize = 50;
/// Finite-difference step and tolerance for the gradient checks.
pub const GRADIENT_STEP: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Seed of the shipped bimodal training suite.
pub const SUITE_SEED: u64 = 2024;
pub const SUITE_SIZE: usize = 10;
/// Dataset size, batch and noise of the training checks.
pub const SUITE_SAMPLES: usize = 256;
pub const SUITE_NOISE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyLevel {
    Fast,
    Full,
}

impl fmt::Display for VerifyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerifyLevel::Fast => "fast",
            VerifyLevel::Full => "full",
        })
    }
}

impl FromStr for VerifyLevel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "fast" => Ok(VerifyLevel::Fast),
            "full" => Ok(VerifyLevel::Full),
            other => Err(format!(
                "unknown verify level `{other}` (expected fast or full)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Passed,
    Failed,
    Skipped,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Passed => "passed",
            CheckStatus::Failed => "failed",
            CheckStatus::Skipped => "skipped",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub level: VerifyLevel,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Failed)
    }

    pub fn failed_names(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|c| c.status == CheckStatus::Failed)
            .map(|c| c.name)
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Columns `check,status,detail,seconds`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["check", "status", "detail", "seconds"])?;
        for c in &self.checks {
            w.write_record([
                c.name,
                &c.status.to_string(),
                &c.detail,
                &format!("{:.3}", c.seconds),
            ])?;
        }
        w.flush().map_err(|e| crate::Error::io("<csv>", e))
    }
}

type Verdict = std::result::Result<String, String>;

struct Check {
    name: &'static str,
    full_only: bool,
    run: fn(u64) -> Verdict,
}

const CHECKS: &[Check] = &[
    Check {
        name: "monotonicity",
        full_only: false,
        run: check_monotonicity,
    },
    Check {
        name: "oracle_decision_rule",
        full_only: false,
        run: check_oracle_decision_rule,
    },
    Check {
        name: "reparameterization",
        full_only: false,
        run: check_reparameterization,
    },
    Check {
        name: "dpo_cancellation",
        full_only: false,
        run: check_dpo_cancellation,
    },
    Check {
        name: "gradient_tgo",
        full_only: false,
        run: check_gradient_tgo,
    },
    Check {
        name: "gradient_dpo",
        full_only: false,
        run: check_gradient_dpo,
    },
    Check {
        name: "gradient_sft",
        full_only: false,
        run: check_gradient_sft,
    },
    Check {
        name: "anchor_ln2",
        full_only: false,
        run: check_anchor,
    },
    Check {
        name: "weight_linearity",
        full_only: false,
        run: check_weight_linearity,
    },
    Check {
        name: "label_direction",
        full_only: false,
        run: check_label_direction,
    },
    Check {
        name: "calibration_decay",
        full_only: false,
        run: check_calibration_decay,
    },
    Check {
        name: "consistency_rate",
        full_only: false,
        run: check_consistency_rate,
    },
    Check {
        name: "training_efficacy",
        full_only: false,
        run: check_training_efficacy,
    },
    Check {
        name: "tgo_vs_sft",
        full_only: false,
        run: check_tgo_vs_sft,
    },
    Check {
        name: "bias_rate",
        full_only: true,
        run: check_bias_rate,
    },
];

/// Names of every check in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

pub fn run_verify(level: VerifyLevel, seed: u64) -> VerifyReport {
    let checks = CHECKS
        .iter()
        .enumerate()
        .map(|(i, check)| {
            if check.full_only && level == VerifyLevel::Fast {
                return CheckResult {
                    name: check.name,
                    status: CheckStatus::Skipped,
                    detail: "full level only".to_string(),
                    seconds: 0.0,
                };
            }
            let start = Instant::now();
            let verdict = (check.run)(derive_seed(seed, i as u64));
            let seconds = start.elapsed().as_secs_f64();
            let (status, detail) = match verdict {
                Ok(d) => (CheckStatus::Passed, d),
                Err(d) => (CheckStatus::Failed, d),
            };
            CheckResult {
                name: check.name,
                status,
                detail,
                seconds,
            }
        })
        .collect();
    VerifyReport { level, checks }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn random_env(
    stream: &mut Stream,
    max_k: usize,
    max_m: usize,
) -> std::result::Result<TabularEnv, String> {
    let k = stream.random_range(1..=max_k);
    let m = stream.random_range(2..=max_m);
    make_tabular(stream.next_u64(), k, m, RewardSpec::UniformRandom).map_err(err)
}

fn random_policy(stream: &mut Stream, k: usize, m: usize) -> TabularPolicy {
    let logits = Matrix::from_fn(k, m, |_, _| stream.sample::<f64, _>(StandardNormal));
    TabularPolicy::new(logits).expect("finite logits")
}

fn with_reward(env: &TabularEnv, x: usize, y: usize, r: f64) -> Result<TabularEnv> {
    let mut rewards = env.rewards().clone();
    rewards.row_mut(x)[y] = r;
    TabularEnv::new(
        rewards,
        env.ref_logits().clone(),
        env.prompt_weights().to_vec(),
    )
}

fn check_monotonicity(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let mut min_step = f64::INFINITY;
    for _ in 0..IDENTITY_ENVS {
        let env = random_env(&mut stream, 5, 8)?;
        let beta = stream.random_range(0.25..2.0);
        let x = stream.random_range(0..env.num_prompts());
        let y = stream.random_range(0..env.num_outcomes());
        let reference = env.reference_policy();
        let mut prev = f64::NEG_INFINITY;
        for j in 0..20 {
            let r = -2.0 + 4.0 * j as f64 / 19.0;
            let swept = with_reward(&env, x, y, r).map_err(err)?;
            let star = optimal_policy(&reference, &swept, beta).map_err(err)?;
            let ratio =
                (star.log_prob(x, y).map_err(err)? - reference.log_prob(x, y).map_err(err)?).exp();
            if j > 0 {
                let step = ratio - prev;
                min_step = min_step.min(step);
                if step <= 1e-12 {
                    return Err(format!("ratio step {step:e} at reward {r}"));
                }
            }
            prev = ratio;
        }
    }
    Ok(format!("min consecutive ratio increase {min_step:.3e}"))
}

fn check_oracle_decision_rule(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let mut checked = 0usize;
    let mut violations = 0usize;
    for _ in 0..IDENTITY_ENVS {
        let env = random_env(&mut stream, 5, 8)?;
        let beta = stream.random_range(0.25..2.0);
        let reference = env.reference_policy();
        let star = optimal_policy(&reference, &env, beta).map_err(err)?;
        for x in 0..env.num_prompts() {
            let tau = beta * log_partition_function(&reference, &env, beta, x).map_err(err)?;
            for y in 0..env.num_outcomes() {
                let gap = env.reward(x, y) - tau;
                if gap.abs() < 1e-12 {
                    continue;
                }
                let log_ratio =
                    star.log_prob(x, y).map_err(err)? - reference.log_prob(x, y).map_err(err)?;
                checked += 1;
                if (log_ratio > 0.0) != (gap > 0.0) {
                    violations += 1;
                }
            }
        }
    }
    if violations == 0 {
        Ok(format!("{checked} cells, no violations"))
    } else {
        Err(format!(
            "{violations} of {checked} cells violate the decision rule"
        ))
    }
}

fn check_reparameterization(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let mut worst = 0f64;
    for _ in 0..IDENTITY_ENVS {
        let env = random_env(&mut stream, 5, 8)?;
        let beta = stream.random_range(0.25..2.0);
        let reference = env.reference_policy();
        let star = optimal_policy(&reference, &env, beta).map_err(err)?;
        for x in 0..env.num_prompts() {
            let log_z = log_partition_function(&reference, &env, beta, x).map_err(err)?;
            for y in 0..env.num_outcomes() {
                let log_ratio =
                    star.log_prob(x, y).map_err(err)? - reference.log_prob(x, y).map_err(err)?;
                worst = worst.max((beta * log_ratio + beta * log_z - env.reward(x, y)).abs());
            }
        }
    }
    if worst <= 1e-10 {
        Ok(format!("max residual {worst:.3e}"))
    } else {
        Err(format!("max residual {worst:.3e} exceeds 1e-10"))
    }
}

fn check_dpo_cancellation(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let mut worst = 0f64;
    let mut pairs = 0usize;
    while pairs < 10_000 {
        let env = random_env(&mut stream, 5, 8)?;
        let beta = stream.random_range(0.25..2.0);
        let reference = env.reference_policy();
        let star = optimal_policy(&reference, &env, beta).map_err(err)?;
        for _ in 0..100 {
            let x = stream.random_range(0..env.num_prompts());
            let w = stream.random_range(0..env.num_outcomes());
            let l = stream.random_range(0..env.num_outcomes());
            let implied = |y: usize| -> std::result::Result<f64, String> {
                Ok(beta
                    * (star.log_prob(x, y).map_err(err)?
                        - reference.log_prob(x, y).map_err(err)?))
            };
            let gap = implied(w)? - implied(l)?;
            worst = worst.max((gap - (env.reward(x, w) - env.reward(x, l))).abs());
            pairs += 1;
        }
    }
    if worst <= 1e-10 {
        Ok(format!("{pairs} pairs, max residual {worst:.3e}"))
    } else {
        Err(format!("max residual {worst:.3e} exceeds 1e-10"))
    }
}

struct GradientCase {
    policy: TabularPolicy,
    reference: TabularPolicy,
    records: Vec<ScoredRecord>,
    threshold: Threshold,
    config: TgoConfig,
}

fn gradient_case(stream: &mut Stream) -> GradientCase {
    let k = stream.random_range(1..=4);
    let m = stream.random_range(2..=6);
    let policy = random_policy(stream, k, m);
    let reference = random_policy(stream, k, m);
    let b = stream.random_range(1..=16);
    let records = (0..b)
        .map(|_| ScoredRecord {
            prompt_id: stream.random_range(0..k),
            outcome: stream.random_range(0..m),
            score: stream.sample(StandardNormal),
        })
        .collect();
    let threshold = Threshold::fixed(stream.random_range(-0.5..0.5));
    let config = TgoConfig {
        beta: stream.random_range(0.25..2.0),
        c: stream.random_range(0.0..5.0),
        ..TgoConfig::default()
    };
    GradientCase {
        policy,
        reference,
        records,
        threshold,
        config,
    }
}

fn gradient_verdict(worst: f64) -> Verdict {
    if worst <= GRADIENT_TOLERANCE {
        Ok(format!(
            "{GRADIENT_BATCHES} batches, max relative error {worst:.3e}"
        ))
    } else {
        Err(format!(
            "max relative error {worst:.3e} exceeds {GRADIENT_TOLERANCE:e}"
        ))
    }
}

fn check_gradient_tgo(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let mut worst = 0f64;
    for i in 0..GRADIENT_BATCHES {
        let mut case = gradient_case(&mut stream);
        if i % 2 == 1 {
            case.config.numeric_mode = NumericMode::ClippedSigmoid { eps: 1e-6 };
        }
        let e = tgo_gradient_check(
            &case.policy,
            &case.reference,
            &case.records,
            &case.threshold,
            &case.config,
            GRADIENT_STEP,
        )
        .map_err(err)?;
        worst = worst.max(e);
    }
    gradient_verdict(worst)
}

fn check_gradient_dpo(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let mut worst = 0f64;
    for _ in 0..GRADIENT_BATCHES {
        let case = gradient_case(&mut stream);
        let (k, m) = case.policy.shape();
        let pairs: Vec<PreferencePair> = (0..stream.random_range(1..=16))
            .map(|_| {
                let winner = stream.random_range(0..m);
                let loser = (winner + stream.random_range(1..m)) % m;
                PreferencePair {
                    prompt: stream.random_range(0..k),
                    winner,
                    loser,
                }
            })
            .collect();
        let e = dpo_gradient_check(
            &case.policy,
            &case.reference,
            &pairs,
            case.config.beta,
            GRADIENT_STEP,
        )
        .map_err(err)?;
        worst = worst.max(e);
    }
    gradient_verdict(worst)
}

fn check_gradient_sft(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let mut worst = 0f64;
    for _ in 0..GRADIENT_BATCHES {
        let case = gradient_case(&mut stream);
        let positives: Vec<(usize, usize)> = case
            .records
            .iter()
            .map(|r| (r.prompt_id, r.outcome))
            .collect();
        let e = sft_gradient_check(&case.policy, &positives, GRADIENT_STEP).map_err(err)?;
        worst = worst.max(e);
    }
    gradient_verdict(worst)
}

fn check_anchor(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let env = random_env(&mut stream, 5, 8)?;
    let reference = env.reference_policy();
    let tau = stream.random_range(-1.0..1.0);
    let record = ScoredRecord {
        prompt_id: 0,
        outcome: 1,
        score: tau,
    };
    let config = TgoConfig::default();
    let batch = tgo_loss(
        &reference,
        &reference,
        &[record],
        &Threshold::fixed(tau),
        &config,
    )
    .map_err(err)?
    .total;
    let worst = (batch - std::f64::consts::LN_2)
        .abs()
        .max((tgo_sample_loss(0.0, 0.0, &config) - std::f64::consts::LN_2).abs());
    if worst <= 1e-12 {
        Ok(format!("|loss - ln 2| = {worst:.3e}"))
    } else {
        Err(format!("|loss - ln 2| = {worst:.3e} exceeds 1e-12"))
    }
}

fn check_weight_linearity(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let tau = Threshold::fixed(stream.random_range(-1.0..1.0));
    for c in [0.0, 0.5, 1.0, 5.0] {
        let mut prev = f64::NEG_INFINITY;
        for j in 0..=40 {
            let gap = 0.1 * j as f64;
            for sign in [1.0, -1.0] {
                let w = confidence_weight(tau.value + sign * gap, &tau, c);
                let expected = 1.0 + c * gap;
                if (w - expected).abs() > 1e-12 * (1.0 + expected) {
                    return Err(format!(
                        "w(gap {}) = {w}, expected {expected} at c = {c}",
                        sign * gap
                    ));
                }
            }
            let w = confidence_weight(tau.value + gap, &tau, c);
            if c > 0.0 && j > 0 && w <= prev {
                return Err(format!("weight not increasing in |s - tau| at c = {c}"));
            }
            prev = w;
        }
    }
    Ok("w = 1 + c|s - tau| for c in {0, 0.5, 1, 5}".to_string())
}

fn check_label_direction(seed: u64) -> Verdict {
    let mut stream = Stream::new(seed);
    let tau = Threshold::fixed(stream.random_range(-1.0..1.0));
    if !pseudo_label(tau.value, &tau)
        || pseudo_label(tau.value - 1e-9, &tau)
        || !pseudo_label(tau.value + 1.0, &tau)
    {
        return Err("pseudo-label is not 1[s >= tau]".to_string());
    }
    let env = random_env(&mut stream, 5, 8)?;
    let reference = env.reference_policy();
    let config = TgoConfig::default();
    for (score, raises) in [(tau.value + 1.0, true), (tau.value - 1.0, false)] {
        let record = ScoredRecord {
            prompt_id: 0,
            outcome: 0,
            score,
        };
        let loss = tgo_loss(&reference, &reference, &[record], &tau, &config).map_err(err)?;
        let mut logits = reference.logits().clone();
        logits.axpy(-1e-3, &loss.gradient);
        let stepped = TabularPolicy::new(logits).map_err(err)?;
        let delta = stepped.log_prob(0, 0).map_err(err)? - reference.log_prob(0, 0).map_err(err)?;
        if (delta > 0.0) != raises {
            return Err(format!(
                "descent step moves log-prob by {delta:e} for score {score}"
            ));
        }
    }
    Ok("positives gain and negatives lose probability".to_string())
}

/// Noise scales of the calibration check, from noisiest to noiseless.
pub const CALIBRATION_SCALES: [f64; 5] = [1.0, 0.3, 0.1, 0.03, 0.0];

fn check_calibration_decay(seed: u64) -> Verdict {
    let env = shared_row_env(seed, 3, 6).map_err(err)?;
    let reference = env.reference_policy();
    let tau = beta_tau(&reference, &env, 1.0)?;
    let rows = calibration_sweep(
        &env,
        1.0,
        ScoreTransform::Identity,
        &CALIBRATION_SCALES,
        500,
        20,
        CalibrationThreshold::Fixed(tau),
        seed,
    )
    .map_err(err)?;
    for w in rows.windows(2) {
        let slack = w[0].std_error.max(w[1].std_error);
        if w[1].mean_error > w[0].mean_error + slack {
            return Err(format!(
                "error rises from {:.4} to {:.4} as noise drops to {}",
                w[0].mean_error, w[1].mean_error, w[1].noise_scale
            ));
        }
    }
    let last = rows.last().expect("nonempty");
    if last.mean_error != 0.0 {
        return Err(format!("error {} at zero noise", last.mean_error));
    }
    let errors: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.4}", r.mean_error))
        .collect();
    Ok(format!("errors {}", errors.join(" ")))
}

fn beta_tau(
    reference: &TabularPolicy,
    env: &TabularEnv,
    beta: f64,
) -> std::result::Result<f64, String> {
    Ok(beta * log_partition_function(reference, env, beta, 0).map_err(err)?)
}

/// Sample sizes of the consistency and bias checks.
pub const RATE_SIZES: [usize; 3] = [100, 1_000, 10_000];

fn population() -> std::result::Result<(PopulationProblem, Matrix), String> {
    let env = reference_env();
    let problem = PopulationProblem::new(
        &env,
        &env.reference_policy(),
        &ScoreModel::default(),
        &AnalysisConfig::default(),
    )
    .map_err(err)?;
    let theta = problem.population_fit().map_err(err)?.theta;
    Ok((problem, theta))
}

fn check_consistency_rate(seed: u64) -> Verdict {
    let (problem, theta) = population()?;
    let report = consistency_experiment(&problem, &theta, &RATE_SIZES, 20, seed).map_err(err)?;
    if !report.failures.is_empty() {
        return Err(format!("{} replicate fits failed", report.failures.len()));
    }
    let decreasing = report.mean_param_error.windows(2).all(|w| w[1] < w[0]);
    let slope = report.loglog_slope;
    if decreasing && (-0.65..=-0.35).contains(&slope) {
        Ok(format!("slope {slope:.3}"))
    } else {
        Err(format!(
            "slope {slope:.3}, errors {:?}",
            report.mean_param_error
        ))
    }
}

fn check_bias_rate(seed: u64) -> Verdict {
    let (problem, theta) = population()?;
    let report = bias_experiment(&problem, &theta, &RATE_SIZES, 500, seed).map_err(err)?;
    if !report.failures.is_empty() {
        return Err(format!("{} replicate fits failed", report.failures.len()));
    }
    let slope = report.fitted_slope;
    if (-1.4..=-0.6).contains(&slope) {
        Ok(format!(
            "slope {slope:.3} (raw {:.3})",
            report.raw_fitted_slope
        ))
    } else {
        Err(format!("slope {slope:.3}, norms {:?}", report.error_norm))
    }
}

/// Training configuration of the shipped bimodal suite.
pub fn suite_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

pub fn suite_score_model() -> ScoreModel {
    ScoreModel::gaussian(ScoreTransform::Identity, SUITE_NOISE)
}

fn check_training_efficacy(seed: u64) -> Verdict {
    let envs = bimodal_suite(SUITE_SEED, SUITE_SIZE);
    let model = suite_score_model();
    let (mut improved, mut kl_halved, mut runs) = (0, 0, 0);
    for (e, env) in envs.iter().enumerate() {
        for s in 0..5 {
            let cfg = suite_train_config(derive_seed(seed, (e * 5 + s) as u64));
            let report = run_offline(env, &env.reference_policy(), &model, SUITE_SAMPLES, &cfg)
                .map_err(err)?;
            runs += 1;
            if report.final_mean_reward() > report.initial_mean_reward() {
                improved += 1;
            }
            if report.final_kl_to_optimal() <= 0.5 * report.kl_to_optimal_curve[0] {
                kl_halved += 1;
            }
        }
    }
    let detail = format!("reward up in {improved}/{runs}, KL halved in {kl_halved}/{runs}");
    if improved * 10 >= runs * 9 && kl_halved * 10 >= runs * 8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn check_tgo_vs_sft(seed: u64) -> Verdict {
    let envs = bimodal_suite(SUITE_SEED, SUITE_SIZE);
    let model = suite_score_model();
    let mut wins = 0;
    let runs = 25;
    for r in 0..runs {
        let env = &envs[r % envs.len()];
        let reference = env.reference_policy();
        let tgo = suite_train_config(derive_seed(seed, r as u64));
        let sft = TrainConfig {
            objective: Objective::Sft,
            ..tgo
        };
        let (data, tau) = simulate(env, &reference, &model, SUITE_SAMPLES, &tgo).map_err(err)?;
        let a = run_on_dataset(env, &reference, &data, tau, &model, &tgo).map_err(err)?;
        let b = run_on_dataset(env, &reference, &data, tau, &model, &sft).map_err(err)?;
        if a.final_mean_reward() >= b.final_mean_reward() {
            wins += 1;
        }
    }
    let detail = format!("TGO >= SFT in {wins}/{runs}");
    if wins * 10 >= runs * 8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
