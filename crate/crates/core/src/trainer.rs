//! Offline training loop: freeze the reference, score one dataset drawn from
//! it, estimate the threshold once, then run epochs of shuffled minibatch
//! updates on the tabular logits.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::env::{sample_dataset, TabularEnv};
use crate::error::{Error, Result};
use crate::feedback::{
    estimate_threshold, proxy_threshold, pseudo_label, score_dataset, QuantileMethod, ScoreModel,
    ScoredDataset, ScoredRecord, Threshold,
};
use crate::matrix::Matrix;
use crate::objective::{dpo_loss, sft_loss, tgo_loss, LossBreakdown, PreferencePair, TgoConfig};
use crate::policy::{expected_kl, optimal_policy, TabularPolicy};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum with coefficient `μ ∈ [0, 1)`.
    SgdMomentum(f64),
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimizer::Sgd => f.write_str("sgd"),
            Optimizer::SgdMomentum(mu) => write!(f, "sgd_momentum:{mu:?}"),
        }
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "sgd" {
            return Ok(Optimizer::Sgd);
        }
        let mu = s
            .strip_prefix("sgd_momentum:")
            .ok_or_else(|| format!("optimizer must be sgd or sgd_momentum:<mu>, got `{s}`"))?;
        let mu: f64 = mu.parse().map_err(|e| format!("bad momentum: {e}"))?;
        if !(0.0..1.0).contains(&mu) {
            return Err(format!("momentum must lie in [0, 1), got {mu}"));
        }
        Ok(Optimizer::SgdMomentum(mu))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    #[default]
    Tgo,
    /// Pairs formed within each prompt from the scored data.
    Dpo,
    /// Likelihood on pseudo-positive records only.
    Sft,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Tgo => "tgo",
            Objective::Dpo => "dpo",
            Objective::Sft => "sft",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "tgo" => Ok(Objective::Tgo),
            "dpo" => Ok(Objective::Dpo),
            "sft" => Ok(Objective::Sft),
            other => Err(format!("unknown objective `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Copy the current policy into the reference after every epoch.
    pub refresh_reference: bool,
    /// On refresh, re-estimate the threshold from a fresh proxy set drawn
    /// from the new reference. The training scores are never recomputed.
    pub reestimate_threshold_on_refresh: bool,
    pub quantile_method: QuantileMethod,
    pub seed: u64,
    pub objective: Objective,
    pub tgo: TgoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 30,
            learning_rate: 0.1,
            optimizer: Optimizer::Sgd,
            refresh_reference: false,
            reestimate_threshold_on_refresh: true,
            quantile_method: QuantileMethod::LinearInterpolation,
            seed: 0,
            objective: Objective::Tgo,
            tgo: TgoConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be a nonnegative finite number, got {}",
                self.learning_rate
            )));
        }
        if let Optimizer::SgdMomentum(mu) = self.optimizer {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::invalid(format!(
                    "momentum must lie in [0, 1), got {mu}"
                )));
            }
        }
        self.tgo.validate()
    }
}

/// Diagnostics of one run. Epoch curves have `epochs + 1` entries: index 0 is
/// the initial policy, index `e` the policy after epoch `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    /// Epoch of each entry in `loss_curve` (1-based).
    pub step_epochs: Vec<usize>,
    pub mean_reward_curve: Vec<f64>,
    /// `KL(π_θ ‖ π_ref)` against the reference in force during that epoch.
    pub kl_to_ref_curve: Vec<f64>,
    /// `KL(π_θ ‖ π*)` with `π*` built from the initial reference.
    pub kl_to_optimal_curve: Vec<f64>,
    /// Threshold in force during each epoch; index 0 is the initial estimate.
    pub threshold_history: Vec<Threshold>,
    pub final_policy: TabularPolicy,
}

impl TrainReport {
    /// Columns `step,epoch,loss`.
    pub fn write_steps_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "epoch", "loss"])?;
        for (i, (loss, epoch)) in self.loss_curve.iter().zip(&self.step_epochs).enumerate() {
            w.write_record([(i + 1).to_string(), epoch.to_string(), format!("{loss:?}")])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Columns `epoch,mean_reward,kl_to_ref,kl_to_optimal,threshold`.
    pub fn write_epochs_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "epoch",
            "mean_reward",
            "kl_to_ref",
            "kl_to_optimal",
            "threshold",
        ])?;
        for e in 0..self.mean_reward_curve.len() {
            let tau = self.threshold_history[e.min(self.threshold_history.len() - 1)].value;
            w.write_record([
                e.to_string(),
                format!("{:?}", self.mean_reward_curve[e]),
                format!("{:?}", self.kl_to_ref_curve[e]),
                format!("{:?}", self.kl_to_optimal_curve[e]),
                format!("{tau:?}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn initial_mean_reward(&self) -> f64 {
        self.mean_reward_curve[0]
    }

    pub fn final_mean_reward(&self) -> f64 {
        *self
            .mean_reward_curve
            .last()
            .expect("curve has the initial entry")
    }

    pub fn final_kl_to_optimal(&self) -> f64 {
        *self
            .kl_to_optimal_curve
            .last()
            .expect("curve has the initial entry")
    }
}

/// Exact reward distribution summary of a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvaluation {
    pub mean_reward: f64,
    pub median_reward: f64,
    /// Deciles 0.1, 0.2, …, 0.9.
    pub reward_quantiles: Vec<f64>,
}

pub const DECILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Mean and quantiles of the reward under `x ~ weights, y ~ π(·|x)`.
///
/// Quantiles are lower quantiles of the discrete distribution: the smallest
/// reward whose cumulative mass reaches `q`.
pub fn evaluate_policy(env: &TabularEnv, policy: &TabularPolicy) -> Result<PolicyEvaluation> {
    policy.check_env(env)?;
    let mut atoms = Vec::with_capacity(env.num_prompts() * env.num_outcomes());
    for (x, wx) in env.prompt_weights().iter().enumerate() {
        for (y, p) in policy.probs(x).into_iter().enumerate() {
            atoms.push((env.reward(x, y), wx * p));
        }
    }
    let mean_reward = atoms.iter().map(|(r, m)| r * m).sum();
    Ok(PolicyEvaluation {
        mean_reward,
        median_reward: weighted_quantile(&mut atoms, 0.5),
        reward_quantiles: DECILES
            .iter()
            .map(|q| weighted_quantile(&mut atoms, *q))
            .collect(),
    })
}

/// Exact mean reward; cheaper than [`evaluate_policy`].
pub fn mean_reward(env: &TabularEnv, policy: &TabularPolicy) -> Result<f64> {
    policy.check_env(env)?;
    let mut total = 0.0;
    for (x, wx) in env.prompt_weights().iter().enumerate() {
        let row: f64 = policy
            .probs(x)
            .iter()
            .zip(env.rewards().row(x))
            .map(|(p, r)| p * r)
            .sum();
        total += wx * row;
    }
    Ok(total)
}

/// Lower `q`-quantile of weighted atoms `(value, mass)`; sorts in place.
pub fn weighted_quantile(atoms: &mut [(f64, f64)], q: f64) -> f64 {
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = atoms.iter().map(|a| a.1).sum();
    let target = q * total;
    let mut cum = 0.0;
    for &(v, m) in atoms.iter() {
        cum += m;
        // Relative slack absorbs rounding in the running sum.
        if cum >= target * (1.0 - 1e-12) && m > 0.0 {
            return v;
        }
    }
    atoms.last().map_or(f64::NAN, |a| a.0)
}

/// Full offline pipeline from the initial policy.
///
/// The reference is a frozen copy of `initial_policy`. `n_samples` records
/// are drawn from it and scored once, and the threshold is the configured
/// percentile of those scores.
pub fn run_offline(
    env: &TabularEnv,
    initial_policy: &TabularPolicy,
    score_model: &ScoreModel,
    n_samples: usize,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    initial_policy.check_env(env)?;
    if n_samples < config.batch_size {
        return Err(Error::invalid(format!(
            "n_samples ({n_samples}) must be at least batch_size ({})",
            config.batch_size
        )));
    }
    let (dataset, threshold) = simulate(env, initial_policy, score_model, n_samples, config)?;
    run_on_dataset(
        env,
        initial_policy,
        &dataset,
        threshold,
        score_model,
        config,
    )
}

/// Samples and scores the offline dataset, then estimates the threshold.
pub fn simulate(
    env: &TabularEnv,
    reference: &TabularPolicy,
    score_model: &ScoreModel,
    n_samples: usize,
    config: &TrainConfig,
) -> Result<(ScoredDataset, Threshold)> {
    if n_samples == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    let mut stream = Stream::derived(config.seed, 0);
    let samples = sample_dataset(env, reference, n_samples, &mut stream)?;
    let dataset = score_dataset(&samples, score_model, &mut stream, "reference");
    let threshold = estimate_threshold(
        &dataset.scores(),
        config.tgo.percentile,
        config.quantile_method,
    )?;
    Ok((dataset, threshold))
}

/// Training loop on an already scored dataset with a given threshold.
///
/// `score_model` is only used to score proxy sets when the threshold is
/// re-estimated after a reference refresh.
pub fn run_on_dataset(
    env: &TabularEnv,
    initial_policy: &TabularPolicy,
    dataset: &ScoredDataset,
    threshold: Threshold,
    score_model: &ScoreModel,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    initial_policy.check_env(env)?;
    if dataset.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "dataset size ({}) must be at least batch_size ({})",
            dataset.len(),
            config.batch_size
        )));
    }
    for r in &dataset.records {
        if r.prompt_id >= env.num_prompts() || r.outcome >= env.num_outcomes() {
            return Err(Error::invalid(format!(
                "record ({}, {}) lies outside the {}x{} environment",
                r.prompt_id,
                r.outcome,
                env.num_prompts(),
                env.num_outcomes()
            )));
        }
    }
    let beta = config.tgo.beta;
    let weights = env.prompt_weights();
    let optimum = optimal_policy(initial_policy, env, beta)?;
    let mut shuffle_stream = Stream::derived(config.seed, 1);
    let mut proxy_stream = Stream::derived(config.seed, 2);

    let mut policy = initial_policy.clone();
    let mut reference = initial_policy.clone();
    let mut threshold = threshold;
    let mut velocity = Matrix::zeros(policy.num_prompts(), policy.num_outcomes());

    let mut report = TrainReport {
        loss_curve: Vec::new(),
        step_epochs: Vec::new(),
        mean_reward_curve: vec![mean_reward(env, &policy)?],
        kl_to_ref_curve: vec![expected_kl(&policy, &reference, weights)?],
        kl_to_optimal_curve: vec![expected_kl(&policy, &optimum, weights)?],
        threshold_history: vec![threshold],
        final_policy: policy.clone(),
    };

    let mut units = TrainingUnits::build(dataset, &threshold, config, &mut shuffle_stream);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        units.shuffle(&mut shuffle_stream);
        for batch in 0..units.num_batches(config.batch_size) {
            step += 1;
            let loss = units.loss(batch, config, &policy, &reference)?;
            if !loss.total.is_finite() || !loss.gradient.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            report.loss_curve.push(loss.total);
            report.step_epochs.push(epoch);
            apply_update(&mut policy, &mut velocity, &loss.gradient, config);
        }
        report.mean_reward_curve.push(mean_reward(env, &policy)?);
        report
            .kl_to_ref_curve
            .push(expected_kl(&policy, &reference, weights)?);
        report
            .kl_to_optimal_curve
            .push(expected_kl(&policy, &optimum, weights)?);
        if config.refresh_reference {
            reference = policy.clone();
            if config.reestimate_threshold_on_refresh && epoch < config.epochs {
                threshold = proxy_threshold(
                    &reference,
                    env,
                    score_model,
                    dataset.len(),
                    config.tgo.percentile,
                    &mut proxy_stream,
                )?;
                units = TrainingUnits::build(dataset, &threshold, config, &mut shuffle_stream);
            }
        }
        report.threshold_history.push(threshold);
    }
    report.final_policy = policy;
    Ok(report)
}

fn apply_update(
    policy: &mut TabularPolicy,
    velocity: &mut Matrix,
    gradient: &Matrix,
    config: &TrainConfig,
) {
    match config.optimizer {
        Optimizer::Sgd => policy.logits_mut().axpy(-config.learning_rate, gradient),
        Optimizer::SgdMomentum(mu) => {
            velocity.scale(mu);
            velocity.axpy(1.0, gradient);
            policy.logits_mut().axpy(-config.learning_rate, velocity);
        }
    }
}

/// The per-objective list of units that minibatches are drawn from.
enum TrainingUnits {
    Scored(Vec<ScoredRecord>),
    Pairs(Vec<PreferencePair>),
    Positives(Vec<(usize, usize)>),
}

impl TrainingUnits {
    fn build(
        dataset: &ScoredDataset,
        threshold: &Threshold,
        config: &TrainConfig,
        stream: &mut Stream,
    ) -> Self {
        match config.objective {
            Objective::Tgo => TrainingUnits::Scored(
                dataset
                    .records
                    .iter()
                    .map(|r| ScoredRecord {
                        score: r.score - threshold.value,
                        ..*r
                    })
                    .collect(),
            ),
            Objective::Sft => TrainingUnits::Positives(
                dataset
                    .records
                    .iter()
                    .filter(|r| pseudo_label(r.score, threshold))
                    .map(|r| (r.prompt_id, r.outcome))
                    .collect(),
            ),
            Objective::Dpo => TrainingUnits::Pairs(preference_pairs(dataset, stream)),
        }
    }

    fn len(&self) -> usize {
        match self {
            TrainingUnits::Scored(v) => v.len(),
            TrainingUnits::Pairs(v) => v.len(),
            TrainingUnits::Positives(v) => v.len(),
        }
    }

    fn num_batches(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    fn shuffle(&mut self, stream: &mut Stream) {
        match self {
            TrainingUnits::Scored(v) => stream.shuffle(v),
            TrainingUnits::Pairs(v) => stream.shuffle(v),
            TrainingUnits::Positives(v) => stream.shuffle(v),
        }
    }

    fn loss(
        &self,
        batch: usize,
        config: &TrainConfig,
        policy: &TabularPolicy,
        reference: &TabularPolicy,
    ) -> Result<LossBreakdown> {
        let range =
            |len: usize| batch * config.batch_size..((batch + 1) * config.batch_size).min(len);
        match self {
            TrainingUnits::Scored(v) => {
                // Scores were stored as s − τ when the units were built.
                let chunk = &v[range(v.len())];
                tgo_loss(
                    policy,
                    reference,
                    chunk,
                    &Threshold::fixed(0.0),
                    &config.tgo,
                )
            }
            TrainingUnits::Pairs(v) => {
                dpo_loss(policy, reference, &v[range(v.len())], config.tgo.beta)
            }
            TrainingUnits::Positives(v) => sft_loss(policy, &v[range(v.len())]),
        }
    }
}

/// Within each prompt, shuffles the records and pairs neighbours; the higher
/// score wins. Ties and same-outcome pairs carry no signal and are dropped.
pub fn preference_pairs(dataset: &ScoredDataset, stream: &mut Stream) -> Vec<PreferencePair> {
    let num_prompts = dataset
        .records
        .iter()
        .map(|r| r.prompt_id + 1)
        .max()
        .unwrap_or(0);
    let mut by_prompt: Vec<Vec<ScoredRecord>> = vec![Vec::new(); num_prompts];
    for r in &dataset.records {
        by_prompt[r.prompt_id].push(*r);
    }
    let mut pairs = Vec::new();
    for (x, mut group) in by_prompt.into_iter().enumerate() {
        stream.shuffle(&mut group);
        for pair in group.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.outcome == b.outcome || a.score == b.score {
                continue;
            }
            let (winner, loser) = if a.score > b.score { (a, b) } else { (b, a) };
            pairs.push(PreferencePair {
                prompt: x,
                winner: winner.outcome,
                loser: loser.outcome,
            });
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{bimodal_suite, make_tabular, RewardSpec};
    use crate::feedback::ScoreTransform;
    use crate::objective::TgoConfig;

    fn noisy() -> ScoreModel {
        ScoreModel::gaussian(ScoreTransform::Identity, 0.5)
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let env = make_tabular(1, 3, 4, RewardSpec::Bimodal).unwrap();
        let init = env.reference_policy();
        // With c = 0 every sample at θ = ref costs exactly ln 2.
        let flat = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            tgo: TgoConfig {
                c: 0.0,
                ..TgoConfig::default()
            },
            ..TrainConfig::default()
        };
        let rep = run_offline(&env, &init, &noisy(), 64, &flat).unwrap();
        assert_eq!(rep.final_policy, init);
        assert_eq!(rep.loss_curve.len(), 3 * 2);
        assert!(rep
            .loss_curve
            .iter()
            .all(|l| (l - std::f64::consts::LN_2).abs() < 1e-15));
        // With weights the step losses vary by batch but each epoch sees the same data.
        let weighted = TrainConfig {
            tgo: TgoConfig::default(),
            ..flat
        };
        let rep = run_offline(&env, &init, &noisy(), 64, &weighted).unwrap();
        assert_eq!(rep.final_policy, init);
        let epoch_means: Vec<f64> = rep
            .loss_curve
            .chunks(2)
            .map(|c| (c[0] + c[1]) / 2.0)
            .collect();
        assert!(epoch_means.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn constant_reward_curve_is_flat() {
        let env = make_tabular(2, 2, 5, RewardSpec::Constant(0.75)).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let rep = run_offline(&env, &env.reference_policy(), &noisy(), 128, &cfg).unwrap();
        assert!(rep
            .mean_reward_curve
            .iter()
            .all(|r| (r - 0.75).abs() < 1e-12));
    }

    #[test]
    fn bimodal_training_improves_reward_and_approaches_optimum() {
        let env = &bimodal_suite(2024, 1)[0];
        let rep = run_offline(
            env,
            &env.reference_policy(),
            &noisy(),
            256,
            &TrainConfig::default(),
        )
        .unwrap();
        assert!(rep.final_mean_reward() > rep.initial_mean_reward());
        assert!(rep.final_kl_to_optimal() <= 0.5 * rep.kl_to_optimal_curve[0]);
        assert_eq!(rep.kl_to_ref_curve[0], 0.0);
        assert!(rep.kl_to_ref_curve.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn curve_lengths_and_partial_batches() {
        let env = make_tabular(4, 2, 3, RewardSpec::UniformRandom).unwrap();
        let cfg = TrainConfig {
            batch_size: 10,
            epochs: 4,
            ..TrainConfig::default()
        };
        let rep = run_offline(&env, &env.reference_policy(), &noisy(), 25, &cfg).unwrap();
        assert_eq!(rep.loss_curve.len(), 4 * 3);
        assert_eq!(rep.mean_reward_curve.len(), 5);
        assert_eq!(rep.kl_to_optimal_curve.len(), 5);
        assert_eq!(rep.threshold_history.len(), 5);
    }

    #[test]
    fn runs_are_bit_identical() {
        let env = make_tabular(5, 3, 4, RewardSpec::Bimodal).unwrap();
        for objective in [Objective::Tgo, Objective::Dpo, Objective::Sft] {
            let cfg = TrainConfig {
                objective,
                epochs: 4,
                refresh_reference: true,
                seed: 9,
                ..TrainConfig::default()
            };
            let a = run_offline(&env, &env.reference_policy(), &noisy(), 100, &cfg).unwrap();
            let b = run_offline(&env, &env.reference_policy(), &noisy(), 100, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_small_datasets() {
        let env = make_tabular(4, 2, 3, RewardSpec::UniformRandom).unwrap();
        assert!(run_offline(
            &env,
            &env.reference_policy(),
            &noisy(),
            31,
            &TrainConfig::default()
        )
        .is_err());
    }

    #[test]
    fn nan_aborts_with_step() {
        let env = make_tabular(4, 1, 3, RewardSpec::UniformRandom).unwrap();
        let cfg = TrainConfig {
            learning_rate: f64::MAX,
            batch_size: 4,
            epochs: 3,
            objective: Objective::Sft,
            ..TrainConfig::default()
        };
        match run_offline(
            &env,
            &env.reference_policy(),
            &ScoreModel::default(),
            40,
            &cfg,
        ) {
            Err(Error::NonFiniteLoss { step }) => assert!(step >= 2),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn refresh_measures_drift_within_the_epoch() {
        let env = &bimodal_suite(8, 1)[0];
        let base = TrainConfig {
            epochs: 6,
            ..TrainConfig::default()
        };
        let fixed = run_offline(env, &env.reference_policy(), &noisy(), 256, &base).unwrap();
        let refreshed = run_offline(
            env,
            &env.reference_policy(),
            &noisy(),
            256,
            &TrainConfig {
                refresh_reference: true,
                ..base
            },
        )
        .unwrap();
        let last = base.epochs;
        assert!(refreshed.kl_to_ref_curve[last] < fixed.kl_to_ref_curve[last]);
        assert!(refreshed.threshold_history.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn evaluation_examples() {
        let env = TabularEnv::with_uniform_prompts(
            Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            Matrix::zeros(1, 2),
        )
        .unwrap();
        let ev = evaluate_policy(&env, &TabularPolicy::uniform(1, 2)).unwrap();
        assert!((ev.mean_reward - 0.5).abs() < 1e-15);
        assert_eq!(ev.median_reward, 0.0);
        assert_eq!(ev.reward_quantiles.len(), 9);
        let peak = TabularPolicy::point_mass(1, 2, 1);
        assert!((evaluate_policy(&env, &peak).unwrap().mean_reward - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_policy_never_lowers_mean_reward() {
        for seed in 0..20 {
            let env = make_tabular(seed, 3, 6, RewardSpec::UniformRandom).unwrap();
            let r = env.reference_policy();
            for beta in [0.1, 1.0, 10.0] {
                let star = optimal_policy(&r, &env, beta).unwrap();
                assert!(mean_reward(&env, &star).unwrap() >= mean_reward(&env, &r).unwrap());
            }
        }
    }

    #[test]
    fn weighted_quantile_brute_force() {
        // Expand integer masses into repeated values and read off order statistics.
        let mut atoms = vec![(3.0, 2.0), (1.0, 1.0), (2.0, 3.0), (5.0, 4.0)];
        let mut expanded = Vec::new();
        for (v, m) in &atoms {
            expanded.extend(std::iter::repeat_n(*v, *m as usize));
        }
        expanded.sort_by(f64::total_cmp);
        for q in DECILES {
            let rank = (q * 10.0_f64).round() as usize;
            assert_eq!(
                weighted_quantile(&mut atoms, q),
                expanded[rank - 1],
                "q={q}"
            );
        }
    }

    #[test]
    fn preference_pairs_respect_scores() {
        let env = make_tabular(6, 2, 4, RewardSpec::UniformRandom).unwrap();
        let cfg = TrainConfig::default();
        let (data, _) = simulate(
            &env,
            &env.reference_policy(),
            &ScoreModel::default(),
            200,
            &cfg,
        )
        .unwrap();
        let pairs = preference_pairs(&data, &mut Stream::new(1));
        assert!(!pairs.is_empty());
        for p in pairs {
            assert!(env.reward(p.prompt, p.winner) > env.reward(p.prompt, p.loser));
        }
    }
}
