//! Synthetic alignment environments.
//!
//! A [`TabularEnv`] is a finite prompt × outcome world holding the latent
//! reward table, the reference logits and the prompt distribution. The
//! Gaussian and masked-token environments attach a concrete output (a point
//! or a token sequence) to every tabular outcome and derive the reward from
//! it, so all three share one reward pipeline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::policy::{
    log_softmax, surrogate_log_prob_masked, surrogate_log_prob_mse, TabularPolicy,
};
use crate::rng::Stream;
use crate::textfmt::FlatFile;

/// Standard deviation of the zero-mean reference logits drawn by [`make_tabular`].
pub const REFERENCE_LOGIT_SCALE: f64 = 0.5;

/// Two-component Gaussian reward mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BimodalMixture {
    pub high_weight: f64,
    pub high_mean: f64,
    pub low_mean: f64,
    pub spread: f64,
}

impl Default for BimodalMixture {
    fn default() -> Self {
        BimodalMixture {
            high_weight: 0.5,
            high_mean: 1.0,
            low_mean: -1.0,
            spread: 0.3,
        }
    }
}

/// How [`make_tabular`] fills the reward table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RewardSpec {
    /// Independent `U[0, 1)` rewards.
    UniformRandom,
    /// Draws from [`BimodalMixture::default`].
    Bimodal,
    Constant(f64),
}

impl fmt::Display for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardSpec::UniformRandom => f.write_str("uniform_random"),
            RewardSpec::Bimodal => f.write_str("bimodal"),
            RewardSpec::Constant(v) => write!(f, "constant:{v:?}"),
        }
    }
}

impl FromStr for RewardSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "uniform_random" | "uniform" => Ok(RewardSpec::UniformRandom),
            "bimodal" => Ok(RewardSpec::Bimodal),
            other => match other.strip_prefix("constant:") {
                Some(v) => v
                    .trim()
                    .parse::<f64>()
                    .map(RewardSpec::Constant)
                    .map_err(|e| format!("bad constant reward `{v}`: {e}")),
                None => Err(format!(
                    "unknown reward spec `{other}` (expected uniform_random, bimodal or constant:<v>)"
                )),
            },
        }
    }
}

/// Finite prompt/outcome world in which `Z(x)` is an exact finite sum.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularEnv {
    rewards: Matrix,
    ref_logits: Matrix,
    prompt_weights: Vec<f64>,
}

impl TabularEnv {
    pub fn new(rewards: Matrix, ref_logits: Matrix, prompt_weights: Vec<f64>) -> Result<Self> {
        if rewards.shape() != ref_logits.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", rewards.shape()),
                found: format!("{:?}", ref_logits.shape()),
            });
        }
        if rewards.rows() == 0 || rewards.cols() == 0 {
            return Err(Error::invalid(
                "environment needs at least one prompt and one outcome",
            ));
        }
        if prompt_weights.len() != rewards.rows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} prompt weights", rewards.rows()),
                found: prompt_weights.len().to_string(),
            });
        }
        if !rewards.is_finite() || !ref_logits.is_finite() {
            return Err(Error::invalid(
                "rewards and reference logits must be finite",
            ));
        }
        if prompt_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "prompt weights must be finite and nonnegative",
            ));
        }
        let total: f64 = prompt_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "prompt weights sum to {total}, not 1"
            )));
        }
        Ok(TabularEnv {
            rewards,
            ref_logits,
            prompt_weights,
        })
    }

    /// Same env with uniform prompt weights.
    pub fn with_uniform_prompts(rewards: Matrix, ref_logits: Matrix) -> Result<Self> {
        let k = rewards.rows();
        Self::new(rewards, ref_logits, uniform_weights(k))
    }

    pub fn num_prompts(&self) -> usize {
        self.rewards.rows()
    }

    pub fn num_outcomes(&self) -> usize {
        self.rewards.cols()
    }

    pub fn rewards(&self) -> &Matrix {
        &self.rewards
    }

    pub fn reward(&self, prompt: usize, outcome: usize) -> f64 {
        self.rewards[(prompt, outcome)]
    }

    pub fn ref_logits(&self) -> &Matrix {
        &self.ref_logits
    }

    pub fn prompt_weights(&self) -> &[f64] {
        &self.prompt_weights
    }

    /// `π_ref` as a policy.
    pub fn reference_policy(&self) -> TabularPolicy {
        TabularPolicy::new(self.ref_logits.clone()).expect("env invariants guarantee finite logits")
    }

    pub fn to_flat(&self) -> FlatFile {
        let mut f = FlatFile::new();
        f.set("kind", "tabular_env");
        f.set("num_prompts", self.num_prompts());
        f.set("num_outcomes", self.num_outcomes());
        f.set_vec("prompt_weights", &self.prompt_weights);
        f.set_matrix("rewards", &self.rewards);
        f.set_matrix("ref_logits", &self.ref_logits);
        f
    }

    pub fn from_flat(f: &FlatFile) -> Result<Self> {
        let rewards = f.matrix("rewards")?;
        let ref_logits = f.matrix("ref_logits")?;
        let k = f.usize_or("num_prompts", rewards.rows())?;
        let m = f.usize_or("num_outcomes", rewards.cols())?;
        if (k, m) != rewards.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{k}x{m}"),
                found: format!("{:?}", rewards.shape()),
            });
        }
        let weights = f
            .vec_opt("prompt_weights")?
            .unwrap_or_else(|| uniform_weights(k));
        Self::new(rewards, ref_logits, weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat(&FlatFile::load(path)?)
    }
}

fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Builds a random tabular environment, deterministic in `seed`.
///
/// Requires `m ≥ 2`: the policy-ratio monotonicity property only holds when
/// every prompt has an alternative outcome.
pub fn make_tabular(seed: u64, k: usize, m: usize, reward_spec: RewardSpec) -> Result<TabularEnv> {
    make_tabular_with(seed, k, m, reward_spec, BimodalMixture::default())
}

pub fn make_tabular_with(
    seed: u64,
    k: usize,
    m: usize,
    reward_spec: RewardSpec,
    mixture: BimodalMixture,
) -> Result<TabularEnv> {
    if k < 1 {
        return Err(Error::invalid("need at least one prompt (k >= 1)"));
    }
    if m < 2 {
        return Err(Error::invalid(format!(
            "need at least two outcomes (m >= 2, got {m}): policy-ratio monotonicity requires an alternative response"
        )));
    }
    let mut stream = Stream::new(seed);
    let ref_dist = Normal::new(0.0, REFERENCE_LOGIT_SCALE).expect("valid normal");
    let ref_logits = Matrix::from_fn(k, m, |_, _| ref_dist.sample(&mut stream));
    let rewards = match reward_spec {
        RewardSpec::Constant(v) => Matrix::filled(k, m, v),
        RewardSpec::UniformRandom => Matrix::from_fn(k, m, |_, _| stream.random::<f64>()),
        RewardSpec::Bimodal => Matrix::from_fn(k, m, |_, _| {
            let high = stream.random::<f64>() < mixture.high_weight;
            let z: f64 = StandardNormal.sample(&mut stream);
            let mean = if high {
                mixture.high_mean
            } else {
                mixture.low_mean
            };
            mean + mixture.spread * z
        }),
    };
    TabularEnv::new(rewards, ref_logits, uniform_weights(k))
}

/// Number of prompts and outcomes in each env of [`bimodal_suite`].
pub const SUITE_SHAPE: (usize, usize) = (4, 6);

/// The shipped bimodal reference suite: `count` 4×6 bimodal envs seeded
/// from `seed`.
pub fn bimodal_suite(seed: u64, count: usize) -> Vec<TabularEnv> {
    (0..count as u64)
        .map(|i| {
            make_tabular(
                crate::rng::derive_seed(seed, i),
                SUITE_SHAPE.0,
                SUITE_SHAPE.1,
                RewardSpec::Bimodal,
            )
            .expect("suite shape is valid")
        })
        .collect()
}

/// One draw `(x, y)` with its latent reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRecord {
    pub prompt_id: usize,
    pub outcome: usize,
    /// Latent `R(x, y)`; never shown to the learner directly.
    pub reward: f64,
    pub rng_tag: u64,
}

/// Draws `n` prompts from the env's prompt weights and outcomes from `policy`.
pub fn sample_dataset(
    env: &TabularEnv,
    policy: &TabularPolicy,
    n: usize,
    stream: &mut Stream,
) -> Result<Vec<SampleRecord>> {
    policy.check_env(env)?;
    let probs: Vec<Vec<f64>> = (0..env.num_prompts()).map(|x| policy.probs(x)).collect();
    let tag = stream.tag();
    Ok((0..n)
        .map(|_| {
            let x = stream.categorical(env.prompt_weights());
            let y = stream.categorical(&probs[x]);
            SampleRecord {
                prompt_id: x,
                outcome: y,
                reward: env.reward(x, y),
                rng_tag: tag,
            }
        })
        .collect())
}

/// Continuous-output environment scored through the negative-MSE surrogate.
///
/// Each prompt has a target point and `num_candidates` candidate outputs
/// scattered around it with standard deviation `noise_scale`. A candidate's
/// reward is its negative mean squared distance to the target.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSurrogateEnv {
    pub dim: usize,
    pub targets: Vec<Vec<f64>>,
    pub temperature: f64,
    pub noise_scale: f64,
    /// `candidates[x][y]` is the point for outcome `y` of prompt `x`.
    pub candidates: Vec<Vec<Vec<f64>>>,
}

impl GaussianSurrogateEnv {
    pub fn generate(
        seed: u64,
        prompts: usize,
        num_candidates: usize,
        dim: usize,
        temperature: f64,
        noise_scale: f64,
    ) -> Result<Self> {
        if dim < 1 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(noise_scale >= 0.0) {
            return Err(Error::invalid("noise_scale must be nonnegative"));
        }
        if prompts < 1 || num_candidates < 2 {
            return Err(Error::invalid(
                "need at least one prompt and two candidates",
            ));
        }
        let mut stream = Stream::new(seed);
        let targets: Vec<Vec<f64>> = (0..prompts)
            .map(|_| {
                (0..dim)
                    .map(|_| StandardNormal.sample(&mut stream))
                    .collect()
            })
            .collect();
        let candidates = targets
            .iter()
            .map(|t| {
                (0..num_candidates)
                    .map(|_| {
                        t.iter()
                            .map(|v| {
                                let z: f64 = StandardNormal.sample(&mut stream);
                                v + noise_scale * z
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(GaussianSurrogateEnv {
            dim,
            targets,
            temperature,
            noise_scale,
            candidates,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.targets.len()
    }

    pub fn candidate(&self, prompt: usize, outcome: usize) -> &[f64] {
        &self.candidates[prompt][outcome]
    }

    /// Negative mean squared distance to the prompt's target.
    pub fn reward_of(&self, prompt: usize, point: &[f64]) -> f64 {
        let t = &self.targets[prompt];
        -point
            .iter()
            .zip(t)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / self.dim as f64
    }

    /// Tabular view: rewards from [`Self::reward_of`], reference logits from the
    /// surrogate log-likelihood of each candidate under `reference_predictions`.
    pub fn to_tabular(&self, reference_predictions: &Matrix) -> Result<TabularEnv> {
        if reference_predictions.shape() != (self.num_prompts(), self.dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.num_prompts(), self.dim),
                found: format!("{:?}", reference_predictions.shape()),
            });
        }
        let m = self.candidates[0].len();
        let k = self.num_prompts();
        let rewards = Matrix::from_fn(k, m, |x, y| self.reward_of(x, self.candidate(x, y)));
        let mut ref_logits = Matrix::zeros(k, m);
        for x in 0..k {
            for y in 0..m {
                ref_logits[(x, y)] = surrogate_log_prob_mse(
                    reference_predictions.row(x),
                    self.candidate(x, y),
                    self.temperature,
                )?;
            }
        }
        TabularEnv::with_uniform_prompts(rewards, ref_logits)
    }
}

/// Discrete-output environment scored through the masked-token likelihood.
///
/// Candidates are the true token sequence with each masked position
/// resampled uniformly with probability `corruption`. Reward is the fraction
/// of masked positions that match the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokenEnv {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub mask_set: Vec<usize>,
    pub true_tokens: Vec<Vec<usize>>,
    pub candidates: Vec<Vec<Vec<usize>>>,
}

impl MaskedTokenEnv {
    pub fn generate(
        seed: u64,
        prompts: usize,
        num_candidates: usize,
        vocab_size: usize,
        seq_len: usize,
        mask_set: Vec<usize>,
        corruption: f64,
    ) -> Result<Self> {
        let mut mask_set = mask_set;
        mask_set.sort_unstable();
        mask_set.dedup();
        if mask_set.is_empty() {
            return Err(Error::invalid("mask set must be nonempty"));
        }
        if let Some(&bad) = mask_set.iter().find(|&&i| i >= seq_len) {
            return Err(Error::OutOfRange {
                what: "mask position",
                index: bad,
                limit: seq_len,
            });
        }
        if vocab_size < 2 || prompts < 1 || num_candidates < 2 {
            return Err(Error::invalid(
                "need vocab >= 2, one prompt and two candidates",
            ));
        }
        let mut stream = Stream::new(seed);
        let true_tokens: Vec<Vec<usize>> = (0..prompts)
            .map(|_| {
                (0..seq_len)
                    .map(|_| stream.random_range(0..vocab_size))
                    .collect()
            })
            .collect();
        let candidates = true_tokens
            .iter()
            .map(|truth| {
                (0..num_candidates)
                    .map(|_| {
                        let mut seq = truth.clone();
                        for &i in &mask_set {
                            if stream.random::<f64>() < corruption {
                                seq[i] = stream.random_range(0..vocab_size);
                            }
                        }
                        seq
                    })
                    .collect()
            })
            .collect();
        Ok(MaskedTokenEnv {
            vocab_size,
            seq_len,
            mask_set,
            true_tokens,
            candidates,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.true_tokens.len()
    }

    pub fn candidate(&self, prompt: usize, outcome: usize) -> &[usize] {
        &self.candidates[prompt][outcome]
    }

    /// Token accuracy over the masked positions.
    pub fn reward_of(&self, prompt: usize, tokens: &[usize]) -> f64 {
        let truth = &self.true_tokens[prompt];
        let hits = self
            .mask_set
            .iter()
            .filter(|&&i| tokens[i] == truth[i])
            .count();
        hits as f64 / self.mask_set.len() as f64
    }

    /// Masked-token log-likelihood of `tokens` under per-position logits
    /// (`seq_len × vocab_size`).
    pub fn sequence_log_prob(&self, token_logits: &Matrix, tokens: &[usize]) -> Result<f64> {
        if token_logits.shape() != (self.seq_len, self.vocab_size) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.seq_len, self.vocab_size),
                found: format!("{:?}", token_logits.shape()),
            });
        }
        let per_position: Vec<f64> = (0..self.seq_len)
            .map(|i| log_softmax(token_logits.row(i))[tokens[i]])
            .collect();
        surrogate_log_prob_masked(&per_position, &self.mask_set)
    }

    /// Tabular view with reference logits from the masked log-likelihood of each
    /// candidate under `reference_logits[x]`.
    pub fn to_tabular(&self, reference_logits: &[Matrix]) -> Result<TabularEnv> {
        if reference_logits.len() != self.num_prompts() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} prompts", self.num_prompts()),
                found: reference_logits.len().to_string(),
            });
        }
        let k = self.num_prompts();
        let m = self.candidates[0].len();
        let rewards = Matrix::from_fn(k, m, |x, y| self.reward_of(x, self.candidate(x, y)));
        let mut ref_logits = Matrix::zeros(k, m);
        for x in 0..k {
            for y in 0..m {
                ref_logits[(x, y)] =
                    self.sequence_log_prob(&reference_logits[x], self.candidate(x, y))?;
            }
        }
        TabularEnv::with_uniform_prompts(rewards, ref_logits)
    }
}
