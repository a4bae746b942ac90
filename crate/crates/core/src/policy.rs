//! Tabular softmax policies and the exact KL-regularized oracles.
//!
//! On a finite outcome space the partition function
//! `Z(x) = Σ_y π_ref(y|x) exp(R(x,y)/β)` is a finite sum, so the closed-form
//! optimal policy `π*(y|x) = π_ref(y|x) exp(R(x,y)/β) / Z(x)` and the oracle
//! baseline `τ*(x) = β ln Z(x)` can be computed exactly. Everything here
//! works in log space.

use std::path::Path;

use crate::env::TabularEnv;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::logsumexp;
use crate::textfmt::FlatFile;

/// Logit gap used to build point-mass policies with finite logits.
const POINT_MASS_GAP: f64 = 1.0e6;

/// Per-prompt softmax policy `π(y|x) ∝ exp(logits[x][y])`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    logits: Matrix,
}

impl TabularPolicy {
    pub fn new(logits: Matrix) -> Result<Self> {
        if logits.rows() == 0 || logits.cols() == 0 {
            return Err(Error::invalid(
                "policy needs at least one prompt and one outcome",
            ));
        }
        if !logits.is_finite() {
            return Err(Error::invalid("policy logits must be finite"));
        }
        Ok(TabularPolicy { logits })
    }

    pub fn uniform(prompts: usize, outcomes: usize) -> Self {
        TabularPolicy {
            logits: Matrix::zeros(prompts, outcomes),
        }
    }

    /// All mass on `outcome` for every prompt (other outcomes have probability
    /// that underflows to exactly zero).
    pub fn point_mass(prompts: usize, outcomes: usize, outcome: usize) -> Self {
        TabularPolicy {
            logits: Matrix::from_fn(prompts, outcomes, |_, y| {
                if y == outcome {
                    0.0
                } else {
                    -POINT_MASS_GAP
                }
            }),
        }
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Matrix {
        &mut self.logits
    }

    pub fn into_logits(self) -> Matrix {
        self.logits
    }

    pub fn num_prompts(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_outcomes(&self) -> usize {
        self.logits.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.logits.shape()
    }

    pub fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.num_prompts() {
            return Err(Error::OutOfRange {
                what: "prompt",
                index: prompt,
                limit: self.num_prompts(),
            });
        }
        Ok(())
    }

    fn check_outcome(&self, outcome: usize) -> Result<()> {
        if outcome >= self.num_outcomes() {
            return Err(Error::OutOfRange {
                what: "outcome",
                index: outcome,
                limit: self.num_outcomes(),
            });
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &TabularPolicy) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn check_env(&self, env: &TabularEnv) -> Result<()> {
        let want = (env.num_prompts(), env.num_outcomes());
        if self.shape() != want {
            return Err(shape_err(want, self.shape()));
        }
        Ok(())
    }

    /// Log-probabilities of one prompt's row.
    pub fn log_probs(&self, prompt: usize) -> Vec<f64> {
        log_softmax(self.logits.row(prompt))
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        self.log_probs(prompt).into_iter().map(f64::exp).collect()
    }

    /// Full matrix of log-probabilities.
    pub fn log_prob_matrix(&self) -> Matrix {
        let mut out = self.logits.clone();
        for x in 0..out.rows() {
            let lp = log_softmax(self.logits.row(x));
            out.row_mut(x).copy_from_slice(&lp);
        }
        out
    }

    pub fn log_prob(&self, prompt: usize, outcome: usize) -> Result<f64> {
        self.check_prompt(prompt)?;
        self.check_outcome(outcome)?;
        let row = self.logits.row(prompt);
        Ok(row[outcome] - logsumexp(row))
    }

    pub fn to_flat(&self) -> FlatFile {
        let mut f = FlatFile::new();
        f.set("kind", "tabular_policy");
        f.set("num_prompts", self.num_prompts());
        f.set("num_outcomes", self.num_outcomes());
        f.set_matrix("logits", &self.logits);
        f
    }

    pub fn from_flat(f: &FlatFile) -> Result<Self> {
        let logits = f.matrix("logits")?;
        let k = f.usize_or("num_prompts", logits.rows())?;
        let m = f.usize_or("num_outcomes", logits.cols())?;
        if (k, m) != logits.shape() {
            return Err(shape_err((k, m), logits.shape()));
        }
        Self::new(logits)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat(&FlatFile::load(path)?)
    }
}

fn shape_err(expected: (usize, usize), found: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        expected: format!("{}x{}", expected.0, expected.1),
        found: format!("{}x{}", found.0, found.1),
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = logsumexp(row);
    row.iter().map(|v| v - lse).collect()
}

/// `log π(y|x)`; `logit − logsumexp(row)`.
pub fn log_prob(policy: &TabularPolicy, prompt: usize, outcome: usize) -> Result<f64> {
    policy.log_prob(prompt, outcome)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    Ok(())
}

/// Tilted log-weights `log π_ref(y|x) + R(x,y)/β` for one prompt.
fn tilted_row(reference: &TabularPolicy, env: &TabularEnv, beta: f64, prompt: usize) -> Vec<f64> {
    reference
        .log_probs(prompt)
        .into_iter()
        .zip(env.rewards().row(prompt))
        .map(|(lp, r)| lp + r / beta)
        .collect()
}

fn check_oracle_args(
    reference: &TabularPolicy,
    env: &TabularEnv,
    beta: f64,
    prompt: usize,
) -> Result<()> {
    check_beta(beta)?;
    reference.check_env(env)?;
    reference.check_prompt(prompt)
}

/// `ln Z(x)`, computed without forming `Z` so large `R/β` cannot overflow.
pub fn log_partition_function(
    reference: &TabularPolicy,
    env: &TabularEnv,
    beta: f64,
    prompt: usize,
) -> Result<f64> {
    check_oracle_args(reference, env, beta, prompt)?;
    Ok(logsumexp(&tilted_row(reference, env, beta, prompt)))
}

/// `Z(x) = Σ_y π_ref(y|x) exp(R(x,y)/β)`.
pub fn partition_function(
    reference: &TabularPolicy,
    env: &TabularEnv,
    beta: f64,
    prompt: usize,
) -> Result<f64> {
    log_partition_function(reference, env, beta, prompt).map(f64::exp)
}

/// Oracle baseline `τ*(x) = β ln Z(x)`.
pub fn oracle_baseline(
    reference: &TabularPolicy,
    env: &TabularEnv,
    beta: f64,
    prompt: usize,
) -> Result<f64> {
    Ok(beta * log_partition_function(reference, env, beta, prompt)?)
}

/// Per-prompt partition functions and oracle baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub partition: Vec<f64>,
    pub log_partition: Vec<f64>,
    pub baseline: Vec<f64>,
    pub beta: f64,
}

pub fn oracle_report(
    reference: &TabularPolicy,
    env: &TabularEnv,
    beta: f64,
) -> Result<OracleReport> {
    let mut log_partition = Vec::with_capacity(env.num_prompts());
    for x in 0..env.num_prompts() {
        log_partition.push(log_partition_function(reference, env, beta, x)?);
    }
    Ok(OracleReport {
        partition: log_partition.iter().map(|v| v.exp()).collect(),
        baseline: log_partition.iter().map(|v| beta * v).collect(),
        log_partition,
        beta,
    })
}

/// Closed-form maximizer of `E[R] − β KL(π ‖ π_ref)`. The returned logits
/// are the normalized log-probabilities `log π*(y|x)`.
pub fn optimal_policy(
    reference: &TabularPolicy,
    env: &TabularEnv,
    beta: f64,
) -> Result<TabularPolicy> {
    check_beta(beta)?;
    reference.check_env(env)?;
    let mut logits = Matrix::zeros(env.num_prompts(), env.num_outcomes());
    for x in 0..env.num_prompts() {
        let lp = log_softmax(&tilted_row(reference, env, beta, x));
        logits.row_mut(x).copy_from_slice(&lp);
    }
    TabularPolicy::new(logits)
}

/// `KL(p(·|x) ‖ q(·|x))`.
pub fn kl_divergence(p: &TabularPolicy, q: &TabularPolicy, prompt: usize) -> Result<f64> {
    p.check_same_shape(q)?;
    p.check_prompt(prompt)?;
    let lp = p.log_probs(prompt);
    let lq = q.log_probs(prompt);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| {
            let pa = a.exp();
            if pa == 0.0 {
                0.0
            } else {
                pa * (a - b)
            }
        })
        .sum();
    // Cancellation can leave a tiny negative value for identical rows.
    Ok(kl.max(0.0))
}

/// Prompt-weighted KL `Σ_x w_x KL(p(·|x) ‖ q(·|x))`.
pub fn expected_kl(p: &TabularPolicy, q: &TabularPolicy, prompt_weights: &[f64]) -> Result<f64> {
    if prompt_weights.len() != p.num_prompts() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} prompt weights", p.num_prompts()),
            found: prompt_weights.len().to_string(),
        });
    }
    let mut total = 0.0;
    for (x, w) in prompt_weights.iter().enumerate() {
        total += w * kl_divergence(p, q, x)?;
    }
    Ok(total)
}

/// Gaussian-observation surrogate `log π(y|x) ≈ −MSE(prediction, target)/T`.
pub fn surrogate_log_prob_mse(prediction: &[f64], target: &[f64], temperature: f64) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", target.len()),
            found: format!("length {}", prediction.len()),
        });
    }
    if prediction.is_empty() {
        return Err(Error::invalid(
            "surrogate likelihood needs a nonempty vector",
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mse = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / prediction.len() as f64;
    Ok(-mse / temperature)
}

/// Masked-token log-likelihood: the mean of `token_log_probs[i]` over `i ∈ mask`.
pub fn surrogate_log_prob_masked(token_log_probs: &[f64], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("mask must contain at least one position"));
    }
    let mut sum = 0.0;
    for &i in mask {
        let lp = *token_log_probs.get(i).ok_or(Error::OutOfRange {
            what: "mask position",
            index: i,
            limit: token_log_probs.len(),
        })?;
        sum += lp;
    }
    Ok(sum / mask.len() as f64)
}
