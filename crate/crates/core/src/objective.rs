//! Threshold-guided loss with analytic gradients, plus the DPO and SFT
//! baselines. All three are built on the implicit policy score
//! `β·(log π_θ − log π_ref)`.

use std::fmt;
use std::str::FromStr;

use crate::env::{GaussianSurrogateEnv, MaskedTokenEnv};
use crate::error::{Error, Result};
use crate::feedback::{label_from_relative, weight_from_relative, ScoredRecord, Threshold};
use crate::matrix::Matrix;
use crate::numeric::{sigmoid, softplus};
use crate::policy::{log_softmax, surrogate_log_prob_mse, TabularPolicy};

/// How `log σ(z)` and `log(1 − σ(z))` are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum NumericMode {
    /// `log σ(z) = −softplus(−z)`, no clipping.
    #[default]
    ExactLogSigmoid,
    /// `log(σ(z) + ε)` and `log1p(−σ(z) + ε)`.
    ClippedSigmoid { eps: f64 },
}

impl fmt::Display for NumericMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericMode::ExactLogSigmoid => f.write_str("exact"),
            NumericMode::ClippedSigmoid { eps } => write!(f, "clipped:{eps:?}"),
        }
    }
}

impl FromStr for NumericMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "exact" | "exact_logsigmoid" => Ok(NumericMode::ExactLogSigmoid),
            "clipped" | "clipped_sigmoid" => Ok(NumericMode::ClippedSigmoid { eps: 1e-12 }),
            other => {
                let eps = other
                    .strip_prefix("clipped:")
                    .ok_or_else(|| format!("unknown numeric mode `{other}`"))?;
                let eps: f64 = eps.parse().map_err(|e| format!("bad epsilon: {e}"))?;
                if !(eps > 0.0 && eps < 1.0) {
                    return Err(format!("epsilon must lie in (0, 1), got {eps}"));
                }
                Ok(NumericMode::ClippedSigmoid { eps })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TgoConfig {
    pub beta: f64,
    /// Confidence scale `c` in `w = 1 + c·|s − τ|`.
    pub c: f64,
    pub percentile: f64,
    pub numeric_mode: NumericMode,
}

impl Default for TgoConfig {
    fn default() -> Self {
        TgoConfig {
            beta: 1.0,
            c: 5.0,
            percentile: 0.5,
            numeric_mode: NumericMode::ExactLogSigmoid,
        }
    }
}

impl TgoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::invalid(format!(
                "c must be nonnegative, got {}",
                self.c
            )));
        }
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(Error::invalid(format!(
                "percentile must lie in (0, 1), got {}",
                self.percentile
            )));
        }
        Ok(())
    }
}

/// Batch loss with its per-unit terms and gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<G = Matrix> {
    /// Mean of `per_sample`.
    pub total: f64,
    pub per_sample: Vec<f64>,
    /// `β·(log π_θ − log π_ref)` per sample; the preference margin for DPO.
    pub implicit_scores: Vec<f64>,
    pub gradient: G,
}

/// `β·(theta_logp − ref_logp)`.
pub fn implicit_policy_score(theta_logp: f64, ref_logp: f64, beta: f64) -> f64 {
    beta * (theta_logp - ref_logp)
}

/// Loss of one sample and its derivative with respect to the implicit score.
fn tgo_term(z: f64, positive: bool, weight: f64, mode: NumericMode) -> (f64, f64) {
    match mode {
        NumericMode::ExactLogSigmoid => {
            if positive {
                (weight * softplus(-z), -weight * sigmoid(-z))
            } else {
                (weight * softplus(z), weight * sigmoid(z))
            }
        }
        NumericMode::ClippedSigmoid { eps } => {
            let s = sigmoid(z);
            let slope = s * sigmoid(-z);
            if positive {
                (-weight * (s + eps).ln(), -weight * slope / (s + eps))
            } else {
                (
                    -weight * (-s + eps).ln_1p(),
                    weight * slope / (1.0 - s + eps),
                )
            }
        }
    }
}

/// Per-sample loss from a relative score `s − τ`, for scalar callers.
pub fn tgo_sample_loss(implicit_score: f64, relative_score: f64, config: &TgoConfig) -> f64 {
    let positive = label_from_relative(relative_score);
    let w = weight_from_relative(relative_score, config.c);
    tgo_term(implicit_score, positive, w, config.numeric_mode).0
}

/// One sample for [`tgo_loss_relative`]: `(prompt, outcome, s − τ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeSample {
    pub prompt: usize,
    pub outcome: usize,
    pub relative_score: f64,
}

fn check_tabular(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: usize,
    outcome: usize,
) -> Result<()> {
    policy.check_same_shape(reference)?;
    policy.check_prompt(prompt)?;
    if outcome >= policy.num_outcomes() {
        return Err(Error::OutOfRange {
            what: "outcome",
            index: outcome,
            limit: policy.num_outcomes(),
        });
    }
    Ok(())
}

/// Threshold-guided loss for a tabular policy.
///
/// Each sample contributes `−w·[l·log σ(ŝ) + (1−l)·log(1−σ(ŝ))]` with label and
/// weight derived from `s − τ`. The threshold must be on the same scale as the
/// scores; this cannot be checked here.
pub fn tgo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[ScoredRecord],
    threshold: &Threshold,
    config: &TgoConfig,
) -> Result<LossBreakdown> {
    let relative: Vec<RelativeSample> = batch
        .iter()
        .map(|r| RelativeSample {
            prompt: r.prompt_id,
            outcome: r.outcome,
            relative_score: r.score - threshold.value,
        })
        .collect();
    tgo_loss_relative(policy, reference, &relative, config)
}

/// [`tgo_loss`] on precomputed relative scores.
pub fn tgo_loss_relative(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[RelativeSample],
    config: &TgoConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    config.validate()?;
    let b = batch.len() as f64;
    let theta_lp = policy.log_prob_matrix();
    let ref_lp = reference.log_prob_matrix();
    let mut gradient = Matrix::zeros(policy.num_prompts(), policy.num_outcomes());
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut implicit_scores = Vec::with_capacity(batch.len());
    for s in batch {
        check_tabular(policy, reference, s.prompt, s.outcome)?;
        let z = implicit_policy_score(
            theta_lp[(s.prompt, s.outcome)],
            ref_lp[(s.prompt, s.outcome)],
            config.beta,
        );
        let positive = label_from_relative(s.relative_score);
        let w = weight_from_relative(s.relative_score, config.c);
        let (loss, dz) = tgo_term(z, positive, w, config.numeric_mode);
        per_sample.push(loss);
        implicit_scores.push(z);
        // dz/dθ_x = β(e_y − π_x)
        let coef = dz * config.beta / b;
        let lp = theta_lp.row(s.prompt);
        let row = gradient.row_mut(s.prompt);
        for (j, g) in row.iter_mut().enumerate() {
            *g -= coef * lp[j].exp();
        }
        row[s.outcome] += coef;
    }
    Ok(LossBreakdown {
        total: per_sample.iter().sum::<f64>() / b,
        per_sample,
        implicit_scores,
        gradient,
    })
}

/// A within-prompt preference: `winner` is preferred to `loser`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt: usize,
    pub winner: usize,
    pub loser: usize,
}

/// `−mean log σ(β[Δ_w − Δ_l])` with `Δ = log π_θ − log π_ref`.
pub fn dpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<LossBreakdown> {
    if pairs.is_empty() {
        return Err(Error::invalid("loss needs at least one pair"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let b = pairs.len() as f64;
    let theta_lp = policy.log_prob_matrix();
    let ref_lp = reference.log_prob_matrix();
    let mut gradient = Matrix::zeros(policy.num_prompts(), policy.num_outcomes());
    let mut per_sample = Vec::with_capacity(pairs.len());
    let mut margins = Vec::with_capacity(pairs.len());
    for p in pairs {
        check_tabular(policy, reference, p.prompt, p.winner)?;
        check_tabular(policy, reference, p.prompt, p.loser)?;
        if p.winner == p.loser {
            return Err(Error::invalid(format!(
                "pair on prompt {} compares outcome {} with itself",
                p.prompt, p.winner
            )));
        }
        let x = p.prompt;
        let dw = theta_lp[(x, p.winner)] - ref_lp[(x, p.winner)];
        let dl = theta_lp[(x, p.loser)] - ref_lp[(x, p.loser)];
        let m = beta * (dw - dl);
        per_sample.push(softplus(-m));
        margins.push(m);
        // The softmax normalizer cancels: dm/dθ_x = β(e_w − e_l).
        let coef = -sigmoid(-m) * beta / b;
        gradient[(x, p.winner)] += coef;
        gradient[(x, p.loser)] -= coef;
    }
    Ok(LossBreakdown {
        total: per_sample.iter().sum::<f64>() / b,
        per_sample,
        implicit_scores: margins,
        gradient,
    })
}

/// Negative log-likelihood of `(prompt, outcome)` pairs, batch mean.
pub fn sft_loss(policy: &TabularPolicy, positives: &[(usize, usize)]) -> Result<LossBreakdown> {
    if positives.is_empty() {
        return Err(Error::invalid("loss needs at least one positive sample"));
    }
    let b = positives.len() as f64;
    let lp = policy.log_prob_matrix();
    let mut gradient = Matrix::zeros(policy.num_prompts(), policy.num_outcomes());
    let mut per_sample = Vec::with_capacity(positives.len());
    for &(x, y) in positives {
        check_tabular(policy, policy, x, y)?;
        per_sample.push(-lp[(x, y)]);
        let row = gradient.row_mut(x);
        for (j, g) in row.iter_mut().enumerate() {
            *g += lp[(x, j)].exp() / b;
        }
        row[y] -= 1.0 / b;
    }
    Ok(LossBreakdown {
        total: per_sample.iter().sum::<f64>() / b,
        per_sample,
        implicit_scores: Vec::new(),
        gradient,
    })
}

/// Threshold-guided loss where `log π(y|x)` is the negative-MSE surrogate of a
/// per-prompt prediction vector. The gradient is with respect to
/// `predictions` (`prompts × dim`).
pub fn tgo_loss_gaussian(
    env: &GaussianSurrogateEnv,
    predictions: &Matrix,
    reference_predictions: &Matrix,
    batch: &[ScoredRecord],
    threshold: &Threshold,
    config: &TgoConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    config.validate()?;
    let shape = (env.num_prompts(), env.dim);
    for m in [predictions, reference_predictions] {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?}"),
                found: format!("{:?}", m.shape()),
            });
        }
    }
    let b = batch.len() as f64;
    let mut gradient = Matrix::zeros(shape.0, shape.1);
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut implicit_scores = Vec::with_capacity(batch.len());
    for r in batch {
        let x = r.prompt_id;
        let y = gaussian_candidate(env, x, r.outcome)?;
        let theta = surrogate_log_prob_mse(predictions.row(x), y, env.temperature)?;
        let refv = surrogate_log_prob_mse(reference_predictions.row(x), y, env.temperature)?;
        let z = implicit_policy_score(theta, refv, config.beta);
        let rel = r.score - threshold.value;
        let (loss, dz) = tgo_term(
            z,
            label_from_relative(rel),
            weight_from_relative(rel, config.c),
            config.numeric_mode,
        );
        per_sample.push(loss);
        implicit_scores.push(z);
        // d log π / d pred = −2(pred − y)/(dim·T)
        let coef = dz * config.beta / b * (-2.0 / (env.dim as f64 * env.temperature));
        for (j, g) in gradient.row_mut(x).iter_mut().enumerate() {
            *g += coef * (predictions[(x, j)] - y[j]);
        }
    }
    Ok(LossBreakdown {
        total: per_sample.iter().sum::<f64>() / b,
        per_sample,
        implicit_scores,
        gradient,
    })
}

fn gaussian_candidate(env: &GaussianSurrogateEnv, x: usize, y: usize) -> Result<&[f64]> {
    let row = env.candidates.get(x).ok_or(Error::OutOfRange {
        what: "prompt",
        index: x,
        limit: env.num_prompts(),
    })?;
    row.get(y).map(|v| v.as_slice()).ok_or(Error::OutOfRange {
        what: "outcome",
        index: y,
        limit: row.len(),
    })
}

/// Threshold-guided loss where `log π(y|x)` is the masked-token likelihood
/// under per-prompt token logits (`seq_len × vocab` each). The gradient has
/// the same layout as `logits`.
pub fn tgo_loss_masked(
    env: &MaskedTokenEnv,
    logits: &[Matrix],
    reference_logits: &[Matrix],
    batch: &[ScoredRecord],
    threshold: &Threshold,
    config: &TgoConfig,
) -> Result<LossBreakdown<Vec<Matrix>>> {
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    config.validate()?;
    if logits.len() != env.num_prompts() || reference_logits.len() != env.num_prompts() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} prompts", env.num_prompts()),
            found: format!("{} and {}", logits.len(), reference_logits.len()),
        });
    }
    let b = batch.len() as f64;
    let mut gradient: Vec<Matrix> = logits
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut implicit_scores = Vec::with_capacity(batch.len());
    let mask_len = env.mask_set.len() as f64;
    for r in batch {
        let x = r.prompt_id;
        let tokens =
            env.candidates
                .get(x)
                .and_then(|c| c.get(r.outcome))
                .ok_or(Error::OutOfRange {
                    what: "candidate",
                    index: r.outcome,
                    limit: env.candidates.first().map_or(0, Vec::len),
                })?;
        let theta = env.sequence_log_prob(&logits[x], tokens)?;
        let refv = env.sequence_log_prob(&reference_logits[x], tokens)?;
        let z = implicit_policy_score(theta, refv, config.beta);
        let rel = r.score - threshold.value;
        let (loss, dz) = tgo_term(
            z,
            label_from_relative(rel),
            weight_from_relative(rel, config.c),
            config.numeric_mode,
        );
        per_sample.push(loss);
        implicit_scores.push(z);
        let coef = dz * config.beta / b / mask_len;
        for &i in &env.mask_set {
            let lp = log_softmax(logits[x].row(i));
            let row = gradient[x].row_mut(i);
            for (j, g) in row.iter_mut().enumerate() {
                *g -= coef * lp[j].exp();
            }
            row[tokens[i]] += coef;
        }
    }
    Ok(LossBreakdown {
        total: per_sample.iter().sum::<f64>() / b,
        per_sample,
        implicit_scores,
        gradient,
    })
}

/// Relative error between `analytic` and central differences of `f` at
/// `params`: `‖a − fd‖ / max(‖a‖, ‖fd‖)` in the Euclidean norm.
///
/// When both gradients are below `1e-12` in norm the absolute difference is
/// returned instead.
pub fn finite_difference_check(
    params: &[f64],
    analytic: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::invalid(format!(
            "step must lie in [1e-8, 1e-3], got {h}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len().to_string(),
            found: analytic.len().to_string(),
        });
    }
    let mut work = params.to_vec();
    let (mut diff, mut norm_a, mut norm_fd) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..params.len() {
        work[i] = params[i] + h;
        let up = f(&work)?;
        work[i] = params[i] - h;
        let down = f(&work)?;
        work[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        diff += (analytic[i] - fd).powi(2);
        norm_a += analytic[i].powi(2);
        norm_fd += fd.powi(2);
    }
    let scale = norm_a.sqrt().max(norm_fd.sqrt());
    Ok(if scale <= 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    })
}

fn with_logits(template: &TabularPolicy, flat: &[f64]) -> TabularPolicy {
    let mut p = template.clone();
    p.logits_mut().as_mut_slice().copy_from_slice(flat);
    p
}

/// Max relative error of the analytic [`tgo_loss`] gradient against central
/// differences with step `h`.
pub fn tgo_gradient_check(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[ScoredRecord],
    threshold: &Threshold,
    config: &TgoConfig,
    h: f64,
) -> Result<f64> {
    let analytic = tgo_loss(policy, reference, batch, threshold, config)?.gradient;
    finite_difference_check(policy.logits().as_slice(), analytic.as_slice(), h, |flat| {
        Ok(tgo_loss(
            &with_logits(policy, flat),
            reference,
            batch,
            threshold,
            config,
        )?
        .total)
    })
}

pub fn dpo_gradient_check(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[PreferencePair],
    beta: f64,
    h: f64,
) -> Result<f64> {
    let analytic = dpo_loss(policy, reference, pairs, beta)?.gradient;
    finite_difference_check(policy.logits().as_slice(), analytic.as_slice(), h, |flat| {
        Ok(dpo_loss(&with_logits(policy, flat), reference, pairs, beta)?.total)
    })
}

pub fn sft_gradient_check(
    policy: &TabularPolicy,
    positives: &[(usize, usize)],
    h: f64,
) -> Result<f64> {
    let analytic = sft_loss(policy, positives)?.gradient;
    finite_difference_check(policy.logits().as_slice(), analytic.as_slice(), h, |flat| {
        Ok(sft_loss(&with_logits(policy, flat), positives)?.total)
    })
}
