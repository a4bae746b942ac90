//! Scalar feedback: scoring latent rewards, estimating the percentile
//! threshold, and turning scores into pseudo-labels and confidence weights.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::{sample_dataset, SampleRecord, TabularEnv};
use crate::error::{Error, Result};
use crate::policy::{oracle_baseline, TabularPolicy};
use crate::rng::Stream;

/// Strictly increasing map `g` from latent reward to noiseless score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreTransform {
    Identity,
    /// `a·r + b` with `a > 0`.
    Affine {
        a: f64,
        b: f64,
    },
    /// `σ(r)`.
    LogisticSquash,
}

impl ScoreTransform {
    pub fn apply(&self, reward: f64) -> f64 {
        match *self {
            ScoreTransform::Identity => reward,
            ScoreTransform::Affine { a, b } => a * reward + b,
            ScoreTransform::LogisticSquash => crate::numeric::sigmoid(reward),
        }
    }
}

impl fmt::Display for ScoreTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreTransform::Identity => f.write_str("identity"),
            ScoreTransform::Affine { a, b } => write!(f, "affine:{a:?},{b:?}"),
            ScoreTransform::LogisticSquash => f.write_str("logistic"),
        }
    }
}

impl FromStr for ScoreTransform {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "identity" => Ok(ScoreTransform::Identity),
            "logistic" | "logistic_squash" => Ok(ScoreTransform::LogisticSquash),
            other => {
                let args = other
                    .strip_prefix("affine:")
                    .ok_or_else(|| format!("unknown transform `{other}`"))?;
                let (a, b) = args
                    .split_once(',')
                    .ok_or_else(|| format!("affine needs `a,b`, got `{args}`"))?;
                let a: f64 = a.trim().parse().map_err(|e| format!("bad slope: {e}"))?;
                let b: f64 = b.trim().parse().map_err(|e| format!("bad offset: {e}"))?;
                if !(a > 0.0) {
                    return Err(format!("affine slope must be positive, got {a}"));
                }
                Ok(ScoreTransform::Affine { a, b })
            }
        }
    }
}

/// Additive score noise `ξ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreNoise {
    None,
    /// `N(0, scale²)`.
    Gaussian(f64),
    /// `U[-half_width, half_width]`; bounded worst case.
    Uniform(f64),
}

impl ScoreNoise {
    pub fn scale(&self) -> f64 {
        match *self {
            ScoreNoise::None => 0.0,
            ScoreNoise::Gaussian(s) | ScoreNoise::Uniform(s) => s,
        }
    }

    fn draw(&self, stream: &mut Stream) -> f64 {
        match *self {
            ScoreNoise::None => 0.0,
            ScoreNoise::Gaussian(0.0) | ScoreNoise::Uniform(0.0) => 0.0,
            ScoreNoise::Gaussian(s) => {
                let z: f64 = StandardNormal.sample(stream);
                s * z
            }
            ScoreNoise::Uniform(s) => s * (2.0 * stream.random::<f64>() - 1.0),
        }
    }
}

impl fmt::Display for ScoreNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreNoise::None => f.write_str("none"),
            ScoreNoise::Gaussian(s) => write!(f, "gaussian:{s:?}"),
            ScoreNoise::Uniform(s) => write!(f, "uniform:{s:?}"),
        }
    }
}

impl FromStr for ScoreNoise {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "none" {
            return Ok(ScoreNoise::None);
        }
        let (kind, scale) = s
            .split_once(':')
            .ok_or_else(|| format!("noise must be none, gaussian:<s> or uniform:<s>, got `{s}`"))?;
        let scale: f64 = scale
            .trim()
            .parse()
            .map_err(|e| format!("bad noise scale: {e}"))?;
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(format!("noise scale must be nonnegative, got {scale}"));
        }
        match kind.trim() {
            "gaussian" => Ok(ScoreNoise::Gaussian(scale)),
            "uniform" => Ok(ScoreNoise::Uniform(scale)),
            other => Err(format!("unknown noise kind `{other}`")),
        }
    }
}

/// Observation model `s = g(R) + ξ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreModel {
    pub transform: ScoreTransform,
    pub noise: ScoreNoise,
}

impl ScoreModel {
    pub fn noiseless(transform: ScoreTransform) -> Self {
        ScoreModel {
            transform,
            noise: ScoreNoise::None,
        }
    }

    pub fn gaussian(transform: ScoreTransform, scale: f64) -> Self {
        ScoreModel {
            transform,
            noise: ScoreNoise::Gaussian(scale),
        }
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise.scale()
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_scale() == 0.0
    }
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel::noiseless(ScoreTransform::Identity)
    }
}

/// `g(reward) + ξ`.
pub fn score_sample(model: &ScoreModel, reward: f64, stream: &mut Stream) -> f64 {
    model.transform.apply(reward) + model.noise.draw(stream)
}

/// One unpaired feedback record `(x, y, s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredRecord {
    pub prompt_id: usize,
    pub outcome: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDataset {
    pub records: Vec<ScoredRecord>,
    pub source_policy_tag: String,
}

impl ScoredDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    /// CSV with header `prompt_id,outcome,score`, rows in dataset order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["prompt_id", "outcome", "score"])?;
        for r in &self.records {
            w.write_record([
                r.prompt_id.to_string(),
                r.outcome.to_string(),
                format!("{:?}", r.score),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, source_policy_tag: impl Into<String>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(false)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["prompt_id", "outcome", "score"] {
            return Err(Error::parse(
                Some(1),
                format!("unexpected header {headers:?}"),
            ));
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let line = Some(i + 2);
            let field = |j: usize| row.get(j).unwrap_or_default();
            let prompt_id = field(0)
                .parse()
                .map_err(|e| Error::parse(line, format!("prompt_id: {e}")))?;
            let outcome = field(1)
                .parse()
                .map_err(|e| Error::parse(line, format!("outcome: {e}")))?;
            let score: f64 = field(2)
                .parse()
                .map_err(|e| Error::parse(line, format!("score: {e}")))?;
            if !score.is_finite() {
                return Err(Error::parse(line, "score must be finite"));
            }
            records.push(ScoredRecord {
                prompt_id,
                outcome,
                score,
            });
        }
        Ok(ScoredDataset {
            records,
            source_policy_tag: source_policy_tag.into(),
        })
    }
}

/// Scores every sample with `model`.
pub fn score_dataset(
    samples: &[SampleRecord],
    model: &ScoreModel,
    stream: &mut Stream,
    source_policy_tag: impl Into<String>,
) -> ScoredDataset {
    ScoredDataset {
        records: samples
            .iter()
            .map(|s| ScoredRecord {
                prompt_id: s.prompt_id,
                outcome: s.outcome,
                score: score_sample(model, s.reward, stream),
            })
            .collect(),
        source_policy_tag: source_policy_tag.into(),
    }
}

/// Percentile convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuantileMethod {
    /// The `⌈p·n⌉`-th order statistic (1-based); always an element of the sample.
    NearestRank,
    /// Interpolates order statistics at fractional rank `(n−1)·p`.
    #[default]
    LinearInterpolation,
}

impl fmt::Display for QuantileMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantileMethod::NearestRank => "nearest_rank",
            QuantileMethod::LinearInterpolation => "linear_interpolation",
        })
    }
}

impl FromStr for QuantileMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "nearest_rank" => Ok(QuantileMethod::NearestRank),
            "linear" | "linear_interpolation" => Ok(QuantileMethod::LinearInterpolation),
            other => Err(format!("unknown quantile method `{other}`")),
        }
    }
}

/// Data-driven global threshold `τ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub percentile: f64,
    pub method: QuantileMethod,
    /// Number of scores the value was estimated from; 0 for a fixed threshold.
    pub sample_count: usize,
    /// Asymptotic standard error of the sample quantile.
    pub quantile_std_error: f64,
}

impl Threshold {
    /// A threshold set by hand rather than estimated.
    pub fn fixed(value: f64) -> Self {
        Threshold {
            value,
            percentile: 0.5,
            method: QuantileMethod::LinearInterpolation,
            sample_count: 0,
            quantile_std_error: 0.0,
        }
    }
}

fn check_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "percentile must lie in (0, 1), got {p}"
        )));
    }
    Ok(())
}

/// `τ = Percentile(scores, p)`.
///
/// The standard error uses the asymptotic quantile variance
/// `p(1−p) / (n f(τ)²)` with the density `f` estimated from the spacing of
/// order statistics `⌊√n⌋` ranks either side of the quantile.
pub fn estimate_threshold(scores: &[f64], p: f64, method: QuantileMethod) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(Error::invalid(
            "cannot estimate a threshold from an empty score list",
        ));
    }
    check_percentile(p)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let value = match method {
        QuantileMethod::NearestRank => {
            let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
            sorted[rank - 1]
        }
        QuantileMethod::LinearInterpolation => {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = h - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    };
    Ok(Threshold {
        value,
        percentile: p,
        method,
        sample_count: n,
        quantile_std_error: quantile_std_error(&sorted, p),
    })
}

fn quantile_std_error(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n < 3 {
        return 0.0;
    }
    let h = (n - 1) as f64 * p;
    let half = ((n as f64).sqrt().floor() as usize).max(1);
    let lo = (h.floor() as usize).saturating_sub(half);
    let hi = (h.ceil() as usize + half).min(n - 1);
    let spread = sorted[hi] - sorted[lo];
    if hi == lo || spread <= 0.0 {
        return 0.0;
    }
    // 1/f ≈ n·Δs/Δrank
    let inv_density = n as f64 * spread / (hi - lo) as f64;
    (p * (1.0 - p) / n as f64).sqrt() * inv_density
}

/// `1[s ≥ τ]`; ties at the threshold are positive.
pub fn pseudo_label(score: f64, threshold: &Threshold) -> bool {
    label_from_relative(score - threshold.value)
}

pub fn label_from_relative(relative_score: f64) -> bool {
    relative_score >= 0.0
}

/// `w(s, τ) = 1 + c·|s − τ|`.
pub fn confidence_weight(score: f64, threshold: &Threshold, c: f64) -> f64 {
    weight_from_relative(score - threshold.value, c)
}

#[cfg(not(feature = "mutant-weight-sign"))]
pub fn weight_from_relative(relative_score: f64, c: f64) -> f64 {
    1.0 + c * relative_score.abs()
}

#[cfg(feature = "mutant-weight-sign")]
pub fn weight_from_relative(relative_score: f64, c: f64) -> f64 {
    1.0 - c * relative_score.abs()
}

/// Oracle label `1[R(x,y) ≥ τ*(x)]` for every prompt/outcome cell.
pub fn oracle_labels(env: &TabularEnv, beta: f64) -> Result<Vec<Vec<bool>>> {
    let reference = env.reference_policy();
    (0..env.num_prompts())
        .map(|x| {
            let tau = oracle_baseline(&reference, env, beta, x)?;
            Ok(env.rewards().row(x).iter().map(|r| *r >= tau).collect())
        })
        .collect()
}

/// Fraction of records whose pseudo-label disagrees with the oracle label.
/// The oracle baseline uses the env's reference policy.
pub fn calibration_error(
    dataset: &ScoredDataset,
    env: &TabularEnv,
    beta: f64,
    threshold: &Threshold,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("calibration error of an empty dataset"));
    }
    let oracle = oracle_labels(env, beta)?;
    let mut flips = 0usize;
    for r in &dataset.records {
        let row = oracle.get(r.prompt_id).ok_or(Error::OutOfRange {
            what: "prompt",
            index: r.prompt_id,
            limit: env.num_prompts(),
        })?;
        let star = *row.get(r.outcome).ok_or(Error::OutOfRange {
            what: "outcome",
            index: r.outcome,
            limit: env.num_outcomes(),
        })?;
        if pseudo_label(r.score, threshold) != star {
            flips += 1;
        }
    }
    Ok(flips as f64 / dataset.len() as f64)
}

/// Threshold estimated from `n_proxy` fresh samples of `ref_policy`.
pub fn proxy_threshold(
    ref_policy: &TabularPolicy,
    env: &TabularEnv,
    model: &ScoreModel,
    n_proxy: usize,
    p: f64,
    stream: &mut Stream,
) -> Result<Threshold> {
    if n_proxy == 0 {
        return Err(Error::invalid("proxy set needs at least one sample"));
    }
    let samples = sample_dataset(env, ref_policy, n_proxy, stream)?;
    let scores: Vec<f64> = samples
        .iter()
        .map(|s| score_sample(model, s.reward, stream))
        .collect();
    estimate_threshold(&scores, p, QuantileMethod::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_tabular, RewardSpec};
    use crate::matrix::Matrix;

    #[test]
    fn transforms() {
        let mut s = Stream::new(0);
        let id = ScoreModel::noiseless(ScoreTransform::Identity);
        assert_eq!(score_sample(&id, 1.7, &mut s), 1.7);
        let aff = ScoreModel::noiseless(ScoreTransform::Affine { a: 2.0, b: 1.0 });
        assert_eq!(score_sample(&aff, 3.0, &mut s), 7.0);
        for t in [
            ScoreTransform::Identity,
            ScoreTransform::Affine { a: 0.3, b: -4.0 },
            ScoreTransform::LogisticSquash,
        ] {
            let m = ScoreModel::noiseless(t);
            assert!(score_sample(&m, -0.2, &mut s) < score_sample(&m, 0.1, &mut s));
        }
    }

    #[test]
    fn parse_round_trips() {
        for t in ["identity", "logistic", "affine:2.0,-1.5"] {
            let parsed: ScoreTransform = t.parse().unwrap();
            assert_eq!(
                parsed.to_string().parse::<ScoreTransform>().unwrap(),
                parsed
            );
        }
        assert!("affine:-1,0".parse::<ScoreTransform>().is_err());
        assert_eq!(
            "gaussian:0.5".parse::<ScoreNoise>().unwrap(),
            ScoreNoise::Gaussian(0.5)
        );
        assert!("gaussian:-1".parse::<ScoreNoise>().is_err());
    }

    #[test]
    fn threshold_examples() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        for m in [
            QuantileMethod::NearestRank,
            QuantileMethod::LinearInterpolation,
        ] {
            assert_eq!(estimate_threshold(&s, 0.5, m).unwrap().value, 3.0);
            assert_eq!(estimate_threshold(&[9.0; 7], 0.2, m).unwrap().value, 9.0);
        }
        let even = estimate_threshold(
            &[4.0, 1.0, 3.0, 2.0],
            0.5,
            QuantileMethod::LinearInterpolation,
        )
        .unwrap();
        assert_eq!(even.value, 2.5);
        assert!(estimate_threshold(&[], 0.5, QuantileMethod::NearestRank).is_err());
        assert!(estimate_threshold(&s, 0.0, QuantileMethod::NearestRank).is_err());
        assert!(estimate_threshold(&s, 1.0, QuantileMethod::NearestRank).is_err());
    }

    #[test]
    fn nearest_rank_returns_an_element_within_range() {
        let mut st = Stream::new(5);
        let scores: Vec<f64> = (0..101).map(|_| st.random::<f64>()).collect();
        for p in [0.01, 0.3, 0.5, 0.77, 0.99] {
            let t = estimate_threshold(&scores, p, QuantileMethod::NearestRank).unwrap();
            assert!(scores.contains(&t.value));
            let l = estimate_threshold(&scores, p, QuantileMethod::LinearInterpolation).unwrap();
            let (lo, hi) = scores
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
            assert!(l.value >= lo && l.value <= hi);
        }
    }

    #[test]
    fn labels_and_weights() {
        let t = Threshold::fixed(0.4);
        assert!(pseudo_label(0.4, &t));
        assert!(pseudo_label(0.5, &t));
        assert!(!pseudo_label(0.3, &t));
        let w = confidence_weight(0.6, &t, 5.0);
        if cfg!(not(feature = "mutant-weight-sign")) {
            assert!((w - 2.0).abs() < 1e-12);
            assert!(confidence_weight(0.2, &t, 5.0) >= 1.0);
        }
        assert_eq!(confidence_weight(9.0, &t, 0.0), 1.0);
        assert_eq!(confidence_weight(0.4, &t, 3.0), 1.0);
        assert!((confidence_weight(0.1, &t, 2.0) - confidence_weight(0.7, &t, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn median_labels_at_least_half_positive() {
        let mut st = Stream::new(21);
        for n in [1usize, 2, 5, 10, 11, 64] {
            let scores: Vec<f64> = (0..n).map(|_| st.random::<f64>()).collect();
            let t = estimate_threshold(&scores, 0.5, QuantileMethod::NearestRank).unwrap();
            let pos = scores.iter().filter(|s| pseudo_label(**s, &t)).count();
            assert!(pos as f64 >= 0.5 * n as f64, "n={n} pos={pos}");
        }
    }

    #[test]
    fn std_error_shrinks_like_root_n() {
        // Replicate spread of τ̂ across sample sizes; log-log slope near -1/2.
        let sizes = [100usize, 1_000, 10_000, 100_000];
        let mut spreads = Vec::new();
        let mut reported = Vec::new();
        for (i, &n) in sizes.iter().enumerate() {
            let mut values = Vec::new();
            let mut ses = Vec::new();
            for r in 0..40u64 {
                let mut st = Stream::derived(1000 + i as u64, r);
                let scores: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut st)).collect();
                let t =
                    estimate_threshold(&scores, 0.5, QuantileMethod::LinearInterpolation).unwrap();
                values.push(t.value);
                ses.push(t.quantile_std_error);
            }
            spreads.push(crate::numeric::std_dev(&values));
            reported.push(crate::numeric::mean(&ses));
        }
        let slope = crate::numeric::loglog_slope(&sizes.map(|n| n as f64), &spreads);
        assert!((-0.65..=-0.35).contains(&slope), "replicate slope {slope}");
        let se_slope = crate::numeric::loglog_slope(&sizes.map(|n| n as f64), &reported);
        assert!(
            (-0.65..=-0.35).contains(&se_slope),
            "reported slope {se_slope}"
        );
        // Normal median: sd = sqrt(pi/2)/sqrt(n)
        let want = (std::f64::consts::PI / 2.0).sqrt() / 1000f64.sqrt();
        assert!(
            (reported[1] / want - 1.0).abs() < 0.2,
            "{} vs {want}",
            reported[1]
        );
    }

    fn shared_row_env() -> TabularEnv {
        let row = vec![0.9, -0.4, 0.2, -1.1];
        let refs = vec![0.1, 0.3, -0.2, 0.0];
        TabularEnv::with_uniform_prompts(
            Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap(),
            Matrix::from_rows(&[refs.clone(), refs.clone(), refs]).unwrap(),
        )
        .unwrap()
    }

    fn scored(env: &TabularEnv, model: &ScoreModel, n: usize, seed: u64) -> ScoredDataset {
        let mut st = Stream::new(seed);
        let samples = sample_dataset(env, &env.reference_policy(), n, &mut st).unwrap();
        score_dataset(&samples, model, &mut st, "ref")
    }

    #[test]
    fn calibration_zero_when_threshold_is_oracle_baseline() {
        let env = shared_row_env();
        let tau = oracle_baseline(&env.reference_policy(), &env, 1.0, 0).unwrap();
        let data = scored(&env, &ScoreModel::default(), 2000, 3);
        assert_eq!(
            calibration_error(&data, &env, 1.0, &Threshold::fixed(tau)).unwrap(),
            0.0
        );
    }

    #[test]
    fn calibration_matches_brute_force_recount() {
        // Zero noise, shared τ*: flips are exactly the records whose score
        // lies between τ and τ*.
        let env = shared_row_env();
        let beta = 1.0;
        let tau_star = oracle_baseline(&env.reference_policy(), &env, beta, 0).unwrap();
        let data = scored(&env, &ScoreModel::default(), 3000, 8);
        for tau in [-0.5, 0.0, 0.25, 0.95] {
            let (lo, hi) = if tau < tau_star {
                (tau, tau_star)
            } else {
                (tau_star, tau)
            };
            let between = data
                .records
                .iter()
                .filter(|r| r.score >= lo && r.score < hi)
                .count();
            let want = between as f64 / data.len() as f64;
            let got = calibration_error(&data, &env, beta, &Threshold::fixed(tau)).unwrap();
            assert_eq!(got, want, "tau={tau}");
        }
    }

    #[test]
    fn calibration_under_huge_noise_approaches_label_split() {
        let env = shared_row_env();
        let beta = 1.0;
        let tau_star = oracle_baseline(&env.reference_policy(), &env, beta, 0).unwrap();
        let range = 0.9 - (-1.1);
        let model = ScoreModel::gaussian(ScoreTransform::Identity, 10.0 * range);
        let data = scored(&env, &model, 40_000, 12);
        let t = Threshold::fixed(tau_star);
        let star_rate = {
            let p = env.reference_policy().probs(0);
            env.rewards()
                .row(0)
                .iter()
                .zip(&p)
                .filter(|(r, _)| **r >= tau_star)
                .map(|(_, q)| q)
                .sum::<f64>()
        };
        let label_rate = data
            .records
            .iter()
            .filter(|r| pseudo_label(r.score, &t))
            .count() as f64
            / data.len() as f64;
        let independent = label_rate * (1.0 - star_rate) + (1.0 - label_rate) * star_rate;
        let got = calibration_error(&data, &env, beta, &t).unwrap();
        assert!((got - independent).abs() < 0.03, "{got} vs {independent}");
    }

    #[test]
    fn calibration_empty_rejected() {
        let env = shared_row_env();
        let empty = ScoredDataset {
            records: vec![],
            source_policy_tag: String::new(),
        };
        assert!(calibration_error(&empty, &env, 1.0, &Threshold::fixed(0.0)).is_err());
    }

    #[test]
    fn proxy_threshold_constant_env() {
        let env = make_tabular(2, 2, 3, RewardSpec::Constant(1.25)).unwrap();
        for n in [1, 10, 500] {
            let t = proxy_threshold(
                &env.reference_policy(),
                &env,
                &ScoreModel::default(),
                n,
                0.5,
                &mut Stream::new(n as u64),
            )
            .unwrap();
            assert_eq!(t.value, 1.25);
        }
    }

    #[test]
    fn proxy_threshold_converges_to_full_data_threshold() {
        let env = make_tabular(4, 3, 5, RewardSpec::UniformRandom).unwrap();
        let model = ScoreModel::gaussian(ScoreTransform::Identity, 0.1);
        let reference = env.reference_policy();
        let full =
            proxy_threshold(&reference, &env, &model, 400_000, 0.5, &mut Stream::new(1)).unwrap();
        let mut diffs = Vec::new();
        for n in [100usize, 1_000, 10_000] {
            let d: Vec<f64> = (0..30u64)
                .map(|r| {
                    let t = proxy_threshold(
                        &reference,
                        &env,
                        &model,
                        n,
                        0.5,
                        &mut Stream::derived(n as u64, r),
                    )
                    .unwrap();
                    (t.value - full.value).abs()
                })
                .collect();
            diffs.push(crate::numeric::mean(&d));
        }
        assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
    }

    #[test]
    fn independent_proxy_streams_agree() {
        let env = make_tabular(6, 3, 5, RewardSpec::Bimodal).unwrap();
        let model = ScoreModel::gaussian(ScoreTransform::Identity, 0.2);
        let r = env.reference_policy();
        let a = proxy_threshold(&r, &env, &model, 10_000, 0.5, &mut Stream::new(100)).unwrap();
        let b = proxy_threshold(&r, &env, &model, 10_000, 0.5, &mut Stream::new(200)).unwrap();
        let se = a.quantile_std_error.max(b.quantile_std_error);
        assert!(
            (a.value - b.value).abs() <= 3.0 * se,
            "{} {} se={se}",
            a.value,
            b.value
        );
    }

    #[test]
    fn dataset_csv_round_trip_and_strictness() {
        let env = make_tabular(1, 2, 3, RewardSpec::Bimodal).unwrap();
        let data = scored(
            &env,
            &ScoreModel::gaussian(ScoreTransform::Identity, 0.3),
            50,
            2,
        );
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("prompt_id,outcome,score\n"));
        let back = ScoredDataset::read_csv(buf.as_slice(), "ref").unwrap();
        assert_eq!(back, data);
        assert!(ScoredDataset::read_csv("a,b,c\n1,2,3\n".as_bytes(), "x").is_err());
        assert!(ScoredDataset::read_csv("prompt_id,outcome,score\n1,2\n".as_bytes(), "x").is_err());
    }
}
