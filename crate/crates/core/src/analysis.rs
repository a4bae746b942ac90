//! Statistical experiments on enumerable environments: the exact population
//! minimizer of the threshold-guided loss, consistency and bias of empirical
//! minimizers, calibration of pseudo-labels, and percentile sensitivity.
//!
//! The population problem uses fixed labels and weights per prompt/outcome
//! cell, computed from noiseless scores against the exact population
//! quantile. Without regularization the loss has no finite minimizer as soon
//! as a prompt has a negatively labeled outcome (its logit is pushed to −∞),
//! so the problem carries a ridge `λ/2·‖θ − θ_ref‖²`. The ridge also pins the
//! per-row mean of the logits to that of the reference.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::env::{make_tabular, RewardSpec, TabularEnv};
use crate::error::{Error, Result};
use crate::feedback::{
    calibration_error, estimate_threshold, label_from_relative, pseudo_label, score_dataset,
    weight_from_relative, QuantileMethod, ScoreModel, ScoreNoise, ScoreTransform, Threshold,
};
use crate::matrix::Matrix;
use crate::numeric::{loglog_slope, mean, median, sigmoid, softplus, std_dev};
use crate::objective::TgoConfig;
use crate::policy::{log_softmax, TabularPolicy};
use crate::rng::{derive_seed, Stream};
use crate::trainer::{
    evaluate_policy, run_on_dataset, simulate, weighted_quantile, TrainConfig, DECILES,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub tgo: TgoConfig,
    /// Ridge strength `λ` pulling the logits toward the reference.
    pub ridge: f64,
    /// Stop when the full gradient norm falls below this.
    pub tolerance: f64,
    /// Newton iterations per prompt block.
    pub max_iterations: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            tgo: TgoConfig::default(),
            ridge: 0.1,
            tolerance: 1e-9,
            max_iterations: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    positive: bool,
    weight: f64,
}

/// Fits the threshold-guided loss over the `K×M` cells of an environment.
///
/// Masses are given per cell in row-major order. The population masses are
/// `w_x·π_ref(y|x)`; an empirical problem uses cell frequencies instead.
#[derive(Clone, Debug)]
pub struct PopulationProblem {
    reference: TabularPolicy,
    ref_log_probs: Matrix,
    threshold: f64,
    cells: Vec<Cell>,
    population_masses: Vec<f64>,
    config: AnalysisConfig,
}

/// Result of a fit: logits, final gradient norm and Newton iterations used.
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub theta: Matrix,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl PopulationProblem {
    /// Labels and weights come from `score_model` applied to the rewards, with
    /// the threshold at the lower `percentile` quantile of the population
    /// score distribution. The model must be noiseless.
    pub fn new(
        env: &TabularEnv,
        reference: &TabularPolicy,
        score_model: &ScoreModel,
        config: &AnalysisConfig,
    ) -> Result<Self> {
        reference.check_env(env)?;
        config.tgo.validate()?;
        if !score_model.is_noiseless() {
            return Err(Error::invalid(
                "the population problem needs a noiseless score model so the expectation is a finite sum",
            ));
        }
        if !(config.ridge >= 0.0 && config.ridge.is_finite()) {
            return Err(Error::invalid(format!(
                "ridge must be nonnegative, got {}",
                config.ridge
            )));
        }
        let (k, m) = reference.shape();
        let mut scores = Vec::with_capacity(k * m);
        let mut masses = Vec::with_capacity(k * m);
        for x in 0..k {
            let p = reference.probs(x);
            for (y, py) in p.iter().enumerate() {
                scores.push(score_model.transform.apply(env.reward(x, y)));
                masses.push(env.prompt_weights()[x] * py);
            }
        }
        let mut atoms: Vec<(f64, f64)> =
            scores.iter().copied().zip(masses.iter().copied()).collect();
        let threshold = weighted_quantile(&mut atoms, config.tgo.percentile);
        let cells = scores
            .iter()
            .map(|s| Cell {
                positive: label_from_relative(s - threshold),
                weight: weight_from_relative(s - threshold, config.tgo.c),
            })
            .collect();
        Ok(PopulationProblem {
            reference: reference.clone(),
            ref_log_probs: reference.log_prob_matrix(),
            threshold,
            cells,
            population_masses: masses,
            config: *config,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    pub fn shape(&self) -> (usize, usize) {
        self.reference.shape()
    }

    pub fn reference(&self) -> &TabularPolicy {
        &self.reference
    }

    pub fn population_masses(&self) -> &[f64] {
        &self.population_masses
    }

    /// Pseudo-label of each cell, row-major.
    pub fn labels(&self) -> Vec<bool> {
        self.cells.iter().map(|c| c.positive).collect()
    }

    /// True when every cell with positive mass carries the same label.
    pub fn single_label(&self) -> bool {
        let mut seen = self
            .cells
            .iter()
            .zip(&self.population_masses)
            .filter(|(_, m)| **m > 0.0)
            .map(|(c, _)| c.positive);
        match seen.next() {
            Some(first) => seen.all(|l| l == first),
            None => true,
        }
    }

    fn check_masses(&self, masses: &[f64]) -> Result<()> {
        if masses.len() != self.cells.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} cell masses", self.cells.len()),
                found: masses.len().to_string(),
            });
        }
        Ok(())
    }

    /// Loss, gradient and Hessian of prompt block `x` at logits `row`.
    fn block(&self, x: usize, row: &[f64], masses: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let m = row.len();
        let beta = self.config.tgo.beta;
        let lambda = self.config.ridge;
        let lp = log_softmax(row);
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let ref_row = self.reference.logits().row(x);
        let lref = self.ref_log_probs.row(x);
        let mut loss = 0.0;
        let mut grad = DVector::zeros(m);
        let mut hess = DMatrix::zeros(m, m);
        for y in 0..m {
            let d = row[y] - ref_row[y];
            loss += 0.5 * lambda * d * d;
            grad[y] += lambda * d;
            hess[(y, y)] += lambda;
        }
        // C = diag(π) − ππᵀ, shared by every sample of the block.
        let cov = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                p[i] - p[i] * p[j]
            } else {
                -p[i] * p[j]
            }
        });
        for y in 0..m {
            let a = masses[x * m + y];
            if a == 0.0 {
                continue;
            }
            let cell = self.cells[x * m + y];
            let z = beta * (lp[y] - lref[y]);
            let s = sigmoid(z);
            let (f, f1) = if cell.positive {
                (softplus(-z), s - 1.0)
            } else {
                (softplus(z), s)
            };
            let f2 = s * sigmoid(-z);
            let w = cell.weight;
            loss += a * w * f;
            let g = DVector::from_fn(m, |j, _| if j == y { 1.0 - p[j] } else { -p[j] });
            grad.axpy(a * w * f1 * beta, &g, 1.0);
            hess += (a * w * f2 * beta * beta) * (&g * g.transpose()) - (a * w * f1 * beta) * &cov;
        }
        (loss, grad, hess)
    }

    pub fn loss(&self, theta: &Matrix, masses: &[f64]) -> Result<f64> {
        self.check_masses(masses)?;
        Ok((0..theta.rows())
            .map(|x| self.block(x, theta.row(x), masses).0)
            .sum())
    }

    pub fn gradient(&self, theta: &Matrix, masses: &[f64]) -> Result<Matrix> {
        self.check_masses(masses)?;
        let (k, m) = self.shape();
        let mut out = Matrix::zeros(k, m);
        for x in 0..k {
            let g = self.block(x, theta.row(x), masses).1;
            out.row_mut(x).copy_from_slice(g.as_slice());
        }
        Ok(out)
    }

    /// Block-diagonal Hessian over the flattened row-major logits.
    pub fn hessian(&self, theta: &Matrix, masses: &[f64]) -> Result<Matrix> {
        self.check_masses(masses)?;
        let (k, m) = self.shape();
        let mut out = Matrix::zeros(k * m, k * m);
        for x in 0..k {
            let h = self.block(x, theta.row(x), masses).2;
            for i in 0..m {
                for j in 0..m {
                    out[(x * m + i, x * m + j)] = h[(i, j)];
                }
            }
        }
        Ok(out)
    }

    /// Per-cell loss gradients at `theta`, ridge excluded, flattened.
    pub fn cell_gradients(&self, theta: &Matrix) -> Vec<Vec<f64>> {
        let (k, m) = self.shape();
        let beta = self.config.tgo.beta;
        let mut out = Vec::with_capacity(k * m);
        for x in 0..k {
            let lp = log_softmax(theta.row(x));
            for y in 0..m {
                let cell = self.cells[x * m + y];
                let z = beta * (lp[y] - self.ref_log_probs[(x, y)]);
                let f1 = if cell.positive {
                    sigmoid(z) - 1.0
                } else {
                    sigmoid(z)
                };
                let mut g = vec![0.0; k * m];
                for j in 0..m {
                    let e = if j == y { 1.0 } else { 0.0 };
                    g[x * m + j] = cell.weight * f1 * beta * (e - lp[j].exp());
                }
                out.push(g);
            }
        }
        out
    }

    /// Damped Newton from `start`, prompt block by prompt block.
    pub fn minimize(&self, masses: &[f64], start: &Matrix) -> Result<Fit> {
        self.check_masses(masses)?;
        let (k, m) = self.shape();
        if start.shape() != (k, m) {
            return Err(Error::ShapeMismatch {
                expected: format!("{k}x{m}"),
                found: format!("{:?}", start.shape()),
            });
        }
        let block_tol = self.config.tolerance / (k as f64).sqrt();
        let mut theta = start.clone();
        let mut iterations = 0;
        for x in 0..k {
            let mut row = DVector::from_column_slice(theta.row(x));
            for _ in 0..self.config.max_iterations {
                let (f, g, h) = self.block(x, row.as_slice(), masses);
                if g.norm() < block_tol {
                    break;
                }
                iterations += 1;
                let step = newton_direction(&h, &g, self.config.ridge);
                let slope = g.dot(&step);
                if slope <= 1e-12 * (1.0 + f.abs()) {
                    // Loss changes are below roundoff; trust the quadratic model.
                    row -= &step;
                    continue;
                }
                let mut t = 1.0;
                while t > 1e-12 {
                    let trial = &row - t * &step;
                    if self.block(x, trial.as_slice(), masses).0 <= f - 1e-4 * t * slope {
                        row = trial;
                        break;
                    }
                    t *= 0.5;
                }
            }
            theta.row_mut(x).copy_from_slice(row.as_slice());
        }
        let grad_norm = self.gradient(&theta, masses)?.frobenius_norm();
        if !(grad_norm < self.config.tolerance) {
            return Err(Error::NoConvergence {
                iterations,
                grad_norm,
            });
        }
        Ok(Fit {
            theta,
            grad_norm,
            iterations,
        })
    }

    /// Exact population minimizer, started at the reference logits.
    pub fn population_fit(&self) -> Result<Fit> {
        self.minimize(&self.population_masses, self.reference.logits())
    }
}

/// Newton direction `H⁻¹g`, with a Levenberg shift if the block Hessian is
/// not positive definite. Without a ridge the loss is flat along the
/// logit-shift direction `1`, which is filled in so the system is solvable.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let m = h.nrows();
    let base = if ridge > 0.0 {
        h.clone()
    } else {
        h + DMatrix::from_element(m, m, 1.0 / m as f64)
    };
    let scale = base.diagonal().amax().max(1e-12);
    let mut shift = 0.0;
    for _ in 0..60 {
        let shifted = &base + DMatrix::identity(m, m) * shift;
        if let Some(ch) = shifted.cholesky() {
            let d = ch.solve(g);
            if g.dot(&d) > 0.0 {
                return d;
            }
        }
        shift = if shift == 0.0 {
            1e-10 * scale
        } else {
            shift * 10.0
        };
    }
    g.clone()
}

/// Exact population minimizer `θ*` of the threshold-guided loss.
pub fn population_minimizer(
    env: &TabularEnv,
    reference: &TabularPolicy,
    score_model: &ScoreModel,
    config: &AnalysisConfig,
) -> Result<TabularPolicy> {
    let problem = PopulationProblem::new(env, reference, score_model, config)?;
    TabularPolicy::new(problem.population_fit()?.theta)
}

/// Cell counts of `n` draws from `masses`, by a chain of conditional binomials.
pub fn multinomial_counts(n: u64, masses: &[f64], stream: &mut Stream) -> Vec<u64> {
    let mut remaining = n;
    let mut remaining_mass: f64 = masses.iter().sum();
    let mut counts = vec![0; masses.len()];
    for (i, &m) in masses.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == masses.len() || remaining_mass <= m {
            counts[i] = remaining;
            break;
        }
        let p = (m / remaining_mass).clamp(0.0, 1.0);
        let c = Binomial::new(remaining, p)
            .expect("p lies in [0, 1]")
            .sample(stream);
        counts[i] = c;
        remaining -= c;
        remaining_mass -= m;
    }
    counts
}

fn empirical_masses(problem: &PopulationProblem, n: usize, stream: &mut Stream) -> Vec<f64> {
    multinomial_counts(n as u64, problem.population_masses(), stream)
        .into_iter()
        .map(|c| c as f64 / n as f64)
        .collect()
}

/// One failed replicate fit.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub sample_size: usize,
    pub replicate: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub sample_sizes: Vec<usize>,
    /// Mean of `‖center(θ̂_n − θ*)‖` over successful replicates.
    pub mean_param_error: Vec<f64>,
    /// Standard error of that mean; 0 with a single replicate.
    pub std_error: Vec<f64>,
    pub loglog_slope: f64,
    pub replicates: usize,
    pub failures: Vec<CellFailure>,
}

impl ConsistencyReport {
    /// Columns `n,mean_param_error,std_error`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["n", "mean_param_error", "std_error"])?;
        for i in 0..self.sample_sizes.len() {
            w.write_record([
                self.sample_sizes[i].to_string(),
                format!("{:?}", self.mean_param_error[i]),
                format!("{:?}", self.std_error[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn check_sizes(sample_sizes: &[usize], replicates: usize) -> Result<()> {
    if sample_sizes.is_empty() || replicates == 0 {
        return Err(Error::invalid(
            "need at least one sample size and one replicate",
        ));
    }
    if sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sample sizes must be strictly increasing"));
    }
    if sample_sizes[0] == 0 {
        return Err(Error::invalid("sample sizes must be positive"));
    }
    Ok(())
}

type ReplicateOutcome<T> = std::result::Result<T, String>;

/// Runs `f(n, stream)` for each sample size and replicate, in parallel, with
/// results in replicate order.
fn replicate_grid<T: Send>(
    sample_sizes: &[usize],
    replicates: usize,
    seed: u64,
    f: impl Fn(usize, &mut Stream) -> Result<T> + Sync,
) -> Vec<Vec<ReplicateOutcome<T>>> {
    sample_sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let cell_seed = derive_seed(seed, i as u64);
            (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let mut stream = Stream::derived(cell_seed, r as u64);
                    f(n, &mut stream).map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect()
}

/// Empirical minimizers on `n` samples against `θ*`, over a sweep of `n`.
pub fn consistency_experiment(
    problem: &PopulationProblem,
    theta_star: &Matrix,
    sample_sizes: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    check_sizes(sample_sizes, replicates)?;
    let grid = replicate_grid(sample_sizes, replicates, seed, |n, stream| {
        let masses = empirical_masses(problem, n, stream);
        let fit = problem.minimize(&masses, theta_star)?;
        let mut d = fit.theta;
        d.axpy(-1.0, theta_star);
        Ok(d.center_rows().frobenius_norm())
    });
    let mut report = ConsistencyReport {
        sample_sizes: sample_sizes.to_vec(),
        mean_param_error: Vec::new(),
        std_error: Vec::new(),
        loglog_slope: f64::NAN,
        replicates,
        failures: Vec::new(),
    };
    for (i, cells) in grid.into_iter().enumerate() {
        let mut errors = Vec::new();
        for (r, out) in cells.into_iter().enumerate() {
            match out {
                Ok(e) => errors.push(e),
                Err(message) => report.failures.push(CellFailure {
                    sample_size: sample_sizes[i],
                    replicate: r,
                    message,
                }),
            }
        }
        report.mean_param_error.push(mean(&errors));
        report.std_error.push(standard_error(&errors));
    }
    if sample_sizes.len() >= 2 {
        let xs: Vec<f64> = sample_sizes.iter().map(|n| *n as f64).collect();
        report.loglog_slope = loglog_slope(&xs, &report.mean_param_error);
    }
    Ok(report)
}

fn standard_error(values: &[f64]) -> f64 {
    if values.len() < 2 {
        0.0
    } else {
        std_dev(values) / (values.len() as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub sample_sizes: Vec<usize>,
    /// Control-variate estimate of `E[θ̂_n] − θ*` per `n`, gauge-centered and
    /// flattened row-major.
    pub mean_signed_error: Vec<Vec<f64>>,
    /// Plain replicate mean of `center(θ̂_n − θ*)`.
    pub raw_mean_signed_error: Vec<Vec<f64>>,
    pub error_norm: Vec<f64>,
    pub raw_error_norm: Vec<f64>,
    /// Norm of the per-coordinate standard errors of `mean_signed_error`.
    pub noise_floor: Vec<f64>,
    /// Log-log slope of `error_norm` against `n`.
    pub fitted_slope: f64,
    pub raw_fitted_slope: f64,
    pub hessian_at_opt: Matrix,
    pub score_covariance: Matrix,
    pub third_moment_tensor_norm: f64,
    pub min_eigenvalue: f64,
    pub condition_number: f64,
    pub positive_definite: bool,
    /// Condition number above `1e8`.
    pub ill_conditioned: bool,
    /// All population cells share one pseudo-label.
    pub single_label: bool,
    /// The quadratic expansion around `θ*` is meaningful: mixed labels and a
    /// well-conditioned positive definite Hessian.
    pub expansion_applicable: bool,
    pub replicates: usize,
    pub failures: Vec<CellFailure>,
}

impl BiasReport {
    /// Columns `n,error_norm,raw_error_norm,noise_floor`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["n", "error_norm", "raw_error_norm", "noise_floor"])?;
        for i in 0..self.sample_sizes.len() {
            w.write_record([
                self.sample_sizes[i].to_string(),
                format!("{:?}", self.error_norm[i]),
                format!("{:?}", self.raw_error_norm[i]),
                format!("{:?}", self.noise_floor[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn center_flat(v: &mut [f64], m: usize) {
    for row in v.chunks_mut(m) {
        let mu = row.iter().sum::<f64>() / m as f64;
        row.iter_mut().for_each(|x| *x -= mu);
    }
}

/// Frobenius norm of the third-derivative tensor, by central differences of
/// the analytic Hessian.
fn third_moment_norm(problem: &PopulationProblem, theta: &Matrix, masses: &[f64]) -> Result<f64> {
    let h = 1e-5;
    let mut total = 0.0;
    let mut work = theta.clone();
    for i in 0..theta.as_slice().len() {
        let v = theta.as_slice()[i];
        work.as_mut_slice()[i] = v + h;
        let up = problem.hessian(&work, masses)?;
        work.as_mut_slice()[i] = v - h;
        let down = problem.hessian(&work, masses)?;
        work.as_mut_slice()[i] = v;
        total += up
            .as_slice()
            .iter()
            .zip(down.as_slice())
            .map(|(a, b)| ((a - b) / (2.0 * h)).powi(2))
            .sum::<f64>();
    }
    Ok(total.sqrt())
}

/// Mean signed error of empirical minimizers and the population quantities
/// of the second-order expansion (`H`, `S`, and the norm of `J`).
///
/// The first-order term of `θ̂_n − θ*` is `−H⁻¹∇L_n(θ*)`, which has mean zero
/// but dominates the replicate noise. Adding it back gives an estimator with
/// the same expectation and far smaller variance, so the `1/n` signal is
/// visible with hundreds rather than millions of replicates.
pub fn bias_experiment(
    problem: &PopulationProblem,
    theta_star: &Matrix,
    sample_sizes: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<BiasReport> {
    check_sizes(sample_sizes, replicates)?;
    let (k, m) = problem.shape();
    let dim = k * m;
    let pop = problem.population_masses().to_vec();
    let hessian = problem.hessian(theta_star, &pop)?;
    let h = to_dmatrix(&hessian);
    let eig = h.clone().symmetric_eigen().eigenvalues;
    let min_eigenvalue = eig.min();
    let max_eigenvalue = eig.max();
    let positive_definite = min_eigenvalue > 0.0;
    let condition_number = if positive_definite {
        max_eigenvalue / min_eigenvalue
    } else {
        f64::INFINITY
    };
    let h_inv = h
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("population Hessian is singular"))?;

    let grads = problem.cell_gradients(theta_star);
    let mut mean_grad = vec![0.0; dim];
    for (g, a) in grads.iter().zip(&pop) {
        for (acc, v) in mean_grad.iter_mut().zip(g) {
            *acc += a * v;
        }
    }
    let score_covariance = Matrix::from_fn(dim, dim, |i, j| {
        grads
            .iter()
            .zip(&pop)
            .map(|(g, a)| a * g[i] * g[j])
            .sum::<f64>()
            - mean_grad[i] * mean_grad[j]
    });

    let grid = replicate_grid(sample_sizes, replicates, seed, |n, stream| {
        let masses = empirical_masses(problem, n, stream);
        let fit = problem.minimize(&masses, theta_star)?;
        let mut raw: Vec<f64> = fit
            .theta
            .as_slice()
            .iter()
            .zip(theta_star.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        center_flat(&mut raw, m);
        let g = problem.gradient(theta_star, &masses)?;
        let mut corr: Vec<f64> = (&h_inv * DVector::from_column_slice(g.as_slice()))
            .as_slice()
            .to_vec();
        center_flat(&mut corr, m);
        let cv: Vec<f64> = raw.iter().zip(&corr).map(|(a, b)| a + b).collect();
        Ok((raw, cv))
    });

    let mut report = BiasReport {
        sample_sizes: sample_sizes.to_vec(),
        mean_signed_error: Vec::new(),
        raw_mean_signed_error: Vec::new(),
        error_norm: Vec::new(),
        raw_error_norm: Vec::new(),
        noise_floor: Vec::new(),
        fitted_slope: f64::NAN,
        raw_fitted_slope: f64::NAN,
        hessian_at_opt: hessian,
        score_covariance,
        third_moment_tensor_norm: third_moment_norm(problem, theta_star, &pop)?,
        min_eigenvalue,
        condition_number,
        positive_definite,
        ill_conditioned: condition_number > 1e8,
        single_label: problem.single_label(),
        expansion_applicable: false,
        replicates,
        failures: Vec::new(),
    };
    report.expansion_applicable =
        !report.single_label && positive_definite && !report.ill_conditioned;

    for (i, cells) in grid.into_iter().enumerate() {
        let mut raws = Vec::new();
        let mut cvs = Vec::new();
        for (r, out) in cells.into_iter().enumerate() {
            match out {
                Ok((raw, cv)) => {
                    raws.push(raw);
                    cvs.push(cv);
                }
                Err(message) => report.failures.push(CellFailure {
                    sample_size: sample_sizes[i],
                    replicate: r,
                    message,
                }),
            }
        }
        let column = |rows: &[Vec<f64>], j: usize| rows.iter().map(|v| v[j]).collect::<Vec<f64>>();
        let cv_mean: Vec<f64> = (0..dim).map(|j| mean(&column(&cvs, j))).collect();
        let raw_mean: Vec<f64> = (0..dim).map(|j| mean(&column(&raws, j))).collect();
        let floor = (0..dim)
            .map(|j| standard_error(&column(&cvs, j)).powi(2))
            .sum::<f64>()
            .sqrt();
        report.error_norm.push(norm(&cv_mean));
        report.raw_error_norm.push(norm(&raw_mean));
        report.noise_floor.push(floor);
        report.mean_signed_error.push(cv_mean);
        report.raw_mean_signed_error.push(raw_mean);
    }
    if sample_sizes.len() >= 2 {
        let xs: Vec<f64> = sample_sizes.iter().map(|n| *n as f64).collect();
        report.fitted_slope = loglog_slope(&xs, &report.error_norm);
        report.raw_fitted_slope = loglog_slope(&xs, &report.raw_error_norm);
    }
    Ok(report)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The fixed 2×4 environment used by the consistency and bias experiments:
/// well-separated rewards on both sides of the median and a non-uniform
/// reference.
pub fn reference_env() -> TabularEnv {
    TabularEnv::with_uniform_prompts(
        Matrix::from_rows(&[vec![0.9, -0.8, 0.3, -0.2], vec![-0.6, 1.1, 0.1, -1.0]])
            .expect("rectangular"),
        Matrix::from_rows(&[vec![0.2, -0.1, 0.0, -0.3], vec![0.0, 0.3, -0.2, 0.1]])
            .expect("rectangular"),
    )
    .expect("valid reference environment")
}

/// Environment whose prompts all share one random bimodal reward row and one
/// reference row, so the oracle baseline is the same for every prompt.
pub fn shared_row_env(seed: u64, prompts: usize, outcomes: usize) -> Result<TabularEnv> {
    let one = make_tabular(seed, 1, outcomes, RewardSpec::Bimodal)?;
    let rewards: Vec<Vec<f64>> = (0..prompts)
        .map(|_| one.rewards().row(0).to_vec())
        .collect();
    let refs: Vec<Vec<f64>> = (0..prompts)
        .map(|_| one.ref_logits().row(0).to_vec())
        .collect();
    TabularEnv::with_uniform_prompts(
        Matrix::from_rows(&rewards).expect("rectangular"),
        Matrix::from_rows(&refs).expect("rectangular"),
    )
}

/// How the calibration sweep thresholds scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CalibrationThreshold {
    Fixed(f64),
    /// Percentile of each replicate's own scores.
    Percentile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationRow {
    pub noise_scale: f64,
    pub mean_error: f64,
    pub std_error: f64,
    pub replicates: usize,
}

/// Label disagreement rate against the oracle rule across Gaussian noise
/// scales. Replicate `r` uses the same samples and the same standard normal
/// draws at every scale, so the scales differ only in noise magnitude.
#[allow(clippy::too_many_arguments)]
pub fn calibration_sweep(
    env: &TabularEnv,
    beta: f64,
    transform: ScoreTransform,
    noise_scales: &[f64],
    n_samples: usize,
    replicates: usize,
    threshold: CalibrationThreshold,
    seed: u64,
) -> Result<Vec<CalibrationRow>> {
    if noise_scales.is_empty() || replicates == 0 || n_samples == 0 {
        return Err(Error::invalid("need noise scales, replicates and samples"));
    }
    let reference = env.reference_policy();
    noise_scales
        .iter()
        .map(|&scale| {
            let model = ScoreModel {
                transform,
                noise: ScoreNoise::Gaussian(scale),
            };
            let errors: Vec<f64> = (0..replicates)
                .into_par_iter()
                .map(|r| -> Result<f64> {
                    let mut sample_stream = Stream::derived(seed, r as u64);
                    let samples =
                        crate::env::sample_dataset(env, &reference, n_samples, &mut sample_stream)?;
                    let mut noise_stream = Stream::derived(derive_seed(seed, u64::MAX), r as u64);
                    let data = score_dataset(&samples, &model, &mut noise_stream, "reference");
                    let tau = match threshold {
                        CalibrationThreshold::Fixed(v) => Threshold::fixed(v),
                        CalibrationThreshold::Percentile(p) => estimate_threshold(
                            &data.scores(),
                            p,
                            QuantileMethod::LinearInterpolation,
                        )?,
                    };
                    calibration_error(&data, env, beta, &tau)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(CalibrationRow {
                noise_scale: scale,
                mean_error: mean(&errors),
                std_error: standard_error(&errors),
                replicates,
            })
        })
        .collect()
}

/// Columns `noise_scale,mean_error,std_error,replicates`.
pub fn write_calibration_csv<W: Write>(rows: &[CalibrationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["noise_scale", "mean_error", "std_error", "replicates"])?;
    for r in rows {
        w.write_record([
            format!("{:?}", r.noise_scale),
            format!("{:?}", r.mean_error),
            format!("{:?}", r.std_error),
            r.replicates.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// One training run in a percentile sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensitivityRow {
    pub percentile: f64,
    pub replicate: usize,
    pub env_index: usize,
    pub mean_reward: f64,
    pub kl_to_optimal: f64,
    pub calibration_error: f64,
    pub positive_count: usize,
}

/// Per-percentile medians over replicates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensitivityAggregate {
    pub percentile: f64,
    pub mean_reward: f64,
    pub kl_to_optimal: f64,
    pub calibration_error: f64,
    pub positive_count: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityGrid {
    pub percentiles: Vec<f64>,
    pub replicates: usize,
    /// Ordered by replicate, then percentile.
    pub rows: Vec<SensitivityRow>,
    pub aggregates: Vec<SensitivityAggregate>,
}

impl SensitivityGrid {
    /// Fraction of replicates in which `percentile` is among the two best by
    /// final mean reward. Ties share the better rank.
    pub fn top_two_rate(&self, percentile: f64) -> f64 {
        let mut hits = 0;
        for r in 0..self.replicates {
            let rows: Vec<&SensitivityRow> =
                self.rows.iter().filter(|row| row.replicate == r).collect();
            let Some(me) = rows.iter().find(|row| row.percentile == percentile) else {
                continue;
            };
            let better = rows
                .iter()
                .filter(|row| row.mean_reward > me.mean_reward)
                .count();
            if better < 2 {
                hits += 1;
            }
        }
        hits as f64 / self.replicates as f64
    }

    /// Run rows then aggregate rows; aggregate rows have `replicate` and
    /// `env` set to `median`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "percentile",
            "replicate",
            "env",
            "mean_reward",
            "kl_to_optimal",
            "calibration_error",
            "positive_count",
        ])?;
        for r in &self.rows {
            w.write_record([
                format!("{:?}", r.percentile),
                r.replicate.to_string(),
                r.env_index.to_string(),
                format!("{:?}", r.mean_reward),
                format!("{:?}", r.kl_to_optimal),
                format!("{:?}", r.calibration_error),
                r.positive_count.to_string(),
            ])?;
        }
        for a in &self.aggregates {
            w.write_record([
                format!("{:?}", a.percentile),
                "median".to_string(),
                "median".to_string(),
                format!("{:?}", a.mean_reward),
                format!("{:?}", a.kl_to_optimal),
                format!("{:?}", a.calibration_error),
                format!("{:?}", a.positive_count),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Trains once per percentile per replicate. Replicate `r` runs on
/// `envs[r % envs.len()]` with a seed derived from `(seed, r)`, so every
/// percentile within a replicate sees the same dataset.
pub fn threshold_sensitivity(
    envs: &[TabularEnv],
    train: &TrainConfig,
    score_model: &ScoreModel,
    n_samples: usize,
    percentiles: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<SensitivityGrid> {
    if percentiles.is_empty() {
        return Err(Error::invalid("need at least one percentile"));
    }
    if envs.is_empty() || replicates == 0 {
        return Err(Error::invalid(
            "need at least one environment and one replicate",
        ));
    }
    let per_replicate: Vec<Vec<SensitivityRow>> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<SensitivityRow>> {
            let env_index = r % envs.len();
            let env = &envs[env_index];
            let reference = env.reference_policy();
            percentiles
                .iter()
                .map(|&p| {
                    let mut cfg = *train;
                    cfg.seed = derive_seed(seed, r as u64);
                    cfg.tgo.percentile = p;
                    let (data, tau) = simulate(env, &reference, score_model, n_samples, &cfg)?;
                    let report = run_on_dataset(env, &reference, &data, tau, score_model, &cfg)?;
                    Ok(SensitivityRow {
                        percentile: p,
                        replicate: r,
                        env_index,
                        mean_reward: report.final_mean_reward(),
                        kl_to_optimal: report.final_kl_to_optimal(),
                        calibration_error: calibration_error(&data, env, cfg.tgo.beta, &tau)?,
                        positive_count: data
                            .records
                            .iter()
                            .filter(|s| pseudo_label(s.score, &tau))
                            .count(),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SensitivityRow> = per_replicate.into_iter().flatten().collect();
    let aggregates = percentiles
        .iter()
        .map(|&p| {
            let pick = |f: fn(&SensitivityRow) -> f64| {
                median(
                    &rows
                        .iter()
                        .filter(|r| r.percentile == p)
                        .map(f)
                        .collect::<Vec<_>>(),
                )
            };
            SensitivityAggregate {
                percentile: p,
                mean_reward: pick(|r| r.mean_reward),
                kl_to_optimal: pick(|r| r.kl_to_optimal),
                calibration_error: pick(|r| r.calibration_error),
                positive_count: pick(|r| r.positive_count as f64),
            }
        })
        .collect();
    Ok(SensitivityGrid {
        percentiles: percentiles.to_vec(),
        replicates,
        rows,
        aggregates,
    })
}

/// One statistic of the exact reward distribution before and after training.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionRow {
    pub statistic: String,
    pub before: f64,
    pub after: f64,
    pub shift: f64,
}

/// Mean, median and deciles of the reward under each policy, with shifts.
pub fn distribution_summary(
    env: &TabularEnv,
    policy_before: &TabularPolicy,
    policy_after: &TabularPolicy,
) -> Result<Vec<DistributionRow>> {
    let a = evaluate_policy(env, policy_before)?;
    let b = evaluate_policy(env, policy_after)?;
    let mut rows = vec![
        ("mean".to_string(), a.mean_reward, b.mean_reward),
        ("median".to_string(), a.median_reward, b.median_reward),
    ];
    for (i, q) in DECILES.iter().enumerate() {
        rows.push((
            format!("q{:02}", (q * 100.0).round() as u32),
            a.reward_quantiles[i],
            b.reward_quantiles[i],
        ));
    }
    Ok(rows
        .into_iter()
        .map(|(statistic, before, after)| DistributionRow {
            statistic,
            before,
            after,
            shift: after - before,
        })
        .collect())
}

/// Columns `statistic,before,after,shift`.
pub fn write_distribution_csv<W: Write>(rows: &[DistributionRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["statistic", "before", "after", "shift"])?;
    for r in rows {
        w.write_record([
            r.statistic.clone(),
            format!("{:?}", r.before),
            format!("{:?}", r.after),
            format!("{:?}", r.shift),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
