//! Consistency and bias of the empirical minimizer of the regularized
//! population loss on the fixed reference environment.

use tgo_lab::analysis::{
    bias_experiment, consistency_experiment, reference_env, AnalysisConfig, PopulationProblem,
};
use tgo_lab::feedback::ScoreModel;

fn main() -> tgo_lab::Result<()> {
    let env = reference_env();
    let problem = PopulationProblem::new(
        &env,
        &env.reference_policy(),
        &ScoreModel::default(),
        &AnalysisConfig::default(),
    )?;
    let fit = problem.population_fit()?;
    println!(
        "population threshold {:.3}, minimizer found in {} Newton steps (gradient {:.1e})",
        problem.threshold(),
        fit.iterations,
        fit.grad_norm
    );

    let sizes = [100, 1_000, 10_000];
    let c = consistency_experiment(&problem, &fit.theta, &sizes, 20, 1)?;
    println!("\nconsistency (20 replicates): slope {:.3}", c.loglog_slope);
    for (i, n) in sizes.iter().enumerate() {
        println!(
            "  n = {n:>6}: mean error {:.5} +- {:.5}",
            c.mean_param_error[i], c.std_error[i]
        );
    }

    let b = bias_experiment(&problem, &fit.theta, &sizes, 200, 2)?;
    println!(
        "\nbias (200 replicates): slope {:.3}, plain replicate mean slope {:.3}",
        b.fitted_slope, b.raw_fitted_slope
    );
    for (i, n) in sizes.iter().enumerate() {
        println!(
            "  n = {n:>6}: |mean signed error| {:.2e} (noise floor {:.1e}, plain {:.2e})",
            b.error_norm[i], b.noise_floor[i], b.raw_error_norm[i]
        );
    }
    println!(
        "hessian: min eigenvalue {:.4}, condition number {:.1}, third-moment norm {:.4}",
        b.min_eigenvalue, b.condition_number, b.third_moment_tensor_norm
    );
    Ok(())
}
