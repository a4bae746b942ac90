//! Pseudo-label calibration against the oracle rule as score noise shrinks,
//! with the threshold fixed at the oracle baseline and estimated from data.

use tgo_lab::analysis::{calibration_sweep, shared_row_env, CalibrationThreshold};
use tgo_lab::feedback::ScoreTransform;
use tgo_lab::policy::oracle_baseline;

fn main() -> tgo_lab::Result<()> {
    let env = shared_row_env(4, 3, 6)?;
    let tau_star = oracle_baseline(&env.reference_policy(), &env, 1.0, 0)?;
    let scales = [1.0, 0.3, 0.1, 0.03, 0.0];
    for (name, threshold) in [
        ("oracle threshold", CalibrationThreshold::Fixed(tau_star)),
        ("median of scores", CalibrationThreshold::Percentile(0.5)),
    ] {
        println!("{name}:");
        let rows = calibration_sweep(
            &env,
            1.0,
            ScoreTransform::Identity,
            &scales,
            500,
            20,
            threshold,
            9,
        )?;
        for r in rows {
            println!(
                "  noise {:<5} label disagreement {:.4} +- {:.4}",
                r.noise_scale, r.mean_error, r.std_error
            );
        }
    }
    Ok(())
}
