//! Sensitivity of training to the threshold percentile, reporting medians
//! across replicates of final mean reward, KL to the optimal policy and
//! label calibration.

use tgo_lab::analysis::threshold_sensitivity;
use tgo_lab::env::bimodal_suite;
use tgo_lab::feedback::{ScoreModel, ScoreTransform};
use tgo_lab::trainer::TrainConfig;

fn main() -> tgo_lab::Result<()> {
    let envs = bimodal_suite(2024, 10);
    let model = ScoreModel::gaussian(ScoreTransform::Identity, 0.5);
    let ps = [0.1, 0.3, 0.5, 0.7, 0.9];
    let grid = threshold_sensitivity(&envs, &TrainConfig::default(), &model, 256, &ps, 10, 7)?;
    println!("   p  mean_reward  kl_to_optimal  calibration  top-2 rate");
    for a in &grid.aggregates {
        println!(
            "{:.1}  {:>11.4}  {:>13.4}  {:>11.4}  {:>10.1}",
            a.percentile,
            a.mean_reward,
            a.kl_to_optimal,
            a.calibration_error,
            grid.top_two_rate(a.percentile)
        );
    }
    Ok(())
}
