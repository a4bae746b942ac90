//! Offline threshold-guided training on a bimodal environment, with and
//! without refreshing the reference after every epoch.

use tgo_lab::analysis::distribution_summary;
use tgo_lab::env::bimodal_suite;
use tgo_lab::feedback::{ScoreModel, ScoreTransform};
use tgo_lab::trainer::{run_offline, TrainConfig};

fn main() -> tgo_lab::Result<()> {
    let env = bimodal_suite(2024, 1).remove(0);
    let reference = env.reference_policy();
    let model = ScoreModel::gaussian(ScoreTransform::Identity, 0.5);

    for refresh in [false, true] {
        let config = TrainConfig {
            seed: 3,
            refresh_reference: refresh,
            ..TrainConfig::default()
        };
        let report = run_offline(&env, &reference, &model, 256, &config)?;
        println!("refresh_reference = {refresh}");
        println!("epoch  mean_reward  kl_to_ref  kl_to_optimal  threshold");
        for e in (0..=config.epochs).step_by(5) {
            println!(
                "{e:>5}  {:>11.4}  {:>9.4}  {:>13.4}  {:>9.4}",
                report.mean_reward_curve[e],
                report.kl_to_ref_curve[e],
                report.kl_to_optimal_curve[e],
                report.threshold_history[e].value
            );
        }
        let last = report.loss_curve.last().copied().unwrap_or(f64::NAN);
        println!(
            "{} steps, final batch loss {last:.4}\n",
            report.loss_curve.len()
        );
        if !refresh {
            println!("reward distribution before/after:");
            for row in distribution_summary(&env, &reference, &report.final_policy)? {
                println!(
                    "  {:<7} {:+.4} -> {:+.4}",
                    row.statistic, row.before, row.after
                );
            }
            println!();
        }
    }
    Ok(())
}
