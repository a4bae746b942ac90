//! The threshold-guided objective against its DPO and SFT baselines on the
//! same scored datasets.

use tgo_lab::env::bimodal_suite;
use tgo_lab::feedback::{ScoreModel, ScoreTransform};
use tgo_lab::trainer::{run_on_dataset, simulate, Objective, TrainConfig};

fn main() -> tgo_lab::Result<()> {
    let envs = bimodal_suite(2024, 5);
    let model = ScoreModel::gaussian(ScoreTransform::Identity, 0.5);
    println!("env  initial     tgo     dpo     sft   (final exact mean reward)");
    for (i, env) in envs.iter().enumerate() {
        let reference = env.reference_policy();
        let base = TrainConfig {
            seed: i as u64,
            ..TrainConfig::default()
        };
        let (data, tau) = simulate(env, &reference, &model, 256, &base)?;
        let mut finals = Vec::new();
        let mut initial = 0.0;
        for objective in [Objective::Tgo, Objective::Dpo, Objective::Sft] {
            let cfg = TrainConfig { objective, ..base };
            let report = run_on_dataset(env, &reference, &data, tau, &model, &cfg)?;
            initial = report.initial_mean_reward();
            finals.push(report.final_mean_reward());
        }
        println!(
            "{i:>3}  {initial:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            finals[0], finals[1], finals[2]
        );
    }
    Ok(())
}
