//! Closed-form KL-regularized optimum on a small tabular environment: the
//! partition function, the per-prompt oracle baseline, and the decision rule
//! it induces.

use tgo_lab::env::{make_tabular, RewardSpec};
use tgo_lab::policy::{expected_kl, optimal_policy, oracle_report};
use tgo_lab::trainer::mean_reward;

fn main() -> tgo_lab::Result<()> {
    let env = make_tabular(11, 2, 5, RewardSpec::UniformRandom)?;
    let reference = env.reference_policy();
    for beta in [0.1, 1.0, 10.0] {
        let oracle = oracle_report(&reference, &env, beta)?;
        let star = optimal_policy(&reference, &env, beta)?;
        println!(
            "beta = {beta:>4}: mean reward {:.4} -> {:.4}, KL(pi* || ref) = {:.4}",
            mean_reward(&env, &reference)?,
            mean_reward(&env, &star)?,
            expected_kl(&star, &reference, env.prompt_weights())?
        );
        for x in 0..env.num_prompts() {
            let raised: Vec<String> = (0..env.num_outcomes())
                .map(|y| {
                    let up = star.log_prob(x, y).unwrap() > reference.log_prob(x, y).unwrap();
                    format!("{:.3}{}", env.reward(x, y), if up { "+" } else { "-" })
                })
                .collect();
            println!(
                "  prompt {x}: Z = {:.4}, baseline = {:.4}, rewards (+ raised) {}",
                oracle.partition[x],
                oracle.baseline[x],
                raised.join(" ")
            );
        }
    }
    Ok(())
}
