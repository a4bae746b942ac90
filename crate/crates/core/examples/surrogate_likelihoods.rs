//! The loss on models without tractable likelihoods: a continuous predictor
//! scored by the negative-MSE surrogate, and a masked-token model scored on
//! its masked positions only. Both are trained by plain gradient descent on
//! one fixed scored batch.

use tgo_lab::env::{GaussianSurrogateEnv, MaskedTokenEnv};
use tgo_lab::feedback::{estimate_threshold, QuantileMethod, ScoredRecord};
use tgo_lab::matrix::Matrix;
use tgo_lab::numeric::mean;
use tgo_lab::objective::{tgo_loss_gaussian, tgo_loss_masked, TgoConfig};

fn all_candidates(
    prompts: usize,
    candidates: usize,
    reward: impl Fn(usize, usize) -> f64,
) -> Vec<ScoredRecord> {
    (0..prompts)
        .flat_map(|x| (0..candidates).map(move |y| (x, y)))
        .map(|(x, y)| ScoredRecord {
            prompt_id: x,
            outcome: y,
            score: reward(x, y),
        })
        .collect()
}

fn main() -> tgo_lab::Result<()> {
    let config = TgoConfig::default();

    let env = GaussianSurrogateEnv::generate(1, 3, 8, 4, 0.5, 0.8)?;
    let reference = Matrix::from_fn(3, 4, |x, j| {
        env.targets[x][j] + 0.6 * (-1f64).powi(j as i32)
    });
    let batch = all_candidates(3, 8, |x, y| env.reward_of(x, env.candidate(x, y)));
    let tau = estimate_threshold(
        &batch.iter().map(|r| r.score).collect::<Vec<_>>(),
        0.5,
        QuantileMethod::default(),
    )?;
    let mut predictions = reference.clone();
    println!("gaussian surrogate: mean implicit score of positives / negatives");
    for step in 0..=200 {
        let loss = tgo_loss_gaussian(&env, &predictions, &reference, &batch, &tau, &config)?;
        if step % 50 == 0 {
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (r, z) in batch.iter().zip(&loss.implicit_scores) {
                if r.score >= tau.value {
                    pos.push(*z)
                } else {
                    neg.push(*z)
                }
            }
            println!(
                "  step {step:>3}: loss {:.4}, positives {:+.4}, negatives {:+.4}",
                loss.total,
                mean(&pos),
                mean(&neg)
            );
        }
        predictions.axpy(-0.02, &loss.gradient);
    }

    let env = MaskedTokenEnv::generate(2, 2, 6, 5, 6, vec![1, 2, 4], 0.6)?;
    let reference: Vec<Matrix> = (0..2).map(|_| Matrix::zeros(6, 5)).collect();
    let batch = all_candidates(2, 6, |x, y| env.reward_of(x, env.candidate(x, y)));
    let tau = estimate_threshold(
        &batch.iter().map(|r| r.score).collect::<Vec<_>>(),
        0.5,
        QuantileMethod::default(),
    )?;
    let mut logits = reference.clone();
    let truth_log_prob = |l: &[Matrix]| -> tgo_lab::Result<f64> {
        Ok((0..2)
            .map(|x| env.sequence_log_prob(&l[x], &env.true_tokens[x]))
            .collect::<tgo_lab::Result<Vec<_>>>()?
            .iter()
            .sum::<f64>()
            / 2.0)
    };
    println!(
        "masked tokens: log-likelihood of the true masked tokens {:.4}",
        truth_log_prob(&logits)?
    );
    for step in 1..=200 {
        let loss = tgo_loss_masked(&env, &logits, &reference, &batch, &tau, &config)?;
        for (l, g) in logits.iter_mut().zip(&loss.gradient) {
            l.axpy(-0.5, g);
        }
        if step % 50 == 0 {
            println!(
                "  step {step:>3}: loss {:.4}, true-token log-likelihood {:.4}",
                loss.total,
                truth_log_prob(&logits)?
            );
        }
    }
    Ok(())
}
