//! From scalar scores to weighted pseudo-labels: sample the reference, score
//! with noise, estimate the percentile threshold and compare the labels with
//! the oracle rule.

use tgo_lab::env::{make_tabular, sample_dataset, RewardSpec};
use tgo_lab::feedback::{
    calibration_error, confidence_weight, estimate_threshold, pseudo_label, score_dataset,
    QuantileMethod, ScoreModel, ScoreTransform,
};
use tgo_lab::rng::Stream;

fn main() -> tgo_lab::Result<()> {
    let env = make_tabular(5, 3, 6, RewardSpec::Bimodal)?;
    let reference = env.reference_policy();
    let mut stream = Stream::new(5);
    let samples = sample_dataset(&env, &reference, 400, &mut stream)?;
    let model = ScoreModel::gaussian(ScoreTransform::Identity, 0.2);
    let dataset = score_dataset(&samples, &model, &mut stream, "reference");
    let scores = dataset.scores();

    for method in [
        QuantileMethod::NearestRank,
        QuantileMethod::LinearInterpolation,
    ] {
        for p in [0.3, 0.5, 0.7] {
            let t = estimate_threshold(&scores, p, method)?;
            let positives = scores.iter().filter(|s| pseudo_label(**s, &t)).count();
            println!(
                "{method:<20} p = {p}: tau = {:+.4} (se {:.4}), {positives}/{} positive, calibration error {:.3}",
                t.value,
                t.quantile_std_error,
                scores.len(),
                calibration_error(&dataset, &env, 1.0, &t)?
            );
        }
    }

    let t = estimate_threshold(&scores, 0.5, QuantileMethod::default())?;
    println!("\nfirst records (c = 5):");
    for r in dataset.records.iter().take(6) {
        println!(
            "  prompt {} outcome {} score {:+.3} label {} weight {:.3}",
            r.prompt_id,
            r.outcome,
            r.score,
            u8::from(pseudo_label(r.score, &t)),
            confidence_weight(r.score, &t, 5.0)
        );
    }
    Ok(())
}
