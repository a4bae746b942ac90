//! Acceptance suite: one PASS/FAIL line per criterion. Closed-form quantities
//! are recomputed here from first principles rather than taken from the
//! library.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use tgo_lab::analysis::{
    bias_experiment, calibration_sweep, consistency_experiment, reference_env, shared_row_env,
    threshold_sensitivity, AnalysisConfig, CalibrationThreshold, PopulationProblem,
};
use tgo_lab::env::{bimodal_suite, make_tabular, RewardSpec, TabularEnv};
use tgo_lab::feedback::{ScoreModel, ScoreTransform, ScoredRecord, Threshold};
use tgo_lab::matrix::Matrix;
use tgo_lab::objective::{dpo_loss, sft_loss, tgo_loss, NumericMode, PreferencePair, TgoConfig};
use tgo_lab::policy::{optimal_policy, TabularPolicy};
use tgo_lab::rng::Stream;
use tgo_lab::trainer::{run_offline, run_on_dataset, simulate, Objective, TrainConfig};

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

fn random_env(stream: &mut Stream) -> TabularEnv {
    let k = stream.random_range(1..=5);
    let m = stream.random_range(2..=8);
    make_tabular(stream.random(), k, m, RewardSpec::UniformRandom).unwrap()
}

/// `log π_ref(y|x)` straight from the reference logits.
fn ref_log_probs(env: &TabularEnv, x: usize) -> Vec<f64> {
    let row = env.ref_logits().row(x);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `ln Σ_y π_ref(y|x) exp(R(x,y)/β)`, summed directly.
fn log_partition(env: &TabularEnv, x: usize, beta: f64) -> f64 {
    let lp = ref_log_probs(env, x);
    let terms: Vec<f64> = (0..env.num_outcomes())
        .map(|y| lp[y] + env.reward(x, y) / beta)
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn monotonicity() -> Outcome {
    let start = Instant::now();
    let mut stream = Stream::new(101);
    let mut min_step = f64::INFINITY;
    let mut max_oracle_gap = 0f64;
    for _ in 0..100 {
        let env = random_env(&mut stream);
        let beta = stream.random_range(0.25..2.0);
        let x = stream.random_range(0..env.num_prompts());
        let y = stream.random_range(0..env.num_outcomes());
        let reference = env.reference_policy();
        let mut prev = f64::NEG_INFINITY;
        for j in 0..20 {
            let mut rewards = env.rewards().clone();
            rewards.row_mut(x)[y] = -2.0 + 4.0 * j as f64 / 19.0;
            let swept = TabularEnv::new(
                rewards,
                env.ref_logits().clone(),
                env.prompt_weights().to_vec(),
            )
            .unwrap();
            let star = optimal_policy(&reference, &swept, beta).unwrap();
            let ratio = (star.log_prob(x, y).unwrap() - reference.log_prob(x, y).unwrap()).exp();
            let oracle = (swept.reward(x, y) / beta - log_partition(&swept, x, beta)).exp();
            max_oracle_gap = max_oracle_gap.max((ratio - oracle).abs() / oracle);
            if j > 0 {
                min_step = min_step.min(ratio - prev);
            }
            prev = ratio;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        min_step >= 1e-12 && max_oracle_gap < 1e-10 && within(elapsed, 5),
        format!(
            "min ratio step {min_step:.3e}, oracle gap {max_oracle_gap:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_decision_rule() -> Outcome {
    let start = Instant::now();
    let mut stream = Stream::new(202);
    let (mut cells, mut violations) = (0, 0);
    for _ in 0..100 {
        let env = random_env(&mut stream);
        let beta = stream.random_range(0.25..2.0);
        let reference = env.reference_policy();
        let star = optimal_policy(&reference, &env, beta).unwrap();
        for x in 0..env.num_prompts() {
            let tau = beta * log_partition(&env, x, beta);
            for y in 0..env.num_outcomes() {
                let gap = env.reward(x, y) - tau;
                if gap.abs() < 1e-12 {
                    continue;
                }
                cells += 1;
                let lr = star.log_prob(x, y).unwrap() - reference.log_prob(x, y).unwrap();
                if lr.signum() != gap.signum() {
                    violations += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        violations == 0 && within(elapsed, 5),
        format!(
            "{violations} violations over {cells} cells, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn reparameterization() -> Outcome {
    let mut stream = Stream::new(202);
    let mut worst = 0f64;
    for _ in 0..100 {
        let env = random_env(&mut stream);
        let beta = stream.random_range(0.25..2.0);
        let reference = env.reference_policy();
        let star = optimal_policy(&reference, &env, beta).unwrap();
        for x in 0..env.num_prompts() {
            let log_z = log_partition(&env, x, beta);
            for y in 0..env.num_outcomes() {
                let lr = star.log_prob(x, y).unwrap() - reference.log_prob(x, y).unwrap();
                worst = worst.max((beta * lr + beta * log_z - env.reward(x, y)).abs());
            }
        }
    }
    verdict(
        worst <= 1e-10,
        format!("max |R - (b log ratio + b ln Z)| = {worst:.2e}"),
    )
}

fn dpo_cancellation() -> Outcome {
    let mut stream = Stream::new(303);
    let mut worst = 0f64;
    let mut pairs = 0;
    while pairs < 10_000 {
        let env = random_env(&mut stream);
        let beta = stream.random_range(0.25..2.0);
        let reference = env.reference_policy();
        let star = optimal_policy(&reference, &env, beta).unwrap();
        for _ in 0..100 {
            let x = stream.random_range(0..env.num_prompts());
            let w = stream.random_range(0..env.num_outcomes());
            let l = stream.random_range(0..env.num_outcomes());
            let implied =
                |y| beta * (star.log_prob(x, y).unwrap() - reference.log_prob(x, y).unwrap());
            let gap = implied(w) - implied(l);
            worst = worst.max((gap - (env.reward(x, w) - env.reward(x, l))).abs());
            pairs += 1;
        }
    }
    verdict(
        worst <= 1e-10,
        format!("{pairs} pairs, max residual {worst:.2e}"),
    )
}

/// `‖a − fd‖ / max(‖a‖, ‖fd‖)` with central differences at step `h`.
fn fd_relative_error(
    logits: &Matrix,
    analytic: &Matrix,
    h: f64,
    f: impl Fn(&TabularPolicy) -> f64,
) -> f64 {
    let (mut diff, mut norm_a, mut norm_fd) = (0f64, 0f64, 0f64);
    for i in 0..logits.as_slice().len() {
        let a = analytic.as_slice()[i];
        let mut up = logits.clone();
        up.as_mut_slice()[i] += h;
        let mut down = logits.clone();
        down.as_mut_slice()[i] -= h;
        let fd = (f(&TabularPolicy::new(up).unwrap()) - f(&TabularPolicy::new(down).unwrap()))
            / (2.0 * h);
        diff += (a - fd).powi(2);
        norm_a += a * a;
        norm_fd += fd * fd;
    }
    diff.sqrt() / norm_a.sqrt().max(norm_fd.sqrt()).max(1e-300)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut stream = Stream::new(404);
    let h = 1e-6;
    let (mut tgo, mut dpo, mut sft) = (0f64, 0f64, 0f64);
    for i in 0..50 {
        let k = stream.random_range(1..=4);
        let m = stream.random_range(2..=6);
        let logits = Matrix::from_fn(k, m, |_, _| stream.sample(StandardNormal));
        let ref_logits = Matrix::from_fn(k, m, |_, _| stream.sample(StandardNormal));
        let policy = TabularPolicy::new(logits.clone()).unwrap();
        let reference = TabularPolicy::new(ref_logits).unwrap();
        let b = stream.random_range(1..=16);
        let records: Vec<ScoredRecord> = (0..b)
            .map(|_| ScoredRecord {
                prompt_id: stream.random_range(0..k),
                outcome: stream.random_range(0..m),
                score: stream.sample(StandardNormal),
            })
            .collect();
        let tau = Threshold::fixed(stream.random_range(-0.5..0.5));
        let cfg = TgoConfig {
            beta: stream.random_range(0.25..2.0),
            c: stream.random_range(0.0..5.0),
            numeric_mode: if i % 2 == 0 {
                NumericMode::ExactLogSigmoid
            } else {
                NumericMode::ClippedSigmoid { eps: 1e-6 }
            },
            ..TgoConfig::default()
        };
        let g = tgo_loss(&policy, &reference, &records, &tau, &cfg)
            .unwrap()
            .gradient;
        tgo = tgo.max(fd_relative_error(&logits, &g, h, |p| {
            tgo_loss(p, &reference, &records, &tau, &cfg).unwrap().total
        }));

        let pairs: Vec<PreferencePair> = records
            .iter()
            .map(|r| PreferencePair {
                prompt: r.prompt_id,
                winner: r.outcome,
                loser: (r.outcome + 1) % m,
            })
            .collect();
        let g = dpo_loss(&policy, &reference, &pairs, cfg.beta)
            .unwrap()
            .gradient;
        dpo = dpo.max(fd_relative_error(&logits, &g, h, |p| {
            dpo_loss(p, &reference, &pairs, cfg.beta).unwrap().total
        }));

        let positives: Vec<(usize, usize)> =
            records.iter().map(|r| (r.prompt_id, r.outcome)).collect();
        let g = sft_loss(&policy, &positives).unwrap().gradient;
        sft = sft.max(fd_relative_error(&logits, &g, h, |p| {
            sft_loss(p, &positives).unwrap().total
        }));
    }
    let elapsed = start.elapsed();
    verdict(
        tgo.max(dpo).max(sft) <= 1e-5 && within(elapsed, 30),
        format!(
            "max relative error tgo {tgo:.1e} dpo {dpo:.1e} sft {sft:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn anchor_value() -> Outcome {
    let env = make_tabular(5, 3, 4, RewardSpec::UniformRandom).unwrap();
    let reference = env.reference_policy();
    let tau = 0.37;
    let record = ScoredRecord {
        prompt_id: 2,
        outcome: 1,
        score: tau,
    };
    let loss = tgo_loss(
        &reference,
        &reference,
        &[record],
        &Threshold::fixed(tau),
        &TgoConfig::default(),
    )
    .unwrap();
    let gap = (loss.per_sample[0] - std::f64::consts::LN_2).abs();
    verdict(gap <= 1e-12, format!("|loss - ln 2| = {gap:.1e}"))
}

fn suite_model() -> ScoreModel {
    ScoreModel::gaussian(ScoreTransform::Identity, 0.5)
}

fn training_efficacy() -> Outcome {
    let start = Instant::now();
    let envs = bimodal_suite(2024, 10);
    let (mut improved, mut halved, mut runs) = (0, 0, 0);
    for env in &envs {
        for seed in 0..5 {
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let r = run_offline(env, &env.reference_policy(), &suite_model(), 256, &cfg).unwrap();
            runs += 1;
            improved += usize::from(r.final_mean_reward() > r.initial_mean_reward());
            halved += usize::from(r.final_kl_to_optimal() <= 0.5 * r.kl_to_optimal_curve[0]);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        improved * 10 >= runs * 9 && halved * 10 >= runs * 8 && within(elapsed, 120),
        format!(
            "reward up {improved}/{runs}, KL halved {halved}/{runs}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn tgo_beats_sft() -> Outcome {
    let envs = bimodal_suite(2024, 10);
    let mut wins = 0;
    for r in 0..25u64 {
        let env = &envs[r as usize % envs.len()];
        let reference = env.reference_policy();
        let cfg = TrainConfig {
            seed: 1000 + r,
            ..TrainConfig::default()
        };
        let (data, tau) = simulate(env, &reference, &suite_model(), 256, &cfg).unwrap();
        let tgo = run_on_dataset(env, &reference, &data, tau, &suite_model(), &cfg).unwrap();
        let sft_cfg = TrainConfig {
            objective: Objective::Sft,
            ..cfg
        };
        let sft = run_on_dataset(env, &reference, &data, tau, &suite_model(), &sft_cfg).unwrap();
        wins += usize::from(tgo.final_mean_reward() >= sft.final_mean_reward());
    }
    verdict(wins * 10 >= 25 * 8, format!("TGO >= SFT in {wins}/25"))
}

fn population() -> (PopulationProblem, Matrix) {
    let env = reference_env();
    let problem = PopulationProblem::new(
        &env,
        &env.reference_policy(),
        &ScoreModel::default(),
        &AnalysisConfig::default(),
    )
    .unwrap();
    let theta = problem.population_fit().unwrap().theta;
    (problem, theta)
}

fn consistency_rate() -> Outcome {
    let start = Instant::now();
    let (problem, theta) = population();
    let r = consistency_experiment(&problem, &theta, &[100, 1_000, 10_000], 20, 505).unwrap();
    let elapsed = start.elapsed();
    let decreasing = r.mean_param_error.windows(2).all(|w| w[1] < w[0]);
    verdict(
        r.failures.is_empty()
            && decreasing
            && (-0.65..=-0.35).contains(&r.loglog_slope)
            && within(elapsed, 600),
        format!(
            "errors {:.4?}, slope {:.3}, {:.2}s",
            r.mean_param_error,
            r.loglog_slope,
            elapsed.as_secs_f64()
        ),
    )
}

fn bias_rate() -> Outcome {
    let start = Instant::now();
    let (problem, theta) = population();
    let r = bias_experiment(&problem, &theta, &[100, 1_000, 10_000], 200, 606).unwrap();
    let elapsed = start.elapsed();
    verdict(
        r.failures.is_empty() && (-1.4..=-0.6).contains(&r.fitted_slope) && within(elapsed, 1800),
        format!(
            "norms {}, slope {:.3}, {:.2}s",
            r.error_norm
                .iter()
                .map(|v| format!("{v:.2e}"))
                .collect::<Vec<_>>()
                .join(" "),
            r.fitted_slope,
            elapsed.as_secs_f64()
        ),
    )
}

fn calibration_decay() -> Outcome {
    let scales = [1.0, 0.3, 0.1, 0.03, 0.0];
    let mut details = Vec::new();
    let mut ok = true;
    for seed in 0..5u64 {
        let env = shared_row_env(700 + seed, 3, 6).unwrap();
        let tau_star = log_partition(&env, 0, 1.0);
        for x in 1..env.num_prompts() {
            ok &= (log_partition(&env, x, 1.0) - tau_star).abs() < 1e-12;
        }
        let rows = calibration_sweep(
            &env,
            1.0,
            ScoreTransform::Identity,
            &scales,
            500,
            20,
            CalibrationThreshold::Fixed(tau_star),
            seed,
        )
        .unwrap();
        for w in rows.windows(2) {
            ok &= w[1].mean_error <= w[0].mean_error + w[0].std_error.max(w[1].std_error);
        }
        ok &= rows[4].mean_error == 0.0;
        details.push(format!(
            "[{}]",
            rows.iter()
                .map(|r| format!("{:.3}", r.mean_error))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    verdict(ok, format!("error by noise {}", details.join(" ")))
}

fn percentile_sensitivity() -> Outcome {
    let grid = threshold_sensitivity(
        &bimodal_suite(2024, 10),
        &TrainConfig::default(),
        &suite_model(),
        256,
        &[0.1, 0.3, 0.5, 0.7, 0.9],
        10,
        7,
    )
    .unwrap();
    let rate = grid.top_two_rate(0.5);
    let medians: Vec<String> = grid
        .aggregates
        .iter()
        .map(|a| format!("{:.1}:{:.3}", a.percentile, a.mean_reward))
        .collect();
    verdict(
        rate >= 0.7,
        format!(
            "p = 0.5 top-2 in {:.0}% of replicates; median final reward {}",
            rate * 100.0,
            medians.join(" ")
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.txt");
    std::fs::write(
        &config,
        "seed = 13\nenv.k = 3\nenv.m = 5\ndata.n = 96\ntrain.epochs = 8\n",
    )
    .unwrap();
    let run = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_tgo-lab"))
            .args(["train", "--config"])
            .arg(&config)
            .args(["--seed", "21", "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap()
    };
    if !run("a").success() || !run("b").success() {
        return Err("train command failed".to_string());
    }
    let mut compared = 0;
    for entry in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        if !name.to_string_lossy().ends_with(".csv") {
            continue;
        }
        let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        if a != b {
            return Err(format!("{} differs between runs", name.to_string_lossy()));
        }
        compared += 1;
    }
    verdict(
        compared >= 3,
        format!("{compared} CSV files byte-identical"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 13] = [
        ("monotonicity", monotonicity),
        ("oracle decision rule", oracle_decision_rule),
        ("reparameterization identity", reparameterization),
        ("dpo cancellation", dpo_cancellation),
        ("gradient correctness", gradient_correctness),
        ("anchor value", anchor_value),
        ("training efficacy", training_efficacy),
        ("tgo >= sft", tgo_beats_sft),
        ("consistency rate", consistency_rate),
        ("bias rate", bias_rate),
        ("calibration decay", calibration_decay),
        ("percentile sensitivity", percentile_sensitivity),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(*name);
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail}", i + 1);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed.len(),
        criteria.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
