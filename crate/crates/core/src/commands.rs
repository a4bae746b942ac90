//! The four `tgo-lab` commands. Each writes its run manifest before any other
//! output, so a directory holding a manifest but no results marks a crashed
//! run.

use std::path::{Path, PathBuf};

use crate::analysis::{
    distribution_summary, reference_env, threshold_sensitivity, write_distribution_csv,
};
use crate::config::{EnvSource, ExperimentConfig};
use crate::env::{bimodal_suite, TabularEnv};
use crate::error::{Error, Result};
use crate::feedback::{estimate_threshold, ScoredDataset, Threshold};
use crate::report::{bar_chart_svg, csv_bytes, line_chart_svg, write_atomic, RunManifest};
use crate::textfmt::FlatFile;
use crate::trainer::{run_on_dataset, simulate};
use crate::verify::{run_verify, VerifyLevel, VerifyReport};

pub const ENV_FILE: &str = "env.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const DATASET_FILE: &str = "dataset.csv";
pub const THRESHOLD_FILE: &str = "threshold.txt";
pub const STEPS_FILE: &str = "steps.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const POLICY_FILE: &str = "policy.txt";
pub const DISTRIBUTION_FILE: &str = "distribution.csv";
pub const VERIFY_FILE: &str = "verify.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Options shared by every command.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOptions {
    pub config_path: Option<PathBuf>,
    /// Overrides the config seed.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub level: VerifyLevel,
}

impl CommandOptions {
    pub fn new(config_path: Option<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        CommandOptions {
            config_path,
            seed: None,
            out_dir: out_dir.into(),
            level: VerifyLevel::Fast,
        }
    }

    fn config(&self, command: &str) -> Result<ExperimentConfig> {
        let path = self
            .config_path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("`{command}` needs --config PATH")))?;
        let config = ExperimentConfig::load(path)?;
        Ok(match self.seed {
            Some(seed) => config.with_seed(seed),
            None => config,
        })
    }

    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn manifest(&self, command: &str, seed: u64, env_text: &[u8]) -> Result<()> {
        self.prepare()?;
        RunManifest::new(
            command,
            self.config_path.as_deref(),
            seed,
            &self.out_dir,
            env_text,
        )
        .write()
    }
}

/// Process exit code for an error: 3 for numeric failures, 2 otherwise.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::NonFiniteLoss { .. } | Error::NoConvergence { .. } => 3,
        _ => 2,
    }
}

/// The environment and the exact text its fingerprint is taken over.
fn environment(config: &ExperimentConfig) -> Result<(TabularEnv, Vec<u8>)> {
    match &config.env {
        EnvSource::File(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| Error::parse(None, format!("{} is not UTF-8", path.display())))?;
            Ok((TabularEnv::from_flat(&FlatFile::parse(&text)?)?, bytes))
        }
        EnvSource::Generate { .. } => {
            let env = config.build_env()?;
            let text = env.to_flat().to_text().into_bytes();
            Ok((env, text))
        }
    }
}

pub fn threshold_to_flat(t: &Threshold) -> FlatFile {
    let mut f = FlatFile::new();
    f.set("value", format!("{:?}", t.value));
    f.set("percentile", format!("{:?}", t.percentile));
    f.set("method", t.method);
    f.set("sample_count", t.sample_count);
    f.set("quantile_std_error", format!("{:?}", t.quantile_std_error));
    f
}

pub fn threshold_from_flat(f: &FlatFile) -> Result<Threshold> {
    let need = |k: &str| Error::parse(None, format!("missing key `{k}`"));
    Ok(Threshold {
        value: f.parse_value("value")?.ok_or_else(|| need("value"))?,
        percentile: f
            .parse_value("percentile")?
            .ok_or_else(|| need("percentile"))?,
        method: f.parse_value("method")?.ok_or_else(|| need("method"))?,
        sample_count: f
            .parse_value("sample_count")?
            .ok_or_else(|| need("sample_count"))?,
        quantile_std_error: f
            .parse_value("quantile_std_error")?
            .ok_or_else(|| need("quantile_std_error"))?,
    })
}

/// Writes the environment, the scored dataset from the reference policy and
/// its percentile threshold.
pub fn cmd_simulate(opts: &CommandOptions) -> Result<()> {
    let config = opts.config("simulate")?;
    let (env, env_text) = environment(&config)?;
    opts.manifest("simulate", config.seed, &env_text)?;
    write_atomic(
        &opts.path(CONFIG_FILE),
        config.to_flat().to_text().as_bytes(),
    )?;
    write_atomic(&opts.path(ENV_FILE), &env_text)?;
    let (dataset, threshold) = simulate(
        &env,
        &env.reference_policy(),
        &config.score,
        config.data_n,
        &config.train,
    )?;
    write_atomic(
        &opts.path(DATASET_FILE),
        &csv_bytes(|w| dataset.write_csv(w))?,
    )?;
    write_atomic(
        &opts.path(THRESHOLD_FILE),
        threshold_to_flat(&threshold).to_text().as_bytes(),
    )
}

/// Trains from the reference policy and writes the curves, the final policy,
/// the reward distribution shift and one chart per curve.
pub fn cmd_train(opts: &CommandOptions) -> Result<()> {
    let config = opts.config("train")?;
    let (env, env_text) = environment(&config)?;
    opts.manifest("train", config.seed, &env_text)?;
    write_atomic(
        &opts.path(CONFIG_FILE),
        config.to_flat().to_text().as_bytes(),
    )?;
    write_atomic(&opts.path(ENV_FILE), &env_text)?;
    let reference = env.reference_policy();
    let (dataset, threshold) = match &config.data_path {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let dataset = ScoredDataset::read_csv(file, path.display().to_string())?;
            let threshold = estimate_threshold(
                &dataset.scores(),
                config.train.tgo.percentile,
                config.train.quantile_method,
            )?;
            (dataset, threshold)
        }
        None => simulate(
            &env,
            &reference,
            &config.score,
            config.data_n,
            &config.train,
        )?,
    };
    write_atomic(
        &opts.path(THRESHOLD_FILE),
        threshold_to_flat(&threshold).to_text().as_bytes(),
    )?;
    let report = run_on_dataset(
        &env,
        &reference,
        &dataset,
        threshold,
        &config.score,
        &config.train,
    )?;

    let steps = csv_bytes(|w| report.write_steps_csv(w))?;
    let epochs = csv_bytes(|w| report.write_epochs_csv(w))?;
    write_atomic(&opts.path(STEPS_FILE), &steps)?;
    write_atomic(&opts.path(EPOCHS_FILE), &epochs)?;
    write_atomic(
        &opts.path(POLICY_FILE),
        report.final_policy.to_flat().to_text().as_bytes(),
    )?;
    let rows = distribution_summary(&env, &reference, &report.final_policy)?;
    write_atomic(
        &opts.path(DISTRIBUTION_FILE),
        &csv_bytes(|w| write_distribution_csv(&rows, w))?,
    )?;

    write_atomic(
        &opts.path("loss.svg"),
        line_chart_svg(&steps, "step", "loss", "training loss")?.as_bytes(),
    )?;
    for (column, title) in [
        ("mean_reward", "exact mean reward"),
        ("kl_to_ref", "KL to reference"),
        ("kl_to_optimal", "KL to optimal policy"),
        ("threshold", "threshold"),
    ] {
        let svg = line_chart_svg(&epochs, "epoch", column, title)?;
        write_atomic(&opts.path(&format!("{column}.svg")), svg.as_bytes())?;
    }
    Ok(())
}

/// Runs the property suite and writes one CSV row per check.
pub fn cmd_verify(opts: &CommandOptions) -> Result<VerifyReport> {
    let seed = match (&opts.config_path, opts.seed) {
        (_, Some(seed)) => seed,
        (Some(_), None) => opts.config("verify")?.seed,
        (None, None) => 0,
    };
    let env_text = reference_env().to_flat().to_text();
    opts.manifest("verify", seed, env_text.as_bytes())?;
    let report = run_verify(opts.level, seed);
    write_atomic(
        &opts.path(VERIFY_FILE),
        &csv_bytes(|w| report.write_csv(w))?,
    )?;
    Ok(report)
}

/// Percentile sweep over a bimodal suite built from the run seed.
pub fn cmd_sweep(opts: &CommandOptions) -> Result<()> {
    let config = opts.config("sweep")?;
    let sweep = &config.sweep;
    if sweep.percentiles.len() < 2 {
        return Err(Error::invalid(
            "sweep needs at least two percentiles (sweep.percentiles = p1,p2,...)",
        ));
    }
    let envs = bimodal_suite(config.seed, sweep.suite_size);
    let suite_text: String = envs
        .iter()
        .map(|e| e.to_flat().to_text())
        .collect::<Vec<_>>()
        .join("\n");
    opts.manifest("sweep", config.seed, suite_text.as_bytes())?;
    write_atomic(
        &opts.path(CONFIG_FILE),
        config.to_flat().to_text().as_bytes(),
    )?;
    let grid = threshold_sensitivity(
        &envs,
        &config.train,
        &config.score,
        config.data_n,
        &sweep.percentiles,
        sweep.replicates,
        config.seed,
    )?;
    let csv = csv_bytes(|w| grid.write_csv(w))?;
    write_atomic(&opts.path(SWEEP_FILE), &csv)?;
    for metric in [
        "mean_reward",
        "kl_to_optimal",
        "calibration_error",
        "positive_count",
    ] {
        let svg = bar_chart_svg(
            &csv,
            "percentile",
            metric,
            &format!("median {metric}"),
            |t, i| {
                t.column_index("replicate")
                    .is_ok_and(|c| t.rows[i][c] == "median")
            },
        )?;
        write_atomic(&opts.path(&format!("sweep_{metric}.svg")), svg.as_bytes())?;
    }
    Ok(())
}

/// Reads back a threshold record written by [`cmd_simulate`] or [`cmd_train`].
pub fn load_threshold(path: &Path) -> Result<Threshold> {
    threshold_from_flat(&FlatFile::load(path)?)
}
