//! Experiment configuration read from a flat `key = value` file.
//!
//! Unknown keys are rejected so typos fail loudly. Relative paths resolve
//! against the directory holding the config file.

use std::path::{Path, PathBuf};

use crate::env::{make_tabular, RewardSpec, TabularEnv};
use crate::error::{Error, Result};
use crate::feedback::{ScoreModel, ScoreNoise, ScoreTransform};
use crate::textfmt::FlatFile;
use crate::trainer::TrainConfig;

/// Every key the config reader accepts.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "env.k",
    "env.m",
    "env.reward_spec",
    "env.path",
    "score.transform",
    "score.noise",
    "data.n",
    "data.path",
    "train.batch_size",
    "train.epochs",
    "train.learning_rate",
    "train.optimizer",
    "train.objective",
    "train.refresh_reference",
    "train.reestimate_threshold",
    "tgo.beta",
    "tgo.c",
    "tgo.percentile",
    "tgo.numeric_mode",
    "threshold.method",
    "sweep.percentiles",
    "sweep.replicates",
    "sweep.suite_size",
];

/// Where the environment comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSource {
    /// Built by [`make_tabular`] from the run seed.
    Generate {
        k: usize,
        m: usize,
        reward_spec: RewardSpec,
    },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub percentiles: Vec<f64>,
    pub replicates: usize,
    /// Number of bimodal environments the replicates cycle through.
    pub suite_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            percentiles: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            replicates: 10,
            suite_size: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvSource,
    pub score: ScoreModel,
    /// Dataset size when the dataset is simulated.
    pub data_n: usize,
    /// Existing scored dataset CSV; simulated when absent.
    pub data_path: Option<PathBuf>,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            env: EnvSource::Generate {
                k: 4,
                m: 6,
                reward_spec: RewardSpec::Bimodal,
            },
            score: ScoreModel::gaussian(ScoreTransform::Identity, 0.5),
            data_n: 256,
            data_path: None,
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let flat = FlatFile::load(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::from_flat(&flat, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        Self::from_flat(&FlatFile::parse(text)?, base_dir)
    }

    pub fn from_flat(f: &FlatFile, base_dir: &Path) -> Result<Self> {
        if let Some(unknown) = f.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::parse(
                None,
                format!("unknown config key `{unknown}`"),
            ));
        }
        let d = ExperimentConfig::default();
        let seed = f.u64_or("seed", d.seed)?;
        let resolve = |p: &str| base_dir.join(p);

        let env = match f.get("env.path") {
            Some(p) => {
                if f.get("env.k").is_some()
                    || f.get("env.m").is_some()
                    || f.get("env.reward_spec").is_some()
                {
                    return Err(Error::parse(
                        None,
                        "`env.path` excludes env.k, env.m and env.reward_spec",
                    ));
                }
                EnvSource::File(resolve(p))
            }
            None => {
                let EnvSource::Generate { k, m, reward_spec } = d.env else {
                    unreachable!("default env is generated")
                };
                EnvSource::Generate {
                    k: f.usize_or("env.k", k)?,
                    m: f.usize_or("env.m", m)?,
                    reward_spec: f.parse_value("env.reward_spec")?.unwrap_or(reward_spec),
                }
            }
        };

        let score = ScoreModel {
            transform: f
                .parse_value::<ScoreTransform>("score.transform")?
                .unwrap_or(d.score.transform),
            noise: f
                .parse_value::<ScoreNoise>("score.noise")?
                .unwrap_or(d.score.noise),
        };

        let dt = d.train;
        let mut tgo = dt.tgo;
        tgo.beta = f.f64_or("tgo.beta", tgo.beta)?;
        tgo.c = f.f64_or("tgo.c", tgo.c)?;
        tgo.percentile = f.f64_or("tgo.percentile", tgo.percentile)?;
        tgo.numeric_mode = f
            .parse_value("tgo.numeric_mode")?
            .unwrap_or(tgo.numeric_mode);
        let train = TrainConfig {
            batch_size: f.usize_or("train.batch_size", dt.batch_size)?,
            epochs: f.usize_or("train.epochs", dt.epochs)?,
            learning_rate: f.f64_or("train.learning_rate", dt.learning_rate)?,
            optimizer: f.parse_value("train.optimizer")?.unwrap_or(dt.optimizer),
            refresh_reference: f.bool_or("train.refresh_reference", dt.refresh_reference)?,
            reestimate_threshold_on_refresh: f.bool_or(
                "train.reestimate_threshold",
                dt.reestimate_threshold_on_refresh,
            )?,
            quantile_method: f
                .parse_value("threshold.method")?
                .unwrap_or(dt.quantile_method),
            seed,
            objective: f.parse_value("train.objective")?.unwrap_or(dt.objective),
            tgo,
        };
        train.validate()?;

        let sweep = SweepConfig {
            percentiles: f
                .vec_opt("sweep.percentiles")?
                .unwrap_or(d.sweep.percentiles),
            replicates: f.usize_or("sweep.replicates", d.sweep.replicates)?,
            suite_size: f.usize_or("sweep.suite_size", d.sweep.suite_size)?,
        };

        let config = ExperimentConfig {
            seed,
            env,
            score,
            data_n: f.usize_or("data.n", d.data_n)?,
            data_path: f.get("data.path").map(resolve),
            train,
            sweep,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if let EnvSource::Generate { k, m, .. } = self.env {
            if k == 0 || m < 2 {
                return Err(Error::invalid(format!(
                    "environment needs k >= 1 and m >= 2, got {k}x{m}"
                )));
            }
        }
        if self.data_path.is_none() && self.data_n == 0 {
            return Err(Error::invalid("data.n must be at least 1"));
        }
        if self.sweep.replicates == 0 || self.sweep.suite_size == 0 {
            return Err(Error::invalid(
                "sweep.replicates and sweep.suite_size must be at least 1",
            ));
        }
        self.train.validate()
    }

    /// Replaces the run seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Builds or loads the environment.
    pub fn build_env(&self) -> Result<TabularEnv> {
        match &self.env {
            EnvSource::Generate { k, m, reward_spec } => {
                make_tabular(self.seed, *k, *m, *reward_spec)
            }
            EnvSource::File(path) => TabularEnv::load(path),
        }
    }

    /// Writes every setting back out, so a run can be replayed from its
    /// output directory.
    pub fn to_flat(&self) -> FlatFile {
        let mut f = FlatFile::new();
        f.set("seed", self.seed);
        match &self.env {
            EnvSource::Generate { k, m, reward_spec } => {
                f.set("env.k", k);
                f.set("env.m", m);
                f.set("env.reward_spec", reward_spec);
            }
            EnvSource::File(p) => f.set("env.path", p.display()),
        }
        f.set("score.transform", self.score.transform);
        f.set("score.noise", self.score.noise);
        f.set("data.n", self.data_n);
        if let Some(p) = &self.data_path {
            f.set("data.path", p.display());
        }
        let t = &self.train;
        f.set("train.batch_size", t.batch_size);
        f.set("train.epochs", t.epochs);
        f.set("train.learning_rate", format!("{:?}", t.learning_rate));
        f.set("train.optimizer", t.optimizer);
        f.set("train.objective", t.objective);
        f.set("train.refresh_reference", t.refresh_reference);
        f.set(
            "train.reestimate_threshold",
            t.reestimate_threshold_on_refresh,
        );
        f.set("tgo.beta", format!("{:?}", t.tgo.beta));
        f.set("tgo.c", format!("{:?}", t.tgo.c));
        f.set("tgo.percentile", format!("{:?}", t.tgo.percentile));
        f.set("tgo.numeric_mode", t.tgo.numeric_mode);
        f.set("threshold.method", t.quantile_method);
        f.set_vec("sweep.percentiles", &self.sweep.percentiles);
        f.set("sweep.replicates", self.sweep.replicates);
        f.set("sweep.suite_size", self.sweep.suite_size);
        f
    }
}
