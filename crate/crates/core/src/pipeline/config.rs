//! Experiment configuration: a versioned TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{Condition, TrainRecipe};
use crate::encoding::{default_lambda_grid, DEFAULT_LAG};
use crate::error::{Error, Result};
use crate::io::read;
use crate::model::ModelConfig;
use crate::neural::{CohortSpec, CorpusSpec, N_RUNS};
use crate::pretrain::PretrainSpec;
use crate::probe::DEFAULT_PROBE_SEEDS;

pub const SCHEMA_VERSION: u32 = 1;

const PIPELINE_OWNED: [(&str, &str); 2] = [("train", "heldout_run"), ("cohort", "seed")];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaLevels {
    /// Success gate, both tests.
    pub gate: f64,
    /// Per-task probe comparison and win-rate significance.
    pub probe: f64,
    /// Voxels need a noise ceiling above this to be analysed.
    pub ceiling_threshold: f64,
}

impl Default for AlphaLevels {
    fn default() -> Self {
        Self {
            gate: 0.05,
            probe: 0.05,
            ceiling_threshold: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareSet {
    /// Only participants whose success gate passed.
    Passing,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub seeds: usize,
    pub participants: CompareSet,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_PROBE_SEEDS,
            participants: CompareSet::Passing,
        }
    }
}

/// Every knob of one experiment. All randomness derives from `seed`.
///
/// `train.heldout_run` and `cohort.seed` are owned by the pipeline
/// (`heldout_runs` and `seed`) and rejected if present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub conditions: Vec<Condition>,
    pub heldout_runs: Vec<usize>,
    pub lag: usize,
    pub lambda_grid: Vec<f64>,
    pub alpha: AlphaLevels,
    pub corpus: CorpusSpec,
    pub cohort: CohortSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainSpec,
    pub train: TrainRecipe,
    pub probe: ProbeSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            conditions: Condition::ALL.to_vec(),
            heldout_runs: vec![0],
            lag: DEFAULT_LAG,
            lambda_grid: default_lambda_grid(),
            alpha: AlphaLevels::default(),
            corpus: CorpusSpec::default(),
            cohort: CohortSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSpec::default(),
            train: TrainRecipe::default(),
            probe: ProbeSpec::default(),
        }
    }
}

fn field(path: &str, e: Error) -> Error {
    let msg = match e {
        Error::Config(m) | Error::Contract(m) => m,
        other => other.to_string(),
    };
    Error::config(format!("field `{path}`: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        let version = match table.get("schema_version") {
            None => return Err(Error::config("field `schema_version`: missing")),
            Some(toml::Value::Integer(v)) => *v,
            Some(other) => return Err(Error::config(format!("field `schema_version`: expected an integer, got {other}"))),
        };
        if version < 1 || version > SCHEMA_VERSION as i64 {
            return Err(Error::config(format!(
                "field `schema_version`: version {version} is not supported (this build reads 1..={SCHEMA_VERSION})"
            )));
        }
        for ((section, key), owner) in PIPELINE_OWNED.into_iter().zip(["heldout_runs", "seed"]) {
            if table.get(section).and_then(|t| t.get(key)).is_some() {
                return Err(Error::config(format!("field `{section}.{key}`: set the top-level `{owner}` instead")));
            }
        }
        let config: Self = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::config(format!("{}: not UTF-8", path.display())))?;
        Self::from_toml(text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for (section, key) in PIPELINE_OWNED {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.remove(key);
            }
        }
        toml::to_string_pretty(&table).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!("field `schema_version`: expected {SCHEMA_VERSION}")));
        }
        if self.conditions.is_empty() {
            return Err(Error::config("field `conditions`: at least one condition is required"));
        }
        let mut seen = self.conditions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.conditions.len() {
            return Err(Error::config("field `conditions`: duplicate entries"));
        }
        if self.heldout_runs.is_empty() || self.heldout_runs.iter().any(|&h| h >= N_RUNS) {
            return Err(Error::config(format!("field `heldout_runs`: need one or more runs in 0..{N_RUNS}")));
        }
        if self.lag == 0 {
            return Err(Error::config("field `lag`: must be positive"));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::config("field `lambda_grid`: needs positive finite values"));
        }
        for (name, a) in [("alpha.gate", self.alpha.gate), ("alpha.probe", self.alpha.probe)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::config(format!("field `{name}`: {a} outside (0, 1)")));
            }
        }
        if !self.alpha.ceiling_threshold.is_finite() {
            return Err(Error::config("field `alpha.ceiling_threshold`: must be finite"));
        }
        if self.probe.seeds < 2 {
            return Err(Error::config("field `probe.seeds`: the t-test needs at least 2 seeds"));
        }
        self.corpus.validate().map_err(|e| field("corpus", e))?;
        self.cohort.validate().map_err(|e| field("cohort", e))?;
        self.model.validate().map_err(|e| field("model", e))?;
        self.pretrain.validate(&self.model).map_err(|e| field("pretrain", e))?;
        self.train.validate(N_RUNS).map_err(|e| field("train", e))?;
        let window = self.train.tr_window * self.corpus.tokens_per_tr;
        if window > self.model.max_seq_len {
            return Err(Error::config(format!(
                "field `train.tr_window`: {window} tokens per window exceed model.max_seq_len {}",
                self.model.max_seq_len
            )));
        }
        Ok(())
    }
}
