//! Run configuration: a strict flat `section.key = value` file format plus
//! programmatic overrides. Unknown keys are rejected so typos fail loudly
//! instead of silently running defaults.

use std::path::{Path, PathBuf};

use crate::competition::IntraStrategy;
use crate::data::SyntheticSpec;
use crate::error::{NofaError, Result};
use crate::pipeline::{Components, PipelineConfig};

/// Environment variable consulted for the default output directory.
pub const OUT_DIR_ENV: &str = "NOFABC_OUT";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub data: SyntheticSpec,
    /// One full pipeline run per seed; results are aggregated.
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineConfig::default(),
            data: SyntheticSpec::default(),
            seeds: vec![1993, 1994, 1995, 1996, 1997],
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Parse a whole config file body. Lines are `key = value`; `#` starts a
    /// comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                NofaError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| NofaError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Apply one dotted-key assignment, e.g. `model.gamma = 0.5`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.feature_dim" => self.pipeline.feature_dim = parse(key, value)?,
            "model.num_blocks" => self.pipeline.num_blocks = parse(key, value)?,
            "model.adapter_rank" => self.pipeline.adapter_rank = parse(key, value)?,
            "model.expansion_dim" => self.pipeline.expansion_dim = parse(key, value)?,
            "model.gamma" => self.pipeline.gamma = parse(key, value)?,
            "model.components" => self.pipeline.components = parse_components(value)?,
            "model.intra" => {
                self.pipeline.intra = value.parse::<IntraStrategy>()?;
            }
            "model.o_percent" => self.pipeline.o_percent = parse(key, value)?,
            "model.beta" => self.pipeline.se.beta = parse(key, value)?,
            "model.normalize_before_fuse" => {
                self.pipeline.se.normalize_before_fuse = parse_bool(key, value)?
            }
            "model.renormalize_alpha" => {
                self.pipeline.renormalize_alpha = parse_bool(key, value)?
            }
            "model.max_adapters" => {
                self.pipeline.max_adapters = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "model.seed" => self.pipeline.seed = parse(key, value)?,
            "train.learning_rate" => self.pipeline.train.learning_rate = parse(key, value)?,
            "train.epochs" => self.pipeline.train.epochs = parse(key, value)?,
            "train.batch_size" => self.pipeline.train.batch_size = parse(key, value)?,
            "train.weight_decay" => self.pipeline.train.weight_decay = parse(key, value)?,
            "train.cosine_schedule" => {
                self.pipeline.train.cosine_schedule = parse_bool(key, value)?
            }
            "data.tasks" => self.data.tasks = parse(key, value)?,
            "data.classes_per_task" => self.data.classes_per_task = parse(key, value)?,
            "data.train_per_class" => self.data.train_per_class = parse(key, value)?,
            "data.test_per_class" => self.data.test_per_class = parse(key, value)?,
            "data.input_dim" => self.data.input_dim = parse(key, value)?,
            "data.separation" => self.data.separation = parse(key, value)?,
            "data.task_shift" => self.data.task_shift = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "run.seeds" => {
                let seeds: Result<Vec<u64>> = value
                    .split(',')
                    .map(|s| parse::<u64>("run.seeds", s.trim()))
                    .collect();
                let seeds = seeds?;
                if seeds.is_empty() {
                    return Err(NofaError::Config("run.seeds must be non-empty".into()));
                }
                self.seeds = seeds;
            }
            "run.out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => {
                return Err(NofaError::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    /// Output directory resolution order: explicit config, env var, `./out`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var(OUT_DIR_ENV) {
            if !d.is_empty() {
                return PathBuf::from(d);
            }
        }
        PathBuf::from("out")
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| NofaError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(NofaError::Config(format!(
            "bad boolean `{value}` for `{key}`"
        ))),
    }
}

pub fn parse_components(value: &str) -> Result<Components> {
    match value {
        "ia" => Ok(Components::Ia),
        "ia_nfa" => Ok(Components::IaNfa),
        "ia_nfa_blc" => Ok(Components::IaNfaBlc),
        "nfa_only" => Ok(Components::NfaOnly),
        "full" => Ok(Components::Full),
        _ => Err(NofaError::Config(format!(
            "unknown components `{value}` (ia, ia_nfa, ia_nfa_blc, nfa_only, full)"
        ))),
    }
}
