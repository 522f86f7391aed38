//! TOML training configuration with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::emission::{EmissionHyper, GradientPath, ReliabilityLevel};
use crate::error::{Error, Result};
use crate::hmm::EVIDENCE_FLOOR;
use crate::transition::InitialState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub entities: Vec<String>,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: Option<PathBuf>,
    /// Embedding files; default to the JSONL path with an `.emb` extension.
    pub train_emb: Option<PathBuf>,
    pub valid_emb: Option<PathBuf>,
    pub test_emb: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            entities: vec!["PER".into(), "LOC".into(), "ORG".into(), "MISC".into()],
            train: "train.jsonl".into(),
            valid: "valid.jsonl".into(),
            test: None,
            train_emb: None,
            valid_emb: None,
            test_emb: None,
        }
    }
}

impl DataConfig {
    /// Embedding path for a split: explicit or sibling `.emb` file.
    pub fn embedding_path(jsonl: &Path, explicit: Option<&PathBuf>) -> PathBuf {
        explicit.cloned().unwrap_or_else(|| jsonl.with_extension("emb"))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train);
        fix(&mut self.valid);
        for p in [&mut self.test, &mut self.train_emb, &mut self.valid_emb, &mut self.test_emb]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub h_n: f64,
    pub h_s: f64,
    /// Defaults to `1/K`.
    pub h_r: Option<f64>,
    pub g_n: f64,
    pub nu_base: f64,
    pub nu_expan: f64,
    pub level: ReliabilityLevel,
    pub initial: InitialState,
    pub evidence_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            h_n: 1.2,
            h_s: 1.5,
            h_r: None,
            g_n: 4.0,
            nu_base: 10.0,
            nu_expan: 1000.0,
            level: ReliabilityLevel::Entity,
            initial: InitialState::O,
            evidence_floor: EVIDENCE_FLOOR,
        }
    }
}

impl ModelConfig {
    pub fn hyper(&self, num_lfs: usize, g_r: f64) -> EmissionHyper {
        EmissionHyper {
            h_n: self.h_n,
            h_s: self.h_s,
            h_r: self.h_r.unwrap_or(1.0 / num_lfs as f64),
            g_n: self.g_n,
            g_r,
            nu_base: self.nu_base,
            nu_expan: self.nu_expan,
            level: self.level,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmissionDraw {
    Sample,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Split point of `g`, as a multiple of `1/L`.
    pub g_r_times_l: f64,
    pub emission: EmissionDraw,
}

impl StageConfig {
    fn with(lr: f64, g_r_times_l: f64, emission: EmissionDraw) -> Self {
        Self {
            lr,
            max_epochs: 50,
            patience: 5,
            g_r_times_l,
            emission,
        }
    }

    pub fn g_r(&self, num_labels: usize) -> f64 {
        self.g_r_times_l / num_labels as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WxorScope {
    #[default]
    TrainValid,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub pretrain_epochs: usize,
    /// Weight of `Φ*` in the stage-2 pretraining target.
    pub lambda: f64,
    pub use_mv: bool,
    /// Count `O` votes in majority voting.
    pub mv_count_o: bool,
    pub wxor_scope: WxorScope,
    pub gradient: GradientPath,
    pub eval_split: String,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr_pretrain: 5e-4,
            pretrain_epochs: 5,
            lambda: 0.2,
            use_mv: false,
            mv_count_o: false,
            wxor_scope: WxorScope::TrainValid,
            gradient: GradientPath::MeanPath,
            eval_split: "valid".into(),
            stage1: StageConfig::with(2e-4, 0.5, EmissionDraw::Sample),
            stage2: StageConfig::with(4e-5, 0.05, EmissionDraw::Sample),
            stage3: StageConfig::with(2e-4, 0.05, EmissionDraw::Sample),
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, stage: u8) -> &StageConfig {
        match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            _ => &self.stage3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("train.lambda must lie in [0,1], got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr_pretrain > 0.0) {
            return Err(Error::Config("train.lr_pretrain must be positive".into()));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            if !(s.lr > 0.0) {
                return Err(Error::Config(format!("train.{name}.lr must be positive")));
            }
            if s.patience == 0 {
                return Err(Error::Config(format!("train.{name}.patience must be at least 1")));
            }
            if !(s.g_r_times_l > 0.0) {
                return Err(Error::Config(format!("train.{name}.g_r_times_l must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Parses a config file, applies overrides, and resolves data paths
    /// relative to the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Config = parse_with_overrides(&text, overrides)?;
        cfg.data.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Parses TOML text over the defaults of `T`, applies `a.b.c=value`
/// overrides, then deserializes. Override values are read as TOML literals,
/// falling back to plain strings.
pub fn parse_with_overrides<T>(text: &str, overrides: &[String]) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut table = toml::Table::try_from(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut table, user);
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
