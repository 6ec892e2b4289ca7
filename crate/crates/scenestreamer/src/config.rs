//! Plain-text key=value run configuration. Precedence: command-line flags >
//! config file > built-in defaults. `#` starts a comment; blank lines are
//! ignored. Unknown keys are errors so typos fail loudly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use scenestreamer_core::model::ModelConfig;
use scenestreamer_core::state_codec::{QuantRanges, RS_FIELDS};
use scenestreamer_core::train::TrainConfig;

use crate::error::{AppError, AppResult};

pub const RANGE_NAMES: [&str; RS_FIELDS] = ["l", "w", "h", "u", "v", "dpsi", "vx", "vy"];

/// Merged configuration driving every command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ranges: QuantRanges,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ranges: QuantRanges::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> AppResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.ranges.validate()?;
        Ok(())
    }

    /// Apply a parsed key=value map on top of the current values.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> AppResult<()> {
        for (key, value) in kv {
            self.apply_one(key, value)
                .map_err(|m| AppError::Validation(format!("config key {key:?}: {m}")))?;
        }
        Ok(())
    }

    fn apply_one(&mut self, key: &str, value: &str) -> Result<(), String> {
        if let Some(name) = key.strip_prefix("range_") {
            let idx = RANGE_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| format!("unknown range field {name:?}"))?;
            let (lo, hi) = value
                .split_once(',')
                .ok_or_else(|| "expected \"lo,hi\"".to_string())?;
            self.ranges.fields[idx] = (parse_f64(lo)?, parse_f64(hi)?);
            return Ok(());
        }
        match key {
            "d_model" => self.model.d_model = parse_usize(value)?,
            "n_heads" => self.model.n_heads = parse_usize(value)?,
            "enc_layers" => self.model.enc_layers = parse_usize(value)?,
            "dec_layers" => self.model.dec_layers = parse_usize(value)?,
            "rs_layers" => self.model.rs_layers = parse_usize(value)?,
            "d_rel" => self.model.d_rel = parse_usize(value)?,
            "d_ff" => self.model.d_ff = parse_usize(value)?,
            "max_agents" => self.model.max_agents = parse_usize(value)?,
            "max_lights" => self.model.max_lights = parse_usize(value)?,
            "max_map_segments" => self.model.max_map_segments = parse_usize(value)?,
            "knn_k" => self.model.knn_k = parse_usize(value)?,
            "nucleus_p" => self.model.nucleus_p = parse_f64(value)?,
            "base_lr" => self.train.base_lr = parse_f64(value)?,
            "warmup_steps" => self.train.warmup_steps = parse_u64(value)?,
            "total_steps" => self.train.total_steps = parse_u64(value)?,
            "grad_clip" => self.train.grad_clip = parse_f64(value)?,
            "weight_decay" => self.train.weight_decay = parse_f64(value)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }
}

pub fn parse_config_text(text: &str) -> AppResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            AppError::Validation(format!("config line {}: expected key=value", lineno + 1))
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

pub fn load_config_file(path: &Path) -> AppResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    parse_config_text(&text)
}

fn parse_usize(s: &str) -> Result<usize, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_u64(s: &str) -> Result<u64, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse().map_err(|e| format!("{e}"))
}
