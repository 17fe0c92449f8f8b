//! Flat `key = value` pipeline configuration with `#` comments.

use std::fmt;

use thiserror::Error;

use crate::imageops::{parse_presets, Preset, DEFAULT_INPUT_SIZE};
use crate::neuralnet::Architecture;
use crate::predictor::CalibrationParams;
use crate::trainer::{Task, TrainConfig};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input_size: usize,
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub presets: Vec<Preset>,
    pub mean_subtraction: bool,
    pub calibration: [CalibrationParams; 2],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            input_size: DEFAULT_INPUT_SIZE,
            architecture: t.architecture,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            seed: t.seed,
            presets: Vec::new(),
            mean_subtraction: t.mean_subtraction,
            calibration: [CalibrationParams::default(); 2],
        }
    }
}

impl PipelineConfig {
    /// Defaults overridden by the given text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|message| ConfigError { line, message })?;
        }
        Ok(cfg)
    }

    /// Sets one key from its textual value, range-checked.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: invalid value {v:?}"))
        }
        fn real(key: &str, v: &str) -> Result<f64, String> {
            let x: f64 = num(key, v)?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(format!("{key}: value must be finite"))
            }
        }
        let calib = |cfg: &mut Self, task: usize, a: Option<f64>, b: Option<f64>| {
            let cur = cfg.calibration[task];
            cfg.calibration[task] = CalibrationParams::new(a.unwrap_or(cur.a()), b.unwrap_or(cur.b()))
                .map_err(|e| format!("{key}: {e}"))?;
            Ok::<(), String>(())
        };
        match key {
            "input_size" => {
                let s: usize = num(key, value)?;
                if s == 0 {
                    return Err("input_size must be positive".into());
                }
                self.input_size = s;
            }
            "architecture" => {
                self.architecture = value.parse().map_err(|e| format!("architecture: {e}"))?
            }
            "epochs" => {
                self.epochs = num(key, value)?;
                if self.epochs == 0 {
                    return Err("epochs must be at least 1".into());
                }
            }
            "batch_size" => {
                self.batch_size = num(key, value)?;
                if self.batch_size == 0 {
                    return Err("batch_size must be at least 1".into());
                }
            }
            "lr" => {
                let lr = real(key, value)?;
                if lr < 0.0 {
                    return Err("lr must be non-negative".into());
                }
                self.lr = lr;
            }
            "momentum" => {
                let m = real(key, value)?;
                if !(0.0..1.0).contains(&m) {
                    return Err("momentum must lie in [0, 1)".into());
                }
                self.momentum = m;
            }
            "seed" => self.seed = num(key, value)?,
            "presets" => self.presets = parse_presets(value).map_err(|e| format!("presets: {e}"))?,
            "mean_subtraction" => {
                self.mean_subtraction = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(format!("mean_subtraction: expected true/false, got {value:?}")),
                }
            }
            "a1" => calib(self, 0, Some(real(key, value)?), None)?,
            "b1" => calib(self, 0, None, Some(real(key, value)?))?,
            "a2" => calib(self, 1, Some(real(key, value)?), None)?,
            "b2" => calib(self, 1, None, Some(real(key, value)?))?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            input_size: self.input_size,
            architecture: self.architecture.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            mean_subtraction: self.mean_subtraction,
        }
    }

    pub fn calibration_for(&self, task: Task) -> CalibrationParams {
        self.calibration[task.tag() as usize - 1]
    }
}

/// Every key, one per line; parses back to the same config.
impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let presets = self
            .presets
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(f, "input_size = {}", self.input_size)?;
        writeln!(f, "architecture = {}", self.architecture)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lr = {:?}", self.lr)?;
        writeln!(f, "momentum = {:?}", self.momentum)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "presets = {presets}")?;
        writeln!(f, "mean_subtraction = {}", self.mean_subtraction)?;
        for (i, c) in self.calibration.iter().enumerate() {
            writeln!(f, "a{} = {:?}", i + 1, c.a())?;
            writeln!(f, "b{} = {:?}", i + 1, c.b())?;
        }
        Ok(())
    }
}
