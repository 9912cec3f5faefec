//! Flat `key = value` parameter files.
//!
//! One file describes a whole link: source, channel, detector, simulator,
//! synchronization and post-processing settings. Blank lines and `#` comments
//! are ignored; keys are case-sensitive and must be known.
//!
//! ```text
//! # typical night-time link
//! r1 = 78000
//! r2 = 71000
//! rc = 11000
//! v_hv = 0.975
//! lags_b = 0, 0.5e-9, 0, 0.5e-9
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

/// Every key any consumer understands; anything else is rejected as a typo.
pub const KNOWN_KEYS: &[&str] = &[
    // source / channel / detector
    "r1",
    "r2",
    "rc",
    "v_hv",
    "v_diag",
    "q_i",
    "transmission",
    "r_bg",
    "tau_d",
    "tau_c",
    "rates",
    // simulator
    "jitter_sigma",
    "lags_a",
    "lags_b",
    "efficiency_a",
    "efficiency_b",
    "background_weights",
    "clock_skew",
    "clock_offset",
    "unit_dead_time",
    "duration",
    "seed",
    // synchronization
    "acquisition_window",
    "coarse_bin",
    "fine_bin",
    "track_window",
    "servo_tau",
    "freq_uncertainty",
    "max_walk",
    // post-processing
    "block_bits",
    "sample_fraction",
    "qber_limit",
    "cascade_target",
    "cascade_max_passes",
    "safety_margin",
    "asymmetry_penalty",
    "chunk_secs",
];

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("key `{key}`: expected {expected} values, found {found}")]
    Arity {
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed parameter file. Values stay as strings until a consumer asks for them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamFile {
    entries: BTreeMap<String, String>,
}

impl ParamFile {
    pub fn parse(text: &str) -> Result<Self, ParamError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ParamError::Syntax { line })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(ParamError::Syntax { line });
            }
            if !KNOWN_KEYS.contains(&key) {
                return Err(ParamError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ParamError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(ParamFile { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParamError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets or overrides a value (used for CLI overrides such as `--seed`).
    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ParamError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ParamError::Value {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ParamError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ParamError> {
        match self.entries.get(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "1" | "true" | "yes" | "on" => Ok(Some(true)),
                "0" | "false" | "no" | "off" => Ok(Some(false)),
                _ => Err(ParamError::Value {
                    key: key.to_string(),
                    value: v,
                }),
            },
        }
    }

    /// A comma-separated list of exactly four numbers (one per detector).
    pub fn get_quad(&self, key: &str) -> Result<Option<[f64; 4]>, ParamError> {
        let Some(v) = self.entries.get(key) else {
            return Ok(None);
        };
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(ParamError::Arity {
                key: key.to_string(),
                expected: 4,
                found: parts.len(),
            });
        }
        let mut out = [0.0; 4];
        for (slot, p) in out.iter_mut().zip(parts) {
            *slot = p.parse().map_err(|_| ParamError::Value {
                key: key.to_string(),
                value: v.clone(),
            })?;
        }
        Ok(Some(out))
    }
}

impl fmt::Display for ParamFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
