//! Versioned JSON checkpoints of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optimize::{Generator, RunState};

pub const FORMAT: &str = "metalopt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub state: RunState,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, state: RunState) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config,
            state,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the header first so a version bump reports as such rather
        // than as a field mismatch.
        let header: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("not a {FORMAT} file")));
        }
        match header.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(VERSION) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unsupported version {other:?}, expected {VERSION}"
                )))
            }
        }
        let ckpt: Self =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks every stored parameter set against the generator's layout.
    pub fn validate_against(&self, generator: &Generator) -> Result<()> {
        let s = &self.state;
        let check = |what: &str, p: &crate::params::ParamSet| {
            generator
                .check(p)
                .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
        };
        check("params", &s.params)?;
        check("adam.m", &s.adam.m)?;
        check("adam.v", &s.adam.v)?;
        if let Some(prev) = &s.previous {
            check("previous.params", &prev.params)?;
            check("previous.grad", &prev.grad)?;
            check("previous.adam.m", &prev.adam.m)?;
            check("previous.adam.v", &prev.adam.v)?;
        }
        if let Some(best) = &s.best {
            check("best.params", &best.params)?;
        }
        Ok(())
    }
}
