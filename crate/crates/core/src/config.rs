//! TOML run configuration.
//!
//! ```toml
//! [model]
//! embed_dim = 64
//! lstm_hidden = 32      # per direction; token width is twice this
//! d_prime = 32          # criss-cross query/key width, default lstm_hidden
//! dropout = 0.5
//!
//! [train]
//! epochs = 15
//! batch_size = 1
//! learning_rate = 1e-3
//! weight_decay = 0.01
//! clip_norm = 5.0       # optional
//! seed = 0
//! class_weights = { None = 0.5 }   # optional, by label name
//! ```
//!
//! Every key has a default, so an empty file is valid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{ModelHyper, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelHyper,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
