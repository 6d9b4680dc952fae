//! Run configuration: a TOML key/value tree layered over a named profile.
//!
//! ```toml
//! profile = "desk"
//! seed = 7
//! model.experts = 4
//! train.epochs = 30
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::checkpoint::sha256_hex;
use crate::corpus::CorpusSpec;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Root seed; every component seed is set from it.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

/// Keys derived from the root seed or from the data.
const RESERVED: [(&str, &str); 5] = [
    ("corpus", "seed"),
    ("model", "seed"),
    ("train", "seed"),
    ("model", "input_dim"),
    ("model", "vocab_size"),
];

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn qualify(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{section}.{field}"), message),
        other => other,
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let model = match profile {
            Profile::Desk => ModelConfig::desk(),
            Profile::Paper => ModelConfig::paper(),
        };
        let mut cfg = Self {
            profile,
            seed: 7,
            corpus: CorpusSpec::default(),
            model,
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        };
        cfg.model.input_dim = cfg.corpus.dim;
        cfg.apply_seed();
        cfg
    }

    fn apply_seed(&mut self) {
        self.corpus.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::format("config", e.message().to_string()))?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(Value::String(s)) if s == "desk" => Profile::Desk,
            Some(Value::String(s)) if s == "paper" => Profile::Paper,
            Some(other) => {
                return Err(Error::config("profile", format!("{other} is not \"desk\" or \"paper\"")))
            }
        };
        for (section, key) in RESERVED {
            if let Some(Value::Table(t)) = user.get(section) {
                if t.contains_key(key) {
                    return Err(Error::config(
                        format!("{section}.{key}"),
                        "is derived and cannot be set",
                    ));
                }
            }
        }
        let mut base = match Value::try_from(Self::for_profile(profile)) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("configuration serializes to a table"),
        };
        merge(&mut base, user);
        let mut cfg: Self = Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::format("config", e.message().to_string()))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the canonical form written by [`RunConfig::to_toml`].
    pub fn from_resolved(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e: toml::de::Error| Error::format("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().map_err(|e| qualify("corpus", e))?;
        self.model.validate().map_err(|e| qualify("model", e))?;
        self.train.validate().map_err(|e| qualify("train", e))?;
        self.decode.validate().map_err(|e| qualify("decode", e))?;
        Ok(())
    }

    /// Canonical text form of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is serializable")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}
