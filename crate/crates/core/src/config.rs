//! Experiment configuration files.
//!
//! A TOML file lists only the values that differ from the per-environment
//! defaults. Sections:
//!
//! ```toml
//! seeds = [0, 1, 2]
//!
//! [env]            # kind plus any environment parameter
//! kind = "cartpole"
//!
//! [training]       # network sizes, budgets, weights, schedules
//! total_interactions = 300000
//!
//! [conformal]      # alpha, modes, radius_floor, temperature, lambda_step, lambda_init
//! [verification]   # delta, k_max, n_scale, n_cal, n_opt, n_ver, weight_search
//! [eval]           # episodes, horizon
//! [output]         # dir
//! ```
//!
//! Unknown keys are rejected so that typos cannot silently fall back to a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use crate::verify::VerifyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSettings {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Verification settings; `alpha` mirrors `train.alpha`.
    pub verify: VerifyConfig,
    pub eval: EvalSettings,
    pub output: OutputSettings,
}

const CONFORMAL_TRAIN_KEYS: [&str; 5] = ["alpha", "radius_floor", "temperature", "lambda_step", "lambda_init"];

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn to_table<T: Serialize>(value: &T) -> Result<Table> {
    match Value::try_from(value).map_err(|e| config_error(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => Err(config_error("expected a table")),
    }
}

fn from_table<T: for<'de> Deserialize<'de>>(table: Table) -> Result<T> {
    Value::Table(table).try_into().map_err(|e| config_error(e.to_string()))
}

fn take(table: &mut Table, key: &str) -> Result<Value> {
    table.remove(key).ok_or_else(|| config_error(format!("missing key {key}")))
}

/// Recursively overwrites `base` with `overlay`, rejecting keys that `base`
/// does not have.
fn merge(base: &mut Table, overlay: Table, path: &str) -> Result<()> {
    for (key, value) in overlay {
        let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(config_error(format!("unknown key {here}"))),
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &here)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn default_for(env: EnvKind) -> Self {
        let train = TrainConfig::default_for(env);
        Self {
            seeds: vec![0],
            verify: VerifyConfig {
                alpha: train.alpha,
                ..VerifyConfig::default()
            },
            train,
            eval: EvalSettings {
                episodes: 100,
                horizon: 200,
            },
            output: OutputSettings {
                dir: PathBuf::from("runs"),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_error("seeds must not be empty"));
        }
        if self.eval.episodes == 0 || self.eval.horizon == 0 {
            return Err(config_error("eval episodes and horizon must be positive"));
        }
        if self.verify.alpha != self.train.alpha {
            return Err(config_error("training and verification alpha differ"));
        }
        self.train.validate()?;
        self.verify.validate()
    }

    /// The sectioned file layout described in the module docs.
    pub fn to_table(&self) -> Result<Table> {
        let mut training = to_table(&self.train)?;
        let kind = take(&mut training, "env")?;
        let Value::Table(mut env) = take(&mut training, "env_config")? else {
            return Err(config_error("env_config is not a table"));
        };
        env.insert("kind".into(), kind);
        training.remove("seed");
        let mut conformal = Table::new();
        for key in CONFORMAL_TRAIN_KEYS {
            conformal.insert(key.into(), take(&mut training, key)?);
        }
        let mut verification = to_table(&self.verify)?;
        verification.remove("alpha");
        verification.remove("seed");
        conformal.insert("modes".into(), take(&mut verification, "modes")?);

        let mut t = Table::new();
        t.insert("seeds".into(), Value::try_from(&self.seeds).map_err(|e| config_error(e.to_string()))?);
        t.insert("env".into(), Value::Table(env));
        t.insert("training".into(), Value::Table(training));
        t.insert("conformal".into(), Value::Table(conformal));
        t.insert("verification".into(), Value::Table(verification));
        t.insert("eval".into(), Value::Table(to_table(&self.eval)?));
        t.insert("output".into(), Value::Table(to_table(&self.output)?));
        Ok(t)
    }

    pub fn from_table(mut t: Table) -> Result<Self> {
        let section = |t: &mut Table, key: &str| match take(t, key)? {
            Value::Table(s) => Ok(s),
            _ => Err(config_error(format!("{key} must be a table"))),
        };
        let mut env = section(&mut t, "env")?;
        let mut training = section(&mut t, "training")?;
        let mut conformal = section(&mut t, "conformal")?;
        let mut verification = section(&mut t, "verification")?;
        training.insert("env".into(), take(&mut env, "kind")?);
        training.insert("env_config".into(), Value::Table(env));
        training.insert("seed".into(), Value::Integer(0));
        for key in CONFORMAL_TRAIN_KEYS {
            training.insert(key.into(), take(&mut conformal, key)?);
        }
        verification.insert("modes".into(), take(&mut conformal, "modes")?);
        let train: TrainConfig = from_table(training)?;
        verification.insert("alpha".into(), Value::Float(train.alpha));
        verification.insert("seed".into(), Value::Integer(0));
        let config = Self {
            seeds: take(&mut t, "seeds")?.try_into().map_err(|e: toml::de::Error| config_error(e.to_string()))?,
            train,
            verify: from_table(verification)?,
            eval: from_table(section(&mut t, "eval")?)?,
            output: from_table(section(&mut t, "output")?)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Parses a (possibly partial) file and fills the rest from the defaults
    /// of the environment named in `env.kind` (CartPole when absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overlay: Table = text.parse().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        let kind = match overlay.get("env").and_then(|e| e.get("kind")) {
            None => EnvKind::Cartpole,
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(config_error("env.kind must be a string")),
        };
        let mut table = Self::default_for(kind).to_table()?;
        merge(&mut table, overlay, "")?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_table()?).map_err(|e| config_error(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn verify_config(&self, seed: u64) -> VerifyConfig {
        VerifyConfig {
            seed,
            alpha: self.train.alpha,
            ..self.verify.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::CalibrationMode;

    #[test]
    fn defaults_round_trip_through_toml() {
        for kind in EnvKind::ALL {
            let c = ExperimentConfig::default_for(kind);
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c, "{kind}");
        }
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let text = r#"
            seeds = [3, 4]
            [env]
            kind = "quad2d"
            dt = 0.02
            [training]
            total_interactions = 5000
            [conformal]
            alpha = 0.2
            modes = ["ts"]
            [verification]
            k_max = 7
        "#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.train.env, EnvKind::Quad2d);
        assert_eq!(c.train.env_config.dt, 0.02);
        assert_eq!(c.train.total_interactions, 5000);
        assert_eq!(c.train.hidden, vec![256, 256, 256]);
        assert_eq!(c.verify.alpha, 0.2);
        assert_eq!(c.verify.modes, vec![CalibrationMode::Ts]);
        assert_eq!(c.verify.k_max, 7);
        assert_eq!(c.train_config(4).seed, 4);
    }

    #[test]
    fn empty_file_is_cartpole_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default_for(EnvKind::Cartpole)
        );
    }

    #[test]
    fn bad_files_are_rejected() {
        for text in [
            "[training]\ngama = 0.9",
            "[env]\nkind = \"pendulum\"",
            "seeds = []",
            "[conformal]\nalpha = 1.5",
            "[training]\nhidden = \"wide\"",
            "not toml at all [",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default_for(EnvKind::Cartpole);
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.gamma = 0.9;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
