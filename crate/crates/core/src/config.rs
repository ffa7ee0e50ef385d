//! Experiment configuration: a flat TOML file whose keys can be overridden
//! one at a time through `HAUCTION_<KEY>` environment variables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{LogScale, PopulationSpec, Preset, ValueDomain, ValueLaw};
use crate::eval::EvalConfig;
use crate::model::AuctionSetting;
use crate::train::{OptimizerKind, TrainConfig};

pub const ENV_PREFIX: &str = "HAUCTION_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 640,000 training and 12,800 test samples.
    Full,
    /// 100,000 training and 12,800 test samples.
    Fast,
}

impl Profile {
    pub fn sizes(self) -> (usize, usize) {
        match self {
            Profile::Full => (640_000, 12_800),
            Profile::Fast => (100_000, 12_800),
        }
    }
}

/// Every tunable of an experiment. Money-valued quantities are per click
/// in the same units as the values (the unit interval by default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setting: String,
    /// Maximum number of bundle slots `C`.
    pub cap: usize,
    /// `uniform`, `normal` or `lognormal`.
    pub distribution: String,
    /// `variance` or `std`: how the lognormal's second parameter is read.
    pub lognormal_scale: String,
    pub density: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub profile: Profile,
    /// Overrides the profile's training set size when nonzero.
    pub train_samples: usize,
    /// Overrides the profile's test set size when nonzero.
    pub test_samples: usize,
    pub seed: u64,

    pub iterations: u64,
    pub batch_size: usize,
    pub ascent_steps: usize,
    pub misreport_step: f64,
    pub learning_rate: f64,
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub multiplier_period: u64,
    pub rho_init: f64,
    pub rho_increment: f64,
    pub hidden: usize,
    pub store_hidden: usize,
    pub chunk_size: usize,
    /// Iterations between checkpoints.
    pub checkpoint_every: u64,

    pub eval_restarts: usize,
    pub eval_steps: usize,
    pub eval_step: f64,
    pub grid_points: usize,
    /// Leading test samples searched for regret, 0 for all of them.
    pub eval_regret_samples: usize,

    /// Worker threads, 0 for one per core. Results do not depend on it.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = EvalConfig::default();
        Self {
            setting: "A".into(),
            cap: 1,
            distribution: "uniform".into(),
            lognormal_scale: "variance".into(),
            density: 0.5,
            alpha_min: 0.5,
            alpha_max: 1.5,
            profile: Profile::Fast,
            train_samples: 0,
            test_samples: 0,
            seed: 1,
            iterations: t.iterations,
            batch_size: t.batch_size,
            ascent_steps: t.ascent_steps,
            misreport_step: t.misreport_step,
            learning_rate: t.learning_rate,
            optimizer: "adam".into(),
            multiplier_period: t.multiplier_period,
            rho_init: t.rho_init,
            rho_increment: t.rho_increment,
            hidden: t.hidden,
            store_hidden: t.store_hidden,
            chunk_size: t.chunk_size,
            checkpoint_every: 500,
            eval_restarts: e.restarts,
            eval_steps: e.ascent_steps,
            eval_step: e.step,
            grid_points: e.grid_points,
            eval_regret_samples: e.regret_samples,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, then applies environment overrides from `env`.
    pub fn parse(text: &str, env: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let known = toml::Table::try_from(Self::default()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, default) in &known {
            let var = format!("{ENV_PREFIX}{}", key.to_ascii_uppercase());
            if let Some(raw) = env.get(&var) {
                table.insert(key.clone(), env_value(raw, default));
            }
        }
        let config: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads overrides from the process environment.
    pub fn parse_with_process_env(text: &str) -> Result<Self, ConfigError> {
        let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::parse(text, &env)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn preset(&self) -> Result<Preset, ConfigError> {
        self.setting.parse().map_err(ConfigError::Invalid)
    }

    pub fn auction_setting(&self) -> Result<AuctionSetting, ConfigError> {
        self.preset()?.setting(self.cap).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn population(&self) -> Result<PopulationSpec, ConfigError> {
        let scale = match self.lognormal_scale.as_str() {
            "variance" => LogScale::Variance,
            "std" => LogScale::StdDev,
            other => return Err(ConfigError::Invalid(format!("lognormal_scale must be variance or std, got {other:?}"))),
        };
        let law = ValueLaw::by_name(&self.distribution, scale)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown distribution {:?}", self.distribution)))?;
        let spec = PopulationSpec { preset: self.preset()?, law, density: self.density, alpha_range: (self.alpha_min, self.alpha_max) };
        spec.validate().map_err(ConfigError::Invalid)?;
        Ok(spec)
    }

    pub fn domain(&self) -> ValueDomain {
        ValueDomain::UNIT
    }

    pub fn sample_counts(&self) -> (usize, usize) {
        let (train, test) = self.profile.sizes();
        let pick = |over: usize, default: usize| if over > 0 { over } else { default };
        (pick(self.train_samples, train), pick(self.test_samples, test))
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let optimizer = match self.optimizer.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(ConfigError::Invalid(format!("optimizer must be adam or sgd, got {other:?}"))),
        };
        let t = TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            ascent_steps: self.ascent_steps,
            misreport_step: self.misreport_step,
            learning_rate: self.learning_rate,
            optimizer,
            multiplier_period: self.multiplier_period,
            rho_init: self.rho_init,
            rho_increment: self.rho_increment,
            hidden: self.hidden,
            store_hidden: self.store_hidden,
            chunk_size: self.chunk_size,
        };
        t.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(t)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            restarts: self.eval_restarts,
            ascent_steps: self.eval_steps,
            step: self.eval_step,
            grid_points: self.grid_points,
            chunk_size: self.chunk_size,
            regret_samples: self.eval_regret_samples,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.auction_setting()?;
        self.population()?;
        self.train_config()?;
        if self.eval_restarts == 0 || self.grid_points == 0 {
            return Err(ConfigError::Invalid("evaluation restarts and grid points must be positive".into()));
        }
        if !(self.eval_step.is_finite() && self.eval_step > 0.0) {
            return Err(ConfigError::Invalid("eval_step must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(ConfigError::Invalid("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that determines the datasets.
    pub fn data_hash(&self) -> String {
        let (train, test) = self.sample_counts();
        digest(&[
            ("setting", self.setting.clone()),
            ("cap", self.cap.to_string()),
            ("distribution", self.distribution.clone()),
            ("lognormal_scale", self.lognormal_scale.clone()),
            ("density", format!("{:?}", self.density)),
            ("alpha", format!("{:?},{:?}", self.alpha_min, self.alpha_max)),
            ("train", train.to_string()),
            ("test", test.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    /// Hash of everything that determines a trained model (checkpointing
    /// cadence excluded, since it does not change the weights).
    ///
    /// The iteration budget is left out so a finished run can be extended
    /// with `--resume`; the trajectory up to any iteration does not depend on it.
    pub fn train_hash(&self) -> String {
        let t = self
            .train_config()
            .map(|t| serde_json::to_string(&TrainConfig { iterations: 0, ..t }).expect("serializes"))
            .unwrap_or_default();
        digest(&[("data", self.data_hash()), ("train", t)])
    }

    /// Hash of everything that determines an evaluation report.
    pub fn eval_hash(&self) -> String {
        digest(&[("train", self.train_hash()), ("iterations", self.iterations.to_string()), ("eval", serde_json::to_string(&self.eval_config()).expect("serializes"))])
    }

    /// Hash of the inputs of a VCG evaluation, which does not involve
    /// training.
    pub fn vcg_hash(&self) -> String {
        digest(&[("data", self.data_hash()), ("grid", self.grid_points.to_string())])
    }
}

fn env_value(raw: &str, default: &toml::Value) -> toml::Value {
    let parsed = format!("v = {raw}").parse::<toml::Table>().ok().and_then(|mut t| t.remove("v"));
    match (default, parsed) {
        (toml::Value::String(_), _) => toml::Value::String(raw.to_string()),
        (_, Some(v)) => v,
        (_, None) => toml::Value::String(raw.to_string()),
    }
}

fn digest(parts: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in parts {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.to_toml(), &BTreeMap::new()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn env_overrides_single_keys() {
        let env: BTreeMap<String, String> = [
            ("HAUCTION_CAP".to_string(), "2".to_string()),
            ("HAUCTION_SETTING".to_string(), "B".to_string()),
            ("HAUCTION_DENSITY".to_string(), "0.8".to_string()),
            ("OTHER_CAP".to_string(), "3".to_string()),
        ]
        .into();
        let c = ExperimentConfig::parse("cap = 1\nsetting = \"A\"\n", &env).unwrap();
        assert_eq!((c.cap, c.setting.as_str(), c.density), (2, "B", 0.8));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(ExperimentConfig::parse("bogus = 1", &BTreeMap::new()), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::parse("cap = 2", &BTreeMap::new()), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("density = 0.0", &BTreeMap::new()), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("distribution = \"cauchy\"", &BTreeMap::new()), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hashes_track_relevant_fields() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { workers: 7, checkpoint_every: 3, ..a.clone() };
        assert_eq!(a.train_hash(), b.train_hash());
        let c = ExperimentConfig { learning_rate: 0.01, ..a.clone() };
        assert_eq!(a.data_hash(), c.data_hash());
        assert_ne!(a.train_hash(), c.train_hash());
        let d = ExperimentConfig { eval_restarts: 3, ..a.clone() };
        assert_eq!(a.train_hash(), d.train_hash());
        assert_ne!(a.eval_hash(), d.eval_hash());
    }

    #[test]
    fn profiles() {
        let full = ExperimentConfig { profile: Profile::Full, ..Default::default() };
        assert_eq!(full.sample_counts(), (640_000, 12_800));
        assert_eq!(ExperimentConfig::default().sample_counts(), (100_000, 12_800));
        let custom = ExperimentConfig { train_samples: 500, ..Default::default() };
        assert_eq!(custom.sample_counts(), (500, 12_800));
    }
}
