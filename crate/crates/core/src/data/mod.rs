//! Synthetic populations for the benchmark settings, the on-disk dataset
//! container, and ingestion of auction logs.

mod dataset;
mod ingest;

pub use dataset::{read_dataset, write_dataset, Dataset, DatasetError, DatasetHeader};
pub use ingest::{ingest_log, write_log, CtrOverrides, IngestError, IngestOptions, IngestedAuction};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{AuctionInstance, AuctionSetting, BidProfile, Sample};

/// Benchmark scenarios: `stores × brands × slots` with fixed slot CTRs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
    D,
}

impl Preset {
    pub fn dims(self) -> (usize, usize, Vec<f64>) {
        match self {
            Preset::A => (2, 2, vec![0.5]),
            Preset::B => (3, 4, vec![0.5, 0.3, 0.2]),
            Preset::C => (3, 4, vec![0.5, 0.3, 0.2, 0.1]),
            Preset::D => (4, 4, vec![0.5, 0.3, 0.2]),
        }
    }

    pub fn setting(self, cap: usize) -> crate::model::Result<AuctionSetting> {
        let (m, n, theta) = self.dims();
        AuctionSetting::new(m, n, cap, theta)
    }
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            other => Err(format!("unknown setting preset {other:?}")),
        }
    }
}

/// How the lognormal's second parameter is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogScale {
    /// `(μ, σ²)` of the underlying normal.
    Variance,
    /// `(μ, σ)` of the underlying normal.
    StdDev,
}

/// Per-click value law, always restricted to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ValueLaw {
    Uniform,
    /// Normal(mean, variance) truncated to [0,1] by rejection.
    TruncatedNormal { mean: f64, variance: f64 },
    /// LogNormal(mu, second) truncated to [0,1] by rejection.
    TruncatedLogNormal { mu: f64, second: f64, scale: LogScale },
}

impl ValueLaw {
    pub const NORMAL: ValueLaw = ValueLaw::TruncatedNormal { mean: 0.5, variance: 0.16 };
    pub const LOGNORMAL: ValueLaw = ValueLaw::TruncatedLogNormal { mu: 0.1, second: 1.69, scale: LogScale::Variance };

    pub fn by_name(name: &str, scale: LogScale) -> Option<Self> {
        match name {
            "uniform" => Some(ValueLaw::Uniform),
            "normal" | "truncated-normal" | "truncated_normal" => Some(Self::NORMAL),
            "lognormal" | "truncated-lognormal" | "truncated_lognormal" => {
                Some(ValueLaw::TruncatedLogNormal { mu: 0.1, second: 1.69, scale })
            }
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ValueLaw::Uniform => "uniform",
            ValueLaw::TruncatedNormal { .. } => "normal",
            ValueLaw::TruncatedLogNormal { .. } => "lognormal",
        }
    }
}

/// Draws one value and reports how many proposals it took.
pub fn sample_value_counted<R: Rng + ?Sized>(law: &ValueLaw, rng: &mut R) -> (f64, u32) {
    match *law {
        ValueLaw::Uniform => (rng.gen::<f64>(), 1),
        ValueLaw::TruncatedNormal { mean, variance } => {
            let normal = Normal::new(mean, variance.sqrt()).expect("valid normal");
            reject(|| normal.sample(rng))
        }
        ValueLaw::TruncatedLogNormal { mu, second, scale } => {
            let sigma = match scale {
                LogScale::Variance => second.sqrt(),
                LogScale::StdDev => second,
            };
            let normal = Normal::new(mu, sigma).expect("valid lognormal");
            reject(|| normal.sample(rng).exp())
        }
    }
}

fn reject(mut draw: impl FnMut() -> f64) -> (f64, u32) {
    let mut tries = 0;
    loop {
        tries += 1;
        let v = draw();
        if (0.0..=1.0).contains(&v) {
            return (v, tries);
        }
    }
}

pub fn sample_value<R: Rng + ?Sized>(law: &ValueLaw, rng: &mut R) -> f64 {
    sample_value_counted(law, rng).0
}

/// Everything needed to draw synthetic samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub preset: Preset,
    pub law: ValueLaw,
    /// Probability that a (store, brand) pair is linked.
    pub density: f64,
    /// Quality factors are uniform on this interval.
    pub alpha_range: (f64, f64),
}

impl PopulationSpec {
    pub fn new(preset: Preset, law: ValueLaw, density: f64) -> Self {
        Self { preset, law, density, alpha_range: (0.5, 1.5) }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(format!("adjacency density must lie in (0,1], got {}", self.density));
        }
        let (lo, hi) = self.alpha_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(format!("invalid quality-factor range ({lo}, {hi})"));
        }
        Ok(())
    }
}

pub fn sample_instance<R: Rng + ?Sized>(spec: &PopulationSpec, rng: &mut R) -> AuctionInstance {
    let (m, n, _) = spec.preset.dims();
    let (lo, hi) = spec.alpha_range;
    let alphas: Vec<f64> = (0..m).map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo }).collect();
    let adjacency: Vec<Vec<bool>> = (0..m).map(|_| (0..n).map(|_| rng.gen_bool(spec.density)).collect()).collect();
    AuctionInstance::new(alphas, adjacency).expect("generated instance is valid")
}

pub fn sample<R: Rng + ?Sized>(spec: &PopulationSpec, rng: &mut R) -> Sample {
    let (m, n, _) = spec.preset.dims();
    let instance = sample_instance(spec, rng);
    let values: Vec<f64> = (0..m + n).map(|_| sample_value(&spec.law, rng)).collect();
    Sample { instance, values: BidProfile::from_agents(&values, m).expect("values in [0,1]") }
}

pub fn generate<R: Rng + ?Sized>(spec: &PopulationSpec, count: usize, rng: &mut R) -> Vec<Sample> {
    (0..count).map(|_| sample(spec, rng)).collect()
}

/// Inclusive range that reports (and misreports) are confined to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueDomain {
    pub lo: f64,
    pub hi: f64,
}

impl ValueDomain {
    pub const UNIT: ValueDomain = ValueDomain { lo: 0.0, hi: 1.0 };

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}
