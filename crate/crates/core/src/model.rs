//! Auction scenario, per-sample instances, bid transforms and outcomes.
//!
//! Agents are indexed densely with stores first (`0..m`) and brands after
//! (`m..m+n`). Store and brand indices are 0-based here; external formats
//! that number them from 1 convert at the boundary.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid bids: {0}")]
    InvalidBids(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Static scenario shared by every sample of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuctionSetting {
    stores: usize,
    brands: usize,
    cap: usize,
    ctrs: Vec<f64>,
}

impl AuctionSetting {
    /// `ctrs` are the slot click-through rates, strictly inside (0, 1) and
    /// non-increasing; their length is the slot count. `cap` bounds the
    /// number of slots given to bundles.
    pub fn new(stores: usize, brands: usize, cap: usize, ctrs: Vec<f64>) -> Result<Self> {
        if ctrs.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(ModelError::InvalidSetting(format!("slot CTRs must lie in (0,1): {ctrs:?}")));
        }
        if ctrs.windows(2).any(|w| w[1] > w[0]) {
            return Err(ModelError::InvalidSetting(format!("slot CTRs must be non-increasing: {ctrs:?}")));
        }
        if cap > ctrs.len() {
            return Err(ModelError::InvalidSetting(format!("cap {cap} exceeds slot count {}", ctrs.len())));
        }
        Ok(Self { stores, brands, cap, ctrs })
    }

    pub fn stores(&self) -> usize {
        self.stores
    }

    pub fn brands(&self) -> usize {
        self.brands
    }

    pub fn slots(&self) -> usize {
        self.ctrs.len()
    }

    pub fn agents(&self) -> usize {
        self.stores + self.brands
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn ctrs(&self) -> &[f64] {
        &self.ctrs
    }

    /// Same scenario with a different bundle cap.
    pub fn with_cap(&self, cap: usize) -> Result<Self> {
        Self::new(self.stores, self.brands, cap, self.ctrs.clone())
    }

    /// Size of the fixed bundle grid, one cell per (store, brand) pair.
    pub fn max_bundles(&self) -> usize {
        self.stores * self.brands
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bundle {
    pub store: usize,
    pub brand: usize,
}

/// Row-major list of every `(store, brand)` pair with a 1 in `adjacency`.
pub fn enumerate_bundles(adjacency: &[Vec<bool>]) -> Vec<Bundle> {
    adjacency
        .iter()
        .enumerate()
        .flat_map(|(store, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, &linked)| linked)
                .map(move |(brand, _)| Bundle { store, brand })
        })
        .collect()
}

/// Per-sample randomness: store quality factors and the store–brand
/// relationship matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance")]
pub struct AuctionInstance {
    alphas: Vec<f64>,
    adjacency: Vec<Vec<bool>>,
    #[serde(skip)]
    bundles: Vec<Bundle>,
}

#[derive(Deserialize)]
struct RawInstance {
    alphas: Vec<f64>,
    adjacency: Vec<Vec<bool>>,
}

impl TryFrom<RawInstance> for AuctionInstance {
    type Error = ModelError;
    fn try_from(raw: RawInstance) -> Result<Self> {
        Self::new(raw.alphas, raw.adjacency)
    }
}

impl AuctionInstance {
    pub fn new(alphas: Vec<f64>, adjacency: Vec<Vec<bool>>) -> Result<Self> {
        if let Some(bad) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(ModelError::InvalidInstance(format!("quality factor must be positive, got {bad}")));
        }
        if adjacency.len() != alphas.len() {
            return Err(ModelError::DimensionMismatch {
                what: "adjacency rows",
                expected: alphas.len(),
                got: adjacency.len(),
            });
        }
        if let Some(first) = adjacency.first() {
            if let Some(row) = adjacency.iter().find(|r| r.len() != first.len()) {
                return Err(ModelError::DimensionMismatch {
                    what: "adjacency columns",
                    expected: first.len(),
                    got: row.len(),
                });
            }
        }
        let bundles = enumerate_bundles(&adjacency);
        Ok(Self { alphas, adjacency, bundles })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    pub fn linked(&self, store: usize, brand: usize) -> bool {
        self.adjacency[store][brand]
    }

    pub fn bundles(&self) -> &[Bundle] {
        &self.bundles
    }

    pub fn stores(&self) -> usize {
        self.alphas.len()
    }

    pub fn brands(&self) -> usize {
        self.adjacency.first().map_or(0, Vec::len)
    }

    pub fn check_against(&self, setting: &AuctionSetting) -> Result<()> {
        if self.stores() != setting.stores() {
            return Err(ModelError::DimensionMismatch {
                what: "stores",
                expected: setting.stores(),
                got: self.stores(),
            });
        }
        if setting.stores() > 0 && self.brands() != setting.brands() {
            return Err(ModelError::DimensionMismatch {
                what: "brands",
                expected: setting.brands(),
                got: self.brands(),
            });
        }
        Ok(())
    }
}

/// Per-click bids (or values) for every store and brand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidProfile {
    stores: Vec<f64>,
    brands: Vec<f64>,
}

/// True per-click values share the bid profile's shape.
pub type ValueProfile = BidProfile;

impl BidProfile {
    pub fn new(stores: Vec<f64>, brands: Vec<f64>) -> Result<Self> {
        if let Some(bad) = stores.iter().chain(&brands).find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(ModelError::InvalidBids(format!("bids must be finite and non-negative, got {bad}")));
        }
        Ok(Self { stores, brands })
    }

    /// Splits a stores-then-brands vector.
    pub fn from_agents(agents: &[f64], stores: usize) -> Result<Self> {
        if stores > agents.len() {
            return Err(ModelError::DimensionMismatch { what: "agents", expected: stores, got: agents.len() });
        }
        Self::new(agents[..stores].to_vec(), agents[stores..].to_vec())
    }

    pub fn stores(&self) -> &[f64] {
        &self.stores
    }

    pub fn brands(&self) -> &[f64] {
        &self.brands
    }

    /// Stores then brands.
    pub fn agents(&self) -> Vec<f64> {
        self.stores.iter().chain(&self.brands).copied().collect()
    }

    pub fn agent(&self, agent: usize) -> f64 {
        if agent < self.stores.len() {
            self.stores[agent]
        } else {
            self.brands[agent - self.stores.len()]
        }
    }

    /// The profile with one agent's report replaced.
    pub fn with_agent(&self, agent: usize, bid: f64) -> Self {
        let mut out = self.clone();
        if agent < out.stores.len() {
            out.stores[agent] = bid;
        } else {
            let m = out.stores.len();
            out.brands[agent - m] = bid;
        }
        out
    }

    pub fn check_against(&self, setting: &AuctionSetting) -> Result<()> {
        if self.stores.len() != setting.stores() {
            return Err(ModelError::DimensionMismatch {
                what: "store bids",
                expected: setting.stores(),
                got: self.stores.len(),
            });
        }
        if self.brands.len() != setting.brands() {
            return Err(ModelError::DimensionMismatch {
                what: "brand bids",
                expected: setting.brands(),
                got: self.brands.len(),
            });
        }
        Ok(())
    }
}

/// Bids scaled to expected per-slot amounts.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedBids {
    /// `θ_k · b_i` for store `i` as part of a bundle.
    pub q_store: Array2<f64>,
    /// `θ_k · b_j` for brand `j`.
    pub q_brand: Array2<f64>,
    /// `θ_k · b_i · α_i` for store `i` displayed alone.
    pub q_store_solo: Array2<f64>,
}

pub fn expected_bids(setting: &AuctionSetting, instance: &AuctionInstance, bids: &BidProfile) -> Result<ExpectedBids> {
    instance.check_against(setting)?;
    bids.check_against(setting)?;
    let theta = setting.ctrs();
    let k = theta.len();
    let q_store = Array2::from_shape_fn((setting.stores(), k), |(i, s)| theta[s] * bids.stores[i]);
    let q_brand = Array2::from_shape_fn((setting.brands(), k), |(j, s)| theta[s] * bids.brands[j]);
    let q_store_solo =
        Array2::from_shape_fn((setting.stores(), k), |(i, s)| theta[s] * bids.stores[i] * instance.alphas[i]);
    Ok(ExpectedBids { q_store, q_brand, q_store_solo })
}

/// Quasi-linear utility `v·g − p`.
pub fn utility(value: f64, expected_ctr: f64, payment: f64) -> f64 {
    value * expected_ctr - payment
}

/// Allocation weights (stores first, then brands; one column per slot) and
/// per-agent payments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismOutcome {
    pub allocation: Array2<f64>,
    pub payments: Vec<f64>,
}

impl MechanismOutcome {
    /// `Σ_k a_{agent,k} θ_k`. For stores this includes the α-weighted solo
    /// share, so it can exceed 1.
    pub fn expected_ctr(&self, agent: usize, ctrs: &[f64]) -> f64 {
        self.allocation.row(agent).iter().zip(ctrs).map(|(a, t)| a * t).sum()
    }

    pub fn utility(&self, agent: usize, value: f64, ctrs: &[f64]) -> f64 {
        utility(value, self.expected_ctr(agent, ctrs), self.payments[agent])
    }

    pub fn revenue(&self) -> f64 {
        self.payments.iter().sum()
    }

    /// `Σ_agents Σ_k a θ v`.
    pub fn welfare(&self, values: &ValueProfile, ctrs: &[f64]) -> f64 {
        values.agents().iter().enumerate().map(|(a, v)| v * self.expected_ctr(a, ctrs)).sum()
    }
}

/// One auction draw: instance plus the agents' true values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub instance: AuctionInstance,
    pub values: ValueProfile,
}
