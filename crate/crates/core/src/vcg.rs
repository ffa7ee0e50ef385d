//! Welfare-maximizing hybrid allocation with Clarke pivot payments.
//!
//! Every solo store and every linked bundle is a candidate occupying at most
//! one slot. Feasible selections are those with at most `K` candidates of
//! which at most `C` are bundles. The budgets are nested, so picking
//! candidates greedily by weight is exact; winners are then placed in slots
//! by descending weight.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::{AuctionInstance, AuctionSetting, BidProfile, Bundle, MechanismOutcome, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CandidateKind {
    Solo { store: usize },
    Bundle(Bundle),
}

impl CandidateKind {
    pub fn is_bundle(&self) -> bool {
        matches!(self, CandidateKind::Bundle(_))
    }

    /// Whether `agent` (stores first, then brands) takes part in this candidate.
    pub fn involves(&self, agent: usize, stores: usize) -> bool {
        match *self {
            CandidateKind::Solo { store } => store == agent,
            CandidateKind::Bundle(b) => b.store == agent || stores + b.brand == agent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: CandidateKind,
    /// Per-click welfare weight: `α_i·b_i` solo, `b_i + b_j` for a bundle.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcgOutcome {
    /// One entry per slot, best slot first.
    pub assignment: Vec<Option<CandidateKind>>,
    pub welfare: f64,
    /// Stores then brands.
    pub payments: Vec<f64>,
}

/// All candidates, solo stores first then bundles in row-major order.
pub fn candidates(instance: &AuctionInstance, bids: &BidProfile) -> Vec<Candidate> {
    let solo = instance.alphas().iter().enumerate().map(|(store, alpha)| Candidate {
        kind: CandidateKind::Solo { store },
        weight: alpha * bids.stores()[store],
    });
    let bundles = instance.bundles().iter().map(|&b| Candidate {
        kind: CandidateKind::Bundle(b),
        weight: bids.stores()[b.store] + bids.brands()[b.brand],
    });
    solo.chain(bundles).collect()
}

/// Weight descending, then solo before bundle, then lowest index.
fn greedy_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.weight.partial_cmp(&a.weight).unwrap_or(Ordering::Equal).then_with(|| match (a.kind, b.kind) {
        (CandidateKind::Solo { store: x }, CandidateKind::Solo { store: y }) => x.cmp(&y),
        (CandidateKind::Solo { .. }, CandidateKind::Bundle(_)) => Ordering::Less,
        (CandidateKind::Bundle(_), CandidateKind::Solo { .. }) => Ordering::Greater,
        (CandidateKind::Bundle(x), CandidateKind::Bundle(y)) => x.cmp(&y),
    })
}

/// Greedy selection under `{≤ slots total, ≤ cap bundles}`, returned in
/// slot order. Zero-weight candidates are never selected.
fn select(mut pool: Vec<Candidate>, slots: usize, cap: usize) -> Vec<Candidate> {
    pool.sort_by(greedy_order);
    let mut chosen = Vec::with_capacity(slots);
    let mut bundles = 0;
    for c in pool {
        if chosen.len() == slots {
            break;
        }
        if c.weight <= 0.0 {
            break;
        }
        if c.kind.is_bundle() {
            if bundles == cap {
                continue;
            }
            bundles += 1;
        }
        chosen.push(c);
    }
    chosen
}

fn welfare_of(chosen: &[Candidate], ctrs: &[f64]) -> f64 {
    chosen.iter().zip(ctrs).map(|(c, t)| t * c.weight).sum()
}

pub fn welfare_max_allocation(
    setting: &AuctionSetting,
    instance: &AuctionInstance,
    bids: &BidProfile,
) -> Result<(Vec<Option<CandidateKind>>, f64)> {
    instance.check_against(setting)?;
    bids.check_against(setting)?;
    let chosen = select(candidates(instance, bids), setting.slots(), setting.cap());
    let welfare = welfare_of(&chosen, setting.ctrs());
    let mut assignment: Vec<Option<CandidateKind>> = chosen.iter().map(|c| Some(c.kind)).collect();
    assignment.resize(setting.slots(), None);
    Ok((assignment, welfare))
}

/// Reported welfare that `agent` itself receives from `assignment`.
fn own_share(
    setting: &AuctionSetting,
    instance: &AuctionInstance,
    bids: &BidProfile,
    assignment: &[Option<CandidateKind>],
    agent: usize,
) -> f64 {
    let m = setting.stores();
    assignment
        .iter()
        .zip(setting.ctrs())
        .filter_map(|(slot, &theta)| {
            slot.map(|kind| match kind {
                CandidateKind::Solo { store } if store == agent => theta * instance.alphas()[store] * bids.stores()[store],
                CandidateKind::Bundle(b) if b.store == agent => theta * bids.stores()[b.store],
                CandidateKind::Bundle(b) if m + b.brand == agent => theta * bids.brands()[b.brand],
                _ => 0.0,
            })
        })
        .sum()
}

/// Clarke pivot payments: the welfare the others would get without the
/// agent, minus what they get under `assignment`.
///
/// A store's presence can raise the others' welfare (its bundles carry
/// brands), so a payment may be negative. It is not clamped: clamping would
/// let such a store gain by misreporting.
pub fn clarke_payments(
    setting: &AuctionSetting,
    instance: &AuctionInstance,
    bids: &BidProfile,
    assignment: &[Option<CandidateKind>],
) -> Result<Vec<f64>> {
    instance.check_against(setting)?;
    bids.check_against(setting)?;
    let m = setting.stores();
    let pool = candidates(instance, bids);
    let welfare: f64 = assignment
        .iter()
        .zip(setting.ctrs())
        .filter_map(|(slot, theta)| {
            slot.map(|kind| theta * pool.iter().find(|c| c.kind == kind).map_or(0.0, |c| c.weight))
        })
        .sum();
    Ok((0..setting.agents())
        .map(|agent| {
            let wins = assignment.iter().flatten().any(|k| k.involves(agent, m));
            if !wins {
                return 0.0;
            }
            let without: Vec<Candidate> = pool.iter().copied().filter(|c| !c.kind.involves(agent, m)).collect();
            let alt = welfare_of(&select(without, setting.slots(), setting.cap()), setting.ctrs());
            let others = welfare - own_share(setting, instance, bids, assignment, agent);
            alt - others
        })
        .collect())
}

/// Allocation matrix view of an integral assignment: a solo store in slot
/// `k` gets `α_i`, each member of a bundle gets 1.
pub fn allocation_matrix(setting: &AuctionSetting, instance: &AuctionInstance, assignment: &[Option<CandidateKind>]) -> Array2<f64> {
    let m = setting.stores();
    let mut a = Array2::zeros((setting.agents(), setting.slots()));
    for (k, slot) in assignment.iter().enumerate() {
        match slot {
            Some(CandidateKind::Solo { store }) => a[[*store, k]] += instance.alphas()[*store],
            Some(CandidateKind::Bundle(b)) => {
                a[[b.store, k]] += 1.0;
                a[[m + b.brand, k]] += 1.0;
            }
            None => {}
        }
    }
    a
}

/// The full mechanism, plus the outcome in the shared matrix form.
pub fn vcg_mechanism(
    setting: &AuctionSetting,
    instance: &AuctionInstance,
    bids: &BidProfile,
) -> Result<(VcgOutcome, MechanismOutcome)> {
    let (assignment, welfare) = welfare_max_allocation(setting, instance, bids)?;
    let payments = clarke_payments(setting, instance, bids, &assignment)?;
    let view = MechanismOutcome { allocation: allocation_matrix(setting, instance, &assignment), payments: payments.clone() };
    Ok((VcgOutcome { assignment, welfare, payments }, view))
}
