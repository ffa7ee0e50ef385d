//! Text schema for external auction logs.
//!
//! ```text
//! # comments and blank lines are ignored
//! auction,<auction id>,<K>,<θ_1;θ_2;...;θ_K>
//! store,<store id>,<bid>,<alpha>[,<solo ctr>]
//! brand,<brand id>,<bid>
//! bundle,<store id>,<brand id>[,<bundle ctr>]
//! ```
//!
//! Each `auction` line opens a record group. Agent lines must precede the
//! bundle lines that reference them. Every auction is brought to a fixed
//! shape: missing stores and brands are padded with zero-value agents that
//! have no links, and surplus ones are trimmed keeping the highest bidders.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{AuctionInstance, AuctionSetting, BidProfile};

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: unknown {role} id {id:?}")]
    UnknownAgent { line: usize, role: &'static str, id: String },
}

/// Target shape of every ingested auction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    pub stores: usize,
    pub brands: usize,
    pub slots: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { stores: 10, brands: 10, slots: 5 }
    }
}

/// Per-candidate CTR predictions carried by a log. They are kept for
/// inspection but the mechanisms use the slot CTRs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CtrOverrides {
    /// Indexed by (padded) store.
    pub solo: Vec<Option<f64>>,
    /// `(store, brand, ctr)` over padded indices.
    pub bundles: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestedAuction {
    pub id: String,
    pub setting: AuctionSetting,
    pub instance: AuctionInstance,
    /// Logged bids, used as per-click values.
    pub bids: BidProfile,
    pub ctr_overrides: CtrOverrides,
}

struct RawStore {
    id: String,
    bid: f64,
    alpha: f64,
    ctr: Option<f64>,
}

struct RawBrand {
    id: String,
    bid: f64,
}

struct RawAuction {
    line: usize,
    id: String,
    ctrs: Vec<f64>,
    stores: Vec<RawStore>,
    brands: Vec<RawBrand>,
    links: Vec<(usize, usize, Option<f64>)>,
}

fn malformed(line: usize, reason: impl Into<String>) -> IngestError {
    IngestError::Malformed { line, reason: reason.into() }
}

fn number(line: usize, field: &str, what: &str) -> Result<f64, IngestError> {
    let v: f64 = field.trim().parse().map_err(|_| malformed(line, format!("{what} {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(line, format!("{what} must be finite")));
    }
    Ok(v)
}

fn arity(line: usize, fields: &[&str], allowed: &[usize]) -> Result<(), IngestError> {
    if allowed.contains(&fields.len()) {
        Ok(())
    } else {
        Err(malformed(line, format!("{} record has {} fields", fields[0], fields.len())))
    }
}

/// Parses a whole log. An empty log yields no auctions.
pub fn ingest_log(text: &str, options: IngestOptions) -> Result<Vec<IngestedAuction>, IngestError> {
    let mut raw: Vec<RawAuction> = Vec::new();
    for (idx, full) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = full.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        match fields[0] {
            "auction" => {
                arity(line, &fields, &[4])?;
                let k: usize = fields[2].parse().map_err(|_| malformed(line, format!("slot count {:?} is not an integer", fields[2])))?;
                let ctrs = fields[3]
                    .split(';')
                    .map(|t| number(line, t, "slot CTR"))
                    .collect::<Result<Vec<_>, _>>()?;
                if ctrs.len() != k {
                    return Err(malformed(line, format!("header declares {k} slots but lists {} CTRs", ctrs.len())));
                }
                if k != options.slots {
                    return Err(malformed(line, format!("auction has {k} slots, expected {}", options.slots)));
                }
                if raw.iter().any(|a| a.id == fields[1]) {
                    return Err(malformed(line, format!("duplicate auction id {:?}", fields[1])));
                }
                raw.push(RawAuction {
                    line,
                    id: fields[1].to_string(),
                    ctrs,
                    stores: Vec::new(),
                    brands: Vec::new(),
                    links: Vec::new(),
                });
            }
            role @ ("store" | "brand" | "bundle") => {
                let current = raw.last_mut().ok_or_else(|| malformed(line, format!("{role} record before any auction header")))?;
                match role {
                    "store" => {
                        arity(line, &fields, &[4, 5])?;
                        let bid = number(line, fields[2], "bid")?;
                        let alpha = number(line, fields[3], "quality factor")?;
                        if bid < 0.0 {
                            return Err(malformed(line, "bid must be non-negative"));
                        }
                        if alpha <= 0.0 {
                            return Err(malformed(line, "quality factor must be positive"));
                        }
                        let ctr = fields.get(4).map(|f| number(line, f, "CTR")).transpose()?;
                        if current.stores.iter().any(|s| s.id == fields[1]) {
                            return Err(malformed(line, format!("duplicate store id {:?}", fields[1])));
                        }
                        current.stores.push(RawStore { id: fields[1].to_string(), bid, alpha, ctr });
                    }
                    "brand" => {
                        arity(line, &fields, &[3])?;
                        let bid = number(line, fields[2], "bid")?;
                        if bid < 0.0 {
                            return Err(malformed(line, "bid must be non-negative"));
                        }
                        if current.brands.iter().any(|b| b.id == fields[1]) {
                            return Err(malformed(line, format!("duplicate brand id {:?}", fields[1])));
                        }
                        current.brands.push(RawBrand { id: fields[1].to_string(), bid });
                    }
                    _ => {
                        arity(line, &fields, &[3, 4])?;
                        let store = current.stores.iter().position(|s| s.id == fields[1]).ok_or_else(|| {
                            IngestError::UnknownAgent { line, role: "store", id: fields[1].to_string() }
                        })?;
                        let brand = current.brands.iter().position(|b| b.id == fields[2]).ok_or_else(|| {
                            IngestError::UnknownAgent { line, role: "brand", id: fields[2].to_string() }
                        })?;
                        let ctr = fields.get(3).map(|f| number(line, f, "CTR")).transpose()?;
                        current.links.push((store, brand, ctr));
                    }
                }
            }
            other => return Err(malformed(line, format!("unknown record type {other:?}"))),
        }
    }
    raw.into_iter().map(|a| normalize(a, options)).collect()
}

/// Indices of the `keep` highest bidders, in their original order.
fn keep_top(bids: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..bids.len()).collect();
    order.sort_by(|&a, &b| bids[b].total_cmp(&bids[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

fn normalize(raw: RawAuction, options: IngestOptions) -> Result<IngestedAuction, IngestError> {
    let setting = AuctionSetting::new(options.stores, options.brands, options.slots.min(options.stores * options.brands), raw.ctrs.clone())
        .map_err(|e| malformed(raw.line, e.to_string()))?;
    let store_bids: Vec<f64> = raw.stores.iter().map(|s| s.bid).collect();
    let brand_bids: Vec<f64> = raw.brands.iter().map(|b| b.bid).collect();
    let kept_stores = keep_top(&store_bids, options.stores);
    let kept_brands = keep_top(&brand_bids, options.brands);
    let store_slot: HashMap<usize, usize> = kept_stores.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let brand_slot: HashMap<usize, usize> = kept_brands.iter().enumerate().map(|(new, &old)| (old, new)).collect();

    let mut alphas = vec![1.0; options.stores];
    let mut stores = vec![0.0; options.stores];
    let mut solo = vec![None; options.stores];
    for (new, &old) in kept_stores.iter().enumerate() {
        alphas[new] = raw.stores[old].alpha;
        stores[new] = raw.stores[old].bid;
        solo[new] = raw.stores[old].ctr;
    }
    let mut brands = vec![0.0; options.brands];
    for (new, &old) in kept_brands.iter().enumerate() {
        brands[new] = raw.brands[old].bid;
    }
    let mut adjacency = vec![vec![false; options.brands]; options.stores];
    let mut bundle_ctrs = Vec::new();
    for &(s, b, ctr) in &raw.links {
        if let (Some(&i), Some(&j)) = (store_slot.get(&s), brand_slot.get(&b)) {
            adjacency[i][j] = true;
            if let Some(c) = ctr {
                bundle_ctrs.push((i, j, c));
            }
        }
    }
    let instance = AuctionInstance::new(alphas, adjacency).map_err(|e| malformed(raw.line, e.to_string()))?;
    let bids = BidProfile::new(stores, brands).map_err(|e| malformed(raw.line, e.to_string()))?;
    Ok(IngestedAuction { id: raw.id, setting, instance, bids, ctr_overrides: CtrOverrides { solo, bundles: bundle_ctrs } })
}

/// Writes auctions back in the log schema. Padding agents (zero bid, no
/// links) are omitted, so ingesting the output reproduces the input.
pub fn write_log(auctions: &[IngestedAuction]) -> String {
    let mut out = String::new();
    for a in auctions {
        let ctrs: Vec<String> = a.setting.ctrs().iter().map(|t| format!("{t:?}")).collect();
        let _ = writeln!(out, "auction,{},{},{}", a.id, a.setting.slots(), ctrs.join(";"));
        let bundles = a.instance.bundles();
        let store_used = |i: usize| a.bids.stores()[i] > 0.0 || bundles.iter().any(|b| b.store == i) || a.ctr_overrides.solo.get(i).copied().flatten().is_some();
        let brand_used = |j: usize| a.bids.brands()[j] > 0.0 || bundles.iter().any(|b| b.brand == j);
        for i in (0..a.setting.stores()).filter(|&i| store_used(i)) {
            let _ = write!(out, "store,s{},{:?},{:?}", i + 1, a.bids.stores()[i], a.instance.alphas()[i]);
            if let Some(c) = a.ctr_overrides.solo.get(i).copied().flatten() {
                let _ = write!(out, ",{c:?}");
            }
            out.push('\n');
        }
        for j in (0..a.setting.brands()).filter(|&j| brand_used(j)) {
            let _ = writeln!(out, "brand,b{},{:?}", j + 1, a.bids.brands()[j]);
        }
        for b in bundles {
            let _ = write!(out, "bundle,s{},b{}", b.store + 1, b.brand + 1);
            if let Some(&(_, _, c)) = a.ctr_overrides.bundles.iter().find(|(i, j, _)| *i == b.store && *j == b.brand) {
                let _ = write!(out, ",{c:?}");
            }
            out.push('\n');
        }
    }
    out
}
