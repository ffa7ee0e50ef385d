//! Shared helpers for integration tests: random small auctions and an
//! exhaustive VCG oracle that enumerates every slot assignment.
#![allow(dead_code)]

use hybrid_auction::model::{AuctionInstance, AuctionSetting, BidProfile};
use rand::Rng;

/// What fills one slot in the oracle's own encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Item {
    Solo(usize),
    Pair(usize, usize),
}

pub struct SmallAuction {
    pub setting: AuctionSetting,
    pub instance: AuctionInstance,
    pub bids: BidProfile,
}

/// Random auction with at most 3 stores, 3 brands and 3 slots. With
/// `dyadic`, every number is a short binary fraction so all welfare sums
/// are exact in floating point.
pub fn random_auction<R: Rng>(rng: &mut R, dyadic: bool) -> SmallAuction {
    let m = rng.gen_range(1..=3);
    let n = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let cap = rng.gen_range(0..=k);
    let mut ctrs: Vec<f64> = (0..k)
        .map(|_| if dyadic { rng.gen_range(1..=15) as f64 / 16.0 } else { rng.gen_range(0.01..0.99) })
        .collect();
    ctrs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let value = |rng: &mut R| if dyadic { rng.gen_range(0..=32) as f64 / 32.0 } else { rng.gen::<f64>() };
    let alphas = (0..m).map(|_| if dyadic { rng.gen_range(2..=6) as f64 / 4.0 } else { rng.gen_range(0.5..1.5) }).collect();
    let density = rng.gen_range(0.2..1.0);
    let adjacency = (0..m).map(|_| (0..n).map(|_| rng.gen_bool(density)).collect()).collect();
    let stores = (0..m).map(|_| value(rng)).collect();
    let brands = (0..n).map(|_| value(rng)).collect();
    SmallAuction {
        setting: AuctionSetting::new(m, n, cap, ctrs).unwrap(),
        instance: AuctionInstance::new(alphas, adjacency).unwrap(),
        bids: BidProfile::new(stores, brands).unwrap(),
    }
}

fn items(instance: &AuctionInstance, excluded: Option<usize>) -> Vec<Item> {
    let m = instance.stores();
    let mut out = Vec::new();
    for i in 0..m {
        if excluded != Some(i) {
            out.push(Item::Solo(i));
        }
    }
    for i in 0..m {
        for j in 0..instance.brands() {
            if instance.linked(i, j) && excluded != Some(i) && excluded != Some(m + j) {
                out.push(Item::Pair(i, j));
            }
        }
    }
    out
}

fn weight(item: Item, instance: &AuctionInstance, bids: &BidProfile) -> f64 {
    match item {
        Item::Solo(i) => instance.alphas()[i] * bids.stores()[i],
        Item::Pair(i, j) => bids.stores()[i] + bids.brands()[j],
    }
}

/// Best welfare over every injective partial assignment of items to slots
/// with at most `cap` pairs, and one assignment attaining it.
pub fn brute_force(
    setting: &AuctionSetting,
    instance: &AuctionInstance,
    bids: &BidProfile,
    excluded: Option<usize>,
) -> (f64, Vec<Option<Item>>) {
    let pool = items(instance, excluded);
    let mut best = (0.0, vec![None; setting.slots()]);
    let mut current = vec![None; setting.slots()];
    let mut used = vec![false; pool.len()];
    #[allow(clippy::too_many_arguments)]
    fn go(
        slot: usize,
        pairs: usize,
        acc: f64,
        setting: &AuctionSetting,
        pool: &[Item],
        weights: &[f64],
        used: &mut Vec<bool>,
        current: &mut Vec<Option<Item>>,
        best: &mut (f64, Vec<Option<Item>>),
    ) {
        if slot == setting.slots() {
            if acc > best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        current[slot] = None;
        go(slot + 1, pairs, acc, setting, pool, weights, used, current, best);
        for (c, item) in pool.iter().enumerate() {
            let is_pair = matches!(item, Item::Pair(..));
            if used[c] || (is_pair && pairs == setting.cap()) {
                continue;
            }
            used[c] = true;
            current[slot] = Some(*item);
            let next = acc + setting.ctrs()[slot] * weights[c];
            go(slot + 1, pairs + is_pair as usize, next, setting, pool, weights, used, current, best);
            used[c] = false;
        }
        current[slot] = None;
    }
    let weights: Vec<f64> = pool.iter().map(|&it| weight(it, instance, bids)).collect();
    go(0, 0, 0.0, setting, &pool, &weights, &mut used, &mut current, &mut best);
    best
}

/// Reported value `agent` itself derives from an assignment.
pub fn own_value(setting: &AuctionSetting, instance: &AuctionInstance, bids: &BidProfile, assignment: &[Option<Item>], agent: usize) -> f64 {
    let m = setting.stores();
    assignment
        .iter()
        .zip(setting.ctrs())
        .map(|(slot, t)| match *slot {
            Some(Item::Solo(i)) if i == agent => t * instance.alphas()[i] * bids.stores()[i],
            Some(Item::Pair(i, _)) if i == agent => t * bids.stores()[i],
            Some(Item::Pair(_, j)) if m + j == agent => t * bids.brands()[j],
            _ => 0.0,
        })
        .sum()
}

/// Clarke payments computed from scratch with the exhaustive solver.
pub fn brute_force_clarke(setting: &AuctionSetting, instance: &AuctionInstance, bids: &BidProfile) -> Vec<f64> {
    let (welfare, assignment) = brute_force(setting, instance, bids, None);
    (0..setting.agents())
        .map(|a| {
            let own = own_value(setting, instance, bids, &assignment, a);
            let involved = assignment.iter().flatten().any(|it| match *it {
                Item::Solo(i) => i == a,
                Item::Pair(i, j) => i == a || setting.stores() + j == a,
            });
            if !involved {
                return 0.0;
            }
            let (without, _) = brute_force(setting, instance, bids, Some(a));
            without - (welfare - own)
        })
        .collect()
}

// --- learned-mechanism properties ---------------------------------------

use hybrid_auction::engine::Matrix;
use hybrid_auction::network::{build_graph, BatchInputs, GradMode, NetworkParams, NetworkShape, SettingTables};

/// Random setting drawn from the benchmark shapes or a small custom one.
pub fn random_setting<R: Rng>(rng: &mut R) -> AuctionSetting {
    let m = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=4);
    let cap = rng.gen_range(0..=k);
    let mut ctrs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..0.95)).collect();
    ctrs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    AuctionSetting::new(m, n, cap, ctrs).unwrap()
}

pub fn random_instance<R: Rng>(rng: &mut R, setting: &AuctionSetting) -> AuctionInstance {
    let density = rng.gen_range(0.0..=1.0);
    let alphas = (0..setting.stores()).map(|_| rng.gen_range(0.5..1.5)).collect();
    let adjacency = (0..setting.stores()).map(|_| (0..setting.brands()).map(|_| rng.gen_bool(density)).collect()).collect();
    AuctionInstance::new(alphas, adjacency).unwrap()
}

/// Untrained weights scaled by `gain` so logits reach extreme values.
pub fn random_params<R: Rng>(rng: &mut R, setting: &AuctionSetting, hidden: usize, gain: f64) -> NetworkParams {
    let shape = NetworkShape::for_setting(setting, hidden, hidden / 2 + 1);
    let mut params = NetworkParams::init(shape, rng);
    for block in params.blocks_mut() {
        block.mapv_inplace(|w| w * gain);
        if block.nrows() == 1 {
            block.mapv_inplace(|_| rng.gen_range(-3.0..3.0) * gain);
        }
    }
    params
}

/// Checks every structural guarantee of one batch: doubly sub-stochastic
/// S3, cap layer summing to C, bundle mass within C, masked bundles
/// empty, per-slot and per-candidate feasibility of Z, and IR payments.
pub fn check_outcome_guarantees(
    params: &NetworkParams,
    setting: &AuctionSetting,
    instances: &[AuctionInstance],
    bids: &[Vec<f64>],
) -> Result<(), String> {
    let shape = params.shape();
    let tables = SettingTables::new(setting, shape).map_err(|e| e.to_string())?;
    let rows = instances.iter().zip(bids).map(|(i, b)| (i, b.as_slice(), b.as_slice()));
    let batch = BatchInputs::new(shape, rows.collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let (g, nodes) = build_graph(params, &tables, &batch, GradMode::NONE).map_err(|e| e.to_string())?;
    let (m, n, k, cap) = (setting.stores(), setting.brands(), setting.slots(), setting.cap() as f64);
    let r = m * n;
    let per = r + m;
    let s3 = g.value(nodes.s3);
    let hcap = g.value(nodes.cap_layer);
    let z = g.value(nodes.z);
    let alloc = g.value(nodes.allocation);
    let pay = g.value(nodes.payments);
    let tol = 1e-9;
    for (b, inst) in instances.iter().enumerate() {
        let block = s3.slice(ndarray::s![b * per..(b + 1) * per, ..]);
        for row in block.rows() {
            if row.sum() > 1.0 + tol {
                return Err(format!("S3 row sum {}", row.sum()));
            }
        }
        for col in block.columns() {
            if col.sum() > 1.0 + tol {
                return Err(format!("S3 column sum {}", col.sum()));
            }
        }
        let h_total: f64 = hcap.row(b).sum();
        if r * k > 0 && (h_total - cap).abs() > tol {
            return Err(format!("cap layer total {h_total} vs {cap}"));
        }
        let zb = Matrix::from_shape_fn((per, k), |(row, s)| z[[b, row * k + s]]);
        let bundle_mass: f64 = (0..r).map(|c| if inst.linked(c / n, c % n) { zb.row(c).sum() } else { 0.0 }).sum();
        if bundle_mass > cap + tol {
            return Err(format!("bundle mass {bundle_mass} > C = {cap}"));
        }
        for c in 0..r {
            if !inst.linked(c / n, c % n) && zb.row(c).iter().any(|v| *v >= 1e-6) {
                return Err(format!("absent bundle {c} received {:?}", zb.row(c)));
            }
        }
        for s in 0..k {
            let used: f64 = (0..per).filter(|&row| row >= r || inst.linked(row / n, row % n)).map(|row| zb[[row, s]]).sum();
            if used > 1.0 + tol {
                return Err(format!("slot {s} over-allocated: {used}"));
            }
        }
        for row in 0..per {
            if zb.row(row).sum() > 1.0 + tol || zb.row(row).iter().any(|v| *v < 0.0) {
                return Err(format!("candidate row {row} infeasible: {:?}", zb.row(row)));
            }
        }
        for a in 0..m + n {
            let g_a: f64 = (0..k).map(|s| alloc[[b, a * k + s]] * setting.ctrs()[s]).sum();
            let p = pay[[b, a]];
            if p < -tol || p > bids[b][a] * g_a + tol {
                return Err(format!("agent {a}: payment {p} outside [0, {}]", bids[b][a] * g_a));
            }
        }
    }
    Ok(())
}
