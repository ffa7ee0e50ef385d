//! The learned hybrid mechanism: trunks, constraint layers, the Z→A map and
//! the payment head, expressed as one differentiable graph.
//!
//! Everything is batched by rows. Each row of the bid matrix is one complete
//! bid profile; per-sample matrices (`S1`, `S2`, `Z`, `A`) are stored
//! row-major inside a single row and reshaped where a layer needs the 2-D
//! view. Bundles live on a fixed `m·n` grid (`r = i·n + j`) and absent
//! bundles are pushed out by an additive logit mask.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{self, Graph, Matrix, NodeId, SumAxis};
use crate::model::{AuctionInstance, AuctionSetting, BidProfile, ExpectedBids, MechanismOutcome, ModelError};

/// Additive logit applied to absent bundles.
pub const MASK_PENALTY: f64 = 1e9;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Dimensions that fix the parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub stores: usize,
    pub brands: usize,
    pub slots: usize,
    /// Width of the two hidden layers of the bundle/payment trunk.
    pub hidden: usize,
    /// Width of the two hidden layers of the independent-store trunk.
    pub store_hidden: usize,
}

impl NetworkShape {
    pub fn for_setting(setting: &AuctionSetting, hidden: usize, store_hidden: usize) -> Self {
        Self {
            stores: setting.stores(),
            brands: setting.brands(),
            slots: setting.slots(),
            hidden,
            store_hidden,
        }
    }

    pub fn agents(&self) -> usize {
        self.stores + self.brands
    }

    pub fn max_bundles(&self) -> usize {
        self.stores * self.brands
    }

    /// Rows of the per-sample allocation matrices: bundle grid then stores.
    pub fn alloc_rows(&self) -> usize {
        self.max_bundles() + self.stores
    }

    fn bundle_features(&self) -> usize {
        self.agents() * self.slots + self.max_bundles()
    }

    /// (rows, cols) of every parameter block, in storage order.
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        let (h, hs, k) = (self.hidden, self.store_hidden, self.slots);
        let (r, m) = (self.max_bundles(), self.stores);
        vec![
            (self.bundle_features(), h),
            (1, h),
            (h, h),
            (1, h),
            (m * k, hs),
            (1, hs),
            (hs, hs),
            (1, hs),
            (h, r * (k + 1)),
            (1, r * (k + 1)),
            (h, r * (k + 1)),
            (1, r * (k + 1)),
            (hs, m * (k + 1)),
            (1, m * (k + 1)),
            (hs, m * (k + 1)),
            (1, m * (k + 1)),
            (h, r * k),
            (1, r * k),
            (h, self.agents()),
            (1, self.agents()),
        ]
    }
}

/// Indices into [`NetworkParams::blocks`].
mod block {
    pub const TRUNK_W1: usize = 0;
    pub const TRUNK_B1: usize = 1;
    pub const TRUNK_W2: usize = 2;
    pub const TRUNK_B2: usize = 3;
    pub const STORE_W1: usize = 4;
    pub const STORE_B1: usize = 5;
    pub const STORE_W2: usize = 6;
    pub const STORE_B2: usize = 7;
    pub const S1_BUNDLE_W: usize = 8;
    pub const S1_BUNDLE_B: usize = 9;
    pub const S2_BUNDLE_W: usize = 10;
    pub const S2_BUNDLE_B: usize = 11;
    pub const S1_STORE_W: usize = 12;
    pub const S1_STORE_B: usize = 13;
    pub const S2_STORE_W: usize = 14;
    pub const S2_STORE_B: usize = 15;
    pub const CAP_W: usize = 16;
    pub const CAP_B: usize = 17;
    pub const PAY_W: usize = 18;
    pub const PAY_B: usize = 19;
    pub const COUNT: usize = 20;
}

/// All learnable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    shape: NetworkShape,
    blocks: Vec<Matrix>,
}

impl NetworkParams {
    /// Weights ~ N(0, 1/fan_in), offsets zero.
    pub fn init<R: Rng + ?Sized>(shape: NetworkShape, rng: &mut R) -> Self {
        let blocks = shape
            .block_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                if rows == 1 {
                    Matrix::zeros((rows, cols))
                } else {
                    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
                    Matrix::from_shape_simple_fn((rows, cols), || normal.sample(rng))
                }
            })
            .collect();
        Self { shape, blocks }
    }

    pub fn from_blocks(shape: NetworkShape, blocks: Vec<Matrix>) -> Result<Self> {
        let want = shape.block_shapes();
        if blocks.len() != want.len() {
            return Err(NetworkError::Shape(format!("expected {} blocks, got {}", want.len(), blocks.len())));
        }
        for (i, (b, w)) in blocks.iter().zip(&want).enumerate() {
            if b.dim() != *w {
                return Err(NetworkError::Shape(format!("block {i}: expected {w:?}, got {:?}", b.dim())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(NetworkError::Shape(format!("block {i} has non-finite entries")));
            }
        }
        Ok(Self { shape, blocks })
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Matrix] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Matrix::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Constant matrices derived from the setting alone.
#[derive(Clone, Debug)]
pub struct SettingTables {
    shape: NetworkShape,
    cap: f64,
    /// bids (B×agents) → expected bids q (B×agents·K).
    expand_bids: Matrix,
    /// bundle-grid allocations (R·K) → their store's allocation (m·K).
    bundle_to_store: Matrix,
    /// bundle-grid allocations (R·K) → their brand's allocation (n·K).
    bundle_to_brand: Matrix,
    /// allocation (agents·K) → expected CTR g (agents).
    collapse_ctr: Matrix,
}

impl SettingTables {
    pub fn new(setting: &AuctionSetting, shape: NetworkShape) -> Result<Self> {
        if shape.stores != setting.stores() || shape.brands != setting.brands() || shape.slots != setting.slots() {
            return Err(NetworkError::Shape(format!("network {shape:?} does not match setting {setting:?}")));
        }
        let theta = setting.ctrs();
        let (m, n, k) = (shape.stores, shape.brands, shape.slots);
        let agents = m + n;
        let mut expand_bids = Matrix::zeros((agents, agents * k));
        let mut collapse_ctr = Matrix::zeros((agents * k, agents));
        for a in 0..agents {
            for (s, &t) in theta.iter().enumerate() {
                expand_bids[[a, a * k + s]] = t;
                collapse_ctr[[a * k + s, a]] = t;
            }
        }
        let mut bundle_to_store = Matrix::zeros((m * n * k, m * k));
        let mut bundle_to_brand = Matrix::zeros((m * n * k, n * k));
        for i in 0..m {
            for j in 0..n {
                for s in 0..k {
                    let cell = (i * n + j) * k + s;
                    bundle_to_store[[cell, i * k + s]] = 1.0;
                    bundle_to_brand[[cell, j * k + s]] = 1.0;
                }
            }
        }
        Ok(Self {
            shape,
            cap: setting.cap() as f64,
            expand_bids,
            bundle_to_store,
            bundle_to_brand,
            collapse_ctr,
        })
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }
}

/// Per-row data of one batch: bids and values plus the row's instance
/// encoded as constant matrices.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub bids: Matrix,
    pub values: Matrix,
    /// α_i repeated over slots, B×(m·K).
    alpha_slots: Matrix,
    /// Adjacency indicators on the bundle grid, B×R.
    adjacency: Matrix,
    /// Adjacency repeated over slots, B×(R·K).
    adjacency_slots: Matrix,
    keep_s1: Matrix,
    keep_s2: Matrix,
}

impl BatchInputs {
    pub fn rows(&self) -> usize {
        self.bids.nrows()
    }

    /// Builds a batch from `(instance, bids, values)` rows, bids and values
    /// as stores-then-brands slices.
    pub fn new<'a, I>(shape: NetworkShape, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a AuctionInstance, &'a [f64], &'a [f64])>,
        I::IntoIter: ExactSizeIterator,
    {
        let rows = rows.into_iter();
        let b = rows.len();
        let (m, n, k) = (shape.stores, shape.brands, shape.slots);
        let (agents, r) = (m + n, m * n);
        let cols = shape.alloc_rows() * (k + 1);
        let mut out = Self {
            bids: Matrix::zeros((b, agents)),
            values: Matrix::zeros((b, agents)),
            alpha_slots: Matrix::zeros((b, m * k)),
            adjacency: Matrix::zeros((b, r)),
            adjacency_slots: Matrix::zeros((b, r * k)),
            keep_s1: Matrix::ones((b, cols)),
            keep_s2: Matrix::ones((b, cols)),
        };
        for (row, (instance, bids, values)) in rows.enumerate() {
            if instance.stores() != m || (m > 0 && instance.brands() != n) {
                return Err(ModelError::DimensionMismatch { what: "instance", expected: m, got: instance.stores() }.into());
            }
            if bids.len() != agents || values.len() != agents {
                return Err(ModelError::DimensionMismatch { what: "bid row", expected: agents, got: bids.len() }.into());
            }
            for a in 0..agents {
                out.bids[[row, a]] = bids[a];
                out.values[[row, a]] = values[a];
            }
            for (i, alpha) in instance.alphas().iter().enumerate() {
                for s in 0..k {
                    out.alpha_slots[[row, i * k + s]] = *alpha;
                }
            }
            for i in 0..m {
                for j in 0..n {
                    if instance.linked(i, j) {
                        let cell = i * n + j;
                        out.adjacency[[row, cell]] = 1.0;
                        for s in 0..k {
                            out.adjacency_slots[[row, cell * k + s]] = 1.0;
                        }
                    } else {
                        let cell = i * n + j;
                        for s in 0..=k {
                            out.keep_s1[[row, cell * (k + 1) + s]] = 0.0;
                        }
                        // the non-allocation column stays live so S2 mass moves there
                        for s in 0..k {
                            out.keep_s2[[row, cell * (k + 1) + s]] = 0.0;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Replaces the bid matrix, keeping instances and values.
    pub fn with_bids(&self, bids: Matrix) -> Self {
        Self { bids, ..self.clone() }
    }
}

/// Which leaves of the graph carry gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradMode {
    pub params: bool,
    pub bids: bool,
}

impl GradMode {
    pub const NONE: Self = Self { params: false, bids: false };
    pub const PARAMS: Self = Self { params: true, bids: false };
    pub const BIDS: Self = Self { params: false, bids: true };
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub params: Vec<NodeId>,
    pub bids: NodeId,
    pub values: NodeId,
    /// Per-sample (R+m)×K, stacked: B·(R+m) rows.
    pub s3: NodeId,
    /// B×(R·K).
    pub cap_layer: NodeId,
    /// B×((R+m)·K), bundle grid first.
    pub z: NodeId,
    /// B×(agents·K), stores first.
    pub allocation: NodeId,
    /// B×agents.
    pub expected_ctr: NodeId,
    /// B×agents, in (0,1).
    pub fractions: NodeId,
    /// B×agents.
    pub payments: NodeId,
    /// `v·g − p`, B×agents.
    pub utilities: NodeId,
}

/// Column-softmax of `s1` (within blocks of `rows_per_sample`) against
/// row-softmax of `s2`, elementwise minimum, non-allocation column dropped.
/// Inputs are stacked per-sample `(R+m)×(K+1)` logit matrices.
pub fn min_softmax_nodes(g: &mut Graph, s1: NodeId, s2: NodeId, rows_per_sample: usize) -> Result<NodeId> {
    let cols = g.shape(s1).1;
    let by_column = g.column_softmax(s1, rows_per_sample)?;
    let by_row = g.row_softmax(s2)?;
    let both = g.min(by_column, by_row)?;
    Ok(g.slice_cols(both, 0, cols - 1)?)
}

/// `C · softmax` over every cell of each row of `h`.
pub fn cap_nodes(g: &mut Graph, h: NodeId, cap: f64) -> Result<NodeId> {
    let normalized = g.row_softmax(h)?;
    Ok(g.scale(normalized, cap)?)
}

/// Builds the full forward graph for a batch.
pub fn build_graph(
    params: &NetworkParams,
    tables: &SettingTables,
    batch: &BatchInputs,
    mode: GradMode,
) -> Result<(Graph, ForwardNodes)> {
    let shape = tables.shape;
    if params.shape != shape {
        return Err(NetworkError::Shape(format!("params {:?} vs tables {:?}", params.shape, shape)));
    }
    let (m, k) = (shape.stores, shape.slots);
    let (r, rows) = (shape.max_bundles(), shape.alloc_rows());
    let b = batch.rows();

    let mut g = Graph::new();
    let p: Vec<NodeId> = params.blocks.iter().map(|w| g.input(w.clone(), mode.params)).collect();
    debug_assert_eq!(p.len(), block::COUNT);
    let bids = g.input(batch.bids.clone(), mode.bids);
    let values = g.constant(batch.values.clone());
    let expand = g.constant(tables.expand_bids.clone());
    let alpha_slots = g.constant(batch.alpha_slots.clone());
    let adjacency = g.constant(batch.adjacency.clone());
    let adjacency_slots = g.constant(batch.adjacency_slots.clone());
    let keep_s1 = g.constant(batch.keep_s1.clone());
    let keep_s2 = g.constant(batch.keep_s2.clone());

    // inputs: q for every agent, q' for solo stores, adjacency bits
    let q = g.matmul(bids, expand)?;
    let q_store = g.slice_cols(q, 0, m * k)?;
    let q_solo = g.mul(q_store, alpha_slots)?;
    let features = g.concat_cols(&[q, adjacency])?;

    let h1 = g.affine(features, p[block::TRUNK_W1], Some(p[block::TRUNK_B1]))?;
    let h1 = g.tanh(h1)?;
    let h2 = g.affine(h1, p[block::TRUNK_W2], Some(p[block::TRUNK_B2]))?;
    let trunk = g.tanh(h2)?;
    let s1_ = g.affine(q_solo, p[block::STORE_W1], Some(p[block::STORE_B1]))?;
    let s1_ = g.tanh(s1_)?;
    let s2_ = g.affine(s1_, p[block::STORE_W2], Some(p[block::STORE_B2]))?;
    let store_trunk = g.tanh(s2_)?;

    let s1_bundle = g.affine(trunk, p[block::S1_BUNDLE_W], Some(p[block::S1_BUNDLE_B]))?;
    let s1_store = g.affine(store_trunk, p[block::S1_STORE_W], Some(p[block::S1_STORE_B]))?;
    let s1 = g.concat_cols(&[s1_bundle, s1_store])?;
    let s1 = g.mask(s1, keep_s1, MASK_PENALTY)?;
    let s2_bundle = g.affine(trunk, p[block::S2_BUNDLE_W], Some(p[block::S2_BUNDLE_B]))?;
    let s2_store = g.affine(store_trunk, p[block::S2_STORE_W], Some(p[block::S2_STORE_B]))?;
    let s2 = g.concat_cols(&[s2_bundle, s2_store])?;
    let s2 = g.mask(s2, keep_s2, MASK_PENALTY)?;

    let s1 = g.reshape(s1, b * rows, k + 1)?;
    let s2 = g.reshape(s2, b * rows, k + 1)?;
    let s3 = min_softmax_nodes(&mut g, s1, s2, rows)?;
    let s3_flat = g.reshape(s3, b, rows * k)?;

    let h = g.affine(trunk, p[block::CAP_W], Some(p[block::CAP_B]))?;
    let h = g.mask(h, adjacency_slots, MASK_PENALTY)?;
    let cap_layer = cap_nodes(&mut g, h, tables.cap)?;

    let s3_bundle = g.slice_cols(s3_flat, 0, r * k)?;
    let s3_store = g.slice_cols(s3_flat, r * k, m * k)?;
    let z_bundle = g.min(s3_bundle, cap_layer)?;
    let z = g.concat_cols(&[z_bundle, s3_store])?;

    let allocation = z_to_a_nodes(&mut g, tables, z, alpha_slots, adjacency_slots)?;
    let collapse = g.constant(tables.collapse_ctr.clone());
    let expected_ctr = g.matmul(allocation, collapse)?;

    let logits = g.affine(trunk, p[block::PAY_W], Some(p[block::PAY_B]))?;
    let fractions = g.sigmoid(logits)?;
    let payments = payment_nodes(&mut g, fractions, bids, expected_ctr)?;
    let gross = g.mul(values, expected_ctr)?;
    let utilities = g.sub(gross, payments)?;

    Ok((
        g,
        ForwardNodes {
            params: p,
            bids,
            values,
            s3,
            cap_layer,
            z,
            allocation,
            expected_ctr,
            fractions,
            payments,
            utilities,
        },
    ))
}

/// Store rows: `α_i·z_solo + Σ_{bundles ∋ i} z`; brand rows: `Σ_{bundles ∋ j} z`.
fn z_to_a_nodes(
    g: &mut Graph,
    tables: &SettingTables,
    z: NodeId,
    alpha_slots: NodeId,
    adjacency_slots: NodeId,
) -> Result<NodeId> {
    let shape = tables.shape;
    let (m, k, r) = (shape.stores, shape.slots, shape.max_bundles());
    let z_bundle = g.slice_cols(z, 0, r * k)?;
    let z_solo = g.slice_cols(z, r * k, m * k)?;
    let z_bundle = g.mul(z_bundle, adjacency_slots)?;
    let to_store = g.constant(tables.bundle_to_store.clone());
    let to_brand = g.constant(tables.bundle_to_brand.clone());
    let solo = g.mul(z_solo, alpha_slots)?;
    let via_bundles = g.matmul(z_bundle, to_store)?;
    let stores = g.add(solo, via_bundles)?;
    let brands = g.matmul(z_bundle, to_brand)?;
    Ok(g.concat_cols(&[stores, brands])?)
}

/// `p = p̃ · b · g`, i.e. the fraction times `Σ_k a_k q_k`.
fn payment_nodes(g: &mut Graph, fractions: NodeId, bids: NodeId, expected_ctr: NodeId) -> Result<NodeId> {
    let charged = g.mul(fractions, bids)?;
    Ok(g.mul(charged, expected_ctr)?)
}

// --- single-sample views ------------------------------------------------

/// Trunk inputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInputs {
    pub expected: ExpectedBids,
    /// Flattened `[q_store, q_brand, adjacency]` for the bundle/payment trunk.
    pub bundle_features: Array1<f64>,
    /// Flattened `q'` for the independent-store trunk.
    pub store_features: Array1<f64>,
    /// One bit per bundle-grid cell; 0 marks an absent bundle.
    pub mask: Vec<bool>,
}

pub fn build_inputs(setting: &AuctionSetting, instance: &AuctionInstance, bids: &BidProfile) -> Result<NetworkInputs> {
    let expected = crate::model::expected_bids(setting, instance, bids)?;
    let mask: Vec<bool> = instance.adjacency().iter().flatten().copied().collect();
    let bundle_features: Array1<f64> = expected
        .q_store
        .iter()
        .chain(expected.q_brand.iter())
        .copied()
        .chain(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    let store_features: Array1<f64> = expected.q_store_solo.iter().copied().collect();
    Ok(NetworkInputs { expected, bundle_features, store_features, mask })
}

fn flat_row(m: &Matrix) -> Matrix {
    Matrix::from_shape_vec((1, m.len()), m.iter().copied().collect()).expect("length")
}

/// `S3` from raw `(R+m)×(K+1)` logits of one sample.
pub fn min_softmax_layer(s1: &Matrix, s2: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let rows = s1.nrows();
    let a = g.constant(s1.clone());
    let b = g.constant(s2.clone());
    let out = min_softmax_nodes(&mut g, a, b, rows)?;
    Ok(g.value(out).clone())
}

/// `H' = C · softmax(H)` over all cells of one sample's `R×K` logits.
pub fn c_cap_layer(h: &Matrix, cap: f64) -> Result<Matrix> {
    let mut g = Graph::new();
    let x = g.constant(flat_row(h));
    let out = cap_nodes(&mut g, x, cap)?;
    Ok(g.value(out).clone().into_shape_with_order(h.dim()).expect("same size"))
}

/// Bundle rows `min(S3, H')`, store rows copied from `S3`.
pub fn assemble_z(s3: &Matrix, capped: &Matrix) -> Result<Matrix> {
    let bundles = capped.nrows();
    if s3.ncols() != capped.ncols() || s3.nrows() < bundles {
        return Err(NetworkError::Shape(format!("S3 {:?} vs H' {:?}", s3.dim(), capped.dim())));
    }
    let mut g = Graph::new();
    let a = g.constant(s3.slice(ndarray::s![..bundles, ..]).to_owned());
    let b = g.constant(capped.clone());
    let z = g.min(a, b)?;
    let mut out = s3.clone();
    out.slice_mut(ndarray::s![..bundles, ..]).assign(g.value(z));
    Ok(out)
}

/// `(m+n)×K` allocation from a grid-layout `(m·n+m)×K` matrix `Z`.
pub fn z_to_a(setting: &AuctionSetting, z: &Matrix, instance: &AuctionInstance) -> Result<Matrix> {
    let shape = NetworkShape::for_setting(setting, 1, 1);
    let tables = SettingTables::new(setting, shape)?;
    let (m, n, k) = (shape.stores, shape.brands, shape.slots);
    if z.dim() != (shape.alloc_rows(), k) {
        return Err(NetworkError::Shape(format!("Z {:?}, expected {:?}", z.dim(), (shape.alloc_rows(), k))));
    }
    let zeros = vec![0.0; m + n];
    let batch = BatchInputs::new(shape, [(instance, zeros.as_slice(), zeros.as_slice())])?;
    let mut g = Graph::new();
    let zn = g.constant(flat_row(z));
    let alpha = g.constant(batch.alpha_slots.clone());
    let adj = g.constant(batch.adjacency_slots.clone());
    let a = z_to_a_nodes(&mut g, &tables, zn, alpha, adj)?;
    Ok(g.value(a).clone().into_shape_with_order((m + n, k)).expect("same size"))
}

/// Payments and fractions from raw fraction logits, the allocation and the
/// expected bids. Returns `(payments, fractions)`.
pub fn payment_head(logits: &[f64], allocation: &Matrix, expected: &ExpectedBids) -> (Vec<f64>, Vec<f64>) {
    let q: Vec<_> = expected.q_store.rows().into_iter().chain(expected.q_brand.rows()).collect();
    logits
        .iter()
        .enumerate()
        .map(|(a, &l)| {
            let fraction = engine::sigmoid(l);
            let value: f64 = allocation.row(a).iter().zip(q[a].iter()).map(|(x, y)| x * y).sum();
            (fraction * value, fraction)
        })
        .unzip()
}

/// Allocation and payments of the learned mechanism for one bid profile.
pub fn mechanism_forward(
    params: &NetworkParams,
    setting: &AuctionSetting,
    instance: &AuctionInstance,
    bids: &BidProfile,
) -> Result<MechanismOutcome> {
    instance.check_against(setting)?;
    bids.check_against(setting)?;
    let tables = SettingTables::new(setting, params.shape)?;
    let agents = bids.agents();
    let batch = BatchInputs::new(params.shape, [(instance, agents.as_slice(), agents.as_slice())])?;
    Ok(forward_outcomes(params, &tables, &batch)?.remove(0))
}

/// Forward pass over a batch, one outcome per row.
pub fn forward_outcomes(params: &NetworkParams, tables: &SettingTables, batch: &BatchInputs) -> Result<Vec<MechanismOutcome>> {
    let (g, nodes) = build_graph(params, tables, batch, GradMode::NONE)?;
    let (agents, k) = (tables.shape.agents(), tables.shape.slots);
    let alloc = g.value(nodes.allocation);
    let pay = g.value(nodes.payments);
    Ok((0..batch.rows())
        .map(|row| MechanismOutcome {
            allocation: Array2::from_shape_fn((agents, k), |(a, s)| alloc[[row, a * k + s]]),
            payments: pay.row(row).to_vec(),
        })
        .collect())
}

/// Sum of a node, handy as a scalar objective.
pub fn total(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    Ok(g.sum(x, SumAxis::All)?)
}
