//! Augmented-Lagrangian training of the learned mechanism.
//!
//! Each iteration draws a minibatch, searches for every agent's most
//! profitable misreport by projected gradient ascent, then takes one
//! optimizer step on
//!
//! ```text
//! loss = −mean payments + Σ_a λ_a·rgt_a + ρ/2 · Σ_a rgt_a²
//! ```
//!
//! where `rgt_a` is the mean clamped utility gain of agent `a` over the
//! minibatch. Misreports are held fixed while differentiating in the
//! weights. Work is split into fixed-size chunks of samples whose results are
//! reduced in chunk order, so the outcome does not depend on the number of
//! worker threads.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ValueDomain;
use crate::engine::Matrix;
use crate::model::{AuctionSetting, Sample};
use crate::network::{build_graph, BatchInputs, GradMode, NetworkError, NetworkParams, NetworkShape, SettingTables};
use crate::rng::{indexed_substream, substream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("numerical failure: {0}")]
    NonFinite(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent with the base learning rate.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total iterations `T`.
    pub iterations: u64,
    /// Minibatch size `E`.
    pub batch_size: usize,
    /// Inner ascent steps `Γ`.
    pub ascent_steps: usize,
    /// Inner ascent step size `τ`.
    pub misreport_step: f64,
    /// Base learning rate `η`.
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Multiplier update period `γ`.
    pub multiplier_period: u64,
    pub rho_init: f64,
    /// Added to `ρ` at every multiplier update.
    pub rho_increment: f64,
    pub hidden: usize,
    pub store_hidden: usize,
    /// Samples per parallel work unit; fixed so results do not depend on
    /// the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 128,
            ascent_steps: 25,
            misreport_step: 0.1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            multiplier_period: 100,
            rho_init: 1.0,
            rho_increment: 1.0,
            hidden: 128,
            store_hidden: 64,
            chunk_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.chunk_size == 0 {
            return bad("chunk size must be positive");
        }
        if self.multiplier_period == 0 {
            return bad("multiplier period must be positive");
        }
        if !(self.misreport_step.is_finite() && self.misreport_step >= 0.0) {
            return bad("misreport step must be finite and non-negative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.rho_init.is_finite() && self.rho_init >= 0.0 && self.rho_increment.is_finite() && self.rho_increment >= 0.0) {
            return bad("penalty schedule must be finite and non-negative");
        }
        if self.hidden == 0 || self.store_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }
}

/// Multipliers (stores then brands) and the penalty factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: Vec<f64>,
    pub rho: f64,
}

impl LagrangeState {
    pub fn new(agents: usize, rho: f64) -> Self {
        Self { lambda: vec![0.0; agents], rho }
    }

    pub fn lambda_norm(&self) -> f64 {
        self.lambda.iter().map(|l| l * l).sum::<f64>().sqrt()
    }
}

/// `λ ← λ + ρ·rgt` then `ρ ← ρ + δ`, but only when `iteration` (1-based)
/// is a multiple of `period`.
pub fn update_multipliers(state: &LagrangeState, regrets: &[f64], iteration: u64, period: u64, rho_increment: f64) -> LagrangeState {
    if period == 0 || !iteration.is_multiple_of(period) {
        return state.clone();
    }
    LagrangeState {
        lambda: state.lambda.iter().zip(regrets).map(|(l, r)| l + state.rho * r).collect(),
        rho: state.rho + rho_increment,
    }
}

/// `−revenue + Σ λ·rgt + ρ/2·Σ rgt²`.
pub fn lagrangian_loss(mean_revenue: f64, regrets: &[f64], state: &LagrangeState) -> f64 {
    let linear: f64 = state.lambda.iter().zip(regrets).map(|(l, r)| l * r).sum();
    let quadratic: f64 = regrets.iter().map(|r| r * r).sum();
    -mean_revenue + linear + 0.5 * state.rho * quadratic
}

/// Per-agent mean of `max(0, u' − u)` over samples; both matrices are
/// samples × agents.
pub fn empirical_regret(truthful: &Matrix, misreported: &Matrix) -> Vec<f64> {
    let samples = truthful.nrows().max(1) as f64;
    (0..truthful.ncols())
        .map(|a| truthful.column(a).iter().zip(misreported.column(a)).map(|(u, v)| (v - u).max(0.0)).sum::<f64>() / samples)
        .collect()
}

/// Result of a batched misreport search.
#[derive(Clone, Debug, PartialEq)]
pub struct MisreportSearch {
    /// Best report found per deviation row.
    pub reports: Vec<f64>,
    /// Utility at that report.
    pub utilities: Vec<f64>,
}

/// Projected gradient ascent on independent scalar reports.
///
/// `evaluate` maps the current reports to each row's utility and its
/// derivative with respect to the row's own report. Every iterate,
/// including the starting point, competes for the returned best.
pub fn ascend<F>(init: &[f64], steps: usize, step: f64, domain: ValueDomain, mut evaluate: F) -> Result<MisreportSearch>
where
    F: FnMut(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut x: Vec<f64> = init.iter().map(|v| domain.clip(*v)).collect();
    let mut best = MisreportSearch { reports: x.clone(), utilities: vec![f64::NEG_INFINITY; x.len()] };
    for t in 0..=steps {
        let (u, g) = evaluate(&x)?;
        for r in 0..x.len() {
            if u[r] > best.utilities[r] {
                best.utilities[r] = u[r];
                best.reports[r] = x[r];
            }
        }
        if t == steps {
            break;
        }
        for (xr, gr) in x.iter_mut().zip(&g) {
            if !gr.is_finite() {
                return Err(TrainError::NonFinite("misreport gradient".into()));
            }
            *xr = domain.clip(*xr + step * gr);
        }
    }
    Ok(best)
}

/// One deviation row per (sample, agent), sample-major: the agent's bid is
/// replaced by a report while everyone else stays truthful.
pub struct DeviationBatch {
    agents: usize,
    batch: BatchInputs,
}

impl DeviationBatch {
    pub fn new(shape: NetworkShape, samples: &[&Sample]) -> Result<Self> {
        let agents = shape.agents();
        let values: Vec<Vec<f64>> = samples.iter().map(|s| s.values.agents()).collect();
        let rows = samples.iter().zip(&values).flat_map(|(s, v)| (0..agents).map(move |_| (&s.instance, v.as_slice(), v.as_slice())));
        let rows: Vec<_> = rows.collect();
        Ok(Self { agents, batch: BatchInputs::new(shape, rows)? })
    }

    pub fn rows(&self) -> usize {
        self.batch.rows()
    }

    /// Truthful values of each row's deviating agent.
    pub fn truthful_reports(&self) -> Vec<f64> {
        (0..self.rows()).map(|r| self.batch.values[[r, r % self.agents]]).collect()
    }

    fn with_reports(&self, reports: &[f64]) -> BatchInputs {
        let mut bids = self.batch.values.clone();
        for (r, x) in reports.iter().enumerate() {
            bids[[r, r % self.agents]] = *x;
        }
        self.batch.with_bids(bids)
    }

    fn own_seed(&self) -> Matrix {
        let mut seed = Matrix::zeros((self.rows(), self.agents));
        for r in 0..self.rows() {
            seed[[r, r % self.agents]] = 1.0;
        }
        seed
    }

    /// Utility of each deviating agent at `reports`, with its derivative.
    pub fn evaluate(&self, params: &NetworkParams, tables: &SettingTables, reports: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (graph, nodes) = build_graph(params, tables, &self.with_reports(reports), GradMode::BIDS)?;
        let grads = graph.backward(&[(nodes.utilities, self.own_seed())]).map_err(NetworkError::from)?;
        let d_bids = grads.get(nodes.bids).map_err(NetworkError::from)?;
        let u = graph.value(nodes.utilities);
        let a = self.agents;
        Ok(((0..self.rows()).map(|r| u[[r, r % a]]).collect(), (0..self.rows()).map(|r| d_bids[[r, r % a]]).collect()))
    }

    /// Utilities only, no gradient.
    pub fn utilities(&self, params: &NetworkParams, tables: &SettingTables, reports: &[f64]) -> Result<Vec<f64>> {
        let (graph, nodes) = build_graph(params, tables, &self.with_reports(reports), GradMode::NONE)?;
        let u = graph.value(nodes.utilities);
        Ok((0..self.rows()).map(|r| u[[r, r % self.agents]]).collect())
    }

    /// Projected ascent from `init` for every row.
    pub fn search(
        &self,
        params: &NetworkParams,
        tables: &SettingTables,
        init: &[f64],
        steps: usize,
        step: f64,
        domain: ValueDomain,
    ) -> Result<MisreportSearch> {
        ascend(init, steps, step, domain, |x| self.evaluate(params, tables, x))
    }
}

/// Adam moments, or nothing for plain descent.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &NetworkParams) -> Self {
        let zeros = || params.blocks().iter().map(|b| Matrix::zeros(b.dim())).collect::<Vec<_>>();
        Self { kind, step: 0, first: zeros(), second: zeros() }
    }

    pub fn apply(&mut self, params: &mut NetworkParams, grads: &[Matrix], lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in params.blocks_mut().iter_mut().zip(grads) {
                    w.scaled_add(-lr, g);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (((w, g), m), v) in params.blocks_mut().iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
                    });
                }
            }
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    pub optimizer: OptimizerState,
    pub lagrange: LagrangeState,
    /// Completed iterations.
    pub iteration: u64,
    pub seed: u64,
}

impl TrainState {
    /// Fresh weights drawn from the `init` substream.
    pub fn initial(setting: &AuctionSetting, config: &TrainConfig, seed: u64) -> Self {
        let shape = NetworkShape::for_setting(setting, config.hidden, config.store_hidden);
        let params = NetworkParams::init(shape, &mut substream(seed, "init"));
        let optimizer = OptimizerState::new(config.optimizer, &params);
        Self { params, optimizer, lagrange: LagrangeState::new(shape.agents(), config.rho_init), iteration: 0, seed }
    }
}

/// Summary of one iteration, in the shape of a training-log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iteration: u64,
    pub loss: f64,
    pub revenue: f64,
    /// Mean over agents of the minibatch regret.
    pub regret: f64,
    pub lambda_norm: f64,
    pub rho: f64,
}

pub const LOG_HEADER: &str = "iteration,loss,revenue,regret,lambda_norm,rho";

impl StepStats {
    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?},{:?},{:?},{:?}", self.iteration, self.loss, self.revenue, self.regret, self.lambda_norm, self.rho)
    }
}

/// Per-chunk forward results kept for the backward pass.
struct ChunkPass {
    graphs: [(crate::engine::Graph, crate::network::ForwardNodes); 2],
    gains: Matrix,
    payments: f64,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    tables: SettingTables,
    data: &'a [Sample],
    domain: ValueDomain,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, setting: &AuctionSetting, data: &'a [Sample], domain: ValueDomain, state: TrainState) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        if config.batch_size > data.len() {
            return Err(TrainError::Config(format!("batch size {} exceeds training set size {}", config.batch_size, data.len())));
        }
        let tables = SettingTables::new(setting, state.params.shape())?;
        Ok(Self { config, tables, data, domain, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Indices of the minibatch used at (0-based) `iteration`: consecutive
    /// slices of a per-epoch shuffle.
    pub fn minibatch_indices(&self, iteration: u64) -> Vec<usize> {
        let n = self.data.len();
        let per_epoch = (n / self.config.batch_size) as u64;
        let epoch = iteration / per_epoch;
        let offset = (iteration % per_epoch) as usize * self.config.batch_size;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut indexed_substream(self.state.seed, "train/shuffle", epoch));
        order[offset..offset + self.config.batch_size].to_vec()
    }

    /// Runs one iteration of the training loop.
    pub fn step(&mut self) -> Result<StepStats> {
        let t = self.state.iteration;
        let indices = self.minibatch_indices(t);
        let samples: Vec<&Sample> = indices.iter().map(|&i| &self.data[i]).collect();
        let shape = self.state.params.shape();
        let agents = shape.agents();
        let e = samples.len() as f64;

        let mut rng = indexed_substream(self.state.seed, "train/misreport", t);
        let init: Vec<f64> =
            (0..samples.len() * agents).map(|_| self.domain.lo + rng.gen::<f64>() * self.domain.width()).collect();

        let chunk = self.config.chunk_size;
        let params = &self.state.params;
        let tables = &self.tables;
        let cfg = &self.config;
        let domain = self.domain;

        let passes: Vec<(Vec<f64>, ChunkPass, DeviationBatch)> = samples
            .par_chunks(chunk)
            .zip(init.par_chunks(chunk * agents))
            .map(|(part, init)| -> Result<_> {
                let dev = DeviationBatch::new(shape, part)?;
                let found = dev.search(params, tables, init, cfg.ascent_steps, cfg.misreport_step, domain)?;
                let pass = forward_chunk(params, tables, part, &dev, &found.reports)?;
                Ok((found.reports, pass, dev))
            })
            .collect::<Result<_>>()?;

        let mut clamped = vec![0.0; agents];
        let mut revenue = 0.0;
        for (_, pass, _) in &passes {
            revenue += pass.payments;
            for (a, total) in clamped.iter_mut().enumerate() {
                *total += pass.gains.column(a).iter().map(|g| g.max(0.0)).sum::<f64>();
            }
        }
        revenue /= e;
        let regrets: Vec<f64> = clamped.iter().map(|c| c / e).collect();
        let lagrange = &self.state.lagrange;
        let loss = lagrangian_loss(revenue, &regrets, lagrange);
        let coef: Vec<f64> = lagrange.lambda.iter().zip(&regrets).map(|(l, r)| l + lagrange.rho * r).collect();

        let chunk_grads: Vec<Vec<Matrix>> =
            passes.par_iter().map(|(_, pass, _)| backward_chunk(pass, &coef, e)).collect::<Result<_>>()?;
        let mut grads: Vec<Matrix> = params.blocks().iter().map(|b| Matrix::zeros(b.dim())).collect();
        for cg in &chunk_grads {
            for (acc, g) in grads.iter_mut().zip(cg) {
                *acc += g;
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFinite(format!("parameter gradient at iteration {}", t + 1)));
        }
        self.state.optimizer.apply(&mut self.state.params, &grads, self.config.learning_rate);
        if !self.state.params.is_finite() {
            return Err(TrainError::NonFinite(format!("parameters after iteration {}", t + 1)));
        }

        let done = t + 1;
        if done.is_multiple_of(self.config.multiplier_period) {
            // regret of the updated weights on the same misreports
            let params = &self.state.params;
            let fresh: Vec<Vec<f64>> = passes
                .par_iter()
                .zip(samples.par_chunks(chunk))
                .map(|((reports, _, dev), part)| -> Result<Vec<f64>> {
                    let misreported = dev.utilities(params, tables, reports)?;
                    let truthful = truthful_utilities(params, tables, part)?;
                    let mut sums = vec![0.0; agents];
                    for (r, u) in misreported.iter().enumerate() {
                        sums[r % agents] += (u - truthful[[r / agents, r % agents]]).max(0.0);
                    }
                    Ok(sums)
                })
                .collect::<Result<_>>()?;
            let mut after = vec![0.0; agents];
            for sums in fresh {
                for (acc, s) in after.iter_mut().zip(sums) {
                    *acc += s;
                }
            }
            let after: Vec<f64> = after.iter().map(|s| s / e).collect();
            self.state.lagrange =
                update_multipliers(&self.state.lagrange, &after, done, self.config.multiplier_period, self.config.rho_increment);
        }
        self.state.iteration = done;
        Ok(StepStats {
            iteration: done,
            loss,
            revenue,
            regret: regrets.iter().sum::<f64>() / agents as f64,
            lambda_norm: self.state.lagrange.lambda_norm(),
            rho: self.state.lagrange.rho,
        })
    }
}

fn truthful_batch(shape: NetworkShape, samples: &[&Sample]) -> Result<BatchInputs> {
    let values: Vec<Vec<f64>> = samples.iter().map(|s| s.values.agents()).collect();
    Ok(BatchInputs::new(shape, samples.iter().zip(&values).map(|(s, v)| (&s.instance, v.as_slice(), v.as_slice())))?)
}

/// Truthful utilities, samples × agents.
pub fn truthful_utilities(params: &NetworkParams, tables: &SettingTables, samples: &[&Sample]) -> Result<Matrix> {
    let batch = truthful_batch(params.shape(), samples)?;
    let (graph, nodes) = build_graph(params, tables, &batch, GradMode::NONE)?;
    Ok(graph.value(nodes.utilities).clone())
}

fn forward_chunk(
    params: &NetworkParams,
    tables: &SettingTables,
    samples: &[&Sample],
    dev: &DeviationBatch,
    reports: &[f64],
) -> Result<ChunkPass> {
    let agents = params.shape().agents();
    let truthful = build_graph(params, tables, &truthful_batch(params.shape(), samples)?, GradMode::PARAMS)?;
    let deviated = build_graph(params, tables, &dev.with_reports(reports), GradMode::PARAMS)?;
    let u = truthful.0.value(truthful.1.utilities);
    let u_dev = deviated.0.value(deviated.1.utilities);
    let gains = Matrix::from_shape_fn((samples.len(), agents), |(s, a)| u_dev[[s * agents + a, a]] - u[[s, a]]);
    let payments = truthful.0.value(truthful.1.payments).sum();
    Ok(ChunkPass { graphs: [truthful, deviated], gains, payments })
}

/// Weight gradient of this chunk's share of the loss.
fn backward_chunk(pass: &ChunkPass, coef: &[f64], e: f64) -> Result<Vec<Matrix>> {
    let (samples, agents) = pass.gains.dim();
    let active = |s: usize, a: usize| if pass.gains[[s, a]] > 0.0 { coef[a] / e } else { 0.0 };
    let [(tg, tn), (dg, dn)] = &pass.graphs;
    let pay_seed = Matrix::from_elem((samples, agents), -1.0 / e);
    let truth_seed = Matrix::from_shape_fn((samples, agents), |(s, a)| -active(s, a));
    let dev_seed = Matrix::from_shape_fn((samples * agents, agents), |(r, a)| {
        if r % agents == a {
            active(r / agents, a)
        } else {
            0.0
        }
    });
    let gt = tg.backward(&[(tn.payments, pay_seed), (tn.utilities, truth_seed)]).map_err(NetworkError::from)?;
    let gd = dg.backward(&[(dn.utilities, dev_seed)]).map_err(NetworkError::from)?;
    tn.params
        .iter()
        .zip(&dn.params)
        .map(|(&a, &b)| Ok(gt.get(a).map_err(NetworkError::from)? + gd.get(b).map_err(NetworkError::from)?))
        .collect()
}
