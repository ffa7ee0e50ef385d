//! Test-time metrics: revenue, welfare, ex-post regret and the ru ratio.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ValueDomain;
use crate::model::{AuctionSetting, MechanismOutcome, Sample, ValueProfile};
use crate::network::{forward_outcomes, BatchInputs, NetworkParams, SettingTables};
use crate::rng::indexed_substream;
use crate::train::{truthful_utilities, DeviationBatch, Result};
use crate::vcg::vcg_mechanism;

/// ru values at or above this are flagged.
pub const RU_THRESHOLD: f64 = 0.065;
/// Regret values above this are flagged in reports.
pub const REGRET_THRESHOLD: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Misreport initializations per agent per sample.
    pub restarts: usize,
    /// Ascent iterations per restart.
    pub ascent_steps: usize,
    /// Ascent step size, in value units.
    pub step: f64,
    /// Grid size for the search against piecewise-constant mechanisms.
    pub grid_points: usize,
    pub chunk_size: usize,
    /// Regret is searched on this many leading test samples; 0 means all.
    /// Revenue and welfare always use the whole test set.
    pub regret_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { restarts: 100, ascent_steps: 200, step: 0.05, grid_points: 41, chunk_size: 64, regret_samples: 0 }
    }
}

pub fn empirical_revenue(outcomes: &[MechanismOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(MechanismOutcome::revenue).sum::<f64>() / outcomes.len() as f64
}

pub fn empirical_welfare(outcomes: &[MechanismOutcome], values: &[ValueProfile], ctrs: &[f64]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().zip(values).map(|(o, v)| o.welfare(v, ctrs)).sum::<f64>() / outcomes.len() as f64
}

/// Per-sample truthful utilities and best clamped misreport gains.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretTable {
    pub truthful: Vec<Vec<f64>>,
    pub gains: Vec<Vec<f64>>,
}

impl RegretTable {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// Mean gain of each agent over samples.
    pub fn per_agent(&self) -> Vec<f64> {
        let Some(first) = self.gains.first() else { return Vec::new() };
        let l = self.len() as f64;
        (0..first.len()).map(|a| self.gains.iter().map(|row| row[a]).sum::<f64>() / l).collect()
    }

    /// `(1/(m+n)) Σ_a mean_ℓ gain`.
    pub fn average(&self) -> f64 {
        let per = self.per_agent();
        if per.is_empty() {
            0.0
        } else {
            per.iter().sum::<f64>() / per.len() as f64
        }
    }

    pub fn ru(&self) -> RuRatio {
        ru_ratio(&self.gains, &self.truthful)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuRatio {
    /// `None` when every sample had a zero utility sum.
    pub value: Option<f64>,
    pub used: usize,
    /// Samples whose truthful utility sum was not positive.
    pub skipped: usize,
}

impl RuRatio {
    pub fn flagged(&self) -> bool {
        self.value.is_some_and(|v| v >= RU_THRESHOLD)
    }
}

/// Mean over samples of `Σ regrets / Σ truthful utilities`; samples with a
/// non-positive denominator are skipped and counted.
pub fn ru_ratio(regrets: &[Vec<f64>], utilities: &[Vec<f64>]) -> RuRatio {
    let mut total = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for (r, u) in regrets.iter().zip(utilities) {
        let denom: f64 = u.iter().sum();
        if denom > 0.0 {
            total += r.iter().sum::<f64>() / denom;
            used += 1;
        } else {
            skipped += 1;
        }
    }
    RuRatio { value: (used > 0).then(|| total / used as f64), used, skipped }
}

/// Restart-major initial reports for one sample: restart `r` uses draws
/// `r·agents .. (r+1)·agents`, so raising the restart count only appends.
fn initial_reports(seed: u64, sample: usize, restarts: usize, agents: usize, domain: ValueDomain) -> Vec<f64> {
    let mut rng = indexed_substream(seed, "eval/misreport", sample as u64);
    (0..restarts * agents).map(|_| domain.lo + rng.gen::<f64>() * domain.width()).collect()
}

/// Truthful utilities and regret gains of one chunk, one row per sample.
type ChunkRegret = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Extends `table` with rows for `samples[table.len()..upto]` using
/// multi-restart gradient ascent on the learned mechanism. `checkpoint`
/// sees the table after every chunk so long searches can be persisted.
#[allow(clippy::too_many_arguments)]
pub fn extend_learned_regret(
    params: &NetworkParams,
    setting: &AuctionSetting,
    samples: &[Sample],
    config: &EvalConfig,
    domain: ValueDomain,
    seed: u64,
    table: &mut RegretTable,
    upto: usize,
    mut checkpoint: impl FnMut(&RegretTable),
) -> Result<()> {
    let tables = SettingTables::new(setting, params.shape())?;
    let shape = params.shape();
    let agents = shape.agents();
    let upto = upto.min(samples.len());
    let chunk = config.chunk_size.max(1);
    // work in groups of chunks so progress can be saved between groups
    let group = chunk * rayon::current_num_threads().max(1);
    let mut start = table.len();
    while start < upto {
        let end = (start + group).min(upto);
        let starts: Vec<usize> = (start..end).step_by(chunk).collect();
        let rows: Vec<ChunkRegret> = starts
            .par_iter()
            .map(|&s| -> Result<_> {
                let e = (s + chunk).min(end);
                let part: Vec<&Sample> = samples[s..e].iter().collect();
                let truthful = truthful_utilities(params, &tables, &part)?;
                let dev = DeviationBatch::new(shape, &part)?;
                let inits: Vec<Vec<f64>> = (s..e).map(|i| initial_reports(seed, i, config.restarts, agents, domain)).collect();
                let mut best = vec![f64::NEG_INFINITY; dev.rows()];
                for r in 0..config.restarts {
                    let init: Vec<f64> = inits.iter().flat_map(|v| v[r * agents..(r + 1) * agents].iter().copied()).collect();
                    let found = dev.search(params, &tables, &init, config.ascent_steps, config.step, domain)?;
                    for (b, u) in best.iter_mut().zip(found.utilities) {
                        *b = b.max(u);
                    }
                }
                let truth: Vec<Vec<f64>> = truthful.rows().into_iter().map(|r| r.to_vec()).collect();
                let gains = truth
                    .iter()
                    .enumerate()
                    .map(|(i, u)| (0..agents).map(|a| (best[i * agents + a] - u[a]).max(0.0)).collect())
                    .collect();
                Ok((truth, gains))
            })
            .collect::<Result<_>>()?;
        for (truth, gains) in rows {
            table.truthful.extend(truth);
            table.gains.extend(gains);
        }
        checkpoint(table);
        start = end;
    }
    Ok(())
}

pub fn learned_regret(
    params: &NetworkParams,
    setting: &AuctionSetting,
    samples: &[Sample],
    config: &EvalConfig,
    domain: ValueDomain,
    seed: u64,
) -> Result<RegretTable> {
    let mut table = RegretTable::default();
    extend_learned_regret(params, setting, samples, config, domain, seed, &mut table, samples.len(), |_| {})?;
    Ok(table)
}

/// Evenly spaced grid over the domain, endpoints included.
pub fn value_grid(domain: ValueDomain, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![domain.lo],
        _ => (0..points).map(|i| domain.lo + domain.width() * i as f64 / (points - 1) as f64).collect(),
    }
}

/// Grid-search regret for the VCG mechanism.
pub fn vcg_regret(setting: &AuctionSetting, samples: &[Sample], grid_points: usize, domain: ValueDomain) -> crate::model::Result<RegretTable> {
    let grid = value_grid(domain, grid_points);
    let ctrs = setting.ctrs();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = samples
        .par_iter()
        .map(|s| -> crate::model::Result<_> {
            let values = &s.values;
            let (_, truthful) = vcg_mechanism(setting, &s.instance, values)?;
            let truth: Vec<f64> = (0..setting.agents()).map(|a| truthful.utility(a, values.agent(a), ctrs)).collect();
            let mut gains = vec![0.0; setting.agents()];
            for a in 0..setting.agents() {
                for &x in &grid {
                    let (_, dev) = vcg_mechanism(setting, &s.instance, &values.with_agent(a, x))?;
                    gains[a] = f64::max(gains[a], dev.utility(a, values.agent(a), ctrs) - truth[a]);
                }
            }
            Ok((truth, gains))
        })
        .collect::<crate::model::Result<_>>()?;
    let (truthful, gains) = rows.into_iter().unzip();
    Ok(RegretTable { truthful, gains })
}

/// Truthful outcomes of the learned mechanism, in chunks.
pub fn learned_outcomes(params: &NetworkParams, setting: &AuctionSetting, samples: &[Sample], chunk: usize) -> Result<Vec<MechanismOutcome>> {
    let tables = SettingTables::new(setting, params.shape())?;
    let parts: Vec<Vec<MechanismOutcome>> = samples
        .par_chunks(chunk.max(1))
        .map(|part| -> Result<_> {
            let values: Vec<Vec<f64>> = part.iter().map(|s| s.values.agents()).collect();
            let batch = BatchInputs::new(params.shape(), part.iter().zip(&values).map(|(s, v)| (&s.instance, v.as_slice(), v.as_slice())))?;
            Ok(forward_outcomes(params, &tables, &batch)?)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn vcg_outcomes(setting: &AuctionSetting, samples: &[Sample]) -> crate::model::Result<Vec<MechanismOutcome>> {
    samples.par_iter().map(|s| vcg_mechanism(setting, &s.instance, &s.values).map(|(_, o)| o)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `hregnet` or `vcg`.
    pub mechanism: String,
    pub cap: usize,
    pub samples: usize,
    pub revenue: f64,
    pub welfare: f64,
    pub avg_regret: f64,
    /// Test samples covered by the regret search.
    pub regret_samples: usize,
    pub ru: RuRatio,
    pub revenue_per_agent: Vec<f64>,
    pub regret_per_agent: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "method,C,rev,sw,rgt,ru";

impl EvalReport {
    pub fn build(mechanism: &str, setting: &AuctionSetting, samples: &[Sample], outcomes: &[MechanismOutcome], regret: &RegretTable) -> Self {
        let values: Vec<ValueProfile> = samples.iter().map(|s| s.values.clone()).collect();
        let agents = setting.agents();
        let l = outcomes.len().max(1) as f64;
        let revenue_per_agent = (0..agents).map(|a| outcomes.iter().map(|o| o.payments[a]).sum::<f64>() / l).collect();
        Self {
            mechanism: mechanism.to_string(),
            cap: setting.cap(),
            samples: samples.len(),
            revenue: empirical_revenue(outcomes),
            welfare: empirical_welfare(outcomes, &values, setting.ctrs()),
            avg_regret: regret.average(),
            regret_samples: regret.len(),
            ru: regret.ru(),
            revenue_per_agent,
            regret_per_agent: regret.per_agent(),
            config_hash: String::new(),
            seed: 0,
        }
    }

    pub fn regret_flagged(&self) -> bool {
        self.avg_regret > REGRET_THRESHOLD
    }

    /// Human-table row with three decimals. Regret is left blank for VCG,
    /// whose regret is zero by construction.
    pub fn csv_row(&self) -> String {
        let rgt = if self.mechanism == "vcg" { String::new() } else { format!("{:.3}", self.avg_regret) };
        let ru = self.ru.value.map(|v| format!("{v:.3}")).unwrap_or_default();
        format!("{},{},{:.3},{:.3},{},{}", self.mechanism, self.cap, self.revenue, self.welfare, rgt, ru)
    }
}
