//! Cost-penalized profit, parameter sweeps over `(alpha, phi)`, model
//! selection and report output.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::simulator::{replay, LogRecord, ReplayConfig, ReplayMetrics};
use crate::strategies::{Bidder, RequestScore, RmpSource, StrategyConfig, StrategyKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Budget fractions used when none are configured: 1/2 down to 1/32.
pub const DEFAULT_BUDGET_FRACTIONS: [f64; 5] = [0.5, 0.25, 0.125, 0.0625, 0.03125];

pub const DEFAULT_LAMBDAS: [f64; 3] = [0.0, 0.2, 0.4];

pub const DEFAULT_ALPHAS: [f64; 9] = [-2.0, -1.0, -0.5, -0.2, 0.0, 0.2, 0.5, 1.0, 2.0];

/// `profit - lambda * cost`.
pub fn cp_profit(profit: f64, cost: f64, lambda: f64) -> f64 {
    profit - lambda * cost
}

/// 13 log-spaced scalings from `phi0 / 64` to `64 phi0`.
pub fn default_phis(phi0: f64) -> Vec<f64> {
    (-6..=6).map(|k| phi0 * 2f64.powi(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One replay of one strategy setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub strategy: StrategyKind,
    pub alpha: f64,
    pub phi: f64,
    /// Budget as a fraction of the replayed split's logged cost; `None` is
    /// unbudgeted.
    pub budget_fraction: Option<f64>,
    pub split: Split,
    pub metrics: ReplayMetrics,
}

impl SweepPoint {
    pub fn cp_profit(&self, lambda: f64) -> f64 {
        cp_profit(self.metrics.profit, self.metrics.cost, lambda)
    }
}

/// Budgets as fractions of a base cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub fractions: Vec<f64>,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_BUDGET_FRACTIONS.to_vec(),
        }
    }
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<()> {
        for &f in &self.fractions {
            check_fraction(f)?;
        }
        Ok(())
    }

    pub fn budgets(&self, base: f64) -> Vec<f64> {
        self.fractions.iter().map(|f| f * base).collect()
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("budget fraction must be in (0, 1], got {f}")))
    }
}

/// Grid of settings for one strategy and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: StrategyKind,
    pub alphas: Vec<f64>,
    pub phis: Vec<f64>,
    pub budget_fraction: Option<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.phis.is_empty() {
            return Err(invalid(format!("{} sweep has an empty grid", self.kind)));
        }
        if self.kind == StrategyKind::Lr && self.alphas.len() != 1 {
            return Err(invalid("LR bidding has no alpha; its alpha grid must have one entry"));
        }
        if let Some(f) = self.budget_fraction {
            check_fraction(f)?;
        }
        for &phi in &self.phis {
            if !(phi > 0.0 && phi.is_finite()) {
                return Err(invalid(format!("phi must be positive, got {phi}")));
            }
        }
        Ok(())
    }
}

fn budget_for(records: &[LogRecord], fraction: Option<f64>) -> Option<f64> {
    fraction.map(|f| f * records.iter().map(|r| r.market_price).sum::<f64>())
}

/// Per-request bids with `phi = 1`.
pub fn unscaled_bids(scores: &[RequestScore], bidder: &Bidder<'_>) -> Vec<f64> {
    scores.par_iter().map(|s| bidder.unscaled_bid(s)).collect()
}

fn replay_scaled(
    records: &[LogRecord],
    base: &[f64],
    phi: f64,
    cfg: &ReplayConfig,
) -> Result<ReplayMetrics> {
    replay(records, cfg, |i, _| phi * base[i])
}

/// Replays one configured strategy over `records`, scored in `scores`.
pub fn replay_strategy(
    records: &[LogRecord],
    scores: &[RequestScore],
    cfg: StrategyConfig,
    budget_fraction: Option<f64>,
    rmp: Option<RmpSource<'_>>,
) -> Result<ReplayMetrics> {
    if records.len() != scores.len() {
        return Err(invalid("one score per record is required"));
    }
    if let Some(f) = budget_fraction {
        check_fraction(f)?;
    }
    let bidder = Bidder::new(StrategyConfig { phi: 1.0, ..cfg }, rmp)?;
    cfg.validate()?;
    let base = unscaled_bids(scores, &bidder);
    let rc = ReplayConfig {
        budget: budget_for(records, budget_fraction),
        click_value: cfg.v,
    };
    replay_scaled(records, &base, cfg.phi, &rc)
}

/// One replay per `(alpha, phi)` in grid order (alpha-major). Unscaled bids
/// are computed once per alpha and scaled for each phi. `rmp(alpha)` supplies
/// the RMP bid source.
pub fn sweep<'a, F>(
    records: &[LogRecord],
    scores: &[RequestScore],
    spec: &SweepSpec,
    click_value: f64,
    split: Split,
    rmp: F,
) -> Result<Vec<SweepPoint>>
where
    F: Fn(f64) -> Option<RmpSource<'a>> + Sync,
{
    spec.validate()?;
    if records.len() != scores.len() {
        return Err(invalid("one score per record is required"));
    }
    let rc = ReplayConfig {
        budget: budget_for(records, spec.budget_fraction),
        click_value,
    };
    let bases = spec
        .alphas
        .par_iter()
        .map(|&alpha| {
            let cfg = StrategyConfig::new(spec.kind, alpha, 1.0, click_value)?;
            let bidder = Bidder::new(cfg, rmp(alpha))
                .map_err(|e| e.context(format!("{} alpha={alpha}", spec.kind)))?;
            Ok(unscaled_bids(scores, &bidder))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, f64)> = (0..spec.alphas.len())
        .flat_map(|a| spec.phis.iter().map(move |&phi| (a, phi)))
        .collect();
    cells
        .par_iter()
        .map(|&(a, phi)| {
            let alpha = spec.alphas[a];
            let metrics = replay_scaled(records, &bases[a], phi, &rc).map_err(|e| {
                e.context(format!("{} alpha={alpha} phi={phi}", spec.kind))
            })?;
            Ok(SweepPoint {
                strategy: spec.kind,
                alpha,
                phi,
                budget_fraction: spec.budget_fraction,
                split,
                metrics,
            })
        })
        .collect()
}

/// The point with the highest CP-Profit; ties go to the lower cost, then to
/// the earlier point.
pub fn select_model(points: &[SweepPoint], lambda: f64) -> Option<&SweepPoint> {
    let mut best: Option<&SweepPoint> = None;
    for p in points {
        best = match best {
            None => Some(p),
            Some(b) => {
                let better = match p.cp_profit(lambda).total_cmp(&b.cp_profit(lambda)) {
                    Ordering::Greater => true,
                    Ordering::Equal => p.metrics.cost < b.metrics.cost,
                    Ordering::Less => false,
                };
                Some(if better { p } else { b })
            }
        };
    }
    best
}

/// Flags points for which another point has at least the profit at no more
/// cost, strictly better in one of the two.
pub fn dominance(points: &[SweepPoint]) -> Vec<bool> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    let cost = |i: usize| points[i].metrics.cost;
    let profit = |i: usize| points[i].metrics.profit;
    order.sort_by(|&a, &b| cost(a).total_cmp(&cost(b)));
    let mut flags = vec![false; n];
    // Best profit among strictly cheaper points.
    let mut cheaper_best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && cost(order[j]) == cost(order[i]) {
            j += 1;
        }
        let group = &order[i..j];
        let group_best = group.iter().map(|&k| profit(k)).fold(f64::NEG_INFINITY, f64::max);
        for &k in group {
            flags[k] = cheaper_best >= profit(k) || group_best > profit(k);
        }
        cheaper_best = cheaper_best.max(group_best);
        i = j;
    }
    flags
}

/// Model picked on validation for one `(lambda, strategy, budget)` and its
/// test outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub lambda: f64,
    pub strategy: StrategyKind,
    pub budget_fraction: Option<f64>,
    pub alpha: f64,
    pub phi: f64,
    pub validation: ReplayMetrics,
    pub validation_cp_profit: f64,
    pub test: ReplayMetrics,
    pub test_cp_profit: f64,
}

/// A sweep point with its dominance flag within its own sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportPoint {
    #[serde(flatten)]
    pub point: SweepPoint,
    pub dominated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub experiment_id: String,
    pub config: serde_json::Value,
    pub click_value: f64,
    pub points: Vec<ReportPoint>,
    pub selections: Vec<Selection>,
}

impl Report {
    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// One row per sweep point.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "schema_version,experiment_id,strategy,split,alpha,phi,budget_fraction,dominated,\
             bids,wins,impressions,clicks,cost,revenue,profit,roi,cpm,ctr,ecpc,win_rate,\
             records_consumed,budget_exhausted"
        )?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for rp in &self.points {
            let p = &rp.point;
            let m = &p.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.schema_version,
                self.experiment_id,
                p.strategy,
                p.split.name(),
                p.alpha,
                p.phi,
                opt(p.budget_fraction),
                rp.dominated,
                m.bids,
                m.wins,
                m.impressions,
                m.clicks,
                m.cost,
                m.revenue,
                m.profit,
                opt(m.roi),
                opt(m.cpm),
                opt(m.ctr),
                opt(m.ecpc),
                opt(m.win_rate),
                m.records_consumed,
                m.budget_exhausted,
            )?;
        }
        Ok(())
    }
}

/// Attaches dominance flags computed within each `(strategy, budget, split)`
/// group, preserving order.
pub fn flag_points(points: &[SweepPoint]) -> Vec<ReportPoint> {
    let mut flags = vec![false; points.len()];
    let mut groups: Vec<(StrategyKind, Option<u64>, Split, Vec<usize>)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key = (p.strategy, p.budget_fraction.map(f64::to_bits), p.split);
        match groups.iter_mut().find(|g| (g.0, g.1, g.2) == key) {
            Some(g) => g.3.push(i),
            None => groups.push((key.0, key.1, key.2, vec![i])),
        }
    }
    for (_, _, _, idx) in &groups {
        let members: Vec<SweepPoint> = idx.iter().map(|&i| points[i]).collect();
        for (&i, f) in idx.iter().zip(dominance(&members)) {
            flags[i] = f;
        }
    }
    points
        .iter()
        .zip(flags)
        .map(|(&point, dominated)| ReportPoint { point, dominated })
        .collect()
}
