//! Bidding functions: linear (LR), value-at-risk of utility (VaR) and
//! risk management of profit (RMP), plus the closed-form profit moments they
//! rest on.
//!
//! Winning pays the market price `z` (second price) when `z < b`, so the
//! profit of bid `b` is `R(b) = (v * yhat - z) * 1[z < b]`. With the
//! truncated market moments `z_k` its first two moments are
//!
//! ```text
//! E[R]   = v E[yhat] z_0 - z_1
//! E[R^2] = v^2 E[yhat^2] z_0 - 2 v E[yhat] z_1 + z_2
//! ```
//!
//! since `yhat` and `z` are independent.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctr_distribution::{
    check_digest, format_err, header_field, header_grid, moments_quadrature, read_f64s,
    read_table_header, CtrMoments, CtrPosterior, Grid, MomentTable,
};
use crate::ctr_model::{fmt_f64, predict_with_weights, FeatureVector, GaussianWeightModel};
use crate::error::{invalid, Result};
use crate::market::{MarketPriceModel, PartialMoments};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Lr,
    Var,
    Rmp,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Lr => "lr",
            StrategyKind::Var => "var",
            StrategyKind::Rmp => "rmp",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(StrategyKind::Lr),
            "var" => Ok(StrategyKind::Var),
            "rmp" => Ok(StrategyKind::Rmp),
            _ => Err(invalid(format!("unknown strategy {s:?} (expected lr, var or rmp)"))),
        }
    }
}

/// Strategy with its risk coefficient `alpha` (positive is risk-averse),
/// bid scaling `phi` and click value `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub alpha: f64,
    pub phi: f64,
    pub v: f64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, alpha: f64, phi: f64, v: f64) -> Result<Self> {
        let cfg = Self { kind, alpha, phi, v };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(invalid(format!("phi must be positive, got {}", self.phi)));
        }
        if !(self.v > 0.0 && self.v.is_finite()) {
            return Err(invalid(format!("click value must be positive, got {}", self.v)));
        }
        if !self.alpha.is_finite() {
            return Err(invalid("alpha must be finite"));
        }
        Ok(())
    }
}

/// Linear bid `phi * v * ctr`.
pub fn bid_lr(ctr: f64, cfg: &StrategyConfig) -> f64 {
    (cfg.phi * (cfg.v * ctr)).max(0.0)
}

/// Value-at-risk bid `phi * v * (E[yhat] - alpha std[yhat])`, clamped at 0
/// (no bid).
pub fn bid_var(m: CtrMoments, cfg: &StrategyConfig) -> f64 {
    (cfg.phi * (cfg.v * (m.mean - cfg.alpha * m.std))).max(0.0)
}

/// First two moments of `R(b)` with the inputs they were computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfitMoments {
    pub expectation: f64,
    pub variance: f64,
    pub bid: f64,
    pub v: f64,
    pub ctr_mean: f64,
    pub ctr_second_moment: f64,
    pub z: PartialMoments,
}

impl ProfitMoments {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

fn moments_from_parts(b: f64, v: f64, e1: f64, e2: f64, z: PartialMoments) -> ProfitMoments {
    let expectation = v * e1 * z.z0 - z.z1;
    let second = v * v * e2 * z.z0 - 2.0 * v * e1 * z.z1 + z.z2;
    ProfitMoments {
        expectation,
        variance: (second - expectation * expectation).max(0.0),
        bid: b,
        v,
        ctr_mean: e1,
        ctr_second_moment: e2,
        z,
    }
}

/// Closed-form `E[R(b)]` and `Var[R(b)]`.
pub fn profit_moments(
    b: f64,
    v: f64,
    ctr_mean: f64,
    ctr_second_moment: f64,
    mp: &MarketPriceModel,
) -> Result<ProfitMoments> {
    if b.is_nan() || b < 0.0 {
        return Err(invalid(format!("bid must be non-negative, got {b}")));
    }
    if ctr_second_moment < ctr_mean * ctr_mean {
        return Err(invalid("E[yhat^2] is below E[yhat]^2"));
    }
    Ok(moments_from_parts(b, v, ctr_mean, ctr_second_moment, mp.partial_moments(b)))
}

/// `E[R(b)] - alpha std[R(b)]`.
pub fn rmp_objective(
    b: f64,
    alpha: f64,
    v: f64,
    ctr: CtrMoments,
    mp: &MarketPriceModel,
) -> Result<f64> {
    let pm = profit_moments(b, v, ctr.mean, ctr.second_moment(), mp)?;
    Ok(pm.expectation - alpha * pm.std())
}

/// Enumerated candidate bids `min, min + step, ...` up to `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl BidGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        let g = Self { min, max, step };
        g.validate()?;
        Ok(g)
    }

    /// `[0, factor * v]` in `steps` equal steps.
    pub fn for_value(v: f64, factor: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("bid grid needs at least one step"));
        }
        Self::new(0.0, factor * v, factor * v / steps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(invalid(format!("bid step must be positive, got {}", self.step)));
        }
        if !(self.min >= 0.0 && self.max >= self.min && self.max.is_finite()) {
            return Err(invalid(format!("bad bid range [{}, {}]", self.min, self.max)));
        }
        Ok(())
    }

    pub fn bids(&self) -> Vec<f64> {
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.min + i as f64 * self.step).collect()
    }
}

/// One point of the risk/return curve traced by the bid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierPoint {
    pub std: f64,
    pub expectation: f64,
    pub bid: f64,
}

/// Picks the point maximizing `E - alpha std`; ties go to the lower bid and
/// a non-positive optimum means not bidding (bid 0).
pub fn tangent_bid(frontier: &[FrontierPoint], alpha: f64) -> f64 {
    let mut best_bid = 0.0;
    let mut best = f64::NEG_INFINITY;
    for p in frontier {
        let o = p.expectation - alpha * p.std;
        if o > best {
            best = o;
            best_bid = p.bid;
        }
    }
    if best > 0.0 {
        best_bid
    } else {
        0.0
    }
}

/// Market moments precomputed on a bid grid, shared by every RMP evaluation
/// against that market.
#[derive(Debug, Clone)]
pub struct RmpSolver {
    grid: BidGrid,
    bids: Vec<f64>,
    z: Vec<PartialMoments>,
}

impl RmpSolver {
    pub fn new(mp: &MarketPriceModel, grid: BidGrid) -> Result<Self> {
        grid.validate()?;
        let bids = grid.bids();
        let z = bids.iter().map(|&b| mp.partial_moments(b)).collect();
        Ok(Self { grid, bids, z })
    }

    pub fn grid(&self) -> BidGrid {
        self.grid
    }

    pub fn frontier(&self, ctr: CtrMoments, v: f64) -> Vec<FrontierPoint> {
        let e2 = ctr.second_moment();
        self.bids
            .iter()
            .zip(&self.z)
            .map(|(&b, &z)| {
                let pm = moments_from_parts(b, v, ctr.mean, e2, z);
                FrontierPoint {
                    std: pm.std(),
                    expectation: pm.expectation,
                    bid: b,
                }
            })
            .collect()
    }

    /// Unscaled RMP bid.
    pub fn best_bid(&self, ctr: CtrMoments, v: f64, alpha: f64) -> f64 {
        tangent_bid(&self.frontier(ctr, v), alpha)
    }
}

/// Risk/return points of every grid bid, ordered by bid.
pub fn efficient_frontier(
    ctr: CtrMoments,
    mp: &MarketPriceModel,
    v: f64,
    grid: BidGrid,
) -> Result<Vec<FrontierPoint>> {
    Ok(RmpSolver::new(mp, grid)?.frontier(ctr, v))
}

/// RMP bid: `phi` times the grid bid maximizing `E[R] - alpha std[R]`.
pub fn bid_rmp(
    ctr: CtrMoments,
    cfg: &StrategyConfig,
    mp: &MarketPriceModel,
    grid: BidGrid,
) -> Result<f64> {
    Ok(cfg.phi * RmpSolver::new(mp, grid)?.best_bid(ctr, cfg.v, cfg.alpha))
}

/// Monte-Carlo estimate of `P(v yhat < z < b)`, the chance that bid `b`
/// wins at a loss.
pub fn negative_profit_prob(
    p: &CtrPosterior,
    mp: &MarketPriceModel,
    v: f64,
    b: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if !(b > 0.0) {
        return Err(invalid(format!("bid must be positive, got {b}")));
    }
    if n == 0 {
        return Err(invalid("at least one sample required"));
    }
    let mut rng = rng::stream(seed, 0);
    let mut hits = 0usize;
    for _ in 0..n {
        let y = p.sample(&mut rng);
        let z = mp.sample_one(&mut rng);
        if v * y < z && z < b {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// How RMP table cells evaluate the profit moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmpMethod {
    /// Closed-form profit moments with quadrature CTR moments.
    ClosedForm { panels: usize },
    /// Shared `(yhat, z)` samples across every enumerated bid.
    MonteCarlo { samples: usize },
}

impl RmpMethod {
    fn tag(&self) -> String {
        match self {
            RmpMethod::ClosedForm { panels } => format!("closed:{panels}"),
            RmpMethod::MonteCarlo { samples } => format!("mc:{samples}"),
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        let (kind, n) = s.split_once(':')?;
        let n: usize = n.parse().ok()?;
        match kind {
            "closed" => Some(RmpMethod::ClosedForm { panels: n }),
            "mc" => Some(RmpMethod::MonteCarlo { samples: n }),
            _ => None,
        }
    }
}

/// Sample-based frontier: every bid reuses the same joint draws.
fn mc_frontier(
    p: &CtrPosterior,
    mp: &MarketPriceModel,
    v: f64,
    bids: &[f64],
    samples: usize,
    seed: u64,
    stream: u64,
) -> Vec<FrontierPoint> {
    let mut rng = rng::stream(seed, stream);
    let mut draws: Vec<(f64, f64)> = (0..samples)
        .map(|_| {
            let y = p.sample(&mut rng);
            (mp.sample_one(&mut rng), v * y)
        })
        .collect();
    draws.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut s1 = Vec::with_capacity(samples + 1);
    let mut s2 = Vec::with_capacity(samples + 1);
    let (mut a1, mut a2) = (0.0, 0.0);
    s1.push(0.0);
    s2.push(0.0);
    for &(z, r) in &draws {
        let profit = r - z;
        a1 += profit;
        a2 += profit * profit;
        s1.push(a1);
        s2.push(a2);
    }
    let n = samples as f64;
    bids.iter()
        .map(|&b| {
            let won = draws.partition_point(|&(z, _)| z < b);
            let e = s1[won] / n;
            let var = (s2[won] / n - e * e).max(0.0);
            FrontierPoint {
                std: var.sqrt(),
                expectation: e,
                bid: b,
            }
        })
        .collect()
}

/// Offline `(m, s2) -> b*` table for one `(alpha, v, market)`; `phi` is
/// applied at bid time.
#[derive(Debug, Clone, PartialEq)]
pub struct RmpBidTable {
    m_grid: Grid,
    s2_grid: Grid,
    bid_grid: BidGrid,
    alpha: f64,
    v: f64,
    seed: u64,
    method: RmpMethod,
    market_digest: String,
    cells: Vec<f64>,
}

const RMP_MAGIC: &[u8] = b"RBBT1\n";

impl RmpBidTable {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        m_grid: Grid,
        s2_grid: Grid,
        bid_grid: BidGrid,
        alpha: f64,
        v: f64,
        mp: &MarketPriceModel,
        method: RmpMethod,
        seed: u64,
    ) -> Result<Self> {
        m_grid.validate()?;
        s2_grid.validate()?;
        if s2_grid.min <= 0.0 {
            return Err(invalid("variance grid must start above zero"));
        }
        StrategyConfig::new(StrategyKind::Rmp, alpha, 1.0, v)?;
        let solver = RmpSolver::new(mp, bid_grid)?;
        let cells = (0..m_grid.bins * s2_grid.bins)
            .into_par_iter()
            .map(|cell| {
                let p = CtrPosterior::new(
                    m_grid.center(cell / s2_grid.bins),
                    s2_grid.center(cell % s2_grid.bins),
                )?;
                Ok(match method {
                    RmpMethod::ClosedForm { panels } => {
                        solver.best_bid(moments_quadrature(&p, panels)?, v, alpha)
                    }
                    RmpMethod::MonteCarlo { samples } => {
                        if samples == 0 {
                            return Err(invalid("at least one sample required"));
                        }
                        let f = mc_frontier(&p, mp, v, &solver.bids, samples, seed, cell as u64);
                        tangent_bid(&f, alpha)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            m_grid,
            s2_grid,
            bid_grid,
            alpha,
            v,
            seed,
            method,
            market_digest: mp.digest(),
            cells,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn bid_grid(&self) -> BidGrid {
        self.bid_grid
    }

    pub fn market_digest(&self) -> &str {
        &self.market_digest
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    /// Unscaled optimal bid at the nearest cell (clamped at the edges).
    pub fn lookup(&self, m: f64, s2: f64) -> f64 {
        let i = self.m_grid.nearest(m);
        let j = self.s2_grid.nearest(s2);
        self.cells[i * self.s2_grid.bins + j]
    }

    fn header(&self) -> String {
        let params = format!(
            "m_min={} m_max={} m_bins={} s2_min={} s2_max={} s2_bins={} bid_min={} bid_max={} bid_step={} alpha={} v={} seed={} method={} market={}",
            fmt_f64(self.m_grid.min),
            fmt_f64(self.m_grid.max),
            self.m_grid.bins,
            fmt_f64(self.s2_grid.min),
            fmt_f64(self.s2_grid.max),
            self.s2_grid.bins,
            fmt_f64(self.bid_grid.min),
            fmt_f64(self.bid_grid.max),
            fmt_f64(self.bid_grid.step),
            fmt_f64(self.alpha),
            fmt_f64(self.v),
            self.seed,
            self.method.tag(),
            self.market_digest,
        );
        format!("{params} digest={}", crate::digest(params.as_bytes()))
    }

    /// `RBBT1` magic, one header line, then one little-endian `f64` bid per
    /// cell in row-major m-then-s2 order.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(RMP_MAGIC)?;
        out.write_all(self.header().as_bytes())?;
        out.write_all(b"\n")?;
        let buf: Vec<u8> = self.cells.iter().flat_map(|c| c.to_le_bytes()).collect();
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Self> {
        const KIND: &str = "RMP bid table";
        let fields = read_table_header(&mut input, RMP_MAGIC, KIND)?;
        let m_grid = header_grid(&fields, "m", KIND)?;
        let s2_grid = header_grid(&fields, "s2", KIND)?;
        let bid_grid = BidGrid {
            min: header_field(&fields, "bid_min", KIND)?,
            max: header_field(&fields, "bid_max", KIND)?,
            step: header_field(&fields, "bid_step", KIND)?,
        };
        bid_grid.validate().map_err(|e| format_err(KIND, e.to_string()))?;
        let method = fields
            .iter()
            .find(|(k, _)| k == "method")
            .and_then(|(_, v)| RmpMethod::from_tag(v))
            .ok_or_else(|| format_err(KIND, "missing or bad method"))?;
        let cells = read_f64s(&mut input, m_grid.bins * s2_grid.bins, KIND)?;
        let table = Self {
            m_grid,
            s2_grid,
            bid_grid,
            alpha: header_field(&fields, "alpha", KIND)?,
            v: header_field(&fields, "v", KIND)?,
            seed: header_field(&fields, "seed", KIND)?,
            method,
            market_digest: header_field(&fields, "market", KIND)?,
            cells,
        };
        check_digest(&fields, &table.header(), KIND)?;
        Ok(table)
    }
}

/// Everything a strategy reads about one bid request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestScore {
    /// CTR from the point model (LR baseline).
    pub point_ctr: f64,
    pub posterior: CtrPosterior,
    pub moments: CtrMoments,
}

/// Where CTR moments come from when scoring requests.
#[derive(Debug, Clone)]
pub enum MomentSource {
    Table(MomentTable),
    Quadrature { panels: usize },
}

impl MomentSource {
    pub fn moments(&self, p: &CtrPosterior) -> Result<CtrMoments> {
        match self {
            MomentSource::Table(t) => Ok(t.lookup(p.m(), p.s2())),
            MomentSource::Quadrature { panels } => moments_quadrature(p, *panels),
        }
    }
}

/// Turns feature vectors into [`RequestScore`]s.
pub struct Scorer<'a> {
    pub model: &'a GaussianWeightModel,
    /// Dense point weights for the LR CTR; `None` uses the posterior means.
    pub point_weights: Option<&'a [f64]>,
    pub moments: &'a MomentSource,
}

impl Scorer<'_> {
    pub fn score(&self, x: &FeatureVector) -> Result<RequestScore> {
        let posterior = self.model.posterior_params(x)?;
        let point_ctr = match self.point_weights {
            Some(w) => predict_with_weights(w, x)?,
            None => self.model.predict_point(x)?,
        };
        Ok(RequestScore {
            point_ctr,
            posterior,
            moments: self.moments.moments(&posterior)?,
        })
    }

    pub fn score_all<'r>(
        &self,
        features: impl IntoParallelIterator<Item = &'r FeatureVector>,
    ) -> Result<Vec<RequestScore>>
    where
        Self: Sync,
    {
        features.into_par_iter().map(|x| self.score(x)).collect()
    }
}

/// Source of unscaled RMP bids.
#[derive(Debug, Clone, Copy)]
pub enum RmpSource<'a> {
    Table(&'a RmpBidTable),
    Direct(&'a RmpSolver),
}

/// A configured strategy ready to bid on scored requests.
#[derive(Debug, Clone, Copy)]
pub struct Bidder<'a> {
    cfg: StrategyConfig,
    rmp: Option<RmpSource<'a>>,
}

impl<'a> Bidder<'a> {
    pub fn new(cfg: StrategyConfig, rmp: Option<RmpSource<'a>>) -> Result<Self> {
        cfg.validate()?;
        match (cfg.kind, rmp) {
            (StrategyKind::Rmp, None) => Err(invalid("RMP bidding needs a bid table or solver")),
            (StrategyKind::Rmp, Some(RmpSource::Table(t))) if t.alpha != cfg.alpha || t.v != cfg.v => {
                Err(invalid(format!(
                    "RMP table built for alpha={}, v={} but strategy has alpha={}, v={}",
                    t.alpha, t.v, cfg.alpha, cfg.v
                )))
            }
            _ => Ok(Self { cfg, rmp }),
        }
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.cfg
    }

    /// Bid with `phi = 1`; [`Bidder::bid`] is `phi` times this.
    pub fn unscaled_bid(&self, s: &RequestScore) -> f64 {
        let c = &self.cfg;
        match c.kind {
            StrategyKind::Lr => (c.v * s.point_ctr).max(0.0),
            StrategyKind::Var => (c.v * (s.moments.mean - c.alpha * s.moments.std)).max(0.0),
            StrategyKind::Rmp => match self.rmp.expect("checked in Bidder::new") {
                RmpSource::Table(t) => t.lookup(s.posterior.m(), s.posterior.s2()),
                RmpSource::Direct(solver) => solver.best_bid(s.moments, c.v, c.alpha),
            },
        }
    }

    pub fn bid(&self, s: &RequestScore) -> f64 {
        self.cfg.phi * self.unscaled_bid(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctr_distribution::REFERENCE_PANELS;

    fn fig2() -> (CtrPosterior, CtrMoments, MarketPriceModel) {
        let p = CtrPosterior::new(-1.0, 1.0 / 3.0).unwrap();
        let m = moments_quadrature(&p, REFERENCE_PANELS).unwrap();
        (p, m, MarketPriceModel::lognormal(4.0, 0.5).unwrap())
    }

    fn cfg(kind: StrategyKind, alpha: f64, phi: f64) -> StrategyConfig {
        StrategyConfig::new(kind, alpha, phi, 300.0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(StrategyConfig::new(StrategyKind::Lr, 0.0, 0.0, 1.0).is_err());
        assert!(StrategyConfig::new(StrategyKind::Lr, 0.0, 1.0, 0.0).is_err());
        assert!(StrategyConfig::new(StrategyKind::Var, f64::NAN, 1.0, 1.0).is_err());
        assert_eq!("RMP".parse::<StrategyKind>().unwrap(), StrategyKind::Rmp);
        assert!("kelly".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn lr_bid_values() {
        let c = cfg(StrategyKind::Lr, 0.0, 1.0);
        assert!((bid_lr(0.283, &c) - 84.9).abs() < 1e-9);
        assert_eq!(bid_lr(0.0, &c), 0.0);
        let c2 = cfg(StrategyKind::Lr, 0.0, 2.0);
        assert_eq!(bid_lr(0.1, &c2), 2.0 * bid_lr(0.1, &c));
    }

    #[test]
    fn var_bid_fig2() {
        let (_, m, _) = fig2();
        // Quadrature moments of (-1, 1/3): mean 0.282566, std 0.111311.
        assert!((m.mean - 0.282_566_150_5).abs() < 1e-8);
        assert!((m.std - 0.111_311_365_3).abs() < 1e-8);
        let b = bid_var(m, &cfg(StrategyKind::Var, 1.0, 1.0));
        assert!((b - 300.0 * (0.282_566_150_5 - 0.111_311_365_3)).abs() < 1e-5, "{b}");
        let b0 = bid_var(m, &cfg(StrategyKind::Var, 0.0, 1.0));
        assert_eq!(b0, bid_lr(m.mean, &cfg(StrategyKind::Lr, 0.0, 1.0)));
    }

    #[test]
    fn var_bid_decreases_then_clamps() {
        let (_, m, _) = fig2();
        let bids: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 2.5, 3.0, 10.0]
            .iter()
            .map(|&a| bid_var(m, &cfg(StrategyKind::Var, a, 1.0)))
            .collect();
        assert!(bids.windows(2).all(|w| w[1] < w[0] || (w[1] == 0.0 && w[0] == 0.0)));
        assert_eq!(*bids.last().unwrap(), 0.0);
    }

    #[test]
    fn profit_moments_edge_cases() {
        let (_, m, mp) = fig2();
        let z = profit_moments(0.0, 300.0, m.mean, m.second_moment(), &mp).unwrap();
        assert_eq!((z.expectation, z.variance), (0.0, 0.0));
        assert!(profit_moments(10.0, 300.0, 0.5, 0.2, &mp).is_err());

        // Degenerate CTR and an unbounded bid: variance is the market's.
        let pm = profit_moments(f64::INFINITY, 300.0, 0.3, 0.09, &mp).unwrap();
        assert!((pm.variance - mp.variance()).abs() < 1e-9 * mp.variance());
        assert!((pm.expectation - (90.0 - mp.mean())).abs() < 1e-9);
    }

    #[test]
    fn rmp_objective_edges() {
        let (_, m, mp) = fig2();
        let e = profit_moments(84.0, 300.0, m.mean, m.second_moment(), &mp).unwrap();
        assert_eq!(rmp_objective(84.0, 0.0, 300.0, m, &mp).unwrap(), e.expectation);
        for a in [-1.0, 0.0, 2.0] {
            assert_eq!(rmp_objective(0.0, a, 300.0, m, &mp).unwrap(), 0.0);
        }
    }

    #[test]
    fn expectation_rises_then_falls() {
        let (_, m, mp) = fig2();
        let grid = BidGrid::for_value(300.0, 3.0, 1000).unwrap();
        let f = efficient_frontier(m, &mp, 300.0, grid).unwrap();
        let peak = f
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.expectation.total_cmp(&b.1.expectation))
            .unwrap()
            .0;
        assert!(f[..=peak].windows(2).all(|w| w[1].expectation >= w[0].expectation));
        assert!(f[peak..].windows(2).all(|w| w[1].expectation <= w[0].expectation));
        assert!((f[peak].bid - 300.0 * m.mean).abs() <= grid.step);
        assert_eq!((f[0].std, f[0].expectation, f[0].bid), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rmp_recovers_truth_telling_at_zero_alpha() {
        let (_, m, mp) = fig2();
        let grid = BidGrid::for_value(300.0, 3.0, 1000).unwrap();
        let b = bid_rmp(m, &cfg(StrategyKind::Rmp, 0.0, 1.0), &mp, grid).unwrap();
        assert!((b - 300.0 * m.mean).abs() <= grid.step);
        let b2 = bid_rmp(m, &cfg(StrategyKind::Rmp, 0.0, 2.0), &mp, grid).unwrap();
        assert_eq!(b2, 2.0 * b);
    }

    #[test]
    fn rmp_matches_fine_grid_search() {
        let (_, m, mp) = fig2();
        let coarse = BidGrid::for_value(300.0, 3.0, 1000).unwrap();
        let fine = BidGrid::for_value(300.0, 3.0, 10_000).unwrap();
        for alpha in [0.25, 0.5, 1.0] {
            let c = cfg(StrategyKind::Rmp, alpha, 1.0);
            let b = bid_rmp(m, &c, &mp, coarse).unwrap();
            // Brute force over the finer grid with the objective function itself.
            let mut best = (0.0, f64::NEG_INFINITY);
            for bid in fine.bids() {
                let o = rmp_objective(bid, alpha, 300.0, m, &mp).unwrap();
                if o > best.1 {
                    best = (bid, o);
                }
            }
            let expected = if best.1 > 0.0 { best.0 } else { 0.0 };
            assert!((b - expected).abs() <= coarse.step, "alpha {alpha}: {b} vs {expected}");
            assert!(b < 300.0 * m.mean);
        }
        // With this much CTR spread, alpha = 1 already prices every bid below
        // zero, so the strategy abstains.
        assert_eq!(bid_rmp(m, &cfg(StrategyKind::Rmp, 1.0, 1.0), &mp, coarse).unwrap(), 0.0);
        assert!(bid_rmp(m, &cfg(StrategyKind::Rmp, 0.5, 1.0), &mp, coarse).unwrap() > 70.0);
    }

    #[test]
    fn rmp_no_bid_when_objective_never_positive() {
        let (_, m, mp) = fig2();
        // Grid entirely above the truth-telling bid and heavy risk aversion.
        let grid = BidGrid::new(200.0, 400.0, 1.0).unwrap();
        let b = bid_rmp(m, &cfg(StrategyKind::Rmp, 3.0, 1.0), &mp, grid).unwrap();
        assert_eq!(b, 0.0);
        // Grid starting above zero: the grid minimum is returned when it pays.
        let grid = BidGrid::new(60.0, 400.0, 1.0).unwrap();
        let risk_seeking = m;
        let b = bid_rmp(risk_seeking, &cfg(StrategyKind::Rmp, 0.0, 1.0), &mp, grid).unwrap();
        assert!((b - 300.0 * m.mean).abs() <= 1.0);
        let tiny = CtrMoments { mean: 0.05, std: 0.01 };
        let b = bid_rmp(tiny, &cfg(StrategyKind::Rmp, 0.0, 1.0), &mp, grid).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn tangent_ties_prefer_lower_bid() {
        let f = [
            FrontierPoint { std: 0.0, expectation: 0.0, bid: 0.0 },
            FrontierPoint { std: 1.0, expectation: 5.0, bid: 1.0 },
            FrontierPoint { std: 1.0, expectation: 5.0, bid: 2.0 },
        ];
        assert_eq!(tangent_bid(&f, 0.0), 1.0);
        assert_eq!(tangent_bid(&f, 10.0), 0.0);
    }

    #[test]
    fn negative_profit_vanishes_for_tiny_bids() {
        let (p, _, mp) = fig2();
        assert_eq!(negative_profit_prob(&p, &mp, 300.0, 1e-3, 10_000, 1).unwrap(), 0.0);
        assert!(negative_profit_prob(&p, &mp, 300.0, 0.0, 10, 1).is_err());
        let a = negative_profit_prob(&p, &mp, 300.0, 84.0, 10_000, 5).unwrap();
        assert_eq!(a, negative_profit_prob(&p, &mp, 300.0, 84.0, 10_000, 5).unwrap());
    }

    #[test]
    fn one_cell_rmp_table_equals_direct_bid() {
        let (_, _, mp) = fig2();
        let m = Grid::new(-1.5, -0.5, 1).unwrap();
        let s = Grid::new(0.2, 0.4666666666666667, 1).unwrap();
        let grid = BidGrid::for_value(300.0, 3.0, 1000).unwrap();
        let t = RmpBidTable::build(m, s, grid, 1.0, 300.0, &mp, RmpMethod::ClosedForm { panels: 2000 }, 0)
            .unwrap();
        let p = CtrPosterior::new(m.center(0), s.center(0)).unwrap();
        let direct = bid_rmp(
            moments_quadrature(&p, 2000).unwrap(),
            &cfg(StrategyKind::Rmp, 1.0, 1.0),
            &mp,
            grid,
        )
        .unwrap();
        assert_eq!(t.lookup(-1.0, 0.3), direct);
    }

    #[test]
    fn mc_table_close_to_closed_form() {
        let (_, _, mp) = fig2();
        let m = Grid::new(-2.0, 0.0, 2).unwrap();
        let s = Grid::new(0.1, 1.1, 2).unwrap();
        let grid = BidGrid::for_value(300.0, 3.0, 300).unwrap();
        let closed =
            RmpBidTable::build(m, s, grid, 0.5, 300.0, &mp, RmpMethod::ClosedForm { panels: 1000 }, 0)
                .unwrap();
        let mc = RmpBidTable::build(m, s, grid, 0.5, 300.0, &mp, RmpMethod::MonteCarlo { samples: 200_000 }, 3)
            .unwrap();
        for (a, b) in closed.cells().iter().zip(mc.cells()) {
            assert!((a - b).abs() <= 6.0 * grid.step, "{a} vs {b}");
        }
    }

    #[test]
    fn rmp_table_file_round_trip() {
        let (_, _, mp) = fig2();
        let m = Grid::new(-3.0, 0.0, 3).unwrap();
        let s = Grid::new(0.1, 2.0, 2).unwrap();
        let grid = BidGrid::for_value(300.0, 3.0, 100).unwrap();
        let t = RmpBidTable::build(m, s, grid, 1.0, 300.0, &mp, RmpMethod::ClosedForm { panels: 200 }, 9)
            .unwrap();
        let mut bytes = Vec::new();
        t.write(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"RBBT1\n"));
        assert_eq!(RmpBidTable::read(&bytes[..]).unwrap(), t);
        let grid_bids = grid.bids();
        assert!(t.cells().iter().all(|b| *b == 0.0 || grid_bids.contains(b)));
    }

    #[test]
    fn bidder_checks_rmp_source() {
        let (_, _, mp) = fig2();
        assert!(Bidder::new(cfg(StrategyKind::Rmp, 1.0, 1.0), None).is_err());
        let m = Grid::new(-3.0, 0.0, 1).unwrap();
        let s = Grid::new(0.1, 2.0, 1).unwrap();
        let grid = BidGrid::for_value(300.0, 3.0, 10).unwrap();
        let t = RmpBidTable::build(m, s, grid, 1.0, 300.0, &mp, RmpMethod::ClosedForm { panels: 200 }, 0)
            .unwrap();
        assert!(Bidder::new(cfg(StrategyKind::Rmp, 2.0, 1.0), Some(RmpSource::Table(&t))).is_err());
        assert!(Bidder::new(cfg(StrategyKind::Rmp, 1.0, 1.5), Some(RmpSource::Table(&t))).is_ok());
    }
}
