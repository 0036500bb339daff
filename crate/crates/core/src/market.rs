//! Market-price distribution `p_z`: log-normal fit or empirical histogram.
//!
//! The quantities the bidding strategies need are the truncated moments
//! `z_k(b) = integral_0^b z^k p_z(z) dz` for `k = 0, 1, 2`; `z_0(b)` is the
//! probability of winning with bid `b` under the strict rule `z < b`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use crate::ctr_model::{fmt_f64, parse_f64};
use crate::error::{invalid, parse_err, Error, Result};
use crate::rng;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `(z_0, z_1, z_2)` at one bid.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PartialMoments {
    pub z0: f64,
    pub z1: f64,
    pub z2: f64,
}

/// Histogram with unit-width integer bins; bin `j` holds prices that round
/// to `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceHistogram {
    counts: Vec<u64>,
    total: u64,
    /// Prefix sums of `j^k * mass_j`, `prefix[k][n]` covering bins `0..n`.
    prefix: [Vec<f64>; 3],
}

impl PriceHistogram {
    fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let mut prefix = [
            Vec::with_capacity(counts.len() + 1),
            Vec::with_capacity(counts.len() + 1),
            Vec::with_capacity(counts.len() + 1),
        ];
        let mut acc = [0.0; 3];
        for p in prefix.iter_mut() {
            p.push(0.0);
        }
        for (j, &c) in counts.iter().enumerate() {
            let mass = c as f64 / total as f64;
            let z = j as f64;
            acc[0] += mass;
            acc[1] += z * mass;
            acc[2] += z * z * mass;
            for k in 0..3 {
                prefix[k].push(acc[k]);
            }
        }
        Self {
            counts,
            total,
            prefix,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn z_max(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn mass(&self, bin: usize) -> f64 {
        self.counts.get(bin).map_or(0.0, |&c| c as f64 / self.total as f64)
    }

    /// Number of bins `j` with `j < b`.
    fn bins_below(&self, b: f64) -> usize {
        if b <= 0.0 {
            0
        } else {
            let n = b.ceil();
            if n >= self.counts.len() as f64 {
                self.counts.len()
            } else {
                n as usize
            }
        }
    }
}

/// Distribution of the winning (market) price.
#[derive(Debug, Clone, PartialEq)]
pub enum MarketPriceModel {
    /// `ln z ~ N(mu, sigma^2)`.
    LogNormal { mu: f64, sigma: f64, samples: u64 },
    Empirical(PriceHistogram),
}

impl MarketPriceModel {
    pub fn lognormal(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(invalid("log-normal mu must be finite"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("log-normal sigma must be positive, got {sigma}")));
        }
        Ok(MarketPriceModel::LogNormal {
            mu,
            sigma,
            samples: 0,
        })
    }

    /// Maximum-likelihood log-normal fit: mean and (population) standard
    /// deviation of `ln z`. Zero prices carry no information about `ln z` and
    /// are skipped.
    pub fn fit_lognormal(prices: &[f64]) -> Result<Self> {
        check_prices(prices)?;
        let logs: Vec<f64> = prices.iter().filter(|&&z| z > 0.0).map(|z| z.ln()).collect();
        if logs.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "log-normal fit needs at least 2 positive prices, got {}",
                logs.len()
            )));
        }
        let n = logs.len() as f64;
        let mu = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n;
        let sigma = var.sqrt();
        if !(sigma > 1e-12) {
            return Err(Error::InsufficientVariance(
                "all positive prices are equal; log-normal sigma would be zero".into(),
            ));
        }
        Ok(MarketPriceModel::LogNormal {
            mu,
            sigma,
            samples: logs.len() as u64,
        })
    }

    /// Normalized histogram over `[0, round(max price)]`.
    pub fn fit_empirical(prices: &[f64]) -> Result<Self> {
        check_prices(prices)?;
        if prices.is_empty() {
            return Err(Error::InsufficientData("no prices to fit".into()));
        }
        let max = prices.iter().fold(0.0f64, |a, &b| a.max(b));
        let mut counts = vec![0u64; max.round() as usize + 1];
        for &z in prices {
            counts[z.round() as usize] += 1;
        }
        Ok(MarketPriceModel::Empirical(PriceHistogram::from_counts(counts)))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MarketPriceModel::LogNormal { .. } => "lognormal",
            MarketPriceModel::Empirical(_) => "empirical",
        }
    }

    /// Truncated moment `z_k(b)` for `k` in `{0, 1, 2}`.
    pub fn partial_moment(&self, b: f64, k: u32) -> Result<f64> {
        if k > 2 {
            return Err(invalid(format!("partial moment order must be 0, 1 or 2, got {k}")));
        }
        if b.is_nan() || b < 0.0 {
            return Err(invalid(format!("bid must be non-negative, got {b}")));
        }
        let pm = self.partial_moments(b);
        Ok([pm.z0, pm.z1, pm.z2][k as usize])
    }

    /// All three truncated moments at `b` (`b <= 0` gives zeros).
    pub fn partial_moments(&self, b: f64) -> PartialMoments {
        if !(b > 0.0) {
            return PartialMoments::default();
        }
        match self {
            MarketPriceModel::LogNormal { mu, sigma, .. } => {
                let lb = b.ln();
                let s2 = sigma * sigma;
                let term = |k: f64| {
                    (k * mu + k * k * s2 / 2.0).exp() * normal_cdf((lb - mu - k * s2) / sigma)
                };
                PartialMoments {
                    z0: term(0.0),
                    z1: term(1.0),
                    z2: term(2.0),
                }
            }
            MarketPriceModel::Empirical(h) => {
                let n = h.bins_below(b);
                PartialMoments {
                    z0: h.prefix[0][n],
                    z1: h.prefix[1][n],
                    z2: h.prefix[2][n],
                }
            }
        }
    }

    /// `P(z < b)`.
    pub fn win_probability(&self, b: f64) -> f64 {
        self.partial_moments(b).z0
    }

    /// Density at `z` for the log-normal model; `None` for histograms.
    pub fn density(&self, z: f64) -> Option<f64> {
        match *self {
            MarketPriceModel::LogNormal { mu, sigma, .. } => Some(if z <= 0.0 {
                0.0
            } else {
                let d = (z.ln() - mu) / sigma;
                (-0.5 * d * d).exp() / (z * sigma * (2.0 * PI).sqrt())
            }),
            MarketPriceModel::Empirical(_) => None,
        }
    }

    pub fn mean(&self) -> f64 {
        self.partial_moments(f64::INFINITY).z1
    }

    pub fn variance(&self) -> f64 {
        let pm = self.partial_moments(f64::INFINITY);
        (pm.z2 - pm.z1 * pm.z1).max(0.0)
    }

    /// Draws one price.
    pub fn sample_one<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        match self {
            MarketPriceModel::LogNormal { mu, sigma, .. } => {
                let e: f64 = StandardNormal.sample(rng);
                (mu + sigma * e).exp()
            }
            MarketPriceModel::Empirical(h) => {
                let u: f64 = rng.random();
                let cdf = &h.prefix[0][1..];
                cdf.partition_point(|&c| c <= u).min(h.counts.len() - 1) as f64
            }
        }
    }

    /// `n` prices from stream 0 of `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(invalid("at least one sample required"));
        }
        let mut rng = rng::stream(seed, 0);
        Ok((0..n).map(|_| self.sample_one(&mut rng)).collect())
    }

    /// Text form: a header line `lognormal<TAB>mu<TAB>sigma<TAB>samples` or
    /// `empirical<TAB>z_max<TAB>samples`, followed for histograms by one
    /// `bin<TAB>count` line per non-empty bin.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            MarketPriceModel::LogNormal { mu, sigma, samples } => {
                writeln!(s, "lognormal\t{}\t{}\t{samples}", fmt_f64(*mu), fmt_f64(*sigma)).unwrap();
            }
            MarketPriceModel::Empirical(h) => {
                writeln!(s, "empirical\t{}\t{}", h.z_max(), h.total).unwrap();
                for (j, &c) in h.counts.iter().enumerate().filter(|(_, &c)| c > 0) {
                    writeln!(s, "{j}\t{c}").unwrap();
                }
            }
        }
        s
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty market file"))??;
        let h: Vec<&str> = header.split('\t').collect();
        match h.as_slice() {
            ["lognormal", mu, sigma, samples] => {
                let mu = parse_f64(mu, 1)?;
                let sigma = parse_f64(sigma, 1)?;
                let samples = samples.parse().map_err(|_| parse_err(1, "bad sample count"))?;
                match Self::lognormal(mu, sigma).map_err(|e| parse_err(1, e.to_string()))? {
                    MarketPriceModel::LogNormal { mu, sigma, .. } => {
                        Ok(MarketPriceModel::LogNormal { mu, sigma, samples })
                    }
                    MarketPriceModel::Empirical(_) => unreachable!(),
                }
            }
            ["empirical", z_max, total] => {
                let z_max: usize = z_max.parse().map_err(|_| parse_err(1, "bad z_max"))?;
                let total: u64 = total.parse().map_err(|_| parse_err(1, "bad sample count"))?;
                let mut counts = vec![0u64; z_max + 1];
                for (n, line) in lines.enumerate() {
                    let lineno = n + 2;
                    let line = line?;
                    if line.is_empty() {
                        continue;
                    }
                    let (j, c) = line
                        .split_once('\t')
                        .ok_or_else(|| parse_err(lineno, "expected bin<TAB>count"))?;
                    let j: usize = j.parse().map_err(|_| parse_err(lineno, "bad bin"))?;
                    let c: u64 = c.parse().map_err(|_| parse_err(lineno, "bad count"))?;
                    *counts
                        .get_mut(j)
                        .ok_or_else(|| parse_err(lineno, "bin beyond z_max"))? = c;
                }
                if counts.iter().sum::<u64>() != total || total == 0 {
                    return Err(parse_err(1, "histogram counts do not match sample count"));
                }
                Ok(MarketPriceModel::Empirical(PriceHistogram::from_counts(counts)))
            }
            _ => Err(parse_err(1, "unknown market model header")),
        }
    }

    /// Short content hash identifying the model.
    pub fn digest(&self) -> String {
        crate::digest(self.to_text().as_bytes())
    }
}

fn check_prices(prices: &[f64]) -> Result<()> {
    match prices.iter().find(|z| !(z.is_finite() && **z >= 0.0)) {
        Some(z) => Err(invalid(format!("market prices must be finite and non-negative, got {z}"))),
        None => Ok(()),
    }
}
