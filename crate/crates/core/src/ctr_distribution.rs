//! The predicted-CTR distribution `yhat = sigmoid(a)`, `a ~ N(m, s2)`.
//!
//! Provides the closed-form density, its first two moments by quadrature on
//! the logit scale and by Monte Carlo, and an offline `(m, s2) -> (mean, std)`
//! lookup table.

use std::f64::consts::PI;
use std::io::{BufRead, Read, Write};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::ctr_model::{fmt_f64, logit, sigmoid};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Gaussian parameters of the logit `a` for one bid request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtrPosterior {
    m: f64,
    s2: f64,
}

impl CtrPosterior {
    pub fn new(m: f64, s2: f64) -> Result<Self> {
        if !m.is_finite() {
            return Err(invalid(format!("logit mean must be finite, got {m}")));
        }
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(invalid(format!("logit variance must be positive, got {s2}")));
        }
        Ok(Self { m, s2 })
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    /// Density of `yhat` at `yhat` in `(0, 1)`.
    pub fn pdf(&self, yhat: f64) -> Result<f64> {
        if !(yhat > 0.0 && yhat < 1.0) {
            return Err(invalid(format!("yhat must lie in (0, 1), got {yhat}")));
        }
        let d = logit(yhat) - self.m;
        let jac = yhat - yhat * yhat;
        Ok((-d * d / (2.0 * self.s2)).exp() / (jac * (2.0 * PI * self.s2).sqrt()))
    }

    /// Draws `yhat` samples.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        sigmoid(self.m + self.s2.sqrt() * z)
    }
}

/// Mean and standard deviation of `yhat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtrMoments {
    pub mean: f64,
    pub std: f64,
}

impl CtrMoments {
    /// `E[yhat^2]`.
    pub fn second_moment(&self) -> f64 {
        self.std * self.std + self.mean * self.mean
    }
}

/// Reference panel count for [`moments_quadrature`].
pub const REFERENCE_PANELS: usize = 10_000;

/// Half-width of the logit integration window, in standard deviations.
const WINDOW_SIGMAS: f64 = 12.0;

/// Moments of `yhat` by composite Simpson quadrature of `sigmoid(u)` against
/// the Gaussian on the logit scale. `panels` is rounded up to an even count.
pub fn moments_quadrature(p: &CtrPosterior, panels: usize) -> Result<CtrMoments> {
    if panels < 100 {
        return Err(invalid(format!("at least 100 panels required, got {panels}")));
    }
    let n = panels + panels % 2;
    let s = p.s2.sqrt();
    let lo = p.m - WINDOW_SIGMAS * s;
    let h = 2.0 * WINDOW_SIGMAS * s / n as f64;
    let (mut w_sum, mut e1, mut e2) = (0.0, 0.0, 0.0);
    for j in 0..=n {
        let coef = if j == 0 || j == n {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let u = lo + h * j as f64;
        let z = (u - p.m) / s;
        let w = coef * (-0.5 * z * z).exp();
        let y = sigmoid(u);
        w_sum += w;
        e1 += w * y;
        e2 += w * y * y;
    }
    let mean = e1 / w_sum;
    let var = (e2 / w_sum - mean * mean).max(0.0);
    Ok(CtrMoments {
        mean,
        std: var.sqrt(),
    })
}

/// Sample mean and standard deviation of `n` draws of `yhat`.
pub fn moments_mc(p: &CtrPosterior, n: usize, seed: u64) -> Result<CtrMoments> {
    moments_mc_stream(p, n, seed, 0)
}

fn moments_mc_stream(p: &CtrPosterior, n: usize, seed: u64, stream: u64) -> Result<CtrMoments> {
    if n == 0 {
        return Err(invalid("at least one sample required"));
    }
    let mut rng = rng::stream(seed, stream);
    // Welford's running update keeps the variance stable for tiny spreads.
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..n {
        let y = p.sample(&mut rng);
        let d = y - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (y - mean);
    }
    let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
    Ok(CtrMoments { mean, std })
}

/// A uniform grid of `bins` cells over `[min, max]`, keyed by cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
}

impl Grid {
    pub fn new(min: f64, max: f64, bins: usize) -> Result<Self> {
        let g = Self { min, max, bins };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(invalid("grid needs at least one bin"));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(invalid(format!(
                "grid range must be increasing, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.bins as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.width()
    }

    /// Index of the cell whose center is nearest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let t = ((x - self.min) / self.width()).floor();
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(self.bins - 1)
        }
    }

    fn header(&self, prefix: &str) -> String {
        format!(
            "{prefix}_min={} {prefix}_max={} {prefix}_bins={}",
            fmt_f64(self.min),
            fmt_f64(self.max),
            self.bins
        )
    }
}

/// How table cells are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentMethod {
    Quadrature { panels: usize },
    MonteCarlo { samples: usize },
}

impl MomentMethod {
    pub fn compute(&self, p: &CtrPosterior, seed: u64, stream: u64) -> Result<CtrMoments> {
        match *self {
            MomentMethod::Quadrature { panels } => moments_quadrature(p, panels),
            MomentMethod::MonteCarlo { samples } => moments_mc_stream(p, samples, seed, stream),
        }
    }

    pub(crate) fn tag(&self) -> String {
        match self {
            MomentMethod::Quadrature { panels } => format!("quadrature:{panels}"),
            MomentMethod::MonteCarlo { samples } => format!("mc:{samples}"),
        }
    }

    pub(crate) fn from_tag(s: &str) -> Option<Self> {
        let (kind, n) = s.split_once(':')?;
        let n: usize = n.parse().ok()?;
        match kind {
            "quadrature" => Some(MomentMethod::Quadrature { panels: n }),
            "mc" => Some(MomentMethod::MonteCarlo { samples: n }),
            _ => None,
        }
    }
}

/// Precomputed `(m, s2) -> (E[yhat], std[yhat])` table.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    m_grid: Grid,
    s2_grid: Grid,
    method: MomentMethod,
    seed: u64,
    cells: Vec<CtrMoments>,
}

const MOMENT_MAGIC: &[u8] = b"RBMT1\n";

impl MomentTable {
    /// Fills every cell with the moments at its center. Cells draw from their
    /// own random stream, so the result does not depend on thread scheduling.
    pub fn build(m_grid: Grid, s2_grid: Grid, method: MomentMethod, seed: u64) -> Result<Self> {
        m_grid.validate()?;
        s2_grid.validate()?;
        if s2_grid.min <= 0.0 {
            return Err(invalid("variance grid must start above zero"));
        }
        let cells = (0..m_grid.bins * s2_grid.bins)
            .into_par_iter()
            .map(|cell| {
                let p = CtrPosterior::new(
                    m_grid.center(cell / s2_grid.bins),
                    s2_grid.center(cell % s2_grid.bins),
                )?;
                method.compute(&p, seed, cell as u64)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            m_grid,
            s2_grid,
            method,
            seed,
            cells,
        })
    }

    pub fn m_grid(&self) -> Grid {
        self.m_grid
    }

    pub fn s2_grid(&self) -> Grid {
        self.s2_grid
    }

    pub fn method(&self) -> MomentMethod {
        self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cells(&self) -> &[CtrMoments] {
        &self.cells
    }

    /// Constant-time lookup at the nearest cell center; out-of-range keys
    /// clamp to the edge cells.
    pub fn lookup(&self, m: f64, s2: f64) -> CtrMoments {
        let i = self.m_grid.nearest(m);
        let j = self.s2_grid.nearest(s2);
        self.cells[i * self.s2_grid.bins + j]
    }

    fn header(&self) -> String {
        let params = format!(
            "{} {} seed={} method={}",
            self.m_grid.header("m"),
            self.s2_grid.header("s2"),
            self.seed,
            self.method.tag()
        );
        format!("{params} digest={}", crate::digest(params.as_bytes()))
    }

    /// `RBMT1` magic, one header line, then `(E, std)` little-endian `f64`
    /// pairs in row-major m-then-s2 order.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MOMENT_MAGIC)?;
        out.write_all(self.header().as_bytes())?;
        out.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.cells.len() * 16);
        for c in &self.cells {
            buf.extend_from_slice(&c.mean.to_le_bytes());
            buf.extend_from_slice(&c.std.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Self> {
        let fields = read_table_header(&mut input, MOMENT_MAGIC, "moment table")?;
        let m_grid = header_grid(&fields, "m", "moment table")?;
        let s2_grid = header_grid(&fields, "s2", "moment table")?;
        let seed = header_field(&fields, "seed", "moment table")?;
        let method = fields
            .iter()
            .find(|(k, _)| k == "method")
            .and_then(|(_, v)| MomentMethod::from_tag(v))
            .ok_or_else(|| format_err("moment table", "missing or bad method"))?;
        let n = m_grid.bins * s2_grid.bins;
        let raw = read_f64s(&mut input, 2 * n, "moment table")?;
        let cells = raw
            .chunks_exact(2)
            .map(|c| CtrMoments {
                mean: c[0],
                std: c[1],
            })
            .collect();
        let table = Self {
            m_grid,
            s2_grid,
            method,
            seed,
            cells,
        };
        check_digest(&fields, &table.header(), "moment table")?;
        Ok(table)
    }
}

pub(crate) fn format_err(kind: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        kind,
        message: msg.into(),
    }
}

pub(crate) fn read_table_header<R: BufRead>(
    input: &mut R,
    magic: &[u8],
    kind: &'static str,
) -> Result<Vec<(String, String)>> {
    let mut m = vec![0u8; magic.len()];
    input
        .read_exact(&mut m)
        .map_err(|_| format_err(kind, "truncated magic"))?;
    if m != magic {
        return Err(format_err(kind, "bad magic"));
    }
    let mut line = String::new();
    input.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(format_err(kind, "truncated header"));
    }
    line.trim_end()
        .split(' ')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format_err(kind, format!("bad header field {kv:?}")))
        })
        .collect()
}

pub(crate) fn header_field<T: std::str::FromStr>(
    fields: &[(String, String)],
    key: &str,
    kind: &'static str,
) -> Result<T> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| format_err(kind, format!("missing or bad header field {key}")))
}

pub(crate) fn header_grid(
    fields: &[(String, String)],
    prefix: &str,
    kind: &'static str,
) -> Result<Grid> {
    let g = Grid {
        min: header_field(fields, &format!("{prefix}_min"), kind)?,
        max: header_field(fields, &format!("{prefix}_max"), kind)?,
        bins: header_field(fields, &format!("{prefix}_bins"), kind)?,
    };
    g.validate().map_err(|e| format_err(kind, e.to_string()))?;
    Ok(g)
}

pub(crate) fn check_digest(
    fields: &[(String, String)],
    rebuilt_header: &str,
    kind: &'static str,
) -> Result<()> {
    let stored: String = header_field(fields, "digest", kind)?;
    let expected = rebuilt_header.rsplit("digest=").next().unwrap_or_default();
    if stored != expected {
        return Err(format_err(kind, "header digest mismatch"));
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, n: usize, kind: &'static str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    input
        .read_exact(&mut buf)
        .map_err(|_| format_err(kind, format!("expected {n} cell values")))?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(format_err(kind, "trailing bytes after cells"));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
