//! Online Bayesian logistic regression over sparse binary features.
//!
//! Each weight carries an independent Gaussian posterior `N(mu_i, 1/q_i)`.
//! Observing a labelled request moves the means by one stochastic gradient
//! step on the per-instance log posterior and grows the precisions of the
//! active features by the logistic curvature `p(1 - p)`, which is the diagonal
//! of the Laplace-approximate Hessian.
//!
//! Features that were never updated are not stored: they read as the prior
//! `(mu0, q0)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;

use crate::ctr_distribution::CtrPosterior;
use crate::error::{invalid, parse_err, Error, Result};
use crate::rng;
use crate::simulator::LogRecord;

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// A set of active binary features inside a feature space of fixed size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    indices: Vec<u32>,
    dimension: usize,
}

impl FeatureVector {
    /// Builds a feature vector; indices are sorted and must be unique and
    /// below `dimension`.
    pub fn new(mut indices: Vec<u32>, dimension: usize) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(invalid(format!("duplicate feature id {}", w[0])));
        }
        if let Some(&last) = indices.last() {
            if last as usize >= dimension {
                return Err(invalid(format!(
                    "feature id {last} outside dimension {dimension}"
                )));
            }
        }
        Ok(Self { indices, dimension })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Posterior over one weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightPosterior {
    pub mu: f64,
    /// Precision (reciprocal variance), always positive.
    pub q: f64,
}

/// Diagonal-Gaussian posterior over the CTR model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeightModel {
    dimension: usize,
    mu0: f64,
    q0: f64,
    weights: HashMap<u32, WeightPosterior>,
}

impl GaussianWeightModel {
    /// Model in which every feature reads the prior `(mu0, q0)`.
    pub fn new(dimension: usize, mu0: f64, q0: f64) -> Result<Self> {
        if !(q0 > 0.0 && q0.is_finite()) {
            return Err(invalid(format!("prior precision must be positive, got {q0}")));
        }
        if !mu0.is_finite() {
            return Err(invalid("prior mean must be finite"));
        }
        Ok(Self {
            dimension,
            mu0,
            q0,
            weights: HashMap::new(),
        })
    }

    /// Warm start from a point estimate: `mu = point_weights`, every
    /// precision `q0`.
    pub fn from_point_estimate(point_weights: &[f64], q0: f64) -> Result<Self> {
        let mut model = Self::new(point_weights.len(), 0.0, q0)?;
        for (i, &w) in point_weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(invalid(format!("point weight {i} is not finite")));
            }
            // Zero weights coincide with the prior and stay implicit.
            if w != 0.0 {
                model.weights.insert(i as u32, WeightPosterior { mu: w, q: q0 });
            }
        }
        Ok(model)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    pub fn q0(&self) -> f64 {
        self.q0
    }

    /// Number of features with a stored (non-prior) posterior.
    pub fn materialized(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, id: u32) -> WeightPosterior {
        self.weights.get(&id).copied().unwrap_or(WeightPosterior {
            mu: self.mu0,
            q: self.q0,
        })
    }

    /// Stored posteriors sorted by feature id.
    pub fn entries(&self) -> Vec<(u32, WeightPosterior)> {
        let mut out: Vec<_> = self.weights.iter().map(|(&k, &v)| (k, v)).collect();
        out.sort_unstable_by_key(|&(k, _)| k);
        out
    }

    fn check(&self, x: &FeatureVector) -> Result<()> {
        match x.indices.last() {
            Some(&id) if id as usize >= self.dimension => Err(invalid(format!(
                "feature id {id} outside model dimension {}",
                self.dimension
            ))),
            _ => Ok(()),
        }
    }

    fn logit_mean(&self, x: &FeatureVector) -> f64 {
        x.indices.iter().map(|&i| self.weight(i).mu).sum()
    }

    /// Point CTR `sigmoid(sum mu_i x_i)` using posterior means.
    pub fn predict_point(&self, x: &FeatureVector) -> Result<f64> {
        self.check(x)?;
        Ok(sigmoid(self.logit_mean(x)))
    }

    /// Mean and variance of the logit `a = w . x` under the posterior.
    ///
    /// Features are binary, so `sum x_i / q_i` and `sum x_i^2 / q_i` coincide.
    pub fn posterior_params(&self, x: &FeatureVector) -> Result<CtrPosterior> {
        self.check(x)?;
        if x.is_empty() {
            return Err(invalid("feature vector has no active features"));
        }
        let (m, s2) = x.indices.iter().fold((0.0, 0.0), |(m, s2), &i| {
            let w = self.weight(i);
            (m + w.mu, s2 + 1.0 / w.q)
        });
        CtrPosterior::new(m, s2)
    }

    /// One sequential posterior update with the labelled request `(x, y)`.
    pub fn update(&mut self, x: &FeatureVector, clicked: bool, eta: f64) -> Result<()> {
        self.update_steps(x, clicked, eta, 1)
    }

    /// Update taking `steps` gradient steps on the per-instance MAP objective.
    ///
    /// The regularizer pulls each mean back toward its value before this
    /// instance, weighted by the old precision; on the first step it is zero.
    /// Precisions grow by `p (1 - p)` evaluated at the pre-update means.
    pub fn update_steps(
        &mut self,
        x: &FeatureVector,
        clicked: bool,
        eta: f64,
        steps: usize,
    ) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {eta}")));
        }
        if steps == 0 {
            return Err(invalid("at least one gradient step is required"));
        }
        self.check(x)?;
        if x.is_empty() {
            return Ok(());
        }
        let y = if clicked { 1.0 } else { 0.0 };
        let old: Vec<WeightPosterior> = x.indices.iter().map(|&i| self.weight(i)).collect();
        let p_old = sigmoid(old.iter().map(|w| w.mu).sum());

        let mut mu: Vec<f64> = old.iter().map(|w| w.mu).collect();
        for _ in 0..steps {
            let p = sigmoid(mu.iter().sum());
            for (m, w) in mu.iter_mut().zip(&old) {
                *m += eta * ((y - p) - w.q * (*m - w.mu));
            }
        }
        let curvature = p_old * (1.0 - p_old);
        for ((&i, w), m) in x.indices.iter().zip(&old).zip(mu) {
            self.weights.insert(
                i,
                WeightPosterior {
                    mu: m,
                    q: w.q + curvature,
                },
            );
        }
        Ok(())
    }

    /// Sequential training over `data`, one update per record per epoch.
    pub fn train(&mut self, data: &[LogRecord], cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs {
            if let Some(seed) = cfg.shuffle_seed {
                order.sort_unstable();
                order.shuffle(&mut rng::stream(seed, epoch as u64));
            }
            for &i in &order {
                let r = &data[i];
                self.update_steps(&r.features, r.clicked, cfg.eta, cfg.inner_steps)?;
            }
        }
        Ok(())
    }

    /// Writes the checkpoint: header `dimension\tmu0\tq0`, then one
    /// `id\tmu\tq` line per stored feature in id order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::new();
        writeln!(buf, "{}\t{}\t{}", self.dimension, fmt_f64(self.mu0), fmt_f64(self.q0)).unwrap();
        for (id, w) in self.entries() {
            writeln!(buf, "{id}\t{}\t{}", fmt_f64(w.mu), fmt_f64(w.q)).unwrap();
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty checkpoint"))??;
        let h: Vec<&str> = header.split('\t').collect();
        if h.len() != 3 {
            return Err(parse_err(1, "header must be dimension<TAB>mu0<TAB>q0"));
        }
        let dimension: usize = h[0].parse().map_err(|_| parse_err(1, "bad dimension"))?;
        let mu0 = parse_f64(h[1], 1)?;
        let q0 = parse_f64(h[2], 1)?;
        let mut model =
            Self::new(dimension, mu0, q0).map_err(|e| parse_err(1, e.to_string()))?;
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(parse_err(lineno, "expected id<TAB>mu<TAB>q"));
            }
            let id: u32 = f[0].parse().map_err(|_| parse_err(lineno, "bad feature id"))?;
            if id as usize >= dimension {
                return Err(parse_err(lineno, format!("feature id {id} outside dimension")));
            }
            let mu = parse_f64(f[1], lineno)?;
            let q = parse_f64(f[2], lineno)?;
            if !(q > 0.0) {
                return Err(parse_err(lineno, "precision must be positive"));
            }
            model.weights.insert(id, WeightPosterior { mu, q });
        }
        Ok(model)
    }
}

/// 17 significant digits, enough to round-trip every `f64`.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("not a number: {s:?}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(line, format!("non-finite value {s:?}")))
    }
}

/// Hyperparameters for [`GaussianWeightModel::train`] and [`train_point_estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    /// Shuffle the records every epoch with this seed; `None` keeps log order.
    pub shuffle_seed: Option<u64>,
    /// Gradient steps per instance; 1 is plain online SGD.
    pub inner_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            epochs: 1,
            shuffle_seed: None,
            inner_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(invalid("inner_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Plain logistic regression trained by SGD, used as the point estimate that
/// warm-starts the Bayesian means and as the LR bidding baseline.
pub fn train_point_estimate(
    data: &[LogRecord],
    dimension: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut w = vec![0.0; dimension];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        if let Some(seed) = cfg.shuffle_seed {
            order.sort_unstable();
            order.shuffle(&mut rng::stream(seed, epoch as u64));
        }
        for &i in &order {
            let r = &data[i];
            let idx = r.features.indices();
            if let Some(&last) = idx.last() {
                if last as usize >= dimension {
                    return Err(invalid(format!("feature id {last} outside dimension {dimension}")));
                }
            }
            let p = sigmoid(idx.iter().map(|&j| w[j as usize]).sum());
            let g = if r.clicked { 1.0 } else { 0.0 } - p;
            for &j in idx {
                w[j as usize] += cfg.eta * g;
            }
        }
    }
    Ok(w)
}

/// Point CTR from dense point weights.
pub fn predict_with_weights(weights: &[f64], x: &FeatureVector) -> Result<f64> {
    let mut a = 0.0;
    for &i in x.indices() {
        a += *weights
            .get(i as usize)
            .ok_or_else(|| invalid(format!("feature id {i} outside dimension {}", weights.len())))?;
    }
    Ok(sigmoid(a))
}

/// Post-hoc CTR recalibration applied to model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Calibration {
    #[default]
    Identity,
    /// Undo negative down-sampling at the given keep rate `w`:
    /// `p / (p + (1 - p) / w)`.
    NegativeDownsampling { rate: f64 },
}

impl Calibration {
    pub fn apply(&self, ctr: f64) -> f64 {
        match *self {
            Calibration::Identity => ctr,
            Calibration::NegativeDownsampling { rate } => ctr / (ctr + (1.0 - ctr) / rate),
        }
    }
}

/// Area under the ROC curve, with tied scores sharing their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InsufficientData("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let pos = pos as f64;
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg as f64))
}
