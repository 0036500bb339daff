//! Auction logs, deterministic second-price replay, and a synthetic log
//! generator with known ground truth.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctr_model::{fmt_f64, parse_f64, sigmoid, FeatureVector};
use crate::error::{invalid, parse_err, Error, Result};
use crate::rng;

/// One logged auction: request features, observed click, market price.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub features: FeatureVector,
    pub clicked: bool,
    pub market_price: f64,
}

/// An ordered auction log over a fixed feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dimension: usize,
    pub records: Vec<LogRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total market price over all records: what the logged campaign paid.
    pub fn total_cost(&self) -> f64 {
        self.records.iter().map(|r| r.market_price).sum()
    }

    pub fn clicks(&self) -> usize {
        self.records.iter().filter(|r| r.clicked).count()
    }

    pub fn prices(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.market_price).collect()
    }

    /// Temporal split: the first half (validation) and the second half (test).
    pub fn split_halves(&self) -> (Dataset, Dataset) {
        let mid = self.records.len() / 2;
        (
            Dataset {
                dimension: self.dimension,
                records: self.records[..mid].to_vec(),
            },
            Dataset {
                dimension: self.dimension,
                records: self.records[mid..].to_vec(),
            },
        )
    }

    /// Re-labels the feature space size, e.g. to align train and test logs.
    pub fn with_dimension(mut self, dimension: usize) -> Result<Self> {
        for r in &mut self.records {
            r.features = FeatureVector::new(r.features.indices().to_vec(), dimension)?;
        }
        self.dimension = dimension;
        Ok(self)
    }

    /// Parses the normalized TSV log:
    /// `click<TAB>market_price<TAB>f1 f2 ...`, with an optional `#dim=<N>`
    /// header. Without a header the dimension is the largest id plus one.
    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut raw: Vec<(Vec<u32>, bool, f64)> = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let lineno = n + 1;
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(d) = rest.strip_prefix("dim=") {
                    if !raw.is_empty() || dim.is_some() {
                        return Err(parse_err(lineno, "#dim header must come first"));
                    }
                    dim = Some(d.trim().parse().map_err(|_| parse_err(lineno, "bad #dim value"))?);
                }
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(click), Some(price), Some(feats), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(parse_err(lineno, "expected click<TAB>market_price<TAB>features"));
            };
            let clicked = match click.trim() {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(lineno, format!("click must be 0 or 1, got {other:?}"))),
            };
            let price: f64 = price
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad market price {price:?}")))?;
            if !(price.is_finite() && price >= 0.0) {
                return Err(parse_err(lineno, format!("market price must be non-negative, got {price}")));
            }
            let ids = feats
                .split_ascii_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| parse_err(lineno, format!("bad feature id {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(parse_err(lineno, "record has no features"));
            }
            raw.push((ids, clicked, price));
        }
        let needed = raw
            .iter()
            .flat_map(|(ids, _, _)| ids.iter())
            .max()
            .map_or(0, |&m| m as usize + 1);
        let dimension = match dim {
            Some(d) if d < needed => {
                return Err(invalid(format!("feature id {} exceeds #dim={d}", needed - 1)))
            }
            Some(d) => d,
            None => needed,
        };
        let mut records = Vec::with_capacity(raw.len());
        for (k, (ids, clicked, market_price)) in raw.into_iter().enumerate() {
            let features = FeatureVector::new(ids, dimension).map_err(|e| Error::Parse {
                line: k + 1,
                message: e.to_string(),
            })?;
            records.push(LogRecord {
                features,
                clicked,
                market_price,
            });
        }
        Ok(Dataset { dimension, records })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::new();
        writeln!(buf, "#dim={}", self.dimension).unwrap();
        for r in &self.records {
            write!(buf, "{}\t{}\t", u8::from(r.clicked), r.market_price).unwrap();
            for (k, id) in r.features.indices().iter().enumerate() {
                if k > 0 {
                    buf.push(' ');
                }
                write!(buf, "{id}").unwrap();
            }
            buf.push('\n');
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }
}

/// Column layout of a raw iPinYou-style log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawColumns {
    pub click: usize,
    pub market_price: usize,
    /// Categorical columns turned into `column:value` one-hot features.
    pub features: Vec<usize>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub has_header: bool,
}

fn default_delimiter() -> char {
    '\t'
}

/// Assigns dense integer ids to `column:value` strings in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct FeatureEncoder {
    ids: HashMap<String, u32>,
    names: Vec<String>,
}

impl FeatureEncoder {
    pub fn id(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.ids.get(key) {
            return id;
        }
        let id = self.names.len() as u32;
        self.ids.insert(key.to_string(), id);
        self.names.push(key.to_string());
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// `id<TAB>key` lines.
    pub fn write_dictionary<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::new();
        for (id, name) in self.names.iter().enumerate() {
            writeln!(buf, "{id}\t{name}").unwrap();
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }
}

/// Converts a raw log into normalized records, growing `encoder` as new
/// feature values appear. Click counts above 1 are treated as a click. The
/// returned dataset's dimension is the encoder size after this file.
pub fn convert_raw<R: BufRead>(
    input: R,
    cols: &RawColumns,
    encoder: &mut FeatureEncoder,
) -> Result<Dataset> {
    let mut rows: Vec<(Vec<u32>, bool, f64)> = Vec::new();
    let need = cols
        .features
        .iter()
        .chain([&cols.click, &cols.market_price])
        .max()
        .copied()
        .unwrap_or(0);
    for (n, line) in input.lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        if (cols.has_header && n == 0) || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end_matches('\r').split(cols.delimiter).collect();
        if f.len() <= need {
            return Err(parse_err(lineno, format!("expected at least {} columns", need + 1)));
        }
        let clicks: u64 = f[cols.click]
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad click value {:?}", f[cols.click])))?;
        let price: f64 = f[cols.market_price]
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad market price {:?}", f[cols.market_price])))?;
        if !(price.is_finite() && price >= 0.0) {
            return Err(parse_err(lineno, "market price must be non-negative"));
        }
        let mut ids: Vec<u32> = cols
            .features
            .iter()
            .map(|&c| encoder.id(&format!("{c}:{}", f[c].trim())))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        rows.push((ids, clicks > 0, price));
    }
    let dimension = encoder.len();
    let records = rows
        .into_iter()
        .map(|(ids, clicked, market_price)| {
            Ok(LogRecord {
                features: FeatureVector::new(ids, dimension)?,
                clicked,
                market_price,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { dimension, records })
}

/// Replay settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub budget: Option<f64>,
    /// Revenue per click.
    pub click_value: f64,
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.budget {
            if !(b > 0.0) {
                return Err(invalid(format!("budget must be positive, got {b}")));
            }
        }
        if !(self.click_value > 0.0 && self.click_value.is_finite()) {
            return Err(invalid("click value must be positive"));
        }
        Ok(())
    }
}

/// Campaign outcome of one replay. Ratios with a zero denominator are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayMetrics {
    /// Requests that received a positive bid.
    pub bids: u64,
    pub wins: u64,
    pub impressions: u64,
    pub clicks: u64,
    pub cost: f64,
    pub revenue: f64,
    pub profit: f64,
    pub roi: Option<f64>,
    pub cpm: Option<f64>,
    pub ctr: Option<f64>,
    pub ecpc: Option<f64>,
    pub win_rate: Option<f64>,
    /// Records examined, including one whose win was voided for budget.
    pub records_consumed: u64,
    pub budget_exhausted: bool,
}

impl ReplayMetrics {
    fn finish(bids: u64, wins: u64, clicks: u64, cost: f64, click_value: f64, consumed: u64, exhausted: bool) -> Self {
        let revenue = clicks as f64 * click_value;
        let profit = revenue - cost;
        let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
        Self {
            bids,
            wins,
            impressions: wins,
            clicks,
            cost,
            revenue,
            profit,
            roi: ratio(profit, cost),
            cpm: ratio(1000.0 * cost, wins as f64),
            ctr: ratio(clicks as f64, wins as f64),
            ecpc: ratio(cost, clicks as f64),
            win_rate: ratio(wins as f64, bids as f64),
            records_consumed: consumed,
            budget_exhausted: exhausted,
        }
    }
}

/// Replays `records` in order. `bid(i, record)` returns the bid for record
/// `i`; a bid wins iff it strictly exceeds the logged market price, and the
/// winner pays that price. A win the remaining budget cannot pay for is
/// voided and ends the replay.
pub fn replay<F>(records: &[LogRecord], cfg: &ReplayConfig, mut bid: F) -> Result<ReplayMetrics>
where
    F: FnMut(usize, &LogRecord) -> f64,
{
    cfg.validate()?;
    let (mut bids, mut wins, mut clicks) = (0u64, 0u64, 0u64);
    let mut cost = 0.0;
    let mut consumed = 0u64;
    let mut exhausted = false;
    for (i, r) in records.iter().enumerate() {
        consumed += 1;
        let b = bid(i, r);
        if !(b > 0.0) {
            continue;
        }
        bids += 1;
        if b <= r.market_price {
            continue;
        }
        if let Some(budget) = cfg.budget {
            if budget - cost < r.market_price {
                exhausted = true;
                break;
            }
        }
        wins += 1;
        cost += r.market_price;
        if r.clicked {
            clicks += 1;
        }
    }
    Ok(ReplayMetrics::finish(bids, wins, clicks, cost, cfg.click_value, consumed, exhausted))
}

/// Click value as `proportion` of the training eCPC (total logged market
/// price over total clicks).
pub fn click_value_from_training(train: &Dataset, proportion: f64) -> Result<f64> {
    if !(proportion > 0.0 && proportion.is_finite()) {
        return Err(invalid(format!("proportion must be positive, got {proportion}")));
    }
    let clicks = train.clicks();
    if clicks == 0 {
        return Err(Error::InsufficientData("training log has no clicks".into()));
    }
    let v = proportion * train.total_cost() / clicks as f64;
    if !(v > 0.0) {
        return Err(invalid("training log has zero total cost"));
    }
    Ok(v)
}

/// Parameters of the synthetic log generator.
///
/// Feature 0 is an always-on intercept. The remaining `dimension - 1`
/// features are drawn by a Zipf popularity law (exponent `popularity_skew`),
/// so rare features end up with few observations and wide posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dimension: usize,
    pub records: usize,
    /// Non-intercept features per record.
    pub features_per_record: usize,
    pub intercept: f64,
    /// True weights are `N(weight_mean, weight_std^2)`.
    pub weight_mean: f64,
    pub weight_std: f64,
    pub popularity_skew: f64,
    pub market_mu: f64,
    pub market_sigma: f64,
    /// Shifts `ln z` by this multiple of the centered true logit.
    #[serde(default)]
    pub price_ctr_coupling: f64,
    /// Round prices to integers, as in iPinYou-style logs.
    #[serde(default)]
    pub integer_prices: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dimension: 5000,
            records: 10_000,
            features_per_record: 8,
            intercept: -4.0,
            weight_mean: 0.0,
            weight_std: 0.5,
            popularity_skew: 1.1,
            market_mu: 4.0,
            market_sigma: 0.5,
            price_ctr_coupling: 0.0,
            integer_prices: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 2 {
            return Err(invalid("synthetic dimension must be at least 2"));
        }
        if self.records == 0 {
            return Err(invalid("synthetic log needs at least one record"));
        }
        if self.features_per_record == 0 || self.features_per_record >= self.dimension {
            return Err(invalid("features_per_record must be in [1, dimension - 1]"));
        }
        if !(self.weight_std >= 0.0 && self.market_sigma > 0.0 && self.popularity_skew >= 0.0) {
            return Err(invalid("weight_std, market_sigma and popularity_skew must be non-negative (sigma positive)"));
        }
        for x in [self.intercept, self.weight_mean, self.market_mu, self.price_ctr_coupling] {
            if !x.is_finite() {
                return Err(invalid("synthetic parameters must be finite"));
            }
        }
        Ok(())
    }
}

/// A generated log with the weights that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticLog {
    pub dataset: Dataset,
    pub true_weights: Vec<f64>,
    /// True click probability of every record.
    pub true_ctr: Vec<f64>,
    pub spec: SyntheticSpec,
}

/// Draws a log with clicks `~ Bernoulli(sigmoid(w* . x))` and log-normal
/// market prices. Deterministic given `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticLog> {
    spec.validate()?;
    let mut wrng = rng::stream(seed, 0);
    let mut true_weights = Vec::with_capacity(spec.dimension);
    true_weights.push(spec.intercept);
    for _ in 1..spec.dimension {
        let e: f64 = StandardNormal.sample(&mut wrng);
        true_weights.push(spec.weight_mean + spec.weight_std * e);
    }

    // Zipf popularity over features 1..dimension.
    let mut cdf = Vec::with_capacity(spec.dimension - 1);
    let mut acc = 0.0;
    for rank in 1..spec.dimension {
        acc += (rank as f64).powf(-spec.popularity_skew);
        cdf.push(acc);
    }
    let centre = spec.intercept + spec.features_per_record as f64 * spec.weight_mean;

    let mut rng = rng::stream(seed, 1);
    let mut records = Vec::with_capacity(spec.records);
    let mut true_ctr = Vec::with_capacity(spec.records);
    let mut ids = Vec::with_capacity(spec.features_per_record + 1);
    for _ in 0..spec.records {
        ids.clear();
        ids.push(0u32);
        while ids.len() <= spec.features_per_record {
            let u: f64 = rng.random::<f64>() * acc;
            let id = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u32 + 1;
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let logit: f64 = ids.iter().map(|&i| true_weights[i as usize]).sum();
        let p = sigmoid(logit);
        let clicked = rng.random::<f64>() < p;
        let e: f64 = StandardNormal.sample(&mut rng);
        let mut price =
            (spec.market_mu + spec.price_ctr_coupling * (logit - centre) + spec.market_sigma * e).exp();
        if spec.integer_prices {
            price = price.round();
        }
        records.push(LogRecord {
            features: FeatureVector::new(ids.clone(), spec.dimension)?,
            clicked,
            market_price: price,
        });
        true_ctr.push(p);
    }
    Ok(SyntheticLog {
        dataset: Dataset {
            dimension: spec.dimension,
            records,
        },
        true_weights,
        true_ctr,
        spec: spec.clone(),
    })
}

/// Writes `id<TAB>weight` lines for ground-truth weights.
pub fn write_weights<W: Write>(weights: &[f64], mut out: W) -> Result<()> {
    let mut buf = String::new();
    for (i, w) in weights.iter().enumerate() {
        writeln!(buf, "{i}\t{}", fmt_f64(*w)).unwrap();
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

/// Reads dense `id<TAB>weight` lines written by [`write_weights`]; ids must
/// run `0, 1, 2, ...`.
pub fn read_weights<R: BufRead>(input: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, w) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(lineno, "expected id<TAB>weight"))?;
        if id.parse::<usize>().ok() != Some(out.len()) {
            return Err(parse_err(lineno, format!("expected id {}, got {id:?}", out.len())));
        }
        out.push(parse_f64(w, lineno)?);
    }
    Ok(out)
}
