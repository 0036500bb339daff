//! Experiment configuration and the end-to-end pipeline: train, fit the
//! market, build tables, sweep on validation, select per lambda, replay the
//! selections on test and assemble the report.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctr_distribution::{Grid, MomentMethod, MomentTable};
use crate::ctr_model::{train_point_estimate, GaussianWeightModel, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{
    default_phis, flag_points, replay_strategy, select_model, sweep, Report, Selection, Split,
    SweepPoint, SweepSpec, DEFAULT_ALPHAS, DEFAULT_BUDGET_FRACTIONS, DEFAULT_LAMBDAS,
    SCHEMA_VERSION,
};
use crate::market::MarketPriceModel;
use crate::simulator::{click_value_from_training, read_weights, write_weights, Dataset, ReplayMetrics};
use crate::strategies::{
    BidGrid, MomentSource, RequestScore, RmpBidTable, RmpMethod, RmpSolver, RmpSource, Scorer,
    StrategyConfig, StrategyKind,
};

pub const MODEL_FILE: &str = "model.ckpt";
pub const POINT_WEIGHTS_FILE: &str = "point_weights.tsv";
pub const MARKET_FILE: &str = "market.txt";
pub const MOMENT_TABLE_FILE: &str = "moments.rbmt";
pub const SWEEP_FILE: &str = "sweep.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

pub fn rmp_table_file(index: usize) -> String {
    format!("rmp_{index}.rbbt")
}

/// Independent sub-seed for one pipeline stage.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    /// Without a validation log the test log is split into halves.
    #[serde(default)]
    pub validation: Option<PathBuf>,
    pub test: PathBuf,
    pub artifact_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub eta: f64,
    pub epochs: usize,
    pub q0: f64,
    /// Start the posterior means at the LR point estimate instead of zero.
    pub warm_start: bool,
    pub point_eta: f64,
    pub point_epochs: usize,
    pub inner_steps: usize,
    pub shuffle: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            epochs: 1,
            q0: 1.0,
            warm_start: true,
            point_eta: 0.01,
            point_epochs: 1,
            inner_steps: 1,
            shuffle: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarketKind {
    Lognormal,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub kind: MarketKind,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            kind: MarketKind::Lognormal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentMode {
    /// Precomputed `(m, s2)` lookup table.
    Table,
    /// Quadrature per request.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableMethod {
    Quadrature,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TablesConfig {
    pub m_min: f64,
    pub m_max: f64,
    pub m_bins: usize,
    pub s2_min: f64,
    pub s2_max: f64,
    pub s2_bins: usize,
    pub moments: MomentMode,
    pub rmp: MomentMode,
    pub method: TableMethod,
    pub panels: usize,
    pub samples: usize,
    /// Bid grid is `[0, bid_factor * v]` in `bid_steps` steps.
    pub bid_factor: f64,
    pub bid_steps: usize,
}

impl Default for TablesConfig {
    fn default() -> Self {
        Self {
            m_min: -10.0,
            m_max: 2.0,
            m_bins: 1000,
            s2_min: 0.001,
            s2_max: 5.0,
            s2_bins: 1000,
            moments: MomentMode::Table,
            rmp: MomentMode::Table,
            method: TableMethod::Quadrature,
            panels: 1000,
            samples: 100_000,
            bid_factor: 3.0,
            bid_steps: 1000,
        }
    }
}

impl TablesConfig {
    pub fn m_grid(&self) -> Result<Grid> {
        Grid::new(self.m_min, self.m_max, self.m_bins)
    }

    pub fn s2_grid(&self) -> Result<Grid> {
        Grid::new(self.s2_min, self.s2_max, self.s2_bins)
    }

    pub fn moment_method(&self) -> MomentMethod {
        match self.method {
            TableMethod::Quadrature => MomentMethod::Quadrature {
                panels: self.panels,
            },
            TableMethod::Mc => MomentMethod::MonteCarlo {
                samples: self.samples,
            },
        }
    }

    pub fn rmp_method(&self) -> RmpMethod {
        match self.method {
            TableMethod::Quadrature => RmpMethod::ClosedForm {
                panels: self.panels,
            },
            TableMethod::Mc => RmpMethod::MonteCarlo {
                samples: self.samples,
            },
        }
    }

    pub fn bid_grid(&self, v: f64) -> Result<BidGrid> {
        BidGrid::for_value(v, self.bid_factor, self.bid_steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.m_grid()?;
        let s2 = self.s2_grid()?;
        if s2.min <= 0.0 {
            return Err(invalid("s2_min must be positive"));
        }
        match self.method {
            TableMethod::Quadrature if self.panels < 100 => {
                Err(invalid("panels must be at least 100"))
            }
            TableMethod::Mc if self.samples == 0 => Err(invalid("samples must be positive")),
            _ if !(self.bid_factor > 0.0) || self.bid_steps == 0 => {
                Err(invalid("bid grid needs a positive factor and step count"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub strategies: Vec<StrategyKind>,
    /// Risk coefficients swept for VaR and RMP.
    pub alphas: Vec<f64>,
    /// Scalings swept under a budget.
    pub phis: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub budget_fractions: Vec<f64>,
    pub include_unbudgeted: bool,
    /// Click value as a proportion of the training eCPC.
    pub click_value_proportion: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            strategies: vec![StrategyKind::Lr, StrategyKind::Var, StrategyKind::Rmp],
            alphas: DEFAULT_ALPHAS.to_vec(),
            phis: default_phis(1.0),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            budget_fractions: DEFAULT_BUDGET_FRACTIONS.to_vec(),
            include_unbudgeted: true,
            click_value_proportion: 1.0,
        }
    }
}

impl EvaluationConfig {
    /// Budget settings in report order: unbudgeted first, then fractions.
    pub fn budgets(&self) -> Vec<Option<f64>> {
        let mut out = Vec::new();
        if self.include_unbudgeted {
            out.push(None);
        }
        out.extend(self.budget_fractions.iter().map(|&f| Some(f)));
        out
    }

    /// The sweep grid for one strategy and budget. Without a budget every
    /// strategy keeps `phi = 1`; LR has no alpha.
    pub fn spec(&self, kind: StrategyKind, budget_fraction: Option<f64>) -> SweepSpec {
        let alphas = match kind {
            StrategyKind::Lr => vec![0.0],
            _ => self.alphas.clone(),
        };
        let phis = match budget_fraction {
            None => vec![1.0],
            Some(_) => self.phis.clone(),
        };
        SweepSpec {
            kind,
            alphas,
            phis,
            budget_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(invalid("no strategies configured"));
        }
        if self.lambdas.is_empty() {
            return Err(invalid("no lambdas configured"));
        }
        if self.budgets().is_empty() {
            return Err(invalid("no budget settings configured"));
        }
        if !(self.click_value_proportion > 0.0) {
            return Err(invalid("click_value_proportion must be positive"));
        }
        if self.lambdas.iter().any(|l| !l.is_finite()) {
            return Err(invalid("lambdas must be finite"));
        }
        for &s in &self.strategies {
            for b in self.budgets() {
                self.spec(s, b).validate()?;
            }
        }
        Ok(())
    }
}

/// Everything an experiment run needs. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub market: MarketConfig,
    #[serde(default)]
    pub tables: TablesConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message())))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading config {}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.resolve(&self.data.artifact_dir)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.artifact_dir().join(name)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        TrainConfig {
            eta: m.eta,
            epochs: m.epochs,
            shuffle_seed: None,
            inner_steps: m.inner_steps,
        }
        .validate()?;
        TrainConfig {
            eta: m.point_eta,
            epochs: m.point_epochs,
            shuffle_seed: None,
            inner_steps: 1,
        }
        .validate()?;
        if !(m.q0 > 0.0 && m.q0.is_finite()) {
            return Err(invalid("q0 must be positive"));
        }
        self.tables.validate()?;
        self.evaluation.validate()
    }

    /// Config echoed into reports: paths as written, not resolved.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Digest of the echoed config, used as the experiment id.
    pub fn id(&self) -> String {
        let canonical = serde_json::to_vec(&self.echo()).expect("config serializes");
        format!("exp-{}", crate::digest(&canonical))
    }

    fn train_config(&self, point: bool) -> TrainConfig {
        let m = &self.model;
        let shuffle = |label| m.shuffle.then(|| derive_seed(self.seed, label));
        if point {
            TrainConfig {
                eta: m.point_eta,
                epochs: m.point_epochs,
                shuffle_seed: shuffle("point"),
                inner_steps: 1,
            }
        } else {
            TrainConfig {
                eta: m.eta,
                epochs: m.epochs,
                shuffle_seed: shuffle("bayes"),
                inner_steps: m.inner_steps,
            }
        }
    }

    /// Alphas that need an RMP table.
    pub fn rmp_alphas(&self) -> Vec<f64> {
        if self.evaluation.strategies.contains(&StrategyKind::Rmp) && self.tables.rmp == MomentMode::Table {
            self.evaluation.alphas.clone()
        } else {
            Vec::new()
        }
    }
}

fn stage<T>(label: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.context(label))
}

fn read_log(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    Dataset::read(BufReader::new(f)).map_err(|e| e.context(path.display().to_string()))
}

/// Train, validation and test logs on a common feature space.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    stage("load data", (|| {
        let train = read_log(&cfg.resolve(&cfg.data.train))?;
        let test = read_log(&cfg.resolve(&cfg.data.test))?;
        let (validation, test) = match &cfg.data.validation {
            Some(p) => (read_log(&cfg.resolve(p))?, test),
            None => test.split_halves(),
        };
        let dim = train.dimension.max(validation.dimension).max(test.dimension);
        Ok(Splits {
            train: train.with_dimension(dim)?,
            validation: validation.with_dimension(dim)?,
            test: test.with_dimension(dim)?,
        })
    })())
}

/// Point LR weights and the Bayesian posterior trained on `train`.
pub fn train_models(cfg: &ExperimentConfig, train: &Dataset) -> Result<(Vec<f64>, GaussianWeightModel)> {
    stage("train", (|| {
        let point = train_point_estimate(&train.records, train.dimension, &cfg.train_config(true))?;
        let mut model = if cfg.model.warm_start {
            GaussianWeightModel::from_point_estimate(&point, cfg.model.q0)?
        } else {
            GaussianWeightModel::new(train.dimension, 0.0, cfg.model.q0)?
        };
        model.train(&train.records, &cfg.train_config(false))?;
        Ok((point, model))
    })())
}

pub fn fit_market(cfg: &ExperimentConfig, train: &Dataset) -> Result<MarketPriceModel> {
    let prices = train.prices();
    stage("fit-market", match cfg.market.kind {
        MarketKind::Lognormal => MarketPriceModel::fit_lognormal(&prices),
        MarketKind::Empirical => MarketPriceModel::fit_empirical(&prices),
    })
}

/// Trained and derived inputs of the bidding strategies.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub point_weights: Vec<f64>,
    pub model: GaussianWeightModel,
    pub market: MarketPriceModel,
    pub click_value: f64,
    pub moments: MomentSource,
    /// One table per entry of [`ExperimentConfig::rmp_alphas`].
    pub rmp_tables: Vec<RmpBidTable>,
}

/// Moment table (if configured) and RMP tables.
pub fn build_tables(
    cfg: &ExperimentConfig,
    market: &MarketPriceModel,
    click_value: f64,
) -> Result<(MomentSource, Vec<RmpBidTable>)> {
    stage("build-tables", (|| {
        let t = &cfg.tables;
        let moments = match t.moments {
            MomentMode::Table => MomentSource::Table(MomentTable::build(
                t.m_grid()?,
                t.s2_grid()?,
                t.moment_method(),
                derive_seed(cfg.seed, "moments"),
            )?),
            MomentMode::Direct => MomentSource::Quadrature { panels: t.panels },
        };
        let rmp = cfg
            .rmp_alphas()
            .iter()
            .enumerate()
            .map(|(i, &alpha)| {
                RmpBidTable::build(
                    t.m_grid()?,
                    t.s2_grid()?,
                    t.bid_grid(click_value)?,
                    alpha,
                    click_value,
                    market,
                    t.rmp_method(),
                    derive_seed(cfg.seed, &format!("rmp{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((moments, rmp))
    })())
}

impl Artifacts {
    pub fn build(cfg: &ExperimentConfig, train: &Dataset) -> Result<Self> {
        let (point_weights, model) = train_models(cfg, train)?;
        let market = fit_market(cfg, train)?;
        let click_value = stage(
            "click value",
            click_value_from_training(train, cfg.evaluation.click_value_proportion),
        )?;
        let (moments, rmp_tables) = build_tables(cfg, &market, click_value)?;
        Ok(Self {
            point_weights,
            model,
            market,
            click_value,
            moments,
            rmp_tables,
        })
    }

    pub fn write(&self, cfg: &ExperimentConfig) -> Result<()> {
        stage("write artifacts", (|| {
            fs::create_dir_all(cfg.artifact_dir())?;
            write_file(&cfg.artifact(POINT_WEIGHTS_FILE), |w| write_weights(&self.point_weights, w))?;
            write_file(&cfg.artifact(MODEL_FILE), |w| self.model.write_checkpoint(w))?;
            write_file(&cfg.artifact(MARKET_FILE), |w| self.market.write(w))?;
            if let MomentSource::Table(t) = &self.moments {
                write_file(&cfg.artifact(MOMENT_TABLE_FILE), |w| t.write(w))?;
            }
            for (i, t) in self.rmp_tables.iter().enumerate() {
                write_file(&cfg.artifact(&rmp_table_file(i)), |w| t.write(w))?;
            }
            Ok(())
        })())
    }

    /// Reloads what [`Artifacts::write`] stored; the click value is recomputed
    /// from the training log.
    pub fn read(cfg: &ExperimentConfig, train: &Dataset) -> Result<Self> {
        stage("read artifacts", (|| {
            let point_weights = read_file(&cfg.artifact(POINT_WEIGHTS_FILE), read_weights)?;
            let model = read_file(&cfg.artifact(MODEL_FILE), GaussianWeightModel::read_checkpoint)?;
            let market = read_file(&cfg.artifact(MARKET_FILE), MarketPriceModel::read)?;
            let click_value =
                click_value_from_training(train, cfg.evaluation.click_value_proportion)?;
            let moments = match cfg.tables.moments {
                MomentMode::Table => {
                    MomentSource::Table(read_file(&cfg.artifact(MOMENT_TABLE_FILE), MomentTable::read)?)
                }
                MomentMode::Direct => MomentSource::Quadrature {
                    panels: cfg.tables.panels,
                },
            };
            let mut rmp_tables = Vec::new();
            for (i, &alpha) in cfg.rmp_alphas().iter().enumerate() {
                let t = read_file(&cfg.artifact(&rmp_table_file(i)), RmpBidTable::read)?;
                if t.alpha() != alpha || t.v() != click_value || t.market_digest() != market.digest() {
                    return Err(invalid(format!(
                        "{} does not match the configured alpha, click value or market",
                        rmp_table_file(i)
                    )));
                }
                rmp_tables.push(t);
            }
            Ok(Self {
                point_weights,
                model,
                market,
                click_value,
                moments,
                rmp_tables,
            })
        })())
    }

    pub fn scorer(&self) -> Scorer<'_> {
        Scorer {
            model: &self.model,
            point_weights: Some(&self.point_weights),
            moments: &self.moments,
        }
    }

    pub fn score(&self, data: &Dataset) -> Result<Vec<RequestScore>> {
        self.scorer().score_all(data.records.iter().map(|r| &r.features).collect::<Vec<_>>())
    }
}

pub(crate) fn write_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let file = File::create(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn read_file<T, F>(path: &Path, f: F) -> Result<T>
where
    F: FnOnce(BufReader<File>) -> Result<T>,
{
    let file = File::open(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    f(BufReader::new(file)).map_err(|e| e.context(path.display().to_string()))
}

/// Validation sweep output, the hand-off between the `sweep` and `report`
/// stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub schema_version: u32,
    pub experiment_id: String,
    pub click_value: f64,
    pub points: Vec<SweepPoint>,
}

impl SweepResults {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_file(path, |r| Ok(serde_json::from_reader(r)?))
    }
}

/// Bid source for RMP at `alpha`: the matching table, or a direct solver.
fn rmp_source<'a>(
    artifacts: &'a Artifacts,
    solver: Option<&'a RmpSolver>,
    alphas: &[f64],
    alpha: f64,
) -> Option<RmpSource<'a>> {
    if let Some(s) = solver {
        return Some(RmpSource::Direct(s));
    }
    alphas
        .iter()
        .position(|&a| a == alpha)
        .and_then(|i| artifacts.rmp_tables.get(i))
        .map(RmpSource::Table)
}

fn direct_solver(cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<Option<RmpSolver>> {
    if cfg.evaluation.strategies.contains(&StrategyKind::Rmp) && cfg.tables.rmp == MomentMode::Direct {
        Ok(Some(RmpSolver::new(&artifacts.market, cfg.tables.bid_grid(artifacts.click_value)?)?))
    } else {
        Ok(None)
    }
}

/// One replay of `kind` at `(alpha, phi)` on `data`. RMP uses the stored
/// table for `alpha` when there is one and the direct solver otherwise.
pub fn replay_one(
    cfg: &ExperimentConfig,
    artifacts: &Artifacts,
    data: &Dataset,
    strategy: StrategyConfig,
    budget_fraction: Option<f64>,
) -> Result<ReplayMetrics> {
    stage("replay", (|| {
        let scores = artifacts.score(data)?;
        let alphas = cfg.rmp_alphas();
        let solver = match (strategy.kind, rmp_source(artifacts, None, &alphas, strategy.alpha)) {
            (StrategyKind::Rmp, None) => Some(RmpSolver::new(
                &artifacts.market,
                cfg.tables.bid_grid(artifacts.click_value)?,
            )?),
            _ => None,
        };
        let rmp = rmp_source(artifacts, solver.as_ref(), &alphas, strategy.alpha);
        replay_strategy(&data.records, &scores, strategy, budget_fraction, rmp)
    })())
}

/// Every configured strategy and budget swept on the validation split.
pub fn sweep_validation(
    cfg: &ExperimentConfig,
    artifacts: &Artifacts,
    validation: &Dataset,
) -> Result<SweepResults> {
    stage("sweep", (|| {
        let scores = artifacts.score(validation)?;
        let solver = direct_solver(cfg, artifacts)?;
        let alphas = cfg.rmp_alphas();
        let mut points = Vec::new();
        for budget in cfg.evaluation.budgets() {
            for &kind in &cfg.evaluation.strategies {
                let spec = cfg.evaluation.spec(kind, budget);
                points.extend(sweep(
                    &validation.records,
                    &scores,
                    &spec,
                    artifacts.click_value,
                    Split::Validation,
                    |a| rmp_source(artifacts, solver.as_ref(), &alphas, a),
                )?);
            }
        }
        Ok(SweepResults {
            schema_version: SCHEMA_VERSION,
            experiment_id: cfg.id(),
            click_value: artifacts.click_value,
            points,
        })
    })())
}

/// Selects per `(budget, strategy, lambda)` on validation and replays each
/// selection on test.
pub fn build_report(
    cfg: &ExperimentConfig,
    artifacts: &Artifacts,
    sweep: &SweepResults,
    test: &Dataset,
) -> Result<Report> {
    stage("report", (|| {
        if sweep.experiment_id != cfg.id() {
            return Err(invalid(format!(
                "sweep results belong to {}, config is {}",
                sweep.experiment_id,
                cfg.id()
            )));
        }
        if sweep.click_value != artifacts.click_value {
            return Err(invalid("sweep results were computed with a different click value"));
        }
        let scores = artifacts.score(test)?;
        let solver = direct_solver(cfg, artifacts)?;
        let alphas = cfg.rmp_alphas();
        let mut selections = Vec::new();
        let mut test_points: Vec<SweepPoint> = Vec::new();
        for budget in cfg.evaluation.budgets() {
            for &kind in &cfg.evaluation.strategies {
                let group: Vec<SweepPoint> = sweep
                    .points
                    .iter()
                    .filter(|p| p.strategy == kind && p.budget_fraction == budget)
                    .copied()
                    .collect();
                for &lambda in &cfg.evaluation.lambdas {
                    let chosen = *select_model(&group, lambda).ok_or_else(|| {
                        invalid(format!("no validation points for {kind} budget {budget:?}"))
                    })?;
                    let existing = test_points
                        .iter()
                        .find(|p| {
                            p.strategy == kind
                                && p.budget_fraction == budget
                                && p.alpha == chosen.alpha
                                && p.phi == chosen.phi
                        })
                        .copied();
                    let tp = match existing {
                        Some(p) => p,
                        None => {
                            let sc = StrategyConfig::new(kind, chosen.alpha, chosen.phi, artifacts.click_value)?;
                            let metrics = replay_strategy(
                                &test.records,
                                &scores,
                                sc,
                                budget,
                                rmp_source(artifacts, solver.as_ref(), &alphas, chosen.alpha),
                            )?;
                            let p = SweepPoint {
                                split: Split::Test,
                                metrics,
                                ..chosen
                            };
                            test_points.push(p);
                            p
                        }
                    };
                    selections.push(Selection {
                        lambda,
                        strategy: kind,
                        budget_fraction: budget,
                        alpha: chosen.alpha,
                        phi: chosen.phi,
                        validation: chosen.metrics,
                        validation_cp_profit: chosen.cp_profit(lambda),
                        test: tp.metrics,
                        test_cp_profit: tp.cp_profit(lambda),
                    });
                }
            }
        }
        let mut all = sweep.points.clone();
        all.extend(test_points);
        Ok(Report {
            schema_version: SCHEMA_VERSION,
            experiment_id: cfg.id(),
            config: cfg.echo(),
            click_value: artifacts.click_value,
            points: flag_points(&all),
            selections,
        })
    })())
}

pub fn write_report(cfg: &ExperimentConfig, report: &Report) -> Result<()> {
    fs::create_dir_all(cfg.artifact_dir())?;
    write_file(&cfg.artifact(REPORT_JSON), |w| report.write_json(w))?;
    write_file(&cfg.artifact(REPORT_CSV), |w| report.write_csv(w))
}

/// Wall time of each pipeline stage, in seconds.
#[derive(Debug, Clone, Default)]
pub struct Timings {
    pub stages: Vec<(&'static str, f64)>,
}

impl Timings {
    fn time<T>(&mut self, label: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.stages.push((label, t.elapsed().as_secs_f64()));
        Ok(out)
    }
}

/// Runs every stage in memory, writes all artifacts, the sweep results and
/// the report into the artifact directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Report, Timings)> {
    stage("config", cfg.validate())?;
    let mut timings = Timings::default();
    let splits = timings.time("load", || load_splits(cfg))?;
    let artifacts = timings.time("artifacts", || Artifacts::build(cfg, &splits.train))?;
    artifacts.write(cfg)?;
    let sweep = timings.time("sweep", || sweep_validation(cfg, &artifacts, &splits.validation))?;
    sweep.write(&cfg.artifact(SWEEP_FILE))?;
    let report = timings.time("report", || build_report(cfg, &artifacts, &sweep, &splits.test))?;
    write_report(cfg, &report)?;
    Ok((report, timings))
}
