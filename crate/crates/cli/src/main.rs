use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use riskbid::ctr_distribution::{moments_quadrature, REFERENCE_PANELS};
use riskbid::evaluation::{select_model, Split};
use riskbid::experiment::{self, Artifacts, ExperimentConfig, SweepResults};
use riskbid::simulator::{convert_raw, generate_synthetic, write_weights, FeatureEncoder, RawColumns, SyntheticSpec};
use riskbid::strategies::negative_profit_prob;
use riskbid::{CtrPosterior, Dataset, MarketPriceModel, StrategyConfig, StrategyKind};

#[derive(Parser)]
#[command(name = "riskbid", version, about = "Risk-aware bidding for second-price ad auctions")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw delimited log into the normalized TSV format.
    Convert(ConvertArgs),
    /// Train the LR point estimate and the Bayesian CTR model.
    Train(ConfigArgs),
    /// Fit the market price model on the training log.
    FitMarket(ConfigArgs),
    /// Build the CTR moment table and RMP bid tables.
    BuildTables(ConfigArgs),
    /// Replay one strategy setting and print its metrics.
    Replay(ReplayArgs),
    /// Sweep every configured strategy and budget on validation data.
    Sweep(ConfigArgs),
    /// Print the validation-selected model per strategy, budget and lambda.
    Select(SelectArgs),
    /// Replay the selections on test data and write the report.
    Report(ConfigArgs),
    /// Run every stage and write the report.
    RunExperiment(ConfigArgs),
    /// Worked single-request example with a log-normal market.
    DemoFig2(DemoArgs),
    /// Write a synthetic train/test log pair with known true weights.
    GenSynthetic(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides data.artifact_dir.
    #[arg(long)]
    artifact_dir: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_parser = parse_strategy)]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    phi: f64,
    /// Budget as a fraction of the split's logged cost.
    #[arg(long)]
    budget_fraction: Option<f64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Lambdas to select for; defaults to the configured list.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Raw input log; repeat together with --output for several files
    /// sharing one feature dictionary.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long, required = true)]
    output: Vec<PathBuf>,
    /// Where to write the `id<TAB>column:value` dictionary.
    #[arg(long)]
    dictionary: Option<PathBuf>,
    /// Zero-based column holding the click count.
    #[arg(long)]
    click: usize,
    /// Zero-based column holding the market price.
    #[arg(long)]
    price: usize,
    /// Zero-based categorical feature columns.
    #[arg(long, value_delimiter = ',', required = true)]
    features: Vec<usize>,
    /// Field delimiter; `tab` or a single character.
    #[arg(long, default_value = "tab")]
    delimiter: String,
    /// Skip the first line of every input.
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    m: f64,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    s2: f64,
    #[arg(long, default_value_t = 300.0)]
    v: f64,
    #[arg(long, default_value_t = 4.0)]
    market_mu: f64,
    #[arg(long, default_value_t = 0.5)]
    market_sigma: f64,
    /// Bid at which the loss probability is reported.
    #[arg(long, default_value_t = 84.0)]
    bid: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory for train.tsv, test.tsv, true_weights.tsv and
    /// experiment.toml.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    train_records: usize,
    /// Test records; the first half serves as validation.
    #[arg(long, default_value_t = 100_000)]
    test_records: usize,
    #[arg(long, default_value_t = 5000)]
    dimension: usize,
    #[arg(long, default_value_t = 8)]
    features_per_record: usize,
    #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
    intercept: f64,
    #[arg(long, default_value_t = 0.5)]
    weight_std: f64,
    #[arg(long, default_value_t = 1.1)]
    popularity_skew: f64,
    #[arg(long, default_value_t = 4.0)]
    market_mu: f64,
    #[arg(long, default_value_t = 0.5)]
    market_sigma: f64,
    #[arg(long)]
    integer_prices: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: riskbid::Error| e.to_string())
}

/// Usage and configuration problems exit with 2, everything else with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Convert(a) => cmd_convert(a),
        Command::Train(a) => cmd_train(a),
        Command::FitMarket(a) => cmd_fit_market(a),
        Command::BuildTables(a) => cmd_build_tables(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Select(a) => cmd_select(a),
        Command::Report(a) => cmd_report(a),
        Command::RunExperiment(a) => cmd_run_experiment(a),
        Command::DemoFig2(a) => cmd_demo(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&a.config).map_err(usage)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.artifact_dir {
        cfg.data.artifact_dir = absolute(d)?;
    }
    if let Some(p) = &a.train {
        cfg.data.train = absolute(p)?;
    }
    if let Some(p) = &a.validation {
        cfg.data.validation = Some(absolute(p)?);
    }
    if let Some(p) = &a.test {
        cfg.data.test = absolute(p)?;
    }
    cfg.validate().map_err(usage)?;
    let mut inputs = vec![&cfg.data.train, &cfg.data.test];
    inputs.extend(cfg.data.validation.as_ref());
    for p in inputs {
        let full = cfg.resolve(p);
        if !full.is_file() {
            return Err(usage(anyhow!("log file not found: {}", full.display())));
        }
    }
    Ok(cfg)
}

/// Command-line paths are relative to the working directory, config paths to
/// the config file.
fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).map_err(usage)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn print_json<T: serde::Serialize>(value: &T) -> CmdResult {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> CmdResult {
    if a.input.len() != a.output.len() {
        return Err(usage(anyhow!("give one --output per --input")));
    }
    let delimiter = match a.delimiter.as_str() {
        "tab" | "\\t" => '\t',
        s if s.chars().count() == 1 => s.chars().next().unwrap(),
        s => return Err(usage(anyhow!("delimiter must be one character or 'tab', got {s:?}"))),
    };
    let cols = RawColumns {
        click: a.click,
        market_price: a.price,
        features: a.features,
        delimiter,
        has_header: a.header,
    };
    let mut encoder = FeatureEncoder::default();
    let mut logs = Vec::new();
    for input in &a.input {
        let d = convert_raw(open(input).map_err(usage)?, &cols, &mut encoder)
            .with_context(|| format!("converting {}", input.display()))?;
        logs.push(d);
    }
    for (d, out) in logs.into_iter().zip(&a.output) {
        let d = d.with_dimension(encoder.len())?;
        let mut w = create(out)?;
        d.write(&mut w)?;
        w.flush()?;
        eprintln!("{}: {} records", out.display(), d.len());
    }
    if let Some(p) = &a.dictionary {
        let mut w = create(p)?;
        encoder.write_dictionary(&mut w)?;
        w.flush()?;
    }
    eprintln!("{} features", encoder.len());
    Ok(())
}

fn cmd_train(a: ConfigArgs) -> CmdResult {
    let cfg = load_config(&a)?;
    let splits = experiment::load_splits(&cfg)?;
    let (point, model) = experiment::train_models(&cfg, &splits.train)?;
    fs::create_dir_all(cfg.artifact_dir())?;
    let mut w = create(&cfg.artifact(experiment::POINT_WEIGHTS_FILE))?;
    write_weights(&point, &mut w)?;
    w.flush()?;
    let mut w = create(&cfg.artifact(experiment::MODEL_FILE))?;
    model.write_checkpoint(&mut w)?;
    w.flush()?;
    eprintln!(
        "trained on {} records; {} features with a posterior",
        splits.train.len(),
        model.materialized()
    );
    Ok(())
}

fn cmd_fit_market(a: ConfigArgs) -> CmdResult {
    let cfg = load_config(&a)?;
    let splits = experiment::load_splits(&cfg)?;
    let market = experiment::fit_market(&cfg, &splits.train)?;
    fs::create_dir_all(cfg.artifact_dir())?;
    let mut w = create(&cfg.artifact(experiment::MARKET_FILE))?;
    market.write(&mut w)?;
    w.flush()?;
    eprint!("{}", market.to_text().lines().next().map(|l| format!("{l}\n")).unwrap_or_default());
    Ok(())
}

fn cmd_build_tables(a: ConfigArgs) -> CmdResult {
    let cfg = load_config(&a)?;
    let splits = experiment::load_splits(&cfg)?;
    let market_path = cfg.artifact(experiment::MARKET_FILE);
    if !cfg.artifact(experiment::MODEL_FILE).is_file() || !market_path.is_file() {
        return Err(usage(anyhow!(
            "run `train` and `fit-market` first: {} needs {} and {}",
            cfg.artifact_dir().display(),
            experiment::MODEL_FILE,
            experiment::MARKET_FILE
        )));
    }
    let market = MarketPriceModel::read(open(&market_path)?)?;
    let v = riskbid::simulator::click_value_from_training(
        &splits.train,
        cfg.evaluation.click_value_proportion,
    )?;
    let start = Instant::now();
    let (moments, rmp) = experiment::build_tables(&cfg, &market, v)?;
    let elapsed = start.elapsed().as_secs_f64();
    if let riskbid::strategies::MomentSource::Table(t) = &moments {
        let mut w = create(&cfg.artifact(experiment::MOMENT_TABLE_FILE))?;
        t.write(&mut w)?;
        w.flush()?;
    }
    for (i, t) in rmp.iter().enumerate() {
        let mut w = create(&cfg.artifact(&experiment::rmp_table_file(i)))?;
        t.write(&mut w)?;
        w.flush()?;
    }
    eprintln!(
        "built {}x{} tables ({} RMP) in {elapsed:.2}s",
        cfg.tables.m_bins,
        cfg.tables.s2_bins,
        rmp.len()
    );
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let splits = experiment::load_splits(&cfg)?;
    let artifacts = Artifacts::read(&cfg, &splits.train)?;
    let strategy = StrategyConfig::new(a.strategy, a.alpha, a.phi, artifacts.click_value).map_err(usage)?;
    let data = match a.split {
        SplitArg::Validation => &splits.validation,
        SplitArg::Test => &splits.test,
    };
    let metrics = experiment::replay_one(&cfg, &artifacts, data, strategy, a.budget_fraction)?;
    print_json(&metrics)
}

fn cmd_sweep(a: ConfigArgs) -> CmdResult {
    let cfg = load_config(&a)?;
    let splits = experiment::load_splits(&cfg)?;
    let artifacts = Artifacts::read(&cfg, &splits.train)?;
    let results = experiment::sweep_validation(&cfg, &artifacts, &splits.validation)?;
    results.write(&cfg.artifact(experiment::SWEEP_FILE))?;
    eprintln!("{} validation replays", results.points.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct SelectedRow {
    lambda: f64,
    strategy: StrategyKind,
    budget_fraction: Option<f64>,
    alpha: f64,
    phi: f64,
    cp_profit: f64,
    profit: f64,
    cost: f64,
}

fn cmd_select(a: SelectArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let results = SweepResults::read(&cfg.artifact(experiment::SWEEP_FILE))?;
    if results.experiment_id != cfg.id() {
        return Err(usage(anyhow!("sweep results were produced by another config")));
    }
    let lambdas = if a.lambda.is_empty() { cfg.evaluation.lambdas.clone() } else { a.lambda };
    let mut rows = Vec::new();
    for budget in cfg.evaluation.budgets() {
        for &kind in &cfg.evaluation.strategies {
            let group: Vec<_> = results
                .points
                .iter()
                .filter(|p| p.strategy == kind && p.budget_fraction == budget && p.split == Split::Validation)
                .copied()
                .collect();
            for &lambda in &lambdas {
                if let Some(p) = select_model(&group, lambda) {
                    rows.push(SelectedRow {
                        lambda,
                        strategy: kind,
                        budget_fraction: budget,
                        alpha: p.alpha,
                        phi: p.phi,
                        cp_profit: p.cp_profit(lambda),
                        profit: p.metrics.profit,
                        cost: p.metrics.cost,
                    });
                }
            }
        }
    }
    print_json(&rows)
}

fn cmd_report(a: ConfigArgs) -> CmdResult {
    let cfg = load_config(&a)?;
    let splits = experiment::load_splits(&cfg)?;
    let artifacts = Artifacts::read(&cfg, &splits.train)?;
    let results = SweepResults::read(&cfg.artifact(experiment::SWEEP_FILE))?;
    let report = experiment::build_report(&cfg, &artifacts, &results, &splits.test)?;
    experiment::write_report(&cfg, &report)?;
    eprintln!("wrote {}", cfg.artifact(experiment::REPORT_JSON).display());
    Ok(())
}

fn cmd_run_experiment(a: ConfigArgs) -> CmdResult {
    let cfg = load_config(&a)?;
    let (report, timings) = experiment::run_experiment(&cfg)?;
    for (stage, secs) in &timings.stages {
        eprintln!("{stage}: {secs:.2}s");
    }
    eprintln!(
        "{} sweep points, {} selections; wrote {}",
        report.points.len(),
        report.selections.len(),
        cfg.artifact(experiment::REPORT_JSON).display()
    );
    Ok(())
}

fn cmd_demo(a: DemoArgs) -> CmdResult {
    let p = CtrPosterior::new(a.m, a.s2).map_err(usage)?;
    let market = MarketPriceModel::lognormal(a.market_mu, a.market_sigma).map_err(usage)?;
    let m = moments_quadrature(&p, REFERENCE_PANELS)?;
    let truth = a.v * m.mean;
    let neg = negative_profit_prob(&p, &market, a.v, a.bid, a.samples, a.seed)?;
    let win = market.win_probability(a.bid);
    let mut out = io::stdout().lock();
    writeln!(out, "CTR posterior: logit ~ N({}, {})", a.m, a.s2)?;
    writeln!(out, "E[yhat] = {:.4}", m.mean)?;
    writeln!(out, "std[yhat] = {:.4}", m.std)?;
    writeln!(out, "truth-telling bid v*E[yhat] = {truth:.2}")?;
    writeln!(out, "P(win at bid {}) = {:.2}%", a.bid, 100.0 * win)?;
    writeln!(
        out,
        "P(negative profit at bid {}) = {:.2}% ({} samples, seed {})",
        a.bid,
        100.0 * neg,
        a.samples,
        a.seed
    )?;
    if win > 0.0 {
        writeln!(out, "P(negative profit | win) = {:.2}%", 100.0 * neg / win)?;
    }
    Ok(())
}

fn cmd_gen_synthetic(a: SynthArgs) -> CmdResult {
    let spec = SyntheticSpec {
        dimension: a.dimension,
        records: a.train_records + a.test_records,
        features_per_record: a.features_per_record,
        intercept: a.intercept,
        weight_std: a.weight_std,
        popularity_skew: a.popularity_skew,
        market_mu: a.market_mu,
        market_sigma: a.market_sigma,
        integer_prices: a.integer_prices,
        ..SyntheticSpec::default()
    };
    if a.train_records == 0 || a.test_records < 2 {
        return Err(usage(anyhow!("need training records and at least two test records")));
    }
    spec.validate().map_err(usage)?;
    let log = generate_synthetic(&spec, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let (train, test) = log.dataset.records.split_at(a.train_records);
    for (name, records) in [("train.tsv", train), ("test.tsv", test)] {
        let d = Dataset {
            dimension: spec.dimension,
            records: records.to_vec(),
        };
        let mut w = create(&a.out.join(name))?;
        d.write(&mut w)?;
        w.flush()?;
    }
    let mut w = create(&a.out.join("true_weights.tsv"))?;
    write_weights(&log.true_weights, &mut w)?;
    w.flush()?;
    let config = format!(
        "seed = {}\n\n[data]\ntrain = \"train.tsv\"\ntest = \"test.tsv\"\nartifact_dir = \"artifacts\"\n",
        a.seed
    );
    fs::write(a.out.join("experiment.toml"), config)?;
    eprintln!(
        "wrote {} train and {} test records to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}
