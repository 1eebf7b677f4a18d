use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use esg_core::gan::{generate_scenarios, train_gan, GanConfig, GanError, GanModel};
use esg_core::pipeline::{
    build_valuator, hash_json, prepare_data, run_pipeline, write_json, write_report, PipelineError,
    RunConfig, Stamp, REPORT_FORMAT_VERSION, STABILITY_SEED, VALIDATION_SEED,
};
use esg_core::portfolio::{
    apply_clamps, backtest, evaluate_book, read_returns_csv, stability_study, write_band_csv,
    write_returns_csv, BacktestEntry, BacktestOptions, MarketValueSeries, PortfolioBook,
    RiskReport, StabilityOptions,
};
use esg_core::rng::derive_seed;
use esg_core::synth::{write_synthetic_dataset, SyntheticSpec};
use esg_core::validation::{
    architecture_search, evaluate_checkpoint, novelty_distances, write_history_plot_data,
    write_search_table, SearchGrid,
};

#[derive(Parser)]
#[command(name = "esg", version, about = "GAN scenario generator and market-risk engine")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Default directory for outputs not given explicitly.
    #[arg(long, global = true, env = "ESG_OUTPUT_DIR", default_value = "out")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic factor history and its schema.
    Synth {
        /// TOML synthetic spec; overrides the shape flags.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        factors: usize,
        #[arg(long, default_value_t = 1500)]
        days: usize,
        #[arg(long, default_value_t = 0.5)]
        correlation: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the data named in a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the data path in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wasserstein validation of a trained model.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the data path in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the checkpoint history as plot-ready CSV.
        #[arg(long)]
        plot_data: Option<PathBuf>,
        /// Include nearest-neighbour distances to the training rows.
        #[arg(long)]
        novelty: bool,
    },
    /// Train every grid member and rank by target function.
    ArchSearch {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the data path in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// TOML with `n_layers_g`, `n_layers_d`, `neurons_g`, `neurons_d`
        /// lists and an optional `[base]` GAN config.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw scenarios from a trained model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        scenarios: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Risk charges, shocks and JQE for a book of portfolios.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        universe: PathBuf,
        #[arg(long)]
        portfolios: PathBuf,
        #[arg(long)]
        migration: Option<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, default_value_t = 0.45)]
        recovery_rate: f64,
        #[arg(long, default_value_t = 50_000)]
        scenarios: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Factors reported with an upward shock only.
        #[arg(long, value_delimiter = ',')]
        one_sided: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Worst-case backtest of portfolio market values against a report.
    Backtest {
        /// CSV with `date` and one market-value column per portfolio.
        #[arg(long)]
        series: PathBuf,
        /// Report written by `evaluate`; its `.returns.csv` sibling is read.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "2017-01-31")]
        from: String,
        #[arg(long, default_value = "2020-09-30")]
        to: String,
        #[arg(long, default_value_t = 258)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated training and generation; CQV of the shocks per factor.
    Stability {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage enabled in a config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.display().to_string();
    move |source| PipelineError::Io { path, source }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn stamp_for<T: Serialize>(inputs: &T, seed: u64) -> Stamp {
    Stamp {
        config_hash: hash_json(inputs),
        seed,
        format_version: REPORT_FORMAT_VERSION,
    }
}

fn load_config(path: &Path, data: Option<PathBuf>) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(d) = data {
        cfg.paths.data = d;
    }
    Ok(cfg)
}

fn returns_path(report: &Path) -> PathBuf {
    report.with_extension("returns.csv")
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let default = |name: &str| cli.output_dir.join(name);
    match cli.command {
        Command::Synth {
            spec,
            factors,
            days,
            correlation,
            seed,
            out,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
                    toml::from_str::<SyntheticSpec>(&text).map_err(|e| PipelineError::Config(e.to_string()))?
                }
                None => SyntheticSpec::standard(factors, days, correlation, seed),
            };
            let dir = out.unwrap_or_else(|| cli.output_dir.clone());
            let ts = write_synthetic_dataset(&spec, &dir)?;
            println!("wrote {} days x {} factors to {}", ts.n_obs(), ts.n_factors(), dir.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config, data)?;
            let (_, returns) = prepare_data(&cfg)?;
            let gan_cfg = GanConfig {
                seed: cfg.seed,
                ..cfg.gan.clone()
            };
            let mut report = |cp: &esg_core::gan::Checkpoint| {
                eprintln!("iteration {:>6}  max W1 {:.5}", cp.iteration, cp.max_wasserstein);
            };
            let model = match train_gan(&gan_cfg, &returns, Some(&mut report)) {
                Err(GanError::TrainingDiverged { iteration, last_good }) => {
                    let path = out.unwrap_or_else(|| default("model.json")).with_extension("last_good.json");
                    last_good.save(&path)?;
                    eprintln!("last good checkpoint saved to {}", path.display());
                    return Err(GanError::TrainingDiverged { iteration, last_good }.into());
                }
                r => r?,
            };
            let path = out.unwrap_or_else(|| default("model.json"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            model.save(&path)?;
            println!("model written to {}", path.display());
        }
        Command::Validate {
            config,
            data,
            model,
            out,
            plot_data,
            novelty,
        } => {
            let cfg = load_config(&config, data)?;
            let (_, returns) = prepare_data(&cfg)?;
            let m = GanModel::load(&model)?;
            let seed = derive_seed(cfg.seed, &[VALIDATION_SEED]);
            let mut report = evaluate_checkpoint(&m, &returns, cfg.gan.eval_size, seed)?;
            if novelty {
                let mut rng = esg_core::rng::stream(seed, esg_core::rng::Stream::EvaluationLatents);
                let generated = m.sample_normalized(returns.n_obs(), &mut rng)?;
                report.novelty_distances = Some(novelty_distances(&generated, &returns.returns)?);
            }
            if let Some(p) = plot_data {
                write_history_plot_data(&m.history, &m.factor_ids(), create(&p)?)?;
            }
            let path = out.unwrap_or_else(|| default("validation.json"));
            create(&path)?;
            write_json(&path, &cfg.stamp(), &report)?;
            println!("tf = {:.6}", report.tf_value);
        }
        Command::ArchSearch {
            config,
            data,
            grid,
            out,
        } => {
            let cfg = load_config(&config, data)?;
            let (_, returns) = prepare_data(&cfg)?;
            let text = fs::read_to_string(&grid).map_err(io_err(&grid))?;
            let grid: SearchGrid = toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
            let entries = architecture_search(&grid.expand(), &returns, cfg.seed)?;
            let path = out.unwrap_or_else(|| default("arch_search.csv"));
            write_search_table(&entries, create(&path)?)?;
            if let Some(best) = entries.first() {
                println!(
                    "best: G{}x{} D{}x{} tf={}",
                    best.config.n_layers_g,
                    best.config.neurons_g,
                    best.config.n_layers_d,
                    best.config.neurons_d,
                    best.tf.map_or("n/a".into(), |t| format!("{t:.6}"))
                );
            }
        }
        Command::Generate {
            model,
            scenarios,
            seed,
            out,
        } => {
            let m = GanModel::load(&model)?;
            let scaling = m
                .scaling
                .clone()
                .ok_or_else(|| PipelineError::Config("model has no scaling".into()))?;
            let set = generate_scenarios(&m, scenarios, &scaling, seed)?;
            let path = out.unwrap_or_else(|| default("scenarios.csv"));
            set.write_csv(create(&path)?)?;
            println!("{} scenarios written to {}", set.len(), path.display());
        }
        Command::Evaluate {
            model,
            universe,
            portfolios,
            migration,
            curve,
            recovery_rate,
            scenarios,
            seed,
            one_sided,
            out,
        } => {
            let m = GanModel::load(&model)?;
            let scaling = m
                .scaling
                .clone()
                .ok_or_else(|| PipelineError::Config("model has no scaling".into()))?;
            let set = generate_scenarios(&m, scenarios, &scaling, seed)?;
            let cfg = RunConfig {
                seed,
                n_scenarios: scenarios,
                paths: esg_core::pipeline::Paths {
                    data: PathBuf::new(),
                    schema: PathBuf::new(),
                    universe: Some(universe),
                    portfolios: Some(portfolios.clone()),
                    migration,
                    curve,
                    model: Some(model),
                    output_dir: cli.output_dir.clone(),
                },
                stages: Default::default(),
                data: Default::default(),
                gan: m.config.clone(),
                evaluation: esg_core::pipeline::EvaluationOptions {
                    recovery_rate,
                    one_sided,
                    ..Default::default()
                },
                backtest: Default::default(),
                stability: Default::default(),
            };
            let valuator = build_valuator(&cfg, &set.factor_ids)?;
            let book = PortfolioBook::load(&portfolios)?;
            let mut set = set;
            apply_clamps(&mut set, &cfg.evaluation.clamps)?;
            let evaluation = evaluate_book(&book, &set, &valuator, &cfg.evaluation.one_sided, &cfg.evaluation.risk)?;
            let mut report = evaluation.report;
            let stamp = stamp_for(&cfg, seed);
            report.stamp = Some(stamp.clone());
            let path = out.unwrap_or_else(|| default("report.json"));
            write_returns_csv(&evaluation.values, create(&returns_path(&path))?)?;
            write_band_csv(&report, create(&path.with_extension("bands.csv"))?)?;
            write_report(&path, &report)?;
            for p in &report.portfolios {
                println!("{:<16} risk charge {:>8.4}%", p.id, 100.0 * p.risk_charge);
            }
        }
        Command::Backtest {
            series,
            report,
            from,
            to,
            window,
            out,
        } => {
            let mv = MarketValueSeries::load(&series)?;
            let text = fs::read_to_string(&report).map_err(io_err(&report))?;
            let mut risk: RiskReport =
                serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", report.display())))?;
            let rpath = returns_path(&report);
            let rtext = fs::read_to_string(&rpath).map_err(io_err(&rpath))?;
            let returns = read_returns_csv(&rtext)?;
            let opts = BacktestOptions { from, to, window };
            let entries: Vec<BacktestEntry> = backtest(&mv, &returns, &opts)?;
            for e in &entries {
                println!(
                    "{:<16} worst case {:>8.2}% on {}  alpha {:>6.2}%",
                    e.portfolio,
                    100.0 * e.worst_case,
                    e.worst_case_date,
                    100.0 * e.alpha
                );
            }
            risk.backtest = entries;
            if risk.stamp.is_none() {
                risk.stamp = Some(stamp_for(&opts, 0));
            }
            write_report(&out.unwrap_or(report), &risk)?;
        }
        Command::Stability { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let (_, returns) = prepare_data(&cfg)?;
            let opts = StabilityOptions {
                base_seed: derive_seed(cfg.seed, &[STABILITY_SEED]),
                ..cfg.stability
            };
            let study = stability_study(&cfg.gan, &returns, &opts)?;
            let path = out.unwrap_or_else(|| default("cqv.csv"));
            study.write_cqv_csv(create(&path)?)?;
            write_json(&path.with_extension("json"), &cfg.stamp(), &study)?;
            if let Some((t, msg)) = study.failures.first() {
                return Err(PipelineError::TrainingFailed(format!("training {t}: {msg}")));
            }
        }
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = run_pipeline(&cfg)?;
            println!("run {} complete: {}", &summary.stamp.config_hash[..12], summary.run_dir.display());
            for a in &summary.artifacts {
                println!("  {}", a.display());
            }
        }
    }
    Ok(())
}
