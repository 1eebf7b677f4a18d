//! Configuration-driven end-to-end run.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    compute_rolling_returns, fill_gaps, load_time_series, normalize, DataError, FactorSchema,
    ReturnKind, ReturnMatrix, TimeSeriesSet, DEFAULT_WINDOW,
};
use crate::gan::{generate_scenarios, train_gan, GanConfig, GanError, GanModel};
use crate::portfolio::{
    apply_clamps, backtest, evaluate_book, portfolio_values, stability_study, value_scenarios,
    write_band_csv, write_returns_csv, BacktestOptions, FactorClamp, MarketValueSeries,
    PortfolioBook, PortfolioError, RiskChargeOptions, RiskReport, StabilityOptions,
};
use crate::rng::derive_seed;
use crate::scenario::ScenarioSet;
use crate::validation::{evaluate_checkpoint, write_history_plot_data, ValidationError};
use crate::valuation::{MigrationMatrix, Universe, ValuationError, Valuator, YieldCurveSpec};

/// Version of every JSON artifact written by the pipeline.
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Seed-path labels for derived stage seeds.
pub const GENERATION_SEED: u64 = 1;
pub const VALIDATION_SEED: u64 = 2;
pub const STABILITY_SEED: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
    pub format_version: u32,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Valuation(#[from] ValuationError),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error("training failed: {0}")]
    TrainingFailed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 1 config, 2 data, 3 training divergence, 4 valuation.
    pub fn exit_code(&self) -> i32 {
        fn gan(e: &GanError) -> i32 {
            match e {
                GanError::InvalidConfig(_) | GanError::InvalidArchitecture(_) => 1,
                GanError::Data(_) | GanError::DataTooSmall { .. } | GanError::Persist { .. } => 2,
                _ => 3,
            }
        }
        match self {
            Self::Config(_) => 1,
            Self::Data(_) | Self::Io { .. } => 2,
            Self::Gan(e) => gan(e),
            Self::Validation(ValidationError::Gan(e)) => gan(e),
            Self::Validation(_) => 2,
            Self::Valuation(_) => 4,
            Self::TrainingFailed(_) => 3,
            Self::Portfolio(e) => match e {
                PortfolioError::Gan(g) => gan(g),
                PortfolioError::Data(_) | PortfolioError::Io(_) => 2,
                _ => 4,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "config",
            2 => "data",
            3 => "training",
            _ => "valuation",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.display().to_string();
    move |source| PipelineError::Io { path, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub universe: Option<PathBuf>,
    #[serde(default)]
    pub portfolios: Option<PathBuf>,
    #[serde(default)]
    pub migration: Option<PathBuf>,
    #[serde(default)]
    pub curve: Option<PathBuf>,
    /// Existing model used when training is disabled.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub train: bool,
    pub validate: bool,
    pub generate: bool,
    pub evaluate: bool,
    pub backtest: bool,
    pub stability: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            train: true,
            validate: true,
            generate: true,
            evaluate: true,
            backtest: true,
            stability: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    pub window: usize,
    pub fill_gaps: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            fill_gaps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationOptions {
    pub recovery_rate: f64,
    /// Factors whose shock is reported upward only.
    pub one_sided: Vec<String>,
    pub clamps: Vec<FactorClamp>,
    pub risk: RiskChargeOptions,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            recovery_rate: 0.45,
            one_sided: Vec::new(),
            clamps: Vec::new(),
            risk: RiskChargeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_scenarios: usize,
    pub paths: Paths,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default)]
    pub data: DataOptions,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub evaluation: EvaluationOptions,
    #[serde(default)]
    pub backtest: BacktestOptions,
    #[serde(default)]
    pub stability: StabilityOptions,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if cfg.n_scenarios == 0 {
            return Err(PipelineError::Config("n_scenarios must be positive".into()));
        }
        cfg.gan.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            config_hash: self.hash(),
            seed: self.seed,
            format_version: REPORT_FORMAT_VERSION,
        }
    }

    /// Directory receiving this run's artifacts, named after the config hash.
    pub fn run_dir(&self) -> PathBuf {
        self.paths.output_dir.join(format!("run-{}", &self.hash()[..12]))
    }

    /// Fails fast on missing inputs for the enabled stages.
    pub fn check_inputs(&self) -> Result<(), PipelineError> {
        let need = |p: &Option<PathBuf>, what: &str| -> Result<(), PipelineError> {
            match p {
                Some(p) if p.exists() => Ok(()),
                Some(p) => Err(PipelineError::Config(format!("{what} `{}` not found", p.display()))),
                None => Err(PipelineError::Config(format!("{what} path required"))),
            }
        };
        need(&Some(self.paths.data.clone()), "data")?;
        need(&Some(self.paths.schema.clone()), "schema")?;
        if !self.stages.train && (self.stages.generate || self.stages.validate) {
            need(&self.paths.model, "model")?;
        }
        if self.stages.evaluate || self.stages.backtest {
            need(&self.paths.universe, "universe")?;
            need(&self.paths.portfolios, "portfolios")?;
            for (p, what) in [(&self.paths.migration, "migration matrix"), (&self.paths.curve, "curve spec")] {
                if p.is_some() {
                    need(p, what)?;
                }
            }
        }
        if self.stages.evaluate && !self.stages.generate {
            return Err(PipelineError::Config("evaluate requires generate".into()));
        }
        if self.stages.backtest && !self.stages.evaluate {
            return Err(PipelineError::Config("backtest requires evaluate".into()));
        }
        Ok(())
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data);
        fix(&mut self.schema);
        for p in [
            &mut self.universe,
            &mut self.portfolios,
            &mut self.migration,
            &mut self.curve,
            &mut self.model,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }
}

/// SHA-256 of the JSON serialization of `value`, hex encoded.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("value serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct Stamped<'a, T: Serialize> {
    stamp: &'a Stamp,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_json<T: Serialize>(path: &Path, stamp: &Stamp, body: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(&Stamped { stamp, body }).expect("report serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes a risk report, which carries its own stamp.
pub fn write_report(path: &Path, report: &RiskReport) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, PipelineError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Loads levels, fills gaps and returns the normalized return matrix.
pub fn prepare_data(cfg: &RunConfig) -> Result<(TimeSeriesSet, ReturnMatrix), PipelineError> {
    let schema = FactorSchema::load(&cfg.paths.schema)?;
    let mut ts = load_time_series(&cfg.paths.data, &schema)?;
    if cfg.data.fill_gaps {
        ts = fill_gaps(&ts)?;
    }
    let returns = normalize(&compute_rolling_returns(&ts, cfg.data.window)?)?;
    Ok((ts, returns))
}

/// Factor shifts that move today's levels back to each historical date:
/// `level[t] / level[last] - 1` or `level[t] - level[last]`.
pub fn historical_shifts(ts: &TimeSeriesSet) -> Result<ScenarioSet, PipelineError> {
    let last = ts.n_obs().checked_sub(1).ok_or(DataError::WindowTooLarge { rows: 0, window: 1 })?;
    let mut values = ts.values.clone();
    for (j, f) in ts.factors.iter().enumerate() {
        let base = ts.values[[last, j]];
        values.column_mut(j).mapv_inplace(|v| match f.kind {
            ReturnKind::Relative => v / base - 1.0,
            ReturnKind::Absolute => v - base,
        });
    }
    Ok(ScenarioSet::new(ts.factors.iter().map(|f| f.id.clone()).collect(), values)?)
}

/// Portfolio market values along the history, obtained by revaluing today's
/// holdings under each date's factor levels.
pub fn historical_market_values(
    ts: &TimeSeriesSet,
    book: &PortfolioBook,
    valuator: &Valuator,
) -> Result<MarketValueSeries, PipelineError> {
    let shifts = historical_shifts(ts)?;
    let inst = value_scenarios(valuator, &shifts)?;
    let n = ts.n_obs();
    let mut values = ndarray::Array2::zeros((n, book.portfolios.len()));
    let mut asset_values = values.clone();
    for (j, pf) in book.portfolios.iter().enumerate() {
        let pv = portfolio_values(pf, &inst)?;
        values.column_mut(j).assign(&ndarray::Array1::from(pv.scenarios.clone()));
        let assets = crate::portfolio::Portfolio {
            holdings: pf
                .holdings
                .iter()
                .filter(|h| h.side == crate::portfolio::Side::Asset)
                .cloned()
                .collect(),
            ..pf.clone()
        };
        if assets.holdings.is_empty() {
            asset_values.column_mut(j).assign(&values.column(j));
        } else {
            let av = portfolio_values(&assets, &inst)?;
            asset_values.column_mut(j).assign(&ndarray::Array1::from(av.scenarios));
        }
    }
    Ok(MarketValueSeries {
        dates: ts.dates.clone(),
        portfolios: book.portfolios.iter().map(|p| p.id.clone()).collect(),
        values,
        asset_values,
    })
}

pub fn build_valuator(cfg: &RunConfig, factor_ids: &[String]) -> Result<Valuator, PipelineError> {
    let universe_path = cfg.paths.universe.as_ref().ok_or_else(|| PipelineError::Config("universe path required".into()))?;
    let universe = Universe::load(universe_path)?;
    let migration = cfg
        .paths
        .migration
        .as_ref()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok::<_, PipelineError>(MigrationMatrix::from_csv(&text, cfg.evaluation.recovery_rate)?)
        })
        .transpose()?;
    let curve = cfg.paths.curve.as_ref().map(YieldCurveSpec::load).transpose()?;
    Ok(Valuator::new(universe, factor_ids, migration, curve)?)
}

/// Outcome of a successful run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub stamp: Stamp,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ErrorReport<'a> {
    stage: &'a str,
    kind: &'a str,
    exit_code: i32,
    message: String,
}

/// Runs the enabled stages in order data, train, validate, generate,
/// evaluate, backtest, stability. On failure an `error.json` is written next
/// to whatever artifacts were already produced.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    cfg.check_inputs()?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let stamp = cfg.stamp();
    let mut artifacts = Vec::new();
    let mut stage = "data";
    let result = run_stages(cfg, &run_dir, &stamp, &mut artifacts, &mut stage);
    if let Err(e) = &result {
        let report = ErrorReport {
            stage,
            kind: e.kind(),
            exit_code: e.exit_code(),
            message: e.to_string(),
        };
        // best effort; the original error is what the caller needs
        let _ = write_json(&run_dir.join("error.json"), &stamp, &report);
    }
    result.map(|()| RunSummary {
        run_dir,
        stamp,
        artifacts,
    })
}

fn run_stages<'s>(
    cfg: &RunConfig,
    dir: &Path,
    stamp: &Stamp,
    artifacts: &mut Vec<PathBuf>,
    stage: &mut &'s str,
) -> Result<(), PipelineError> {
    let (ts, returns) = prepare_data(cfg)?;
    let mut push = |p: PathBuf| {
        artifacts.push(p.clone());
        p
    };

    *stage = "train";
    let model = if cfg.stages.train {
        let gan_cfg = GanConfig {
            seed: cfg.seed,
            ..cfg.gan.clone()
        };
        let model = train_gan(&gan_cfg, &returns, None)?;
        model.save(push(dir.join("model.json")))?;
        let history = push(dir.join("history.csv"));
        write_history_plot_data(&model.history, &returns.factor_ids(), create(&history)?)?;
        Some(model)
    } else if cfg.stages.generate || cfg.stages.validate {
        Some(GanModel::load(cfg.paths.model.as_ref().expect("checked"))?)
    } else {
        None
    };

    if cfg.stages.validate {
        *stage = "validate";
        let model = model.as_ref().expect("model present");
        let report = evaluate_checkpoint(
            model,
            &returns,
            cfg.gan.eval_size,
            derive_seed(cfg.seed, &[VALIDATION_SEED]),
        )?;
        write_json(&push(dir.join("validation.json")), stamp, &report)?;
    }

    if !cfg.stages.generate {
        return Ok(());
    }
    *stage = "generate";
    let model = model.as_ref().expect("model present");
    let scaling = model
        .scaling
        .clone()
        .or(returns.scaling.clone())
        .expect("normalized data carries scaling");
    let mut scenarios = generate_scenarios(
        model,
        cfg.n_scenarios,
        &scaling,
        derive_seed(cfg.seed, &[GENERATION_SEED]),
    )?;
    apply_clamps(&mut scenarios, &cfg.evaluation.clamps)?;
    scenarios.write_csv(create(&push(dir.join("scenarios.csv")))?)?;

    if !cfg.stages.evaluate {
        return Ok(());
    }
    *stage = "evaluate";
    let book_path = cfg.paths.portfolios.as_ref().expect("checked");
    let book = PortfolioBook::load(book_path)?;
    let valuator = build_valuator(cfg, &scenarios.factor_ids)?;
    let evaluation = evaluate_book(&book, &scenarios, &valuator, &cfg.evaluation.one_sided, &cfg.evaluation.risk)?;
    let mut report = evaluation.report;
    report.stamp = Some(stamp.clone());
    write_returns_csv(&evaluation.values, create(&push(dir.join("returns.csv")))?)?;

    if cfg.stages.backtest {
        *stage = "backtest";
        let series = historical_market_values(&ts, &book, &valuator)?;
        series.write_csv(create(&push(dir.join("market_values.csv")))?)?;
        let returns = evaluation
            .values
            .iter()
            .map(|v| {
                let net = v.net_returns()?;
                let assets = if v.asset_base != 0.0 { v.asset_returns()? } else { net.clone() };
                Ok((v.id.clone(), net, assets))
            })
            .collect::<Result<Vec<_>, PortfolioError>>()?;
        report.backtest = backtest(&series, &returns, &cfg.backtest)?;
    }

    if cfg.stages.stability {
        *stage = "stability";
        let opts = StabilityOptions {
            base_seed: derive_seed(cfg.seed, &[STABILITY_SEED]),
            ..cfg.stability
        };
        let study = stability_study(&cfg.gan, &returns, &opts)?;
        study.write_cqv_csv(create(&push(dir.join("cqv.csv")))?)?;
        write_json(&push(dir.join("stability.json")), stamp, &study)?;
        if !study.failures.is_empty() {
            let (t, msg) = &study.failures[0];
            return Err(PipelineError::TrainingFailed(format!("stability training {t}: {msg}")));
        }
        report.stability = Some(study.table);
    }

    write_band_csv(&report, create(&push(dir.join("bands.csv")))?)?;
    write_report(&push(dir.join("report.json")), &report)?;
    Ok(())
}
