//! Stage commands behind the `siliconpoll` binary.
//!
//! Every command reads a [`RunConfig`] plus the artifacts earlier commands
//! left in the output directory, and writes its own artifacts next to them.
//! All stage seeds derive from the single run seed, the same way the
//! simulator derives them, so `pool`, `poll`, `infer` and `eval` run in
//! sequence reproduce an end-to-end simulation exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use siliconpoll_core::annotator::{AnnotatorBackend, LiveAdapter, MockOracle, OracleConfig, RetryPolicy};
use siliconpoll_core::domain::{read_frame_csv, write_frame_csv, FeatureDef, QuotaState};
use siliconpoll_core::eval::{
    evaluate, read_margin_draws_csv, read_pollsters_csv, read_raw_csv, read_truth_csv, write_margin_draws_csv,
    write_pollsters_csv, write_raw_csv, write_report_rows_csv, write_truth_csv, EvalOptions, EvalReport, NATIONAL,
};
use siliconpoll_core::filters::{
    poll_users, read_responses_jsonl, write_audit_jsonl, write_responses_jsonl, EnsembleSettings, PollCounts,
    PollSettings, ProcessingLedger,
};
use siliconpoll_core::mrp::{write_diagnostics_json, write_draws_csv, AreaGraph, SamplerSettings};
use siliconpoll_core::pipeline::{
    build_model, infer, write_estimates_csv, ModelConfig, PipelineError, SpeculationPolicy, TrainingSummary,
};
use siliconpoll_core::pool::{
    build_query_plan, read_pool_jsonl, run_pool, write_fixture_jsonl, write_pool_jsonl, MockClient, QueryPlan,
};
use siliconpoll_core::sim::{
    prepare, run_prepared, sub_seed, EndToEndReport, PipelineConfig, PopulationConfig, SelectionConfig, SimError,
};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_STAGE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Stage { .. } => EXIT_STAGE,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            PipelineError::Io(_) | PipelineError::Csv(_) => CliError::Input(e.to_string()),
            e => CliError::Stage {
                stage: e.stage(),
                message: e.to_string(),
            },
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => CliError::Config(m),
            SimError::Stage { source, .. } => source.into(),
        }
    }
}

fn stage<E: Into<PipelineError>>(e: E) -> CliError {
    CliError::from(e.into())
}

fn input<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Platform fixture file for the mock client.
    pub fixtures: PathBuf,
    /// Frame with a `quota` column, over the quota titles.
    pub quota_frame: PathBuf,
    /// Post-stratification frame.
    pub frame: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub pollsters: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub political_terms: String,
    pub topics: Vec<String>,
    pub omega: u32,
    pub pool_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollConfig {
    pub poll_id: String,
    pub fieldwork_date: NaiveDate,
    pub window_days: u32,
    pub m_politics: u32,
    pub lambda: f64,
    #[serde(default)]
    pub area_title: Option<String>,
    #[serde(default = "yes")]
    pub include_speculation: bool,
    #[serde(default)]
    pub randomize_order: bool,
    #[serde(default)]
    pub ensemble: Option<EnsembleSettings>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorKind {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AnnotatorConfig {
    #[serde(default)]
    pub kind: AnnotatorKind,
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Settings for the mock oracle; its seed is replaced by the run seed.
    #[serde(default)]
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub margin: (String, String),
    pub area_level: String,
    #[serde(default)]
    pub zero_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub pool: PoolConfig,
    pub poll: PollConfig,
    #[serde(default)]
    pub annotator: AnnotatorConfig,
    pub features: Vec<FeatureDef>,
    pub graph: AreaGraph,
    pub model: ModelConfig,
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub speculation: SpeculationPolicy,
    /// Reporting levels besides the national one.
    pub levels: Vec<String>,
    pub eval: EvalConfig,
}

/// Command-line overrides shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub include_speculative: Option<bool>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Loads a config and resolves relative paths against its directory.
    pub fn load(path: &Path, o: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.paths.fixtures);
        fix(&mut cfg.paths.quota_frame);
        fix(&mut cfg.paths.frame);
        cfg.paths.truth.as_mut().map(fix);
        cfg.paths.pollsters.as_mut().map(fix);
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(b) = o.include_speculative {
            cfg.speculation.include_high = b;
        }
        Ok(cfg)
    }

    fn poll_settings(&self) -> PollSettings {
        let p = &self.poll;
        PollSettings {
            poll_id: p.poll_id.clone(),
            fieldwork_date: p.fieldwork_date,
            window_days: p.window_days,
            m_politics: p.m_politics,
            lambda: p.lambda,
            features: self.features.clone(),
            area_title: p.area_title.clone(),
            include_speculation: p.include_speculation,
            randomize_order: p.randomize_order,
            seed: sub_seed(self.seed, "poll"),
            ensemble: p.ensemble.clone(),
            retry: p.retry.clone(),
        }
    }

    fn sampler_settings(&self) -> SamplerSettings {
        SamplerSettings {
            seed: sub_seed(self.seed, "sampler"),
            ..self.sampler.clone()
        }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            margin: self.eval.margin.clone(),
            area_level: self.eval.area_level.clone(),
            seed: sub_seed(self.seed, "eval"),
            zero_floor: self.eval.zero_floor,
        }
    }

    fn annotator(&self) -> Result<Box<dyn AnnotatorBackend>, CliError> {
        match self.annotator.kind {
            AnnotatorKind::Mock => {
                let mut cfg = self.annotator.oracle.clone();
                cfg.seed = sub_seed(self.seed, "oracle");
                Ok(Box::new(MockOracle::new(cfg).map_err(|e| CliError::Config(e.to_string()))?))
            }
            AnnotatorKind::Live => Ok(Box::new(
                LiveAdapter::from_env(self.annotator.temperature).map_err(|e| CliError::Config(e.to_string()))?,
            )),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(input(path))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    std::fs::create_dir_all(dir).map_err(input(dir))?;
    let p = dir.join(name);
    File::create(&p).map(BufWriter::new).map_err(input(&p))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Input(e.to_string()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(input(&dir.join(name)))
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T, CliError> {
    let p = dir.join(name);
    serde_json::from_reader(open(&p)?).map_err(input(&p))
}

fn client(cfg: &RunConfig) -> Result<MockClient, CliError> {
    MockClient::from_jsonl(open(&cfg.paths.fixtures)?).map_err(input(&cfg.paths.fixtures))
}

pub const POOL_FILE: &str = "pool.jsonl";
pub const PLAN_FILE: &str = "pool_plan.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const MARGIN_DRAWS_FILE: &str = "margin_draws.csv";
pub const RAW_FILE: &str = "raw_margins.csv";
pub const REPORT_FILE: &str = "eval_report.json";

/// Builds the query plan, runs every query against the fixtures and writes the pool.
pub fn cmd_pool(cfg: &RunConfig, out: &Path) -> Result<usize, CliError> {
    let plan = build_query_plan(&cfg.pool.political_terms, &cfg.pool.topics, cfg.pool.omega).map_err(stage)?;
    let pool = run_pool(&plan, &client(cfg)?, cfg.pool.pool_date).map_err(stage)?;
    write_json(out, PLAN_FILE, &plan)?;
    let mut w = create(out, POOL_FILE)?;
    write_pool_jsonl(&pool, &mut w).map_err(stage)?;
    w.flush().map_err(input(out))?;
    log::info!("pool: {} users", pool.entries.len());
    Ok(pool.entries.len())
}

/// Runs the filter cascade and annotation over the pool.
///
/// A `ledger.csv` left by an earlier wave in the output directory is honoured and updated.
pub fn cmd_poll(cfg: &RunConfig, out: &Path) -> Result<PollCounts, CliError> {
    let plan: QueryPlan = read_json(out, PLAN_FILE)?;
    let pool_path = out.join(POOL_FILE);
    let pool = read_pool_jsonl(open(&pool_path)?, plan, cfg.pool.pool_date).map_err(input(&pool_path))?;
    let qpath = &cfg.paths.quota_frame;
    let (frame, quotas) = read_frame_csv(open(qpath)?).map_err(input(qpath))?;
    let quotas = quotas.ok_or_else(|| CliError::Input(format!("{}: no quota column", qpath.display())))?;
    let quotas = QuotaState::from_map(frame, &quotas).map_err(input(qpath))?;
    let ledger_path = out.join("ledger.csv");
    let mut ledger = if ledger_path.exists() {
        ProcessingLedger::read_csv(open(&ledger_path)?).map_err(input(&ledger_path))?
    } else {
        ProcessingLedger::new()
    };
    let annotator = cfg.annotator()?;
    let outcome = poll_users(&pool, &mut ledger, &quotas, &cfg.poll_settings(), annotator.as_ref(), &client(cfg)?)
        .map_err(stage)?;

    let mut w = create(out, RESPONSES_FILE)?;
    write_responses_jsonl(&outcome.responses, &mut w).map_err(stage)?;
    w.flush().map_err(input(out))?;
    let mut w = create(out, "audit.jsonl")?;
    write_audit_jsonl(&outcome.audit, &mut w).map_err(stage)?;
    w.flush().map_err(input(out))?;
    let mut w = csv::Writer::from_writer(create(out, "quota_fill.csv")?);
    w.write_record(["cell_id", "attributes", "quota", "filled"]).map_err(stage)?;
    for q in &outcome.quota_report {
        let attrs: Vec<String> = q.attributes.iter().map(|(k, v)| format!("{k}={v}")).collect();
        w.write_record([q.cell_id.to_string(), attrs.join("; "), q.quota.to_string(), q.filled.to_string()])
            .map_err(stage)?;
    }
    w.flush().map_err(input(out))?;
    write_json(out, "poll_counts.json", &outcome.counts)?;
    let mut w = create(out, "ledger.csv")?;
    ledger.write_csv(&mut w).map_err(stage)?;
    w.flush().map_err(input(out))?;
    if outcome.parse_warnings > 0 {
        log::warn!("poll: {} replies needed lenient parsing", outcome.parse_warnings);
    }
    log::info!("poll: {} responses", outcome.responses.len());
    Ok(outcome.counts)
}

/// Fits the model to the responses and post-stratifies.
pub fn cmd_infer(cfg: &RunConfig, out: &Path) -> Result<TrainingSummary, CliError> {
    let rpath = out.join(RESPONSES_FILE);
    let responses = read_responses_jsonl(open(&rpath)?).map_err(input(&rpath))?;
    let fpath = &cfg.paths.frame;
    let (frame, _) = read_frame_csv(open(fpath)?).map_err(input(fpath))?;
    let model = build_model(&cfg.model, cfg.graph.clone(), &frame, Vec::new()).map_err(stage)?;
    let res = infer(
        &model,
        &responses,
        &frame,
        &cfg.sampler_settings(),
        &cfg.speculation,
        &cfg.levels,
        &cfg.eval.margin,
    )
    .map_err(stage)?;
    for w in &res.posterior.diagnostics.warnings {
        log::warn!("infer: {w}");
    }

    let mut w = create(out, "draws.csv")?;
    write_draws_csv(&res.posterior, &mut w).map_err(stage)?;
    let mut w = create(out, "diagnostics.json")?;
    write_diagnostics_json(&res.posterior.diagnostics, &mut w).map_err(stage)?;
    w.flush().map_err(input(out))?;
    let area = &cfg.model.area_title;
    let split = [
        ("estimates_national.csv", Box::new(|l: &str| l == NATIONAL) as Box<dyn Fn(&str) -> bool>),
        ("estimates_state.csv", Box::new(|l: &str| l == area)),
        ("estimates_crosstabs.csv", Box::new(|l: &str| l != NATIONAL && l != area)),
    ];
    for (name, keep) in split {
        write_estimates_csv(res.estimates.iter().filter(|e| keep(&e.level)), create(out, name)?)?;
    }
    write_margin_draws_csv(&res.margins, create(out, MARGIN_DRAWS_FILE)?).map_err(stage)?;
    write_raw_csv(&res.raw, create(out, RAW_FILE)?).map_err(stage)?;
    write_json(out, "training.json", &res.training)?;
    Ok(res.training)
}

/// Scores margin draws against the truth file and any pollster file.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport, CliError> {
    let dpath = out.join(MARGIN_DRAWS_FILE);
    let draws = read_margin_draws_csv(open(&dpath)?).map_err(input(&dpath))?;
    let raw_path = out.join(RAW_FILE);
    let raw = read_raw_csv(open(&raw_path)?).map_err(input(&raw_path))?;
    let tpath = cfg
        .paths
        .truth
        .as_ref()
        .ok_or_else(|| CliError::Config("eval needs paths.truth".into()))?;
    let truth = read_truth_csv(open(tpath)?).map_err(input(tpath))?;
    let pollsters = match &cfg.paths.pollsters {
        Some(p) => read_pollsters_csv(open(p)?).map_err(input(p))?,
        None => Vec::new(),
    };
    let report = evaluate(&draws, &truth, &raw, &pollsters, &cfg.eval_options()).map_err(stage)?;
    write_report_rows_csv(&report, create(out, "eval_rows.csv")?).map_err(stage)?;
    write_json(out, REPORT_FILE, &report)?;
    Ok(report)
}

/// Simulation settings; missing sections fall back to the built-in desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "PopulationConfig::desk_default")]
    pub population: PopulationConfig,
    #[serde(default = "SelectionConfig::desk_default")]
    pub selection: SelectionConfig,
    #[serde(default = "PipelineConfig::desk_default")]
    pub pipeline: PipelineConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            population: PopulationConfig::desk_default(),
            selection: SelectionConfig::desk_default(),
            pipeline: PipelineConfig::desk_default(),
        }
    }
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Writes a synthetic world into `out`: fixtures, frames, truth, pollsters and a
/// `run.toml` that drives the stage commands over them. With `run`, also
/// executes every stage in memory and writes `end_to_end.json`.
pub fn cmd_simulate(sim: &SimConfig, seed: u64, out: &Path, run: bool) -> Result<Option<EndToEndReport>, CliError> {
    let p = prepare(&sim.population, &sim.selection, &sim.pipeline, seed)?;
    let mut w = create(out, "fixtures.jsonl")?;
    write_fixture_jsonl(&p.platform.fixtures, &mut w).map_err(stage)?;
    w.flush().map_err(input(out))?;
    write_frame_csv(&p.frame, None, create(out, "frame.csv")?).map_err(stage)?;
    write_frame_csv(&p.quota_frame, Some(&p.quotas), create(out, "quota_frame.csv")?).map_err(stage)?;
    write_truth_csv(&p.truth, create(out, "truth.csv")?).map_err(stage)?;
    write_pollsters_csv(&p.pollsters, create(out, "pollsters.csv")?).map_err(stage)?;

    let mut oracle = p.oracle.clone();
    oracle.seed = 0;
    let cfg = RunConfig {
        seed,
        paths: Paths {
            fixtures: "fixtures.jsonl".into(),
            quota_frame: "quota_frame.csv".into(),
            frame: "frame.csv".into(),
            truth: Some("truth.csv".into()),
            pollsters: Some("pollsters.csv".into()),
        },
        pool: PoolConfig {
            political_terms: p.platform.political_terms.clone(),
            topics: p.platform.topics.clone(),
            omega: sim.pipeline.omega,
            pool_date: p.platform.pool_date,
        },
        poll: PollConfig {
            poll_id: p.poll.poll_id.clone(),
            fieldwork_date: p.poll.fieldwork_date,
            window_days: p.poll.window_days,
            m_politics: p.poll.m_politics,
            lambda: p.poll.lambda,
            area_title: p.poll.area_title.clone(),
            include_speculation: p.poll.include_speculation,
            randomize_order: p.poll.randomize_order,
            ensemble: p.poll.ensemble.clone(),
            retry: p.poll.retry.clone(),
        },
        annotator: AnnotatorConfig {
            kind: AnnotatorKind::Mock,
            temperature: None,
            oracle,
        },
        features: p.poll.features.clone(),
        graph: p.graph.clone(),
        model: p.model.clone(),
        sampler: SamplerSettings {
            seed: 0,
            ..p.sampler.clone()
        },
        speculation: sim.pipeline.speculation.clone(),
        levels: p.levels.clone(),
        eval: EvalConfig {
            margin: p.eval.margin.clone(),
            area_level: p.eval.area_level.clone(),
            zero_floor: p.eval.zero_floor,
        },
    };
    let mut w = create(out, "run.toml")?;
    w.write_all(cfg.to_toml()?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(input(out))?;
    if !run {
        return Ok(None);
    }
    let report = run_prepared(&p, sim.pipeline.omega, &sim.pipeline.speculation)?;
    let mut w = create(out, "end_to_end.json")?;
    w.write_all(report.to_json().as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(input(out))?;
    Ok(Some(report))
}
