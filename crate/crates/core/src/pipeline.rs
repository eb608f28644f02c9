//! Stage functions shared by the command line and the simulator, so that a
//! run through files and an in-memory run give the same numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize, Attributes, DomainError, SiliconResponse, StratCell, StratFrame};
use crate::eval::{raw_margins, EvalError, MarginDraws, RawMargin, NATIONAL};
use crate::filters::FilterError;
use crate::frame_builder::FrameError;
use crate::mrp::predict::{cell_probabilities, crosstab_map, poststratify, summarize, CellWeights};
use crate::mrp::{
    sample, AreaCovariates, AreaGraph, EffectPrior, EffectSpec, InteractionSpec, Model, ModelSpec, MrpError,
    PosteriorDraws, SamplerSettings, TrainingData,
};
use crate::pool::PoolError;
use crate::prompts::DEFAULT_SPECULATION_THRESHOLD;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("pool stage: {0}")]
    Pool(#[from] PoolError),
    #[error("poll stage: {0}")]
    Poll(#[from] FilterError),
    #[error("frame stage: {0}")]
    Frame(#[from] FrameError),
    #[error("frame: {0}")]
    Domain(#[from] DomainError),
    #[error("inference stage: {0}")]
    Mrp(#[from] MrpError),
    #[error("evaluation stage: {0}")]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Pool(_) => "pool",
            PipelineError::Poll(_) => "poll",
            PipelineError::Frame(_) | PipelineError::Domain(_) => "frame",
            PipelineError::Mrp(_) => "infer",
            PipelineError::Eval(_) => "eval",
            PipelineError::Io(_) | PipelineError::Csv(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectConfig {
    pub title: String,
    pub prior: EffectPrior,
    /// Level order; it matters for random walks.
    pub categories: Vec<String>,
}

/// Links each choice to a category of the previous-election attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PastVoteConfig {
    pub title: String,
    pub map: BTreeMap<String, String>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub outcome_title: String,
    pub choices: Vec<String>,
    pub reference: String,
    pub area_title: String,
    pub effects: Vec<EffectConfig>,
    #[serde(default)]
    pub past_vote: Option<PastVoteConfig>,
    /// Area-level previous shares as fixed effects (needs `past_vote`).
    #[serde(default = "yes")]
    pub area_covariates: bool,
    /// Past vote × area previous share interaction (needs `past_vote`).
    #[serde(default = "yes")]
    pub interaction: bool,
    #[serde(default = "yes")]
    pub include_area_effect: bool,
    #[serde(default = "yes")]
    pub include_no_state: bool,
    #[serde(default)]
    pub include_poll_walk: bool,
}

/// Previous-election share of each non-reference choice's mapped category, per area.
pub fn area_past_shares(
    frame: &StratFrame,
    cfg: &ModelConfig,
    graph: &AreaGraph,
) -> Result<BTreeMap<String, Vec<f64>>, PipelineError> {
    let past = cfg
        .past_vote
        .as_ref()
        .ok_or_else(|| PipelineError::Config("past_vote is not configured".into()))?;
    let n = graph.len();
    let mut tot = vec![0.0; n];
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in &frame.cells {
        let area = c
            .attributes
            .get(&cfg.area_title)
            .and_then(|a| graph.index_of(a))
            .ok_or_else(|| PipelineError::Config(format!("cell {} has no known `{}`", c.cell_id, cfg.area_title)))?;
        let cat = c
            .attributes
            .get(&past.title)
            .ok_or_else(|| PipelineError::Config(format!("cell {} has no `{}`", c.cell_id, past.title)))?;
        tot[area] += c.weight;
        by_cat.entry(normalize(cat)).or_insert_with(|| vec![0.0; n])[area] += c.weight;
    }
    let mut out = BTreeMap::new();
    for ch in &cfg.choices {
        if normalize(ch) == normalize(&cfg.reference) {
            continue;
        }
        let cat = past
            .map
            .get(ch)
            .ok_or_else(|| PipelineError::Config(format!("past_vote.map has no entry for `{ch}`")))?;
        let w = by_cat.get(&normalize(cat)).cloned().unwrap_or_else(|| vec![0.0; n]);
        let shares = w
            .iter()
            .zip(&tot)
            .map(|(a, t)| if *t > 0.0 { a / t } else { 0.0 })
            .collect();
        out.insert(ch.clone(), shares);
    }
    Ok(out)
}

pub fn build_model(
    cfg: &ModelConfig,
    graph: AreaGraph,
    frame: &StratFrame,
    polls: Vec<String>,
) -> Result<Model, PipelineError> {
    let reference = cfg
        .choices
        .iter()
        .position(|c| normalize(c) == normalize(&cfg.reference))
        .ok_or_else(|| PipelineError::Config(format!("reference `{}` is not a choice", cfg.reference)))?;
    let effects = cfg
        .effects
        .iter()
        .map(|e| EffectSpec {
            title: e.title.clone(),
            prior: e.prior,
            categories: e.categories.clone(),
        })
        .collect();
    let (mut covariates, mut interaction) = (AreaCovariates::default(), None);
    if cfg.past_vote.is_some() && (cfg.area_covariates || cfg.interaction) {
        let shares = area_past_shares(frame, cfg, &graph)?;
        if cfg.area_covariates {
            for (ch, v) in &shares {
                let col = format!("past_{ch}");
                covariates.columns.insert(col.clone(), v.clone());
                covariates.by_choice.insert(ch.clone(), vec![col]);
            }
        }
        if cfg.interaction {
            interaction = Some(InteractionSpec {
                title: cfg.past_vote.as_ref().expect("checked").title.clone(),
                past_share: shares,
            });
        }
    }
    Ok(Model::new(ModelSpec {
        choices: cfg.choices.clone(),
        reference,
        outcome_title: cfg.outcome_title.clone(),
        area_title: cfg.area_title.clone(),
        graph,
        include_area_effect: cfg.include_area_effect,
        effects,
        covariates,
        interaction,
        include_no_state: cfg.include_no_state,
        include_poll_walk: cfg.include_poll_walk,
        polls,
    })?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculationPolicy {
    /// Keep responses with highly speculative answers.
    pub include_high: bool,
    /// Answers scoring strictly above this are highly speculative.
    pub threshold: u8,
    /// Titles checked; empty means every answered title.
    #[serde(default)]
    pub titles: Vec<String>,
}

impl Default for SpeculationPolicy {
    fn default() -> Self {
        SpeculationPolicy {
            include_high: true,
            threshold: DEFAULT_SPECULATION_THRESHOLD,
            titles: Vec::new(),
        }
    }
}

/// Splits off highly speculative responses unless the policy keeps them.
/// Returns the kept responses and the number dropped.
pub fn apply_speculation_policy(
    responses: &[SiliconResponse],
    policy: &SpeculationPolicy,
) -> (Vec<SiliconResponse>, usize) {
    if policy.include_high {
        return (responses.to_vec(), 0);
    }
    let titles: BTreeSet<&String> = policy.titles.iter().collect();
    let kept: Vec<SiliconResponse> = responses
        .iter()
        .filter(|r| {
            !r.values
                .values()
                .filter(|v| titles.is_empty() || titles.contains(&v.title))
                .any(|v| v.speculation > policy.threshold)
        })
        .cloned()
        .collect();
    let dropped = responses.len() - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub level: String,
    pub label: String,
    /// A choice name, or `margin`.
    pub quantity: String,
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

pub const MARGIN: &str = "margin";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub responses: usize,
    pub speculative_dropped: usize,
    pub observations: usize,
    pub stateless: usize,
    pub dropped: crate::mrp::DropReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub posterior: PosteriorDraws,
    pub training: TrainingSummary,
    pub estimates: Vec<EstimateRow>,
    pub margins: Vec<MarginDraws>,
    pub raw: Vec<RawMargin>,
}

/// Filters by speculation, fits the model, post-stratifies over `frame` for
/// the national level and each of `levels`, and tabulates raw sample margins.
pub fn infer(
    model: &Model,
    responses: &[SiliconResponse],
    frame: &StratFrame,
    sampler: &SamplerSettings,
    policy: &SpeculationPolicy,
    levels: &[String],
    margin: &(String, String),
) -> Result<InferenceOutput, PipelineError> {
    let (kept, speculative_dropped) = apply_speculation_policy(responses, policy);
    let data = TrainingData::from_responses(model, &kept)?;
    if data.n_obs == 0 {
        return Err(PipelineError::Mrp(MrpError::Data("no usable responses".into())));
    }
    let training = TrainingSummary {
        responses: responses.len(),
        speculative_dropped,
        observations: data.n_obs,
        stateless: data.n_stateless,
        dropped: data.dropped.clone(),
    };
    let posterior = sample(model, &data, sampler)?;
    let params = posterior.params();
    let probs = cell_probabilities(model, &params, frame)?;
    let weights = CellWeights::Fixed(frame.cells.iter().map(|c| c.weight).collect());
    let (a, b) = (
        model
            .choice_index(&margin.0)
            .ok_or_else(|| PipelineError::Config(format!("margin choice `{}` is not a choice", margin.0)))?,
        model
            .choice_index(&margin.1)
            .ok_or_else(|| PipelineError::Config(format!("margin choice `{}` is not a choice", margin.1)))?,
    );

    let mut estimates = Vec::new();
    let mut margins = Vec::new();
    let all_levels = std::iter::once(None).chain(levels.iter().map(|l| Some(l.as_str())));
    for level in all_levels {
        let (map, labels) = crosstab_map(frame, level)?;
        let post = poststratify(&probs, &weights, &map, labels.len())?;
        let level_name = level.unwrap_or(NATIONAL).to_string();
        for (f, label) in labels.iter().enumerate() {
            for (j, choice) in model.spec.choices.iter().enumerate() {
                let xs: Vec<f64> = post.iter().map(|d| d[f][j]).collect();
                estimates.push(row(&level_name, label, choice, &xs));
            }
            let m: Vec<f64> = post.iter().map(|d| d[f][a] - d[f][b]).collect();
            estimates.push(row(&level_name, label, MARGIN, &m));
            margins.push(MarginDraws {
                level: level_name.clone(),
                label: label.clone(),
                draws: m,
            });
        }
    }
    let raw = raw_margins(
        &kept,
        &model.spec.outcome_title,
        (&margin.0, &margin.1),
        &model.spec.area_title,
        levels,
    );
    Ok(InferenceOutput {
        posterior,
        training,
        estimates,
        margins,
        raw,
    })
}

fn row(level: &str, label: &str, quantity: &str, xs: &[f64]) -> EstimateRow {
    let s = summarize(xs);
    EstimateRow {
        level: level.to_string(),
        label: label.to_string(),
        quantity: quantity.to_string(),
        mean: s.mean,
        q05: s.q05,
        q50: s.q50,
        q95: s.q95,
    }
}

pub fn write_estimates_csv<'a, W: Write>(
    rows: impl IntoIterator<Item = &'a EstimateRow>,
    w: W,
) -> Result<(), PipelineError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["level", "label", "quantity", "mean", "q05", "q50", "q95"])?;
    for r in rows {
        wr.write_record([
            r.level.clone(),
            r.label.clone(),
            r.quantity.clone(),
            format!("{:.17e}", r.mean),
            format!("{:.17e}", r.q05),
            format!("{:.17e}", r.q50),
            format!("{:.17e}", r.q95),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_estimates_csv<R: Read>(r: R) -> Result<Vec<EstimateRow>, PipelineError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, PipelineError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PipelineError::Config(format!("bad estimate row {:?}", rec)))
        };
        out.push(EstimateRow {
            level: rec.get(0).unwrap_or_default().to_string(),
            label: rec.get(1).unwrap_or_default().to_string(),
            quantity: rec.get(2).unwrap_or_default().to_string(),
            mean: num(3)?,
            q05: num(4)?,
            q50: num(5)?,
            q95: num(6)?,
        });
    }
    Ok(out)
}

/// Sums a frame's weights over the given titles; cells are numbered from 1
/// in order of first appearance.
pub fn collapse_frame(frame: &StratFrame, titles: &[String]) -> Result<StratFrame, PipelineError> {
    let mut index: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut cells: Vec<StratCell> = Vec::new();
    for c in &frame.cells {
        let key: Vec<String> = titles
            .iter()
            .map(|t| {
                c.attributes
                    .get(t)
                    .cloned()
                    .ok_or_else(|| PipelineError::Config(format!("frame has no `{t}`")))
            })
            .collect::<Result<_, _>>()?;
        match index.get(&key) {
            Some(&i) => cells[i].weight += c.weight,
            None => {
                index.insert(key.clone(), cells.len());
                let attributes: Attributes = titles.iter().cloned().zip(key).collect();
                cells.push(StratCell {
                    cell_id: cells.len() as u32 + 1,
                    attributes,
                    weight: c.weight,
                });
            }
        }
    }
    Ok(StratFrame {
        cells,
        attribute_schema: titles.to_vec(),
    })
}
