//! Multinomial MrP: a categorical model with structured priors fitted by
//! dynamic HMC, then post-stratified over a frame.

pub mod density;
pub mod icar;
pub mod model;
pub mod nuts;
pub mod predict;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use density::{
    draw_prior, linear_predictor, log_likelihood_at, log_posterior, log_posterior_grad, simulate_choices, softmax,
    DropReport, LogDensity, Observation, Pattern, Posterior, TrainingData,
};
pub use icar::{icar_scaling_factor, AreaGraph, IcarStructure};
pub use model::{AreaCovariates, EffectPrior, EffectSpec, InteractionSpec, Model, ModelSpec, ParameterVector};
pub use nuts::{run_chains, split_rhat, SamplerSettings};
pub use predict::{
    cell_linear_predictor, cell_probabilities, crosstab_map, margin_draws, poststratify, quantile, summarize,
    CellWeights, Summary,
};

#[derive(Debug, Error)]
pub enum MrpError {
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error("invalid area graph: {0}")]
    Graph(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("invalid sampler settings: {0}")]
    Settings(String),
    #[error("log density is not finite")]
    NonFinite,
    #[error("no finite starting point found")]
    Initialization,
    #[error("{divergent} of {total} post-warmup transitions diverged")]
    AllDivergent { divergent: usize, total: usize },
    #[error("unknown category: {0}")]
    UnknownCategory(String),
    #[error("crosstab {0} has no weight")]
    EmptyCrosstab(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// R̂ above this is reported as a warning.
pub const RHAT_WARN: f64 = 1.05;
/// Divergent fraction above this is reported as a warning.
pub const DIVERGENCE_WARN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub chains: usize,
    pub post_warmup: usize,
    pub retained: usize,
    pub divergences: usize,
    pub treedepth_saturated: usize,
    pub max_tree_depth: usize,
    pub step_sizes: Vec<f64>,
    pub mean_accept: f64,
    pub rhat: BTreeMap<String, f64>,
    pub max_rhat: Option<f64>,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    /// True when neither the R̂ nor the divergence threshold is exceeded.
    pub fn converged(&self) -> bool {
        self.warnings.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub chain: usize,
    /// Post-warmup iteration within the chain.
    pub iter: usize,
    pub theta: Vec<f64>,
    pub params: ParameterVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub draws: Vec<Draw>,
    pub diagnostics: Diagnostics,
}

impl PosteriorDraws {
    pub fn params(&self) -> Vec<ParameterVector> {
        self.draws.iter().map(|d| d.params.clone()).collect()
    }
}

/// Fits the model and returns thinned draws with diagnostics.
///
/// Post-warmup draws from all chains are pooled chain-major and every
/// `thin`-th one is kept.
pub fn sample(model: &Model, data: &TrainingData, settings: &SamplerSettings) -> Result<PosteriorDraws, MrpError> {
    settings.validate()?;
    let target = Posterior { model, data };
    let chains = run_chains(&target, settings)?;
    let names = model.parameter_names();

    let total: usize = chains.iter().map(|c| c.stats.len()).sum();
    let divergences = chains
        .iter()
        .flat_map(|c| &c.stats)
        .filter(|s| s.divergent)
        .count();
    if divergences * 2 > total {
        return Err(MrpError::AllDivergent {
            divergent: divergences,
            total,
        });
    }
    let saturated = chains
        .iter()
        .flat_map(|c| &c.stats)
        .filter(|s| s.depth >= settings.max_tree_depth)
        .count();
    let mean_accept = chains.iter().flat_map(|c| &c.stats).map(|s| s.accept).sum::<f64>() / total as f64;

    let flat: Vec<Vec<Vec<f64>>> = chains
        .iter()
        .map(|c| c.draws.iter().map(|t| model.constrain(t).flatten()).collect())
        .collect();
    let mut rhat = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        let per: Vec<Vec<f64>> = flat.iter().map(|c| c.iter().map(|d| d[i]).collect()).collect();
        if let Some(r) = split_rhat(&per) {
            rhat.insert(name.clone(), r);
        }
    }
    let max_rhat = rhat.values().copied().fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    let mut warnings = Vec::new();
    if let Some(m) = max_rhat.filter(|m| *m > RHAT_WARN) {
        warnings.push(format!("max split-R-hat {m:.3} exceeds {RHAT_WARN}"));
    }
    if divergences as f64 > DIVERGENCE_WARN * total as f64 {
        warnings.push(format!("{divergences} of {total} transitions diverged"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let mut draws = Vec::with_capacity(settings.retained_draws());
    let mut pooled = 0usize;
    for c in &chains {
        for (iter, theta) in c.draws.iter().enumerate() {
            if pooled % settings.thin == 0 {
                draws.push(Draw {
                    chain: c.chain,
                    iter,
                    params: model.constrain(theta),
                    theta: theta.clone(),
                });
            }
            pooled += 1;
        }
    }
    Ok(PosteriorDraws {
        names,
        diagnostics: Diagnostics {
            chains: settings.chains,
            post_warmup: total,
            retained: draws.len(),
            divergences,
            treedepth_saturated: saturated,
            max_tree_depth: settings.max_tree_depth,
            step_sizes: chains.iter().map(|c| c.step_size).collect(),
            mean_accept,
            rhat,
            max_rhat,
            warnings,
        },
        draws,
    })
}

/// One row per retained draw: chain, iteration, then every named scalar.
pub fn write_draws_csv<W: Write>(draws: &PosteriorDraws, w: W) -> Result<(), MrpError> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["chain".to_string(), "iter".to_string()];
    header.extend(draws.names.iter().cloned());
    w.write_record(&header)?;
    for d in &draws.draws {
        let mut row = vec![d.chain.to_string(), d.iter.to_string()];
        row.extend(d.params.flatten().iter().map(|v| format!("{v:.17e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics_json<W: Write>(diag: &Diagnostics, w: W) -> Result<(), MrpError> {
    serde_json::to_writer_pretty(w, diag).map_err(|e| MrpError::Io(e.into()))
}
