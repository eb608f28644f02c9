//! Synthetic electorates with known preferences, a platform-selection model
//! that biases who can be polled, and end-to-end runs scored against the
//! known truth.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{call_rng, facts_tag, MockOracle, OracleConfig, FACT_ENTITY, FACT_GEO};
use crate::domain::{
    normalize, Attributes, FeatureDef, FeatureKind, QueryKind, QuotaState, StratCell, StratFrame, TweetRecord,
    UserRecord,
};
use crate::eval::{evaluate, EvalOptions, EvalReport, PollsterRecord, RawMargin, TruthRow, NATIONAL};
use crate::filters::{poll_users, PollCounts, PollSettings, ProcessingLedger, NOT_IN_USA};
use crate::frame_builder::sample_daughter_frame;
use crate::mrp::predict::Summary;
use crate::mrp::{AreaGraph, EffectPrior, SamplerSettings};
use crate::pipeline::{
    build_model, collapse_frame, infer, EffectConfig, EstimateRow, ModelConfig, PastVoteConfig, PipelineError,
    SpeculationPolicy, TrainingSummary, MARGIN,
};
use crate::pool::{build_query_plan, run_pool, FixtureLine, MockClient, TIMELINE_QUERY};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: PipelineError,
    },
}

impl From<PipelineError> for SimError {
    fn from(e: PipelineError) -> Self {
        SimError::Stage {
            stage: e.stage(),
            source: e,
        }
    }
}

fn stage<E: Into<PipelineError>>(e: E) -> SimError {
    SimError::from(e.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSpec {
    pub name: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub title: String,
    pub categories: Vec<String>,
    /// National shares before area and dependence shifts.
    pub shares: Vec<f64>,
    /// Ordered categories get a random-walk prior in the model.
    #[serde(default)]
    pub ordinal: bool,
    /// Spread of per-area log-odds shifts.
    #[serde(default)]
    pub area_sd: f64,
    /// Log-odds shifts keyed by an earlier attribute's title and category,
    /// one entry per own category.
    #[serde(default)]
    pub depends: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSpec {
    pub title: String,
    /// The first choice is the model's reference.
    pub choices: Vec<String>,
    pub intercepts: Vec<f64>,
    /// Utility shifts keyed by attribute title and category, one per choice.
    #[serde(default)]
    pub coefficients: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// Fixed utility shifts per area, one per choice.
    #[serde(default)]
    pub area_effects: BTreeMap<String, Vec<f64>>,
    /// Spread of random area shifts for areas without a fixed entry.
    #[serde(default)]
    pub area_sd: f64,
}

/// Previous-election behaviour: with probability `loyalty` the mapped
/// category of the current choice, otherwise one of the others uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PastVoteSpec {
    pub title: String,
    pub categories: Vec<String>,
    pub map: BTreeMap<String, String>,
    pub loyalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub area_title: String,
    pub areas: Vec<AreaSpec>,
    pub edges: Vec<(String, String)>,
    pub attributes: Vec<AttributeSpec>,
    pub choice: ChoiceSpec,
    pub past_vote: PastVoteSpec,
    pub size: usize,
    pub seed: u64,
}

fn s(x: &str) -> String {
    x.to_string()
}

fn shifts(pairs: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
    pairs.iter().map(|(k, v)| (s(k), v.to_vec())).collect()
}

impl PopulationConfig {
    /// Eight south-western states, three choices and five attributes.
    pub fn desk_default() -> Self {
        let areas = [
            ("Texas", 0.30),
            ("Oklahoma", 0.09),
            ("Kansas", 0.09),
            ("Nebraska", 0.08),
            ("Colorado", 0.12),
            ("New Mexico", 0.08),
            ("Arizona", 0.15),
            ("Utah", 0.09),
        ];
        let edges = [
            ("Texas", "Oklahoma"),
            ("Texas", "New Mexico"),
            ("Oklahoma", "Kansas"),
            ("Oklahoma", "Colorado"),
            ("Oklahoma", "New Mexico"),
            ("Kansas", "Nebraska"),
            ("Kansas", "Colorado"),
            ("Nebraska", "Colorado"),
            ("Colorado", "New Mexico"),
            ("Colorado", "Utah"),
            ("New Mexico", "Arizona"),
            ("Arizona", "Utah"),
        ];
        let attributes = vec![
            AttributeSpec {
                title: s("SEX"),
                categories: vec![s("male"), s("female")],
                shares: vec![0.49, 0.51],
                ordinal: false,
                area_sd: 0.0,
                depends: BTreeMap::new(),
            },
            AttributeSpec {
                title: s("AGE"),
                categories: vec![s("18-29"), s("30-44"), s("45-64"), s("65+")],
                shares: vec![0.20, 0.26, 0.33, 0.21],
                ordinal: true,
                area_sd: 0.1,
                depends: BTreeMap::new(),
            },
            AttributeSpec {
                title: s("RACE"),
                categories: vec![s("white"), s("hispanic"), s("other")],
                shares: vec![0.60, 0.28, 0.12],
                ordinal: false,
                area_sd: 0.5,
                depends: BTreeMap::new(),
            },
            AttributeSpec {
                title: s("INCOME"),
                categories: vec![s("under 50k"), s("50k-100k"), s("over 100k")],
                shares: vec![0.40, 0.33, 0.27],
                ordinal: true,
                area_sd: 0.15,
                depends: BTreeMap::from([
                    (
                        s("AGE"),
                        shifts(&[
                            ("18-29", &[0.5, 0.0, -0.6]),
                            ("30-44", &[0.0, 0.1, 0.1]),
                            ("45-64", &[-0.2, 0.0, 0.3]),
                            ("65+", &[0.2, 0.0, -0.2]),
                        ]),
                    ),
                    (
                        s("RACE"),
                        shifts(&[
                            ("white", &[-0.2, 0.0, 0.3]),
                            ("hispanic", &[0.3, 0.0, -0.4]),
                            ("other", &[0.1, 0.0, 0.0]),
                        ]),
                    ),
                ]),
            },
        ];
        let choice = ChoiceSpec {
            title: s("VOTE"),
            choices: vec![s("D"), s("R"), s("O")],
            intercepts: vec![0.0, -0.2, -2.6],
            coefficients: BTreeMap::from([
                (s("SEX"), shifts(&[("male", &[0.0, 0.3, 0.1]), ("female", &[0.0, -0.1, 0.0])])),
                (
                    s("AGE"),
                    shifts(&[
                        ("18-29", &[0.0, -0.5, 0.5]),
                        ("30-44", &[0.0, -0.1, 0.2]),
                        ("45-64", &[0.0, 0.2, 0.0]),
                        ("65+", &[0.0, 0.3, -0.3]),
                    ]),
                ),
                (
                    s("RACE"),
                    shifts(&[
                        ("white", &[0.0, 0.7, 0.0]),
                        ("hispanic", &[0.0, -0.3, 0.0]),
                        ("other", &[0.0, -0.9, 0.2]),
                    ]),
                ),
                (
                    s("INCOME"),
                    shifts(&[
                        ("under 50k", &[0.0, -0.1, 0.1]),
                        ("50k-100k", &[0.0, 0.1, 0.0]),
                        ("over 100k", &[0.0, 0.0, -0.1]),
                    ]),
                ),
            ]),
            area_effects: shifts(&[
                ("Texas", &[0.0, 0.2, 0.0]),
                ("Oklahoma", &[0.0, 0.9, 0.0]),
                ("Kansas", &[0.0, 0.5, 0.1]),
                ("Nebraska", &[0.0, 0.5, 0.0]),
                ("Colorado", &[0.0, -0.5, 0.2]),
                ("New Mexico", &[0.0, -0.3, 0.0]),
                ("Arizona", &[0.0, 0.0, 0.1]),
                ("Utah", &[0.0, 0.7, 0.6]),
            ]),
            area_sd: 0.0,
        };
        let past_vote = PastVoteSpec {
            title: s("VOTE2020"),
            categories: vec![s("D"), s("R"), s("stayed home")],
            map: BTreeMap::from([(s("D"), s("D")), (s("R"), s("R")), (s("O"), s("stayed home"))]),
            loyalty: 0.97,
        };
        PopulationConfig {
            area_title: s("STATE"),
            areas: areas
                .iter()
                .map(|(n, w)| AreaSpec {
                    name: s(n),
                    share: *w,
                })
                .collect(),
            edges: edges.iter().map(|(a, b)| (s(a), s(b))).collect(),
            attributes,
            choice,
            past_vote,
            size: 50_000,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.size == 0 {
            return bad("population size must be at least 1".into());
        }
        if self.areas.is_empty() || self.areas.iter().any(|a| !(a.share > 0.0) || !a.share.is_finite()) {
            return bad("areas need positive shares".into());
        }
        let j = self.choice.choices.len();
        if j < 2 || self.choice.intercepts.len() != j {
            return bad("choice model needs two or more choices with one intercept each".into());
        }
        for a in &self.attributes {
            if a.categories.len() < 2
                || a.shares.len() != a.categories.len()
                || a.shares.iter().any(|p| !(*p > 0.0) || !p.is_finite())
            {
                return bad(format!("attribute `{}` needs one positive share per category", a.title));
            }
            if !(a.area_sd >= 0.0) {
                return bad(format!("attribute `{}` has a negative area_sd", a.title));
            }
            for (t, by_cat) in &a.depends {
                let Some(k) = self.attributes.iter().position(|b| &b.title == t) else {
                    return bad(format!("`{}` depends on unknown `{t}`", a.title));
                };
                if self.attributes[k].title == a.title
                    || self.attributes.iter().position(|b| b.title == a.title).unwrap() < k
                {
                    return bad(format!("`{}` may only depend on earlier attributes", a.title));
                }
                if by_cat.values().any(|v| v.len() != a.categories.len()) {
                    return bad(format!("`{}` dependence shifts need one entry per category", a.title));
                }
            }
        }
        for (t, by_cat) in &self.choice.coefficients {
            if !self.attributes.iter().any(|a| &a.title == t) {
                return bad(format!("choice coefficients for unknown `{t}`"));
            }
            if by_cat.values().any(|v| v.len() != j) {
                return bad(format!("choice coefficients for `{t}` need one entry per choice"));
            }
        }
        if self.choice.area_effects.values().any(|v| v.len() != j) {
            return bad("area effects need one entry per choice".into());
        }
        let pv = &self.past_vote;
        if !(0.0..=1.0).contains(&pv.loyalty) || pv.categories.len() < 2 {
            return bad("past vote needs two or more categories and loyalty in [0, 1]".into());
        }
        for c in &self.choice.choices {
            match pv.map.get(c) {
                Some(p) if pv.categories.contains(p) => {}
                _ => return bad(format!("past vote map has no valid category for `{c}`")),
            }
        }
        self.graph()?;
        Ok(())
    }

    pub fn graph(&self) -> Result<AreaGraph, SimError> {
        let names: Vec<String> = self.areas.iter().map(|a| a.name.clone()).collect();
        let idx = |n: &str| {
            names
                .iter()
                .position(|a| normalize(a) == normalize(n))
                .ok_or_else(|| SimError::Config(format!("edge names unknown area `{n}`")))
        };
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|(a, b)| Ok((idx(a)?, idx(b)?)))
            .collect::<Result<_, SimError>>()?;
        AreaGraph::new(names, &edges).map_err(|e| SimError::Config(e.to_string()))
    }

    /// Frame titles in frame order: area, attributes, past vote.
    pub fn frame_titles(&self) -> Vec<String> {
        let mut t = vec![self.area_title.clone()];
        t.extend(self.attributes.iter().map(|a| a.title.clone()));
        t.push(self.past_vote.title.clone());
        t
    }
}

/// One simulated voter, as category indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Individual {
    pub area: usize,
    pub attrs: Vec<usize>,
    pub past: usize,
    pub choice: usize,
}

/// Exact counts for one crosstab label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tabulation {
    pub level: String,
    pub label: String,
    pub n: u64,
    pub choices: Vec<u64>,
    pub past: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub config: PopulationConfig,
    pub individuals: Vec<Individual>,
    pub tabulations: Vec<Tabulation>,
}

fn categorical(rng: &mut impl Rng, logits: &[f64]) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    WeightedIndex::new(&w).expect("finite weights").sample(rng)
}

pub fn generate_population(cfg: &PopulationConfig) -> Result<Population, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_areas = cfg.areas.len();
    let area_w: Vec<f64> = cfg.areas.iter().map(|a| a.share).collect();
    let area_dist = WeightedIndex::new(&area_w).map_err(|e| SimError::Config(e.to_string()))?;

    // per-area shifts are drawn first so they do not depend on the population size
    let area_shift: Vec<Vec<Vec<f64>>> = cfg
        .attributes
        .iter()
        .map(|a| {
            let d = Normal::new(0.0, a.area_sd.max(0.0)).expect("valid sd");
            (0..n_areas)
                .map(|_| a.categories.iter().map(|_| d.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let j = cfg.choice.choices.len();
    let choice_area: Vec<Vec<f64>> = {
        let d = Normal::new(0.0, cfg.choice.area_sd.max(0.0)).expect("valid sd");
        cfg.areas
            .iter()
            .map(|a| {
                let random: Vec<f64> = (0..j).map(|_| d.sample(&mut rng)).collect();
                cfg.choice
                    .area_effects
                    .iter()
                    .find(|(k, _)| normalize(k) == normalize(&a.name))
                    .map(|(_, v)| v.clone())
                    .unwrap_or(random)
            })
            .collect()
    };
    let attr_index: BTreeMap<&str, usize> =
        cfg.attributes.iter().enumerate().map(|(i, a)| (a.title.as_str(), i)).collect();
    let cat_pos = |k: usize, c: &str| {
        cfg.attributes[k]
            .categories
            .iter()
            .position(|x| normalize(x) == normalize(c))
    };
    // dependence and choice shifts resolved to indices once
    let depends: Vec<Vec<(usize, BTreeMap<usize, Vec<f64>>)>> = cfg
        .attributes
        .iter()
        .map(|a| {
            a.depends
                .iter()
                .map(|(t, by)| {
                    let k = attr_index[t.as_str()];
                    let m = by.iter().filter_map(|(c, v)| Some((cat_pos(k, c)?, v.clone()))).collect();
                    (k, m)
                })
                .collect()
        })
        .collect();
    let coefs: Vec<(usize, BTreeMap<usize, Vec<f64>>)> = cfg
        .choice
        .coefficients
        .iter()
        .map(|(t, by)| {
            let k = attr_index[t.as_str()];
            (k, by.iter().filter_map(|(c, v)| Some((cat_pos(k, c)?, v.clone()))).collect())
        })
        .collect();
    let pv = &cfg.past_vote;
    let past_of: Vec<usize> = cfg
        .choice
        .choices
        .iter()
        .map(|c| pv.categories.iter().position(|p| p == &pv.map[c]).expect("validated"))
        .collect();
    let log_shares: Vec<Vec<f64>> = cfg
        .attributes
        .iter()
        .map(|a| a.shares.iter().map(|p| p.ln()).collect())
        .collect();

    let mut individuals = Vec::with_capacity(cfg.size);
    for _ in 0..cfg.size {
        let area = area_dist.sample(&mut rng);
        let mut attrs = Vec::with_capacity(cfg.attributes.len());
        for (k, _) in cfg.attributes.iter().enumerate() {
            let mut logits: Vec<f64> = log_shares[k]
                .iter()
                .zip(&area_shift[k][area])
                .map(|(l, s)| l + s)
                .collect();
            for (dk, by) in &depends[k] {
                if let Some(v) = by.get(&attrs[*dk]) {
                    logits.iter_mut().zip(v).for_each(|(l, s)| *l += s);
                }
            }
            attrs.push(categorical(&mut rng, &logits));
        }
        let mut util: Vec<f64> = cfg
            .choice
            .intercepts
            .iter()
            .zip(&choice_area[area])
            .map(|(a, b)| a + b)
            .collect();
        for (k, by) in &coefs {
            if let Some(v) = by.get(&attrs[*k]) {
                util.iter_mut().zip(v).for_each(|(u, s)| *u += s);
            }
        }
        let choice = categorical(&mut rng, &util);
        let loyal = past_of[choice];
        let past = if rng.random::<f64>() < pv.loyalty {
            loyal
        } else {
            let others: Vec<usize> = (0..pv.categories.len()).filter(|c| *c != loyal).collect();
            others[rng.random_range(0..others.len())]
        };
        individuals.push(Individual {
            area,
            attrs,
            past,
            choice,
        });
    }
    let tabulations = tabulate(cfg, &individuals);
    Ok(Population {
        config: cfg.clone(),
        individuals,
        tabulations,
    })
}

fn tabulate(cfg: &PopulationConfig, people: &[Individual]) -> Vec<Tabulation> {
    let j = cfg.choice.choices.len();
    let np = cfg.past_vote.categories.len();
    let mut groups: Vec<(String, Vec<String>, Box<dyn Fn(&Individual) -> usize>)> = vec![
        (s(NATIONAL), vec![s(NATIONAL)], Box::new(|_| 0)),
        (
            cfg.area_title.clone(),
            cfg.areas.iter().map(|a| a.name.clone()).collect(),
            Box::new(|i| i.area),
        ),
    ];
    for (k, a) in cfg.attributes.iter().enumerate() {
        groups.push((a.title.clone(), a.categories.clone(), Box::new(move |i| i.attrs[k])));
    }
    groups.push((cfg.past_vote.title.clone(), cfg.past_vote.categories.clone(), Box::new(|i| i.past)));
    let mut out = Vec::new();
    for (level, labels, key) in groups {
        let mut t: Vec<Tabulation> = labels
            .iter()
            .map(|l| Tabulation {
                level: level.clone(),
                label: l.clone(),
                n: 0,
                choices: vec![0; j],
                past: vec![0; np],
            })
            .collect();
        for p in people {
            let e = &mut t[key(p)];
            e.n += 1;
            e.choices[p.choice] += 1;
            e.past[p.past] += 1;
        }
        out.extend(t.into_iter().filter(|t| t.n > 0));
    }
    out
}

impl Population {
    fn choice_pos(&self, c: &str) -> Result<usize, SimError> {
        self.config
            .choice
            .choices
            .iter()
            .position(|x| normalize(x) == normalize(c))
            .ok_or_else(|| SimError::Config(format!("`{c}` is not a choice")))
    }

    fn past_pos(&self, choice: &str) -> Result<usize, SimError> {
        let pv = &self.config.past_vote;
        let cat = pv
            .map
            .iter()
            .find(|(k, _)| normalize(k) == normalize(choice))
            .map(|(_, v)| v)
            .ok_or_else(|| SimError::Config(format!("no past category for `{choice}`")))?;
        Ok(pv.categories.iter().position(|p| p == cat).expect("validated"))
    }

    /// True margins `share(a) − share(b)` with the previous-election margin of the mapped categories.
    pub fn truth_rows(&self, margin: (&str, &str)) -> Result<Vec<TruthRow>, SimError> {
        let (a, b) = (self.choice_pos(margin.0)?, self.choice_pos(margin.1)?);
        let (pa, pb) = (self.past_pos(margin.0)?, self.past_pos(margin.1)?);
        Ok(self
            .tabulations
            .iter()
            .map(|t| {
                let n = t.n as f64;
                TruthRow {
                    level: t.level.clone(),
                    label: t.label.clone(),
                    margin: (t.choices[a] as f64 - t.choices[b] as f64) / n,
                    previous: Some((t.past[pa] as f64 - t.past[pb] as f64) / n),
                }
            })
            .collect())
    }

    /// Category labels of one individual, keyed by title, including area and past vote.
    pub fn attributes(&self, i: usize) -> Attributes {
        let cfg = &self.config;
        let p = &self.individuals[i];
        let mut a = Attributes::new();
        a.insert(cfg.area_title.clone(), cfg.areas[p.area].name.clone());
        for (k, spec) in cfg.attributes.iter().enumerate() {
            a.insert(spec.title.clone(), spec.categories[p.attrs[k]].clone());
        }
        a.insert(cfg.past_vote.title.clone(), cfg.past_vote.categories[p.past].clone());
        a
    }

    /// Population counts over every observed combination of area, attributes and past vote.
    pub fn frame(&self) -> StratFrame {
        let mut counts: BTreeMap<(usize, Vec<usize>, usize), f64> = BTreeMap::new();
        for p in &self.individuals {
            *counts.entry((p.area, p.attrs.clone(), p.past)).or_insert(0.0) += 1.0;
        }
        let cfg = &self.config;
        let titles = cfg.frame_titles();
        let cells = counts
            .into_iter()
            .enumerate()
            .map(|(i, ((area, attrs, past), w))| {
                let mut a = Attributes::new();
                a.insert(cfg.area_title.clone(), cfg.areas[area].name.clone());
                for (k, spec) in cfg.attributes.iter().enumerate() {
                    a.insert(spec.title.clone(), spec.categories[attrs[k]].clone());
                }
                a.insert(cfg.past_vote.title.clone(), cfg.past_vote.categories[past].clone());
                StratCell {
                    cell_id: i as u32 + 1,
                    attributes: a,
                    weight: w,
                }
            })
            .collect();
        StratFrame {
            cells,
            attribute_schema: titles,
        }
    }

    /// Feature definitions for every attribute, the past vote and the current choice.
    pub fn features(&self) -> Vec<FeatureDef> {
        let cfg = &self.config;
        let def = |title: &str, cats: &[String], kind| {
            let prefix: String = title.chars().filter(|c| c.is_ascii_alphanumeric()).take(3).collect();
            let pairs: Vec<(String, String)> = cats
                .iter()
                .enumerate()
                .map(|(i, c)| (format!("{prefix}{}", i + 1), c.clone()))
                .collect();
            let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            FeatureDef::from_pairs(title, &refs, kind).expect("validated categories")
        };
        let mut out: Vec<FeatureDef> = cfg
            .attributes
            .iter()
            .map(|a| def(&a.title, &a.categories, FeatureKind::Independent))
            .collect();
        out.push(def(&cfg.past_vote.title, &cfg.past_vote.categories, FeatureKind::Independent));
        out.push(def(&cfg.choice.title, &cfg.choice.choices, FeatureKind::Dependent));
        out
    }

    /// Model layout matching this population: ordinal attributes get random walks.
    pub fn model_config(&self) -> ModelConfig {
        let cfg = &self.config;
        let mut effects: Vec<EffectConfig> = cfg
            .attributes
            .iter()
            .map(|a| EffectConfig {
                title: a.title.clone(),
                prior: if a.ordinal {
                    EffectPrior::RandomWalk
                } else {
                    EffectPrior::Unstructured
                },
                categories: a.categories.clone(),
            })
            .collect();
        effects.push(EffectConfig {
            title: cfg.past_vote.title.clone(),
            prior: EffectPrior::Unstructured,
            categories: cfg.past_vote.categories.clone(),
        });
        ModelConfig {
            outcome_title: cfg.choice.title.clone(),
            choices: cfg.choice.choices.clone(),
            reference: cfg.choice.choices[0].clone(),
            area_title: cfg.area_title.clone(),
            effects,
            past_vote: Some(PastVoteConfig {
                title: cfg.past_vote.title.clone(),
                map: cfg.past_vote.map.clone(),
            }),
            area_covariates: true,
            interaction: true,
            include_area_effect: true,
            include_no_state: true,
            include_poll_walk: false,
        }
    }
}

fn default_strength() -> f64 {
    1.0
}

fn default_timeline() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Inclusion log-odds shifts keyed by title (attribute, area or past vote) and category.
    #[serde(default)]
    pub log_odds: BTreeMap<String, BTreeMap<String, f64>>,
    /// Extra log-odds of capture by the political stream, keyed by current choice.
    #[serde(default)]
    pub political_attention: BTreeMap<String, f64>,
    /// Multiplies every shift above.
    #[serde(default = "default_strength")]
    pub strength: f64,
    /// Expected number of population members captured.
    pub expected_pool: f64,
    /// Expected share of captures coming from the political stream.
    pub political_share: f64,
    pub stateless_rate: f64,
    pub null_location_rate: f64,
    /// Organisational accounts added to the pool.
    pub organisations: usize,
    /// Accounts located outside the country.
    pub abroad: usize,
    pub political_terms: String,
    pub topics: Vec<String>,
    pub pool_date: NaiveDate,
    /// Older posts available to timeline augmentation.
    #[serde(default = "default_timeline")]
    pub timeline_len: usize,
}

impl SelectionConfig {
    /// Over-includes previous Democratic voters, high earners and the young.
    pub fn desk_default() -> Self {
        SelectionConfig {
            log_odds: BTreeMap::from([
                (s("VOTE2020"), BTreeMap::from([(s("D"), 0.35)])),
                (s("INCOME"), BTreeMap::from([(s("over 100k"), 0.5)])),
                (s("AGE"), BTreeMap::from([(s("18-29"), 0.8), (s("65+"), -0.5)])),
            ]),
            political_attention: BTreeMap::new(),
            strength: 1.0,
            expected_pool: 5000.0,
            political_share: 0.4,
            stateless_rate: 0.05,
            null_location_rate: 0.05,
            organisations: 150,
            abroad: 100,
            political_terms: s("Trump OR Harris OR election"),
            topics: vec![s("football"), s("weather"), s("music"), s("movies")],
            pool_date: NaiveDate::from_ymd_opt(2024, 10, 20).expect("valid date"),
            timeline_len: 2,
        }
    }

    /// No selection at all.
    pub fn none() -> Self {
        SelectionConfig {
            log_odds: BTreeMap::new(),
            political_attention: BTreeMap::new(),
            ..Self::desk_default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let rate = |x: f64| (0.0..=1.0).contains(&x);
        let finite = self.log_odds.values().flat_map(|m| m.values()).all(|v| v.is_finite())
            && self.political_attention.values().all(|v| v.is_finite())
            && self.strength.is_finite();
        if !finite {
            return Err(SimError::Config("selection log-odds must be finite".into()));
        }
        if !(self.expected_pool > 0.0) {
            return Err(SimError::Config("expected_pool must be positive".into()));
        }
        if !rate(self.political_share) || !rate(self.stateless_rate) || !rate(self.null_location_rate) {
            return Err(SimError::Config("shares and rates must lie in [0, 1]".into()));
        }
        if self.topics.is_empty() || self.political_terms.trim().is_empty() {
            return Err(SimError::Config("topics and political terms are required".into()));
        }
        Ok(())
    }
}

/// Who ended up where on the synthetic platform.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPlatform {
    pub fixtures: Vec<FixtureLine>,
    /// Population index behind each account; `None` for organisations and accounts abroad.
    pub lookup: BTreeMap<String, Option<usize>>,
    /// Inclusion probability of every population member.
    pub inclusion: Vec<f64>,
    pub included: Vec<usize>,
    pub stateless: Vec<usize>,
    pub political_terms: String,
    pub topics: Vec<String>,
    pub pool_date: NaiveDate,
}

impl SyntheticPlatform {
    pub fn client(&self) -> Result<MockClient, SimError> {
        MockClient::from_lines(self.fixtures.clone()).map_err(stage)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intercept `a` with `Σ σ(a + shift_i) = target`, by bisection.
fn calibrate(shift: &[f64], target: f64) -> f64 {
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e: f64 = shift.iter().map(|s| logistic(mid + s)).sum();
        if e < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn selection_shifts(pop: &Population, sel: &SelectionConfig) -> (Vec<f64>, Vec<f64>) {
    let cfg = &pop.config;
    let lookup = |title: &str, cat: &str| {
        sel.log_odds
            .iter()
            .find(|(t, _)| normalize(t) == normalize(title))
            .and_then(|(_, m)| m.iter().find(|(c, _)| normalize(c) == normalize(cat)))
            .map_or(0.0, |(_, v)| *v)
    };
    let attention = |c: &str| {
        sel.political_attention
            .iter()
            .find(|(k, _)| normalize(k) == normalize(c))
            .map_or(0.0, |(_, v)| *v)
    };
    let mut base = Vec::with_capacity(pop.individuals.len());
    let mut att = Vec::with_capacity(pop.individuals.len());
    for (i, p) in pop.individuals.iter().enumerate() {
        let s: f64 = pop.attributes(i).iter().map(|(t, c)| lookup(t, c)).sum();
        base.push(sel.strength * s);
        att.push(sel.strength * attention(&cfg.choice.choices[p.choice]));
    }
    (base, att)
}

pub fn simulate_platform(pop: &Population, sel: &SelectionConfig, seed: u64) -> Result<SyntheticPlatform, SimError> {
    sel.validate()?;
    let cfg = &pop.config;
    let n = pop.individuals.len();
    let (base, att) = selection_shifts(pop, sel);
    let pol_shift: Vec<f64> = base.iter().zip(&att).map(|(b, a)| b + a).collect();
    let a_pol = calibrate(&pol_shift, sel.political_share * sel.expected_pool.min(n as f64));
    let a_tr = calibrate(&base, (1.0 - sel.political_share) * sel.expected_pool.min(n as f64));
    let inclusion: Vec<f64> = (0..n)
        .map(|i| {
            let (p, t) = (logistic(a_pol + pol_shift[i]), logistic(a_tr + base[i]));
            1.0 - (1.0 - p) * (1.0 - t)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noon = |d: NaiveDate| Utc.from_utc_datetime(&d.and_hms_opt(12, 0, 0).expect("valid time"));
    let pool_noon = noon(sel.pool_date);
    struct Account {
        query: String,
        kind: QueryKind,
        user_id: String,
        location: Option<String>,
        facts: BTreeMap<String, String>,
    }
    let mut accounts: Vec<Account> = Vec::new();
    let mut lookup = BTreeMap::new();
    let mut included = Vec::new();
    let mut stateless = Vec::new();
    let pick_stream = |rng: &mut ChaCha8Rng, political: bool| {
        if political {
            (sel.political_terms.clone(), QueryKind::Political)
        } else {
            let t = sel.topics[rng.random_range(0..sel.topics.len())].clone();
            (t.clone(), QueryKind::Trending(t))
        }
    };
    for i in 0..n {
        let political = rng.random::<f64>() < logistic(a_pol + pol_shift[i]);
        let trending = rng.random::<f64>() < logistic(a_tr + base[i]);
        let is_stateless = rng.random::<f64>() < sel.stateless_rate;
        let no_location = rng.random::<f64>() < sel.null_location_rate;
        if !political && !trending {
            continue;
        }
        let (query, kind) = pick_stream(&mut rng, political);
        let mut facts: BTreeMap<String, String> = pop.attributes(i);
        let area = facts.remove(&cfg.area_title).expect("area attribute");
        facts.insert(cfg.choice.title.clone(), cfg.choice.choices[pop.individuals[i].choice].clone());
        facts.insert(s(FACT_ENTITY), s("P"));
        let geo = if is_stateless { s("USA") } else { area.clone() };
        facts.insert(s(FACT_GEO), geo.clone());
        let user_id = format!("u{i:06}");
        lookup.insert(user_id.clone(), Some(i));
        included.push(i);
        if is_stateless {
            stateless.push(i);
        }
        accounts.push(Account {
            query,
            kind,
            user_id,
            location: (!no_location).then_some(geo),
            facts,
        });
    }
    for k in 0..sel.organisations {
        let political = rng.random::<f64>() < sel.political_share;
        let (query, kind) = pick_stream(&mut rng, political);
        let user_id = format!("org{k:05}");
        lookup.insert(user_id.clone(), None);
        let area = &cfg.areas[rng.random_range(0..cfg.areas.len())].name;
        accounts.push(Account {
            query,
            kind,
            user_id,
            location: Some(area.clone()),
            facts: BTreeMap::from([(s(FACT_ENTITY), s("O")), (s(FACT_GEO), area.clone())]),
        });
    }
    for k in 0..sel.abroad {
        let political = rng.random::<f64>() < sel.political_share;
        let (query, kind) = pick_stream(&mut rng, political);
        let user_id = format!("abroad{k:05}");
        lookup.insert(user_id.clone(), None);
        accounts.push(Account {
            query,
            kind,
            user_id,
            location: Some(s("Toronto, Canada")),
            facts: BTreeMap::from([(s(FACT_ENTITY), s("P")), (s(FACT_GEO), s(NOT_IN_USA))]),
        });
    }
    accounts.shuffle(&mut rng);

    let mut fixtures = Vec::with_capacity(accounts.len() * 2);
    for a in accounts {
        let user = UserRecord {
            user_id: a.user_id.clone(),
            username: a.user_id.clone(),
            display_name: format!("Account {}", a.user_id),
            description: facts_tag(&a.facts),
            location_raw: a.location,
            profile_image_ref: None,
            captured_at: pool_noon,
            capture_query_kind: a.kind,
        };
        let post = |k: usize, hours: i64| TweetRecord {
            tweet_id: format!("{}-{k}", a.user_id),
            author_id: a.user_id.clone(),
            created_at: pool_noon - Duration::hours(hours),
            text: format!("post {k} from {}", a.user_id),
        };
        let hit = post(0, rng.random_range(1..72));
        let timeline: Vec<TweetRecord> = (1..=sel.timeline_len)
            .map(|k| post(k, 72 + 24 * k as i64))
            .collect();
        fixtures.push(FixtureLine {
            query: a.query,
            user: user.clone(),
            tweets: vec![hit],
        });
        if !timeline.is_empty() {
            fixtures.push(FixtureLine {
                query: s(TIMELINE_QUERY),
                user,
                tweets: timeline,
            });
        }
    }
    Ok(SyntheticPlatform {
        fixtures,
        lookup,
        inclusion,
        included,
        stateless,
        political_terms: sel.political_terms.clone(),
        topics: sel.topics.clone(),
        pool_date: sel.pool_date,
    })
}

/// Raw-sample margin expected when quota cells over `quota_titles` are
/// filled in proportion to the population and, within each cell, members
/// enter in proportion to their inclusion probability.
pub fn expected_raw_margin(
    pop: &Population,
    inclusion: &[f64],
    quota_titles: &[String],
    margin: (&str, &str),
) -> Result<f64, SimError> {
    let (a, b) = (pop.choice_pos(margin.0)?, pop.choice_pos(margin.1)?);
    // cell → (population count, Σπ, Σπ·m)
    let mut cells: BTreeMap<Vec<String>, (f64, f64, f64)> = BTreeMap::new();
    for (i, p) in pop.individuals.iter().enumerate() {
        let attrs = pop.attributes(i);
        let key: Vec<String> = quota_titles
            .iter()
            .map(|t| attrs.get(t).cloned().ok_or_else(|| SimError::Config(format!("unknown quota title `{t}`"))))
            .collect::<Result<_, _>>()?;
        let m = if p.choice == a {
            1.0
        } else if p.choice == b {
            -1.0
        } else {
            0.0
        };
        let e = cells.entry(key).or_insert((0.0, 0.0, 0.0));
        e.0 += 1.0;
        e.1 += inclusion[i];
        e.2 += inclusion[i] * m;
    }
    let n = pop.individuals.len() as f64;
    Ok(cells
        .values()
        .filter(|c| c.1 > 0.0)
        .map(|(cnt, w, wm)| cnt / n * wm / w)
        .sum())
}

/// A conventional poll drawn straight from the population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollsterSpec {
    pub name: String,
    pub rating: String,
    pub areas: Vec<String>,
    /// Respondents per area.
    pub n: usize,
    /// Probability that a supporter of the margin's second choice reports the first.
    #[serde(default)]
    pub house_effect: f64,
}

pub fn simulate_pollsters(
    pop: &Population,
    specs: &[PollsterSpec],
    margin: (&str, &str),
    end_date: NaiveDate,
    seed: u64,
) -> Result<Vec<PollsterRecord>, SimError> {
    let cfg = &pop.config;
    let (a, b) = (pop.choice_pos(margin.0)?, pop.choice_pos(margin.1)?);
    let mut by_area: Vec<Vec<usize>> = vec![Vec::new(); cfg.areas.len()];
    for (i, p) in pop.individuals.iter().enumerate() {
        by_area[p.area].push(i);
    }
    let mut out = Vec::new();
    for spec in specs {
        if !(0.0..=1.0).contains(&spec.house_effect) {
            return Err(SimError::Config(format!("house effect of {} outside [0, 1]", spec.name)));
        }
        for area in &spec.areas {
            let k = cfg
                .areas
                .iter()
                .position(|x| normalize(&x.name) == normalize(area))
                .ok_or_else(|| SimError::Config(format!("pollster {} names unknown area `{area}`", spec.name)))?;
            if by_area[k].is_empty() {
                continue;
            }
            let mut rng = call_rng(seed, &spec.name, &normalize(area));
            let mut counts = vec![0.0; cfg.choice.choices.len()];
            for _ in 0..spec.n {
                let who = by_area[k][rng.random_range(0..by_area[k].len())];
                let mut c = pop.individuals[who].choice;
                if c == b && rng.random::<f64>() < spec.house_effect {
                    c = a;
                }
                counts[c] += 1.0;
            }
            out.push(PollsterRecord {
                pollster: spec.name.clone(),
                rating: spec.rating.clone(),
                area: cfg.areas[k].name.clone(),
                counts: cfg.choice.choices.iter().cloned().zip(counts).collect(),
                start_date: end_date - Duration::days(6),
                end_date,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub poll_id: String,
    /// Target sample size Ω⋆.
    pub sample_size: u32,
    /// Political-stream weight; each topic gets `omega / L`.
    pub omega: u32,
    pub window_days: u32,
    pub m_politics: u32,
    pub lambda: f64,
    /// Frame titles the quotas are set on.
    pub quota_titles: Vec<String>,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub speculation: SpeculationPolicy,
    pub sampler: SamplerSettings,
    pub margin: (String, String),
    #[serde(default)]
    pub pollsters: Vec<PollsterSpec>,
    #[serde(default)]
    pub randomize_order: bool,
    #[serde(default = "default_true")]
    pub include_speculation_module: bool,
}

fn default_true() -> bool {
    true
}

impl PipelineConfig {
    pub fn desk_default() -> Self {
        PipelineConfig {
            poll_id: s("sim-1"),
            sample_size: 1000,
            omega: 20_000,
            window_days: 30,
            m_politics: 20,
            lambda: 2.0,
            quota_titles: vec![s("SEX"), s("AGE")],
            oracle: OracleConfig::default(),
            speculation: SpeculationPolicy::default(),
            sampler: SamplerSettings {
                chains: 4,
                iterations: 1000,
                warmup: 500,
                thin: 2,
                max_tree_depth: 10,
                seed: 0,
                adapt_delta: 0.8,
                init_radius: 2.0,
            },
            margin: (s("R"), s("D")),
            pollsters: vec![
                PollsterSpec {
                    name: s("Frontier Research"),
                    rating: s("A"),
                    areas: vec![s("Texas"), s("Arizona"), s("Colorado"), s("New Mexico"), s("Utah")],
                    n: 600,
                    house_effect: 0.0,
                },
                PollsterSpec {
                    name: s("Plains Opinion"),
                    rating: s("C"),
                    areas: vec![s("Kansas"), s("Nebraska"), s("Oklahoma")],
                    n: 400,
                    house_effect: 0.05,
                },
            ],
            randomize_order: false,
            include_speculation_module: true,
        }
    }
}

/// Stable sub-seed for one part of a run.
pub fn sub_seed(seed: u64, part: &str) -> u64 {
    call_rng(seed, "run", part).next_u64()
}

/// Everything a run needs before the pool stage, with every seed resolved.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub seed: u64,
    pub population: Population,
    pub platform: SyntheticPlatform,
    /// Post-stratification frame: exact population counts.
    pub frame: StratFrame,
    /// Frame over the quota titles with the sampled quotas.
    pub quota_frame: StratFrame,
    pub quotas: BTreeMap<u32, u32>,
    pub graph: AreaGraph,
    pub poll: PollSettings,
    pub model: ModelConfig,
    pub sampler: SamplerSettings,
    pub oracle: OracleConfig,
    pub truth: Vec<TruthRow>,
    pub pollsters: Vec<PollsterRecord>,
    pub eval: EvalOptions,
    pub levels: Vec<String>,
    pub expected_raw_margin: f64,
}

pub fn prepare(
    pop_cfg: &PopulationConfig,
    sel_cfg: &SelectionConfig,
    pipe: &PipelineConfig,
    seed: u64,
) -> Result<PreparedRun, SimError> {
    if pipe.sample_size == 0 {
        return Err(SimError::Config("sample_size must be positive".into()));
    }
    let margin = (pipe.margin.0.as_str(), pipe.margin.1.as_str());
    let population = generate_population(pop_cfg)?;
    let platform = simulate_platform(&population, sel_cfg, sub_seed(seed, "platform"))?;
    let frame = population.frame();
    let quota_frame = collapse_frame(&frame, &pipe.quota_titles).map_err(stage)?;
    let quotas = sample_daughter_frame(&quota_frame, pipe.sample_size, sub_seed(seed, "quota"))
        .map_err(stage)?
        .quotas();
    let mut oracle = pipe.oracle.clone();
    oracle.seed = sub_seed(seed, "oracle");
    let poll = PollSettings {
        poll_id: pipe.poll_id.clone(),
        fieldwork_date: sel_cfg.pool_date,
        window_days: pipe.window_days,
        m_politics: pipe.m_politics,
        lambda: pipe.lambda,
        features: population.features(),
        area_title: pipe
            .quota_titles
            .contains(&pop_cfg.area_title)
            .then(|| pop_cfg.area_title.clone()),
        include_speculation: pipe.include_speculation_module,
        randomize_order: pipe.randomize_order,
        seed: sub_seed(seed, "poll"),
        ensemble: None,
        retry: Default::default(),
    };
    let sampler = SamplerSettings {
        seed: sub_seed(seed, "sampler"),
        ..pipe.sampler.clone()
    };
    let truth = population.truth_rows(margin)?;
    let pollsters = simulate_pollsters(&population, &pipe.pollsters, margin, sel_cfg.pool_date, sub_seed(seed, "pollsters"))?;
    let mut levels = vec![pop_cfg.area_title.clone()];
    levels.extend(pop_cfg.attributes.iter().map(|a| a.title.clone()));
    levels.push(pop_cfg.past_vote.title.clone());
    let expected = expected_raw_margin(&population, &platform.inclusion, &pipe.quota_titles, margin)?;
    Ok(PreparedRun {
        seed,
        graph: pop_cfg.graph()?,
        model: population.model_config(),
        platform,
        frame,
        quota_frame,
        quotas,
        poll,
        sampler,
        oracle,
        truth,
        pollsters,
        eval: EvalOptions {
            margin: pipe.margin.clone(),
            area_level: pop_cfg.area_title.clone(),
            seed: sub_seed(seed, "eval"),
            zero_floor: 0.0,
        },
        levels,
        expected_raw_margin: expected,
        population,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NationalSummary {
    pub truth: f64,
    pub raw: f64,
    pub estimate: Summary,
    /// Posterior median minus truth.
    pub error: f64,
    pub raw_error: f64,
    pub expected_raw_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSummary {
    pub retained: usize,
    pub divergences: usize,
    pub max_rhat: Option<f64>,
    pub step_sizes: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub seed: u64,
    pub pool_size: usize,
    pub counts: PollCounts,
    pub quota_target: u64,
    pub quota_filled: u64,
    pub training: TrainingSummary,
    pub sampler: SamplerSummary,
    pub national: NationalSummary,
    pub truth: Vec<TruthRow>,
    pub raw: Vec<RawMargin>,
    pub estimates: Vec<EstimateRow>,
    pub eval: EvalReport,
}

impl EndToEndReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// RMSE of the raw sample and of the estimates over one level.
    pub fn level_rmse(&self, level: &str) -> Option<(f64, f64)> {
        let l = self.eval.levels.get(level)?;
        Some((l.raw_rmse?, l.rmse))
    }
}

/// pool → filters and quotas → oracle annotation → MrP → post-stratification → evaluation.
pub fn run_end_to_end(
    pop_cfg: &PopulationConfig,
    sel_cfg: &SelectionConfig,
    pipe: &PipelineConfig,
    seed: u64,
) -> Result<EndToEndReport, SimError> {
    let run = prepare(pop_cfg, sel_cfg, pipe, seed)?;
    run_prepared(&run, pipe.omega, &pipe.speculation)
}

pub fn run_prepared(run: &PreparedRun, omega: u32, policy: &SpeculationPolicy) -> Result<EndToEndReport, SimError> {
    let client = run.platform.client()?;
    let plan = build_query_plan(&run.platform.political_terms, &run.platform.topics, omega).map_err(stage)?;
    let pool = run_pool(&plan, &client, run.platform.pool_date).map_err(stage)?;
    let quotas = QuotaState::from_map(run.quota_frame.clone(), &run.quotas).map_err(stage)?;
    let oracle = MockOracle::new(run.oracle.clone()).map_err(|e| SimError::Config(e.to_string()))?;
    let mut ledger = ProcessingLedger::new();
    let outcome = poll_users(&pool, &mut ledger, &quotas, &run.poll, &oracle, &client).map_err(stage)?;

    let model = build_model(&run.model, run.graph.clone(), &run.frame, Vec::new()).map_err(stage)?;
    let out = infer(
        &model,
        &outcome.responses,
        &run.frame,
        &run.sampler,
        policy,
        &run.levels,
        &run.eval.margin,
    )
    .map_err(stage)?;
    let report = evaluate(&out.margins, &run.truth, &out.raw, &run.pollsters, &run.eval).map_err(stage)?;

    let find_truth = |level: &str| run.truth.iter().find(|t| t.level == level).map(|t| t.margin);
    let truth = find_truth(NATIONAL).ok_or_else(|| SimError::Config("no national truth".into()))?;
    let raw = out
        .raw
        .iter()
        .find(|r| r.level == NATIONAL)
        .map(|r| r.margin)
        .unwrap_or(f64::NAN);
    let est = out
        .estimates
        .iter()
        .find(|e| e.level == NATIONAL && e.quantity == MARGIN)
        .expect("national margin is always estimated");
    let diag = &out.posterior.diagnostics;
    Ok(EndToEndReport {
        seed: run.seed,
        pool_size: pool.entries.len(),
        quota_target: quotas.target_total(),
        quota_filled: quotas.filled_total(),
        counts: outcome.counts,
        training: out.training.clone(),
        sampler: SamplerSummary {
            retained: diag.retained,
            divergences: diag.divergences,
            max_rhat: diag.max_rhat,
            step_sizes: diag.step_sizes.clone(),
            warnings: diag.warnings.clone(),
        },
        national: NationalSummary {
            truth,
            raw,
            estimate: Summary {
                mean: est.mean,
                q05: est.q05,
                q50: est.q50,
                q95: est.q95,
            },
            error: est.q50 - truth,
            raw_error: raw - truth,
            expected_raw_error: run.expected_raw_margin - truth,
        },
        truth: run.truth.clone(),
        raw: out.raw,
        estimates: out.estimates,
        eval: report,
    })
}
