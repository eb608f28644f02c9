//! The user exclusion cascade and the polling loop built on it.
//!
//! Order per user: temporal, null geography, entity, geography, quota, timeline
//! augmentation, then feature extraction. Quota decisions are taken in pool
//! order so results do not depend on thread scheduling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::sync::Mutex;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{retrying_complete, AnnotatorBackend, AnnotatorError, RetryPolicy};
use crate::domain::{
    merge_tweets, normalize, Attributes, DomainError, FeatureDef, FeatureKind, FeatureValue, Mould, QueryKind,
    QuotaFill, QuotaState, SiliconResponse,
};
use crate::pool::{ClientError, PlatformClient, SubjectPool};
use crate::prompts::{
    build_prompt, builder_prompt, ensemble_vote, entity_prompt, geo_prompt, parse_annotation, parse_builder_reply,
    truncate_explanation, ElectionBackground, Harmonizer, PromptError, PromptOptions, PromptStrategy,
    StrategyInputs, strategy_features,
};

pub const NOT_IN_USA: &str = "Not from a state in the USA";
pub const USA: &str = "USA";

pub const US_STATES: [&str; 51] = [
    "Alabama", "Alaska", "Arizona", "Arkansas", "California", "Colorado", "Connecticut", "Delaware",
    "District of Columbia", "Florida", "Georgia", "Hawaii", "Idaho", "Illinois", "Indiana", "Iowa",
    "Kansas", "Kentucky", "Louisiana", "Maine", "Maryland", "Massachusetts", "Michigan", "Minnesota",
    "Mississippi", "Missouri", "Montana", "Nebraska", "Nevada", "New Hampshire", "New Jersey",
    "New Mexico", "New York", "North Carolina", "North Dakota", "Ohio", "Oklahoma", "Oregon",
    "Pennsylvania", "Rhode Island", "South Carolina", "South Dakota", "Tennessee", "Texas", "Utah",
    "Vermont", "Virginia", "Washington", "West Virginia", "Wisconsin", "Wyoming",
];

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("unparseable reply: `{0}`")]
    UnparseableReply(String),
    #[error("mould already augmented")]
    AlreadyAugmented,
    #[error("timeline request failed: {0}")]
    Client(#[from] ClientError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid poll settings: {0}")]
    Settings(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Last date each user was surveyed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessingLedger {
    last: BTreeMap<String, NaiveDate>,
}

impl ProcessingLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a processing date; older dates never overwrite newer ones.
    pub fn record(&mut self, user_id: &str, date: NaiveDate) {
        let e = self.last.entry(user_id.to_string()).or_insert(date);
        if date > *e {
            *e = date;
        }
    }

    pub fn last_processed(&self, user_id: &str) -> Option<NaiveDate> {
        self.last.get(user_id).copied()
    }

    pub fn len(&self) -> usize {
        self.last.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FilterError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["user_id", "last_processed_date"])?;
        for (u, d) in &self.last {
            w.write_record([u.as_str(), &d.format("%Y-%m-%d").to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, FilterError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut l = ProcessingLedger::new();
        for rec in rd.records() {
            let rec = rec?;
            let (Some(u), Some(d)) = (rec.get(0), rec.get(1)) else {
                continue;
            };
            let d = NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d")
                .map_err(|e| FilterError::Settings(format!("bad ledger date `{d}`: {e}")))?;
            l.record(u, d);
        }
        Ok(l)
    }
}

/// Drops users processed within `window_days` of the pool date (the boundary day included).
pub fn temporal_filter(pool: &SubjectPool, ledger: &ProcessingLedger, window_days: u32) -> SubjectPool {
    let keep = |uid: &str| match ledger.last_processed(uid) {
        Some(d) => (pool.pool_date - d).num_days() > window_days as i64,
        None => true,
    };
    SubjectPool {
        entries: pool
            .entries
            .iter()
            .filter(|e| keep(&e.user.user_id))
            .cloned()
            .collect(),
        pool_date: pool.pool_date,
        plan: pool.plan.clone(),
    }
}

pub fn has_location(location: Option<&str>) -> bool {
    location.is_some_and(|l| !l.trim().is_empty())
}

/// Drops users without a self-reported location.
pub fn null_geography_filter(pool: &SubjectPool) -> SubjectPool {
    SubjectPool {
        entries: pool
            .entries
            .iter()
            .filter(|e| has_location(e.user.location_raw.as_deref()))
            .cloned()
            .collect(),
        pool_date: pool.pool_date,
        plan: pool.plan.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityKind {
    Person,
    Other,
}

fn clean_reply(reply: &str) -> String {
    reply
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '*')
        .trim()
        .to_string()
}

pub fn parse_entity_reply(reply: &str) -> Result<EntityKind, FilterError> {
    match clean_reply(reply).as_str() {
        "P" => Ok(EntityKind::Person),
        "O" => Ok(EntityKind::Other),
        _ => Err(FilterError::UnparseableReply(reply.to_string())),
    }
}

pub fn entity_filter(mould: &Mould, annotator: &dyn AnnotatorBackend) -> Result<EntityKind, FilterError> {
    parse_entity_reply(&annotator.complete(&entity_prompt(mould))?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoResult {
    pub level1_member: bool,
    /// State name, or `USA` when no state was given.
    pub level2: Option<String>,
}

impl GeoResult {
    pub fn is_stateless(&self) -> bool {
        self.level2.as_deref() == Some(USA)
    }

    pub fn state(&self) -> Option<&str> {
        self.level2.as_deref().filter(|s| *s != USA)
    }
}

pub fn parse_geo_reply(reply: &str) -> Result<GeoResult, FilterError> {
    let r = clean_reply(reply);
    let n = normalize(&r);
    if n == normalize(NOT_IN_USA) {
        return Ok(GeoResult {
            level1_member: false,
            level2: None,
        });
    }
    if n == "usa" {
        return Ok(GeoResult {
            level1_member: true,
            level2: Some(USA.into()),
        });
    }
    US_STATES
        .iter()
        .find(|s| normalize(s) == n)
        .map(|s| GeoResult {
            level1_member: true,
            level2: Some(s.to_string()),
        })
        .ok_or_else(|| FilterError::UnparseableReply(reply.to_string()))
}

pub fn geographic_filter(mould: &Mould, annotator: &dyn AnnotatorBackend) -> Result<GeoResult, FilterError> {
    parse_geo_reply(&annotator.complete(&geo_prompt(mould))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuotaDecision {
    Accepted(u32),
    Rejected,
    NoCell,
}

/// Accepts when the user's cell exists and still has room (cell match and counter below quota).
pub fn quota_filter(attrs: &Attributes, quotas: &QuotaState) -> Result<QuotaDecision, DomainError> {
    match quotas.locate(attrs)? {
        None => Ok(QuotaDecision::NoCell),
        Some(c) => Ok(if quotas.try_acquire(c)? {
            QuotaDecision::Accepted(c)
        } else {
            QuotaDecision::Rejected
        }),
    }
}

/// Tweets requested for timeline augmentation: `m` for political captures, `round(λ·m)` otherwise.
pub fn timeline_depth(kind: &QueryKind, m_politics: u32, lambda: f64) -> u32 {
    match kind {
        QueryKind::Political => m_politics,
        QueryKind::Trending(_) => (lambda * m_politics as f64).round() as u32,
    }
}

pub fn augment_mould(mould: &Mould, client: &dyn PlatformClient, depth: u32) -> Result<Mould, FilterError> {
    if mould.augmented {
        return Err(FilterError::AlreadyAugmented);
    }
    let timeline = client.user_timeline(&mould.user.user_id, depth)?;
    Ok(Mould {
        user: mould.user.clone(),
        tweets: merge_tweets(&mould.user.user_id, mould.tweets.clone(), timeline)?,
        augmented: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Temporal,
    NullGeography,
    Entity,
    Geography,
    Quota,
    Augment,
    Extraction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub user_id: String,
    pub stage: Stage,
    pub decision: String,
    pub reason: String,
}

impl AuditRecord {
    fn new(user_id: &str, stage: Stage, decision: &str, reason: impl Into<String>) -> Self {
        AuditRecord {
            user_id: user_id.to_string(),
            stage,
            decision: decision.to_string(),
            reason: reason.into(),
        }
    }
}

pub fn write_audit_jsonl<W: Write>(records: &[AuditRecord], mut w: W) -> Result<(), FilterError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Vote-choice ensembling across the four prompting strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSettings {
    /// Titles (from the poll's feature list) answered by majority vote.
    pub vote_titles: Vec<String>,
    /// Feature-builder templates keyed by vote title.
    #[serde(default)]
    pub builder_templates: BTreeMap<String, String>,
    /// Election results keyed by area.
    #[serde(default)]
    pub backgrounds: BTreeMap<String, ElectionBackground>,
    /// Maps area-specific answers onto the standard choice set, keyed by vote title.
    #[serde(default)]
    pub harmonizers: BTreeMap<String, Harmonizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollSettings {
    pub poll_id: String,
    pub fieldwork_date: NaiveDate,
    pub window_days: u32,
    pub m_politics: u32,
    pub lambda: f64,
    /// Every feature to extract for accepted users.
    pub features: Vec<FeatureDef>,
    /// Attribute title carrying the area, if the quota frame is split by area.
    #[serde(default)]
    pub area_title: Option<String>,
    pub include_speculation: bool,
    pub randomize_order: bool,
    pub seed: u64,
    #[serde(default)]
    pub ensemble: Option<EnsembleSettings>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl PollSettings {
    fn validate(&self, quotas: &QuotaState) -> Result<(), FilterError> {
        if self.features.is_empty() {
            return Err(FilterError::Settings("no features".into()));
        }
        if self.m_politics == 0 {
            return Err(FilterError::Settings("m must be positive".into()));
        }
        if !(self.lambda > 1.0) {
            return Err(FilterError::Settings("lambda must exceed 1".into()));
        }
        for t in &quotas.frame().attribute_schema {
            if Some(t) != self.area_title.as_ref() && !self.features.iter().any(|f| f.title() == t) {
                return Err(FilterError::Settings(format!("quota title `{t}` has no feature")));
            }
        }
        if let Some(e) = &self.ensemble {
            for t in &e.vote_titles {
                if !self.features.iter().any(|f| f.title() == t) {
                    return Err(FilterError::Settings(format!("vote title `{t}` has no feature")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollCounts {
    pub pool: usize,
    pub temporal_excluded: usize,
    pub null_geography_excluded: usize,
    pub non_person: usize,
    pub outside_area: usize,
    pub unparseable: usize,
    pub refused: usize,
    pub annotator_failures: usize,
    pub no_cell: usize,
    pub quota_full: usize,
    pub augment_failures: usize,
    pub accepted: usize,
    pub stateless: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollOutcome {
    pub responses: Vec<SiliconResponse>,
    pub audit: Vec<AuditRecord>,
    pub counts: PollCounts,
    pub quota_report: Vec<QuotaFill>,
    pub parse_warnings: usize,
}

enum Screen {
    Drop(AuditRecord, fn(&mut PollCounts)),
    Candidate {
        geo: GeoResult,
        attrs: Attributes,
        trail: Vec<AuditRecord>,
    },
}

struct Ctx<'a> {
    settings: &'a PollSettings,
    annotator: &'a dyn AnnotatorBackend,
    client: &'a dyn PlatformClient,
    quota_defs: Vec<FeatureDef>,
    area_features: Mutex<HashMap<(String, String), Option<FeatureDef>>>,
    warnings: Mutex<usize>,
}

fn annotator_drop(uid: &str, stage: Stage, e: AnnotatorError) -> Screen {
    match e {
        AnnotatorError::Refused => Screen::Drop(AuditRecord::new(uid, stage, "drop", "refused"), |c| c.refused += 1),
        other => Screen::Drop(AuditRecord::new(uid, stage, "drop", other.to_string()), |c| {
            c.annotator_failures += 1
        }),
    }
}

impl Ctx<'_> {
    fn ask(&self, prompt: &str) -> Result<String, AnnotatorError> {
        retrying_complete(self.annotator, prompt, &self.settings.retry)
    }

    fn opts(&self, salt: &str, uid: &str) -> PromptOptions {
        PromptOptions {
            randomize_order: self.settings.randomize_order,
            include_speculation: self.settings.include_speculation,
            seed: crate::annotator::call_rng(self.settings.seed, uid, salt).next_u64_compat(),
        }
    }

    fn extract(&self, background: &str, mould: &Mould, defs: &[FeatureDef], salt: &str) -> Result<Vec<FeatureValue>, FilterError> {
        let prompt = build_prompt(background, mould, defs, &self.opts(salt, &mould.user.user_id))?;
        let reply = self.ask(&prompt)?;
        let parsed = parse_annotation(&reply, defs)?;
        *self.warnings.lock().expect("warning counter poisoned") += parsed.warnings.len();
        Ok(parsed.entries)
    }

    fn screen(&self, mould: &Mould) -> Screen {
        let uid = mould.user.user_id.as_str();
        let mut trail = Vec::new();
        match self.ask(&entity_prompt(mould)).map_err(FilterError::from).and_then(|r| parse_entity_reply(&r)) {
            Ok(EntityKind::Person) => trail.push(AuditRecord::new(uid, Stage::Entity, "pass", "person")),
            Ok(EntityKind::Other) => {
                return Screen::Drop(AuditRecord::new(uid, Stage::Entity, "drop", "other entity"), |c| {
                    c.non_person += 1
                })
            }
            Err(FilterError::Annotator(e)) => return annotator_drop(uid, Stage::Entity, e),
            Err(e) => {
                return Screen::Drop(AuditRecord::new(uid, Stage::Entity, "drop", e.to_string()), |c| {
                    c.unparseable += 1
                })
            }
        }
        let geo = match self.ask(&geo_prompt(mould)).map_err(FilterError::from).and_then(|r| parse_geo_reply(&r)) {
            Ok(g) if !g.level1_member => {
                return Screen::Drop(AuditRecord::new(uid, Stage::Geography, "drop", NOT_IN_USA), |c| {
                    c.outside_area += 1
                })
            }
            Ok(g) => g,
            Err(FilterError::Annotator(e)) => return annotator_drop(uid, Stage::Geography, e),
            Err(e) => {
                return Screen::Drop(AuditRecord::new(uid, Stage::Geography, "drop", e.to_string()), |c| {
                    c.unparseable += 1
                })
            }
        };
        trail.push(AuditRecord::new(
            uid,
            Stage::Geography,
            "pass",
            geo.level2.clone().unwrap_or_default(),
        ));
        let mut attrs = Attributes::new();
        if !self.quota_defs.is_empty() {
            match self.extract("", mould, &self.quota_defs, "quota") {
                Ok(vals) => {
                    for v in vals {
                        attrs.insert(v.title, v.category);
                    }
                }
                Err(FilterError::Annotator(e)) => return annotator_drop(uid, Stage::Quota, e),
                Err(e) => {
                    return Screen::Drop(AuditRecord::new(uid, Stage::Quota, "drop", e.to_string()), |c| {
                        c.unparseable += 1
                    })
                }
            }
        }
        if let (Some(t), Some(s)) = (&self.settings.area_title, geo.state()) {
            attrs.insert(t.clone(), s.to_string());
        }
        Screen::Candidate { geo, attrs, trail }
    }

    fn area_feature(&self, title: &str, area: &str, ens: &EnsembleSettings) -> Option<FeatureDef> {
        let key = (title.to_string(), area.to_string());
        if let Some(v) = self.area_features.lock().expect("cache poisoned").get(&key) {
            return v.clone();
        }
        let built = (|| {
            let template = ens.builder_templates.get(title)?;
            let bg = ens.backgrounds.get(area)?.render();
            let reply = self.ask(&builder_prompt(&bg, template)).ok()?;
            let defs = parse_builder_reply(&reply, FeatureKind::Independent).ok()?;
            defs.into_iter().find(|d| d.title() == title)
        })();
        if built.is_none() {
            log::warn!("no area-specific choice set for `{title}` in {area}");
        }
        self.area_features
            .lock()
            .expect("cache poisoned")
            .insert(key, built.clone());
        built
    }

    /// Augments and extracts every feature for an accepted user.
    fn survey(&self, mould: &Mould, geo: &GeoResult) -> Result<SiliconResponse, (Stage, FilterError)> {
        let s = self.settings;
        let depth = timeline_depth(&mould.user.capture_query_kind, s.m_politics, s.lambda);
        let full = augment_mould(mould, self.client, depth).map_err(|e| (Stage::Augment, e))?;
        let mut values: BTreeMap<String, FeatureValue> = BTreeMap::new();
        let joint = self
            .extract("", &full, &s.features, "joint")
            .map_err(|e| (Stage::Extraction, e))?;
        for mut v in joint {
            truncate_explanation(&mut v);
            values.insert(v.title.clone(), v);
        }
        let mut strategy_votes = None;
        if let Some(ens) = &s.ensemble {
            let mut all = BTreeMap::new();
            let demographics: Vec<FeatureDef> = s
                .features
                .iter()
                .filter(|f| !ens.vote_titles.iter().any(|t| t == f.title()))
                .cloned()
                .collect();
            for title in &ens.vote_titles {
                let standard = s.features.iter().find(|f| f.title() == title).expect("validated");
                let area_def = geo.state().and_then(|a| self.area_feature(title, a, ens));
                let bg = geo
                    .state()
                    .and_then(|a| ens.backgrounds.get(a))
                    .map(|b| b.render());
                let inputs = StrategyInputs {
                    vote_feature: standard,
                    demographics: &demographics,
                    state_feature: area_def.as_ref(),
                    background: bg.as_deref(),
                };
                let mut votes: BTreeMap<PromptStrategy, FeatureValue> = BTreeMap::new();
                for strat in PromptStrategy::ALL {
                    if strat == PromptStrategy::JointSociodemographic {
                        votes.insert(strat, values[title].clone());
                        continue;
                    }
                    let Ok((defs, background)) = strategy_features(strat, &inputs) else {
                        continue;
                    };
                    let got = self
                        .extract(&background, &full, &defs, strat.label())
                        .map_err(|e| (Stage::Extraction, e))?;
                    if let Some(mut v) = got.into_iter().next() {
                        truncate_explanation(&mut v);
                        votes.insert(strat, v);
                    }
                }
                let harmonizer = ens.harmonizers.get(title).cloned().unwrap_or_default();
                let seed = crate::annotator::call_rng(s.seed, &mould.user.user_id, title).next_u64_compat();
                if let Some(w) = ensemble_vote(standard, &harmonizer, &votes, seed) {
                    values.insert(title.clone(), w);
                }
                all.insert(
                    title.clone(),
                    votes.into_iter().map(|(k, v)| (k.label().to_string(), v)).collect(),
                );
            }
            strategy_votes = Some(all);
        }
        Ok(SiliconResponse {
            user_id: mould.user.user_id.clone(),
            poll_id: s.poll_id.clone(),
            fieldwork_date: s.fieldwork_date,
            area: geo.state().map(str::to_string),
            values,
            strategy_votes,
        })
    }
}

trait NextU64 {
    fn next_u64_compat(self) -> u64;
}

impl NextU64 for rand_chacha::ChaCha8Rng {
    fn next_u64_compat(mut self) -> u64 {
        rand::RngCore::next_u64(&mut self)
    }
}

/// Runs the full cascade over a pool.
///
/// Accepted users are recorded in `ledger` under the pool date and fill `quotas`.
pub fn poll_users(
    pool: &SubjectPool,
    ledger: &mut ProcessingLedger,
    quotas: &QuotaState,
    settings: &PollSettings,
    annotator: &dyn AnnotatorBackend,
    client: &dyn PlatformClient,
) -> Result<PollOutcome, FilterError> {
    settings.validate(quotas)?;
    let schema: BTreeSet<&String> = quotas.frame().attribute_schema.iter().collect();
    let quota_defs: Vec<FeatureDef> = settings
        .features
        .iter()
        .filter(|f| schema.contains(&f.title().to_string()))
        .cloned()
        .collect();
    let ctx = Ctx {
        settings,
        annotator,
        client,
        quota_defs,
        area_features: Mutex::new(HashMap::new()),
        warnings: Mutex::new(0),
    };
    let mut counts = PollCounts {
        pool: pool.entries.len(),
        ..Default::default()
    };
    let mut trails: Vec<Vec<AuditRecord>> = vec![Vec::new(); pool.entries.len()];
    let mut moulds: Vec<Option<Mould>> = Vec::with_capacity(pool.entries.len());
    for (i, e) in pool.entries.iter().enumerate() {
        let uid = e.user.user_id.as_str();
        let recent = ledger
            .last_processed(uid)
            .is_some_and(|d| (pool.pool_date - d).num_days() <= settings.window_days as i64);
        if recent {
            trails[i].push(AuditRecord::new(uid, Stage::Temporal, "drop", "processed within window"));
            counts.temporal_excluded += 1;
            moulds.push(None);
            continue;
        }
        trails[i].push(AuditRecord::new(uid, Stage::Temporal, "pass", ""));
        if !has_location(e.user.location_raw.as_deref()) {
            trails[i].push(AuditRecord::new(uid, Stage::NullGeography, "drop", "no location"));
            counts.null_geography_excluded += 1;
            moulds.push(None);
            continue;
        }
        trails[i].push(AuditRecord::new(uid, Stage::NullGeography, "pass", ""));
        moulds.push(Some(crate::domain::assemble_mould(e.user.clone(), e.tweets.clone())?));
    }

    let screens: Vec<Option<Screen>> = moulds
        .par_iter()
        .map(|m| m.as_ref().map(|m| ctx.screen(m)))
        .collect();

    enum Slot {
        Candidate { cell: Option<u32>, geo: GeoResult },
        Done,
    }
    let mut slots: Vec<Slot> = Vec::with_capacity(screens.len());
    for (i, s) in screens.into_iter().enumerate() {
        match s {
            None => slots.push(Slot::Done),
            Some(Screen::Drop(rec, bump)) => {
                trails[i].push(rec);
                bump(&mut counts);
                slots.push(Slot::Done);
            }
            Some(Screen::Candidate { geo, attrs, trail }) => {
                trails[i].extend(trail);
                let cell = quotas.locate(&attrs)?;
                slots.push(Slot::Candidate { cell, geo });
            }
        }
    }

    // Emulates sequential quota filling: a user whose survey fails releases the slot to
    // the next candidate in pool order.
    let base: HashMap<u32, (u32, u32)> = quotas
        .fill_report()
        .iter()
        .map(|f| (f.cell_id, (f.filled, f.quota)))
        .collect();
    let mut results: HashMap<usize, Result<SiliconResponse, (Stage, String)>> = HashMap::new();
    let selected = loop {
        let mut used: HashMap<u32, u32> = HashMap::new();
        let mut selected = Vec::new();
        for (i, slot) in slots.iter().enumerate() {
            let Slot::Candidate { cell: Some(c), .. } = slot else {
                continue;
            };
            if matches!(results.get(&i), Some(Err(_))) {
                continue;
            }
            let (filled, quota) = base[c];
            let u = used.entry(*c).or_insert(filled);
            if *u < quota {
                *u += 1;
                selected.push(i);
            }
        }
        let todo: Vec<usize> = selected.iter().copied().filter(|i| !results.contains_key(i)).collect();
        if todo.is_empty() {
            break selected;
        }
        let done: Vec<(usize, Result<SiliconResponse, (Stage, String)>)> = todo
            .par_iter()
            .map(|&i| {
                let Slot::Candidate { geo, .. } = &slots[i] else { unreachable!() };
                let m = moulds[i].as_ref().expect("candidate has a mould");
                (i, ctx.survey(m, geo).map_err(|(st, e)| (st, e.to_string())))
            })
            .collect();
        results.extend(done);
    };
    let selected: BTreeSet<usize> = selected.into_iter().collect();

    let mut responses = Vec::new();
    for (i, slot) in slots.iter().enumerate() {
        let Slot::Candidate { cell, geo } = slot else {
            continue;
        };
        let uid = pool.entries[i].user.user_id.clone();
        let Some(c) = cell else {
            trails[i].push(AuditRecord::new(&uid, Stage::Quota, "drop", "no matching cell"));
            counts.no_cell += 1;
            continue;
        };
        match results.remove(&i) {
            Some(Err((stage, msg))) => {
                trails[i].push(AuditRecord::new(&uid, Stage::Quota, "pass", format!("cell {c}")));
                if stage == Stage::Augment {
                    counts.augment_failures += 1;
                } else if msg == AnnotatorError::Refused.to_string() {
                    counts.refused += 1;
                } else {
                    counts.annotator_failures += 1;
                }
                trails[i].push(AuditRecord::new(&uid, stage, "drop", msg));
            }
            Some(Ok(resp)) if selected.contains(&i) => {
                match quota_filter_cell(*c, quotas)? {
                    QuotaDecision::Accepted(_) => {}
                    _ => unreachable!("selection respects quotas"),
                }
                trails[i].push(AuditRecord::new(&uid, Stage::Quota, "pass", format!("cell {c}")));
                trails[i].push(AuditRecord::new(&uid, Stage::Augment, "pass", ""));
                trails[i].push(AuditRecord::new(&uid, Stage::Extraction, "accept", ""));
                counts.accepted += 1;
                if geo.is_stateless() {
                    counts.stateless += 1;
                }
                ledger.record(&uid, pool.pool_date);
                responses.push(resp);
            }
            _ => {
                trails[i].push(AuditRecord::new(&uid, Stage::Quota, "drop", format!("cell {c} full")));
                counts.quota_full += 1;
            }
        }
    }
    let warnings = *ctx.warnings.lock().expect("warning counter poisoned");
    Ok(PollOutcome {
        responses,
        audit: trails.into_iter().flatten().collect(),
        counts,
        quota_report: quotas.fill_report(),
        parse_warnings: warnings,
    })
}

fn quota_filter_cell(cell: u32, quotas: &QuotaState) -> Result<QuotaDecision, DomainError> {
    Ok(if quotas.try_acquire(cell)? {
        QuotaDecision::Accepted(cell)
    } else {
        QuotaDecision::Rejected
    })
}

pub fn write_responses_jsonl<W: Write>(responses: &[SiliconResponse], mut w: W) -> Result<(), FilterError> {
    for r in responses {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_responses_jsonl<R: std::io::BufRead>(r: R) -> Result<Vec<SiliconResponse>, FilterError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::{facts_tag, MockOracle};
    use crate::domain::{QuotaState, StratCell, StratFrame, TweetRecord, UserRecord};
    use crate::pool::{MockClient, PoolEntry, QueryPlan};
    use chrono::{TimeZone, Utc};

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 10, d).unwrap()
    }

    fn user(id: &str, loc: Option<&str>, facts: &[(&str, &str)], kind: QueryKind) -> UserRecord {
        let f: BTreeMap<String, String> = facts.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        UserRecord {
            user_id: id.into(),
            username: format!("user_{id}"),
            display_name: id.into(),
            description: facts_tag(&f),
            location_raw: loc.map(str::to_string),
            profile_image_ref: None,
            captured_at: Utc.with_ymd_and_hms(2024, 10, 20, 0, 0, 0).unwrap(),
            capture_query_kind: kind,
        }
    }

    fn tweets(uid: &str, n: usize, offset: usize) -> Vec<TweetRecord> {
        (0..n)
            .map(|i| TweetRecord {
                tweet_id: format!("{uid}-{}", i + offset),
                author_id: uid.into(),
                created_at: Utc.with_ymd_and_hms(2024, 10, 1 + (i + offset) as u32 % 20, 12, 0, 0).unwrap(),
                text: format!("tweet {i}"),
            })
            .collect()
    }

    fn pool_of(users: Vec<UserRecord>) -> SubjectPool {
        SubjectPool {
            entries: users
                .into_iter()
                .map(|u| {
                    let t = tweets(&u.user_id, 1, 0);
                    PoolEntry { user: u, tweets: t }
                })
                .collect(),
            pool_date: day(20),
            plan: QueryPlan { queries: vec![] },
        }
    }

    #[test]
    fn temporal_window_boundaries() {
        let pool = pool_of(vec![
            user("a", Some("x"), &[], QueryKind::Political),
            user("b", Some("x"), &[], QueryKind::Political),
            user("c", Some("x"), &[], QueryKind::Political),
        ]);
        assert_eq!(temporal_filter(&pool, &ProcessingLedger::new(), 30), pool);
        let mut l = ProcessingLedger::new();
        l.record("a", day(10));
        let nov = NaiveDate::from_ymd_opt(2024, 9, 20).unwrap();
        l.record("b", nov);
        l.record("c", NaiveDate::from_ymd_opt(2024, 9, 19).unwrap());
        let kept: Vec<_> = temporal_filter(&pool, &l, 30)
            .entries
            .iter()
            .map(|e| e.user.user_id.clone())
            .collect();
        assert_eq!(kept, ["c"]);
    }

    #[test]
    fn ledger_monotone_and_round_trip() {
        let mut l = ProcessingLedger::new();
        l.record("a", day(10));
        l.record("a", day(5));
        assert_eq!(l.last_processed("a"), Some(day(10)));
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        assert_eq!(ProcessingLedger::read_csv(&buf[..]).unwrap(), l);
    }

    #[test]
    fn null_geography_cases() {
        let pool = pool_of(vec![
            user("a", None, &[], QueryKind::Political),
            user("b", Some("Austin, TX"), &[], QueryKind::Political),
            user("c", Some("   "), &[], QueryKind::Political),
        ]);
        let kept = null_geography_filter(&pool);
        assert_eq!(kept.entries.len(), 1);
        assert_eq!(kept.entries[0].user.user_id, "b");
    }

    #[test]
    fn entity_and_geo_replies() {
        assert_eq!(parse_entity_reply("P").unwrap(), EntityKind::Person);
        assert_eq!(parse_entity_reply(" O\n").unwrap(), EntityKind::Other);
        assert!(matches!(parse_entity_reply("maybe"), Err(FilterError::UnparseableReply(_))));
        assert_eq!(
            parse_geo_reply("Texas").unwrap(),
            GeoResult { level1_member: true, level2: Some("Texas".into()) }
        );
        assert_eq!(
            parse_geo_reply("Not from a state in the USA").unwrap(),
            GeoResult { level1_member: false, level2: None }
        );
        assert_eq!(
            parse_geo_reply("district of columbia").unwrap().level2.as_deref(),
            Some("District of Columbia")
        );
        assert!(parse_geo_reply("USA").unwrap().is_stateless());
        assert!(parse_geo_reply("Narnia").is_err());
        let m = crate::domain::assemble_mould(
            user("a", Some("x"), &[("ENTITY", "P"), ("GEO", "Texas")], QueryKind::Political),
            vec![],
        )
        .unwrap();
        let o = MockOracle::perfect();
        assert_eq!(entity_filter(&m, &o).unwrap(), EntityKind::Person);
        assert_eq!(geographic_filter(&m, &o).unwrap().state(), Some("Texas"));
    }

    #[test]
    fn depths() {
        assert_eq!(timeline_depth(&QueryKind::Political, 20, 2.0), 20);
        assert_eq!(timeline_depth(&QueryKind::Trending("x".into()), 20, 2.0), 40);
        assert_eq!(timeline_depth(&QueryKind::Trending("x".into()), 20, 1.5), 30);
    }

    #[test]
    fn augmentation_union() {
        let u = user("a", Some("x"), &[], QueryKind::Political);
        let m = crate::domain::assemble_mould(u, tweets("a", 5, 0)).unwrap();
        let mut c = MockClient::new();
        c.add_timeline("a", tweets("a", 20, 3)).unwrap();
        let aug = augment_mould(&m, &c, 20).unwrap();
        assert_eq!(aug.tweets.len(), 23);
        assert!(aug.augmented);
        assert!(matches!(augment_mould(&aug, &c, 20), Err(FilterError::AlreadyAugmented)));
        let deep = augment_mould(&m, &c, 500).unwrap();
        assert_eq!(deep.tweets.len(), 23);
    }

    fn quota_table() -> QuotaState {
        let schema = ["SEX", "AGE", "INCOME", "RACE", "VOTE2020"];
        let rows = [
            ["male", "65 or older", "up to 25k", "black", "D"],
            ["female", "25 to 34", "between 25k and 50k", "white", "D"],
        ];
        let frame = StratFrame {
            cells: rows
                .iter()
                .enumerate()
                .map(|(i, r)| StratCell {
                    cell_id: i as u32 + 1,
                    attributes: schema.iter().zip(r).map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                    weight: 1.0,
                })
                .collect(),
            attribute_schema: schema.iter().map(|s| s.to_string()).collect(),
        };
        let q = QuotaState::new(frame, vec![2, 3]).unwrap();
        q.set_counter(2, 3).unwrap();
        q
    }

    #[test]
    fn quota_table_decisions() {
        let q = quota_table();
        let cell1 = q.frame().cells[0].attributes.clone();
        let cell2 = q.frame().cells[1].attributes.clone();
        assert_eq!(quota_filter(&cell2, &q).unwrap(), QuotaDecision::Rejected);
        assert_eq!(quota_filter(&cell1, &q).unwrap(), QuotaDecision::Accepted(1));
        assert_eq!(q.counter(1).unwrap(), 1);
        let mut other = cell1.clone();
        other.insert("RACE".into(), "asian".into());
        assert_eq!(quota_filter(&other, &q).unwrap(), QuotaDecision::NoCell);
        other.remove("RACE");
        assert!(quota_filter(&other, &q).is_err());
    }

    fn features() -> Vec<FeatureDef> {
        vec![
            FeatureDef::from_pairs("SEX", &[("S1", "male"), ("S2", "female")], FeatureKind::Independent).unwrap(),
            FeatureDef::from_pairs("AGE", &[("A1", "young"), ("A2", "old")], FeatureKind::Independent).unwrap(),
            FeatureDef::from_pairs(
                "VOTE",
                &[("V1", "D"), ("V2", "R"), ("V3", "other")],
                FeatureKind::Dependent,
            )
            .unwrap(),
        ]
    }

    fn sex_age_quotas(q: u32) -> QuotaState {
        let mut cells = Vec::new();
        for (i, (s, a)) in [("male", "young"), ("male", "old"), ("female", "young"), ("female", "old")]
            .iter()
            .enumerate()
        {
            cells.push(StratCell {
                cell_id: i as u32,
                attributes: [("SEX".to_string(), s.to_string()), ("AGE".to_string(), a.to_string())].into(),
                weight: 1.0,
            });
        }
        let frame = StratFrame {
            cells,
            attribute_schema: vec!["SEX".into(), "AGE".into()],
        };
        QuotaState::new(frame, vec![q; 4]).unwrap()
    }

    fn settings() -> PollSettings {
        PollSettings {
            poll_id: "p1".into(),
            fieldwork_date: day(20),
            window_days: 30,
            m_politics: 20,
            lambda: 2.0,
            features: features(),
            area_title: None,
            include_speculation: true,
            randomize_order: true,
            seed: 11,
            ensemble: None,
            retry: RetryPolicy {
                max_attempts: 1,
                initial_backoff_ms: 0,
                multiplier: 1.0,
                max_backoff_ms: 0,
            },
        }
    }

    fn scenario() -> (SubjectPool, MockClient) {
        let person = |id: &str, sex: &str, geo: &str| {
            user(
                id,
                Some("somewhere"),
                &[("ENTITY", "P"), ("GEO", geo), ("SEX", sex), ("AGE", "young"), ("VOTE", "R")],
                QueryKind::Trending("t".into()),
            )
        };
        let users = vec![
            person("u1", "male", "Texas"),
            user("u2", None, &[], QueryKind::Political),
            user("u3", Some("HQ"), &[("ENTITY", "O")], QueryKind::Political),
            person("u4", "male", "Not from a state in the USA"),
            person("u5", "male", "USA"),
            person("u6", "male", "Utah"),
            person("u7", "female", "Utah"),
        ];
        let mut c = MockClient::new();
        for u in &users {
            c.add_timeline(&u.user_id, tweets(&u.user_id, 50, 1)).unwrap();
        }
        (pool_of(users), c)
    }

    #[test]
    fn cascade_trace_and_quota() {
        let (pool, client) = scenario();
        let q = sex_age_quotas(2);
        let mut ledger = ProcessingLedger::new();
        ledger.record("u7", day(1));
        let out = poll_users(&pool, &mut ledger, &q, &settings(), &MockOracle::perfect(), &client).unwrap();
        let ids: Vec<_> = out.responses.iter().map(|r| r.user_id.as_str()).collect();
        // u5 and u1 fill the (male, young) cell before u6
        assert_eq!(ids, ["u1", "u5"]);
        assert_eq!(out.counts.temporal_excluded, 1);
        assert_eq!(out.counts.null_geography_excluded, 1);
        assert_eq!(out.counts.non_person, 1);
        assert_eq!(out.counts.outside_area, 1);
        assert_eq!(out.counts.quota_full, 1);
        assert_eq!(out.counts.stateless, 1);
        assert!(out.responses[1].is_stateless());
        assert_eq!(out.responses[0].area.as_deref(), Some("Texas"));
        assert_eq!(out.responses[0].category("VOTE"), Some("R"));
        assert_eq!(q.counter(0).unwrap(), 2);
        assert_eq!(ledger.last_processed("u1"), Some(day(20)));
        assert_eq!(ledger.last_processed("u6"), None);

        let stages: Vec<Stage> = out.audit.iter().filter(|a| a.user_id == "u1").map(|a| a.stage).collect();
        assert_eq!(
            stages,
            [
                Stage::Temporal,
                Stage::NullGeography,
                Stage::Entity,
                Stage::Geography,
                Stage::Quota,
                Stage::Augment,
                Stage::Extraction
            ]
        );
        for uid in ["u1", "u2", "u3", "u4", "u5", "u6", "u7"] {
            let s: Vec<Stage> = out.audit.iter().filter(|a| a.user_id == uid).map(|a| a.stage).collect();
            assert!(s.windows(2).all(|w| w[0] < w[1]), "{uid}: {s:?}");
        }
    }

    #[test]
    fn polling_is_deterministic() {
        let (pool, client) = scenario();
        let run = || {
            let q = sex_age_quotas(1);
            let mut l = ProcessingLedger::new();
            let out = poll_users(&pool, &mut l, &q, &settings(), &MockOracle::perfect(), &client).unwrap();
            serde_json::to_string(&out).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn refusals_are_counted() {
        let (pool, client) = scenario();
        let q = sex_age_quotas(5);
        let mut l = ProcessingLedger::new();
        let oracle = MockOracle::new(crate::annotator::OracleConfig {
            rejection_rate: 1.0,
            ..Default::default()
        })
        .unwrap();
        let out = poll_users(&pool, &mut l, &q, &settings(), &oracle, &client).unwrap();
        assert!(out.responses.is_empty());
        // every user reaching the entity stage refuses
        assert_eq!(out.counts.refused, 6);
    }

    #[test]
    fn failed_survey_releases_quota_slot() {
        let (mut pool, client) = scenario();
        // u1 has no timeline: its slot passes to u5; u7 fills the female cell
        pool.entries[0].user.user_id = "ghost".into();
        for t in &mut pool.entries[0].tweets {
            t.author_id = "ghost".into();
        }
        let q = sex_age_quotas(1);
        let mut l = ProcessingLedger::new();
        let out = poll_users(&pool, &mut l, &q, &settings(), &MockOracle::perfect(), &client).unwrap();
        let ids: Vec<_> = out.responses.iter().map(|r| r.user_id.as_str()).collect();
        assert_eq!(ids, ["u5", "u7"]);
        assert_eq!(out.counts.augment_failures, 1);
        assert_eq!(out.counts.quota_full, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn concurrent_acquires_never_overfill(quota in 0u32..50, threads in 2usize..9, attempts in 1usize..200) {
                let q = sex_age_quotas(quota);
                let attrs = q.frame().cells[0].attributes.clone();
                let accepted = std::sync::atomic::AtomicU32::new(0);
                std::thread::scope(|s| {
                    for _ in 0..threads {
                        s.spawn(|| {
                            for _ in 0..attempts {
                                if let QuotaDecision::Accepted(_) = quota_filter(&attrs, &q).unwrap() {
                                    accepted.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                                }
                            }
                        });
                    }
                });
                let expect = quota.min((threads * attempts) as u32);
                prop_assert_eq!(q.counter(0).unwrap(), expect);
                prop_assert_eq!(accepted.load(std::sync::atomic::Ordering::SeqCst), expect);
            }
        }
    }
}
