//! Core data types shared by every pipeline stage.
//!
//! Users, tweets and moulds come out of the pool stage; feature definitions and
//! values describe the survey instrument; stratification frames and quota state
//! drive both quota sampling and post-stratification.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU32, Ordering};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Attribute map keyed by feature title.
pub type Attributes = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("tweet {tweet_id} is authored by {author_id}, not {user_id}")]
    ForeignTweet {
        tweet_id: String,
        author_id: String,
        user_id: String,
    },
    #[error("attributes are missing schema title `{0}`")]
    SchemaMismatch(String),
    #[error("invalid feature definition `{title}`: {reason}")]
    InvalidFeature { title: String, reason: String },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("unknown cell id {0}")]
    UnknownCell(u32),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercases and trims a category label. Every attribute comparison goes through this.
pub fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "topic")]
pub enum QueryKind {
    Political,
    Trending(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub username: String,
    pub display_name: String,
    pub description: String,
    pub location_raw: Option<String>,
    /// URL or path; never decoded here.
    pub profile_image_ref: Option<String>,
    pub captured_at: DateTime<Utc>,
    pub capture_query_kind: QueryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TweetRecord {
    pub tweet_id: String,
    pub author_id: String,
    pub created_at: DateTime<Utc>,
    pub text: String,
}

/// A user's digital trace: profile plus tweets, newest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mould {
    pub user: UserRecord,
    pub tweets: Vec<TweetRecord>,
    pub augmented: bool,
}

/// Builds a mould, deduplicating tweets by id and ordering them newest-first.
pub fn assemble_mould(user: UserRecord, tweets: Vec<TweetRecord>) -> Result<Mould, DomainError> {
    let tweets = merge_tweets(&user.user_id, Vec::new(), tweets)?;
    Ok(Mould {
        user,
        tweets,
        augmented: false,
    })
}

/// Union of two tweet lists for one author. The first occurrence of an id wins.
pub(crate) fn merge_tweets(
    user_id: &str,
    existing: Vec<TweetRecord>,
    incoming: Vec<TweetRecord>,
) -> Result<Vec<TweetRecord>, DomainError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(existing.len() + incoming.len());
    for t in existing.into_iter().chain(incoming) {
        if t.author_id != user_id {
            return Err(DomainError::ForeignTweet {
                tweet_id: t.tweet_id,
                author_id: t.author_id,
                user_id: user_id.to_string(),
            });
        }
        if seen.insert(t.tweet_id.clone()) {
            out.push(t);
        }
    }
    // stable: equal timestamps keep insertion order, ties broken by id for determinism
    out.sort_by(|a, b| {
        b.created_at
            .cmp(&a.created_at)
            .then_with(|| a.tweet_id.cmp(&b.tweet_id))
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum FeatureKind {
    /// Population distribution known (can weight on it).
    Independent,
    /// Population distribution unknown; always prompted after independents.
    Dependent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOption {
    pub symbol: String,
    pub category: String,
}

/// A survey question: a title plus a symbol-keyed choice set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatureDef")]
pub struct FeatureDef {
    title: String,
    options: Vec<FeatureOption>,
    kind: FeatureKind,
}

#[derive(Deserialize)]
struct RawFeatureDef {
    title: String,
    options: Vec<FeatureOption>,
    kind: FeatureKind,
}

impl TryFrom<RawFeatureDef> for FeatureDef {
    type Error = DomainError;
    fn try_from(r: RawFeatureDef) -> Result<Self, Self::Error> {
        FeatureDef::new(r.title, r.options, r.kind)
    }
}

impl FeatureDef {
    pub fn new(
        title: impl Into<String>,
        options: Vec<FeatureOption>,
        kind: FeatureKind,
    ) -> Result<Self, DomainError> {
        let title = title.into();
        let invalid = |reason: &str| DomainError::InvalidFeature {
            title: title.clone(),
            reason: reason.to_string(),
        };
        if title.trim().is_empty() {
            return Err(invalid("empty title"));
        }
        if options.len() < 2 {
            return Err(invalid("needs at least two options"));
        }
        let mut symbols = HashSet::new();
        for o in &options {
            if o.symbol.trim().is_empty() {
                return Err(invalid("empty symbol"));
            }
            if !symbols.insert(o.symbol.clone()) {
                return Err(invalid(&format!("duplicate symbol {}", o.symbol)));
            }
        }
        Ok(FeatureDef {
            title,
            options,
            kind,
        })
    }

    /// Convenience constructor from `(symbol, category)` pairs.
    pub fn from_pairs(
        title: &str,
        pairs: &[(&str, &str)],
        kind: FeatureKind,
    ) -> Result<Self, DomainError> {
        let options = pairs
            .iter()
            .map(|(s, c)| FeatureOption {
                symbol: s.to_string(),
                category: c.to_string(),
            })
            .collect();
        FeatureDef::new(title, options, kind)
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn options(&self) -> &[FeatureOption] {
        &self.options
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FeatureKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn option_by_symbol(&self, symbol: &str) -> Option<&FeatureOption> {
        self.options.iter().find(|o| o.symbol == symbol)
    }

    pub fn option_by_category(&self, category: &str) -> Option<&FeatureOption> {
        let want = normalize(category);
        self.options.iter().find(|o| normalize(&o.category) == want)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|o| o.category.as_str())
    }
}

/// One annotated answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub title: String,
    pub symbol: String,
    pub category: String,
    pub explanation: String,
    /// 0 (direct evidence) to 100 (pure guess).
    pub speculation: u8,
}

/// A synthetic survey response for one user in one poll.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiliconResponse {
    pub user_id: String,
    pub poll_id: String,
    pub fieldwork_date: NaiveDate,
    /// Area label from the geographic filter; `None` for stateless users.
    pub area: Option<String>,
    pub values: BTreeMap<String, FeatureValue>,
    /// Per-strategy answers for ensembled vote-choice titles, keyed by title then strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy_votes: Option<BTreeMap<String, BTreeMap<String, FeatureValue>>>,
}

impl SiliconResponse {
    pub fn is_stateless(&self) -> bool {
        self.area.is_none()
    }

    pub fn category(&self, title: &str) -> Option<&str> {
        self.values.get(title).map(|v| v.category.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratCell {
    pub cell_id: u32,
    pub attributes: Attributes,
    pub weight: f64,
}

/// Population cells with weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratFrame {
    pub cells: Vec<StratCell>,
    pub attribute_schema: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameViolation {
    DuplicateCell { cell_id: u32, duplicate_of: u32 },
    DuplicateCellId(u32),
    NegativeWeight { cell_id: u32 },
    NonFiniteWeight { cell_id: u32 },
    SchemaMismatch { cell_id: u32 },
    ZeroTotalWeight,
}

impl StratFrame {
    pub fn total_weight(&self) -> f64 {
        self.cells.iter().map(|c| c.weight).sum()
    }

    pub fn cell(&self, cell_id: u32) -> Option<&StratCell> {
        self.cells.iter().find(|c| c.cell_id == cell_id)
    }

    fn key_of(&self, attrs: &Attributes) -> Result<Vec<String>, DomainError> {
        self.attribute_schema
            .iter()
            .map(|t| {
                attrs
                    .get(t)
                    .map(|v| normalize(v))
                    .ok_or_else(|| DomainError::SchemaMismatch(t.clone()))
            })
            .collect()
    }

    /// Distinct categories of one attribute, in first-appearance order.
    pub fn categories_of(&self, title: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for c in &self.cells {
            if let Some(v) = c.attributes.get(title) {
                if seen.insert(normalize(v)) {
                    out.push(v.clone());
                }
            }
        }
        out
    }
}

/// Finds the cell whose schema attributes equal `attrs` (normalized).
pub fn lookup_cell(frame: &StratFrame, attrs: &Attributes) -> Result<Option<u32>, DomainError> {
    let key = frame.key_of(attrs)?;
    for cell in &frame.cells {
        // cells missing a schema attribute can never match
        let Ok(ck) = frame.key_of(&cell.attributes) else {
            continue;
        };
        if ck == key {
            return Ok(Some(cell.cell_id));
        }
    }
    Ok(None)
}

/// Hash index over a frame for repeated lookups.
#[derive(Debug, Clone)]
pub struct CellIndex {
    schema: Vec<String>,
    by_key: HashMap<Vec<String>, usize>,
}

impl CellIndex {
    pub fn new(frame: &StratFrame) -> Self {
        let mut by_key = HashMap::with_capacity(frame.cells.len());
        for (i, cell) in frame.cells.iter().enumerate() {
            if let Ok(k) = frame.key_of(&cell.attributes) {
                by_key.entry(k).or_insert(i);
            }
        }
        CellIndex {
            schema: frame.attribute_schema.clone(),
            by_key,
        }
    }

    /// Position of the matching cell in `frame.cells`.
    pub fn position(&self, attrs: &Attributes) -> Result<Option<usize>, DomainError> {
        let key: Vec<String> = self
            .schema
            .iter()
            .map(|t| {
                attrs
                    .get(t)
                    .map(|v| normalize(v))
                    .ok_or_else(|| DomainError::SchemaMismatch(t.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(self.by_key.get(&key).copied())
    }
}

pub fn validate_frame(frame: &StratFrame) -> Vec<FrameViolation> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut keys: HashMap<Vec<String>, u32> = HashMap::new();
    for cell in &frame.cells {
        if !ids.insert(cell.cell_id) {
            out.push(FrameViolation::DuplicateCellId(cell.cell_id));
        }
        if !cell.weight.is_finite() {
            out.push(FrameViolation::NonFiniteWeight {
                cell_id: cell.cell_id,
            });
        } else if cell.weight < 0.0 {
            out.push(FrameViolation::NegativeWeight {
                cell_id: cell.cell_id,
            });
        }
        let schema_ok = cell.attributes.len() == frame.attribute_schema.len()
            && frame
                .attribute_schema
                .iter()
                .all(|t| cell.attributes.contains_key(t));
        if !schema_ok {
            out.push(FrameViolation::SchemaMismatch {
                cell_id: cell.cell_id,
            });
            continue;
        }
        let key = frame.key_of(&cell.attributes).expect("schema checked");
        if let Some(&first) = keys.get(&key) {
            out.push(FrameViolation::DuplicateCell {
                cell_id: cell.cell_id,
                duplicate_of: first,
            });
        } else {
            keys.insert(key, cell.cell_id);
        }
    }
    if !(frame.total_weight() > 0.0) {
        out.push(FrameViolation::ZeroTotalWeight);
    }
    out
}

/// Per-cell target counts and live fill counters.
///
/// Counters are atomics so concurrent workers can share one `QuotaState`;
/// `try_acquire` never lets a counter pass its quota.
#[derive(Debug)]
pub struct QuotaState {
    frame: StratFrame,
    index: CellIndex,
    quota: Vec<u32>,
    counter: Vec<AtomicU32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaFill {
    pub cell_id: u32,
    pub attributes: Attributes,
    pub quota: u32,
    pub filled: u32,
}

impl QuotaState {
    /// Quotas aligned with `frame.cells`.
    pub fn new(frame: StratFrame, quota: Vec<u32>) -> Result<Self, DomainError> {
        if quota.len() != frame.cells.len() {
            return Err(DomainError::InvalidFrame(format!(
                "{} quotas for {} cells",
                quota.len(),
                frame.cells.len()
            )));
        }
        let index = CellIndex::new(&frame);
        let counter = quota.iter().map(|_| AtomicU32::new(0)).collect();
        Ok(QuotaState {
            frame,
            index,
            quota,
            counter,
        })
    }

    pub fn from_map(frame: StratFrame, quota: &BTreeMap<u32, u32>) -> Result<Self, DomainError> {
        let q = frame
            .cells
            .iter()
            .map(|c| quota.get(&c.cell_id).copied().unwrap_or(0))
            .collect();
        QuotaState::new(frame, q)
    }

    pub fn frame(&self) -> &StratFrame {
        &self.frame
    }

    fn position_of(&self, cell_id: u32) -> Result<usize, DomainError> {
        self.frame
            .cells
            .iter()
            .position(|c| c.cell_id == cell_id)
            .ok_or(DomainError::UnknownCell(cell_id))
    }

    pub fn locate(&self, attrs: &Attributes) -> Result<Option<u32>, DomainError> {
        Ok(self
            .index
            .position(attrs)?
            .map(|p| self.frame.cells[p].cell_id))
    }

    pub fn quota(&self, cell_id: u32) -> Result<u32, DomainError> {
        Ok(self.quota[self.position_of(cell_id)?])
    }

    pub fn counter(&self, cell_id: u32) -> Result<u32, DomainError> {
        Ok(self.counter[self.position_of(cell_id)?].load(Ordering::SeqCst))
    }

    pub fn has_room(&self, cell_id: u32) -> Result<bool, DomainError> {
        let p = self.position_of(cell_id)?;
        Ok(self.counter[p].load(Ordering::SeqCst) < self.quota[p])
    }

    /// Atomically increments the counter if it is below quota.
    pub fn try_acquire(&self, cell_id: u32) -> Result<bool, DomainError> {
        let p = self.position_of(cell_id)?;
        let cap = self.quota[p];
        Ok(self.counter[p]
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
                (c < cap).then_some(c + 1)
            })
            .is_ok())
    }

    /// Forces a counter value, clamped to the quota. Used to restore saved state.
    pub fn set_counter(&self, cell_id: u32, value: u32) -> Result<(), DomainError> {
        let p = self.position_of(cell_id)?;
        self.counter[p].store(value.min(self.quota[p]), Ordering::SeqCst);
        Ok(())
    }

    pub fn target_total(&self) -> u64 {
        self.quota.iter().map(|&q| q as u64).sum()
    }

    pub fn filled_total(&self) -> u64 {
        self.counter
            .iter()
            .map(|c| c.load(Ordering::SeqCst) as u64)
            .sum()
    }

    pub fn fill_report(&self) -> Vec<QuotaFill> {
        self.frame
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| QuotaFill {
                cell_id: c.cell_id,
                attributes: c.attributes.clone(),
                quota: self.quota[i],
                filled: self.counter[i].load(Ordering::SeqCst),
            })
            .collect()
    }

    pub fn quotas(&self) -> BTreeMap<u32, u32> {
        self.frame
            .cells
            .iter()
            .zip(&self.quota)
            .map(|(c, &q)| (c.cell_id, q))
            .collect()
    }
}

/// Writes a frame as CSV: `cell_id`, one column per schema title, `weight`, `quota`.
pub fn write_frame_csv<W: Write>(
    frame: &StratFrame,
    quota: Option<&BTreeMap<u32, u32>>,
    writer: W,
) -> Result<(), DomainError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["cell_id".to_string()];
    header.extend(frame.attribute_schema.iter().cloned());
    header.push("weight".into());
    header.push("quota".into());
    w.write_record(&header)?;
    for cell in &frame.cells {
        let mut row = vec![cell.cell_id.to_string()];
        for t in &frame.attribute_schema {
            row.push(cell.attributes.get(t).cloned().unwrap_or_default());
        }
        row.push(format!("{}", cell.weight));
        row.push(
            quota
                .and_then(|q| q.get(&cell.cell_id))
                .map(|q| q.to_string())
                .unwrap_or_default(),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a frame CSV. The `quota` column may be absent or blank.
pub fn read_frame_csv<R: Read>(
    reader: R,
) -> Result<(StratFrame, Option<BTreeMap<u32, u32>>), DomainError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("cell_id").ok_or_else(|| DomainError::InvalidFrame("missing cell_id".into()))?;
    let w_col = col("weight").ok_or_else(|| DomainError::InvalidFrame("missing weight".into()))?;
    let q_col = col("quota");
    let schema: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !matches!(*h, "cell_id" | "weight" | "quota"))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut cells = Vec::new();
    let mut quotas = BTreeMap::new();
    let mut any_quota = false;
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let cell_id: u32 = field(id_col)
            .parse()
            .map_err(|_| DomainError::InvalidFrame(format!("bad cell_id `{}`", field(id_col))))?;
        let weight: f64 = field(w_col)
            .parse()
            .map_err(|_| DomainError::InvalidFrame(format!("bad weight `{}`", field(w_col))))?;
        let attributes = schema
            .iter()
            .map(|(i, t)| (t.clone(), field(*i)))
            .collect();
        if let Some(qc) = q_col {
            let q = field(qc);
            if !q.is_empty() {
                any_quota = true;
                let q: u32 = q
                    .parse()
                    .map_err(|_| DomainError::InvalidFrame(format!("bad quota `{q}`")))?;
                quotas.insert(cell_id, q);
            }
        }
        cells.push(StratCell {
            cell_id,
            attributes,
            weight,
        });
    }
    let frame = StratFrame {
        cells,
        attribute_schema: schema.into_iter().map(|(_, t)| t).collect(),
    };
    Ok((frame, any_quota.then_some(quotas)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn user(id: &str) -> UserRecord {
        UserRecord {
            user_id: id.into(),
            username: format!("{id}_handle"),
            display_name: "Someone".into(),
            description: "".into(),
            location_raw: Some("Austin, TX".into()),
            profile_image_ref: None,
            captured_at: Utc.with_ymd_and_hms(2024, 8, 20, 6, 0, 0).unwrap(),
            capture_query_kind: QueryKind::Political,
        }
    }

    fn tweet(id: &str, author: &str, day: u32) -> TweetRecord {
        TweetRecord {
            tweet_id: id.into(),
            author_id: author.into(),
            created_at: Utc.with_ymd_and_hms(2024, 8, day, 12, 0, 0).unwrap(),
            text: format!("tweet {id}"),
        }
    }

    /// Rows 1 and 2 of the example quota table (target sample size 1,500).
    pub(crate) fn quota_table_frame() -> StratFrame {
        let schema = ["SEX", "AGE", "INCOME", "RACE", "VOTE2020"];
        let rows = [
            (1, ["male", "65 or older", "up to 25k", "black", "D"]),
            (2, ["female", "25 to 34", "between 25k and 50k", "white", "D"]),
            (3, ["male", "35 to 44", "between 75k and 100k", "hispanic", "D"]),
        ];
        StratFrame {
            cells: rows
                .iter()
                .map(|(id, vals)| StratCell {
                    cell_id: *id,
                    attributes: schema
                        .iter()
                        .zip(vals)
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .collect(),
                    weight: 1.0,
                })
                .collect(),
            attribute_schema: schema.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn attrs(pairs: &[(&str, &str)]) -> Attributes {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn assemble_empty_timeline() {
        let m = assemble_mould(user("u"), vec![]).unwrap();
        assert!(m.tweets.is_empty());
        assert!(!m.augmented);
    }

    #[test]
    fn assemble_orders_and_dedups() {
        let m = assemble_mould(user("u"), vec![tweet("t1", "u", 1), tweet("t2", "u", 2)]).unwrap();
        let ids: Vec<_> = m.tweets.iter().map(|t| t.tweet_id.as_str()).collect();
        assert_eq!(ids, ["t2", "t1"]);
        let m = assemble_mould(user("u"), vec![tweet("t1", "u", 1), tweet("t1", "u", 1)]).unwrap();
        assert_eq!(m.tweets.len(), 1);
        let again = assemble_mould(m.user.clone(), m.tweets.clone()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn assemble_rejects_foreign_tweets() {
        let err = assemble_mould(user("u"), vec![tweet("t1", "v", 1)]).unwrap_err();
        assert!(matches!(err, DomainError::ForeignTweet { .. }));
    }

    #[test]
    fn lookup_quota_table_row() {
        let frame = quota_table_frame();
        let a = attrs(&[
            ("SEX", "Male"),
            ("AGE", "65 or older"),
            ("INCOME", " up to 25k"),
            ("RACE", "black"),
            ("VOTE2020", "d"),
        ]);
        assert_eq!(lookup_cell(&frame, &a).unwrap(), Some(1));
        let mut b = a.clone();
        b.insert("RACE".into(), "martian".into());
        assert_eq!(lookup_cell(&frame, &b).unwrap(), None);
        let mut c = a.clone();
        c.remove("VOTE2020");
        assert!(matches!(
            lookup_cell(&frame, &c),
            Err(DomainError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn validate_frame_cases() {
        let mut f = quota_table_frame();
        assert!(validate_frame(&f).is_empty());
        f.cells[1].attributes = f.cells[0].attributes.clone();
        assert!(validate_frame(&f)
            .iter()
            .any(|v| matches!(v, FrameViolation::DuplicateCell { .. })));
        let mut g = quota_table_frame();
        g.cells[0].weight = -1.0;
        assert_eq!(
            validate_frame(&g),
            vec![FrameViolation::NegativeWeight { cell_id: 1 }]
        );
    }

    #[test]
    fn feature_def_invariants() {
        assert!(FeatureDef::from_pairs("SEX", &[("S1", "male")], FeatureKind::Independent).is_err());
        assert!(FeatureDef::from_pairs(
            "SEX",
            &[("S1", "male"), ("S1", "female")],
            FeatureKind::Independent
        )
        .is_err());
        assert!(FeatureDef::from_pairs(" ", &[("a", "x"), ("b", "y")], FeatureKind::Independent).is_err());
        let json = r#"{"title":"X","options":[{"symbol":"a","category":"x"}],"kind":"Independent"}"#;
        assert!(serde_json::from_str::<FeatureDef>(json).is_err());
    }

    #[test]
    fn quota_counter_never_exceeds_quota() {
        let q = QuotaState::new(quota_table_frame(), vec![2, 3, 0]).unwrap();
        assert!(q.try_acquire(1).unwrap());
        assert!(q.try_acquire(1).unwrap());
        assert!(!q.try_acquire(1).unwrap());
        assert!(!q.try_acquire(3).unwrap());
        assert_eq!(q.counter(1).unwrap(), 2);
        assert!(q.try_acquire(99).is_err());
    }

    #[test]
    fn frame_csv_round_trip() {
        let f = quota_table_frame();
        let quotas: BTreeMap<u32, u32> = [(1, 2), (2, 3), (3, 2)].into_iter().collect();
        let mut buf = Vec::new();
        write_frame_csv(&f, Some(&quotas), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("cell_id,SEX,AGE,INCOME,RACE,VOTE2020,weight,quota\n"));
        let (g, q) = read_frame_csv(&buf[..]).unwrap();
        assert_eq!(g, f);
        assert_eq!(q.unwrap(), quotas);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn counter_bounded_under_random_streams(
                quotas in proptest::collection::vec(0u32..5, 3),
                stream in proptest::collection::vec(1u32..4, 0..40),
            ) {
                let q = QuotaState::new(quota_table_frame(), quotas.clone()).unwrap();
                for c in stream {
                    let _ = q.try_acquire(c).unwrap();
                    for (i, cell) in [1u32, 2, 3].iter().enumerate() {
                        prop_assert!(q.counter(*cell).unwrap() <= quotas[i]);
                    }
                }
            }

            #[test]
            fn lookup_is_partial_injection(a in 0usize..3, b in 0usize..3) {
                let f = quota_table_frame();
                let ca = lookup_cell(&f, &f.cells[a].attributes).unwrap();
                let cb = lookup_cell(&f, &f.cells[b].attributes).unwrap();
                prop_assert_eq!(ca == cb, a == b);
            }
        }
    }
}
