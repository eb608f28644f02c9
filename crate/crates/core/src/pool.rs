//! Query planning and subject-pool acquisition.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{merge_tweets, DomainError, QueryKind, TweetRecord, UserRecord};

/// Query text used in fixture files for timeline records.
pub const TIMELINE_QUERY: &str = "__timeline__";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    /// Maximum number of tweets to fetch.
    pub weight: u32,
    pub kind: QueryKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub queries: Vec<SearchQuery>,
}

impl QueryPlan {
    pub fn total_weight(&self) -> u64 {
        self.queries.iter().map(|q| q.weight as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub user: UserRecord,
    pub tweets: Vec<TweetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPool {
    pub entries: Vec<PoolEntry>,
    pub pool_date: NaiveDate,
    pub plan: QueryPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ClientError {
    #[error("rate limited, retry after {retry_after_secs}s")]
    RateLimited { retry_after_secs: u64 },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("client failure: {0}")]
    Failure(String),
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("at least one trending topic is required")]
    EmptyTopics,
    #[error("political search terms are empty")]
    EmptyTerms,
    #[error("omega {omega} spread over {topics} topics leaves zero tweets per topic")]
    WeightTooSmall { omega: u32, topics: usize },
    /// `query` is 1-based. `partial` holds users gathered before the failure.
    #[error("query {query} failed: {source}")]
    Client {
        query: usize,
        source: ClientError,
        partial: Box<SubjectPool>,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Access to a social-media platform. Implementations must be callable from several threads.
pub trait PlatformClient: Send + Sync {
    /// Recent tweets matching the query, each paired with its author. At most `query.weight`.
    fn search_recent(&self, query: &SearchQuery) -> Result<Vec<(UserRecord, TweetRecord)>, ClientError>;

    /// The user's `m` most recent tweets, newest first.
    fn user_timeline(&self, user_id: &str, m: u32) -> Result<Vec<TweetRecord>, ClientError>;
}

/// Political query with weight `omega` followed by one query per topic with weight `floor(omega / L)`.
pub fn build_query_plan(
    political_terms: &str,
    trending_topics: &[String],
    omega: u32,
) -> Result<QueryPlan, PoolError> {
    if political_terms.trim().is_empty() {
        return Err(PoolError::EmptyTerms);
    }
    let l = trending_topics.len();
    if l == 0 {
        return Err(PoolError::EmptyTopics);
    }
    let per_topic = omega / l as u32;
    if per_topic == 0 {
        return Err(PoolError::WeightTooSmall { omega, topics: l });
    }
    let mut queries = vec![SearchQuery {
        text: political_terms.to_string(),
        weight: omega,
        kind: QueryKind::Political,
    }];
    for t in trending_topics {
        if t.trim().is_empty() {
            return Err(PoolError::EmptyTopics);
        }
        queries.push(SearchQuery {
            text: t.clone(),
            weight: per_topic,
            kind: QueryKind::Trending(t.clone()),
        });
    }
    Ok(QueryPlan { queries })
}

/// Runs each query in order and merges users by id.
///
/// A user seen by several queries keeps the profile and query kind of the first capture;
/// tweets are unioned.
pub fn run_pool(
    plan: &QueryPlan,
    client: &dyn PlatformClient,
    pool_date: NaiveDate,
) -> Result<SubjectPool, PoolError> {
    let mut entries: Vec<PoolEntry> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (k, query) in plan.queries.iter().enumerate() {
        let hits = match client.search_recent(query) {
            Ok(h) => h,
            Err(source) => {
                return Err(PoolError::Client {
                    query: k + 1,
                    source,
                    partial: Box::new(SubjectPool {
                        entries,
                        pool_date,
                        plan: plan.clone(),
                    }),
                })
            }
        };
        for (mut user, tweet) in hits.into_iter().take(query.weight as usize) {
            match index.get(&user.user_id) {
                Some(&i) => {
                    let e = &mut entries[i];
                    let existing = std::mem::take(&mut e.tweets);
                    e.tweets = merge_tweets(&e.user.user_id, existing, vec![tweet])?;
                }
                None => {
                    user.capture_query_kind = query.kind.clone();
                    let tweets = merge_tweets(&user.user_id, Vec::new(), vec![tweet])?;
                    index.insert(user.user_id.clone(), entries.len());
                    entries.push(PoolEntry { user, tweets });
                }
            }
        }
    }
    Ok(SubjectPool {
        entries,
        pool_date,
        plan: plan.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    user: UserRecord,
    tweets: Vec<TweetRecord>,
    pool_date: NaiveDate,
}

/// One JSON object per user. The plan is not part of the line format.
pub fn write_pool_jsonl<W: Write>(pool: &SubjectPool, mut w: W) -> Result<(), PoolError> {
    for e in &pool.entries {
        let line = PoolLine {
            user: e.user.clone(),
            tweets: e.tweets.clone(),
            pool_date: pool.pool_date,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a pool file. `pool_date` is used when the file is empty.
pub fn read_pool_jsonl<R: BufRead>(
    r: R,
    plan: QueryPlan,
    pool_date: NaiveDate,
) -> Result<SubjectPool, PoolError> {
    let mut entries = Vec::new();
    let mut date = None;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PoolLine = serde_json::from_str(&line)?;
        date.get_or_insert(p.pool_date);
        entries.push(PoolEntry {
            user: p.user,
            tweets: p.tweets,
        });
    }
    Ok(SubjectPool {
        entries,
        pool_date: date.unwrap_or(pool_date),
        plan,
    })
}

/// A fixture record: the pool line layout plus the query it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLine {
    pub query: String,
    pub user: UserRecord,
    pub tweets: Vec<TweetRecord>,
}

pub fn write_fixture_jsonl<W: Write>(lines: &[FixtureLine], mut w: W) -> Result<(), PoolError> {
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Replays recorded search results and timelines.
///
/// Search results for a query are returned in file order. Timeline lines use
/// [`TIMELINE_QUERY`] and are keyed by user id.
#[derive(Debug, Default)]
pub struct MockClient {
    searches: BTreeMap<String, Vec<(UserRecord, TweetRecord)>>,
    timelines: BTreeMap<String, Vec<TweetRecord>>,
    failures: BTreeMap<String, ClientError>,
    calls: Mutex<Vec<String>>,
}

impl MockClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_lines(lines: impl IntoIterator<Item = FixtureLine>) -> Result<Self, PoolError> {
        let mut c = MockClient::new();
        for l in lines {
            if l.query == TIMELINE_QUERY {
                c.add_timeline(&l.user.user_id, l.tweets)?;
            } else {
                for t in l.tweets {
                    c.add_search_hit(&l.query, l.user.clone(), t);
                }
            }
        }
        Ok(c)
    }

    pub fn from_jsonl<R: BufRead>(r: R) -> Result<Self, PoolError> {
        let mut lines = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push(serde_json::from_str::<FixtureLine>(&line)?);
            }
        }
        MockClient::from_lines(lines)
    }

    pub fn add_search_hit(&mut self, query: &str, user: UserRecord, tweet: TweetRecord) {
        self.searches
            .entry(query.to_string())
            .or_default()
            .push((user, tweet));
    }

    pub fn add_timeline(&mut self, user_id: &str, tweets: Vec<TweetRecord>) -> Result<(), PoolError> {
        let existing = self.timelines.remove(user_id).unwrap_or_default();
        let merged = merge_tweets(user_id, existing, tweets)?;
        self.timelines.insert(user_id.to_string(), merged);
        Ok(())
    }

    /// Makes `search_recent` fail for this query text.
    pub fn fail_query(&mut self, query: &str, err: ClientError) {
        self.failures.insert(query.to_string(), err);
    }

    /// Query texts and timeline requests in call order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    fn log(&self, s: String) {
        self.calls.lock().expect("call log poisoned").push(s);
    }
}

impl PlatformClient for MockClient {
    fn search_recent(&self, query: &SearchQuery) -> Result<Vec<(UserRecord, TweetRecord)>, ClientError> {
        self.log(format!("search:{}", query.text));
        if let Some(e) = self.failures.get(&query.text) {
            return Err(e.clone());
        }
        Ok(self
            .searches
            .get(&query.text)
            .map(|v| v.iter().take(query.weight as usize).cloned().collect())
            .unwrap_or_default())
    }

    fn user_timeline(&self, user_id: &str, m: u32) -> Result<Vec<TweetRecord>, ClientError> {
        self.log(format!("timeline:{user_id}"));
        if m == 0 {
            return Err(ClientError::InvalidRequest("m must be positive".into()));
        }
        let t = self
            .timelines
            .get(user_id)
            .ok_or_else(|| ClientError::NotFound(user_id.to_string()))?;
        Ok(t.iter().take(m as usize).cloned().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn user(id: &str) -> UserRecord {
        UserRecord {
            user_id: id.into(),
            username: id.into(),
            display_name: id.into(),
            description: String::new(),
            location_raw: None,
            profile_image_ref: None,
            captured_at: Utc.with_ymd_and_hms(2024, 9, 1, 0, 0, 0).unwrap(),
            capture_query_kind: QueryKind::Political,
        }
    }

    fn tweet(id: &str, author: &str, minute: u32) -> TweetRecord {
        TweetRecord {
            tweet_id: id.into(),
            author_id: author.into(),
            created_at: Utc.with_ymd_and_hms(2024, 9, 1, 10, minute, 0).unwrap(),
            text: "hello".into(),
        }
    }

    fn topics(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("topic{i}")).collect()
    }

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 9, 1).unwrap()
    }

    #[test]
    fn plan_weights() {
        let p = build_query_plan("terms", &topics(5), 100).unwrap();
        let w: Vec<u32> = p.queries.iter().map(|q| q.weight).collect();
        assert_eq!(w, [100, 20, 20, 20, 20, 20]);
        assert_eq!(p.queries[0].text, "terms");
        let p = build_query_plan("terms", &topics(1), 7).unwrap();
        assert_eq!(p.queries.iter().map(|q| q.weight).collect::<Vec<_>>(), [7, 7]);
        assert!(matches!(
            build_query_plan("terms", &topics(8), 4),
            Err(PoolError::WeightTooSmall { .. })
        ));
        assert!(matches!(
            build_query_plan("terms", &[], 4),
            Err(PoolError::EmptyTopics)
        ));
    }

    fn two_query_client(shared: bool) -> (QueryPlan, MockClient) {
        let plan = build_query_plan("politics", &topics(1), 10).unwrap();
        let mut c = MockClient::new();
        for (i, u) in ["a", "b", "c"].iter().enumerate() {
            c.add_search_hit("politics", user(u), tweet(&format!("p{i}"), u, i as u32));
        }
        let second: &[&str] = if shared { &["a"] } else { &["d", "e"] };
        for (i, u) in second.iter().enumerate() {
            c.add_search_hit("topic0", user(u), tweet(&format!("t{i}"), u, 30 + i as u32));
        }
        (plan, c)
    }

    #[test]
    fn pool_union_and_merge() {
        let (plan, c) = two_query_client(false);
        let pool = run_pool(&plan, &c, date()).unwrap();
        assert_eq!(pool.entries.len(), 5);
        let (plan, c) = two_query_client(true);
        let pool = run_pool(&plan, &c, date()).unwrap();
        assert_eq!(pool.entries.len(), 3);
        let a = &pool.entries[0];
        assert_eq!(a.tweets.len(), 2);
        assert_eq!(a.user.capture_query_kind, QueryKind::Political);
    }

    #[test]
    fn pool_error_keeps_partial() {
        let (plan, mut c) = two_query_client(false);
        c.fail_query("topic0", ClientError::Failure("boom".into()));
        match run_pool(&plan, &c, date()) {
            Err(PoolError::Client { query, partial, .. }) => {
                assert_eq!(query, 2);
                assert_eq!(partial.entries.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn timeline_contract() {
        let mut c = MockClient::new();
        let tweets: Vec<_> = (0..50).map(|i| tweet(&format!("x{i}"), "u", i)).collect();
        c.add_timeline("u", tweets).unwrap();
        let t = c.user_timeline("u", 20).unwrap();
        assert_eq!(t.len(), 20);
        assert_eq!(t[0].tweet_id, "x49");
        assert!(t.windows(2).all(|w| w[0].created_at >= w[1].created_at));
        assert!(matches!(c.user_timeline("u", 0), Err(ClientError::InvalidRequest(_))));
        assert!(matches!(c.user_timeline("zz", 5), Err(ClientError::NotFound(_))));
    }

    #[test]
    fn pool_jsonl_round_trip_is_byte_identical() {
        let (plan, c) = two_query_client(true);
        let pool = run_pool(&plan, &c, date()).unwrap();
        let mut a = Vec::new();
        write_pool_jsonl(&pool, &mut a).unwrap();
        let back = read_pool_jsonl(&a[..], plan.clone(), date()).unwrap();
        assert_eq!(back, pool);
        let pool2 = run_pool(&plan, &c, date()).unwrap();
        let mut b = Vec::new();
        write_pool_jsonl(&pool2, &mut b).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fetched_tweets_bounded_by_plan(
                omega in 1u32..40,
                n_topics in 1usize..4,
                hits in proptest::collection::vec((0usize..6, 0usize..5), 0..120),
            ) {
                prop_assume!(omega as usize >= n_topics);
                let plan = build_query_plan("pol", &topics(n_topics), omega).unwrap();
                let mut c = MockClient::new();
                for (i, (u, q)) in hits.iter().enumerate() {
                    let q = *q % plan.queries.len();
                    let uid = format!("u{u}");
                    c.add_search_hit(&plan.queries[q].text, user(&uid), tweet(&format!("t{i}"), &uid, (i % 60) as u32));
                }
                let pool = run_pool(&plan, &c, date()).unwrap();
                let total: usize = pool.entries.iter().map(|e| e.tweets.len()).sum();
                prop_assert!(total as u64 <= plan.total_weight());
                let mut ids: Vec<_> = pool.entries.iter().map(|e| e.user.user_id.clone()).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), pool.entries.len());
                prop_assert!(pool.entries.iter().all(|e| !e.tweets.is_empty()));
            }
        }
    }
}
