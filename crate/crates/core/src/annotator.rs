//! Text-completion backends.
//!
//! [`MockOracle`] answers entity, geography, feature-builder and extraction
//! prompts from facts embedded in the user's description
//! (`profile-facts: [KEY=value; ...]`), optionally passing them through
//! per-title confusion matrices.

use std::collections::BTreeMap;
use std::sync::LazyLock;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize, FeatureDef, FeatureValue};
use crate::prompts::{
    background_area, features_in_prompt, render_annotation, Harmonizer, BUILDER_INSTRUCTIONS, ENTITY_PROMPT,
    GEO_PROMPT,
};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AnnotatorError {
    #[error("rate limited")]
    RateLimited { retry_after_ms: u64 },
    #[error("request refused")]
    Refused,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("no truth for title `{0}`")]
    MissingTruth(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<AnnotatorError> },
}

pub trait AnnotatorBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, AnnotatorError>;

    fn model_name(&self) -> &str;

    fn temperature(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
        }
    }
}

/// Retries on rate limits and transport failures with exponential backoff.
pub fn retrying_complete(
    backend: &dyn AnnotatorBackend,
    prompt: &str,
    policy: &RetryPolicy,
) -> Result<String, AnnotatorError> {
    if policy.max_attempts == 0 {
        return Err(AnnotatorError::Invalid("max_attempts must be at least 1".into()));
    }
    let mut backoff = policy.initial_backoff_ms as f64;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let err = match backend.complete(prompt) {
            Ok(s) => return Ok(s),
            Err(e) => e,
        };
        let wait = match &err {
            AnnotatorError::RateLimited { retry_after_ms } => (*retry_after_ms as f64).max(backoff),
            AnnotatorError::Transport(_) => backoff,
            _ => return Err(err),
        };
        if attempt >= policy.max_attempts {
            return Err(AnnotatorError::Exhausted {
                attempts: attempt,
                last: Box::new(err),
            });
        }
        let wait = wait.min(policy.max_backoff_ms as f64);
        if wait > 0.0 {
            std::thread::sleep(Duration::from_millis(wait as u64));
        }
        backoff *= policy.multiplier;
    }
}

/// Spread of self-reported speculation: uniform on `mean ± spread`, clamped to 0..=100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeculationDist {
    pub mean: f64,
    pub spread: f64,
}

impl Default for SpeculationDist {
    fn default() -> Self {
        SpeculationDist { mean: 0.0, spread: 0.0 }
    }
}

impl SpeculationDist {
    fn draw(&self, rng: &mut impl Rng) -> u8 {
        let x = if self.spread > 0.0 {
            rng.random_range(self.mean - self.spread..=self.mean + self.spread)
        } else {
            self.mean
        };
        x.round().clamp(0.0, 100.0) as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleNoise {
    /// Category labels indexing the confusion matrix.
    pub categories: Vec<String>,
    /// `confusion[a][b]`: probability of reporting `b` when the truth is `a`.
    pub confusion: Vec<Vec<f64>>,
    #[serde(default)]
    pub speculation: SpeculationDist,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleConfig {
    #[serde(default)]
    pub titles: BTreeMap<String, TitleNoise>,
    /// Speculation for titles without an entry in `titles`.
    #[serde(default)]
    pub default_speculation: SpeculationDist,
    #[serde(default)]
    pub rejection_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Per-title mapping from area-specific choice sets back to fact values.
    #[serde(default)]
    pub harmonizers: BTreeMap<String, Harmonizer>,
    /// Standard choice sets the harmonizers map onto.
    #[serde(default)]
    pub standards: BTreeMap<String, FeatureDef>,
    /// Completed feature-builder replies keyed by area.
    #[serde(default)]
    pub builder_replies: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleConfigError {
    #[error("confusion matrix for `{0}` is not square over its categories")]
    Shape(String),
    #[error("confusion row {row} for `{title}` sums to {sum}")]
    RowSum { title: String, row: usize, sum: String },
    #[error("negative probability in `{0}`")]
    Negative(String),
    #[error("rejection rate {0} outside [0, 1]")]
    RejectionRate(String),
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleConfigError> {
        if !(0.0..=1.0).contains(&self.rejection_rate) {
            return Err(OracleConfigError::RejectionRate(self.rejection_rate.to_string()));
        }
        for (t, n) in &self.titles {
            let k = n.categories.len();
            if n.confusion.len() != k || n.confusion.iter().any(|r| r.len() != k) {
                return Err(OracleConfigError::Shape(t.clone()));
            }
            for (i, row) in n.confusion.iter().enumerate() {
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(OracleConfigError::Negative(t.clone()));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(OracleConfigError::RowSum {
                        title: t.clone(),
                        row: i,
                        sum: s.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// 64-bit FNV-1a, used to derive stable per-call seeds.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in *p {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn call_rng(seed: u64, user: &str, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(&[&seed.to_le_bytes(), user.as_bytes(), label.as_bytes()]))
}

/// Builds the profile-facts tag the oracle reads.
pub fn facts_tag(facts: &BTreeMap<String, String>) -> String {
    let body: Vec<String> = facts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("profile-facts: [{}]", body.join("; "))
}

pub fn parse_facts(text: &str) -> Option<BTreeMap<String, String>> {
    static RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"profile-facts: \[([^\]]*)\]").unwrap());
    let body = RE.captures(text)?.get(1)?.as_str().to_string();
    Some(
        body.split(';')
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect(),
    )
}

fn prompt_username(prompt: &str) -> String {
    static RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"username: ([^,\n]*),").unwrap());
    RE.captures(prompt)
        .map(|c| c[1].to_string())
        .unwrap_or_default()
}

/// Fact key for the entity answer (`P` or `O`; default `P`).
pub const FACT_ENTITY: &str = "ENTITY";
/// Fact key for the geography answer (state name, `USA`, or the rejection sentence).
pub const FACT_GEO: &str = "GEO";

/// Emits one answer block per title, drawing reported categories through the configured noise.
pub fn oracle_annotate(
    truth: &BTreeMap<String, String>,
    defs: &[FeatureDef],
    cfg: &OracleConfig,
    user_key: &str,
) -> Result<String, AnnotatorError> {
    let mut values = Vec::with_capacity(defs.len());
    for def in defs {
        let title = def.title();
        let true_cat = truth
            .get(title)
            .ok_or_else(|| AnnotatorError::MissingTruth(title.to_string()))?;
        let mut rng = call_rng(cfg.seed, user_key, title);
        let (reported, spec) = match cfg.titles.get(title) {
            Some(noise) => {
                let row = noise
                    .categories
                    .iter()
                    .position(|c| normalize(c) == normalize(true_cat));
                let reported = match row {
                    Some(a) => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = noise.categories.len() - 1;
                        for (b, p) in noise.confusion[a].iter().enumerate() {
                            acc += p;
                            if u < acc {
                                pick = b;
                                break;
                            }
                        }
                        noise.categories[pick].clone()
                    }
                    None => true_cat.clone(),
                };
                (reported, noise.speculation.draw(&mut rng))
            }
            None => (true_cat.clone(), cfg.default_speculation.draw(&mut rng)),
        };
        let option = def.option_by_category(&reported).or_else(|| {
            let h = cfg.harmonizers.get(title)?;
            let standard = cfg.standards.get(title)?;
            h.option_for(standard, def, &reported)
        });
        let option = option.ok_or_else(|| AnnotatorError::MissingTruth(format!("{title}={reported}")))?;
        values.push(FeatureValue {
            title: title.to_string(),
            symbol: option.symbol.clone(),
            category: option.category.clone(),
            explanation: format!("the profile states {title} directly"),
            speculation: spec,
        });
    }
    Ok(render_annotation(&values))
}

/// Deterministic stand-in for an LLM.
#[derive(Debug, Clone, Default)]
pub struct MockOracle {
    pub cfg: OracleConfig,
}

impl MockOracle {
    pub fn new(cfg: OracleConfig) -> Result<Self, OracleConfigError> {
        cfg.validate()?;
        Ok(MockOracle { cfg })
    }

    /// No noise, no refusals, zero speculation.
    pub fn perfect() -> Self {
        MockOracle::default()
    }
}

impl AnnotatorBackend for MockOracle {
    fn complete(&self, prompt: &str) -> Result<String, AnnotatorError> {
        if prompt.trim().is_empty() {
            return Err(AnnotatorError::Invalid("empty prompt".into()));
        }
        if prompt.contains(BUILDER_INSTRUCTIONS) {
            let area = background_area(prompt)
                .ok_or_else(|| AnnotatorError::Invalid("builder prompt without area".into()))?;
            return self
                .cfg
                .builder_replies
                .get(&area)
                .cloned()
                .ok_or(AnnotatorError::MissingTruth(format!("builder reply for {area}")));
        }
        let user = prompt_username(prompt);
        if self.cfg.rejection_rate > 0.0 {
            let mut rng = call_rng(self.cfg.seed, &user, "__refusal__");
            if rng.random::<f64>() < self.cfg.rejection_rate {
                return Err(AnnotatorError::Refused);
            }
        }
        let facts = parse_facts(prompt).unwrap_or_default();
        if prompt.ends_with(ENTITY_PROMPT) {
            return Ok(facts.get(FACT_ENTITY).cloned().unwrap_or_else(|| "P".into()));
        }
        if prompt.ends_with(GEO_PROMPT) {
            return facts
                .get(FACT_GEO)
                .cloned()
                .ok_or_else(|| AnnotatorError::MissingTruth(FACT_GEO.into()));
        }
        let defs = features_in_prompt(prompt).map_err(|e| AnnotatorError::Invalid(e.to_string()))?;
        oracle_annotate(&facts, &defs, &self.cfg, &user)
    }

    fn model_name(&self) -> &str {
        "mock-oracle"
    }
}

/// OpenAI-compatible chat-completions client.
///
/// Reads `SILICONPOLL_API_KEY`, `SILICONPOLL_BASE_URL` and `SILICONPOLL_MODEL`.
/// Without the `live` feature every call fails with a transport error.
#[derive(Debug, Clone)]
pub struct LiveAdapter {
    pub base_url: String,
    pub model: String,
    pub temperature: Option<f64>,
    api_key: String,
}

impl LiveAdapter {
    pub fn from_env(temperature: Option<f64>) -> Result<Self, AnnotatorError> {
        let get = |k: &str| std::env::var(k).map_err(|_| AnnotatorError::Invalid(format!("{k} is not set")));
        Ok(LiveAdapter {
            api_key: get("SILICONPOLL_API_KEY")?,
            base_url: get("SILICONPOLL_BASE_URL")?,
            model: get("SILICONPOLL_MODEL")?,
            temperature,
        })
    }

    #[cfg(feature = "live")]
    fn send(&self, prompt: &str) -> Result<String, AnnotatorError> {
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(t) = self.temperature {
            body["temperature"] = serde_json::json!(t);
        }
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let resp = reqwest::blocking::Client::new()
            .post(url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| AnnotatorError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let retry_after_ms = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse::<u64>().ok())
                .map(|s| s * 1000)
                .unwrap_or(1000);
            return Err(AnnotatorError::RateLimited { retry_after_ms });
        }
        if !status.is_success() {
            return Err(AnnotatorError::Transport(format!("http {status}")));
        }
        let v: serde_json::Value = resp.json().map_err(|e| AnnotatorError::Transport(e.to_string()))?;
        if v["choices"][0]["finish_reason"] == "content_filter" {
            return Err(AnnotatorError::Refused);
        }
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| AnnotatorError::Transport("reply without content".into()))
    }

    #[cfg(not(feature = "live"))]
    fn send(&self, _prompt: &str) -> Result<String, AnnotatorError> {
        let _ = &self.api_key;
        Err(AnnotatorError::Transport(
            "built without the `live` feature".into(),
        ))
    }
}

impl AnnotatorBackend for LiveAdapter {
    fn complete(&self, prompt: &str) -> Result<String, AnnotatorError> {
        if prompt.trim().is_empty() {
            return Err(AnnotatorError::Invalid("empty prompt".into()));
        }
        self.send(prompt)
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn temperature(&self) -> Option<f64> {
        self.temperature
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::FeatureKind;
    use crate::prompts::{parse_annotation, FEATURE_LIST_HEADER};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn defs() -> Vec<FeatureDef> {
        vec![
            FeatureDef::from_pairs("SEX", &[("S1", "male"), ("S2", "female")], FeatureKind::Independent).unwrap(),
            FeatureDef::from_pairs(
                "AGE",
                &[("A1", "18-29"), ("A2", "30-44"), ("A3", "45-64"), ("A4", "65+")],
                FeatureKind::Independent,
            )
            .unwrap(),
        ]
    }

    fn truth() -> BTreeMap<String, String> {
        [("SEX", "female"), ("AGE", "45-64")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn extraction_prompt(facts: &BTreeMap<String, String>) -> String {
        format!(
            "USER DATA\nA social media account has the following username, name, description and profile image: username: someone, name: S, description: {}, profile image: none.\nINSTRUCTIONS\n{}SEX:\nS1) male\nS2) female\n\nAGE:\nA1) 18-29\nA2) 30-44\nA3) 45-64\nA4) 65+\n",
            facts_tag(facts),
            FEATURE_LIST_HEADER
        )
    }

    #[test]
    fn identity_oracle_reproduces_truth() {
        let oracle = MockOracle::perfect();
        let out = oracle.complete(&extraction_prompt(&truth())).unwrap();
        let parsed = parse_annotation(&out, &defs()).unwrap();
        assert!(parsed.warnings.is_empty());
        for v in parsed.entries {
            assert_eq!(&v.category, truth().get(&v.title).unwrap());
            assert_eq!(v.speculation, 0);
        }
        assert!(matches!(oracle.complete("  "), Err(AnnotatorError::Invalid(_))));
    }

    #[test]
    fn full_rejection_refuses() {
        let oracle = MockOracle::new(OracleConfig {
            rejection_rate: 1.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(
            oracle.complete(&extraction_prompt(&truth())),
            Err(AnnotatorError::Refused)
        );
    }

    #[test]
    fn point_mass_speculation() {
        let cfg = OracleConfig {
            default_speculation: SpeculationDist {
                mean: 90.0,
                spread: 0.0,
            },
            ..Default::default()
        };
        let out = oracle_annotate(&truth(), &defs(), &cfg, "u").unwrap();
        assert_eq!(out.matches("**speculation: 90**").count(), 2);
        assert!(matches!(
            oracle_annotate(&BTreeMap::new(), &defs(), &cfg, "u"),
            Err(AnnotatorError::MissingTruth(_))
        ));
    }

    #[test]
    fn confusion_frequency_matches_row() {
        let cfg = OracleConfig {
            titles: [(
                "SEX".to_string(),
                TitleNoise {
                    categories: vec!["male".into(), "female".into()],
                    confusion: vec![vec![0.5, 0.5], vec![0.0, 1.0]],
                    speculation: SpeculationDist::default(),
                },
            )]
            .into_iter()
            .collect(),
            seed: 3,
            ..Default::default()
        };
        let sex = &defs()[..1];
        let t: BTreeMap<String, String> = [("SEX".to_string(), "male".to_string())].into();
        let n = 10_000;
        let mut female = 0;
        for i in 0..n {
            let out = oracle_annotate(&t, sex, &cfg, &format!("user{i}")).unwrap();
            if parse_annotation(&out, sex).unwrap().entries[0].category == "female" {
                female += 1;
            }
        }
        let f = female as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = OracleConfig::default();
        cfg.titles.insert(
            "SEX".into(),
            TitleNoise {
                categories: vec!["male".into(), "female".into()],
                confusion: vec![vec![0.5, 0.6], vec![0.0, 1.0]],
                speculation: SpeculationDist::default(),
            },
        );
        assert!(matches!(cfg.validate(), Err(OracleConfigError::RowSum { .. })));
        let cfg = OracleConfig {
            rejection_rate: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn entity_and_geo_answers() {
        let mut f = truth();
        f.insert(FACT_ENTITY.into(), "O".into());
        f.insert(FACT_GEO.into(), "Texas".into());
        let mould = format!("USER DATA\nusername: x, description: {}\nINSTRUCTIONS\n", facts_tag(&f));
        let oracle = MockOracle::perfect();
        assert_eq!(oracle.complete(&format!("{mould}{ENTITY_PROMPT}")).unwrap(), "O");
        assert_eq!(oracle.complete(&format!("{mould}{GEO_PROMPT}")).unwrap(), "Texas");
    }

    struct Flaky {
        fail: u32,
        err: AnnotatorError,
        calls: AtomicU32,
    }

    impl AnnotatorBackend for Flaky {
        fn complete(&self, _: &str) -> Result<String, AnnotatorError> {
            let c = self.calls.fetch_add(1, Ordering::SeqCst);
            if c < self.fail {
                Err(self.err.clone())
            } else {
                Ok("ok".into())
            }
        }
        fn model_name(&self) -> &str {
            "flaky"
        }
    }

    fn quick(max: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts: max,
            initial_backoff_ms: 0,
            multiplier: 2.0,
            max_backoff_ms: 0,
        }
    }

    #[test]
    fn retry_semantics() {
        let b = Flaky {
            fail: 2,
            err: AnnotatorError::Transport("x".into()),
            calls: AtomicU32::new(0),
        };
        assert_eq!(retrying_complete(&b, "p", &quick(3)).unwrap(), "ok");
        let b = Flaky {
            fail: 5,
            err: AnnotatorError::Refused,
            calls: AtomicU32::new(0),
        };
        assert_eq!(retrying_complete(&b, "p", &quick(3)), Err(AnnotatorError::Refused));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
        let b = Flaky {
            fail: 99,
            err: AnnotatorError::Transport("x".into()),
            calls: AtomicU32::new(0),
        };
        assert!(matches!(
            retrying_complete(&b, "p", &quick(2)),
            Err(AnnotatorError::Exhausted { attempts: 2, .. })
        ));
        let b = Flaky {
            fail: 1,
            err: AnnotatorError::RateLimited { retry_after_ms: 0 },
            calls: AtomicU32::new(0),
        };
        assert_eq!(retrying_complete(&b, "p", &quick(2)).unwrap(), "ok");
    }

    #[test]
    fn live_adapter_without_feature_is_transport_error() {
        let a = LiveAdapter {
            base_url: "http://localhost".into(),
            model: "m".into(),
            temperature: None,
            api_key: "k".into(),
        };
        if cfg!(not(feature = "live")) {
            assert!(matches!(a.complete("hi"), Err(AnnotatorError::Transport(_))));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn oracle_output_always_parses(
                p in 0.0f64..1.0,
                q in 0.0f64..1.0,
                mean in 0.0f64..100.0,
                spread in 0.0f64..60.0,
                seed in any::<u64>(),
                female in any::<bool>(),
            ) {
                let cfg = OracleConfig {
                    titles: [(
                        "SEX".to_string(),
                        TitleNoise {
                            categories: vec!["male".into(), "female".into()],
                            confusion: vec![vec![p, 1.0 - p], vec![q, 1.0 - q]],
                            speculation: SpeculationDist { mean, spread },
                        },
                    )]
                    .into_iter()
                    .collect(),
                    seed,
                    ..Default::default()
                };
                let mut t = truth();
                if !female { t.insert("SEX".into(), "male".into()); }
                let a = oracle_annotate(&t, &defs(), &cfg, "u").unwrap();
                let parsed = parse_annotation(&a, &defs()).unwrap();
                prop_assert!(parsed.warnings.is_empty());
                prop_assert_eq!(a, oracle_annotate(&t, &defs(), &cfg, "u").unwrap());
            }
        }
    }
}
