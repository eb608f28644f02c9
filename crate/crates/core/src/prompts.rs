//! Prompt assembly, structured-output parsing and vote-choice ensembling.
//!
//! A prompt is `background ∥ mould ∥ instructions`. Instructions list feature
//! blocks (`TITLE:` followed by `SYMBOL) category` lines) and demand a starred
//! answer block per title, which [`parse_annotation`] reads back.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

use crate::annotator::{AnnotatorBackend, AnnotatorError};
use crate::domain::{normalize, FeatureDef, FeatureKind, FeatureOption, FeatureValue, Mould, SiliconResponse};

pub const ENTITY_PROMPT: &str = "Is this the account of a real-life existing Person, or of another kind of entity ? \nRespond either with \"P\" for Person or \"O\" for Other.";

pub const GEO_PROMPT: &str = "Which state of the USA do they live in?\n\
If they do not specify a state, but are still from the United States, write \"USA\".\n\
If they are not from a state in the USA, write \"Not from a state in the USA\".\n\
Write out just the full name of the state.\n\
If they are from the District of Columbia, also known as Washington D.C., write \"District of Columbia\".";

pub const SPECULATION_MODULE: &str = "
For each selected symbol / category, please note the level of Speculation involved in this selection.
Present the Speculation level for each selection on a scale from 0 (not speculative at all, every single element of the user data was useful in the selection) to 100 (fully speculative, there is no information related to this title in the user data).
Speculation levels should be a direct measure of the amount of useful information available in the user data.
Speculation levels pertain only to the information available in the user data -- namely the username, name, description, location, profile picture and tweets from this user -- and should not be affected by additional information available to you from any other source.
To ensure consistency, use the following guidelines to determine speculation levels:

0-20 (Low speculation): The user data provides clear and direct information relevant to the title. (e.g., explicit mention in the profile or tweets)
21-40 (Moderate-low speculation): The user data provides indirect but strong indicators relevant to the title. (e.g., context from multiple sources within the profile or tweets)
41-60 (Moderate speculation): The user data provides some hints or partial information relevant to the title. (e.g., inferred from user interests or indirect references)
61-80 (Moderate-high speculation): The user data provides limited and weak indicators relevant to the title. (e.g., very subtle hints or minimal context)
81-100 (High speculation): The user data provides no or almost no information relevant to the title. (e.g., assumptions based on very general information)

For each selected category, please explain at length what features of the data contributed to your choice and your speculation level.
";

const INSTRUCTIONS_HEAD: &str = "I will show you a number of categories to which this user may belong to.
The categories are preceded by a title (e.g. \"AGE:\" or \"SEX:\" etc.) and a symbol (e.g. \"A1\", \"A2\" or \"E\" etc.).
Please select, for each title, the most likely category to which this user belongs to.

In your answer present, for each title, the selected symbol. Write out in full the category associated with the selected symbol. The chosen symbol / category must be the most likely to accurately represent this user. You must only select one symbol / category per title. A title, symbol and category cannot appear more than once in your answer.
";

const FORMAT_HEAD: &str = "Preserve a strictly structured answer to ease parsing of the text. Format your output as follows (this is just an example, I do not care about this specific title or symbol / category):

**title: AGE**
**explanation: ...**
**symbol: A1)**
**category: 18-25**
";

const FORMAT_SPECULATION: &str = "**speculation: 90**\n";

/// Marks the start of the feature listing in an extraction prompt.
pub const FEATURE_LIST_HEADER: &str =
    "YOU MUST GIVE AN ANSWER FOR EVERY TITLE !\nBelow is the list of categories to which this user may belong to: \n";

/// Marks a feature-builder prompt.
pub const BUILDER_INSTRUCTIONS: &str = "Based on what you know of the candidates in the 2020 Presidential election held in this state on November 3, 2020, please complete the following set of questions and their options.

If there are no candidates for the given party, remove the option related to the given party entirely -- do not present that party's option at all.
If there is more than one candidate for a single party, write out each option in two separate lines, and assign a different symbol for the identifier to each.

Below is the set of questions and options for you to complete - your job is to replace the instances wrapped in <...> with the correct knowledge for this state.
Do not produce any other text beyond the completed set of questions.
";

/// Stored explanations are cut to this many characters.
pub const MAX_EXPLANATION_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum PromptError {
    #[error("no features to prompt for")]
    EmptyFeatures,
    #[error("answer is missing title `{0}`")]
    MissingTitle(String),
    #[error("title `{0}` answered more than once")]
    DuplicateTitle(String),
    #[error("unknown symbol `{symbol}` for title `{title}`")]
    UnknownSymbol { title: String, symbol: String },
    #[error("answer for `{title}` lacks a usable symbol or category")]
    MissingChoice { title: String },
    #[error("placeholder `{0}` left in builder output")]
    PlaceholderLeak(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("speculation score {0} outside 0..=100")]
    OutOfRange(i64),
    #[error("strategy needs state-conditioned features")]
    MissingStateFeatures,
    #[error("strategy needs background data")]
    MissingBackground,
    #[error("annotator: {0}")]
    Annotator(#[from] AnnotatorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseWarning {
    SymbolCategoryDisagreement {
        title: String,
        symbol: String,
        reported: String,
        expected: String,
    },
    SpeculationClamped { title: String, raw: i64 },
    MissingSpeculation { title: String },
    UnexpectedTitle(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnnotation {
    pub entries: Vec<FeatureValue>,
    pub warnings: Vec<ParseWarning>,
}

impl ParsedAnnotation {
    pub fn get(&self, title: &str) -> Option<&FeatureValue> {
        self.entries.iter().find(|e| e.title == title)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSections {
    pub background: String,
    pub mould_text: String,
    pub instructions: String,
}

impl PromptSections {
    pub fn assemble(&self) -> String {
        let mut out = String::new();
        if !self.background.is_empty() {
            out.push_str("BACKGROUND\n");
            out.push_str(&self.background);
            out.push_str("\n\n");
        }
        out.push_str("USER DATA\n");
        out.push_str(&self.mould_text);
        out.push_str("\nINSTRUCTIONS\n");
        out.push_str(&self.instructions);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub randomize_order: bool,
    pub include_speculation: bool,
    pub seed: u64,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            randomize_order: false,
            include_speculation: true,
            seed: 0,
        }
    }
}

/// Area-level election results shown as background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectionBackground {
    pub area: String,
    pub rows: Vec<BackgroundRow>,
    /// Share of the voting-age population that did not vote, in percent.
    pub nonvoter_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRow {
    pub candidate: String,
    pub party: String,
    /// Percent of the voting-age population.
    pub share: f64,
}

impl ElectionBackground {
    pub fn render(&self) -> String {
        let mut s = format!(
            "The results of the 2020 US Presidential election in state -- {} -- are reported below.\n\n",
            self.area
        );
        s.push_str("Candidate | Party | Share\n");
        for r in &self.rows {
            s.push_str(&format!("{} | {} | {}%\n", r.candidate, r.party, r.share));
        }
        s.push_str(&format!(
            "VOTING AGE PEOPLE WHO DID NOT VOTE |  | {}%\n\n",
            self.nonvoter_share
        ));
        s.push_str("In the above, note that election results are stated as % of the voting age population in the state.");
        s
    }
}

/// Area named in a rendered background, if any.
pub fn background_area(text: &str) -> Option<String> {
    static RE: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"election in state -- (.+?) -- are reported").unwrap());
    RE.captures(text).map(|c| c[1].to_string())
}

pub fn render_mould(m: &Mould) -> String {
    let u = &m.user;
    let mut s = format!(
        "A social media account has the following username, name, description and profile image: username: {}, name: {}, description: {}, profile image: {}. Furthermore, they self-report their location in their bio as follows: {}\n\n",
        u.username,
        u.display_name,
        u.description,
        u.profile_image_ref.as_deref().unwrap_or("none"),
        u.location_raw.as_deref().unwrap_or("")
    );
    s.push_str("Finally, they have written the following tweet(s); date and time of tweet (date expressed as Y-m-d): \n");
    for t in &m.tweets {
        s.push_str(&format!(
            "created at: {}\ntext: {}\n",
            t.created_at.format("%Y-%m-%d %H:%M:%S"),
            t.text
        ));
    }
    s
}

pub fn render_feature_block(def: &FeatureDef) -> String {
    let mut s = format!("{}:\n", def.title());
    for o in def.options() {
        s.push_str(&format!("{}) {}\n", o.symbol, o.category));
    }
    s
}

fn render_instructions(features: &[&FeatureDef], include_speculation: bool) -> String {
    let mut s = String::from(INSTRUCTIONS_HEAD);
    if include_speculation {
        s.push_str(SPECULATION_MODULE);
    }
    s.push('\n');
    s.push_str(FORMAT_HEAD);
    if include_speculation {
        s.push_str(FORMAT_SPECULATION);
    }
    s.push('\n');
    s.push_str(FEATURE_LIST_HEADER);
    let blocks: Vec<String> = features.iter().map(|d| render_feature_block(d)).collect();
    s.push_str(&blocks.join("\n"));
    s
}

/// Independent features first, then dependent ones; each group optionally shuffled under `seed`.
pub fn order_features<'a>(features: &'a [FeatureDef], randomize: bool, seed: u64) -> Vec<&'a FeatureDef> {
    let mut ind: Vec<&FeatureDef> = features
        .iter()
        .filter(|f| f.kind() == FeatureKind::Independent)
        .collect();
    let mut dep: Vec<&FeatureDef> = features
        .iter()
        .filter(|f| f.kind() == FeatureKind::Dependent)
        .collect();
    if randomize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ind.shuffle(&mut rng);
        dep.shuffle(&mut rng);
    }
    ind.extend(dep);
    ind
}

pub fn prompt_sections(
    background: &str,
    mould: &Mould,
    features: &[FeatureDef],
    opts: &PromptOptions,
) -> Result<PromptSections, PromptError> {
    if features.is_empty() {
        return Err(PromptError::EmptyFeatures);
    }
    let ordered = order_features(features, opts.randomize_order, opts.seed);
    Ok(PromptSections {
        background: background.to_string(),
        mould_text: render_mould(mould),
        instructions: render_instructions(&ordered, opts.include_speculation),
    })
}

pub fn build_prompt(
    background: &str,
    mould: &Mould,
    features: &[FeatureDef],
    opts: &PromptOptions,
) -> Result<String, PromptError> {
    Ok(prompt_sections(background, mould, features, opts)?.assemble())
}

pub fn entity_prompt(mould: &Mould) -> String {
    format!("USER DATA\n{}\nINSTRUCTIONS\n{}", render_mould(mould), ENTITY_PROMPT)
}

pub fn geo_prompt(mould: &Mould) -> String {
    format!("USER DATA\n{}\nINSTRUCTIONS\n{}", render_mould(mould), GEO_PROMPT)
}

pub fn builder_prompt(background: &str, template: &str) -> String {
    let mut s = String::new();
    if !background.is_empty() {
        s.push_str("BACKGROUND\n");
        s.push_str(background);
        s.push_str("\n\n");
    }
    s.push_str("INSTRUCTIONS\n");
    s.push_str(BUILDER_INSTRUCTIONS);
    s.push('\n');
    s.push_str(template);
    s
}

static OPTION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*([A-Za-z][A-Za-z0-9_]*)\)\s*(.*?)\s*$").unwrap());
static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^<>\n]*>").unwrap());

/// Parses `TITLE:` / `SYM) category` listings into feature definitions.
pub fn parse_feature_listing(text: &str, kind: FeatureKind) -> Result<Vec<FeatureDef>, PromptError> {
    let mut out = Vec::new();
    let mut current: Option<(String, Vec<FeatureOption>)> = None;
    let finish = |cur: Option<(String, Vec<FeatureOption>)>, out: &mut Vec<FeatureDef>| {
        if let Some((t, opts)) = cur {
            let def = FeatureDef::new(t, opts, kind).map_err(|e| PromptError::Parse(e.to_string()))?;
            out.push(def);
        }
        Ok::<(), PromptError>(())
    };
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(c) = OPTION_LINE.captures(trimmed) {
            let Some((_, opts)) = current.as_mut() else {
                return Err(PromptError::Parse(format!("option before any title: `{trimmed}`")));
            };
            opts.push(FeatureOption {
                symbol: c[1].to_string(),
                category: c[2].to_string(),
            });
        } else if let Some(title) = trimmed.strip_suffix(':') {
            finish(current.take(), &mut out)?;
            current = Some((title.trim().to_string(), Vec::new()));
        } else {
            return Err(PromptError::Parse(format!("unrecognised line `{trimmed}`")));
        }
    }
    finish(current, &mut out)?;
    Ok(out)
}

/// The feature listing embedded in an extraction prompt.
pub fn features_in_prompt(prompt: &str) -> Result<Vec<FeatureDef>, PromptError> {
    let (_, tail) = prompt
        .split_once(FEATURE_LIST_HEADER)
        .ok_or_else(|| PromptError::Parse("no feature listing in prompt".into()))?;
    parse_feature_listing(tail, FeatureKind::Independent)
}

fn check_sequential(def: &FeatureDef) -> Result<(), PromptError> {
    static SYM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([A-Za-z_]+)(\d+)$").unwrap());
    let mut prefix: Option<String> = None;
    for (i, o) in def.options().iter().enumerate() {
        let c = SYM.captures(&o.symbol).ok_or_else(|| {
            PromptError::Parse(format!("symbol `{}` is not prefix+number", o.symbol))
        })?;
        let p = c[1].to_string();
        if prefix.get_or_insert_with(|| p.clone()) != &p || c[2].parse::<usize>().ok() != Some(i + 1) {
            return Err(PromptError::Parse(format!(
                "symbols of `{}` are not sequential at `{}`",
                def.title(),
                o.symbol
            )));
        }
    }
    Ok(())
}

/// Two-step builder: asks the backend to complete a feature template for the given background.
pub fn build_features_via_builder(
    background: &str,
    template: &str,
    annotator: &dyn AnnotatorBackend,
    kind: FeatureKind,
) -> Result<Vec<FeatureDef>, PromptError> {
    let reply = annotator.complete(&builder_prompt(background, template))?;
    parse_builder_reply(&reply, kind)
}

pub fn parse_builder_reply(reply: &str, kind: FeatureKind) -> Result<Vec<FeatureDef>, PromptError> {
    if let Some(m) = PLACEHOLDER.find(reply) {
        return Err(PromptError::PlaceholderLeak(m.as_str().to_string()));
    }
    let defs = parse_feature_listing(reply, kind)?;
    if defs.is_empty() {
        return Err(PromptError::Parse("builder returned no features".into()));
    }
    for d in &defs {
        check_sequential(d)?;
    }
    Ok(defs)
}

/// Renders answers in the starred output format.
pub fn render_annotation(values: &[FeatureValue]) -> String {
    let mut s = String::new();
    for v in values {
        s.push_str(&format!(
            "**title: {}**\n**explanation: {}**\n**symbol: {})**\n**category: {}**\n**speculation: {}**\n\n",
            v.title, v.explanation, v.symbol, v.category, v.speculation
        ));
    }
    s
}

#[derive(Default)]
struct RawBlock {
    title: String,
    explanation: Option<String>,
    symbol: Option<String>,
    category: Option<String>,
    speculation: Option<String>,
}

/// Reads the starred answer blocks for every expected title.
pub fn parse_annotation(raw: &str, expected: &[FeatureDef]) -> Result<ParsedAnnotation, PromptError> {
    static FIELD: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?i)^\**\s*(title|explanation|symbol|category|speculation)\s*:\s*(.*?)\s*\**\s*$").unwrap()
    });
    let mut blocks: Vec<RawBlock> = Vec::new();
    let mut last_field: Option<String> = None;
    for line in raw.lines() {
        let trimmed = line.trim();
        if let Some(c) = FIELD.captures(trimmed) {
            let field = c[1].to_lowercase();
            let value = c[2].to_string();
            if field == "title" {
                blocks.push(RawBlock {
                    title: value,
                    ..Default::default()
                });
            } else if let Some(b) = blocks.last_mut() {
                let slot = match field.as_str() {
                    "explanation" => &mut b.explanation,
                    "symbol" => &mut b.symbol,
                    "category" => &mut b.category,
                    _ => &mut b.speculation,
                };
                *slot = Some(value);
            }
            last_field = Some(field);
        } else if last_field.as_deref() == Some("explanation") && !trimmed.is_empty() {
            // explanations may wrap over several lines
            if let Some(e) = blocks.last_mut().and_then(|b| b.explanation.as_mut()) {
                e.push('\n');
                e.push_str(trimmed.trim_end_matches('*'));
            }
        }
    }

    let mut warnings = Vec::new();
    let mut by_title: BTreeMap<String, RawBlock> = BTreeMap::new();
    let wanted: BTreeSet<String> = expected.iter().map(|d| normalize(d.title())).collect();
    for b in blocks {
        let key = normalize(&b.title);
        if !wanted.contains(&key) {
            warnings.push(ParseWarning::UnexpectedTitle(b.title));
            continue;
        }
        if by_title.contains_key(&key) {
            return Err(PromptError::DuplicateTitle(b.title));
        }
        by_title.insert(key, b);
    }

    let mut entries = Vec::with_capacity(expected.len());
    for def in expected {
        let title = def.title().to_string();
        let b = by_title
            .remove(&normalize(&title))
            .ok_or_else(|| PromptError::MissingTitle(title.clone()))?;
        let symbol = b
            .symbol
            .as_deref()
            .map(|s| s.trim().trim_end_matches(')').trim().to_string())
            .filter(|s| !s.is_empty());
        let option = match (&symbol, &b.category) {
            (Some(s), _) => def.option_by_symbol(s).ok_or_else(|| PromptError::UnknownSymbol {
                title: title.clone(),
                symbol: s.clone(),
            })?,
            (None, Some(c)) => def
                .option_by_category(c)
                .ok_or_else(|| PromptError::MissingChoice { title: title.clone() })?,
            (None, None) => return Err(PromptError::MissingChoice { title }),
        };
        if let Some(c) = &b.category {
            if normalize(c) != normalize(&option.category) {
                warnings.push(ParseWarning::SymbolCategoryDisagreement {
                    title: title.clone(),
                    symbol: option.symbol.clone(),
                    reported: c.clone(),
                    expected: option.category.clone(),
                });
            }
        }
        let speculation = match b.speculation.as_deref().and_then(leading_int) {
            Some(v) => {
                let clamped = v.clamp(0, 100);
                if clamped != v {
                    warnings.push(ParseWarning::SpeculationClamped {
                        title: title.clone(),
                        raw: v,
                    });
                }
                clamped as u8
            }
            None => {
                warnings.push(ParseWarning::MissingSpeculation { title: title.clone() });
                0
            }
        };
        entries.push(FeatureValue {
            title,
            symbol: option.symbol.clone(),
            category: option.category.clone(),
            explanation: b.explanation.unwrap_or_default(),
            speculation,
        });
    }
    Ok(ParsedAnnotation { entries, warnings })
}

fn leading_int(s: &str) -> Option<i64> {
    static INT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(-?\d+)").unwrap());
    INT.captures(s).and_then(|c| c[1].parse().ok())
}

/// Cuts an explanation to [`MAX_EXPLANATION_CHARS`] characters.
pub fn truncate_explanation(v: &mut FeatureValue) {
    if v.explanation.chars().count() > MAX_EXPLANATION_CHARS {
        v.explanation = v.explanation.chars().take(MAX_EXPLANATION_CHARS).collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeculationBand {
    Low,
    ModerateLow,
    Moderate,
    ModerateHigh,
    High,
}

pub fn speculation_band(score: i64) -> Result<SpeculationBand, PromptError> {
    Ok(match score {
        0..=20 => SpeculationBand::Low,
        21..=40 => SpeculationBand::ModerateLow,
        41..=60 => SpeculationBand::Moderate,
        61..=80 => SpeculationBand::ModerateHigh,
        81..=100 => SpeculationBand::High,
        _ => return Err(PromptError::OutOfRange(score)),
    })
}

pub const DEFAULT_SPECULATION_THRESHOLD: u8 = 80;

/// True when any relevant answer has speculation strictly above `threshold`.
pub fn is_highly_speculative(
    response: &SiliconResponse,
    relevant_titles: &BTreeSet<String>,
    threshold: u8,
) -> Result<bool, PromptError> {
    let mut any = false;
    for t in relevant_titles {
        let v = response
            .values
            .get(t)
            .ok_or_else(|| PromptError::MissingTitle(t.clone()))?;
        any |= v.speculation > threshold;
    }
    Ok(any)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptStrategy {
    MinimallyInformative,
    ModeratelyInformative,
    HighlyInformative,
    JointSociodemographic,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::MinimallyInformative,
        PromptStrategy::ModeratelyInformative,
        PromptStrategy::HighlyInformative,
        PromptStrategy::JointSociodemographic,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PromptStrategy::MinimallyInformative => "minimal",
            PromptStrategy::ModeratelyInformative => "moderate",
            PromptStrategy::HighlyInformative => "high",
            PromptStrategy::JointSociodemographic => "joint",
        }
    }
}

/// Choice sets and context available to the vote-choice strategies.
#[derive(Debug, Clone, Copy)]
pub struct StrategyInputs<'a> {
    /// The standard choice set, identical for every user.
    pub vote_feature: &'a FeatureDef,
    /// Socio-demographic features asked alongside the vote in the joint strategy.
    pub demographics: &'a [FeatureDef],
    /// Area-conditioned choice set from the feature builder.
    pub state_feature: Option<&'a FeatureDef>,
    /// Rendered area election results.
    pub background: Option<&'a str>,
}

/// The features a strategy asks for, in prompt order, and the background it uses.
pub fn strategy_features(
    strategy: PromptStrategy,
    inputs: &StrategyInputs<'_>,
) -> Result<(Vec<FeatureDef>, String), PromptError> {
    Ok(match strategy {
        PromptStrategy::MinimallyInformative => (vec![inputs.vote_feature.clone()], String::new()),
        PromptStrategy::ModeratelyInformative => {
            let f = inputs.state_feature.ok_or(PromptError::MissingStateFeatures)?;
            (vec![f.clone()], String::new())
        }
        PromptStrategy::HighlyInformative => {
            let f = inputs.state_feature.ok_or(PromptError::MissingStateFeatures)?;
            let b = inputs.background.ok_or(PromptError::MissingBackground)?;
            (vec![f.clone()], b.to_string())
        }
        PromptStrategy::JointSociodemographic => {
            let mut fs: Vec<FeatureDef> = inputs
                .demographics
                .iter()
                .filter(|d| d.title() != inputs.vote_feature.title())
                .cloned()
                .collect();
            // dependent kind keeps the vote block after every demographic one
            fs.push(inputs.vote_feature.clone().with_kind(FeatureKind::Dependent));
            (fs, String::new())
        }
    })
}

pub fn strategy_prompt(
    strategy: PromptStrategy,
    mould: &Mould,
    inputs: &StrategyInputs<'_>,
    opts: &PromptOptions,
) -> Result<String, PromptError> {
    let (features, background) = strategy_features(strategy, inputs)?;
    build_prompt(&background, mould, &features, opts)
}

/// Plurality winner; ties are broken uniformly at random under `seed`.
pub fn majority_vote<S: AsRef<str>>(votes: &[S], seed: u64) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in votes {
        *counts.entry(v.as_ref()).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let leaders: Vec<&str> = counts
        .iter()
        .filter(|(_, &c)| c == top)
        .map(|(k, _)| *k)
        .collect();
    if leaders.len() == 1 {
        return Some(leaders[0].to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(leaders[rng.random_range(0..leaders.len())].to_string())
}

/// Maps area-specific vote categories onto a standard choice set by keyword containment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Harmonizer {
    /// `(keyword, standard category)`, tried in order.
    pub rules: Vec<(String, String)>,
    /// Standard category used when no rule matches.
    pub fallback: Option<String>,
}

impl Harmonizer {
    pub fn canonical_category(&self, standard: &FeatureDef, category: &str) -> Option<String> {
        if let Some(o) = standard.option_by_category(category) {
            return Some(o.category.clone());
        }
        let c = normalize(category);
        let target = self
            .rules
            .iter()
            .find(|(k, _)| c.contains(&normalize(k)))
            .map(|(_, t)| t.clone())
            .or_else(|| self.fallback.clone())?;
        standard.option_by_category(&target).map(|o| o.category.clone())
    }

    /// Re-expresses `value` in the standard choice set.
    pub fn harmonize(&self, standard: &FeatureDef, value: &FeatureValue) -> Option<FeatureValue> {
        let cat = self.canonical_category(standard, &value.category)?;
        let opt = standard.option_by_category(&cat)?;
        Some(FeatureValue {
            title: standard.title().to_string(),
            symbol: opt.symbol.clone(),
            category: opt.category.clone(),
            explanation: value.explanation.clone(),
            speculation: value.speculation,
        })
    }

    /// The option of `def` that maps onto standard category `canonical`, if any.
    pub fn option_for<'a>(
        &self,
        standard: &FeatureDef,
        def: &'a FeatureDef,
        canonical: &str,
    ) -> Option<&'a FeatureOption> {
        let want = normalize(canonical);
        def.options().iter().find(|o| {
            self.canonical_category(standard, &o.category)
                .is_some_and(|c| normalize(&c) == want)
        })
    }
}

/// Majority vote over harmonized strategy answers.
///
/// Returns the winning strategy's answer expressed in the standard choice set. The
/// first strategy (in enum order) whose answer matches the winner is kept.
pub fn ensemble_vote(
    standard: &FeatureDef,
    harmonizer: &Harmonizer,
    votes: &BTreeMap<PromptStrategy, FeatureValue>,
    seed: u64,
) -> Option<FeatureValue> {
    let harmonized: Vec<(PromptStrategy, FeatureValue)> = votes
        .iter()
        .filter_map(|(s, v)| harmonizer.harmonize(standard, v).map(|h| (*s, h)))
        .collect();
    let cats: Vec<&str> = harmonized.iter().map(|(_, v)| v.category.as_str()).collect();
    let winner = majority_vote(&cats, seed)?;
    harmonized
        .into_iter()
        .find(|(_, v)| v.category == winner)
        .map(|(_, v)| v)
}
