//! Accuracy, calibration, alignment and pollster-comparison metrics, and the
//! evaluation report built from them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::call_rng;
use crate::domain::{normalize, SiliconResponse};
use crate::mrp::predict::{quantile_sorted, summarize, Summary};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {preds} predictions, {obs} observations")]
    LengthMismatch { preds: usize, obs: usize },
    #[error("empty input")]
    Empty,
    #[error("ranks are degenerate (constant input)")]
    DegenerateRanks,
    #[error("need at least 10 draws per sample, got {0}")]
    TooFewDraws(usize),
    #[error("series must have at least 3 periods, got {0}")]
    TooFewPeriods(usize),
    #[error("all Dirichlet counts are zero")]
    AllZero,
    #[error("no pollster shares an area with the estimates")]
    NoSharedAreas,
    #[error("unknown candidate `{0}`")]
    UnknownCandidate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn check_lengths(preds: &[f64], obs: &[f64]) -> Result<(), EvalError> {
    if preds.len() != obs.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            obs: obs.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Point estimate and 90% interval for one area or crosstab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaEstimate {
    pub area: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<f64>>,
}

impl AreaEstimate {
    /// Median with the 5% and 95% quantiles.
    pub fn from_draws(area: impl Into<String>, draws: Vec<f64>) -> Self {
        let mut s = draws.clone();
        s.sort_by(f64::total_cmp);
        AreaEstimate {
            area: area.into(),
            point: quantile_sorted(&s, 0.5),
            lower: quantile_sorted(&s, 0.05),
            upper: quantile_sorted(&s, 0.95),
            draws: Some(draws),
        }
    }
}

pub fn bias(preds: &[f64], obs: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, obs)?;
    Ok(preds.iter().zip(obs).map(|(p, o)| p - o).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], obs: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, obs)?;
    Ok((preds.iter().zip(obs).map(|(p, o)| (o - p) * (o - p)).sum::<f64>() / preds.len() as f64).sqrt())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::DegenerateRanks);
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

pub fn spearman(preds: &[f64], obs: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, obs)?;
    if preds.len() < 2 {
        return Err(EvalError::DegenerateRanks);
    }
    pearson(&average_ranks(preds), &average_ranks(obs))
}

/// Share of observations inside their closed 90% interval.
pub fn coverage90(estimates: &[AreaEstimate], obs: &[f64]) -> Result<f64, EvalError> {
    if estimates.len() != obs.len() {
        return Err(EvalError::LengthMismatch {
            preds: estimates.len(),
            obs: obs.len(),
        });
    }
    if obs.is_empty() {
        return Err(EvalError::Empty);
    }
    let hit = estimates
        .iter()
        .zip(obs)
        .filter(|(e, o)| e.lower <= **o && **o <= e.upper)
        .count();
    Ok(hit as f64 / obs.len() as f64)
}

/// Share of areas whose predicted winner matches the observed one; a tied
/// point prediction is never correct.
pub fn winner_accuracy(preds: &[f64], obs: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, obs)?;
    let hit = preds
        .iter()
        .zip(obs)
        .filter(|(p, o)| **p != 0.0 && p.signum() == o.signum() && **o != 0.0)
        .count();
    Ok(hit as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvlGrid {
    pub points: usize,
    /// Grid padding beyond the pooled range, in bandwidths.
    pub pad: f64,
}

impl Default for OvlGrid {
    fn default() -> Self {
        OvlGrid { points: 2048, pad: 3.0 }
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Silverman's rule of thumb.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let sd = sample_sd(&s);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (s.len() as f64).powf(-0.2)
}

/// Gaussian KDE of a sorted sample on `grid`; kernels are cut at 8 bandwidths.
fn kde(sorted: &[f64], h: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.par_iter()
        .map(|&g| {
            let lo = sorted.partition_point(|x| *x < g - 8.0 * h);
            let hi = sorted.partition_point(|x| *x <= g + 8.0 * h);
            let s: f64 = sorted[lo..hi]
                .iter()
                .map(|x| {
                    let u = (g - x) / h;
                    (-0.5 * u * u).exp()
                })
                .sum();
            s * norm
        })
        .collect()
}

/// Overlap coefficient of two samples via kernel density estimates on a
/// shared grid, clamped to [0, 1].
pub fn ovl(a: &[f64], b: &[f64], grid: &OvlGrid) -> Result<f64, EvalError> {
    let n = a.len().min(b.len());
    if n < 10 {
        return Err(EvalError::TooFewDraws(n));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(EvalError::Invalid("non-finite draw".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let h = silverman_bandwidth(&pooled);
    if !(h > 0.0) {
        // every draw is the same value
        return Ok(1.0);
    }
    let (mn, mx) = pooled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), x| (l.min(*x), u.max(*x)));
    let (lo, hi) = (mn - grid.pad * h, mx + grid.pad * h);
    let k = grid.points.max(2);
    let step = (hi - lo) / (k - 1) as f64;
    let xs: Vec<f64> = (0..k).map(|i| lo + i as f64 * step).collect();
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (fa, fb) = (kde(&sa, h, &xs), kde(&sb, h, &xs));
    let m: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x.min(*y)).collect();
    let integral = step * (m.iter().sum::<f64>() - 0.5 * (m[0] + m[k - 1]));
    Ok(integral.clamp(0.0, 1.0))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// Posterior probability of getting the direction of change wrong.
pub fn misdirection_prob(draws: &[f64], previous: f64, observed: f64) -> Result<f64, EvalError> {
    if draws.is_empty() {
        return Err(EvalError::Empty);
    }
    let d = if sign(observed - previous) > 0.0 { 1.0 } else { 0.0 };
    let h = draws.iter().map(|x| heaviside(sign(x - previous))).sum::<f64>() / draws.len() as f64;
    Ok((d - h).abs())
}

/// Estimated change minus observed change.
pub fn change_bias(estimate: f64, previous: f64, observed: f64) -> f64 {
    (estimate - previous) - (observed - previous)
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

/// One-sided tail mass on the side of the draw median that holds `observed`.
pub fn posterior_pvalue(draws: &[f64], observed: f64) -> Result<f64, EvalError> {
    if draws.is_empty() {
        return Err(EvalError::Empty);
    }
    let s = draws.len() as f64;
    let n = if observed >= median(draws) {
        draws.iter().filter(|x| **x >= observed).count()
    } else {
        draws.iter().filter(|x| **x <= observed).count()
    };
    Ok(n as f64 / s)
}

/// Share of draws whose series is positively rank-correlated with the
/// reference series. Draws with degenerate ranks count as not positive.
pub fn temporal_corr_prob(series_draws: &[Vec<f64>], reference: &[f64]) -> Result<f64, EvalError> {
    if reference.len() < 3 {
        return Err(EvalError::TooFewPeriods(reference.len()));
    }
    if series_draws.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut positive = 0usize;
    let mut degenerate = 0usize;
    for s in series_draws {
        match spearman(s, reference) {
            Ok(r) if r > 0.0 => positive += 1,
            Ok(_) => {}
            Err(EvalError::DegenerateRanks) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} of {} draws had degenerate ranks", series_draws.len());
    }
    Ok(positive as f64 / series_draws.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletDraws {
    /// `S × J`, each row on the simplex.
    pub pi: Vec<Vec<f64>>,
    /// `π_a − π_b` per draw.
    pub margin: Vec<f64>,
}

/// Draws from Dirichlet(counts). Zero counts are raised to `zero_floor`; with
/// the default floor of 0 that component is identically zero.
pub fn dirichlet_margin_draws(
    counts: &[f64],
    margin: (usize, usize),
    s: usize,
    seed: u64,
    zero_floor: f64,
) -> Result<DirichletDraws, EvalError> {
    if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) || !(zero_floor >= 0.0) {
        return Err(EvalError::Invalid("counts must be finite and nonnegative".into()));
    }
    if margin.0 >= counts.len() || margin.1 >= counts.len() {
        return Err(EvalError::Invalid("margin index out of range".into()));
    }
    let alpha: Vec<f64> = counts.iter().map(|c| if *c > 0.0 { *c } else { zero_floor }).collect();
    if alpha.iter().all(|a| *a == 0.0) {
        return Err(EvalError::AllZero);
    }
    let gammas: Vec<Option<Gamma<f64>>> = alpha
        .iter()
        .map(|a| (*a > 0.0).then(|| Gamma::new(*a, 1.0).expect("positive shape")))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pi = Vec::with_capacity(s);
    let mut m = Vec::with_capacity(s);
    for _ in 0..s {
        let mut g: Vec<f64> = gammas
            .iter()
            .map(|d| d.as_ref().map_or(0.0, |d| d.sample(&mut rng)))
            .collect();
        let mut tot: f64 = g.iter().sum();
        if !(tot > 0.0) {
            // every positive-shape gamma underflowed; fall back to the mean
            g = alpha.clone();
            tot = g.iter().sum();
        }
        g.iter_mut().for_each(|x| *x /= tot);
        m.push(g[margin.0] - g[margin.1]);
        pi.push(g);
    }
    Ok(DirichletDraws { pi, margin: m })
}

/// One poll from one pollster in one area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollsterRecord {
    pub pollster: String,
    pub rating: String,
    pub area: String,
    /// Declared supporters per candidate.
    pub counts: BTreeMap<String, f64>,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

#[derive(Debug, Serialize, Deserialize)]
struct PollsterRow {
    pollster: String,
    rating: String,
    area: String,
    candidate: String,
    count: f64,
    start_date: NaiveDate,
    end_date: NaiveDate,
}

/// Reads long-format pollster rows, one per candidate, grouped into polls.
pub fn read_pollsters_csv<R: Read>(r: R) -> Result<Vec<PollsterRecord>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut polls: BTreeMap<(String, String, NaiveDate, NaiveDate), PollsterRecord> = BTreeMap::new();
    for row in rd.deserialize() {
        let row: PollsterRow = row?;
        if !(row.count >= 0.0) {
            return Err(EvalError::Invalid(format!("negative count for {}", row.pollster)));
        }
        let key = (row.pollster.clone(), row.area.clone(), row.start_date, row.end_date);
        let rec = polls.entry(key).or_insert_with(|| PollsterRecord {
            pollster: row.pollster.clone(),
            rating: row.rating.clone(),
            area: row.area.clone(),
            counts: BTreeMap::new(),
            start_date: row.start_date,
            end_date: row.end_date,
        });
        *rec.counts.entry(row.candidate).or_insert(0.0) += row.count;
    }
    Ok(polls.into_values().collect())
}

pub fn write_pollsters_csv<W: Write>(records: &[PollsterRecord], w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        for (c, n) in &r.counts {
            wr.serialize(PollsterRow {
                pollster: r.pollster.clone(),
                rating: r.rating.clone(),
                area: r.area.clone(),
                candidate: c.clone(),
                count: *n,
                start_date: r.start_date,
                end_date: r.end_date,
            })?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideMetrics {
    pub bias: f64,
    pub rmse: f64,
    pub spearman: Option<f64>,
    pub coverage90: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollsterComparison {
    pub pollster: String,
    pub rating: String,
    pub areas: Vec<String>,
    pub possum: SideMetrics,
    pub pollster_metrics: SideMetrics,
    /// Our metric minus the pollster's.
    pub delta: SideMetrics,
    /// Mean per-area overlap between the two margin distributions.
    pub ovl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// Candidates `(a, b)` of the margin `π_a − π_b`.
    pub margin: (String, String),
    /// Dirichlet draws per area; defaults to the number of our draws.
    pub draws: Option<usize>,
    pub seed: u64,
    pub zero_floor: f64,
    pub grid: OvlGrid,
}

/// Rank correlation is only reported above this many shared areas.
pub const MIN_SPEARMAN_AREAS: usize = 4;

fn side_metrics(est: &[AreaEstimate], obs: &[f64]) -> Result<SideMetrics, EvalError> {
    let pts: Vec<f64> = est.iter().map(|e| e.point).collect();
    Ok(SideMetrics {
        bias: bias(&pts, obs)?,
        rmse: rmse(&pts, obs)?,
        spearman: if pts.len() >= MIN_SPEARMAN_AREAS {
            spearman(&pts, obs).ok()
        } else {
            None
        },
        coverage90: coverage90(est, obs)?,
        accuracy: winner_accuracy(&pts, obs)?,
    })
}

fn delta(a: &SideMetrics, b: &SideMetrics) -> SideMetrics {
    SideMetrics {
        bias: a.bias - b.bias,
        rmse: a.rmse - b.rmse,
        spearman: a.spearman.zip(b.spearman).map(|(x, y)| x - y),
        coverage90: a.coverage90 - b.coverage90,
        accuracy: a.accuracy - b.accuracy,
    }
}

/// Keeps the most recent poll for each pollster and area.
pub fn latest_polls(pollsters: &[PollsterRecord]) -> Vec<PollsterRecord> {
    let mut latest: BTreeMap<(String, String), &PollsterRecord> = BTreeMap::new();
    for p in pollsters {
        let key = (p.pollster.clone(), normalize(&p.area));
        match latest.get(&key) {
            Some(q) if (q.end_date, q.start_date) >= (p.end_date, p.start_date) => {}
            _ => {
                latest.insert(key, p);
            }
        }
    }
    latest.into_values().cloned().collect()
}

/// Compares our per-area margin draws with each pollster on the areas it fielded.
pub fn compare_pollsters(
    possum: &BTreeMap<String, Vec<f64>>,
    pollsters: &[PollsterRecord],
    results: &BTreeMap<String, f64>,
    opts: &CompareOptions,
) -> Result<Vec<PollsterComparison>, EvalError> {
    let find = |m: &BTreeMap<String, Vec<f64>>, a: &str| {
        m.iter().find(|(k, _)| normalize(k) == normalize(a)).map(|(k, v)| (k.clone(), v.clone()))
    };
    let result_of = |a: &str| results.iter().find(|(k, _)| normalize(k) == normalize(a)).map(|(_, v)| *v);
    let latest = latest_polls(pollsters);
    let mut by_pollster: BTreeMap<String, Vec<&PollsterRecord>> = BTreeMap::new();
    for p in &latest {
        by_pollster.entry(p.pollster.clone()).or_default().push(p);
    }

    let mut out = Vec::new();
    for (name, polls) in by_pollster {
        let mut ours = Vec::new();
        let mut theirs = Vec::new();
        let mut obs = Vec::new();
        let mut ovls = Vec::new();
        for p in polls {
            let (Some((area, draws)), Some(y)) = (find(possum, &p.area), result_of(&p.area)) else {
                continue;
            };
            let cands: Vec<&String> = p.counts.keys().collect();
            let pos = |c: &str| {
                cands
                    .iter()
                    .position(|k| normalize(k) == normalize(c))
                    .ok_or_else(|| EvalError::UnknownCandidate(format!("{c} in {name}/{}", p.area)))
            };
            let idx = (pos(&opts.margin.0)?, pos(&opts.margin.1)?);
            let counts: Vec<f64> = p.counts.values().copied().collect();
            let s = opts.draws.unwrap_or(draws.len()).max(1);
            let seed = call_rng(opts.seed, &name, &normalize(&area)).next_u64();
            let dir = dirichlet_margin_draws(&counts, idx, s, seed, opts.zero_floor)?;
            ovls.push(ovl(&draws, &dir.margin, &opts.grid)?);
            ours.push(AreaEstimate::from_draws(area.clone(), draws));
            theirs.push(AreaEstimate::from_draws(area, dir.margin));
            obs.push(y);
        }
        if obs.is_empty() {
            log::warn!("pollster {name} shares no area with the estimates");
            continue;
        }
        let (a, b) = (side_metrics(&ours, &obs)?, side_metrics(&theirs, &obs)?);
        out.push(PollsterComparison {
            rating: latest
                .iter()
                .find(|p| p.pollster == name)
                .map(|p| p.rating.clone())
                .unwrap_or_default(),
            pollster: name,
            areas: ours.iter().map(|e| e.area.clone()).collect(),
            delta: delta(&a, &b),
            possum: a,
            pollster_metrics: b,
            ovl: mean(&ovls),
        });
    }
    if out.is_empty() && !pollsters.is_empty() {
        return Err(EvalError::NoSharedAreas);
    }
    Ok(out)
}

/// Posterior margin draws for one crosstab level and label.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginDraws {
    pub level: String,
    pub label: String,
    pub draws: Vec<f64>,
}

/// Observed margin for one level and label, with the previous election's
/// margin when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub level: String,
    pub label: String,
    pub margin: f64,
    pub previous: Option<f64>,
}

/// A point margin from the raw, unweighted sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMargin {
    pub level: String,
    pub label: String,
    pub margin: f64,
    pub n: usize,
}

/// Level label used for the single national crosstab.
pub const NATIONAL: &str = "national";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub level: String,
    pub label: String,
    pub estimate: Summary,
    pub truth: f64,
    pub error: f64,
    pub covered: bool,
    pub p_value: f64,
    pub raw: Option<f64>,
    pub previous: Option<f64>,
    pub misdirection: Option<f64>,
    pub change_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub n: usize,
    pub bias: f64,
    pub rmse: f64,
    pub spearman: Option<f64>,
    pub coverage90: f64,
    pub accuracy: f64,
    pub mean_misdirection: Option<f64>,
    pub raw_bias: Option<f64>,
    pub raw_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub margin: (String, String),
    pub rows: Vec<EvalRow>,
    pub levels: BTreeMap<String, LevelMetrics>,
    pub pollsters: Vec<PollsterComparison>,
}

impl EvalReport {
    pub fn row(&self, level: &str, label: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.level == level && normalize(&r.label) == normalize(label))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub margin: (String, String),
    /// Level whose labels are matched against pollster areas.
    pub area_level: String,
    pub seed: u64,
    pub zero_floor: f64,
}

/// Scores margin draws against the truth, level by level. Estimates without
/// a truth row are skipped.
pub fn evaluate(
    estimates: &[MarginDraws],
    truth: &[TruthRow],
    raw: &[RawMargin],
    pollsters: &[PollsterRecord],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let key = |l: &str, x: &str| (l.to_string(), normalize(x));
    let truth_of: BTreeMap<_, &TruthRow> = truth.iter().map(|t| (key(&t.level, &t.label), t)).collect();
    let raw_of: BTreeMap<_, f64> = raw.iter().map(|r| (key(&r.level, &r.label), r.margin)).collect();

    let mut rows = Vec::new();
    let mut per_level: BTreeMap<String, Vec<(AreaEstimate, f64, Option<f64>, Option<f64>)>> = BTreeMap::new();
    for e in estimates {
        let k = key(&e.level, &e.label);
        let Some(t) = truth_of.get(&k) else {
            continue;
        };
        let est = AreaEstimate::from_draws(e.label.clone(), e.draws.clone());
        let summary = summarize(&e.draws);
        let misdirection = t.previous.map(|p| misdirection_prob(&e.draws, p, t.margin)).transpose()?;
        let raw = raw_of.get(&k).copied();
        rows.push(EvalRow {
            level: e.level.clone(),
            label: e.label.clone(),
            error: est.point - t.margin,
            covered: est.lower <= t.margin && t.margin <= est.upper,
            p_value: posterior_pvalue(&e.draws, t.margin)?,
            raw,
            previous: t.previous,
            misdirection,
            change_bias: t.previous.map(|p| change_bias(est.point, p, t.margin)),
            truth: t.margin,
            estimate: summary,
        });
        per_level
            .entry(e.level.clone())
            .or_default()
            .push((est, t.margin, raw, misdirection));
    }

    let mut levels = BTreeMap::new();
    for (level, items) in &per_level {
        let est: Vec<AreaEstimate> = items.iter().map(|i| i.0.clone()).collect();
        let obs: Vec<f64> = items.iter().map(|i| i.1).collect();
        let side = side_metrics(&est, &obs)?;
        let raws: Option<Vec<f64>> = items.iter().map(|i| i.2).collect();
        let mis: Option<Vec<f64>> = items.iter().map(|i| i.3).collect();
        levels.insert(
            level.clone(),
            LevelMetrics {
                n: items.len(),
                bias: side.bias,
                rmse: side.rmse,
                spearman: side.spearman,
                coverage90: side.coverage90,
                accuracy: side.accuracy,
                mean_misdirection: mis.map(|m| mean(&m)),
                raw_bias: raws.as_ref().map(|r| bias(r, &obs)).transpose()?,
                raw_rmse: raws.as_ref().map(|r| rmse(r, &obs)).transpose()?,
            },
        );
    }

    let pollsters = if pollsters.is_empty() {
        Vec::new()
    } else {
        let possum: BTreeMap<String, Vec<f64>> = estimates
            .iter()
            .filter(|e| e.level == opts.area_level)
            .map(|e| (e.label.clone(), e.draws.clone()))
            .collect();
        let results: BTreeMap<String, f64> = truth
            .iter()
            .filter(|t| t.level == opts.area_level)
            .map(|t| (t.label.clone(), t.margin))
            .collect();
        compare_pollsters(
            &possum,
            pollsters,
            &results,
            &CompareOptions {
                margin: opts.margin.clone(),
                draws: None,
                seed: opts.seed,
                zero_floor: opts.zero_floor,
                grid: OvlGrid::default(),
            },
        )?
    };
    Ok(EvalReport {
        margin: opts.margin.clone(),
        rows,
        levels,
        pollsters,
    })
}

/// Unweighted sample margins for the national level and each listed attribute.
/// The area level is read from the response's area; stateless users count
/// nationally only.
pub fn raw_margins(
    responses: &[SiliconResponse],
    outcome_title: &str,
    margin: (&str, &str),
    area_level: &str,
    levels: &[String],
) -> Vec<RawMargin> {
    // keyed by normalized label, keeping the first spelling seen
    let mut acc: BTreeMap<(String, String), (String, f64, usize)> = BTreeMap::new();
    let (a, b) = (normalize(margin.0), normalize(margin.1));
    for r in responses {
        let Some(v) = r.category(outcome_title).map(normalize) else {
            continue;
        };
        let x = if v == a {
            1.0
        } else if v == b {
            -1.0
        } else {
            0.0
        };
        let mut keys = vec![(NATIONAL.to_string(), NATIONAL.to_string())];
        for l in levels {
            let label = if l == area_level {
                r.area.clone()
            } else {
                r.category(l).map(str::to_string)
            };
            if let Some(label) = label {
                keys.push((l.clone(), label));
            }
        }
        for (level, label) in keys {
            let e = acc
                .entry((level, normalize(&label)))
                .or_insert((label, 0.0, 0));
            e.1 += x;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|((level, _), (label, s, n))| RawMargin {
            level,
            label,
            margin: s / n as f64,
            n,
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DrawRow {
    level: String,
    label: String,
    draw: usize,
    value: String,
}

/// Long format: level, label, draw, value (round-trip exact).
pub fn write_margin_draws_csv<W: Write>(draws: &[MarginDraws], w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for m in draws {
        for (i, v) in m.draws.iter().enumerate() {
            wr.serialize(DrawRow {
                level: m.level.clone(),
                label: m.label.clone(),
                draw: i,
                value: format!("{v:.17e}"),
            })?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_margin_draws_csv<R: Read>(r: R) -> Result<Vec<MarginDraws>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out: Vec<MarginDraws> = Vec::new();
    for row in rd.deserialize() {
        let row: DrawRow = row?;
        let v: f64 = row
            .value
            .parse()
            .map_err(|_| EvalError::Invalid(format!("bad draw value `{}`", row.value)))?;
        match out.last_mut() {
            Some(m) if m.level == row.level && m.label == row.label => m.draws.push(v),
            _ => out.push(MarginDraws {
                level: row.level,
                label: row.label,
                draws: vec![v],
            }),
        }
    }
    Ok(out)
}

pub fn write_truth_csv<W: Write>(truth: &[TruthRow], w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["level", "label", "margin", "previous"])?;
    for t in truth {
        wr.write_record([
            t.level.clone(),
            t.label.clone(),
            format!("{:.17e}", t.margin),
            t.previous.map(|p| format!("{p:.17e}")).unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: Read>(r: R) -> Result<Vec<TruthRow>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    let parse = |s: &str| s.parse::<f64>().map_err(|_| EvalError::Invalid(format!("bad number `{s}`")));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(EvalError::Invalid("truth rows need level, label, margin".into()));
        }
        let prev = rec.get(3).unwrap_or("").trim();
        out.push(TruthRow {
            level: rec[0].to_string(),
            label: rec[1].to_string(),
            margin: parse(rec[2].trim())?,
            previous: if prev.is_empty() { None } else { Some(parse(prev)?) },
        });
    }
    Ok(out)
}

pub fn write_raw_csv<W: Write>(raw: &[RawMargin], w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["level", "label", "margin", "n"])?;
    for r in raw {
        wr.write_record([
            r.level.clone(),
            r.label.clone(),
            format!("{:.17e}", r.margin),
            r.n.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_raw_csv<R: Read>(r: R) -> Result<Vec<RawMargin>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let bad = || EvalError::Invalid("raw rows need level, label, margin, n".into());
        out.push(RawMargin {
            level: rec.get(0).ok_or_else(bad)?.to_string(),
            label: rec.get(1).ok_or_else(bad)?.to_string(),
            margin: rec.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            n: rec.get(3).ok_or_else(bad)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Per-row table of the report, ready for plotting.
pub fn write_report_rows_csv<W: Write>(report: &EvalReport, w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "level", "label", "mean", "q05", "q50", "q95", "truth", "error", "covered", "p_value", "raw",
    ])?;
    let f = |x: f64| format!("{x:.17e}");
    for r in &report.rows {
        wr.write_record([
            r.level.clone(),
            r.label.clone(),
            f(r.estimate.mean),
            f(r.estimate.q05),
            f(r.estimate.q50),
            f(r.estimate.q95),
            f(r.truth),
            f(r.error),
            r.covered.to_string(),
            f(r.p_value),
            r.raw.map(f).unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
