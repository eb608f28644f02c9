//! Stratification-frame construction: crosstab smoothing, product extension
//! with a past-vote dimension, raking to known margins and daughter frames.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize, Attributes, DomainError, QuotaState, StratCell, StratFrame};

/// Geography label for a target that applies to the whole frame.
pub const NATIONAL: &str = "*";

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("auxiliary survey is empty")]
    EmptyAux,
    #[error("shrinkage strength must be positive, got {0}")]
    BadKappa(f64),
    #[error("no smoothed distribution for combination {0:?}")]
    MissingCombo(Vec<String>),
    #[error("target {variable}={category} in {geography} is positive but the frame has no mass there")]
    StructuralZero {
        geography: String,
        variable: String,
        category: String,
    },
    #[error("raking stopped after {iterations} sweeps with margin error {achieved_error:e}")]
    NonConvergence { iterations: usize, achieved_error: f64 },
    #[error("invalid margin target: {0}")]
    InvalidTarget(String),
    #[error("frame has no positive weight")]
    EmptyFrame,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Known share of each category of one variable within one geography.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginTarget {
    pub geography: String,
    pub variable: String,
    pub shares: BTreeMap<String, f64>,
}

impl MarginTarget {
    pub fn new(geography: &str, variable: &str, shares: &[(&str, f64)]) -> Result<Self, FrameError> {
        let t = MarginTarget {
            geography: geography.to_string(),
            variable: variable.to_string(),
            shares: shares.iter().map(|(c, s)| (normalize(c), *s)).collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.shares.values().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(FrameError::InvalidTarget(format!("{} has a negative share", self.variable)));
        }
        let sum: f64 = self.shares.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FrameError::InvalidTarget(format!(
                "{} shares in {} sum to {sum}",
                self.variable, self.geography
            )));
        }
        Ok(())
    }
}

pub fn write_targets_csv<W: Write>(targets: &[MarginTarget], w: W) -> Result<(), FrameError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["geography", "variable", "category", "share"])?;
    for t in targets {
        for (c, s) in &t.shares {
            w.write_record([t.geography.as_str(), &t.variable, c, &s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads targets; rows sharing geography and variable form one target, in first-seen order.
pub fn read_targets_csv<R: Read>(r: R) -> Result<Vec<MarginTarget>, FrameError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut order: Vec<(String, String)> = Vec::new();
    let mut by_key: BTreeMap<(String, String), BTreeMap<String, f64>> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(FrameError::InvalidTarget(format!("short row {rec:?}")));
        }
        let key = (rec[0].trim().to_string(), rec[1].trim().to_string());
        let share: f64 = rec[3]
            .trim()
            .parse()
            .map_err(|_| FrameError::InvalidTarget(format!("bad share `{}`", &rec[3])))?;
        if !by_key.contains_key(&key) {
            order.push(key.clone());
        }
        by_key.entry(key).or_default().insert(normalize(&rec[2]), share);
    }
    order
        .into_iter()
        .map(|k| {
            let t = MarginTarget {
                shares: by_key.remove(&k).unwrap_or_default(),
                geography: k.0,
                variable: k.1,
            };
            t.validate().map(|_| t)
        })
        .collect()
}

/// One auxiliary-survey respondent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxRecord {
    pub attrs: Attributes,
    pub past_vote: String,
}

/// Past-vote distribution for every demographic combination seen in the auxiliary margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedCrosstab {
    pub schema: Vec<String>,
    pub vote_title: String,
    pub vote_categories: Vec<String>,
    /// Combination (values in `schema` order) to probabilities over `vote_categories`.
    pub table: BTreeMap<Vec<String>, Vec<f64>>,
}

impl SmoothedCrosstab {
    pub fn distribution(&self, attrs: &Attributes) -> Result<&[f64], FrameError> {
        let combo: Vec<String> = self
            .schema
            .iter()
            .map(|t| attrs.get(t).cloned().unwrap_or_default())
            .collect();
        self.table
            .get(&combo)
            .map(Vec::as_slice)
            .ok_or(FrameError::MissingCombo(combo))
    }
}

/// Shrinks each combination's past-vote counts toward the distribution implied
/// by the one-way margins.
///
/// The prior for a combination is `p(v) Πₐ p(aₐ | v)` with add-½ counts, and the
/// shrinkage weight on the prior is `κ / (κ + n_cell)`.
pub fn smooth_crosstabs(
    aux: &[AuxRecord],
    schema: &[String],
    vote_title: &str,
    kappa: f64,
) -> Result<SmoothedCrosstab, FrameError> {
    if aux.is_empty() {
        return Err(FrameError::EmptyAux);
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(FrameError::BadKappa(kappa));
    }
    let votes: Vec<String> = aux
        .iter()
        .map(|r| normalize(&r.past_vote))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let j_of = |v: &str| votes.iter().position(|x| x == v).expect("collected above");
    let nj = votes.len();
    let cats: Vec<Vec<String>> = schema
        .iter()
        .map(|t| {
            aux.iter()
                .map(|r| {
                    r.attrs
                        .get(t)
                        .map(|c| normalize(c))
                        .ok_or_else(|| FrameError::Domain(DomainError::SchemaMismatch(format!("aux row lacks `{t}`"))))
                })
                .collect::<Result<BTreeSet<_>, _>>()
                .map(|s| s.into_iter().collect())
        })
        .collect::<Result<_, _>>()?;

    let mut n_v = vec![0.0; nj];
    // cond[a][c][v]: count of attribute a at category c with vote v
    let mut cond: Vec<Vec<Vec<f64>>> = cats.iter().map(|c| vec![vec![0.0; nj]; c.len()]).collect();
    let mut cells: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for r in aux {
        let v = j_of(&normalize(&r.past_vote));
        n_v[v] += 1.0;
        let mut combo = Vec::with_capacity(schema.len());
        for (a, t) in schema.iter().enumerate() {
            let c = normalize(&r.attrs[t]);
            let ci = cats[a].iter().position(|x| *x == c).expect("collected above");
            cond[a][ci][v] += 1.0;
            combo.push(c);
        }
        cells.entry(combo).or_insert_with(|| vec![0.0; nj])[v] += 1.0;
    }
    let n = aux.len() as f64;
    let prior_v: Vec<f64> = n_v.iter().map(|c| (c + 0.5) / (n + 0.5 * nj as f64)).collect();

    let mut table = BTreeMap::new();
    let mut idx = vec![0usize; schema.len()];
    loop {
        let combo: Vec<String> = idx.iter().enumerate().map(|(a, &i)| cats[a][i].clone()).collect();
        let mut prior: Vec<f64> = (0..nj)
            .map(|v| {
                idx.iter().enumerate().fold(prior_v[v], |p, (a, &i)| {
                    p * (cond[a][i][v] + 0.5) / (n_v[v] + 0.5 * cats[a].len() as f64)
                })
            })
            .collect();
        let z: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= z);
        let counts = cells.get(&combo);
        let n_cell: f64 = counts.map_or(0.0, |c| c.iter().sum());
        let mut dist: Vec<f64> = (0..nj)
            .map(|v| (counts.map_or(0.0, |c| c[v]) + kappa * prior[v]) / (n_cell + kappa))
            .collect();
        let s: f64 = dist.iter().sum();
        dist.iter_mut().for_each(|p| *p /= s);
        table.insert(combo, dist);

        // odometer over the cartesian product
        let mut a = schema.len();
        loop {
            if a == 0 {
                return Ok(SmoothedCrosstab {
                    schema: schema.to_vec(),
                    vote_title: vote_title.to_string(),
                    vote_categories: votes,
                    table,
                });
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < cats[a].len() {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Splits every cell by past vote with weight `w · p(v | cell)`.
///
/// Zero-probability categories keep a zero-weight cell. New cell ids follow
/// mother-cell order, then vote-category order.
pub fn extend_frame(frame: &StratFrame, smoothed: &SmoothedCrosstab) -> Result<StratFrame, FrameError> {
    for t in &smoothed.schema {
        if !frame.attribute_schema.contains(t) {
            return Err(DomainError::SchemaMismatch(format!("frame lacks `{t}`")).into());
        }
    }
    let mut cells = Vec::with_capacity(frame.cells.len() * smoothed.vote_categories.len());
    for cell in &frame.cells {
        let dist = smoothed.distribution(&cell.attributes)?;
        for (v, p) in smoothed.vote_categories.iter().zip(dist) {
            let mut attributes = cell.attributes.clone();
            attributes.insert(smoothed.vote_title.clone(), v.clone());
            cells.push(StratCell {
                cell_id: cells.len() as u32,
                attributes,
                weight: cell.weight * p,
            });
        }
    }
    let mut attribute_schema = frame.attribute_schema.clone();
    attribute_schema.push(smoothed.vote_title.clone());
    Ok(StratFrame { cells, attribute_schema })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RakeOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Attribute naming each cell's geography; needed for non-national targets.
    pub geography_title: Option<String>,
}

impl Default for RakeOptions {
    fn default() -> Self {
        RakeOptions {
            tol: 1e-6,
            max_iter: 1000,
            geography_title: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RakeResult {
    pub frame: StratFrame,
    pub sweeps: usize,
    /// Max-abs margin error after each full sweep.
    pub error_history: Vec<f64>,
}

struct Group {
    total: f64,
    /// Per category: cell indices and target share.
    parts: Vec<(Vec<usize>, f64)>,
}

fn rake_groups(frame: &StratFrame, targets: &[MarginTarget], opts: &RakeOptions) -> Result<Vec<Group>, FrameError> {
    let mut groups = Vec::with_capacity(targets.len());
    for t in targets {
        t.validate()?;
        if !frame.attribute_schema.contains(&t.variable) {
            return Err(FrameError::InvalidTarget(format!("frame lacks `{}`", t.variable)));
        }
        let members: Vec<usize> = if t.geography == NATIONAL {
            (0..frame.cells.len()).collect()
        } else {
            let g = opts
                .geography_title
                .as_ref()
                .ok_or_else(|| FrameError::InvalidTarget(format!("`{}` needs a geography attribute", t.geography)))?;
            let want = normalize(&t.geography);
            frame
                .cells
                .iter()
                .enumerate()
                .filter(|(_, c)| c.attributes.get(g).is_some_and(|v| normalize(v) == want))
                .map(|(i, _)| i)
                .collect()
        };
        let total: f64 = members.iter().map(|&i| frame.cells[i].weight).sum();
        let mut by_cat: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for &i in &members {
            let c = frame.cells[i].attributes.get(&t.variable).map(|c| normalize(c)).unwrap_or_default();
            by_cat.entry(c).or_default().push(i);
        }
        let mut parts = Vec::new();
        for (cat, share) in &t.shares {
            let cells = by_cat.remove(cat).unwrap_or_default();
            let mass: f64 = cells.iter().map(|&i| frame.cells[i].weight).sum();
            if *share > 0.0 && mass <= 0.0 {
                return Err(FrameError::StructuralZero {
                    geography: t.geography.clone(),
                    variable: t.variable.clone(),
                    category: cat.clone(),
                });
            }
            parts.push((cells, *share));
        }
        // categories the target omits are driven to zero
        for (_, cells) in by_cat {
            parts.push((cells, 0.0));
        }
        groups.push(Group {
            total,
            parts,
        });
    }
    Ok(groups)
}

fn margin_error(w: &[f64], groups: &[Group]) -> f64 {
    groups
        .iter()
        .flat_map(|g| {
            g.parts.iter().map(move |(cells, share)| {
                let m: f64 = cells.iter().map(|&i| w[i]).sum();
                if g.total > 0.0 {
                    (m / g.total - share).abs()
                } else {
                    0.0
                }
            })
        })
        .fold(0.0, f64::max)
}

/// Iterative proportional fitting to every target, in target order per sweep.
///
/// Each geography keeps the total weight it started with.
pub fn rake_with_history(
    frame: &StratFrame,
    targets: &[MarginTarget],
    opts: &RakeOptions,
) -> Result<RakeResult, FrameError> {
    let groups = rake_groups(frame, targets, opts)?;
    let mut w: Vec<f64> = frame.cells.iter().map(|c| c.weight.max(0.0)).collect();
    let mut history = Vec::new();
    let mut err = margin_error(&w, &groups);
    let mut sweeps = 0;
    while err > opts.tol {
        if sweeps == opts.max_iter {
            return Err(FrameError::NonConvergence {
                iterations: sweeps,
                achieved_error: err,
            });
        }
        for g in &groups {
            for (cells, share) in &g.parts {
                let m: f64 = cells.iter().map(|&i| w[i]).sum();
                let f = if m > 0.0 { share * g.total / m } else { 0.0 };
                for &i in cells {
                    w[i] *= f;
                }
            }
        }
        sweeps += 1;
        err = margin_error(&w, &groups);
        history.push(err);
    }
    log::debug!("raking to {} targets converged after {sweeps} sweeps", groups.len());
    let mut out = frame.clone();
    for (c, wi) in out.cells.iter_mut().zip(w) {
        c.weight = wi;
    }
    Ok(RakeResult {
        frame: out,
        sweeps,
        error_history: history,
    })
}

pub fn rake(frame: &StratFrame, targets: &[MarginTarget], tol: f64, max_iter: usize) -> Result<StratFrame, FrameError> {
    rake_with_history(
        frame,
        targets,
        &RakeOptions {
            tol,
            max_iter,
            geography_title: None,
        },
    )
    .map(|r| r.frame)
}

/// Draws Ω⋆ quota units across cells in proportion to weight.
///
/// Uses sequential conditional binomials so the draw is an exact multinomial.
pub fn sample_daughter_frame(mother: &StratFrame, omega_star: u32, seed: u64) -> Result<QuotaState, FrameError> {
    let total: f64 = mother.cells.iter().map(|c| c.weight.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(FrameError::EmptyFrame);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left = omega_star as u64;
    let mut rest = total;
    let mut quota = Vec::with_capacity(mother.cells.len());
    for c in &mother.cells {
        let w = c.weight.max(0.0);
        let k = if left == 0 || w <= 0.0 {
            0
        } else if w >= rest {
            left
        } else {
            let p = (w / rest).clamp(0.0, 1.0);
            Binomial::new(left, p).expect("valid binomial").sample(&mut rng)
        };
        quota.push(k as u32);
        left -= k;
        rest -= w;
    }
    // floating leftovers land on the heaviest cell
    if left > 0 {
        let heaviest = (0..mother.cells.len())
            .max_by(|&a, &b| mother.cells[a].weight.total_cmp(&mother.cells[b].weight))
            .expect("non-empty frame");
        quota[heaviest] += left as u32;
    }
    Ok(QuotaState::new(mother.clone(), quota)?)
}
