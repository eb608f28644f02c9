//! Posterior prediction over frame cells and post-stratified aggregation.

use serde::{Deserialize, Serialize};

use super::density::{linear_predictor, softmax};
use super::model::{Model, ParameterVector};
use super::MrpError;
use crate::domain::{normalize, StratCell, StratFrame};

/// Area and effect levels of one cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellKey {
    pub area: usize,
    pub levels: Vec<usize>,
}

pub fn cell_key(model: &Model, cell: &StratCell) -> Result<CellKey, MrpError> {
    let spec = &model.spec;
    let area_name = cell
        .attributes
        .get(&spec.area_title)
        .ok_or_else(|| MrpError::UnknownCategory(format!("cell {} has no `{}`", cell.cell_id, spec.area_title)))?;
    let area = spec
        .graph
        .index_of(area_name)
        .ok_or_else(|| MrpError::UnknownCategory(format!("area `{area_name}`")))?;
    let levels = spec
        .effects
        .iter()
        .enumerate()
        .map(|(e, eff)| {
            let c = cell
                .attributes
                .get(&eff.title)
                .ok_or_else(|| MrpError::UnknownCategory(format!("cell {} has no `{}`", cell.cell_id, eff.title)))?;
            model
                .level_index(e, c)
                .ok_or_else(|| MrpError::UnknownCategory(format!("{} = `{c}`", eff.title)))
        })
        .collect::<Result<_, _>>()?;
    Ok(CellKey { area, levels })
}

/// Linear predictor for a frame cell: the known-area predictor without the
/// no-state effect or the poll walk.
pub fn cell_linear_predictor(model: &Model, draw: &ParameterVector, cell: &StratCell) -> Result<Vec<f64>, MrpError> {
    let key = cell_key(model, cell)?;
    let mut mu = vec![0.0; model.n_choices()];
    linear_predictor(model, draw, Some(key.area), &key.levels, None, &mut mu);
    Ok(mu)
}

/// Choice probabilities, `draws × cells × J`.
pub fn cell_probabilities(model: &Model, draws: &[ParameterVector], frame: &StratFrame) -> Result<Vec<Vec<Vec<f64>>>, MrpError> {
    let keys: Vec<CellKey> = frame.cells.iter().map(|c| cell_key(model, c)).collect::<Result<_, _>>()?;
    let mut mu = vec![0.0; model.n_choices()];
    Ok(draws
        .iter()
        .map(|d| {
            keys.iter()
                .map(|k| {
                    linear_predictor(model, d, Some(k.area), &k.levels, None, &mut mu);
                    softmax(&mu)
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellWeights {
    Fixed(Vec<f64>),
    /// `draws × cells`
    PerDraw(Vec<Vec<f64>>),
}

impl CellWeights {
    fn row(&self, d: usize) -> &[f64] {
        match self {
            CellWeights::Fixed(w) => w,
            CellWeights::PerDraw(w) => &w[d],
        }
    }
}

/// Cell to crosstab assignment by one attribute, or a single national crosstab.
pub fn crosstab_map(frame: &StratFrame, title: Option<&str>) -> Result<(Vec<usize>, Vec<String>), MrpError> {
    let Some(t) = title else {
        return Ok((vec![0; frame.cells.len()], vec!["national".into()]));
    };
    let mut labels: Vec<String> = Vec::new();
    let mut map = Vec::with_capacity(frame.cells.len());
    for c in &frame.cells {
        let v = c
            .attributes
            .get(t)
            .ok_or_else(|| MrpError::UnknownCategory(format!("cell {} has no `{t}`", c.cell_id)))?;
        let i = match labels.iter().position(|l| normalize(l) == normalize(v)) {
            Some(i) => i,
            None => {
                labels.push(v.clone());
                labels.len() - 1
            }
        };
        map.push(i);
    }
    Ok((map, labels))
}

/// Weighted average of cell probabilities within each crosstab, `draws × f × J`.
pub fn poststratify(
    cell_probs: &[Vec<Vec<f64>>],
    weights: &CellWeights,
    crosstab: &[usize],
    n_crosstabs: usize,
) -> Result<Vec<Vec<Vec<f64>>>, MrpError> {
    let mut out = Vec::with_capacity(cell_probs.len());
    for (d, cells) in cell_probs.iter().enumerate() {
        let w = weights.row(d);
        if w.len() != cells.len() || crosstab.len() != cells.len() {
            return Err(MrpError::Data("weights, crosstab map and cells differ in length".into()));
        }
        let j = cells.first().map_or(0, Vec::len);
        let mut num = vec![vec![0.0; j]; n_crosstabs];
        let mut den = vec![0.0; n_crosstabs];
        for ((p, &wc), &f) in cells.iter().zip(w).zip(crosstab) {
            if wc < 0.0 {
                return Err(MrpError::Data("negative cell weight".into()));
            }
            den[f] += wc;
            for (n, pj) in num[f].iter_mut().zip(p) {
                *n += wc * pj;
            }
        }
        for (f, d) in den.iter().enumerate() {
            if !(*d > 0.0) {
                return Err(MrpError::EmptyCrosstab(f));
            }
            num[f].iter_mut().for_each(|v| *v /= d);
        }
        out.push(num);
    }
    Ok(out)
}

/// Per-draw difference `π_a − π_b` for each crosstab.
pub fn margin_draws(post: &[Vec<Vec<f64>>], choice_a: usize, choice_b: usize) -> Vec<Vec<f64>> {
    post.iter()
        .map(|fs| fs.iter().map(|p| p[choice_a] - p[choice_b]).collect())
        .collect()
}

/// Linear-interpolation quantile of a sample (sorted internally).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Posterior summary of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Summary {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        q05: quantile_sorted(&v, 0.05),
        q50: quantile_sorted(&v, 0.5),
        q95: quantile_sorted(&v, 0.95),
    }
}
