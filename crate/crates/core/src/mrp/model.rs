//! Model specification, parameter layout and the map from the unconstrained
//! sampling space to named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::icar::{AreaGraph, IcarStructure};
use super::MrpError;
use crate::domain::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectPrior {
    /// First-order random walk over ordered levels.
    RandomWalk,
    /// Exchangeable levels sharing one scale.
    Unstructured,
}

/// An individual-level effect indexed by one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub title: String,
    pub prior: EffectPrior,
    /// Levels in order; random walks follow this order.
    pub categories: Vec<String>,
}

/// Area-level predictors, one value per area in graph order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaCovariates {
    pub columns: BTreeMap<String, Vec<f64>>,
    /// Columns used for each non-reference choice.
    pub by_choice: BTreeMap<String, Vec<String>>,
}

/// Past vote by area-level past share of the same choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSpec {
    /// Title of the past-vote effect supplying the individual level.
    pub title: String,
    /// Past share of each non-reference choice, one value per area.
    pub past_share: BTreeMap<String, Vec<f64>>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub choices: Vec<String>,
    /// Index of the baseline choice, whose linear predictor is fixed at zero.
    #[serde(default)]
    pub reference: usize,
    /// Response title holding the modelled choice.
    pub outcome_title: String,
    /// Frame attribute holding each cell's area.
    pub area_title: String,
    pub graph: AreaGraph,
    #[serde(default = "yes")]
    pub include_area_effect: bool,
    #[serde(default)]
    pub effects: Vec<EffectSpec>,
    #[serde(default)]
    pub covariates: AreaCovariates,
    #[serde(default)]
    pub interaction: Option<InteractionSpec>,
    #[serde(default)]
    pub include_no_state: bool,
    #[serde(default)]
    pub include_poll_walk: bool,
    /// Poll identifiers in fieldwork order.
    #[serde(default)]
    pub polls: Vec<String>,
}

/// Offsets of each block inside the unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub k: usize,
    pub s: usize,
    pub alpha: usize,
    pub spatial: Option<SpatialBlock>,
    pub effects: Vec<ScaledBlock>,
    /// Per choice: offset and number of coefficients.
    pub beta: Vec<(usize, usize)>,
    pub zeta: Option<ScaledBlock>,
    pub no_state: Option<usize>,
    pub poll: Option<ScaledBlock>,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialBlock {
    pub log_sigma: usize,
    pub logit_xi: usize,
    pub phi: usize,
    pub psi: usize,
    /// Basis coordinates per choice.
    pub psi_dim: usize,
}

/// A log scale block followed by standardized deviates, `len` per choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledBlock {
    pub log_sigma: usize,
    /// Number of scales (one per choice, or one shared).
    pub n_sigma: usize,
    pub z: usize,
    pub len: usize,
}

/// A compiled specification: standardized area data, ICAR structure and layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    /// Non-reference choices in order.
    pub free: Vec<usize>,
    pub icar: IcarStructure,
    /// Per free choice: standardized predictor columns, each indexed by area.
    pub z: Vec<Vec<Vec<f64>>>,
    /// Per free choice: standardized past share by area.
    pub nu: Vec<Vec<f64>>,
    /// Index into `spec.effects` of the interaction's past-vote effect.
    pub interaction_effect: Option<usize>,
    pub layout: Layout,
}

/// Centers and scales over areas; a constant column becomes zeros.
pub fn standardize(col: &[f64]) -> Vec<f64> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = if col.len() > 1 {
        col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sd = var.sqrt();
    col.iter()
        .map(|x| if sd > 1e-12 { (x - mean) / sd } else { 0.0 })
        .collect()
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self, MrpError> {
        let j = spec.choices.len();
        if j < 2 {
            return Err(MrpError::Spec("need at least two choices".into()));
        }
        if spec.reference >= j {
            return Err(MrpError::Spec("reference choice out of range".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &spec.choices {
            if !seen.insert(normalize(c)) {
                return Err(MrpError::Spec(format!("duplicate choice `{c}`")));
            }
        }
        let free: Vec<usize> = (0..j).filter(|&c| c != spec.reference).collect();
        let s = spec.graph.len();
        let reference_name = &spec.choices[spec.reference];
        let free_names: Vec<&String> = free.iter().map(|&c| &spec.choices[c]).collect();

        for e in &spec.effects {
            if e.categories.is_empty() {
                return Err(MrpError::Spec(format!("effect `{}` has no levels", e.title)));
            }
        }
        for (name, col) in &spec.covariates.columns {
            if col.len() != s || col.iter().any(|v| !v.is_finite()) {
                return Err(MrpError::Spec(format!("covariate `{name}` needs {s} finite values")));
            }
        }
        for (choice, cols) in &spec.covariates.by_choice {
            if normalize(choice) == normalize(reference_name) {
                return Err(MrpError::Spec("the reference choice takes no predictors".into()));
            }
            if !free_names.iter().any(|c| normalize(c) == normalize(choice)) {
                return Err(MrpError::Spec(format!("unknown choice `{choice}` in covariates")));
            }
            for c in cols {
                if !spec.covariates.columns.contains_key(c) {
                    return Err(MrpError::Spec(format!("unknown covariate `{c}`")));
                }
            }
        }
        let z: Vec<Vec<Vec<f64>>> = free_names
            .iter()
            .map(|name| {
                spec.covariates
                    .by_choice
                    .iter()
                    .find(|(c, _)| normalize(c) == normalize(name))
                    .map(|(_, cols)| cols.iter().map(|c| standardize(&spec.covariates.columns[c])).collect())
                    .unwrap_or_default()
            })
            .collect();

        let (nu, interaction_effect) = match &spec.interaction {
            None => (Vec::new(), None),
            Some(inter) => {
                let e = spec
                    .effects
                    .iter()
                    .position(|e| e.title == inter.title)
                    .ok_or_else(|| MrpError::Spec(format!("interaction effect `{}` is not declared", inter.title)))?;
                let nu = free_names
                    .iter()
                    .map(|name| {
                        let col = inter
                            .past_share
                            .iter()
                            .find(|(c, _)| normalize(c) == normalize(name))
                            .map(|(_, v)| v)
                            .ok_or_else(|| MrpError::Spec(format!("no past share for `{name}`")))?;
                        if col.len() != s || col.iter().any(|v| !v.is_finite()) {
                            return Err(MrpError::Spec(format!("past share for `{name}` needs {s} finite values")));
                        }
                        Ok(standardize(col))
                    })
                    .collect::<Result<Vec<_>, MrpError>>()?;
                (nu, Some(e))
            }
        };
        if spec.include_poll_walk && spec.polls.is_empty() {
            return Err(MrpError::Spec("poll walk needs at least one poll".into()));
        }

        let icar = IcarStructure::new(&spec.graph);
        let k = free.len();
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let alpha = take(k);
        let spatial = spec.include_area_effect.then(|| {
            let psi_dim = icar.dim();
            SpatialBlock {
                log_sigma: take(k),
                logit_xi: take(k),
                phi: take(k * s),
                psi: take(k * psi_dim),
                psi_dim,
            }
        });
        let effects = spec
            .effects
            .iter()
            .map(|e| {
                let len = e.categories.len();
                ScaledBlock {
                    log_sigma: take(k),
                    n_sigma: k,
                    z: take(k * len),
                    len,
                }
            })
            .collect();
        let beta = z.iter().map(|cols| (take(cols.len()), cols.len())).collect();
        let zeta = interaction_effect.map(|e| {
            let len = spec.effects[e].categories.len();
            ScaledBlock {
                log_sigma: take(k),
                n_sigma: k,
                z: take(k * len),
                len,
            }
        });
        let no_state = spec.include_no_state.then(|| take(k));
        let poll = spec.include_poll_walk.then(|| {
            let len = spec.polls.len();
            ScaledBlock {
                log_sigma: take(1),
                n_sigma: 1,
                z: take(k * len),
                len,
            }
        });
        let layout = Layout {
            k,
            s,
            alpha,
            spatial,
            effects,
            beta,
            zeta,
            no_state,
            poll,
            dim: off,
        };
        Ok(Model {
            spec,
            free,
            icar,
            z,
            nu,
            interaction_effect,
            layout,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn n_choices(&self) -> usize {
        self.spec.choices.len()
    }

    pub fn choice_index(&self, name: &str) -> Option<usize> {
        let n = normalize(name);
        self.spec.choices.iter().position(|c| normalize(c) == n)
    }

    pub fn level_index(&self, effect: usize, category: &str) -> Option<usize> {
        let n = normalize(category);
        self.spec.effects[effect]
            .categories
            .iter()
            .position(|c| normalize(c) == n)
    }

    pub fn poll_index(&self, poll_id: &str) -> Option<usize> {
        self.spec.polls.iter().position(|p| p == poll_id)
    }

    /// Maps an unconstrained vector to named parameters.
    pub fn constrain(&self, theta: &[f64]) -> ParameterVector {
        assert_eq!(theta.len(), self.dim(), "parameter vector length");
        let l = &self.layout;
        let (k, s) = (l.k, l.s);
        let alpha = theta[l.alpha..l.alpha + k].to_vec();
        let mut pv = ParameterVector {
            alpha,
            ..Default::default()
        };
        if let Some(sp) = l.spatial {
            for c in 0..k {
                let sigma = theta[sp.log_sigma + c].exp();
                let xi = logistic(theta[sp.logit_xi + c]);
                let phi = theta[sp.phi + c * s..sp.phi + (c + 1) * s].to_vec();
                let w = &theta[sp.psi + c * sp.psi_dim..sp.psi + (c + 1) * sp.psi_dim];
                let psi = self.icar.expand(w, s);
                let lambda = (0..s)
                    .map(|a| match self.icar.epsilon_of[a] {
                        Some(eps) => sigma * (phi[a] * (1.0 - xi).sqrt() + psi[a] * (xi / eps).sqrt()),
                        None => sigma * phi[a],
                    })
                    .collect();
                pv.sigma_lambda.push(sigma);
                pv.xi.push(xi);
                pv.phi.push(phi);
                pv.psi.push(psi);
                pv.lambda.push(lambda);
            }
        }
        for (e, b) in self.spec.effects.iter().zip(&l.effects) {
            let (sig, vals) = scaled_values(theta, b, k, e.prior == EffectPrior::RandomWalk);
            pv.effect_sigma.push(sig);
            pv.effects.push(vals);
        }
        pv.beta = l.beta.iter().map(|&(o, n)| theta[o..o + n].to_vec()).collect();
        if let Some(b) = l.zeta {
            let (sig, vals) = scaled_values(theta, &b, k, false);
            pv.zeta_sigma = sig;
            pv.zeta = vals;
        }
        if let Some(o) = l.no_state {
            pv.no_state = theta[o..o + k].to_vec();
        }
        if let Some(b) = l.poll {
            let (sig, vals) = scaled_values(theta, &b, k, true);
            pv.poll_sigma = sig.first().copied();
            pv.poll = vals;
        }
        pv
    }

    /// Scalar names matching [`ParameterVector::flatten`].
    pub fn parameter_names(&self) -> Vec<String> {
        let sp = &self.spec;
        let fc: Vec<&str> = self.free.iter().map(|&c| sp.choices[c].as_str()).collect();
        let areas = sp.graph.areas();
        let mut out = Vec::new();
        for c in &fc {
            out.push(format!("alpha[{c}]"));
        }
        if self.layout.spatial.is_some() {
            for c in &fc {
                out.push(format!("sigma_lambda[{c}]"));
                out.push(format!("xi[{c}]"));
                for a in areas {
                    out.push(format!("phi[{a}][{c}]"));
                }
                for a in areas {
                    out.push(format!("psi[{a}][{c}]"));
                }
                for a in areas {
                    out.push(format!("lambda[{a}][{c}]"));
                }
            }
        }
        for e in &sp.effects {
            for c in &fc {
                out.push(format!("sigma_{}[{c}]", e.title));
                for l in &e.categories {
                    out.push(format!("{}[{l}][{c}]", e.title));
                }
            }
        }
        for (i, c) in fc.iter().enumerate() {
            let cols = sp
                .covariates
                .by_choice
                .iter()
                .find(|(n, _)| normalize(n) == normalize(c))
                .map(|(_, v)| v.as_slice())
                .unwrap_or(&[]);
            debug_assert_eq!(cols.len(), self.z[i].len());
            for col in cols {
                out.push(format!("beta[{col}][{c}]"));
            }
        }
        if let Some(e) = self.interaction_effect {
            for c in &fc {
                out.push(format!("sigma_zeta[{c}]"));
                for l in &sp.effects[e].categories {
                    out.push(format!("zeta[{l}][{c}]"));
                }
            }
        }
        if self.layout.no_state.is_some() {
            for c in &fc {
                out.push(format!("no_state[{c}]"));
            }
        }
        if self.layout.poll.is_some() {
            out.push("sigma_poll".into());
            for c in &fc {
                for p in &sp.polls {
                    out.push(format!("poll[{p}][{c}]"));
                }
            }
        }
        out
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scales from a log-scale block and the scaled (optionally cumulated) deviates.
fn scaled_values(theta: &[f64], b: &ScaledBlock, k: usize, walk: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let sig: Vec<f64> = (0..b.n_sigma).map(|i| theta[b.log_sigma + i].exp()).collect();
    let vals = (0..k)
        .map(|c| {
            let sigma = if b.n_sigma == 1 { sig[0] } else { sig[c] };
            let z = &theta[b.z + c * b.len..b.z + (c + 1) * b.len];
            let mut acc = 0.0;
            z.iter()
                .map(|&zi| {
                    if walk {
                        acc += zi;
                        sigma * acc
                    } else {
                        sigma * zi
                    }
                })
                .collect()
        })
        .collect();
    (sig, vals)
}

/// Named parameters on their natural scale. Per-choice vectors are indexed by
/// non-reference choice in order; empty when the block is switched off.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub alpha: Vec<f64>,
    pub sigma_lambda: Vec<f64>,
    pub xi: Vec<f64>,
    /// `[choice][area]`
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    /// `[effect][choice]`
    pub effect_sigma: Vec<Vec<f64>>,
    /// `[effect][choice][level]`
    pub effects: Vec<Vec<Vec<f64>>>,
    /// `[choice][column]`
    pub beta: Vec<Vec<f64>>,
    pub zeta_sigma: Vec<f64>,
    /// `[choice][past-vote level]`
    pub zeta: Vec<Vec<f64>>,
    pub no_state: Vec<f64>,
    pub poll_sigma: Option<f64>,
    /// `[choice][poll]`
    pub poll: Vec<Vec<f64>>,
}

impl ParameterVector {
    /// All scalars in the order of [`Model::parameter_names`].
    pub fn flatten(&self) -> Vec<f64> {
        let k = self.alpha.len();
        let mut out = self.alpha.clone();
        for c in 0..self.sigma_lambda.len() {
            out.push(self.sigma_lambda[c]);
            out.push(self.xi[c]);
            out.extend(&self.phi[c]);
            out.extend(&self.psi[c]);
            out.extend(&self.lambda[c]);
        }
        for (sig, vals) in self.effect_sigma.iter().zip(&self.effects) {
            for c in 0..k {
                out.push(sig[c]);
                out.extend(&vals[c]);
            }
        }
        for b in &self.beta {
            out.extend(b);
        }
        for c in 0..self.zeta_sigma.len() {
            out.push(self.zeta_sigma[c]);
            out.extend(&self.zeta[c]);
        }
        out.extend(&self.no_state);
        if let Some(s) = self.poll_sigma {
            out.push(s);
            for p in &self.poll {
                out.extend(p);
            }
        }
        out
    }

    /// Checks scales, mixing weights and the ψ sum-to-zero constraint per component.
    pub fn check_invariants(&self, model: &Model, tol: f64) -> Result<(), String> {
        let scales = self
            .sigma_lambda
            .iter()
            .chain(self.effect_sigma.iter().flatten())
            .chain(&self.zeta_sigma)
            .chain(self.poll_sigma.iter());
        for s in scales {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(format!("scale {s} not positive"));
            }
        }
        for x in &self.xi {
            if !(*x > 0.0 && *x < 1.0) {
                return Err(format!("mixing weight {x} outside (0, 1)"));
            }
        }
        for psi in &self.psi {
            for comp in &model.icar.components {
                let sum: f64 = comp.nodes.iter().map(|&a| psi[a]).sum();
                if sum.abs() > tol {
                    return Err(format!("psi sums to {sum}"));
                }
            }
        }
        Ok(())
    }
}
