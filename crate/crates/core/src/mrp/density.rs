//! Training data and the log posterior with its exact gradient.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{logistic, EffectPrior, Model, ParameterVector, ScaledBlock};
use super::MrpError;
use crate::domain::SiliconResponse;

/// One respondent, already indexed against a model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub y: usize,
    /// `None` for respondents without a known area.
    pub area: Option<usize>,
    /// Level per effect, in spec order.
    pub levels: Vec<usize>,
    pub poll: usize,
}

/// Respondents sharing every covariate, with choice counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub area: Option<usize>,
    pub levels: Vec<usize>,
    pub poll: usize,
    pub counts: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub missing_outcome: usize,
    pub unknown_outcome: usize,
    pub missing_covariate: usize,
    pub unknown_area: usize,
    pub stateless_excluded: usize,
    pub unknown_poll: usize,
}

impl DropReport {
    pub fn total(&self) -> usize {
        self.missing_outcome
            + self.unknown_outcome
            + self.missing_covariate
            + self.unknown_area
            + self.stateless_excluded
            + self.unknown_poll
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub patterns: Vec<Pattern>,
    pub n_obs: usize,
    pub n_stateless: usize,
    pub dropped: DropReport,
}

impl TrainingData {
    pub fn from_observations(model: &Model, obs: &[Observation]) -> Result<Self, MrpError> {
        let j = model.n_choices();
        let n_polls = model.spec.polls.len().max(1);
        let mut groups: BTreeMap<(Option<usize>, Vec<usize>, usize), Vec<f64>> = BTreeMap::new();
        let mut n_stateless = 0;
        for o in obs {
            if o.y >= j {
                return Err(MrpError::Data(format!("choice index {} out of range", o.y)));
            }
            match o.area {
                Some(a) if a >= model.spec.graph.len() => {
                    return Err(MrpError::Data(format!("area index {a} out of range")))
                }
                None if !model.spec.include_no_state => {
                    return Err(MrpError::Data("stateless respondent without a no-state effect".into()))
                }
                None => n_stateless += 1,
                _ => {}
            }
            if o.levels.len() != model.spec.effects.len() {
                return Err(MrpError::Data("wrong number of effect levels".into()));
            }
            for (e, &l) in o.levels.iter().enumerate() {
                if l >= model.spec.effects[e].categories.len() {
                    return Err(MrpError::Data(format!("level {l} out of range for `{}`", model.spec.effects[e].title)));
                }
            }
            if o.poll >= n_polls {
                return Err(MrpError::Data(format!("poll index {} out of range", o.poll)));
            }
            groups
                .entry((o.area, o.levels.clone(), o.poll))
                .or_insert_with(|| vec![0.0; j])[o.y] += 1.0;
        }
        let patterns = groups
            .into_iter()
            .map(|((area, levels, poll), counts)| Pattern {
                area,
                levels,
                poll,
                total: counts.iter().sum(),
                counts,
            })
            .collect();
        Ok(TrainingData {
            patterns,
            n_obs: obs.len(),
            n_stateless,
            dropped: DropReport::default(),
        })
    }

    /// Indexes responses against the model; unusable responses are counted and skipped.
    pub fn from_responses(model: &Model, responses: &[SiliconResponse]) -> Result<Self, MrpError> {
        let mut drop = DropReport::default();
        let mut obs = Vec::with_capacity(responses.len());
        'resp: for r in responses {
            let Some(cat) = r.category(&model.spec.outcome_title) else {
                drop.missing_outcome += 1;
                continue;
            };
            let Some(y) = model.choice_index(cat) else {
                drop.unknown_outcome += 1;
                continue;
            };
            let area = match r.area.as_deref() {
                Some(a) => match model.spec.graph.index_of(a) {
                    Some(i) => Some(i),
                    None => {
                        drop.unknown_area += 1;
                        continue;
                    }
                },
                None if model.spec.include_no_state => None,
                None => {
                    drop.stateless_excluded += 1;
                    continue;
                }
            };
            let mut levels = Vec::with_capacity(model.spec.effects.len());
            for (e, spec) in model.spec.effects.iter().enumerate() {
                match r.category(&spec.title).and_then(|c| model.level_index(e, c)) {
                    Some(l) => levels.push(l),
                    None => {
                        drop.missing_covariate += 1;
                        continue 'resp;
                    }
                }
            }
            let poll = if model.spec.polls.is_empty() {
                0
            } else {
                match model.poll_index(&r.poll_id) {
                    Some(p) => p,
                    None => {
                        drop.unknown_poll += 1;
                        continue;
                    }
                }
            };
            obs.push(Observation { y, area, levels, poll });
        }
        let mut data = Self::from_observations(model, &obs)?;
        data.dropped = drop;
        Ok(data)
    }
}

/// Linear predictor over all choices (reference fixed at 0).
///
/// `area = None` selects the no-state predictor; `poll = None` omits the poll walk.
pub fn linear_predictor(
    model: &Model,
    pv: &ParameterVector,
    area: Option<usize>,
    levels: &[usize],
    poll: Option<usize>,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|m| *m = 0.0);
    for (kk, &c) in model.free.iter().enumerate() {
        let mut mu = pv.alpha[kk];
        for (e, &l) in levels.iter().enumerate() {
            mu += pv.effects[e][kk][l];
        }
        match area {
            Some(s) => {
                if !pv.lambda.is_empty() {
                    mu += pv.lambda[kk][s];
                }
                for (b, zc) in pv.beta[kk].iter().zip(&model.z[kk]) {
                    mu += b * zc[s];
                }
                if let Some(e) = model.interaction_effect {
                    mu += pv.zeta[kk][levels[e]] * model.nu[kk][s];
                }
            }
            None => {
                if !pv.no_state.is_empty() {
                    mu += pv.no_state[kk];
                }
            }
        }
        if let (Some(p), false) = (poll, pv.poll.is_empty()) {
            mu += pv.poll[kk][p];
        }
        out[c] = mu;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(mu: &[f64]) -> Vec<f64> {
    let m = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = mu.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Gradients with respect to the assembled quantities of the linear predictor.
struct Adjoint {
    alpha: Vec<f64>,
    lambda: Vec<Vec<f64>>,
    effects: Vec<Vec<Vec<f64>>>,
    beta: Vec<Vec<f64>>,
    zeta: Vec<Vec<f64>>,
    no_state: Vec<f64>,
    poll: Vec<Vec<f64>>,
}

impl Adjoint {
    fn zeros_like(pv: &ParameterVector) -> Self {
        let z2 = |v: &Vec<Vec<f64>>| v.iter().map(|r| vec![0.0; r.len()]).collect::<Vec<_>>();
        Adjoint {
            alpha: vec![0.0; pv.alpha.len()],
            lambda: z2(&pv.lambda),
            effects: pv.effects.iter().map(z2).collect(),
            beta: z2(&pv.beta),
            zeta: z2(&pv.zeta),
            no_state: vec![0.0; pv.no_state.len()],
            poll: z2(&pv.poll),
        }
    }
}

/// Categorical log-likelihood summed over patterns; accumulates the adjoint.
fn log_likelihood(model: &Model, pv: &ParameterVector, data: &TrainingData, adj: Option<&mut Adjoint>) -> f64 {
    let j = model.n_choices();
    let mut mu = vec![0.0; j];
    let mut ll = 0.0;
    let mut adj = adj;
    for p in &data.patterns {
        let poll = (!pv.poll.is_empty()).then_some(p.poll);
        linear_predictor(model, pv, p.area, &p.levels, poll, &mut mu);
        let lse = log_sum_exp(&mu);
        ll += p.counts.iter().zip(&mu).map(|(n, m)| n * m).sum::<f64>() - p.total * lse;
        let Some(a) = adj.as_deref_mut() else { continue };
        for (kk, &c) in model.free.iter().enumerate() {
            let r = p.counts[c] - p.total * (mu[c] - lse).exp();
            a.alpha[kk] += r;
            for (e, &l) in p.levels.iter().enumerate() {
                a.effects[e][kk][l] += r;
            }
            match p.area {
                Some(s) => {
                    if !a.lambda.is_empty() {
                        a.lambda[kk][s] += r;
                    }
                    for (g, zc) in a.beta[kk].iter_mut().zip(&model.z[kk]) {
                        *g += r * zc[s];
                    }
                    if let Some(e) = model.interaction_effect {
                        a.zeta[kk][p.levels[e]] += r * model.nu[kk][s];
                    }
                }
                None => {
                    if !a.no_state.is_empty() {
                        a.no_state[kk] += r;
                    }
                }
            }
            if let Some(pp) = poll {
                a.poll[kk][pp] += r;
            }
        }
    }
    ll
}

/// Half-normal on a scale through its log: value and d/d(log σ).
fn log_scale_prior(u: f64) -> (f64, f64) {
    let s2 = (2.0 * u).exp();
    (-0.5 * s2 + u, 1.0 - s2)
}

/// Chain rule and priors for a scaled block of deviates.
fn scaled_block(
    theta: &[f64],
    grad: &mut [f64],
    b: &ScaledBlock,
    k: usize,
    walk: bool,
    values: &[Vec<f64>],
    adj: &[Vec<f64>],
) -> f64 {
    let mut lp = 0.0;
    for i in 0..b.n_sigma {
        let (v, g) = log_scale_prior(theta[b.log_sigma + i]);
        lp += v;
        grad[b.log_sigma + i] += g;
    }
    for c in 0..k {
        let si = if b.n_sigma == 1 { 0 } else { c };
        let sigma = theta[b.log_sigma + si].exp();
        let zo = b.z + c * b.len;
        let mut acc = 0.0;
        for l in (0..b.len).rev() {
            grad[b.log_sigma + si] += adj[c][l] * values[c][l];
            if walk {
                acc += adj[c][l];
                grad[zo + l] += sigma * acc;
            } else {
                grad[zo + l] += sigma * adj[c][l];
            }
        }
        for l in 0..b.len {
            let z = theta[zo + l];
            lp -= 0.5 * z * z;
            grad[zo + l] -= z;
        }
    }
    lp
}

fn std_normal(theta: &[f64], grad: &mut [f64], off: usize, n: usize) -> f64 {
    let mut lp = 0.0;
    for i in off..off + n {
        lp -= 0.5 * theta[i] * theta[i];
        grad[i] -= theta[i];
    }
    lp
}

/// Log posterior (up to an additive constant) on the unconstrained scale,
/// writing its gradient into `grad`.
pub fn log_posterior_grad(model: &Model, data: &TrainingData, theta: &[f64], grad: &mut [f64]) -> Result<f64, MrpError> {
    if theta.len() != model.dim() || grad.len() != model.dim() {
        return Err(MrpError::Data("parameter vector has the wrong length".into()));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(MrpError::NonFinite);
    }
    grad.iter_mut().for_each(|g| *g = 0.0);
    let l = &model.layout;
    let k = l.k;
    let pv = model.constrain(theta);
    let mut adj = Adjoint::zeros_like(&pv);
    let mut lp = log_likelihood(model, &pv, data, Some(&mut adj));

    for c in 0..k {
        grad[l.alpha + c] += adj.alpha[c];
    }
    lp += std_normal(theta, grad, l.alpha, k);

    if let Some(sp) = l.spatial {
        let s = l.s;
        let mut g_psi = vec![0.0; s];
        for c in 0..k {
            let (sigma, xi) = (pv.sigma_lambda[c], pv.xi[c]);
            let mut g_logit = 0.0;
            g_psi.iter_mut().for_each(|g| *g = 0.0);
            for a in 0..s {
                let g = adj.lambda[c][a];
                grad[sp.log_sigma + c] += g * pv.lambda[c][a];
                match model.icar.epsilon_of[a] {
                    Some(eps) => {
                        grad[sp.phi + c * s + a] += g * sigma * (1.0 - xi).sqrt();
                        g_psi[a] += g * sigma * (xi / eps).sqrt();
                        // dλ/d(logit ξ), simplified so that ξ near 0 or 1 stays finite
                        g_logit += g
                            * sigma
                            * 0.5
                            * (-pv.phi[c][a] * xi * (1.0 - xi).sqrt() + pv.psi[c][a] * (1.0 - xi) * (xi / eps).sqrt());
                    }
                    None => grad[sp.phi + c * s + a] += g * sigma,
                }
            }
            model
                .icar
                .pull_back(&g_psi, &mut grad[sp.psi + c * sp.psi_dim..sp.psi + (c + 1) * sp.psi_dim]);
            let (v, g) = log_scale_prior(theta[sp.log_sigma + c]);
            lp += v;
            grad[sp.log_sigma + c] += g;
            // Beta(½, ½) on ξ with the logit Jacobian: ½ log ξ + ½ log(1 − ξ)
            let u = theta[sp.logit_xi + c];
            lp += -0.5 * softplus(-u) - 0.5 * softplus(u);
            grad[sp.logit_xi + c] += g_logit + 0.5 - logistic(u);
            lp += std_normal(theta, grad, sp.phi + c * s, s);
            let w = &theta[sp.psi + c * sp.psi_dim..sp.psi + (c + 1) * sp.psi_dim];
            lp += model
                .icar
                .log_density(w, &mut grad[sp.psi + c * sp.psi_dim..sp.psi + (c + 1) * sp.psi_dim]);
        }
    }

    for (e, b) in l.effects.iter().enumerate() {
        let walk = model.spec.effects[e].prior == EffectPrior::RandomWalk;
        lp += scaled_block(theta, grad, b, k, walk, &pv.effects[e], &adj.effects[e]);
    }
    for (c, &(o, n)) in l.beta.iter().enumerate() {
        for i in 0..n {
            grad[o + i] += adj.beta[c][i];
        }
        lp += std_normal(theta, grad, o, n);
    }
    if let Some(b) = l.zeta {
        lp += scaled_block(theta, grad, &b, k, false, &pv.zeta, &adj.zeta);
    }
    if let Some(o) = l.no_state {
        for c in 0..k {
            grad[o + c] += adj.no_state[c];
        }
        lp += std_normal(theta, grad, o, k);
    }
    if let Some(b) = l.poll {
        lp += scaled_block(theta, grad, &b, k, true, &pv.poll, &adj.poll);
    }
    if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(MrpError::NonFinite);
    }
    Ok(lp)
}

/// Log posterior value only.
pub fn log_posterior(model: &Model, data: &TrainingData, theta: &[f64]) -> Result<f64, MrpError> {
    let mut g = vec![0.0; model.dim()];
    log_posterior_grad(model, data, theta, &mut g)
}

/// The categorical log-likelihood alone, at unconstrained parameters.
pub fn log_likelihood_at(model: &Model, data: &TrainingData, theta: &[f64]) -> f64 {
    log_likelihood(model, &model.constrain(theta), data, None)
}

/// A target density for the sampler.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, MrpError>;
}

/// The model posterior given data.
pub struct Posterior<'a> {
    pub model: &'a Model,
    pub data: &'a TrainingData,
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, MrpError> {
        log_posterior_grad(self.model, self.data, x, grad)
    }
}

/// Draws an unconstrained parameter vector from the prior.
pub fn draw_prior<R: Rng + ?Sized>(model: &Model, rng: &mut R) -> Vec<f64> {
    let mut theta: Vec<f64> = (0..model.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let l = &model.layout;
    fn half_normal_log<R: Rng + ?Sized>(theta: &mut [f64], off: usize, n: usize, rng: &mut R) {
        for t in &mut theta[off..off + n] {
            let z: f64 = rng.sample(StandardNormal);
            *t = z.abs().max(1e-300).ln();
        }
    }
    if let Some(sp) = l.spatial {
        half_normal_log(&mut theta, sp.log_sigma, l.k, rng);
        let beta: Beta<f64> = Beta::new(0.5, 0.5).expect("valid Beta");
        for c in 0..l.k {
            let x: f64 = beta.sample(rng).clamp(1e-12, 1.0 - 1e-12);
            theta[sp.logit_xi + c] = (x / (1.0 - x)).ln();
            let o = sp.psi + c * sp.psi_dim;
            let z = theta[o..o + sp.psi_dim].to_vec();
            let w = model.icar.draw(&z);
            theta[o..o + sp.psi_dim].copy_from_slice(&w);
        }
    }
    for b in l.effects.iter().chain(l.zeta.iter()).chain(l.poll.iter()) {
        half_normal_log(&mut theta, b.log_sigma, b.n_sigma, rng);
    }
    theta
}

/// Samples a choice for each observation from the model at `theta`.
pub fn simulate_choices<R: Rng + ?Sized>(model: &Model, theta: &[f64], obs: &mut [Observation], rng: &mut R) {
    let pv = model.constrain(theta);
    let mut mu = vec![0.0; model.n_choices()];
    for o in obs {
        let poll = (!pv.poll.is_empty()).then_some(o.poll);
        linear_predictor(model, &pv, o.area, &o.levels, poll, &mut mu);
        let p = softmax(&mu);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        o.y = p.len() - 1;
        for (j, pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc {
                o.y = j;
                break;
            }
        }
    }
}
