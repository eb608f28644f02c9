//! Dynamic Hamiltonian Monte Carlo: multinomial trajectory sampling with the
//! generalized no-U-turn criterion, dual-averaging step size and windowed
//! diagonal metric adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::density::LogDensity;
use super::MrpError;

/// Energy error above which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub max_tree_depth: usize,
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub adapt_delta: f64,
    /// Initial values are uniform on `(-r, r)` in the unconstrained space.
    #[serde(default = "default_radius")]
    pub init_radius: f64,
}

fn default_delta() -> f64 {
    0.8
}

fn default_radius() -> f64 {
    2.0
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            chains: 4,
            iterations: 2000,
            warmup: 1000,
            thin: 1,
            max_tree_depth: 10,
            seed: 1,
            adapt_delta: default_delta(),
            init_radius: default_radius(),
        }
    }
}

impl SamplerSettings {
    /// Eight chains of 5,000 iterations, 4,750 of them warmup, thinned by four.
    pub fn production(seed: u64) -> Self {
        SamplerSettings {
            chains: 8,
            iterations: 5000,
            warmup: 4750,
            thin: 4,
            max_tree_depth: 15,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), MrpError> {
        if self.chains == 0 {
            return Err(MrpError::Settings("need at least one chain".into()));
        }
        if self.iterations <= self.warmup {
            return Err(MrpError::Settings("iterations must exceed warmup".into()));
        }
        if self.thin == 0 {
            return Err(MrpError::Settings("thin must be positive".into()));
        }
        if self.max_tree_depth == 0 {
            return Err(MrpError::Settings("tree depth must be positive".into()));
        }
        if !(self.adapt_delta > 0.0 && self.adapt_delta < 1.0) {
            return Err(MrpError::Settings("adapt_delta must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn post_warmup(&self) -> usize {
        self.iterations - self.warmup
    }

    /// Draws kept when the chain-major pool of post-warmup draws is thinned.
    pub fn retained_draws(&self) -> usize {
        (self.chains * self.post_warmup()).div_ceil(self.thin)
    }
}

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

/// Dual averaging of the log step size.
#[derive(Debug, Clone)]
struct StepSizeAdapter {
    mu: f64,
    delta: f64,
    gamma: f64,
    kappa: f64,
    t0: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl StepSizeAdapter {
    fn new(delta: f64) -> Self {
        StepSizeAdapter {
            mu: 0.0,
            delta,
            gamma: 0.05,
            kappa: 0.75,
            t0: 10.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    fn learn(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule for metric estimation: an initial fast buffer, doubling
/// slow windows, and a terminal fast buffer.
#[derive(Debug, Clone)]
struct MetricAdapter {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MetricAdapter {
    fn new(warmup: usize, dim: usize) -> Self {
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        let enabled = warmup >= 20;
        if enabled && init + base + term > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - (init + term);
        }
        MetricAdapter {
            warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window: (init + base).saturating_sub(1),
            counter: 0,
            enabled,
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer && self.counter < self.warmup - self.term_buffer && self.counter != self.warmup
    }

    fn end_of_window(&self) -> bool {
        self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        if self.next_window == self.warmup - self.term_buffer - 1 {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != self.warmup - self.term_buffer - 1 {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.warmup - self.term_buffer {
                self.next_window = self.warmup - self.term_buffer - 1;
            }
        }
    }

    /// Adds a draw; returns true when `inv_metric` was replaced.
    fn learn(&mut self, inv_metric: &mut [f64], q: &[f64]) -> bool {
        if !self.enabled {
            return false;
        }
        if self.in_window() {
            self.n += 1.0;
            for i in 0..q.len() {
                let d = q[i] - self.mean[i];
                self.mean[i] += d / self.n;
                self.m2[i] += d * (q[i] - self.mean[i]);
            }
        }
        if self.end_of_window() {
            self.compute_next_window();
            let n = self.n;
            for i in 0..inv_metric.len() {
                let var = if n > 1.0 { self.m2[i] / (n - 1.0) } else { 1.0 };
                // regularized toward 1e-3 as in common practice
                inv_metric[i] = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            }
            self.n = 0.0;
            self.mean.iter_mut().for_each(|m| *m = 0.0);
            self.m2.iter_mut().for_each(|m| *m = 0.0);
            self.counter += 1;
            return true;
        }
        self.counter += 1;
        false
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One transition's statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStats {
    pub accept: f64,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
}

struct Sampler<'a, D: LogDensity> {
    target: &'a D,
    inv_metric: Vec<f64>,
    eps: f64,
    max_depth: usize,
    rng: ChaCha8Rng,
    // per-transition accumulators
    h0: f64,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

impl<D: LogDensity> Sampler<'_, D> {
    fn hamiltonian(&self, z: &State) -> f64 {
        -z.lp + 0.5 * z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&mut self, z: &mut State) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = self.rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    /// Returns false if the density could not be evaluated at the new position.
    fn leapfrog(&self, z: &mut State, eps: f64) -> bool {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        match self.target.log_density_grad(&z.q, &mut z.grad) {
            Ok(lp) => z.lp = lp,
            Err(_) => return false,
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        true
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut State,
        z_propose: &mut State,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            let ok = self.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let mut h = if ok { self.hamiltonian(z) } else { f64::INFINITY };
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_add(*log_sum_weight, self.h0 - h);
            self.sum_metro += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }
        let dim = z.q.len();

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            sign,
            &mut lsw_init,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            sign,
            &mut lsw_final,
        ) {
            return false;
        }

        let lsw_subtree = log_add(lsw_init, lsw_final);
        *log_sum_weight = log_add(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = add(&rho_init, &p_final_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let rho_ext = add(&rho_final, &p_init_end);
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }

    fn transition(&mut self, z: &mut State) -> TransitionStats {
        self.sample_momentum(z);
        let dim = z.q.len();
        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = self.p_sharp(&z.p);
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp_fwd_fwd.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp_fwd_fwd.clone();

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        self.h0 = self.hamiltonian(z);
        self.n_leapfrog = 0;
        self.sum_metro = 0.0;
        self.divergent = false;
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                let mut zz = z_fwd.clone();
                let v = self.build_tree(
                    depth,
                    &mut zz,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    1.0,
                    &mut lsw_subtree,
                );
                z_fwd = zz;
                v
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                let mut zz = z_bck.clone();
                let v = self.build_tree(
                    depth,
                    &mut zz,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    -1.0,
                    &mut lsw_subtree,
                );
                z_bck = zz;
                v
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_add(log_sum_weight, lsw_subtree);

            rho = add(&rho_bck, &rho_fwd);
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let ext = add(&rho_bck, &p_fwd_bck);
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &ext);
            let ext = add(&rho_fwd, &p_bck_fwd);
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }
        *z = z_sample;
        TransitionStats {
            accept: if self.n_leapfrog > 0 {
                self.sum_metro / self.n_leapfrog as f64
            } else {
                0.0
            },
            depth,
            n_leapfrog: self.n_leapfrog,
            divergent: self.divergent,
        }
    }

    /// Doubles or halves the step until the one-step acceptance crosses 0.8.
    fn init_step_size(&mut self, z: &State) {
        let start = z.clone();
        let mut probe = start.clone();
        self.sample_momentum(&mut probe);
        let h0 = self.hamiltonian(&probe);
        let h = if self.leapfrog(&mut probe, self.eps) {
            self.hamiltonian(&probe)
        } else {
            f64::INFINITY
        };
        let delta = h0 - if h.is_nan() { f64::INFINITY } else { h };
        let direction = if delta > 0.8f64.ln() { 1 } else { -1 };
        for _ in 0..100 {
            let mut probe = start.clone();
            self.sample_momentum(&mut probe);
            let h0 = self.hamiltonian(&probe);
            let h = if self.leapfrog(&mut probe, self.eps) {
                self.hamiltonian(&probe)
            } else {
                f64::INFINITY
            };
            let delta = h0 - if h.is_nan() { f64::INFINITY } else { h };
            if (direction == 1 && !(delta > 0.8f64.ln())) || (direction == -1 && !(delta < 0.8f64.ln())) {
                break;
            }
            self.eps = if direction == 1 { 2.0 * self.eps } else { 0.5 * self.eps };
            if !(self.eps > 1e-12 && self.eps < 1e7) {
                self.eps = self.eps.clamp(1e-12, 1e7);
                break;
            }
        }
    }
}

/// Output of one chain; draws are post-warmup unconstrained positions.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub chain: usize,
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<TransitionStats>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

fn initial_state<D: LogDensity>(target: &D, settings: &SamplerSettings, rng: &mut ChaCha8Rng) -> Result<State, MrpError> {
    let dim = target.dim();
    let r = settings.init_radius;
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim)
            .map(|_| if r > 0.0 { rng.random_range(-r..r) } else { 0.0 })
            .collect();
        let mut grad = vec![0.0; dim];
        if let Ok(lp) = target.log_density_grad(&q, &mut grad) {
            return Ok(State {
                q,
                p: vec![0.0; dim],
                grad,
                lp,
            });
        }
    }
    Err(MrpError::Initialization)
}

/// Runs one chain with its own random stream.
pub fn run_chain<D: LogDensity>(target: &D, settings: &SamplerSettings, chain: usize) -> Result<ChainOutput, MrpError> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(chain as u64);
    let dim = target.dim();
    let mut z = initial_state(target, settings, &mut rng)?;
    let mut s = Sampler {
        target,
        inv_metric: vec![1.0; dim],
        eps: 1.0,
        max_depth: settings.max_tree_depth,
        rng,
        h0: 0.0,
        n_leapfrog: 0,
        sum_metro: 0.0,
        divergent: false,
    };
    s.init_step_size(&z);
    let mut step = StepSizeAdapter::new(settings.adapt_delta);
    step.restart(s.eps);
    let mut metric = MetricAdapter::new(settings.warmup, dim);

    for _ in 0..settings.warmup {
        let st = s.transition(&mut z);
        s.eps = step.learn(st.accept);
        if metric.learn(&mut s.inv_metric, &z.q) {
            s.init_step_size(&z);
            step.restart(s.eps);
        }
    }
    if settings.warmup > 0 {
        s.eps = step.final_step();
    }

    let n = settings.post_warmup();
    let mut draws = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);
    for _ in 0..n {
        let st = s.transition(&mut z);
        draws.push(z.q.clone());
        stats.push(st);
    }
    Ok(ChainOutput {
        chain,
        draws,
        stats,
        step_size: s.eps,
        inv_metric: s.inv_metric,
    })
}

/// Runs every chain concurrently; output is ordered by chain index.
pub fn run_chains<D: LogDensity>(target: &D, settings: &SamplerSettings) -> Result<Vec<ChainOutput>, MrpError> {
    settings.validate()?;
    let results: Vec<Result<ChainOutput, MrpError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..settings.chains)
            .map(|c| scope.spawn(move || run_chain(target, settings, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(MrpError::Settings("chain thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

/// Classic split-R̂ over chains of equal length; `None` with fewer than four draws per chain.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains.iter().map(Vec::len).min()?;
    if n < 4 {
        return None;
    }
    let half = n / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..n]])
        .collect();
    let m = halves.len() as f64;
    let nh = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nh).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nh / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nh - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return if b <= 0.0 { Some(1.0) } else { None };
    }
    let var_plus = (nh - 1.0) / nh * w + b / nh;
    Some((var_plus / w).sqrt())
}
