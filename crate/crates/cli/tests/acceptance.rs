//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use siliconpoll_cli::{cmd_eval, cmd_infer, cmd_poll, cmd_pool, cmd_simulate, Overrides, RunConfig, SimConfig};
use siliconpoll_core::domain::{Attributes, FeatureDef, FeatureKind, FeatureValue, QueryKind, QuotaState, SiliconResponse, StratCell, StratFrame};
use siliconpoll_core::eval::{bias, change_bias, coverage90, ovl, rmse, spearman, AreaEstimate, OvlGrid};
use siliconpoll_core::filters::{quota_filter, timeline_depth, QuotaDecision};
use siliconpoll_core::frame_builder::{
    extend_frame, rake, rake_with_history, sample_daughter_frame, MarginTarget, RakeOptions, SmoothedCrosstab,
    NATIONAL as ALL,
};
use siliconpoll_core::mrp::*;
use siliconpoll_core::pool::build_query_plan;
use siliconpoll_core::prompts::{is_highly_speculative, parse_annotation, render_annotation, DEFAULT_SPECULATION_THRESHOLD};
use siliconpoll_core::sim::{run_end_to_end, PipelineConfig, PopulationConfig, SelectionConfig};

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, outcome: Result<String, String>) {
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                self.failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- metrics

fn hand_ranks(x: &[f64]) -> Vec<f64> {
    // brute force: rank = 1 + #smaller + (#ties − 1) / 2
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let eq = x.iter().filter(|w| *w == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn hand_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn metrics_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(4..40);
        // rounded values force ties
        let obs: Vec<f64> = (0..n).map(|_| (rng.random_range(-0.4..0.4f64) * 20.0).round() / 20.0).collect();
        let pred: Vec<f64> = obs.iter().map(|o| o + (rng.random_range(-0.1..0.1f64) * 50.0).round() / 50.0).collect();
        let est: Vec<AreaEstimate> = pred
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let w = rng.random_range(0.0..0.08);
                AreaEstimate {
                    area: format!("a{i}"),
                    point: *p,
                    lower: p - w,
                    upper: p + w,
                    draws: None,
                }
            })
            .collect();
        let hb = pred.iter().zip(&obs).map(|(p, o)| p - o).sum::<f64>() / n as f64;
        let hr = (pred.iter().zip(&obs).map(|(p, o)| (p - o).powi(2)).sum::<f64>() / n as f64).sqrt();
        let hs = hand_pearson(&hand_ranks(&pred), &hand_ranks(&obs));
        let hc = est
            .iter()
            .zip(&obs)
            .filter(|(e, o)| e.lower <= **o && **o <= e.upper)
            .count() as f64
            / n as f64;
        let got = [
            bias(&pred, &obs).map_err(|e| e.to_string())?,
            rmse(&pred, &obs).map_err(|e| e.to_string())?,
            spearman(&pred, &obs).map_err(|e| e.to_string())?,
            coverage90(&est, &obs).map_err(|e| e.to_string())?,
        ];
        for (g, h) in got.iter().zip([hb, hr, hs, hc]) {
            worst = worst.max((g - h).abs());
        }
    }
    ensure(worst < 1e-10, format!("max deviation {worst:.2e} over 100 instances"))
}

fn metrics_ovl() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let d = Normal::new(0.0, 1.0).unwrap();
    let a: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..n).map(|_| 1.0 + d.sample(&mut rng)).collect();
    let v = ovl(&a, &b, &OvlGrid::default()).map_err(|e| e.to_string())?;
    ensure((v - 0.6171).abs() <= 0.01, format!("OVL {v:.4} (target 0.6171 ± 0.01)"))
}

fn metrics_change_bias() -> Result<String, String> {
    let v = change_bias(2.1, 0.0, 2.3);
    ensure((v + 0.2).abs() < 1e-12, format!("change bias {v:.6}"))
}

// ---------------------------------------------------------------- sampler

fn graph(n: usize, edges: &[(usize, usize)]) -> AreaGraph {
    AreaGraph::new((0..n).map(|i| format!("s{i}")).collect(), edges).unwrap()
}

fn base_spec(choices: usize, g: AreaGraph) -> ModelSpec {
    ModelSpec {
        choices: (0..choices).map(|c| format!("c{c}")).collect(),
        reference: 0,
        outcome_title: "VOTE".into(),
        area_title: "AREA".into(),
        graph: g,
        include_area_effect: false,
        effects: vec![],
        covariates: AreaCovariates::default(),
        interaction: None,
        include_no_state: false,
        include_poll_walk: false,
        polls: vec![],
    }
}

fn effect(title: &str, prior: EffectPrior, n: usize) -> EffectSpec {
    EffectSpec {
        title: title.into(),
        prior,
        categories: (0..n).map(|i| format!("{title}{i}")).collect(),
    }
}

fn full_model() -> Model {
    let g = graph(3, &[(0, 1), (1, 2)]);
    Model::new(ModelSpec {
        include_area_effect: true,
        effects: vec![
            effect("AGE", EffectPrior::RandomWalk, 3),
            effect("SEX", EffectPrior::Unstructured, 2),
            effect("V20", EffectPrior::Unstructured, 3),
        ],
        covariates: AreaCovariates {
            columns: BTreeMap::from([
                ("past".to_string(), vec![0.3, 0.5, 0.6]),
                ("ballot".to_string(), vec![1.0, 0.0, 1.0]),
            ]),
            by_choice: BTreeMap::from([
                ("c1".to_string(), vec!["past".to_string()]),
                ("c2".to_string(), vec!["ballot".to_string(), "past".to_string()]),
            ]),
        },
        interaction: Some(InteractionSpec {
            title: "V20".into(),
            past_share: BTreeMap::from([
                ("c1".to_string(), vec![0.3, 0.5, 0.6]),
                ("c2".to_string(), vec![0.05, 0.02, 0.04]),
            ]),
        }),
        include_no_state: true,
        include_poll_walk: true,
        polls: vec!["p1".into(), "p2".into()],
        ..base_spec(3, g)
    })
    .unwrap()
}

fn random_obs(model: &Model, n: usize, rng: &mut ChaCha8Rng) -> Vec<Observation> {
    (0..n)
        .map(|_| Observation {
            y: rng.random_range(0..model.n_choices()),
            area: if rng.random_bool(0.15) {
                None
            } else {
                Some(rng.random_range(0..model.spec.graph.len()))
            },
            levels: model
                .spec
                .effects
                .iter()
                .map(|e| rng.random_range(0..e.categories.len()))
                .collect(),
            poll: rng.random_range(0..model.spec.polls.len().max(1)),
        })
        .collect()
}

fn sampler_gradient() -> Result<String, String> {
    let m = full_model();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let data = TrainingData::from_observations(&m, &random_obs(&m, 40, &mut rng)).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let theta: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut g = vec![0.0; m.dim()];
        log_posterior_grad(&m, &data, &theta, &mut g).map_err(|e| e.to_string())?;
        let mut t = theta.clone();
        for i in 0..theta.len() {
            t[i] = theta[i] + h;
            let up = log_posterior(&m, &data, &t).unwrap();
            t[i] = theta[i] - h;
            let dn = log_posterior(&m, &data, &t).unwrap();
            t[i] = theta[i];
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    ensure(worst < 1e-5, format!("max relative error {worst:.2e} at 50 points, dim {}", m.dim()))
}

fn sampler_grid() -> Result<String, String> {
    let m = Model::new(base_spec(2, graph(1, &[]))).unwrap();
    let obs: Vec<Observation> = (0..40)
        .map(|i| Observation {
            y: usize::from(i < 14),
            area: Some(0),
            levels: vec![],
            poll: 0,
        })
        .collect();
    let data = TrainingData::from_observations(&m, &obs).unwrap();
    let settings = SamplerSettings {
        chains: 4,
        iterations: 3000,
        warmup: 1000,
        seed: 33,
        ..Default::default()
    };
    let post = sample(&m, &data, &settings).map_err(|e| e.to_string())?;
    let a: Vec<f64> = post.draws.iter().map(|d| d.params.alpha[0]).collect();
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let sd = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    // numerical posterior on a fine grid
    let (lo, hi, k) = (-6.0, 6.0, 200_001);
    let step = (hi - lo) / (k - 1) as f64;
    let logp: Vec<f64> = (0..k)
        .map(|i| {
            let x = lo + i as f64 * step;
            -0.5 * x * x + 14.0 * x - 40.0 * (1.0 + x.exp()).ln()
        })
        .collect();
    let mx = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let gm = (0..k).map(|i| (lo + i as f64 * step) * w[i]).sum::<f64>() / z;
    let gs = ((0..k).map(|i| (lo + i as f64 * step - gm).powi(2) * w[i]).sum::<f64>() / z).sqrt();
    ensure(
        (mean - gm).abs() < 0.02 && (sd - gs).abs() < 0.02,
        format!("mean {mean:.4} vs {gm:.4}, sd {sd:.4} vs {gs:.4}"),
    )
}

fn sbc() -> Result<String, String> {
    let m = Model::new(ModelSpec {
        effects: vec![effect("G", EffectPrior::Unstructured, 3)],
        ..base_spec(2, graph(2, &[(0, 1)]))
    })
    .unwrap();
    let l = &m.layout;
    let (reps, bins) = (200, 10);
    let settings = SamplerSettings {
        chains: 1,
        iterations: 1490,
        warmup: 500,
        thin: 10,
        ..Default::default()
    };
    if settings.retained_draws() != 99 {
        return Err("SBC needs 99 retained draws".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let std = Normal::<f64>::new(0.0, 1.0).unwrap();
    let mut counts = vec![vec![0usize; bins]; 3];
    for rep in 0..reps {
        let mut theta = vec![0.0; m.dim()];
        theta[l.alpha] = std.sample(&mut rng);
        theta[l.effects[0].log_sigma] = f64::ln(std.sample(&mut rng).abs());
        for i in 0..3 {
            theta[l.effects[0].z + i] = std.sample(&mut rng);
        }
        let truth = m.constrain(&theta);
        let mut eta = vec![0.0; 2];
        let obs: Vec<Observation> = (0..50)
            .map(|_| {
                let level = rng.random_range(0..3);
                let area = rng.random_range(0..2);
                linear_predictor(&m, &truth, Some(area), &[level], None, &mut eta);
                let p1 = 1.0 / (1.0 + (eta[0] - eta[1]).exp());
                Observation {
                    y: usize::from(rng.random::<f64>() < p1),
                    area: Some(area),
                    levels: vec![level],
                    poll: 0,
                }
            })
            .collect();
        let data = TrainingData::from_observations(&m, &obs).unwrap();
        let post = sample(&m, &data, &SamplerSettings { seed: rep as u64, ..settings.clone() })
            .map_err(|e| format!("rep {rep}: {e}"))?;
        let stats = [
            (truth.alpha[0], post.draws.iter().map(|d| d.params.alpha[0]).collect::<Vec<_>>()),
            (
                truth.effect_sigma[0][0],
                post.draws.iter().map(|d| d.params.effect_sigma[0][0]).collect(),
            ),
            (truth.effects[0][0][0], post.draws.iter().map(|d| d.params.effects[0][0][0]).collect()),
        ];
        for (k, (t, draws)) in stats.iter().enumerate() {
            let rank = draws.iter().filter(|d| *d < t).count();
            counts[k][rank * bins / 100] += 1;
        }
    }
    let chi = ChiSquared::new((bins - 1) as f64).unwrap();
    let expected = reps as f64 / bins as f64;
    let p: Vec<f64> = counts
        .iter()
        .map(|c| {
            let x2: f64 = c.iter().map(|o| (*o as f64 - expected).powi(2) / expected).sum();
            1.0 - chi.cdf(x2)
        })
        .collect();
    ensure(
        p.iter().all(|p| *p > 0.01),
        format!("χ² p-values alpha {:.3}, sigma {:.3}, effect {:.3} over {reps} reps", p[0], p[1], p[2]),
    )
}

// ---------------------------------------------------------------- ICAR

fn icar_scaling() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.random_range(2..=12);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(0.35) {
                    edges.push((a, b));
                }
            }
        }
        let g = graph(n, &edges);
        // pseudo-inverse of the full Laplacian by eigendecomposition
        let mut q = DMatrix::<f64>::zeros(n, n);
        for &(a, b) in &edges {
            q[(a, b)] -= 1.0;
            q[(b, a)] -= 1.0;
            q[(a, a)] += 1.0;
            q[(b, b)] += 1.0;
        }
        let eig = SymmetricEigen::new(q);
        let mut pinv = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            if eig.eigenvalues[k].abs() > 1e-9 {
                let v = eig.eigenvectors.column(k);
                pinv += (v * v.transpose()) / eig.eigenvalues[k];
            }
        }
        let got = icar_scaling_factor(&g);
        for comp in g.components() {
            let expect = (comp.len() > 1)
                .then(|| (comp.iter().map(|&a| pinv[(a, a)].ln()).sum::<f64>() / comp.len() as f64).exp());
            for &a in &comp {
                match (got[a], expect) {
                    (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                    (None, None) => {}
                    _ => return Err(format!("isolation mismatch at node {a}")),
                }
            }
        }
    }
    ensure(worst < 1e-10, format!("max deviation {worst:.2e} over 10 graphs"))
}

fn icar_sum_to_zero() -> Result<String, String> {
    // two components plus an isolated node
    let g = graph(7, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5)]);
    let m = Model::new(ModelSpec {
        include_area_effect: true,
        effects: vec![effect("SEX", EffectPrior::Unstructured, 2)],
        include_no_state: true,
        ..base_spec(3, g)
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = TrainingData::from_observations(&m, &random_obs(&m, 120, &mut rng)).unwrap();
    let post = sample(
        &m,
        &data,
        &SamplerSettings {
            chains: 2,
            iterations: 600,
            warmup: 300,
            seed: 8,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let comps = m.spec.graph.components();
    let mut worst: f64 = 0.0;
    for d in &post.draws {
        for psi in &d.params.psi {
            for c in comps.iter().filter(|c| c.len() > 1) {
                worst = worst.max(c.iter().map(|&a| psi[a]).sum::<f64>().abs());
            }
        }
    }
    ensure(worst < 1e-10, format!("max |Σψ| {worst:.2e} over {} draws", post.draws.len()))
}

// ---------------------------------------------------------------- frames

fn cell(id: u32, pairs: &[(&str, String)], weight: f64) -> StratCell {
    StratCell {
        cell_id: id,
        attributes: pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        weight,
    }
}

fn frame_ipf_limit() -> Result<String, String> {
    let f = StratFrame {
        cells: vec![
            cell(0, &[("ROW", "a".into()), ("COL", "x".into())], 1.0),
            cell(1, &[("ROW", "a".into()), ("COL", "y".into())], 2.0),
            cell(2, &[("ROW", "b".into()), ("COL", "x".into())], 3.0),
            cell(3, &[("ROW", "b".into()), ("COL", "y".into())], 4.0),
        ],
        attribute_schema: vec!["ROW".into(), "COL".into()],
    };
    let t = [
        MarginTarget::new(ALL, "ROW", &[("a", 0.6), ("b", 0.4)]).unwrap(),
        MarginTarget::new(ALL, "COL", &[("x", 0.7), ("y", 0.3)]).unwrap(),
    ];
    let got = rake(&f, &t, 1e-13, 10_000).map_err(|e| e.to_string())?;
    // the 2×2 limit keeps the seed's odds ratio: solve for the top-left cell
    let total = 10.0;
    let (r, c) = (0.6 * total, 0.7 * total);
    let or = (1.0 * 4.0) / (2.0 * 3.0);
    // x(total − r − c + x) = or (r − x)(c − x)
    let (qa, qb, qc): (f64, f64, f64) = (1.0 - or, (total - r - c) + or * (r + c), -or * r * c);
    let x = if qa.abs() < 1e-15 { -qc / qb } else { (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa) };
    let expect = [x, r - x, c - x, total - r - c + x];
    let worst = got
        .cells
        .iter()
        .zip(expect)
        .map(|(c, e)| (c.weight - e).abs())
        .fold(0.0, f64::max);
    ensure(worst < 1e-9, format!("max deviation from closed-form limit {worst:.2e}"))
}

fn frame_ipf_random() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let vars = ["A", "B", "C", "D"];
    let mut worst_sweeps = 0;
    for k in 0..50 {
        let dims: Vec<usize> = (0..4).map(|_| rng.random_range(2..4)).collect();
        let n: usize = dims.iter().product();
        let cells: Vec<StratCell> = (0..n)
            .map(|i| {
                let mut rem = i;
                let mut a = Attributes::new();
                for (v, d) in vars.iter().zip(&dims) {
                    a.insert(v.to_string(), format!("c{}", rem % d));
                    rem /= d;
                }
                StratCell {
                    cell_id: i as u32,
                    attributes: a,
                    weight: rng.random_range(0.05..5.0),
                }
            })
            .collect();
        let frame = StratFrame {
            cells,
            attribute_schema: vars.iter().map(|s| s.to_string()).collect(),
        };
        let targets: Vec<MarginTarget> = vars
            .iter()
            .zip(&dims)
            .map(|(v, &d)| {
                let s: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = s.iter().sum();
                MarginTarget {
                    geography: ALL.into(),
                    variable: v.to_string(),
                    shares: s.iter().enumerate().map(|(i, x)| (format!("c{i}"), x / z)).collect(),
                }
            })
            .collect();
        let r = rake_with_history(&frame, &targets, &RakeOptions::default())
            .map_err(|e| format!("frame {k}: {e}"))?;
        // independent margin check
        let total = r.frame.total_weight();
        for t in &targets {
            for (cat, share) in &t.shares {
                let got: f64 = r
                    .frame
                    .cells
                    .iter()
                    .filter(|c| &c.attributes[&t.variable] == cat)
                    .map(|c| c.weight)
                    .sum::<f64>()
                    / total;
                if (got - share).abs() >= 1e-6 {
                    return Err(format!("frame {k}: {} {cat} off by {:.2e}", t.variable, got - share));
                }
            }
        }
        worst_sweeps = worst_sweeps.max(r.sweeps);
    }
    ensure(worst_sweeps <= 1000, format!("50 frames converged, at most {worst_sweeps} sweeps"))
}

fn frame_extend() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let cats = ["a", "b", "c", "d"];
        let frame = StratFrame {
            cells: cats
                .iter()
                .enumerate()
                .map(|(i, c)| cell(i as u32, &[("SEX", c.to_string())], rng.random_range(0.0..1e4)))
                .collect(),
            attribute_schema: vec!["SEX".into()],
        };
        let table = cats
            .iter()
            .map(|c| {
                let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let z: f64 = p.iter().sum();
                (vec![c.to_string()], p.iter().map(|x| x / z).collect())
            })
            .collect();
        let sm = SmoothedCrosstab {
            schema: vec!["SEX".into()],
            vote_title: "VOTE2020".into(),
            vote_categories: vec!["d".into(), "r".into(), "o".into()],
            table,
        };
        let ext = extend_frame(&frame, &sm).map_err(|e| e.to_string())?;
        worst = worst.max((ext.total_weight() - frame.total_weight()).abs());
    }
    ensure(worst < 1e-9, format!("max weight drift {worst:.2e}"))
}

fn frame_daughter() -> Result<String, String> {
    let frame = StratFrame {
        cells: (0..12)
            .map(|i| cell(i, &[("CELL", format!("k{i}"))], 1.0 + i as f64))
            .collect(),
        attribute_schema: vec!["CELL".into()],
    };
    let mut seen = Vec::new();
    for (omega, seed) in [(1, 1), (17, 2), (1000, 3), (1500, 4), (12_345, 5)] {
        let q = sample_daughter_frame(&frame, omega, seed).map_err(|e| e.to_string())?;
        let total: u64 = q.quotas().values().map(|v| *v as u64).sum();
        if total != omega as u64 {
            return Err(format!("Ω⋆ = {omega} gave {total}"));
        }
        seen.push(omega);
    }
    Ok(format!("quotas sum exactly for Ω⋆ in {seen:?}"))
}

// ---------------------------------------------------------------- pipeline pieces

fn sex_frame() -> StratFrame {
    StratFrame {
        cells: vec![
            cell(1, &[("SEX", "male".into())], 1.0),
            cell(2, &[("SEX", "female".into())], 1.0),
            cell(3, &[("SEX", "other".into())], 1.0),
        ],
        attribute_schema: vec!["SEX".into()],
    }
}

fn quota_concurrency() -> Result<String, String> {
    let q = QuotaState::new(sex_frame(), vec![137, 59, 0]).map_err(|e| e.to_string())?;
    let threads = 8;
    let per = 10_000 / threads;
    let accepted: Vec<[u32; 3]> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads)
            .map(|t| {
                let q = &q;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                    let mut got = [0u32; 3];
                    for _ in 0..per {
                        let c = rng.random_range(1..=3);
                        if q.try_acquire(c).unwrap() {
                            got[c as usize - 1] += 1;
                        }
                    }
                    got
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let sums: Vec<u32> = (0..3).map(|c| accepted.iter().map(|a| a[c]).sum()).collect();
    let counters: Vec<u32> = (1..=3).map(|c| q.counter(c).unwrap()).collect();
    ensure(
        sums == [137, 59, 0] && counters == sums,
        format!("10000 attempts on {threads} threads accepted {sums:?} for quotas [137, 59, 0]"),
    )
}

fn quota_table() -> Result<String, String> {
    let q = QuotaState::new(sex_frame(), vec![1, 1, 1]).unwrap();
    q.set_counter(2, 1).unwrap();
    let attrs = |s: &str| -> Attributes { [("SEX".to_string(), s.to_string())].into() };
    let a = quota_filter(&attrs("male"), &q).map_err(|e| e.to_string())?;
    let b = quota_filter(&attrs("female"), &q).map_err(|e| e.to_string())?;
    ensure(
        a == QuotaDecision::Accepted(1) && b == QuotaDecision::Rejected,
        format!("cell 1 {a:?}, cell 2 {b:?}"),
    )
}

fn timeline_depths() -> Result<String, String> {
    let p = timeline_depth(&QueryKind::Political, 20, 2.0);
    let t = timeline_depth(&QueryKind::Trending("football".into()), 20, 2.0);
    ensure(p == 20 && t == 40, format!("political {p}, trending {t}"))
}

fn query_weights() -> Result<String, String> {
    let topics: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let plan = build_query_plan("x OR y", &topics, 20_000).map_err(|e| e.to_string())?;
    let w: Vec<u32> = plan.queries.iter().map(|q| q.weight).collect();
    ensure(w == [20_000, 6666, 6666, 6666], format!("weights {w:?}"))
}

fn prompt_round_trips() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for rep in 0..1000 {
        let n_titles = rng.random_range(1..6);
        let defs: Vec<FeatureDef> = (0..n_titles)
            .map(|i| {
                let n = rng.random_range(2..7);
                let opts: Vec<(String, String)> = (0..n)
                    .map(|k| (format!("T{i}x{}", k + 1), format!("category {k} of title {i} (a/b)")))
                    .collect();
                let pairs: Vec<(&str, &str)> = opts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
                let kind = if rng.random_bool(0.3) { FeatureKind::Dependent } else { FeatureKind::Independent };
                FeatureDef::from_pairs(&format!("TITLE {i}"), &pairs, kind).unwrap()
            })
            .collect();
        let truth: Vec<FeatureValue> = defs
            .iter()
            .map(|d| {
                let o = &d.options()[rng.random_range(0..d.options().len())];
                FeatureValue {
                    title: d.title().into(),
                    symbol: o.symbol.clone(),
                    category: o.category.clone(),
                    explanation: format!("reason number {}", rng.random::<u32>()),
                    speculation: rng.random_range(0..=100),
                }
            })
            .collect();
        let parsed = parse_annotation(&render_annotation(&truth), &defs).map_err(|e| format!("rep {rep}: {e}"))?;
        if parsed.entries != truth || !parsed.warnings.is_empty() {
            return Err(format!("rep {rep} did not round-trip"));
        }
    }
    Ok("1000 rendered annotations parsed back unchanged".into())
}

fn speculation_threshold() -> Result<String, String> {
    let response = |s: u8| SiliconResponse {
        user_id: "u".into(),
        poll_id: "p".into(),
        fieldwork_date: chrono::NaiveDate::from_ymd_opt(2024, 10, 1).unwrap(),
        area: None,
        values: BTreeMap::from([(
            "VOTE".to_string(),
            FeatureValue {
                title: "VOTE".into(),
                symbol: "V1".into(),
                category: "D".into(),
                explanation: String::new(),
                speculation: s,
            },
        )]),
        strategy_votes: None,
    };
    let titles = BTreeSet::from(["VOTE".to_string()]);
    let t = DEFAULT_SPECULATION_THRESHOLD;
    let at = is_highly_speculative(&response(80), &titles, t).map_err(|e| e.to_string())?;
    let above = is_highly_speculative(&response(81), &titles, t).map_err(|e| e.to_string())?;
    ensure(t == 80 && !at && above, format!("80 → {at}, 81 → {above}"))
}

// ---------------------------------------------------------------- settings and end to end

fn settings_arithmetic() -> Result<String, String> {
    let s = SamplerSettings {
        chains: 8,
        iterations: 5000,
        warmup: 4750,
        thin: 4,
        seed: 6,
        ..Default::default()
    };
    let m = Model::new(base_spec(2, graph(1, &[]))).unwrap();
    let obs = vec![
        Observation {
            y: 1,
            area: Some(0),
            levels: vec![],
            poll: 0,
        };
        10
    ];
    let post = sample(&m, &TrainingData::from_observations(&m, &obs).unwrap(), &s).map_err(|e| e.to_string())?;
    ensure(
        s.retained_draws() == 500 && post.draws.len() == 500,
        format!("8 chains × (5000 − 4750) / 4 = {} draws, sampler kept {}", s.retained_draws(), post.draws.len()),
    )
}

fn end_to_end(report: &mut Report) -> Option<String> {
    let (pop, sel, pipe) = (
        PopulationConfig::desk_default(),
        SelectionConfig::desk_default(),
        PipelineConfig::desk_default(),
    );
    let mut first_json = None;
    for seed in 1..=5u64 {
        let t = Instant::now();
        let r = match run_end_to_end(&pop, &sel, &pipe, seed) {
            Ok(r) => r,
            Err(e) => {
                report.check(&format!("end_to_end.seed{seed}"), Err(e.to_string()));
                continue;
            }
        };
        let took = t.elapsed();
        let (raw_state, state) = r.level_rmse("STATE").unwrap_or((f64::NAN, f64::NAN));
        let ok = r.national.raw_error.abs() >= 0.05
            && r.national.error.abs() < 0.02
            && state < 0.5 * raw_state
            && took < Duration::from_secs(600)
            && r.quota_filled == 1000;
        report.check(
            &format!("end_to_end.seed{seed}"),
            ensure(
                ok,
                format!(
                    "raw bias {:+.4}, post-stratified error {:+.4}, state RMSE {:.4} vs raw {:.4}, {:.0?}",
                    r.national.raw_error, r.national.error, state, raw_state, took
                ),
            ),
        );
        if seed == 1 {
            first_json = Some(r.to_json());
        }
    }
    first_json
}

fn determinism(first: Option<String>) -> Result<String, String> {
    let json = first.ok_or("no end-to-end run to compare")?;
    let again = run_end_to_end(
        &PopulationConfig::desk_default(),
        &SelectionConfig::desk_default(),
        &PipelineConfig::desk_default(),
        1,
    )
    .map_err(|e| e.to_string())?
    .to_json();
    if again != json {
        return Err("end-to-end report differs between identical runs".into());
    }

    let mut sim = SimConfig::default();
    sim.population.size = 10_000;
    sim.pipeline.sampler = SamplerSettings {
        chains: 2,
        iterations: 400,
        warmup: 200,
        thin: 1,
        ..sim.pipeline.sampler.clone()
    };
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        cmd_simulate(&sim, 5, d.path(), false).map_err(|e| e.to_string())?;
        let cfg = RunConfig::load(&d.path().join("run.toml"), &Overrides::default()).map_err(|e| e.to_string())?;
        let out = d.path().join("out");
        cmd_pool(&cfg, &out).map_err(|e| e.to_string())?;
        cmd_poll(&cfg, &out).map_err(|e| e.to_string())?;
        cmd_infer(&cfg, &out).map_err(|e| e.to_string())?;
        cmd_eval(&cfg, &out).map_err(|e| e.to_string())?;
    }
    let read = |p: &Path| -> BTreeMap<String, Vec<u8>> {
        walk(p)
            .into_iter()
            .map(|f| (f.strip_prefix(p).unwrap().display().to_string(), std::fs::read(&f).unwrap()))
            .collect()
    };
    let (a, b) = (read(dirs[0].path()), read(dirs[1].path()));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    ensure(
        differing.is_empty() && a.len() == b.len(),
        format!("end-to-end report and {} command artifacts identical; differing {differing:?}", a.len()),
    )
}

fn walk(p: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn main() {
    let mut r = Report { failed: 0 };

    let t = Instant::now();
    r.check("metrics.hand_oracles", metrics_oracles());
    r.check("metrics.ovl_normal_shift", metrics_ovl());
    r.check("metrics.change_bias", metrics_change_bias());
    let took = t.elapsed();
    r.check("metrics.runtime", ensure(took < Duration::from_secs(30), format!("{took:.1?}")));

    let t = Instant::now();
    r.check("sampler.gradient_fd", sampler_gradient());
    r.check("sampler.intercept_grid", sampler_grid());
    r.check("sampler.sbc", sbc());
    let took = t.elapsed();
    r.check("sampler.runtime", ensure(took < Duration::from_secs(900), format!("{took:.1?}")));

    r.check("icar.scaling_factor", icar_scaling());
    r.check("icar.sum_to_zero", icar_sum_to_zero());

    r.check("frame.ipf_2x2_limit", frame_ipf_limit());
    r.check("frame.ipf_random_convergence", frame_ipf_random());
    r.check("frame.extend_conserves_weight", frame_extend());
    r.check("frame.daughter_quota_sums", frame_daughter());

    r.check("pipeline.quota_concurrency", quota_concurrency());
    r.check("pipeline.quota_table", quota_table());
    r.check("pipeline.timeline_depth", timeline_depths());
    r.check("pipeline.query_weights", query_weights());
    r.check("pipeline.prompt_round_trip", prompt_round_trips());
    r.check("pipeline.speculation_threshold", speculation_threshold());

    r.check("settings.draw_arithmetic", settings_arithmetic());

    let first = end_to_end(&mut r);
    r.check("determinism", determinism(first));

    if r.failed > 0 {
        println!("{} acceptance criteria failed", r.failed);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
