use std::collections::BTreeMap;

use siliconpoll_core::annotator::TitleNoise;
use siliconpoll_core::eval::NATIONAL;
use siliconpoll_core::mrp::SamplerSettings;
use siliconpoll_core::sim::*;

fn fast(pipe: &mut PipelineConfig) {
    pipe.sampler = SamplerSettings {
        chains: 2,
        iterations: 600,
        warmup: 300,
        thin: 1,
        ..pipe.sampler.clone()
    };
}

fn small_population(size: usize) -> PopulationConfig {
    PopulationConfig {
        size,
        ..PopulationConfig::desk_default()
    }
}

#[test]
fn tabulation_is_exact() {
    let pop = generate_population(&small_population(5000)).unwrap();
    let truth = pop.truth_rows(("R", "D")).unwrap();
    let (r, d) = pop.individuals.iter().fold((0i64, 0i64), |(r, d), p| {
        (r + (p.choice == 1) as i64, d + (p.choice == 0) as i64)
    });
    let national = truth.iter().find(|t| t.level == NATIONAL).unwrap();
    assert_eq!(national.margin, (r - d) as f64 / 5000.0);

    let texas: Vec<_> = pop.individuals.iter().filter(|p| p.area == 0).collect();
    let m = texas.iter().map(|p| (p.choice == 1) as i64 - (p.choice == 0) as i64).sum::<i64>() as f64
        / texas.len() as f64;
    let row = truth.iter().find(|t| t.level == "STATE" && t.label == "Texas").unwrap();
    assert_eq!(row.margin, m);

    let frame = pop.frame();
    assert_eq!(frame.cells.iter().map(|c| c.weight).sum::<f64>(), 5000.0);
    assert_eq!(frame.attribute_schema, pop.config.frame_titles());
}

#[test]
fn population_is_deterministic() {
    let cfg = small_population(3000);
    assert_eq!(generate_population(&cfg).unwrap(), generate_population(&cfg).unwrap());
    let other = generate_population(&PopulationConfig { seed: 2, ..cfg.clone() }).unwrap();
    assert_ne!(other.individuals, generate_population(&cfg).unwrap().individuals);
}

#[test]
fn single_member_population() {
    let pop = generate_population(&small_population(1)).unwrap();
    let truth = pop.truth_rows(("R", "D")).unwrap();
    // one row per level the member belongs to
    assert_eq!(truth.len(), 2 + pop.config.attributes.len() + 1);
    assert!(truth.iter().all(|t| [-1.0, 0.0, 1.0].contains(&t.margin)));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small_population(10);
    cfg.attributes[0].shares = vec![1.0];
    assert!(matches!(generate_population(&cfg), Err(SimError::Config(_))));
    let mut cfg = small_population(10);
    cfg.edges.push(("Texas".into(), "Ohio".into()));
    assert!(matches!(generate_population(&cfg), Err(SimError::Config(_))));
    let mut cfg = small_population(10);
    cfg.past_vote.map.remove("O");
    assert!(matches!(generate_population(&cfg), Err(SimError::Config(_))));
}

#[test]
fn expected_raw_margin_without_selection_is_the_truth() {
    let pop = generate_population(&small_population(20_000)).unwrap();
    let truth = pop.truth_rows(("R", "D")).unwrap();
    let national = truth.iter().find(|t| t.level == NATIONAL).unwrap().margin;
    let flat = vec![0.3; pop.individuals.len()];
    let quota = vec!["SEX".to_string(), "AGE".to_string()];
    let e = expected_raw_margin(&pop, &flat, &quota, ("R", "D")).unwrap();
    assert!((e - national).abs() < 1e-12, "{e} vs {national}");
}

#[test]
fn raw_bias_grows_with_selection_strength() {
    let pop = generate_population(&small_population(20_000)).unwrap();
    let truth = pop.truth_rows(("R", "D")).unwrap();
    let national = truth.iter().find(|t| t.level == NATIONAL).unwrap().margin;
    let quota = vec!["SEX".to_string(), "AGE".to_string()];
    let bias: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|k| {
            let sel = SelectionConfig {
                strength: *k,
                ..SelectionConfig::desk_default()
            };
            let p = simulate_platform(&pop, &sel, 7).unwrap();
            expected_raw_margin(&pop, &p.inclusion, &quota, ("R", "D")).unwrap() - national
        })
        .collect();
    assert!(bias[0] < 0.0 && bias[1] < bias[0] && bias[2] < bias[1], "{bias:?}");
}

#[test]
fn platform_rates_match_configuration() {
    let pop = generate_population(&small_population(30_000)).unwrap();
    let sel = SelectionConfig {
        stateless_rate: 0.1,
        ..SelectionConfig::desk_default()
    };
    let p = simulate_platform(&pop, &sel, 3).unwrap();
    let n = p.included.len() as f64;
    let expected: f64 = p.inclusion.iter().sum();
    assert!((n - expected).abs() < 4.0 * expected.sqrt(), "{n} vs {expected}");
    let rate = p.stateless.len() as f64 / n;
    assert!((rate - 0.1).abs() < 3.0 * (0.09 / n).sqrt(), "stateless rate {rate}");
    let others = p.lookup.values().filter(|v| v.is_none()).count();
    assert_eq!(others, sel.organisations + sel.abroad);
    assert_eq!(p, simulate_platform(&pop, &sel, 3).unwrap());
}

#[test]
fn inclusion_shift_changes_composition() {
    let pop = generate_population(&small_population(30_000)).unwrap();
    let high = |idx: &[usize]| {
        idx.iter().filter(|i| pop.individuals[**i].attrs[3] == 2).count() as f64 / idx.len() as f64
    };
    let all: Vec<usize> = (0..pop.individuals.len()).collect();
    let share_pop = high(&all);
    let sel = SelectionConfig {
        log_odds: BTreeMap::from([("INCOME".into(), BTreeMap::from([("over 100k".into(), 2.0)]))]),
        ..SelectionConfig::none()
    };
    let p = simulate_platform(&pop, &sel, 1).unwrap();
    let observed = high(&p.included);
    // expected share from the inclusion probabilities themselves
    let (num, den) = pop.individuals.iter().zip(&p.inclusion).fold((0.0, 0.0), |(a, b), (ind, pi)| {
        (a + pi * u8::from(ind.attrs[3] == 2) as f64, b + pi)
    });
    let e = num / den;
    let sd = (e * (1.0 - e) / p.included.len() as f64).sqrt();
    assert!((observed - e).abs() < 3.0 * sd, "{observed} vs {e}");
    assert!(observed > share_pop + 0.15);
}

#[test]
fn pollster_without_house_effect_is_unbiased() {
    let pop = generate_population(&small_population(30_000)).unwrap();
    let truth = pop.truth_rows(("R", "D")).unwrap();
    let spec = PollsterSpec {
        name: "Mesa".into(),
        rating: "B".into(),
        areas: pop.config.areas.iter().map(|a| a.name.clone()).collect(),
        n: 2000,
        house_effect: 0.0,
    };
    let date = chrono::NaiveDate::from_ymd_opt(2024, 10, 1).unwrap();
    let polls = simulate_pollsters(&pop, &[spec], ("R", "D"), date, 5).unwrap();
    assert_eq!(polls.len(), 8);
    let mut z2 = 0.0;
    for p in &polls {
        let n: f64 = p.counts.values().sum();
        let m = (p.counts["R"] - p.counts["D"]) / n;
        let t = truth.iter().find(|t| t.level == "STATE" && t.label == p.area).unwrap().margin;
        let tab = pop.tabulations.iter().find(|t| t.level == "STATE" && t.label == p.area).unwrap();
        // per-respondent variance of the ±1/0 margin indicator
        let decided = (tab.choices[0] + tab.choices[1]) as f64 / tab.n as f64;
        let sd = ((decided - t * t) / n).sqrt();
        z2 += ((m - t) / sd).powi(2);
    }
    // χ² with 8 degrees of freedom, 99.9th percentile
    assert!(z2 < 26.12, "{z2}");
}

#[test]
fn end_to_end_is_deterministic() {
    let mut pipe = PipelineConfig::desk_default();
    fast(&mut pipe);
    let pop = small_population(20_000);
    let sel = SelectionConfig::desk_default();
    let a = run_end_to_end(&pop, &sel, &pipe, 11).unwrap();
    let b = run_end_to_end(&pop, &sel, &pipe, 11).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.quota_filled, 1000);
    assert!(a.national.raw_error < -0.05);
}

#[test]
fn race_confusion_inflates_race_crosstab_error() {
    let mut pipe = PipelineConfig::desk_default();
    fast(&mut pipe);
    let pop = small_population(30_000);
    let sel = SelectionConfig::desk_default();
    let clean = run_end_to_end(&pop, &sel, &pipe, 4).unwrap();
    let races: Vec<String> = pop.attributes[2].categories.clone();
    let confusion = (0..3)
        .map(|a| (0..3).map(|b| if a == b { 0.8 } else { 0.1 }).collect())
        .collect();
    pipe.oracle.titles.insert(
        "RACE".into(),
        TitleNoise {
            categories: races,
            confusion,
            speculation: Default::default(),
        },
    );
    let noisy = run_end_to_end(&pop, &sel, &pipe, 4).unwrap();
    let (_, clean_race) = clean.level_rmse("RACE").unwrap();
    let (_, noisy_race) = noisy.level_rmse("RACE").unwrap();
    assert!(noisy_race > clean_race, "{noisy_race} vs {clean_race}");
    // the national margin stays usable
    assert!(noisy.national.error.abs() < 0.03, "{}", noisy.national.error);
    assert!(noisy.national.error.abs() < noisy.national.raw_error.abs());
}

#[test]
fn identity_oracle_without_selection_covers_the_truth() {
    let mut pipe = PipelineConfig::desk_default();
    fast(&mut pipe);
    pipe.pollsters.clear();
    let pop = small_population(20_000);
    let sel = SelectionConfig::none();
    let mut covered = 0;
    for seed in 0..20 {
        let r = run_end_to_end(&pop, &sel, &pipe, 100 + seed).unwrap();
        let e = &r.national.estimate;
        covered += (e.q05 <= r.national.truth && r.national.truth <= e.q95) as usize;
    }
    assert!(covered >= 16, "{covered}/20");
}
