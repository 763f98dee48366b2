mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use mortsmooth::data::{crude_rate, crude_rates, parse_grouping, Cell, Dataset, GroupKey, SimulationInput};
use mortsmooth::model::{BlockRole, ModelSpec};
use mortsmooth::structure::icar_structure;

fn small_dataset() -> Dataset {
    let mut cells = Vec::new();
    for i in 0..16u64 {
        cells.push(Cell {
            deaths: (i % 5 != 3).then_some(i * 3),
            population: 1000.0 + 37.5 * i as f64,
        });
    }
    let mut ds = Dataset::new(
        common::labels(&["Soria", "Teruel"]),
        vec![2001, 2002],
        common::labels(&["60-69", "70+"]),
        common::labels(&["M", "F"]),
        cells,
    )
    .unwrap();
    ds.set_spatial_covariate("rurality", vec![61.5, 30.0]).unwrap();
    ds.set_temporal_covariate("gdp", None, vec![1.25, 1.5]).unwrap();
    ds.set_temporal_covariate("smoking", Some("M"), vec![30.0, 29.0]).unwrap();
    ds.set_temporal_covariate("smoking", Some("F"), vec![18.0, 19.5]).unwrap();
    ds
}

#[test]
fn dataset_directory_round_trip() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    ds.write_dir(dir.path()).unwrap();
    let back = Dataset::load_dir(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert!(back.cell(0, 0, 1, 1).is_missing());
    assert_eq!(back.temporal_covariates()["smoking"].for_sex("F"), Some(&[18.0, 19.5][..]));
}

#[test]
fn deaths_above_population_are_rejected() {
    let deaths = "area,year,age_group,sex,deaths\nA,2000,50-59,M,20\n";
    let population = "area,year,age_group,sex,population\nA,2000,50-59,M,10\n";
    assert!(Dataset::from_csv(deaths, population).is_err());
}

#[test]
fn crude_rate_interval() {
    let (rate, low, high) = crude_rate(10, 1e5, true).unwrap();
    assert_eq!(rate, 10.0);
    assert!((high - rate - 1.96 * 10f64.sqrt()).abs() < 1e-12);
    assert!((rate - low - 1.96 * 10f64.sqrt()).abs() < 1e-12);
    assert_eq!(crude_rate(1, 1e5, true).unwrap().1, 0.0);
    assert!(crude_rate(1, 1e5, false).unwrap().1 < 0.0);
}

#[test]
fn grouping_by_rurality_uses_the_covariate_bands() {
    let ds = small_dataset();
    let rows = crude_rates(&ds, &parse_grouping("rurality").unwrap(), true).unwrap();
    assert_eq!(rows.iter().map(|r| r.strata[0].as_str()).collect::<Vec<_>>(), ["medium", "high"]);
    let total: u64 = ds.cells().iter().filter_map(|c| c.deaths).sum();
    assert_eq!(rows.iter().map(|r| r.deaths).sum::<u64>(), total);
}

#[test]
fn simulated_counts_have_the_intended_mean() {
    let n = 1000;
    let (alpha, exposure) = (-6.0f64, 1e4);
    let input = SimulationInput {
        spec: ModelSpec::intercept_only(),
        age_labels: common::labels(&["50-59"]),
        second_labels: common::years(1000, n),
        graph: None,
        covariates: Vec::new(),
        exposures: vec![exposure],
        alpha,
        theta: Vec::new(),
        beta: Vec::new(),
        sex: "M".into(),
    };
    let (_, ds, _) = common::simulated_model(&input, 17);
    let mean_rate: f64 = ds.cells().iter().map(|c| c.deaths.unwrap() as f64 / c.population).sum::<f64>() / n as f64;
    let mu = exposure * alpha.exp();
    let mc_sd = mu.sqrt() / exposure / (n as f64).sqrt();
    assert!((mean_rate - alpha.exp()).abs() < 3.0 * mc_sd, "{mean_rate} vs {}", alpha.exp());
}

#[test]
fn simulated_truth_satisfies_the_constraints() {
    let input = common::recovery_input();
    for seed in 0..5 {
        let (model, _, truth) = common::simulated_model(&input, seed);
        let x = DVector::from_vec(truth.latent.clone());
        assert!(model.constraints.violation(&x) < 1e-10);
        for role in [BlockRole::Age, BlockRole::Time] {
            let b = model.block(role).unwrap();
            assert!(x.rows(b.offset, b.len).sum().abs() < 1e-10);
        }
        let inter = model.block(BlockRole::Interaction).unwrap();
        let n_age = model.n_age();
        for a in 0..n_age {
            let s: f64 = (0..model.n_second()).map(|t| x[inter.offset + t * n_age + a]).sum();
            assert!(s.abs() < 1e-10, "age {a}: {s}");
        }
        let rates = model.log_rates(&x);
        for (r, t) in rates.iter().zip(&truth.log_rates) {
            assert!((r - t).abs() < 1e-12);
        }
        assert_eq!(truth.beta, vec![common::RECOVERY_BETA]);
    }
}

#[test]
fn province_graph_is_connected() {
    let g = common::provinces();
    assert_eq!(g.n_areas(), 47);
    assert_eq!(g.n_edges(), 110);
    assert!(g.is_connected());
    assert_eq!(icar_structure(&g).rank(), 46);
    let madrid = g.index_of("Madrid").unwrap();
    let mut names: Vec<&str> = g.neighbours(madrid).iter().map(|&j| g.labels()[j].as_str()).collect();
    names.sort();
    assert_eq!(names, ["Avila", "Cuenca", "Guadalajara", "Segovia", "Toledo"]);
    for i in 0..47 {
        for &j in g.neighbours(i) {
            assert!(g.neighbours(j).contains(&i));
        }
    }
}

fn arbitrary_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..4, 1usize..3)
        .prop_flat_map(|(na, ny, ns)| {
            let n = na * ny * 3 * ns;
            (
                Just((na, ny, ns)),
                prop::collection::vec((prop::option::weighted(0.8, 0u64..200), 200.0f64..5e4), n),
            )
        })
        .prop_map(|((na, ny, ns), raw)| {
            let cells = raw
                .into_iter()
                .map(|(deaths, population)| Cell { deaths, population })
                .collect();
            Dataset::new(
                (0..na).map(|i| format!("area{i}")).collect(),
                (0..ny as i32).map(|y| 1990 + y).collect(),
                common::labels(&["10-19", "50-59", "80+"]),
                ["M", "F"][..ns].iter().map(|s| s.to_string()).collect(),
                cells,
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooled_crude_rate_sums_observed_cells(ds in arbitrary_dataset()) {
        let observed: Vec<&Cell> = ds.cells().iter().filter(|c| !c.is_missing()).collect();
        prop_assume!(!observed.is_empty());
        let deaths: u64 = observed.iter().map(|c| c.deaths.unwrap()).sum();
        let population: f64 = observed.iter().map(|c| c.population).sum();
        let rows = crude_rates(&ds, &[], true).unwrap();
        prop_assert_eq!(rows.len(), 1);
        prop_assert_eq!(rows[0].deaths, deaths);
        prop_assert!((rows[0].population - population).abs() <= 1e-9 * population);
        prop_assert!((rows[0].rate - 1e5 * deaths as f64 / population).abs() <= 1e-9 * rows[0].rate.max(1.0));
    }

    #[test]
    fn strata_partition_the_total(ds in arbitrary_dataset(), keys in prop::sample::subsequence(vec![GroupKey::Sex, GroupKey::AgeBand, GroupKey::Year, GroupKey::Area], 1..4)) {
        let all = ds.cells().iter().filter_map(|c| c.deaths).sum::<u64>();
        if let Ok(rows) = crude_rates(&ds, &keys, false) {
            prop_assert_eq!(rows.iter().map(|r| r.deaths).sum::<u64>(), all);
            prop_assert!(rows.iter().all(|r| r.strata.len() == keys.len()));
        }
    }
}
