#![allow(dead_code)]

use std::path::PathBuf;

use mortsmooth::confounding::Axis;
use mortsmooth::data::{simulate_dataset, Dataset, SimulationInput, TruthRecord};
use mortsmooth::graph::{read_label_table, AdjacencyGraph};
use mortsmooth::model::{assemble_model, AssembledModel, CovariateSpec, ModelSpec, SecondPrior};
use mortsmooth::structure::InteractionType;

pub const TOY_NAMES: [&str; 4] = [
    "intercept only",
    "RW1 time, A=1, T=6",
    "path-graph iCAR, S=3",
    "type I interaction, A=3, T=3",
];

pub fn repo_data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// The 47 provinces of peninsular Spain with shared-border adjacency.
pub fn provinces() -> AdjacencyGraph {
    let labels = read_label_table(&repo_data("spain47.labels.csv")).unwrap();
    let text = std::fs::read_to_string(repo_data("spain47.edges")).unwrap();
    AdjacencyGraph::parse_edge_list(labels, &text).unwrap()
}

pub fn path_graph(n: usize) -> AdjacencyGraph {
    let labels = (0..n).map(|i| format!("area{i}")).collect();
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    AdjacencyGraph::from_edges(labels, &edges).unwrap()
}

pub fn labels(prefix: &[&str]) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).collect()
}

pub fn years(first: i32, n: usize) -> Vec<String> {
    (first..first + n as i32).map(|y| y.to_string()).collect()
}

/// Simulates from `spec` and assembles the same model on the result.
pub fn simulated_model(input: &SimulationInput, seed: u64) -> (AssembledModel, Dataset, TruthRecord) {
    let (ds, truth) = simulate_dataset(input, seed).unwrap();
    let model = assemble_model(&input.spec, &ds, input.graph.as_ref()).unwrap();
    (model, ds, truth)
}

fn toy_input(spec: ModelSpec, ages: Vec<String>, seconds: Vec<String>, graph: Option<AdjacencyGraph>, theta: Vec<f64>) -> SimulationInput {
    SimulationInput {
        spec,
        age_labels: ages,
        second_labels: seconds,
        graph,
        covariates: Vec::new(),
        exposures: vec![1e6],
        alpha: -6.0,
        theta,
        beta: Vec::new(),
        sex: "M".into(),
    }
}

/// The certification suite, indexed 0..4 as in [`TOY_NAMES`].
pub fn toy_model(k: usize, seed: u64) -> AssembledModel {
    let input = match k {
        0 => toy_input(ModelSpec::intercept_only(), labels(&["50-59"]), years(2010, 3), None, vec![]),
        1 => toy_input(
            ModelSpec::age_time(SecondPrior::Rw1, None),
            labels(&["50-59"]),
            years(2010, 6),
            None,
            vec![2.0],
        ),
        2 => {
            let g = path_graph(3);
            toy_input(ModelSpec::age_space(None), labels(&["50-59"]), g.labels().to_vec(), Some(g), vec![2.0])
        }
        3 => toy_input(
            ModelSpec::age_time(SecondPrior::Rw1, Some(InteractionType::I)),
            labels(&["40-49", "50-59", "60-69"]),
            years(2010, 3),
            None,
            vec![1.0, 2.0, 3.0],
        ),
        _ => panic!("no toy {k}"),
    };
    simulated_model(&input, seed).0
}

pub const RECOVERY_BETA: f64 = 0.2;

/// Age-time type II design with one temporal covariate: A=4, T=8.
pub fn recovery_input() -> SimulationInput {
    let mut spec = ModelSpec::age_time(SecondPrior::Rw1, Some(InteractionType::II));
    spec.covariates.push(CovariateSpec {
        name: "u".into(),
        axis: Axis::Temporal,
        decorrelate: false,
        k: 0,
    });
    let cov: Vec<f64> = (0..8).map(|t| (t as f64 * 1.3).sin() + 0.1 * t as f64).collect();
    SimulationInput {
        spec,
        age_labels: labels(&["30-39", "40-49", "50-59", "60-69"]),
        second_labels: years(2010, 8),
        graph: None,
        covariates: vec![cov],
        exposures: vec![1e5],
        alpha: -8.0,
        theta: vec![0.0, 1.0, 1.0],
        beta: vec![RECOVERY_BETA],
        sex: "M".into(),
    }
}
