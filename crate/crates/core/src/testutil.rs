//! Shared fixtures for unit tests.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cpg::{parse_cpg_export, CodePropertyGraph};

pub fn graph_from(nodes: &[u64], edges: &[(u64, u64, &str)]) -> CodePropertyGraph {
    let nodes_json: Vec<String> = nodes
        .iter()
        .map(|id| format!(r#"{{"id":{id},"type":"CALL","code":"n{id}"}}"#))
        .collect();
    let edges_json: Vec<String> = edges
        .iter()
        .map(|(s, d, k)| format!(r#"{{"src":{s},"dst":{d},"kind":"{k}"}}"#))
        .collect();
    let doc = format!(
        r#"{{"function_id":"t","label":0,"cwe":[],"code":"x","nodes":[{}],"edges":[{}]}}"#,
        nodes_json.join(","),
        edges_json.join(",")
    );
    parse_cpg_export(&doc).unwrap()
}

pub fn mixed_graph() -> CodePropertyGraph {
    graph_from(
        &[1, 2, 3, 4, 5, 6, 7, 8],
        &[
            (1, 2, "AST"),
            (1, 3, "AST"),
            (2, 4, "AST"),
            (3, 5, "AST"),
            (4, 5, "CFG"),
            (5, 6, "CFG"),
            (4, 5, "DDG"),
            (2, 6, "DDG"),
            (6, 7, "DDG"),
            (3, 7, "CDG"),
            (4, 7, "CDG"),
            (6, 8, "CDG"),
        ],
    )
}

pub fn random_state(n: usize, z: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((n, z), |_| normal.sample(&mut rng))
}
