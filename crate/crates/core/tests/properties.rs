//! Randomized invariants over ingestion, propagation, and prediction,
//! driven by proptest: determinism, idempotence, normalization,
//! finiteness, and convexity hold for arbitrary small inputs, not just
//! the hand-picked examples in the unit tests.

use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vulgraph_core::cpg::{
    dedup_by_hash, filter_by_node_count, parse_cpg_export, prune_nonleaf_fragments,
    CodePropertyGraph,
};
use vulgraph_core::ggnn::{propagate, GgnnParams, GraphTopology};
use vulgraph_core::okd::{kl_divergence, local_structure, KernelSpec};
use vulgraph_core::train::interpolate_predictions;

const KINDS: [&str; 4] = ["AST", "CFG", "DDG", "CDG"];

fn doc_json(id: &str, code: &str, n: u64, edges: &BTreeSet<(u64, u64, usize)>) -> String {
    let nodes: Vec<String> = (1..=n)
        .map(|i| format!(r#"{{"id":{i},"type":"CALL","code":"tok{i}"}}"#))
        .collect();
    let edge_list: Vec<String> = edges
        .iter()
        .map(|(s, d, k)| format!(r#"{{"src":{s},"dst":{d},"kind":"{}"}}"#, KINDS[*k]))
        .collect();
    format!(
        r#"{{"function_id":"{id}","label":0,"cwe":[],"code":"{code}","nodes":[{}],"edges":[{}]}}"#,
        nodes.join(","),
        edge_list.join(",")
    )
}

/// Maps arbitrary integers onto a valid edge set (no self-loops, no
/// duplicate typed edges) and parses the resulting document.
fn graph_from_spec(n: u64, raw_edges: &[(u64, u64, usize)]) -> (String, CodePropertyGraph) {
    let mut edges = BTreeSet::new();
    for &(a, b, k) in raw_edges {
        let src = 1 + a % n;
        let dst = 1 + b % n;
        if src != dst {
            edges.insert((src, dst, k % KINDS.len()));
        }
    }
    let doc = doc_json("prop", "int prop(void)", n, &edges);
    let graph = parse_cpg_export(&doc).expect("generated document parses");
    (doc, graph)
}

fn spec_strategy() -> impl Strategy<Value = (u64, Vec<(u64, u64, usize)>)> {
    (
        1u64..=8,
        proptest::collection::vec((any::<u64>(), any::<u64>(), 0usize..4), 0..16),
    )
}

proptest! {
    #[test]
    fn parsing_is_deterministic((n, raw) in spec_strategy()) {
        let (doc, first) = graph_from_spec(n, &raw);
        let second = parse_cpg_export(&doc).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn node_limit_keeps_exactly_the_small_graphs(
        (n, raw) in spec_strategy(),
        limit in 1usize..10,
    ) {
        let (_, graph) = graph_from_spec(n, &raw);
        let count = graph.node_count();
        prop_assert_eq!(filter_by_node_count(graph, limit).is_some(), count <= limit);
    }

    #[test]
    fn fragment_pruning_is_idempotent((n, raw) in spec_strategy()) {
        let (_, graph) = graph_from_spec(n, &raw);
        let once = prune_nonleaf_fragments(graph);
        let twice = prune_nonleaf_fragments(once.clone());
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn dedup_keeps_first_occurrences_and_is_idempotent(
        codes in proptest::collection::vec(0u8..4, 1..12),
    ) {
        // A four-letter code alphabet forces hash collisions.
        let graphs: Vec<CodePropertyGraph> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let doc = doc_json(
                    &format!("f{i}"),
                    &format!("int variant_{c}(void)"),
                    1,
                    &BTreeSet::new(),
                );
                parse_cpg_export(&doc).unwrap()
            })
            .collect();
        let (kept, report) = dedup_by_hash(graphs.clone());
        prop_assert_eq!(report.input_records, graphs.len());
        prop_assert_eq!(report.kept_records + report.dropped.len(), graphs.len());
        let mut seen = BTreeSet::new();
        prop_assert!(kept.iter().all(|g| seen.insert(g.content_hash.clone())));
        for g in &kept {
            let first = graphs
                .iter()
                .find(|x| x.content_hash == g.content_hash)
                .unwrap();
            prop_assert_eq!(&g.function_id, &first.function_id);
        }
        let (again, second_report) = dedup_by_hash(kept.clone());
        prop_assert_eq!(&again, &kept);
        prop_assert!(second_report.dropped.is_empty());
    }

    #[test]
    fn propagation_stays_finite(
        (n, raw) in spec_strategy(),
        seed in any::<u64>(),
        steps in 1usize..5,
    ) {
        let (_, graph) = graph_from_spec(n, &raw);
        let topo = GraphTopology::from_graph(&graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GgnnParams::random(4, steps, 0.8, &mut rng);
        let h = Array2::from_shape_fn((topo.n, 4), |_| rng.gen_range(-2.0..2.0));
        let trace = propagate(&h, &topo, &params).unwrap();
        prop_assert_eq!(trace.states.len(), steps);
        for state in &trace.states {
            prop_assert!(state.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn neighborhood_distributions_normalize(
        (n, raw) in spec_strategy(),
        seed in any::<u64>(),
        which in 0usize..4,
    ) {
        let (_, graph) = graph_from_spec(n, &raw);
        let topo = GraphTopology::from_graph(&graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Array2::from_shape_fn((topo.n, 3), |_| rng.gen_range(-2.0..2.0));
        let spec = match which {
            0 => KernelSpec::euclidean(),
            1 => KernelSpec::linear(),
            2 => KernelSpec::poly(1.0, 2).unwrap(),
            _ => KernelSpec::rbf(1.0).unwrap(),
        };
        let structures = local_structure(&h, &topo, &spec).unwrap();
        prop_assert_eq!(structures.len(), topo.counted.len());
        for s in &structures {
            prop_assert!(s.probs.iter().all(|p| p.is_finite() && *p > 0.0));
            let total: f64 = s.probs.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_exactly_zero_on_self(
        raw_p in proptest::collection::vec(0.01f64..10.0, 1..8),
        raw_q in proptest::collection::vec(0.01f64..10.0, 8),
    ) {
        let normalize = |xs: &[f64]| -> Vec<f64> {
            let z: f64 = xs.iter().sum();
            xs.iter().map(|x| x / z).collect()
        };
        let p = normalize(&raw_p);
        let q = normalize(&raw_q[..raw_p.len()]);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
    }

    #[test]
    fn interpolation_is_a_convex_combination(
        pg in 0.0f64..=1.0,
        ps in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let p_graph = [pg, 1.0 - pg];
        let p_seq = [ps, 1.0 - ps];
        let out = interpolate_predictions(&p_graph, &p_seq, lambda).unwrap();
        let total: f64 = out.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for i in 0..2 {
            let lo = p_graph[i].min(p_seq[i]);
            let hi = p_graph[i].max(p_seq[i]);
            prop_assert!(out[i] >= lo - 1e-15 && out[i] <= hi + 1e-15);
            let direct = lambda * p_graph[i] + (1.0 - lambda) * p_seq[i];
            prop_assert!((out[i] - direct).abs() <= 1e-15);
        }
    }

    #[test]
    fn parameter_serialization_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GgnnParams::random(4, 3, 0.7, &mut rng);
        let first = serde_json::to_string(&params).unwrap();
        let back: GgnnParams = serde_json::from_str(&first).unwrap();
        let second = serde_json::to_string(&back).unwrap();
        prop_assert_eq!(first, second);
    }
}
