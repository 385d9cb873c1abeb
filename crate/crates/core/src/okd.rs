//! Online distillation between students via local-structure alignment.
//!
//! Each propagation layer of each student induces, per node, a
//! distribution over that node's neighbors: kernel similarities between
//! the node's state and each neighbor's state, softmax-normalized in
//! ascending neighbor order (Eq. 11 analog). A student learns by
//! pulling its layer-i distributions toward every other student's
//! layer-(i+1) distributions (wrapping the last layer back to the
//! first), measured by KL divergence and averaged over peers and
//! nodes.
//!
//! Counterpart distributions are always plain numbers — the caller
//! recomputes them from the counterpart's current weights and passes
//! them in as constants, so gradients never leak across students.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::ggnn::{GraphTopology, PropagationTrace};
use crate::tape::{Tape, Var};
use crate::{Error, Result};

// --- kernels --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Euclidean,
    Linear,
    Poly,
    Rbf,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            KernelKind::Euclidean => "euclidean",
            KernelKind::Linear => "linear",
            KernelKind::Poly => "poly",
            KernelKind::Rbf => "rbf",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<KernelKind> {
        match s {
            "euclidean" => Ok(KernelKind::Euclidean),
            "linear" => Ok(KernelKind::Linear),
            "poly" => Ok(KernelKind::Poly),
            "rbf" => Ok(KernelKind::Rbf),
            other => Err(Error::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

/// A similarity kernel with its hyperparameters. `sigma` is only read
/// by `rbf`, `poly_c`/`poly_degree` only by `poly`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub sigma: f64,
    pub poly_c: f64,
    pub poly_degree: i32,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, sigma: f64, poly_c: f64, poly_degree: i32) -> Result<KernelSpec> {
        if let KernelKind::Rbf = kind {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("rbf sigma must be positive, got {sigma}")));
            }
        }
        if let KernelKind::Poly = kind {
            if poly_degree < 1 {
                return Err(Error::Config(format!(
                    "poly degree must be at least 1, got {poly_degree}"
                )));
            }
            if !poly_c.is_finite() {
                return Err(Error::Config("poly offset must be finite".to_string()));
            }
        }
        Ok(KernelSpec { kind, sigma, poly_c, poly_degree })
    }

    pub fn linear() -> KernelSpec {
        KernelSpec { kind: KernelKind::Linear, sigma: 1.0, poly_c: 1.0, poly_degree: 2 }
    }

    pub fn euclidean() -> KernelSpec {
        KernelSpec { kind: KernelKind::Euclidean, ..KernelSpec::linear() }
    }

    pub fn rbf(sigma: f64) -> Result<KernelSpec> {
        KernelSpec::new(KernelKind::Rbf, sigma, 1.0, 2)
    }

    pub fn poly(c: f64, degree: i32) -> Result<KernelSpec> {
        KernelSpec::new(KernelKind::Poly, 1.0, c, degree)
    }
}

/// Pairwise similarity between two state rows.
///
/// `euclidean` is the squared distance (larger = farther); the other
/// kinds grow with closeness. All four feed the same softmax.
pub fn kernel_similarity(
    spec: &KernelSpec,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "kernel inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot = || a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
    let sq_dist = || {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };
    Ok(match spec.kind {
        KernelKind::Euclidean => sq_dist(),
        KernelKind::Linear => dot(),
        KernelKind::Poly => (dot() + spec.poly_c).powi(spec.poly_degree),
        // Written as a product so the value is bitwise identical to the
        // tape evaluation of the same kernel.
        KernelKind::Rbf => (sq_dist() * (-1.0 / (2.0 * spec.sigma))).exp(),
    })
}

// --- local structure -------------------------------------------------------

/// One node's distribution over its neighbors (ascending neighbor
/// order). Nodes without neighbors have no distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStructure {
    pub node: usize,
    pub probs: Vec<f64>,
}

/// Per-node neighbor distributions for one state matrix.
pub fn local_structure(
    h: &Array2<f64>,
    topo: &GraphTopology,
    spec: &KernelSpec,
) -> Result<Vec<NodeStructure>> {
    if h.nrows() != topo.n {
        return Err(Error::Dimension(format!(
            "{} state rows for {} nodes",
            h.nrows(),
            topo.n
        )));
    }
    let mut out = Vec::with_capacity(topo.counted.len());
    for &v in &topo.counted {
        let sims = topo.neighbors[v]
            .iter()
            .map(|&u| kernel_similarity(spec, h.row(v), h.row(u)))
            .collect::<Result<Vec<f64>>>()?;
        let peak = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - peak).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.push(NodeStructure {
            node: v,
            probs: exps.iter().map(|e| e / total).collect(),
        });
    }
    Ok(out)
}

/// Distributions for every layer of a propagation trace.
pub fn layer_structures(
    trace: &PropagationTrace,
    topo: &GraphTopology,
    spec: &KernelSpec,
) -> Result<Vec<Vec<NodeStructure>>> {
    trace
        .states
        .iter()
        .map(|h| local_structure(h, topo, spec))
        .collect()
}

// --- divergence -------------------------------------------------------------

/// KL divergence `KL(target || learner)`; zero-probability target terms
/// contribute nothing, and a zero learner probability under positive
/// target mass yields +inf.
pub fn kl_divergence(target: &[f64], learner: &[f64]) -> Result<f64> {
    if target.len() != learner.len() {
        return Err(Error::Alignment(format!(
            "distributions have lengths {} and {}",
            target.len(),
            learner.len()
        )));
    }
    let mut total = 0.0;
    for (&t, &l) in target.iter().zip(learner.iter()) {
        if t == 0.0 {
            continue;
        }
        total += t * (t / l).ln();
    }
    Ok(total)
}

/// The layer a student's layer `i` is aligned against in its peers:
/// the next one up, wrapping the final layer back to the first.
pub fn aligned_layer(i: usize, depth: usize) -> usize {
    assert!(i < depth, "layer {i} out of range for depth {depth}");
    (i + 1) % depth
}

/// Cross-layer alignment loss for one student, from precomputed
/// distributions: mean KL over peers and counted nodes, summed over
/// this student's layers, each against the peers' wrapped-next layer.
pub fn cross_layer_loss(
    learner: &[Vec<NodeStructure>],
    counterparts: &[Vec<Vec<NodeStructure>>],
) -> Result<f64> {
    let depth = learner.len();
    if counterparts.is_empty() || depth == 0 {
        return Ok(0.0);
    }
    let nodes = learner[0].len();
    if nodes == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, layer) in learner.iter().enumerate() {
        for peer in counterparts {
            if peer.len() != depth {
                return Err(Error::Alignment(format!(
                    "peer has {} layers, learner has {depth}",
                    peer.len()
                )));
            }
            let target_layer = &peer[aligned_layer(i, depth)];
            if target_layer.len() != layer.len() {
                return Err(Error::Alignment(format!(
                    "peer layer covers {} nodes, learner covers {}",
                    target_layer.len(),
                    layer.len()
                )));
            }
            for (t, l) in target_layer.iter().zip(layer.iter()) {
                if t.node != l.node {
                    return Err(Error::Alignment(format!(
                        "node order mismatch: {} vs {}",
                        t.node, l.node
                    )));
                }
                total += kl_divergence(&t.probs, &l.probs)?;
            }
        }
    }
    Ok(total * (1.0 / (counterparts.len() as f64 * nodes as f64)))
}

// --- tape versions ----------------------------------------------------------

/// Flattened (node, neighbor) pair lists plus per-node segments.
fn pair_lists(topo: &GraphTopology) -> (Vec<usize>, Vec<usize>, Vec<(usize, usize, usize)>) {
    let mut rows_v = Vec::new();
    let mut rows_u = Vec::new();
    let mut segments = Vec::with_capacity(topo.counted.len());
    for &v in &topo.counted {
        let start = rows_v.len();
        for &u in &topo.neighbors[v] {
            rows_v.push(v);
            rows_u.push(u);
        }
        segments.push((v, start, topo.neighbors[v].len()));
    }
    (rows_v, rows_u, segments)
}

fn pair_similarity_on_tape(tape: &mut Tape, a: Var, b: Var, spec: &KernelSpec) -> Var {
    match spec.kind {
        KernelKind::Linear => {
            let prod = tape.mul(a, b);
            tape.sum_cols(prod)
        }
        KernelKind::Euclidean => {
            let diff = tape.sub(a, b);
            let sq = tape.mul(diff, diff);
            tape.sum_cols(sq)
        }
        KernelKind::Poly => {
            let prod = tape.mul(a, b);
            let dot = tape.sum_cols(prod);
            let shifted = tape.add_const(dot, spec.poly_c);
            tape.powi(shifted, spec.poly_degree)
        }
        KernelKind::Rbf => {
            let diff = tape.sub(a, b);
            let sq = tape.mul(diff, diff);
            let dist = tape.sum_cols(sq);
            let scaled = tape.scale(dist, -1.0 / (2.0 * spec.sigma));
            tape.exp(scaled)
        }
    }
}

/// Tape analog of [`local_structure`]: per counted node, a `[1, k]`
/// distribution variable over its ascending neighbors.
pub fn local_structure_on_tape(
    tape: &mut Tape,
    h: Var,
    topo: &GraphTopology,
    spec: &KernelSpec,
) -> Vec<(usize, Var)> {
    let (rows_v, rows_u, segments) = pair_lists(topo);
    if rows_v.is_empty() {
        return Vec::new();
    }
    let a = tape.gather_rows(h, rows_v);
    let b = tape.gather_rows(h, rows_u);
    let sims = pair_similarity_on_tape(tape, a, b, spec);
    segments
        .into_iter()
        .map(|(node, start, len)| {
            let seg = tape.slice_rows(sims, start, start + len);
            let row = tape.transpose(seg);
            (node, tape.softmax_rows(row))
        })
        .collect()
}

/// Tape KL of a constant target row against a learner row. Expressed
/// through a log difference, so bitwise-equal inputs give exactly zero.
pub fn kl_on_tape(tape: &mut Tape, target: &[f64], learner: Var) -> Var {
    let t = tape.constant(Array2::from_shape_vec((1, target.len()), target.to_vec()).unwrap());
    let lt = tape.ln(t);
    let ll = tape.ln(learner);
    let diff = tape.sub(lt, ll);
    let terms = tape.mul(t, diff);
    tape.sum_all(terms)
}

/// Tape analog of [`cross_layer_loss`]. `learner_layers` are the
/// student's state snapshots on the tape; `counterparts` hold each
/// peer's plain distributions, consumed as constants.
pub fn cross_layer_loss_on_tape(
    tape: &mut Tape,
    learner_layers: &[Var],
    counterparts: &[Vec<Vec<NodeStructure>>],
    topo: &GraphTopology,
    spec: &KernelSpec,
) -> Result<Var> {
    let depth = learner_layers.len();
    let zero = tape.constant(Array2::zeros((1, 1)));
    if counterparts.is_empty() || depth == 0 || topo.counted.is_empty() {
        return Ok(zero);
    }
    for peer in counterparts {
        if peer.len() != depth {
            return Err(Error::Alignment(format!(
                "peer has {} layers, learner has {depth}",
                peer.len()
            )));
        }
    }
    let mut total = zero;
    for (i, &state) in learner_layers.iter().enumerate() {
        let layer = local_structure_on_tape(tape, state, topo, spec);
        for peer in counterparts {
            let target_layer = &peer[aligned_layer(i, depth)];
            if target_layer.len() != layer.len() {
                return Err(Error::Alignment(format!(
                    "peer layer covers {} nodes, learner covers {}",
                    target_layer.len(),
                    layer.len()
                )));
            }
            for (t, (node, dist)) in target_layer.iter().zip(layer.iter()) {
                if t.node != *node {
                    return Err(Error::Alignment(format!(
                        "node order mismatch: {} vs {node}",
                        t.node
                    )));
                }
                let kl = kl_on_tape(tape, &t.probs, *dist);
                total = tape.add(total, kl);
            }
        }
    }
    let scale = 1.0 / (counterparts.len() as f64 * topo.counted.len() as f64);
    Ok(tape.scale(total, scale))
}
