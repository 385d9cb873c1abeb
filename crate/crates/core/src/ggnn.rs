//! Gated graph propagation and the convolution/pooling readout.
//!
//! Node states are rows of an `[n, z]` matrix. Each propagation step
//! aggregates messages over every (edge kind, direction) pair with its
//! own weight matrix, adds a shared message bias, and feeds the result
//! through GRU-style gates. A trace keeps one state snapshot per step,
//! the first being the padded input features.
//!
//! The readout scores a graph from two parallel branches: one consumes
//! the final state concatenated with the raw features, the other the
//! final state alone. Both run a conv/relu/maxpool stack over the node
//! sequence in canonical (ascending id) order, apply their output
//! layer per remaining position, and the elementwise product of the
//! branches is averaged into class scores.
//!
//! All forward math is expressed on a [`Tape`](crate::tape::Tape), so
//! training gets exact analytic gradients through the same code that
//! serves evaluation.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cpg::{CodePropertyGraph, EdgeKind};
use crate::tape::{Tape, Var};
use crate::{Error, Result};

// --- parameters ----------------------------------------------------------

/// Message weight matrices for one edge kind, one per direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedPair {
    pub fwd: Array2<f64>,
    pub rev: Array2<f64>,
}

/// Per-kind message weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageWeights {
    #[serde(rename = "AST")]
    pub ast: DirectedPair,
    #[serde(rename = "CFG")]
    pub cfg: DirectedPair,
    #[serde(rename = "DDG")]
    pub ddg: DirectedPair,
    #[serde(rename = "CDG")]
    pub cdg: DirectedPair,
}

impl MessageWeights {
    pub fn get(&self, kind: EdgeKind) -> &DirectedPair {
        match kind {
            EdgeKind::Ast => &self.ast,
            EdgeKind::Cfg => &self.cfg,
            EdgeKind::Ddg => &self.ddg,
            EdgeKind::Cdg => &self.cdg,
        }
    }
}

/// GRU gate matrices, applied as `rows . M` (stored input-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruWeights {
    #[serde(rename = "Wz")]
    pub update_in: Array2<f64>,
    #[serde(rename = "Uz")]
    pub update_state: Array2<f64>,
    #[serde(rename = "Wr")]
    pub reset_in: Array2<f64>,
    #[serde(rename = "Ur")]
    pub reset_state: Array2<f64>,
    #[serde(rename = "W")]
    pub cand_in: Array2<f64>,
    #[serde(rename = "U")]
    pub cand_state: Array2<f64>,
}

/// Propagation parameters: 8 message matrices (4 kinds x 2
/// directions), a shared message bias, gate matrices, and the step
/// count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgnnParams {
    #[serde(rename = "A")]
    pub message: MessageWeights,
    #[serde(rename = "b")]
    pub message_bias: Array2<f64>,
    pub gru: GruWeights,
    #[serde(rename = "T")]
    pub steps: usize,
}

impl GgnnParams {
    pub fn state_dim(&self) -> usize {
        self.message_bias.ncols()
    }

    /// Random initialization with N(0, sigma^2) weights and zero bias.
    pub fn random(state_dim: usize, steps: usize, sigma: f64, rng: &mut impl Rng) -> GgnnParams {
        assert!(steps >= 1, "propagation needs at least one snapshot");
        let mut mat = || random_matrix(state_dim, state_dim, sigma, rng);
        GgnnParams {
            message: MessageWeights {
                ast: DirectedPair { fwd: mat(), rev: mat() },
                cfg: DirectedPair { fwd: mat(), rev: mat() },
                ddg: DirectedPair { fwd: mat(), rev: mat() },
                cdg: DirectedPair { fwd: mat(), rev: mat() },
            },
            message_bias: Array2::zeros((1, state_dim)),
            gru: GruWeights {
                update_in: mat(),
                update_state: mat(),
                reset_in: mat(),
                reset_state: mat(),
                cand_in: mat(),
                cand_state: mat(),
            },
            steps,
        }
    }
}

/// One 1-D convolution layer over the node sequence: taps are stacked
/// into a single `[kernel_width * in_channels, out_channels]` weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

/// A linear output layer producing one score per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

/// The two conv stacks of the readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStacks {
    /// Branch over `[state || features]` rows.
    #[serde(rename = "z")]
    pub combined: Vec<ConvLayer>,
    /// Branch over state rows alone.
    #[serde(rename = "y")]
    pub state: Vec<ConvLayer>,
}

/// Readout parameters: per-branch conv stacks and output layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutParams {
    pub conv: ConvStacks,
    #[serde(rename = "mlp_z")]
    pub mlp_combined: DenseLayer,
    #[serde(rename = "mlp_y")]
    pub mlp_state: DenseLayer,
    pub kernel_width: usize,
    pub pool_window: usize,
}

impl ReadoutParams {
    pub fn depth(&self) -> usize {
        self.conv.combined.len()
    }

    /// Random initialization. `channels` lists the output channels of
    /// each conv layer (its length is the stack depth).
    pub fn random(
        state_dim: usize,
        feature_dim: usize,
        channels: &[usize],
        kernel_width: usize,
        pool_window: usize,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> ReadoutParams {
        assert!(!channels.is_empty(), "readout needs at least one conv layer");
        assert!(kernel_width >= 1 && pool_window >= 1);
        let stack = |start: usize, rng: &mut dyn rand::RngCore| -> Vec<ConvLayer> {
            let mut layers = Vec::with_capacity(channels.len());
            let mut c_in = start;
            for &c_out in channels {
                layers.push(ConvLayer {
                    weight: random_matrix(kernel_width * c_in, c_out, sigma, rng),
                    bias: Array2::zeros((1, c_out)),
                });
                c_in = c_out;
            }
            layers
        };
        let last = *channels.last().unwrap();
        ReadoutParams {
            conv: ConvStacks {
                combined: stack(state_dim + feature_dim, &mut *rng),
                state: stack(state_dim, &mut *rng),
            },
            mlp_combined: DenseLayer {
                weight: random_matrix(last, 2, sigma, rng),
                bias: Array2::zeros((1, 2)),
            },
            mlp_state: DenseLayer {
                weight: random_matrix(last, 2, sigma, rng),
                bias: Array2::zeros((1, 2)),
            },
            kernel_width,
            pool_window,
        }
    }
}

/// One student: propagation plus readout parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    pub ggnn: GgnnParams,
    pub readout: ReadoutParams,
}

impl StudentParams {
    /// Names of all weight tensors, in the fixed traversal order shared
    /// by [`tensors`](Self::tensors), [`tensors_mut`](Self::tensors_mut)
    /// and [`StudentVars::ordered`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "A.AST.fwd", "A.AST.rev", "A.CFG.fwd", "A.CFG.rev", "A.DDG.fwd", "A.DDG.rev",
            "A.CDG.fwd", "A.CDG.rev", "b", "gru.Wz", "gru.Uz", "gru.Wr", "gru.Ur", "gru.W",
            "gru.U",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..self.readout.conv.combined.len() {
            names.push(format!("readout.conv.z.{i}.weight"));
            names.push(format!("readout.conv.z.{i}.bias"));
        }
        for i in 0..self.readout.conv.state.len() {
            names.push(format!("readout.conv.y.{i}.weight"));
            names.push(format!("readout.conv.y.{i}.bias"));
        }
        for s in [
            "readout.mlp_z.weight",
            "readout.mlp_z.bias",
            "readout.mlp_y.weight",
            "readout.mlp_y.bias",
        ] {
            names.push(s.to_string());
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = vec![
            &self.ggnn.message.ast.fwd,
            &self.ggnn.message.ast.rev,
            &self.ggnn.message.cfg.fwd,
            &self.ggnn.message.cfg.rev,
            &self.ggnn.message.ddg.fwd,
            &self.ggnn.message.ddg.rev,
            &self.ggnn.message.cdg.fwd,
            &self.ggnn.message.cdg.rev,
            &self.ggnn.message_bias,
            &self.ggnn.gru.update_in,
            &self.ggnn.gru.update_state,
            &self.ggnn.gru.reset_in,
            &self.ggnn.gru.reset_state,
            &self.ggnn.gru.cand_in,
            &self.ggnn.gru.cand_state,
        ];
        for layer in &self.readout.conv.combined {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        for layer in &self.readout.conv.state {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.readout.mlp_combined.weight);
        out.push(&self.readout.mlp_combined.bias);
        out.push(&self.readout.mlp_state.weight);
        out.push(&self.readout.mlp_state.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![
            &mut self.ggnn.message.ast.fwd,
            &mut self.ggnn.message.ast.rev,
            &mut self.ggnn.message.cfg.fwd,
            &mut self.ggnn.message.cfg.rev,
            &mut self.ggnn.message.ddg.fwd,
            &mut self.ggnn.message.ddg.rev,
            &mut self.ggnn.message.cdg.fwd,
            &mut self.ggnn.message.cdg.rev,
            &mut self.ggnn.message_bias,
            &mut self.ggnn.gru.update_in,
            &mut self.ggnn.gru.update_state,
            &mut self.ggnn.gru.reset_in,
            &mut self.ggnn.gru.reset_state,
            &mut self.ggnn.gru.cand_in,
            &mut self.ggnn.gru.cand_state,
        ];
        for layer in &mut self.readout.conv.combined {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for layer in &mut self.readout.conv.state {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.readout.mlp_combined.weight);
        out.push(&mut self.readout.mlp_combined.bias);
        out.push(&mut self.readout.mlp_state.weight);
        out.push(&mut self.readout.mlp_state.bias);
        out
    }
}

pub(crate) fn random_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    sigma: f64,
    rng: &mut R,
) -> Array2<f64> {
    let dist = Normal::new(0.0, sigma).expect("sigma must be finite");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

// --- topology ------------------------------------------------------------

/// Gather/scatter index lists for one (kind, direction) pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeIndexList {
    pub from: Vec<usize>,
    pub to: Vec<usize>,
}

/// Dense-index adjacency of one graph, in canonical node order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    pub n: usize,
    /// Kind-major (order of [`EdgeKind::ALL`]), then [forward,
    /// reverse].
    pub directed: [[EdgeIndexList; 2]; 4],
    /// Undirected union of all edge kinds, per node, sorted ascending.
    pub neighbors: Vec<Vec<usize>>,
    /// Nodes with at least one neighbor.
    pub counted: Vec<usize>,
}

pub fn kind_index(kind: EdgeKind) -> usize {
    EdgeKind::ALL.iter().position(|k| *k == kind).unwrap()
}

impl GraphTopology {
    pub fn from_graph(graph: &CodePropertyGraph) -> GraphTopology {
        let n = graph.nodes.len();
        let mut directed: [[EdgeIndexList; 2]; 4] = Default::default();
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for edge in &graph.edges {
            let src = graph.node_index(edge.src).expect("validated at parse");
            let dst = graph.node_index(edge.dst).expect("validated at parse");
            let k = kind_index(edge.kind);
            directed[k][0].from.push(src);
            directed[k][0].to.push(dst);
            directed[k][1].from.push(dst);
            directed[k][1].to.push(src);
            neighbors[src].push(dst);
            neighbors[dst].push(src);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let counted = (0..n).filter(|&v| !neighbors[v].is_empty()).collect();
        GraphTopology {
            n,
            directed,
            neighbors,
            counted,
        }
    }
}

// --- tape forward --------------------------------------------------------

/// Tape handles for one student's propagation parameters.
pub struct GgnnVars {
    /// Kind-major, `[fwd, rev]`.
    pub message: [[Var; 2]; 4],
    pub bias: Var,
    pub update_in: Var,
    pub update_state: Var,
    pub reset_in: Var,
    pub reset_state: Var,
    pub cand_in: Var,
    pub cand_state: Var,
}

/// Tape handles for readout parameters.
pub struct ReadoutVars {
    pub conv_combined: Vec<(Var, Var)>,
    pub conv_state: Vec<(Var, Var)>,
    pub mlp_combined: (Var, Var),
    pub mlp_state: (Var, Var),
}

/// Pushes propagation parameters onto a tape.
pub fn push_ggnn(tape: &mut Tape, params: &GgnnParams, trainable: bool) -> GgnnVars {
    let mut push = |m: &Array2<f64>| {
        if trainable {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    let message = [
        [push(&params.message.ast.fwd), push(&params.message.ast.rev)],
        [push(&params.message.cfg.fwd), push(&params.message.cfg.rev)],
        [push(&params.message.ddg.fwd), push(&params.message.ddg.rev)],
        [push(&params.message.cdg.fwd), push(&params.message.cdg.rev)],
    ];
    GgnnVars {
        message,
        bias: push(&params.message_bias),
        update_in: push(&params.gru.update_in),
        update_state: push(&params.gru.update_state),
        reset_in: push(&params.gru.reset_in),
        reset_state: push(&params.gru.reset_state),
        cand_in: push(&params.gru.cand_in),
        cand_state: push(&params.gru.cand_state),
    }
}

/// Tape handles for one full student.
pub struct StudentVars {
    pub ggnn: GgnnVars,
    pub readout: ReadoutVars,
}

impl StudentVars {
    /// All parameter handles in [`StudentParams::tensor_names`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let g = &self.ggnn;
        let mut out = vec![
            g.message[0][0],
            g.message[0][1],
            g.message[1][0],
            g.message[1][1],
            g.message[2][0],
            g.message[2][1],
            g.message[3][0],
            g.message[3][1],
            g.bias,
            g.update_in,
            g.update_state,
            g.reset_in,
            g.reset_state,
            g.cand_in,
            g.cand_state,
        ];
        for &(w, b) in &self.readout.conv_combined {
            out.push(w);
            out.push(b);
        }
        for &(w, b) in &self.readout.conv_state {
            out.push(w);
            out.push(b);
        }
        out.push(self.readout.mlp_combined.0);
        out.push(self.readout.mlp_combined.1);
        out.push(self.readout.mlp_state.0);
        out.push(self.readout.mlp_state.1);
        out
    }
}

/// Pushes a full student onto a tape.
pub fn push_student(tape: &mut Tape, params: &StudentParams, trainable: bool) -> StudentVars {
    StudentVars {
        ggnn: push_ggnn(tape, &params.ggnn, trainable),
        readout: push_readout(tape, &params.readout, trainable),
    }
}

/// Pushes readout parameters onto a tape.
pub fn push_readout(tape: &mut Tape, params: &ReadoutParams, trainable: bool) -> ReadoutVars {
    let mut push = |m: &Array2<f64>| {
        if trainable {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    ReadoutVars {
        conv_combined: params
            .conv
            .combined
            .iter()
            .map(|l| (push(&l.weight), push(&l.bias)))
            .collect(),
        conv_state: params
            .conv
            .state
            .iter()
            .map(|l| (push(&l.weight), push(&l.bias)))
            .collect(),
        mlp_combined: (push(&params.mlp_combined.weight), push(&params.mlp_combined.bias)),
        mlp_state: (push(&params.mlp_state.weight), push(&params.mlp_state.bias)),
    }
}

/// One message aggregation on the tape: per (kind, direction) weighted
/// neighbor sums plus the shared bias on every row.
pub fn aggregate_on_tape(tape: &mut Tape, h_prev: Var, topo: &GraphTopology, vars: &GgnnVars) -> Var {
    let (n, z) = tape.shape(h_prev);
    let mut acc = tape.constant(Array2::zeros((n, z)));
    for (k, pairs) in topo.directed.iter().enumerate() {
        for (d, list) in pairs.iter().enumerate() {
            if list.from.is_empty() {
                continue;
            }
            let gathered = tape.gather_rows(h_prev, list.from.clone());
            let messaged = tape.matmul(gathered, vars.message[k][d]);
            let scattered = tape.scatter_add_rows(messaged, list.to.clone(), n);
            acc = tape.add(acc, scattered);
        }
    }
    tape.add_row(acc, vars.bias)
}

/// One GRU update on the tape.
pub fn gru_on_tape(tape: &mut Tape, msg: Var, h_prev: Var, vars: &GgnnVars) -> Var {
    let zi = tape.matmul(msg, vars.update_in);
    let zs = tape.matmul(h_prev, vars.update_state);
    let zsum = tape.add(zi, zs);
    let update = tape.sigmoid(zsum);

    let ri = tape.matmul(msg, vars.reset_in);
    let rs = tape.matmul(h_prev, vars.reset_state);
    let rsum = tape.add(ri, rs);
    let reset = tape.sigmoid(rsum);

    let gated_state = tape.mul(reset, h_prev);
    let ci = tape.matmul(msg, vars.cand_in);
    let cs = tape.matmul(gated_state, vars.cand_state);
    let csum = tape.add(ci, cs);
    let cand = tape.tanh(csum);

    // h = h_prev + update * (cand - h_prev)  ==  (1 - u) h_prev + u c.
    let delta = tape.sub(cand, h_prev);
    let step = tape.mul(update, delta);
    tape.add(h_prev, step)
}

/// Full propagation: returns `steps` snapshots, the first being the
/// input state itself (so `steps = 1` applies no update).
pub fn propagate_on_tape(
    tape: &mut Tape,
    h1: Var,
    topo: &GraphTopology,
    vars: &GgnnVars,
    steps: usize,
) -> Vec<Var> {
    assert!(steps >= 1);
    let mut states = Vec::with_capacity(steps);
    states.push(h1);
    for _ in 1..steps {
        let prev = *states.last().unwrap();
        let msg = aggregate_on_tape(tape, prev, topo, vars);
        states.push(gru_on_tape(tape, msg, prev, vars));
    }
    states
}

fn conv_branch(
    tape: &mut Tape,
    mut seq: Var,
    layers: &[(Var, Var)],
    mlp: (Var, Var),
    kernel_width: usize,
    pool_window: usize,
) -> Var {
    for &(weight, bias) in layers {
        let rows = tape.shape(seq).0;
        let padded = tape.pad_rows(seq, rows.max(kernel_width));
        let out_len = tape.shape(padded).0 - kernel_width + 1;
        let mut window = tape.slice_rows(padded, 0, out_len);
        for tap in 1..kernel_width {
            let s = tape.slice_rows(padded, tap, tap + out_len);
            window = tape.concat_cols(window, s);
        }
        let lin = tape.matmul(window, weight);
        let biased = tape.add_row(lin, bias);
        let act = tape.relu(biased);
        seq = tape.max_pool_rows(act, pool_window);
    }
    let out = tape.matmul(seq, mlp.0);
    tape.add_row(out, mlp.1)
}

/// Readout on the tape: returns (scores, probabilities), each `[1, 2]`.
pub fn readout_on_tape(
    tape: &mut Tape,
    h_final: Var,
    features: Var,
    vars: &ReadoutVars,
    kernel_width: usize,
    pool_window: usize,
) -> (Var, Var) {
    let combined = tape.concat_cols(h_final, features);
    let branch_combined = conv_branch(
        tape,
        combined,
        &vars.conv_combined,
        vars.mlp_combined,
        kernel_width,
        pool_window,
    );
    let branch_state = conv_branch(
        tape,
        h_final,
        &vars.conv_state,
        vars.mlp_state,
        kernel_width,
        pool_window,
    );
    let prod = tape.mul(branch_combined, branch_state);
    let scores = tape.mean_rows(prod);
    let probs = tape.softmax_rows(scores);
    (scores, probs)
}

// --- plain wrappers ------------------------------------------------------

/// State snapshots of one propagation run; `states[0]` is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationTrace {
    pub states: Vec<Array2<f64>>,
}

impl PropagationTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("a trace is never empty")
    }
}

/// Class scores of one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphLogits {
    pub scores: [f64; 2],
    pub probabilities: [f64; 2],
}

fn validate_state_width(h: &Array2<f64>, params: &GgnnParams) -> Result<()> {
    if h.ncols() != params.state_dim() {
        return Err(Error::Dimension(format!(
            "state width {} does not match parameter width {}",
            h.ncols(),
            params.state_dim()
        )));
    }
    Ok(())
}

/// One message aggregation over plain matrices.
pub fn aggregate_messages(
    h_prev: &Array2<f64>,
    topo: &GraphTopology,
    params: &GgnnParams,
) -> Result<Array2<f64>> {
    validate_state_width(h_prev, params)?;
    if h_prev.nrows() != topo.n {
        return Err(Error::Dimension(format!(
            "{} state rows for {} nodes",
            h_prev.nrows(),
            topo.n
        )));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h_prev.clone());
    let vars = push_ggnn(&mut tape, params, false);
    let out = aggregate_on_tape(&mut tape, h, topo, &vars);
    Ok(tape.value(out).clone())
}

/// One GRU update over plain matrices.
pub fn gru_update(
    msg: &Array2<f64>,
    h_prev: &Array2<f64>,
    params: &GgnnParams,
) -> Result<Array2<f64>> {
    validate_state_width(h_prev, params)?;
    if msg.dim() != h_prev.dim() {
        return Err(Error::Dimension(
            "message and state shapes differ".to_string(),
        ));
    }
    let mut tape = Tape::new();
    let m = tape.constant(msg.clone());
    let h = tape.constant(h_prev.clone());
    let vars = push_ggnn(&mut tape, params, false);
    let out = gru_on_tape(&mut tape, m, h, &vars);
    Ok(tape.value(out).clone())
}

/// Full propagation over plain matrices.
pub fn propagate(
    h1: &Array2<f64>,
    topo: &GraphTopology,
    params: &GgnnParams,
) -> Result<PropagationTrace> {
    validate_state_width(h1, params)?;
    if h1.nrows() != topo.n {
        return Err(Error::Dimension(format!(
            "{} state rows for {} nodes",
            h1.nrows(),
            topo.n
        )));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h1.clone());
    let vars = push_ggnn(&mut tape, params, false);
    let states = propagate_on_tape(&mut tape, h, topo, &vars, params.steps);
    Ok(PropagationTrace {
        states: states.into_iter().map(|v| tape.value(v).clone()).collect(),
    })
}

/// Column-wise sum of final node states: the order-invariant graph
/// embedding kept as an exported diagnostic.
pub fn graph_embedding_sum(h_final: &Array2<f64>) -> Vec<f64> {
    let mut v = vec![0.0; h_final.ncols()];
    for row in h_final.rows() {
        for (c, x) in row.iter().enumerate() {
            v[c] += x;
        }
    }
    v
}

/// Readout over plain matrices.
pub fn readout(
    h_final: &Array2<f64>,
    features: &Array2<f64>,
    params: &ReadoutParams,
) -> Result<GraphLogits> {
    if h_final.nrows() != features.nrows() {
        return Err(Error::Dimension(format!(
            "{} state rows vs {} feature rows",
            h_final.nrows(),
            features.nrows()
        )));
    }
    if params.conv.combined.is_empty() || params.conv.combined.len() != params.conv.state.len() {
        return Err(Error::Config(
            "readout branches need equal, nonzero conv depth".to_string(),
        ));
    }
    let expect_combined = params.kernel_width * (h_final.ncols() + features.ncols());
    if params.conv.combined[0].weight.nrows() != expect_combined {
        return Err(Error::Dimension(format!(
            "combined conv expects input width {}, got {}",
            params.conv.combined[0].weight.nrows(),
            expect_combined
        )));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h_final.clone());
    let x = tape.constant(features.clone());
    let vars = push_readout(&mut tape, params, false);
    let (scores, probs) = readout_on_tape(
        &mut tape,
        h,
        x,
        &vars,
        params.kernel_width,
        params.pool_window,
    );
    let s = tape.value(scores);
    let p = tape.value(probs);
    Ok(GraphLogits {
        scores: [s[[0, 0]], s[[0, 1]]],
        probabilities: [p[[0, 0]], p[[0, 1]]],
    })
}

/// Full graph score: propagate then read out.
pub fn score_graph(
    params: &StudentParams,
    topo: &GraphTopology,
    features: &Array2<f64>,
    h1: &Array2<f64>,
) -> Result<(PropagationTrace, GraphLogits)> {
    let trace = propagate(h1, topo, &params.ggnn)?;
    let logits = readout(trace.final_state(), features, &params.readout)?;
    Ok((trace, logits))
}
