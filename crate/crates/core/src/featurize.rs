//! Node feature construction.
//!
//! Every node is represented as the concatenation of a one-hot type
//! encoding (with a reserved unknown slot) and a content embedding of
//! its code fragment produced by a provider. Feature matrices follow
//! the canonical node order (ascending id) and are zero-padded on the
//! right to the propagation state width.
//!
//! Two providers ship:
//!
//! - [`HashingProvider`]: deterministic token feature hashing with
//!   signed buckets; needs no external data and never trains.
//! - [`EmbeddingTableProvider`]: a trainable token-vector lookup table
//!   with mean pooling, loadable from an exported token-vector dump of
//!   an external code language model; its table participates in
//!   gradient updates when training.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cpg::{CodePropertyGraph, CorpusRecord, Split};
use crate::{Error, Result};

// --- tokenization --------------------------------------------------------

/// Splits text on whitespace and punctuation; tokens are the maximal
/// alphanumeric/underscore runs.
pub fn split_tokens(text: &str) -> Vec<&str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .collect()
}

/// FNV-1a 64-bit hash; fixed and seedless so embeddings never drift
/// between runs or platforms.
fn fnv1a64(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// --- type vocabulary -----------------------------------------------------

/// Node-type vocabulary fitted on the training split.
///
/// Indices are dense in `[0, len)` following the sorted order of the
/// type names; the unknown slot sits at index `len`, so one-hot
/// vectors have width `len + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeVocabulary {
    index: BTreeMap<String, usize>,
}

impl TypeVocabulary {
    /// Builds the vocabulary from the training split only; other
    /// splits map unseen types onto the unknown slot.
    pub fn fit(records: &[CorpusRecord]) -> TypeVocabulary {
        let mut names: Vec<&str> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .flat_map(|r| r.graph.nodes.iter().map(|n| n.node_type.as_str()))
            .collect();
        names.sort_unstable();
        names.dedup();
        let index = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| (name.to_string(), i))
            .collect();
        TypeVocabulary { index }
    }

    /// Number of known types (excludes the unknown slot).
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// One-hot width: known types plus the unknown slot.
    pub fn width(&self) -> usize {
        self.index.len() + 1
    }

    /// Slot for a type name; unseen names land on the unknown slot.
    pub fn slot(&self, node_type: &str) -> usize {
        self.index.get(node_type).copied().unwrap_or(self.index.len())
    }

    /// One-hot encoding of a type name.
    pub fn encode(&self, node_type: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        v[self.slot(node_type)] = 1.0;
        v
    }
}

// --- providers -----------------------------------------------------------

/// Content-embedding interface shared by all providers.
pub trait EmbeddingProvider {
    /// Width of fragment embeddings.
    fn content_dim(&self) -> usize;
    /// Width of whole-function sequence embeddings.
    fn sequence_dim(&self) -> usize;
    /// Whether the provider carries trainable state.
    fn trainable(&self) -> bool;
    /// Embeds one code fragment; empty (tokenless) fragments embed to
    /// the zero vector.
    fn embed_fragment(&self, fragment: &str) -> Vec<f64>;
    /// Embeds the whole function source.
    fn embed_sequence(&self, code: &str) -> Vec<f64>;
}

/// Deterministic token feature hashing with signed buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashingProvider {
    pub content_dim: usize,
    pub sequence_dim: usize,
}

impl HashingProvider {
    pub fn new(content_dim: usize, sequence_dim: usize) -> HashingProvider {
        HashingProvider {
            content_dim,
            sequence_dim,
        }
    }

    fn hash_into(text: &str, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for token in split_tokens(text) {
            let h = fnv1a64(token);
            let bucket = (h % dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        v
    }
}

impl EmbeddingProvider for HashingProvider {
    fn content_dim(&self) -> usize {
        self.content_dim
    }

    fn sequence_dim(&self) -> usize {
        self.sequence_dim
    }

    fn trainable(&self) -> bool {
        false
    }

    fn embed_fragment(&self, fragment: &str) -> Vec<f64> {
        Self::hash_into(fragment, self.content_dim)
    }

    fn embed_sequence(&self, code: &str) -> Vec<f64> {
        Self::hash_into(code, self.sequence_dim)
    }
}

/// Trainable token-vector lookup with mean pooling.
///
/// The table can be initialized from a token-vector dump exported from
/// an external code language model (`pretrained:<path>`), or randomly
/// for tests. Unknown tokens are skipped; a fragment with no known
/// token embeds to the zero vector. Sequence embeddings reuse the same
/// table, so `sequence_dim == content_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTableProvider {
    /// Sorted; row `i` of `table` embeds `tokens[i]`.
    tokens: Vec<String>,
    pub table: Array2<f64>,
}

impl EmbeddingTableProvider {
    pub fn new(tokens: Vec<String>, table: Array2<f64>) -> Result<EmbeddingTableProvider> {
        if tokens.len() != table.nrows() {
            return Err(Error::provider(
                "table",
                format!(
                    "{} tokens but {} table rows",
                    tokens.len(),
                    table.nrows()
                ),
            ));
        }
        // Sort tokens and their rows together so lookups can binary
        // search.
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.sort_by(|&a, &b| tokens[a].cmp(&tokens[b]));
        if order.windows(2).any(|w| tokens[w[0]] == tokens[w[1]]) {
            return Err(Error::provider("table", "duplicate tokens in export"));
        }
        let sorted_tokens: Vec<String> = order.iter().map(|&i| tokens[i].clone()).collect();
        let mut sorted_table = Array2::zeros((table.nrows(), table.ncols()));
        for (r, &src) in order.iter().enumerate() {
            sorted_table.row_mut(r).assign(&table.row(src));
        }
        Ok(EmbeddingTableProvider {
            tokens: sorted_tokens,
            table: sorted_table,
        })
    }

    /// Loads a token-vector dump: `{"tokens": [...], "vectors": [[...]]}`.
    pub fn from_export(path: &Path) -> Result<EmbeddingTableProvider> {
        #[derive(Deserialize)]
        struct Export {
            tokens: Vec<String>,
            vectors: Vec<Vec<f64>>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::provider("table", format!("cannot read export {}: {e}", path.display()))
        })?;
        let export: Export = serde_json::from_str(&text)
            .map_err(|e| Error::provider("table", format!("malformed export: {e}")))?;
        if export.tokens.is_empty() {
            return Err(Error::provider("table", "export has no tokens"));
        }
        let dim = export.vectors.first().map(|v| v.len()).unwrap_or(0);
        if dim == 0 || export.vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::provider("table", "export vectors have uneven widths"));
        }
        if export.vectors.len() != export.tokens.len() {
            return Err(Error::provider("table", "token/vector count mismatch"));
        }
        let mut table = Array2::zeros((export.tokens.len(), dim));
        for (r, v) in export.vectors.iter().enumerate() {
            for (c, x) in v.iter().enumerate() {
                table[[r, c]] = *x;
            }
        }
        EmbeddingTableProvider::new(export.tokens, table)
    }

    /// Row indices of the known tokens of a fragment, in token order.
    pub fn token_rows(&self, fragment: &str) -> Vec<usize> {
        split_tokens(fragment)
            .into_iter()
            .filter_map(|t| self.tokens.binary_search_by(|probe| probe.as_str().cmp(t)).ok())
            .collect()
    }
}

impl EmbeddingProvider for EmbeddingTableProvider {
    fn content_dim(&self) -> usize {
        self.table.ncols()
    }

    fn sequence_dim(&self) -> usize {
        self.table.ncols()
    }

    fn trainable(&self) -> bool {
        true
    }

    fn embed_fragment(&self, fragment: &str) -> Vec<f64> {
        let rows = self.token_rows(fragment);
        let mut v = vec![0.0; self.content_dim()];
        if rows.is_empty() {
            return v;
        }
        for &r in &rows {
            for c in 0..v.len() {
                v[c] += self.table[[r, c]];
            }
        }
        let k = rows.len() as f64;
        v.iter_mut().for_each(|x| *x /= k);
        v
    }

    fn embed_sequence(&self, code: &str) -> Vec<f64> {
        self.embed_fragment(code)
    }
}

/// A concrete provider chosen by configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provider {
    Hashing(HashingProvider),
    Table(EmbeddingTableProvider),
}

impl Provider {
    /// Resolves a provider spec: `hashing` or `pretrained:<export-path>`.
    pub fn from_spec(spec: &str, content_dim: usize, sequence_dim: usize) -> Result<Provider> {
        if spec == "hashing" {
            return Ok(Provider::Hashing(HashingProvider::new(
                content_dim,
                sequence_dim,
            )));
        }
        if let Some(path) = spec.strip_prefix("pretrained:") {
            let table = EmbeddingTableProvider::from_export(Path::new(path))?;
            return Ok(Provider::Table(table));
        }
        Err(Error::Config(format!(
            "unknown provider `{spec}` (expected `hashing` or `pretrained:<export-path>`)"
        )))
    }

    pub fn as_table(&self) -> Option<&EmbeddingTableProvider> {
        match self {
            Provider::Table(t) => Some(t),
            Provider::Hashing(_) => None,
        }
    }

    pub fn as_table_mut(&mut self) -> Option<&mut EmbeddingTableProvider> {
        match self {
            Provider::Table(t) => Some(t),
            Provider::Hashing(_) => None,
        }
    }
}

impl EmbeddingProvider for Provider {
    fn content_dim(&self) -> usize {
        match self {
            Provider::Hashing(p) => p.content_dim(),
            Provider::Table(p) => p.content_dim(),
        }
    }

    fn sequence_dim(&self) -> usize {
        match self {
            Provider::Hashing(p) => p.sequence_dim(),
            Provider::Table(p) => p.sequence_dim(),
        }
    }

    fn trainable(&self) -> bool {
        match self {
            Provider::Hashing(p) => p.trainable(),
            Provider::Table(p) => p.trainable(),
        }
    }

    fn embed_fragment(&self, fragment: &str) -> Vec<f64> {
        match self {
            Provider::Hashing(p) => p.embed_fragment(fragment),
            Provider::Table(p) => p.embed_fragment(fragment),
        }
    }

    fn embed_sequence(&self, code: &str) -> Vec<f64> {
        match self {
            Provider::Hashing(p) => p.embed_sequence(code),
            Provider::Table(p) => p.embed_sequence(code),
        }
    }
}

// --- feature assembly ----------------------------------------------------

/// Per-node features for one graph, in canonical (ascending id) node
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureMatrix {
    /// `[n, type_width + content_dim]`.
    pub features: Array2<f64>,
    pub type_width: usize,
    pub content_dim: usize,
}

impl NodeFeatureMatrix {
    pub fn feature_dim(&self) -> usize {
        self.type_width + self.content_dim
    }
}

/// Concatenates a type one-hot with a content embedding.
pub fn build_node_feature(type_vec: &[f64], content_vec: &[f64]) -> Result<Vec<f64>> {
    if type_vec.is_empty() {
        return Err(Error::Dimension(
            "node feature needs a nonempty type encoding".to_string(),
        ));
    }
    let mut v = Vec::with_capacity(type_vec.len() + content_vec.len());
    v.extend_from_slice(type_vec);
    v.extend_from_slice(content_vec);
    Ok(v)
}

/// Builds the feature matrix of a graph.
pub fn featurize_graph(
    graph: &CodePropertyGraph,
    vocab: &TypeVocabulary,
    provider: &impl EmbeddingProvider,
) -> Result<NodeFeatureMatrix> {
    let type_width = vocab.width();
    let content_dim = provider.content_dim();
    let mut features = Array2::zeros((graph.nodes.len(), type_width + content_dim));
    for (r, node) in graph.nodes.iter().enumerate() {
        let row = build_node_feature(
            &vocab.encode(&node.node_type),
            &provider.embed_fragment(&node.fragment),
        )?;
        for (c, x) in row.iter().enumerate() {
            features[[r, c]] = *x;
        }
    }
    Ok(NodeFeatureMatrix {
        features,
        type_width,
        content_dim,
    })
}

/// Zero-pads feature rows on the right to the propagation state width.
pub fn pad_to_state_dim(features: &Array2<f64>, state_dim: usize) -> Result<Array2<f64>> {
    let (n, d) = (features.nrows(), features.ncols());
    if state_dim < d {
        return Err(Error::Dimension(format!(
            "state width {state_dim} below feature width {d}"
        )));
    }
    let mut h = Array2::zeros((n, state_dim));
    h.slice_mut(ndarray::s![.., ..d]).assign(features);
    Ok(h)
}

// --- feature dumps -------------------------------------------------------

/// Sidecar metadata for a binary feature dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDumpSidecar {
    pub rows: usize,
    pub cols: usize,
    pub type_width: usize,
    pub content_dim: usize,
    pub node_ids: Vec<u64>,
}

/// Writes a feature matrix as little-endian `f64` row-major binary plus
/// a JSON sidecar naming the node ids and widths.
pub fn write_feature_dump(
    bin_path: &Path,
    matrix: &NodeFeatureMatrix,
    node_ids: &[u64],
) -> Result<()> {
    if node_ids.len() != matrix.features.nrows() {
        return Err(Error::Dimension(format!(
            "{} node ids for {} feature rows",
            node_ids.len(),
            matrix.features.nrows()
        )));
    }
    let mut file = std::fs::File::create(bin_path)?;
    for x in matrix.features.iter() {
        file.write_all(&x.to_le_bytes())?;
    }
    let sidecar = FeatureDumpSidecar {
        rows: matrix.features.nrows(),
        cols: matrix.features.ncols(),
        type_width: matrix.type_width,
        content_dim: matrix.content_dim,
        node_ids: node_ids.to_vec(),
    };
    let sidecar_path = bin_path.with_extension("json");
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a dump written by [`write_feature_dump`].
pub fn read_feature_dump(bin_path: &Path) -> Result<(NodeFeatureMatrix, Vec<u64>)> {
    let sidecar_path = bin_path.with_extension("json");
    let sidecar: FeatureDumpSidecar =
        serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
    let expected = sidecar.rows * sidecar.cols * 8;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "feature dump holds {} bytes, sidecar promises {expected}",
            bytes.len()
        )));
    }
    let mut features = Array2::zeros((sidecar.rows, sidecar.cols));
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        features[[i / sidecar.cols, i % sidecar.cols]] =
            f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((
        NodeFeatureMatrix {
            features,
            type_width: sidecar.type_width,
            content_dim: sidecar.content_dim,
        },
        sidecar.node_ids,
    ))
}
