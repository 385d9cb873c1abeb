//! Canonical code property graphs and corpus hygiene.
//!
//! A CPG export (one JSON document per function) is parsed into a
//! normalized [`CodePropertyGraph`]: nodes sorted by id, edges sorted
//! by (kind, src, dst), leaf flags derived from AST topology, and an
//! MD5 content hash over the function source. Corpora are JSON Lines
//! of such documents. The hygiene passes mirror the preprocessing
//! pipeline: node-count filtering, non-leaf fragment pruning, and
//! hash-based deduplication.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::Path;

use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Edge categories of a code property graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    #[serde(rename = "AST")]
    Ast,
    #[serde(rename = "CFG")]
    Cfg,
    #[serde(rename = "DDG")]
    Ddg,
    #[serde(rename = "CDG")]
    Cdg,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [EdgeKind::Ast, EdgeKind::Cfg, EdgeKind::Ddg, EdgeKind::Cdg];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Ast => "AST",
            EdgeKind::Cfg => "CFG",
            EdgeKind::Ddg => "DDG",
            EdgeKind::Cdg => "CDG",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One node of a function's CPG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeNode {
    pub id: u64,
    pub node_type: String,
    pub fragment: String,
    /// True iff the node has no outgoing AST edge; leaves carry the
    /// code fragments that featurization embeds.
    pub is_leaf: bool,
}

/// A directed typed edge between two node ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CpgEdge {
    pub src: u64,
    pub dst: u64,
    pub kind: EdgeKind,
}

/// A parsed, normalized code property graph for one function.
#[derive(Debug, Clone, PartialEq)]
pub struct CodePropertyGraph {
    pub function_id: String,
    /// 1 = vulnerable, 0 = safe.
    pub label: u8,
    pub cwe_tags: Vec<String>,
    pub source_code: String,
    /// Sorted ascending by id.
    pub nodes: Vec<CodeNode>,
    /// Sorted by (kind, src, dst).
    pub edges: Vec<CpgEdge>,
    /// Lowercase hex MD5 digest of `source_code` bytes.
    pub content_hash: String,
}

impl CodePropertyGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of edges of one kind.
    pub fn edge_count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Position of a node id in the canonical (ascending id) order.
    pub fn node_index(&self, id: u64) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }
}

/// Corpus split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One corpus entry: a graph plus its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub graph: CodePropertyGraph,
    pub split: Split,
}

// --- wire format ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: u64,
    #[serde(rename = "type")]
    node_type: String,
    code: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    src: u64,
    dst: u64,
    kind: EdgeKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    function_id: String,
    label: i64,
    cwe: Vec<String>,
    code: String,
    nodes: Vec<RawNode>,
    edges: Vec<RawEdge>,
    /// Optional extension: corpora written by this crate carry their
    /// split assignments explicitly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

fn parse_error_from_serde(err: &serde_json::Error) -> Error {
    // serde messages quote the offending field in backticks; surface
    // it as the field name when present.
    let msg = err.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|f| !f.is_empty())
        .unwrap_or("document")
        .to_string();
    Error::Parse {
        field,
        message: msg,
    }
}

/// Lowercase hex MD5 digest of a byte string.
pub fn content_hash(source: &str) -> String {
    let digest = Md5::digest(source.as_bytes());
    hex::encode(digest)
}

/// Parses one canonical CPG document, discarding any split annotation.
pub fn parse_cpg_export(json: &str) -> Result<CodePropertyGraph> {
    parse_document(json).map(|(graph, _)| graph)
}

/// Parses one canonical CPG document together with its optional split
/// annotation.
pub fn parse_document(json: &str) -> Result<(CodePropertyGraph, Option<Split>)> {
    let raw: RawDocument = serde_json::from_str(json).map_err(|e| parse_error_from_serde(&e))?;

    if raw.label != 0 && raw.label != 1 {
        return Err(Error::parse(
            "label",
            format!("expected 0 or 1, found {}", raw.label),
        ));
    }
    if raw.nodes.is_empty() {
        return Err(Error::parse("nodes", "a graph must contain at least one node"));
    }

    let mut seen_ids = BTreeSet::new();
    for node in &raw.nodes {
        if !seen_ids.insert(node.id) {
            return Err(Error::Integrity(format!("duplicate node id {}", node.id)));
        }
    }
    let mut seen_edges = BTreeSet::new();
    for edge in &raw.edges {
        for endpoint in [edge.src, edge.dst] {
            if !seen_ids.contains(&endpoint) {
                return Err(Error::Integrity(format!(
                    "edge {} -[{}]-> {} references missing node {endpoint}",
                    edge.src, edge.kind, edge.dst
                )));
            }
        }
        if !seen_edges.insert((edge.kind, edge.src, edge.dst)) {
            return Err(Error::Integrity(format!(
                "duplicate edge {} -[{}]-> {}",
                edge.src, edge.kind, edge.dst
            )));
        }
    }

    // Leaf = no outgoing AST edge.
    let ast_parents: BTreeSet<u64> = raw
        .edges
        .iter()
        .filter(|e| e.kind == EdgeKind::Ast)
        .map(|e| e.src)
        .collect();

    let mut nodes: Vec<CodeNode> = raw
        .nodes
        .into_iter()
        .map(|n| CodeNode {
            is_leaf: !ast_parents.contains(&n.id),
            id: n.id,
            node_type: n.node_type,
            fragment: n.code,
        })
        .collect();
    nodes.sort_by_key(|n| n.id);

    let mut edges: Vec<CpgEdge> = raw
        .edges
        .into_iter()
        .map(|e| CpgEdge {
            src: e.src,
            dst: e.dst,
            kind: e.kind,
        })
        .collect();
    edges.sort();

    let graph = CodePropertyGraph {
        function_id: raw.function_id,
        label: raw.label as u8,
        cwe_tags: raw.cwe,
        content_hash: content_hash(&raw.code),
        source_code: raw.code,
        nodes,
        edges,
    };
    Ok((graph, raw.split))
}

/// Serializes a graph back to its canonical single-line JSON document.
pub fn document_json(graph: &CodePropertyGraph, split: Option<Split>) -> String {
    let raw = RawDocument {
        function_id: graph.function_id.clone(),
        label: graph.label as i64,
        cwe: graph.cwe_tags.clone(),
        code: graph.source_code.clone(),
        nodes: graph
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.id,
                node_type: n.node_type.clone(),
                code: n.fragment.clone(),
            })
            .collect(),
        edges: graph
            .edges
            .iter()
            .map(|e| RawEdge {
                src: e.src,
                dst: e.dst,
                kind: e.kind,
            })
            .collect(),
        split,
    };
    serde_json::to_string(&raw).expect("document serialization cannot fail")
}

// --- hygiene passes ------------------------------------------------------

/// Keeps the graph only if its node count is within the limit.
///
/// The limit applies to the parsed graph before any pruning.
pub fn filter_by_node_count(
    graph: CodePropertyGraph,
    max_nodes: usize,
) -> Option<CodePropertyGraph> {
    assert!(max_nodes >= 1, "max_nodes must be at least 1");
    if graph.node_count() <= max_nodes {
        Some(graph)
    } else {
        None
    }
}

/// Empties the code fragment of every non-leaf node.
///
/// Interior nodes aggregate the text of their subtrees; embedding them
/// would double-count content, so only leaves keep fragments. Topology
/// is untouched and the pass is idempotent.
pub fn prune_nonleaf_fragments(mut graph: CodePropertyGraph) -> CodePropertyGraph {
    for node in &mut graph.nodes {
        if !node.is_leaf {
            node.fragment = String::new();
        }
    }
    graph
}

/// Outcome of [`dedup_by_hash`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupReport {
    pub input_records: usize,
    pub kept_records: usize,
    /// Function ids of dropped records, in input order.
    pub dropped: Vec<String>,
}

/// Drops every record whose content hash was already seen, keeping the
/// first occurrence; input order is otherwise preserved.
pub fn dedup_by_hash(graphs: Vec<CodePropertyGraph>) -> (Vec<CodePropertyGraph>, DedupReport) {
    let input_records = graphs.len();
    let mut seen = BTreeSet::new();
    let mut kept = Vec::with_capacity(graphs.len());
    let mut dropped = Vec::new();
    for graph in graphs {
        if seen.insert(graph.content_hash.clone()) {
            kept.push(graph);
        } else {
            dropped.push(graph.function_id.clone());
        }
    }
    let report = DedupReport {
        input_records,
        kept_records: kept.len(),
        dropped,
    };
    (kept, report)
}

// --- statement mapping ---------------------------------------------------

/// One source statement bound to the node carrying its fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatementBinding {
    /// Position of the statement in source order.
    pub index: usize,
    pub statement: String,
    pub node_id: u64,
}

/// Binds each source statement to exactly one graph node.
///
/// Statements are the trimmed source lines in natural order, skipping
/// lines without any alphanumeric content (blank lines, lone braces).
/// A statement claims the lowest-id unclaimed node whose trimmed
/// fragment equals it; statements left without a candidate are
/// reported together in the error. Nodes may stay unmapped
/// (structural nodes carry no statement).
pub fn map_statements_to_nodes(graph: &CodePropertyGraph) -> Result<Vec<StatementBinding>> {
    let statements: Vec<&str> = graph
        .source_code
        .lines()
        .map(str::trim)
        .filter(|l| l.chars().any(char::is_alphanumeric))
        .collect();

    let mut claimed: BTreeSet<u64> = BTreeSet::new();
    let mut bindings = Vec::with_capacity(statements.len());
    let mut unmatched = Vec::new();

    for (index, statement) in statements.iter().enumerate() {
        let candidate = graph
            .nodes
            .iter()
            .find(|n| !claimed.contains(&n.id) && n.fragment.trim() == *statement);
        match candidate {
            Some(node) => {
                claimed.insert(node.id);
                bindings.push(StatementBinding {
                    index,
                    statement: statement.to_string(),
                    node_id: node.id,
                });
            }
            None => unmatched.push(statement.to_string()),
        }
    }

    if unmatched.is_empty() {
        Ok(bindings)
    } else {
        Err(Error::Mapping(unmatched))
    }
}

// --- corpus io -----------------------------------------------------------

/// Deterministic split for the record at `index` when the document
/// carries none: positions 8 and 9 of every block of ten go to the
/// validation and test splits.
fn implicit_split(index: usize) -> Split {
    match index % 10 {
        8 => Split::Valid,
        9 => Split::Test,
        _ => Split::Train,
    }
}

/// Reads a JSON Lines corpus, assigning splits to records that carry
/// none.
///
/// Implicit assignment cycles 8/1/1 over input order. If no record
/// carried an explicit split and the validation split came out empty
/// (corpora of fewer than nine records), the last train record is
/// reassigned to validation so small corpora stay trainable.
pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);

    let mut records = Vec::new();
    let mut any_explicit = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (graph, explicit) = parse_document(&line).map_err(|e| {
            Error::Data(format!(
                "{} line {}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        any_explicit |= explicit.is_some();
        let split = explicit.unwrap_or_else(|| implicit_split(records.len()));
        records.push(CorpusRecord { graph, split });
    }

    if !any_explicit
        && records.len() >= 2
        && !records.iter().any(|r| r.split == Split::Valid)
    {
        if let Some(last_train) = records.iter_mut().rev().find(|r| r.split == Split::Train) {
            last_train.split = Split::Valid;
        }
    }
    Ok(records)
}

/// Writes records as JSON Lines with explicit split annotations.
pub fn write_corpus_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for record in records {
        writeln!(file, "{}", document_json(&record.graph, Some(record.split)))?;
    }
    Ok(())
}

/// Writes bare canonical documents (no split annotations) as JSON
/// Lines; this is the ingest output format.
pub fn write_documents_jsonl(path: &Path, graphs: &[CodePropertyGraph]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for graph in graphs {
        writeln!(file, "{}", document_json(graph, None))?;
    }
    Ok(())
}

// --- ingest pipeline -----------------------------------------------------

/// Counters reported by [`canonicalize_corpus`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub parsed: usize,
    pub over_node_limit: usize,
    pub duplicates_dropped: usize,
    pub written: usize,
}

/// Full ingest pass over parsed graphs: node-count filter, non-leaf
/// fragment pruning, and (optionally) hash deduplication.
pub fn canonicalize_corpus(
    graphs: Vec<CodePropertyGraph>,
    max_nodes: usize,
    dedup: bool,
) -> (Vec<CodePropertyGraph>, IngestReport) {
    let parsed = graphs.len();
    let retained: Vec<CodePropertyGraph> = graphs
        .into_iter()
        .filter_map(|g| filter_by_node_count(g, max_nodes))
        .map(prune_nonleaf_fragments)
        .collect();
    let over_node_limit = parsed - retained.len();

    let (kept, duplicates_dropped) = if dedup {
        let (kept, report) = dedup_by_hash(retained);
        (kept, report.dropped.len())
    } else {
        (retained, 0)
    };

    let report = IngestReport {
        parsed,
        over_node_limit,
        duplicates_dropped,
        written: kept.len(),
    };
    (kept, report)
}

/// Grouped per-split views over a corpus.
pub fn split_indices(records: &[CorpusRecord]) -> BTreeMap<Split, Vec<usize>> {
    let mut map: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        map.entry(r.split).or_default().push(i);
    }
    map
}
