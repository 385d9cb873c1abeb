//! Deterministic synthetic corpora with a planted, linearly separable
//! vulnerability motif, for overfit checks and pipeline smoke tests.
//!
//! Vulnerable functions call `gets`, safe ones call `fgets`; everything
//! else about a record (padding identifiers, an occasional branch) is
//! label-independent noise derived from the record index. Labels are
//! balanced within each split so validation metrics never degenerate.

use std::path::Path;

use crate::cpg::{parse_document, write_corpus_jsonl, CorpusRecord, Split};
use crate::Result;

/// The call fragment planted into vulnerable records.
pub const VULNERABLE_MOTIF: &str = "gets(buf)";
/// The call fragment planted into safe records.
pub const SAFE_MOTIF: &str = "fgets(buf, sizeof(buf), stdin)";

fn assigned_split(i: usize) -> Split {
    match i % 10 {
        8 => Split::Valid,
        9 => Split::Test,
        _ => Split::Train,
    }
}

fn document_json(i: usize, seed: u64, label: u8) -> String {
    let motif = if label == 1 { VULNERABLE_MOTIF } else { SAFE_MOTIF };
    let pad = (i + seed as usize) % 3;
    let branch = i % 4 == 0;
    let signature = format!("int probe_{i}_{seed}(char *input)");

    let mut nodes = vec![
        (1u64, "METHOD", signature.clone()),
        (2, "BLOCK", String::new()),
        (3, "LOCAL", "char buf[64]".to_string()),
        (4, "CALL", motif.to_string()),
        (5, "CALL", "process(buf)".to_string()),
        (6, "RETURN", "return process(buf);".to_string()),
    ];
    let mut edges: Vec<(u64, u64, &str)> = vec![
        (1, 2, "AST"),
        (2, 3, "AST"),
        (2, 4, "AST"),
        (2, 5, "AST"),
        (2, 6, "AST"),
        (3, 4, "CFG"),
        (4, 5, "CFG"),
        (5, 6, "CFG"),
        (3, 4, "DDG"),
        (4, 5, "DDG"),
        (5, 6, "DDG"),
    ];
    let mut next_id = 7u64;
    if branch {
        nodes.push((next_id, "CONTROL_STRUCTURE", "if (input)".to_string()));
        edges.push((2, next_id, "AST"));
        edges.push((next_id, 4, "CDG"));
        edges.push((next_id, 5, "CDG"));
        next_id += 1;
    }
    for k in 0..pad {
        nodes.push((next_id, "IDENTIFIER", format!("pad_{k}")));
        edges.push((2, next_id, "AST"));
        next_id += 1;
    }

    let code = format!(
        "{signature} {{\n  char buf[64];\n  {motif};\n  return process(buf);\n}}\n"
    );
    let cwe: Vec<&str> = if label == 1 {
        if i % 4 == 1 {
            vec!["CWE-120", "CWE-242"]
        } else {
            vec!["CWE-242"]
        }
    } else {
        vec![]
    };

    let nodes_json: Vec<String> = nodes
        .iter()
        .map(|(id, t, c)| {
            format!(
                r#"{{"id":{id},"type":{},"code":{}}}"#,
                serde_json::to_string(t).unwrap(),
                serde_json::to_string(c).unwrap()
            )
        })
        .collect();
    let edges_json: Vec<String> = edges
        .iter()
        .map(|(s, d, k)| format!(r#"{{"src":{s},"dst":{d},"kind":"{k}"}}"#))
        .collect();
    let cwe_json: Vec<String> = cwe
        .iter()
        .map(|t| serde_json::to_string(t).unwrap())
        .collect();
    format!(
        r#"{{"function_id":"probe_{i}_{seed}","label":{label},"cwe":[{}],"code":{},"nodes":[{}],"edges":[{}],"split":"{}"}}"#,
        cwe_json.join(","),
        serde_json::to_string(&code).unwrap(),
        nodes_json.join(","),
        edges_json.join(","),
        assigned_split(i)
    )
}

/// Generates `count` records with explicit splits. Labels alternate
/// within each split, so every split of size >= 2 carries both classes.
pub fn planted_corpus(count: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut per_split = std::collections::BTreeMap::new();
    (0..count)
        .map(|i| {
            let split = assigned_split(i);
            let counter = per_split.entry(split).or_insert(0usize);
            let label = (*counter % 2) as u8;
            *counter += 1;
            let (graph, parsed_split) = parse_document(&document_json(i, seed, label))
                .expect("generated document is valid");
            CorpusRecord { graph, split: parsed_split.expect("generator sets splits") }
        })
        .collect()
}

/// Generates and writes a corpus as JSONL.
pub fn write_planted_corpus(path: &Path, count: usize, seed: u64) -> Result<Vec<CorpusRecord>> {
    let records = planted_corpus(count, seed);
    write_corpus_jsonl(path, &records)?;
    Ok(records)
}
