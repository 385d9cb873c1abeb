//! Command-line surface for the vulnerability-detection pipeline:
//! corpus ingestion, training, evaluation, single-function prediction,
//! and the comparison harnesses (interpolation-weight sweep,
//! student-count ablation, per-CWE accuracy table).
//!
//! Every command that writes an artifact also writes the fully resolved
//! run configuration next to it (`<artifact>.run.json`), so any output
//! directory documents the exact settings that produced it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use vulgraph_core::cpg::{
    document_json, filter_by_node_count, parse_cpg_export, parse_document,
    prune_nonleaf_fragments, read_corpus_jsonl, CodePropertyGraph, IngestReport, Split,
};
use vulgraph_core::metrics::{cwe_csv, format_percent, per_cwe_accuracy, MetricsReport};
use vulgraph_core::train::{
    branch_probabilities, evaluate_probs, predict_graph, train, Checkpoint, TrainConfig,
};
use vulgraph_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vulgraph",
    version,
    about = "Graph-based code vulnerability detection",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Canonicalize raw CPG documents into a JSONL corpus.
    Ingest {
        /// Directory holding CPG documents (*.json one per function,
        /// or *.jsonl batches).
        #[arg(long)]
        input: PathBuf,
        /// Output corpus path (JSON Lines).
        #[arg(long)]
        out: PathBuf,
        /// Drop graphs with more nodes than this.
        #[arg(long, default_value_t = 500)]
        max_nodes: usize,
        /// Keep functions whose source hashes collide instead of
        /// dropping later duplicates.
        #[arg(long)]
        no_dedup: bool,
    },
    /// Train a model and write a checkpoint plus a JSONL training log.
    Train {
        /// Training configuration (.json or .toml).
        #[arg(long)]
        config: PathBuf,
        /// Corpus produced by `ingest` (JSON Lines).
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a corpus split with a trained checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Metrics report output path (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Corpus split to score.
        #[arg(long, default_value = "test")]
        split: String,
        /// Interpolation weight override; defaults to the trained value.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Score one CPG document and print the prediction as JSON.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// A single canonical CPG document (JSON).
        #[arg(long)]
        cpg: PathBuf,
    },
    /// Evaluate a grid of interpolation weights on cached branch
    /// probabilities.
    SweepLambda {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Grid of weights: `start:end:step` or comma-separated values,
        /// all within [0, 1] and strictly increasing.
        #[arg(long)]
        grid: String,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Corpus split to score.
        #[arg(long, default_value = "valid")]
        split: String,
    },
    /// Train once per student count and compare test metrics.
    AblateStudents {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated student counts; 1 means no distillation.
        #[arg(long)]
        counts: String,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-CWE accuracy table for a trained checkpoint.
    ReportCwe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Keep the k most frequent tags.
        #[arg(long, default_value_t = 30)]
        top: usize,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Corpus split to score.
        #[arg(long, default_value = "test")]
        split: String,
    },
}

/// Fully resolved settings written next to every artifact.
#[derive(Serialize)]
pub struct RunConfig {
    pub command: String,
    pub config: TrainConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
}

/// Prints one line to stdout, treating a vanished reader as success:
/// `vulgraph ... | head` must not turn a broken pipe into a failure
/// exit or a panic. Any other write error still fails the command.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Runs one command line (`argv[0]` is the program name) and returns
/// the process exit code: 0 on success, 1 on any runtime failure, 2 on
/// usage errors.
pub fn run_command(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.exit_code() == 0 { 0 } else { 2 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Ingest {
            input,
            out,
            max_nodes,
            no_dedup,
        } => cmd_ingest(&input, &out, max_nodes, no_dedup),
        Command::Train {
            config,
            corpus,
            out,
        } => cmd_train(&config, &corpus, &out),
        Command::Eval {
            ckpt,
            corpus,
            report,
            split,
            lambda,
        } => cmd_eval(&ckpt, &corpus, &report, &split, lambda),
        Command::Predict { ckpt, cpg } => cmd_predict(&ckpt, &cpg),
        Command::SweepLambda {
            ckpt,
            corpus,
            grid,
            out,
            split,
        } => cmd_sweep_lambda(&ckpt, &corpus, &grid, &out, &split),
        Command::AblateStudents {
            config,
            corpus,
            counts,
            out,
        } => cmd_ablate_students(&config, &corpus, &counts, &out),
        Command::ReportCwe {
            ckpt,
            corpus,
            top,
            out,
            split,
        } => cmd_report_cwe(&ckpt, &corpus, top, &out, &split),
    }
}

// --- shared plumbing ------------------------------------------------------

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Writes the resolved run configuration next to the primary artifact
/// as `<file name>.run.json`.
fn write_run_config(primary: &Path, run: &RunConfig) -> Result<PathBuf> {
    let mut name = primary
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".to_string());
    name.push_str(".run.json");
    let path = primary.with_file_name(name);
    let body = serde_json::to_string_pretty(run)?;
    std::fs::write(&path, body + "\n")?;
    Ok(path)
}

fn parse_split(name: &str) -> Result<Split> {
    name.parse()
}

/// Parses an interpolation-weight grid: either `start:end:step` or a
/// comma-separated list. The result must be nonempty, strictly
/// increasing, and lie within [0, 1].
pub fn parse_lambda_grid(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Err(Error::Config("the weight grid is empty".to_string()));
    }
    let parse_one = |part: &str| -> Result<f64> {
        part.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("invalid grid value `{part}`")))
    };
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(
                "grid ranges take the form start:end:step".to_string(),
            ));
        }
        let (start, end, step) = (parse_one(parts[0])?, parse_one(parts[1])?, parse_one(parts[2])?);
        if !step.is_finite() || step <= 0.0 {
            return Err(Error::Config(format!("grid step must be positive, got {step}")));
        }
        if end < start {
            return Err(Error::Config(format!(
                "grid end {end} lies below its start {start}"
            )));
        }
        let mut values = Vec::new();
        let mut i = 0u32;
        loop {
            let v = start + step * f64::from(i);
            if v > end + step * 1e-9 {
                break;
            }
            values.push(v.min(end));
            i += 1;
        }
        values
    } else {
        spec.split(',').map(parse_one).collect::<Result<Vec<f64>>>()?
    };
    if values.is_empty() {
        return Err(Error::Config("the weight grid is empty".to_string()));
    }
    for &v in &values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!(
                "grid value {v} lies outside [0, 1]"
            )));
        }
    }
    for w in values.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Config(format!(
                "grid must be strictly increasing; {} does not exceed {}",
                w[1], w[0]
            )));
        }
    }
    Ok(values)
}

/// Parses a comma-separated list of student counts, dropping later
/// duplicates. Returns the deduplicated counts (input order) and
/// whether any duplicate was dropped.
pub fn parse_student_counts(spec: &str) -> Result<(Vec<usize>, bool)> {
    let mut counts = Vec::new();
    let mut seen = BTreeSet::new();
    let mut had_duplicates = false;
    for part in spec.split(',') {
        let value: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid student count `{part}`")))?;
        if value == 0 {
            return Err(Error::Config(
                "student counts must be at least 1".to_string(),
            ));
        }
        if seen.insert(value) {
            counts.push(value);
        } else {
            had_duplicates = true;
        }
    }
    Ok((counts, had_duplicates))
}

// --- commands -------------------------------------------------------------

fn cmd_ingest(input: &Path, out: &Path, max_nodes: usize, no_dedup: bool) -> Result<i32> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| {
            Error::Data(format!(
                "cannot read input directory {}: {e}",
                input.display()
            ))
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("json") | Some("jsonl")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no .json or .jsonl documents under {}",
            input.display()
        )));
    }

    let mut parsed: Vec<(CodePropertyGraph, Option<Split>)> = Vec::new();
    for path in &files {
        let text = std::fs::read_to_string(path)?;
        if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let doc = parse_document(line).map_err(|e| {
                    Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
                })?;
                parsed.push(doc);
            }
        } else {
            let doc = parse_document(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            parsed.push(doc);
        }
    }

    // Canonicalize while carrying any explicit split annotations along:
    // node-count filter, non-leaf fragment pruning, then first-wins
    // deduplication by content hash.
    let total = parsed.len();
    let retained: Vec<(CodePropertyGraph, Option<Split>)> = parsed
        .into_iter()
        .filter_map(|(g, s)| {
            filter_by_node_count(g, max_nodes).map(|g| (prune_nonleaf_fragments(g), s))
        })
        .collect();
    let over_node_limit = total - retained.len();
    let mut seen = BTreeSet::new();
    let mut kept: Vec<(CodePropertyGraph, Option<Split>)> = Vec::new();
    let mut duplicates_dropped = 0usize;
    for (graph, split) in retained {
        if no_dedup || seen.insert(graph.content_hash.clone()) {
            kept.push((graph, split));
        } else {
            duplicates_dropped += 1;
        }
    }
    let report = IngestReport {
        parsed: total,
        over_node_limit,
        duplicates_dropped,
        written: kept.len(),
    };

    let mut file = std::fs::File::create(out)?;
    for (graph, split) in &kept {
        writeln!(file, "{}", document_json(graph, *split))?;
    }

    let config = TrainConfig {
        max_nodes,
        ..TrainConfig::default()
    };
    let seed = config.seed;
    write_run_config(
        out,
        &RunConfig {
            command: "ingest".to_string(),
            config,
            inputs: vec![display(input)],
            outputs: vec![display(out)],
            seed,
        },
    )?;
    emit(&serde_json::to_string_pretty(&report)?)?;
    Ok(0)
}

fn cmd_train(config_path: &Path, corpus_path: &Path, out: &Path) -> Result<i32> {
    let mut config = TrainConfig::from_path(config_path)?;
    config.apply_env_seed()?;
    let records = read_corpus_jsonl(corpus_path)?;
    let outcome = train(&config, &records)?;

    outcome.checkpoint.save(out)?;
    let log_path = sibling(out, ".log.jsonl");
    {
        let mut file = std::fs::File::create(&log_path)?;
        for entry in &outcome.log {
            writeln!(file, "{}", serde_json::to_string(entry)?)?;
        }
    }
    write_run_config(
        out,
        &RunConfig {
            command: "train".to_string(),
            config: outcome.checkpoint.config.clone(),
            inputs: vec![display(config_path), display(corpus_path)],
            outputs: vec![display(out), display(&log_path)],
            seed: outcome.checkpoint.config.seed,
        },
    )?;

    if let Some(message) = &outcome.divergence {
        eprintln!(
            "error: training diverged: {message}; last good checkpoint written to {}",
            out.display()
        );
        return Ok(1);
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        checkpoint: String,
        log: String,
        epochs: usize,
        selected_student: usize,
        best_validation_f1: f64,
        config: &'a TrainConfig,
    }
    let summary = Summary {
        checkpoint: display(out),
        log: display(&log_path),
        epochs: outcome
            .log
            .iter()
            .filter(|e| e.stage == "implicit")
            .count(),
        selected_student: outcome.checkpoint.selected_student,
        best_validation_f1: outcome.checkpoint.best_validation_f1,
        config: &outcome.checkpoint.config,
    };
    emit(&serde_json::to_string_pretty(&summary)?)?;
    Ok(0)
}

/// `model.json` → `model.json.log.jsonl`-style sibling paths.
fn sibling(primary: &Path, suffix: &str) -> PathBuf {
    let mut name = primary
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".to_string());
    name.push_str(suffix);
    primary.with_file_name(name)
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    lambda: f64,
    records: usize,
    metrics: MetricsReport,
}

fn cmd_eval(
    ckpt: &Path,
    corpus: &Path,
    report_path: &Path,
    split: &str,
    lambda: Option<f64>,
) -> Result<i32> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let records = read_corpus_jsonl(corpus)?;
    let split = parse_split(split)?;
    let lambda = lambda.unwrap_or(checkpoint.config.lambda);
    let probs = branch_probabilities(&checkpoint, &records, split)?;
    let (metrics, _) = evaluate_probs(&probs, lambda)?;

    let report = EvalReport {
        split: split.to_string(),
        lambda,
        records: probs.len(),
        metrics,
    };
    let body = serde_json::to_string_pretty(&report)?;
    std::fs::write(report_path, body.clone() + "\n")?;
    write_run_config(
        report_path,
        &RunConfig {
            command: "eval".to_string(),
            config: checkpoint.config.clone(),
            inputs: vec![display(ckpt), display(corpus)],
            outputs: vec![display(report_path)],
            seed: checkpoint.config.seed,
        },
    )?;
    emit(&body)?;
    Ok(0)
}

fn cmd_predict(ckpt: &Path, cpg: &Path) -> Result<i32> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let text = std::fs::read_to_string(cpg)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", cpg.display())))?;
    let graph = parse_cpg_export(&text)?;
    let prediction = predict_graph(&checkpoint, &graph)?;
    emit(&serde_json::to_string_pretty(&prediction)?)?;
    Ok(0)
}

fn metrics_row(prefix: &str, m: &MetricsReport) -> String {
    format!(
        "{prefix},{},{},{},{},{},{},{},{}\n",
        format_percent(m.accuracy),
        format_percent(m.precision),
        format_percent(m.recall),
        format_percent(m.f1),
        m.true_positives,
        m.false_positives,
        m.true_negatives,
        m.false_negatives
    )
}

const SWEEP_HEADER: &str =
    "accuracy,precision,recall,f1,true_positives,false_positives,true_negatives,false_negatives\n";

fn cmd_sweep_lambda(
    ckpt: &Path,
    corpus: &Path,
    grid_spec: &str,
    out: &Path,
    split: &str,
) -> Result<i32> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let records = read_corpus_jsonl(corpus)?;
    let split = parse_split(split)?;
    let grid = parse_lambda_grid(grid_spec)?;

    // The two branch distributions are fixed by the checkpoint, so they
    // are computed once and every grid point reuses them.
    let probs = branch_probabilities(&checkpoint, &records, split)?;

    let mut csv = format!("lambda,{SWEEP_HEADER}");
    let mut best: Option<(f64, MetricsReport)> = None;
    for &lambda in &grid {
        let (metrics, _) = evaluate_probs(&probs, lambda)?;
        let _ = write!(csv, "{}", metrics_row(&format!("{lambda:.4}"), &metrics));
        if best
            .as_ref()
            .map_or(true, |(_, b)| metrics.accuracy > b.accuracy)
        {
            best = Some((lambda, metrics));
        }
    }
    std::fs::write(out, &csv)?;
    write_run_config(
        out,
        &RunConfig {
            command: "sweep-lambda".to_string(),
            config: checkpoint.config.clone(),
            inputs: vec![display(ckpt), display(corpus)],
            outputs: vec![display(out)],
            seed: checkpoint.config.seed,
        },
    )?;

    let (best_lambda, best_metrics) = best.expect("grid is nonempty");
    #[derive(Serialize)]
    struct Summary {
        split: String,
        points: usize,
        best_lambda: f64,
        best_accuracy: f64,
        best_f1: f64,
        csv: String,
    }
    let summary = Summary {
        split: split.to_string(),
        points: grid.len(),
        best_lambda,
        best_accuracy: best_metrics.accuracy,
        best_f1: best_metrics.f1,
        csv: display(out),
    };
    emit(&serde_json::to_string_pretty(&summary)?)?;
    Ok(0)
}

fn cmd_ablate_students(
    config_path: &Path,
    corpus_path: &Path,
    counts_spec: &str,
    out: &Path,
) -> Result<i32> {
    let mut config = TrainConfig::from_path(config_path)?;
    config.apply_env_seed()?;
    let records = read_corpus_jsonl(corpus_path)?;
    let (counts, had_duplicates) = parse_student_counts(counts_spec)?;
    if counts.is_empty() {
        return Err(Error::Config("no student counts given".to_string()));
    }
    if had_duplicates {
        eprintln!("warning: duplicate student counts ignored");
    }

    #[derive(Serialize)]
    struct Row {
        students: usize,
        label: String,
        test_f1: f64,
        test_accuracy: f64,
    }
    let mut csv = format!("students,label,{SWEEP_HEADER}");
    let mut rows = Vec::new();
    for &students in &counts {
        let mut variant = config.clone();
        variant.kd.students = students;
        let outcome = train(&variant, &records)?;
        if let Some(message) = outcome.divergence {
            return Err(Error::Divergence(format!(
                "student count {students}: {message}"
            )));
        }
        let probs = branch_probabilities(&outcome.checkpoint, &records, Split::Test)?;
        let (metrics, _) = evaluate_probs(&probs, outcome.checkpoint.config.lambda)?;
        let label = if students == 1 {
            "self".to_string()
        } else {
            format!("{students}-student")
        };
        let _ = write!(
            csv,
            "{}",
            metrics_row(&format!("{students},{label}"), &metrics)
        );
        rows.push(Row {
            students,
            label,
            test_f1: metrics.f1,
            test_accuracy: metrics.accuracy,
        });
    }
    std::fs::write(out, &csv)?;
    write_run_config(
        out,
        &RunConfig {
            command: "ablate-students".to_string(),
            config: config.clone(),
            inputs: vec![display(config_path), display(corpus_path)],
            outputs: vec![display(out)],
            seed: config.seed,
        },
    )?;
    emit(&serde_json::to_string_pretty(&rows)?)?;
    Ok(0)
}

fn cmd_report_cwe(
    ckpt: &Path,
    corpus: &Path,
    top: usize,
    out: &Path,
    split: &str,
) -> Result<i32> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let records = read_corpus_jsonl(corpus)?;
    let split = parse_split(split)?;
    let probs = branch_probabilities(&checkpoint, &records, split)?;
    let (_, tagged) = evaluate_probs(&probs, checkpoint.config.lambda)?;
    let rows = per_cwe_accuracy(&tagged, top);
    std::fs::write(out, cwe_csv(&rows))?;
    write_run_config(
        out,
        &RunConfig {
            command: "report-cwe".to_string(),
            config: checkpoint.config.clone(),
            inputs: vec![display(ckpt), display(corpus)],
            outputs: vec![display(out)],
            seed: checkpoint.config.seed,
        },
    )?;
    emit(&serde_json::to_string_pretty(&rows)?)?;
    Ok(0)
}
