//! Human-readable comparison of evaluation and diagnostic outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::diagnostics::{DiscrepancyMatrix, TeacherAudit};
use crate::error::{Error, Result};
use crate::experiment::{MatrixSummary, Stat};
use crate::metrics::{EvalReport, SCHEMA_VERSION};
use crate::pipeline::{Envelope, HistogramReport, NormReport};
use crate::plot;

#[derive(Debug, Clone)]
pub enum Document {
    Eval(EvalReport),
    Matrix(MatrixSummary),
    Norms(Envelope<NormReport>),
    Discrepancy(Envelope<DiscrepancyMatrix>),
    Uncertainty(Envelope<HistogramReport>),
    Audit(Envelope<TeacherAudit>),
}

#[derive(Debug, Clone)]
pub struct NamedDocument {
    /// Column label, derived from the file path.
    pub name: String,
    pub doc: Document,
}

fn schema_error(path: &Path, message: impl Into<String>) -> Error {
    Error::config(format!("{} (schema)", path.display()), message)
}

/// Short label: the file stem, prefixed by its parent directory.
fn label_for(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("?");
    match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(dir) => format!("{dir}/{stem}"),
        None => stem.to_string(),
    }
}

pub fn parse_document(path: &Path, text: &str) -> Result<Document> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| schema_error(path, format!("not JSON: {e}")))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(schema_error(
            path,
            format!("schema_version {version:?}, expected {SCHEMA_VERSION}"),
        ));
    }
    let kind = value
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| schema_error(path, "missing `kind`"))?
        .to_string();
    fn typed<T: serde::de::DeserializeOwned>(path: &Path, v: serde_json::Value) -> Result<T> {
        serde_json::from_value(v).map_err(|e| schema_error(path, e.to_string()))
    }
    Ok(match kind.as_str() {
        "eval_report" => Document::Eval(typed(path, value)?),
        "matrix_summary" => Document::Matrix(typed(path, value)?),
        "norm_stats" => Document::Norms(typed(path, value)?),
        "discrepancy_matrix" => Document::Discrepancy(typed(path, value)?),
        "uncertainty_histogram" => Document::Uncertainty(typed(path, value)?),
        "teacher_audit" => Document::Audit(typed(path, value)?),
        other => return Err(schema_error(path, format!("unknown kind `{other}`"))),
    })
}

pub fn load_documents(paths: &[PathBuf]) -> Result<Vec<NamedDocument>> {
    if paths.is_empty() {
        return Err(Error::config("inputs", "no report files given"));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(NamedDocument {
                name: label_for(p),
                doc: parse_document(p, &text)?,
            })
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.2}", 100.0 * x))
}

fn pct_stat(s: &Option<Stat>) -> String {
    s.map_or_else(|| "n/a".into(), |s| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std))
}

fn num_stat(s: &Option<Stat>) -> String {
    s.map_or_else(|| "n/a".into(), |s| format!("{:.3} ± {:.3}", s.mean, s.std))
}

/// Left-aligned first column, right-aligned rest.
fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        for (c, cell) in cells.iter().enumerate() {
            let pad = width[c] - cell.chars().count();
            if c == 0 {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str("  ");
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        out.push('\n');
    };
    line(header, &mut out);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule, &mut out);
    for r in rows {
        line(r, &mut out);
    }
    out
}

/// Render every document group as a text table.
pub fn render_text(docs: &[NamedDocument]) -> String {
    let mut out = String::new();

    let evals: Vec<(&str, &EvalReport)> = docs
        .iter()
        .filter_map(|d| match &d.doc {
            Document::Eval(r) => Some((d.name.as_str(), r)),
            _ => None,
        })
        .collect();
    if !evals.is_empty() {
        let mut header = vec!["metric (%)".to_string()];
        header.extend(evals.iter().map(|(n, _)| n.to_string()));
        let row = |name: &str, f: &dyn Fn(&EvalReport) -> String| {
            let mut r = vec![name.to_string()];
            r.extend(evals.iter().map(|(_, e)| f(e)));
            r
        };
        let rows = vec![
            row("Acc", &|e| pct(Some(e.accuracy))),
            row("AUROC", &|e| pct(e.auroc)),
            row("OSCR", &|e| pct(e.oscr)),
            row("|W phi| known", &|e| format!("{:.3}", e.mean_logit_norm_known)),
            row("|phi| known", &|e| format!("{:.3}", e.mean_feature_norm_known)),
        ];
        let _ = writeln!(out, "Evaluation\n{}", table(&header, &rows));
    }

    for d in docs {
        match &d.doc {
            Document::Matrix(m) => {
                let header = ["config", "runs", "Acc (%)", "AUROC (%)", "OSCR (%)", "|W phi|"].map(String::from);
                let rows: Vec<Vec<String>> = m
                    .rows
                    .iter()
                    .map(|r| {
                        vec![
                            r.name.clone(),
                            r.seeds.len().to_string(),
                            pct_stat(&r.accuracy),
                            pct_stat(&r.auroc),
                            pct_stat(&r.oscr),
                            num_stat(&r.mean_logit_norm_known),
                        ]
                    })
                    .collect();
                let _ = writeln!(out, "Matrix {}\n{}", d.name, table(&header, &rows));
                for f in &m.failures {
                    let _ = writeln!(out, "  failed: {} seed {}: {}", f.name, f.seed, f.error);
                }
            }
            Document::Norms(n) => {
                let header = ["split", "n", "mean |phi|", "mean |W phi|"].map(String::from);
                let mut rows = vec![vec![
                    "known".into(),
                    n.body.known.n_samples.to_string(),
                    format!("{:.3}", n.body.known.mean_feature_norm),
                    format!("{:.3}", n.body.known.mean_logit_norm),
                ]];
                if let Some(u) = &n.body.unknown {
                    rows.push(vec![
                        "unknown".into(),
                        u.n_samples.to_string(),
                        format!("{:.3}", u.mean_feature_norm),
                        format!("{:.3}", u.mean_logit_norm),
                    ]);
                }
                let _ = writeln!(out, "Norms {}\n{}", d.name, table(&header, &rows));
            }
            Document::Audit(a) => {
                let b = &a.body;
                let _ = writeln!(
                    out,
                    "Audit {}: {} samples{}, over-confident {}, wrong {}, both {}\n",
                    d.name,
                    b.n_samples,
                    if b.exhausted { " (stream exhausted)" } else { "" },
                    b.n_overconfident,
                    b.n_wrong,
                    b.n_both
                );
            }
            Document::Discrepancy(m) => {
                let header: Vec<String> = std::iter::once(String::new()).chain(m.body.labels.iter().cloned()).collect();
                let rows: Vec<Vec<String>> = m
                    .body
                    .labels
                    .iter()
                    .zip(&m.body.entries)
                    .map(|(l, row)| {
                        std::iter::once(l.clone())
                            .chain(row.iter().map(|v| v.map_or("n/a".into(), |x| format!("{x:.2}"))))
                            .collect()
                    })
                    .collect();
                let _ = writeln!(out, "Discrepancy {}\n{}", d.name, table(&header, &rows));
            }
            Document::Uncertainty(h) => {
                let hist = &h.body.histograms;
                let header = ["bin", "known", "unknown"].map(String::from);
                let rows: Vec<Vec<String>> = (0..hist.known.len())
                    .map(|b| {
                        vec![
                            format!("[{:.3}, {:.3})", hist.edges[b], hist.edges[b + 1]),
                            hist.known[b].to_string(),
                            hist.unknown.get(b).map_or("0".into(), |c| c.to_string()),
                        ]
                    })
                    .collect();
                let _ = writeln!(out, "Uncertainty {}\n{}", d.name, table(&header, &rows));
            }
            Document::Eval(_) => {}
        }
    }
    out
}

/// Write PNG renderings into `out_dir`; returns the written paths.
pub fn render_plots(docs: &[NamedDocument], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let safe = |s: &str| s.replace(['/', '\\', ' '], "_");
    for d in docs {
        let img = match &d.doc {
            Document::Discrepancy(m) => Some(("heatmap", plot::heatmap(&m.body, plot::CELL_PX))),
            Document::Uncertainty(h) => Some(("uncertainty", plot::histogram_pair(&h.body.histograms))),
            _ => None,
        };
        if let Some((tag, img)) = img {
            let p = out_dir.join(format!("{}-{tag}.png", safe(&d.name)));
            plot::save(&img, &p)?;
            written.push(p);
        }
    }
    let norms: Vec<f64> = docs
        .iter()
        .filter_map(|d| match &d.doc {
            Document::Eval(r) => Some(r.mean_logit_norm_known),
            Document::Norms(n) => Some(n.body.known.mean_logit_norm),
            _ => None,
        })
        .collect();
    if !norms.is_empty() {
        let p = out_dir.join("logit-norms.png");
        plot::save(&plot::bars(&norms), &p)?;
        written.push(p);
    }
    Ok(written)
}
