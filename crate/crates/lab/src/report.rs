//! Report CSV: one row per evaluated attack configuration.

use std::path::Path;

use tdaa_core::eval::{ExperimentTags, MetricsRecord};

use crate::fsutil;

pub const HEADER: [&str; 13] = [
    "experiment_id",
    "attacker_dataset",
    "downstream_dataset",
    "victim_method",
    "criterion",
    "alpha",
    "epsilon",
    "seed",
    "y_t",
    "tfr",
    "ata",
    "mean_l2",
    "mean_linf",
];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no records to report")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("header {0:?} does not match the report schema")]
    Header(Vec<String>),
    #[error("row {row}, column {column}: cannot parse {value:?}")]
    Field {
        row: usize,
        column: &'static str,
        value: String,
    },
}

/// `inf` for the consistency-free ablation, otherwise the shortest
/// round-trip decimal.
pub fn format_alpha(alpha: f64) -> String {
    if alpha.is_infinite() {
        "inf".into()
    } else {
        format!("{alpha}")
    }
}

pub fn parse_alpha(s: &str) -> Option<f64> {
    match s {
        "inf" | "Infinity" | "infinity" => Some(f64::INFINITY),
        _ => s.parse().ok().filter(|v: &f64| v.is_finite() && *v >= 0.0),
    }
}

fn fraction(v: f64) -> String {
    format!("{v:.6}")
}

/// Renders `records` sorted by experiment id. TFR and ATA are printed with
/// six decimals; every other float uses its shortest round-trip form.
pub fn to_csv(records: &[MetricsRecord]) -> Result<String, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.tags.experiment_id.cmp(&b.tags.experiment_id));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in sorted {
        let t = &r.tags;
        w.write_record([
            t.experiment_id.clone(),
            t.attacker_dataset.clone(),
            t.downstream_dataset.clone(),
            t.victim_method.clone(),
            t.criterion.clone(),
            format_alpha(t.alpha),
            format!("{}", t.epsilon),
            t.seed.to_string(),
            r.y_t.to_string(),
            fraction(r.tfr),
            fraction(r.ata),
            format!("{}", r.mean_l2),
            format!("{}", r.mean_linf),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Io {
        path: "<memory>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_report(records: &[MetricsRecord], path: &Path) -> Result<(), ReportError> {
    let text = to_csv(records)?;
    fsutil::write_atomic(path, text.as_bytes()).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>, ReportError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != HEADER {
        return Err(ReportError::Header(header));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let field = |c: usize| row.get(c).unwrap_or_default();
        let num = |c: usize| -> Result<f64, ReportError> {
            field(c).parse().map_err(|_| ReportError::Field {
                row: i + 1,
                column: HEADER[c],
                value: field(c).into(),
            })
        };
        let int = |c: usize| -> Result<u64, ReportError> {
            field(c).parse().map_err(|_| ReportError::Field {
                row: i + 1,
                column: HEADER[c],
                value: field(c).into(),
            })
        };
        let alpha = parse_alpha(field(5)).ok_or_else(|| ReportError::Field {
            row: i + 1,
            column: HEADER[5],
            value: field(5).into(),
        })?;
        out.push(MetricsRecord {
            tags: ExperimentTags {
                experiment_id: field(0).into(),
                attacker_dataset: field(1).into(),
                downstream_dataset: field(2).into(),
                victim_method: field(3).into(),
                criterion: field(4).into(),
                alpha,
                epsilon: num(6)?,
                seed: int(7)?,
            },
            y_t: int(8)? as usize,
            tfr: num(9)?,
            ata: num(10)?,
            mean_l2: num(11)?,
            mean_linf: num(12)?,
        });
    }
    Ok(out)
}
