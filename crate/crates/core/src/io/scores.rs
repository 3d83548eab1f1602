//! CSV input and output.
//!
//! Every table has a header row, uses `,` as separator, `.` as decimal mark
//! and `\n` line endings. Floats are written in Rust's shortest round-trip
//! form (`{:?}`), so `3.0` prints as `3.0` and parsing the text recovers the
//! exact `f64`.

use std::path::Path;

use serde::Deserialize;

use super::{read_text, weights, FormatError};
use crate::error::Result;
use crate::metrics::{CategoryScore, ScoreRecord, ScoreTable};

pub const SCORE_COLUMNS: [&str; 8] = [
    "checkpoint",
    "category",
    "class",
    "subclass",
    "prompt_type",
    "metric",
    "value",
    "higher_is_better",
];

pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// A header row plus data rows, rendered as CSV.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("input was UTF-8")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::write(path.as_ref(), self.render().as_bytes())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    checkpoint: String,
    category: Option<String>,
    class: String,
    subclass: Option<String>,
    prompt_type: String,
    metric: String,
    value: f64,
    higher_is_better: bool,
}

pub fn parse_scores(text: &str) -> Result<ScoreTable> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| FormatError::Record {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().ne(SCORE_COLUMNS) {
        return Err(FormatError::Record {
            line: 1,
            message: format!("expected columns {}", SCORE_COLUMNS.join(",")),
        }
        .into());
    }
    let mut records = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| FormatError::Record {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        records.push(ScoreRecord {
            checkpoint: row.checkpoint,
            category: row.category,
            class: row.class,
            subclass: row.subclass,
            prompt_type: row.prompt_type,
            metric: row.metric,
            value: row.value,
            higher_is_better: row.higher_is_better,
        });
    }
    ScoreTable::new(records)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    parse_scores(&read_text(path.as_ref())?)
}

pub fn write_scores(table: &ScoreTable) -> CsvTable {
    let mut out = CsvTable::new(SCORE_COLUMNS);
    for r in table.records() {
        out.push([
            r.checkpoint.clone(),
            r.category.clone().unwrap_or_default(),
            r.class.clone(),
            r.subclass.clone().unwrap_or_default(),
            r.prompt_type.clone(),
            r.metric.clone(),
            format_float(r.value),
            r.higher_is_better.to_string(),
        ]);
    }
    out
}

pub fn write_category_scores(scores: &[CategoryScore]) -> CsvTable {
    let mut out = CsvTable::new(["checkpoint", "category", "prompt_type", "metric", "value"]);
    for s in scores {
        out.push([
            s.checkpoint.clone(),
            s.category.clone(),
            s.prompt_type.clone(),
            s.metric.clone(),
            format_float(s.value),
        ]);
    }
    out
}
