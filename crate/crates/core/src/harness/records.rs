//! Stroke drawings as newline-delimited JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError};
use crate::geometry::{Point, RawStroke};
use crate::render::CanvasSize;

/// One drawing: `{"id", "class", "strokes": [[[x, y], ...], ...]}` with an
/// optional alphabet name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawingRecord {
    pub id: String,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<String>,
    pub strokes: Vec<Vec<[f64; 2]>>,
}

impl DrawingRecord {
    pub fn validate(&self, canvas: CanvasSize) -> Result<(), String> {
        if self.strokes.is_empty() {
            return Err("no strokes".into());
        }
        let (w, h) = (canvas.width as f64, canvas.height as f64);
        for (i, s) in self.strokes.iter().enumerate() {
            if s.is_empty() {
                return Err(format!("stroke {i} is empty"));
            }
            if let Some(p) = s.iter().find(|p| !(p[0].is_finite() && p[1].is_finite())) {
                return Err(format!("stroke {i} has non-finite point {p:?}"));
            }
            if let Some(p) = s.iter().find(|p| !(0.0..=w).contains(&p[0]) || !(0.0..=h).contains(&p[1])) {
                return Err(format!("stroke {i} point {p:?} outside the {}x{} canvas", canvas.width, canvas.height));
            }
        }
        Ok(())
    }

    pub fn raw_strokes(&self) -> Vec<RawStroke> {
        self.strokes.iter().map(|s| RawStroke(s.iter().map(|&[x, y]| Point::new(x, y)).collect())).collect()
    }

    pub fn from_strokes(id: String, class: usize, strokes: &[RawStroke]) -> Self {
        Self { id, class, alphabet: None, strokes: strokes.iter().map(|s| s.0.iter().map(|p| [p.x, p.y]).collect()).collect() }
    }
}

/// Valid records and `(line number, reason)` for each skipped line.
#[derive(Clone, Debug, PartialEq)]
pub struct Ingest {
    pub records: Vec<DrawingRecord>,
    pub skipped: Vec<(usize, String)>,
}

/// Parses NDJSON text. Blank lines are ignored; in strict mode the first
/// bad line is an error, otherwise it is skipped and reported.
pub fn parse_drawings(text: &str, canvas: CanvasSize, strict: bool) -> Result<Ingest, HarnessError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DrawingRecord>(line).map_err(|e| e.to_string()).and_then(|r| {
            r.validate(canvas)?;
            Ok(r)
        });
        match parsed {
            Ok(r) => records.push(r),
            Err(why) if strict => return Err(HarnessError::Data(format!("line {n}: {why}"))),
            Err(why) => skipped.push((n, why)),
        }
    }
    if records.is_empty() {
        return Err(HarnessError::Data("no valid drawing records".into()));
    }
    Ok(Ingest { records, skipped })
}

pub fn ingest_drawings(path: &Path, canvas: CanvasSize, strict: bool) -> Result<Ingest, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_drawings(&text, canvas, strict)
}

/// One record per line.
pub fn export_drawings(records: &[DrawingRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}
