use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec2;

/// One tracked position of one pedestrian in one frame, in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub frame_id: i64,
    pub pedestrian_id: i64,
    pub position: Vec2,
}

impl RawAnnotation {
    pub fn new(frame_id: i64, pedestrian_id: i64, position: Vec2) -> Self {
        Self {
            frame_id,
            pedestrian_id,
            position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// Whitespace separated `frame pedestrian x y` rows, as distributed with ETH/UCY.
    #[default]
    EthUcyTsv,
}

pub fn parse_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<RawAnnotation>> {
    let text = std::fs::read_to_string(path)?;
    match format {
        AnnotationFormat::EthUcyTsv => parse_annotations_str(&text),
    }
}

/// Parses ETH/UCY rows. The result is sorted by `(pedestrian_id, frame_id)`.
pub fn parse_annotations_str(text: &str) -> Result<Vec<RawAnnotation>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 fields (frame ped x y), found {}", fields.len()),
            });
        }
        let frame_id = parse_integral(fields[0], line_no, "frame id")?;
        let pedestrian_id = parse_integral(fields[1], line_no, "pedestrian id")?;
        let x = parse_finite(fields[2], line_no, "x")?;
        let y = parse_finite(fields[3], line_no, "y")?;
        if !seen.insert((frame_id, pedestrian_id)) {
            return Err(Error::DuplicateAnnotation {
                frame_id,
                pedestrian_id,
            });
        }
        out.push(RawAnnotation::new(frame_id, pedestrian_id, [x, y]));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("annotation file has no rows".into()));
    }
    out.sort_by_key(|a| (a.pedestrian_id, a.frame_id));
    Ok(out)
}

// ETH/UCY ships ids as floats ("780.0"); accept those when they are integral.
fn parse_integral(field: &str, line: usize, what: &str) -> Result<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Ok(v);
    }
    let v = parse_finite(field, line, what)?;
    if v.fract() != 0.0 || v.abs() > (1i64 << 53) as f64 {
        return Err(Error::Parse {
            line,
            msg: format!("{what} `{field}` is not an integer"),
        });
    }
    Ok(v as i64)
}

fn parse_finite(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{what} `{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("{what} `{field}` is not finite"),
        });
    }
    Ok(v)
}

/// Serializes annotations as tab separated rows. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_annotations(annotations: &[RawAnnotation]) -> String {
    let mut s = String::with_capacity(annotations.len() * 24);
    for a in annotations {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            a.frame_id, a.pedestrian_id, a.position[0], a.position[1]
        );
    }
    s
}
