//! Bounding boxes and their bracketed text form, e.g. `[0.525,0.0,0.675,0.394]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalised box corners in the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()
            .map_err(|msg| Error::BBoxParse { pos: 0, msg })?;
        Ok(b)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let c = self.coords();
        if let Some(v) = c.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("coordinate {v} outside [0, 1]"));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(format!("inverted box {c:?}"));
        }
        Ok(())
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// One coordinate rounded to three decimals with trailing zeros trimmed,
/// always keeping at least one digit after the point.
fn format_coord(v: f64) -> String {
    let mut s = format!("{v:.3}");
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    s
}

pub fn serialize_bbox(b: &BBox) -> String {
    let parts: Vec<String> = b.coords().iter().map(|&v| format_coord(v)).collect();
    format!("[{}]", parts.join(","))
}

/// Parses the single bracketed 4-tuple inside `s`. Text around the brackets
/// is ignored; anything malformed inside them is an error carrying the byte
/// offset where parsing gave up.
pub fn parse_bbox(s: &str) -> Result<BBox> {
    let err = |pos: usize, msg: String| Error::BBoxParse { pos, msg };
    let open = s
        .find('[')
        .ok_or_else(|| err(0, "no opening bracket".into()))?;
    let close = s[open..]
        .find(']')
        .map(|i| open + i)
        .ok_or_else(|| err(s.len(), "no closing bracket".into()))?;
    if let Some(i) = s[close + 1..].find('[') {
        return Err(err(close + 1 + i, "more than one bracketed box".into()));
    }
    let mut coords = Vec::with_capacity(4);
    let mut start = open + 1;
    for field in s[open + 1..close].split(',') {
        let t = field.trim();
        let lead = field.len() - field.trim_start().len();
        let numeric = !t.is_empty()
            && t.chars().all(|c| c.is_ascii_digit() || c == '.')
            && t.chars().filter(|&c| c == '.').count() <= 1
            && t.chars().any(|c| c.is_ascii_digit());
        if !numeric {
            return Err(err(
                start + lead,
                format!("expected a decimal number, found {t:?}"),
            ));
        }
        let v: f64 = t.parse().map_err(|_| {
            err(
                start + lead,
                format!("expected a decimal number, found {t:?}"),
            )
        })?;
        coords.push(v);
        start += field.len() + 1;
    }
    if coords.len() != 4 {
        return Err(err(
            open,
            format!("expected 4 coordinates, found {}", coords.len()),
        ));
    }
    let b = BBox {
        x_min: coords[0],
        y_min: coords[1],
        x_max: coords[2],
        y_max: coords[3],
    };
    b.validate().map_err(|msg| err(open, msg))?;
    Ok(b)
}
