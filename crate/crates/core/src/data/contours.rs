//! Lesion contour annotations.
//!
//! CSV with header `image_id,label,points`; `points` is `x:y` pairs joined by
//! `;`. Labels are case-insensitive.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Benign),
            1 => Some(Label::Malignant),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Some(Label::Benign),
            "malignant" => Some(Label::Malignant),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContourAnnotation {
    pub image_id: String,
    pub label: Label,
    pub contour: Vec<(usize, usize)>,
}

impl ContourAnnotation {
    /// Inclusive bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let xs = self.contour.iter().map(|p| p.0);
        let ys = self.contour.iter().map(|p| p.1);
        (
            xs.clone().min().unwrap_or(0),
            ys.clone().min().unwrap_or(0),
            xs.max().unwrap_or(0),
            ys.max().unwrap_or(0),
        )
    }
}

/// Parses a contour CSV without image-bounds checks.
pub fn parse_contours(text: &str) -> Result<Vec<ContourAnnotation>> {
    parse_contours_within(text, |_| None)
}

/// Parses a contour CSV, rejecting points outside the `(width, height)`
/// reported by `bounds` for the row's image.
pub fn parse_contours_within(
    text: &str,
    bounds: impl Fn(&str) -> Option<(usize, usize)>,
) -> Result<Vec<ContourAnnotation>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim().eq_ignore_ascii_case("image_id,label,points") => {}
        _ => {
            return Err(Error::Csv {
                line: 1,
                message: "expected header image_id,label,points".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let err = |message: String| Error::Csv { line, message };
        let mut fields = row.splitn(3, ',');
        let (Some(id), Some(label), Some(points)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(err("expected 3 fields".into()));
        };
        let id = id.trim();
        if id.is_empty() {
            return Err(err("empty image_id".into()));
        }
        let label = Label::parse(label).ok_or_else(|| err(format!("unknown label {label:?}")))?;
        let mut contour = Vec::new();
        for pair in points.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (x, y) = pair
                .split_once(':')
                .ok_or_else(|| err(format!("malformed point {pair:?}")))?;
            let x: usize = x
                .trim()
                .parse()
                .map_err(|_| err(format!("coordinate out of range in {pair:?}")))?;
            let y: usize = y
                .trim()
                .parse()
                .map_err(|_| err(format!("coordinate out of range in {pair:?}")))?;
            if let Some((w, h)) = bounds(id) {
                if x >= w || y >= h {
                    return Err(err(format!(
                        "coordinate out of range: ({x},{y}) outside {w}x{h} image"
                    )));
                }
            }
            contour.push((x, y));
        }
        if contour.len() < 3 {
            return Err(err(format!("need at least 3 points, got {}", contour.len())));
        }
        out.push(ContourAnnotation {
            image_id: id.to_string(),
            label,
            contour,
        });
    }
    Ok(out)
}

pub fn write_contours(annotations: &[ContourAnnotation]) -> String {
    let mut s = String::from("image_id,label,points\n");
    for a in annotations {
        let pts: Vec<String> = a.contour.iter().map(|(x, y)| format!("{x}:{y}")).collect();
        s.push_str(&format!("{},{},{}\n", a.image_id, a.label, pts.join(";")));
    }
    s
}
