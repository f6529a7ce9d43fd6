//! KITTI object-benchmark calibration (`calib/*.txt`) and label (`label_2/*.txt`) files.
//!
//! Field numbers in errors are 1-based and count the key of a calibration
//! line (`P2:`) or the class name of a label line as field 1.

use std::fmt::Write as _;

use crate::camera::{CameraIntrinsics, Point3D};
use crate::error::KittiError;

pub const P2_KEY: &str = "P2:";
pub const LABEL_FIELDS: usize = 15;
pub const DONT_CARE: &str = "DontCare";

fn parse_float(token: &str, line: usize, column: usize) -> Result<f64, KittiError> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(KittiError::MalformedFloat { line, column, token: token.to_string() }),
    }
}

/// Formats like C's `%.{prec}e`: at least two exponent digits, explicit sign.
pub fn format_exp(x: f64, prec: usize) -> String {
    let s = format!("{x:.prec$e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let (sign, digits) = match exp.strip_prefix('-') {
        Some(d) => ('-', d),
        None => ('+', exp),
    };
    format!("{mantissa}e{sign}{digits:0>2}")
}

/// Parsed calibration file. Only `P2` is interpreted; every other line is
/// kept verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibRecord {
    /// Left color camera projection matrix, row-major.
    pub p2: [[f64; 4]; 3],
    lines: Vec<String>,
    p2_line: usize,
}

impl CalibRecord {
    pub fn intrinsics(&self) -> CameraIntrinsics<f64> {
        CameraIntrinsics { fx: self.p2[0][0], fy: self.p2[1][1], cx: self.p2[0][2], cy: self.p2[1][2] }
    }

    /// Lines other than `P2`, in file order.
    pub fn other_lines(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().enumerate().filter(|(i, _)| *i != self.p2_line).map(|(_, l)| l.as_str())
    }

    /// Writes the file back: `P2` with `%.12e` values, other lines untouched.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, line) in self.lines.iter().enumerate() {
            if i == self.p2_line {
                let values: Vec<String> = self.p2.iter().flatten().map(|&v| format_exp(v, 12)).collect();
                let _ = writeln!(out, "{P2_KEY} {}", values.join(" "));
            } else {
                let _ = writeln!(out, "{line}");
            }
        }
        out
    }
}

/// Extracts the first `P2:` line and its 12 numbers.
pub fn parse_calib(text: &str) -> Result<CalibRecord, KittiError> {
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    let p2_line = lines
        .iter()
        .position(|l| l.split_whitespace().next() == Some(P2_KEY))
        .ok_or(KittiError::MissingP2Line)?;
    let line_no = p2_line + 1;
    let tokens: Vec<&str> = lines[p2_line].split_whitespace().skip(1).collect();
    if tokens.len() != 12 {
        return Err(KittiError::WrongFieldCount { line: line_no, expected: 12, found: tokens.len() });
    }
    let mut p2 = [[0.0; 4]; 3];
    for (i, tok) in tokens.iter().enumerate() {
        p2[i / 4][i % 4] = parse_float(tok, line_no, i + 2)?;
    }
    if !(p2[0][0] > 0.0 && p2[1][1] > 0.0) {
        return Err(KittiError::InvalidRecord {
            line: line_no,
            reason: format!("focal lengths must be positive, got {} and {}", p2[0][0], p2[1][1]),
        });
    }
    Ok(CalibRecord { p2, lines, p2_line })
}

/// One object annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// `(u1, v1, u2, v2)`, pixels.
    pub bbox: [f64; 4],
    /// `(h, w, l)`, meters.
    pub dims: [f64; 3],
    /// Bottom center of the box in the rectified camera frame, meters.
    pub location: Point3D<f64>,
    pub rotation_y: f64,
}

impl LabelRecord {
    /// `DontCare` regions carry placeholder values and are exempt from validation.
    pub fn is_dont_care(&self) -> bool {
        self.class == DONT_CARE
    }

    /// A car with zero truncation, whose whole box should be in view.
    pub fn is_untruncated_car(&self) -> bool {
        self.class == "Car" && self.truncated == 0.0
    }

    /// Row where a level camera `el` meters above flat ground sees the
    /// ground at this object's depth: `cy + fy·el/z`. `None` for `z ≤ 0`.
    pub fn contact_row(&self, k: &CameraIntrinsics<f64>, el: f64) -> Option<f64> {
        let z = self.location.z;
        (z > 0.0).then(|| k.cy + k.fy * el / z)
    }

    /// One line in the devkit's `%s %.2f %d %.2f ...` layout.
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {:.2} {} {:.2}", self.class, self.truncated, self.occluded, self.alpha);
        for v in self.bbox.iter().chain(&self.dims).chain(&[self.location.x, self.location.y, self.location.z]) {
            let _ = write!(s, " {v:.2}");
        }
        let _ = write!(s, " {:.2}", self.rotation_y);
        s
    }
}

fn parse_label_line(line: &str, line_no: usize) -> Result<LabelRecord, KittiError> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != LABEL_FIELDS {
        return Err(KittiError::WrongFieldCount { line: line_no, expected: LABEL_FIELDS, found: f.len() });
    }
    let num = |i: usize| parse_float(f[i], line_no, i + 1);
    let occluded_raw = num(2)?;
    if occluded_raw.fract() != 0.0 {
        return Err(KittiError::InvalidRecord { line: line_no, reason: format!("occlusion {} is not an integer", f[2]) });
    }
    let rec = LabelRecord {
        class: f[0].to_string(),
        truncated: num(1)?,
        occluded: occluded_raw as i32,
        alpha: num(3)?,
        bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
        dims: [num(8)?, num(9)?, num(10)?],
        location: Point3D::new(num(11)?, num(12)?, num(13)?),
        rotation_y: num(14)?,
    };
    if !rec.is_dont_care() {
        let bad = |reason: String| Err(KittiError::InvalidRecord { line: line_no, reason });
        if !(0.0..=1.0).contains(&rec.truncated) {
            return bad(format!("truncation {} outside [0, 1]", rec.truncated));
        }
        if !(0..=3).contains(&rec.occluded) {
            return bad(format!("occlusion {} outside 0..=3", rec.occluded));
        }
        if rec.dims.iter().any(|&d| d < 0.0) {
            return bad(format!("negative dimensions {:?}", rec.dims));
        }
        if rec.bbox[0] > rec.bbox[2] || rec.bbox[1] > rec.bbox[3] {
            return bad(format!("bounding box {:?} not ordered", rec.bbox));
        }
    }
    Ok(rec)
}

/// One record per non-blank line.
pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>, KittiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l, i + 1))
        .collect()
}

pub fn labels_to_text(labels: &[LabelRecord]) -> String {
    labels.iter().map(|l| l.to_line() + "\n").collect()
}
