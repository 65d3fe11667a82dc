//! Versioned text serialization of policy parameters.
//!
//! ```text
//! rlv-params v1
//! modulus 10
//! features structured 3 2
//! weights 5995 22
//! <one line per feature row, space separated>
//! head value 5995
//! <one line>
//! end
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a write/read cycle is
//! exact and the file is byte-stable for identical parameters.

use std::path::Path;

use rlv_core::{FeatureMap, Policy64, Vocab};

use crate::error::{HarnessError, Result};

pub const MAGIC: &str = "rlv-params v1";

fn row(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 8);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{v:?}"));
    }
    s
}

pub fn to_text(policy: &Policy64) -> String {
    let mut out = format!("{MAGIC}\nmodulus {}\n", policy.vocab().modulus());
    out += &match policy.feature_map() {
        FeatureMap::Window { width } => format!("features window {width}\n"),
        FeatureMap::Structured { width, gain } => format!("features structured {width} {gain}\n"),
    };
    let cols = Vocab::SIZE;
    out += &format!("weights {} {cols}\n", policy.feature_dim());
    for chunk in policy.weights.chunks(cols) {
        out += &row(chunk);
        out.push('\n');
    }
    for (name, head) in [("value", &policy.value_head), ("bce", &policy.bce_head), ("reg", &policy.reg_head)] {
        if let Some(h) = head {
            out += &format!("head {name} {}\n{}\n", h.len(), row(h));
        }
    }
    out + "end\n"
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let (i, line) = self.iter.next().ok_or_else(|| corrupt(self.last + 1, "unexpected end of file"))?;
        self.last = i + 1;
        Ok(line)
    }
}

fn corrupt(line: usize, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Artifact(format!("params line {line}: {msg}"))
}

fn floats(line: &str, expected: usize, at: usize) -> Result<Vec<f64>> {
    let values = line
        .split(' ')
        .map(|t| t.parse::<f64>().map_err(|e| corrupt(at, format!("`{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(corrupt(at, format!("expected {expected} values, found {}", values.len())));
    }
    Ok(values)
}

fn field<'a>(line: &'a str, keyword: &str, at: usize) -> Result<Vec<&'a str>> {
    let mut parts = line.split(' ');
    if parts.next() != Some(keyword) {
        return Err(corrupt(at, format!("expected `{keyword}`, found `{line}`")));
    }
    Ok(parts.collect())
}

fn num(s: Option<&&str>, at: usize) -> Result<usize> {
    s.ok_or_else(|| corrupt(at, "missing number"))?.parse().map_err(|e| corrupt(at, e))
}

pub fn from_text(text: &str) -> Result<Policy64> {
    let mut lines = Lines { iter: text.lines().enumerate(), last: 0 };
    let magic = lines.next()?;
    if magic != MAGIC {
        return Err(corrupt(1, format!("unsupported header `{magic}`")));
    }
    let m = field(lines.next()?, "modulus", 2)?;
    let vocab = Vocab::new(num(m.first(), 2)? as u32).map_err(|e| corrupt(2, e))?;
    let f = field(lines.next()?, "features", 3)?;
    let feature_map = match f.first().copied() {
        Some("window") if f.len() == 2 => FeatureMap::Window { width: num(f.get(1), 3)? },
        Some("structured") if f.len() == 3 => FeatureMap::Structured { width: num(f.get(1), 3)?, gain: num(f.get(2), 3)? },
        _ => return Err(corrupt(3, "bad feature map")),
    };
    let w = field(lines.next()?, "weights", 4)?;
    let (rows, cols) = (num(w.first(), 4)?, num(w.get(1), 4)?);
    if rows != feature_map.dim() || cols != Vocab::SIZE {
        return Err(corrupt(4, format!("weights {rows}x{cols} do not fit the feature map")));
    }
    let mut weights = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines.next()?;
        weights.extend(floats(line, cols, lines.last)?);
    }
    let mut heads: [Option<Vec<f64>>; 3] = [None, None, None];
    loop {
        let line = lines.next()?;
        let at = lines.last;
        if line == "end" {
            break;
        }
        let h = field(line, "head", at)?;
        let slot = match h.first().copied() {
            Some("value") => 0,
            Some("bce") => 1,
            Some("reg") => 2,
            _ => return Err(corrupt(at, format!("unknown head in `{line}`"))),
        };
        let len = num(h.get(1), at)?;
        if heads[slot].is_some() {
            return Err(corrupt(at, "duplicate head"));
        }
        let values = lines.next()?;
        heads[slot] = Some(floats(values, len, lines.last)?);
    }
    let [value, bce, reg] = heads;
    Policy64::from_parts(vocab, feature_map, weights, value, bce, reg).map_err(|e| corrupt(lines.last, e))
}

pub fn write(path: &Path, policy: &Policy64) -> Result<()> {
    std::fs::write(path, to_text(policy)).map_err(|e| HarnessError::artifact(path, e))
}

pub fn read(path: &Path) -> Result<Policy64> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::artifact(path, e))?;
    from_text(&text).map_err(|e| HarnessError::artifact(path, e))
}
