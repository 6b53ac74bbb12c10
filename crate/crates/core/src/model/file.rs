//! Key–value model files.
//!
//! ```text
//! # comment
//! label   = convex-1d
//! dim     = 1
//! horizon = 1.0
//! eta     = 0.5
//! Q = 1
//! R = 2
//! Qbar = 0.1
//! S = 0.5
//! QT = 1
//! init_mean = 1.0      # optional
//! init_std  = 0.5      # optional
//! ```
//!
//! Matrices are row-major lists separated by whitespace or commas.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use super::lq::{InitialLaw, LqModel};
use crate::error::{Error, Result};

const REQUIRED: [&str; 8] = ["dim", "horizon", "eta", "Q", "R", "Qbar", "S", "QT"];
const OPTIONAL: [&str; 3] = ["label", "init_mean", "init_std"];

pub fn parse_model(path: impl AsRef<Path>) -> Result<LqModel> {
    let text = std::fs::read_to_string(path)?;
    parse_model_str(&text)
}

fn parse_numbers(raw: &str, line: usize, key: &str) -> Result<Vec<f64>> {
    raw.split(|c: char| c.is_whitespace() || c == ',' || c == '[' || c == ']' || c == ';')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("{key}: `{t}` is not a number"),
            })
        })
        .collect()
}

pub fn parse_model_str(text: &str) -> Result<LqModel> {
    let mut entries: HashMap<&str, (usize, &str)> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        if !REQUIRED.contains(&key) && !OPTIONAL.contains(&key) {
            return Err(Error::Parse {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        if let Some((first, _)) = entries.insert(key, (line, value.trim())) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate key `{key}` (first set on line {first})"),
            });
        }
    }
    for key in REQUIRED {
        if !entries.contains_key(key) {
            return Err(Error::MissingKey(key.to_string()));
        }
    }
    let scalar = |key: &str| -> Result<(usize, f64)> {
        let (line, raw) = entries[key];
        let nums = parse_numbers(raw, line, key)?;
        match nums.as_slice() {
            [x] => Ok((line, *x)),
            _ => Err(Error::Parse {
                line,
                message: format!("{key} expects a single number, found {}", nums.len()),
            }),
        }
    };
    let (dim_line, dim_raw) = scalar("dim")?;
    if dim_raw < 1.0 || dim_raw.fract() != 0.0 || dim_raw > 4096.0 {
        return Err(Error::Parse {
            line: dim_line,
            message: format!("dim must be a positive integer, found {dim_raw}"),
        });
    }
    let d = dim_raw as usize;
    let (_, horizon) = scalar("horizon")?;
    let matrix = |key: &str| -> Result<DMatrix<f64>> {
        let (line, raw) = entries[key];
        let nums = parse_numbers(raw, line, key)?;
        if nums.len() != d * d {
            return Err(Error::Parse {
                line,
                message: format!("{key} needs {} entries for a {d}x{d} matrix, found {}", d * d, nums.len()),
            });
        }
        Ok(DMatrix::from_row_slice(d, d, &nums))
    };
    let init = match (entries.get("init_mean"), entries.get("init_std")) {
        (None, None) => None,
        (Some(&(line, raw)), std) => {
            let mean = parse_numbers(raw, line, "init_mean")?;
            let std = match std {
                Some(_) => scalar("init_std")?.1,
                None => 1.0,
            };
            Some(InitialLaw { mean, std })
        }
        (None, Some(_)) => Some(InitialLaw {
            mean: vec![0.0; d],
            std: scalar("init_std")?.1,
        }),
    };
    let model = LqModel {
        dim: d,
        horizon,
        eta: matrix("eta")?,
        q: matrix("Q")?,
        r: matrix("R")?,
        qbar: matrix("Qbar")?,
        s: matrix("S")?,
        qt: matrix("QT")?,
        label: entries.get("label").map(|(_, v)| v.to_string()).unwrap_or_default(),
        init,
    };
    model.validate_keyed().map_err(|(key, message)| Error::Parse {
        line: entries.get(key).map(|(l, _)| *l).unwrap_or(0),
        message,
    })?;
    Ok(model)
}

fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Render a model in the file format; `parse_model_str` inverts this exactly.
pub fn serialize_model(model: &LqModel) -> String {
    let mut out = String::new();
    if !model.label.is_empty() {
        let _ = writeln!(out, "label = {}", model.label);
    }
    let _ = writeln!(out, "dim = {}", model.dim);
    let _ = writeln!(out, "horizon = {}", fmt_num(model.horizon));
    for (key, m) in model.matrices() {
        let row_major: Vec<String> = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| fmt_num(m[(i, j)]))
            .collect();
        let _ = writeln!(out, "{key} = {}", row_major.join(" "));
    }
    if let Some(init) = &model.init {
        let mean: Vec<String> = init.mean.iter().map(|x| fmt_num(*x)).collect();
        let _ = writeln!(out, "init_mean = {}", mean.join(" "));
        let _ = writeln!(out, "init_std = {}", fmt_num(init.std));
    }
    out
}
