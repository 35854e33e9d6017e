//! Values on a 2-D state lattice at fixed time, and their CSV form
//! `y1,y2,<column>` with 17 significant digits.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub column: String,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    /// Row-major in `y1`, `y2` fastest.
    pub values: Vec<f64>,
}

/// `n + 1` equally spaced nodes from `lo` to `hi`, endpoints exact.
pub fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| if k == n { hi } else { lo + (hi - lo) * k as f64 / n as f64 })
        .collect()
}

pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

impl SurfaceGrid {
    pub fn from_fn<F: FnMut(f64, f64) -> f64>(column: &str, y1: Vec<f64>, y2: Vec<f64>, mut f: F) -> Self {
        let mut values = Vec::with_capacity(y1.len() * y2.len());
        for &a in &y1 {
            for &b in &y2 {
                values.push(f(a, b));
            }
        }
        Self {
            column: column.to_string(),
            y1,
            y2,
            values,
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.y2.len() + j]
    }

    pub fn mean_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "y1,y2,{}", self.column)?;
        for (i, &a) in self.y1.iter().enumerate() {
            for (j, &b) in self.y2.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{}",
                    format_value(a),
                    format_value(b),
                    format_value(self.at(i, j))
                )?;
            }
        }
        Ok(())
    }

    /// Reads a lattice written by [`Self::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty surface file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        let column = header
            .strip_prefix("y1,y2,")
            .ok_or_else(|| Error::Parse(format!("unexpected header `{header}`")))?
            .to_string();
        let mut rows = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number in `{line}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != 3 {
                return Err(Error::Parse(format!("expected 3 columns in `{line}`")));
            }
            rows.push([vals[0], vals[1], vals[2]]);
        }
        let mut y1: Vec<f64> = Vec::new();
        let mut y2: Vec<f64> = Vec::new();
        for r in &rows {
            if y1.last() != Some(&r[0]) {
                y1.push(r[0]);
            }
            if y1.len() == 1 {
                y2.push(r[1]);
            }
        }
        if y1.len() * y2.len() != rows.len() {
            return Err(Error::Parse("surface rows do not form a lattice".into()));
        }
        Ok(Self {
            column,
            y1,
            y2,
            values: rows.iter().map(|r| r[2]).collect(),
        })
    }
}
