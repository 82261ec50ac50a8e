//! Additive attention masks stored as a dense allow/forbid grid.
//!
//! An allowed entry contributes `0` to the attention score and a forbidden
//! entry contributes `-inf`. The grid never stores the additive values, so
//! `-inf` never enters arithmetic.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl MaskMatrix {
    /// A mask with every entry forbidden.
    pub fn forbidden(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut allowed: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(allowed(i, j));
            }
        }
        Self { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, allowed: bool) {
        self.allow[row * self.cols + col] = allowed;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allow[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_allowed_count(&self, row: usize) -> usize {
        self.row(row).iter().filter(|&&a| a).count()
    }

    pub fn allowed_count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// Additive value of an entry: `0.0` or `-inf`.
    pub fn additive(&self, row: usize, col: usize) -> f64 {
        if self.is_allowed(row, col) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Checks that every row has at least one allowed column.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&a| a) {
                return Err(Error::EmptyRow { row: i });
            }
        }
        Ok(())
    }

    /// True when every allowed entry of `self` is also allowed in `other`.
    pub fn is_subset_of(&self, other: &MaskMatrix) -> bool {
        self.shape() == other.shape()
            && self
                .allow
                .iter()
                .zip(&other.allow)
                .all(|(&a, &b)| !a || b)
    }

    /// Splits the columns at `at`, returning `[0, at)` and `[at, cols)`.
    pub fn split_cols(&self, at: usize) -> (MaskMatrix, MaskMatrix) {
        assert!(at <= self.cols, "split point {at} beyond {} columns", self.cols);
        let left = MaskMatrix::from_fn(self.rows, at, |i, j| self.is_allowed(i, j));
        let right = MaskMatrix::from_fn(self.rows, self.cols - at, |i, j| self.is_allowed(i, at + j));
        (left, right)
    }

    /// Concatenates masks with equal row counts side by side.
    pub fn hstack(parts: &[&MaskMatrix]) -> Result<MaskMatrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::Shape {
                op: "mask hstack",
                left: vec![rows],
                right: vec![bad.rows],
            });
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for part in parts {
                allow.extend_from_slice(part.row(i));
            }
        }
        Ok(MaskMatrix { rows, cols, allow })
    }

    /// Stacks masks with equal column counts on top of each other.
    pub fn vstack(parts: &[&MaskMatrix]) -> Result<MaskMatrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(bad) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::Shape {
                op: "mask vstack",
                left: vec![cols],
                right: vec![bad.cols],
            });
        }
        let mut allow = Vec::new();
        for part in parts {
            allow.extend_from_slice(&part.allow);
        }
        Ok(MaskMatrix {
            rows: allow.len() / cols.max(1),
            cols,
            allow,
        })
    }

    /// CSV dump: a `rows,cols` line with the dimensions, then one line of
    /// `0`/`1` values (allowed = 1) per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols * 2 + 1) + 16);
        let _ = writeln!(out, "{},{}", self.rows, self.cols);
        for i in 0..self.rows {
            let line: Vec<&str> = self.row(i).iter().map(|&a| if a { "1" } else { "0" }).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MaskMatrix> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty mask csv"))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad mask header `{header}`: {e}")))?;
        let [rows, cols] = dims[..] else {
            return Err(Error::invalid(format!("bad mask header `{header}`")));
        };
        let mut mask = MaskMatrix::forbidden(rows, cols);
        for i in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| Error::invalid(format!("mask csv missing row {i}")))?;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols {
                return Err(Error::invalid(format!("mask csv row {i} has {} cells", cells.len())));
            }
            for (j, cell) in cells.iter().enumerate() {
                match cell.trim() {
                    "1" => mask.set(i, j, true),
                    "0" => {}
                    other => return Err(Error::invalid(format!("bad mask cell `{other}`"))),
                }
            }
        }
        Ok(mask)
    }

    /// Plain (ASCII) PGM image, allowed entries white.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for i in 0..self.rows {
            let line: Vec<&str> = self.row(i).iter().map(|&a| if a { "255" } else { "0" }).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = MaskMatrix::from_fn(3, 4, |i, j| j <= i + 1);
        let text = m.to_csv();
        assert!(text.starts_with("3,4\n1,1,0,0\n"));
        assert_eq!(MaskMatrix::from_csv(&text).unwrap(), m);
    }

    #[test]
    fn validate_reports_first_empty_row() {
        let m = MaskMatrix::from_fn(3, 2, |i, _| i != 1);
        assert!(matches!(m.validate(), Err(Error::EmptyRow { row: 1 })));
    }

    #[test]
    fn split_and_hstack_are_inverse() {
        let m = MaskMatrix::from_fn(4, 5, |i, j| (i + j) % 3 == 0);
        let (l, r) = m.split_cols(2);
        assert_eq!(MaskMatrix::hstack(&[&l, &r]).unwrap(), m);
    }

    #[test]
    fn pgm_header() {
        let m = MaskMatrix::from_fn(2, 3, |_, _| true);
        assert!(m.to_pgm().starts_with("P2\n3 2\n255\n255 255 255\n"));
    }
}
