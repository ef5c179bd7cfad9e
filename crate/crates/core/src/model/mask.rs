//! Boolean attention masks over cache slots.

use crate::error::{dim_err, validation_err, Result};

/// Entry `(i, j)` is true iff query `i` may attend to key slot `j`.
///
/// Columns cover every slot visible to the call: the `past` slots already in
/// the cache followed by one slot per new query, so query `i` owns slot
/// `past + i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    /// All-false mask; fill it with [`AttentionMask::set`].
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![false; rows * cols] }
    }

    /// Standard causal mask for `n` new queries after `past` cached slots.
    pub fn causal(past: usize, n: usize) -> Self {
        let mut m = Self::empty(n, past + n);
        for i in 0..n {
            m.data[i * m.cols..i * m.cols + past + i + 1].fill(true);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    /// Checks the mask against a call with `past` cached slots: one row per
    /// query, `past + rows` columns, each query sees its own slot and no
    /// later new slot.
    pub fn validate(&self, past: usize) -> Result<()> {
        if self.cols != past + self.rows {
            return Err(dim_err!(
                "mask has {} columns for {past} cached + {} new slots",
                self.cols,
                self.rows
            ));
        }
        for i in 0..self.rows {
            if !self.get(i, past + i) {
                return Err(validation_err!("query {i} cannot attend to its own slot"));
            }
            if (past + i + 1..self.cols).any(|j| self.get(i, j)) {
                return Err(validation_err!("query {i} attends to a later new slot"));
            }
        }
        Ok(())
    }
}
