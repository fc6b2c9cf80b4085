//! Random binomial selection observation operators.
//!
//! Each observation is the sum of a random sample of state entries: the
//! sample size of row `j` is `n_j ~ Binomial(state_dim, p)` and the entries
//! are drawn uniformly with replacement, so `H[j][k]` counts how often entry
//! `k` was picked. Generation uses ChaCha20 seeded through
//! `SeedableRng::seed_from_u64`, which is stable across platforms.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};

use crate::assimilation::ObservationOperator;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinomialSelectionSpec {
    pub state_dim: usize,
    pub obs_dim: usize,
    /// Per-entry selection probability.
    pub p: f64,
    pub seed: u64,
}

impl Default for BinomialSelectionSpec {
    fn default() -> Self {
        Self {
            state_dim: 200,
            obs_dim: 100,
            p: 0.01,
            seed: 2020,
        }
    }
}

impl BinomialSelectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.obs_dim == 0 {
            return Err(Error::InvalidParameter("operator dimensions must be positive".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter(format!("selection probability must lie in (0, 1), got {}", self.p)));
        }
        Ok(())
    }
}

pub fn generate_h(spec: &BinomialSelectionSpec) -> Result<ObservationOperator> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let sizes = Binomial::new(spec.state_dim as u64, spec.p)
        .map_err(|e| Error::InvalidParameter(format!("binomial distribution: {e}")))?;
    let mut h = DMatrix::zeros(spec.obs_dim, spec.state_dim);
    for j in 0..spec.obs_dim {
        let n_j = sizes.sample(&mut rng);
        for _ in 0..n_j {
            let k = rng.random_range(0..spec.state_dim);
            h[(j, k)] += 1.0;
        }
    }
    ObservationOperator::new(h)
}

/// Regularly spaced one-hot rows: row `j` observes entry
/// `j * state_dim / obs_dim`.
pub fn regular_h(state_dim: usize, obs_dim: usize) -> Result<ObservationOperator> {
    if state_dim == 0 || obs_dim == 0 || obs_dim > state_dim {
        return Err(Error::InvalidParameter(format!(
            "regular operator needs 0 < obs_dim <= state_dim, got {obs_dim} and {state_dim}"
        )));
    }
    let mut h = DMatrix::zeros(obs_dim, state_dim);
    for j in 0..obs_dim {
        h[(j, j * state_dim / obs_dim)] = 1.0;
    }
    ObservationOperator::new(h)
}

pub fn apply(h: &ObservationOperator, x: &DVector<f64>) -> Result<DVector<f64>> {
    h.apply(x)
}

/// Row sums (sample sizes `n_j`) as a histogram `n_j -> number of rows`.
pub fn row_count_histogram(h: &ObservationOperator) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for row in h.matrix().row_iter() {
        *hist.entry(row.sum().round() as usize).or_insert(0) += 1;
    }
    hist
}

/// `obs_dim` records of `state_dim` integers, no header.
pub fn write_h_csv<W: Write>(h: &ObservationOperator, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in h.matrix().row_iter() {
        w.write_record(row.iter().map(|v| format!("{}", v.round() as i64)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_h_csv<R: Read>(input: R) -> Result<ObservationOperator> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (j, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<i64>()
                    .ok()
                    .filter(|&v| v >= 0)
                    .map(|v| v as f64)
                    .ok_or_else(|| Error::Parse(format!("row {j}: '{s}' is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(Error::Parse("empty observation operator".into()));
    }
    Ok(ObservationOperator::new(DMatrix::from_fn(m, n, |i, k| rows[i][k]))?)
}
