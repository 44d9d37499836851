//! Soft prior knowledge on the hidden states.
//!
//! A [`SoftPrior`] holds one nonnegative weight per time step and state.
//! All-ones rows carry no information, one-hot rows pin the state, and
//! anything in between expresses graded plausibility.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `T × K` matrix of state weights `w_t(i) ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrior {
    weights: DMatrix<f64>,
}

impl SoftPrior {
    /// Validates that every entry is finite and nonnegative and that every
    /// row has a positive entry.
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::InvalidPrior("empty weight matrix".into()));
        }
        for t in 0..weights.nrows() {
            let row = weights.row(t);
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidPrior(format!("weight {v} at t = {t}")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidPrior(format!("all-zero weight row at t = {t}")));
            }
        }
        Ok(Self { weights })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidPrior("ragged weight rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), k, |t, i| rows[t][i]))
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    pub fn n_states(&self) -> usize {
        self.weights.ncols()
    }

    pub fn get(&self, t: usize, state: usize) -> f64 {
        self.weights[(t, state)]
    }

    /// First `len` rows; rows past the end are vacuous.
    pub fn prefix_or_pad(&self, len: usize) -> Self {
        let k = self.n_states();
        let have = self.len();
        Self {
            weights: DMatrix::from_fn(len, k, |t, i| if t < have { self.weights[(t, i)] } else { 1.0 }),
        }
    }

    /// Column `i` of the result is column `perm[i]` of `self`.
    pub fn permute_states(&self, perm: &[usize]) -> Self {
        Self {
            weights: DMatrix::from_fn(self.len(), self.n_states(), |t, i| self.weights[(t, perm[i])]),
        }
    }

    /// True when every row is proportional to the all-ones row.
    pub fn is_uninformative(&self) -> bool {
        (0..self.len()).all(|t| {
            let row = self.weights.row(t);
            let first = row[0];
            row.iter().all(|&v| v == first)
        })
    }

    pub(crate) fn check_shape(&self, len: usize, n_states: usize) -> Result<()> {
        if self.len() != len || self.n_states() != n_states {
            return Err(Error::Dimension(format!(
                "prior is {}x{}, expected {len}x{n_states}",
                self.len(),
                self.n_states()
            )));
        }
        Ok(())
    }
}

/// State labels, 0-based in memory (files use 1-based levels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    labels: Vec<usize>,
}

impl LabelSequence {
    pub fn new(labels: Vec<usize>, n_states: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidLabels("empty label sequence".into()));
        }
        if let Some(t) = labels.iter().position(|&l| l >= n_states) {
            return Err(Error::InvalidLabels(format!(
                "label {} at t = {t} outside 0..{n_states}",
                labels[t]
            )));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().cloned().max().unwrap_or(0)
    }
}

/// All-ones weights: no knowledge about the states.
pub fn vacuous(len: usize, n_states: usize) -> Result<SoftPrior> {
    if len == 0 || n_states == 0 {
        return Err(Error::InvalidPrior(format!(
            "vacuous prior needs T, K >= 1 (got {len}, {n_states})"
        )));
    }
    Ok(SoftPrior {
        weights: DMatrix::from_element(len, n_states, 1.0),
    })
}

/// One-hot rows: the supervised case.
pub fn from_labels(labels: &LabelSequence, n_states: usize) -> Result<SoftPrior> {
    let labels = LabelSequence::new(labels.labels.clone(), n_states)?;
    Ok(SoftPrior {
        weights: DMatrix::from_fn(
            labels.len(),
            n_states,
            |t, i| {
                if labels.labels[t] == i {
                    1.0
                } else {
                    0.0
                }
            },
        ),
    })
}

/// Noisy prior governed by `rho ∈ [0, 1]`.
///
/// For each step a corruption level `p_t ~ U[0, rho]` is drawn. With
/// probability `p_t` the label is replaced by a different state drawn
/// uniformly. The (possibly corrupted) label gets weight 1 and every other
/// state gets `p_t`. `rho = 0` reproduces [`from_labels`].
pub fn sample_noisy(labels: &LabelSequence, n_states: usize, rho: f64, seed: u64) -> Result<SoftPrior> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidPrior(format!("rho = {rho} outside [0, 1]")));
    }
    let labels = LabelSequence::new(labels.labels.clone(), n_states)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::zeros(labels.len(), n_states);
    for (t, &label) in labels.labels.iter().enumerate() {
        let p = rng.random::<f64>() * rho;
        let flip = rng.random::<f64>() < p;
        let label = if flip && n_states > 1 {
            let other = rng.random_range(0..n_states - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        } else {
            label
        };
        for i in 0..n_states {
            w[(t, i)] = if i == label { 1.0 } else { p };
        }
    }
    Ok(SoftPrior { weights: w })
}
