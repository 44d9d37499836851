//! Parameter and data types of the switching autoregressive model, and the
//! state-conditional emission density.
//!
//! An observation follows
//!
//! ```text
//! x_t = -Σ_{δ=1..Δ} r_δ(y_t) x_{t-δ} + ε_t,   ε_t ~ N(0, Σ_{y_t})
//! ```
//!
//! so the residual `e_t = x_t + B_i u_{t-1}` is Gaussian with covariance
//! `Σ_i`, where `B_i = (r_1(i) | … | r_Δ(i))` is `D × DΔ` and
//! `u_{t-1} = (x_{t-1}, …, x_{t-Δ})` stacks the lagged observations.
//! Observations before the first sample are taken to be zero.
//!
//! All indices in this API (time steps and states) are 0-based.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, GaussianFactor};

/// Tolerance for the stochasticity and symmetry checks.
pub const PROB_TOL: f64 = 1e-10;

/// A length-`T` sequence of `D`-dimensional observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    id: String,
    values: Vec<DVector<f64>>,
    rul: Option<Vec<f64>>,
}

impl TimeSeries {
    /// Builds a series from row-major observations. A RUL channel, when
    /// given, must decrease by exactly one cycle per step.
    pub fn new(id: impl Into<String>, rows: Vec<Vec<f64>>, rul: Option<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        if rows.is_empty() {
            return Err(Error::InvalidSeries(format!("{id}: series is empty")));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::InvalidSeries(format!("{id}: zero-dimensional observations")));
        }
        let mut values = Vec::with_capacity(rows.len());
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidSeries(format!(
                    "{id}: row {t} has {} values, expected {dim}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidSeries(format!("{id}: non-finite value {v} at t = {t}")));
            }
            values.push(DVector::from_vec(row));
        }
        if let Some(r) = &rul {
            check_rul(&id, r, values.len())?;
        }
        Ok(Self { id, values, rul })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn get(&self, t: usize) -> &DVector<f64> {
        &self.values[t]
    }

    pub fn rul(&self) -> Option<&[f64]> {
        self.rul.as_deref()
    }

    /// Lifetime `L` such that `rul[t] = L - (t + 1)`, i.e. the failure cycle
    /// on a 1-based clock.
    pub fn lifetime(&self) -> Option<f64> {
        self.rul.as_ref().map(|r| r[0] + 1.0)
    }

    /// The first `len` steps (RUL channel included).
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len() {
            return Err(Error::Index(format!("prefix length {len} outside 1..={}", self.len())));
        }
        Ok(Self {
            id: self.id.clone(),
            values: self.values[..len].to_vec(),
            rul: self.rul.as_ref().map(|r| r[..len].to_vec()),
        })
    }

    /// Appends the RUL channel as the last observation component.
    pub fn with_rul_channel(&self) -> Result<Self> {
        let rul = self
            .rul
            .as_ref()
            .ok_or_else(|| Error::InvalidSeries(format!("{}: no RUL channel", self.id)))?;
        let values = self
            .values
            .iter()
            .zip(rul)
            .map(|(x, &r)| {
                let mut v = DVector::zeros(x.len() + 1);
                v.rows_mut(0, x.len()).copy_from(x);
                v[x.len()] = r;
                v
            })
            .collect();
        Ok(Self {
            id: self.id.clone(),
            values,
            rul: self.rul.clone(),
        })
    }

    /// Drops the RUL channel metadata, keeping the observations.
    pub fn without_rul(&self) -> Self {
        Self {
            id: self.id.clone(),
            values: self.values.clone(),
            rul: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Stacked lag vector `u_{t-1} = (x_{t-1}, …, x_{t-order})`, zero-padded
    /// before the first sample.
    pub fn lag_vector(&self, t: usize, order: usize) -> DVector<f64> {
        let d = self.dim();
        let mut u = DVector::zeros(d * order);
        for lag in 1..=order.min(t) {
            u.rows_mut((lag - 1) * d, d).copy_from(&self.values[t - lag]);
        }
        u
    }
}

fn check_rul(id: &str, rul: &[f64], len: usize) -> Result<()> {
    if rul.len() != len {
        return Err(Error::InvalidSeries(format!(
            "{id}: RUL channel has {} entries, expected {len}",
            rul.len()
        )));
    }
    if let Some(v) = rul.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidSeries(format!("{id}: non-finite RUL {v}")));
    }
    for t in 1..rul.len() {
        if ((rul[t - 1] - rul[t]) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSeries(format!(
                "{id}: RUL must decrease by one cycle per step (t = {t})"
            )));
        }
    }
    Ok(())
}

/// Full parameter set `(A, Π, {B_i}, {Σ_i})` for `K` states.
#[derive(Debug, Clone, PartialEq)]
pub struct ArphmmParams {
    pub n_states: usize,
    pub dim: usize,
    pub order: usize,
    /// Initial state distribution.
    pub pi: DVector<f64>,
    /// `trans[(i, j)] = p(y_t = j | y_{t-1} = i)`.
    pub trans: DMatrix<f64>,
    /// Per state, the `D × DΔ` stacked coefficients `(r_1 | … | r_Δ)`.
    pub ar: Vec<DMatrix<f64>>,
    /// Per state noise covariance.
    pub sigma: Vec<DMatrix<f64>>,
}

/// One broken invariant reported by [`ArphmmParams::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    NonFinite(String),
    PiNegative { index: usize, value: f64 },
    PiSum { sum: f64 },
    TransNegative { row: usize, col: usize, value: f64 },
    TransRowSum { row: usize, sum: f64 },
    SigmaAsymmetric { state: usize, max_diff: f64 },
    SigmaNotPositiveDefinite { state: usize, min_eigenvalue: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(s) => write!(f, "shape: {s}"),
            Violation::NonFinite(s) => write!(f, "non-finite entry in {s}"),
            Violation::PiNegative { index, value } => write!(f, "pi[{index}] = {value} < 0"),
            Violation::PiSum { sum } => write!(f, "pi sums to {sum}"),
            Violation::TransNegative { row, col, value } => {
                write!(f, "trans[{row}][{col}] = {value} < 0")
            }
            Violation::TransRowSum { row, sum } => write!(f, "trans row {row} sums to {sum}"),
            Violation::SigmaAsymmetric { state, max_diff } => {
                write!(f, "sigma[{state}] asymmetric by {max_diff}")
            }
            Violation::SigmaNotPositiveDefinite { state, min_eigenvalue } => write!(
                f,
                "sigma[{state}] not positive definite (smallest eigenvalue {min_eigenvalue})"
            ),
        }
    }
}

impl ArphmmParams {
    /// Model with uniform chain, zero AR coefficients and identity noise.
    pub fn identity(n_states: usize, dim: usize, order: usize) -> Self {
        Self {
            n_states,
            dim,
            order,
            pi: DVector::from_element(n_states, 1.0 / n_states as f64),
            trans: DMatrix::from_element(n_states, n_states, 1.0 / n_states as f64),
            ar: vec![DMatrix::zeros(dim, dim * order); n_states],
            sigma: vec![DMatrix::identity(dim, dim); n_states],
        }
    }

    /// The `D × D` coefficient matrix `r_lag(state)`, `lag` in `1..=order`.
    pub fn lag_matrix(&self, state: usize, lag: usize) -> DMatrix<f64> {
        self.ar[state].columns((lag - 1) * self.dim, self.dim).into_owned()
    }

    pub fn set_lag_matrix(&mut self, state: usize, lag: usize, r: &DMatrix<f64>) {
        let d = self.dim;
        self.ar[state].columns_mut((lag - 1) * d, d).copy_from(r);
    }

    /// Every invariant violation, requiring covariances to be strictly
    /// positive definite.
    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with_floor(0.0)
    }

    /// Like [`validate`](Self::validate), with covariance eigenvalues required
    /// to be at least `floor` (strictly positive when `floor` is zero).
    pub fn validate_with_floor(&self, floor: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        let (k, d, p) = (self.n_states, self.dim, self.order);
        if k == 0 || d == 0 {
            out.push(Violation::Shape(format!("K = {k}, D = {d}")));
            return out;
        }
        if self.pi.len() != k {
            out.push(Violation::Shape(format!("pi has length {}", self.pi.len())));
        }
        if self.trans.shape() != (k, k) {
            out.push(Violation::Shape(format!("trans is {:?}", self.trans.shape())));
        }
        if self.ar.len() != k || self.ar.iter().any(|b| b.shape() != (d, d * p)) {
            out.push(Violation::Shape("AR coefficients do not match K, D, delta".into()));
        }
        if self.sigma.len() != k || self.sigma.iter().any(|s| s.shape() != (d, d)) {
            out.push(Violation::Shape("covariances do not match K, D".into()));
        }
        if !out.is_empty() {
            return out;
        }
        if self.pi.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite("pi".into()));
        }
        if self.trans.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite("trans".into()));
        }
        for (i, b) in self.ar.iter().enumerate() {
            if b.iter().any(|v| !v.is_finite()) {
                out.push(Violation::NonFinite(format!("ar[{i}]")));
            }
        }
        for (i, &v) in self.pi.iter().enumerate() {
            if v < 0.0 {
                out.push(Violation::PiNegative { index: i, value: v });
            }
        }
        let s = self.pi.sum();
        if (s - 1.0).abs() > PROB_TOL {
            out.push(Violation::PiSum { sum: s });
        }
        for r in 0..k {
            for c in 0..k {
                let v = self.trans[(r, c)];
                if v < 0.0 {
                    out.push(Violation::TransNegative {
                        row: r,
                        col: c,
                        value: v,
                    });
                }
            }
            let s = self.trans.row(r).sum();
            if (s - 1.0).abs() > PROB_TOL {
                out.push(Violation::TransRowSum { row: r, sum: s });
            }
        }
        for (i, sig) in self.sigma.iter().enumerate() {
            if sig.iter().any(|v| !v.is_finite()) {
                out.push(Violation::NonFinite(format!("sigma[{i}]")));
                continue;
            }
            let diff = (sig - sig.transpose()).amax();
            if diff > PROB_TOL {
                out.push(Violation::SigmaAsymmetric {
                    state: i,
                    max_diff: diff,
                });
            }
            let sym = (sig + sig.transpose()) * 0.5;
            let m = min_eigenvalue(&sym);
            if m < floor || m <= 0.0 {
                out.push(Violation::SigmaNotPositiveDefinite {
                    state: i,
                    min_eigenvalue: m,
                });
            }
        }
        out
    }

    fn check_index(&self, series: &TimeSeries, state: usize, t: usize) -> Result<()> {
        if state >= self.n_states {
            return Err(Error::Index(format!("state {state} outside 0..{}", self.n_states)));
        }
        if t >= series.len() {
            return Err(Error::Index(format!("t = {t} outside 0..{}", series.len())));
        }
        if series.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "series has D = {}, model has D = {}",
                series.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `e_t = x_t + Σ_δ r_δ(state) x_{t-δ}`.
    pub fn ar_residual(&self, series: &TimeSeries, state: usize, t: usize) -> Result<DVector<f64>> {
        self.check_index(series, state, t)?;
        Ok(self.residual_unchecked(series, state, t))
    }

    pub(crate) fn residual_unchecked(&self, series: &TimeSeries, state: usize, t: usize) -> DVector<f64> {
        let x = series.get(t);
        if self.order == 0 {
            return x.clone();
        }
        let u = series.lag_vector(t, self.order);
        x + &self.ar[state] * u
    }

    /// `log b_state(x_t) = log N(e_t | 0, Σ_state)`.
    pub fn emission_logdensity(&self, series: &TimeSeries, state: usize, t: usize) -> Result<f64> {
        self.check_index(series, state, t)?;
        let f = factor(&self.sigma[state], state)?;
        Ok(f.log_density(&self.residual_unchecked(series, state, t)))
    }

    /// `T × K` table of emission log-densities.
    pub fn log_emissions(&self, series: &TimeSeries) -> Result<DMatrix<f64>> {
        if series.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "series {} has D = {}, model has D = {}",
                series.id(),
                series.dim(),
                self.dim
            )));
        }
        let factors = self.factors()?;
        let mut out = DMatrix::zeros(series.len(), self.n_states);
        for t in 0..series.len() {
            let x = series.get(t);
            let u = series.lag_vector(t, self.order);
            for (i, f) in factors.iter().enumerate() {
                let e = if self.order == 0 {
                    x.clone()
                } else {
                    x + &self.ar[i] * &u
                };
                out[(t, i)] = f.log_density(&e);
            }
        }
        Ok(out)
    }

    pub(crate) fn factors(&self) -> Result<Vec<GaussianFactor>> {
        self.sigma.iter().enumerate().map(|(i, s)| factor(s, i)).collect()
    }

    /// Draws a series of length `len` and its state path. Deterministic for
    /// a given seed. Unstable AR dynamics are not detected.
    pub fn sample(&self, len: usize, seed: u64) -> Result<(TimeSeries, Vec<usize>)> {
        if len == 0 {
            return Err(Error::Contract("sample length must be at least 1".into()));
        }
        let violations = self.validate();
        if !violations.is_empty() {
            return Err(Error::InvalidModel(join_violations(&violations)));
        }
        let chols: Vec<DMatrix<f64>> = self.factors()?.iter().map(|f| f.l()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim;
        let mut path = Vec::with_capacity(len);
        let mut xs: Vec<DVector<f64>> = Vec::with_capacity(len);
        let mut state = draw_categorical(&mut rng, self.pi.iter().cloned());
        for t in 0..len {
            if t > 0 {
                state = draw_categorical(&mut rng, self.trans.row(state).iter().cloned());
            }
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let mut x = &chols[state] * z;
            for lag in 1..=self.order.min(t) {
                x -= self.lag_matrix(state, lag) * &xs[t - lag];
            }
            path.push(state);
            xs.push(x);
        }
        let rows = xs.into_iter().map(|v| v.iter().cloned().collect()).collect();
        Ok((TimeSeries::new("sample", rows, None)?, path))
    }
}

fn factor(sigma: &DMatrix<f64>, state: usize) -> Result<GaussianFactor> {
    GaussianFactor::new(sigma).ok_or_else(|| Error::InvalidModel(format!("sigma[{state}] is not positive definite")))
}

pub(crate) fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

pub(crate) fn draw_categorical<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let probs: Vec<f64> = probs.collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    // rounding fallthrough: last state with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
