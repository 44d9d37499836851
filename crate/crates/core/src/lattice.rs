//! Prior-weighted forward/backward recursions, state posteriors and Viterbi
//! decoding.
//!
//! The prior enters every step multiplicatively next to the emission:
//!
//! ```text
//! α_1(i) = π_i w_1(i) b_i(x_1)
//! α_t(j) = b_j(x_t) w_t(j) Σ_i α_{t-1}(i) a_ij
//! L(λ; X, W) = Σ_i α_T(i)
//! ```
//!
//! Recursions are scaled per step: `c_t` is the mass of the unnormalized
//! `α_t` and the rows of `alpha_hat` sum to one. Scaling factors are kept in
//! log form (`log_scale[t] = log c_t`) because emission densities of nearly
//! deterministic channels overflow in linear space.
//!
//! The `*_emissions` variants take a precomputed `T × K` table of emission
//! log-densities, which lets callers plug in reduced emission models.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ArphmmParams, TimeSeries};
use crate::priors::SoftPrior;

/// Output of the scaled forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub alpha_hat: DMatrix<f64>,
    pub log_scale: Vec<f64>,
    pub loglik: f64,
}

/// Posteriors and scaled recursions for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeResult {
    pub alpha_hat: DMatrix<f64>,
    pub beta_hat: DMatrix<f64>,
    /// `gamma[(t, i)] = p(y_t = i | X, W)`.
    pub gamma: DMatrix<f64>,
    /// `xi[t - 1][(i, j)] = p(y_{t-1} = i, y_t = j | X, W)` for `t ≥ 1`.
    pub xi: Vec<DMatrix<f64>>,
    pub log_scale: Vec<f64>,
    pub loglik: f64,
}

impl LatticeResult {
    pub fn len(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.nrows() == 0
    }

    pub fn n_states(&self) -> usize {
        self.gamma.ncols()
    }

    /// Lattice of a known (possibly soft) state assignment: `ξ` is the outer
    /// product of consecutive `γ` rows. Used to seed the M-step.
    pub fn from_gamma(gamma: DMatrix<f64>) -> Self {
        let (t_len, k) = gamma.shape();
        let xi = (1..t_len)
            .map(|t| DMatrix::from_fn(k, k, |i, j| gamma[(t - 1, i)] * gamma[(t, j)]))
            .collect();
        Self {
            alpha_hat: gamma.clone(),
            beta_hat: DMatrix::from_element(t_len, k, 1.0),
            gamma,
            xi,
            log_scale: vec![0.0; t_len],
            loglik: 0.0,
        }
    }
}

fn check_inputs(params: &ArphmmParams, log_b: &DMatrix<f64>, prior: &SoftPrior) -> Result<()> {
    let (t_len, k) = log_b.shape();
    if t_len == 0 {
        return Err(Error::Contract("empty emission table".into()));
    }
    if k != params.n_states {
        return Err(Error::Dimension(format!(
            "emission table has {k} states, model has {}",
            params.n_states
        )));
    }
    prior.check_shape(t_len, k)
}

/// Scaled forward pass over a precomputed emission table.
pub fn forward_emissions(params: &ArphmmParams, log_b: &DMatrix<f64>, prior: &SoftPrior) -> Result<Forward> {
    check_inputs(params, log_b, prior)?;
    let (t_len, k) = log_b.shape();
    let w = prior.weights();
    let mut alpha_hat = DMatrix::zeros(t_len, k);
    let mut log_scale = Vec::with_capacity(t_len);
    let mut pred = DVector::zeros(k);
    for t in 0..t_len {
        for j in 0..k {
            let incoming = if t == 0 {
                params.pi[j]
            } else {
                (0..k).map(|i| alpha_hat[(t - 1, i)] * params.trans[(i, j)]).sum()
            };
            pred[j] = w[(t, j)] * incoming;
        }
        // shift by the largest emission among states that can carry mass
        let shift = (0..k)
            .filter(|&j| pred[j] > 0.0)
            .map(|j| log_b[(t, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::InconsistentPrior { t: t + 1 });
        }
        let mut mass = 0.0;
        for j in 0..k {
            let v = if pred[j] > 0.0 {
                pred[j] * (log_b[(t, j)] - shift).exp()
            } else {
                0.0
            };
            alpha_hat[(t, j)] = v;
            mass += v;
        }
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InconsistentPrior { t: t + 1 });
        }
        for j in 0..k {
            alpha_hat[(t, j)] /= mass;
        }
        log_scale.push(mass.ln() + shift);
    }
    let loglik = log_scale.iter().sum();
    Ok(Forward {
        alpha_hat,
        log_scale,
        loglik,
    })
}

/// Scaled backward pass using the forward normalizers.
pub fn backward_emissions(
    params: &ArphmmParams,
    log_b: &DMatrix<f64>,
    prior: &SoftPrior,
    log_scale: &[f64],
) -> Result<DMatrix<f64>> {
    check_inputs(params, log_b, prior)?;
    let (t_len, k) = log_b.shape();
    if log_scale.len() != t_len {
        return Err(Error::Contract(format!(
            "scale has {} entries, sequence has {t_len}",
            log_scale.len()
        )));
    }
    let w = prior.weights();
    let mut beta_hat = DMatrix::zeros(t_len, k);
    for i in 0..k {
        beta_hat[(t_len - 1, i)] = 1.0;
    }
    let mut next = DVector::zeros(k);
    for t in (0..t_len - 1).rev() {
        for j in 0..k {
            next[j] = if w[(t + 1, j)] > 0.0 {
                w[(t + 1, j)] * (log_b[(t + 1, j)] - log_scale[t + 1]).exp() * beta_hat[(t + 1, j)]
            } else {
                0.0
            };
        }
        for i in 0..k {
            beta_hat[(t, i)] = (0..k)
                .filter(|&j| params.trans[(i, j)] > 0.0)
                .map(|j| params.trans[(i, j)] * next[j])
                .sum();
        }
    }
    Ok(beta_hat)
}

/// Forward, backward, `γ` and `ξ` over a precomputed emission table.
pub fn posteriors_emissions(params: &ArphmmParams, log_b: &DMatrix<f64>, prior: &SoftPrior) -> Result<LatticeResult> {
    let fwd = forward_emissions(params, log_b, prior)?;
    let beta_hat = backward_emissions(params, log_b, prior, &fwd.log_scale)?;
    let (t_len, k) = log_b.shape();
    let w = prior.weights();

    // unreachable states may carry an unbounded beta; their gamma is zero
    let mut gamma = fwd
        .alpha_hat
        .zip_map(&beta_hat, |a, b| if a == 0.0 { 0.0 } else { a * b });
    for t in 0..t_len {
        let s: f64 = gamma.row(t).sum();
        if s > 0.0 {
            for i in 0..k {
                gamma[(t, i)] /= s;
            }
        }
    }

    let mut xi = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 1..t_len {
        let mut m = DMatrix::zeros(k, k);
        let mut total = 0.0;
        for j in 0..k {
            if w[(t, j)] <= 0.0 {
                continue;
            }
            let right = w[(t, j)] * (log_b[(t, j)] - fwd.log_scale[t]).exp() * beta_hat[(t, j)];
            for i in 0..k {
                let a = fwd.alpha_hat[(t - 1, i)] * params.trans[(i, j)];
                if a == 0.0 {
                    continue;
                }
                let v = a * right;
                m[(i, j)] = v;
                total += v;
            }
        }
        if total > 0.0 {
            m /= total;
        }
        xi.push(m);
    }

    Ok(LatticeResult {
        alpha_hat: fwd.alpha_hat,
        beta_hat,
        gamma,
        xi,
        log_scale: fwd.log_scale,
        loglik: fwd.loglik,
    })
}

/// Most likely state path under the weighted complete-data likelihood.
/// Ties go to the lowest state index.
pub fn viterbi_emissions(params: &ArphmmParams, log_b: &DMatrix<f64>, prior: &SoftPrior) -> Result<(Vec<usize>, f64)> {
    check_inputs(params, log_b, prior)?;
    let (t_len, k) = log_b.shape();
    let w = prior.weights();
    let log_a = params.trans.map(f64::ln);
    let mut score = DVector::from_fn(k, |j, _| params.pi[j].ln() + w[(0, j)].ln() + log_b[(0, j)]);
    if score.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::InconsistentPrior { t: 1 });
    }
    let mut back = vec![vec![0usize; k]; t_len];
    let mut next = DVector::zeros(k);
    for t in 1..t_len {
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..k {
                let v = score[i] + log_a[(i, j)];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            back[t][j] = arg;
            next[j] = best + w[(t, j)].ln() + log_b[(t, j)];
        }
        std::mem::swap(&mut score, &mut next);
        if score.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::InconsistentPrior { t: t + 1 });
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (j, &v) in score.iter().enumerate() {
        if v > best {
            best = v;
            last = j;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok((path, best))
}

/// Scaled forward pass: `alpha_hat`, `log c_t` and `log L(λ; X, W)`.
pub fn forward(params: &ArphmmParams, series: &TimeSeries, prior: &SoftPrior) -> Result<Forward> {
    forward_emissions(params, &params.log_emissions(series)?, prior)
}

/// Scaled backward pass given the forward log-normalizers.
pub fn backward(
    params: &ArphmmParams,
    series: &TimeSeries,
    prior: &SoftPrior,
    log_scale: &[f64],
) -> Result<DMatrix<f64>> {
    backward_emissions(params, &params.log_emissions(series)?, prior, log_scale)
}

pub fn posteriors(params: &ArphmmParams, series: &TimeSeries, prior: &SoftPrior) -> Result<LatticeResult> {
    posteriors_emissions(params, &params.log_emissions(series)?, prior)
}

pub fn viterbi(params: &ArphmmParams, series: &TimeSeries, prior: &SoftPrior) -> Result<(Vec<usize>, f64)> {
    viterbi_emissions(params, &params.log_emissions(series)?, prior)
}
