//! Health assessment and remaining-useful-life estimation from a library of
//! per-instance models.
//!
//! Every run-to-failure training instance gets its own model, learned on the
//! health indicators augmented with the RUL as an extra output channel. A
//! test sequence only carries the health indicators, so library models are
//! scored with a reduced emission: the marginal Gaussian of the
//! health-indicator block of the residual, with the lagged RUL regressors
//! imputed as the ramp `L_ref - t`. `L_ref` is the entry's own lifetime by
//! default, which makes each score a test of the hypothesis "this unit
//! degrades like instance j".
//!
//! RUL estimates come from fusing the candidate RULs `L_j - T_test` of the
//! likeliest entries, or from running the RUL row of one model forward in
//! time along its decoded state path.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit, FitConfig, FitReport};
use crate::error::{Error, Result};
use crate::lattice::{forward_emissions, posteriors_emissions, viterbi_emissions};
use crate::linalg::GaussianFactor;
use crate::model::{ArphmmParams, TimeSeries};
use crate::priors::{vacuous, SoftPrior};

/// How lagged RUL regressors are filled in when scoring a test sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RulImputation {
    /// `L_j - t` with the lifetime of the scored entry.
    #[default]
    EntryLifetime,
    /// `L̄ - t` with the mean lifetime of the library.
    MeanLifetime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub id: String,
    /// Model over `[health indicators, RUL]`.
    pub params: ArphmmParams,
    /// Prior used for training, reused on test prefixes.
    pub prior: SoftPrior,
    /// Failure cycle of the training instance.
    pub lifetime: f64,
    /// Training sequence (health indicators, RUL as metadata).
    pub series: TimeSeries,
    pub report: Option<FitReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLibrary {
    entries: Vec<LibraryEntry>,
    /// Instances whose fit failed, with the error message.
    pub failures: Vec<(String, String)>,
    pub imputation: RulImputation,
}

impl ModelLibrary {
    pub fn new(entries: Vec<LibraryEntry>) -> Result<Self> {
        if let Some(first) = entries.first() {
            let (d, p) = (first.params.dim, first.params.order);
            if d < 2 {
                return Err(Error::InvalidModel(format!(
                    "library models need a RUL channel (D = {d})"
                )));
            }
            for e in &entries {
                if e.params.dim != d || e.params.order != p {
                    return Err(Error::Dimension(format!(
                        "entry {} has D = {}, delta = {}; expected {d}, {p}",
                        e.id, e.params.dim, e.params.order
                    )));
                }
                if !(e.lifetime >= 1.0) {
                    return Err(Error::Contract(format!("entry {} has lifetime {}", e.id, e.lifetime)));
                }
                if e.prior.n_states() != e.params.n_states {
                    return Err(Error::Dimension(format!(
                        "entry {} prior has {} states, model has {}",
                        e.id,
                        e.prior.n_states(),
                        e.params.n_states
                    )));
                }
            }
        }
        Ok(Self {
            entries,
            failures: Vec::new(),
            imputation: RulImputation::default(),
        })
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dimension of the health-indicator block.
    pub fn data_dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.params.dim - 1)
    }

    pub fn mean_lifetime(&self) -> f64 {
        self.entries.iter().map(|e| e.lifetime).sum::<f64>() / self.entries.len().max(1) as f64
    }

    fn lifetime_ref(&self, entry: usize) -> f64 {
        match self.imputation {
            RulImputation::EntryLifetime => self.entries[entry].lifetime,
            RulImputation::MeanLifetime => self.mean_lifetime(),
        }
    }

    fn entry(&self, entry: usize) -> Result<&LibraryEntry> {
        self.entries
            .get(entry)
            .ok_or_else(|| Error::Index(format!("entry {entry} outside 0..{}", self.len())))
    }
}

/// Which prior to use on a test sequence.
#[derive(Debug, Clone, Copy)]
pub enum TestPrior<'a> {
    /// The first `T_test` rows of each entry's training prior (vacuous past
    /// its end).
    Training,
    External(&'a SoftPrior),
    Vacuous,
}

impl TestPrior<'_> {
    fn resolve(&self, entry: &LibraryEntry, len: usize) -> Result<SoftPrior> {
        match self {
            TestPrior::Training => Ok(entry.prior.prefix_or_pad(len)),
            TestPrior::External(p) => Ok((*p).clone()),
            TestPrior::Vacuous => vacuous(len, entry.params.n_states),
        }
    }
}

/// Fits one model per run-to-failure instance on `[health indicators, RUL]`.
///
/// Instances are fitted in parallel with the same configuration (and seed).
/// Failed fits are recorded in [`ModelLibrary::failures`]; an error is
/// returned only when no instance could be fitted.
pub fn build_library(
    series: &[TimeSeries],
    priors: Option<&[SoftPrior]>,
    n_states: usize,
    order: usize,
    config: &FitConfig,
) -> Result<ModelLibrary> {
    if let Some(p) = priors {
        if p.len() != series.len() {
            return Err(Error::Contract(format!(
                "{} training sequences but {} priors",
                series.len(),
                p.len()
            )));
        }
    }
    let results: Vec<Result<LibraryEntry>> = series
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let prior = match priors {
                Some(p) => p[i].clone(),
                None => vacuous(s.len(), n_states)?,
            };
            let lifetime = s
                .lifetime()
                .ok_or_else(|| Error::InvalidSeries(format!("{}: training sequence has no RUL channel", s.id())))?;
            let augmented = s.with_rul_channel()?;
            let (params, report) = fit(
                std::slice::from_ref(&augmented),
                Some(std::slice::from_ref(&prior)),
                n_states,
                order,
                config,
            )?;
            Ok(LibraryEntry {
                id: s.id().to_string(),
                params,
                prior,
                lifetime,
                series: s.clone(),
                report: Some(report),
            })
        })
        .collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in series.iter().zip(results) {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => {
                log::warn!("fit failed for {}: {e}", s.id());
                failures.push((s.id().to_string(), e.to_string()));
            }
        }
    }
    if entries.is_empty() {
        let detail = failures
            .first()
            .map(|(id, e)| format!("{id}: {e}"))
            .unwrap_or_else(|| "no training sequences".into());
        return Err(Error::Infeasible(format!(
            "no library entry could be fitted ({detail})"
        )));
    }
    let mut lib = ModelLibrary::new(entries)?;
    lib.failures = failures;
    Ok(lib)
}

/// Augments `test` with the imputed RUL ramp `lifetime_ref - t`.
fn impute_rul(test: &TimeSeries, lifetime_ref: f64) -> Result<TimeSeries> {
    let rows = test
        .values()
        .iter()
        .enumerate()
        .map(|(t, x)| {
            let mut r: Vec<f64> = x.iter().cloned().collect();
            r.push(lifetime_ref - (t + 1) as f64);
            r
        })
        .collect();
    TimeSeries::new(test.id(), rows, None)
}

/// Emission log-densities of the health-indicator block only, with lagged
/// RUL regressors imputed from `lifetime_ref`.
pub fn reduced_log_emissions(params: &ArphmmParams, test: &TimeSeries, lifetime_ref: f64) -> Result<DMatrix<f64>> {
    let hd = params
        .dim
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::InvalidModel("reduced emission needs a model with a RUL channel".into()))?;
    if test.dim() != hd {
        return Err(Error::Dimension(format!(
            "test sequence {} has D = {}, library expects {hd}",
            test.id(),
            test.dim()
        )));
    }
    let z = impute_rul(test, lifetime_ref)?;
    let factors: Vec<GaussianFactor> = params
        .sigma
        .iter()
        .enumerate()
        .map(|(i, s)| {
            GaussianFactor::new(&s.view((0, 0), (hd, hd)).into_owned()).ok_or_else(|| {
                Error::InvalidModel(format!("health-indicator block of sigma[{i}] is not positive definite"))
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<DMatrix<f64>> = params.ar.iter().map(|b| b.rows(0, hd).into_owned()).collect();
    let mut out = DMatrix::zeros(test.len(), params.n_states);
    for t in 0..test.len() {
        let h = test.get(t);
        let u = z.lag_vector(t, params.order);
        for (i, f) in factors.iter().enumerate() {
            let e: DVector<f64> = if params.order == 0 {
                h.clone()
            } else {
                h + &rows[i] * &u
            };
            out[(t, i)] = f.log_density(&e);
        }
    }
    Ok(out)
}

/// Decoded state path and smoothed posteriors of a test sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HealthAssessment {
    pub path: Vec<usize>,
    pub path_score: f64,
    pub gamma: DMatrix<f64>,
    pub loglik: f64,
}

/// Health state of `test` under one library entry. Without a prior the
/// weights are all ones.
pub fn health_state(
    library: &ModelLibrary,
    entry: usize,
    test: &TimeSeries,
    prior: Option<&SoftPrior>,
) -> Result<HealthAssessment> {
    let e = library.entry(entry)?;
    let log_b = reduced_log_emissions(&e.params, test, library.lifetime_ref(entry))?;
    let prior = match prior {
        Some(p) => p.clone(),
        None => vacuous(test.len(), e.params.n_states)?,
    };
    let (path, path_score) = viterbi_emissions(&e.params, &log_b, &prior)?;
    let lat = posteriors_emissions(&e.params, &log_b, &prior)?;
    Ok(HealthAssessment {
        path,
        path_score,
        gamma: lat.gamma,
        loglik: lat.loglik,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub index: usize,
    pub id: String,
    /// Log-likelihood per time step (`-inf` when the prior is inconsistent).
    pub score: f64,
    pub loglik: f64,
    /// `max(L_j - T_test, 0)`.
    pub candidate_rul: f64,
}

/// Library entries ranked by length-normalized log-likelihood of `test`,
/// best first, ties broken by instance id. Returns at most `top_k` entries.
pub fn select_models(
    library: &ModelLibrary,
    test: &TimeSeries,
    prior: TestPrior<'_>,
    top_k: usize,
) -> Result<Vec<ModelScore>> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let t_len = test.len() as f64;
    let mut scores: Vec<ModelScore> = library
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let log_b = reduced_log_emissions(&e.params, test, library.lifetime_ref(i))?;
            let w = prior.resolve(e, test.len())?;
            let loglik = match forward_emissions(&e.params, &log_b, &w) {
                Ok(f) => f.loglik,
                Err(Error::InconsistentPrior { .. }) => f64::NEG_INFINITY,
                Err(err) => return Err(err),
            };
            Ok(ModelScore {
                index: i,
                id: e.id.clone(),
                score: loglik / t_len,
                loglik,
                candidate_rul: (e.lifetime - t_len).max(0.0),
            })
        })
        .collect::<Result<_>>()?;
    scores.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    scores.truncate(top_k);
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionWeighting {
    /// Plain average of candidate RULs.
    #[default]
    Mean,
    /// Average weighted by the softmax of total log-likelihoods.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RulMethod {
    Fusion,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulEstimate {
    pub rul_hat: f64,
    pub contributors: Vec<ModelScore>,
    pub method: RulMethod,
}

/// Average of the candidate RULs of the `top_k` likeliest entries.
pub fn estimate_rul_fusion(
    library: &ModelLibrary,
    test: &TimeSeries,
    prior: TestPrior<'_>,
    top_k: usize,
) -> Result<RulEstimate> {
    estimate_rul_fusion_weighted(library, test, prior, top_k, FusionWeighting::Mean)
}

pub fn estimate_rul_fusion_weighted(
    library: &ModelLibrary,
    test: &TimeSeries,
    prior: TestPrior<'_>,
    top_k: usize,
    weighting: FusionWeighting,
) -> Result<RulEstimate> {
    let contributors = select_models(library, test, prior, top_k)?;
    let rul_hat = match weighting {
        FusionWeighting::Mean => contributors.iter().map(|c| c.candidate_rul).sum::<f64>() / contributors.len() as f64,
        FusionWeighting::Softmax => {
            let top = contributors[0].loglik;
            if !top.is_finite() {
                contributors.iter().map(|c| c.candidate_rul).sum::<f64>() / contributors.len() as f64
            } else {
                let w: Vec<f64> = contributors.iter().map(|c| (c.loglik - top).exp()).collect();
                let total: f64 = w.iter().sum();
                contributors
                    .iter()
                    .zip(&w)
                    .map(|(c, w)| c.candidate_rul * w)
                    .sum::<f64>()
                    / total
            }
        }
    };
    if rul_hat <= 0.0 {
        log::warn!(
            "{}: every candidate lifetime is already exceeded; RUL estimate is 0",
            test.id()
        );
    }
    Ok(RulEstimate {
        rul_hat: rul_hat.max(0.0),
        contributors,
        method: RulMethod::Fusion,
    })
}

/// Per-step RUL trajectory from the RUL row of one entry's model.
///
/// The first `Δ` steps follow the ramp `seed_rul - t`; afterwards each value
/// is the model's one-step prediction using the observed health indicators
/// and the previously predicted RULs, with the state taken from the decoded
/// path. Values are clamped at zero. A model without lags predicts the
/// noise mean, zero, everywhere.
pub fn estimate_rul_direct(
    library: &ModelLibrary,
    entry: usize,
    test: &TimeSeries,
    prior: TestPrior<'_>,
    seed_rul: f64,
) -> Result<Vec<f64>> {
    let e = library.entry(entry)?;
    let w = prior.resolve(e, test.len())?;
    let log_b = reduced_log_emissions(&e.params, test, library.lifetime_ref(entry))?;
    let (path, _) = viterbi_emissions(&e.params, &log_b, &w)?;
    let p = &e.params;
    let (d, order) = (p.dim, p.order);
    let rul_row = d - 1;
    let mut z: Vec<DVector<f64>> = Vec::with_capacity(test.len());
    let mut out = Vec::with_capacity(test.len());
    for t in 0..test.len() {
        let r = if t < order {
            seed_rul - t as f64
        } else {
            let mut acc = 0.0;
            for lag in 1..=order {
                let coeffs = p.ar[path[t]].view((rul_row, (lag - 1) * d), (1, d));
                acc -= (coeffs * &z[t - lag])[(0, 0)];
            }
            acc
        };
        let mut v = DVector::zeros(d);
        v.rows_mut(0, d - 1).copy_from(test.get(t));
        v[rul_row] = r;
        z.push(v);
        out.push(r.max(0.0));
    }
    Ok(out)
}

/// Direct RUL trajectory from the likeliest entry, seeded at the first step
/// by the fusion estimate carried back to `t = 1`.
pub fn predict_direct(
    library: &ModelLibrary,
    test: &TimeSeries,
    prior: TestPrior<'_>,
    top_k: usize,
) -> Result<(RulEstimate, Vec<f64>)> {
    let fused = estimate_rul_fusion(library, test, prior, top_k)?;
    let best = fused.contributors[0].index;
    let seed = fused.rul_hat + (test.len() - 1) as f64;
    let traj = estimate_rul_direct(library, best, test, prior, seed)?;
    let last = *traj.last().unwrap_or(&0.0);
    Ok((
        RulEstimate {
            rul_hat: last,
            contributors: fused.contributors,
            method: RulMethod::Direct,
        },
        traj,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, lifetime: f64, params: ArphmmParams) -> LibraryEntry {
        let k = params.n_states;
        let s = TimeSeries::new(
            id,
            vec![vec![0.0]; 5],
            Some((0..5).map(|t| lifetime - 1.0 - t as f64).collect()),
        )
        .unwrap();
        LibraryEntry {
            id: id.into(),
            params,
            prior: vacuous(5, k).unwrap(),
            lifetime,
            series: s,
            report: None,
        }
    }

    #[test]
    fn fusion_is_plain_mean() {
        let p = ArphmmParams::identity(1, 2, 0);
        let lib = ModelLibrary::new(vec![entry("a", 212.0, p.clone()), entry("b", 203.0, p)]).unwrap();
        let test = TimeSeries::new("t", vec![vec![0.1]; 100], None).unwrap();
        let est = estimate_rul_fusion(&lib, &test, TestPrior::Vacuous, 2).unwrap();
        assert_eq!(est.rul_hat, 107.5);
        assert_eq!(est.method, RulMethod::Fusion);
        // identical parameters tie; ids decide
        assert_eq!(est.contributors[0].id, "a");
        assert_eq!(est.contributors[1].id, "b");
    }

    #[test]
    fn exhausted_lifetimes_give_zero() {
        let p = ArphmmParams::identity(1, 2, 0);
        let lib = ModelLibrary::new(vec![entry("a", 50.0, p)]).unwrap();
        let test = TimeSeries::new("t", vec![vec![0.1]; 80], None).unwrap();
        let est = estimate_rul_fusion(&lib, &test, TestPrior::Vacuous, 1).unwrap();
        assert_eq!(est.rul_hat, 0.0);
    }

    #[test]
    fn empty_library_and_zero_top_k() {
        let lib = ModelLibrary::new(vec![]).unwrap();
        let test = TimeSeries::new("t", vec![vec![0.1]; 3], None).unwrap();
        assert!(matches!(
            select_models(&lib, &test, TestPrior::Vacuous, 1),
            Err(Error::EmptyLibrary)
        ));
        let lib = ModelLibrary::new(vec![entry("a", 50.0, ArphmmParams::identity(1, 2, 0))]).unwrap();
        assert!(select_models(&lib, &test, TestPrior::Vacuous, 0).is_err());
    }

    #[test]
    fn reduced_emission_is_marginal_of_hi_block() {
        let mut p = ArphmmParams::identity(1, 2, 1);
        p.ar[0] = DMatrix::from_row_slice(2, 2, &[-0.5, 0.01, 0.0, -1.0]);
        p.sigma[0] = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 3.0]);
        let test = TimeSeries::new("t", vec![vec![1.0], vec![0.7]], None).unwrap();
        let lb = reduced_log_emissions(&p, &test, 10.0).unwrap();
        // t = 1: e = 0.7 - 0.5 * 1.0 + 0.01 * (10 - 1)
        let e: f64 = 0.7 - 0.5 + 0.09;
        let want = -0.5 * ((2.0 * std::f64::consts::PI).ln() + 0.5_f64.ln() + e * e / 0.5);
        assert!((lb[(1, 0)] - want).abs() < 1e-12);
        assert!(reduced_log_emissions(&p, &TimeSeries::new("x", vec![vec![0.0, 0.0]], None).unwrap(), 1.0).is_err());
    }

    #[test]
    fn direct_without_lags_is_zero() {
        let p = ArphmmParams::identity(2, 2, 0);
        let lib = ModelLibrary::new(vec![entry("a", 50.0, p)]).unwrap();
        let test = TimeSeries::new("t", vec![vec![0.3]; 10], None).unwrap();
        let traj = estimate_rul_direct(&lib, 0, &test, TestPrior::Vacuous, 40.0).unwrap();
        assert_eq!(traj, vec![0.0; 10]);
    }

    #[test]
    fn mismatched_entries_rejected() {
        let a = entry("a", 50.0, ArphmmParams::identity(1, 2, 1));
        let b = entry("b", 50.0, ArphmmParams::identity(1, 2, 2));
        assert!(ModelLibrary::new(vec![a, b]).is_err());
    }
}
