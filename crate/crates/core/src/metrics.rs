//! Scoring of RUL estimates.
//!
//! With `d = estimate - truth`, the timeliness penalty is `exp(-d/13) - 1`
//! for early predictions and `exp(d/10) - 1` for late ones, so a late
//! prediction costs more than an early one of the same size. A prediction
//! counts as accurate when `d ∈ [-13, 10]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARLY_SCALE: f64 = 13.0;
pub const LATE_SCALE: f64 = 10.0;

/// Asymmetric exponential penalty of a RUL error `d = estimate - truth`.
pub fn timeliness(d: f64) -> f64 {
    if d < 0.0 {
        (-d / EARLY_SCALE).exp() - 1.0
    } else {
        (d / LATE_SCALE).exp() - 1.0
    }
}

/// `100 · |estimate - truth| / truth`.
pub fn percentage_error(true_rul: f64, rul_hat: f64) -> Result<f64> {
    if !(true_rul > 0.0) {
        return Err(Error::Contract(format!(
            "percentage error needs a positive true RUL, got {true_rul}"
        )));
    }
    Ok(100.0 * (rul_hat - true_rul).abs() / true_rul)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub true_rul: f64,
    pub rul_hat: f64,
    pub d: f64,
    pub s: f64,
    pub pct_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_instance: Vec<InstanceScore>,
    pub total_s: f64,
    /// Mean percentage error, in percent.
    pub mape: f64,
    /// Fraction of predictions with `d` in `[-13, 10]`.
    pub accuracy: f64,
    /// Early predictions among those outside the interval (0 when there are
    /// no misses).
    pub fpr_early: f64,
}

/// Scores a set of `(id, true RUL, estimated RUL)` triples.
pub fn score_set<S: AsRef<str>>(pairs: &[(S, f64, f64)]) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot score an empty prediction set".into()));
    }
    let mut per_instance = Vec::with_capacity(pairs.len());
    for (id, truth, hat) in pairs {
        let d = hat - truth;
        per_instance.push(InstanceScore {
            id: id.as_ref().to_string(),
            true_rul: *truth,
            rul_hat: *hat,
            d,
            s: timeliness(d),
            pct_err: percentage_error(*truth, *hat)?,
        });
    }
    let n = per_instance.len() as f64;
    let hits = per_instance
        .iter()
        .filter(|r| (-EARLY_SCALE..=LATE_SCALE).contains(&r.d))
        .count();
    let misses: Vec<&InstanceScore> = per_instance
        .iter()
        .filter(|r| !(-EARLY_SCALE..=LATE_SCALE).contains(&r.d))
        .collect();
    let early = misses.iter().filter(|r| r.d < 0.0).count();
    Ok(ScoreReport {
        total_s: per_instance.iter().map(|r| r.s).sum(),
        mape: per_instance.iter().map(|r| r.pct_err).sum::<f64>() / n,
        accuracy: hits as f64 / n,
        fpr_early: if misses.is_empty() {
            0.0
        } else {
            early as f64 / misses.len() as f64
        },
        per_instance,
    })
}
