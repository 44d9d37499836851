//! Autoregressive partially-hidden Markov models.
//!
//! A switching autoregressive HMM whose hidden states may be partially
//! known through per-step soft priors. The crate covers exact inference
//! (scaled forward-backward and Viterbi), EM learning from multiple
//! sequences, a model library for remaining-useful-life prognostics and
//! the usual timeliness scores.
//!
//! ```
//! use arphmm::{fit, priors, ArphmmParams, FitConfig};
//!
//! let truth = ArphmmParams::identity(2, 1, 1);
//! let (series, _states) = truth.sample(200, 7).unwrap();
//! let vacuous = priors::vacuous(series.len(), 2).unwrap();
//! let config = FitConfig { restarts: 1, ..FitConfig::default() };
//! let (model, report) = fit(&[series], Some(&[vacuous]), 2, 1, &config).unwrap();
//! assert_eq!(model.n_states, 2);
//! assert!(report.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-6));
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod io;
pub mod lattice;
mod linalg;
pub mod metrics;
pub mod model;
pub mod priors;
pub mod prognostics;
pub mod synth;

pub use em::{fit, FitConfig, FitReport, InitStrategy};
pub use error::{Error, Result};
pub use lattice::{backward, forward, posteriors, viterbi, Forward, LatticeResult};
pub use metrics::{percentage_error, score_set, timeliness, ScoreReport};
pub use model::{ArphmmParams, TimeSeries, Violation};
pub use priors::{LabelSequence, SoftPrior};
pub use prognostics::{
    build_library, estimate_rul_direct, estimate_rul_fusion, predict_direct, select_models, ModelLibrary, RulEstimate,
    RulImputation, TestPrior,
};

// The guide's code listings run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/priors.md")]
    mod priors {}
    #[doc = include_str!("../../../book/src/prognostics.md")]
    mod prognostics {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
