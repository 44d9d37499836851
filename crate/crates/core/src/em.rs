//! Expectation-maximization with soft state priors.
//!
//! The E-step runs the prior-weighted forward-backward pass, so `γ` and `ξ`
//! are posteriors under `w(y) p(y | X, λ)`. The M-step then maximizes the
//! expected complete-data log-likelihood block by block:
//!
//! * chain: `π_i = γ_1(i)`, `a_ij ∝ Σ_t ξ_{t-1,t}(i, j)`;
//! * AR coefficients: `B_i = -[Σ_t γ_t(i) x_t u_{t-1}ᵀ][Σ_t γ_t(i) u_{t-1} u_{t-1}ᵀ]⁻¹`;
//! * noise: `Σ_i = Σ_t γ_t(i) e_t e_tᵀ / Σ_t γ_t(i)` with residuals under the
//!   new `B_i`.
//!
//! The normalizer `E_λ[w(y)]` of the weighted auxiliary function does not
//! appear in these updates. Several sequences are pooled: sufficient
//! statistics are summed and `π` averages the first posterior rows.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{posteriors, LatticeResult};
use crate::linalg::{solve_normal_right, symmetrize_and_floor};
use crate::model::{ArphmmParams, TimeSeries};
use crate::priors::{vacuous, SoftPrior};

/// Lower bound on covariance eigenvalues when the relative floor vanishes.
pub const ABS_SIGMA_FLOOR: f64 = 1e-12;
/// Posterior mass below which a state is treated as empty.
pub const EMPTY_STATE_MASS: f64 = 1e-10;
/// Reciprocal condition number below which the AR normal equations get a ridge.
pub const NORMAL_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// Contiguous equal-length time segments, one per state.
    Segments,
    /// Posteriors seeded from the normalized prior weights; falls back to
    /// `Segments` when the prior carries no information.
    Prior,
    /// Each state is fitted on a randomly placed window.
    Random,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segments" => Ok(Self::Segments),
            "prior" => Ok(Self::Prior),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown init strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop when `|Δ loglik| / (|loglik| + 1)` drops below this.
    pub tol: f64,
    /// Relative covariance floor. Each `Σ_i` is standardized by the
    /// per-channel standard deviation of the pooled training data and its
    /// eigenvalues are kept at or above this value. See [`CovarianceFloor`].
    pub sigma_floor: f64,
    /// Ridge factor (times the mean diagonal) for singular normal equations.
    pub ridge: f64,
    pub init: InitStrategy,
    pub seed: u64,
    /// Total number of runs; run 0 uses `init`, later runs use `Random`.
    pub restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            sigma_floor: 1e-6,
            ridge: 1e-8,
            init: InitStrategy::Prior,
            seed: 0,
            restarts: 5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if !(self.sigma_floor >= 0.0) || !(self.ridge > 0.0) {
            return Err(Error::Config("sigma_floor must be >= 0 and ridge > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Log-likelihood of the initial parameters followed by one entry per
    /// iteration, for the selected run.
    pub loglik_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub best_restart: usize,
    /// Final log-likelihood of every run (`-inf` for runs that failed).
    pub restart_logliks: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainUpdate {
    pub pi: DVector<f64>,
    pub trans: DMatrix<f64>,
    /// States whose transition row had no mass and was reset to uniform.
    pub empty_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArUpdate {
    pub ar: Vec<DMatrix<f64>>,
    /// States with no posterior mass, fitted on all data instead.
    pub empty: Vec<usize>,
    /// States whose normal equations needed a ridge.
    pub regularized: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaUpdate {
    pub sigma: Vec<DMatrix<f64>>,
    /// States with no posterior mass, reset to the global residual covariance.
    pub empty: Vec<usize>,
    /// States where the eigenvalue floor was active.
    pub floored: Vec<usize>,
}

fn check_aligned(series: &[TimeSeries], priors: &[SoftPrior], n_states: usize) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Contract("no training sequences".into()));
    }
    if series.len() != priors.len() {
        return Err(Error::Contract(format!(
            "{} sequences but {} priors",
            series.len(),
            priors.len()
        )));
    }
    let d = series[0].dim();
    for (s, w) in series.iter().zip(priors) {
        if s.dim() != d {
            return Err(Error::Dimension(format!(
                "sequence {} has D = {}, expected {d}",
                s.id(),
                s.dim()
            )));
        }
        w.check_shape(s.len(), n_states)?;
    }
    Ok(())
}

/// Posteriors of every sequence under the current parameters.
pub fn e_step(params: &ArphmmParams, series: &[TimeSeries], priors: &[SoftPrior]) -> Result<Vec<LatticeResult>> {
    check_aligned(series, priors, params.n_states)?;
    series
        .iter()
        .zip(priors)
        .map(|(s, w)| posteriors(params, s, w))
        .collect()
}

/// Initial distribution and transition matrix from pooled posteriors.
pub fn m_step_chain(lattices: &[LatticeResult]) -> Result<ChainUpdate> {
    let first = lattices
        .first()
        .ok_or_else(|| Error::Contract("m_step_chain needs at least one lattice".into()))?;
    let k = first.n_states();
    let mut pi = DVector::zeros(k);
    let mut counts = DMatrix::zeros(k, k);
    for lat in lattices {
        if lat.n_states() != k {
            return Err(Error::Dimension("lattices disagree on K".into()));
        }
        pi += lat.gamma.row(0).transpose();
        for x in &lat.xi {
            counts += x;
        }
    }
    let s = pi.sum();
    if s > 0.0 {
        pi /= s;
    } else {
        pi.fill(1.0 / k as f64);
    }
    let mut empty_rows = Vec::new();
    for i in 0..k {
        let row = counts.row(i).sum();
        if row > EMPTY_STATE_MASS {
            for j in 0..k {
                counts[(i, j)] /= row;
            }
        } else {
            empty_rows.push(i);
            for j in 0..k {
                counts[(i, j)] = 1.0 / k as f64;
            }
        }
    }
    Ok(ChainUpdate {
        pi,
        trans: counts,
        empty_rows,
    })
}

struct RegressionStats {
    mass: f64,
    xu: DMatrix<f64>,
    uu: DMatrix<f64>,
}

impl RegressionStats {
    fn new(d: usize, p: usize) -> Self {
        Self {
            mass: 0.0,
            xu: DMatrix::zeros(d, d * p),
            uu: DMatrix::zeros(d * p, d * p),
        }
    }

    fn solve(&self, ridge: f64) -> (DMatrix<f64>, bool) {
        let (x, reg) = solve_normal_right(&self.xu, &self.uu, ridge, NORMAL_RCOND);
        (-x, reg)
    }
}

fn check_lattices(lattices: &[LatticeResult], series: &[TimeSeries]) -> Result<usize> {
    if lattices.is_empty() || lattices.len() != series.len() {
        return Err(Error::Contract(format!(
            "{} lattices for {} sequences",
            lattices.len(),
            series.len()
        )));
    }
    let k = lattices[0].n_states();
    for (lat, s) in lattices.iter().zip(series) {
        if lat.len() != s.len() || lat.n_states() != k {
            return Err(Error::Dimension(format!(
                "lattice {}x{} does not fit sequence {} of length {}",
                lat.len(),
                lat.n_states(),
                s.id(),
                s.len()
            )));
        }
    }
    Ok(k)
}

/// Posterior-weighted least-squares AR coefficients per state.
pub fn m_step_ar(lattices: &[LatticeResult], series: &[TimeSeries], order: usize, ridge: f64) -> Result<ArUpdate> {
    let k = check_lattices(lattices, series)?;
    let d = series[0].dim();
    if order == 0 {
        return Ok(ArUpdate {
            ar: vec![DMatrix::zeros(d, 0); k],
            empty: Vec::new(),
            regularized: Vec::new(),
        });
    }
    let mut stats: Vec<RegressionStats> = (0..k).map(|_| RegressionStats::new(d, order)).collect();
    let mut global = RegressionStats::new(d, order);
    for (lat, s) in lattices.iter().zip(series) {
        for t in 0..s.len() {
            let x = s.get(t);
            let u = s.lag_vector(t, order);
            let xu = x * u.transpose();
            let uu = &u * u.transpose();
            global.mass += 1.0;
            global.xu += &xu;
            global.uu += &uu;
            for (i, st) in stats.iter_mut().enumerate() {
                let g = lat.gamma[(t, i)];
                if g == 0.0 {
                    continue;
                }
                st.mass += g;
                st.xu += &xu * g;
                st.uu += &uu * g;
            }
        }
    }
    let mut out = ArUpdate {
        ar: Vec::with_capacity(k),
        empty: Vec::new(),
        regularized: Vec::new(),
    };
    let mut global_fit = None;
    for (i, st) in stats.iter().enumerate() {
        let (b, reg) = if st.mass > EMPTY_STATE_MASS {
            st.solve(ridge)
        } else {
            out.empty.push(i);
            global_fit.get_or_insert_with(|| global.solve(ridge)).clone()
        };
        if reg {
            out.regularized.push(i);
        }
        out.ar.push(b);
    }
    Ok(out)
}

/// Eigenvalue floor for the covariances, applied in the frame where every
/// data channel has unit variance.
///
/// With `S = diag(s_1, …, s_D)` the per-channel standard deviations of the
/// pooled training observations, the eigenvalues of `S⁻¹ Σ_i S⁻¹` are kept at
/// or above `relative` (the standardized data covariance has `trace/D = 1`).
/// The constraint depends on the data only, so it is fixed during a fit and
/// the floored update is the exact constrained maximizer: EM stays monotone
/// when the floor is active. Working per channel keeps a high-variance
/// channel (such as a RUL ramp) from swamping the floor of the others.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFloor {
    pub scale: DVector<f64>,
    pub relative: f64,
}

impl CovarianceFloor {
    /// Channels without spread get unit scale.
    pub fn from_data(series: &[TimeSeries], sigma_floor: f64) -> Self {
        let d = series.first().map_or(0, TimeSeries::dim);
        let n: usize = series.iter().map(TimeSeries::len).sum();
        let mut mean = DVector::zeros(d);
        let mut sq = DVector::zeros(d);
        for x in series.iter().flat_map(|s| s.values()) {
            mean += x;
        }
        mean /= n.max(1) as f64;
        for x in series.iter().flat_map(|s| s.values()) {
            sq += (x - &mean).map(|v| v * v);
        }
        let scale = sq.map(|v: f64| {
            let sd = (v / n.max(1) as f64).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        });
        Self {
            scale,
            relative: sigma_floor,
        }
    }

    /// Symmetrizes `raw` and floors it; the flag tells whether the floor was
    /// active.
    pub fn apply(&self, raw: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
        let inv = self.scale.map(|s| 1.0 / s);
        let standardized = DMatrix::from_fn(raw.nrows(), raw.ncols(), |r, c| raw[(r, c)] * inv[r] * inv[c]);
        let (m, active) = symmetrize_and_floor(&standardized, self.relative.max(ABS_SIGMA_FLOOR));
        let back = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * self.scale[r] * self.scale[c]);
        (back, active)
    }
}

/// Posterior-weighted residual covariances under the given coefficients,
/// symmetrized and floored.
pub fn m_step_sigma(
    lattices: &[LatticeResult],
    series: &[TimeSeries],
    ar: &[DMatrix<f64>],
    floor: &CovarianceFloor,
) -> Result<SigmaUpdate> {
    let k = check_lattices(lattices, series)?;
    if ar.len() != k {
        return Err(Error::Dimension(format!("{} AR blocks for {k} states", ar.len())));
    }
    let d = series[0].dim();
    let order = ar[0].ncols() / d;
    let mut mass = vec![0.0; k];
    let mut acc = vec![DMatrix::zeros(d, d); k];
    let mut global = vec![DMatrix::zeros(d, d); k];
    let mut global_n = 0.0;
    for (lat, s) in lattices.iter().zip(series) {
        for t in 0..s.len() {
            let x = s.get(t);
            let u = s.lag_vector(t, order);
            global_n += 1.0;
            for i in 0..k {
                let e = if order == 0 { x.clone() } else { x + &ar[i] * &u };
                let ee = &e * e.transpose();
                global[i] += &ee;
                let g = lat.gamma[(t, i)];
                if g != 0.0 {
                    mass[i] += g;
                    acc[i] += &ee * g;
                }
            }
        }
    }
    let mut out = SigmaUpdate {
        sigma: Vec::with_capacity(k),
        empty: Vec::new(),
        floored: Vec::new(),
    };
    for i in 0..k {
        let raw = if mass[i] > EMPTY_STATE_MASS {
            &acc[i] / mass[i]
        } else {
            out.empty.push(i);
            &global[i] / global_n
        };
        let (sig, active) = floor.apply(&raw);
        if active {
            out.floored.push(i);
        }
        out.sigma.push(sig);
    }
    Ok(out)
}

struct MStep {
    params: ArphmmParams,
    warnings: Vec<String>,
}

fn m_step(lattices: &[LatticeResult], series: &[TimeSeries], order: usize, config: &FitConfig) -> Result<MStep> {
    let chain = m_step_chain(lattices)?;
    let ar = m_step_ar(lattices, series, order, config.ridge)?;
    let sig = m_step_sigma(
        lattices,
        series,
        &ar.ar,
        &CovarianceFloor::from_data(series, config.sigma_floor),
    )?;
    let mut warnings = Vec::new();
    if !chain.empty_rows.is_empty() {
        warnings.push(format!(
            "empty transition rows reset to uniform: {:?}",
            chain.empty_rows
        ));
    }
    if !ar.empty.is_empty() {
        warnings.push(format!("empty states reset to global statistics: {:?}", ar.empty));
    }
    if !ar.regularized.is_empty() {
        warnings.push(format!("ridge-regularized AR solve for states {:?}", ar.regularized));
    }
    if !sig.floored.is_empty() {
        warnings.push(format!("covariance floor active for states {:?}", sig.floored));
    }
    let k = lattices[0].n_states();
    Ok(MStep {
        params: ArphmmParams {
            n_states: k,
            dim: series[0].dim(),
            order,
            pi: chain.pi,
            trans: chain.trans,
            ar: ar.ar,
            sigma: sig.sigma,
        },
        warnings,
    })
}

fn restart_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

fn segment_gamma(len: usize, n_states: usize) -> DMatrix<f64> {
    DMatrix::from_fn(len, n_states, |t, i| if t * n_states / len == i { 1.0 } else { 0.0 })
}

fn blend_uniform(chain: &mut ArphmmParams, keep: f64) {
    let k = chain.n_states as f64;
    chain.pi = chain.pi.map(|v| keep * v + (1.0 - keep) / k);
    chain.trans = chain.trans.map(|v| keep * v + (1.0 - keep) / k);
}

/// Starting parameters for EM.
///
/// `Segments` splits every sequence into `K` contiguous equal parts and fits
/// state `i` on part `i`; `Prior` uses the normalized prior weights as state
/// posteriors; `Random` fits each state on a randomly placed window. The
/// segment and random chains are blended with a uniform chain so that no
/// transition starts at zero.
pub fn initialize(
    series: &[TimeSeries],
    priors: Option<&[SoftPrior]>,
    n_states: usize,
    order: usize,
    strategy: InitStrategy,
    seed: u64,
    config: &FitConfig,
) -> Result<ArphmmParams> {
    let owned;
    let priors = match priors {
        Some(p) => p,
        None => {
            owned = vacuous_priors(series, n_states)?;
            &owned
        }
    };
    check_aligned(series, priors, n_states)?;
    init_with_rng(
        series,
        priors,
        n_states,
        order,
        strategy,
        &mut restart_rng(seed, 0),
        config,
    )
}

fn init_with_rng(
    series: &[TimeSeries],
    priors: &[SoftPrior],
    n_states: usize,
    order: usize,
    strategy: InitStrategy,
    rng: &mut ChaCha8Rng,
    config: &FitConfig,
) -> Result<ArphmmParams> {
    let strategy = if strategy == InitStrategy::Prior && priors.iter().all(SoftPrior::is_uninformative) {
        InitStrategy::Segments
    } else {
        strategy
    };
    match strategy {
        InitStrategy::Prior => {
            let lats: Vec<LatticeResult> = priors
                .iter()
                .map(|w| {
                    let mut g = w.weights().clone();
                    for t in 0..g.nrows() {
                        let s = g.row(t).sum();
                        for i in 0..g.ncols() {
                            g[(t, i)] /= s;
                        }
                    }
                    LatticeResult::from_gamma(g)
                })
                .collect();
            Ok(m_step(&lats, series, order, config)?.params)
        }
        InitStrategy::Segments => {
            let lats: Vec<LatticeResult> = series
                .iter()
                .map(|s| LatticeResult::from_gamma(segment_gamma(s.len(), n_states)))
                .collect();
            let mut p = m_step(&lats, series, order, config)?.params;
            blend_uniform(&mut p, 0.9);
            Ok(p)
        }
        InitStrategy::Random => {
            let total: usize = series.iter().map(TimeSeries::len).sum();
            let min_len = series[0].dim() * order + 2;
            let mut gammas: Vec<DMatrix<f64>> = series.iter().map(|s| DMatrix::zeros(s.len(), n_states)).collect();
            for i in 0..n_states {
                // pick a sequence with probability proportional to its length
                let mut pos = rng.random_range(0..total);
                let mut which = 0;
                while pos >= series[which].len() {
                    pos -= series[which].len();
                    which += 1;
                }
                let len = series[which].len();
                let window = (total / (2 * n_states)).max(min_len).min(len);
                let start = rng.random_range(0..=len - window);
                for t in start..start + window {
                    gammas[which][(t, i)] = 1.0;
                }
            }
            let lats: Vec<LatticeResult> = gammas.into_iter().map(LatticeResult::from_gamma).collect();
            let mut p = m_step(&lats, series, order, config)?.params;
            let k = n_states as f64;
            let eta = rng.random_range(0.05..0.3);
            p.pi = DVector::from_element(n_states, 1.0 / k);
            p.trans = DMatrix::from_fn(n_states, n_states, |i, j| {
                (if i == j { 1.0 - eta } else { 0.0 }) + eta / k
            });
            Ok(p)
        }
    }
}

fn vacuous_priors(series: &[TimeSeries], n_states: usize) -> Result<Vec<SoftPrior>> {
    series.iter().map(|s| vacuous(s.len(), n_states)).collect()
}

struct Run {
    params: ArphmmParams,
    trace: Vec<f64>,
    converged: bool,
    warnings: Vec<String>,
}

fn run_em(series: &[TimeSeries], priors: &[SoftPrior], init: ArphmmParams, config: &FitConfig) -> Result<Run> {
    let order = init.order;
    let mut params = init;
    let mut lats = e_step(&params, series, priors)?;
    let mut ll: f64 = lats.iter().map(|l| l.loglik).sum();
    let mut trace = vec![ll];
    let mut warnings = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iters {
        let step = m_step(&lats, series, order, config)?;
        for w in step.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        lats = e_step(&step.params, series, priors)?;
        let next: f64 = lats.iter().map(|l| l.loglik).sum();
        trace.push(next);
        params = step.params;
        if (next - ll).abs() / (next.abs() + 1.0) < config.tol {
            converged = true;
            break;
        }
        ll = next;
    }
    Ok(Run {
        params,
        trace,
        converged,
        warnings,
    })
}

/// Learns all parameters from one or more sequences.
///
/// `priors = None` is the same as all-ones weights. The best of
/// `config.restarts` runs (by final log-likelihood, earliest on ties) is
/// returned.
pub fn fit(
    series: &[TimeSeries],
    priors: Option<&[SoftPrior]>,
    n_states: usize,
    order: usize,
    config: &FitConfig,
) -> Result<(ArphmmParams, FitReport)> {
    config.validate()?;
    if n_states == 0 {
        return Err(Error::Infeasible("K must be at least 1".into()));
    }
    if series.is_empty() {
        return Err(Error::Contract("no training sequences".into()));
    }
    if series.iter().all(|s| s.len() < n_states) {
        return Err(Error::Infeasible(format!(
            "K = {n_states} exceeds the length of every sequence"
        )));
    }
    let owned;
    let priors = match priors {
        Some(p) => p,
        None => {
            owned = vacuous_priors(series, n_states)?;
            &owned
        }
    };
    check_aligned(series, priors, n_states)?;

    let mut best: Option<(usize, Run)> = None;
    let mut restart_logliks = Vec::with_capacity(config.restarts);
    let mut first_err = None;
    for run in 0..config.restarts {
        let strategy = if run == 0 { config.init } else { InitStrategy::Random };
        let mut rng = restart_rng(config.seed, run);
        let result = init_with_rng(series, priors, n_states, order, strategy, &mut rng, config)
            .and_then(|init| run_em(series, priors, init, config));
        match result {
            Ok(r) => {
                let ll = *r.trace.last().unwrap();
                restart_logliks.push(ll);
                let better = match &best {
                    None => true,
                    Some((_, b)) => ll > *b.trace.last().unwrap(),
                };
                if better {
                    best = Some((run, r));
                }
            }
            Err(e) => {
                log::debug!("restart {run} failed: {e}");
                restart_logliks.push(f64::NEG_INFINITY);
                first_err.get_or_insert(e);
            }
        }
    }
    let (best_restart, run) = match best {
        Some(b) => b,
        None => return Err(first_err.expect("at least one restart ran")),
    };
    let report = FitReport {
        iterations_run: run.trace.len() - 1,
        loglik_trace: run.trace,
        converged: run.converged,
        best_restart,
        restart_logliks,
        warnings: run.warnings,
    };
    Ok((run.params, report))
}
