#![allow(dead_code)]

use std::path::PathBuf;

use arphmm::{ArphmmParams, SoftPrior, TimeSeries};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Random valid model with stable-ish AR blocks and well-conditioned noise.
pub fn random_params<R: Rng>(rng: &mut R, k: usize, d: usize, order: usize) -> ArphmmParams {
    let mut p = ArphmmParams::identity(k, d, order);
    p.pi = DVector::from_vec(simplex(rng, k));
    for i in 0..k {
        for (j, v) in simplex(rng, k).into_iter().enumerate() {
            p.trans[(i, j)] = v;
        }
        for lag in 1..=order {
            let r = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.4..0.4) / order as f64);
            p.set_lag_matrix(i, lag, &r);
        }
        let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
        p.sigma[i] = &l * l.transpose() + DMatrix::identity(d, d) * rng.random_range(0.1..1.0);
    }
    assert!(p.validate().is_empty());
    p
}

pub fn random_series<R: Rng>(rng: &mut R, len: usize, d: usize) -> TimeSeries {
    let rows = (0..len)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    TimeSeries::new("rand", rows, None).unwrap()
}

/// Soft prior with random weights; about a fifth of the entries are zero.
pub fn random_prior<R: Rng>(rng: &mut R, len: usize, k: usize) -> SoftPrior {
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|_| {
            let mut w: Vec<f64> = (0..k)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        0.0
                    } else {
                        rng.random_range(0.01..1.0)
                    }
                })
                .collect();
            if w.iter().all(|&x| x == 0.0) {
                w[rng.random_range(0..k)] = 1.0;
            }
            w
        })
        .collect();
    SoftPrior::from_rows(&rows).unwrap()
}

/// Log-density of `e` under N(0, cov), through an LU determinant and an
/// explicit inverse, independent of the library's Cholesky path.
fn gauss_logpdf(e: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = e.len() as f64;
    let det = cov.clone().lu().determinant();
    let inv = cov.clone().try_inverse().unwrap();
    let q = (e.transpose() * inv * e)[(0, 0)];
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln() + q)
}

/// `log b_t(i)` computed from the definition of the switching AR emission.
pub fn oracle_log_emissions(p: &ArphmmParams, s: &TimeSeries) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), p.n_states, |t, i| {
        let mut e = s.get(t).clone();
        for lag in 1..=p.order {
            if t >= lag {
                e += p.lag_matrix(i, lag) * s.get(t - lag);
            }
        }
        gauss_logpdf(&e, &p.sigma[i])
    })
}

pub struct Enumeration {
    pub loglik: f64,
    pub gamma: DMatrix<f64>,
    pub xi: Vec<DMatrix<f64>>,
    pub best_path: Vec<usize>,
    pub best_score: f64,
}

/// Exhaustive sum and max over all `K^T` state paths of
/// `π(s_1) w_1(s_1) b_1(s_1) Π a(s_{t-1}, s_t) w_t(s_t) b_t(s_t)`.
pub fn enumerate_paths(p: &ArphmmParams, s: &TimeSeries, w: &SoftPrior) -> Enumeration {
    let (t_len, k) = (s.len(), p.n_states);
    let log_b = oracle_log_emissions(p, s);
    let n_paths = k.pow(t_len as u32);
    let mut logs = Vec::with_capacity(n_paths);
    let mut paths = Vec::with_capacity(n_paths);
    for code in 0..n_paths {
        let mut path = vec![0; t_len];
        let mut c = code;
        for t in (0..t_len).rev() {
            path[t] = c % k;
            c /= k;
        }
        let mut lw = p.pi[path[0]].ln() + w.get(0, path[0]).ln() + log_b[(0, path[0])];
        for t in 1..t_len {
            lw += p.trans[(path[t - 1], path[t])].ln() + w.get(t, path[t]).ln() + log_b[(t, path[t])];
        }
        logs.push(lw);
        paths.push(path);
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut gamma = DMatrix::zeros(t_len, k);
    let mut xi = vec![DMatrix::zeros(k, k); t_len.saturating_sub(1)];
    for (path, pr) in paths.iter().zip(&probs) {
        let q = pr / total;
        for t in 0..t_len {
            gamma[(t, path[t])] += q;
            if t + 1 < t_len {
                xi[t][(path[t], path[t + 1])] += q;
            }
        }
    }
    // first maximum in lexicographic order
    let best = logs
        .iter()
        .enumerate()
        .fold(0, |b, (i, &l)| if l > logs[b] { i } else { b });
    Enumeration {
        loglik: m + total.ln(),
        gamma,
        xi,
        best_path: paths[best].clone(),
        best_score: logs[best],
    }
}

/// `|a - b| <= tol · max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub struct Table1Row {
    pub instance: usize,
    pub true_rul: f64,
    /// `(estimate, printed s, printed percentage error)` for ARPHMM, SWELM
    /// and RULCLIPPER.
    pub methods: [(f64, f64, f64); 3],
}

pub const METHODS: [&str; 3] = ["ARPHMM", "SWELM", "RULCLIPPER"];

pub fn table1() -> Vec<Table1Row> {
    let text = std::fs::read_to_string(fixture("table1.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let c: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            Table1Row {
                instance: c[0] as usize,
                true_rul: c[2],
                methods: [(c[3], c[4], c[5]), (c[6], c[7], c[8]), (c[9], c[10], c[11])],
            }
        })
        .collect()
}
