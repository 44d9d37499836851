//! Synthetic run-to-failure fleets with staged degradation.
//!
//! Each unit has an integer lifetime `L`. Its health indicator follows a
//! piecewise-linear curve of the life fraction `t / L` (healthy, degrading,
//! accelerated) plus AR(1) noise whose level grows with the stage:
//!
//! ```text
//! h_t = g(t / L) + η_t,   η_t = φ η_{t-1} + σ_stage ε_t
//! ```
//!
//! The stage index doubles as a degradation-level label sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::TimeSeries;
use crate::priors::LabelSequence;

pub const N_STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct FleetConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Inclusive lifetime range of training units, in cycles.
    pub train_lifetimes: (u32, u32),
    /// Inclusive lifetime range of test units.
    pub test_lifetimes: (u32, u32),
    /// Range of the observed life fraction of test units.
    pub truncation: (f64, f64),
    /// Life fractions where stages 2 and 3 begin.
    pub stage_starts: [f64; 2],
    /// Health-indicator level at the start of each stage and at failure.
    pub levels: [f64; 4],
    pub noise: [f64; N_STAGES],
    /// Range of the per-unit AR(1) coefficient of the noise, so units of
    /// equal lifetime remain distinguishable.
    pub noise_ar: (f64, f64),
    pub seed: u64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            n_train: 20,
            n_test: 5,
            train_lifetimes: (150, 250),
            test_lifetimes: (165, 235),
            truncation: (0.5, 0.7),
            stage_starts: [0.4, 0.75],
            levels: [1.0, 0.9, 0.6, 0.0],
            noise: [0.005, 0.0075, 0.0125],
            noise_ar: (0.2, 0.8),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetUnit {
    /// Health indicator with the RUL channel attached.
    pub series: TimeSeries,
    pub labels: LabelSequence,
    pub lifetime: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestUnit {
    /// Observed prefix, RUL channel attached for reference.
    pub series: TimeSeries,
    pub labels: LabelSequence,
    pub lifetime: f64,
    /// RUL at the last observed cycle.
    pub true_rul: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub train: Vec<FleetUnit>,
    pub test: Vec<TestUnit>,
}

impl FleetConfig {
    fn stage(&self, frac: f64) -> usize {
        self.stage_starts.iter().filter(|&&s| frac >= s).count()
    }

    fn curve(&self, frac: f64) -> f64 {
        let bounds = [0.0, self.stage_starts[0], self.stage_starts[1], 1.0];
        let k = self.stage(frac);
        let (a, b) = (bounds[k], bounds[k + 1]);
        let w = ((frac - a) / (b - a)).clamp(0.0, 1.0);
        self.levels[k] + w * (self.levels[k + 1] - self.levels[k])
    }

    fn unit<R: Rng>(&self, rng: &mut R, id: String, lifetime: u32) -> Result<FleetUnit> {
        let l = lifetime as f64;
        let (a0, a1) = self.noise_ar;
        let phi = if a1 > a0 { rng.random_range(a0..=a1) } else { a0 };
        let mut eta = 0.0;
        let mut rows = Vec::with_capacity(lifetime as usize);
        let mut labels = Vec::with_capacity(lifetime as usize);
        for t in 1..=lifetime {
            let frac = t as f64 / l;
            let stage = self.stage(frac);
            eta = phi * eta + self.noise[stage] * rng.sample::<f64, _>(StandardNormal);
            rows.push(vec![self.curve(frac) + eta]);
            labels.push(stage);
        }
        let rul = (1..=lifetime).map(|t| l - t as f64).collect();
        Ok(FleetUnit {
            series: TimeSeries::new(id, rows, Some(rul))?,
            labels: LabelSequence::new(labels, N_STAGES)?,
            lifetime: l,
        })
    }

    /// Generates the fleet; deterministic for a given seed.
    pub fn generate(&self) -> Result<Fleet> {
        let (lo, hi) = self.train_lifetimes;
        let (tlo, thi) = self.test_lifetimes;
        if lo < 10 || hi < lo || tlo < 10 || thi < tlo {
            return Err(Error::Config(
                "lifetime ranges must be ordered and at least 10 cycles".into(),
            ));
        }
        let (a0, a1) = self.noise_ar;
        if !(-1.0 < a0 && a0 <= a1 && a1 < 1.0) {
            return Err(Error::Config("noise AR range must lie in (-1, 1)".into()));
        }
        let (f0, f1) = self.truncation;
        if !(0.0 < f0 && f0 <= f1 && f1 < 1.0) {
            return Err(Error::Config("truncation range must lie in (0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut train = Vec::with_capacity(self.n_train);
        for i in 0..self.n_train {
            let l = rng.random_range(lo..=hi);
            train.push(self.unit(&mut rng, format!("train_{:03}", i + 1), l)?);
        }
        let mut test = Vec::with_capacity(self.n_test);
        for i in 0..self.n_test {
            let l = rng.random_range(tlo..=thi);
            let full = self.unit(&mut rng, format!("test_{:03}", i + 1), l)?;
            let frac = rng.random_range(f0..=f1);
            let cut = ((frac * l as f64).round() as usize).clamp(1, l as usize - 1);
            let series = full.series.prefix(cut)?;
            let true_rul = series.rul().unwrap()[cut - 1];
            test.push(TestUnit {
                labels: LabelSequence::new(full.labels.labels()[..cut].to_vec(), N_STAGES)?,
                series,
                lifetime: full.lifetime,
                true_rul,
            });
        }
        Ok(Fleet { train, test })
    }
}
