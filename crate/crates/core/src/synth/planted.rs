// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationTable, PairedActivations};
use crate::analysis::Category;
use crate::linalg::Matrix;
use crate::math::dot;
use crate::rng::{self, DetRng};
use crate::{Error, Result};

const DICT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub d_a: usize,
    pub d_b: usize,
    pub n_shared: usize,
    pub n_a_only: usize,
    pub n_b_only: usize,
    /// Active planted features per sample.
    pub l0_true: usize,
    pub noise_sigma: f64,
    pub samples: usize,
    pub eval_samples: usize,
    pub amp_mean: f64,
    pub amp_std: f64,
    pub amp_min: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            d_a: 32,
            d_b: 32,
            n_shared: 64,
            n_a_only: 32,
            n_b_only: 32,
            l0_true: 8,
            noise_sigma: 0.01,
            samples: 200_000,
            eval_samples: 20_000,
            amp_mean: 1.0,
            amp_std: 0.3,
            amp_min: 0.05,
        }
    }
}

impl PlantedConfig {
    pub fn n_features(&self) -> usize {
        self.n_shared + self.n_a_only + self.n_b_only
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_b == 0 {
            return Err(Error::Config("planted dims must be positive".into()));
        }
        if self.l0_true == 0 || self.l0_true > self.n_features() {
            return Err(Error::Config(format!(
                "l0_true {} must lie in 1..={}",
                self.l0_true,
                self.n_features()
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.amp_std >= 0.0) || !(self.amp_min >= 0.0) {
            return Err(Error::Config("noise and amplitude parameters must be non-negative".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        Ok(())
    }
}

/// Planted directions, one row per feature: shared features first, then
/// A-only, then B-only. Absent directions are zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedDictionary {
    pub config: PlantedConfig,
    pub seed: u64,
    pub dirs_a: Matrix,
    pub dirs_b: Matrix,
}

/// Generated rows plus the sparse codes that produced them.
#[derive(Clone, Debug)]
pub struct PlantedSample {
    pub data: PairedActivations,
    /// `(feature, amplitude)` per sample, in draw order.
    pub codes: Vec<Vec<(usize, f64)>>,
}

impl PlantedDictionary {
    pub fn generate(config: &PlantedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, DICT_STREAM);
        let n = config.n_features();
        let mut dirs_a = Matrix::zeros(n, config.d_a);
        let mut dirs_b = Matrix::zeros(n, config.d_b);
        let tied = config.d_a == config.d_b;
        for i in 0..n {
            let cat = Self::category_of(config, i);
            if cat != Category::MoeOnly {
                dirs_a.row_mut(i).copy_from_slice(&rng::unit_vector(&mut r, config.d_a));
            }
            if cat == Category::Shared && tied {
                let row = dirs_a.row(i).to_vec();
                dirs_b.row_mut(i).copy_from_slice(&row);
            } else if cat != Category::DenseOnly {
                dirs_b.row_mut(i).copy_from_slice(&rng::unit_vector(&mut r, config.d_b));
            }
        }
        Ok(Self {
            config: config.clone(),
            seed,
            dirs_a,
            dirs_b,
        })
    }

    fn category_of(config: &PlantedConfig, i: usize) -> Category {
        if i < config.n_shared {
            Category::Shared
        } else if i < config.n_shared + config.n_a_only {
            Category::DenseOnly
        } else {
            Category::MoeOnly
        }
    }

    pub fn n_features(&self) -> usize {
        self.dirs_a.rows()
    }

    /// Ground-truth band of feature `i` (A-only reads as `dense_only`).
    pub fn category(&self, i: usize) -> Category {
        Self::category_of(&self.config, i)
    }

    pub fn categories(&self) -> Vec<Category> {
        (0..self.n_features()).map(|i| self.category(i)).collect()
    }

    /// Largest |cos| between distinct nonzero directions, per space.
    pub fn coherence(&self) -> (f64, f64) {
        (max_coherence(&self.dirs_a), max_coherence(&self.dirs_b))
    }

    /// Draws `rows` samples from the given stream.
    pub fn sample(&self, rows: usize, stream: u64) -> Result<PlantedSample> {
        let c = &self.config;
        let mut r = rng::stream(self.seed, stream);
        let mut a = ActivationTable::new(c.d_a);
        let mut b = ActivationTable::new(c.d_b);
        let mut codes = Vec::with_capacity(rows);
        let mut xa = Vec::with_capacity(c.d_a);
        let mut xb = Vec::with_capacity(c.d_b);
        for _ in 0..rows {
            xa.clear();
            xa.resize(c.d_a, 0.0);
            xb.clear();
            xb.resize(c.d_b, 0.0);
            let mut code = Vec::with_capacity(c.l0_true);
            for i in rng::sample_without_replacement(&mut r, self.n_features(), c.l0_true) {
                let amp = self.amplitude(&mut r);
                for (o, d) in xa.iter_mut().zip(self.dirs_a.row(i)) {
                    *o += amp * d;
                }
                for (o, d) in xb.iter_mut().zip(self.dirs_b.row(i)) {
                    *o += amp * d;
                }
                code.push((i, amp));
            }
            if c.noise_sigma > 0.0 {
                for v in xa.iter_mut().chain(xb.iter_mut()) {
                    *v += c.noise_sigma * rng::normal(&mut r);
                }
            }
            a.push_row(&xa);
            b.push_row(&xb);
            codes.push(code);
        }
        Ok(PlantedSample {
            data: PairedActivations::new(a, b, 1.0, 1.0)?,
            codes,
        })
    }

    fn amplitude(&self, r: &mut DetRng) -> f64 {
        let c = &self.config;
        libm::fabs(c.amp_mean + c.amp_std * rng::normal(r)).max(c.amp_min)
    }
}

fn max_coherence(m: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            let (a, b) = (m.row(i), m.row(j));
            if a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0) {
                continue;
            }
            worst = worst.max(libm::fabs(dot(a, b)));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm;

    fn small() -> PlantedConfig {
        PlantedConfig {
            d_a: 8,
            d_b: 8,
            n_shared: 4,
            n_a_only: 3,
            n_b_only: 2,
            l0_true: 3,
            samples: 100,
            ..PlantedConfig::default()
        }
    }

    #[test]
    fn rows_are_unit_or_zero_by_category() {
        let d = PlantedDictionary::generate(&small(), 7).unwrap();
        for i in 0..d.n_features() {
            let (na, nb) = (norm(d.dirs_a.row(i)), norm(d.dirs_b.row(i)));
            match d.category(i) {
                Category::Shared => {
                    assert!((na - 1.0).abs() < 1e-12);
                    assert_eq!(d.dirs_a.row(i), d.dirs_b.row(i));
                }
                Category::DenseOnly => assert!((na - 1.0).abs() < 1e-12 && nb == 0.0),
                Category::MoeOnly => assert!(na == 0.0 && (nb - 1.0).abs() < 1e-12),
            }
        }
    }

    #[test]
    fn unequal_dims_get_independent_shared_directions() {
        let cfg = PlantedConfig { d_b: 5, ..small() };
        let d = PlantedDictionary::generate(&cfg, 1).unwrap();
        assert!((norm(d.dirs_b.row(0)) - 1.0).abs() < 1e-12);
        assert_eq!(d.dirs_b.cols(), 5);
    }

    #[test]
    fn noiseless_single_shared_feature_scales_one_direction() {
        let cfg = PlantedConfig {
            n_shared: 1,
            n_a_only: 0,
            n_b_only: 0,
            l0_true: 1,
            noise_sigma: 0.0,
            ..small()
        };
        let d = PlantedDictionary::generate(&cfg, 3).unwrap();
        let s = d.sample(50, 2).unwrap();
        let dir = d.dirs_a.row(0);
        for i in 0..50 {
            let amp = s.codes[i][0].1;
            assert!(amp >= 0.05);
            for j in 0..8 {
                assert_eq!(s.data.a.row(i)[j], (amp * dir[j]) as f32);
                assert_eq!(s.data.b.row(i)[j], (amp * dir[j]) as f32);
            }
        }
    }

    #[test]
    fn exclusive_features_never_reach_the_other_space() {
        let cfg = PlantedConfig {
            n_shared: 0,
            n_a_only: 4,
            n_b_only: 0,
            noise_sigma: 0.0,
            ..small()
        };
        let d = PlantedDictionary::generate(&cfg, 4).unwrap();
        let s = d.sample(200, 2).unwrap();
        assert!(s.data.b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_sample_has_exactly_l0_distinct_features() {
        let d = PlantedDictionary::generate(&small(), 5).unwrap();
        let s = d.sample(500, 2).unwrap();
        for code in &s.codes {
            let mut ids: Vec<usize> = code.iter().map(|c| c.0).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 3);
        }
        let again = d.sample(500, 2).unwrap();
        assert_eq!(again.data.a.data(), s.data.a.data());
    }

    #[test]
    fn coherence_flags_crowded_spaces() {
        let crowded = PlantedConfig {
            d_a: 2,
            d_b: 2,
            n_shared: 6,
            n_a_only: 0,
            n_b_only: 0,
            l0_true: 1,
            ..small()
        };
        let d = PlantedDictionary::generate(&crowded, 1).unwrap();
        assert!(d.coherence().0 > 0.5);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(PlantedDictionary::generate(&PlantedConfig { l0_true: 0, ..small() }, 0).is_err());
        assert!(PlantedDictionary::generate(&PlantedConfig { l0_true: 10, ..small() }, 0).is_err());
        assert!(PlantedDictionary::generate(&PlantedConfig { noise_sigma: -1.0, ..small() }, 0).is_err());
    }
}
