// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diffing statistics over a trained crosscoder. Model A is read as the
//! dense model and model B as the MoE throughout.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::activations::PairedActivations;
use crate::crosscoder::{activations, fve, CrosscoderParams, Model};
use crate::math::{cosine, norm};
use crate::{Error, Result};

pub const MOE_ONLY_BELOW: f64 = 0.3;
pub const DENSE_ONLY_ABOVE: f64 = 0.7;
pub const DELTA_BINS: usize = 50;
pub const COSINE_BINS: usize = 40;
pub const LOG_DENSITY_MIN: f64 = -6.0;
pub const LOG_DENSITY_BINS: usize = 24;

/// Reference values from the full-scale study, shown next to desk results.
pub const REFERENCE_COUNTS: CategoryCounts = CategoryCounts {
    moe_only: 910,
    shared: 18_940,
    dense_only: 3_226,
};
pub const REFERENCE_FVE: f64 = 0.87;

const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MoeOnly,
    Shared,
    DenseOnly,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::MoeOnly, Category::Shared, Category::DenseOnly];

    pub fn name(self) -> &'static str {
        match self {
            Category::MoeOnly => "moe_only",
            Category::Shared => "shared",
            Category::DenseOnly => "dense_only",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The category seen after swapping model roles.
    pub fn mirrored(self) -> Self {
        match self {
            Category::MoeOnly => Category::DenseOnly,
            Category::Shared => Category::Shared,
            Category::DenseOnly => Category::MoeOnly,
        }
    }
}

/// Relative decoder-norm difference of one feature.
///
/// Computed as `s = ½ min/max` rounded to a multiple of 2^-53, then `s` or
/// `1 - s` depending on which norm is larger. This equals
/// `½((n_dense - n_moe) / max + 1)` up to one rounding, and makes the swap
/// `Δ -> 1 - Δ` exact.
pub fn delta_norm_of(n_dense: f64, n_moe: f64) -> f64 {
    let hi = n_dense.max(n_moe);
    if n_dense == n_moe || hi == 0.0 {
        return 0.5;
    }
    const GRID: f64 = 9_007_199_254_740_992.0;
    let s = libm::round(0.5 * (n_dense.min(n_moe) / hi) * GRID) / GRID;
    if n_dense < n_moe {
        s
    } else {
        1.0 - s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaNorm {
    pub value: f64,
    /// Both decoder norms are zero.
    pub dead: bool,
}

pub fn delta_norm(params: &CrosscoderParams) -> Vec<DeltaNorm> {
    let na = params.decoder_norms(Model::A);
    let nb = params.decoder_norms(Model::B);
    na.iter()
        .zip(&nb)
        .map(|(&a, &b)| DeltaNorm {
            value: delta_norm_of(a, b),
            dead: a == 0.0 && b == 0.0,
        })
        .collect()
}

/// Bands `[0, 0.3)`, `[0.3, 0.7]`, `(0.7, 1]`.
pub fn classify(delta: f64) -> Result<Category> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Input(format!("delta norm {delta} outside [0, 1]")));
    }
    Ok(if delta < MOE_ONLY_BELOW {
        Category::MoeOnly
    } else if delta > DENSE_ONLY_ABOVE {
        Category::DenseOnly
    } else {
        Category::Shared
    })
}

/// Cosine between each feature's two decoder rows; `None` when either row is zero.
pub fn decoder_cosine(params: &CrosscoderParams) -> Result<Vec<Option<f64>>> {
    if params.d_a() != params.d_b() {
        return Err(Error::Config(format!(
            "decoder cosine needs equal dims, got {} and {}",
            params.d_a(),
            params.d_b()
        )));
    }
    Ok((0..params.n_features())
        .map(|i| cosine(params.decoder_row(Model::A, i), params.decoder_row(Model::B, i)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub per_feature: Vec<f64>,
    pub tokens: usize,
    /// Mean active features per token.
    pub mean_l0: f64,
}

/// Fraction of eval tokens on which each feature is strictly positive after
/// inference-time sparsification.
pub fn feature_density(params: &CrosscoderParams, eval: &PairedActivations) -> Result<Density> {
    let n = eval.rows();
    if n == 0 {
        return Err(Error::Degenerate("empty eval set".into()));
    }
    let k = params.n_features();
    let mut counts = vec![0u64; k];
    for s in (0..n).step_by(CHUNK) {
        let e = (s + CHUNK).min(n);
        let xa = eval.a.slice(s, e, eval.scale_a);
        let xb = eval.b.slice(s, e, eval.scale_b);
        let f = activations(params, &xa, &xb)?;
        for b in 0..f.rows() {
            for (c, &v) in counts.iter_mut().zip(f.row(b)) {
                if v > 0.0 {
                    *c += 1;
                }
            }
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(Density {
        per_feature: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        tokens: n,
        mean_l0: total as f64 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub index: usize,
    pub delta_norm: f64,
    pub category: Category,
    pub decoder_cosine: Option<f64>,
    pub density: f64,
    pub designated_shared: bool,
    pub dead: bool,
    pub norm_dense: f64,
    pub norm_moe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub features: Vec<FeatureStat>,
    pub fve_dense: f64,
    pub fve_moe: f64,
    pub eval_tokens: usize,
    pub mean_l0: f64,
    /// Mean L0 the trainer reported at its last step, if known.
    pub trainer_l0: Option<f64>,
}

impl FeatureReport {
    /// Per-feature statistics and FVE over `eval`. Cosines are omitted when
    /// the two activation dims differ.
    pub fn build(params: &CrosscoderParams, eval: &PairedActivations, trainer_l0: Option<f64>) -> Result<Self> {
        let deltas = delta_norm(params);
        let cos = decoder_cosine(params).unwrap_or_else(|_| vec![None; params.n_features()]);
        let density = feature_density(params, eval)?;
        let (fve_dense, fve_moe) = fve(params, eval)?;
        let features = (0..params.n_features())
            .map(|i| {
                Ok(FeatureStat {
                    index: i,
                    delta_norm: deltas[i].value,
                    category: classify(deltas[i].value)?,
                    decoder_cosine: cos[i],
                    density: density.per_feature[i],
                    designated_shared: params.is_shared(i),
                    dead: deltas[i].dead,
                    norm_dense: norm(params.decoder_row(Model::A, i)),
                    norm_moe: norm(params.decoder_row(Model::B, i)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            fve_dense,
            fve_moe,
            eval_tokens: density.tokens,
            mean_l0: density.mean_l0,
            trainer_l0,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub moe_only: usize,
    pub shared: usize,
    pub dense_only: usize,
}

impl CategoryCounts {
    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::MoeOnly => self.moe_only,
            Category::Shared => self.shared,
            Category::DenseOnly => self.dense_only,
        }
    }

    fn bump(&mut self, c: Category) {
        match c {
            Category::MoeOnly => self.moe_only += 1,
            Category::Shared => self.shared += 1,
            Category::DenseOnly => self.dense_only += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.moe_only + self.shared + self.dense_only
    }
}

/// Equal-width bins over `[lo, hi]`; the top edge falls in the last bin and
/// out-of-range values are clamped to the end bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(hi > lo && bins > 0);
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn bin_of(&self, x: f64) -> usize {
        let n = self.counts.len();
        let t = (x - self.lo) / (self.hi - self.lo) * n as f64;
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(n - 1)
        }
    }

    pub fn add(&mut self, x: f64) {
        let b = self.bin_of(x);
        self.counts[b] += 1;
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityByCategory {
    pub category: Category,
    /// log10 density of features with nonzero density.
    pub log10_hist: Histogram,
    pub zero_density: usize,
    pub mean_density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub counts: CategoryCounts,
    pub fve: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_features: usize,
    pub counts: CategoryCounts,
    /// Counts restricted to features outside the designated shared set.
    pub undesignated_counts: CategoryCounts,
    /// Counts restricted to features that fired at least once on the eval set.
    pub active_counts: CategoryCounts,
    /// Features with zero decoder norm in both models.
    pub dead_features: usize,
    /// Features that never fired on the eval set.
    pub inactive_features: usize,
    pub delta_hist: Histogram,
    pub cosine_hist: Histogram,
    pub cosine_undefined: usize,
    pub density: Vec<DensityByCategory>,
    pub fve_dense: f64,
    pub fve_moe: f64,
    /// dense_only / moe_only, absent when there are no moe_only features.
    pub dense_to_moe_ratio: Option<f64>,
    pub designated_shared: usize,
    pub designated_min_cosine: Option<f64>,
    pub designated_cosine_all_one: bool,
    pub mean_l0: f64,
    pub trainer_l0: Option<f64>,
    /// |mean_l0 - trainer_l0| / trainer_l0.
    pub l0_relative_gap: Option<f64>,
    pub reference: Reference,
}

pub fn summarize(report: &FeatureReport) -> Summary {
    let mut counts = CategoryCounts::default();
    let mut undesignated = CategoryCounts::default();
    let mut active = CategoryCounts::default();
    let mut delta_hist = Histogram::new(0.0, 1.0, DELTA_BINS);
    let mut cosine_hist = Histogram::new(-1.0, 1.0, COSINE_BINS);
    let mut cosine_undefined = 0;
    let mut density: Vec<DensityByCategory> = Category::ALL
        .iter()
        .map(|&c| DensityByCategory {
            category: c,
            log10_hist: Histogram::new(LOG_DENSITY_MIN, 0.0, LOG_DENSITY_BINS),
            zero_density: 0,
            mean_density: None,
        })
        .collect();
    let mut density_sum = [0.0; 3];
    let mut designated_min: Option<f64> = None;
    let mut designated_all_one = true;
    let mut designated = 0;
    for f in &report.features {
        counts.bump(f.category);
        if !f.designated_shared {
            undesignated.bump(f.category);
        }
        if f.density > 0.0 {
            active.bump(f.category);
        }
        delta_hist.add(f.delta_norm);
        match f.decoder_cosine {
            Some(c) => cosine_hist.add(c),
            None => cosine_undefined += 1,
        }
        let slot = &mut density[f.category.index()];
        density_sum[f.category.index()] += f.density;
        if f.density > 0.0 {
            slot.log10_hist.add(libm::log10(f.density));
        } else {
            slot.zero_density += 1;
        }
        if f.designated_shared {
            designated += 1;
            let c = f.decoder_cosine;
            designated_all_one &= c == Some(1.0);
            designated_min = match (designated_min, c) {
                (Some(m), Some(c)) => Some(m.min(c)),
                (m, c) => m.or(c),
            };
        }
    }
    for d in &mut density {
        let n = counts.get(d.category);
        if n > 0 {
            d.mean_density = Some(density_sum[d.category.index()] / n as f64);
        }
    }
    Summary {
        n_features: report.features.len(),
        dead_features: report.features.iter().filter(|f| f.dead).count(),
        inactive_features: report.features.iter().filter(|f| f.density == 0.0).count(),
        dense_to_moe_ratio: (counts.moe_only > 0).then(|| counts.dense_only as f64 / counts.moe_only as f64),
        counts,
        undesignated_counts: undesignated,
        active_counts: active,
        delta_hist,
        cosine_hist,
        cosine_undefined,
        density,
        fve_dense: report.fve_dense,
        fve_moe: report.fve_moe,
        designated_shared: designated,
        designated_min_cosine: designated_min,
        designated_cosine_all_one: designated_all_one,
        mean_l0: report.mean_l0,
        trainer_l0: report.trainer_l0,
        l0_relative_gap: report
            .trainer_l0
            .filter(|&t| t > 0.0)
            .map(|t| (report.mean_l0 - t).abs() / t),
        reference: Reference {
            counts: REFERENCE_COUNTS,
            fve: REFERENCE_FVE,
            note: "full-scale reference (1B tokens, 40K crosscoder steps); for comparison only".into(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationTable;
    use crate::crosscoder::{Thresholds, Variant};
    use crate::linalg::Matrix;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn delta_norm_examples() {
        assert_eq!(delta_norm_of(2.0, 2.0), 0.5);
        assert_eq!(delta_norm_of(0.0, 0.0), 0.5);
        assert_eq!(delta_norm_of(0.0, 1.5), 0.0);
        assert_eq!(delta_norm_of(1.5, 0.0), 1.0);
        assert!((delta_norm_of(3.0, 1.0) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn classify_bands() {
        assert_eq!(classify(0.15).unwrap(), Category::MoeOnly);
        assert_eq!(classify(0.5).unwrap(), Category::Shared);
        assert_eq!(classify(0.85).unwrap(), Category::DenseOnly);
        assert_eq!(classify(0.3).unwrap(), Category::Shared);
        assert_eq!(classify(0.7).unwrap(), Category::Shared);
        assert_eq!(classify(0.0).unwrap(), Category::MoeOnly);
        assert_eq!(classify(1.0).unwrap(), Category::DenseOnly);
        assert!(classify(1.01).is_err());
        assert!(classify(f64::NAN).is_err());
    }

    fn random_params(seed: u64, shared: Vec<usize>) -> CrosscoderParams {
        let mut r = rng::stream(seed, 0);
        let mut p = CrosscoderParams::init(Variant::BatchTopk, 5, 5, 12, shared, 1.0, &mut r).unwrap();
        for i in 0..p.w_dec_a.rows() {
            let s = 0.05 + 2.0 * libm::fabs(rng::normal(&mut r));
            for v in p.w_dec_a.row_mut(i) {
                *v *= s;
            }
        }
        p
    }

    #[test]
    fn cosine_of_tied_and_negated_rows() {
        let mut p = random_params(3, vec![0, 1]);
        let row = p.w_dec_a.row(0).to_vec();
        for (o, v) in p.w_dec_b.row_mut(0).iter_mut().zip(&row) {
            *o = -2.0 * v;
        }
        p.w_dec_b.row_mut(1).fill(0.0);
        let c = decoder_cosine(&p).unwrap();
        assert_eq!(c[0], Some(1.0));
        assert_eq!(c[1], Some(1.0));
        assert_eq!(c[2], Some(-1.0));
        assert_eq!(c[3], None);
        let a = p.decoder_row(Model::A, 5);
        let b = p.decoder_row(Model::B, 5);
        let want = crate::math::dot(a, b) / (norm(a) * norm(b));
        assert!((c[5].unwrap() - want).abs() < 1e-12);
        let q = CrosscoderParams::zeros(Variant::L1, 3, 4, 2, vec![]).unwrap();
        assert!(decoder_cosine(&q).is_err());
    }

    #[test]
    fn swapping_models_mirrors_delta_and_counts() {
        for seed in 0..20 {
            let p = random_params(seed, vec![2, 3]);
            let d = delta_norm(&p);
            let s = delta_norm(&p.swapped());
            for (x, y) in d.iter().zip(&s) {
                assert_eq!(y.value, 1.0 - x.value);
                assert_eq!(classify(y.value).unwrap(), classify(x.value).unwrap().mirrored());
            }
        }
    }

    proptest! {
        #[test]
        fn delta_swap_is_exact(a in 0.0f64..1e3, b in 0.0f64..1e3, tiny in -300i32..0) {
            let b2 = b * libm::pow(10.0, tiny as f64);
            for (x, y) in [(a, b), (a, b2), (b2, a)] {
                let d = delta_norm_of(x, y);
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(delta_norm_of(y, x), 1.0 - d);
                if x.max(y) > 0.0 {
                    let formula = 0.5 * ((x - y) / x.max(y) + 1.0);
                    prop_assert!((d - formula).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn scaling_dense_decoder_moves_toward_dense(seed in 0u64..50, c in 1.01f64..20.0) {
            let p = random_params(seed, vec![0, 4]);
            let before = delta_norm(&p);
            let mut up = p.clone();
            up.w_dec_a.scale(c);
            let after = delta_norm(&up);
            let mut down = p.clone();
            down.w_dec_a.scale(1.0 / c);
            let lower = delta_norm(&down);
            for i in p.exclusive_indices() {
                prop_assert!(after[i].value >= before[i].value);
                prop_assert!(lower[i].value <= before[i].value);
            }
        }
    }

    fn toy_eval() -> (CrosscoderParams, PairedActivations) {
        // Feature i fires exactly when x_A[i] > 0; feature 2 never fires.
        let mut p = CrosscoderParams::zeros(Variant::L1, 3, 3, 3, vec![]).unwrap();
        for i in 0..3 {
            p.w_enc_a.set(i, i, 1.0);
            p.w_dec_a.set(i, i, 1.0);
            p.w_dec_b.set(i, i, 1.0);
        }
        let rows = [
            [1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0],
            [1.0, 1.0, -1.0],
            [-1.0, -1.0, -1.0],
            [1.0, 1.0, -1.0],
            [1.0, -1.0, -2.0],
            [1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0],
            [1.0, 1.0, -3.0],
            [1.0, 0.0, -1.0],
        ];
        let m = Matrix::from_rows(&rows);
        let t = ActivationTable::from_matrix(&m);
        (p, PairedActivations::new(t.clone(), t, 1.0, 1.0).unwrap())
    }

    #[test]
    fn density_by_hand() {
        let (p, eval) = toy_eval();
        let d = feature_density(&p, &eval).unwrap();
        assert_eq!(d.per_feature, vec![0.9, 0.5, 0.0]);
        assert_eq!(d.tokens, 10);
        assert!((d.mean_l0 - 1.4).abs() < 1e-15);
    }

    #[test]
    fn density_uses_inference_thresholds() {
        let (mut p, eval) = toy_eval();
        p.variant = Variant::BatchTopk;
        p.thresholds = Some(Thresholds {
            shared: 0.0,
            exclusive: 1.5,
        });
        // Selection weight is 2 for every feature, so scores are 2 or 0.
        let d = feature_density(&p, &eval).unwrap();
        assert_eq!(d.per_feature, vec![0.9, 0.5, 0.0]);
        p.thresholds = Some(Thresholds {
            shared: 0.0,
            exclusive: 2.0,
        });
        assert_eq!(feature_density(&p, &eval).unwrap().per_feature, vec![0.0; 3]);
    }

    #[test]
    fn summary_of_toy_report() {
        let (p, eval) = toy_eval();
        let r = FeatureReport::build(&p, &eval, Some(1.4)).unwrap();
        let s = summarize(&r);
        assert_eq!(s.counts, CategoryCounts { moe_only: 0, shared: 3, dense_only: 0 });
        assert_eq!(s.delta_hist.counts[25], 3);
        assert_eq!(s.cosine_hist.counts[COSINE_BINS - 1], 3);
        assert_eq!(s.cosine_hist.total(), 3);
        assert_eq!(s.density[1].zero_density, 1);
        assert_eq!(s.density[1].log10_hist.total(), 2);
        assert!((s.density[1].mean_density.unwrap() - 1.4 / 3.0).abs() < 1e-15);
        assert_eq!(s.dense_to_moe_ratio, None);
        assert_eq!(s.l0_relative_gap, Some(0.0));
        assert_eq!(s.reference.counts.total(), 910 + 3226 + 18940);
        assert_eq!(summarize(&r), s);
    }

    #[test]
    fn all_shared_dictionary_counts() {
        let p = CrosscoderParams::init(Variant::SharedL1, 4, 4, 6, (0..6).collect(), 0.1, &mut rng::stream(1, 1))
            .unwrap();
        let mut r = rng::stream(2, 2);
        let m = Matrix::from_fn(50, 4, |_, _| rng::normal(&mut r));
        let t = ActivationTable::from_matrix(&m);
        let eval = PairedActivations::new(t.clone(), t, 1.0, 1.0).unwrap();
        let s = summarize(&FeatureReport::build(&p, &eval, None).unwrap());
        assert_eq!(s.counts, CategoryCounts { moe_only: 0, shared: 6, dense_only: 0 });
        assert!(s.designated_cosine_all_one);
        assert_eq!(s.designated_min_cosine, Some(1.0));
    }

    #[test]
    fn histogram_edges_and_clamping() {
        let mut h = Histogram::new(0.0, 1.0, 50);
        for x in [0.0, 0.3, 0.7, 1.0, -0.5, 2.0] {
            h.add(x);
        }
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[15], 1);
        assert_eq!(h.counts[35], 1);
        assert_eq!(h.counts[49], 2);
        assert_eq!(h.edges().len(), 51);
    }
}
