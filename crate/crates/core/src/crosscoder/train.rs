// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::forward::{activations, decode};
use super::loss::{loss_and_grad, Gate, Penalty};
use super::params::{CrosscoderParams, Thresholds, Variant};
use crate::activations::{BatchIterator, PairedActivations};
use crate::linalg::{AdamConfig, AdamState, Matrix};
use crate::rng;
use crate::{Error, Result};

const INIT_STREAM: u64 = 1;
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XcTrainConfig {
    pub variant: Variant,
    /// Dictionary size; `None` means 16x the summed activation dims.
    pub n_features: Option<usize>,
    /// Features `0..n_shared` get tied decoder rows.
    pub n_shared: usize,
    /// L1 coefficient, and the exclusive coefficient of the shared loss.
    pub lambda: f64,
    /// Shared coefficient; `None` means `0.7 * lambda`.
    pub lambda_shared: Option<f64>,
    /// Mean active features per token kept by BatchTopK.
    pub l0_target: usize,
    /// Part of the BatchTopK budget reserved for the shared set.
    pub shared_fraction: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    /// Final fraction of steps over which the learning rate decays linearly to zero.
    pub decay_fraction: f64,
    pub threshold_decay: f64,
    /// Steps without activation after which a feature counts as dead.
    pub dead_window: u64,
    pub log_interval: u64,
    /// Steps between held-out FVE evaluations; 0 disables them.
    pub eval_interval: u64,
    /// Rows of the eval set used for periodic FVE (the final FVE uses all).
    pub eval_rows: usize,
    pub shuffle_buffer: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for XcTrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BatchTopk,
            n_features: None,
            n_shared: 64,
            lambda: 1.0,
            lambda_shared: None,
            l0_target: 32,
            shared_fraction: 0.5,
            steps: 5000,
            batch_size: 1024,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup_steps: 100,
            decay_fraction: 0.2,
            threshold_decay: 0.999,
            dead_window: 1000,
            log_interval: 100,
            eval_interval: 1000,
            eval_rows: 16384,
            shuffle_buffer: 1 << 16,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl XcTrainConfig {
    pub fn dictionary_size(&self, d_a: usize, d_b: usize) -> usize {
        self.n_features.unwrap_or(16 * (d_a + d_b))
    }

    pub fn lambda_shared(&self) -> f64 {
        self.lambda_shared.unwrap_or(0.7 * self.lambda)
    }

    pub fn penalty(&self) -> Penalty {
        match self.variant {
            Variant::L1 => Penalty::l1(self.lambda),
            Variant::SharedL1 => Penalty::split(self.lambda_shared(), self.lambda),
            Variant::BatchTopk => Penalty::none(),
        }
    }

    pub fn validate(&self, d_a: usize, d_b: usize) -> Result<()> {
        let k = self.dictionary_size(d_a, d_b);
        let bad = |m: &str| Err(Error::Config(m.into()));
        if k == 0 || self.batch_size == 0 {
            return bad("dictionary size and batch size must be positive");
        }
        if self.n_shared > k {
            return Err(Error::Config(format!("n_shared {} exceeds dictionary size {k}", self.n_shared)));
        }
        if !(self.lambda >= 0.0) || !(self.lambda_shared() >= 0.0) {
            return bad("sparsity coefficients must be non-negative");
        }
        if self.l0_target > k {
            return Err(Error::Config(format!("l0_target {} exceeds dictionary size {k}", self.l0_target)));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) || !(0.0..=1.0).contains(&self.decay_fraction) {
            return bad("shared_fraction and decay_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.threshold_decay) {
            return bad("threshold_decay must lie in [0, 1)");
        }
        if self.variant == Variant::SharedL1 && self.n_shared == 0 {
            return bad("shared_l1 needs n_shared > 0");
        }
        if self.n_shared > 0 && d_a != d_b {
            return bad("shared features need equal activation dims");
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> f64 {
        let mut lr = self.adam.lr;
        if self.warmup_steps > 0 && step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = (self.decay_fraction * self.steps as f64) as u64;
        let decay_start = self.steps - decay_steps;
        if decay_steps > 0 && step >= decay_start {
            lr *= (self.steps - step) as f64 / decay_steps as f64;
        }
        lr
    }
}

/// Per-batch BatchTopK budgets `(shared, exclusive)` for the given shared set
/// size; a set with no features hands its share to the other.
pub fn budgets(cfg: &XcTrainConfig, n_shared: usize, k: usize, batch: usize) -> (usize, usize) {
    let total = cfg.l0_target * batch;
    let shared = if n_shared == 0 {
        0
    } else if n_shared == k {
        total
    } else {
        libm::round(cfg.shared_fraction * total as f64) as usize
    };
    (shared.min(n_shared * batch), (total - shared).min((k - n_shared) * batch))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct XcMetrics {
    pub step: u64,
    pub rec_a: f64,
    pub rec_b: f64,
    pub sparsity: f64,
    pub total: f64,
    pub l0: f64,
    pub fve_a: Option<f64>,
    pub fve_b: Option<f64>,
    pub dead_features: usize,
    pub threshold_shared: Option<f64>,
    pub threshold_exclusive: Option<f64>,
}

fn ema(old: Option<f64>, new: Option<f64>, decay: f64) -> Option<f64> {
    match (old, new) {
        (Some(o), Some(n)) => Some(decay * o + (1.0 - decay) * n),
        (o, n) => n.or(o),
    }
}

/// Trains on `train`, reporting to `sink` every `log_interval` steps and at
/// the end. Held-out FVE is computed on `eval` when given.
pub fn train_crosscoder(
    cfg: &XcTrainConfig,
    train: &PairedActivations,
    eval: Option<&PairedActivations>,
    sink: &mut dyn FnMut(&XcMetrics),
) -> Result<(CrosscoderParams, XcMetrics)> {
    let (d_a, d_b) = (train.d_a(), train.d_b());
    cfg.validate(d_a, d_b)?;
    if let Some(e) = eval {
        if e.d_a() != d_a || e.d_b() != d_b {
            return Err(Error::Pairing("eval dims differ from training dims".into()));
        }
    }
    let k = cfg.dictionary_size(d_a, d_b);
    let mut params = CrosscoderParams::init(
        cfg.variant,
        d_a,
        d_b,
        k,
        (0..cfg.n_shared).collect(),
        cfg.init_scale,
        &mut rng::stream(cfg.seed, INIT_STREAM),
    )?;
    let mut adam: Vec<AdamState> = params.matrices().iter().map(|m| AdamState::new(m)).collect();
    let mut batches = BatchIterator::new(train, cfg.batch_size, cfg.shuffle_buffer, cfg.seed);
    let (bs, be) = budgets(cfg, cfg.n_shared, k, cfg.batch_size);
    let penalty = cfg.penalty();
    let mut last_active = vec![0u64; k];
    let mut th_shared = None;
    let mut th_excl = None;
    let mut metrics = XcMetrics::default();

    for step in 0..cfg.steps {
        let batch = batches.next_batch();
        let gate = match cfg.variant {
            Variant::BatchTopk => Gate::BatchTopk {
                shared: bs,
                exclusive: be,
            },
            _ => Gate::Relu,
        };
        let (loss, grads, sel) = loss_and_grad(&params, &batch.x_a, &batch.x_b, penalty, gate)?;
        let lr = cfg.lr_at(step);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                what: format!("crosscoder loss {}", loss.total),
                step,
                lr,
            });
        }
        for b in 0..sel.f.rows() {
            for (i, &v) in sel.f.row(b).iter().enumerate() {
                if v > 0.0 {
                    last_active[i] = step + 1;
                }
            }
        }
        th_shared = ema(th_shared, sel.min_shared, cfg.threshold_decay);
        th_excl = ema(th_excl, sel.min_exclusive, cfg.threshold_decay);
        for ((st, p), g) in adam.iter_mut().zip(params.matrices_mut()).zip(grads.matrices()) {
            st.step(&cfg.adam, lr, p, g)?;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite {
                what: "crosscoder parameters".into(),
                step,
                lr,
            });
        }
        params.steps_trained = step + 1;
        if cfg.variant == Variant::BatchTopk {
            params.thresholds = Some(Thresholds {
                shared: th_shared.unwrap_or(f64::INFINITY),
                exclusive: th_excl.unwrap_or(f64::INFINITY),
            });
        }

        let done = step + 1;
        let last = done == cfg.steps;
        let log = cfg.log_interval > 0 && done % cfg.log_interval == 0;
        let evaluate = eval.is_some() && (last || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0));
        if log || evaluate || last {
            metrics = XcMetrics {
                step: done,
                rec_a: loss.rec_a,
                rec_b: loss.rec_b,
                sparsity: loss.sparsity,
                total: loss.total,
                l0: loss.l0,
                fve_a: None,
                fve_b: None,
                dead_features: last_active
                    .iter()
                    .filter(|&&t| done >= cfg.dead_window && done - t >= cfg.dead_window)
                    .count(),
                threshold_shared: th_shared,
                threshold_exclusive: th_excl,
            };
            if let (true, Some(e)) = (evaluate, eval) {
                let rows = if last { e.rows() } else { cfg.eval_rows.min(e.rows()) };
                let (fa, fb) = fve_rows(&params, e, rows)?;
                metrics.fve_a = Some(fa);
                metrics.fve_b = Some(fb);
            }
            sink(&metrics);
        }
    }
    Ok((params, metrics))
}

/// `1 - Σ‖x - x̂‖² / Σ‖x - x̄‖²` with `x̄` the column mean of `x`.
pub fn variance_explained(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    let (mut err, mut var) = (0.0, 0.0);
    let mean = column_mean(x);
    accumulate(x, x_hat, &mean, &mut err, &mut var)?;
    finish(err, var)
}

fn column_mean(x: &Matrix) -> Vec<f64> {
    let mut m = x.col_sums().into_vec();
    for v in &mut m {
        *v /= x.rows().max(1) as f64;
    }
    m
}

fn accumulate(x: &Matrix, x_hat: &Matrix, mean: &[f64], err: &mut f64, var: &mut f64) -> Result<()> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            op: "variance_explained",
            lhs: x.shape(),
            rhs: x_hat.shape(),
        });
    }
    for b in 0..x.rows() {
        for ((&v, &h), &m) in x.row(b).iter().zip(x_hat.row(b)).zip(mean) {
            *err += (v - h) * (v - h);
            *var += (v - m) * (v - m);
        }
    }
    Ok(())
}

fn finish(err: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::Degenerate("eval activations have zero variance".into()));
    }
    Ok(1.0 - err / var)
}

/// Per-model FVE over the whole eval set using inference-time sparsification.
pub fn fve(params: &CrosscoderParams, eval: &PairedActivations) -> Result<(f64, f64)> {
    fve_rows(params, eval, eval.rows())
}

fn fve_rows(params: &CrosscoderParams, eval: &PairedActivations, rows: usize) -> Result<(f64, f64)> {
    let rows = rows.min(eval.rows());
    let mut mean_a = vec![0.0; eval.d_a()];
    let mut mean_b = vec![0.0; eval.d_b()];
    let chunks = || (0..rows).step_by(EVAL_CHUNK).map(move |s| (s, (s + EVAL_CHUNK).min(rows)));
    for (s, e) in chunks() {
        let xa = eval.a.slice(s, e, eval.scale_a);
        let xb = eval.b.slice(s, e, eval.scale_b);
        for (m, c) in mean_a.iter_mut().zip(xa.col_sums().data()) {
            *m += c;
        }
        for (m, c) in mean_b.iter_mut().zip(xb.col_sums().data()) {
            *m += c;
        }
    }
    for m in mean_a.iter_mut().chain(mean_b.iter_mut()) {
        *m /= rows as f64;
    }
    let (mut ea, mut va, mut eb, mut vb) = (0.0, 0.0, 0.0, 0.0);
    for (s, e) in chunks() {
        let xa = eval.a.slice(s, e, eval.scale_a);
        let xb = eval.b.slice(s, e, eval.scale_b);
        let f = activations(params, &xa, &xb)?;
        let (ha, hb) = decode(params, &f)?;
        accumulate(&xa, &ha, &mean_a, &mut ea, &mut va)?;
        accumulate(&xb, &hb, &mean_b, &mut eb, &mut vb)?;
    }
    Ok((finish(ea, va)?, finish(eb, vb)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationTable;
    use crate::crosscoder::Model;

    fn sparse_pairs(rows: usize, seed: u64) -> PairedActivations {
        // Four directions present in both spaces, two only in A, two only in B.
        let dirs: Vec<Vec<f64>> = {
            let mut r = rng::stream(0, 9);
            (0..8).map(|_| rng::unit_vector(&mut r, 6)).collect()
        };
        let mut r = rng::stream(seed, 10);
        let mut a = ActivationTable::new(6);
        let mut b = ActivationTable::new(6);
        let zero = [0.0; 6];
        for _ in 0..rows {
            let i = rng::index(&mut r, 8);
            let amp = 1.0 + 0.2 * rng::normal(&mut r);
            let row: Vec<f64> = dirs[i].iter().map(|v| amp * v).collect();
            a.push_row(if i < 6 { &row } else { &zero });
            b.push_row(if !(4..6).contains(&i) { &row } else { &zero });
        }
        PairedActivations::new(a, b, 1.0, 1.0).unwrap()
    }

    fn small_cfg() -> XcTrainConfig {
        XcTrainConfig {
            n_features: Some(16),
            n_shared: 4,
            l0_target: 2,
            steps: 300,
            batch_size: 64,
            eval_interval: 0,
            log_interval: 50,
            dead_window: 100,
            threshold_decay: 0.9,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..XcTrainConfig::default()
        }
    }

    #[test]
    fn fve_definitional_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.0, 5.0]]);
        assert_eq!(variance_explained(&x, &x).unwrap(), 1.0);
        let mean = column_mean(&x);
        let mut xm = Matrix::zeros(3, 2);
        xm.add_row_broadcast(&mean);
        assert!(variance_explained(&x, &xm).unwrap().abs() < 1e-15);
        let h = Matrix::from_rows(&[[1.5, 2.0], [2.0, -1.0], [0.0, 4.0]]);
        // Column means (4/3, 2); squared error 0.25 + 1 + 1.
        let mx = 4.0 / 3.0;
        let var = (1.0 - mx) * (1.0 - mx) + (3.0 - mx) * (3.0 - mx) + mx * mx + 0.0 + 9.0 + 9.0;
        let want = 1.0 - 2.25 / var;
        assert!((variance_explained(&x, &h).unwrap() - want).abs() < 1e-12);
        let flat = Matrix::filled(4, 2, 3.0);
        assert!(variance_explained(&flat, &flat).is_err());
    }

    #[test]
    fn budgets_split_and_cap() {
        let cfg = XcTrainConfig {
            l0_target: 8,
            ..XcTrainConfig::default()
        };
        assert_eq!(budgets(&cfg, 64, 256, 10), (40, 40));
        assert_eq!(budgets(&cfg, 0, 256, 10), (0, 80));
        assert_eq!(budgets(&cfg, 256, 256, 10), (80, 0));
        assert_eq!(budgets(&cfg, 2, 256, 10), (20, 40));
    }

    #[test]
    fn validation() {
        let ok = small_cfg();
        assert!(ok.validate(6, 6).is_ok());
        assert!(ok.validate(6, 5).is_err());
        let neg = XcTrainConfig { lambda: -1.0, ..small_cfg() };
        assert!(neg.validate(6, 6).is_err());
        let big = XcTrainConfig { l0_target: 17, ..small_cfg() };
        assert!(big.validate(6, 6).is_err());
        let sl = XcTrainConfig {
            variant: Variant::SharedL1,
            n_shared: 0,
            ..small_cfg()
        };
        assert!(sl.validate(6, 6).is_err());
        assert_eq!(XcTrainConfig::default().lambda_shared(), 0.7);
        assert_eq!(XcTrainConfig::default().dictionary_size(64, 64), 2048);
    }

    #[test]
    fn lr_schedule_warms_up_and_decays() {
        let cfg = XcTrainConfig {
            steps: 100,
            warmup_steps: 10,
            decay_fraction: 0.5,
            ..XcTrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 1e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(20), 1e-3);
        assert!((cfg.lr_at(75) - 5e-4).abs() < 1e-18);
        assert!(cfg.lr_at(99) > 0.0);
    }

    #[test]
    fn topk_training_learns_and_is_deterministic() {
        let data = sparse_pairs(2000, 1);
        let eval = sparse_pairs(500, 2);
        let mut logs = Vec::new();
        let (p, m) = train_crosscoder(&small_cfg(), &data, Some(&eval), &mut |m| logs.push(m.clone())).unwrap();
        assert_eq!(logs.len(), 6);
        assert!(logs[0].total > m.total);
        let fa = m.fve_a.unwrap();
        assert!(fa > 0.5 && fa <= 1.0, "fve {fa}");
        assert!(p.thresholds.is_some());
        for &i in p.shared_indices() {
            assert_eq!(p.decoder_row(Model::A, i), p.decoder_row(Model::B, i));
        }
        let (p2, m2) = train_crosscoder(&small_cfg(), &data, Some(&eval), &mut |_| {}).unwrap();
        assert_eq!(p, p2);
        assert_eq!(m, m2);
    }

    #[test]
    fn tied_rows_stay_equal_every_step() {
        let data = sparse_pairs(300, 3);
        for steps in 1..5 {
            let cfg = XcTrainConfig { steps, ..small_cfg() };
            let (p, _) = train_crosscoder(&cfg, &data, None, &mut |_| {}).unwrap();
            assert_eq!(p.steps_trained, steps);
            for &i in p.shared_indices() {
                assert_eq!(p.decoder_row(Model::A, i), p.decoder_row(Model::B, i));
            }
        }
    }

    #[test]
    fn l1_variants_train() {
        let data = sparse_pairs(1000, 4);
        for (variant, n_shared) in [(Variant::L1, 0), (Variant::SharedL1, 4)] {
            let cfg = XcTrainConfig {
                variant,
                n_shared,
                lambda: 0.01,
                ..small_cfg()
            };
            let (p, m) = train_crosscoder(&cfg, &data, Some(&data), &mut |_| {}).unwrap();
            assert!(p.thresholds.is_none());
            assert!(m.fve_a.unwrap() > 0.5, "{variant:?} fve {:?}", m.fve_a);
        }
    }

    #[test]
    fn exploding_learning_rate_reports_the_step() {
        let data = sparse_pairs(300, 5);
        let cfg = XcTrainConfig {
            adam: AdamConfig {
                lr: f64::INFINITY,
                ..AdamConfig::default()
            },
            warmup_steps: 0,
            ..small_cfg()
        };
        match train_crosscoder(&cfg, &data, None, &mut |_| {}) {
            Err(Error::NonFinite { step, .. }) => assert!(step < 3),
            other => panic!("expected a numerical failure, got {other:?}"),
        }
    }
}
