// SPDX-License-Identifier: MIT OR Apache-2.0

use super::Matrix;
use crate::math::{exp, ln};
use crate::{Error, Result};

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = exp(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Returns `log Z` shifted form: writes `x - logsumexp(x)` into `out`.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row {
        sum += exp(v - max);
    }
    let lse = max + ln(sum);
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    if out.cols() > 0 {
        for r in out.data_mut().chunks_exact_mut(m.cols()) {
            softmax_in_place(r);
        }
    }
    out
}

/// Mean token cross-entropy and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f64,
    /// `(softmax - onehot) / rows`
    pub grad: Matrix,
}

pub fn cross_entropy(logits: &Matrix, targets: &[u32]) -> Result<CrossEntropy> {
    let (rows, vocab) = logits.shape();
    if targets.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.shape(),
            rhs: (targets.len(), 1),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Index {
            what: "target token",
            index: t as usize,
            len: vocab,
        });
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    let scale = 1.0 / rows.max(1) as f64;
    let mut logp = alloc::vec![0.0; vocab];
    for (i, &t) in targets.iter().enumerate() {
        log_softmax_row(logits.row(i), &mut logp);
        loss -= logp[t as usize];
        let g = grad.row_mut(i);
        g[t as usize] -= 1.0;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok(CrossEntropy {
        loss: loss * scale,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_row() {
        let s = softmax_rows(&Matrix::zeros(1, 3));
        for &v in s.data() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn saturated_row() {
        let s = softmax_rows(&Matrix::from_rows(&[[100.0, 0.0]]));
        assert_relative_eq!(s.get(0, 0), 1.0, epsilon = 1e-15);
        // e^-100 / (1 + e^-100)
        assert_relative_eq!(s.get(0, 1), 3.720_075_976_020_836e-44, max_relative = 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let ce = cross_entropy(&Matrix::zeros(3, 7), &[0, 3, 6]).unwrap();
        assert_relative_eq!(ce.loss, ln(7.0), epsilon = 1e-14);
    }

    #[test]
    fn hand_evaluated_loss() {
        let ce = cross_entropy(&Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]), &[0]).unwrap();
        // -ln(e / (e + 3))
        assert_relative_eq!(ce.loss, 0.743_668_380_628_679, epsilon = 1e-12);
    }

    #[test]
    fn margin_drives_loss_to_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let ce = cross_entropy(&Matrix::from_rows(&[[margin, 0.0, 0.0]]), &[0]).unwrap();
            assert!(ce.loss < last);
            last = ce.loss;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn out_of_range_target() {
        let e = cross_entropy(&Matrix::zeros(1, 4), &[4]).unwrap_err();
        assert!(matches!(e, Error::Index { index: 4, .. }));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = rng::stream(11, 0);
        let logits = Matrix::from_fn(4, 8, |_, _| rng::normal(&mut r));
        let targets = [1, 7, 0, 3];
        let ce = cross_entropy(&logits, &targets).unwrap();
        let h = 1e-5;
        for idx in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[idx] += h;
            let mut m = logits.clone();
            m.data_mut()[idx] -= h;
            let fd = (cross_entropy(&p, &targets).unwrap().loss
                - cross_entropy(&m, &targets).unwrap().loss)
                / (2.0 * h);
            let an = ce.grad.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            assert!(rel <= 1e-6, "idx {idx}: fd {fd} analytic {an} rel {rel}");
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..16),
            shift in -100.0f64..100.0,
        ) {
            let m = Matrix::from_rows(core::slice::from_ref(&row));
            let s = softmax_rows(&m);
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            let shifted: alloc::vec::Vec<f64> = row.iter().map(|v| v + shift).collect();
            let s2 = softmax_rows(&Matrix::from_rows(&[shifted]));
            prop_assert!(s.max_abs_diff(&s2) <= 1e-12);
        }
    }
}
