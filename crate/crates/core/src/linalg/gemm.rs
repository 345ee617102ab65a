// SPDX-License-Identifier: MIT OR Apache-2.0

use core::sync::atomic::{AtomicBool, Ordering};

/// Borrowed strided matrix view. Strides are in elements.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    /// Panics if the view would read past the end of `data`.
    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "strided view out of bounds");
        }
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Transposed view; no copy.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[cfg(feature = "parallel")]
    fn sub_rows(self, start: usize, count: usize) -> Self {
        let offset = start * self.rs;
        Self {
            data: &self.data[offset.min(self.data.len())..],
            rows: count,
            ..self
        }
    }
}

static PARALLEL_ROWS: AtomicBool = AtomicBool::new(false);

/// Enables row-parallel products when the `parallel` feature is built in.
/// Results are identical either way.
pub fn set_parallel_rows(on: bool) {
    PARALLEL_ROWS.store(on, Ordering::Relaxed);
}

#[cfg(feature = "parallel")]
const ROW_CHUNK: usize = 64;

/// `c = a * b + beta * c` where `c` is row-major with leading dimension `ldc`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, n) = (a.rows, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");

    #[cfg(feature = "parallel")]
    if PARALLEL_ROWS.load(Ordering::Relaxed) && m >= 2 * ROW_CHUNK {
        use rayon::prelude::*;
        c[..(m - 1) * ldc + n]
            .par_chunks_mut(ROW_CHUNK * ldc)
            .enumerate()
            .for_each(|(i, chunk)| {
                let start = i * ROW_CHUNK;
                let rows = ROW_CHUNK.min(m - start);
                gemm_serial(a.sub_rows(start, rows), b, beta, chunk, ldc);
            });
        return;
    }
    gemm_serial(a, b, beta, c, ldc);
}

fn gemm_serial(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if k == 0 {
        for i in 0..m {
            for x in &mut c[i * ldc..i * ldc + n] {
                *x *= beta;
            }
        }
        return;
    }
    // SAFETY: MatRef construction and the assert in `gemm` bound every index
    // the kernel touches; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
