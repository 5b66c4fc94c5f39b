//! Row-chunked parallel GEMM on top of `matrixmultiply::dgemm`.
//!
//! Output rows are computed in fixed chunks of [`CHUNK`] rows, each chunk by
//! a single sequential kernel call, so results are bitwise identical no
//! matter how many rayon threads run.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

/// Rows per parallel work item. Fixed so that thread count cannot change
/// floating-point summation order.
const CHUNK: usize = 64;

/// `alpha * a @ b`, allocating the output.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul inner dims: {} vs {}", ka, kb);
    let mut c = Array2::<f64>::zeros((m, n));
    gemm_into(a, b, c.view_mut());
    c
}

/// `c = a @ b` where `c` is a standard-layout matrix.
pub fn gemm_into(a: ArrayView2<f64>, b: ArrayView2<f64>, mut c: ndarray::ArrayViewMut2<f64>) {
    let (m, k) = a.dim();
    let (_, n) = b.dim();
    assert!(c.is_standard_layout());
    let (rsa, csa) = (a.strides()[0], a.strides()[1]);
    let (rsb, csb) = (b.strides()[0], b.strides()[1]);
    let ap = a.as_ptr();
    let bp = b.as_ptr();
    if m * n * k == 0 {
        return;
    }
    if m <= CHUNK {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, ap, rsa, csa, bp, rsb, csb, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
        return;
    }
    // Wrap raw pointers so the closure can be sent across threads; each chunk
    // writes a disjoint slab of c.
    struct Ptr(*const f64);
    unsafe impl Sync for Ptr {}
    impl Ptr {
        fn get(&self) -> *const f64 {
            self.0
        }
    }
    let ap = Ptr(ap);
    let bp = Ptr(bp);
    let cslice = c.as_slice_mut().expect("standard layout");
    cslice
        .par_chunks_mut(CHUNK * n)
        .enumerate()
        .for_each(|(ci, slab)| {
            let row0 = ci * CHUNK;
            let rows = slab.len() / n;
            unsafe {
                matrixmultiply::dgemm(
                    rows, k, n, 1.0,
                    ap.get().offset(row0 as isize * rsa), rsa, csa,
                    bp.get(), rsb, csb,
                    0.0, slab.as_mut_ptr(), n as isize, 1,
                );
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn naive(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (m, k) = a.dim();
        let (_, n) = b.dim();
        let mut c = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[[i, l]] * b[[l, j]];
                }
                c[[i, j]] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive() {
        let a = Array2::from_shape_fn((131, 17), |(i, j)| ((i * 31 + j * 7) % 13) as f64 - 6.0);
        let b = Array2::from_shape_fn((17, 23), |(i, j)| ((i * 5 + j * 11) % 7) as f64 - 3.0);
        let c = matmul(a.view(), b.view());
        let r = naive(&a, &b);
        assert!(c.iter().zip(r.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn transposed_views() {
        let a = Array2::from_shape_fn((40, 200), |(i, j)| (i as f64 - j as f64) * 0.01);
        let b = Array2::from_shape_fn((40, 30), |(i, j)| (i * j % 5) as f64 * 0.1);
        // a^T @ b via strided views, no copies
        let c = matmul(a.t(), b.view());
        let r = naive(&a.t().to_owned(), &b);
        assert!(c.iter().zip(r.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}
