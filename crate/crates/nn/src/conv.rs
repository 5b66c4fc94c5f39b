//! im2col / col2im kernels for stride-2 convolutions. Shapes follow the
//! usual [N, C, H, W] layout; conv weights are [OC, IC, K, K] and transposed
//! conv weights are [IC, OC, K, K], so the backward pass of a convolution can
//! reuse the same weight tensor as a transposed convolution and vice versa.

use crate::gemm;
use ndarray::{Array2, Array4, ArrayView4, s};
use rayon::prelude::*;

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

pub fn convt_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h - 1) * stride + k - 2 * pad
}

/// Extract conv patches for one sample into a [OH*OW, C*K*K] block.
fn im2col_one(
    x: &ndarray::ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let (c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let row_len = c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            let iy0 = (oy * stride) as isize - pad as isize;
            let ix0 = (ox * stride) as isize - pad as isize;
            let mut idx = 0;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        row[idx..idx + k].fill(0.0);
                        idx += k;
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        row[idx] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[[ci, iy as usize, ix as usize]]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Batched im2col: [N, C, H, W] -> [N*OH*OW, C*K*K].
pub fn im2col(x: &ArrayView4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let row_len = c * k * k;
    let mut cols = Array2::<f64>::zeros((n * oh * ow, row_len));
    let slab = oh * ow * row_len;
    let buf = cols.as_slice_mut().unwrap();
    buf.par_chunks_mut(slab).enumerate().for_each(|(i, chunk)| {
        im2col_one(&x.slice(s![i, .., .., ..]), k, stride, pad, chunk);
    });
    cols
}

/// Scatter-add of patch rows back to one image.
fn col2im_one(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut ndarray::ArrayViewMut3<f64>,
) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let row_len = c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            let iy0 = (oy * stride) as isize - pad as isize;
            let ix0 = (ox * stride) as isize - pad as isize;
            let mut idx = 0;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += k;
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            out[[ci, iy as usize, ix as usize]] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Batched col2im: [N*OH*OW, C*K*K] -> [N, C, H, W] (accumulating).
pub fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let row_len = c * k * k;
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    let colbuf = cols.as_slice().unwrap();
    let img_len = c * h * w;
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(img_len)
        .enumerate()
        .for_each(|(i, img)| {
            let chunk = &colbuf[i * oh * ow * row_len..(i + 1) * oh * ow * row_len];
            let mut view =
                ndarray::ArrayViewMut3::from_shape((c, h, w), img).unwrap();
            col2im_one(chunk, c, h, w, k, stride, pad, &mut view);
        });
    out
}

/// Reorder [N, C, H, W] to row-major [N*H*W, C].
pub fn to_rows(x: &ArrayView4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let perm = x.permuted_axes([0, 2, 3, 1]);
    let flat = perm
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .unwrap();
    flat
}

/// Inverse of [`to_rows`].
pub fn from_rows(rows: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let x = rows
        .view()
        .into_shape_with_order((n, h, w, c))
        .unwrap()
        .permuted_axes([0, 3, 1, 2]);
    x.as_standard_layout().into_owned()
}

/// Forward convolution. `w` is [OC, IC, K, K].
pub fn conv2d(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, _c, h, wd) = x.dim();
    let (oc, _ic, k, _) = w.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(wd, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let w2 = w
        .into_shape_with_order((oc, w.len() / oc))
        .unwrap();
    // [N*OH*OW, CKK] x [CKK, OC]
    let out_rows = gemm::matmul(cols.view(), w2.t());
    from_rows(&out_rows, n, oc, oh, ow)
}

/// Gradients of [`conv2d`]; either side can be skipped when not needed.
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    g: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>) {
    let (n, c, h, wd) = x.dim();
    let (oc, ic, k, _) = w.dim();
    let g_rows = to_rows(g); // [N*OH*OW, OC]
    let gw = want_w.then(|| {
        let cols = im2col(x, k, stride, pad); // [N*OH*OW, CKK]
        let gw2 = gemm::matmul(g_rows.t(), cols.view());
        gw2.into_shape_with_order((oc, ic, k, k)).unwrap()
    });
    let gx = want_x.then(|| {
        let w2 = w.into_shape_with_order((oc, w.len() / oc)).unwrap();
        let gcols = gemm::matmul(g_rows.view(), w2.view());
        col2im(&gcols, n, c, h, wd, k, stride, pad)
    });
    (gx, gw)
}

/// Forward transposed convolution. `w` is [IC, OC, K, K].
pub fn conv_transpose2d(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, _ic, ih, iw) = x.dim();
    let (ic_w, oc, k, _) = w.dim();
    let oh = convt_out_size(ih, k, stride, pad);
    let ow = convt_out_size(iw, k, stride, pad);
    let x_rows = to_rows(x); // [N*IH*IW, IC]
    let w2 = w.into_shape_with_order((ic_w, oc * k * k)).unwrap();
    let cols = gemm::matmul(x_rows.view(), w2.view()); // [N*IH*IW, OC*K*K]
    col2im(&cols, n, oc, oh, ow, k, stride, pad)
}

/// Gradients of [`conv_transpose2d`]; either side can be skipped.
pub fn conv_transpose2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    g: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>) {
    let (n, ic, ih, iw) = x.dim();
    let (_, oc, k, _) = w.dim();
    let gcols = im2col(&g.view(), k, stride, pad); // [N*IH*IW, OC*K*K]
    let w2 = w.into_shape_with_order((ic, oc * k * k)).unwrap();
    let gx = want_x.then(|| {
        let gx_rows = gemm::matmul(gcols.view(), w2.t());
        from_rows(&gx_rows, n, ic, ih, iw)
    });
    let gw = want_w.then(|| {
        let x_rows = to_rows(x);
        let gw2 = gemm::matmul(x_rows.t(), gcols.view()); // [IC, OC*K*K]
        gw2.into_shape_with_order((ic, oc, k, k)).unwrap()
    });
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn naive_conv(
        x: &Array4<f64>,
        w: &Array4<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (oc, _, k, _) = w.dim();
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(wd, k, stride, pad);
        let mut y = Array4::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        s += x[[ni, ci, iy as usize, ix as usize]]
                                            * w[[o, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[ni, o, oy, ox]] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 * 0.1 - 0.5
        });
        let w = Array4::from_shape_fn((4, 3, 4, 4), |(a, b, c, d)| {
            ((a + b * 2 + c * 3 + d * 5) % 7) as f64 * 0.1 - 0.3
        });
        let y = conv2d(&x.view(), &w.view(), 2, 1);
        let r = naive_conv(&x, &w, 2, 1);
        assert_eq!(y.dim(), (2, 4, 4, 4));
        assert!(y.iter().zip(r.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn convt_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights
        let x = Array4::from_shape_fn((1, 2, 8, 8), |(_, b, c, d)| {
            ((b * 3 + c * 5 + d * 7) % 13) as f64 * 0.07 - 0.4
        });
        let w = Array4::from_shape_fn((3, 2, 4, 4), |(a, b, c, d)| {
            ((a * 2 + b + c * 4 + d * 6) % 9) as f64 * 0.05 - 0.2
        });
        let y = Array4::from_shape_fn((1, 3, 4, 4), |(_, b, c, d)| {
            ((b + c * 2 + d * 3) % 5) as f64 * 0.1 - 0.2
        });
        let cx = conv2d(&x.view(), &w.view(), 2, 1);
        let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let ty = conv_transpose2d(&y.view(), &w.view(), 2, 1);
        assert_eq!(ty.dim(), (1, 2, 8, 8));
        let rhs: f64 = x.iter().zip(ty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn upsample_shape() {
        assert_eq!(convt_out_size(4, 4, 2, 1), 8);
        assert_eq!(convt_out_size(32, 4, 2, 1), 64);
        assert_eq!(conv_out_size(64, 4, 2, 1), 32);
        assert_eq!(conv_out_size(4, 4, 2, 1), 2);
        assert_eq!(conv_out_size(2, 4, 2, 1), 1);
    }
}
