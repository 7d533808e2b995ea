//! 2-D convolution as im2col + gemm, with batch-parallel forward/backward.
//!
//! Gradient reduction over the batch is performed by collecting per-image
//! partials in index order and summing sequentially, so results are
//! bit-identical regardless of thread scheduling.

use super::Elem;
use ndarray::{Array2, Array4, ArrayView4, ArrayViewMut2, Axis};
use rayon::prelude::*;

pub(crate) fn out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Fill `cols` (C*kh*kw, oh*ow) with patches of one image (C,H,W).
fn im2col<T: Elem>(
    img: &ndarray::ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mut cols: ArrayViewMut2<T>,
) {
    let (c_in, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let oh = out_size(h, kh, stride, pad);
    let ow = out_size(w, kw, stride, pad);
    debug_assert_eq!(cols.shape(), &[c_in * kh * kw, oh * ow]);
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = cols.row_mut(row);
                let out_slice = out_row.as_slice_mut().expect("contiguous im2col row");
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let base = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        out_slice[base..base + ow].iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = img.index_axis(Axis(0), ci);
                    let src_row = src_row.index_axis(Axis(0), iy as usize);
                    let src = src_row.as_slice().expect("contiguous image row");
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        out_slice[base + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back into an image gradient (C,H,W).
fn col2im<T: Elem>(
    cols: &Array2<T>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<T> {
    let oh = out_size(h, kh, stride, pad);
    let ow = out_size(w, kw, stride, pad);
    let mut img = ndarray::Array3::<T>::zeros((c_in, h, w));
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = cols.row(row);
                let col = col_row.as_slice().expect("contiguous col row");
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[[ci, iy as usize, ix as usize]] += col[base + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

/// x: (B, Cin, H, W), w: (Cout, Cin, kh, kw) -> (B, Cout, OH, OW)
pub fn conv2d_forward<T: Elem>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (b, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, wc_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c_in, wc_in, "conv2d channel mismatch");
    let oh = out_size(h, kh, stride, pad);
    let ow = out_size(wd, kw, stride, pad);
    let k = c_in * kh * kw;
    let w2 = w
        .to_shape((c_out, k))
        .expect("conv weight reshape")
        .to_owned();

    let per_image: Vec<Array2<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let img = x.index_axis(Axis(0), bi);
            let mut cols = Array2::<T>::zeros((k, oh * ow));
            im2col(&img, kh, kw, stride, pad, cols.view_mut());
            w2.dot(&cols)
        })
        .collect();

    let mut out = Array4::<T>::zeros((b, c_out, oh, ow));
    for (bi, block) in per_image.into_iter().enumerate() {
        let reshaped = block.into_shape_with_order((c_out, oh, ow)).unwrap();
        out.index_axis_mut(Axis(0), bi).assign(&reshaped);
    }
    out
}

/// Returns (grad_x, grad_w); either can be skipped.
pub fn conv2d_backward<T: Elem>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    grad_out: &ArrayView4<T>,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Array4<T>>, Option<Array4<T>>) {
    let (b, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = out_size(h, kh, stride, pad);
    let ow = out_size(wd, kw, stride, pad);
    let k = c_in * kh * kw;
    let w2 = w
        .to_shape((c_out, k))
        .expect("conv weight reshape")
        .to_owned();
    let w2t = w2.t().to_owned();

    let parts: Vec<(Option<ndarray::Array3<T>>, Option<Array2<T>>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let img = x.index_axis(Axis(0), bi);
            let go = grad_out.index_axis(Axis(0), bi);
            let go2 = go
                .to_shape((c_out, oh * ow))
                .expect("grad_out reshape")
                .to_owned();
            let mut cols = Array2::<T>::zeros((k, oh * ow));
            im2col(&img, kh, kw, stride, pad, cols.view_mut());
            let gw = if need_gw { Some(go2.dot(&cols.t())) } else { None };
            let gx = if need_gx {
                let gcols = w2t.dot(&go2);
                Some(col2im(&gcols, c_in, h, wd, kh, kw, stride, pad))
            } else {
                None
            };
            (gx, gw)
        })
        .collect();

    let grad_x = if need_gx {
        let mut gx = Array4::<T>::zeros((b, c_in, h, wd));
        for (bi, (part, _)) in parts.iter().enumerate() {
            gx.index_axis_mut(Axis(0), bi).assign(part.as_ref().unwrap());
        }
        Some(gx)
    } else {
        None
    };
    let grad_w = if need_gw {
        let mut acc = Array2::<T>::zeros((c_out, k));
        for (_, part) in parts.iter() {
            acc += part.as_ref().unwrap();
        }
        Some(acc.into_shape_with_order((c_out, c_in, kh, kw)).unwrap())
    } else {
        None
    };
    (grad_x, grad_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn naive_conv(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (b, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = out_size(h, kh, stride, pad);
        let ow = out_size(wd, kw, stride, pad);
        let mut out = Array4::<f64>::zeros((b, c_out, oh, ow));
        for bi in 0..b {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ki as usize, kj as usize]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_conv() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for &(stride, pad, kh) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (2, 3, 7)] {
            let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));
            let w = Array4::from_shape_fn((4, 3, kh, kh), |_| rng.gen_range(-1.0..1.0));
            let fast = conv2d_forward(&x.view(), &w.view(), stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            let diff = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "stride={stride} pad={pad} diff={diff}");
        }
    }
}
