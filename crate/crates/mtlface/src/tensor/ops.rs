//! Forward/backward kernels that are too fiddly to inline in the graph.

use super::{el, Elem};
use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, IxDyn};

/// Reduce a gradient to a broadcast source's shape by summing over the
/// broadcast axes.
pub fn reduce_to_shape<T: Elem>(g: &ArrayD<T>, target: &[usize]) -> ArrayD<T> {
    let mut cur = g.clone();
    while cur.ndim() > target.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for (ax, &t) in target.iter().enumerate() {
        if t == 1 && cur.shape()[ax] != 1 {
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(cur.shape(), target);
    cur
}

/// Numerically stable row softmax.
pub fn softmax_rows<T: Elem>(x: &ArrayView2<T>) -> Array2<T> {
    let (b, k) = (x.shape()[0], x.shape()[1]);
    let mut out = Array2::<T>::zeros((b, k));
    for bi in 0..b {
        let row = x.row(bi);
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut denom = T::zero();
        for ki in 0..k {
            let e = (row[ki] - mx).exp();
            out[[bi, ki]] = e;
            denom += e;
        }
        let inv = T::one() / denom;
        for ki in 0..k {
            out[[bi, ki]] = out[[bi, ki]] * inv;
        }
    }
    out
}

/// Half-pixel-center index/weight table for a 2x bilinear resize.
fn lerp_table(n_in: usize) -> Vec<(usize, usize, f64)> {
    // (i0, i1, w1): out = (1-w1)*x[i0] + w1*x[i1]
    (0..2 * n_in)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let frac = src - f;
            let i0 = f.max(0.0) as usize;
            let i1 = ((f + 1.0).max(0.0) as usize).min(n_in - 1);
            let i0 = i0.min(n_in - 1);
            (i0, i1, frac)
        })
        .collect()
}

pub fn upsample2x_forward<T: Elem>(x: &ArrayView4<T>) -> Array4<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let rows = lerp_table(h);
    let cols = lerp_table(w);
    let mut out = Array4::<T>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            let src = x.index_axis(Axis(0), bi);
            let src = src.index_axis(Axis(0), ci);
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                let wy = el::<T>(wy);
                let ones_wy = T::one() - wy;
                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let wx = el::<T>(wx);
                    let one_wx = T::one() - wx;
                    let v = ones_wy * (one_wx * src[[y0, x0]] + wx * src[[y0, x1]])
                        + wy * (one_wx * src[[y1, x0]] + wx * src[[y1, x1]]);
                    out[[bi, ci, oy, ox]] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Elem>(go: &ArrayView4<T>) -> Array4<T> {
    let (b, c, oh, ow) = (go.shape()[0], go.shape()[1], go.shape()[2], go.shape()[3]);
    let (h, w) = (oh / 2, ow / 2);
    let rows = lerp_table(h);
    let cols = lerp_table(w);
    let mut gx = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                let wy = el::<T>(wy);
                let one_wy = T::one() - wy;
                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let wx = el::<T>(wx);
                    let one_wx = T::one() - wx;
                    let g = go[[bi, ci, oy, ox]];
                    gx[[bi, ci, y0, x0]] += one_wy * one_wx * g;
                    gx[[bi, ci, y0, x1]] += one_wy * wx * g;
                    gx[[bi, ci, y1, x0]] += wy * one_wx * g;
                    gx[[bi, ci, y1, x1]] += wy * wx * g;
                }
            }
        }
    }
    gx
}

/// Returns (normalized, inv_std per (B,C)).
pub fn instance_norm_forward<T: Elem>(x: &ArrayView4<T>, eps: T) -> (Array4<T>, Array2<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = el::<T>((h * w) as f64);
    let mut out = Array4::<T>::zeros((b, c, h, w));
    let mut inv_std = Array2::<T>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            let mean = plane.sum() / n;
            let mut var = T::zero();
            for &v in plane.iter() {
                let d = v - mean;
                var += d * d;
            }
            var = var / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[[bi, ci]] = is;
            let mut dst = out.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut dst).and(&plane).for_each(|o, &v| {
                *o = (v - mean) * is;
            });
        }
    }
    (out, inv_std)
}

/// `y` is the normalized output saved from the forward pass.
pub fn instance_norm_backward<T: Elem>(
    y: &ArrayView4<T>,
    go: &ArrayView4<T>,
    inv_std: &Array2<T>,
) -> Array4<T> {
    let (b, c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let n = el::<T>((h * w) as f64);
    let mut gx = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let yv = y.index_axis(Axis(0), bi);
            let yv = yv.index_axis(Axis(0), ci);
            let gv = go.index_axis(Axis(0), bi);
            let gv = gv.index_axis(Axis(0), ci);
            let sum_g = gv.sum();
            let mut sum_gy = T::zero();
            ndarray::Zip::from(&gv).and(&yv).for_each(|&g, &yy| {
                sum_gy += g * yy;
            });
            let is = inv_std[[bi, ci]];
            let mut dst = gx.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut dst)
                .and(&gv)
                .and(&yv)
                .for_each(|o, &g, &yy| {
                    *o = is / n * (n * g - sum_g - yy * sum_gy);
                });
        }
    }
    gx
}

/// One-hot constant planes: (B, n_groups, H, W) with plane `group[b]` set to 1.
pub fn onehot_planes<T: Elem>(groups: &[usize], n_groups: usize, h: usize, w: usize) -> ArrayD<T> {
    let b = groups.len();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[b, n_groups, h, w]));
    for (bi, &g) in groups.iter().enumerate() {
        assert!(g < n_groups, "group {g} out of range (n_g={n_groups})");
        out.index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), g)
            .fill(T::one());
    }
    out
}
