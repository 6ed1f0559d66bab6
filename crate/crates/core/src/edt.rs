//! Exact separable Euclidean distance transforms.
//!
//! The 1-D pass is the lower-envelope-of-parabolas algorithm of Felzenszwalb
//! and Huttenlocher, run once per axis with the axis spacing folded into the
//! parabola widths, so anisotropic voxels come out exact. Positions without
//! any source stay at infinity.

use ndarray::{Array3, ArrayView3, Axis};

/// 1-D squared distance transform: `out[q] = min_p f[p] + ((q - p) * spacing)^2`.
/// Infinite entries of `f` act as missing parabolas.
pub(crate) fn squared_dt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    let s2 = spacing * spacing;

    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }

    let mut hull = vec![0usize; finite.len()];
    let mut cut = vec![0.0f64; finite.len() + 1];
    let mut k = 0usize;
    hull[0] = finite[0];
    cut[0] = f64::NEG_INFINITY;
    cut[1] = f64::INFINITY;

    let intersect = |q: usize, p: usize| -> f64 {
        (f[q] - f[p] + s2 * ((q * q) as f64 - (p * p) as f64))
            / (2.0 * s2 * (q as f64 - p as f64))
    };

    for &q in &finite[1..] {
        let mut s = intersect(q, hull[k]);
        while s <= cut[k] {
            k -= 1;
            s = intersect(q, hull[k]);
        }
        k += 1;
        hull[k] = q;
        cut[k] = s;
        cut[k + 1] = f64::INFINITY;
    }

    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while cut[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - hull[k] as f64;
        *o = d * d * s2 + f[hull[k]];
    }
}

fn axis_pass(sq: &mut Array3<f64>, axis: usize, spacing: f64) {
    let n = sq.shape()[axis];
    let mut buf = vec![0.0f64; n];
    let mut res = vec![0.0f64; n];
    for mut lane in sq.lanes_mut(Axis(axis)) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        squared_dt_1d(&buf, spacing, &mut res);
        for (v, r) in lane.iter_mut().zip(res.iter()) {
            *v = *r;
        }
    }
}

/// Exact Euclidean distance (mm) from every voxel centre to the nearest
/// `true` voxel centre. All-false input yields all-infinity.
pub fn edt_to_sources(mask: ArrayView3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let dim = mask.dim();
    let mut sq = Array3::from_shape_fn(dim, |idx| if mask[idx] { 0.0 } else { f64::INFINITY });
    for axis in 0..3 {
        axis_pass(&mut sq, axis, spacing[axis]);
    }
    sq.mapv_into(f64::sqrt)
}
