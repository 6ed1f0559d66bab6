//! Stationary velocity fields and their integration into diffeomorphic
//! displacement fields, plus Jacobian analysis of arbitrary fields.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::par;
use crate::volumes::{Boundary, DisplacementField, SamplingGrid};

/// Stationary velocity field in mm per unit pseudo-time, sampled on a grid.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub grid: SamplingGrid,
    /// Shape `(nx, ny, nz, 3)`, world-mm components.
    pub data: Array4<f64>,
}

impl VelocityField {
    pub fn new(grid: SamplingGrid, data: Array4<f64>) -> Result<Self> {
        grid.validate()?;
        let dim = data.dim();
        if [dim.0, dim.1, dim.2] != grid.shape || dim.3 != 3 {
            return Err(Error::ShapeMismatch(format!(
                "grid {:?} vs velocity {:?}x{}",
                grid.shape,
                [dim.0, dim.1, dim.2],
                dim.3
            )));
        }
        Ok(VelocityField { grid, data })
    }

    pub fn zeros(grid: SamplingGrid) -> Self {
        let s = grid.shape;
        VelocityField {
            grid,
            data: Array4::zeros((s[0], s[1], s[2], 3)),
        }
    }

    pub fn max_norm(&self) -> f64 {
        let [nx, ny, nz] = self.grid.shape;
        let mut best = 0.0f64;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let v = Vector3::new(
                        self.data[(i, j, k, 0)],
                        self.data[(i, j, k, 1)],
                        self.data[(i, j, k, 2)],
                    );
                    best = best.max(v.norm());
                }
            }
        }
        best
    }
}

/// Number of scaling-and-squaring halvings for `steps = auto`: the smallest
/// count that brings the largest per-step displacement under half the finest
/// spacing, capped at 8.
pub fn auto_steps(v: &VelocityField) -> usize {
    let limit = 0.5 * v.grid.min_spacing();
    let mut max = v.max_norm();
    let mut k = 0usize;
    while k < 8 && max >= limit {
        max *= 0.5;
        k += 1;
    }
    k
}

/// Compose two displacement fields on the same grid:
/// `result(x) = inner(x) + outer(x + inner(x))`, with clamped trilinear
/// lookup of `outer` so edge voxels cannot inject NaNs.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    if outer.grid != inner.grid {
        return Err(Error::GridMismatch(
            "compose requires both fields on one grid".into(),
        ));
    }
    let grid = inner.grid.clone();
    let [nx, ny, nz] = grid.shape;
    let rows = par::map_indexed(grid.n_voxels(), |idx| {
        let [i, j, k] = grid.unlinear(idx);
        let x = grid.voxel_to_world([i as f64, j as f64, k as f64]);
        let ui = inner.at(i, j, k);
        let uo = outer.sample_with(x + ui, Boundary::Clamp);
        [ui[0] + uo[0], ui[1] + uo[1], ui[2] + uo[2]]
    });
    let mut data = Array4::zeros((nx, ny, nz, 3));
    for (idx, row) in rows.iter().enumerate() {
        let [i, j, k] = grid.unlinear(idx);
        for c in 0..3 {
            data[(i, j, k, c)] = row[c];
        }
    }
    DisplacementField::new(grid, data)
}

/// Integrate a stationary velocity field by scaling and squaring, returning
/// the forward transform `exp(v)` and its inverse `exp(-v)`.
pub fn integrate_svf(
    v: &VelocityField,
    steps: Option<usize>,
) -> Result<(DisplacementField, DisplacementField)> {
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "velocity field contains non-finite values".into(),
        ));
    }
    let k = steps.unwrap_or_else(|| auto_steps(v));
    let scale = 1.0 / (1u64 << k) as f64;

    let mut fwd = DisplacementField::new(v.grid.clone(), &v.data * scale)?;
    let mut inv = DisplacementField::new(v.grid.clone(), &v.data * -scale)?;
    for _ in 0..k {
        fwd = compose(&fwd, &fwd)?;
        inv = compose(&inv, &inv)?;
    }
    Ok((fwd, inv))
}

/// Index-space partial derivatives of one displacement component at a voxel:
/// central differences inside, one-sided on the borders.
#[inline]
fn partials_at(
    data: &Array4<f64>,
    shape: [usize; 3],
    i: usize,
    j: usize,
    k: usize,
    c: usize,
) -> [f64; 3] {
    let idx = [i, j, k];
    let mut out = [0.0; 3];
    for (a, o) in out.iter_mut().enumerate() {
        let n = shape[a];
        let (lo, hi, denom) = if n == 1 {
            (idx[a], idx[a], 1.0)
        } else if idx[a] == 0 {
            (0, 1, 1.0)
        } else if idx[a] == n - 1 {
            (n - 2, n - 1, 1.0)
        } else {
            (idx[a] - 1, idx[a] + 1, 2.0)
        };
        let mut p = idx;
        let mut q = idx;
        p[a] = hi;
        q[a] = lo;
        *o = (data[(p[0], p[1], p[2], c)] - data[(q[0], q[1], q[2], c)]) / denom;
    }
    out
}

/// Determinant of `I + du/dx` per voxel, spacing- and orientation-aware,
/// with world-space derivatives taken by central differences in the interior
/// and one-sided differences on the borders.
pub fn jacobian_determinant(t: &DisplacementField) -> Array3<f64> {
    let grid = &t.grid;
    let [nx, ny, nz] = grid.shape;
    // d(index)/d(world) for the world-space chain rule.
    let idx_per_world = Matrix3::from_diagonal(&Vector3::new(
        1.0 / grid.spacing[0],
        1.0 / grid.spacing[1],
        1.0 / grid.spacing[2],
    )) * grid.direction.transpose();

    let dets = par::map_indexed(grid.n_voxels(), |idx| {
        let [i, j, k] = grid.unlinear(idx);
        let mut g = Matrix3::zeros();
        for c in 0..3 {
            let p = partials_at(&t.data, grid.shape, i, j, k, c);
            for a in 0..3 {
                g[(c, a)] = p[a];
            }
        }
        let jac = g * idx_per_world;
        (Matrix3::identity() + jac).determinant()
    });
    Array3::from_shape_vec((nx, ny, nz), dets).expect("shape from n_voxels")
}

/// Fraction of voxels whose Jacobian determinant is non-positive.
pub fn fraction_of_foldings(t: &DisplacementField) -> f64 {
    let dets = jacobian_determinant(t);
    let folded = dets.iter().filter(|&&d| d <= 0.0).count();
    folded as f64 / dets.len() as f64
}
