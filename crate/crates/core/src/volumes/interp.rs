use std::cell::Cell;

use ndarray::ArrayView3;

/// Behaviour for sample positions outside the voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Corners outside the lattice contribute this constant value.
    Fill(f64),
    /// Positions are clamped to the lattice edge.
    Clamp,
}

thread_local! {
    static INTERP_PASSES: Cell<usize> = const { Cell::new(0) };
}

/// Record one full interpolation pass over stored voxel data. Called once
/// per volume resampling, not once per voxel, so tests can assert how many
/// times image data was actually interpolated.
pub(crate) fn note_interpolation_pass() {
    INTERP_PASSES.with(|c| c.set(c.get() + 1));
}

pub fn interpolation_pass_count() -> usize {
    INTERP_PASSES.with(|c| c.get())
}

pub fn reset_interpolation_pass_count() {
    INTERP_PASSES.with(|c| c.set(0));
}

#[inline]
fn corner(data: &ArrayView3<f64>, i: isize, j: isize, k: isize, fill: f64) -> f64 {
    let (nx, ny, nz) = data.dim();
    if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
        fill
    } else {
        data[(i as usize, j as usize, k as usize)]
    }
}

#[inline]
fn clamp_pos(p: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if p < 0.0 {
        (0.0, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Interpolation cell for a sample position: integer base corner, per-axis
/// fractions, and which axes were clamped. Shared by the value, gradient,
/// and adjoint (scatter) paths so they always agree on the cell.
#[inline]
pub(crate) fn cell(
    dims: [usize; 3],
    pos: [f64; 3],
    boundary: Boundary,
) -> ([isize; 3], [f64; 3], [bool; 3]) {
    let (p, clamped) = match boundary {
        Boundary::Fill(_) => {
            // Positions at or past [-2, n+1] are indistinguishable (every
            // corner is outside the lattice), so cap them there to keep the
            // integer corner arithmetic in range for any finite input.
            let mut p = [0.0; 3];
            for a in 0..3 {
                let v = pos[a];
                p[a] = if v.is_nan() {
                    -2.0
                } else {
                    v.clamp(-2.0, dims[a] as f64 + 1.0)
                };
            }
            (p, [false; 3])
        }
        Boundary::Clamp => {
            let mut p = [0.0; 3];
            let mut cl = [false; 3];
            for a in 0..3 {
                let (v, c) = clamp_pos(pos[a], dims[a]);
                p[a] = v;
                cl[a] = c;
            }
            (p, cl)
        }
    };
    let mut base = [0isize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let b = p[a].floor();
        let mut fr = p[a] - b;
        let mut bi = b as isize;
        // A position exactly on the top lattice plane belongs to the last
        // in-bounds cell (f = 1), not to a phantom cell beyond it.
        if dims[a] >= 2 && fr == 0.0 && bi == dims[a] as isize - 1 {
            bi -= 1;
            fr = 1.0;
        }
        base[a] = bi;
        f[a] = fr;
    }
    (base, f, clamped)
}

/// The eight lattice corners of a sample's cell with their trilinear
/// weights. Corners outside the lattice are `None`: they read the fill
/// value on interpolation and absorb no mass on scatter. Weights sum to 1.
pub(crate) fn scatter_weights(
    dims: [usize; 3],
    pos: [f64; 3],
    boundary: Boundary,
) -> [(Option<[usize; 3]>, f64); 8] {
    let (base, f, _) = cell(dims, pos, boundary);
    let mut out = [(None, 0.0); 8];
    for (n, slot) in out.iter_mut().enumerate() {
        let d = [(n >> 2) & 1, (n >> 1) & 1, n & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            w *= if d[a] == 1 { f[a] } else { 1.0 - f[a] };
            let q = base[a] + d[a] as isize;
            if q < 0 || q >= dims[a] as isize {
                inside = false;
            } else {
                idx[a] = q as usize;
            }
        }
        *slot = (inside.then_some(idx), w);
    }
    out
}

/// Trilinear interpolation at a continuous voxel coordinate.
pub fn trilinear(data: ArrayView3<f64>, pos: [f64; 3], boundary: Boundary) -> f64 {
    trilinear_grad(data, pos, boundary).0
}

/// Trilinear interpolation with the analytic gradient of the value with
/// respect to the voxel coordinate (per-axis, in reciprocal voxel units;
/// divide by spacing for world-space gradients).
pub fn trilinear_grad(data: ArrayView3<f64>, pos: [f64; 3], boundary: Boundary) -> (f64, [f64; 3]) {
    let (nx, ny, nz) = data.dim();
    let dims = [nx, ny, nz];
    let fill = match boundary {
        Boundary::Fill(f) => f,
        Boundary::Clamp => 0.0,
    };
    let (base, f, clamped) = cell(dims, pos, boundary);
    let (i0, j0, k0) = (base[0], base[1], base[2]);

    let mut c = [[[0.0; 2]; 2]; 2];
    for (di, plane) in c.iter_mut().enumerate() {
        for (dj, row) in plane.iter_mut().enumerate() {
            for (dk, v) in row.iter_mut().enumerate() {
                *v = corner(&data, i0 + di as isize, j0 + dj as isize, k0 + dk as isize, fill);
            }
        }
    }

    // Collapse z, then y, keeping the partial sums needed for the gradient.
    let cz = |a: usize, b: usize| c[a][b][0] * (1.0 - f[2]) + c[a][b][1] * f[2];
    let c00 = cz(0, 0);
    let c01 = cz(0, 1);
    let c10 = cz(1, 0);
    let c11 = cz(1, 1);
    let c0 = c00 * (1.0 - f[1]) + c01 * f[1];
    let c1 = c10 * (1.0 - f[1]) + c11 * f[1];
    let value = c0 * (1.0 - f[0]) + c1 * f[0];

    let dx = c1 - c0;
    let dy = (c01 - c00) * (1.0 - f[0]) + (c11 - c10) * f[0];
    let dz_at = |a: usize, b: usize| c[a][b][1] - c[a][b][0];
    let dz = (dz_at(0, 0) * (1.0 - f[1]) + dz_at(0, 1) * f[1]) * (1.0 - f[0])
        + (dz_at(1, 0) * (1.0 - f[1]) + dz_at(1, 1) * f[1]) * f[0];

    let mut grad = [dx, dy, dz];
    for a in 0..3 {
        if clamped[a] {
            grad[a] = 0.0;
        }
    }
    (value, grad)
}

/// Nearest-neighbour lookup at a continuous voxel coordinate; positions
/// rounding outside the lattice return `fill`.
pub fn nearest<T: Copy>(data: ArrayView3<T>, pos: [f64; 3], fill: T) -> T {
    let (nx, ny, nz) = data.dim();
    let i = pos[0].round();
    let j = pos[1].round();
    let k = pos[2].round();
    if i < 0.0 || j < 0.0 || k < 0.0 || i >= nx as f64 || j >= ny as f64 || k >= nz as f64 {
        return fill;
    }
    data[(i as usize, j as usize, k as usize)]
}
