//! Differentiable field operations: SVF integration, warping of stored
//! volumes, Jacobian determinants, and the gradient-magnitude regulariser.
//!
//! Field variables live on the tape in channel-first layout `[3, nx, ny, nz]`
//! with world-mm components, matching the storage convention of
//! [`DisplacementField`](crate::volumes::DisplacementField) up to the axis
//! permutation. Forward arithmetic mirrors the non-graph implementations in
//! [`crate::field`] exactly, so graph values and plain values agree to the
//! last bit.

use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array3, Array4, ArrayD, ArrayView3, Ix4, IxDyn};

use super::{ops, Tape, Var};
use crate::error::Result;
use crate::par;
use crate::volumes::interp::{note_interpolation_pass, scatter_weights, trilinear, trilinear_grad};
use crate::volumes::{AffineTransform, Boundary, DisplacementField, SamplingGrid};

/// Channel-first tape layout of a `(nx, ny, nz, 3)` field array.
pub fn channel_first(data: &Array4<f64>) -> ArrayD<f64> {
    data.view().permuted_axes([3, 0, 1, 2]).to_owned().into_dyn()
}

/// Tape field value back to `(nx, ny, nz, 3)` storage order.
pub fn channel_last(value: &ArrayD<f64>) -> Array4<f64> {
    let v = value
        .view()
        .into_dimensionality::<Ix4>()
        .expect("field value is 4-d");
    v.permuted_axes([1, 2, 3, 0]).to_owned()
}

/// Materialize a field variable's value as a displacement field.
pub fn displacement_from_value(grid: &SamplingGrid, value: &ArrayD<f64>) -> Result<DisplacementField> {
    DisplacementField::new(grid.clone(), channel_last(value))
}

#[inline]
fn flat(v: &ArrayD<f64>) -> &[f64] {
    v.as_slice().expect("tape values are standard layout")
}

#[inline]
fn channel(flat: &[f64], shape: [usize; 3], c: usize) -> ArrayView3<'_, f64> {
    let n = shape[0] * shape[1] * shape[2];
    ArrayView3::from_shape((shape[0], shape[1], shape[2]), &flat[c * n..(c + 1) * n])
        .expect("channel slice matches shape")
}

fn assert_field_shape(v: &ArrayD<f64>, grid: &SamplingGrid) {
    let [nx, ny, nz] = grid.shape;
    assert_eq!(v.shape(), &[3, nx, ny, nz][..], "field/grid shape mismatch");
}

fn field_dim(grid: &SamplingGrid) -> IxDyn {
    let [nx, ny, nz] = grid.shape;
    IxDyn(&[3, nx, ny, nz])
}

/// `d(index)/d(world)` of a grid, for routing world-space gradients into
/// voxel-space interpolation gradients.
fn index_per_world(grid: &SamplingGrid) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(
        1.0 / grid.spacing[0],
        1.0 / grid.spacing[1],
        1.0 / grid.spacing[2],
    )) * grid.direction.transpose()
}

/// Differentiable composition `result(x) = inner(x) + outer(x + inner(x))`
/// with clamped lookup of `outer`, both fields on the same grid.
pub fn compose_var(tape: &Tape, grid: &SamplingGrid, outer: Var, inner: Var) -> Var {
    let vo = tape.value(outer);
    let vi = tape.value(inner);
    assert_field_shape(&vo, grid);
    assert_field_shape(&vi, grid);
    let nvox = grid.n_voxels();
    let shape = grid.shape;

    let rows = {
        let fo = flat(&vo);
        let fi = flat(&vi);
        let grid = &grid;
        par::map_indexed(nvox, move |idx| {
            let [i, j, k] = grid.unlinear(idx);
            let w = grid.voxel_to_world([i as f64, j as f64, k as f64]);
            let a = Vector3::new(fi[idx], fi[nvox + idx], fi[2 * nvox + idx]);
            let q = grid.world_to_voxel(w + a);
            let mut out = [0.0; 3];
            for (c, o) in out.iter_mut().enumerate() {
                *o = a[c] + trilinear(channel(fo, shape, c), q, Boundary::Clamp);
            }
            out
        })
    };
    let mut data = vec![0.0; 3 * nvox];
    for (idx, row) in rows.iter().enumerate() {
        for c in 0..3 {
            data[c * nvox + idx] = row[c];
        }
    }
    let value = ArrayD::from_shape_vec(field_dim(grid), data).expect("sized above");

    let grid_b = grid.clone();
    tape.push_op(
        value,
        vec![outer, inner],
        Box::new(move |g| {
            let gf = flat(g);
            let fo = flat(&vo);
            let fi = flat(&vi);
            let nvox = grid_b.n_voxels();
            let shape = grid_b.shape;
            let p_t = index_per_world(&grid_b).transpose();

            // Gather pass: the identity term plus the outer field's spatial
            // gradient routed through the lookup position.
            let rows = {
                let grid = &grid_b;
                par::map_indexed(nvox, move |idx| {
                    let [i, j, k] = grid.unlinear(idx);
                    let w = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    let a = Vector3::new(fi[idx], fi[nvox + idx], fi[2 * nvox + idx]);
                    let q = grid.world_to_voxel(w + a);
                    let mut gi = [gf[idx], gf[nvox + idx], gf[2 * nvox + idx]];
                    for c in 0..3 {
                        let (_, gq) = trilinear_grad(channel(fo, shape, c), q, Boundary::Clamp);
                        let gw = p_t * Vector3::new(gq[0], gq[1], gq[2]);
                        let gc = gf[c * nvox + idx];
                        for (d, slot) in gi.iter_mut().enumerate() {
                            *slot += gc * gw[d];
                        }
                    }
                    (gi, q)
                })
            };

            // Scatter pass for the outer field, kept sequential so the
            // accumulation order is independent of thread count.
            let mut grad_inner = vec![0.0; 3 * nvox];
            let mut grad_outer = vec![0.0; 3 * nvox];
            for (idx, (gi, q)) in rows.iter().enumerate() {
                for c in 0..3 {
                    grad_inner[c * nvox + idx] = gi[c];
                }
                for (corner, wgt) in scatter_weights(shape, *q, Boundary::Clamp) {
                    let Some(ci) = corner else { continue };
                    let lin = grid_b.linear(ci[0], ci[1], ci[2]);
                    for c in 0..3 {
                        grad_outer[c * nvox + lin] += wgt * gf[c * nvox + idx];
                    }
                }
            }
            let dim = field_dim(&grid_b);
            vec![
                Some(ArrayD::from_shape_vec(dim.clone(), grad_outer).expect("sized")),
                Some(ArrayD::from_shape_vec(dim, grad_inner).expect("sized")),
            ]
        }),
    )
}

/// Scaling-and-squaring step count for a velocity value, mirroring the
/// non-graph rule: smallest k ≤ 8 bringing the largest per-step displacement
/// under half the finest spacing.
pub fn auto_steps_value(grid: &SamplingGrid, value: &ArrayD<f64>) -> usize {
    let nvox = grid.n_voxels();
    let f = flat(value);
    let mut max = 0.0f64;
    for idx in 0..nvox {
        let n = (f[idx] * f[idx]
            + f[nvox + idx] * f[nvox + idx]
            + f[2 * nvox + idx] * f[2 * nvox + idx])
            .sqrt();
        max = max.max(n);
    }
    let limit = 0.5 * grid.min_spacing();
    let mut k = 0;
    while k < 8 && max >= limit {
        max *= 0.5;
        k += 1;
    }
    k
}

/// Differentiable scaling-and-squaring integration of a stationary velocity
/// variable, returning the forward and inverse displacement variables.
pub fn integrate_svf_var(
    tape: &Tape,
    grid: &SamplingGrid,
    v: Var,
    steps: Option<usize>,
) -> (Var, Var) {
    let k = steps.unwrap_or_else(|| auto_steps_value(grid, &tape.value(v)));
    let scale = 1.0 / (1u64 << k) as f64;
    let mut fwd = ops::mul_scalar(tape, v, scale);
    let mut inv = ops::mul_scalar(tape, v, -scale);
    for _ in 0..k {
        fwd = compose_var(tape, grid, fwd, fwd);
        inv = compose_var(tape, grid, inv, inv);
    }
    (fwd, inv)
}

/// Differentiable warp of a stored scalar volume. Each output voxel centre
/// `y` is mapped through `w = pre(world(y))`, displaced to `w + u(w)`,
/// optionally pushed through `post`, and the source volume is interpolated
/// there (zero fill outside its extent). Gradients flow only into `u`; the
/// source data is a constant.
#[allow(clippy::too_many_arguments)]
pub fn warp(
    tape: &Tape,
    src: Rc<Array3<f64>>,
    src_grid: &SamplingGrid,
    u: Var,
    field_grid: &SamplingGrid,
    out_grid: &SamplingGrid,
    pre: Option<&AffineTransform>,
    post: Option<&AffineTransform>,
) -> Var {
    let vu = tape.value(u);
    assert_field_shape(&vu, field_grid);
    assert_eq!(
        src.dim(),
        (src_grid.shape[0], src_grid.shape[1], src_grid.shape[2]),
        "source volume does not match its grid"
    );
    let n_out = out_grid.n_voxels();
    let fshape = field_grid.shape;
    let fvox = fshape[0] * fshape[1] * fshape[2];

    note_interpolation_pass();
    let vals = {
        let fu = flat(&vu);
        let src: &Array3<f64> = &src;
        let (og, fg, sg) = (&out_grid, &field_grid, &src_grid);
        par::map_indexed(n_out, move |idx| {
            let [i, j, k] = og.unlinear(idx);
            let w0 = og.voxel_to_world([i as f64, j as f64, k as f64]);
            let w1 = pre.map_or(w0, |a| a.apply(w0));
            let qf = fg.world_to_voxel(w1);
            let mut disp = Vector3::zeros();
            for c in 0..3 {
                disp[c] = trilinear(channel(fu, fshape, c), qf, Boundary::Fill(0.0));
            }
            let w2 = w1 + disp;
            let w3 = post.map_or(w2, |a| a.apply(w2));
            let qs = sg.world_to_voxel(w3);
            trilinear(src.view(), qs, Boundary::Fill(0.0))
        })
    };
    let [ox, oy, oz] = out_grid.shape;
    let value = ArrayD::from_shape_vec(IxDyn(&[ox, oy, oz]), vals).expect("sized above");

    let (og, fg, sg) = (out_grid.clone(), field_grid.clone(), src_grid.clone());
    let (pre, post) = (pre.cloned(), post.cloned());
    tape.push_op(
        value,
        vec![u],
        Box::new(move |g| {
            let gf = flat(g);
            let fu = flat(&vu);
            let src_idx_per_world = index_per_world(&sg);
            // World-gradient projector: d out / d u = L_post^T P_src^T grad.
            let proj = match &post {
                Some(a) => (src_idx_per_world * a.linear()).transpose(),
                None => src_idx_per_world.transpose(),
            };
            let rows = {
                let src: &Array3<f64> = &src;
                let (og, fg, sg) = (&og, &fg, &sg);
                let (pre, post) = (&pre, &post);
                par::map_indexed(gf.len(), move |idx| {
                    let [i, j, k] = og.unlinear(idx);
                    let w0 = og.voxel_to_world([i as f64, j as f64, k as f64]);
                    let w1 = pre.as_ref().map_or(w0, |a| a.apply(w0));
                    let qf = fg.world_to_voxel(w1);
                    let mut disp = Vector3::zeros();
                    for c in 0..3 {
                        disp[c] = trilinear(channel(fu, fg.shape, c), qf, Boundary::Fill(0.0));
                    }
                    let w2 = w1 + disp;
                    let w3 = post.as_ref().map_or(w2, |a| a.apply(w2));
                    let qs = sg.world_to_voxel(w3);
                    let (_, gq) = trilinear_grad(src.view(), qs, Boundary::Fill(0.0));
                    let h = proj * Vector3::new(gq[0], gq[1], gq[2]);
                    (qf, [gf[idx] * h[0], gf[idx] * h[1], gf[idx] * h[2]])
                })
            };
            let mut grad_u = vec![0.0; 3 * fvox];
            for (qf, hg) in &rows {
                for (corner, wgt) in scatter_weights(fshape, *qf, Boundary::Fill(0.0)) {
                    let Some(ci) = corner else { continue };
                    let lin = fg.linear(ci[0], ci[1], ci[2]);
                    for c in 0..3 {
                        grad_u[c * fvox + lin] += wgt * hg[c];
                    }
                }
            }
            vec![Some(
                ArrayD::from_shape_vec(field_dim(&fg), grad_u).expect("sized"),
            )]
        }),
    )
}

/// Linearly resample a field variable from one grid onto another with edge
/// clamping. Used to lift coarse predicted velocities onto the integration
/// grid.
pub fn resample_field_var(tape: &Tape, from: &SamplingGrid, to: &SamplingGrid, u: Var) -> Var {
    let vu = tape.value(u);
    assert_field_shape(&vu, from);
    let n_to = to.n_voxels();
    let fshape = from.shape;
    let fvox = fshape[0] * fshape[1] * fshape[2];

    let lookups: Vec<[f64; 3]> = {
        let (from, to) = (&from, &to);
        par::map_indexed(n_to, move |idx| {
            let [i, j, k] = to.unlinear(idx);
            from.world_to_voxel(to.voxel_to_world([i as f64, j as f64, k as f64]))
        })
    };
    let rows = {
        let fu = flat(&vu);
        let lookups = &lookups;
        par::map_indexed(n_to, move |idx| {
            let mut out = [0.0; 3];
            for (c, o) in out.iter_mut().enumerate() {
                *o = trilinear(channel(fu, fshape, c), lookups[idx], Boundary::Clamp);
            }
            out
        })
    };
    let mut data = vec![0.0; 3 * n_to];
    for (idx, row) in rows.iter().enumerate() {
        for c in 0..3 {
            data[c * n_to + idx] = row[c];
        }
    }
    let value = ArrayD::from_shape_vec(field_dim(to), data).expect("sized above");

    let from_b = from.clone();
    tape.push_op(
        value,
        vec![u],
        Box::new(move |g| {
            let gf = flat(g);
            let mut grad_u = vec![0.0; 3 * fvox];
            for (idx, q) in lookups.iter().enumerate() {
                for (corner, wgt) in scatter_weights(fshape, *q, Boundary::Clamp) {
                    let Some(ci) = corner else { continue };
                    let lin = from_b.linear(ci[0], ci[1], ci[2]);
                    for c in 0..3 {
                        grad_u[c * fvox + lin] += wgt * gf[c * n_to + idx];
                    }
                }
            }
            vec![Some(
                ArrayD::from_shape_vec(field_dim(&from_b), grad_u).expect("sized"),
            )]
        }),
    )
}

#[inline]
fn partials_flat(
    f: &[f64],
    grid: &SamplingGrid,
    nvox: usize,
    c: usize,
    idx3: [usize; 3],
) -> [f64; 3] {
    let shape = grid.shape;
    let mut out = [0.0; 3];
    for (a, o) in out.iter_mut().enumerate() {
        let n = shape[a];
        let i = idx3[a];
        let (lo, hi, denom) = if n == 1 {
            (i, i, 1.0)
        } else if i == 0 {
            (0, 1, 1.0)
        } else if i == n - 1 {
            (n - 2, n - 1, 1.0)
        } else {
            (i - 1, i + 1, 2.0)
        };
        let mut p = idx3;
        let mut q = idx3;
        p[a] = hi;
        q[a] = lo;
        *o = (f[c * nvox + grid.linear(p[0], p[1], p[2])]
            - f[c * nvox + grid.linear(q[0], q[1], q[2])])
            / denom;
    }
    out
}

/// Cofactor matrix of a 3x3 matrix: `C[(i, j)] = d det(M) / d M[(i, j)]`.
fn cofactor(m: &Matrix3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)],
        m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)],
        m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)],
        m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)],
        m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)],
        m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)],
        m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)],
        m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)],
        m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
    )
}

fn jacobian_matrix(f: &[f64], grid: &SamplingGrid, nvox: usize, idx3: [usize; 3]) -> Matrix3<f64> {
    let mut g = Matrix3::zeros();
    for c in 0..3 {
        let p = partials_flat(f, grid, nvox, c, idx3);
        for a in 0..3 {
            g[(c, a)] = p[a];
        }
    }
    g
}

/// Differentiable per-voxel determinant of `I + du/dx`, matching
/// [`crate::field::jacobian_determinant`] in value: central differences in
/// the interior, one-sided on the borders, spacing- and orientation-aware.
pub fn jac_det_var(tape: &Tape, grid: &SamplingGrid, u: Var) -> Var {
    let vu = tape.value(u);
    assert_field_shape(&vu, grid);
    let nvox = grid.n_voxels();
    let p = index_per_world(grid);

    let dets = {
        let f = flat(&vu);
        let grid = &grid;
        par::map_indexed(nvox, move |idx| {
            let jac = jacobian_matrix(f, grid, nvox, grid.unlinear(idx)) * p;
            (Matrix3::identity() + jac).determinant()
        })
    };
    let [nx, ny, nz] = grid.shape;
    let value = ArrayD::from_shape_vec(IxDyn(&[nx, ny, nz]), dets).expect("sized above");

    let grid_b = grid.clone();
    tape.push_op(
        value,
        vec![u],
        Box::new(move |g| {
            let gf = flat(g);
            let f = flat(&vu);
            let nvox = grid_b.n_voxels();
            let shape = grid_b.shape;
            let p_t = p.transpose();

            // Per-voxel sensitivity of the determinant to the index-space
            // derivative matrix G: dDet/dG = cof(I + G P) P^T.
            let sens: Vec<[f64; 9]> = {
                let grid = &grid_b;
                par::map_indexed(nvox, move |idx| {
                    let gmat = jacobian_matrix(f, grid, nvox, grid.unlinear(idx));
                    let m = Matrix3::identity() + gmat * p;
                    let s = cofactor(&m) * p_t * gf[idx];
                    let mut row = [0.0; 9];
                    for a in 0..3 {
                        for b in 0..3 {
                            row[a * 3 + b] = s[(a, b)];
                        }
                    }
                    row
                })
            };

            // Adjoint of the finite-difference stencils: each voxel gathers
            // from the neighbours whose derivative it participates in.
            let rows = {
                let grid = &grid_b;
                let sens = &sens;
                par::map_indexed(nvox, move |idx| {
                    let idx3 = grid.unlinear(idx);
                    let mut out = [0.0; 3];
                    for (a, o) in out.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for b in 0..3 {
                            let n = shape[b];
                            let i = idx3[b];
                            if n == 1 {
                                continue;
                            }
                            if i == 0 {
                                acc -= sens[idx][a * 3 + b];
                            }
                            if i == n - 1 {
                                acc += sens[idx][a * 3 + b];
                            }
                            if i >= 1 {
                                let mut r = idx3;
                                r[b] = i - 1;
                                let coef = if r[b] == 0 { 1.0 } else { 0.5 };
                                acc += coef * sens[grid.linear(r[0], r[1], r[2])][a * 3 + b];
                            }
                            if i + 1 < n {
                                let mut r = idx3;
                                r[b] = i + 1;
                                let coef = if r[b] == n - 1 { 1.0 } else { 0.5 };
                                acc -= coef * sens[grid.linear(r[0], r[1], r[2])][a * 3 + b];
                            }
                        }
                        *o = acc;
                    }
                    out
                })
            };
            let mut grad_u = vec![0.0; 3 * nvox];
            for (idx, row) in rows.iter().enumerate() {
                for c in 0..3 {
                    grad_u[c * nvox + idx] = row[c];
                }
            }
            vec![Some(
                ArrayD::from_shape_vec(field_dim(&grid_b), grad_u).expect("sized"),
            )]
        }),
    )
}

/// Differentiable `sum_x ||grad u(x)||^2` with spacing-aware forward
/// differences, skipping the upper border along each axis.
pub fn grad_sq_penalty(tape: &Tape, grid: &SamplingGrid, u: Var) -> Var {
    let vu = tape.value(u);
    assert_field_shape(&vu, grid);
    let nvox = grid.n_voxels();
    let shape = grid.shape;
    let sp = grid.spacing;

    let total = {
        let f = flat(&vu);
        let grid = &grid;
        par::sum_chunked(nvox, move |range| {
            let mut acc = 0.0;
            for idx in range {
                let idx3 = grid.unlinear(idx);
                for c in 0..3 {
                    let cur = f[c * nvox + idx];
                    for b in 0..3 {
                        if idx3[b] + 1 < shape[b] {
                            let mut nb = idx3;
                            nb[b] += 1;
                            let d = (f[c * nvox + grid.linear(nb[0], nb[1], nb[2])] - cur) / sp[b];
                            acc += d * d;
                        }
                    }
                }
            }
            acc
        })
    };

    let grid_b = grid.clone();
    tape.push_op(
        ArrayD::from_elem(IxDyn(&[]), total),
        vec![u],
        Box::new(move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            let f = flat(&vu);
            let nvox = grid_b.n_voxels();
            let rows = {
                let grid = &grid_b;
                par::map_indexed(nvox, move |idx| {
                    let idx3 = grid.unlinear(idx);
                    let mut out = [0.0; 3];
                    for (c, o) in out.iter_mut().enumerate() {
                        let cur = f[c * nvox + idx];
                        let mut acc = 0.0;
                        for b in 0..3 {
                            let s2 = sp[b] * sp[b];
                            if idx3[b] + 1 < shape[b] {
                                let mut nb = idx3;
                                nb[b] += 1;
                                acc -= 2.0 * (f[c * nvox + grid.linear(nb[0], nb[1], nb[2])] - cur)
                                    / s2;
                            }
                            if idx3[b] > 0 {
                                let mut pb = idx3;
                                pb[b] -= 1;
                                acc += 2.0 * (cur - f[c * nvox + grid.linear(pb[0], pb[1], pb[2])])
                                    / s2;
                            }
                        }
                        *o = gv * acc;
                    }
                    out
                })
            };
            let mut grad_u = vec![0.0; 3 * nvox];
            for (idx, row) in rows.iter().enumerate() {
                for c in 0..3 {
                    grad_u[c * nvox + idx] = row[c];
                }
            }
            vec![Some(
                ArrayD::from_shape_vec(field_dim(&grid_b), grad_u).expect("sized"),
            )]
        }),
    )
}
