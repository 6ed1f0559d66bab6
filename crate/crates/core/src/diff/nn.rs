//! Differentiable neural-network primitives on channel-first feature
//! volumes `[C, X, Y, Z]`: direct 3-D convolution with same-padding,
//! 2x average pooling, 2x transposed convolution, and symmetric
//! zero-pad / crop used to make arbitrary shapes pool-friendly.

use ndarray::{ArrayD, IxDyn};

use super::{Tape, Var};
use crate::par;

#[inline]
fn flat(v: &ArrayD<f64>) -> &[f64] {
    v.as_slice().expect("tape values are standard layout")
}

fn feature_shape(v: &ArrayD<f64>) -> [usize; 4] {
    let s = v.shape();
    assert_eq!(s.len(), 4, "feature volumes are [C, X, Y, Z]");
    [s[0], s[1], s[2], s[3]]
}

#[inline]
fn at(shape: [usize; 4], c: usize, x: usize, y: usize, z: usize) -> usize {
    ((c * shape[1] + x) * shape[2] + y) * shape[3] + z
}

/// Direct 3-D convolution with odd kernel size, stride 1 and zero-padded
/// "same" output. `input` is `[Ci, X, Y, Z]`, `weight` is
/// `[Co, Ci, k, k, k]`, `bias` is `[Co]`; the result is `[Co, X, Y, Z]`.
pub fn conv3(tape: &Tape, input: Var, weight: Var, bias: Var) -> Var {
    let vin = tape.value(input);
    let vw = tape.value(weight);
    let vb = tape.value(bias);
    let ishape = feature_shape(&vin);
    let ws = vw.shape().to_vec();
    assert_eq!(ws.len(), 5, "conv weight is [Co, Ci, k, k, k]");
    let (co, ci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[1], ishape[0], "input channels");
    assert!(ws[2] == ws[3] && ws[3] == ws[4], "cubic kernel");
    assert_eq!(k % 2, 1, "odd kernel size");
    assert_eq!(vb.shape(), &[co][..], "bias per output channel");
    let (nx, ny, nz) = (ishape[1], ishape[2], ishape[3]);
    let oshape = [co, nx, ny, nz];
    let half = (k / 2) as isize;

    let w_at = move |o: usize, i: usize, d: [usize; 3]| -> usize {
        ((((o * ci) + i) * k + d[0]) * k + d[1]) * k + d[2]
    };

    let out = {
        let fin = flat(&vin);
        let fw = flat(&vw);
        let fb = flat(&vb);
        par::map_indexed(co * nx * ny * nz, move |idx| {
            let c = idx / (nx * ny * nz);
            let rem = idx % (nx * ny * nz);
            let x = rem / (ny * nz);
            let y = (rem / nz) % ny;
            let z = rem % nz;
            let mut acc = fb[c];
            for i in 0..ci {
                for dx in 0..k {
                    let sx = x as isize + dx as isize - half;
                    if sx < 0 || sx >= nx as isize {
                        continue;
                    }
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - half;
                        if sy < 0 || sy >= ny as isize {
                            continue;
                        }
                        for dz in 0..k {
                            let sz = z as isize + dz as isize - half;
                            if sz < 0 || sz >= nz as isize {
                                continue;
                            }
                            acc += fw[w_at(c, i, [dx, dy, dz])]
                                * fin[at(ishape, i, sx as usize, sy as usize, sz as usize)];
                        }
                    }
                }
            }
            acc
        })
    };
    let value = ArrayD::from_shape_vec(IxDyn(&[co, nx, ny, nz]), out).expect("sized above");

    tape.push_op(
        value,
        vec![input, weight, bias],
        Box::new(move |g| {
            let gf = flat(g);
            let fin = flat(&vin);
            let fw = flat(&vw);

            // Input gradient: transposed correlation with the same kernel.
            let gin = par::map_indexed(ci * nx * ny * nz, move |idx| {
                let i = idx / (nx * ny * nz);
                let rem = idx % (nx * ny * nz);
                let x = rem / (ny * nz);
                let y = (rem / nz) % ny;
                let z = rem % nz;
                let mut acc = 0.0;
                for c in 0..co {
                    for dx in 0..k {
                        let qx = x as isize - dx as isize + half;
                        if qx < 0 || qx >= nx as isize {
                            continue;
                        }
                        for dy in 0..k {
                            let qy = y as isize - dy as isize + half;
                            if qy < 0 || qy >= ny as isize {
                                continue;
                            }
                            for dz in 0..k {
                                let qz = z as isize - dz as isize + half;
                                if qz < 0 || qz >= nz as isize {
                                    continue;
                                }
                                acc += fw[w_at(c, i, [dx, dy, dz])]
                                    * gf[at(oshape, c, qx as usize, qy as usize, qz as usize)];
                            }
                        }
                    }
                }
                acc
            });

            // Weight gradient: correlation of upstream gradient with input.
            let gw = par::map_indexed(co * ci * k * k * k, move |idx| {
                let c = idx / (ci * k * k * k);
                let rem = idx % (ci * k * k * k);
                let i = rem / (k * k * k);
                let rem = rem % (k * k * k);
                let d = [rem / (k * k), (rem / k) % k, rem % k];
                let mut acc = 0.0;
                for x in 0..nx {
                    let sx = x as isize + d[0] as isize - half;
                    if sx < 0 || sx >= nx as isize {
                        continue;
                    }
                    for y in 0..ny {
                        let sy = y as isize + d[1] as isize - half;
                        if sy < 0 || sy >= ny as isize {
                            continue;
                        }
                        for z in 0..nz {
                            let sz = z as isize + d[2] as isize - half;
                            if sz < 0 || sz >= nz as isize {
                                continue;
                            }
                            acc += gf[at(oshape, c, x, y, z)]
                                * fin[at(ishape, i, sx as usize, sy as usize, sz as usize)];
                        }
                    }
                }
                acc
            });

            let gb = par::map_indexed(co, move |c| {
                let mut acc = 0.0;
                for r in 0..nx * ny * nz {
                    acc += gf[c * nx * ny * nz + r];
                }
                acc
            });

            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[ci, nx, ny, nz]), gin).expect("sized")),
                Some(ArrayD::from_shape_vec(IxDyn(&[co, ci, k, k, k]), gw).expect("sized")),
                Some(ArrayD::from_shape_vec(IxDyn(&[co]), gb).expect("sized")),
            ]
        }),
    )
}

/// 2x average pooling over all spatial axes; dimensions must be even.
pub fn avg_pool2(tape: &Tape, input: Var) -> Var {
    let vin = tape.value(input);
    let ishape = feature_shape(&vin);
    let [c, nx, ny, nz] = ishape;
    assert!(
        nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0,
        "avg_pool2 needs even spatial dims, got {:?}",
        &ishape[1..]
    );
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let oshape = [c, ox, oy, oz];

    let out = {
        let fin = flat(&vin);
        par::map_indexed(c * ox * oy * oz, move |idx| {
            let ch = idx / (ox * oy * oz);
            let rem = idx % (ox * oy * oz);
            let x = rem / (oy * oz);
            let y = (rem / oz) % oy;
            let z = rem % oz;
            let mut acc = 0.0;
            for dx in 0..2 {
                for dy in 0..2 {
                    for dz in 0..2 {
                        acc += fin[at(ishape, ch, 2 * x + dx, 2 * y + dy, 2 * z + dz)];
                    }
                }
            }
            acc / 8.0
        })
    };
    let value = ArrayD::from_shape_vec(IxDyn(&oshape), out).expect("sized above");

    tape.push_op(
        value,
        vec![input],
        Box::new(move |g| {
            let gf = flat(g);
            let gin = par::map_indexed(c * nx * ny * nz, move |idx| {
                let ch = idx / (nx * ny * nz);
                let rem = idx % (nx * ny * nz);
                let x = rem / (ny * nz);
                let y = (rem / nz) % ny;
                let z = rem % nz;
                gf[at(oshape, ch, x / 2, y / 2, z / 2)] / 8.0
            });
            vec![Some(
                ArrayD::from_shape_vec(IxDyn(&[c, nx, ny, nz]), gin).expect("sized"),
            )]
        }),
    )
}

/// Transposed convolution with kernel 2 and stride 2, doubling every
/// spatial dimension. `weight` is `[Co, Ci, 2, 2, 2]`, `bias` is `[Co]`.
/// Each output voxel receives exactly one kernel tap, so this is the exact
/// adjoint of a stride-2 patch reduction.
pub fn upconv2(tape: &Tape, input: Var, weight: Var, bias: Var) -> Var {
    let vin = tape.value(input);
    let vw = tape.value(weight);
    let vb = tape.value(bias);
    let ishape = feature_shape(&vin);
    let [ci, nx, ny, nz] = ishape;
    let ws = vw.shape().to_vec();
    assert_eq!(ws[1..], [ci, 2, 2, 2], "upconv weight is [Co, Ci, 2, 2, 2]");
    let co = ws[0];
    assert_eq!(vb.shape(), &[co][..]);
    let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
    let oshape = [co, ox, oy, oz];

    let w_at = move |o: usize, i: usize, d: [usize; 3]| -> usize {
        ((((o * ci) + i) * 2 + d[0]) * 2 + d[1]) * 2 + d[2]
    };

    let out = {
        let fin = flat(&vin);
        let fw = flat(&vw);
        let fb = flat(&vb);
        par::map_indexed(co * ox * oy * oz, move |idx| {
            let c = idx / (ox * oy * oz);
            let rem = idx % (ox * oy * oz);
            let x = rem / (oy * oz);
            let y = (rem / oz) % oy;
            let z = rem % oz;
            let d = [x % 2, y % 2, z % 2];
            let mut acc = fb[c];
            for i in 0..ci {
                acc += fw[w_at(c, i, d)] * fin[at(ishape, i, x / 2, y / 2, z / 2)];
            }
            acc
        })
    };
    let value = ArrayD::from_shape_vec(IxDyn(&oshape), out).expect("sized above");

    tape.push_op(
        value,
        vec![input, weight, bias],
        Box::new(move |g| {
            let gf = flat(g);
            let fin = flat(&vin);
            let fw = flat(&vw);

            let gin = par::map_indexed(ci * nx * ny * nz, move |idx| {
                let i = idx / (nx * ny * nz);
                let rem = idx % (nx * ny * nz);
                let x = rem / (ny * nz);
                let y = (rem / nz) % ny;
                let z = rem % nz;
                let mut acc = 0.0;
                for c in 0..co {
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                acc += fw[w_at(c, i, [dx, dy, dz])]
                                    * gf[at(oshape, c, 2 * x + dx, 2 * y + dy, 2 * z + dz)];
                            }
                        }
                    }
                }
                acc
            });

            let gw = par::map_indexed(co * ci * 8, move |idx| {
                let c = idx / (ci * 8);
                let rem = idx % (ci * 8);
                let i = rem / 8;
                let rem = rem % 8;
                let d = [rem / 4, (rem / 2) % 2, rem % 2];
                let mut acc = 0.0;
                for x in 0..nx {
                    for y in 0..ny {
                        for z in 0..nz {
                            acc += gf[at(oshape, c, 2 * x + d[0], 2 * y + d[1], 2 * z + d[2])]
                                * fin[at(ishape, i, x, y, z)];
                        }
                    }
                }
                acc
            });

            let gb = par::map_indexed(co, move |c| {
                let mut acc = 0.0;
                for r in 0..ox * oy * oz {
                    acc += gf[c * ox * oy * oz + r];
                }
                acc
            });

            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[ci, nx, ny, nz]), gin).expect("sized")),
                Some(ArrayD::from_shape_vec(IxDyn(&[co, ci, 2, 2, 2]), gw).expect("sized")),
                Some(ArrayD::from_shape_vec(IxDyn(&[co]), gb).expect("sized")),
            ]
        }),
    )
}

/// Symmetric zero padding of the spatial axes.
pub fn pad3(tape: &Tape, input: Var, lo: [usize; 3], hi: [usize; 3]) -> Var {
    let vin = tape.value(input);
    let ishape = feature_shape(&vin);
    let [c, nx, ny, nz] = ishape;
    let (ox, oy, oz) = (nx + lo[0] + hi[0], ny + lo[1] + hi[1], nz + lo[2] + hi[2]);
    let oshape = [c, ox, oy, oz];

    let out = {
        let fin = flat(&vin);
        par::map_indexed(c * ox * oy * oz, move |idx| {
            let ch = idx / (ox * oy * oz);
            let rem = idx % (ox * oy * oz);
            let x = rem / (oy * oz);
            let y = (rem / oz) % oy;
            let z = rem % oz;
            if x < lo[0] || y < lo[1] || z < lo[2] {
                return 0.0;
            }
            let (sx, sy, sz) = (x - lo[0], y - lo[1], z - lo[2]);
            if sx >= nx || sy >= ny || sz >= nz {
                return 0.0;
            }
            fin[at(ishape, ch, sx, sy, sz)]
        })
    };
    let value = ArrayD::from_shape_vec(IxDyn(&oshape), out).expect("sized above");

    tape.push_op(
        value,
        vec![input],
        Box::new(move |g| {
            let gf = flat(g);
            let gin = par::map_indexed(c * nx * ny * nz, move |idx| {
                let ch = idx / (nx * ny * nz);
                let rem = idx % (nx * ny * nz);
                let x = rem / (ny * nz);
                let y = (rem / nz) % ny;
                let z = rem % nz;
                gf[at(oshape, ch, x + lo[0], y + lo[1], z + lo[2])]
            });
            vec![Some(
                ArrayD::from_shape_vec(IxDyn(&[c, nx, ny, nz]), gin).expect("sized"),
            )]
        }),
    )
}

/// Crop the spatial axes to `shape`, starting at `lo`.
pub fn crop3(tape: &Tape, input: Var, lo: [usize; 3], shape: [usize; 3]) -> Var {
    let vin = tape.value(input);
    let ishape = feature_shape(&vin);
    let [c, nx, ny, nz] = ishape;
    for a in 0..3 {
        assert!(lo[a] + shape[a] <= ishape[1 + a], "crop out of bounds");
    }
    let [ox, oy, oz] = shape;
    let oshape = [c, ox, oy, oz];

    let out = {
        let fin = flat(&vin);
        par::map_indexed(c * ox * oy * oz, move |idx| {
            let ch = idx / (ox * oy * oz);
            let rem = idx % (ox * oy * oz);
            let x = rem / (oy * oz);
            let y = (rem / oz) % oy;
            let z = rem % oz;
            fin[at(ishape, ch, x + lo[0], y + lo[1], z + lo[2])]
        })
    };
    let value = ArrayD::from_shape_vec(IxDyn(&oshape), out).expect("sized above");

    tape.push_op(
        value,
        vec![input],
        Box::new(move |g| {
            let gf = flat(g);
            let gin = par::map_indexed(c * nx * ny * nz, move |idx| {
                let ch = idx / (nx * ny * nz);
                let rem = idx % (nx * ny * nz);
                let x = rem / (ny * nz);
                let y = (rem / nz) % ny;
                let z = rem % nz;
                if x < lo[0] || y < lo[1] || z < lo[2] {
                    return 0.0;
                }
                let (qx, qy, qz) = (x - lo[0], y - lo[1], z - lo[2]);
                if qx >= ox || qy >= oy || qz >= oz {
                    return 0.0;
                }
                gf[at(oshape, ch, qx, qy, qz)]
            });
            vec![Some(
                ArrayD::from_shape_vec(IxDyn(&[c, nx, ny, nz]), gin).expect("sized"),
            )]
        }),
    )
}

/// Padding amounts that bring each spatial dimension up to a multiple of
/// `m`, split symmetrically (the extra voxel of an odd total goes high).
pub fn pad_amounts(shape: [usize; 3], m: usize) -> ([usize; 3], [usize; 3]) {
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        let total = (m - shape[a] % m) % m;
        lo[a] = total / 2;
        hi[a] = total - lo[a];
    }
    (lo, hi)
}
