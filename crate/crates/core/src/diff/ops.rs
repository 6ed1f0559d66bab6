//! Elementwise and reduction operations on tape variables.

use ndarray::{ArrayD, IxDyn, Zip};

use super::{Tape, Var};

fn binary<F, Da, Db>(tape: &Tape, a: Var, b: Var, f: F, dfa: Da, dfb: Db) -> Var
where
    F: Fn(f64, f64) -> f64,
    Da: Fn(f64, f64) -> f64 + 'static,
    Db: Fn(f64, f64) -> f64 + 'static,
{
    let va = tape.value(a);
    let vb = tape.value(b);
    assert_eq!(va.raw_dim(), vb.raw_dim(), "elementwise shape mismatch");
    let mut out = ArrayD::zeros(va.raw_dim());
    Zip::from(&mut out).and(&*va).and(&*vb).for_each(|o, &x, &y| *o = f(x, y));
    let (ca, cb) = (va.clone(), vb.clone());
    tape.push_op(
        out,
        vec![a, b],
        Box::new(move |g| {
            let mut ga = ArrayD::zeros(g.raw_dim());
            Zip::from(&mut ga).and(g).and(&*ca).and(&*cb).for_each(|o, &gv, &x, &y| {
                *o = gv * dfa(x, y);
            });
            let mut gb = ArrayD::zeros(g.raw_dim());
            Zip::from(&mut gb).and(g).and(&*ca).and(&*cb).for_each(|o, &gv, &x, &y| {
                *o = gv * dfb(x, y);
            });
            vec![Some(ga), Some(gb)]
        }),
    )
}

fn unary<F, Df>(tape: &Tape, a: Var, f: F, df: Df) -> Var
where
    F: Fn(f64) -> f64,
    Df: Fn(f64) -> f64 + 'static,
{
    let va = tape.value(a);
    let out = va.mapv(&f);
    let ca = va.clone();
    tape.push_op(
        out,
        vec![a],
        Box::new(move |g| {
            let mut ga = ArrayD::zeros(g.raw_dim());
            Zip::from(&mut ga).and(g).and(&*ca).for_each(|o, &gv, &x| *o = gv * df(x));
            vec![Some(ga)]
        }),
    )
}

pub fn add(tape: &Tape, a: Var, b: Var) -> Var {
    binary(tape, a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
}

pub fn sub(tape: &Tape, a: Var, b: Var) -> Var {
    binary(tape, a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
}

pub fn mul(tape: &Tape, a: Var, b: Var) -> Var {
    binary(tape, a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div(tape: &Tape, a: Var, b: Var) -> Var {
    binary(
        tape,
        a,
        b,
        |x, y| x / y,
        |_, y| 1.0 / y,
        |x, y| -x / (y * y),
    )
}

/// Elementwise maximum; at ties the gradient goes to the first argument.
pub fn maximum(tape: &Tape, a: Var, b: Var) -> Var {
    binary(
        tape,
        a,
        b,
        f64::max,
        |x, y| if x >= y { 1.0 } else { 0.0 },
        |x, y| if x >= y { 0.0 } else { 1.0 },
    )
}

pub fn mul_scalar(tape: &Tape, a: Var, c: f64) -> Var {
    unary(tape, a, |x| x * c, move |_| c)
}

pub fn add_scalar(tape: &Tape, a: Var, c: f64) -> Var {
    unary(tape, a, move |x| x + c, |_| 1.0)
}

pub fn neg(tape: &Tape, a: Var) -> Var {
    mul_scalar(tape, a, -1.0)
}

pub fn square(tape: &Tape, a: Var) -> Var {
    unary(tape, a, |x| x * x, |x| 2.0 * x)
}

pub fn abs(tape: &Tape, a: Var) -> Var {
    unary(tape, a, f64::abs, |x| x.signum())
}

/// `max(x, floor)`; gradient vanishes where the floor is active.
pub fn clamp_min(tape: &Tape, a: Var, floor: f64) -> Var {
    unary(
        tape,
        a,
        move |x| x.max(floor),
        move |x| if x > floor { 1.0 } else { 0.0 },
    )
}

pub fn sigmoid(tape: &Tape, a: Var) -> Var {
    unary(
        tape,
        a,
        |x| 1.0 / (1.0 + (-x).exp()),
        |x| {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 - s)
        },
    )
}

pub fn leaky_relu(tape: &Tape, a: Var, alpha: f64) -> Var {
    unary(
        tape,
        a,
        move |x| if x >= 0.0 { x } else { alpha * x },
        move |x| if x >= 0.0 { 1.0 } else { alpha },
    )
}

pub fn sum(tape: &Tape, a: Var) -> Var {
    let va = tape.value(a);
    let shape = va.raw_dim();
    let total = va.sum();
    tape.push_op(
        ArrayD::from_elem(IxDyn(&[]), total),
        vec![a],
        Box::new(move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            vec![Some(ArrayD::from_elem(shape.clone(), gv))]
        }),
    )
}

pub fn mean(tape: &Tape, a: Var) -> Var {
    let n = tape.value(a).len();
    let s = sum(tape, a);
    mul_scalar(tape, s, 1.0 / n as f64)
}

/// Replace every element by the mean of its segment. Elements outside all
/// segments take `fill` and pass no gradient. Segments hold flat indices
/// into the value (row-major) and must be disjoint.
pub fn segment_mean(tape: &Tape, a: Var, segments: &[Vec<usize>], fill: f64) -> Var {
    let va = tape.value(a);
    let flat = va.as_slice().expect("segment_mean needs standard layout");
    let mut out = vec![fill; flat.len()];
    for seg in segments {
        if seg.is_empty() {
            continue;
        }
        let m = seg.iter().map(|&i| flat[i]).sum::<f64>() / seg.len() as f64;
        for &i in seg {
            out[i] = m;
        }
    }
    let segs: Vec<Vec<usize>> = segments.to_vec();
    let shape = va.raw_dim();
    tape.push_op(
        ArrayD::from_shape_vec(shape.clone(), out).expect("same length"),
        vec![a],
        Box::new(move |g| {
            let gflat = g.as_slice().expect("standard layout");
            let mut ga = vec![0.0f64; gflat.len()];
            for seg in &segs {
                if seg.is_empty() {
                    continue;
                }
                let s = seg.iter().map(|&i| gflat[i]).sum::<f64>() / seg.len() as f64;
                for &i in seg {
                    ga[i] = s;
                }
            }
            vec![Some(
                ArrayD::from_shape_vec(shape.clone(), ga).expect("same length"),
            )]
        }),
    )
}

/// Negative global normalized cross-correlation of two same-shape variables.
/// Returns the scalar variable and a degeneracy flag; zero variance in either
/// argument produces a constant 0 and sets the flag.
pub fn neg_ncc(tape: &Tape, a: Var, b: Var) -> (Var, bool) {
    let va = tape.value(a);
    let vb = tape.value(b);
    assert_eq!(va.raw_dim(), vb.raw_dim(), "ncc shape mismatch");
    let n = va.len() as f64;
    let mu_a = va.sum() / n;
    let mu_b = vb.sum() / n;
    let var_a = va.iter().map(|x| (x - mu_a) * (x - mu_a)).sum::<f64>() / n;
    let var_b = vb.iter().map(|x| (x - mu_b) * (x - mu_b)).sum::<f64>() / n;
    let (sd_a, sd_b) = (var_a.sqrt(), var_b.sqrt());
    if sd_a < 1e-12 || sd_b < 1e-12 {
        return (tape.scalar_constant(0.0), true);
    }
    let a_hat = va.mapv(|x| (x - mu_a) / sd_a);
    let b_hat = vb.mapv(|x| (x - mu_b) / sd_b);
    let r = a_hat
        .iter()
        .zip(b_hat.iter())
        .map(|(x, y)| x * y)
        .sum::<f64>()
        / n;

    // d(-r)/da_k = -(b_hat_k - r a_hat_k) / (n sd_a); symmetrically for b.
    // The centring terms cancel because both hat arrays are zero-mean.
    let (ca, cb) = (a_hat.clone(), b_hat.clone());
    let var = tape.push_op(
        ArrayD::from_elem(IxDyn(&[]), -r),
        vec![a, b],
        Box::new(move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            let mut ga = ArrayD::zeros(ca.raw_dim());
            Zip::from(&mut ga).and(&ca).and(&cb).for_each(|o, &ah, &bh| {
                *o = -gv * (bh - r * ah) / (n * sd_a);
            });
            let mut gb = ArrayD::zeros(cb.raw_dim());
            Zip::from(&mut gb).and(&ca).and(&cb).for_each(|o, &ah, &bh| {
                *o = -gv * (ah - r * bh) / (n * sd_b);
            });
            vec![Some(ga), Some(gb)]
        }),
    );
    (var, false)
}
