//! The registration objective: distance-map similarity, field smoothness,
//! pairwise cohort similarity, and local volume-change regularisation, plus
//! the two composite losses (cohort-level and per-case over-fitting).
//!
//! Each term exists twice: as a differentiable graph builder used by the
//! training loop, and as a plain function over concrete fields used for
//! reporting and as test oracles. The plain functions evaluate the same
//! graph with constant inputs, so the two paths cannot drift apart.

use std::rc::Rc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::diff::{field_ops, ops, Tape, Var};
use crate::distmaps::distance_map;
use crate::error::{Error, Result};
use crate::volumes::{AffineTransform, DisplacementField, LabelMap, SamplingGrid};

/// Term weights of the composite objectives and the distance-map label
/// offset. `lambda2` has no established reference value; the default keeps
/// the smoothness term within an order of magnitude of the similarity term
/// on phantom cohorts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.098,
            lambda2: 0.01,
            lambda3: 0.045,
            lambda4: 0.098,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    General,
    Overfit,
}

/// One evaluation of a composite loss. Component fields carry their weight
/// already applied, so `total` is their plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub sim: f64,
    pub reg: f64,
    pub pairwise_sim: f64,
    pub vol: f64,
    pub mode: LossMode,
}

/// A composite loss as a live graph: the scalar root for backpropagation,
/// the numeric report, and any evaluation notes (degenerate similarity
/// inputs, skipped terms).
pub struct LossGraph {
    pub total: Var,
    pub report: LossReport,
    pub degenerate: bool,
    pub notes: Vec<String>,
}

/// Per-case inputs to the graph builders: the subject's precomputed distance
/// map on its native grid, the affine taking subject world coordinates into
/// atlas world coordinates, and the case's transform variables on the atlas
/// grid.
pub struct CaseTerms<'a> {
    pub dist: Rc<Array3<f64>>,
    pub grid: &'a SamplingGrid,
    pub affine: &'a AffineTransform,
    pub fwd: Var,
    pub inv: Var,
}

/// Flat voxel indices per label, in ascending label order. Covers every
/// voxel: the background is an ordinary segment.
fn label_segments(labels: &LabelMap) -> Vec<Vec<usize>> {
    let mut by_label: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (idx, &l) in labels.data.iter().enumerate() {
        by_label.entry(l).or_default().push(idx);
    }
    by_label.into_values().collect()
}

/// Volume-change penalty on precomputed determinant values: per-segment
/// mean determinants, the worse of the two clamped ratios, and a steep
/// sigmoid gate averaged over every voxel.
fn vol_from_dets(tape: &Tape, dets: Var, segments: &[Vec<usize>]) -> Var {
    let absd = ops::clamp_min(tape, ops::abs(tape, dets), 1e-6);
    let means = ops::segment_mean(tape, dets, segments, 1.0);
    let mbar = ops::clamp_min(tape, ops::abs(tape, means), 1e-6);
    let ratio = ops::maximum(
        tape,
        ops::div(tape, absd, mbar),
        ops::div(tape, mbar, absd),
    );
    let gate = ops::sigmoid(tape, ops::mul_scalar(tape, ops::add_scalar(tape, ratio, -1.5), 5.0));
    ops::mean(tape, gate)
}

/// Differentiable volume-change term for a transform variable on the atlas
/// grid.
pub fn vol_term(
    tape: &Tape,
    atlas_labels: &LabelMap,
    grid: &SamplingGrid,
    u: Var,
) -> Result<Var> {
    if atlas_labels.foreground_count() == 0 {
        return Err(Error::EmptyForeground(
            "volume-change loss needs labelled anatomy".into(),
        ));
    }
    if atlas_labels.grid != *grid {
        return Err(Error::GridMismatch(
            "volume-change loss needs labels on the transform grid".into(),
        ));
    }
    let dets = field_ops::jac_det_var(tape, grid, u);
    let segments = label_segments(atlas_labels);
    Ok(vol_from_dets(tape, dets, &segments))
}

/// Warp a case's distance map onto the atlas grid:
/// `out(x) = D_i(A_i^{-1}(x + u_i(x)))`.
fn warp_to_atlas(
    tape: &Tape,
    case: &CaseTerms,
    atlas_grid: &SamplingGrid,
) -> Result<Var> {
    let inv_affine = case.affine.inverse()?;
    Ok(field_ops::warp(
        tape,
        Rc::clone(&case.dist),
        case.grid,
        case.fwd,
        atlas_grid,
        atlas_grid,
        None,
        Some(&inv_affine),
    ))
}

/// Warp the atlas distance map onto a case's native grid:
/// `out(y) = D_A(x + u_inv(x))` with `x = A_i(y)`.
fn warp_to_subject(
    tape: &Tape,
    case: &CaseTerms,
    atlas_dist: &Rc<Array3<f64>>,
    atlas_grid: &SamplingGrid,
) -> Var {
    field_ops::warp(
        tape,
        Rc::clone(atlas_dist),
        atlas_grid,
        case.inv,
        atlas_grid,
        case.grid,
        Some(case.affine),
        None,
    )
}

fn weighted_total(tape: &Tape, parts: &[Var]) -> Var {
    let mut it = parts.iter();
    let mut acc = *it.next().expect("at least one component");
    for p in it {
        acc = ops::add(tape, acc, *p);
    }
    acc
}

/// Cohort objective over a mini-batch: per-case image-space similarity and
/// smoothness, plus pairwise similarity of all warped cases on the atlas
/// grid. A single-case batch contributes no pairwise term.
pub fn general_loss_graph(
    tape: &Tape,
    cases: &[CaseTerms],
    atlas_dist: &Rc<Array3<f64>>,
    atlas_grid: &SamplingGrid,
    w: &LossWeights,
) -> Result<LossGraph> {
    w.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut notes = Vec::new();
    let mut degenerate = false;

    let mut sim_sum: Option<Var> = None;
    let mut reg_sum: Option<Var> = None;
    for (i, case) in cases.iter().enumerate() {
        let fixed = tape.constant((*case.dist).clone().into_dyn());
        let moving = warp_to_subject(tape, case, atlas_dist, atlas_grid);
        let (s, deg) = ops::neg_ncc(tape, fixed, moving);
        if deg {
            degenerate = true;
            notes.push(format!("degenerate similarity input in case {i}"));
        }
        sim_sum = Some(match sim_sum {
            Some(acc) => ops::add(tape, acc, s),
            None => s,
        });
        let r = field_ops::grad_sq_penalty(tape, atlas_grid, case.fwd);
        reg_sum = Some(match reg_sum {
            Some(acc) => ops::add(tape, acc, r),
            None => r,
        });
    }

    let pair_sum = if cases.len() < 2 {
        notes.push("single-case batch: pairwise similarity term is zero".into());
        tape.scalar_constant(0.0)
    } else if w.lambda3 == 0.0 {
        tape.scalar_constant(0.0)
    } else {
        let warped: Vec<Var> = cases
            .iter()
            .map(|c| warp_to_atlas(tape, c, atlas_grid))
            .collect::<Result<_>>()?;
        let mut acc: Option<Var> = None;
        for i in 0..warped.len() {
            for j in 0..warped.len() {
                if i == j {
                    continue;
                }
                let (s, deg) = ops::neg_ncc(tape, warped[i], warped[j]);
                if deg {
                    degenerate = true;
                    notes.push(format!("degenerate pairwise similarity for cases {i}/{j}"));
                }
                acc = Some(match acc {
                    Some(a) => ops::add(tape, a, s),
                    None => s,
                });
            }
        }
        acc.expect("at least one pair")
    };

    let sim_w = ops::mul_scalar(tape, sim_sum.expect("nonempty batch"), w.lambda1);
    let reg_w = ops::mul_scalar(tape, reg_sum.expect("nonempty batch"), w.lambda2);
    let pair_w = ops::mul_scalar(tape, pair_sum, w.lambda3);
    let total = weighted_total(tape, &[sim_w, reg_w, pair_w]);

    Ok(LossGraph {
        total,
        report: LossReport {
            total: tape.scalar_value(total),
            sim: tape.scalar_value(sim_w),
            reg: tape.scalar_value(reg_w),
            pairwise_sim: tape.scalar_value(pair_w),
            vol: 0.0,
            mode: LossMode::General,
        },
        degenerate,
        notes,
    })
}

/// Per-case over-fitting objective: similarity of the warped subject against
/// the atlas on the atlas grid, smoothness, and the volume-change penalty.
pub fn overfit_loss_graph(
    tape: &Tape,
    case: &CaseTerms,
    atlas_dist: &Rc<Array3<f64>>,
    atlas_grid: &SamplingGrid,
    atlas_labels: &LabelMap,
    w: &LossWeights,
) -> Result<LossGraph> {
    w.validate()?;
    let mut notes = Vec::new();

    let fixed = tape.constant((**atlas_dist).clone().into_dyn());
    let moving = warp_to_atlas(tape, case, atlas_grid)?;
    let (sim, degenerate) = ops::neg_ncc(tape, moving, fixed);
    if degenerate {
        notes.push("degenerate similarity input".into());
    }
    let reg = field_ops::grad_sq_penalty(tape, atlas_grid, case.fwd);
    let vol = if w.lambda4 == 0.0 {
        tape.scalar_constant(0.0)
    } else {
        vol_term(tape, atlas_labels, atlas_grid, case.fwd)?
    };

    let sim_w = ops::mul_scalar(tape, sim, w.lambda1);
    let reg_w = ops::mul_scalar(tape, reg, w.lambda2);
    let vol_w = ops::mul_scalar(tape, vol, w.lambda4);
    let total = weighted_total(tape, &[sim_w, reg_w, vol_w]);

    Ok(LossGraph {
        total,
        report: LossReport {
            total: tape.scalar_value(total),
            sim: tape.scalar_value(sim_w),
            reg: tape.scalar_value(reg_w),
            pairwise_sim: 0.0,
            vol: tape.scalar_value(vol_w),
            mode: LossMode::Overfit,
        },
        degenerate,
        notes,
    })
}

/// Negative global normalized cross-correlation between two same-shape
/// volumes. Returns the value and a degeneracy flag (zero variance in
/// either input yields 0).
pub fn sim_loss(a: &Array3<f64>, b: &Array3<f64>) -> (f64, bool) {
    let tape = Tape::new();
    let av = tape.constant(a.clone().into_dyn());
    let bv = tape.constant(b.clone().into_dyn());
    let (v, deg) = ops::neg_ncc(&tape, av, bv);
    (tape.scalar_value(v), deg)
}

/// Sum of squared spacing-aware forward differences over all components.
pub fn reg_loss(t: &DisplacementField) -> f64 {
    let tape = Tape::new();
    let u = tape.constant(field_ops::channel_first(&t.data));
    let v = field_ops::grad_sq_penalty(&tape, &t.grid, u);
    tape.scalar_value(v)
}

/// Volume-change penalty of a concrete transform against a label map on the
/// same grid.
pub fn vol_loss(atlas_labels: &LabelMap, t: &DisplacementField) -> Result<f64> {
    let tape = Tape::new();
    let u = tape.constant(field_ops::channel_first(&t.data));
    let v = vol_term(&tape, atlas_labels, &t.grid, u)?;
    Ok(tape.scalar_value(v))
}

/// One case of a concrete (non-graph) loss evaluation.
pub struct LossCase<'a> {
    pub labels: &'a LabelMap,
    pub affine: &'a AffineTransform,
    pub fwd: &'a DisplacementField,
    pub inv: &'a DisplacementField,
}

fn case_terms<'a>(tape: &Tape, case: &'a LossCase<'a>, gamma: f64) -> Result<CaseTerms<'a>> {
    let dist = Rc::new(distance_map(case.labels, gamma)?.data);
    Ok(CaseTerms {
        dist,
        grid: &case.labels.grid,
        affine: case.affine,
        fwd: tape.constant(field_ops::channel_first(&case.fwd.data)),
        inv: tape.constant(field_ops::channel_first(&case.inv.data)),
    })
}

fn check_case_grids(case: &LossCase, atlas: &LabelMap) -> Result<()> {
    if case.fwd.grid != atlas.grid || case.inv.grid != atlas.grid {
        return Err(Error::GridMismatch(
            "case transforms must live on the atlas grid".into(),
        ));
    }
    Ok(())
}

/// Evaluate the cohort objective for concrete transforms.
pub fn general_loss(cases: &[LossCase], atlas: &LabelMap, w: &LossWeights) -> Result<LossReport> {
    let tape = Tape::new();
    let atlas_dist = Rc::new(distance_map(atlas, w.gamma)?.data);
    let mut terms = Vec::with_capacity(cases.len());
    for case in cases {
        check_case_grids(case, atlas)?;
        terms.push(case_terms(&tape, case, w.gamma)?);
    }
    Ok(general_loss_graph(&tape, &terms, &atlas_dist, &atlas.grid, w)?.report)
}

/// Evaluate the over-fitting objective for a concrete transform pair.
pub fn overfit_loss(case: &LossCase, atlas: &LabelMap, w: &LossWeights) -> Result<LossReport> {
    let tape = Tape::new();
    check_case_grids(case, atlas)?;
    let atlas_dist = Rc::new(distance_map(atlas, w.gamma)?.data);
    let terms = case_terms(&tape, case, w.gamma)?;
    Ok(overfit_loss_graph(&tape, &terms, &atlas_dist, &atlas.grid, atlas, w)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix4, Vector3};
    use ndarray::{Array3, Array4, ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    use crate::volumes::{resample_image, ImageVolume, Transform, TransformChain};

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn two_box_labels(grid: &SamplingGrid) -> LabelMap {
        let [nx, ny, nz] = grid.shape;
        let data = Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
            if i >= nx / 4 && i < nx / 2 && j >= ny / 4 && j < 3 * ny / 4 && k >= nz / 4 && k < 3 * nz / 4 {
                1
            } else if i >= nx / 2 + 1 && i < 3 * nx / 4 && j >= ny / 4 && j < ny / 2 && k >= nz / 4 && k < nz / 2 {
                2
            } else {
                0
            }
        });
        LabelMap::new(grid.clone(), data).unwrap()
    }

    fn smooth_field(grid: &SamplingGrid, amp: f64, seed: u64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<f64> = (0..9)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let [nx, ny, nz] = grid.shape;
        let mut data = Array4::zeros((nx, ny, nz, 3));
        for ((i, j, k, c), v) in data.indexed_iter_mut() {
            let x = i as f64 / nx as f64 * std::f64::consts::TAU;
            let y = j as f64 / ny as f64 * std::f64::consts::TAU;
            let z = k as f64 / nz as f64 * std::f64::consts::TAU;
            *v = amp
                * ((x + phases[3 * c]).sin()
                    + (y + phases[3 * c + 1]).cos()
                    + (z + phases[3 * c + 2]).sin())
                / 3.0;
        }
        DisplacementField::new(grid.clone(), data).unwrap()
    }

    #[test]
    fn weights_default_and_validate() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(w.lambda1, 0.098);
        assert_abs_diff_eq!(w.lambda3, 0.045);
        assert_abs_diff_eq!(w.lambda4, 0.098);
        assert_abs_diff_eq!(w.gamma, 1.0);
        assert!(w.validate().is_ok());

        assert!(LossWeights { lambda1: -0.1, ..w }.validate().is_err());
        assert!(LossWeights { gamma: 0.0, ..w }.validate().is_err());
    }

    #[test]
    fn sim_known_values_and_invariances() {
        let a = Array3::from_shape_fn((4, 4, 4), |(i, j, k)| (i + 2 * j + 5 * k) as f64);
        let (same, deg) = sim_loss(&a, &a);
        assert!(!deg);
        assert_abs_diff_eq!(same, -1.0, epsilon = 1e-12);

        let anti = a.mapv(|v| -v + 11.0);
        assert_abs_diff_eq!(sim_loss(&a, &anti).0, 1.0, epsilon = 1e-12);

        // Affine intensity rescaling of one argument changes nothing.
        let b = Array3::from_shape_fn((4, 4, 4), |(i, j, k)| ((i * j + k * k) % 7) as f64);
        let scaled = a.mapv(|v| 3.7 * v + 2.2);
        assert_abs_diff_eq!(sim_loss(&scaled, &b).0, sim_loss(&a, &b).0, epsilon = 1e-9);
        assert_abs_diff_eq!(sim_loss(&a, &b).0, sim_loss(&b, &a).0, epsilon = 1e-12);

        let flat = Array3::from_elem((4, 4, 4), 3.0);
        let (v, deg) = sim_loss(&a, &flat);
        assert!(deg);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sim_matches_hand_computed_ncc() {
        // 2x2x2 ramps with one swapped pair, against the direct formula.
        let a = Array3::from_shape_fn((2, 2, 2), |(i, j, k)| (4 * i + 2 * j + k) as f64);
        let mut b = a.clone();
        let (x, y) = (b[(0, 0, 1)], b[(0, 1, 0)]);
        b[(0, 0, 1)] = y;
        b[(0, 1, 0)] = x;

        let n = 8.0;
        let mean_a: f64 = a.iter().sum::<f64>() / n;
        let mean_b: f64 = b.iter().sum::<f64>() / n;
        let sd = |v: &Array3<f64>, m: f64| {
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
        };
        let (sa, sb) = (sd(&a, mean_a), sd(&b, mean_b));
        let r: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - mean_a) * (y - mean_b))
            .sum::<f64>()
            / (n * sa * sb);
        assert_abs_diff_eq!(sim_loss(&a, &b).0, -r, epsilon = 1e-12);
    }

    #[test]
    fn reg_matches_exhaustive_loop() {
        let grid = SamplingGrid::axial([8, 8, 8], [0.9, 1.4, 1.0]);
        let t = smooth_field(&grid, 1.3, 5);
        let mut oracle = 0.0;
        for ((i, j, k, c), &v) in t.data.indexed_iter() {
            for b in 0..3 {
                let mut nb = [i, j, k];
                if nb[b] + 1 < grid.shape[b] {
                    nb[b] += 1;
                    let d = (t.data[(nb[0], nb[1], nb[2], c)] - v) / grid.spacing[b];
                    oracle += d * d;
                }
            }
        }
        assert_abs_diff_eq!(reg_loss(&t), oracle, epsilon = 1e-9);

        // Translations cost nothing; a linear ramp costs slope^2 per term.
        let mut constant = DisplacementField::zeros(grid.clone());
        for ((.., c), v) in constant.data.indexed_iter_mut() {
            *v = [4.0, -2.0, 0.5][c];
        }
        assert_abs_diff_eq!(reg_loss(&constant), 0.0, epsilon = 1e-12);

        let c = 0.3;
        let mut ramp = DisplacementField::zeros(grid.clone());
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    let w = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    ramp.set(i, j, k, Vector3::new(c * w[0], 0.0, 0.0));
                }
            }
        }
        let terms = (8 - 1) * 8 * 8;
        assert_abs_diff_eq!(reg_loss(&ramp), terms as f64 * c * c, epsilon = 1e-9);
    }

    #[test]
    fn vol_identity_and_uniform_expansion() {
        let grid = SamplingGrid::unit([10, 10, 10]);
        let labels = two_box_labels(&grid);
        let identity = DisplacementField::zeros(grid.clone());
        let expect = sigmoid(-2.5);
        assert_abs_diff_eq!(vol_loss(&labels, &identity).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.07586, epsilon = 5e-6);

        // Uniform 1.2x expansion: every voxel changes volume like its
        // surroundings, so the penalty stays at the identity floor.
        let mut uniform = DisplacementField::zeros(grid.clone());
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let w = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    uniform.set(i, j, k, Vector3::new(0.2 * w[0], 0.2 * w[1], 0.2 * w[2]));
                }
            }
        }
        assert_abs_diff_eq!(vol_loss(&labels, &uniform).unwrap(), expect, epsilon = 1e-9);

        let empty = LabelMap::zeros(grid.clone());
        assert!(vol_loss(&empty, &identity).is_err());
    }

    #[test]
    fn vol_hand_value_on_split_determinants() {
        // One label over the whole volume, determinants 2 and 0.5 half/half:
        // the segment mean is 1.25 and the two ratios gate at 1.6 and 2.5.
        let tape = Tape::new();
        let n = 6;
        let dets = ArrayD::from_shape_fn(IxDyn(&[n, n, n]), |ix| {
            if ix[0] < n / 2 {
                2.0
            } else {
                0.5
            }
        });
        let dv = tape.leaf(dets);
        let segments = vec![(0..n * n * n).collect::<Vec<_>>()];
        let v = vol_from_dets(&tape, dv, &segments);
        let expect = (sigmoid(5.0 * (1.6 - 1.5)) + sigmoid(5.0 * (2.5 - 1.5))) / 2.0;
        assert_abs_diff_eq!(tape.scalar_value(v), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, (0.62246 + 0.99331) / 2.0, epsilon = 1e-5);
    }

    #[test]
    fn general_identity_matches_hand_values() {
        let grid = SamplingGrid::unit([8, 8, 8]);
        let atlas = two_box_labels(&grid);
        let id = AffineTransform::identity();
        let zero = DisplacementField::zeros(grid.clone());
        let w = LossWeights::default();

        let case = |_: usize| LossCase {
            labels: &atlas,
            affine: &id,
            fwd: &zero,
            inv: &zero,
        };
        let report = general_loss(&[case(0), case(1)], &atlas, &w).unwrap();
        assert_eq!(report.mode, LossMode::General);
        // Two perfectly matched cases and two ordered pairs.
        assert_abs_diff_eq!(report.sim, -2.0 * w.lambda1, epsilon = 1e-9);
        assert_abs_diff_eq!(report.reg, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.pairwise_sim, -2.0 * w.lambda3, epsilon = 1e-9);
        assert_abs_diff_eq!(report.vol, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            report.total,
            report.sim + report.reg + report.pairwise_sim + report.vol,
            epsilon = 1e-9
        );

        let single = general_loss(&[case(0)], &atlas, &w).unwrap();
        assert_abs_diff_eq!(single.pairwise_sim, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn overfit_identity_and_weight_zeroing() {
        let grid = SamplingGrid::unit([8, 8, 8]);
        let atlas = two_box_labels(&grid);
        let id = AffineTransform::identity();
        let zero = DisplacementField::zeros(grid.clone());
        let w = LossWeights::default();
        let case = LossCase {
            labels: &atlas,
            affine: &id,
            fwd: &zero,
            inv: &zero,
        };

        let report = overfit_loss(&case, &atlas, &w).unwrap();
        assert_eq!(report.mode, LossMode::Overfit);
        assert_abs_diff_eq!(report.sim, -w.lambda1, epsilon = 1e-9);
        assert_abs_diff_eq!(report.reg, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.vol, w.lambda4 * sigmoid(-2.5), epsilon = 1e-9);
        assert_abs_diff_eq!(report.pairwise_sim, 0.0, epsilon = 1e-12);

        let w0 = LossWeights { lambda4: 0.0, ..w };
        let r0 = overfit_loss(&case, &atlas, &w0).unwrap();
        assert_abs_diff_eq!(r0.vol, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r0.total, r0.sim + r0.reg, epsilon = 1e-9);
    }

    /// Two nontrivial cases against a term-by-term assembly that goes
    /// through the plain resampling path instead of the loss graph.
    #[test]
    fn general_matches_compositional_oracle() {
        let atlas_grid = SamplingGrid::unit([10, 10, 10]);
        let atlas = two_box_labels(&atlas_grid);

        let subj_grid = SamplingGrid::axial([9, 9, 9], [1.1, 1.0, 0.9]);
        let subj_a = two_box_labels(&subj_grid);
        let subj_b = {
            let data = Array3::from_shape_fn((9, 9, 9), |(i, j, k)| {
                if i >= 2 && i < 5 && j >= 3 && j < 7 && k >= 2 && k < 7 {
                    1
                } else if i >= 6 && i < 8 && j >= 2 && j < 4 && k >= 2 && k < 4 {
                    2
                } else {
                    0
                }
            });
            LabelMap::new(subj_grid.clone(), data).unwrap()
        };

        let affine_a = AffineTransform::from_matrix(Matrix4::new(
            1.05, 0.0, 0.0, 0.4, //
            0.0, 0.95, 0.0, -0.2, //
            0.0, 0.0, 1.0, 0.1, //
            0.0, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        let affine_b = AffineTransform::identity();

        let fwd_a = smooth_field(&atlas_grid, 0.5, 31);
        let inv_a = smooth_field(&atlas_grid, 0.5, 32);
        let fwd_b = smooth_field(&atlas_grid, 0.4, 33);
        let inv_b = smooth_field(&atlas_grid, 0.4, 34);

        let w = LossWeights::default();
        let report = general_loss(
            &[
                LossCase { labels: &subj_a, affine: &affine_a, fwd: &fwd_a, inv: &inv_a },
                LossCase { labels: &subj_b, affine: &affine_b, fwd: &fwd_b, inv: &inv_b },
            ],
            &atlas,
            &w,
        )
        .unwrap();

        // Oracle assembly through resample_image + sim_loss/reg_loss.
        let d_atlas = distance_map(&atlas, w.gamma).unwrap();
        let atlas_image = ImageVolume::new(atlas_grid.clone(), d_atlas.data.clone()).unwrap();
        let mut sim = 0.0;
        let mut reg = 0.0;
        let mut warped = Vec::new();
        for (subj, affine, fwd, inv) in [
            (&subj_a, &affine_a, &fwd_a, &inv_a),
            (&subj_b, &affine_b, &fwd_b, &inv_b),
        ] {
            let d_subj = distance_map(subj, w.gamma).unwrap();
            let chain_inv = TransformChain::new(vec![
                Transform::Displacement((*inv).clone()),
                Transform::Affine(affine.clone()),
            ]);
            let moved = resample_image(&atlas_image, &chain_inv, &subj.grid).unwrap();
            sim += sim_loss(&d_subj.data, &moved.data).0;
            reg += reg_loss(fwd);

            let subj_image = ImageVolume::new(subj.grid.clone(), d_subj.data).unwrap();
            let chain_fwd = TransformChain::new(vec![
                Transform::Affine(affine.inverse().unwrap()),
                Transform::Displacement((*fwd).clone()),
            ]);
            warped.push(resample_image(&subj_image, &chain_fwd, &atlas_grid).unwrap());
        }
        let pair = 2.0 * sim_loss(&warped[0].data, &warped[1].data).0;

        assert_abs_diff_eq!(report.sim, w.lambda1 * sim, epsilon = 1e-9);
        assert_abs_diff_eq!(report.reg, w.lambda2 * reg, epsilon = 1e-9);
        assert_abs_diff_eq!(report.pairwise_sim, w.lambda3 * pair, epsilon = 1e-9);
        assert_abs_diff_eq!(
            report.total,
            w.lambda1 * sim + w.lambda2 * reg + w.lambda3 * pair,
            epsilon = 1e-9
        );
    }

    #[test]
    fn overfit_matches_compositional_oracle() {
        let atlas_grid = SamplingGrid::unit([9, 9, 9]);
        let atlas = two_box_labels(&atlas_grid);
        let subj_grid = SamplingGrid::axial([8, 8, 8], [1.2, 1.0, 1.0]);
        let subj = two_box_labels(&subj_grid);
        let affine = AffineTransform::from_matrix(Matrix4::new(
            1.0, 0.0, 0.0, 0.3, //
            0.0, 1.1, 0.0, 0.0, //
            0.0, 0.0, 0.9, -0.2, //
            0.0, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        let fwd = smooth_field(&atlas_grid, 0.6, 41);
        let inv = smooth_field(&atlas_grid, 0.6, 42);
        let w = LossWeights::default();

        let report = overfit_loss(
            &LossCase { labels: &subj, affine: &affine, fwd: &fwd, inv: &inv },
            &atlas,
            &w,
        )
        .unwrap();

        let d_atlas = distance_map(&atlas, w.gamma).unwrap();
        let d_subj = distance_map(&subj, w.gamma).unwrap();
        let subj_image = ImageVolume::new(subj_grid.clone(), d_subj.data).unwrap();
        let chain_fwd = TransformChain::new(vec![
            Transform::Affine(affine.inverse().unwrap()),
            Transform::Displacement(fwd.clone()),
        ]);
        let moved = resample_image(&subj_image, &chain_fwd, &atlas_grid).unwrap();
        let sim = sim_loss(&moved.data, &d_atlas.data).0;
        let reg = reg_loss(&fwd);
        let vol = vol_loss(&atlas, &fwd).unwrap();

        assert_abs_diff_eq!(report.sim, w.lambda1 * sim, epsilon = 1e-9);
        assert_abs_diff_eq!(report.reg, w.lambda2 * reg, epsilon = 1e-9);
        assert_abs_diff_eq!(report.vol, w.lambda4 * vol, epsilon = 1e-9);
        assert_abs_diff_eq!(
            report.total,
            report.sim + report.reg + report.vol,
            epsilon = 1e-9
        );
    }

    /// End-to-end differentiability: the full over-fitting objective built
    /// on top of SVF integration, probed against central differences in the
    /// velocity field.
    #[test]
    fn overfit_gradient_wrt_velocity_matches_fd() {
        let grid = SamplingGrid::unit([6, 6, 6]);
        let atlas = two_box_labels(&grid);
        let subj = {
            let data = Array3::from_shape_fn((6, 6, 6), |(i, j, k)| {
                if i >= 1 && i < 3 && j >= 2 && j < 5 && k >= 1 && k < 4 {
                    1
                } else if i == 4 && j >= 1 && j < 3 && k >= 1 && k < 3 {
                    2
                } else {
                    0
                }
            });
            LabelMap::new(grid.clone(), data).unwrap()
        };
        let id = AffineTransform::identity();
        let w = LossWeights::default();
        let d_atlas = Rc::new(distance_map(&atlas, w.gamma).unwrap().data);
        let d_subj = Rc::new(distance_map(&subj, w.gamma).unwrap().data);
        let v0 = smooth_field(&grid, 0.5, 51).data;

        let eval = |field: &Array4<f64>| -> (Tape, Var, Var) {
            let tape = Tape::new();
            let v = tape.leaf(field_ops::channel_first(field));
            let (fwd, inv) = field_ops::integrate_svf_var(&tape, &grid, v, Some(2));
            let case = CaseTerms {
                dist: Rc::clone(&d_subj),
                grid: &grid,
                affine: &id,
                fwd,
                inv,
            };
            let graph = overfit_loss_graph(&tape, &case, &d_atlas, &grid, &atlas, &w).unwrap();
            (tape, v, graph.total)
        };

        let (tape, v, total) = eval(&v0);
        let grads = tape.backward(total);
        let g = grads.wrt(v).unwrap().clone();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-4;
        for _ in 0..6 {
            let c = rng.random_range(0..3usize);
            let i = rng.random_range(0..6usize);
            let j = rng.random_range(0..6usize);
            let k = rng.random_range(0..6usize);
            let probe = |delta: f64| {
                let mut f = v0.clone();
                f[(i, j, k, c)] += delta;
                let (t, _, tot) = eval(&f);
                t.scalar_value(tot)
            };
            let num = (probe(h) - probe(-h)) / (2.0 * h);
            let an = g[[c, i, j, k]];
            let denom = num.abs().max(an.abs()).max(1e-8);
            assert!(
                (num - an).abs() / denom < 1e-3,
                "probe ({c},{i},{j},{k}): analytic {an} vs numeric {num}"
            );
        }
    }
}
