//! Registration quality and tumour-plausibility metrics: per-label overlap
//! and surface distances, folding fraction, tumour volume change, and the
//! tumour-to-ring Jacobian ratio.
//!
//! Surfaces are boundary voxels under 6-connectivity and distances run
//! between voxel centres in millimetres, which keeps every metric checkable
//! against a brute-force all-pairs oracle.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::edt::edt_to_sources;
use crate::error::{Error, Result};
use crate::field::{fraction_of_foldings, jacobian_determinant};
use crate::volumes::{
    resample_labels, DisplacementField, LabelMap, SamplingGrid, TransformChain,
};

/// A binary mask bound to its sampling grid.
#[derive(Debug, Clone)]
pub struct Mask {
    pub grid: SamplingGrid,
    pub data: Array3<bool>,
}

impl Mask {
    pub fn new(grid: SamplingGrid, data: Array3<bool>) -> Result<Self> {
        if data.dim() != (grid.shape[0], grid.shape[1], grid.shape[2]) {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {:?} does not match grid {:?}",
                data.dim(),
                grid.shape
            )));
        }
        Ok(Mask { grid, data })
    }

    pub fn from_label(labels: &LabelMap, label: i32) -> Self {
        Mask {
            grid: labels.grid.clone(),
            data: labels.data.mapv(|l| l == label),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn as_labels(&self) -> LabelMap {
        LabelMap::new(self.grid.clone(), self.data.mapv(|v| v as i32))
            .expect("mask shape already validated")
    }
}

fn check_same_grid(a: &Mask, b: &Mask) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch(
            "masks live on different grids".into(),
        ));
    }
    Ok(())
}

/// Sørensen-Dice overlap. Two empty masks count as a perfect but degenerate
/// match; the flag reports that case.
pub fn dsc(a: &Mask, b: &Mask) -> Result<(f64, bool)> {
    check_same_grid(a, b)?;
    let mut inter = 0usize;
    let (mut na, mut nb) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        na += *x as usize;
        nb += *y as usize;
        inter += (*x && *y) as usize;
    }
    if na + nb == 0 {
        return Ok((1.0, true));
    }
    Ok((2.0 * inter as f64 / (na + nb) as f64, false))
}

/// Mask voxels with at least one of their six face neighbours outside the
/// mask; the volume edge counts as outside.
fn boundary(mask: &Array3<bool>) -> Array3<bool> {
    let (nx, ny, nz) = mask.dim();
    Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
        if !mask[(i, j, k)] {
            return false;
        }
        let dims = [nx, ny, nz];
        let p = [i, j, k];
        for a in 0..3 {
            for step in [-1isize, 1] {
                let q = p[a] as isize + step;
                if q < 0 || q >= dims[a] as isize {
                    return true;
                }
                let mut n = p;
                n[a] = q as usize;
                if !mask[(n[0], n[1], n[2])] {
                    return true;
                }
            }
        }
        false
    })
}

/// Directed surface-distance summaries: for every boundary voxel of `from`,
/// the distance in mm to the nearest boundary voxel of `onto`. Returns
/// (max, sum, count).
fn directed_surface(from: &Array3<bool>, onto: &Array3<bool>, spacing: [f64; 3]) -> (f64, f64, usize) {
    let dist = edt_to_sources(onto.view(), spacing);
    let mut max = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0;
    for (p, &is_surface) in from.indexed_iter() {
        if is_surface {
            let d = dist[p];
            max = max.max(d);
            sum += d;
            count += 1;
        }
    }
    (max, sum, count)
}

fn surface_pair(a: &Mask, b: &Mask) -> Result<((f64, f64, usize), (f64, f64, usize))> {
    check_same_grid(a, b)?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::EmptyForeground(
            "surface distances need two nonempty masks".into(),
        ));
    }
    let sa = boundary(&a.data);
    let sb = boundary(&b.data);
    let spacing = a.grid.spacing;
    Ok((
        directed_surface(&sa, &sb, spacing),
        directed_surface(&sb, &sa, spacing),
    ))
}

/// Hausdorff distance: the worse of the two directed maximum surface
/// distances, in mm.
pub fn hd(a: &Mask, b: &Mask) -> Result<f64> {
    let (ab, ba) = surface_pair(a, b)?;
    Ok(ab.0.max(ba.0))
}

/// Average symmetric surface distance in mm.
pub fn assd(a: &Mask, b: &Mask) -> Result<f64> {
    let (ab, ba) = surface_pair(a, b)?;
    Ok((ab.1 + ba.1) / (ab.2 + ba.2) as f64)
}

/// Ratio of tumour volume after warping onto `atlas_grid` to the volume on
/// the native grid, both in mm³.
pub fn tumour_volume_factor(
    tumour: &Mask,
    chain: &TransformChain,
    atlas_grid: &SamplingGrid,
) -> Result<f64> {
    let native = tumour.count();
    if native == 0 {
        return Err(Error::EmptyForeground("tumour mask is empty".into()));
    }
    let warped = resample_labels(&tumour.as_labels(), chain, atlas_grid)?;
    let warped_count = warped.data.iter().filter(|l| **l == 1).count();
    let vol_before = native as f64 * tumour.grid.voxel_volume();
    let vol_after = warped_count as f64 * atlas_grid.voxel_volume();
    Ok(vol_after / vol_before)
}

/// Mean |J| inside the tumour over mean |J| in the peritumoral ring: all
/// voxels within `ring_mm` of the tumour (voxel-centre Euclidean distance),
/// outside it, and inside `foreground` when given.
pub fn jacobian_ratio(
    tumour: &Mask,
    t: &DisplacementField,
    ring_mm: f64,
    foreground: Option<&Mask>,
) -> Result<f64> {
    if tumour.grid != t.grid {
        return Err(Error::GridMismatch(
            "tumour mask must live on the transform grid".into(),
        ));
    }
    if tumour.count() == 0 {
        return Err(Error::EmptyForeground("tumour mask is empty".into()));
    }
    if let Some(fg) = foreground {
        check_same_grid(tumour, fg)?;
    }
    let dets = jacobian_determinant(t);
    let dist = edt_to_sources(tumour.data.view(), tumour.grid.spacing);

    let (mut sum_t, mut n_t) = (0.0, 0usize);
    let (mut sum_r, mut n_r) = (0.0, 0usize);
    for (p, &inside) in tumour.data.indexed_iter() {
        let j = dets[p].abs();
        if inside {
            sum_t += j;
            n_t += 1;
        } else if dist[p] <= ring_mm && foreground.is_none_or(|fg| fg.data[p]) {
            sum_r += j;
            n_r += 1;
        }
    }
    if n_r == 0 {
        return Err(Error::EmptyForeground("peritumoral ring is empty".into()));
    }
    Ok((sum_t / n_t as f64) / (sum_r / n_r as f64))
}

/// All quality numbers for one registered case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub dsc_per_label: BTreeMap<i32, f64>,
    pub hd_per_label: BTreeMap<i32, f64>,
    pub assd_per_label: BTreeMap<i32, f64>,
    pub fof: f64,
    pub tumour_volume_factor: Option<f64>,
    pub jacobian_ratio: Option<f64>,
}

/// Score a warped segmentation against reference labels and the transform
/// that produced it. Surface distances are reported only for labels present
/// in both volumes. Optional tumour numbers are passed through.
pub fn case_metrics(
    warped: &LabelMap,
    reference: &LabelMap,
    t: &DisplacementField,
    tumour_volume_factor: Option<f64>,
    jacobian_ratio: Option<f64>,
) -> Result<CaseMetrics> {
    if warped.grid != reference.grid {
        return Err(Error::GridMismatch(
            "scored volumes live on different grids".into(),
        ));
    }
    let mut labels = warped.labels();
    labels.extend(reference.labels());
    labels.remove(&0);

    let mut dsc_per_label = BTreeMap::new();
    let mut hd_per_label = BTreeMap::new();
    let mut assd_per_label = BTreeMap::new();
    for label in labels {
        let a = Mask::from_label(warped, label);
        let b = Mask::from_label(reference, label);
        dsc_per_label.insert(label, dsc(&a, &b)?.0);
        if a.count() > 0 && b.count() > 0 {
            hd_per_label.insert(label, hd(&a, &b)?);
            assd_per_label.insert(label, assd(&a, &b)?);
        }
    }
    Ok(CaseMetrics {
        dsc_per_label,
        hd_per_label,
        assd_per_label,
        fof: fraction_of_foldings(t),
        tumour_volume_factor,
        jacobian_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Transform;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn mask_from_fn(
        grid: &SamplingGrid,
        f: impl Fn(usize, usize, usize) -> bool,
    ) -> Mask {
        let [nx, ny, nz] = grid.shape;
        Mask::new(
            grid.clone(),
            Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| f(i, j, k)),
        )
        .unwrap()
    }

    fn box_mask(grid: &SamplingGrid, lo: [usize; 3], hi: [usize; 3]) -> Mask {
        mask_from_fn(grid, |i, j, k| {
            let p = [i, j, k];
            (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])
        })
    }

    /// All-pairs surface-distance oracle over boundary voxel centres.
    fn brute_surface(a: &Mask, b: &Mask) -> (f64, f64) {
        let surf = |m: &Mask| {
            let s = boundary(&m.data);
            s.indexed_iter()
                .filter(|(_, v)| **v)
                .map(|((i, j, k), _)| {
                    [
                        i as f64 * m.grid.spacing[0],
                        j as f64 * m.grid.spacing[1],
                        k as f64 * m.grid.spacing[2],
                    ]
                })
                .collect::<Vec<_>>()
        };
        let sa = surf(a);
        let sb = surf(b);
        let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
            set.iter()
                .map(|q| {
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let d_ab: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
        let d_ba: Vec<f64> = sb.iter().map(|p| nearest(p, &sa)).collect();
        let hd = d_ab
            .iter()
            .chain(&d_ba)
            .fold(0.0f64, |m, &v| m.max(v));
        let assd = (d_ab.iter().sum::<f64>() + d_ba.iter().sum::<f64>())
            / (d_ab.len() + d_ba.len()) as f64;
        (hd, assd)
    }

    #[test]
    fn dsc_known_values() {
        let grid = SamplingGrid::unit([3, 3, 3]);
        let a = box_mask(&grid, [0, 0, 0], [2, 2, 1]);
        assert_eq!(dsc(&a, &a).unwrap(), (1.0, false));

        let b = box_mask(&grid, [0, 0, 2], [2, 2, 3]);
        assert_eq!(dsc(&a, &b).unwrap(), (0.0, false));

        // 4-voxel and 3-voxel masks sharing exactly 2 voxels.
        let c = mask_from_fn(&grid, |i, j, k| k == 0 && ((i, j) == (0, 0) || (i, j) == (1, 1) || (i, j) == (2, 2)));
        assert_abs_diff_eq!(dsc(&a, &c).unwrap().0, 2.0 * 2.0 / 7.0, epsilon = 1e-12);

        let empty = mask_from_fn(&grid, |_, _, _| false);
        assert_eq!(dsc(&empty, &empty).unwrap(), (1.0, true));

        let other = SamplingGrid::unit([4, 3, 3]);
        let far = box_mask(&other, [0, 0, 0], [1, 1, 1]);
        assert!(dsc(&a, &far).is_err());
    }

    #[test]
    fn surface_distances_known_values() {
        let grid = SamplingGrid::axial([8, 4, 4], [1.5, 1.0, 1.0]);
        let a = box_mask(&grid, [1, 1, 1], [2, 2, 2]);
        assert_abs_diff_eq!(hd(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(assd(&a, &a).unwrap(), 0.0);

        // Single voxels two index steps apart along x: 3 mm at 1.5 mm
        // spacing.
        let b = box_mask(&grid, [3, 1, 1], [4, 2, 2]);
        assert_abs_diff_eq!(hd(&a, &b).unwrap(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(assd(&a, &b).unwrap(), 3.0, epsilon = 1e-12);

        let empty = mask_from_fn(&grid, |_, _, _| false);
        assert!(hd(&a, &empty).is_err());
        assert!(assd(&empty, &a).is_err());
    }

    #[test]
    fn surface_distances_match_brute_force_on_random_masks() {
        let grid = SamplingGrid::axial([8, 8, 8], [0.8, 1.0, 1.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let random_mask = |rng: &mut ChaCha8Rng| {
                let mut m = Array3::from_elem((8, 8, 8), false);
                for v in m.iter_mut() {
                    *v = rng.random_bool(0.3);
                }
                Mask::new(grid.clone(), m).unwrap()
            };
            let a = random_mask(&mut rng);
            let b = random_mask(&mut rng);
            if a.count() == 0 || b.count() == 0 {
                continue;
            }
            let (hd_oracle, assd_oracle) = brute_surface(&a, &b);
            assert_abs_diff_eq!(hd(&a, &b).unwrap(), hd_oracle, epsilon = 1e-9);
            assert_abs_diff_eq!(assd(&a, &b).unwrap(), assd_oracle, epsilon = 1e-9);
            assert_abs_diff_eq!(hd(&a, &b).unwrap(), hd(&b, &a).unwrap(), epsilon = 1e-12);
            assert!(assd(&a, &b).unwrap() <= hd(&a, &b).unwrap() + 1e-12);
        }
    }

    #[test]
    fn surface_distances_survive_common_translation() {
        let grid = SamplingGrid::unit([10, 10, 10]);
        let a = box_mask(&grid, [1, 1, 1], [4, 5, 3]);
        let b = box_mask(&grid, [2, 3, 2], [6, 6, 5]);
        let shift = |m: &Mask| {
            mask_from_fn(&grid, |i, j, k| {
                i >= 2 && j >= 1 && k >= 3 && m.data[(i - 2, j - 1, k - 3)]
            })
        };
        assert_abs_diff_eq!(
            hd(&a, &b).unwrap(),
            hd(&shift(&a), &shift(&b)).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            assd(&a, &b).unwrap(),
            assd(&shift(&a), &shift(&b)).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn volume_factor_identity_and_contraction() {
        let grid = SamplingGrid::unit([24, 24, 24]);
        let centre = 11.5;
        let tumour = mask_from_fn(&grid, |i, j, k| {
            let d = [(i as f64 - centre), (j as f64 - centre), (k as f64 - centre)];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= 8.0
        });

        let identity = TransformChain::new(vec![]);
        assert_abs_diff_eq!(
            tumour_volume_factor(&tumour, &identity, &grid).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        // Lookup position c + (x-c)/0.8 shrinks the warped mask by 0.8 per
        // axis.
        let mut field = DisplacementField::zeros(grid.clone());
        for i in 0..24 {
            for j in 0..24 {
                for k in 0..24 {
                    let d = Vector3::new(
                        i as f64 - centre,
                        j as f64 - centre,
                        k as f64 - centre,
                    );
                    field.set(i, j, k, d * (1.0 / 0.8 - 1.0));
                }
            }
        }
        let chain = TransformChain::new(vec![Transform::Displacement(field)]);
        let factor = tumour_volume_factor(&tumour, &chain, &grid).unwrap();
        assert!(
            (factor - 0.512).abs() < 0.05,
            "contraction factor {factor} not near 0.512"
        );

        let empty = mask_from_fn(&grid, |_, _, _| false);
        assert!(tumour_volume_factor(&empty, &identity, &grid).is_err());
    }

    #[test]
    fn jacobian_ratio_identity_scaling_and_contraction() {
        let grid = SamplingGrid::unit([36, 36, 36]);
        let c = 17.5;
        let cheb = |i: usize, j: usize, k: usize| {
            (i as f64 - c)
                .abs()
                .max((j as f64 - c).abs())
                .max((k as f64 - c).abs())
        };
        let tumour = mask_from_fn(&grid, |i, j, k| cheb(i, j, k) <= 3.0);

        let identity = DisplacementField::zeros(grid.clone());
        assert_abs_diff_eq!(
            jacobian_ratio(&tumour, &identity, 10.0, None).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        // Uniform global expansion changes every determinant equally.
        let mut scaling = DisplacementField::zeros(grid.clone());
        for i in 0..36 {
            for j in 0..36 {
                for k in 0..36 {
                    let d = Vector3::new(i as f64 - c, j as f64 - c, k as f64 - c);
                    scaling.set(i, j, k, d * 0.15);
                }
            }
        }
        assert_abs_diff_eq!(
            jacobian_ratio(&tumour, &scaling, 10.0, None).unwrap(),
            1.0,
            epsilon = 1e-9
        );

        // Contract only a pocket around the tumour: |J| = 0.5 inside, 1 in
        // most of the ring, with a thin transition shell.
        let mut pocket = DisplacementField::zeros(grid.clone());
        for i in 0..36 {
            for j in 0..36 {
                for k in 0..36 {
                    let d = cheb(i, j, k);
                    let w = if d <= 4.0 {
                        1.0
                    } else if d < 5.0 {
                        5.0 - d
                    } else {
                        0.0
                    };
                    let off = Vector3::new(-(0.5) * (i as f64 - c), 0.0, 0.0);
                    pocket.set(i, j, k, off * w);
                }
            }
        }
        let ratio = jacobian_ratio(&tumour, &pocket, 10.0, None).unwrap();
        assert!(
            (ratio - 0.5).abs() / 0.5 < 0.1,
            "pocket contraction ratio {ratio} not within 10% of 0.5"
        );

        // A mask covering everything leaves no ring.
        let all = mask_from_fn(&grid, |_, _, _| true);
        assert!(jacobian_ratio(&all, &identity, 10.0, None).is_err());
    }

    #[test]
    fn case_metrics_assembles_per_label_maps() {
        let grid = SamplingGrid::unit([8, 8, 8]);
        let truth = LabelMap::new(
            grid.clone(),
            Array3::from_shape_fn((8, 8, 8), |(i, j, k)| {
                if i < 4 && j < 4 && k < 4 {
                    1
                } else if i >= 5 && j >= 5 {
                    2
                } else {
                    0
                }
            }),
        )
        .unwrap();
        // Label 1 matches; label 2 is missing from the warped volume and
        // label 3 appears only there.
        let warped = LabelMap::new(
            grid.clone(),
            Array3::from_shape_fn((8, 8, 8), |(i, j, k)| {
                if i < 4 && j < 4 && k < 4 {
                    1
                } else if i == 0 && j == 7 && k == 7 {
                    3
                } else {
                    0
                }
            }),
        )
        .unwrap();
        let t = DisplacementField::zeros(grid.clone());
        let m = case_metrics(&warped, &truth, &t, Some(0.9), None).unwrap();
        assert_abs_diff_eq!(m.dsc_per_label[&1], 1.0);
        assert_abs_diff_eq!(m.dsc_per_label[&2], 0.0);
        assert_abs_diff_eq!(m.dsc_per_label[&3], 0.0);
        assert!(m.hd_per_label.contains_key(&1));
        assert!(!m.hd_per_label.contains_key(&2));
        assert_abs_diff_eq!(m.fof, 0.0);
        assert_eq!(m.tumour_volume_factor, Some(0.9));
        assert_eq!(m.jacobian_ratio, None);

        let json = serde_json::to_value(&m).unwrap();
        assert!(json["dsc_per_label"]["1"].is_f64());
    }
}
