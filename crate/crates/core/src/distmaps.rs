//! Distance-map representation of multi-label segmentations.
//!
//! Every voxel carries the exact Euclidean distance (mm) from its centre to
//! the nearest boundary face of its own label region, offset by
//! `gamma * label`. Boundary faces sit halfway between a label voxel and a
//! neighbour outside the label (domain edges count), so one-voxel-thick
//! structures carry half a spacing instead of a zero plateau, and the map
//! stays 1-Lipschitz inside each region while jumping by multiples of gamma
//! across label boundaries.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::edt::squared_dt_1d;
use crate::error::{Error, Result};
use crate::nifti;
use crate::volumes::{ImageVolume, LabelMap, SamplingGrid};

/// Continuous distance representation of a label map.
#[derive(Debug, Clone)]
pub struct DistanceMap {
    pub grid: SamplingGrid,
    pub data: Array3<f64>,
    pub gamma: f64,
    /// Ascending label ids the map was built from, background included.
    pub labels: Vec<i32>,
}

fn bbox_of(data: &Array3<i32>, label: i32) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut seen = false;
    for ((i, j, k), &l) in data.indexed_iter() {
        if l == label {
            seen = true;
            let idx = [i, j, k];
            for a in 0..3 {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a]);
            }
        }
    }
    seen.then_some((lo, hi))
}

/// Squared distances from integer line positions `0..out.len()` to the
/// nearest of the sorted half-integer `faces` positions, scaled by `spacing`.
fn line_sq_to_faces(faces: &[f64], spacing: f64, out: &mut [f64]) {
    if faces.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut ptr = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        let x = i as f64;
        while ptr + 1 < faces.len() && (faces[ptr + 1] - x).abs() < (faces[ptr] - x).abs() {
            ptr += 1;
        }
        let d = (x - faces[ptr]) * spacing;
        *o = d * d;
    }
}

/// Exact squared face distance for one label, computed over its bounding box.
/// Boundary faces are grouped by normal axis; for each group the first 1-D
/// pass measures along the normal (where faces sit at half-integers) and the
/// remaining two axes are closed with parabola passes.
fn label_face_sq(
    data: &Array3<i32>,
    label: i32,
    spacing: [f64; 3],
    lo: [usize; 3],
    hi: [usize; 3],
) -> Array3<f64> {
    let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let shape = data.dim();
    let shape = [shape.0, shape.1, shape.2];
    let in_label = |idx: [isize; 3]| -> bool {
        idx.iter().all(|&v| v >= 0)
            && (0..3).all(|a| (idx[a] as usize) < shape[a])
            && data[(idx[0] as usize, idx[1] as usize, idx[2] as usize)] == label
    };

    let mut best = Array3::from_elem((dims[0], dims[1], dims[2]), f64::INFINITY);
    let mut faces: Vec<f64> = Vec::new();
    for axis in 0..3 {
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut sq = Array3::from_elem((dims[0], dims[1], dims[2]), f64::INFINITY);
        let mut line = vec![0.0f64; dims[axis]];
        for u in 0..dims[o1] {
            for w in 0..dims[o2] {
                faces.clear();
                for t in 0..=dims[axis] {
                    let mut prev = [0isize; 3];
                    prev[axis] = lo[axis] as isize + t as isize - 1;
                    prev[o1] = (lo[o1] + u) as isize;
                    prev[o2] = (lo[o2] + w) as isize;
                    let mut cur = prev;
                    cur[axis] += 1;
                    if in_label(prev) != in_label(cur) {
                        faces.push(t as f64 - 0.5);
                    }
                }
                line_sq_to_faces(&faces, spacing[axis], &mut line);
                for (t, &v) in line.iter().enumerate() {
                    let mut idx = [0usize; 3];
                    idx[axis] = t;
                    idx[o1] = u;
                    idx[o2] = w;
                    sq[(idx[0], idx[1], idx[2])] = v;
                }
            }
        }
        // Close the remaining axes with parabola passes.
        for pass_axis in [o1, o2] {
            let n = dims[pass_axis];
            let mut buf = vec![0.0f64; n];
            let mut res = vec![0.0f64; n];
            for mut lane in sq.lanes_mut(ndarray::Axis(pass_axis)) {
                for (b, v) in buf.iter_mut().zip(lane.iter()) {
                    *b = *v;
                }
                squared_dt_1d(&buf, spacing[pass_axis], &mut res);
                for (v, r) in lane.iter_mut().zip(res.iter()) {
                    *v = *r;
                }
            }
        }
        best.zip_mut_with(&sq, |b, &s| *b = b.min(s));
    }
    best
}

/// Build the distance representation of a label map. Every label present,
/// background included, contributes its own inside-distance; `gamma` then
/// offsets each region by `gamma * label`.
pub fn distance_map(labels: &LabelMap, gamma: f64) -> Result<DistanceMap> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gamma must be nonnegative, got {gamma}"
        )));
    }
    let dim = labels.data.dim();
    let mut out = Array3::from_elem(dim, f64::NAN);

    let mut ids: Vec<i32> = labels.labels().into_iter().collect();
    if labels.data.iter().any(|&l| l == 0) {
        ids.insert(0, 0);
    }

    for &label in &ids {
        let (lo, hi) = bbox_of(&labels.data, label).expect("label came from census");
        let sq = label_face_sq(&labels.data, label, labels.grid.spacing, lo, hi);
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    if labels.data[(i, j, k)] == label {
                        let d = sq[(i - lo[0], j - lo[1], k - lo[2])].sqrt();
                        out[(i, j, k)] = d + gamma * label as f64;
                    }
                }
            }
        }
    }

    Ok(DistanceMap {
        grid: labels.grid.clone(),
        data: out,
        gamma,
        labels: ids,
    })
}

/// Voxels of `label_a` members with a 6-connected neighbour in `label_b`:
/// the shared interface surface between the two label groups.
pub fn junction_surface(
    labels: &LabelMap,
    label_a: &[i32],
    label_b: &[i32],
) -> Result<Array3<bool>> {
    if label_a.is_empty() || label_b.is_empty() {
        return Err(Error::InvalidArgument("empty junction label set".into()));
    }
    if label_a.iter().any(|l| label_b.contains(l)) {
        return Err(Error::InvalidArgument(
            "junction label sets overlap".into(),
        ));
    }
    let dim = labels.data.dim();
    let shape = [dim.0, dim.1, dim.2];
    let in_b = |idx: [isize; 3]| -> bool {
        idx.iter().all(|&v| v >= 0)
            && (0..3).all(|a| (idx[a] as usize) < shape[a])
            && label_b.contains(&labels.data[(idx[0] as usize, idx[1] as usize, idx[2] as usize)])
    };
    let mut out = Array3::from_elem(dim, false);
    for ((i, j, k), &l) in labels.data.indexed_iter() {
        if !label_a.contains(&l) {
            continue;
        }
        let p = [i as isize, j as isize, k as isize];
        'nbr: for axis in 0..3 {
            for step in [-1isize, 1] {
                let mut q = p;
                q[axis] += step;
                if in_b(q) {
                    out[(i, j, k)] = true;
                    break 'nbr;
                }
            }
        }
    }
    Ok(out)
}

fn sidecar_path(map_path: &Path) -> PathBuf {
    let mut s = map_path.as_os_str().to_os_string();
    s.push(".meta");
    PathBuf::from(s)
}

/// Cache a distance map as NIfTI plus a sidecar recording gamma and labels.
pub fn save_distance_map(path: impl AsRef<Path>, map: &DistanceMap) -> Result<()> {
    let path = path.as_ref();
    let img = ImageVolume::new(map.grid.clone(), map.data.clone())?;
    nifti::write_image(path, &img)?;
    let labels: Vec<String> = map.labels.iter().map(|l| l.to_string()).collect();
    let meta = format!("gamma {}\nlabels {}\n", map.gamma, labels.join(" "));
    fs::write(sidecar_path(path), meta).map_err(|e| Error::io(path, e))
}

/// Load a cached distance map and its sidecar metadata.
pub fn load_distance_map(path: impl AsRef<Path>) -> Result<DistanceMap> {
    let path = path.as_ref();
    let img = nifti::read_image(path)?;
    let meta_path = sidecar_path(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut gamma = None;
    let mut labels = None;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("gamma") => {
                gamma = parts.next().and_then(|t| t.parse::<f64>().ok());
            }
            Some("labels") => {
                labels = parts.map(|t| t.parse::<i32>().ok()).collect::<Option<Vec<_>>>();
            }
            _ => {}
        }
    }
    match (gamma, labels) {
        (Some(gamma), Some(labels)) => Ok(DistanceMap {
            grid: img.grid,
            data: img.data,
            gamma,
            labels,
        }),
        _ => Err(Error::Config(format!(
            "malformed distance-map sidecar {}",
            meta_path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive nearest-face search in world coordinates.
    fn brute_force_face_distance(labels: &LabelMap) -> Array3<f64> {
        let dim = labels.data.dim();
        let shape = [dim.0, dim.1, dim.2];
        let value = |idx: [isize; 3]| -> Option<i32> {
            if idx.iter().all(|&v| v >= 0) && (0..3).all(|a| (idx[a] as usize) < shape[a]) {
                Some(labels.data[(idx[0] as usize, idx[1] as usize, idx[2] as usize)])
            } else {
                None
            }
        };
        // Enumerate every boundary face as (label, world position of centre).
        let mut faces: Vec<(i32, Vector3<f64>)> = Vec::new();
        for axis in 0..3 {
            let mut ext = shape.map(|n| n as isize);
            ext[axis] += 1;
            for i in 0..ext[0] {
                for j in 0..ext[1] {
                    for k in 0..ext[2] {
                        let cur = [i, j, k];
                        let mut prev = cur;
                        prev[axis] -= 1;
                        let a = value(prev);
                        let b = value(cur);
                        if a == b {
                            continue;
                        }
                        let mut pos = [cur[0] as f64, cur[1] as f64, cur[2] as f64];
                        pos[axis] -= 0.5;
                        let w = labels.grid.voxel_to_world(pos);
                        if let Some(l) = a {
                            faces.push((l, w));
                        }
                        if let Some(l) = b {
                            faces.push((l, w));
                        }
                    }
                }
            }
        }
        Array3::from_shape_fn(dim, |(i, j, k)| {
            let l = labels.data[(i, j, k)];
            let x = labels.grid.voxel_to_world([i as f64, j as f64, k as f64]);
            faces
                .iter()
                .filter(|(fl, _)| *fl == l)
                .map(|(_, f)| (x - f).norm())
                .fold(f64::INFINITY, f64::min)
        })
    }

    fn cube_in_background() -> LabelMap {
        let mut lm = LabelMap::zeros(SamplingGrid::unit([7, 7, 7]));
        for i in 1..6 {
            for j in 1..6 {
                for k in 1..6 {
                    lm.data[(i, j, k)] = 1;
                }
            }
        }
        lm
    }

    #[test]
    fn cube_centre_and_corner() {
        let lm = cube_in_background();
        let dm = distance_map(&lm, 1.0).unwrap();
        assert_abs_diff_eq!(dm.data[(3, 3, 3)], 2.5 + 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(dm.data[(1, 1, 1)], 0.5 + 1.0, epsilon = 1e-9);
        assert_eq!(dm.labels, vec![0, 1]);
        // Full agreement with the exhaustive oracle, background included.
        let oracle = brute_force_face_distance(&lm);
        for ((i, j, k), &d) in dm.data.indexed_iter() {
            let expect = oracle[(i, j, k)] + lm.data[(i, j, k)] as f64;
            assert_abs_diff_eq!(d, expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn uniform_map_measures_grid_faces() {
        let mut lm = LabelMap::zeros(SamplingGrid::unit([5, 5, 5]));
        lm.data.fill(1);
        let dm = distance_map(&lm, 0.0).unwrap();
        assert_abs_diff_eq!(dm.data[(0, 2, 2)], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(dm.data[(2, 2, 2)], 2.5, epsilon = 1e-9);
    }

    #[test]
    fn gamma_offset_dominates_between_slabs() {
        let mut lm = LabelMap::zeros(SamplingGrid::unit([6, 4, 4]));
        for i in 0..6 {
            for j in 0..4 {
                for k in 0..4 {
                    lm.data[(i, j, k)] = if i < 3 { 1 } else { 2 };
                }
            }
        }
        let dm = distance_map(&lm, 10.0).unwrap();
        let max1 = dm
            .data
            .indexed_iter()
            .filter(|((i, _, _), _)| *i < 3)
            .map(|(_, &v)| v)
            .fold(f64::MIN, f64::max);
        let min2 = dm
            .data
            .indexed_iter()
            .filter(|((i, _, _), _)| *i >= 3)
            .map(|(_, &v)| v)
            .fold(f64::MAX, f64::min);
        assert!(min2 - max1 >= 10.0 - 3.0);
    }

    #[test]
    fn metric_part_scales_with_spacing() {
        let mut thin = LabelMap::zeros(SamplingGrid::unit([8, 6, 6]));
        for i in 2..6 {
            for j in 0..6 {
                for k in 0..6 {
                    thin.data[(i, j, k)] = 1;
                }
            }
        }
        let coarse = LabelMap {
            grid: SamplingGrid::axial([8, 6, 6], [2.0, 2.0, 2.0]),
            data: thin.data.clone(),
        };
        let g = 3.0;
        let d1 = distance_map(&thin, g).unwrap();
        let d2 = distance_map(&coarse, g).unwrap();
        for ((idx, a), b) in d1.data.indexed_iter().zip(d2.data.iter()) {
            let l = thin.data[idx] as f64;
            assert_abs_diff_eq!(2.0 * (a - g * l), b - g * l, epsilon = 1e-9);
        }
    }

    #[test]
    fn matches_oracle_on_random_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spacing in [[1.0, 1.0, 1.0], [0.8, 1.1, 2.3]] {
            let grid = SamplingGrid::axial([8, 7, 6], spacing);
            let data = Array3::from_shape_fn((8, 7, 6), |_| rng.random_range(0..3));
            let lm = LabelMap::new(grid, data).unwrap();
            let dm = distance_map(&lm, 1.0).unwrap();
            let oracle = brute_force_face_distance(&lm);
            for ((i, j, k), &d) in dm.data.indexed_iter() {
                let expect = oracle[(i, j, k)] + lm.data[(i, j, k)] as f64;
                assert_abs_diff_eq!(d, expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rejects_negative_gamma() {
        let lm = cube_in_background();
        assert!(distance_map(&lm, -0.5).is_err());
    }

    #[test]
    fn junction_marks_planar_interface() {
        let mut lm = LabelMap::zeros(SamplingGrid::unit([6, 5, 5]));
        for ((i, _, _), v) in lm.data.indexed_iter_mut() {
            *v = if i < 3 { 1 } else { 2 };
        }
        let surf = junction_surface(&lm, &[1], &[2]).unwrap();
        for ((i, _, _), &s) in surf.indexed_iter() {
            assert_eq!(s, i == 2);
        }
        // Disjoint but never adjacent labels: empty surface.
        let mut lm2 = LabelMap::zeros(SamplingGrid::unit([6, 5, 5]));
        lm2.data[(0, 0, 0)] = 1;
        lm2.data[(5, 4, 4)] = 2;
        let surf2 = junction_surface(&lm2, &[1], &[2]).unwrap();
        assert!(surf2.iter().all(|&s| !s));
        // Overlapping sets are an error.
        assert!(junction_surface(&lm, &[1, 2], &[2]).is_err());
    }

    #[test]
    fn junction_matches_neighbour_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Array3::from_shape_fn((7, 7, 7), |_| rng.random_range(0..4));
        let lm = LabelMap::new(SamplingGrid::unit([7, 7, 7]), data).unwrap();
        let set_a = [1];
        let set_b = [2, 3];
        let surf = junction_surface(&lm, &set_a, &set_b).unwrap();
        for ((i, j, k), &s) in surf.indexed_iter() {
            let mut expect = false;
            if lm.data[(i, j, k)] == 1 {
                let p = [i as isize, j as isize, k as isize];
                for axis in 0..3 {
                    for step in [-1isize, 1] {
                        let mut q = p;
                        q[axis] += step;
                        if q.iter().all(|&v| v >= 0 && v < 7) {
                            let l = lm.data[(q[0] as usize, q[1] as usize, q[2] as usize)];
                            if set_b.contains(&l) {
                                expect = true;
                            }
                        }
                    }
                }
            }
            assert_eq!(s, expect, "at ({i},{j},{k})");
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lm = cube_in_background();
        let dm = distance_map(&lm, 1.0).unwrap();
        let path = dir.path().join("case/dist.nii.gz");
        save_distance_map(&path, &dm).unwrap();
        let back = load_distance_map(&path).unwrap();
        assert_eq!(back.gamma, dm.gamma);
        assert_eq!(back.labels, dm.labels);
        assert!(back.data.iter().zip(dm.data.iter()).all(|(a, b)| a == b));
    }
}
