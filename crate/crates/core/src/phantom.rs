//! Synthetic 3-D test-bed: a parametric atlas of nested label shells,
//! deformed subjects with known ground-truth fields, optional inserted
//! tumours absent from the atlas, and the two-field collapse toy used by
//! the loss-ordering checks. Everything is seed-deterministic, so phantom
//! cohorts double as reproducible fixtures for the full pipeline.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use ndarray::{Array3, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{fraction_of_foldings, integrate_svf, VelocityField};
use crate::io::{write_affine, write_manifest, CaseEntry};
use crate::metrics::Mask;
use crate::nifti::{write_image, write_labels};
use crate::volumes::{
    resample_image, resample_labels, AffineTransform, DisplacementField, ImageVolume, LabelMap,
    SamplingGrid, Transform, TransformChain,
};

/// Parameters of a synthetic atlas/subject pair.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub grid: SamplingGrid,
    /// Number of nested foreground shells.
    pub n_labels: usize,
    /// Maximum displacement magnitude of the generated field, in mm.
    pub deform_amplitude: f64,
    /// Gaussian smoothing scale of the field, in mm.
    pub deform_smoothness: f64,
    /// Radius of the inserted tumour sphere in mm; `None` for no tumour.
    pub tumour_radius: Option<f64>,
    pub seed: u64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * (x / sigma).powi(2)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn smooth_axis(data: &Array3<f64>, axis: usize, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return data.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let dim = data.dim();
    let n = [dim.0, dim.1, dim.2][axis] as isize;
    Array3::from_shape_fn(dim, |(i, j, k)| {
        let idx = [i, j, k];
        let mut acc = 0.0;
        for (t, &w) in kernel.iter().enumerate() {
            let mut s = idx;
            let pos = (idx[axis] as isize + t as isize - radius as isize).clamp(0, n - 1);
            s[axis] = pos as usize;
            acc += w * data[(s[0], s[1], s[2])];
        }
        acc
    })
}

/// Separable Gaussian smoothing with replicated edges; sigmas in voxels.
pub fn gaussian_smooth(data: &Array3<f64>, sigma_vox: [f64; 3]) -> Array3<f64> {
    let mut out = smooth_axis(data, 0, sigma_vox[0]);
    out = smooth_axis(&out, 1, sigma_vox[1]);
    smooth_axis(&out, 2, sigma_vox[2])
}

fn white_noise(grid: &SamplingGrid, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let [nx, ny, nz] = grid.shape;
    let values: Vec<f64> = (0..nx * ny * nz).map(|_| rng.sample(StandardNormal)).collect();
    Array3::from_shape_vec((nx, ny, nz), values).expect("shape matches length")
}

/// Smooth unit-amplitude scalar noise on a grid.
pub fn smooth_noise(grid: &SamplingGrid, smoothness_mm: f64, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = [
        smoothness_mm / grid.spacing[0],
        smoothness_mm / grid.spacing[1],
        smoothness_mm / grid.spacing[2],
    ];
    let smoothed = gaussian_smooth(&white_noise(grid, &mut rng), sigma);
    let peak = smoothed.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        smoothed / peak
    } else {
        smoothed
    }
}

/// Band-limited random velocity field scaled to `amplitude` mm peak norm.
pub fn band_limited_svf(
    grid: &SamplingGrid,
    amplitude: f64,
    smoothness_mm: f64,
    seed: u64,
) -> Result<VelocityField> {
    if amplitude < 0.0 || smoothness_mm < 0.0 {
        return Err(Error::InvalidArgument(
            "amplitude and smoothness must be non-negative".into(),
        ));
    }
    let [nx, ny, nz] = grid.shape;
    let mut data = Array4::zeros((nx, ny, nz, 3));
    if amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = [
            smoothness_mm / grid.spacing[0],
            smoothness_mm / grid.spacing[1],
            smoothness_mm / grid.spacing[2],
        ];
        let channels: Vec<Array3<f64>> = (0..3)
            .map(|_| gaussian_smooth(&white_noise(grid, &mut rng), sigma))
            .collect();
        let mut peak = 0.0f64;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let n = (0..3)
                        .map(|c| channels[c][(i, j, k)].powi(2))
                        .sum::<f64>()
                        .sqrt();
                    peak = peak.max(n);
                }
            }
        }
        if peak > 0.0 {
            let scale = amplitude / peak;
            for (c, ch) in channels.iter().enumerate() {
                for ((i, j, k), &v) in ch.indexed_iter() {
                    data[(i, j, k, c)] = v * scale;
                }
            }
        }
    }
    VelocityField::new(grid.clone(), data)
}

fn ellipsoid_radius(grid: &SamplingGrid, world: &Vector3<f64>) -> f64 {
    let extent = [
        grid.shape[0] as f64 * grid.spacing[0],
        grid.shape[1] as f64 * grid.spacing[1],
        grid.shape[2] as f64 * grid.spacing[2],
    ];
    let centre = grid.voxel_to_world([
        (grid.shape[0] as f64 - 1.0) / 2.0,
        (grid.shape[1] as f64 - 1.0) / 2.0,
        (grid.shape[2] as f64 - 1.0) / 2.0,
    ]);
    let semi = [0.42 * extent[0], 0.36 * extent[1], 0.39 * extent[2]];
    let d = world - centre;
    ((d.x / semi[0]).powi(2) + (d.y / semi[1]).powi(2) + (d.z / semi[2]).powi(2)).sqrt()
}

fn inner_semi_axis(grid: &SamplingGrid, n_labels: usize) -> f64 {
    let extent = [
        grid.shape[0] as f64 * grid.spacing[0],
        grid.shape[1] as f64 * grid.spacing[1],
        grid.shape[2] as f64 * grid.spacing[2],
    ];
    let semi = [0.42 * extent[0], 0.36 * extent[1], 0.39 * extent[2]];
    semi.iter().cloned().fold(f64::INFINITY, f64::min) / n_labels as f64
}

fn grid_centre(grid: &SamplingGrid) -> Vector3<f64> {
    grid.voxel_to_world([
        (grid.shape[0] as f64 - 1.0) / 2.0,
        (grid.shape[1] as f64 - 1.0) / 2.0,
        (grid.shape[2] as f64 - 1.0) / 2.0,
    ])
}

/// Build the synthetic atlas: `n_labels` nested ellipsoidal shells with
/// piecewise-constant intensities plus smooth noise. Shell `1` is the
/// outermost; volumes decrease inward.
pub fn make_atlas(spec: &PhantomSpec) -> Result<(ImageVolume, LabelMap)> {
    if spec.n_labels < 2 {
        return Err(Error::InvalidArgument(
            "phantom atlas needs at least two labels".into(),
        ));
    }
    spec.grid.validate()?;
    let [nx, ny, nz] = spec.grid.shape;
    let n = spec.n_labels;
    let labels = Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
        let w = spec
            .grid
            .voxel_to_world([i as f64, j as f64, k as f64]);
        let r = ellipsoid_radius(&spec.grid, &w);
        if r > 1.0 {
            return 0;
        }
        // r in ((n-k)/n, (n-k+1)/n] belongs to shell k.
        let k = n - (r * n as f64).ceil() as usize + 1;
        k.min(n) as i32
    });
    let labels = LabelMap::new(spec.grid.clone(), labels)?;
    for k in 1..=n {
        if labels.count(k as i32) == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid too small: shell {k} of {n} has no voxels"
            )));
        }
    }
    let noise = smooth_noise(&spec.grid, 2.0 * spec.grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min), spec.seed);
    let image = ImageVolume::new(
        spec.grid.clone(),
        Array3::from_shape_fn((nx, ny, nz), |idx| {
            labels.data[idx] as f64 + 0.05 * noise[idx]
        }),
    )?;
    Ok((image, labels))
}

/// A synthetic subject derived from the atlas.
///
/// `gt_fwd` is the ground-truth registration field: used in the forward
/// resampling chain it carries the subject back onto the atlas. `gt_inv`
/// is its inverse, the field the subject was generated with. The affine is
/// identity (phantom subjects are already rigidly aligned).
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub image: ImageVolume,
    pub labels: LabelMap,
    pub tumour: Mask,
    pub affine: AffineTransform,
    pub gt_fwd: DisplacementField,
    pub gt_inv: DisplacementField,
}

/// Deform the atlas by a random smooth diffeomorphism and optionally insert
/// a tumour sphere that has no atlas counterpart. Tumour voxels get a
/// distinct bright intensity and are cut out of the subject's anatomy
/// labels.
pub fn make_subject(
    atlas_image: &ImageVolume,
    atlas_labels: &LabelMap,
    spec: &PhantomSpec,
) -> Result<PhantomCase> {
    if atlas_image.grid != spec.grid || atlas_labels.grid != spec.grid {
        return Err(Error::GridMismatch(
            "atlas and phantom spec must share a grid".into(),
        ));
    }
    let v = band_limited_svf(
        &spec.grid,
        spec.deform_amplitude,
        spec.deform_smoothness,
        spec.seed.wrapping_add(1),
    )?;
    let (gt_inv, gt_fwd) = integrate_svf(&v, None)?;
    if fraction_of_foldings(&gt_inv) > 0.0 || fraction_of_foldings(&gt_fwd) > 0.0 {
        return Err(Error::InvalidArgument(
            "deform_amplitude too large for smoothness: generated field folds".into(),
        ));
    }

    let chain = TransformChain::new(vec![Transform::Displacement(gt_inv.clone())]);
    let mut image = resample_image(atlas_image, &chain, &spec.grid)?;
    let mut labels = resample_labels(atlas_labels, &chain, &spec.grid)?;

    let [nx, ny, nz] = spec.grid.shape;
    let mut tumour = Array3::from_elem((nx, ny, nz), false);
    if let Some(radius) = spec.tumour_radius {
        if radius <= 0.0 {
            return Err(Error::InvalidArgument(
                "tumour radius must be positive".into(),
            ));
        }
        let inner = inner_semi_axis(&spec.grid, spec.n_labels);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
        let jitter = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * (0.15 * inner);
        if radius + jitter.norm() > inner {
            return Err(Error::InvalidArgument(format!(
                "tumour radius {radius} mm does not fit the innermost shell ({inner:.2} mm)"
            )));
        }
        let centre = grid_centre(&spec.grid) + jitter;
        let bright = spec.n_labels as f64 + 2.0;
        for ((i, j, k), t) in tumour.indexed_iter_mut() {
            let w = spec
                .grid
                .voxel_to_world([i as f64, j as f64, k as f64]);
            if (w - centre).norm() <= radius {
                *t = true;
                image.data[(i, j, k)] = bright;
                labels.data[(i, j, k)] = 0;
            }
        }
    }

    Ok(PhantomCase {
        image,
        labels,
        tumour: Mask::new(spec.grid.clone(), tumour)?,
        affine: AffineTransform::from_matrix(Matrix4::identity())?,
        gt_fwd,
        gt_inv,
    })
}

/// Fixtures for the tumour-collapse ordering experiment.
///
/// The subject carries a bright tumour sphere absent from the atlas, which
/// punches a hole into the subject's anatomy labels. The collapsing field
/// radially expands around the tumour so that resampling the subject onto
/// the atlas reads past the lesion, making it all but vanish there; the
/// preserving field is zero. Both fields come as forward/inverse pairs
/// from a common velocity field. The anatomy uses nested shells so that
/// within-region distances stay small and the label contrast at the hole
/// carries the similarity signal, as in real segmentations.
#[derive(Debug, Clone)]
pub struct CollapseToy {
    pub atlas_image: ImageVolume,
    pub atlas_labels: LabelMap,
    pub subject_image: ImageVolume,
    pub subject_labels: LabelMap,
    pub tumour: Mask,
    pub affine: AffineTransform,
    pub preserve_fwd: DisplacementField,
    pub preserve_inv: DisplacementField,
    pub collapse_fwd: DisplacementField,
    pub collapse_inv: DisplacementField,
}

/// Build the two-field collapse scenario on a 32-cube.
pub fn make_collapse_toy() -> Result<CollapseToy> {
    let grid = SamplingGrid::unit([32, 32, 32]);
    let centre = grid_centre(&grid);
    let brain_r = 11.0;
    let tumour_r = 3.0;
    let shells = 3.0;
    let [nx, ny, nz] = grid.shape;

    let radius_at = |i: usize, j: usize, k: usize| -> f64 {
        (grid.voxel_to_world([i as f64, j as f64, k as f64]) - centre).norm()
    };

    // Shell 1 outermost, shell 3 the innermost ball.
    let atlas_labels = LabelMap::new(
        grid.clone(),
        Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
            let r = radius_at(i, j, k);
            if r > brain_r {
                0
            } else {
                (shells - (r / brain_r * shells).ceil().max(1.0) + 1.0) as i32
            }
        }),
    )?;
    let atlas_image = ImageVolume::new(grid.clone(), atlas_labels.data.mapv(|l| l as f64))?;

    let tumour = Mask::new(
        grid.clone(),
        Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| radius_at(i, j, k) <= tumour_r),
    )?;
    let subject_labels = LabelMap::new(
        grid.clone(),
        Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
            if tumour.data[(i, j, k)] {
                0
            } else {
                atlas_labels.data[(i, j, k)]
            }
        }),
    )?;
    let subject_image = ImageVolume::new(
        grid.clone(),
        Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
            if tumour.data[(i, j, k)] {
                shells + 2.0
            } else {
                atlas_image.data[(i, j, k)]
            }
        }),
    )?;

    // Radial outward velocity, full strength over the tumour, smoothly
    // fading to zero at twice its radius so the distortion stays local.
    let window = |rho: f64| -> f64 {
        let full = tumour_r;
        let zero = 2.0 * tumour_r;
        if rho <= full {
            1.0
        } else if rho >= zero {
            0.0
        } else {
            let t = (rho - full) / (zero - full);
            1.0 - t * t * (3.0 - 2.0 * t)
        }
    };
    let mut vel = Array4::zeros((nx, ny, nz, 3));
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let w = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                let d = w - centre;
                let s = window(d.norm());
                vel[(i, j, k, 0)] = d.x * s;
                vel[(i, j, k, 1)] = d.y * s;
                vel[(i, j, k, 2)] = d.z * s;
            }
        }
    }
    let v = VelocityField::new(grid.clone(), vel)?;
    let (collapse_fwd, collapse_inv) = integrate_svf(&v, None)?;
    let zero = DisplacementField::zeros(grid.clone());

    Ok(CollapseToy {
        atlas_image,
        atlas_labels,
        subject_image,
        subject_labels,
        tumour,
        affine: AffineTransform::from_matrix(Matrix4::identity())?,
        preserve_fwd: zero.clone(),
        preserve_inv: zero,
        collapse_fwd,
        collapse_inv,
    })
}

/// File layout of a generated phantom cohort.
#[derive(Debug, Clone)]
pub struct PhantomPaths {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub atlas_image: PathBuf,
    pub atlas_labels: PathBuf,
    pub arterial_labels: PathBuf,
    pub perfusion: PathBuf,
}

/// Generate and persist a phantom cohort as a standard case manifest, so
/// the full pipeline runs on it unchanged. Per-case seeds derive from
/// `spec.seed`; arterial territories split the atlas foreground into
/// left/right halves, and the perfusion image is a smooth ramp.
pub fn write_phantom_cohort(
    dir: impl AsRef<Path>,
    spec: &PhantomSpec,
    n_cases: usize,
) -> Result<PhantomPaths> {
    if n_cases == 0 {
        return Err(Error::InvalidArgument("cohort needs at least one case".into()));
    }
    let root = dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&root).map_err(|e| Error::Io {
        path: root.clone(),
        source: e,
    })?;

    let (atlas_image, atlas_labels) = make_atlas(spec)?;
    let [nx, ny, nz] = spec.grid.shape;
    let arterial = LabelMap::new(
        spec.grid.clone(),
        Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
            if atlas_labels.data[(i, j, k)] == 0 {
                0
            } else if i < nx / 2 {
                1
            } else {
                2
            }
        }),
    )?;
    let ramp_noise = smooth_noise(&spec.grid, 3.0, spec.seed.wrapping_add(7));
    let perfusion = ImageVolume::new(
        spec.grid.clone(),
        Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
            0.4 + 0.3 * i as f64 / (nx.max(2) - 1) as f64 + 0.03 * ramp_noise[(i, j, k)]
        }),
    )?;

    let paths = PhantomPaths {
        manifest: root.join("manifest.csv"),
        atlas_image: root.join("atlas_image.nii.gz"),
        atlas_labels: root.join("atlas_anat.nii.gz"),
        arterial_labels: root.join("atlas_art.nii.gz"),
        perfusion: root.join("perfusion.nii.gz"),
        root: root.clone(),
    };
    write_image(&paths.atlas_image, &atlas_image)?;
    write_labels(&paths.atlas_labels, &atlas_labels)?;
    write_labels(&paths.arterial_labels, &arterial)?;
    write_image(&paths.perfusion, &perfusion)?;

    let mut entries = Vec::with_capacity(n_cases);
    for c in 0..n_cases {
        let case_spec = PhantomSpec {
            seed: spec.seed.wrapping_add(1000 * (c as u64 + 1)),
            ..spec.clone()
        };
        let case = make_subject(&atlas_image, &atlas_labels, &case_spec)?;
        let id = format!("case{c:02}");
        let image = root.join(format!("{id}_image.nii.gz"));
        let labels = root.join(format!("{id}_anat.nii.gz"));
        let tumour = root.join(format!("{id}_tumour.nii.gz"));
        let affine = root.join(format!("{id}_affine.txt"));
        write_image(&image, &case.image)?;
        write_labels(&labels, &case.labels)?;
        write_labels(&tumour, &case.tumour.as_labels())?;
        write_affine(&affine, &case.affine)?;
        entries.push(CaseEntry {
            case_id: id,
            image,
            labels,
            tumour,
            affine: Some(affine),
        });
    }
    write_manifest(&paths.manifest, &entries)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::compose;
    use crate::io::read_manifest;
    use crate::losses::{general_loss, overfit_loss, LossCase, LossWeights};
    use crate::metrics::{dsc, tumour_volume_factor};
    use crate::nifti::read_labels;
    use approx::assert_abs_diff_eq;

    fn spec(n: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid: SamplingGrid::unit([n, n, n]),
            n_labels: 3,
            deform_amplitude: 2.0,
            deform_smoothness: 4.0,
            tumour_radius: None,
            seed,
        }
    }

    #[test]
    fn atlas_shells_nested_and_deterministic() {
        let s = spec(24, 5);
        let (img, labels) = make_atlas(&s).unwrap();
        let present = labels.labels();
        assert_eq!(present.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(labels.count(1) > labels.count(2));
        assert!(labels.count(2) > labels.count(3));

        let (img2, labels2) = make_atlas(&s).unwrap();
        assert_eq!(labels.data, labels2.data);
        assert!(img
            .data
            .iter()
            .zip(img2.data.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let (img3, _) = make_atlas(&PhantomSpec { seed: 6, ..s }).unwrap();
        assert!(img.data != img3.data);

        let two = PhantomSpec {
            n_labels: 2,
            ..spec(16, 1)
        };
        let (_, l2) = make_atlas(&two).unwrap();
        assert_eq!(l2.labels().into_iter().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn atlas_rejects_bad_specs() {
        assert!(make_atlas(&PhantomSpec {
            n_labels: 1,
            ..spec(16, 0)
        })
        .is_err());
        assert!(make_atlas(&PhantomSpec {
            n_labels: 6,
            ..spec(6, 0)
        })
        .is_err());
    }

    #[test]
    fn zero_amplitude_subject_equals_atlas() {
        let s = PhantomSpec {
            deform_amplitude: 0.0,
            ..spec(16, 3)
        };
        let (img, labels) = make_atlas(&s).unwrap();
        let case = make_subject(&img, &labels, &s).unwrap();
        assert_eq!(case.labels.data, labels.data);
        assert!(case
            .image
            .data
            .iter()
            .zip(img.data.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(case.tumour.count(), 0);
    }

    #[test]
    fn tumour_volume_matches_sphere() {
        let s = PhantomSpec {
            tumour_radius: Some(4.0),
            deform_amplitude: 1.0,
            n_labels: 2,
            ..spec(32, 11)
        };
        let (img, labels) = make_atlas(&s).unwrap();
        let case = make_subject(&img, &labels, &s).unwrap();
        let count = case.tumour.count() as f64;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 4.0f64.powi(3);
        assert!(
            (count - analytic).abs() / analytic < 0.1,
            "count {count} vs analytic {analytic}"
        );
        // Tumour voxels are bright in the image and cut from the labels.
        for ((i, j, k), &t) in case.tumour.data.indexed_iter() {
            if t {
                assert_eq!(case.labels.data[(i, j, k)], 0);
                assert_abs_diff_eq!(
                    case.image.data[(i, j, k)],
                    s.n_labels as f64 + 2.0,
                    epsilon = 1e-12
                );
            }
        }

        let too_big = PhantomSpec {
            tumour_radius: Some(20.0),
            ..s
        };
        assert!(make_subject(&img, &labels, &too_big).is_err());
    }

    #[test]
    fn ground_truth_round_trip_recovers_labels() {
        let s = spec(32, 17);
        let (img, labels) = make_atlas(&s).unwrap();
        let case = make_subject(&img, &labels, &s).unwrap();

        assert_eq!(fraction_of_foldings(&case.gt_fwd), 0.0);
        assert_eq!(fraction_of_foldings(&case.gt_inv), 0.0);
        let round = compose(&case.gt_fwd, &case.gt_inv).unwrap();
        let mean_err = round
            .data
            .outer_iter()
            .flat_map(|p| p.iter().copied().collect::<Vec<_>>())
            .collect::<Vec<_>>();
        let n = round.data.len() / 3;
        let mean: f64 = mean_err
            .chunks(3)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .sum::<f64>()
            / n as f64;
        assert!(mean < 0.1, "inverse consistency {mean}");

        let chain = TransformChain::new(vec![
            Transform::Affine(case.affine.inverse().unwrap()),
            Transform::Displacement(case.gt_fwd.clone()),
        ]);
        let back = resample_labels(&case.labels, &chain, &s.grid).unwrap();
        let mut mean_dsc = 0.0;
        for label in [1, 2, 3] {
            let a = Mask::from_label(&back, label);
            let b = Mask::from_label(&labels, label);
            mean_dsc += dsc(&a, &b).unwrap().0;
        }
        mean_dsc /= 3.0;
        assert!(mean_dsc > 0.99, "round-trip DSC {mean_dsc}");
    }

    #[test]
    fn svf_generator_is_scaled_and_deterministic() {
        let g = SamplingGrid::unit([12, 12, 12]);
        let v = band_limited_svf(&g, 1.7, 3.0, 4).unwrap();
        assert_abs_diff_eq!(v.max_norm(), 1.7, epsilon = 1e-9);
        let v2 = band_limited_svf(&g, 1.7, 3.0, 4).unwrap();
        assert!(v
            .data
            .iter()
            .zip(v2.data.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let zero = band_limited_svf(&g, 0.0, 3.0, 4).unwrap();
        assert!(zero.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn collapse_toy_orders_losses() {
        let toy = make_collapse_toy().unwrap();
        assert_eq!(fraction_of_foldings(&toy.collapse_fwd), 0.0);

        let chain_collapse = TransformChain::new(vec![
            Transform::Affine(toy.affine.inverse().unwrap()),
            Transform::Displacement(toy.collapse_fwd.clone()),
        ]);
        let chain_preserve = TransformChain::new(vec![
            Transform::Affine(toy.affine.inverse().unwrap()),
            Transform::Displacement(toy.preserve_fwd.clone()),
        ]);
        let grid = toy.atlas_labels.grid.clone();
        let collapsed = tumour_volume_factor(&toy.tumour, &chain_collapse, &grid).unwrap();
        let preserved = tumour_volume_factor(&toy.tumour, &chain_preserve, &grid).unwrap();
        assert!(collapsed < 0.2, "collapse factor {collapsed}");
        assert!(
            (0.9..=1.1).contains(&preserved),
            "preserve factor {preserved}"
        );

        let w = LossWeights::default();
        let case_collapse = LossCase {
            labels: &toy.subject_labels,
            affine: &toy.affine,
            fwd: &toy.collapse_fwd,
            inv: &toy.collapse_inv,
        };
        let case_preserve = LossCase {
            labels: &toy.subject_labels,
            affine: &toy.affine,
            fwd: &toy.preserve_fwd,
            inv: &toy.preserve_inv,
        };

        // Atlas-space similarity rewards collapsing the tumour.
        let atlas_collapse = overfit_loss(&case_collapse, &toy.atlas_labels, &w).unwrap();
        let atlas_preserve = overfit_loss(&case_preserve, &toy.atlas_labels, &w).unwrap();
        assert!(
            atlas_collapse.sim < atlas_preserve.sim,
            "atlas-space sim {} vs {}",
            atlas_collapse.sim,
            atlas_preserve.sim
        );

        // The image-space objective does not: the warped atlas cannot
        // explain the tumour either way, and the collapse field pays a
        // heavy smoothness penalty.
        let img_collapse =
            general_loss(std::slice::from_ref(&case_collapse), &toy.atlas_labels, &w).unwrap();
        let img_preserve =
            general_loss(std::slice::from_ref(&case_preserve), &toy.atlas_labels, &w).unwrap();
        assert!(
            img_collapse.total > img_preserve.total,
            "image-space total {} vs {}",
            img_collapse.total,
            img_preserve.total
        );
    }

    #[test]
    fn cohort_writer_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = PhantomSpec {
            tumour_radius: Some(1.5),
            n_labels: 2,
            ..spec(16, 9)
        };
        let paths = write_phantom_cohort(dir.path(), &s, 2).unwrap();
        let entries = read_manifest(&paths.manifest).unwrap();
        assert_eq!(entries.len(), 2);
        for e in &entries {
            assert!(e.image.exists() && e.labels.exists() && e.tumour.exists());
            let affine = crate::io::read_affine(e.affine.as_ref().unwrap()).unwrap();
            let _ = affine.inverse();
            let tum = read_labels(&e.tumour).unwrap();
            assert_eq!(tum.grid, s.grid);
        }
        let anat = read_labels(&paths.atlas_labels).unwrap();
        let art = read_labels(&paths.arterial_labels).unwrap();
        assert_eq!(anat.labels().len(), 2);
        assert_eq!(art.labels().into_iter().collect::<Vec<_>>(), vec![1, 2]);
    }
}
