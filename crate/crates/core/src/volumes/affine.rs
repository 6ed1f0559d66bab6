use nalgebra::{Matrix3, Matrix4, Vector3};

use super::LabelMap;
use crate::error::{Error, Result};

/// Rigid-or-affine world-to-world map stored as a homogeneous 4x4 matrix.
/// By convention the forward direction takes subject world coordinates to
/// atlas world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub matrix: Matrix4<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        let ok = bottom[0] == 0.0 && bottom[1] == 0.0 && bottom[2] == 0.0 && bottom[3] == 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "affine bottom row must be [0 0 0 1], got {bottom:?}"
            )));
        }
        let det = matrix.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::SingularTransform(format!("determinant {det:.3e}")));
        }
        Ok(AffineTransform { matrix })
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.matrix[(0, 3)], self.matrix[(1, 3)], self.matrix[(2, 3)])
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.linear() * p + self.translation()
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::SingularTransform("matrix not invertible".into()))?;
        AffineTransform::from_matrix(inv)
    }

    /// Composition `self(other(x))`.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: self.matrix * other.matrix,
        }
    }
}

struct FgMoments {
    centre: Vector3<f64>,
    std: Vector3<f64>,
    n: usize,
}

fn foreground_moments(map: &LabelMap) -> FgMoments {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for ((i, j, k), &l) in map.data.indexed_iter() {
        if l > 0 {
            sum += map.grid.voxel_to_world([i as f64, j as f64, k as f64]);
            n += 1;
        }
    }
    if n == 0 {
        return FgMoments {
            centre: Vector3::zeros(),
            std: Vector3::zeros(),
            n: 0,
        };
    }
    let centre = sum / n as f64;
    let mut sq = Vector3::zeros();
    for ((i, j, k), &l) in map.data.indexed_iter() {
        if l > 0 {
            let d = map.grid.voxel_to_world([i as f64, j as f64, k as f64]) - centre;
            sq += d.component_mul(&d);
        }
    }
    FgMoments {
        centre,
        std: (sq / n as f64).map(f64::sqrt),
        n,
    }
}

/// Moment-based affine initialisation from label foregrounds: aligns the
/// world-space barycentres and, when `with_scaling` is set, matches the
/// per-axis standard deviations of the foreground point clouds. The result
/// maps subject world coordinates to atlas world coordinates.
pub fn moment_affine_init(
    subject: &LabelMap,
    atlas: &LabelMap,
    with_scaling: bool,
) -> Result<AffineTransform> {
    let ms = foreground_moments(subject);
    let ma = foreground_moments(atlas);
    if ms.n == 0 {
        return Err(Error::EmptyForeground("subject labels".into()));
    }
    if ma.n == 0 {
        return Err(Error::EmptyForeground("atlas labels".into()));
    }

    let mut scale = Vector3::new(1.0, 1.0, 1.0);
    if with_scaling {
        for a in 0..3 {
            if ms.std[a] > 1e-9 && ma.std[a] > 1e-9 {
                scale[a] = ma.std[a] / ms.std[a];
            }
        }
    }

    // x_atlas = S (x_subj - c_subj) + c_atlas
    let mut m = Matrix4::identity();
    for a in 0..3 {
        m[(a, a)] = scale[a];
        m[(a, 3)] = ma.centre[a] - scale[a] * ms.centre[a];
    }
    AffineTransform::from_matrix(m)
}
