use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Physical sampling grid of a volume: voxel lattice plus its mapping into
/// world coordinates (mm). Voxel `(i, j, k)` has its centre at
/// `origin + direction * diag(spacing) * (i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub direction: Matrix3<f64>,
    pub origin: Vector3<f64>,
}

impl SamplingGrid {
    /// Axis-aligned grid with the given spacing and origin at zero.
    pub fn axial(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        SamplingGrid {
            shape,
            spacing,
            direction: Matrix3::identity(),
            origin: Vector3::zeros(),
        }
    }

    /// Isotropic 1 mm axis-aligned grid.
    pub fn unit(shape: [usize; 3]) -> Self {
        Self::axial(shape, [1.0, 1.0, 1.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGrid(format!("zero-sized shape {:?}", self.shape)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "non-positive spacing {:?}",
                self.spacing
            )));
        }
        let gram = self.direction.transpose() * self.direction;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(Error::InvalidGrid(format!(
                "direction columns not orthonormal (deviation {dev:.2e})"
            )));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    /// Volume of one voxel in mm^3.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing[0].min(self.spacing[1]).min(self.spacing[2])
    }

    /// Length of the voxel diagonal in mm.
    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    /// Continuous voxel coordinate to world (mm).
    pub fn voxel_to_world(&self, v: [f64; 3]) -> Vector3<f64> {
        let scaled = Vector3::new(
            v[0] * self.spacing[0],
            v[1] * self.spacing[1],
            v[2] * self.spacing[2],
        );
        self.direction * scaled + self.origin
    }

    /// World (mm) to continuous voxel coordinate.
    pub fn world_to_voxel(&self, w: Vector3<f64>) -> [f64; 3] {
        // direction is orthonormal, so its inverse is the transpose.
        let local = self.direction.transpose() * (w - self.origin);
        [
            local[0] / self.spacing[0],
            local[1] / self.spacing[1],
            local[2] / self.spacing[2],
        ]
    }

    /// Voxel-to-world mapping as a homogeneous 4x4 matrix.
    pub fn affine4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        for c in 0..3 {
            for r in 0..3 {
                m[(r, c)] = self.direction[(r, c)] * self.spacing[c];
            }
            m[(c, 3)] = self.origin[c];
        }
        m
    }

    /// Grid covering the same physical region at `factor`-times coarser
    /// resolution. Voxel centres of the coarse grid sit at the mean of the
    /// fine voxel block they cover.
    pub fn downsample(&self, factor: usize) -> SamplingGrid {
        let f = factor as f64;
        let shape = [
            self.shape[0].div_ceil(factor),
            self.shape[1].div_ceil(factor),
            self.shape[2].div_ceil(factor),
        ];
        let spacing = [
            self.spacing[0] * f,
            self.spacing[1] * f,
            self.spacing[2] * f,
        ];
        let shift = Vector3::new(
            self.spacing[0] * (f - 1.0) / 2.0,
            self.spacing[1] * (f - 1.0) / 2.0,
            self.spacing[2] * (f - 1.0) / 2.0,
        );
        SamplingGrid {
            shape,
            spacing,
            direction: self.direction,
            origin: self.origin + self.direction * shift,
        }
    }

    /// Iterate voxel indices in storage order (`k` fastest).
    pub fn iter_indices(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.shape;
        (0..nx).flat_map(move |i| (0..ny).flat_map(move |j| (0..nz).map(move |k| [i, j, k])))
    }

    /// Linear storage index of voxel `(i, j, k)` (`k` fastest).
    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    /// Voxel index of linear storage offset.
    #[inline]
    pub fn unlinear(&self, idx: usize) -> [usize; 3] {
        let nz = self.shape[2];
        let ny = self.shape[1];
        [idx / (ny * nz), (idx / nz) % ny, idx % nz]
    }
}
