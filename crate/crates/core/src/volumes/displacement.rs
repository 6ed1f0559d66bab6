use nalgebra::Vector3;
use ndarray::{Array4, Axis};

use super::grid::SamplingGrid;
use super::interp::{trilinear, Boundary};
use crate::error::{Error, Result};

/// Dense displacement field sampled on a grid. Component vectors are stored
/// in world millimetres, so the mapping `x -> x + u(x)` acts directly on
/// world coordinates regardless of grid spacing. Outside the field extent
/// the displacement fades to zero (identity mapping).
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub grid: SamplingGrid,
    /// Shape `(nx, ny, nz, 3)`.
    pub data: Array4<f64>,
}

impl DisplacementField {
    pub fn new(grid: SamplingGrid, data: Array4<f64>) -> Result<Self> {
        grid.validate()?;
        let dim = data.dim();
        if [dim.0, dim.1, dim.2] != grid.shape || dim.3 != 3 {
            return Err(Error::ShapeMismatch(format!(
                "grid {:?} vs field {:?}x{}",
                grid.shape,
                [dim.0, dim.1, dim.2],
                dim.3
            )));
        }
        Ok(DisplacementField { grid, data })
    }

    pub fn zeros(grid: SamplingGrid) -> Self {
        let s = grid.shape;
        DisplacementField {
            grid,
            data: Array4::zeros((s[0], s[1], s[2], 3)),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.data[(i, j, k, 0)],
            self.data[(i, j, k, 1)],
            self.data[(i, j, k, 2)],
        )
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: Vector3<f64>) {
        self.data[(i, j, k, 0)] = v[0];
        self.data[(i, j, k, 1)] = v[1];
        self.data[(i, j, k, 2)] = v[2];
    }

    /// Trilinearly interpolated displacement at a world position.
    pub fn sample(&self, w: Vector3<f64>) -> Vector3<f64> {
        self.sample_with(w, Boundary::Fill(0.0))
    }

    /// Interpolated displacement with an explicit out-of-extent policy.
    pub fn sample_with(&self, w: Vector3<f64>, boundary: Boundary) -> Vector3<f64> {
        let pos = self.grid.world_to_voxel(w);
        let mut u = Vector3::zeros();
        for c in 0..3 {
            let ch = self.data.index_axis(Axis(3), c);
            u[c] = trilinear(ch, pos, boundary);
        }
        u
    }

    /// The deformation `x + u(x)` at a world position.
    pub fn apply(&self, w: Vector3<f64>) -> Vector3<f64> {
        w + self.sample(w)
    }

    /// Largest displacement magnitude over the grid, in mm.
    pub fn max_norm(&self) -> f64 {
        let [nx, ny, nz] = self.grid.shape;
        let mut best = 0.0f64;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    best = best.max(self.at(i, j, k).norm());
                }
            }
        }
        best
    }

    /// Rescale all displacement vectors by a constant.
    pub fn scaled(&self, factor: f64) -> DisplacementField {
        DisplacementField {
            grid: self.grid.clone(),
            data: &self.data * factor,
        }
    }
}
