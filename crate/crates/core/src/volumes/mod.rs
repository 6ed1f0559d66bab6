pub mod affine;
pub mod chain;
pub mod displacement;
pub mod grid;
pub mod interp;
pub mod sample;

use std::collections::BTreeSet;

use nalgebra::Vector3;
use ndarray::Array3;

use crate::error::{Error, Result};

pub use affine::{moment_affine_init, AffineTransform};
pub use chain::{Transform, TransformChain};
pub use displacement::DisplacementField;
pub use grid::SamplingGrid;
pub use interp::Boundary;
pub use sample::{resample_image, resample_labels, sample_image_at, sample_labels_at};

/// Scalar image on a sampling grid.
#[derive(Debug, Clone)]
pub struct ImageVolume {
    pub grid: SamplingGrid,
    pub data: Array3<f64>,
}

impl ImageVolume {
    pub fn new(grid: SamplingGrid, data: Array3<f64>) -> Result<Self> {
        grid.validate()?;
        let dim = data.dim();
        if [dim.0, dim.1, dim.2] != grid.shape {
            return Err(Error::ShapeMismatch(format!(
                "grid {:?} vs data {:?}",
                grid.shape,
                [dim.0, dim.1, dim.2]
            )));
        }
        Ok(ImageVolume { grid, data })
    }

    pub fn zeros(grid: SamplingGrid) -> Self {
        let shape = grid.shape;
        ImageVolume {
            grid,
            data: Array3::zeros((shape[0], shape[1], shape[2])),
        }
    }

    /// Mean and (population) standard deviation of all voxels.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.sum() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Zero-mean unit-variance copy; constant images map to all zeros.
    pub fn standardized(&self) -> ImageVolume {
        let (mean, std) = self.mean_std();
        let denom = if std > 1e-12 { std } else { 1.0 };
        ImageVolume {
            grid: self.grid.clone(),
            data: self.data.mapv(|v| (v - mean) / denom),
        }
    }
}

/// Integer label map on a sampling grid; 0 is background.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub grid: SamplingGrid,
    pub data: Array3<i32>,
}

impl LabelMap {
    pub fn new(grid: SamplingGrid, data: Array3<i32>) -> Result<Self> {
        grid.validate()?;
        let dim = data.dim();
        if [dim.0, dim.1, dim.2] != grid.shape {
            return Err(Error::ShapeMismatch(format!(
                "grid {:?} vs data {:?}",
                grid.shape,
                [dim.0, dim.1, dim.2]
            )));
        }
        if data.iter().any(|&l| l < 0) {
            return Err(Error::InvalidLabels("negative label value".into()));
        }
        Ok(LabelMap { grid, data })
    }

    pub fn zeros(grid: SamplingGrid) -> Self {
        let shape = grid.shape;
        LabelMap {
            grid,
            data: Array3::zeros((shape[0], shape[1], shape[2])),
        }
    }

    /// Sorted set of labels present, background excluded.
    pub fn labels(&self) -> BTreeSet<i32> {
        self.data.iter().copied().filter(|&l| l > 0).collect()
    }

    pub fn count(&self, label: i32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&l| l > 0).count()
    }

    /// Physical volume of one label in mm^3.
    pub fn volume_mm3(&self, label: i32) -> f64 {
        self.count(label) as f64 * self.grid.voxel_volume()
    }

    /// World-space barycentre of all voxels carrying `label`.
    pub fn barycentre_world(&self, label: i32) -> Result<Vector3<f64>> {
        let mut acc = Vector3::zeros();
        let mut n = 0usize;
        for ((i, j, k), &l) in self.data.indexed_iter() {
            if l == label {
                acc += self.grid.voxel_to_world([i as f64, j as f64, k as f64]);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyForeground(format!("label {label} not present")));
        }
        Ok(acc / n as f64)
    }

    /// Binary mask of one label.
    pub fn mask_of(&self, label: i32) -> Array3<bool> {
        self.data.mapv(|l| l == label)
    }

    /// Binary mask of all non-background voxels.
    pub fn foreground_mask(&self) -> Array3<bool> {
        self.data.mapv(|l| l > 0)
    }
}
