use nalgebra::Vector3;
use ndarray::Array3;

use super::chain::TransformChain;
use super::grid::SamplingGrid;
use super::interp::{nearest, note_interpolation_pass, trilinear, Boundary};
use super::{ImageVolume, LabelMap};
use crate::error::Result;
use crate::par;

/// Pull-back resampling of an image through a transform chain. For every
/// target voxel centre `x` the chain gives a source-world position
/// `y = chain(x)`, and the image is read there trilinearly, falling back to
/// zero outside the field of view. The stored data is interpolated once no
/// matter how long the chain is.
pub fn resample_image(
    source: &ImageVolume,
    chain: &TransformChain,
    target: &SamplingGrid,
) -> Result<ImageVolume> {
    target.validate()?;
    note_interpolation_pass();
    let [nx, ny, nz] = target.shape;
    let view = source.data.view();
    let values = par::map_indexed(target.n_voxels(), |idx| {
        let [i, j, k] = target.unlinear(idx);
        let w = target.voxel_to_world([i as f64, j as f64, k as f64]);
        let y = chain.apply(w);
        let pos = source.grid.world_to_voxel(y);
        trilinear(view, pos, Boundary::Fill(0.0))
    });
    let data = Array3::from_shape_vec((nx, ny, nz), values).expect("shape from n_voxels");
    ImageVolume::new(target.clone(), data)
}

/// Pull-back resampling of a label map through a transform chain using
/// nearest-neighbour lookup; positions outside the source become background.
pub fn resample_labels(
    source: &LabelMap,
    chain: &TransformChain,
    target: &SamplingGrid,
) -> Result<LabelMap> {
    target.validate()?;
    note_interpolation_pass();
    let [nx, ny, nz] = target.shape;
    let view = source.data.view();
    let values = par::map_indexed(target.n_voxels(), |idx| {
        let [i, j, k] = target.unlinear(idx);
        let w = target.voxel_to_world([i as f64, j as f64, k as f64]);
        let y = chain.apply(w);
        let pos = source.grid.world_to_voxel(y);
        nearest(view, pos, 0)
    });
    let data = Array3::from_shape_vec((nx, ny, nz), values).expect("shape from n_voxels");
    LabelMap::new(target.clone(), data)
}

/// Image values at arbitrary world points pulled through a chain.
pub fn sample_image_at(
    source: &ImageVolume,
    chain: &TransformChain,
    points: &[Vector3<f64>],
) -> Vec<f64> {
    note_interpolation_pass();
    points
        .iter()
        .map(|&w| {
            let pos = source.grid.world_to_voxel(chain.apply(w));
            trilinear(source.data.view(), pos, Boundary::Fill(0.0))
        })
        .collect()
}

/// Label values at arbitrary world points pulled through a chain.
pub fn sample_labels_at(
    source: &LabelMap,
    chain: &TransformChain,
    points: &[Vector3<f64>],
) -> Vec<i32> {
    note_interpolation_pass();
    points
        .iter()
        .map(|&w| {
            let pos = source.grid.world_to_voxel(chain.apply(w));
            nearest(source.data.view(), pos, 0)
        })
        .collect()
}
