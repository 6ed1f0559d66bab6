//! Scratch calibration probe for the phantom training criteria.

use atlasreg_core::distmaps::distance_map;
use atlasreg_core::field::compose;
use atlasreg_core::metrics::{dsc, Mask};
use atlasreg_core::phantom::{make_atlas, make_subject, PhantomCase, PhantomSpec};
use atlasreg_core::volumes::{
    resample_image, resample_labels, DisplacementField, ImageVolume, LabelMap, SamplingGrid,
    Transform, TransformChain,
};

fn ncc(a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    num / (va.sqrt() * vb.sqrt())
}

fn mean_dsc(warped: &LabelMap, atlas_labels: &LabelMap) -> f64 {
    let labels: Vec<i32> = atlas_labels.labels().into_iter().filter(|l| *l != 0).collect();
    labels
        .iter()
        .map(|&l| {
            dsc(&Mask::from_label(warped, l), &Mask::from_label(atlas_labels, l))
                .unwrap()
                .0
        })
        .sum::<f64>()
        / labels.len() as f64
}

fn atlas_chain(case: &PhantomCase, fwd: Option<&DisplacementField>) -> TransformChain {
    let mut t = vec![Transform::Affine(case.affine.inverse().unwrap())];
    if let Some(f) = fwd {
        t.insert(0, Transform::Displacement(f.clone()));
    }
    TransformChain::new(t)
}

fn mean_norm(f: &DisplacementField) -> f64 {
    let n = f.grid.n_voxels() as f64;
    let mut s = 0.0;
    let [nx, ny, nz] = f.grid.shape;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                s += (0..3).map(|c| f.data[(i, j, k, c)].powi(2)).sum::<f64>().sqrt();
            }
        }
    }
    s / n
}

fn main() {
    for n_labels in [3usize, 4, 5] {
        for amplitude in [2.5f64, 5.0] {
            for tumour in [None, Some(3.0f64)] {
                let spec = PhantomSpec {
                    grid: SamplingGrid::unit([48, 48, 48]),
                    n_labels,
                    deform_amplitude: amplitude,
                    deform_smoothness: 6.0,
                    tumour_radius: tumour,
                    seed: 50,
                };
                let (atlas_image, atlas_labels) = match make_atlas(&spec) {
                    Ok(x) => x,
                    Err(e) => {
                        println!("labels {n_labels} amp {amplitude} tum {tumour:?}: atlas: {e}");
                        continue;
                    }
                };
                let case_spec = PhantomSpec { seed: 1050, ..spec.clone() };
                let case = match make_subject(&atlas_image, &atlas_labels, &case_spec) {
                    Ok(c) => c,
                    Err(e) => {
                        println!("labels {n_labels} amp {amplitude} tum {tumour:?}: subject: {e}");
                        continue;
                    }
                };
                let atlas_grid = atlas_labels.grid.clone();

                let d_atlas = distance_map(&atlas_labels, 1.0).unwrap();
                let d_subj = distance_map(&case.labels, 1.0).unwrap();
                let d_subj_img =
                    ImageVolume::new(case.labels.grid.clone(), d_subj.data.clone()).unwrap();

                let warp_dmap = |fwd: Option<&DisplacementField>| -> f64 {
                    let w =
                        resample_image(&d_subj_img, &atlas_chain(&case, fwd), &atlas_grid).unwrap();
                    ncc(&w.data, &d_atlas.data)
                };
                let warp_lbl = |fwd: Option<&DisplacementField>| -> f64 {
                    let w =
                        resample_labels(&case.labels, &atlas_chain(&case, fwd), &atlas_grid)
                            .unwrap();
                    mean_dsc(&w, &atlas_labels)
                };
                let round = compose(&case.gt_inv, &case.gt_fwd).unwrap();
                println!(
                    "labels {n_labels} amp {amplitude} tum {}: ncc id {:.5} gt {:.5} | dsc id {:.4} gt {:.4} | inv-consistency mean {:.3} max {:.3}",
                    tumour.map(|_| "y").unwrap_or("n"),
                    warp_dmap(None),
                    warp_dmap(Some(&case.gt_fwd)),
                    warp_lbl(None),
                    warp_lbl(Some(&case.gt_fwd)),
                    mean_norm(&round),
                    round.max_norm(),
                );
            }
        }
    }
}
