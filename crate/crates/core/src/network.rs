//! The velocity predictor: a small 3-D U-Net with two average-pool
//! downsampling levels, summation skip connections, and a zero-initialized
//! 1x1x1 head so an untrained net produces the identity transform.
//!
//! The net sees two channels, subject and atlas intensity, resampled onto a
//! common prediction grid and standardized per volume at the network
//! boundary. Stored images are never modified. Spatial shapes that are not
//! divisible by four are padded symmetrically and cropped back after the
//! decoder, so the output always matches the prediction grid.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::{field_ops, nn, ops, Tape, Var};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::volumes::{resample_image, AffineTransform, ImageVolume, SamplingGrid, TransformChain};

pub const CHECKPOINT_VERSION: u32 = 1;

const LEAK: f64 = 0.2;

/// Architecture knobs. `widths` are the channel counts of the three
/// resolution levels, `grid_factor` the atlas-grid downsampling used for the
/// prediction grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub widths: [usize; 3],
    pub kernel: usize,
    pub grid_factor: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: [16, 32, 64],
            kernel: 3,
            grid_factor: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|w| *w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if self.grid_factor == 0 {
            return Err(Error::Config("grid factor must be positive".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON form of a config.
pub fn config_hash(config: &NetConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parameter names and shapes in their fixed forward-pass order.
fn param_spec(c: &NetConfig) -> Vec<(&'static str, Vec<usize>)> {
    let [w0, w1, w2] = c.widths;
    let k = c.kernel;
    vec![
        ("enc0.weight", vec![w0, 2, k, k, k]),
        ("enc0.bias", vec![w0]),
        ("enc1.weight", vec![w1, w0, k, k, k]),
        ("enc1.bias", vec![w1]),
        ("enc2.weight", vec![w2, w1, k, k, k]),
        ("enc2.bias", vec![w2]),
        ("up1.weight", vec![w1, w2, 2, 2, 2]),
        ("up1.bias", vec![w1]),
        ("dec1.weight", vec![w1, w1, k, k, k]),
        ("dec1.bias", vec![w1]),
        ("up0.weight", vec![w0, w1, 2, 2, 2]),
        ("up0.bias", vec![w0]),
        ("dec0.weight", vec![w0, w0, k, k, k]),
        ("dec0.bias", vec![w0]),
        ("head.weight", vec![3, w0, 1, 1, 1]),
        ("head.bias", vec![3]),
    ]
}

#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub config: NetConfig,
    params: Vec<(String, ArrayD<f64>)>,
}

/// The network as a live graph: the velocity output and one variable per
/// parameter tensor, in the same order as [`VelocityNet::params`].
pub struct NetGraph {
    pub output: Var,
    pub params: Vec<Var>,
}

impl VelocityNet {
    /// Fresh net with seeded fan-in-scaled weights and a zero head.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, shape) in param_spec(&config) {
            let value = if name.starts_with("head") || name.ends_with("bias") {
                ArrayD::zeros(IxDyn(&shape))
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || dist.sample(&mut rng))
            };
            params.push((name.to_string(), value));
        }
        Ok(VelocityNet { config, params })
    }

    pub fn params(&self) -> &[(String, ArrayD<f64>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, ArrayD<f64>)] {
        &mut self.params
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    /// Put every parameter tensor on `tape`, as gradient leaves when
    /// `trainable`. One set of leaves can feed several forward passes, so a
    /// mini-batch accumulates parameter gradients naturally.
    pub fn leaf_params(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, value)| {
                if trainable {
                    tape.leaf(value.clone())
                } else {
                    tape.constant(value.clone())
                }
            })
            .collect()
    }

    /// Build the forward pass on `tape`. `input` is a `[2, nx, ny, nz]`
    /// feature volume; parameters become gradient leaves when `trainable`.
    pub fn forward(&self, tape: &Tape, input: Var, trainable: bool) -> NetGraph {
        let params = self.leaf_params(tape, trainable);
        let output = self.forward_with(tape, input, &params);
        NetGraph { output, params }
    }

    /// Forward pass against an existing parameter variable set, in
    /// [`VelocityNet::params`] order.
    pub fn forward_with(&self, tape: &Tape, input: Var, pv: &[Var]) -> Var {
        let p = |name: &str| {
            let idx = self
                .params
                .iter()
                .position(|(n, _)| n == name)
                .expect("known parameter");
            pv[idx]
        };

        let in_shape = tape.value(input).shape().to_vec();
        let spatial = [in_shape[1], in_shape[2], in_shape[3]];
        let (lo, hi) = nn::pad_amounts(spatial, 4);
        let x = nn::pad3(tape, input, lo, hi);

        let act = |t: Var| ops::leaky_relu(tape, t, LEAK);
        let e0 = act(nn::conv3(tape, x, p("enc0.weight"), p("enc0.bias")));
        let e1 = act(nn::conv3(
            tape,
            nn::avg_pool2(tape, e0),
            p("enc1.weight"),
            p("enc1.bias"),
        ));
        let e2 = act(nn::conv3(
            tape,
            nn::avg_pool2(tape, e1),
            p("enc2.weight"),
            p("enc2.bias"),
        ));
        let s1 = ops::add(tape, nn::upconv2(tape, e2, p("up1.weight"), p("up1.bias")), e1);
        let d1 = act(nn::conv3(tape, s1, p("dec1.weight"), p("dec1.bias")));
        let s0 = ops::add(tape, nn::upconv2(tape, d1, p("up0.weight"), p("up0.bias")), e0);
        let d0 = act(nn::conv3(tape, s0, p("dec0.weight"), p("dec0.bias")));
        let v = nn::conv3(tape, d0, p("head.weight"), p("head.bias"));
        nn::crop3(tape, v, lo, spatial)
    }
}

/// Resample both volumes onto the prediction grid through their affine
/// chains, standardize each, and stack them as the two network channels.
/// The affine maps subject world coordinates into atlas world coordinates.
pub fn network_input(
    subject: &ImageVolume,
    subject_affine: &AffineTransform,
    atlas: &ImageVolume,
    grid: &SamplingGrid,
) -> Result<ArrayD<f64>> {
    let subj_chain = TransformChain::from_affine(subject_affine.inverse()?);
    let subj = resample_image(subject, &subj_chain, grid)?.standardized();
    let atl = resample_image(atlas, &TransformChain::new(vec![]), grid)?.standardized();

    let [nx, ny, nz] = grid.shape;
    let mut input = Array4::<f64>::zeros((2, nx, ny, nz));
    input.index_axis_mut(Axis(0), 0).assign(&subj.data);
    input.index_axis_mut(Axis(0), 1).assign(&atl.data);
    Ok(input.into_dyn())
}

/// Inference: velocity field on the prediction grid for one subject.
pub fn predict_velocity(
    net: &VelocityNet,
    subject: &ImageVolume,
    subject_affine: &AffineTransform,
    atlas: &ImageVolume,
    grid: &SamplingGrid,
) -> Result<VelocityField> {
    let input = network_input(subject, subject_affine, atlas, grid)?;
    let tape = Tape::new();
    let graph = net.forward(&tape, tape.constant(input), false);
    let value = tape.value(graph.output);
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "network produced a non-finite velocity".into(),
        ));
    }
    VelocityField::new(grid.clone(), field_ops::channel_last(&value))
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: NetConfig,
    config_hash: String,
    params: Vec<ParamRecord>,
}

/// Write a versioned, gzip-compressed checkpoint. Serialization is
/// deterministic, so identical nets produce identical bytes.
pub fn save_model(net: &VelocityNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: net.config.clone(),
        config_hash: net.config_hash(),
        params: net
            .params
            .iter()
            .map(|(name, value)| ParamRecord {
                name: name.clone(),
                shape: value.shape().to_vec(),
                data: value.iter().copied().collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&file).expect("checkpoint serializes");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    let out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GzEncoder::new(out, Compression::default());
    enc.write_all(&json).map_err(|e| Error::io(path, e))?;
    enc.finish().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<VelocityNet> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut json = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut json)
        .map_err(|_| Error::CorruptCheckpoint(format!("{} is not a gzip checkpoint", path.display())))?;
    let file: CheckpointFile = serde_json::from_slice(&json)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    file.config.validate()?;
    if file.config_hash != config_hash(&file.config) {
        return Err(Error::CorruptCheckpoint(
            "config hash does not match embedded config".into(),
        ));
    }
    let spec = param_spec(&file.config);
    if file.params.len() != spec.len() {
        return Err(Error::CorruptCheckpoint("unexpected parameter count".into()));
    }
    let mut params = Vec::with_capacity(spec.len());
    for (record, (name, shape)) in file.params.into_iter().zip(spec) {
        if record.name != name || record.shape != shape {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter {} has unexpected layout",
                record.name
            )));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&record.shape), record.data)
            .map_err(|e| Error::CorruptCheckpoint(format!("parameter {name}: {e}")))?;
        params.push((record.name, value));
    }
    Ok(VelocityNet {
        config: file.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmaps::distance_map;
    use crate::losses::{overfit_loss_graph, CaseTerms, LossWeights};
    use crate::volumes::LabelMap;
    use ndarray::Array3;
    use std::rc::Rc;

    fn small_config() -> NetConfig {
        NetConfig {
            widths: [4, 6, 8],
            kernel: 3,
            grid_factor: 2,
        }
    }

    fn probe_input(shape: [usize; 3], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[2, shape[0], shape[1], shape[2]]), || {
            rng.random_range(-1.0..1.0)
        })
    }

    fn toy_volumes(grid: &SamplingGrid) -> (ImageVolume, ImageVolume) {
        let [nx, ny, nz] = grid.shape;
        let subject = ImageVolume::new(
            grid.clone(),
            Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
                (i as f64 - 1.5).hypot(j as f64 - 2.0) + 0.3 * k as f64
            }),
        )
        .unwrap();
        let atlas = ImageVolume::new(
            grid.clone(),
            Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
                ((i * j) % 5) as f64 - 0.1 * k as f64
            }),
        )
        .unwrap();
        (subject, atlas)
    }

    #[test]
    fn zero_head_gives_identity_start_and_determinism() {
        let grid = SamplingGrid::unit([8, 8, 8]);
        let pred = grid.downsample(2);
        let (subject, atlas) = toy_volumes(&grid);
        let net = VelocityNet::new(small_config(), 11).unwrap();
        let id = AffineTransform::identity();

        let v1 = predict_velocity(&net, &subject, &id, &atlas, &pred).unwrap();
        assert_eq!(v1.grid, pred);
        assert_eq!(v1.max_norm(), 0.0);

        let v2 = predict_velocity(&net, &subject, &id, &atlas, &pred).unwrap();
        assert_eq!(v1.data, v2.data);
    }

    #[test]
    fn channel_swap_changes_output() {
        let cfg = small_config();
        let mut net = VelocityNet::new(cfg, 7).unwrap();
        for (name, value) in net.params_mut() {
            if name == "head.weight" {
                for (i, v) in value.iter_mut().enumerate() {
                    *v = 0.05 * ((i % 9) as f64 - 4.0);
                }
            }
        }
        let input = probe_input([4, 4, 4], 3);
        let mut swapped = input.clone();
        {
            let (a, b) = swapped.view_mut().split_at(Axis(0), 1);
            let tmp = a.to_owned();
            let mut a = a;
            a.assign(&b);
            let mut b = b;
            b.assign(&tmp);
        }

        let tape = Tape::new();
        let out = net.forward(&tape, tape.constant(input), false);
        let out_swapped = net.forward(&tape, tape.constant(swapped), false);
        let a = tape.value(out.output);
        let b = tape.value(out_swapped.output);
        let diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "swapping channels left the output unchanged");
    }

    #[test]
    fn output_shape_matches_any_input_shape() {
        let net = VelocityNet::new(small_config(), 5).unwrap();
        for shape in [[4, 8, 4], [5, 6, 7], [3, 4, 9]] {
            let tape = Tape::new();
            let graph = net.forward(&tape, tape.constant(probe_input(shape, 1)), false);
            assert_eq!(
                tape.value(graph.output).shape(),
                &[3, shape[0], shape[1], shape[2]]
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_and_stability() {
        let dir = tempfile::tempdir().unwrap();
        let net = VelocityNet::new(small_config(), 23).unwrap();
        let p1 = dir.path().join("model.ckpt.gz");
        let p2 = dir.path().join("model-again.ckpt.gz");
        save_model(&net, &p1).unwrap();
        save_model(&net, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let loaded = load_model(&p1).unwrap();
        assert_eq!(loaded.config, net.config);
        for ((n1, v1), (n2, v2)) in net.params().iter().zip(loaded.params()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }

        let input = probe_input([4, 4, 4], 9);
        let tape = Tape::new();
        let a = net.forward(&tape, tape.constant(input.clone()), false);
        let b = loaded.forward(&tape, tape.constant(input), false);
        assert_eq!(*tape.value(a.output), *tape.value(b.output));
    }

    #[test]
    fn wrong_version_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = VelocityNet::new(small_config(), 2).unwrap();
        let path = dir.path().join("model.ckpt.gz");
        save_model(&net, &path).unwrap();

        let raw = fs::read(&path).unwrap();
        let mut json = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut json).unwrap();
        let mut value: serde_json::Value = serde_json::from_slice(&json).unwrap();
        value["version"] = serde_json::json!(999);
        let tampered = dir.path().join("tampered.ckpt.gz");
        let out = fs::File::create(&tampered).unwrap();
        let mut enc = GzEncoder::new(out, Compression::default());
        enc.write_all(&serde_json::to_vec(&value).unwrap()).unwrap();
        enc.finish().unwrap();
        match load_model(&tampered) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 999);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }

        let garbage = dir.path().join("garbage.ckpt.gz");
        fs::write(&garbage, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_model(&garbage),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    /// After one optimization step from the zero-velocity start, every
    /// parameter tensor receives a nonzero gradient from the full
    /// per-case objective.
    #[test]
    fn gradients_reach_every_parameter() {
        let grid = SamplingGrid::unit([8, 8, 8]);
        let pred = grid.downsample(2);
        let atlas_labels = LabelMap::new(
            grid.clone(),
            Array3::from_shape_fn((8, 8, 8), |(i, j, k)| {
                if i >= 2 && i < 6 && j >= 2 && j < 6 && k >= 2 && k < 6 {
                    1
                } else {
                    0
                }
            }),
        )
        .unwrap();
        let subject_labels = LabelMap::new(
            grid.clone(),
            Array3::from_shape_fn((8, 8, 8), |(i, j, k)| {
                if i >= 1 && i < 5 && j >= 3 && j < 7 && k >= 2 && k < 5 {
                    1
                } else {
                    0
                }
            }),
        )
        .unwrap();
        let (subject_img, atlas_img) = toy_volumes(&grid);
        let id = AffineTransform::identity();
        let w = LossWeights::default();
        let d_subj = Rc::new(distance_map(&subject_labels, w.gamma).unwrap().data);
        let d_atlas = Rc::new(distance_map(&atlas_labels, w.gamma).unwrap().data);
        let input = network_input(&subject_img, &id, &atlas_img, &pred).unwrap();

        let mut net = VelocityNet::new(small_config(), 17).unwrap();
        let run = |net: &VelocityNet| {
            let tape = Tape::new();
            let graph = net.forward(&tape, tape.constant(input.clone()), true);
            let v_full = field_ops::resample_field_var(&tape, &pred, &grid, graph.output);
            let (fwd, inv) = field_ops::integrate_svf_var(&tape, &grid, v_full, Some(2));
            let case = CaseTerms {
                dist: Rc::clone(&d_subj),
                grid: &grid,
                affine: &id,
                fwd,
                inv,
            };
            let loss =
                overfit_loss_graph(&tape, &case, &d_atlas, &grid, &atlas_labels, &w).unwrap();
            let grads = tape.backward(loss.total);
            graph
                .params
                .iter()
                .map(|p| grads.wrt(*p).cloned())
                .collect::<Vec<_>>()
        };

        let first = run(&net);
        for ((_, value), grad) in net.params_mut().iter_mut().zip(&first) {
            if let Some(g) = grad {
                *value -= &(g * 0.5);
            }
        }

        let second = run(&net);
        for ((name, _), grad) in net.params().iter().zip(&second) {
            let g = grad.as_ref().unwrap_or_else(|| panic!("no gradient for {name}"));
            let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max > 0.0, "dead gradient branch at {name}");
        }
    }
}
