//! Two-stage optimization: cohort-level training of the shared velocity
//! predictor, then per-case one-shot over-fitting that clones the shared
//! net and specializes it to a single subject. The shared checkpoint is
//! never written to by the over-fitting stage.
//!
//! Every run is seeded and single-writer, so loss traces are
//! bitwise-reproducible. Non-finite losses abort: cohort training rolls
//! back to the last epoch that finished finite, over-fitting falls back to
//! the best loss seen so far and flags the result.

use std::path::Path;
use std::rc::Rc;

use ndarray::{Array3, ArrayD};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::{field_ops, Tape};
use crate::distmaps::distance_map;
use crate::error::{Error, Result};
use crate::io::append_jsonl;
use crate::losses::{
    general_loss_graph, overfit_loss_graph, CaseTerms, LossReport, LossWeights,
};
use crate::network::{network_input, NetConfig, VelocityNet};
use crate::volumes::{
    AffineTransform, DisplacementField, ImageVolume, LabelMap, SamplingGrid,
};

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs_general: usize,
    pub epochs_overfit: usize,
    pub batch_size: usize,
    pub lr_general: f64,
    pub lr_overfit: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Fixed scaling-and-squaring step count; `None` selects it from the
    /// velocity magnitude.
    pub steps: Option<usize>,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_general: 350,
            epochs_overfit: 1500,
            batch_size: 2,
            lr_general: 1e-3,
            lr_overfit: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
            steps: None,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.net.validate()?;
        if self.epochs_general == 0 {
            return Err(Error::Config("cohort training needs at least one epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "cohort training needs batches of at least two cases for the pairwise term".into(),
            ));
        }
        if !(self.lr_general > 0.0) || !(self.lr_overfit > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One subject ready for training: native-grid image and labels plus the
/// affine taking its world coordinates into atlas world coordinates.
pub struct TrainingCase {
    pub id: String,
    pub image: ImageVolume,
    pub labels: LabelMap,
    pub affine: AffineTransform,
}

/// Elementwise first-order adaptive optimizer with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[(String, ArrayD<f64>)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [(String, ArrayD<f64>)], grads: &[Option<ArrayD<f64>>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
        }
    }
}

/// Per-case constants reused across epochs: the network input tensor and
/// the subject distance map on its native grid.
struct PreparedCase<'a> {
    case: &'a TrainingCase,
    input: ArrayD<f64>,
    dist: Rc<Array3<f64>>,
}

fn prepare_cases<'a>(
    cases: &'a [TrainingCase],
    atlas_image: &ImageVolume,
    pred_grid: &SamplingGrid,
    gamma: f64,
) -> Result<Vec<PreparedCase<'a>>> {
    cases
        .iter()
        .map(|case| {
            Ok(PreparedCase {
                case,
                input: network_input(&case.image, &case.affine, atlas_image, pred_grid)?,
                dist: Rc::new(distance_map(&case.labels, gamma)?.data),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct EpochRecord<'a> {
    epoch: usize,
    #[serde(flatten)]
    report: &'a LossReport,
    notes: &'a [String],
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut acc = LossReport {
        total: 0.0,
        sim: 0.0,
        reg: 0.0,
        pairwise_sim: 0.0,
        vol: 0.0,
        mode: reports[0].mode,
    };
    for r in reports {
        acc.total += r.total / n;
        acc.sim += r.sim / n;
        acc.reg += r.reg / n;
        acc.pairwise_sim += r.pairwise_sim / n;
        acc.vol += r.vol / n;
    }
    acc
}

pub struct TrainOutcome {
    pub net: VelocityNet,
    /// One report per completed epoch (mean over that epoch's batches).
    pub reports: Vec<LossReport>,
    /// True when a non-finite loss cut the run short; `net` is then the
    /// state after the last fully finite epoch.
    pub diverged: bool,
}

/// Run one case through the net and produce the transform pair on the
/// atlas grid: velocity on the prediction grid, upsampled, then integrated.
pub fn transform_for_case(
    net: &VelocityNet,
    case_image: &ImageVolume,
    case_affine: &AffineTransform,
    atlas_image: &ImageVolume,
    atlas_grid: &SamplingGrid,
    steps: Option<usize>,
) -> Result<(DisplacementField, DisplacementField)> {
    let pred_grid = atlas_grid.downsample(net.config.grid_factor);
    let input = network_input(case_image, case_affine, atlas_image, &pred_grid)?;
    let tape = Tape::new();
    let graph = net.forward(&tape, tape.constant(input), false);
    let v_full = field_ops::resample_field_var(&tape, &pred_grid, atlas_grid, graph.output);
    let (fwd, inv) = field_ops::integrate_svf_var(&tape, atlas_grid, v_full, steps);
    Ok((
        field_ops::displacement_from_value(atlas_grid, &tape.value(fwd))?,
        field_ops::displacement_from_value(atlas_grid, &tape.value(inv))?,
    ))
}

/// Cohort-level training of the shared net. Batches are reshuffled each
/// epoch from the seeded generator; the pairwise similarity term couples
/// cases within a batch only. Writes one JSON line per epoch when `log`
/// is given.
pub fn train_general(
    cases: &[TrainingCase],
    atlas_image: &ImageVolume,
    atlas_labels: &LabelMap,
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cases.len() < 2 {
        return Err(Error::InvalidArgument(
            "cohort training needs at least two cases".into(),
        ));
    }
    let atlas_grid = &atlas_labels.grid;
    let pred_grid = atlas_grid.downsample(cfg.net.grid_factor);
    let atlas_dist = Rc::new(distance_map(atlas_labels, cfg.weights.gamma)?.data);
    let prepared = prepare_cases(cases, atlas_image, &pred_grid, cfg.weights.gamma)?;

    let mut net = VelocityNet::new(cfg.net.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.lr_general, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut last_good = net.clone();

    for epoch in 0..cfg.epochs_general {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);

        let mut batch_reports = Vec::new();
        let mut notes = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let pv = net.leaf_params(&tape, true);
            let terms: Vec<CaseTerms> = chunk
                .iter()
                .map(|&i| {
                    let pc = &prepared[i];
                    let out = net.forward_with(&tape, tape.constant(pc.input.clone()), &pv);
                    let v_full =
                        field_ops::resample_field_var(&tape, &pred_grid, atlas_grid, out);
                    let (fwd, inv) =
                        field_ops::integrate_svf_var(&tape, atlas_grid, v_full, cfg.steps);
                    CaseTerms {
                        dist: Rc::clone(&pc.dist),
                        grid: &pc.case.labels.grid,
                        affine: &pc.case.affine,
                        fwd,
                        inv,
                    }
                })
                .collect();
            let graph = general_loss_graph(&tape, &terms, &atlas_dist, atlas_grid, &cfg.weights)?;
            notes.extend(graph.notes.iter().cloned());
            if !graph.report.total.is_finite() {
                if reports.is_empty() {
                    return Err(Error::Diverged { epoch });
                }
                if let Some(path) = log {
                    let report = LossReport { ..*reports.last().expect("nonempty") };
                    let note = format!("non-finite loss at epoch {epoch}; rolled back");
                    append_jsonl(
                        path,
                        &EpochRecord { epoch, report: &report, notes: &[note] },
                    )?;
                }
                return Ok(TrainOutcome { net: last_good, reports, diverged: true });
            }
            batch_reports.push(graph.report);
            let grads = tape.backward(graph.total);
            let grad_list: Vec<Option<ArrayD<f64>>> =
                pv.iter().map(|p| grads.wrt(*p).cloned()).collect();
            opt.step(net.params_mut(), &grad_list);
        }

        let report = mean_report(&batch_reports);
        if let Some(path) = log {
            append_jsonl(path, &EpochRecord { epoch, report: &report, notes: &notes })?;
        }
        reports.push(report);
        // The epoch's loss was computed before its optimizer steps, so a
        // finite epoch can still poison the parameters; only a fully finite
        // state becomes the rollback point.
        if net
            .params()
            .iter()
            .all(|(_, p)| p.iter().all(|v| v.is_finite()))
        {
            last_good = net.clone();
        }
    }

    Ok(TrainOutcome { net, reports, diverged: false })
}

pub struct OverfitOutcome {
    pub net: VelocityNet,
    pub fwd: DisplacementField,
    pub inv: DisplacementField,
    pub reports: Vec<LossReport>,
    /// Set when a non-finite loss appeared; the transforms then come from
    /// the best finite loss seen before the failure.
    pub warning: bool,
}

/// One-shot specialization of a clone of the shared net to a single case.
/// `base` is untouched; zero epochs return its transform unchanged.
pub fn overfit_case(
    base: &VelocityNet,
    case: &TrainingCase,
    atlas_image: &ImageVolume,
    atlas_labels: &LabelMap,
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<OverfitOutcome> {
    cfg.validate()?;
    let atlas_grid = &atlas_labels.grid;
    let pred_grid = atlas_grid.downsample(base.config.grid_factor);
    let atlas_dist = Rc::new(distance_map(atlas_labels, cfg.weights.gamma)?.data);
    let input = network_input(&case.image, &case.affine, atlas_image, &pred_grid)?;
    let dist = Rc::new(distance_map(&case.labels, cfg.weights.gamma)?.data);

    let mut net = base.clone();
    let mut opt = Adam::new(cfg.lr_overfit, net.params());
    let mut reports = Vec::new();
    let mut warning = false;
    let mut best: Option<(f64, VelocityNet)> = None;

    for epoch in 0..cfg.epochs_overfit {
        let tape = Tape::new();
        let pv = net.leaf_params(&tape, true);
        let out = net.forward_with(&tape, tape.constant(input.clone()), &pv);
        let v_full = field_ops::resample_field_var(&tape, &pred_grid, atlas_grid, out);
        let (fwd, inv) = field_ops::integrate_svf_var(&tape, atlas_grid, v_full, cfg.steps);
        let terms = CaseTerms {
            dist: Rc::clone(&dist),
            grid: &case.labels.grid,
            affine: &case.affine,
            fwd,
            inv,
        };
        let graph =
            overfit_loss_graph(&tape, &terms, &atlas_dist, atlas_grid, atlas_labels, &cfg.weights)?;
        if !graph.report.total.is_finite() {
            warning = true;
            if let Some(path) = log {
                let report = graph.report;
                let note = format!("non-finite loss at epoch {epoch}; keeping best transform");
                append_jsonl(path, &EpochRecord { epoch, report: &report, notes: &[note] })?;
            }
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| graph.report.total < *b) {
            best = Some((graph.report.total, net.clone()));
        }
        if let Some(path) = log {
            append_jsonl(
                path,
                &EpochRecord { epoch, report: &graph.report, notes: &graph.notes },
            )?;
        }
        reports.push(graph.report);

        let grads = tape.backward(graph.total);
        let grad_list: Vec<Option<ArrayD<f64>>> =
            pv.iter().map(|p| grads.wrt(*p).cloned()).collect();
        opt.step(net.params_mut(), &grad_list);
    }

    let final_net = if warning {
        best.map(|(_, n)| n).unwrap_or_else(|| base.clone())
    } else {
        net
    };
    let (fwd, inv) = transform_for_case(
        &final_net,
        &case.image,
        &case.affine,
        atlas_image,
        atlas_grid,
        cfg.steps,
    )?;
    Ok(OverfitOutcome { net: final_net, fwd, inv, reports, warning })
}
