//! Cohort-level spatial statistics over atlas-mapped metastases.
//!
//! Once a case is registered, every connected tumour component is carried
//! into atlas space and reduced to a [`MetastasisRecord`]. Across a cohort
//! the records feed per-region frequency tables with a volume-corrected
//! uniform expectation, chi-square screening with Bonferroni correction,
//! jitter-based confidence intervals on the counts, junction-distance
//! statistics via the 1-D earth mover's distance, and hemisphere symmetry
//! tests. All randomised procedures take explicit seeds and are
//! reproducible bit for bit.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::volumes::{
    resample_labels, sample_image_at, sample_labels_at, ImageVolume, LabelMap, TransformChain,
};

/// One connected tumour component mapped into atlas space.
///
/// `barycentre` is the mean atlas-world position of the warped component's
/// voxel centres and `volume_mm3` its warped volume. `region_label` and
/// `arterial_label` are the anatomical and vascular atlas labels at the
/// barycentre voxel. The perfusion summaries are taken over the warped
/// voxel set. A component whose warped voxels all fall on atlas background
/// (or outside the field of view entirely) is kept but flagged via
/// `outside_foreground`; flagged records carry zeroed statistics and are
/// skipped by every aggregation below.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetastasisRecord {
    pub case_id: String,
    pub lesion_id: u32,
    pub barycentre: [f64; 3],
    pub volume_mm3: f64,
    pub region_label: i32,
    pub arterial_label: i32,
    pub perfusion_median: f64,
    pub perfusion_min: f64,
    pub perfusion_max: f64,
    pub outside_foreground: bool,
}

/// Frequency-table row for one pooled region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionStats {
    pub region: i32,
    pub measured: usize,
    pub expected: f64,
    pub chi_square: Option<f64>,
    pub p_value: Option<f64>,
    /// Whether the region entered the chi-square screen (expected count
    /// large enough for the approximation).
    pub tested: bool,
    pub significant: bool,
    /// Jitter-derived confidence interval on the measured count.
    pub ci: Option<(usize, usize)>,
}

/// Label all 26-connected components of a boolean volume.
///
/// Components are numbered from 1 in scan order of their first voxel;
/// background voxels stay 0. Returns the component map and the number of
/// components found.
pub fn connected_components(mask: &Array3<bool>) -> (Array3<u32>, u32) {
    let dim = mask.dim();
    let shape = [dim.0, dim.1, dim.2];
    let mut comp = Array3::<u32>::zeros(dim);
    let mut next = 0u32;
    let mut stack: Vec<[usize; 3]> = Vec::new();
    for ((i, j, k), &inside) in mask.indexed_iter() {
        if !inside || comp[(i, j, k)] != 0 {
            continue;
        }
        next += 1;
        comp[(i, j, k)] = next;
        stack.push([i, j, k]);
        while let Some(p) = stack.pop() {
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    for dk in -1i64..=1 {
                        if di == 0 && dj == 0 && dk == 0 {
                            continue;
                        }
                        let q = [
                            p[0] as i64 + di,
                            p[1] as i64 + dj,
                            p[2] as i64 + dk,
                        ];
                        if q.iter().any(|&v| v < 0)
                            || (0..3).any(|a| q[a] as usize >= shape[a])
                        {
                            continue;
                        }
                        let qi = (q[0] as usize, q[1] as usize, q[2] as usize);
                        if mask[qi] && comp[qi] == 0 {
                            comp[qi] = next;
                            stack.push([qi.0, qi.1, qi.2]);
                        }
                    }
                }
            }
        }
    }
    (comp, next)
}

fn median_of_sorted(values: &[f64]) -> f64 {
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Map every connected component of a native tumour mask into atlas space.
///
/// `chain` must map atlas grid positions to subject world space (the
/// forward resampling chain of the case), so the component map is pulled
/// onto the atlas grid with a single nearest-neighbour pass. The anatomical
/// and vascular label maps and the perfusion image all live on the atlas
/// grid.
pub fn map_lesions(
    case_id: &str,
    tumour: &Mask,
    chain: &TransformChain,
    atlas_labels: &LabelMap,
    arterial_labels: &LabelMap,
    perfusion: &ImageVolume,
) -> Result<Vec<MetastasisRecord>> {
    if arterial_labels.grid != atlas_labels.grid || perfusion.grid != atlas_labels.grid {
        return Err(Error::GridMismatch(
            "lesion mapping inputs must share the atlas grid".into(),
        ));
    }
    let (comp, n) = connected_components(&tumour.data);
    let comp_labels = LabelMap::new(tumour.grid.clone(), comp.mapv(|c| c as i32))?;
    let warped = resample_labels(&comp_labels, chain, &atlas_labels.grid)?;

    let mut voxels: BTreeMap<i32, Vec<[usize; 3]>> = BTreeMap::new();
    for ((i, j, k), &c) in warped.data.indexed_iter() {
        if c > 0 {
            voxels.entry(c).or_default().push([i, j, k]);
        }
    }

    let lookup = TransformChain::new(vec![]);
    let voxel_volume = atlas_labels.grid.voxel_volume();
    let mut records = Vec::with_capacity(n as usize);
    for lesion in 1..=n {
        let vox = voxels.get(&(lesion as i32)).map(Vec::as_slice).unwrap_or(&[]);
        if vox.is_empty() {
            records.push(MetastasisRecord {
                case_id: case_id.to_string(),
                lesion_id: lesion,
                barycentre: [0.0; 3],
                volume_mm3: 0.0,
                region_label: 0,
                arterial_label: 0,
                perfusion_median: 0.0,
                perfusion_min: 0.0,
                perfusion_max: 0.0,
                outside_foreground: true,
            });
            continue;
        }
        let mut acc = Vector3::zeros();
        let mut all_background = true;
        let mut values: Vec<f64> = Vec::with_capacity(vox.len());
        for &[i, j, k] in vox {
            acc += atlas_labels
                .grid
                .voxel_to_world([i as f64, j as f64, k as f64]);
            if atlas_labels.data[(i, j, k)] != 0 {
                all_background = false;
            }
            values.push(perfusion.data[(i, j, k)]);
        }
        let bary = acc / vox.len() as f64;
        values.sort_by(f64::total_cmp);
        let region = sample_labels_at(atlas_labels, &lookup, &[bary])[0];
        let arterial = sample_labels_at(arterial_labels, &lookup, &[bary])[0];
        records.push(MetastasisRecord {
            case_id: case_id.to_string(),
            lesion_id: lesion,
            barycentre: [bary.x, bary.y, bary.z],
            volume_mm3: vox.len() as f64 * voxel_volume,
            region_label: region,
            arterial_label: arterial,
            perfusion_median: median_of_sorted(&values),
            perfusion_min: values[0],
            perfusion_max: values[values.len() - 1],
            outside_foreground: all_background,
        });
    }
    Ok(records)
}

fn usable(records: &[MetastasisRecord]) -> impl Iterator<Item = &MetastasisRecord> {
    records.iter().filter(|r| !r.outside_foreground)
}

fn pooled(pooling: &BTreeMap<i32, i32>, label: i32) -> i32 {
    pooling.get(&label).copied().unwrap_or(label)
}

fn frequencies_impl(
    records: &[MetastasisRecord],
    labels: &LabelMap,
    pooling: &BTreeMap<i32, i32>,
    select: impl Fn(&MetastasisRecord) -> i32,
) -> Result<Vec<RegionStats>> {
    let mut volume: BTreeMap<i32, f64> = BTreeMap::new();
    for l in labels.labels() {
        *volume.entry(pooled(pooling, l)).or_insert(0.0) += labels.volume_mm3(l);
    }
    let total_volume: f64 = volume.values().sum();
    if total_volume <= 0.0 {
        return Err(Error::EmptyForeground(
            "frequency atlas has no foreground labels".into(),
        ));
    }

    let mut counts: BTreeMap<i32, usize> = volume.keys().map(|&g| (g, 0)).collect();
    let mut total = 0usize;
    for r in usable(records) {
        let label = select(r);
        if label == 0 {
            continue;
        }
        *counts.entry(pooled(pooling, label)).or_insert(0) += 1;
        total += 1;
    }

    Ok(counts
        .iter()
        .map(|(&region, &measured)| RegionStats {
            region,
            measured,
            expected: total as f64 * volume.get(&region).copied().unwrap_or(0.0)
                / total_volume,
            chi_square: None,
            p_value: None,
            tested: false,
            significant: false,
            ci: None,
        })
        .collect())
}

/// Per-region lesion counts with volume-corrected uniform expectations.
///
/// Regions are pooled through `pooling` (raw label to group id, identity
/// for absent keys); every pooled foreground region of the atlas appears in
/// the output even with zero lesions. The expectation assigns the cohort
/// total proportionally to pooled region volume, so the expected counts sum
/// to the measured total. Flagged records and records with a background
/// barycentre are excluded.
pub fn region_frequencies(
    records: &[MetastasisRecord],
    atlas_labels: &LabelMap,
    pooling: &BTreeMap<i32, i32>,
) -> Result<Vec<RegionStats>> {
    frequencies_impl(records, atlas_labels, pooling, |r| r.region_label)
}

/// [`region_frequencies`] over the vascular territory labels.
pub fn arterial_frequencies(
    records: &[MetastasisRecord],
    arterial_labels: &LabelMap,
    pooling: &BTreeMap<i32, i32>,
) -> Result<Vec<RegionStats>> {
    frequencies_impl(records, arterial_labels, pooling, |r| r.arterial_label)
}

/// Settings for [`chi_square_regions`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChiSquareOptions {
    /// Family-wise significance level before Bonferroni correction.
    pub alpha: f64,
    /// Minimum expected count for a region to enter the screen.
    pub min_expected: f64,
}

impl Default for ChiSquareOptions {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            min_expected: 5.0,
        }
    }
}

/// One-degree-of-freedom region-versus-rest chi-square screen.
///
/// Each region with `expected >= min_expected` is tested against the pooled
/// remainder of the table; regions below the threshold are left untested.
/// Significance uses Bonferroni correction over the number of regions
/// actually tested. Returns that number.
pub fn chi_square_regions(stats: &mut [RegionStats], opts: &ChiSquareOptions) -> Result<usize> {
    if !(opts.alpha > 0.0 && opts.alpha <= 1.0) {
        return Err(Error::InvalidArgument("alpha must be in (0, 1]".into()));
    }
    let total_measured: f64 = stats.iter().map(|s| s.measured as f64).sum();
    let total_expected: f64 = stats.iter().map(|s| s.expected).sum();
    let dist = ChiSquared::new(1.0)
        .map_err(|e| Error::InvalidArgument(format!("chi-square setup: {e}")))?;

    let tested: Vec<usize> = (0..stats.len())
        .filter(|&i| {
            stats[i].expected >= opts.min_expected
                && total_expected - stats[i].expected > 0.0
        })
        .collect();
    let m = tested.len();
    let threshold = if m > 0 { opts.alpha / m as f64 } else { 0.0 };

    for i in 0..stats.len() {
        stats[i].tested = false;
        stats[i].chi_square = None;
        stats[i].p_value = None;
        stats[i].significant = false;
    }
    for &i in &tested {
        let o = stats[i].measured as f64;
        let e = stats[i].expected;
        let o_rest = total_measured - o;
        let e_rest = total_expected - e;
        let x = (o - e).powi(2) / e + (o_rest - e_rest).powi(2) / e_rest;
        let p = dist.sf(x);
        stats[i].tested = true;
        stats[i].chi_square = Some(x);
        stats[i].p_value = Some(p);
        stats[i].significant = p < threshold;
    }
    Ok(m)
}

/// Settings for [`jitter_ci`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JitterOptions {
    pub replicates: usize,
    /// Mean displacement magnitude in mm.
    pub shift_mean: f64,
    /// Standard deviation of the displacement magnitude in mm.
    pub shift_sd: f64,
    pub seed: u64,
}

impl Default for JitterOptions {
    fn default() -> Self {
        Self {
            replicates: 100,
            shift_mean: 1.0,
            shift_sd: 0.5,
            seed: 0,
        }
    }
}

/// Confidence interval on a jittered region count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JitterInterval {
    pub low: usize,
    pub high: usize,
}

fn nearest_rank(sorted: &[usize], q: f64) -> usize {
    let n = sorted.len();
    let r = (q * n as f64).ceil().max(1.0) as usize;
    sorted[r.min(n) - 1]
}

/// Confidence intervals on pooled region counts under barycentre jitter.
///
/// Every replicate displaces each barycentre along a uniformly random
/// direction by a magnitude drawn from a normal distribution (clamped at
/// zero) and recounts regions at the displaced positions. Replicates use
/// seeds derived from `opts.seed`, so the procedure is deterministic and
/// replicates could be evaluated independently. Returns the 2.5th and
/// 97.5th percentile (nearest rank) of each pooled region's count.
pub fn jitter_ci(
    records: &[MetastasisRecord],
    atlas_labels: &LabelMap,
    pooling: &BTreeMap<i32, i32>,
    opts: &JitterOptions,
) -> Result<BTreeMap<i32, JitterInterval>> {
    if opts.replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be positive".into()));
    }
    if !(opts.shift_mean >= 0.0 && opts.shift_sd >= 0.0) {
        return Err(Error::InvalidArgument(
            "shift mean and sd must be non-negative".into(),
        ));
    }
    let magnitude = Normal::new(opts.shift_mean, opts.shift_sd)
        .map_err(|e| Error::InvalidArgument(format!("shift distribution: {e}")))?;

    let mut groups: Vec<i32> = atlas_labels
        .labels()
        .into_iter()
        .map(|l| pooled(pooling, l))
        .collect();
    groups.sort_unstable();
    groups.dedup();

    let points: Vec<Vector3<f64>> = usable(records)
        .map(|r| Vector3::new(r.barycentre[0], r.barycentre[1], r.barycentre[2]))
        .collect();
    let lookup = TransformChain::new(vec![]);

    let mut counts_per_group: BTreeMap<i32, Vec<usize>> =
        groups.iter().map(|&g| (g, Vec::with_capacity(opts.replicates))).collect();
    for rep in 0..opts.replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed
                .wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let displaced: Vec<Vector3<f64>> = points
            .iter()
            .map(|p| {
                let dir: [f64; 3] = rng.sample(UnitSphere);
                let mag = magnitude.sample(&mut rng).max(0.0);
                p + mag * Vector3::new(dir[0], dir[1], dir[2])
            })
            .collect();
        let mut counts: BTreeMap<i32, usize> = groups.iter().map(|&g| (g, 0)).collect();
        for label in sample_labels_at(atlas_labels, &lookup, &displaced) {
            if label == 0 {
                continue;
            }
            if let Some(c) = counts.get_mut(&pooled(pooling, label)) {
                *c += 1;
            }
        }
        for (g, c) in counts {
            counts_per_group.get_mut(&g).expect("group present").push(c);
        }
    }

    Ok(counts_per_group
        .into_iter()
        .map(|(g, mut v)| {
            v.sort_unstable();
            (
                g,
                JitterInterval {
                    low: nearest_rank(&v, 0.025),
                    high: nearest_rank(&v, 0.975),
                },
            )
        })
        .collect())
}

/// Copy jitter intervals onto matching rows of a frequency table.
pub fn annotate_ci(stats: &mut [RegionStats], ci: &BTreeMap<i32, JitterInterval>) {
    for s in stats.iter_mut() {
        s.ci = ci.get(&s.region).map(|j| (j.low, j.high));
    }
}

/// First Wasserstein distance between two 1-D empirical distributions.
///
/// Computed as the area between the empirical CDFs, which for equal sample
/// sizes coincides with the optimal-assignment cost of matching sorted
/// values. Both samples must be non-empty and finite.
pub fn emd_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty sample in EMD".into()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in EMD".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut prev: Option<f64> = None;
    let mut total = 0.0;
    while ia < xs.len() || ib < ys.len() {
        let x = match (xs.get(ia), ys.get(ib)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            total += (ia as f64 / na - ib as f64 / nb).abs() * (x - p);
        }
        while ia < xs.len() && xs[ia] <= x {
            ia += 1;
        }
        while ib < ys.len() && ys[ib] <= x {
            ib += 1;
        }
        prev = Some(x);
    }
    Ok(total)
}

/// Settings for [`junction_analysis`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JunctionOptions {
    /// Number of random barycentre sets drawn from the domain.
    pub random_sets: usize,
    pub seed: u64,
}

impl Default for JunctionOptions {
    fn default() -> Self {
        Self {
            random_sets: 100,
            seed: 0,
        }
    }
}

/// Result of [`junction_analysis`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JunctionAnalysis {
    /// Distance to the junction surface for each usable lesion barycentre.
    pub lesion_distances: Vec<f64>,
    /// Pooled distances of all random sets, for histogramming.
    pub random_distances: Vec<f64>,
    /// EMD between the lesion distances and each random set.
    pub emd_lesion: Vec<f64>,
    /// EMD between every pair of random sets (the null sample).
    pub emd_rand: Vec<f64>,
    /// Permutation rank of `mean(emd_lesion)` within `emd_rand`.
    pub p_value: f64,
    /// Set when fewer than 100 random sets back the null distribution.
    pub low_replicates: bool,
}

/// Distance-to-junction statistics for lesion barycentres.
///
/// Distances are read from the exact Euclidean distance transform of the
/// junction mask, interpolated at the barycentre positions. Random
/// barycentre sets of the same size are drawn uniformly from `domain`
/// (voxel choice plus a continuous in-voxel offset) with per-set derived
/// seeds. The EMD between the lesion set and each random set is compared
/// against the EMD among random-set pairs; the p-value is the one-sided
/// permutation rank of the mean lesion EMD in that null sample.
pub fn junction_analysis(
    records: &[MetastasisRecord],
    junction: &Mask,
    domain: &Mask,
    opts: &JunctionOptions,
) -> Result<JunctionAnalysis> {
    if junction.grid != domain.grid {
        return Err(Error::GridMismatch(
            "junction and domain masks must share a grid".into(),
        ));
    }
    if junction.count() == 0 || domain.count() == 0 {
        return Err(Error::EmptyForeground(
            "junction analysis needs non-empty junction and domain".into(),
        ));
    }
    if opts.random_sets < 2 {
        return Err(Error::InvalidArgument(
            "need at least two random sets".into(),
        ));
    }
    let points: Vec<Vector3<f64>> = usable(records)
        .map(|r| Vector3::new(r.barycentre[0], r.barycentre[1], r.barycentre[2]))
        .collect();
    if points.is_empty() {
        return Err(Error::InvalidArgument("no usable lesion records".into()));
    }

    let dist = crate::edt::edt_to_sources(junction.data.view(), junction.grid.spacing);
    let dist_image = ImageVolume::new(junction.grid.clone(), dist)?;
    let lookup = TransformChain::new(vec![]);
    let lesion_distances = sample_image_at(&dist_image, &lookup, &points);

    let voxels: Vec<[usize; 3]> = domain
        .data
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((i, j, k), _)| [i, j, k])
        .collect();
    let m = points.len();
    let mut set_distances: Vec<Vec<f64>> = Vec::with_capacity(opts.random_sets);
    for set in 0..opts.random_sets {
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed
                .wrapping_add((set as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                .wrapping_add(1),
        );
        let sample: Vec<Vector3<f64>> = (0..m)
            .map(|_| {
                let v = voxels[rng.random_range(0..voxels.len())];
                let pos = [
                    v[0] as f64 + rng.random_range(-0.5..0.5),
                    v[1] as f64 + rng.random_range(-0.5..0.5),
                    v[2] as f64 + rng.random_range(-0.5..0.5),
                ];
                domain.grid.voxel_to_world(pos)
            })
            .collect();
        set_distances.push(sample_image_at(&dist_image, &lookup, &sample));
    }

    let emd_lesion: Vec<f64> = set_distances
        .iter()
        .map(|s| emd_1d(&lesion_distances, s))
        .collect::<Result<_>>()?;
    let mut emd_rand = Vec::with_capacity(opts.random_sets * (opts.random_sets - 1) / 2);
    for i in 0..set_distances.len() {
        for j in i + 1..set_distances.len() {
            emd_rand.push(emd_1d(&set_distances[i], &set_distances[j])?);
        }
    }
    let stat = emd_lesion.iter().sum::<f64>() / emd_lesion.len() as f64;
    let exceed = emd_rand.iter().filter(|&&v| v >= stat).count();
    let p_value = (1 + exceed) as f64 / (1 + emd_rand.len()) as f64;

    Ok(JunctionAnalysis {
        lesion_distances,
        random_distances: set_distances.into_iter().flatten().collect(),
        emd_lesion,
        emd_rand,
        p_value,
        low_replicates: opts.random_sets < 100,
    })
}

/// Result of [`hemisphere_symmetry_test`] for one structure pair.
#[derive(Debug, Clone, Serialize)]
pub struct HemisphereTest {
    pub left_label: i32,
    pub right_label: i32,
    pub left_count: usize,
    pub right_count: usize,
    /// Volume share of the left structure within the pair.
    pub left_volume_fraction: f64,
    pub p_value: f64,
}

/// Two-sided binomial test of left/right lesion counts per structure pair.
///
/// The null probability of a lesion falling on the left side is the left
/// structure's share of the pair's volume, so asymmetric structures are not
/// penalised for their size. Pairs without lesions get `p_value` 1.
pub fn hemisphere_symmetry_test(
    records: &[MetastasisRecord],
    atlas_labels: &LabelMap,
    pairs: &[(i32, i32)],
) -> Result<Vec<HemisphereTest>> {
    let mut out = Vec::with_capacity(pairs.len());
    for &(left, right) in pairs {
        if left == right {
            return Err(Error::InvalidArgument(
                "hemisphere pair with identical labels".into(),
            ));
        }
        let vol_l = atlas_labels.volume_mm3(left);
        let vol_r = atlas_labels.volume_mm3(right);
        let frac = if vol_l + vol_r > 0.0 {
            vol_l / (vol_l + vol_r)
        } else {
            0.5
        };
        let mut left_count = 0usize;
        let mut right_count = 0usize;
        for r in usable(records) {
            if r.region_label == left {
                left_count += 1;
            } else if r.region_label == right {
                right_count += 1;
            }
        }
        let n = left_count + right_count;
        let p_value = if n == 0 {
            1.0
        } else {
            let dist = Binomial::new(frac, n as u64)
                .map_err(|e| Error::InvalidArgument(format!("binomial setup: {e}")))?;
            let k = left_count as u64;
            let lower = dist.cdf(k);
            let upper = if k == 0 { 1.0 } else { 1.0 - dist.cdf(k - 1) };
            (2.0 * lower.min(upper)).min(1.0)
        };
        out.push(HemisphereTest {
            left_label: left,
            right_label: right,
            left_count,
            right_count,
            left_volume_fraction: frac,
            p_value,
        });
    }
    Ok(out)
}

/// Anatomical structures of the atlas segmentation with left/right label
/// ids where the structure is paired.
pub const ANATOMY_STRUCTURES: [(&str, i32, Option<i32>); 19] = [
    ("Cerebral White Matter", 2, Some(41)),
    ("Cerebral Cortex", 3, Some(42)),
    ("Lateral Ventricle", 4, Some(43)),
    ("Inferior Lateral Ventricle", 5, Some(44)),
    ("Cerebellum White Matter", 7, Some(46)),
    ("Cerebellum Cortex", 8, Some(47)),
    ("Thalamus", 10, Some(49)),
    ("Caudate", 11, Some(50)),
    ("Putamen", 12, Some(51)),
    ("Pallidum", 13, Some(52)),
    ("3rd Ventricle", 14, None),
    ("4th Ventricle", 15, None),
    ("Brain Stem", 16, None),
    ("Hippocampus", 17, Some(53)),
    ("Amygdala", 18, Some(54)),
    ("Accumbens Area", 26, Some(58)),
    ("Ventral Diencephalon", 28, Some(60)),
    ("Vessel", 30, Some(62)),
    ("Choroid Plexus", 31, None),
];

/// Vascular territories of the arterial atlas as (name, left, right).
pub const ARTERIAL_TERRITORIES: [(&str, i32, i32); 16] = [
    ("Anterior Cerebral Artery", 1, 2),
    ("Medial Lenticulostriate", 3, 4),
    ("Lateral Lenticulostriate", 5, 6),
    ("Frontal Pars of Middle Cerebral Artery", 7, 8),
    ("Parietal Pars of Middle Cerebral Artery", 9, 10),
    ("Temporal Pars of Middle Cerebral Artery", 11, 12),
    ("Occipital Pars of Middle Cerebral Artery", 13, 14),
    ("Insular Pars of Middle Cerebral Artery", 15, 16),
    ("Temporal Pars of Posterior Cerebral Artery", 17, 18),
    ("Occipital Pars of Posterior Cerebral Artery", 19, 20),
    ("Posterior Choroidal and Thalamoperforators", 21, 22),
    ("Anterior Choroidal and Thalamoperforators", 23, 24),
    ("Basilar", 25, 26),
    ("Superior Cerebellar", 27, 28),
    ("Inferior Cerebellar", 29, 30),
    ("Lateral Ventricle", 31, 32),
];

/// Pooled group id for the anterior (carotid) circulation.
pub const ANTERIOR_CIRCULATION: i32 = 1001;
/// Pooled group id for the posterior (vertebrobasilar) circulation.
pub const POSTERIOR_CIRCULATION: i32 = 1002;

/// Pooling map folding right-hemisphere anatomy labels onto the left ids.
pub fn hemisphere_pooling() -> BTreeMap<i32, i32> {
    let mut map = BTreeMap::new();
    for &(_, left, right) in ANATOMY_STRUCTURES.iter() {
        map.insert(left, left);
        if let Some(right) = right {
            map.insert(right, left);
        }
    }
    map
}

/// Display name of a pooled anatomy region id.
pub fn anatomy_name(region: i32) -> Option<&'static str> {
    ANATOMY_STRUCTURES
        .iter()
        .find(|&&(_, left, _)| left == region)
        .map(|&(name, _, _)| name)
}

/// Left/right pairs of the paired anatomy structures.
pub fn anatomy_pairs() -> Vec<(i32, i32)> {
    ANATOMY_STRUCTURES
        .iter()
        .filter_map(|&(_, left, right)| right.map(|r| (left, r)))
        .collect()
}

/// Pooling map folding right-side arterial territories onto the left ids.
pub fn arterial_hemisphere_pooling() -> BTreeMap<i32, i32> {
    let mut map = BTreeMap::new();
    for &(_, left, right) in ARTERIAL_TERRITORIES.iter() {
        map.insert(left, left);
        map.insert(right, left);
    }
    map
}

/// Display name of a pooled arterial territory id.
pub fn arterial_name(territory: i32) -> Option<&'static str> {
    ARTERIAL_TERRITORIES
        .iter()
        .find(|&&(_, left, _)| left == territory)
        .map(|&(name, _, _)| name)
}

/// Pooling map assigning every arterial territory to the anterior or
/// posterior circulation.
pub fn circulation_pooling() -> BTreeMap<i32, i32> {
    let posterior = [
        "Temporal Pars of Posterior Cerebral Artery",
        "Occipital Pars of Posterior Cerebral Artery",
        "Posterior Choroidal and Thalamoperforators",
        "Basilar",
        "Superior Cerebellar",
        "Inferior Cerebellar",
        "Lateral Ventricle",
    ];
    let mut map = BTreeMap::new();
    for &(name, left, right) in ARTERIAL_TERRITORIES.iter() {
        let group = if posterior.contains(&name) {
            POSTERIOR_CIRCULATION
        } else {
            ANTERIOR_CIRCULATION
        };
        map.insert(left, group);
        map.insert(right, group);
    }
    map
}
