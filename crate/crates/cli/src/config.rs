//! Declarative pipeline configuration. One TOML file drives every
//! subcommand; its canonical hash is recorded beside each produced artifact
//! so outputs can always be traced to the exact settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use atlasreg_core::cohort::{ChiSquareOptions, JitterOptions, JunctionOptions};
use atlasreg_core::losses::LossWeights;
use atlasreg_core::network::NetConfig;
use atlasreg_core::phantom::PhantomSpec;
use atlasreg_core::training::TrainConfig;
use atlasreg_core::volumes::SamplingGrid;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Atlas intensity image (NIfTI).
    pub atlas_image: PathBuf,
    /// Atlas anatomical label map (NIfTI).
    pub atlas_labels: PathBuf,
    /// Vascular territory labels on the atlas grid; needed by
    /// `cohort-analyze`.
    #[serde(default)]
    pub arterial_labels: Option<PathBuf>,
    /// Perfusion map on the atlas grid; needed by `cohort-analyze`.
    #[serde(default)]
    pub perfusion: Option<PathBuf>,
    /// Case manifest (`case_id,image,labels,tumour,affine`).
    pub manifest: PathBuf,
    /// Root directory for everything the pipeline writes.
    pub output_root: PathBuf,
    /// Directory holding candidate affine files named `<case_id>*.txt`;
    /// `prealign` keeps the candidate with the best mean label overlap.
    #[serde(default)]
    pub affine_candidates: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub n_labels: usize,
    pub deform_amplitude: f64,
    pub deform_smoothness: f64,
    pub tumour_radius: Option<f64>,
    pub n_cases: usize,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            shape: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            n_labels: 3,
            deform_amplitude: 2.5,
            deform_smoothness: 6.0,
            tumour_radius: Some(3.0),
            n_cases: 6,
        }
    }
}

impl PhantomSection {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid: SamplingGrid::axial(self.shape, self.spacing),
            n_labels: self.n_labels,
            deform_amplitude: self.deform_amplitude,
            deform_smoothness: self.deform_smoothness,
            tumour_radius: self.tumour_radius,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs_general: usize,
    pub epochs_overfit: usize,
    pub batch_size: usize,
    pub lr_general: f64,
    pub lr_overfit: f64,
    /// Fixed scaling-and-squaring step count; omit to derive it from the
    /// velocity magnitude.
    pub steps: Option<usize>,
    pub widths: [usize; 3],
    pub kernel: usize,
    pub grid_factor: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub gamma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        TrainSection {
            epochs_general: t.epochs_general,
            epochs_overfit: t.epochs_overfit,
            batch_size: t.batch_size,
            lr_general: t.lr_general,
            lr_overfit: t.lr_overfit,
            steps: t.steps,
            widths: t.net.widths,
            kernel: t.net.kernel,
            grid_factor: t.net.grid_factor,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            gamma: w.gamma,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs_general: self.epochs_general,
            epochs_overfit: self.epochs_overfit,
            batch_size: self.batch_size,
            lr_general: self.lr_general,
            lr_overfit: self.lr_overfit,
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda3: self.lambda3,
                lambda4: self.lambda4,
                gamma: self.gamma,
            },
            seed,
            steps: self.steps,
            net: NetConfig {
                widths: self.widths,
                kernel: self.kernel,
                grid_factor: self.grid_factor,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Family-wise significance level of the frequency screen.
    pub alpha: f64,
    /// Minimum expected count for a region to enter the screen.
    pub min_expected: f64,
    pub jitter_replicates: usize,
    pub jitter_shift_mean: f64,
    pub jitter_shift_sd: f64,
    /// Random barycentre sets backing the junction null distribution.
    pub random_sets: usize,
    /// Label sets whose shared surface forms the junction of interest.
    pub junction_a: Vec<i32>,
    pub junction_b: Vec<i32>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let chi = ChiSquareOptions::default();
        let jit = JitterOptions::default();
        let jun = JunctionOptions::default();
        AnalysisSection {
            alpha: chi.alpha,
            min_expected: chi.min_expected,
            jitter_replicates: jit.replicates,
            jitter_shift_mean: jit.shift_mean,
            jitter_shift_sd: jit.shift_sd,
            random_sets: jun.random_sets,
            junction_a: vec![2],
            junction_b: vec![3],
        }
    }
}

impl AnalysisSection {
    pub fn chi_square(&self) -> ChiSquareOptions {
        ChiSquareOptions {
            alpha: self.alpha,
            min_expected: self.min_expected,
        }
    }

    pub fn jitter(&self, seed: u64) -> JitterOptions {
        JitterOptions {
            replicates: self.jitter_replicates,
            shift_mean: self.jitter_shift_mean,
            shift_sd: self.jitter_shift_sd,
            seed,
        }
    }

    pub fn junction(&self, seed: u64) -> JunctionOptions {
        JunctionOptions {
            random_sets: self.random_sets,
            seed,
        }
    }
}

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

impl PipelineConfig {
    /// Parse a config file; relative paths are kept as written and resolved
    /// against the file's directory via [`PipelineConfig::resolve`].
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<(Self, String)> {
        if !path.exists() {
            return Err(CliError::missing(path, "pipeline configuration file"));
        }
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.resolve(&base);
        let hash = cfg.hash()?;
        Ok((cfg, hash))
    }

    /// Resolve every relative path against `base`.
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.atlas_image);
        fix(&mut self.paths.atlas_labels);
        fix(&mut self.paths.manifest);
        fix(&mut self.paths.output_root);
        if let Some(p) = self.paths.arterial_labels.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.perfusion.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.affine_candidates.as_mut() {
            fix(p);
        }
    }

    /// Content hash of the effective settings, independent of the config
    /// file's location: paths are hashed relative to the output root where
    /// possible so a relocated tree keeps its hash.
    pub fn hash(&self) -> Result<String> {
        let mut canon = self.clone();
        let root = canon.paths.output_root.clone();
        let strip = |p: &mut PathBuf| {
            if let Ok(rel) = p.strip_prefix(root.parent().unwrap_or(&root)) {
                *p = rel.to_path_buf();
            }
        };
        strip(&mut canon.paths.atlas_image);
        strip(&mut canon.paths.atlas_labels);
        strip(&mut canon.paths.manifest);
        strip(&mut canon.paths.output_root);
        if let Some(p) = canon.paths.arterial_labels.as_mut() {
            strip(p);
        }
        if let Some(p) = canon.paths.perfusion.as_mut() {
            strip(p);
        }
        if let Some(p) = canon.paths.affine_candidates.as_mut() {
            strip(p);
        }
        let json = serde_json::to_string(&canon)
            .map_err(|e| CliError::Config(format!("config not serializable: {e}")))?;
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        Ok(format!("{:x}", h.finalize())[..16].to_string())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.train.to_core(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        "[paths]\n\
         atlas_image = \"phantom/atlas_image.nii.gz\"\n\
         atlas_labels = \"phantom/atlas_anat.nii.gz\"\n\
         manifest = \"phantom/manifest.csv\"\n\
         output_root = \"out\"\n"
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        fs::write(&path, minimal_toml()).unwrap();
        let (cfg, hash) = PipelineConfig::load(&path, None).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.analysis.alpha, 0.01);
        assert!(cfg.paths.atlas_image.is_absolute());
        assert_eq!(hash.len(), 16);
    }

    #[test]
    fn hash_is_stable_across_tree_location() {
        let mk = |dir: &Path| {
            let path = dir.join("pipeline.toml");
            fs::write(&path, minimal_toml()).unwrap();
            PipelineConfig::load(&path, None).unwrap().1
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(mk(a.path()), mk(b.path()));
    }

    #[test]
    fn seed_override_changes_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        fs::write(&path, minimal_toml()).unwrap();
        let (_, h0) = PipelineConfig::load(&path, None).unwrap();
        let (cfg, h1) = PipelineConfig::load(&path, Some(7)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_ne!(h0, h1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        fs::write(&path, format!("{}\ntypo_section = 1\n", minimal_toml())).unwrap();
        let err = PipelineConfig::load(&path, None).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{err}");
    }

    #[test]
    fn missing_config_reports_exact_path() {
        let err = PipelineConfig::load(Path::new("/nowhere/pipeline.toml"), None).unwrap_err();
        let json = err.to_json();
        assert_eq!(json["error"]["kind"], "missing_input");
        assert_eq!(json["error"]["path"], "/nowhere/pipeline.toml");
    }
}
