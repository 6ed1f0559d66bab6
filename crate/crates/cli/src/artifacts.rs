//! Artifact plumbing: the output-tree layout, atomic writes (temp file plus
//! rename, never a partially written artifact) and provenance sidecars
//! recording the producing subcommand, config hash and code version.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stamped next to every artifact as `<artifact>.meta.json`.
#[derive(Serialize)]
struct Meta<'a> {
    subcommand: &'a str,
    config_hash: &'a str,
    version: &'a str,
}

#[derive(Debug, Clone)]
pub struct Provenance {
    pub subcommand: &'static str,
    pub config_hash: String,
}

fn tmp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".tmp-{name}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    Ok(())
}

fn rename(from: &Path, to: &Path) -> Result<()> {
    fs::rename(from, to).map_err(CliError::io(to))
}

/// Write bytes atomically: a temp file in the target directory is renamed
/// over the final name only once fully written.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    rename(&tmp, path)
}

fn meta_path(artifact: &Path) -> PathBuf {
    PathBuf::from(format!("{}.meta.json", artifact.display()))
}

fn write_meta(prov: &Provenance, artifact: &Path) -> Result<()> {
    let meta = Meta {
        subcommand: prov.subcommand,
        config_hash: &prov.config_hash,
        version: VERSION,
    };
    let mut text = serde_json::to_string_pretty(&meta)
        .expect("provenance metadata is always serializable");
    text.push('\n');
    write_atomic(&meta_path(artifact), text.as_bytes())
}

/// Atomically write a provenance-stamped artifact from in-memory bytes.
pub fn write_artifact(prov: &Provenance, path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)?;
    write_meta(prov, path)
}

/// Atomically produce an artifact through a writer callback (NIfTI volumes,
/// checkpoints). The callback writes to a temp path in the final directory;
/// the temp file, and any `<temp>.meta` sidecar the writer itself emitted,
/// are renamed into place afterwards.
pub fn persist_with(
    prov: &Provenance,
    path: &Path,
    write: impl FnOnce(&Path) -> atlasreg_core::Result<()>,
) -> Result<()> {
    ensure_parent(path)?;
    let tmp = tmp_path(path);
    write(&tmp)?;
    rename(&tmp, path)?;
    let tmp_sidecar = PathBuf::from(format!("{}.meta", tmp.display()));
    if tmp_sidecar.exists() {
        rename(&tmp_sidecar, &PathBuf::from(format!("{}.meta", path.display())))?;
    }
    write_meta(prov, path)
}

/// Fail with the exact expected path unless it exists.
pub fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path, hint))
    }
}

/// Canonical locations of everything the pipeline persists, all under one
/// output root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn affine(&self, case_id: &str) -> PathBuf {
        self.root.join("affines").join(format!("{case_id}.txt"))
    }

    pub fn affine_selection(&self, case_id: &str) -> PathBuf {
        self.root.join("affines").join(format!("{case_id}.selection.json"))
    }

    pub fn general_model(&self) -> PathBuf {
        self.root.join("models").join("general.ckpt.gz")
    }

    pub fn general_log(&self) -> PathBuf {
        self.root.join("logs").join("general.jsonl")
    }

    pub fn overfit_model(&self, case_id: &str) -> PathBuf {
        self.root.join("models").join("overfit").join(format!("{case_id}.ckpt.gz"))
    }

    pub fn overfit_log(&self, case_id: &str) -> PathBuf {
        self.root.join("logs").join("overfit").join(format!("{case_id}.jsonl"))
    }

    pub fn transform_fwd(&self, case_id: &str) -> PathBuf {
        self.root.join("transforms").join(format!("{case_id}.fwd.nii.gz"))
    }

    pub fn transform_inv(&self, case_id: &str) -> PathBuf {
        self.root.join("transforms").join(format!("{case_id}.inv.nii.gz"))
    }

    pub fn warped_labels(&self, stage: &str, case_id: &str) -> PathBuf {
        self.root.join("warped").join(stage).join(format!("{case_id}.labels.nii.gz"))
    }

    pub fn warped_image(&self, stage: &str, case_id: &str) -> PathBuf {
        self.root.join("warped").join(stage).join(format!("{case_id}.image.nii.gz"))
    }

    pub fn case_metrics(&self, stage: &str, case_id: &str) -> PathBuf {
        self.root.join("metrics").join(stage).join(format!("{case_id}.json"))
    }

    pub fn metrics_stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join("metrics").join(stage)
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("cohort").join("records.csv")
    }

    pub fn frequency_json(&self) -> PathBuf {
        self.root.join("cohort").join("frequency.json")
    }

    pub fn junction_json(&self) -> PathBuf {
        self.root.join("cohort").join("junction.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}
