//! Case loading shared by the per-case subcommands, plus the bounded
//! worker pool they use for per-case parallelism.

use std::path::Path;
use std::sync::Mutex;

use atlasreg_core::io::{read_affine, read_manifest, CaseEntry};
use atlasreg_core::metrics::Mask;
use atlasreg_core::nifti;
use atlasreg_core::training::TrainingCase;
use atlasreg_core::volumes::{AffineTransform, ImageVolume, LabelMap};

use crate::artifacts::{require, Workspace};
use crate::error::{CliError, Result};

/// Manifest rows, optionally narrowed to a single case id.
pub fn entries(manifest: &Path, case_id: Option<&str>) -> Result<Vec<CaseEntry>> {
    require(manifest, "case manifest (phantom-gen writes one)")?;
    let mut rows = read_manifest(manifest)?;
    if let Some(id) = case_id {
        rows.retain(|e| e.case_id == id);
        if rows.is_empty() {
            return Err(CliError::Config(format!("case {id} is not in the manifest")));
        }
    }
    Ok(rows)
}

/// The affine a case is registered with: the stored pre-alignment output
/// when present, otherwise the matrix referenced by the manifest.
pub fn case_affine(ws: &Workspace, entry: &CaseEntry) -> Result<AffineTransform> {
    let stored = ws.affine(&entry.case_id);
    if stored.exists() {
        return Ok(read_affine(&stored)?);
    }
    if let Some(p) = &entry.affine {
        if p.exists() {
            return Ok(read_affine(p)?);
        }
    }
    Err(CliError::missing(stored, "pre-alignment affine (run prealign)"))
}

pub struct LoadedCase {
    pub entry: CaseEntry,
    pub image: ImageVolume,
    pub labels: LabelMap,
    pub tumour: Mask,
    pub affine: AffineTransform,
}

pub fn load_case(ws: &Workspace, entry: &CaseEntry) -> Result<LoadedCase> {
    require(&entry.image, "case image from the manifest")?;
    require(&entry.labels, "case label map from the manifest")?;
    require(&entry.tumour, "case tumour segmentation from the manifest")?;
    let image = nifti::read_image(&entry.image)?;
    let labels = nifti::read_labels(&entry.labels)?;
    let tumour_labels = nifti::read_labels(&entry.tumour)?;
    let tumour = Mask::new(tumour_labels.grid.clone(), tumour_labels.data.mapv(|l| l != 0))?;
    let affine = case_affine(ws, entry)?;
    Ok(LoadedCase {
        entry: entry.clone(),
        image,
        labels,
        tumour,
        affine,
    })
}

impl LoadedCase {
    pub fn training(&self) -> TrainingCase {
        TrainingCase {
            id: self.entry.case_id.clone(),
            image: self.image.clone(),
            labels: self.labels.clone(),
            affine: self.affine.clone(),
        }
    }
}

/// Run independent per-case jobs on up to `workers` threads. All jobs are
/// attempted; the first error in input order is returned.
pub fn for_each_case<T, F>(items: Vec<T>, workers: usize, f: F) -> Result<()>
where
    T: Send,
    F: Fn(T) -> Result<()> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        for item in items {
            f(item)?;
        }
        return Ok(());
    }
    let queue = Mutex::new(items.into_iter().enumerate());
    let failures: Mutex<Vec<(usize, CliError)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                match next {
                    Some((i, item)) => {
                        if let Err(e) = f(item) {
                            failures.lock().expect("failure lock").push((i, e));
                        }
                    }
                    None => break,
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure lock");
    failures.sort_by_key(|(i, _)| *i);
    match failures.into_iter().next() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}
