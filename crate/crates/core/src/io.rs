//! Case manifests, plain-text affine matrices and small serialisation
//! helpers shared by the pipeline stages.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::volumes::AffineTransform;

/// One row of a case manifest. Paths are stored as given; relative paths
/// are resolved against the manifest's directory on read.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseEntry {
    pub case_id: String,
    /// Intensity image (NIfTI).
    pub image: PathBuf,
    /// Anatomical label map (NIfTI).
    pub labels: PathBuf,
    /// Tumour segmentation (NIfTI).
    pub tumour: PathBuf,
    /// Subject-to-atlas affine as 4x4 plain text; absent until pre-alignment.
    pub affine: Option<PathBuf>,
}

const MANIFEST_HEADER: [&str; 5] = ["case_id", "image", "labels", "tumour", "affine"];

fn resolve(base: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        base.join(pb)
    }
}

/// Read a delimited case manifest (header: `case_id,image,labels,tumour,affine`).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<CaseEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Manifest {
            path: path.into(),
            reason: e.to_string(),
        })?;

    let headers = rdr
        .headers()
        .map_err(|e| Error::Manifest {
            path: path.into(),
            reason: e.to_string(),
        })?
        .clone();
    let have: Vec<&str> = headers.iter().collect();
    if have != MANIFEST_HEADER {
        return Err(Error::Manifest {
            path: path.into(),
            reason: format!("expected header {MANIFEST_HEADER:?}, got {have:?}"),
        });
    }

    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Manifest {
            path: path.into(),
            reason: format!("row {}: {e}", line + 2),
        })?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let case_id = field(0);
        if case_id.is_empty() {
            return Err(Error::Manifest {
                path: path.into(),
                reason: format!("row {}: empty case_id", line + 2),
            });
        }
        for i in 1..4 {
            if field(i).is_empty() {
                return Err(Error::Manifest {
                    path: path.into(),
                    reason: format!("row {}: empty {} path", line + 2, MANIFEST_HEADER[i]),
                });
            }
        }
        let affine = field(4);
        out.push(CaseEntry {
            case_id,
            image: resolve(&base, &field(1)),
            labels: resolve(&base, &field(2)),
            tumour: resolve(&base, &field(3)),
            affine: if affine.is_empty() {
                None
            } else {
                Some(resolve(&base, &affine))
            },
        });
    }
    Ok(out)
}

/// Write a case manifest; paths are written exactly as stored.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[CaseEntry]) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Manifest {
        path: path.into(),
        reason: e.to_string(),
    })?;
    wtr.write_record(MANIFEST_HEADER).map_err(|e| Error::Manifest {
        path: path.into(),
        reason: e.to_string(),
    })?;
    for e in entries {
        let affine = e.affine.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        wtr.write_record([
            e.case_id.as_str(),
            &e.image.display().to_string(),
            &e.labels.display().to_string(),
            &e.tumour.display().to_string(),
            &affine,
        ])
        .map_err(|err| Error::Manifest {
            path: path.into(),
            reason: err.to_string(),
        })?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a 4x4 row-major affine from plain text (one row per line,
/// whitespace-separated).
pub fn read_affine(path: impl AsRef<Path>) -> Result<AffineTransform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| {
                Error::InvalidArgument(format!("{}: bad number {t:?}", path.display()))
            })
        })
        .collect::<Result<_>>()?;
    if values.len() != 16 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected 16 numbers, found {}",
            path.display(),
            values.len()
        )));
    }
    let m = Matrix4::from_row_slice(&values);
    AffineTransform::from_matrix(m)
}

/// Write a 4x4 affine as row-major plain text. Numbers use the shortest
/// representation that parses back to the same `f64`.
pub fn write_affine(path: impl AsRef<Path>, t: &AffineTransform) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut text = String::new();
    for r in 0..4 {
        for c in 0..4 {
            if c > 0 {
                text.push(' ');
            }
            text.push_str(&format!("{}", t.matrix[(r, c)]));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Append one record to a JSON-lines file, creating it as needed.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, record: &T) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)
        .map_err(|e| Error::Config(format!("serialising log record: {e}")))?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Write pretty JSON to `path`.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialising JSON: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}
