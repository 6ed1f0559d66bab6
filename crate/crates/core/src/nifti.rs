//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Covers the subset this pipeline needs: 3-D little-endian volumes with an
//! orthogonal voxel-to-world mapping. Images are read through `scl_slope` /
//! `scl_inter` into `f64`; label maps require an integer datatype and no
//! scaling. Written files use the sform only, with `f64` image data and
//! `i32` labels so round trips are exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Vector3};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volumes::{DisplacementField, ImageVolume, LabelMap, SamplingGrid};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

fn i16_at(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn i32_at(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn f32_at(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_raw(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn write_raw(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    if is_gz(path) {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

struct Parsed {
    grid: SamplingGrid,
    /// Fourth-dimension extent: 1 for scalar volumes, 3 for vector fields.
    nt: usize,
    datatype: i16,
    scl_slope: f32,
    scl_inter: f32,
    data: Vec<u8>,
}

fn nearest_orthonormal(m: Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    Some(svd.u? * svd.v_t?)
}

fn parse(path: &Path, raw: &[u8]) -> Result<Parsed> {
    if raw.len() < DATA_OFFSET {
        return Err(Error::nifti(path, "file shorter than NIfTI-1 header"));
    }
    let sizeof_hdr = i32_at(raw, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_LEN as i32 {
            return Err(Error::nifti(path, "big-endian NIfTI is not supported"));
        }
        return Err(Error::nifti(path, "not a NIfTI-1 file (bad sizeof_hdr)"));
    }
    let magic = &raw[344..348];
    if magic != b"n+1\0" {
        if magic == b"ni1\0" {
            return Err(Error::nifti(path, "detached .hdr/.img pairs are not supported"));
        }
        return Err(Error::nifti(path, "bad magic"));
    }

    let ndim = i16_at(raw, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::nifti(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (a, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = i16_at(raw, 42 + 2 * a);
        if v < 1 {
            return Err(Error::nifti(path, format!("invalid dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    let nt = dims[3];
    if !(nt == 1 || nt == 3) || dims[4..].iter().product::<usize>() != 1 {
        return Err(Error::nifti(
            path,
            "only 3-D volumes and 3-component 4-D fields are supported",
        ));
    }
    let shape = [dims[0], dims[1], dims[2]];

    let datatype = i16_at(raw, 70);
    let pixdim: Vec<f64> = (0..4).map(|a| f32_at(raw, 76 + 4 * a) as f64).collect();
    let vox_offset = f32_at(raw, 108) as usize;
    if vox_offset < HEADER_LEN {
        return Err(Error::nifti(path, "vox_offset points into the header"));
    }
    let scl_slope = f32_at(raw, 112);
    let scl_inter = f32_at(raw, 116);
    let qform_code = i16_at(raw, 252);
    let sform_code = i16_at(raw, 254);

    let grid = if sform_code > 0 {
        let row = |off: usize| -> [f64; 4] {
            [
                f32_at(raw, off) as f64,
                f32_at(raw, off + 4) as f64,
                f32_at(raw, off + 8) as f64,
                f32_at(raw, off + 12) as f64,
            ]
        };
        let rx = row(280);
        let ry = row(296);
        let rz = row(312);
        let m = Matrix3::new(rx[0], rx[1], rx[2], ry[0], ry[1], ry[2], rz[0], rz[1], rz[2]);
        let origin = Vector3::new(rx[3], ry[3], rz[3]);
        grid_from_matrix(path, shape, m, origin)?
    } else if qform_code > 0 {
        let b = f32_at(raw, 256) as f64;
        let c = f32_at(raw, 260) as f64;
        let d = f32_at(raw, 264) as f64;
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let mut rot = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - b * b - c * c,
        );
        for r in 0..3 {
            rot[(r, 0)] *= pixdim[1];
            rot[(r, 1)] *= pixdim[2];
            rot[(r, 2)] *= pixdim[3] * qfac;
        }
        let origin = Vector3::new(
            f32_at(raw, 268) as f64,
            f32_at(raw, 272) as f64,
            f32_at(raw, 276) as f64,
        );
        grid_from_matrix(path, shape, rot, origin)?
    } else {
        // No orientation stored: axis-aligned with pixdim spacing.
        let spacing = [
            pixdim[1].abs().max(f64::MIN_POSITIVE),
            pixdim[2].abs().max(f64::MIN_POSITIVE),
            pixdim[3].abs().max(f64::MIN_POSITIVE),
        ];
        SamplingGrid::axial(shape, spacing)
    };

    let bytes_per = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::nifti(path, format!("unsupported datatype {other}")));
        }
    };
    let n = shape[0] * shape[1] * shape[2] * nt;
    let need = vox_offset + n * bytes_per;
    if raw.len() < need {
        return Err(Error::nifti(
            path,
            format!("truncated data section: need {need} bytes, have {}", raw.len()),
        ));
    }

    Ok(Parsed {
        grid,
        nt,
        datatype,
        scl_slope,
        scl_inter,
        data: raw[vox_offset..need].to_vec(),
    })
}

fn grid_from_matrix(
    path: &Path,
    shape: [usize; 3],
    m: Matrix3<f64>,
    origin: Vector3<f64>,
) -> Result<SamplingGrid> {
    let mut spacing = [0.0; 3];
    let mut dir = Matrix3::zeros();
    for c in 0..3 {
        let col = m.column(c);
        let norm = col.norm();
        if norm < 1e-9 {
            return Err(Error::nifti(path, "degenerate voxel-to-world matrix"));
        }
        spacing[c] = norm;
        for r in 0..3 {
            dir[(r, c)] = col[r] / norm;
        }
    }
    // Stored as f32, so project onto the nearest orthonormal matrix before
    // the strict validation; reject anything genuinely sheared.
    let ortho = nearest_orthonormal(dir)
        .ok_or_else(|| Error::nifti(path, "could not orthonormalise direction matrix"))?;
    if (ortho - dir).abs().max() > 1e-3 {
        return Err(Error::nifti(path, "non-orthogonal voxel axes are not supported"));
    }
    let grid = SamplingGrid {
        shape,
        spacing,
        direction: ortho,
        origin,
    };
    grid.validate()?;
    Ok(grid)
}

fn decode_values(p: &Parsed) -> Vec<f64> {
    let b = &p.data;
    match p.datatype {
        DT_UINT8 => b.iter().map(|&v| v as f64).collect(),
        DT_INT8 => b.iter().map(|&v| v as i8 as f64).collect(),
        DT_INT16 => b
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_UINT16 => b
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_INT32 => b
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DT_FLOAT32 => b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DT_FLOAT64 => b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
        _ => unreachable!("datatype vetted in parse"),
    }
}

/// Values arrive in file order (first index fastest); rearrange into the
/// row-major `Array3` used everywhere else.
fn to_array(shape: [usize; 3], values: &[f64]) -> Array3<f64> {
    let [nx, ny, nz] = shape;
    let mut arr = Array3::zeros((nx, ny, nz));
    let mut it = values.iter();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                arr[(i, j, k)] = *it.next().expect("length checked in parse");
            }
        }
    }
    arr
}

fn require_scalar(path: &Path, p: &Parsed) -> Result<()> {
    if p.nt != 1 {
        return Err(Error::nifti(path, "expected a scalar volume, found a vector field"));
    }
    Ok(())
}

/// Read a scalar image, applying any intensity scaling in the header.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageVolume> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let p = parse(path, &raw)?;
    require_scalar(path, &p)?;
    let mut values = decode_values(&p);
    let slope = p.scl_slope as f64;
    let inter = p.scl_inter as f64;
    if p.scl_slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut values {
            *v = slope * *v + inter;
        }
    }
    ImageVolume::new(p.grid.clone(), to_array(p.grid.shape, &values))
}

/// Read a label map; requires an integer datatype and no intensity scaling.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let p = parse(path, &raw)?;
    require_scalar(path, &p)?;
    match p.datatype {
        DT_UINT8 | DT_INT8 | DT_INT16 | DT_UINT16 | DT_INT32 => {}
        other => {
            return Err(Error::InvalidLabels(format!(
                "{}: label maps need an integer datatype, got {other}",
                path.display()
            )));
        }
    }
    if p.scl_slope != 0.0 && (p.scl_slope != 1.0 || p.scl_inter != 0.0) {
        return Err(Error::InvalidLabels(format!(
            "{}: scaled label intensities",
            path.display()
        )));
    }
    let values = decode_values(&p);
    let data = to_array(p.grid.shape, &values).mapv(|v| v as i32);
    LabelMap::new(p.grid, data)
}

fn encode_header(grid: &SamplingGrid, datatype: i16, bitpix: i16, nt: usize) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    h[38] = b'r';
    let ndim: i16 = if nt > 1 { 4 } else { 3 };
    h[40..42].copy_from_slice(&ndim.to_le_bytes());
    for a in 0..3 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&(grid.shape[a] as i16).to_le_bytes());
    }
    h[48..50].copy_from_slice(&(nt as i16).to_le_bytes());
    for a in 4..7 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    for a in 0..3 {
        h[80 + 4 * a..84 + 4 * a].copy_from_slice(&(grid.spacing[a] as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[123] = 2; // spatial units: mm
    h[254..256].copy_from_slice(&1i16.to_le_bytes()); // sform: scanner aligned
    for r in 0..3 {
        let base = 280 + 16 * r;
        for c in 0..3 {
            let v = (grid.direction[(r, c)] * grid.spacing[c]) as f32;
            h[base + 4 * c..base + 4 * c + 4].copy_from_slice(&v.to_le_bytes());
        }
        h[base + 12..base + 16].copy_from_slice(&(grid.origin[r] as f32).to_le_bytes());
    }
    h[344..348].copy_from_slice(b"n+1\0");
    // Bytes 348..352 are the (absent) extension flag; leave zeroed.
    h
}

/// Write a scalar image as float64.
pub fn write_image(path: impl AsRef<Path>, img: &ImageVolume) -> Result<()> {
    let path = path.as_ref();
    let [nx, ny, nz] = img.grid.shape;
    let mut out = encode_header(&img.grid, DT_FLOAT64, 64, 1);
    out.reserve(nx * ny * nz * 8);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.extend_from_slice(&img.data[(i, j, k)].to_le_bytes());
            }
        }
    }
    write_raw(path, &out)
}

/// Write a label map as int32.
pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let [nx, ny, nz] = labels.grid.shape;
    let mut out = encode_header(&labels.grid, DT_INT32, 32, 1);
    out.reserve(nx * ny * nz * 4);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.extend_from_slice(&labels.data[(i, j, k)].to_le_bytes());
            }
        }
    }
    write_raw(path, &out)
}

/// Write a displacement (or velocity) field as a 3-component 4-D float64
/// volume, with a sidecar documenting the world-mm component convention.
pub fn write_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    let path = path.as_ref();
    let [nx, ny, nz] = field.grid.shape;
    let mut out = encode_header(&field.grid, DT_FLOAT64, 64, 3);
    out.reserve(nx * ny * nz * 3 * 8);
    for c in 0..3 {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.extend_from_slice(&field.data[(i, j, k, c)].to_le_bytes());
                }
            }
        }
    }
    write_raw(path, &out)?;
    let mut meta = path.as_os_str().to_os_string();
    meta.push(".meta");
    fs::write(&meta, "units mm\ncomponents dx dy dz (world axes)\n")
        .map_err(|e| Error::io(path, e))
}

/// Read a 3-component vector field written by [`write_field`].
pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let p = parse(path, &raw)?;
    if p.nt != 3 {
        return Err(Error::nifti(path, "expected a 3-component vector field"));
    }
    let values = decode_values(&p);
    let [nx, ny, nz] = p.grid.shape;
    let n = nx * ny * nz;
    let mut data = ndarray::Array4::zeros((nx, ny, nz, 3));
    for c in 0..3 {
        let comp = to_array(p.grid.shape, &values[c * n..(c + 1) * n]);
        data.index_axis_mut(ndarray::Axis(3), c).assign(&comp);
    }
    DisplacementField::new(p.grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;

    fn sample_grid() -> SamplingGrid {
        // Flipped x/y axes with anisotropic spacing and an offset origin,
        // the shape of header real scanners produce.
        SamplingGrid {
            shape: [5, 4, 3],
            spacing: [0.5, 0.75, 2.0],
            direction: Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0),
            origin: Vector3::new(12.5, -3.25, 7.0),
        }
    }

    fn sample_image() -> ImageVolume {
        let g = sample_grid();
        let data = Array3::from_shape_fn((5, 4, 3), |(i, j, k)| {
            (i as f64 * 1.5 - j as f64 * 0.25 + k as f64 * 3.0).sin()
        });
        ImageVolume::new(g, data).unwrap()
    }

    #[test]
    fn image_round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_image();
        for name in ["vol.nii", "vol.nii.gz"] {
            let path = dir.path().join(name);
            write_image(&path, &img).unwrap();
            let back = read_image(&path).unwrap();
            assert_eq!(back.grid.shape, img.grid.shape);
            // Header floats are f32, so the grid round-trips to f32 accuracy.
            for a in 0..3 {
                assert_abs_diff_eq!(back.grid.spacing[a], img.grid.spacing[a], epsilon = 1e-5);
                assert_abs_diff_eq!(back.grid.origin[a], img.grid.origin[a], epsilon = 1e-4);
            }
            assert_abs_diff_eq!(
                (back.grid.direction - img.grid.direction).abs().max(),
                0.0,
                epsilon = 1e-6
            );
            // Voxel data is stored as f64 and must round-trip exactly.
            assert!(back.data.iter().zip(img.data.iter()).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut lm = LabelMap::zeros(SamplingGrid::axial([4, 4, 4], [1.0, 1.0, 2.5]));
        lm.data[(1, 2, 3)] = 42;
        lm.data[(0, 0, 0)] = 7;
        let path = dir.path().join("seg.nii.gz");
        write_labels(&path, &lm).unwrap();
        let back = read_labels(&path).unwrap();
        assert_eq!(back.data, lm.data);
    }

    #[test]
    fn scl_slope_applied_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scaled.nii");
        let img = sample_image();
        write_image(&path, &img).unwrap();
        // Patch scl_slope = 2.0, scl_inter = -1.0 in place.
        let mut bytes = fs::read(&path).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let back = read_image(&path).unwrap();
        let expect = img.data.mapv(|v| 2.0 * v - 1.0);
        assert!(back
            .data
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        // Labels must refuse scaled intensities.
        assert!(matches!(read_labels(&path), Err(Error::InvalidLabels(_))));
    }

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = SamplingGrid::axial([4, 3, 5], [1.0, 1.0, 2.0]);
        let mut f = crate::volumes::DisplacementField::zeros(g);
        for ((i, j, k, c), v) in f.data.indexed_iter_mut() {
            *v = (i * 100 + j * 10 + k) as f64 * 0.25 - c as f64;
        }
        let path = dir.path().join("field.nii.gz");
        write_field(&path, &f).unwrap();
        let back = read_field(&path).unwrap();
        assert_eq!(back.grid.shape, f.grid.shape);
        assert!(back.data.iter().zip(f.data.iter()).all(|(a, b)| a == b));
        assert!(fs::read_to_string(dir.path().join("field.nii.gz.meta"))
            .unwrap()
            .contains("mm"));
        // Scalar readers must refuse the 4-D file.
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn rejects_garbage_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nii");
        fs::write(&path, vec![0u8; 400]).unwrap();
        assert!(read_image(&path).is_err());

        let img = sample_image();
        let good = dir.path().join("good.nii");
        write_image(&good, &img).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes[344..348].copy_from_slice(b"xxx\0");
        fs::write(&path, &bytes).unwrap();
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn rejects_sheared_sform() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_image();
        let path = dir.path().join("shear.nii");
        write_image(&path, &img).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // srow_x[1] += 0.4: a visible shear between the x and y axes.
        bytes[284..288].copy_from_slice(&0.4f32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn reads_qform_when_no_sform() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_image();
        let path = dir.path().join("qform.nii");
        write_image(&path, &img).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Disable sform, enable identity qform with an offset.
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        bytes[252..254].copy_from_slice(&1i16.to_le_bytes());
        for (a, v) in [4.0f32, -2.0, 9.0].iter().enumerate() {
            bytes[268 + 4 * a..272 + 4 * a].copy_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let back = read_image(&path).unwrap();
        assert_abs_diff_eq!(
            (back.grid.direction - Matrix3::identity()).abs().max(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(back.grid.origin[0], 4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(back.grid.spacing[1], 0.75, epsilon = 1e-6);
    }
}
