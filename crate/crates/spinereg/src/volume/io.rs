//! Reading and writing label volumes.
//!
//! Two formats are supported:
//!
//! * an uncompressed NIfTI-1 subset (`.nii`): 348-byte little-endian header,
//!   magic `n+1`, integer datatypes uint8 / int16 / uint16, no extensions,
//!   voxel data at `vox_offset`;
//! * a plain-text sidecar header (any other extension) whose `raw_path` line
//!   names a little-endian raw voxel file, used where full f64 geometry
//!   precision matters.
//!
//! The NIfTI affine is stored in f32 by the format, so geometry round-trips
//! to f32 precision (relative ~6e-8); the sidecar format round-trips exactly.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

use super::{LabelVolume, VolumeGeometry};

const NIFTI_HEADER_LEN: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_UINT16: i16 = 512;

/// Load a label volume. `.nii` files are parsed as the NIfTI-1 subset, any
/// other extension as a sidecar header.
pub fn read_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "nii") {
        read_nifti(path)
    } else {
        read_sidecar(path)
    }
}

/// Write a label volume in the format implied by the extension (see
/// [`read_volume`]). Sidecar output also writes `<stem>.raw` next to the
/// header file.
pub fn write_volume(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "nii") {
        write_nifti(vol, path)
    } else {
        write_sidecar(vol, path)
    }
}

fn read_u16_le(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn read_i16_le(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn read_i32_le(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_f32_le(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn write_i16_le(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn write_i32_le(b: &mut [u8], off: usize, v: i32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn write_f32_le(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn read_nifti(path: &Path) -> Result<LabelVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    if read_i32_le(&bytes, 0) != 348 {
        return Err(Error::format(
            path,
            "sizeof_hdr is not 348 (not a little-endian NIfTI-1 file)",
        ));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "magic is not \"n+1\""));
    }

    let ndim = read_i16_le(&bytes, 40);
    if ndim != 3 {
        return Err(Error::format(
            path,
            format!("dimension count \u{2260} 3 (dim[0] = {ndim})"),
        ));
    }
    let dims = [
        read_i16_le(&bytes, 42) as usize,
        read_i16_le(&bytes, 44) as usize,
        read_i16_le(&bytes, 46) as usize,
    ];

    let datatype = read_i16_le(&bytes, 70);
    if !matches!(datatype, DT_UINT8 | DT_INT16 | DT_UINT16) {
        let note = match datatype {
            16 | 64 => " (floating-point volumes are unsupported)",
            _ => "",
        };
        return Err(Error::format(
            path,
            format!("unsupported voxel datatype {datatype}{note}"),
        ));
    }

    let spacing = Vector3::new(
        read_f32_le(&bytes, 80) as f64,
        read_f32_le(&bytes, 84) as f64,
        read_f32_le(&bytes, 88) as f64,
    );
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(
            path,
            format!("non-positive pixdim spacing {spacing:?}"),
        ));
    }

    let (origin, direction) = read_nifti_orientation(&bytes, path)?;

    let geometry = VolumeGeometry::new(dims, spacing, origin, direction).map_err(|e| {
        Error::format(path, format!("non-invertible affine: {e}"))
    })?;

    let vox_offset = read_f32_le(&bytes, 108);
    if !(vox_offset >= NIFTI_HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::format(path, format!("bad vox_offset {vox_offset}")));
    }
    let data = &bytes[vox_offset as usize..];
    let n = geometry.num_voxels();

    let bytes_per = if datatype == DT_UINT8 { 1 } else { 2 };
    if data.len() < n * bytes_per {
        return Err(Error::format(
            path,
            format!(
                "voxel payload too short: {} bytes for {} voxels",
                data.len(),
                n
            ),
        ));
    }

    let voxels: Vec<u16> = match datatype {
        DT_UINT8 => data[..n].iter().map(|&b| b as u16).collect(),
        DT_UINT16 => (0..n).map(|i| read_u16_le(data, 2 * i)).collect(),
        DT_INT16 => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let v = read_i16_le(data, 2 * i);
                if v < 0 {
                    return Err(Error::format(
                        path,
                        format!("negative label value {v} cannot be widened"),
                    ));
                }
                out.push(v as u16);
            }
            out
        }
        _ => unreachable!(),
    };

    LabelVolume::new(geometry, voxels)
}

/// Origin and direction from the s-form when present, otherwise the q-form,
/// otherwise identity. When both are set the s-form wins.
fn read_nifti_orientation(bytes: &[u8], path: &Path) -> Result<(Point3<f64>, Matrix3<f64>)> {
    let qform_code = read_i16_le(bytes, 252);
    let sform_code = read_i16_le(bytes, 254);

    if sform_code > 0 {
        let row = |off: usize| {
            [
                read_f32_le(bytes, off) as f64,
                read_f32_le(bytes, off + 4) as f64,
                read_f32_le(bytes, off + 8) as f64,
                read_f32_le(bytes, off + 12) as f64,
            ]
        };
        let rx = row(280);
        let ry = row(296);
        let rz = row(312);
        let origin = Point3::new(rx[3], ry[3], rz[3]);
        let mut direction = Matrix3::zeros();
        for c in 0..3 {
            let col = Vector3::new(rx[c], ry[c], rz[c]);
            let norm = col.norm();
            if !(norm > 0.0) {
                return Err(Error::format(
                    path,
                    "non-invertible affine: zero s-form column",
                ));
            }
            direction.set_column(c, &(col / norm));
        }
        return Ok((origin, direction));
    }

    if qform_code > 0 {
        let b = read_f32_le(bytes, 256) as f64;
        let c = read_f32_le(bytes, 260) as f64;
        let d = read_f32_le(bytes, 264) as f64;
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let origin = Point3::new(
            read_f32_le(bytes, 268) as f64,
            read_f32_le(bytes, 272) as f64,
            read_f32_le(bytes, 276) as f64,
        );
        let qfac = if read_f32_le(bytes, 76) < 0.0 { -1.0 } else { 1.0 };
        let direction = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            qfac * 2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            qfac * 2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            qfac * (a * a + d * d - b * b - c * c),
        );
        return Ok((origin, direction));
    }

    Ok((Point3::origin(), Matrix3::identity()))
}

fn write_nifti(vol: &LabelVolume, path: &Path) -> Result<()> {
    let g = &vol.geometry;
    let mut h = vec![0u8; NIFTI_HEADER_LEN + 4]; // header + empty extender

    write_i32_le(&mut h, 0, 348);
    // dim
    write_i16_le(&mut h, 40, 3);
    write_i16_le(&mut h, 42, g.dims[0] as i16);
    write_i16_le(&mut h, 44, g.dims[1] as i16);
    write_i16_le(&mut h, 46, g.dims[2] as i16);
    for d in 4..8 {
        write_i16_le(&mut h, 40 + 2 * d, 1);
    }
    write_i16_le(&mut h, 70, DT_UINT16);
    write_i16_le(&mut h, 72, 16); // bitpix
    write_f32_le(&mut h, 76, 1.0); // pixdim[0] (qfac, unused: qform_code = 0)
    write_f32_le(&mut h, 80, g.spacing.x as f32);
    write_f32_le(&mut h, 84, g.spacing.y as f32);
    write_f32_le(&mut h, 88, g.spacing.z as f32);
    write_f32_le(&mut h, 108, (NIFTI_HEADER_LEN + 4) as f32); // vox_offset
    write_f32_le(&mut h, 112, 1.0); // scl_slope
    h[123] = 2; // xyzt_units: millimeters
    write_i16_le(&mut h, 252, 0); // qform_code
    write_i16_le(&mut h, 254, 1); // sform_code
    for (row, off) in [(0usize, 280usize), (1, 296), (2, 312)] {
        for col in 0..3 {
            let v = g.direction[(row, col)] * g.spacing[col];
            write_f32_le(&mut h, off + 4 * col, v as f32);
        }
        write_f32_le(&mut h, off + 12, g.origin[row] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(vol.voxels.len() * 2);
    for &v in &vol.voxels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn fmt_floats(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_sidecar(vol: &LabelVolume, path: &Path) -> Result<()> {
    let g = &vol.geometry;
    let raw_name = {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume".to_string());
        format!("{stem}.raw")
    };
    let mut header = String::new();
    header.push_str(&format!(
        "dims {} {} {}\n",
        g.dims[0], g.dims[1], g.dims[2]
    ));
    header.push_str(&format!("spacing {}\n", fmt_floats(g.spacing.iter().copied())));
    header.push_str(&format!("origin {}\n", fmt_floats(g.origin.iter().copied())));
    let dir_row_major = (0..3).flat_map(|r| (0..3).map(move |c| (r, c)));
    header.push_str(&format!(
        "direction {}\n",
        fmt_floats(dir_row_major.map(|(r, c)| g.direction[(r, c)]))
    ));
    header.push_str("datatype uint16\n");
    header.push_str(&format!("raw_path {raw_name}\n"));
    fs::write(path, header).map_err(|e| Error::io(path, e))?;

    let raw_path = path.with_file_name(raw_name);
    let mut raw = Vec::with_capacity(vol.voxels.len() * 2);
    for &v in &vol.voxels {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, raw).map_err(|e| Error::io(raw_path, e))
}

fn read_sidecar(path: &Path) -> Result<LabelVolume> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing: Option<Vector3<f64>> = None;
    let mut origin: Option<Point3<f64>> = None;
    let mut direction: Option<Matrix3<f64>> = None;
    let mut datatype: Option<String> = None;
    let mut raw_path: Option<String> = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::format(path, format!("line {}: missing value", lineno + 1)))?;
        let nums = || -> Result<Vec<f64>> {
            rest.split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::format(path, format!("line {}: bad number {t:?}", lineno + 1))
                    })
                })
                .collect()
        };
        match key {
            "dims" => {
                let v = nums()?;
                if v.len() != 3 || v.iter().any(|&x| x.fract() != 0.0 || x <= 0.0) {
                    return Err(Error::format(path, "dims needs 3 positive integers"));
                }
                dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
            }
            "spacing" => {
                let v = nums()?;
                if v.len() != 3 {
                    return Err(Error::format(path, "spacing needs 3 reals"));
                }
                spacing = Some(Vector3::new(v[0], v[1], v[2]));
            }
            "origin" => {
                let v = nums()?;
                if v.len() != 3 {
                    return Err(Error::format(path, "origin needs 3 reals"));
                }
                origin = Some(Point3::new(v[0], v[1], v[2]));
            }
            "direction" => {
                let v = nums()?;
                if v.len() != 9 {
                    return Err(Error::format(path, "direction needs 9 reals (row-major)"));
                }
                direction = Some(Matrix3::from_row_slice(&v));
            }
            "datatype" => datatype = Some(rest.trim().to_string()),
            "raw_path" => raw_path = Some(rest.trim().to_string()),
            other => {
                return Err(Error::format(
                    path,
                    format!("line {}: unknown key {other:?}", lineno + 1),
                ));
            }
        }
    }

    let dims = dims.ok_or_else(|| Error::format(path, "missing dims line"))?;
    let spacing = spacing.ok_or_else(|| Error::format(path, "missing spacing line"))?;
    let origin = origin.ok_or_else(|| Error::format(path, "missing origin line"))?;
    let direction = direction.ok_or_else(|| Error::format(path, "missing direction line"))?;
    let datatype = datatype.ok_or_else(|| Error::format(path, "missing datatype line"))?;
    let raw_name = raw_path.ok_or_else(|| Error::format(path, "missing raw_path line"))?;

    let geometry = VolumeGeometry::new(dims, spacing, origin, direction)
        .map_err(|e| Error::format(path, format!("bad geometry: {e}")))?;

    let raw_file = path.with_file_name(&raw_name);
    let raw = fs::read(&raw_file).map_err(|e| Error::io(&raw_file, e))?;
    let n = geometry.num_voxels();
    let voxels: Vec<u16> = match datatype.as_str() {
        "uint8" => {
            if raw.len() < n {
                return Err(Error::format(&raw_file, "raw payload too short"));
            }
            raw[..n].iter().map(|&b| b as u16).collect()
        }
        "uint16" => {
            if raw.len() < 2 * n {
                return Err(Error::format(&raw_file, "raw payload too short"));
            }
            (0..n).map(|i| read_u16_le(&raw, 2 * i)).collect()
        }
        "int16" => {
            if raw.len() < 2 * n {
                return Err(Error::format(&raw_file, "raw payload too short"));
            }
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let v = read_i16_le(&raw, 2 * i);
                if v < 0 {
                    return Err(Error::format(
                        &raw_file,
                        format!("negative label value {v} cannot be widened"),
                    ));
                }
                out.push(v as u16);
            }
            out
        }
        other => {
            return Err(Error::format(
                path,
                format!("unsupported datatype {other:?}"),
            ));
        }
    };

    LabelVolume::new(geometry, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::BinaryMask;

    fn sample_volume() -> LabelVolume {
        let g = VolumeGeometry::axis_aligned(
            [4, 3, 2],
            [0.35, 0.35, 1.5],
            [-10.0, 4.25, 7.5],
        )
        .unwrap();
        let voxels = (0..24).map(|i| (i % 5) as u16).collect();
        LabelVolume::new(g, voxels).unwrap()
    }

    #[test]
    fn nifti_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.voxels, vol.voxels);
        assert!(back.geometry.approx_eq(&vol.geometry, 1e-6));
    }

    #[test]
    fn sidecar_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.svh");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.voxels, vol.voxels);
        assert_eq!(back.geometry, vol.geometry);
    }

    #[test]
    fn single_voxel_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.nii");
        let g = VolumeGeometry::axis_aligned([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = LabelVolume::new(g, vec![7]).unwrap();
        write_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Payload is a single little-endian u16 = 7 right after the extender.
        assert_eq!(&bytes[352..354], &[7, 0]);
        assert_eq!(read_volume(&path).unwrap().voxels, vec![7]);
    }

    #[test]
    fn anisotropic_spacing_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aniso.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        for a in 0..3 {
            assert!((back.geometry.spacing[a] - vol.geometry.spacing[a]).abs() < 1e-6);
        }
    }

    #[test]
    fn four_dimensional_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol4d.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        write_i16_le(&mut bytes, 40, 4); // dim[0] = 4
        std::fs::write(&path, bytes).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(err.to_string().contains("dimension count"), "{err}");
    }

    #[test]
    fn float_datatype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        write_i16_le(&mut bytes, 70, 16); // float32
        std::fs::write(&path, bytes).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(err.to_string().contains("datatype"), "{err}");
    }

    #[test]
    fn nearly_unit_direction_columns_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("near.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Scale the s-form rows so the direction columns have norm 0.999999;
        // normalization on read keeps the affine within tolerance.
        for off in [280usize, 296, 312] {
            for col in 0..3 {
                let v = read_f32_le(&bytes, off + 4 * col);
                write_f32_le(&mut bytes, off + 4 * col, v * 0.999_999);
            }
        }
        std::fs::write(&path, bytes).unwrap();
        let back = read_volume(&path).unwrap();
        assert!(back.geometry.approx_eq(&vol.geometry, 1e-5));
    }

    #[test]
    fn negative_int16_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        write_i16_le(&mut bytes, 70, DT_INT16);
        let len = bytes.len();
        bytes[len - 1] = 0xff;
        bytes[len - 2] = 0xff; // last voxel = -1
        std::fs::write(&path, bytes).unwrap();
        assert!(read_volume(&path).is_err());
    }

    #[test]
    fn uint8_payload_widened() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        write_i16_le(&mut bytes, 70, DT_UINT8);
        write_i16_le(&mut bytes, 72, 8);
        let payload: Vec<u8> = vol.voxels.iter().map(|&v| v as u8).collect();
        bytes.truncate(352);
        bytes.extend_from_slice(&payload);
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(read_volume(&path).unwrap().voxels, vol.voxels);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_volume("/nonexistent/volume.nii").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn masks_share_volume_layout() {
        let vol = sample_volume();
        let mask = BinaryMask::zeros(vol.geometry.clone());
        assert_eq!(mask.bits.len(), vol.voxels.len());
    }
}
