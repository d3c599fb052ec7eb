//! Bit-exact file I/O.
//!
//! A volume on disk is a pair `<name>.json` + `<name>.raw`. The header
//! carries `dims` [X,Y,Z,C], `dtype` ("f32"), `layout`
//! ("x-fastest-channels-last"), `spacing_mm`, and, for fields, a
//! `field_kind` key. The payload is X·Y·Z·C little-endian 32-bit floats
//! in the same x-fastest, channels-last order as memory.
//!
//! Affines are a single JSON file holding 16 row-major floats plus the
//! fixed `convention` key.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AffineTransform, Dims, SegKind, SegmentationSet, Volume};

pub const DTYPE: &str = "f32";
pub const LAYOUT: &str = "x-fastest-channels-last";

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 4],
    dtype: String,
    layout: String,
    spacing_mm: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    field_kind: Option<String>,
}

/// Resolves `<base>.json` / `<base>.raw` from either the bare base path
/// or the header path.
fn header_and_raw(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().map(|e| e == "json").unwrap_or(false) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    (base.with_extension("json"), base.with_extension("raw"))
}

/// Writes bytes through a sibling temp file and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_with_kind(v: &Volume, path: &Path, field_kind: Option<&str>) -> Result<()> {
    let (hpath, rpath) = header_and_raw(path);
    let d = v.dims();
    let header = VolumeHeader {
        dims: [d.x, d.y, d.z, d.c],
        dtype: DTYPE.into(),
        layout: LAYOUT.into(),
        spacing_mm: v.spacing_mm(),
        field_kind: field_kind.map(|s| s.to_string()),
    };
    let mut payload = Vec::with_capacity(v.voxels().len() * 4);
    for &x in v.voxels() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_atomic(&hpath, serde_json::to_string_pretty(&header)?.as_bytes())?;
    write_atomic(&rpath, &payload)?;
    Ok(())
}

/// Writes header + little-endian f32 payload.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    save_with_kind(v, path, None)
}

pub(crate) fn save_volume_with_field_kind(v: &Volume, path: &Path, kind: &str) -> Result<()> {
    save_with_kind(v, path, Some(kind))
}

fn load_with_kind(path: &Path) -> Result<(Volume, Option<String>)> {
    let (hpath, rpath) = header_and_raw(path);
    let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(&hpath)?)?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    if header.layout != LAYOUT {
        return Err(Error::Format(format!(
            "unsupported layout {}",
            header.layout
        )));
    }
    let [x, y, z, c] = header.dims;
    let dims = Dims::new(x, y, z, c);
    let raw = fs::read(&rpath)?;
    if raw.len() != dims.len() * 4 {
        return Err(Error::Shape(format!(
            "payload holds {} bytes but header dims {:?} require {}",
            raw.len(),
            header.dims,
            dims.len() * 4
        )));
    }
    let mut voxels = Vec::with_capacity(dims.len());
    for chunk in raw.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Invalid("non-finite voxel in payload".into()));
        }
        voxels.push(v as f64);
    }
    Ok((Volume::new(dims, header.spacing_mm, voxels)?, header.field_kind))
}

/// Loads a volume; rejects header/payload size mismatch and non-finite
/// values.
pub fn load_volume(path: &Path) -> Result<Volume> {
    Ok(load_with_kind(path)?.0)
}

pub(crate) fn load_volume_expect_kind(path: &Path, want: &str) -> Result<Volume> {
    let (v, kind) = load_with_kind(path)?;
    match kind.as_deref() {
        Some(k) if k == want => Ok(v),
        other => Err(Error::Format(format!(
            "expected field_kind {:?}, found {:?}",
            want, other
        ))),
    }
}

/// Loads a segmentation, validating the value bounds for `kind`.
pub fn load_segmentation(path: &Path, kind: SegKind) -> Result<SegmentationSet> {
    SegmentationSet::new(load_volume(path)?, kind)
}

pub fn save_segmentation(s: &SegmentationSet, path: &Path) -> Result<()> {
    save_volume(s.volume(), path)
}

#[derive(Debug, Serialize, Deserialize)]
struct AffineFile {
    matrix: Vec<f64>,
    convention: String,
}

pub fn save_affine(a: &AffineTransform, path: &Path) -> Result<()> {
    let flat: Vec<f64> = a.matrix().iter().flatten().copied().collect();
    let file = AffineFile {
        matrix: flat,
        convention: AffineTransform::CONVENTION.into(),
    };
    write_atomic(path, serde_json::to_string_pretty(&file)?.as_bytes())
}

pub fn load_affine(path: &Path) -> Result<AffineTransform> {
    let file: AffineFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.convention != AffineTransform::CONVENTION {
        return Err(Error::Format(format!(
            "unsupported affine convention {}",
            file.convention
        )));
    }
    if file.matrix.len() != 16 {
        return Err(Error::Format(format!(
            "affine must hold 16 floats, found {}",
            file.matrix.len()
        )));
    }
    let mut m = [[0.0; 4]; 4];
    for (i, v) in file.matrix.iter().enumerate() {
        m[i / 4][i % 4] = *v;
    }
    AffineTransform::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn f32_valued(dims: Dims, seed: u64) -> Volume {
        // Arbitrary but f32-representable values, so disk round-trips are
        // bit-exact.
        let mut v = Volume::zeros(dims, [1.0, 1.25, 0.5]);
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        for x in v.voxels_mut() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            *x = ((s >> 40) as f32 / 1000.0 - 8.0) as f64;
        }
        v
    }

    #[test]
    fn zero_volume_roundtrips() {
        let dir = tempdir().unwrap();
        let v = Volume::zeros(Dims::new(4, 4, 4, 1), [1.0; 3]);
        let p = dir.path().join("zeros");
        save_volume(&v, &p).unwrap();
        let raw = std::fs::read(dir.path().join("zeros.raw")).unwrap();
        assert_eq!(raw.len(), 64 * 4);
        assert!(raw.iter().all(|&b| b == 0));
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn arbitrary_volume_roundtrips_bit_exactly() {
        let dir = tempdir().unwrap();
        let v = f32_valued(Dims::new(5, 3, 4, 2), 7);
        let p = dir.path().join("v.json");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.voxels(), v.voxels());
        assert_eq!(back.spacing_mm(), v.spacing_mm());
        // And the file bytes themselves are stable under a second save.
        let first = std::fs::read(dir.path().join("v.raw")).unwrap();
        save_volume(&back, &p).unwrap();
        let second = std::fs::read(dir.path().join("v.raw")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn payload_size_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let v = Volume::zeros(Dims::new(4, 4, 4, 1), [1.0; 3]);
        let p = dir.path().join("bad");
        save_volume(&v, &p).unwrap();
        // Truncate to 63 floats.
        let raw = dir.path().join("bad.raw");
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..63 * 4]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let v = Volume::zeros(Dims::new(2, 2, 2, 1), [1.0; 3]);
        let p = dir.path().join("nan");
        save_volume(&v, &p).unwrap();
        let raw = dir.path().join("nan.raw");
        let mut bytes = std::fs::read(&raw).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&raw, &bytes).unwrap();
        assert!(load_volume(&p).is_err());
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let v = Volume::zeros(Dims::new(2, 2, 2, 1), [1.0; 3]);
        let r = save_volume(&v, Path::new("/nonexistent-dir/sub/v"));
        assert!(matches!(r, Err(Error::Io(_))));
    }

    #[test]
    fn affine_roundtrip_and_convention_check() {
        let dir = tempdir().unwrap();
        let a = AffineTransform::translation([1.5, -2.0, 0.25]);
        let p = dir.path().join("affine.json");
        save_affine(&a, &p).unwrap();
        let back = load_affine(&p).unwrap();
        assert_eq!(back, a);

        let mut text = std::fs::read_to_string(&p).unwrap();
        text = text.replace(AffineTransform::CONVENTION, "source-to-target-voxel");
        std::fs::write(&p, text).unwrap();
        assert!(load_affine(&p).is_err());
    }

    #[test]
    fn probabilistic_bounds_enforced_on_load() {
        let dir = tempdir().unwrap();
        let mut v = Volume::zeros(Dims::new(2, 2, 2, 1), [1.0; 3]);
        v.voxels_mut()[0] = 1.5;
        let p = dir.path().join("seg");
        save_volume(&v, &p).unwrap();
        assert!(load_segmentation(&p, SegKind::Probabilistic).is_err());
        assert!(load_volume(&p).is_ok());
    }
}
