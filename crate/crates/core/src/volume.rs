//! Core grid types: multi-channel volumes, segmentation sets, affine
//! transforms, and pooled normalization.
//!
//! Voxel layout is x-fastest with channels last (slowest), so the linear
//! index of `(x, y, z, c)` is `((c·Z + z)·Y + y)·X + x`. Values are held
//! as f64 in memory; the on-disk format is little-endian f32 (see
//! [`crate::io`]).

use crate::error::{Error, Result};

/// Spatial + channel extents of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize, c: usize) -> Self {
        Dims { x, y, z, c }
    }

    /// Total voxel count (spatial × channels).
    pub fn len(&self) -> usize {
        self.x * self.y * self.z * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial voxel count |Ω| = X·Y·Z.
    pub fn spatial_len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn grid(&self) -> GridDomain {
        GridDomain {
            x: self.x,
            y: self.y,
            z: self.z,
        }
    }

    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        debug_assert!(x < self.x && y < self.y && z < self.z && c < self.c);
        ((c * self.z + z) * self.y + y) * self.x + x
    }
}

/// The target space Ω_t over which losses and metrics average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDomain {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl GridDomain {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        GridDomain { x, y, z }
    }

    /// |Ω| = X·Y·Z.
    pub fn len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense 3D multi-channel scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing_mm: [f64; 3],
    voxels: Vec<f64>,
}

impl Volume {
    /// Builds a volume, checking the voxel count against `dims` and that
    /// spacing components are strictly positive.
    pub fn new(dims: Dims, spacing_mm: [f64; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.len() == 0 {
            return Err(Error::Invalid("volume dims must be positive".into()));
        }
        if voxels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "voxel count {} does not match dims {}x{}x{}x{}",
                voxels.len(),
                dims.x,
                dims.y,
                dims.z,
                dims.c
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!(
                "spacing must be strictly positive, got {:?}",
                spacing_mm
            )));
        }
        Ok(Volume {
            dims,
            spacing_mm,
            voxels,
        })
    }

    pub fn zeros(dims: Dims, spacing_mm: [f64; 3]) -> Self {
        Volume::new(dims, spacing_mm, vec![0.0; dims.len()]).expect("valid dims")
    }

    /// Same dims/spacing as `self`, zero-filled.
    pub fn zeros_like(&self) -> Self {
        Volume::zeros(self.dims, self.spacing_mm)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn grid(&self) -> GridDomain {
        self.dims.grid()
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline(always)]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.voxels[self.dims.index(x, y, z, c)]
    }

    #[inline(always)]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f64) {
        let i = self.dims.index(x, y, z, c);
        self.voxels[i] = v;
    }

    /// Contiguous spatial block for one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.spatial_len();
        &self.voxels[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.dims.spatial_len();
        &mut self.voxels[c * n..(c + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.voxels.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    /// Stacks volumes along the channel axis. All inputs must share
    /// spatial dims; spacing is taken from the first.
    pub fn concat_channels(parts: &[&Volume]) -> Result<Volume> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero volumes".into()))?;
        let g = first.grid();
        let mut c_total = 0;
        for p in parts {
            if p.grid() != g {
                return Err(Error::Shape("concat_channels: spatial dims differ".into()));
            }
            c_total += p.dims.c;
        }
        let mut voxels = Vec::with_capacity(g.len() * c_total);
        for p in parts {
            voxels.extend_from_slice(p.voxels());
        }
        Volume::new(Dims::new(g.x, g.y, g.z, c_total), first.spacing_mm, voxels)
    }
}

/// Whether a segmentation stores probabilities or hard labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegKind {
    Probabilistic,
    Binary,
}

/// K-channel label volume. Channels may overlap: a voxel can belong to
/// several structures at once.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSet {
    volume: Volume,
    kind: SegKind,
}

impl SegmentationSet {
    pub fn new(volume: Volume, kind: SegKind) -> Result<Self> {
        let ok = match kind {
            SegKind::Probabilistic => volume.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)),
            SegKind::Binary => volume.voxels().iter().all(|&v| v == 0.0 || v == 1.0),
        };
        if !ok {
            return Err(Error::Invalid(format!(
                "segmentation values out of range for {:?}",
                kind
            )));
        }
        Ok(SegmentationSet { volume, kind })
    }

    pub fn kind(&self) -> SegKind {
        self.kind
    }

    pub fn num_structures(&self) -> usize {
        self.volume.dims().c
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn into_volume(self) -> Volume {
        self.volume
    }

    /// Thresholds a probabilistic set into a binary one (v ≥ thr → 1).
    pub fn binarize(&self, threshold: f64) -> SegmentationSet {
        let mut v = self.volume.clone();
        for x in v.voxels_mut() {
            *x = if *x >= threshold { 1.0 } else { 0.0 };
        }
        SegmentationSet {
            volume: v,
            kind: SegKind::Binary,
        }
    }
}

/// 4×4 row-major affine mapping target-grid voxel coordinates
/// (homogeneous) to source-grid voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: [[f64; 4]; 4],
}

impl AffineTransform {
    pub const CONVENTION: &'static str = "target-to-source-voxel";

    pub fn new(matrix: [[f64; 4]; 4]) -> Result<Self> {
        if matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Invalid(
                "affine last row must be (0,0,0,1)".into(),
            ));
        }
        let a = AffineTransform { matrix };
        if a.det3().abs() <= 1e-9 {
            return Err(Error::Invalid("affine 3x3 block is singular".into()));
        }
        Ok(a)
    }

    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        AffineTransform { matrix: m }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        a.matrix[0][3] = t[0];
        a.matrix[1][3] = t[1];
        a.matrix[2][3] = t[2];
        a
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.matrix
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn det3(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Applies the transform to a voxel coordinate.
    #[inline(always)]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Transpose of the 3×3 linear block applied to a vector; this is the
    /// Jacobian chain for gradients flowing from sampling-map coordinates
    /// back to displacement components.
    #[inline(always)]
    pub fn apply_linear_transposed(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Inverse transform (swaps the roles of source and target grids).
    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.det3();
        if det.abs() <= 1e-9 {
            return Err(Error::Invalid("affine 3x3 block is singular".into()));
        }
        let m = &self.matrix;
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        let t = [m[0][3], m[1][3], m[2][3]];
        let mut out = [[0.0; 4]; 4];
        for i in 0..3 {
            out[i][..3].copy_from_slice(&inv[i]);
            out[i][3] = -(inv[i][0] * t[0] + inv[i][1] * t[1] + inv[i][2] * t[2]);
        }
        out[3] = [0.0, 0.0, 0.0, 1.0];
        AffineTransform::new(out)
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose_affine(&self, other: &AffineTransform) -> AffineTransform {
        let a = &self.matrix;
        let b = &other.matrix;
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        AffineTransform { matrix: m }
    }
}

/// Rescales a volume to pooled mean 0 and standard deviation 1 over all
/// voxels of all channels jointly (population statistics, zeros included).
pub fn normalize_image(v: &Volume) -> Result<Volume> {
    let n = v.voxels().len();
    if n == 0 {
        return Err(Error::Invalid("empty volume".into()));
    }
    let mean = v.voxels().iter().sum::<f64>() / n as f64;
    let var = v.voxels().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::Invalid(
            "constant image: pooled variance is zero".into(),
        ));
    }
    let istd = 1.0 / var.sqrt();
    let voxels = v.voxels().iter().map(|x| (x - mean) * istd).collect();
    Volume::new(v.dims(), v.spacing_mm(), voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_layout_is_x_fastest_channels_last() {
        let d = Dims::new(2, 3, 4, 2);
        assert_eq!(d.index(0, 0, 0, 0), 0);
        assert_eq!(d.index(1, 0, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0, 0), 2);
        assert_eq!(d.index(0, 0, 1, 0), 6);
        assert_eq!(d.index(0, 0, 0, 1), 24);
        assert_eq!(d.index(1, 2, 3, 1), 24 + 18 + 4 + 1);
    }

    #[test]
    fn volume_rejects_size_mismatch() {
        let r = Volume::new(Dims::new(4, 4, 4, 1), [1.0; 3], vec![0.0; 63]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn volume_rejects_nonpositive_spacing() {
        let r = Volume::new(Dims::new(2, 2, 2, 1), [1.0, 0.0, 1.0], vec![0.0; 8]);
        assert!(r.is_err());
    }

    #[test]
    fn normalize_two_level_image() {
        // Values {0, 2} equally frequent: pooled mean 1, population std 1.
        let mut v = Volume::zeros(Dims::new(2, 2, 2, 1), [1.0; 3]);
        for (i, x) in v.voxels_mut().iter_mut().enumerate() {
            *x = if i % 2 == 0 { 0.0 } else { 2.0 };
        }
        let n = normalize_image(&v).unwrap();
        for (i, x) in n.voxels().iter().enumerate() {
            let want = if i % 2 == 0 { -1.0 } else { 1.0 };
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_is_idempotent_on_normalized_input() {
        let mut v = Volume::zeros(Dims::new(3, 3, 3, 2), [1.0; 3]);
        let mut acc = 0.3_f64;
        for x in v.voxels_mut() {
            acc = (acc * 97.0 + 13.0).rem_euclid(7.3) - 3.0;
            *x = acc;
        }
        let n1 = normalize_image(&v).unwrap();
        let n2 = normalize_image(&n1).unwrap();
        for (a, b) in n1.voxels().iter().zip(n2.voxels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_constant_volume_is_error() {
        let v = Volume::new(Dims::new(2, 2, 2, 1), [1.0; 3], vec![5.0; 8]).unwrap();
        assert!(normalize_image(&v).is_err());
    }

    #[test]
    fn normalized_stats_are_pooled_over_channels() {
        let mut v = Volume::zeros(Dims::new(4, 4, 4, 3), [1.0; 3]);
        let mut s = 1.0_f64;
        for x in v.voxels_mut() {
            s = (s * 1.618).rem_euclid(5.0);
            *x = s;
        }
        let n = normalize_image(&v).unwrap();
        let cnt = n.voxels().len() as f64;
        let mean = n.voxels().iter().sum::<f64>() / cnt;
        let var = n.voxels().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cnt;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn segmentation_bounds_are_enforced() {
        let v = Volume::new(Dims::new(2, 2, 2, 1), [1.0; 3], vec![0.5; 8]).unwrap();
        assert!(SegmentationSet::new(v.clone(), SegKind::Probabilistic).is_ok());
        assert!(SegmentationSet::new(v, SegKind::Binary).is_err());
    }

    #[test]
    fn affine_identity_and_translation() {
        let id = AffineTransform::identity();
        assert_eq!(id.apply([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
        let t = AffineTransform::translation([2.0, 0.0, -1.0]);
        assert_eq!(t.apply([1.0, 2.0, 3.0]), [3.0, 2.0, 2.0]);
    }

    #[test]
    fn affine_rejects_bad_last_row_and_singular_block() {
        let mut m = *AffineTransform::identity().matrix();
        m[3][0] = 1.0;
        assert!(AffineTransform::new(m).is_err());
        let mut s = *AffineTransform::identity().matrix();
        s[0][0] = 0.0;
        assert!(AffineTransform::new(s).is_err());
    }

    #[test]
    fn affine_inverse_roundtrip() {
        let mut m = *AffineTransform::identity().matrix();
        m[0][0] = 1.1;
        m[0][1] = 0.2;
        m[1][2] = -0.1;
        m[2][3] = 3.0;
        let a = AffineTransform::new(m).unwrap();
        let inv = a.invert().unwrap();
        let p = [0.7, -1.3, 2.2];
        let q = inv.apply(a.apply(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }
}
