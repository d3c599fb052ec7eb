//! Transform composition and the differentiable pull-based trilinear warp.
//!
//! Warping samples the source at composite coordinates: the affine and the
//! local displacement are folded into a single [`SamplingMap`] of absolute
//! source coordinates, and the source is interpolated exactly once per
//! warped output. Out-of-range coordinates are clamped to the border
//! (replication); a clamped coordinate component has zero map-gradient.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::io;
use crate::volume::{AffineTransform, Dims, GridDomain, Volume};

/// Dense local deformation u, in target-grid voxels. Channel c holds the
/// displacement along axis c.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField(Volume);

impl DisplacementField {
    pub fn new(v: Volume) -> Result<Self> {
        if v.dims().c != 3 {
            return Err(Error::Shape(format!(
                "displacement field needs 3 channels, found {}",
                v.dims().c
            )));
        }
        if !v.all_finite() {
            return Err(Error::Invalid("non-finite displacement component".into()));
        }
        Ok(DisplacementField(v))
    }

    pub fn zeros(grid: GridDomain, spacing_mm: [f64; 3]) -> Self {
        DisplacementField(Volume::zeros(Dims::new(grid.x, grid.y, grid.z, 3), spacing_mm))
    }

    pub fn grid(&self) -> GridDomain {
        self.0.grid()
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn volume_mut(&mut self) -> &mut Volume {
        &mut self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    /// Mean Euclidean norm ‖u(x)‖ over the grid.
    pub fn mean_norm(&self) -> f64 {
        let g = self.grid();
        let n = g.len();
        let (ux, rest) = self.0.voxels().split_at(n);
        let (uy, uz) = rest.split_at(n);
        let mut acc = 0.0;
        for i in 0..n {
            acc += (ux[i] * ux[i] + uy[i] * uy[i] + uz[i] * uz[i]).sqrt();
        }
        acc / n as f64
    }

    /// Mean endpoint error ‖u − other‖ per voxel.
    pub fn mean_endpoint_error(&self, other: &DisplacementField) -> Result<f64> {
        if self.grid() != other.grid() {
            return Err(Error::Shape("endpoint error: grids differ".into()));
        }
        let mut diff = self.0.clone();
        for (d, o) in diff.voxels_mut().iter_mut().zip(other.0.voxels()) {
            *d -= o;
        }
        Ok(DisplacementField(diff).mean_norm())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_volume_with_field_kind(&self.0, path, "displacement-voxels")
    }

    pub fn load(path: &Path) -> Result<Self> {
        DisplacementField::new(io::load_volume_expect_kind(path, "displacement-voxels")?)
    }
}

/// Per-target-voxel absolute source coordinates: the realized composite
/// mapping φ.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMap(Volume);

impl SamplingMap {
    pub fn new(v: Volume) -> Result<Self> {
        if v.dims().c != 3 {
            return Err(Error::Shape(format!(
                "sampling map needs 3 channels, found {}",
                v.dims().c
            )));
        }
        if !v.all_finite() {
            return Err(Error::Invalid("non-finite sampling coordinate".into()));
        }
        Ok(SamplingMap(v))
    }

    /// map(x) = x for every voxel.
    pub fn identity(grid: GridDomain, spacing_mm: [f64; 3]) -> Self {
        let mut v = Volume::zeros(Dims::new(grid.x, grid.y, grid.z, 3), spacing_mm);
        let n = grid.len();
        {
            let vox = v.voxels_mut();
            let mut i = 0;
            for z in 0..grid.z {
                for y in 0..grid.y {
                    for x in 0..grid.x {
                        vox[i] = x as f64;
                        vox[n + i] = y as f64;
                        vox[2 * n + i] = z as f64;
                        i += 1;
                    }
                }
            }
        }
        SamplingMap(v)
    }

    pub fn grid(&self) -> GridDomain {
        self.0.grid()
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_volume_with_field_kind(&self.0, path, "sampling-map")
    }

    pub fn load(path: &Path) -> Result<Self> {
        SamplingMap::new(io::load_volume_expect_kind(path, "sampling-map")?)
    }
}

/// Folds the affine and the local displacement into one sampling map:
/// map(x) = φ_A · (x + u(x), 1)ᵀ. Warping with this map applies the whole
/// composite in a single interpolation.
pub fn compose(phi_a: &AffineTransform, phi_d: &DisplacementField) -> SamplingMap {
    let g = phi_d.grid();
    let n = g.len();
    let mut out = Volume::zeros(Dims::new(g.x, g.y, g.z, 3), phi_d.volume().spacing_mm());
    let u = phi_d.volume().voxels();
    {
        let vox = out.voxels_mut();
        let mut i = 0;
        for z in 0..g.z {
            for y in 0..g.y {
                for x in 0..g.x {
                    let p = [
                        x as f64 + u[i],
                        y as f64 + u[n + i],
                        z as f64 + u[2 * n + i],
                    ];
                    let q = phi_a.apply(p);
                    vox[i] = q[0];
                    vox[n + i] = q[1];
                    vox[2 * n + i] = q[2];
                    i += 1;
                }
            }
        }
    }
    SamplingMap(out)
}

/// Pulls map-coordinate gradients back to displacement gradients:
/// since map(x) = A·(x + u(x)) + t, ∂map/∂u is the 3×3 linear block, so
/// grad_u(x) = A₃ᵀ · grad_map(x).
pub fn map_grad_to_displacement(phi_a: &AffineTransform, grad_map: &Volume) -> Result<Volume> {
    if grad_map.dims().c != 3 {
        return Err(Error::Shape("map gradient needs 3 channels".into()));
    }
    let n = grad_map.grid().len();
    let mut out = grad_map.clone();
    {
        let vox = out.voxels_mut();
        for i in 0..n {
            let g = phi_a.apply_linear_transposed([vox[i], vox[n + i], vox[2 * n + i]]);
            vox[i] = g[0];
            vox[n + i] = g[1];
            vox[2 * n + i] = g[2];
        }
    }
    Ok(out)
}

static WARP_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of public [`trilinear_warp`] invocations so far in this process.
/// Tests use this to assert the training path interpolates each warped
/// output exactly once.
pub fn warp_call_count() -> u64 {
    WARP_CALLS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy)]
struct AxisSample {
    i0: usize,
    i1: usize,
    frac: f64,
    /// False when the raw coordinate was clamped; the map-gradient along
    /// this axis is then zero.
    inside: bool,
}

#[inline(always)]
fn axis_sample(raw: f64, len: usize) -> AxisSample {
    let hi = (len - 1) as f64;
    let inside = (0.0..=hi).contains(&raw);
    let c = raw.clamp(0.0, hi);
    if len == 1 {
        return AxisSample {
            i0: 0,
            i1: 0,
            frac: 0.0,
            inside: false,
        };
    }
    let mut i0 = c.floor() as usize;
    if i0 > len - 2 {
        i0 = len - 2;
    }
    AxisSample {
        i0,
        i1: i0 + 1,
        frac: c - i0 as f64,
        inside,
    }
}

/// Interpolates `src` at `map` coordinates. Output dims are the map grid
/// with the source channel count; coordinates outside `[0, dim−1]` are
/// clamped before interpolation.
pub fn trilinear_warp(src: &Volume, map: &SamplingMap) -> Volume {
    WARP_CALLS.fetch_add(1, Ordering::SeqCst);
    warp_kernel(src, map)
}

pub(crate) fn warp_kernel(src: &Volume, map: &SamplingMap) -> Volume {
    let g = map.grid();
    let sd = src.dims();
    let n = g.len();
    let sn = sd.spatial_len();
    let mv = map.0.voxels();
    let sv = src.voxels();
    let mut out = Volume::zeros(Dims::new(g.x, g.y, g.z, sd.c), map.0.spacing_mm());
    let ov = out.voxels_mut();
    for i in 0..n {
        let ax = axis_sample(mv[i], sd.x);
        let ay = axis_sample(mv[n + i], sd.y);
        let az = axis_sample(mv[2 * n + i], sd.z);
        let (fx, fy, fz) = (ax.frac, ay.frac, az.frac);
        let base00 = (az.i0 * sd.y + ay.i0) * sd.x;
        let base10 = (az.i0 * sd.y + ay.i1) * sd.x;
        let base01 = (az.i1 * sd.y + ay.i0) * sd.x;
        let base11 = (az.i1 * sd.y + ay.i1) * sd.x;
        let w000 = (1.0 - fx) * (1.0 - fy) * (1.0 - fz);
        let w100 = fx * (1.0 - fy) * (1.0 - fz);
        let w010 = (1.0 - fx) * fy * (1.0 - fz);
        let w110 = fx * fy * (1.0 - fz);
        let w001 = (1.0 - fx) * (1.0 - fy) * fz;
        let w101 = fx * (1.0 - fy) * fz;
        let w011 = (1.0 - fx) * fy * fz;
        let w111 = fx * fy * fz;
        for c in 0..sd.c {
            let ch = &sv[c * sn..(c + 1) * sn];
            ov[c * n + i] = w000 * ch[base00 + ax.i0]
                + w100 * ch[base00 + ax.i1]
                + w010 * ch[base10 + ax.i0]
                + w110 * ch[base10 + ax.i1]
                + w001 * ch[base01 + ax.i0]
                + w101 * ch[base01 + ax.i1]
                + w011 * ch[base11 + ax.i0]
                + w111 * ch[base11 + ax.i1];
        }
    }
    out
}

/// Backward pass of the warp. `grad_src` is the scatter of `upstream`
/// through the interpolation weights; `grad_map` is `upstream` times the
/// spatial derivative of the interpolant, summed over channels, with zero
/// on clamped coordinate components.
pub fn trilinear_warp_grad(
    src: &Volume,
    map: &SamplingMap,
    upstream: &Volume,
) -> Result<(Volume, Volume)> {
    let g = map.grid();
    let sd = src.dims();
    if upstream.grid() != g || upstream.dims().c != sd.c {
        return Err(Error::Shape(format!(
            "upstream dims {:?} do not match warp output ({:?}, C={})",
            upstream.dims(),
            g,
            sd.c
        )));
    }
    let n = g.len();
    let sn = sd.spatial_len();
    let mv = map.0.voxels();
    let sv = src.voxels();
    let uv = upstream.voxels();
    let mut grad_src = src.zeros_like();
    let mut grad_map = map.0.zeros_like();
    let gs = grad_src.voxels_mut();
    let gm = grad_map.voxels_mut();
    for i in 0..n {
        let ax = axis_sample(mv[i], sd.x);
        let ay = axis_sample(mv[n + i], sd.y);
        let az = axis_sample(mv[2 * n + i], sd.z);
        let (fx, fy, fz) = (ax.frac, ay.frac, az.frac);
        let base00 = (az.i0 * sd.y + ay.i0) * sd.x;
        let base10 = (az.i0 * sd.y + ay.i1) * sd.x;
        let base01 = (az.i1 * sd.y + ay.i0) * sd.x;
        let base11 = (az.i1 * sd.y + ay.i1) * sd.x;
        let corners = [
            (base00 + ax.i0, (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
            (base00 + ax.i1, fx * (1.0 - fy) * (1.0 - fz)),
            (base10 + ax.i0, (1.0 - fx) * fy * (1.0 - fz)),
            (base10 + ax.i1, fx * fy * (1.0 - fz)),
            (base01 + ax.i0, (1.0 - fx) * (1.0 - fy) * fz),
            (base01 + ax.i1, fx * (1.0 - fy) * fz),
            (base11 + ax.i0, (1.0 - fx) * fy * fz),
            (base11 + ax.i1, fx * fy * fz),
        ];
        let mut dx = 0.0;
        let mut dy = 0.0;
        let mut dz = 0.0;
        for c in 0..sd.c {
            let ch = &sv[c * sn..(c + 1) * sn];
            let up = uv[c * n + i];
            for (idx, w) in corners {
                gs[c * sn + idx] += up * w;
            }
            let v000 = ch[base00 + ax.i0];
            let v100 = ch[base00 + ax.i1];
            let v010 = ch[base10 + ax.i0];
            let v110 = ch[base10 + ax.i1];
            let v001 = ch[base01 + ax.i0];
            let v101 = ch[base01 + ax.i1];
            let v011 = ch[base11 + ax.i0];
            let v111 = ch[base11 + ax.i1];
            dx += up
                * ((1.0 - fy) * (1.0 - fz) * (v100 - v000)
                    + fy * (1.0 - fz) * (v110 - v010)
                    + (1.0 - fy) * fz * (v101 - v001)
                    + fy * fz * (v111 - v011));
            dy += up
                * ((1.0 - fx) * (1.0 - fz) * (v010 - v000)
                    + fx * (1.0 - fz) * (v110 - v100)
                    + (1.0 - fx) * fz * (v011 - v001)
                    + fx * fz * (v111 - v101));
            dz += up
                * ((1.0 - fx) * (1.0 - fy) * (v001 - v000)
                    + fx * (1.0 - fy) * (v101 - v100)
                    + (1.0 - fx) * fy * (v011 - v010)
                    + fx * fy * (v111 - v110));
        }
        gm[i] = if ax.inside { dx } else { 0.0 };
        gm[n + i] = if ay.inside { dy } else { 0.0 };
        gm[2 * n + i] = if az.inside { dz } else { 0.0 };
    }
    Ok((grad_src, grad_map))
}

/// Resamples `src` through the affine alone; equals
/// `trilinear_warp(src, compose(phi_A, 0))`. Used to build the
/// registration-stream input, never the final warped output.
pub fn affine_align(src: &Volume, phi_a: &AffineTransform) -> Volume {
    let zero = DisplacementField::zeros(src.grid(), src.spacing_mm());
    trilinear_warp(src, &compose(phi_a, &zero))
}
