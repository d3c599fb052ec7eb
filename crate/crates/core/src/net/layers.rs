//! Differentiable layer primitives: 3³/1³ convolutions, per-sample
//! normalization, activations, pooling, and trilinear upsampling.
//!
//! All layers operate on channel-plane volumes (each channel's spatial
//! block contiguous, x fastest). Convolutions parallelize over output
//! channels; every output element is accumulated in a fixed sequential
//! order, so results are bitwise independent of the thread count.

use std::ops::Range;

use rayon::prelude::*;

use crate::volume::{Dims, GridDomain, Volume};

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Variance floor inside the normalization layer.
pub const NORM_EPS: f64 = 1e-5;

/// One convolution layer: weights stored co-major as
/// `w[co][ci][kz][ky][kx]`, bias right after the weights in the arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub w: Range<usize>,
    pub b: Range<usize>,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.c_in * self.c_out * self.ksize.pow(3)
    }
}

/// Per-channel scale/shift of the normalization layer, stored adjacently
/// (scale then shift).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormSpec {
    pub channels: usize,
    pub scale: Range<usize>,
    pub shift: Range<usize>,
}

#[inline(always)]
fn axis_window(len: usize, off: isize) -> (usize, usize) {
    let start = if off < 0 { (-off) as usize } else { 0 };
    let end = len - if off > 0 { off as usize } else { 0 };
    (start, end)
}

/// dst[p] += w · src[p + off] over the in-bounds overlap.
fn axpy_shifted(dst: &mut [f64], src: &[f64], g: GridDomain, off: [isize; 3], w: f64) {
    let (xs, xe) = axis_window(g.x, off[0]);
    let (ys, ye) = axis_window(g.y, off[1]);
    let (zs, ze) = axis_window(g.z, off[2]);
    if xs >= xe || ys >= ye || zs >= ze {
        return;
    }
    for z in zs..ze {
        let sz = (z as isize + off[2]) as usize;
        for y in ys..ye {
            let sy = (y as isize + off[1]) as usize;
            let drow = (z * g.y + y) * g.x;
            let srow = ((sz * g.y + sy) * g.x) as isize + off[0];
            let d = &mut dst[drow + xs..drow + xe];
            let s = &src[(srow + xs as isize) as usize..(srow + xe as isize) as usize];
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv += w * sv;
            }
        }
    }
}

/// Σ_p a[p] · b[p + off] over the in-bounds overlap, accumulated in four
/// fixed lanes for vectorization without changing results across runs.
fn dot_shifted(a: &[f64], b: &[f64], g: GridDomain, off: [isize; 3]) -> f64 {
    let (xs, xe) = axis_window(g.x, off[0]);
    let (ys, ye) = axis_window(g.y, off[1]);
    let (zs, ze) = axis_window(g.z, off[2]);
    if xs >= xe || ys >= ye || zs >= ze {
        return 0.0;
    }
    let mut lanes = [0.0f64; 4];
    let mut tail = 0.0f64;
    for z in zs..ze {
        let sz = (z as isize + off[2]) as usize;
        for y in ys..ye {
            let sy = (y as isize + off[1]) as usize;
            let arow = (z * g.y + y) * g.x;
            let brow = ((sz * g.y + sy) * g.x) as isize + off[0];
            let av = &a[arow + xs..arow + xe];
            let bv = &b[(brow + xs as isize) as usize..(brow + xe as isize) as usize];
            let mut ac = av.chunks_exact(4);
            let mut bc = bv.chunks_exact(4);
            for (ca, cb) in (&mut ac).zip(&mut bc) {
                lanes[0] += ca[0] * cb[0];
                lanes[1] += ca[1] * cb[1];
                lanes[2] += ca[2] * cb[2];
                lanes[3] += ca[3] * cb[3];
            }
            for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
                tail += x * y;
            }
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn kernel_offsets(ksize: usize) -> Vec<[isize; 3]> {
    let half = (ksize / 2) as isize;
    let mut out = Vec::with_capacity(ksize.pow(3));
    for kz in 0..ksize as isize {
        for ky in 0..ksize as isize {
            for kx in 0..ksize as isize {
                out.push([kx - half, ky - half, kz - half]);
            }
        }
    }
    out
}

/// dst[x] += wm·src[x−1] + w0·src[x] + wp·src[x+1], zero beyond the row.
#[inline(always)]
fn stencil3_row(dst: &mut [f64], src: &[f64], wm: f64, w0: f64, wp: f64) {
    let n = dst.len();
    if n == 1 {
        dst[0] += w0 * src[0];
        return;
    }
    dst[0] += w0 * src[0] + wp * src[1];
    let interior = &mut dst[1..n - 1];
    for (d, ((a, b), c)) in interior
        .iter_mut()
        .zip(src[..n - 2].iter().zip(&src[1..n - 1]).zip(&src[2..]))
    {
        *d += wm * a + w0 * b + wp * c;
    }
    dst[n - 1] += wm * src[n - 2] + w0 * src[n - 1];
}

/// All three x-taps of one (kz, ky) kernel slice over the valid (z, y)
/// window.
fn stencil3_plane(dst: &mut [f64], src: &[f64], g: GridDomain, dy: isize, dz: isize, w: [f64; 3]) {
    let (ys, ye) = axis_window(g.y, dy);
    let (zs, ze) = axis_window(g.z, dz);
    for z in zs..ze {
        let sz = (z as isize + dz) as usize;
        for y in ys..ye {
            let sy = (y as isize + dy) as usize;
            let drow = (z * g.y + y) * g.x;
            let srow = (sz * g.y + sy) * g.x;
            stencil3_row(
                &mut dst[drow..drow + g.x],
                &src[srow..srow + g.x],
                w[0],
                w[1],
                w[2],
            );
        }
    }
}

/// Same-size cross-correlation with bias (zero padding for 3³ kernels).
pub fn conv_forward(params: &[f64], spec: &ConvSpec, input: &Volume) -> Volume {
    assert_eq!(input.dims().c, spec.c_in, "conv input channel mismatch");
    let g = input.grid();
    let n = g.len();
    let k3 = spec.ksize.pow(3);
    let w = &params[spec.w.clone()];
    let b = &params[spec.b.clone()];
    let iv = input.voxels();
    let mut out = Volume::zeros(
        Dims::new(g.x, g.y, g.z, spec.c_out),
        input.spacing_mm(),
    );
    out.voxels_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(co, dst)| {
            dst.fill(b[co]);
            for ci in 0..spec.c_in {
                let src = &iv[ci * n..(ci + 1) * n];
                let wbase = (co * spec.c_in + ci) * k3;
                if spec.ksize == 3 {
                    for kz in 0..3isize {
                        for ky in 0..3isize {
                            let t = (kz * 3 + ky) as usize * 3;
                            stencil3_plane(
                                dst,
                                src,
                                g,
                                ky - 1,
                                kz - 1,
                                [w[wbase + t], w[wbase + t + 1], w[wbase + t + 2]],
                            );
                        }
                    }
                } else {
                    axpy_shifted(dst, src, g, [0, 0, 0], w[wbase]);
                }
            }
        });
    out
}

/// Backward pass. Accumulates weight/bias gradients into the conv's slice
/// of `grad_params` and, when requested, returns the gradient with respect
/// to the layer input.
pub fn conv_backward(
    params: &[f64],
    spec: &ConvSpec,
    input: &Volume,
    grad_out: &Volume,
    grad_params: &mut [f64],
    want_input_grad: bool,
) -> Option<Volume> {
    let g = input.grid();
    let n = g.len();
    let k3 = spec.ksize.pow(3);
    let offsets = kernel_offsets(spec.ksize);
    let iv = input.voxels();
    let gv = grad_out.voxels();

    // Weight and bias gradients; the two ranges are adjacent in the arena.
    {
        let slice = &mut grad_params[spec.w.start..spec.b.end];
        let wlen = spec.weight_len();
        let (gw, gb) = slice.split_at_mut(wlen);
        gw.par_chunks_mut(spec.c_in * k3)
            .enumerate()
            .for_each(|(co, chunk)| {
                let up = &gv[co * n..(co + 1) * n];
                for ci in 0..spec.c_in {
                    let src = &iv[ci * n..(ci + 1) * n];
                    for (t, off) in offsets.iter().enumerate() {
                        chunk[ci * k3 + t] += dot_shifted(up, src, g, *off);
                    }
                }
            });
        for co in 0..spec.c_out {
            gb[co] += gv[co * n..(co + 1) * n].iter().sum::<f64>();
        }
    }

    if !want_input_grad {
        return None;
    }
    let w = &params[spec.w.clone()];
    let mut grad_in = input.zeros_like();
    grad_in
        .voxels_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(ci, dst)| {
            for co in 0..spec.c_out {
                let up = &gv[co * n..(co + 1) * n];
                let wbase = (co * spec.c_in + ci) * k3;
                if spec.ksize == 3 {
                    // Transpose pass: tap kx contributes to x − (kx−1).
                    for kz in 0..3isize {
                        for ky in 0..3isize {
                            let t = (kz * 3 + ky) as usize * 3;
                            stencil3_plane(
                                dst,
                                up,
                                g,
                                1 - ky,
                                1 - kz,
                                [w[wbase + t + 2], w[wbase + t + 1], w[wbase + t]],
                            );
                        }
                    }
                } else {
                    axpy_shifted(dst, up, g, [0, 0, 0], w[wbase]);
                }
            }
        });
    Some(grad_in)
}

pub struct NormCache {
    pub xhat: Volume,
    pub istd: Vec<f64>,
}

/// Per-sample, per-channel normalization over the spatial voxels:
/// (x − μ)/√(σ² + ε), then scale·x̂ + shift.
pub fn norm_forward(params: &[f64], spec: &NormSpec, input: &Volume) -> (Volume, NormCache) {
    let n = input.dims().spatial_len();
    let scale = &params[spec.scale.clone()];
    let shift = &params[spec.shift.clone()];
    let mut xhat = input.zeros_like();
    let mut out = input.zeros_like();
    let mut istd = vec![0.0; spec.channels];
    for c in 0..spec.channels {
        let x = input.channel(c);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        istd[c] = is;
        let xh = xhat.channel_mut(c);
        for (h, v) in xh.iter_mut().zip(x) {
            *h = (v - mean) * is;
        }
        let o = out.channel_mut(c);
        for (ov, h) in o.iter_mut().zip(xhat.channel(c)) {
            *ov = scale[c] * h + shift[c];
        }
    }
    (out, NormCache { xhat, istd })
}

pub fn norm_backward(
    params: &[f64],
    spec: &NormSpec,
    cache: &NormCache,
    grad_out: &Volume,
    grad_params: &mut [f64],
) -> Volume {
    let n = cache.xhat.dims().spatial_len();
    let scale = &params[spec.scale.clone()];
    let mut grad_in = grad_out.zeros_like();
    let slice = &mut grad_params[spec.scale.start..spec.shift.end];
    let (gscale, gshift) = slice.split_at_mut(spec.channels);
    for c in 0..spec.channels {
        let dy = grad_out.channel(c);
        let xh = cache.xhat.channel(c);
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for (d, h) in dy.iter().zip(xh) {
            sum_dy += d;
            sum_dy_xh += d * h;
        }
        gscale[c] += sum_dy_xh;
        gshift[c] += sum_dy;
        let m1 = sum_dy / n as f64;
        let m2 = sum_dy_xh / n as f64;
        let k = scale[c] * cache.istd[c];
        let gi = grad_in.channel_mut(c);
        for ((g, d), h) in gi.iter_mut().zip(dy).zip(xh) {
            *g = k * (d - m1 - h * m2);
        }
    }
    grad_in
}

/// max(x, 0.2·x), with the positive-side mask kept for backward.
pub fn leaky_relu_forward(input: &Volume) -> (Volume, Vec<bool>) {
    let mut out = input.clone();
    let mut mask = vec![false; input.voxels().len()];
    for (v, m) in out.voxels_mut().iter_mut().zip(mask.iter_mut()) {
        *m = *v >= 0.0;
        if !*m {
            *v *= LEAKY_SLOPE;
        }
    }
    (out, mask)
}

pub fn leaky_relu_backward(grad_out: &Volume, mask: &[bool]) -> Volume {
    let mut g = grad_out.clone();
    for (v, m) in g.voxels_mut().iter_mut().zip(mask) {
        if !*m {
            *v *= LEAKY_SLOPE;
        }
    }
    g
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid_forward(input: &Volume) -> Volume {
    let mut out = input.clone();
    for v in out.voxels_mut() {
        *v = sigmoid(*v);
    }
    out
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_backward(grad_out: &Volume, output: &Volume) -> Volume {
    let mut g = grad_out.clone();
    for (v, s) in g.voxels_mut().iter_mut().zip(output.voxels()) {
        *v *= s * (1.0 - s);
    }
    g
}

/// 2× max pooling. Requires even spatial dims; caches the winning input
/// index (first maximum in scan order) per output voxel.
pub fn maxpool2_forward(input: &Volume) -> crate::error::Result<(Volume, Vec<usize>)> {
    let d = input.dims();
    if d.x % 2 != 0 || d.y % 2 != 0 || d.z % 2 != 0 {
        return Err(crate::error::Error::Shape(format!(
            "maxpool2 needs even spatial dims, got {}x{}x{}",
            d.x, d.y, d.z
        )));
    }
    let og = GridDomain::new(d.x / 2, d.y / 2, d.z / 2);
    let n_in = d.spatial_len();
    let n_out = og.len();
    let mut out = Volume::zeros(Dims::new(og.x, og.y, og.z, d.c), input.spacing_mm());
    let mut argmax = vec![0usize; n_out * d.c];
    let iv = input.voxels();
    let ov = out.voxels_mut();
    for c in 0..d.c {
        let src = &iv[c * n_in..(c + 1) * n_in];
        let mut oi = 0;
        for z in 0..og.z {
            for y in 0..og.y {
                for x in 0..og.x {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((2 * z + dz) * d.y + 2 * y + dy) * d.x + 2 * x + dx;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    ov[c * n_out + oi] = best;
                    argmax[c * n_out + oi] = best_i;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(grad_out: &Volume, argmax: &[usize], in_dims: Dims) -> Volume {
    let n_in = in_dims.spatial_len();
    let n_out = grad_out.dims().spatial_len();
    let mut grad_in = Volume::zeros(in_dims, grad_out.spacing_mm());
    let gv = grad_in.voxels_mut();
    let ov = grad_out.voxels();
    for c in 0..in_dims.c {
        for i in 0..n_out {
            gv[c * n_in + argmax[c * n_out + i]] += ov[c * n_out + i];
        }
    }
    grad_in
}

/// Per-axis interpolation table for 2× trilinear upsampling: output index
/// i samples the input at (i + 0.5)/2 − 0.5, clamped.
fn upsample_axis(out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let in_len = out_len / 2;
    (0..out_len)
        .map(|i| {
            let c = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = (c.floor() as usize).min(in_len.saturating_sub(2));
            let i1 = (i0 + 1).min(in_len - 1);
            let f = c - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Doubles each spatial dim by trilinear interpolation.
pub fn upsample2_forward(input: &Volume) -> Volume {
    let d = input.dims();
    let og = GridDomain::new(d.x * 2, d.y * 2, d.z * 2);
    let tx = upsample_axis(og.x);
    let ty = upsample_axis(og.y);
    let tz = upsample_axis(og.z);
    let n_in = d.spatial_len();
    let n_out = og.len();
    let iv = input.voxels();
    let mut out = Volume::zeros(Dims::new(og.x, og.y, og.z, d.c), input.spacing_mm());
    let ov = out.voxels_mut();
    for c in 0..d.c {
        let src = &iv[c * n_in..(c + 1) * n_in];
        let dst = &mut ov[c * n_out..(c + 1) * n_out];
        let mut oi = 0;
        for &(z0, z1, wz0, wz1) in &tz {
            for &(y0, y1, wy0, wy1) in &ty {
                let r00 = (z0 * d.y + y0) * d.x;
                let r10 = (z0 * d.y + y1) * d.x;
                let r01 = (z1 * d.y + y0) * d.x;
                let r11 = (z1 * d.y + y1) * d.x;
                for &(x0, x1, wx0, wx1) in &tx {
                    let v00 = wx0 * src[r00 + x0] + wx1 * src[r00 + x1];
                    let v10 = wx0 * src[r10 + x0] + wx1 * src[r10 + x1];
                    let v01 = wx0 * src[r01 + x0] + wx1 * src[r01 + x1];
                    let v11 = wx0 * src[r11 + x0] + wx1 * src[r11 + x1];
                    dst[oi] = wz0 * (wy0 * v00 + wy1 * v10) + wz1 * (wy0 * v01 + wy1 * v11);
                    oi += 1;
                }
            }
        }
    }
    out
}

/// Transpose of [`upsample2_forward`]: scatters output gradients back
/// through the same interpolation weights.
pub fn upsample2_backward(grad_out: &Volume, in_dims: Dims) -> Volume {
    let og = grad_out.grid();
    let tx = upsample_axis(og.x);
    let ty = upsample_axis(og.y);
    let tz = upsample_axis(og.z);
    let n_in = in_dims.spatial_len();
    let n_out = og.len();
    let mut grad_in = Volume::zeros(in_dims, grad_out.spacing_mm());
    let gv = grad_in.voxels_mut();
    let ov = grad_out.voxels();
    for c in 0..in_dims.c {
        let dst = &mut gv[c * n_in..(c + 1) * n_in];
        let src = &ov[c * n_out..(c + 1) * n_out];
        let mut oi = 0;
        for &(z0, z1, wz0, wz1) in &tz {
            for &(y0, y1, wy0, wy1) in &ty {
                let r00 = (z0 * in_dims.y + y0) * in_dims.x;
                let r10 = (z0 * in_dims.y + y1) * in_dims.x;
                let r01 = (z1 * in_dims.y + y0) * in_dims.x;
                let r11 = (z1 * in_dims.y + y1) * in_dims.x;
                for &(x0, x1, wx0, wx1) in &tx {
                    let g = src[oi];
                    dst[r00 + x0] += g * wz0 * wy0 * wx0;
                    dst[r00 + x1] += g * wz0 * wy0 * wx1;
                    dst[r10 + x0] += g * wz0 * wy1 * wx0;
                    dst[r10 + x1] += g * wz0 * wy1 * wx1;
                    dst[r01 + x0] += g * wz1 * wy0 * wx0;
                    dst[r01 + x1] += g * wz1 * wy0 * wx1;
                    dst[r11 + x0] += g * wz1 * wy1 * wx0;
                    dst[r11 + x1] += g * wz1 * wy1 * wx1;
                    oi += 1;
                }
            }
        }
    }
    grad_in
}
