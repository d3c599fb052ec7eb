//! The two network streams: a segmentation encoder–decoder ending in
//! per-structure sigmoid sub-branches, and a registration encoder–decoder
//! ending in a three-kernel head that yields the local displacement.
//!
//! Both are mirror-symmetric U-Nets with skip connections at each scale;
//! the graph is fixed, and reverse-mode gradients are spelled out by hand
//! layer by layer. Parameters live in one flat arena per stream so the
//! optimizer and checkpointing stay trivial.

pub mod checkpoint;
pub mod layers;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::volume::{Dims, SegKind, SegmentationSet, Volume};
use crate::warp::DisplacementField;
use layers::{
    conv_backward, conv_forward, leaky_relu_backward, leaky_relu_forward, maxpool2_backward,
    maxpool2_forward, norm_backward, norm_forward, sigmoid_backward, sigmoid_forward,
    upsample2_backward, upsample2_forward, ConvSpec, NormCache, NormSpec,
};

/// What the final stage produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// One 1³-conv + sigmoid sub-branch per structure; channels are
    /// independent so labels may overlap.
    SegBranches { structures: usize },
    /// A single 1³ convolution with exactly three kernels, emitting the
    /// displacement components.
    RegField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of pooling levels; spatial dims must divide by 2^depth.
    pub depth: usize,
    pub convs_per_block: usize,
    pub head: HeadKind,
}

impl NetConfig {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.base_width == 0
            || self.depth == 0
            || self.convs_per_block == 0
        {
            return Err(Error::Invalid("network config fields must be positive".into()));
        }
        if let HeadKind::SegBranches { structures } = self.head {
            if structures == 0 {
                return Err(Error::Invalid("need at least one structure".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: ConvSpec,
    norm: NormSpec,
}

/// Architecture description plus arena layout; values are kept separately.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: NetConfig,
    enc: Vec<Vec<ConvBlock>>,
    dec: Vec<Vec<ConvBlock>>,
    heads: Vec<ConvSpec>,
    n_params: usize,
}

struct ArenaBuilder {
    next: usize,
}

impl ArenaBuilder {
    fn conv(&mut self, c_in: usize, c_out: usize, ksize: usize) -> ConvSpec {
        let wlen = c_in * c_out * ksize.pow(3);
        let w = self.next..self.next + wlen;
        let b = w.end..w.end + c_out;
        self.next = b.end;
        ConvSpec {
            c_in,
            c_out,
            ksize,
            w,
            b,
        }
    }

    fn norm(&mut self, channels: usize) -> NormSpec {
        let scale = self.next..self.next + channels;
        let shift = scale.end..scale.end + channels;
        self.next = shift.end;
        NormSpec {
            channels,
            scale,
            shift,
        }
    }

    fn block(&mut self, c_in: usize, c_out: usize) -> ConvBlock {
        ConvBlock {
            conv: self.conv(c_in, c_out, 3),
            norm: self.norm(c_out),
        }
    }
}

impl UNet {
    pub fn new(cfg: NetConfig) -> Result<UNet> {
        cfg.validate()?;
        let mut b = ArenaBuilder { next: 0 };
        let width = |level: usize| cfg.base_width << level;

        let mut enc = Vec::with_capacity(cfg.depth + 1);
        for level in 0..=cfg.depth {
            let mut blocks = Vec::with_capacity(cfg.convs_per_block);
            let c_in = if level == 0 {
                cfg.in_channels
            } else {
                width(level - 1)
            };
            blocks.push(b.block(c_in, width(level)));
            for _ in 1..cfg.convs_per_block {
                blocks.push(b.block(width(level), width(level)));
            }
            enc.push(blocks);
        }

        // Stored per level; applied from depth−1 down to 0.
        let mut dec = vec![Vec::new(); cfg.depth];
        for level in (0..cfg.depth).rev() {
            let mut blocks = Vec::with_capacity(cfg.convs_per_block);
            let c_in = width(level + 1) + width(level);
            blocks.push(b.block(c_in, width(level)));
            for _ in 1..cfg.convs_per_block {
                blocks.push(b.block(width(level), width(level)));
            }
            dec[level] = blocks;
        }

        let heads = match cfg.head {
            HeadKind::SegBranches { structures } => (0..structures)
                .map(|_| b.conv(cfg.base_width, 1, 1))
                .collect(),
            HeadKind::RegField => vec![b.conv(cfg.base_width, 3, 1)],
        };

        Ok(UNet {
            cfg,
            enc,
            dec,
            heads,
            n_params: b.next,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Glorot-uniform kernels (bias zero, norm scale 1 / shift 0),
    /// deterministic per seed.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut values = vec![0.0; self.n_params];
        let mut ordinal = 0u64;
        let mut init_conv = |spec: &ConvSpec, values: &mut Vec<f64>| {
            let (w, b) = glorot_init(
                spec.c_in,
                spec.c_out,
                spec.ksize,
                derive_seed(seed, "glorot", ordinal),
            );
            ordinal += 1;
            values[spec.w.clone()].copy_from_slice(&w);
            values[spec.b.clone()].copy_from_slice(&b);
        };
        for level in &self.enc {
            for block in level {
                init_conv(&block.conv, &mut values);
                values[block.norm.scale.clone()].fill(1.0);
            }
        }
        for level in self.dec.iter().rev() {
            for block in level {
                init_conv(&block.conv, &mut values);
                values[block.norm.scale.clone()].fill(1.0);
            }
        }
        for head in &self.heads {
            init_conv(head, &mut values);
        }
        values
    }

    fn check_input(&self, input: &Volume) -> Result<()> {
        let d = input.dims();
        if d.c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.cfg.in_channels, d.c
            )));
        }
        let div = 1 << self.cfg.depth;
        if d.x % div != 0 || d.y % div != 0 || d.z % div != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {}x{}x{} must divide by 2^depth = {}",
                d.x, d.y, d.z, div
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &Volume) -> Result<(Volume, UNetCache)> {
        self.check_input(input)?;
        assert_eq!(params.len(), self.n_params);
        let mut cache = UNetCache {
            enc: Vec::new(),
            pools: Vec::new(),
            dec: (0..self.cfg.depth).map(|_| Vec::new()).collect(),
            up_in_dims: vec![Dims::new(0, 0, 0, 0); self.cfg.depth],
            head_in: Volume::zeros(Dims::new(1, 1, 1, 1), [1.0; 3]),
            head_sig: Vec::new(),
        };
        let mut skips: Vec<Volume> = Vec::with_capacity(self.cfg.depth);
        let mut cur = input.clone();
        for (level, blocks) in self.enc.iter().enumerate() {
            let mut level_cache = Vec::with_capacity(blocks.len());
            for block in blocks {
                let (out, bc) = block_forward(params, block, &cur);
                level_cache.push(bc);
                cur = out;
            }
            cache.enc.push(level_cache);
            if level < self.cfg.depth {
                skips.push(cur.clone());
                let (pooled, argmax) = maxpool2_forward(&cur)?;
                cache.pools.push((argmax, cur.dims()));
                cur = pooled;
            }
        }
        for level in (0..self.cfg.depth).rev() {
            cache.up_in_dims[level] = cur.dims();
            let up = upsample2_forward(&cur);
            cur = Volume::concat_channels(&[&up, &skips[level]])?;
            let mut level_cache = Vec::new();
            for block in &self.dec[level] {
                let (out, bc) = block_forward(params, block, &cur);
                level_cache.push(bc);
                cur = out;
            }
            cache.dec[level] = level_cache;
        }
        cache.head_in = cur;
        let out = match self.cfg.head {
            HeadKind::SegBranches { .. } => {
                let mut chans = Vec::with_capacity(self.heads.len());
                for head in &self.heads {
                    let logits = conv_forward(params, head, &cache.head_in);
                    let s = sigmoid_forward(&logits);
                    cache.head_sig.push(s.clone());
                    chans.push(s);
                }
                let refs: Vec<&Volume> = chans.iter().collect();
                Volume::concat_channels(&refs)?
            }
            HeadKind::RegField => conv_forward(params, &self.heads[0], &cache.head_in),
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for `grad_out` into `grad_params`
    /// (callers zero the buffer). Forward activations must come from the
    /// same `params` and input.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &UNetCache,
        grad_out: &Volume,
        grad_params: &mut [f64],
    ) -> Result<()> {
        assert_eq!(params.len(), self.n_params);
        assert_eq!(grad_params.len(), self.n_params);
        let head_grid = cache.head_in.grid();
        if grad_out.grid() != head_grid {
            return Err(Error::Shape("backward: stale cache for grad_out".into()));
        }
        // Head.
        let mut g = match self.cfg.head {
            HeadKind::SegBranches { structures } => {
                if grad_out.dims().c != structures {
                    return Err(Error::Shape("backward: head channel mismatch".into()));
                }
                let n = head_grid.len();
                let mut g_in = cache.head_in.zeros_like();
                for (k, head) in self.heads.iter().enumerate() {
                    let mut gk = Volume::zeros(
                        Dims::new(head_grid.x, head_grid.y, head_grid.z, 1),
                        grad_out.spacing_mm(),
                    );
                    gk.voxels_mut()
                        .copy_from_slice(&grad_out.voxels()[k * n..(k + 1) * n]);
                    let g_logits = sigmoid_backward(&gk, &cache.head_sig[k]);
                    let gi =
                        conv_backward(params, head, &cache.head_in, &g_logits, grad_params, true)
                            .expect("input grad requested");
                    for (a, b) in g_in.voxels_mut().iter_mut().zip(gi.voxels()) {
                        *a += b;
                    }
                }
                g_in
            }
            HeadKind::RegField => {
                conv_backward(params, &self.heads[0], &cache.head_in, grad_out, grad_params, true)
                    .expect("input grad requested")
            }
        };
        // Decoder: level 0 ran last, unwind upward.
        let mut skip_grads: Vec<Option<Volume>> = vec![None; self.cfg.depth];
        for level in 0..self.cfg.depth {
            for (block, bc) in self.dec[level].iter().zip(&cache.dec[level]).rev() {
                g = block_backward(params, block, bc, &g, grad_params);
            }
            let up_c = self.cfg.base_width << (level + 1);
            let (g_up, g_skip) = split_channels(&g, up_c);
            skip_grads[level] = Some(g_skip);
            g = upsample2_backward(&g_up, cache.up_in_dims[level]);
        }
        // Bottleneck.
        for (block, bc) in self.enc[self.cfg.depth]
            .iter()
            .zip(&cache.enc[self.cfg.depth])
            .rev()
        {
            g = block_backward(params, block, bc, &g, grad_params);
        }
        // Encoder levels, adding the skip contributions.
        for level in (0..self.cfg.depth).rev() {
            let (argmax, pre_pool_dims) = &cache.pools[level];
            g = maxpool2_backward(&g, argmax, *pre_pool_dims);
            if let Some(sg) = &skip_grads[level] {
                for (a, b) in g.voxels_mut().iter_mut().zip(sg.voxels()) {
                    *a += b;
                }
            }
            for (bi, (block, bc)) in self.enc[level]
                .iter()
                .zip(&cache.enc[level])
                .enumerate()
                .rev()
            {
                // The gradient w.r.t. the raw image is never consumed.
                if level == 0 && bi == 0 {
                    block_backward_no_input(params, block, bc, &g, grad_params);
                } else {
                    g = block_backward(params, block, bc, &g, grad_params);
                }
            }
        }
        Ok(())
    }
}

pub struct BlockCache {
    conv_in: Volume,
    norm: NormCache,
    relu_mask: Vec<bool>,
}

pub struct UNetCache {
    enc: Vec<Vec<BlockCache>>,
    pools: Vec<(Vec<usize>, Dims)>,
    dec: Vec<Vec<BlockCache>>,
    up_in_dims: Vec<Dims>,
    head_in: Volume,
    head_sig: Vec<Volume>,
}

fn block_forward(params: &[f64], block: &ConvBlock, input: &Volume) -> (Volume, BlockCache) {
    let conved = conv_forward(params, &block.conv, input);
    let (normed, norm_cache) = norm_forward(params, &block.norm, &conved);
    let (out, mask) = leaky_relu_forward(&normed);
    (
        out,
        BlockCache {
            conv_in: input.clone(),
            norm: norm_cache,
            relu_mask: mask,
        },
    )
}

fn block_backward(
    params: &[f64],
    block: &ConvBlock,
    cache: &BlockCache,
    grad_out: &Volume,
    grad_params: &mut [f64],
) -> Volume {
    let g = leaky_relu_backward(grad_out, &cache.relu_mask);
    let g = norm_backward(params, &block.norm, &cache.norm, &g, grad_params);
    conv_backward(params, &block.conv, &cache.conv_in, &g, grad_params, true)
        .expect("input grad requested")
}

fn block_backward_no_input(
    params: &[f64],
    block: &ConvBlock,
    cache: &BlockCache,
    grad_out: &Volume,
    grad_params: &mut [f64],
) {
    let g = leaky_relu_backward(grad_out, &cache.relu_mask);
    let g = norm_backward(params, &block.norm, &cache.norm, &g, grad_params);
    conv_backward(params, &block.conv, &cache.conv_in, &g, grad_params, false);
}

fn split_channels(v: &Volume, c_first: usize) -> (Volume, Volume) {
    let d = v.dims();
    let n = d.spatial_len();
    let first = Volume::new(
        Dims::new(d.x, d.y, d.z, c_first),
        v.spacing_mm(),
        v.voxels()[..c_first * n].to_vec(),
    )
    .expect("split shape");
    let second = Volume::new(
        Dims::new(d.x, d.y, d.z, d.c - c_first),
        v.spacing_mm(),
        v.voxels()[c_first * n..].to_vec(),
    )
    .expect("split shape");
    (first, second)
}

/// Glorot-uniform kernel initialization: samples Uniform(−L, L) with
/// L = √(6/(fan_in + fan_out)), fans counted over kernel volume × channels.
/// Bias is zero. Deterministic per seed.
pub fn glorot_init(c_in: usize, c_out: usize, ksize: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let k3 = ksize.pow(3);
    let fan_in = (k3 * c_in) as f64;
    let fan_out = (k3 * c_out) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..c_in * c_out * k3)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    (w, vec![0.0; c_out])
}

/// One trainable stream: architecture plus its flat parameter values.
#[derive(Debug, Clone)]
pub struct StreamParams {
    pub net: UNet,
    pub values: Vec<f64>,
}

impl StreamParams {
    pub fn init(cfg: NetConfig, seed: u64) -> Result<StreamParams> {
        let net = UNet::new(cfg)?;
        let values = net.init_params(seed);
        Ok(StreamParams { net, values })
    }
}

/// The full trainable bundle: Θ (segmentation stream) and Ψ (registration
/// stream). Single-stream pipelines leave the other side empty.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub theta: Option<StreamParams>,
    pub psi: Option<StreamParams>,
}

impl ModelParams {
    /// Initializes the requested streams. Stream sub-seeds are derived
    /// from `seed` by role only, so Θ starts identically whether or not a
    /// Ψ stream exists alongside it.
    pub fn init(seg: Option<NetConfig>, reg: Option<NetConfig>, seed: u64) -> Result<ModelParams> {
        let theta = seg
            .map(|cfg| StreamParams::init(cfg, derive_seed(seed, "theta", 0)))
            .transpose()?;
        let psi = reg
            .map(|cfg| StreamParams::init(cfg, derive_seed(seed, "psi", 0)))
            .transpose()?;
        Ok(ModelParams { theta, psi })
    }

    pub fn theta(&self) -> Result<&StreamParams> {
        self.theta
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no segmentation stream".into()))
    }

    pub fn psi(&self) -> Result<&StreamParams> {
        self.psi
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no registration stream".into()))
    }
}

/// Runs the segmentation stream; output is a K-channel probabilistic map
/// on the input grid.
pub fn seg_forward(stream: &StreamParams, image: &Volume) -> Result<(SegmentationSet, UNetCache)> {
    if !matches!(stream.net.cfg.head, HeadKind::SegBranches { .. }) {
        return Err(Error::Invalid("seg_forward on a non-segmentation stream".into()));
    }
    let (out, cache) = stream.net.forward(&stream.values, image)?;
    Ok((SegmentationSet::new(out, SegKind::Probabilistic)?, cache))
}

/// Runs the registration stream on the concatenated (target,
/// affine-aligned source) pair; output is the local displacement in
/// target-grid voxels.
pub fn reg_forward(
    stream: &StreamParams,
    target_img: &Volume,
    source_aligned: &Volume,
) -> Result<(DisplacementField, UNetCache)> {
    if !matches!(stream.net.cfg.head, HeadKind::RegField) {
        return Err(Error::Invalid("reg_forward on a non-registration stream".into()));
    }
    if target_img.dims().c != 1 || source_aligned.dims().c != 1 {
        return Err(Error::Shape("registration inputs must be single-channel".into()));
    }
    if target_img.dims() != source_aligned.dims() {
        return Err(Error::Shape("registration input dims differ".into()));
    }
    let stacked = Volume::concat_channels(&[target_img, source_aligned])?;
    let (out, cache) = stream.net.forward(&stream.values, &stacked)?;
    Ok((DisplacementField::new(out)?, cache))
}
