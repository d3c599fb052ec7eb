//! The four training loss terms and their weighted sum.
//!
//! Every term comes in a value-only and a value+gradient flavor; the
//! gradient flavors are what the trainer wires into backpropagation, and
//! all of them are checked against central finite differences in
//! [`crate::check`].

use crate::error::{Error, Result};
use crate::volume::{SegmentationSet, Volume};
use crate::warp::{trilinear_warp, trilinear_warp_grad, DisplacementField, SamplingMap};

/// Denominator smoothing for the soft Dice terms.
pub const DICE_EPS: f64 = 1e-7;
/// Warped segmentation predictions are clipped to [CLIP_LO, 1−CLIP_LO]
/// before entering the composite Dice sums.
pub const CLIP_LO: f64 = 1e-7;

/// Epoch schedule for the loss weights: α ramps linearly and saturates,
/// β tracks α at a fixed ratio, γ is constant.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightSchedule {
    pub alpha0: f64,
    pub alpha_step: f64,
    pub alpha_max: f64,
    pub beta_ratio: f64,
    pub gamma: f64,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        WeightSchedule {
            alpha0: 10.0,
            alpha_step: 4.0,
            alpha_max: 100.0,
            beta_ratio: 0.01,
            gamma: 1.0,
        }
    }
}

impl WeightSchedule {
    /// Constant weights (no ramp), as used when the registration stream is
    /// trained on its own.
    pub fn constant(alpha: f64, beta_ratio: f64, gamma: f64) -> Self {
        WeightSchedule {
            alpha0: alpha,
            alpha_step: 0.0,
            alpha_max: alpha,
            beta_ratio,
            gamma,
        }
    }

    pub fn alpha(&self, epoch: u32) -> f64 {
        (self.alpha0 + self.alpha_step * epoch as f64).min(self.alpha_max)
    }

    pub fn beta(&self, epoch: u32) -> f64 {
        self.beta_ratio * self.alpha(epoch)
    }

    pub fn weights_at(&self, epoch: u32) -> (f64, f64, f64) {
        (self.alpha(epoch), self.beta(epoch), self.gamma)
    }
}

/// One evaluated loss with its components and the weights in force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_reg: f64,
    pub l_def: f64,
    pub l_com: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown {
            l_seg: 0.0,
            l_reg: 0.0,
            l_def: 0.0,
            l_com: 0.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            total: 0.0,
        }
    }
}

/// total = l_seg + α(e)·l_reg + β(e)·l_def + γ·l_com at the scheduled
/// weights for `epoch`.
pub fn total_loss(
    l_seg: f64,
    l_reg: f64,
    l_def: f64,
    l_com: f64,
    schedule: &WeightSchedule,
    epoch: u32,
) -> LossBreakdown {
    let (alpha, beta, gamma) = schedule.weights_at(epoch);
    LossBreakdown {
        l_seg,
        l_reg,
        l_def,
        l_com,
        alpha,
        beta,
        gamma,
        total: l_seg + alpha * l_reg + beta * l_def + gamma * l_com,
    }
}

fn check_same_seg_shape(a: &SegmentationSet, b: &SegmentationSet) -> Result<()> {
    if a.volume().dims() != b.volume().dims() {
        return Err(Error::Shape(format!(
            "segmentation dims differ: {:?} vs {:?}",
            a.volume().dims(),
            b.volume().dims()
        )));
    }
    Ok(())
}

fn soft_dice_impl(truth: &Volume, pred: &Volume) -> (f64, Vec<f64>, Vec<f64>) {
    let k = truth.dims().c;
    let n = truth.dims().spatial_len();
    let mut numer = vec![0.0; k];
    let mut denom = vec![0.0; k];
    for c in 0..k {
        let s = truth.channel(c);
        let p = pred.channel(c);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            num += s[i] * p[i];
            den += s[i] * s[i] + p[i] * p[i];
        }
        numer[c] = num;
        denom[c] = den + DICE_EPS;
    }
    let value = -(2.0 / k as f64) * numer.iter().zip(&denom).map(|(n, d)| n / d).sum::<f64>();
    (value, numer, denom)
}

/// Negative mean soft Dice over the K structures:
/// −(2/K)·Σ_k Σ(S_k·Ŝ_k) / (Σ S_k² + Σ Ŝ_k² + ε). Range (−1, 0].
pub fn soft_dice_loss(truth: &SegmentationSet, pred: &SegmentationSet) -> Result<f64> {
    check_same_seg_shape(truth, pred)?;
    Ok(soft_dice_impl(truth.volume(), pred.volume()).0)
}

/// Soft Dice plus the gradient with respect to the prediction.
pub fn soft_dice_loss_grad(
    truth: &SegmentationSet,
    pred: &SegmentationSet,
) -> Result<(f64, Volume)> {
    check_same_seg_shape(truth, pred)?;
    let (value, grad) = soft_dice_value_and_grad_raw(truth.volume(), pred.volume());
    Ok((value, grad))
}

/// Gradient form shared by the plain and composite Dice terms; `pred` here
/// is whatever enters the sums directly (possibly warped + clipped).
fn soft_dice_value_and_grad_raw(truth: &Volume, pred: &Volume) -> (f64, Volume) {
    let (value, numer, denom) = soft_dice_impl(truth, pred);
    let k = truth.dims().c;
    let n = truth.dims().spatial_len();
    let scale = -(2.0 / k as f64);
    let mut grad = pred.zeros_like();
    for c in 0..k {
        let s = truth.channel(c);
        let p = pred.channel(c);
        let g = grad.channel_mut(c);
        let (num, den) = (numer[c], denom[c]);
        let inv_den = 1.0 / den;
        let inv_den2 = inv_den * inv_den;
        for i in 0..n {
            // d/dp of num/den with den = Σs² + Σp² + ε.
            g[i] = scale * (s[i] * den - 2.0 * p[i] * num) * inv_den2;
        }
    }
    (value, grad)
}

fn check_same_volume_shape(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "volume dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared intensity error, averaged over all voxels and channels.
pub fn mse_loss(target: &Volume, warped: &Volume) -> Result<f64> {
    check_same_volume_shape(target, warped)?;
    let n = target.voxels().len() as f64;
    let sum: f64 = target
        .voxels()
        .iter()
        .zip(warped.voxels())
        .map(|(t, w)| (t - w) * (t - w))
        .sum();
    Ok(sum / n)
}

/// MSE plus gradient with respect to the warped image.
pub fn mse_loss_grad(target: &Volume, warped: &Volume) -> Result<(f64, Volume)> {
    check_same_volume_shape(target, warped)?;
    let n = target.voxels().len() as f64;
    let mut grad = warped.zeros_like();
    let mut sum = 0.0;
    for ((g, t), w) in grad
        .voxels_mut()
        .iter_mut()
        .zip(target.voxels())
        .zip(warped.voxels())
    {
        let d = w - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Mean squared spatial gradient of the displacement,
/// (1/|Ω_t|)·Σ_x ‖∇u(x)‖², with ∇ realized as forward differences and a
/// zero difference on the trailing slice of each axis.
pub fn smoothness_loss(u: &DisplacementField) -> Result<f64> {
    Ok(smoothness_impl(u, None)?)
}

/// Smoothness plus gradient with respect to the displacement.
pub fn smoothness_loss_grad(u: &DisplacementField) -> Result<(f64, Volume)> {
    let mut grad = u.volume().zeros_like();
    let value = smoothness_impl(u, Some(&mut grad))?;
    Ok((value, grad))
}

fn smoothness_impl(u: &DisplacementField, mut grad: Option<&mut Volume>) -> Result<f64> {
    let g = u.grid();
    if g.x < 2 || g.y < 2 || g.z < 2 {
        return Err(Error::Invalid(
            "smoothness needs at least 2 voxels along each axis".into(),
        ));
    }
    let n = g.len();
    let inv_n = 1.0 / n as f64;
    let strides = [1usize, g.x, g.x * g.y];
    let lens = [g.x, g.y, g.z];
    let vox = u.volume().voxels();
    let mut total = 0.0;
    for comp in 0..3 {
        let base = comp * n;
        for axis in 0..3 {
            let stride = strides[axis];
            let mut i = 0;
            for z in 0..g.z {
                for y in 0..g.y {
                    for x in 0..g.x {
                        let pos = [x, y, z];
                        if pos[axis] + 1 < lens[axis] {
                            let d = vox[base + i + stride] - vox[base + i];
                            total += d * d;
                            if let Some(gr) = grad.as_deref_mut() {
                                let gvox = gr.voxels_mut();
                                gvox[base + i] -= 2.0 * d * inv_n;
                                gvox[base + i + stride] += 2.0 * d * inv_n;
                            }
                        }
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(total * inv_n)
}

/// Longitudinal composite term: soft Dice between the target ground truth
/// and the warped (clipped) source prediction. This is the term whose
/// gradients reach both network streams at once.
pub fn composite_dice_loss(
    truth_t: &SegmentationSet,
    pred_s: &SegmentationSet,
    map: &SamplingMap,
) -> Result<f64> {
    composite_dice_impl(truth_t, pred_s, map, false).map(|(v, _, _)| v)
}

/// Composite Dice plus gradients with respect to the source prediction and
/// the sampling map.
pub fn composite_dice_loss_grad(
    truth_t: &SegmentationSet,
    pred_s: &SegmentationSet,
    map: &SamplingMap,
) -> Result<(f64, Volume, Volume)> {
    composite_dice_impl(truth_t, pred_s, map, true)
        .map(|(v, gp, gm)| (v, gp.expect("grads requested"), gm.expect("grads requested")))
}

fn composite_dice_impl(
    truth_t: &SegmentationSet,
    pred_s: &SegmentationSet,
    map: &SamplingMap,
    want_grads: bool,
) -> Result<(f64, Option<Volume>, Option<Volume>)> {
    let k = truth_t.num_structures();
    if pred_s.num_structures() != k {
        return Err(Error::Shape(format!(
            "structure counts differ: {} vs {}",
            k,
            pred_s.num_structures()
        )));
    }
    if truth_t.volume().grid() != map.grid() {
        return Err(Error::Shape(
            "target truth and sampling map grids differ".into(),
        ));
    }
    // The one interpolation this term performs, producing the warped
    // source prediction in target space.
    let warped = trilinear_warp(pred_s.volume(), map);
    let mut clipped = warped.clone();
    for v in clipped.voxels_mut() {
        *v = v.clamp(CLIP_LO, 1.0 - CLIP_LO);
    }
    if !want_grads {
        return Ok((soft_dice_impl(truth_t.volume(), &clipped).0, None, None));
    }
    let (value, mut grad_warped) = soft_dice_value_and_grad_raw(truth_t.volume(), &clipped);
    // Clip is identity inside (lo, hi) and flat outside.
    for (g, w) in grad_warped.voxels_mut().iter_mut().zip(warped.voxels()) {
        if !(*w > CLIP_LO && *w < 1.0 - CLIP_LO) {
            *g = 0.0;
        }
    }
    let (grad_pred, grad_map) = trilinear_warp_grad(pred_s.volume(), map, &grad_warped)?;
    Ok((value, Some(grad_pred), Some(grad_map)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, GridDomain, SegKind};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cube_mask(dims: Dims, x0: usize, extent: usize) -> SegmentationSet {
        let mut v = Volume::zeros(dims, [1.0; 3]);
        for z in 0..extent {
            for y in 0..extent {
                for x in x0..x0 + extent {
                    v.set(x, y, z, 0, 1.0);
                }
            }
        }
        SegmentationSet::new(v, SegKind::Binary).unwrap()
    }

    #[test]
    fn soft_dice_of_identical_binary_masks_is_minus_one() {
        let dims = Dims::new(6, 6, 6, 3);
        let mut v = Volume::zeros(dims, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for x in v.voxels_mut() {
            *x = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
        }
        let s = SegmentationSet::new(v, SegKind::Binary).unwrap();
        let l = soft_dice_loss(&s, &s).unwrap();
        assert!((l + 1.0).abs() < 1e-6);
    }

    #[test]
    fn soft_dice_of_disjoint_masks_is_zero() {
        let dims = Dims::new(8, 4, 4, 1);
        let a = cube_mask(dims, 0, 2);
        let b = cube_mask(dims, 4, 2);
        let l = soft_dice_loss(&a, &b).unwrap();
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn soft_dice_half_overlap_hand_case() {
        // Two 8-voxel cubes overlapping in 4 voxels:
        // −2·4/(8+8) = −0.5.
        let dims = Dims::new(8, 2, 2, 1);
        let a = cube_mask(dims, 0, 2); // x in {0,1}, 8 voxels
        let b = cube_mask(dims, 1, 2); // x in {1,2}, 8 voxels, overlap 4
        let l = soft_dice_loss(&a, &b).unwrap();
        assert!((l + 0.5).abs() < 1e-6);
    }

    #[test]
    fn soft_dice_rejects_channel_mismatch() {
        let a = cube_mask(Dims::new(4, 4, 4, 1), 0, 2);
        let v = Volume::zeros(Dims::new(4, 4, 4, 2), [1.0; 3]);
        let b = SegmentationSet::new(v, SegKind::Binary).unwrap();
        assert!(soft_dice_loss(&a, &b).is_err());
    }

    #[test]
    fn soft_dice_range_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dims = Dims::new(4, 4, 4, 2);
            let mut t = Volume::zeros(dims, [1.0; 3]);
            let mut p = Volume::zeros(dims, [1.0; 3]);
            for x in t.voxels_mut() {
                *x = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            }
            for x in p.voxels_mut() {
                *x = rng.gen_range(0.0..=1.0);
            }
            let t = SegmentationSet::new(t, SegKind::Binary).unwrap();
            let p = SegmentationSet::new(p, SegKind::Probabilistic).unwrap();
            let l = soft_dice_loss(&t, &p).unwrap();
            assert!(l > -1.0 && l <= 0.0, "loss {} out of range", l);
        }
    }

    #[test]
    fn mse_hand_cases() {
        let dims = Dims::new(2, 1, 1, 1);
        let t = Volume::new(dims, [1.0; 3], vec![1.0, 2.0]).unwrap();
        let w = Volume::new(dims, [1.0; 3], vec![0.0, 0.0]).unwrap();
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        assert!((mse_loss(&t, &w).unwrap() - 2.5).abs() < 1e-12);

        let ones = Volume::new(dims, [1.0; 3], vec![1.0, 1.0]).unwrap();
        let zeros = Volume::new(dims, [1.0; 3], vec![0.0, 0.0]).unwrap();
        assert!((mse_loss(&ones, &zeros).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_of_constant_field_is_zero() {
        let mut u = DisplacementField::zeros(GridDomain::new(4, 4, 4), [1.0; 3]);
        for x in u.volume_mut().voxels_mut() {
            *x = 2.5;
        }
        assert_eq!(smoothness_loss(&u).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_linear_ramp_hand_case() {
        // u_x(x,y,z) = x on a 4³ grid: 48 unit forward differences over 64
        // voxels → 0.75.
        let g = GridDomain::new(4, 4, 4);
        let mut u = DisplacementField::zeros(g, [1.0; 3]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let i = (z * 4 + y) * 4 + x;
                    u.volume_mut().voxels_mut()[i] = x as f64;
                }
            }
        }
        assert!((smoothness_loss(&u).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn smoothness_matches_brute_force_oracle() {
        let g = GridDomain::new(5, 4, 6);
        let mut u = DisplacementField::zeros(g, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for x in u.volume_mut().voxels_mut() {
            *x = rng.gen_range(-2.0..2.0);
        }
        // Independent per-voxel loop over all 9 gradient entries.
        let mut want = 0.0;
        let n = g.len();
        let get = |comp: usize, x: usize, y: usize, z: usize| {
            u.volume().voxels()[comp * n + (z * g.y + y) * g.x + x]
        };
        for comp in 0..3 {
            for z in 0..g.z {
                for y in 0..g.y {
                    for x in 0..g.x {
                        let v = get(comp, x, y, z);
                        if x + 1 < g.x {
                            let d = get(comp, x + 1, y, z) - v;
                            want += d * d;
                        }
                        if y + 1 < g.y {
                            let d = get(comp, x, y + 1, z) - v;
                            want += d * d;
                        }
                        if z + 1 < g.z {
                            let d = get(comp, x, y, z + 1) - v;
                            want += d * d;
                        }
                    }
                }
            }
        }
        want /= n as f64;
        assert!((smoothness_loss(&u).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn smoothness_is_translation_invariant() {
        let g = GridDomain::new(4, 5, 4);
        let mut u = DisplacementField::zeros(g, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for x in u.volume_mut().voxels_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let base = smoothness_loss(&u).unwrap();
        let n = g.len();
        let shift = [0.7, -1.2, 3.0];
        for comp in 0..3 {
            for i in 0..n {
                u.volume_mut().voxels_mut()[comp * n + i] += shift[comp];
            }
        }
        assert_eq!(smoothness_loss(&u).unwrap(), base);
    }

    #[test]
    fn smoothness_rejects_degenerate_dims() {
        let u = DisplacementField::zeros(GridDomain::new(1, 4, 4), [1.0; 3]);
        assert!(smoothness_loss(&u).is_err());
    }

    #[test]
    fn composite_reduces_to_soft_dice_under_identity_map() {
        let dims = Dims::new(6, 6, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut t = Volume::zeros(dims, [1.0; 3]);
        for x in t.voxels_mut() {
            *x = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
        }
        let truth = SegmentationSet::new(t, SegKind::Binary).unwrap();
        let mut p = Volume::zeros(dims, [1.0; 3]);
        for x in p.voxels_mut() {
            *x = rng.gen_range(0.05..0.95);
        }
        let pred = SegmentationSet::new(p, SegKind::Probabilistic).unwrap();
        let map = SamplingMap::identity(truth.volume().grid(), [1.0; 3]);
        let com = composite_dice_loss(&truth, &pred, &map).unwrap();
        let plain = soft_dice_loss(&truth, &pred).unwrap();
        assert!((com - plain).abs() < 1e-12);

        // Identical binary masks through the identity map → −1.
        let self_dice = composite_dice_loss(&truth, &truth.clone(), &map).unwrap();
        assert!((self_dice + 1.0).abs() < 1e-5);
    }

    #[test]
    fn total_loss_schedule_and_hand_case() {
        let sched = WeightSchedule::default();
        assert_eq!(sched.alpha(0), 10.0);
        assert!((sched.beta(0) - 0.1).abs() < 1e-12);
        assert_eq!(sched.alpha(30), 100.0);
        assert!((sched.beta(30) - 1.0).abs() < 1e-12);

        let b = total_loss(-1.0, 0.5, 0.2, -1.0, &sched, 0);
        assert!((b.total - 3.02).abs() < 1e-12);
        assert!(
            (b.total - (b.l_seg + b.alpha * b.l_reg + b.beta * b.l_def + b.gamma * b.l_com)).abs()
                < 1e-9
        );
    }

    #[test]
    fn alpha_schedule_is_monotone_and_capped() {
        let sched = WeightSchedule::default();
        let mut prev = 0.0;
        for e in 0..60 {
            let a = sched.alpha(e);
            assert!(a >= prev);
            assert!(a <= 100.0);
            prev = a;
        }
        assert_eq!(sched.alpha(59), 100.0);
    }
}
