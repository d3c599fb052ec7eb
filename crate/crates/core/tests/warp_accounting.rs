//! Interpolation-count accounting. Lives in its own test binary so the
//! process-global warp counter sees no other traffic: each warped output
//! of a training step must come from exactly one interpolation of the
//! original source through the composite map, never a chain.

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use segreg_core::net::{HeadKind, ModelParams, NetConfig};
use segreg_core::train::{sample_loss_and_grads, LossWeights, TrainMode, TrainSample};
use segreg_core::volume::{AffineTransform, Dims, SegKind, SegmentationSet, Volume};
use segreg_core::warp::warp_call_count;

fn rand_volume(dims: Dims, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Volume {
    let mut v = Volume::zeros(dims, [1.0; 3]);
    for x in v.voxels_mut() {
        *x = rng.gen_range(lo..hi);
    }
    v
}

#[test]
fn one_interpolation_per_warped_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d1 = Dims::new(8, 8, 8, 1);
    let dc = Dims::new(8, 8, 8, 3);
    let dk = Dims::new(8, 8, 8, 2);
    let bin = |rng: &mut ChaCha8Rng| {
        let mut v = Volume::zeros(dk, [1.0; 3]);
        for x in v.voxels_mut() {
            *x = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
        }
        SegmentationSet::new(v, SegKind::Binary).unwrap()
    };
    let img_s = rand_volume(d1, &mut rng, -1.0, 1.0);
    let img_t = rand_volume(d1, &mut rng, -1.0, 1.0);
    let seg_img_s = rand_volume(dc, &mut rng, -1.0, 1.0);
    let seg_s = bin(&mut rng);
    let seg_t = bin(&mut rng);

    let before_assembly = warp_call_count();
    let sample = TrainSample::assemble(
        "probe",
        img_s,
        img_t,
        seg_img_s,
        seg_s,
        seg_t,
        AffineTransform::translation([0.5, 0.0, -0.25]),
    )
    .unwrap();
    // Assembly aligns the source image through the affine once.
    assert_eq!(warp_call_count() - before_assembly, 1);

    let seg_cfg = NetConfig {
        in_channels: 3,
        base_width: 4,
        depth: 2,
        convs_per_block: 1,
        head: HeadKind::SegBranches { structures: 2 },
    };
    let reg_cfg = NetConfig {
        in_channels: 2,
        base_width: 4,
        depth: 2,
        convs_per_block: 1,
        head: HeadKind::RegField,
    };
    let model = ModelParams::init(Some(seg_cfg), Some(reg_cfg), 11).unwrap();
    let w = LossWeights {
        seg: 1.0,
        alpha: 10.0,
        beta: 0.1,
        gamma: 1.0,
    };

    // One full forward+backward step: exactly one interpolation for the
    // warped image and one for the warped segmentation.
    let before_step = warp_call_count();
    let (_, g_theta, g_psi) = sample_loss_and_grads(&model, &sample, &w, TrainMode::Joint);
    assert!(g_theta.is_some() && g_psi.is_some());
    assert_eq!(warp_call_count() - before_step, 2);

    // The registration-only objective warps the image once.
    let wr = LossWeights {
        seg: 0.0,
        alpha: 10.0,
        beta: 0.1,
        gamma: 0.0,
    };
    let before_reg = warp_call_count();
    let _ = sample_loss_and_grads(&model, &sample, &wr, TrainMode::Reg);
    assert_eq!(warp_call_count() - before_reg, 1);
}
