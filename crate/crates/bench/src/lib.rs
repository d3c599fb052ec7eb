//! Shared fixtures for the benchmarks.

use segreg_core::net::{HeadKind, ModelParams, NetConfig};
use segreg_core::synth::{make_pair, SynthConfig};
use segreg_core::train::TrainSample;
use segreg_core::volume::normalize_image;

/// Desk-scale sample + jointly sized model, as the training loop sees them.
pub fn desk_scale_fixture(width: usize) -> (ModelParams, TrainSample) {
    let cfg = SynthConfig::default();
    let pair = make_pair(&cfg, 7).expect("default config generates");
    let sample = TrainSample::assemble(
        "bench",
        normalize_image(&pair.source.fa).expect("textured"),
        normalize_image(&pair.target.fa).expect("textured"),
        normalize_image(&pair.source.seg_image).expect("textured"),
        pair.source.seg.clone(),
        pair.target.seg.clone(),
        pair.affine,
    )
    .expect("consistent pair");
    let seg = NetConfig {
        in_channels: cfg.image_channels,
        base_width: width,
        depth: 2,
        convs_per_block: 1,
        head: HeadKind::SegBranches {
            structures: cfg.structures,
        },
    };
    let reg = NetConfig {
        in_channels: 2,
        base_width: width,
        depth: 2,
        convs_per_block: 1,
        head: HeadKind::RegField,
    };
    let model = ModelParams::init(Some(seg), Some(reg), 7).expect("valid configs");
    (model, sample)
}
