//! Manual field-statistics probe; ignored by default.
use segreg_core::loss::smoothness_loss;
use segreg_core::synth::{generate_deformation, SynthConfig};

#[test]
#[ignore]
fn field_stats() {
    for (sg, a) in [(3.0, 3.0), (4.0, 3.0), (5.0, 2.5), (6.0, 2.5), (7.0, 2.5)] {
        let cfg = SynthConfig { sigma_g: sg, amplitude: a, ..SynthConfig::default() };
        let mut means = Vec::new();
        let mut defs = Vec::new();
        for seed in 0..6 {
            let (u, _) = generate_deformation(&cfg, seed).unwrap();
            means.push(u.mean_norm());
            defs.push(smoothness_loss(&u).unwrap());
        }
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let d = defs.iter().sum::<f64>() / defs.len() as f64;
        println!("sigma_g {sg} A {a}: mean ||u|| = {:.3}, l_def(u_gt) = {:.4} (beta=1 cost {:.3})", m, d, d);
    }
}
