//! Finite-difference verification of every analytic gradient in the crate.
//!
//! The oracle side only ever evaluates loss values, never the analytic
//! gradient code, so the two routes stay independent. The same suite backs
//! the `gradcheck` CLI command and the test suites.

/// Central finite-difference gradient of a scalar function, perturbing one
/// coordinate at a time: (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h.
pub fn fd_gradient<F>(f: &F, x: &mut [f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x);
        x[i] = orig - h;
        let fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max over coordinates of |a−b| / max(|a|, |b|, 1e-6).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Relative error of two scalars with an absolute floor.
pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// One named gradient check outcome.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    fn evaluate(name: &str, err: f64, tol: f64, fault: Option<&str>) -> CheckReport {
        // Fault-injection hook: corrupt the measured error for the named
        // op so harness failures are themselves testable.
        let err = if fault == Some(name) { err + 10.0 * tol } else { err };
        CheckReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
            pass: err < tol,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{:<28} max_rel_err={:.3e} tol={:.1e} {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::loss;
use crate::net::{HeadKind, ModelParams, NetConfig};
use crate::train::{sample_loss, sample_loss_and_grads, LossWeights, TrainMode, TrainSample};
use crate::volume::{AffineTransform, Dims, GridDomain, SegKind, SegmentationSet, Volume};
use crate::warp::{warp_kernel, DisplacementField, SamplingMap};

const LOSS_TOL: f64 = 1e-4;
const NET_TOL: f64 = 1e-3;

fn random_volume(dims: Dims, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Volume {
    let mut v = Volume::zeros(dims, [1.0; 3]);
    for x in v.voxels_mut() {
        *x = rng.gen_range(lo..hi);
    }
    v
}

fn random_prob_seg(dims: Dims, rng: &mut ChaCha8Rng) -> SegmentationSet {
    let v = random_volume(dims, rng, 0.05, 0.95);
    SegmentationSet::new(v, SegKind::Probabilistic).unwrap()
}

/// Identity plus fractional offsets, kept clear of cell boundaries and the
/// border so central differences stay on one linear piece.
fn interior_map(grid: GridDomain, rng: &mut ChaCha8Rng) -> SamplingMap {
    let id = SamplingMap::identity(grid, [1.0; 3]);
    let mut v = id.into_volume();
    let n = grid.len();
    let lens = [grid.x, grid.y, grid.z];
    for axis in 0..3 {
        for i in 0..n {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let off = sign * rng.gen_range(0.1..0.4);
            let idx = axis * n + i;
            let vox = v.voxels_mut();
            vox[idx] = (vox[idx] + off).clamp(0.6, lens[axis] as f64 - 1.6);
        }
    }
    SamplingMap::new(v).unwrap()
}

fn check_warp_src(rng: &mut ChaCha8Rng, fault: Option<&str>) -> CheckReport {
    let dims = Dims::new(6, 6, 6, 2);
    let src = random_volume(dims, rng, -1.0, 1.0);
    let map = interior_map(src.grid(), rng);
    let upstream = random_volume(dims, rng, -1.0, 1.0);
    let (gs, _) = crate::warp::trilinear_warp_grad(&src, &map, &upstream).unwrap();
    let f = |vals: &[f64]| {
        let v = Volume::new(dims, [1.0; 3], vals.to_vec()).unwrap();
        warp_kernel(&v, &map)
            .voxels()
            .iter()
            .zip(upstream.voxels())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut x = src.voxels().to_vec();
    let fd = fd_gradient(&f, &mut x, 1e-4);
    CheckReport::evaluate("warp_grad_src", max_rel_err(gs.voxels(), &fd), LOSS_TOL, fault)
}

fn check_warp_map(rng: &mut ChaCha8Rng, fault: Option<&str>) -> CheckReport {
    let dims = Dims::new(6, 6, 6, 2);
    let src = random_volume(dims, rng, -1.0, 1.0);
    let map = interior_map(src.grid(), rng);
    let upstream = random_volume(dims, rng, -1.0, 1.0);
    let (_, gm) = crate::warp::trilinear_warp_grad(&src, &map, &upstream).unwrap();
    let f = |vals: &[f64]| {
        let v = Volume::new(map.volume().dims(), [1.0; 3], vals.to_vec()).unwrap();
        let m = SamplingMap::new(v).unwrap();
        warp_kernel(&src, &m)
            .voxels()
            .iter()
            .zip(upstream.voxels())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut x = map.volume().voxels().to_vec();
    let fd = fd_gradient(&f, &mut x, 1e-4);
    CheckReport::evaluate("warp_grad_map", max_rel_err(gm.voxels(), &fd), LOSS_TOL, fault)
}

fn check_soft_dice(rng: &mut ChaCha8Rng, fault: Option<&str>) -> CheckReport {
    let dims = Dims::new(6, 6, 6, 3);
    let truth = random_prob_seg(dims, rng);
    let pred = random_prob_seg(dims, rng);
    let (_, grad) = loss::soft_dice_loss_grad(&truth, &pred).unwrap();
    let f = |vals: &[f64]| {
        let v = Volume::new(dims, [1.0; 3], vals.to_vec()).unwrap();
        let p = SegmentationSet::new(v, SegKind::Probabilistic).unwrap();
        loss::soft_dice_loss(&truth, &p).unwrap()
    };
    let mut x = pred.volume().voxels().to_vec();
    let fd = fd_gradient(&f, &mut x, 1e-4);
    CheckReport::evaluate("soft_dice_loss", max_rel_err(grad.voxels(), &fd), LOSS_TOL, fault)
}

fn check_mse(rng: &mut ChaCha8Rng, fault: Option<&str>) -> CheckReport {
    let dims = Dims::new(6, 6, 6, 1);
    let target = random_volume(dims, rng, -1.0, 1.0);
    let warped = random_volume(dims, rng, -1.0, 1.0);
    let (_, grad) = loss::mse_loss_grad(&target, &warped).unwrap();
    let f = |vals: &[f64]| {
        let v = Volume::new(dims, [1.0; 3], vals.to_vec()).unwrap();
        loss::mse_loss(&target, &v).unwrap()
    };
    let mut x = warped.voxels().to_vec();
    let fd = fd_gradient(&f, &mut x, 1e-4);
    CheckReport::evaluate("mse_loss", max_rel_err(grad.voxels(), &fd), LOSS_TOL, fault)
}

fn check_smoothness(rng: &mut ChaCha8Rng, fault: Option<&str>) -> CheckReport {
    let g = GridDomain::new(6, 6, 6);
    let mut u = DisplacementField::zeros(g, [1.0; 3]);
    for x in u.volume_mut().voxels_mut() {
        *x = rng.gen_range(-1.5..1.5);
    }
    let (_, grad) = loss::smoothness_loss_grad(&u).unwrap();
    let f = |vals: &[f64]| {
        let v = Volume::new(Dims::new(g.x, g.y, g.z, 3), [1.0; 3], vals.to_vec()).unwrap();
        loss::smoothness_loss(&DisplacementField::new(v).unwrap()).unwrap()
    };
    let mut x = u.volume().voxels().to_vec();
    let fd = fd_gradient(&f, &mut x, 1e-4);
    CheckReport::evaluate("smoothness_loss", max_rel_err(grad.voxels(), &fd), LOSS_TOL, fault)
}

fn check_composite(rng: &mut ChaCha8Rng, fault: Option<&str>) -> (CheckReport, CheckReport) {
    let dims = Dims::new(6, 6, 6, 2);
    let truth = random_prob_seg(dims, rng).binarize(0.5);
    let pred = random_prob_seg(dims, rng);
    let map = interior_map(truth.volume().grid(), rng);
    let (_, g_pred, g_map) = loss::composite_dice_loss_grad(&truth, &pred, &map).unwrap();

    let f_pred = |vals: &[f64]| {
        let v = Volume::new(dims, [1.0; 3], vals.to_vec()).unwrap();
        let p = SegmentationSet::new(v, SegKind::Probabilistic).unwrap();
        loss::composite_dice_loss(&truth, &p, &map).unwrap()
    };
    let mut xp = pred.volume().voxels().to_vec();
    let fd_pred = fd_gradient(&f_pred, &mut xp, 1e-4);
    let r1 = CheckReport::evaluate(
        "composite_dice_grad_pred",
        max_rel_err(g_pred.voxels(), &fd_pred),
        LOSS_TOL,
        fault,
    );

    let f_map = |vals: &[f64]| {
        let v = Volume::new(map.volume().dims(), [1.0; 3], vals.to_vec()).unwrap();
        let m = SamplingMap::new(v).unwrap();
        loss::composite_dice_loss(&truth, &pred, &m).unwrap()
    };
    let mut xm = map.volume().voxels().to_vec();
    let fd_map = fd_gradient(&f_map, &mut xm, 1e-4);
    let r2 = CheckReport::evaluate(
        "composite_dice_grad_map",
        max_rel_err(g_map.voxels(), &fd_map),
        LOSS_TOL,
        fault,
    );
    (r1, r2)
}

/// Random toy sample + model for the full-network probes.
fn toy_setup(seed: u64) -> (ModelParams, TrainSample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = GridDomain::new(8, 8, 8);
    let k = 2;
    let c_img = 3;
    let seg_cfg = NetConfig {
        in_channels: c_img,
        base_width: 4,
        depth: 2,
        convs_per_block: 1,
        head: HeadKind::SegBranches { structures: k },
    };
    let reg_cfg = NetConfig {
        in_channels: 2,
        base_width: 4,
        depth: 2,
        convs_per_block: 1,
        head: HeadKind::RegField,
    };
    let model = ModelParams::init(Some(seg_cfg), Some(reg_cfg), seed ^ 0x5eed)
        .expect("valid toy configs");

    let d1 = Dims::new(dims.x, dims.y, dims.z, 1);
    let dk = Dims::new(dims.x, dims.y, dims.z, k);
    let dc = Dims::new(dims.x, dims.y, dims.z, c_img);
    let img_s = random_volume(d1, &mut rng, -1.0, 1.0);
    let img_t = random_volume(d1, &mut rng, -1.0, 1.0);
    let seg_img_s = random_volume(dc, &mut rng, -1.0, 1.0);
    let mk_bin = |rng: &mut ChaCha8Rng| {
        let mut v = Volume::zeros(dk, [1.0; 3]);
        for x in v.voxels_mut() {
            *x = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
        }
        SegmentationSet::new(v, SegKind::Binary).unwrap()
    };
    let seg_s = mk_bin(&mut rng);
    let seg_t = mk_bin(&mut rng);
    let affine = AffineTransform::translation([0.3, -0.2, 0.1]);
    let sample = TrainSample::assemble("probe", img_s, img_t, seg_img_s, seg_s, seg_t, affine)
        .unwrap();
    (model, sample)
}

/// Directional-derivative probe through the whole fixed graph at the given
/// loss weights: compares gᵀd against (L(p+hd) − L(p−hd)) / 2h.
fn network_probe(
    name: &str,
    weights: LossWeights,
    seed: u64,
    fault: Option<&str>,
) -> CheckReport {
    let (model, sample) = toy_setup(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f);
    let (_, g_theta, g_psi) = sample_loss_and_grads(&model, &sample, &weights, TrainMode::Joint);
    let g_theta = g_theta.expect("joint mode yields theta grads");
    let g_psi = g_psi.expect("joint mode yields psi grads");

    let n_theta = model.theta.as_ref().unwrap().values.len();
    let n_psi = model.psi.as_ref().unwrap().values.len();
    let mut dir: Vec<f64> = (0..n_theta + n_psi)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut dir {
        *v /= norm;
    }

    let analytic: f64 = g_theta
        .iter()
        .chain(g_psi.iter())
        .zip(&dir)
        .map(|(g, d)| g * d)
        .sum();

    let h = 1e-5;
    let eval = |scale: f64| {
        let mut m = model.clone();
        {
            let th = &mut m.theta.as_mut().unwrap().values;
            for (p, d) in th.iter_mut().zip(&dir[..n_theta]) {
                *p += scale * d;
            }
        }
        {
            let ps = &mut m.psi.as_mut().unwrap().values;
            for (p, d) in ps.iter_mut().zip(&dir[n_theta..]) {
                *p += scale * d;
            }
        }
        sample_loss(&m, &sample, &weights, TrainMode::Joint).total
    };
    let fd = (eval(h) - eval(-h)) / (2.0 * h);
    CheckReport::evaluate(name, rel_err_scalar(analytic, fd), NET_TOL, fault)
}

/// Runs the whole verification suite. `reps` draws that many independent
/// seeds; `fault` corrupts the named check to exercise failure reporting.
pub fn run_all(seed: u64, reps: u32, fault: Option<&str>) -> Vec<CheckReport> {
    let mut out = Vec::new();
    for rep in 0..reps.max(1) {
        let s = seed.wrapping_add(rep as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        out.push(check_warp_src(&mut rng, fault));
        out.push(check_warp_map(&mut rng, fault));
        out.push(check_soft_dice(&mut rng, fault));
        out.push(check_mse(&mut rng, fault));
        out.push(check_smoothness(&mut rng, fault));
        let (a, b) = check_composite(&mut rng, fault);
        out.push(a);
        out.push(b);
        // Term-wise probes plus the weighted total.
        out.push(network_probe(
            "network_seg_term",
            LossWeights { seg: 1.0, alpha: 0.0, beta: 0.0, gamma: 0.0 },
            s,
            fault,
        ));
        out.push(network_probe(
            "network_reg_term",
            LossWeights { seg: 0.0, alpha: 1.0, beta: 0.0, gamma: 0.0 },
            s,
            fault,
        ));
        out.push(network_probe(
            "network_def_term",
            LossWeights { seg: 0.0, alpha: 0.0, beta: 1.0, gamma: 0.0 },
            s,
            fault,
        ));
        out.push(network_probe(
            "network_com_term",
            LossWeights { seg: 0.0, alpha: 0.0, beta: 0.0, gamma: 1.0 },
            s,
            fault,
        ));
        out.push(network_probe(
            "network_total",
            LossWeights { seg: 1.0, alpha: 10.0, beta: 0.1, gamma: 1.0 },
            s,
            fault,
        ));
    }
    out
}
