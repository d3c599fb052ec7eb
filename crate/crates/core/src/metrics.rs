//! Longitudinal evaluation metrics: overlap, spatial correlation,
//! spatio-temporal consistency, chance-corrected agreement, scan–rescan
//! measurement error, sample-size ratios, tract-wise measures, and
//! prediction post-processing.

use crate::error::{Error, Result};
use crate::volume::{Dims, GridDomain, SegKind, SegmentationSet, Volume};
use crate::warp::{trilinear_warp, SamplingMap};

fn binary_channel<'a>(s: &'a SegmentationSet, k: usize) -> Result<&'a [f64]> {
    if s.kind() != SegKind::Binary {
        return Err(Error::Invalid("metric requires a binary segmentation".into()));
    }
    if k >= s.num_structures() {
        return Err(Error::Invalid(format!("channel {k} out of range")));
    }
    Ok(s.volume().channel(k))
}

/// Hard Dice overlap 2|A∩B|/(|A|+|B|) for structure `k`; both masks empty
/// counts as perfect agreement.
pub fn dice_coefficient(a: &SegmentationSet, b: &SegmentationSet, k: usize) -> Result<f64> {
    if a.volume().dims() != b.volume().dims() {
        return Err(Error::Shape("dice: dims differ".into()));
    }
    let av = binary_channel(a, k)?;
    let bv = binary_channel(b, k)?;
    let mut inter = 0.0;
    let mut total = 0.0;
    for (x, y) in av.iter().zip(bv) {
        inter += x * y;
        total += x + y;
    }
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}

/// Spatial correlation of two non-negative density maps. The default is
/// the cosine form Σ(J_t·J_s)/(‖J_t‖₂·‖J_s‖₂), under which self-similarity
/// is exactly 1; `literal` switches to the Σ√(J²) (L1) denominator
/// variant for auditability.
pub fn spatial_correlation(j_t: &Volume, j_s_warped: &Volume, literal: bool) -> Result<f64> {
    if j_t.dims() != j_s_warped.dims() {
        return Err(Error::Shape("spatial correlation: dims differ".into()));
    }
    let mut dot = 0.0;
    let mut nt = 0.0;
    let mut ns = 0.0;
    for (a, b) in j_t.voxels().iter().zip(j_s_warped.voxels()) {
        dot += a * b;
        if literal {
            nt += (a * a).sqrt();
            ns += (b * b).sqrt();
        } else {
            nt += a * a;
            ns += b * b;
        }
    }
    let denom = if literal {
        nt * ns
    } else {
        nt.sqrt() * ns.sqrt()
    };
    if denom == 0.0 {
        return Err(Error::Invalid("spatial correlation of a zero-norm map".into()));
    }
    Ok(dot / denom)
}

/// Spatio-temporal consistency for structure `k`: the Dice overlap of the
/// warped source prediction against the target prediction, averaged over
/// the two directions. Probabilistic masks (native and warped) are
/// binarized at 0.5 before the overlap counts.
pub fn stcs(
    pred_t: &SegmentationSet,
    pred_s: &SegmentationSet,
    map_fwd: &SamplingMap,
    map_rev: &SamplingMap,
    k: usize,
) -> Result<f64> {
    let warped_s = SegmentationSet::new(
        clamp_unit(trilinear_warp(pred_s.volume(), map_fwd)),
        SegKind::Probabilistic,
    )?
    .binarize(0.5);
    let warped_t = SegmentationSet::new(
        clamp_unit(trilinear_warp(pred_t.volume(), map_rev)),
        SegKind::Probabilistic,
    )?
    .binarize(0.5);
    let native_t = pred_t.binarize(0.5);
    let native_s = pred_s.binarize(0.5);
    let d1 = dice_coefficient(&native_t, &warped_s, k)?;
    let d2 = dice_coefficient(&native_s, &warped_t, k)?;
    Ok(0.5 * (d1 + d2))
}

fn clamp_unit(mut v: Volume) -> Volume {
    // Trilinear weights are convex, but clamp defensively against
    // floating-point drift before re-wrapping as probabilistic.
    for x in v.voxels_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    v
}

/// Chance-corrected voxel-wise agreement κ = (p_o − p_e)/(1 − p_e) over
/// the domain Ω (the full target grid, or the voxels of `omega_mask`).
pub fn cohens_kappa(
    s_t: &SegmentationSet,
    s_s_warped: &SegmentationSet,
    k: usize,
    omega_mask: Option<&Volume>,
) -> Result<f64> {
    if s_t.volume().dims() != s_s_warped.volume().dims() {
        return Err(Error::Shape("kappa: dims differ".into()));
    }
    let a = binary_channel(s_t, k)?;
    let b = binary_channel(s_s_warped, k)?;
    let mut omega = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut both = 0.0;
    let mut neither = 0.0;
    for i in 0..a.len() {
        if let Some(m) = omega_mask {
            if m.voxels()[i] == 0.0 {
                continue;
            }
        }
        omega += 1.0;
        na += a[i];
        nb += b[i];
        both += a[i] * b[i];
        neither += (1.0 - a[i]) * (1.0 - b[i]);
    }
    if omega == 0.0 {
        return Err(Error::Invalid("kappa: empty domain".into()));
    }
    let p_o = (both + neither) / omega;
    let p_e = (na * nb + (omega - na) * (omega - nb)) / (omega * omega);
    if p_e >= 1.0 {
        return Err(Error::Invalid(
            "kappa degenerate: both masks constant over the domain".into(),
        ));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Landis–Koch style agreement label; the two upper bands are the ones
/// the reports key on.
pub fn kappa_label(kappa: f64) -> &'static str {
    if kappa > 0.80 {
        "almost perfect"
    } else if kappa > 0.60 {
        "substantial"
    } else if kappa > 0.40 {
        "moderate"
    } else if kappa > 0.20 {
        "fair"
    } else if kappa > 0.0 {
        "slight"
    } else {
        "poor"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    VolumeMl,
    MedianFa,
    MedianMd,
}

impl std::fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeasureKind::VolumeMl => write!(f, "volume-ml"),
            MeasureKind::MedianFa => write!(f, "median-FA"),
            MeasureKind::MedianMd => write!(f, "median-MD"),
        }
    }
}

/// Paired scan/rescan measurements of one quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurePair {
    pub m_s: f64,
    pub m_t: f64,
    pub kind: MeasureKind,
}

/// Relative scan–rescan difference ε = 2|m_s − m_t|/(m_s + m_t) × 100%.
pub fn measurement_error(p: &MeasurePair) -> Result<f64> {
    if p.m_s < 0.0 || p.m_t < 0.0 {
        return Err(Error::Invalid("measures must be non-negative".into()));
    }
    let denom = p.m_s + p.m_t;
    if denom == 0.0 {
        return Err(Error::Invalid("measurement error undefined for m_s + m_t = 0".into()));
    }
    Ok(2.0 * (p.m_s - p.m_t).abs() / denom * 100.0)
}

/// Variance/correlation inputs for the sample-size ratio of two pipelines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSizeInput {
    pub sigma_sq_i: f64,
    pub sigma_sq_j: f64,
    pub rho_i: f64,
    pub rho_j: f64,
}

/// P_ij = σ_i²(1−ρ_i) / (σ_j²(1−ρ_j)) × 100%: the relative cohort size
/// pipeline i needs for the statistical power of pipeline j.
pub fn sample_size_percentage(input: &SampleSizeInput) -> Result<f64> {
    if input.sigma_sq_i <= 0.0 || input.sigma_sq_j <= 0.0 {
        return Err(Error::Invalid("variances must be positive".into()));
    }
    for rho in [input.rho_i, input.rho_j] {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::Invalid("correlations must lie in [-1, 1]".into()));
        }
    }
    if input.rho_j >= 1.0 {
        return Err(Error::Invalid(
            "sample size degenerate: reference correlation is 1".into(),
        ));
    }
    Ok(input.sigma_sq_i * (1.0 - input.rho_i) / (input.sigma_sq_j * (1.0 - input.rho_j)) * 100.0)
}

/// Pearson correlation across subjects' scan–rescan pairs.
pub fn pearson_correlation(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return Err(Error::Invalid("correlation needs at least 2 pairs".into()));
    }
    let mean_s = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_t = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vs = 0.0;
    let mut vt = 0.0;
    for (s, t) in pairs {
        cov += (s - mean_s) * (t - mean_t);
        vs += (s - mean_s) * (s - mean_s);
        vt += (t - mean_t) * (t - mean_t);
    }
    if vs == 0.0 || vt == 0.0 {
        return Err(Error::Invalid("correlation undefined for constant measures".into()));
    }
    // Rounding can push |ρ| a few ulps past 1.
    Ok((cov / (vs.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// Sample variance (n−1 denominator) of both sessions' measures pooled
/// into one set.
pub fn pooled_variance(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Invalid("variance needs at least 2 pairs".into()));
    }
    let all: Vec<f64> = pairs.iter().flat_map(|p| [p.0, p.1]).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let ss: f64 = all.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(ss / (n - 1.0))
}

/// Per-structure measures inside a binary mask: volume in ml from the
/// voxel size, and the medians of the non-zero FA/MD values.
pub fn tract_measures(
    seg: &SegmentationSet,
    k: usize,
    fa: &Volume,
    md: &Volume,
    spacing_mm: [f64; 3],
) -> Result<(f64, f64, f64)> {
    if fa.dims().c != 1 || md.dims().c != 1 {
        return Err(Error::Shape("FA/MD maps must be single-channel".into()));
    }
    if fa.grid() != seg.volume().grid() || md.grid() != seg.volume().grid() {
        return Err(Error::Shape("map dims do not match the segmentation".into()));
    }
    let mask = binary_channel(seg, k)?;
    let count = mask.iter().filter(|&&m| m == 1.0).count();
    if count == 0 {
        return Err(Error::Invalid("empty mask has no tract measures".into()));
    }
    let voxel_mm3 = spacing_mm[0] * spacing_mm[1] * spacing_mm[2];
    let volume_ml = count as f64 * voxel_mm3 / 1000.0;
    let median_fa = masked_nonzero_median(mask, fa.voxels())?;
    let median_md = masked_nonzero_median(mask, md.voxels())?;
    Ok((volume_ml, median_fa, median_md))
}

fn masked_nonzero_median(mask: &[f64], values: &[f64]) -> Result<f64> {
    let mut vals: Vec<f64> = mask
        .iter()
        .zip(values)
        .filter(|(m, v)| **m == 1.0 && **v != 0.0)
        .map(|(_, v)| *v)
        .collect();
    if vals.is_empty() {
        return Err(Error::Invalid("all values under the mask are zero".into()));
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = vals.len();
    Ok(if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    })
}

/// How a channel's two components are named after splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelSemantics {
    LeftRight,
    AnteriorPosterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureLabel {
    Left,
    Right,
    Anterior,
    Posterior,
    /// Only one component survived; side assignment is not meaningful.
    Single,
}

#[derive(Debug)]
pub struct PostprocessOutput {
    pub masks: Vec<(StructureLabel, Volume)>,
    pub warning: Option<String>,
}

/// Binarizes channel `k` at 0.5, labels 26-connected components, keeps the
/// two largest, and names them by centroid along the configured axis
/// (larger x → left; larger y → anterior).
pub fn postprocess_prediction(
    prob: &SegmentationSet,
    k: usize,
    semantics: ChannelSemantics,
) -> Result<PostprocessOutput> {
    if k >= prob.num_structures() {
        return Err(Error::Invalid(format!("channel {k} out of range")));
    }
    let g = prob.volume().grid();
    let n = g.len();
    let chan = prob.volume().channel(k);
    let binary: Vec<bool> = chan.iter().map(|&v| v >= 0.5).collect();

    let components = connected_components_26(&binary, g);
    if components.is_empty() {
        return Ok(PostprocessOutput {
            masks: Vec::new(),
            warning: Some(format!("channel {k}: no foreground component")),
        });
    }
    // Two largest by size; scan order breaks ties deterministically.
    let mut order: Vec<usize> = (0..components.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(components[i].len()));
    let kept: Vec<&Vec<usize>> = order.iter().take(2).map(|&i| &components[i]).collect();

    let to_volume = |voxels: &Vec<usize>| {
        let mut v = Volume::zeros(Dims::new(g.x, g.y, g.z, 1), prob.volume().spacing_mm());
        for &i in voxels {
            v.voxels_mut()[i] = 1.0;
        }
        v
    };
    let centroid_along = |voxels: &Vec<usize>, axis: usize| -> f64 {
        let sum: usize = voxels
            .iter()
            .map(|&i| match axis {
                0 => i % g.x,
                1 => (i / g.x) % g.y,
                _ => i / (g.x * g.y),
            })
            .sum();
        sum as f64 / voxels.len() as f64
    };

    if kept.len() == 1 {
        return Ok(PostprocessOutput {
            masks: vec![(StructureLabel::Single, to_volume(kept[0]))],
            warning: Some(format!("channel {k}: only one component found")),
        });
    }
    let axis = match semantics {
        ChannelSemantics::LeftRight => 0,
        ChannelSemantics::AnteriorPosterior => 1,
    };
    let c0 = centroid_along(kept[0], axis);
    let c1 = centroid_along(kept[1], axis);
    let (hi, lo) = if c0 >= c1 {
        (kept[0], kept[1])
    } else {
        (kept[1], kept[0])
    };
    let (hi_label, lo_label) = match semantics {
        ChannelSemantics::LeftRight => (StructureLabel::Left, StructureLabel::Right),
        ChannelSemantics::AnteriorPosterior => {
            (StructureLabel::Anterior, StructureLabel::Posterior)
        }
    };
    let _ = n;
    Ok(PostprocessOutput {
        masks: vec![(hi_label, to_volume(hi)), (lo_label, to_volume(lo))],
        warning: None,
    })
}

/// 26-connected components of a binary mask, as lists of linear voxel
/// indices in discovery order.
pub fn connected_components_26(mask: &[bool], g: GridDomain) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let x = i % g.x;
            let y = (i / g.x) % g.y;
            let z = i / (g.x * g.y);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        let nz = z as i64 + dz;
                        if nx < 0
                            || ny < 0
                            || nz < 0
                            || nx >= g.x as i64
                            || ny >= g.y as i64
                            || nz >= g.z as i64
                        {
                            continue;
                        }
                        let j = ((nz as usize * g.y) + ny as usize) * g.x + nx as usize;
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        components.push(comp);
    }
    components
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn mask_from(dims: Dims, pred: impl Fn(usize, usize, usize) -> bool) -> SegmentationSet {
        let mut v = Volume::zeros(dims, [1.0; 3]);
        for z in 0..dims.z {
            for y in 0..dims.y {
                for x in 0..dims.x {
                    if pred(x, y, z) {
                        v.set(x, y, z, 0, 1.0);
                    }
                }
            }
        }
        SegmentationSet::new(v, SegKind::Binary).unwrap()
    }

    #[test]
    fn dice_hand_cases() {
        let dims = Dims::new(8, 4, 4, 1);
        let a = mask_from(dims, |x, y, z| x < 2 && y < 2 && z < 2);
        let b = mask_from(dims, |x, y, z| (1..3).contains(&x) && y < 2 && z < 2);
        assert_eq!(dice_coefficient(&a, &a, 0).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&a, &b, 0).unwrap(), 0.5);
        let c = mask_from(dims, |x, y, z| x > 4 && y < 2 && z < 2);
        assert_eq!(dice_coefficient(&a, &c, 0).unwrap(), 0.0);
        let empty = mask_from(dims, |_, _, _| false);
        assert_eq!(dice_coefficient(&empty, &empty, 0).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_probabilistic_input() {
        let dims = Dims::new(4, 4, 4, 1);
        let v = Volume::new(dims, [1.0; 3], vec![0.5; 64]).unwrap();
        let p = SegmentationSet::new(v, SegKind::Probabilistic).unwrap();
        let b = mask_from(dims, |x, _, _| x == 0);
        assert!(dice_coefficient(&b, &p, 0).is_err());
    }

    #[test]
    fn spatial_correlation_basics() {
        let dims = Dims::new(4, 4, 4, 1);
        let mut j = Volume::zeros(dims, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in j.voxels_mut() {
            *v = rng.gen_range(0.0..2.0);
        }
        assert!((spatial_correlation(&j, &j, false).unwrap() - 1.0).abs() < 1e-12);

        // Positive scaling never changes the cosine form.
        let mut j2 = j.clone();
        for v in j2.voxels_mut() {
            *v *= 2.0;
        }
        assert!((spatial_correlation(&j, &j2, false).unwrap() - 1.0).abs() < 1e-12);

        // Disjoint supports.
        let a = mask_from(dims, |x, _, _| x < 2);
        let b = mask_from(dims, |x, _, _| x >= 2);
        assert_eq!(
            spatial_correlation(a.volume(), b.volume(), false).unwrap(),
            0.0
        );

        // The literal form does not self-normalize.
        let lit = spatial_correlation(&j, &j, true).unwrap();
        assert!(lit < 1.0);

        let zero = Volume::zeros(dims, [1.0; 3]);
        assert!(spatial_correlation(&j, &zero, false).is_err());
    }

    #[test]
    fn spatial_correlation_matches_bruteforce_oracle() {
        let dims = Dims::new(5, 4, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut a = Volume::zeros(dims, [1.0; 3]);
            let mut b = Volume::zeros(dims, [1.0; 3]);
            for v in a.voxels_mut() {
                *v = rng.gen_range(0.0..3.0);
            }
            for v in b.voxels_mut() {
                *v = rng.gen_range(0.1..3.0);
            }
            let got = spatial_correlation(&a, &b, false).unwrap();
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..dims.len() {
                dot += a.voxels()[i] * b.voxels()[i];
                na += a.voxels()[i].powi(2);
                nb += b.voxels()[i].powi(2);
            }
            assert!((got - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-9);
        }
    }

    #[test]
    fn stcs_identity_cases_and_symmetry() {
        let dims = Dims::new(8, 4, 4, 1);
        let a = mask_from(dims, |x, y, z| x < 2 && y < 2 && z < 2);
        let id = SamplingMap::identity(a.volume().grid(), [1.0; 3]);
        assert_eq!(stcs(&a, &a, &id, &id, 0).unwrap(), 1.0);

        let b = mask_from(dims, |x, y, z| (1..3).contains(&x) && y < 2 && z < 2);
        let v = stcs(&a, &b, &id, &id, 0).unwrap();
        assert_eq!(v, 0.5);
        // Swapping roles (and the two maps) leaves the average unchanged.
        let w = stcs(&b, &a, &id, &id, 0).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn kappa_hand_cases() {
        // |Ω| = 100 as a 10×10×1 grid; 20-voxel masks overlapping in 10.
        let dims = Dims::new(10, 10, 1, 1);
        let t = mask_from(dims, |x, y, _| y < 2 && x < 10 && (y * 10 + x) < 20);
        let s = mask_from(dims, |x, y, _| (10..30).contains(&(y * 10 + x)));
        let kap = cohens_kappa(&t, &s, 0, None).unwrap();
        assert!((kap - 0.375).abs() < 1e-12);

        let ident = cohens_kappa(&t, &t, 0, None).unwrap();
        assert!((ident - 1.0).abs() < 1e-12);

        assert_eq!(kappa_label(0.82), "almost perfect");
        assert_eq!(kappa_label(0.7), "substantial");
        assert_eq!(kappa_label(0.5), "moderate");
    }

    #[test]
    fn kappa_degenerate_constant_masks() {
        let dims = Dims::new(4, 4, 4, 1);
        let empty = mask_from(dims, |_, _, _| false);
        assert!(cohens_kappa(&empty, &empty, 0, None).is_err());
        let full = mask_from(dims, |_, _, _| true);
        assert!(cohens_kappa(&full, &full, 0, None).is_err());
    }

    #[test]
    fn kappa_matches_bruteforce_oracle() {
        let dims = Dims::new(6, 5, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = {
                let mut v = Volume::zeros(dims, [1.0; 3]);
                for x in v.voxels_mut() {
                    *x = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
                }
                SegmentationSet::new(v, SegKind::Binary).unwrap()
            };
            let b = {
                let mut v = Volume::zeros(dims, [1.0; 3]);
                for x in v.voxels_mut() {
                    *x = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
                }
                SegmentationSet::new(v, SegKind::Binary).unwrap()
            };
            let n = dims.len() as f64;
            let mut agree = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..dims.len() {
                let (x, y) = (a.volume().voxels()[i], b.volume().voxels()[i]);
                if x == y {
                    agree += 1.0;
                }
                na += x;
                nb += y;
            }
            let p_o = agree / n;
            let p_e = (na * nb + (n - na) * (n - nb)) / (n * n);
            if p_e >= 1.0 {
                continue;
            }
            let want = (p_o - p_e) / (1.0 - p_e);
            let got = cohens_kappa(&a, &b, 0, None).unwrap();
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn measurement_error_cases() {
        let p = |m_s, m_t| MeasurePair { m_s, m_t, kind: MeasureKind::VolumeMl };
        assert_eq!(measurement_error(&p(3.0, 3.0)).unwrap(), 0.0);
        assert!((measurement_error(&p(1.1, 0.9)).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(measurement_error(&p(5.0, 0.0)).unwrap(), 200.0);
        assert!(measurement_error(&p(0.0, 0.0)).is_err());
        // Symmetric by construction.
        let e1 = measurement_error(&p(1.3, 0.4)).unwrap();
        let e2 = measurement_error(&p(0.4, 1.3)).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn sample_size_cases_and_reciprocity() {
        let p = sample_size_percentage(&SampleSizeInput {
            sigma_sq_i: 1.0,
            sigma_sq_j: 2.0,
            rho_i: 0.5,
            rho_j: 0.5,
        })
        .unwrap();
        assert!((p - 50.0).abs() < 1e-12);

        let q = sample_size_percentage(&SampleSizeInput {
            sigma_sq_i: 1.5,
            sigma_sq_j: 1.5,
            rho_i: 0.9,
            rho_j: 0.8,
        })
        .unwrap();
        assert!((q - 50.0).abs() < 1e-12);

        // Self-comparison is 100%.
        let own = sample_size_percentage(&SampleSizeInput {
            sigma_sq_i: 2.3,
            sigma_sq_j: 2.3,
            rho_i: 0.7,
            rho_j: 0.7,
        })
        .unwrap();
        assert_eq!(own, 100.0);

        // Reciprocity P_ij·P_ji = 10⁴.
        let fwd = sample_size_percentage(&SampleSizeInput {
            sigma_sq_i: 1.7,
            sigma_sq_j: 0.9,
            rho_i: 0.65,
            rho_j: 0.4,
        })
        .unwrap();
        let rev = sample_size_percentage(&SampleSizeInput {
            sigma_sq_i: 0.9,
            sigma_sq_j: 1.7,
            rho_i: 0.4,
            rho_j: 0.65,
        })
        .unwrap();
        assert!((fwd * rev - 1e4).abs() < 1e-9 * 1e4);

        assert!(sample_size_percentage(&SampleSizeInput {
            sigma_sq_i: 1.0,
            sigma_sq_j: 1.0,
            rho_i: 0.5,
            rho_j: 1.0,
        })
        .is_err());
    }

    #[test]
    fn pearson_and_pooled_variance() {
        let pairs = [(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)];
        assert!((pearson_correlation(&pairs).unwrap() - 1.0).abs() < 1e-12);
        let anti = [(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)];
        assert!((pearson_correlation(&anti).unwrap() + 1.0).abs() < 1e-12);
        // Pooled variance over {1,2} with ddof=1: mean 1.5, ss = 0.5.
        let v = pooled_variance(&[(1.0, 2.0)]);
        assert!(v.is_err()); // needs 2 pairs
        let v2 = pooled_variance(&[(1.0, 2.0), (1.0, 2.0)]).unwrap();
        let mean: f64 = 1.5;
        let want = ([1.0, 2.0, 1.0, 2.0] as [f64; 4])
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / 3.0;
        assert!((v2 - want).abs() < 1e-12);
    }

    #[test]
    fn tract_measures_cases() {
        let dims = Dims::new(10, 10, 10, 1);
        let seg = mask_from(dims, |_, _, _| true);
        let fa = Volume::zeros(dims, [1.0; 3]);
        // 1000 voxels at 1 mm³ → 1.0 ml, but all-zero FA errors.
        assert!(tract_measures(&seg, 0, &fa, &fa, [1.0; 3]).is_err());

        let dims4 = Dims::new(4, 1, 1, 1);
        let seg4 = mask_from(dims4, |_, _, _| true);
        let fa4 = Volume::new(dims4, [1.0; 3], vec![0.0, 0.3, 0.5, 0.7]).unwrap();
        let md4 = Volume::new(dims4, [1.0; 3], vec![0.2, 0.2, 0.4, 0.6]).unwrap();
        let (vol, mfa, mmd) = tract_measures(&seg4, 0, &fa4, &md4, [1.0; 3]).unwrap();
        assert!((vol - 0.004).abs() < 1e-12);
        assert_eq!(mfa, 0.5); // zeros excluded
        assert!((mmd - 0.3).abs() < 1e-12);

        let empty = mask_from(dims4, |_, _, _| false);
        assert!(tract_measures(&empty, 0, &fa4, &md4, [1.0; 3]).is_err());

        // Unit conversion at 1 mm³ voxels: 1000 voxels → 1 ml.
        let dims1k = Dims::new(10, 10, 10, 1);
        let seg1k = mask_from(dims1k, |_, _, _| true);
        let mut ones = Volume::zeros(dims1k, [1.0; 3]);
        ones.voxels_mut().fill(0.5);
        let (vol1k, _, _) = tract_measures(&seg1k, 0, &ones, &ones, [1.0; 3]).unwrap();
        assert!((vol1k - 1.0).abs() < 1e-12);
    }

    #[test]
    fn postprocess_labels_two_cubes_by_centroid() {
        let dims = Dims::new(24, 8, 8, 1);
        let mut v = Volume::zeros(dims, [1.0; 3]);
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    v.set(2 + x, y, z, 0, 0.9); // low-x cube
                    v.set(20 + x, y, z, 0, 0.9); // high-x cube
                }
            }
        }
        let prob = SegmentationSet::new(v, SegKind::Probabilistic).unwrap();
        let out = postprocess_prediction(&prob, 0, ChannelSemantics::LeftRight).unwrap();
        assert!(out.warning.is_none());
        assert_eq!(out.masks.len(), 2);
        let left = out
            .masks
            .iter()
            .find(|(l, _)| *l == StructureLabel::Left)
            .unwrap();
        // Left = larger x centroid → the cube at x = 20.
        assert_eq!(left.1.get(21, 1, 1, 0), 1.0);
        let right = out
            .masks
            .iter()
            .find(|(l, _)| *l == StructureLabel::Right)
            .unwrap();
        assert_eq!(right.1.get(3, 1, 1, 0), 1.0);
    }

    #[test]
    fn postprocess_discards_third_largest_and_flags_empty() {
        let dims = Dims::new(30, 6, 6, 1);
        let mut v = Volume::zeros(dims, [1.0; 3]);
        // Sizes 100 (5×5×4), 50 (5×5×2), 10 (5×2×1) along x.
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..5 {
                    v.set(x, y, z, 0, 1.0);
                }
            }
        }
        for z in 0..2 {
            for y in 0..5 {
                for x in 10..15 {
                    v.set(x, y, z, 0, 1.0);
                }
            }
        }
        for y in 0..2 {
            for x in 20..25 {
                v.set(x, y, 0, 0, 1.0);
            }
        }
        let prob = SegmentationSet::new(v, SegKind::Probabilistic).unwrap();
        let out = postprocess_prediction(&prob, 0, ChannelSemantics::LeftRight).unwrap();
        assert_eq!(out.masks.len(), 2);
        let total: f64 = out
            .masks
            .iter()
            .map(|(_, m)| m.voxels().iter().sum::<f64>())
            .sum();
        assert_eq!(total, 150.0); // the 10-voxel component is gone

        let empty = SegmentationSet::new(Volume::zeros(dims, [1.0; 3]), SegKind::Probabilistic)
            .unwrap();
        let out2 = postprocess_prediction(&empty, 0, ChannelSemantics::LeftRight).unwrap();
        assert!(out2.masks.is_empty());
        assert!(out2.warning.is_some());
    }

    #[test]
    fn single_component_returns_warning() {
        let dims = Dims::new(8, 8, 8, 1);
        let mut v = Volume::zeros(dims, [1.0; 3]);
        v.set(4, 4, 4, 0, 1.0);
        v.set(5, 5, 5, 0, 1.0); // diagonal touch: 26-connected
        let prob = SegmentationSet::new(v, SegKind::Probabilistic).unwrap();
        let out = postprocess_prediction(&prob, 0, ChannelSemantics::AnteriorPosterior).unwrap();
        assert_eq!(out.masks.len(), 1);
        assert_eq!(out.masks[0].0, StructureLabel::Single);
        assert!(out.warning.is_some());
        // 26-connectivity joined the diagonal pair into one component.
        assert_eq!(out.masks[0].1.voxels().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn dice_and_error_match_bruteforce_on_random_instances() {
        let dims = Dims::new(10, 10, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| {
                let mut v = Volume::zeros(dims, [1.0; 3]);
                for x in v.voxels_mut() {
                    *x = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
                }
                SegmentationSet::new(v, SegKind::Binary).unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            for k in 0..2 {
                let got = dice_coefficient(&a, &b, k).unwrap();
                let av = a.volume().channel(k);
                let bv = b.volume().channel(k);
                let inter: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
                let sa: f64 = av.iter().sum();
                let sb: f64 = bv.iter().sum();
                let want = if sa + sb == 0.0 { 1.0 } else { 2.0 * inter / (sa + sb) };
                assert!((got - want).abs() < 1e-9);
            }
            let m = MeasurePair {
                m_s: rng.gen_range(0.1..2.0),
                m_t: rng.gen_range(0.1..2.0),
                kind: MeasureKind::MedianFa,
            };
            let got = measurement_error(&m).unwrap();
            let want = 2.0 * (m.m_s - m.m_t).abs() / (m.m_s + m.m_t) * 100.0;
            assert!((got - want).abs() < 1e-9);
        }
    }
}
