//! Bidirectional test-set evaluation: native-space predictions from each
//! pipeline, post-processing, the metric battery, and the comparative
//! report written as diffable CSV/JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::EvalPair;
use crate::error::{Error, Result};
use crate::metrics::{
    cohens_kappa, dice_coefficient, kappa_label, measurement_error, pearson_correlation,
    pooled_variance, postprocess_prediction, sample_size_percentage, spatial_correlation, stcs,
    ChannelSemantics, MeasureKind, MeasurePair, SampleSizeInput,
};
use crate::net::{reg_forward, seg_forward, StreamParams};
use crate::volume::{Dims, SegKind, SegmentationSet, Volume};
use crate::warp::{compose, trilinear_warp, SamplingMap};

/// One runnable pipeline: a segmentation stream plus a registration
/// stream, trained either jointly or independently.
pub struct Pipeline {
    pub name: String,
    pub theta: StreamParams,
    pub psi: StreamParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Use the printed Σ√(J²) spatial-correlation denominator instead of
    /// the cosine form.
    pub sc_literal: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { sc_literal: false }
    }
}

/// Aggregated row of `metrics.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub structure: usize,
    pub pipeline: String,
    pub direction: String,
    pub dice: f64,
    pub sc: f64,
    pub stcs: f64,
    pub kappa: f64,
    pub kappa_label: String,
    pub eps_volume_pct: f64,
    pub eps_fa_pct: f64,
    pub eps_md_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSizeRow {
    pub measure_kind: MeasureKind,
    pub structure: usize,
    pub pipeline_i: String,
    pub pipeline_j: String,
    pub p_pct: f64,
}

/// Per-structure comparison of the two pipelines on the consistency and
/// agreement metrics, plus the registration oracle numbers.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub structures: Vec<StructureComparison>,
    pub registration: Vec<RegistrationSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureComparison {
    pub structure: usize,
    pub stcs: Vec<(String, f64)>,
    pub stcs_winner: String,
    pub kappa: Vec<(String, f64)>,
    pub kappa_winner: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegistrationSummary {
    pub pipeline: String,
    /// Mean endpoint error of the predicted field against the known one.
    pub mean_endpoint_error_vox: f64,
    /// Mean ‖u_gt‖, i.e. the residual left by the affine alone.
    pub affine_only_residual_vox: f64,
}

pub struct EvalReport {
    pub metrics: Vec<MetricsRow>,
    pub sample_sizes: Vec<SampleSizeRow>,
    pub comparison: ComparisonReport,
}

/// Everything measured for one (pipeline, pair).
struct PairOutcome {
    /// dice[direction][k]: native prediction vs reference, direction 0
    /// scoring the source scan and direction 1 the target scan.
    dice: [Vec<f64>; 2],
    sc: [Vec<f64>; 2],
    stcs: Vec<f64>,
    kappa: [Vec<f64>; 2],
    eps: [Vec<f64>; 3],
    measures: Vec<[MeasurePair; 3]>,
    endpoint_error: f64,
    affine_residual: f64,
}

fn cleaned_mask(pred: &SegmentationSet, k: usize) -> Result<Volume> {
    let out = postprocess_prediction(pred, k, ChannelSemantics::LeftRight)?;
    let g = pred.volume().grid();
    let mut mask = Volume::zeros(Dims::new(g.x, g.y, g.z, 1), pred.volume().spacing_mm());
    for (_, m) in &out.masks {
        for (dst, src) in mask.voxels_mut().iter_mut().zip(m.voxels()) {
            if *src == 1.0 {
                *dst = 1.0;
            }
        }
    }
    Ok(mask)
}

fn stack_masks(masks: &[Volume]) -> Result<SegmentationSet> {
    let refs: Vec<&Volume> = masks.iter().collect();
    SegmentationSet::new(Volume::concat_channels(&refs)?, SegKind::Binary)
}

fn warp_binary(mask: &SegmentationSet, map: &SamplingMap) -> Result<SegmentationSet> {
    let mut warped = trilinear_warp(mask.volume(), map);
    for v in warped.voxels_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    SegmentationSet::new(warped, SegKind::Binary)
}

fn evaluate_pair(pipeline: &Pipeline, pair: &EvalPair, opts: &EvalOptions) -> Result<PairOutcome> {
    let k = pair.seg_s.num_structures();

    let (pred_s, _) = seg_forward(&pipeline.theta, &pair.seg_img_s)?;
    let (pred_t, _) = seg_forward(&pipeline.theta, &pair.seg_img_t)?;
    let (u_fwd, _) = reg_forward(&pipeline.psi, &pair.img_t, &pair.aligned_s)?;
    let (u_rev, _) = reg_forward(&pipeline.psi, &pair.img_s, &pair.aligned_t)?;
    let map_fwd = compose(&pair.affine_fwd, &u_fwd);
    let map_rev = compose(&pair.affine_rev, &u_rev);

    let clean_s = stack_masks(
        &(0..k)
            .map(|ki| cleaned_mask(&pred_s, ki))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let clean_t = stack_masks(
        &(0..k)
            .map(|ki| cleaned_mask(&pred_t, ki))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let warped_clean_s = warp_binary(&clean_s, &map_fwd)?;
    let warped_clean_t = warp_binary(&clean_t, &map_rev)?;
    let warped_density_s = trilinear_warp(&pair.density_s, &map_fwd);
    let warped_density_t = trilinear_warp(&pair.density_t, &map_rev);

    let single = |v: &Volume, ki: usize| {
        let g = v.grid();
        Volume::new(
            Dims::new(g.x, g.y, g.z, 1),
            v.spacing_mm(),
            v.channel(ki).to_vec(),
        )
        .expect("channel extraction")
    };

    let mut dice = [Vec::with_capacity(k), Vec::with_capacity(k)];
    let mut sc = [Vec::with_capacity(k), Vec::with_capacity(k)];
    let mut stcs_k = Vec::with_capacity(k);
    let mut kappa = [Vec::with_capacity(k), Vec::with_capacity(k)];
    let mut eps = [Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k)];
    let mut measures = Vec::with_capacity(k);

    for ki in 0..k {
        dice[0].push(dice_coefficient(&clean_s, &pair.seg_s, ki)?);
        dice[1].push(dice_coefficient(&clean_t, &pair.seg_t, ki)?);

        sc[0].push(spatial_correlation(
            &single(&pair.density_t, ki),
            &single(&warped_density_s, ki),
            opts.sc_literal,
        )?);
        sc[1].push(spatial_correlation(
            &single(&pair.density_s, ki),
            &single(&warped_density_t, ki),
            opts.sc_literal,
        )?);

        stcs_k.push(stcs(&pred_t, &pred_s, &map_fwd, &map_rev, ki)?);

        kappa[0].push(cohens_kappa(&clean_t, &warped_clean_s, ki, None)?);
        kappa[1].push(cohens_kappa(&clean_s, &warped_clean_t, ki, None)?);

        let (vol_s, fa_s, md_s) =
            crate::metrics::tract_measures(&clean_s, ki, &pair.fa_s_raw, &pair.md_s, pair.fa_s_raw.spacing_mm())?;
        let (vol_t, fa_t, md_t) =
            crate::metrics::tract_measures(&clean_t, ki, &pair.fa_t_raw, &pair.md_t, pair.fa_t_raw.spacing_mm())?;
        let pairs = [
            MeasurePair { m_s: vol_s, m_t: vol_t, kind: MeasureKind::VolumeMl },
            MeasurePair { m_s: fa_s, m_t: fa_t, kind: MeasureKind::MedianFa },
            MeasurePair { m_s: md_s, m_t: md_t, kind: MeasureKind::MedianMd },
        ];
        for (mi, mp) in pairs.iter().enumerate() {
            eps[mi].push(measurement_error(mp)?);
        }
        measures.push(pairs);
    }

    Ok(PairOutcome {
        dice,
        sc,
        stcs: stcs_k,
        kappa,
        eps,
        measures,
        endpoint_error: u_fwd.mean_endpoint_error(&pair.u_gt)?,
        affine_residual: pair.u_gt.mean_norm(),
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs every pipeline over every test pair in both directions and writes
/// `metrics.csv`, `samplesize.csv`, and `report.json` under `out_dir`.
pub fn evaluate(
    pipelines: &[Pipeline],
    pairs: &[EvalPair],
    opts: &EvalOptions,
    out_dir: &Path,
) -> Result<EvalReport> {
    if pipelines.is_empty() || pairs.is_empty() {
        return Err(Error::Data("evaluation needs pipelines and test pairs".into()));
    }
    let k = pairs[0].seg_s.num_structures();
    fs::create_dir_all(out_dir)?;

    let mut outcomes: Vec<Vec<PairOutcome>> = Vec::new();
    for pipeline in pipelines {
        let mut rows = Vec::new();
        for pair in pairs {
            rows.push(evaluate_pair(pipeline, pair, opts)?);
        }
        outcomes.push(rows);
    }

    let mut metrics = Vec::new();
    for (pi, pipeline) in pipelines.iter().enumerate() {
        for ki in 0..k {
            for (di, dir_name) in ["fwd", "rev"].iter().enumerate() {
                let rows = &outcomes[pi];
                let kappa = mean(rows.iter().map(|o| o.kappa[di][ki]));
                metrics.push(MetricsRow {
                    structure: ki,
                    pipeline: pipeline.name.clone(),
                    direction: dir_name.to_string(),
                    dice: mean(rows.iter().map(|o| o.dice[di][ki])),
                    sc: mean(rows.iter().map(|o| o.sc[di][ki])),
                    stcs: mean(rows.iter().map(|o| o.stcs[ki])),
                    kappa,
                    kappa_label: kappa_label(kappa).to_string(),
                    eps_volume_pct: mean(rows.iter().map(|o| o.eps[0][ki])),
                    eps_fa_pct: mean(rows.iter().map(|o| o.eps[1][ki])),
                    eps_md_pct: mean(rows.iter().map(|o| o.eps[2][ki])),
                });
            }
        }
    }

    // Sample sizes need the across-pair spread of each measure; with a
    // single test pair the variance/correlation estimators are undefined
    // and the table stays empty.
    let mut sample_sizes = Vec::new();
    let enough_pairs = pairs.len() >= 2;
    for (mi, kind) in [MeasureKind::VolumeMl, MeasureKind::MedianFa, MeasureKind::MedianMd]
        .iter()
        .enumerate()
        .filter(|_| enough_pairs)
    {
        for ki in 0..k {
            let stats: Vec<(f64, f64)> = outcomes
                .iter()
                .map(|rows| {
                    let pts: Vec<(f64, f64)> = rows
                        .iter()
                        .map(|o| (o.measures[ki][mi].m_s, o.measures[ki][mi].m_t))
                        .collect();
                    Ok((pooled_variance(&pts)?, pearson_correlation(&pts)?))
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, pa) in pipelines.iter().enumerate() {
                for (j, pb) in pipelines.iter().enumerate() {
                    let p = sample_size_percentage(&SampleSizeInput {
                        sigma_sq_i: stats[i].0,
                        sigma_sq_j: stats[j].0,
                        rho_i: stats[i].1,
                        rho_j: stats[j].1,
                    })?;
                    sample_sizes.push(SampleSizeRow {
                        measure_kind: *kind,
                        structure: ki,
                        pipeline_i: pa.name.clone(),
                        pipeline_j: pb.name.clone(),
                        p_pct: p,
                    });
                }
            }
        }
    }

    let mut structures = Vec::new();
    for ki in 0..k {
        let stcs_by: Vec<(String, f64)> = pipelines
            .iter()
            .enumerate()
            .map(|(pi, p)| (p.name.clone(), mean(outcomes[pi].iter().map(|o| o.stcs[ki]))))
            .collect();
        let kappa_by: Vec<(String, f64)> = pipelines
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                (
                    p.name.clone(),
                    mean(
                        outcomes[pi]
                            .iter()
                            .flat_map(|o| [o.kappa[0][ki], o.kappa[1][ki]]),
                    ),
                )
            })
            .collect();
        let winner = |xs: &[(String, f64)]| {
            xs.iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite metric"))
                .expect("at least one pipeline")
                .0
                .clone()
        };
        structures.push(StructureComparison {
            structure: ki,
            stcs_winner: winner(&stcs_by),
            kappa_winner: winner(&kappa_by),
            stcs: stcs_by,
            kappa: kappa_by,
        });
    }
    let registration = pipelines
        .iter()
        .enumerate()
        .map(|(pi, p)| RegistrationSummary {
            pipeline: p.name.clone(),
            mean_endpoint_error_vox: mean(outcomes[pi].iter().map(|o| o.endpoint_error)),
            affine_only_residual_vox: mean(outcomes[pi].iter().map(|o| o.affine_residual)),
        })
        .collect();
    let comparison = ComparisonReport {
        structures,
        registration,
    };

    write_metrics_csv(&metrics, &out_dir.join("metrics.csv"))?;
    write_samplesize_csv(&sample_sizes, &out_dir.join("samplesize.csv"))?;
    write_atomic(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&comparison)?.as_bytes(),
    )?;

    Ok(EvalReport {
        metrics,
        sample_sizes,
        comparison,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut s = String::from(
        "structure,pipeline,direction,dice,sc,stcs,kappa,kappa_label,eps_volume_pct,eps_fa_pct,eps_md_pct\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.structure,
            r.pipeline,
            r.direction,
            r.dice,
            r.sc,
            r.stcs,
            r.kappa,
            r.kappa_label,
            r.eps_volume_pct,
            r.eps_fa_pct,
            r.eps_md_pct
        ));
    }
    write_atomic(path, s.as_bytes())
}

fn write_samplesize_csv(rows: &[SampleSizeRow], path: &Path) -> Result<()> {
    let mut s = String::from("measure_kind,structure,pipeline_i,pipeline_j,P_pct\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.measure_kind, r.structure, r.pipeline_i, r.pipeline_j, r.p_pct
        ));
    }
    write_atomic(path, s.as_bytes())
}
