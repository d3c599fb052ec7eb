//! On-disk datasets: one `pair_<id>/` directory per longitudinal pair
//! (volumes, affines, ground-truth field) plus a `manifest.json` echoing
//! the generator config, seeds, splits, and construction checks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_affine, load_segmentation, load_volume, save_affine, save_segmentation, save_volume};
use crate::seeding::derive_seed;
use crate::synth::{make_pair, SynthConfig};
use crate::train::TrainSample;
use crate::volume::{normalize_image, AffineTransform, SegKind, SegmentationSet, Volume};
use crate::warp::{affine_align, DisplacementField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: usize,
    pub subject: String,
    pub split: Split,
    pub seed: u64,
    pub construction_dice: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub master_seed: u64,
    pub pairs: Vec<PairEntry>,
}

pub fn pair_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("pair_{id:04}"))
}

/// Generates `n_pairs` reproducible pairs and writes the whole dataset.
/// Splits are assigned by index: the last eighth is the test set, the
/// eighth before it validation, the rest training.
pub fn write_dataset(cfg: &SynthConfig, n_pairs: usize, seed: u64, root: &Path) -> Result<DatasetManifest> {
    if n_pairs == 0 {
        return Err(Error::Invalid("need at least one pair".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let n_test = (n_pairs / 8).max(1);
    let n_val = (n_pairs / 8).max(1);
    if n_test + n_val >= n_pairs {
        return Err(Error::Invalid(format!(
            "{n_pairs} pairs is too few to carve out train/val/test splits"
        )));
    }
    let n_train = n_pairs - n_val - n_test;

    let mut entries = Vec::with_capacity(n_pairs);
    for id in 0..n_pairs {
        let pair_seed = derive_seed(seed, "pair", id as u64);
        let pair = make_pair(cfg, pair_seed)?;
        let dir = pair_dir(root, id);
        fs::create_dir_all(&dir)?;

        save_volume(&pair.source.fa, &dir.join("fa_s"))?;
        save_volume(&pair.target.fa, &dir.join("fa_t"))?;
        save_volume(&pair.source.md, &dir.join("md_s"))?;
        save_volume(&pair.target.md, &dir.join("md_t"))?;
        save_volume(&pair.source.seg_image, &dir.join("seg_img_s"))?;
        save_volume(&pair.target.seg_image, &dir.join("seg_img_t"))?;
        save_segmentation(&pair.source.seg, &dir.join("seg_s"))?;
        save_segmentation(&pair.target.seg, &dir.join("seg_t"))?;
        save_volume(&pair.source.density, &dir.join("density_s"))?;
        save_volume(&pair.target.density, &dir.join("density_t"))?;
        pair.u_gt.save(&dir.join("u_gt"))?;
        save_affine(&pair.affine, &dir.join("affine.json"))?;
        save_affine(&pair.affine.invert()?, &dir.join("affine_rev.json"))?;

        let split = if id < n_train {
            Split::Train
        } else if id < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(PairEntry {
            id,
            subject: format!("subj_{id:04}"),
            split,
            seed: pair_seed,
            construction_dice: pair.construction_dice,
        });
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        master_seed: seed,
        pairs: entries,
    };
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::Data(format!(
            "no manifest.json under {}",
            root.display()
        )));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Loads the training view of one pair: registration scalars and the
/// segmentation input normalized to pooled zero-mean/unit-std, the
/// affine-aligned source cached.
pub fn load_train_sample(root: &Path, entry: &PairEntry) -> Result<TrainSample> {
    let dir = pair_dir(root, entry.id);
    let img_s = normalize_image(&load_volume(&dir.join("fa_s"))?)?;
    let img_t = normalize_image(&load_volume(&dir.join("fa_t"))?)?;
    let seg_img_s = normalize_image(&load_volume(&dir.join("seg_img_s"))?)?;
    let seg_s = load_segmentation(&dir.join("seg_s"), SegKind::Binary)?;
    let seg_t = load_segmentation(&dir.join("seg_t"), SegKind::Binary)?;
    let affine = load_affine(&dir.join("affine.json"))?;
    TrainSample::assemble(&entry.subject, img_s, img_t, seg_img_s, seg_s, seg_t, affine)
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<TrainSample>> {
    manifest
        .pairs
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_train_sample(root, e))
        .collect()
}

/// Everything evaluation needs for one pair, both directions.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: usize,
    pub subject: String,
    /// Raw (unnormalized) scalar maps for the tract measures.
    pub fa_s_raw: Volume,
    pub fa_t_raw: Volume,
    pub md_s: Volume,
    pub md_t: Volume,
    pub density_s: Volume,
    pub density_t: Volume,
    /// Normalized inputs for the networks.
    pub img_s: Volume,
    pub img_t: Volume,
    pub seg_img_s: Volume,
    pub seg_img_t: Volume,
    pub aligned_s: Volume,
    pub aligned_t: Volume,
    pub seg_s: SegmentationSet,
    pub seg_t: SegmentationSet,
    pub affine_fwd: AffineTransform,
    pub affine_rev: AffineTransform,
    pub u_gt: DisplacementField,
}

pub fn load_eval_pair(root: &Path, entry: &PairEntry) -> Result<EvalPair> {
    let dir = pair_dir(root, entry.id);
    let fa_s_raw = load_volume(&dir.join("fa_s"))?;
    let fa_t_raw = load_volume(&dir.join("fa_t"))?;
    let img_s = normalize_image(&fa_s_raw)?;
    let img_t = normalize_image(&fa_t_raw)?;
    let affine_fwd = load_affine(&dir.join("affine.json"))?;
    let affine_rev = load_affine(&dir.join("affine_rev.json"))?;
    let aligned_s = affine_align(&img_s, &affine_fwd);
    let aligned_t = affine_align(&img_t, &affine_rev);
    Ok(EvalPair {
        id: entry.id,
        subject: entry.subject.clone(),
        md_s: load_volume(&dir.join("md_s"))?,
        md_t: load_volume(&dir.join("md_t"))?,
        density_s: load_volume(&dir.join("density_s"))?,
        density_t: load_volume(&dir.join("density_t"))?,
        seg_img_s: normalize_image(&load_volume(&dir.join("seg_img_s"))?)?,
        seg_img_t: normalize_image(&load_volume(&dir.join("seg_img_t"))?)?,
        seg_s: load_segmentation(&dir.join("seg_s"), SegKind::Binary)?,
        seg_t: load_segmentation(&dir.join("seg_t"), SegKind::Binary)?,
        u_gt: DisplacementField::load(&dir.join("u_gt"))?,
        fa_s_raw,
        fa_t_raw,
        img_s,
        img_t,
        aligned_s,
        aligned_t,
        affine_fwd,
        affine_rev,
    })
}

pub fn load_eval_split(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<EvalPair>> {
    manifest
        .pairs
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_eval_pair(root, e))
        .collect()
}
