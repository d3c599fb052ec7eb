//! Checkpoint files: a JSON manifest (stream configs, epoch, seed) plus a
//! raw little-endian f64 parameter payload. Reloading restores bitwise
//! identical forward outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ModelParams, NetConfig, StreamParams, UNet};

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    epoch: u32,
    seed: u64,
    seg: Option<NetConfig>,
    reg: Option<NetConfig>,
    theta_len: usize,
    psi_len: usize,
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().map(|e| e == "json").unwrap_or(false) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    (base.with_extension("json"), base.with_extension("params"))
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

pub fn save_checkpoint(model: &ModelParams, epoch: u32, seed: u64, path: &Path) -> Result<()> {
    let (jpath, ppath) = paths(path);
    let manifest = CheckpointManifest {
        epoch,
        seed,
        seg: model.theta.as_ref().map(|s| s.net.cfg),
        reg: model.psi.as_ref().map(|s| s.net.cfg),
        theta_len: model.theta.as_ref().map_or(0, |s| s.values.len()),
        psi_len: model.psi.as_ref().map_or(0, |s| s.values.len()),
    };
    let mut payload = Vec::new();
    for stream in [&model.theta, &model.psi].into_iter().flatten() {
        for &v in &stream.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&jpath, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_atomic(&ppath, &payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, u32, u64)> {
    let (jpath, ppath) = paths(path);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&jpath)?)?;
    let raw = fs::read(&ppath)?;
    let expect = (manifest.theta_len + manifest.psi_len) * 8;
    if raw.len() != expect {
        return Err(Error::Format(format!(
            "parameter payload holds {} bytes, manifest requires {}",
            raw.len(),
            expect
        )));
    }
    let mut values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]));
    let mut take_stream = |cfg: Option<NetConfig>, len: usize| -> Result<Option<StreamParams>> {
        match cfg {
            None => {
                if len != 0 {
                    return Err(Error::Format("payload length for absent stream".into()));
                }
                Ok(None)
            }
            Some(cfg) => {
                let net = UNet::new(cfg)?;
                if net.n_params() != len {
                    return Err(Error::Format(format!(
                        "config implies {} params, manifest says {}",
                        net.n_params(),
                        len
                    )));
                }
                let vals: Vec<f64> = values.by_ref().take(len).collect();
                Ok(Some(StreamParams { net, values: vals }))
            }
        }
    };
    let theta = take_stream(manifest.seg, manifest.theta_len)?;
    let psi = take_stream(manifest.reg, manifest.psi_len)?;
    Ok((ModelParams { theta, psi }, manifest.epoch, manifest.seed))
}
