//! Trained parameters on disk: two weight tensors plus a JSON descriptor.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rankforge_core::tensorio::{read_tensor, write_tensor};
use rankforge_core::trainer::EncoderParams;
use rankforge_core::{TensorFile, TrainConfig};
use serde::{Deserialize, Serialize};

pub const W_IMG_FILE: &str = "w_img.rnkt";
pub const W_TXT_FILE: &str = "w_txt.rnkt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub manifest: String,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_rsum: f64,
    pub dim_img: usize,
    pub dim_txt: usize,
    pub joint_dim: usize,
}

/// Writes the checkpoint and returns the paths it created.
pub fn save(
    dir: &Path,
    params: &EncoderParams,
    info: &CheckpointInfo,
) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let paths = [
        dir.join(W_IMG_FILE),
        dir.join(W_TXT_FILE),
        dir.join(CHECKPOINT_FILE),
    ];
    write_tensor(&paths[0], &TensorFile::from_matrix(&params.w_img))?;
    write_tensor(&paths[1], &TensorFile::from_matrix(&params.w_txt))?;
    fs::write(&paths[2], serde_json::to_string_pretty(info)? + "\n")
        .with_context(|| format!("writing {}", paths[2].display()))?;
    Ok(paths.to_vec())
}

pub fn load(dir: &Path) -> anyhow::Result<(EncoderParams, CheckpointInfo)> {
    let info_path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&info_path)
        .with_context(|| format!("reading checkpoint {}", info_path.display()))?;
    let info: CheckpointInfo =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", info_path.display()))?;
    let w_img = read_tensor(dir.join(W_IMG_FILE))?.to_matrix()?;
    let w_txt = read_tensor(dir.join(W_TXT_FILE))?.to_matrix()?;
    if w_img.shape() != (info.dim_img, info.joint_dim)
        || w_txt.shape() != (info.dim_txt, info.joint_dim)
    {
        bail!("checkpoint weights do not match {}", info_path.display());
    }
    Ok((EncoderParams { w_img, w_txt }, info))
}
