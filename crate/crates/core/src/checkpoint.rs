//! Model checkpoints: `model.json` plus one GFST file per parameter tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcp::{FcpParams, LAYER_NAMES};
use crate::gfst;
use crate::pkl::{KernelBank, PklConfig};
use crate::tensor::{Real, Tensor};
use crate::training::FrozenModel;

const FORMAT: &str = "gfss-model";
const KERNELS_FILE: &str = "kernels.gfst";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format: String,
    version: u32,
    channels: usize,
    base_ids: Vec<u32>,
    pkl: PklConfig,
    /// Training steps taken.
    steps: u64,
    kernels: String,
    /// `(parameter name, file)` in [`LAYER_NAMES`] order.
    fcp: Vec<(String, String)>,
}

fn file_name(param: &str) -> String {
    format!("fcp.{}.gfst", param)
}

/// Writes the model into `dir`, creating it if needed.
pub fn save_model<T: Real>(model: &FrozenModel<T>, steps: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    gfst::write(dir.join(KERNELS_FILE), model.bank.kernels())?;
    let mut fcp = Vec::with_capacity(LAYER_NAMES.len());
    for (name, t) in LAYER_NAMES.iter().zip(model.fcp.tensors()) {
        let file = file_name(name);
        gfst::write(dir.join(&file), t)?;
        fcp.push((name.to_string(), file));
    }
    let manifest = ModelManifest {
        format: FORMAT.into(),
        version: 1,
        channels: model.bank.channels(),
        base_ids: model.bank.class_ids().to_vec(),
        pkl: model.pkl,
        steps,
        kernels: KERNELS_FILE.into(),
        fcp,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("model.json"), json + "\n")?;
    Ok(())
}

/// Reads a model and the number of steps it was trained for.
pub fn load_model<T: Real>(dir: &Path) -> Result<(FrozenModel<T>, u64)> {
    let text = fs::read_to_string(dir.join("model.json"))
        .map_err(|e| Error::Config(format!("missing model in {}: {}", dir.display(), e)))?;
    let m: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::Format(format!("unsupported model {} v{}", m.format, m.version)));
    }
    let names: Vec<&str> = m.fcp.iter().map(|(n, _)| n.as_str()).collect();
    if names != LAYER_NAMES {
        return Err(Error::Format(format!("model parameters {:?} do not match {:?}", names, LAYER_NAMES)));
    }
    let kernels: Tensor<T> = gfst::read_as(dir.join(&m.kernels))?;
    let n = m.base_ids.len();
    let bank = KernelBank::new(kernels, m.base_ids, n)?;
    let tensors = m
        .fcp
        .iter()
        .map(|(_, f)| gfst::read_as(dir.join(f)))
        .collect::<Result<Vec<Tensor<T>>>>()?;
    let fcp = FcpParams::from_tensors(tensors)?;
    if bank.channels() != m.channels || fcp.channels() != m.channels {
        return Err(Error::Format("model manifest disagrees with its tensors".into()));
    }
    Ok((FrozenModel { bank, fcp, pkl: m.pkl }, m.steps))
}
