//! Model checkpoints in the tensor-bundle format.
//!
//! Entries: every parameter under its own name, optimizer moments under
//! `optim/…`, and the model config as UTF-8 JSON bytes stored one byte per
//! element in the rank-1 entry `meta/model_config`.

use std::path::Path;

use super::{io_err, TrainError};
use crate::model::{ModelConfig, PlanetModel};
use crate::numerics::checkpoint::{read_bundle, write_bundle};
use crate::numerics::{AdamW, AdamWConfig, Seed, Tensor};

const CONFIG_ENTRY: &str = "meta/model_config";
const OPTIM_PREFIX: &str = "optim/";

pub struct Checkpoint {
    pub model: PlanetModel,
    /// Optimizer moments and step count, when the checkpoint carries them.
    pub optimizer_state: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// An optimizer resumed from the stored state.
    pub fn optimizer(&self, config: AdamWConfig) -> Result<Option<AdamW>, TrainError> {
        if self.optimizer_state.is_empty() {
            return Ok(None);
        }
        let mut opt = AdamW::new(config, &self.model.store);
        opt.load_state(&self.model.store, &self.optimizer_state)?;
        Ok(Some(opt))
    }
}

pub fn checkpoint_bytes(model: &PlanetModel, optimizer: Option<&AdamW>) -> Vec<u8> {
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    let mut entries = vec![(
        CONFIG_ENTRY.to_string(),
        Tensor::new(vec![json.len()], json.iter().map(|&b| f64::from(b)).collect()).expect("rank-1 shape"),
    )];
    entries.extend(model.store.named_values());
    if let Some(opt) = optimizer {
        entries.extend(opt.named_state(&model.store).into_iter().map(|(n, t)| (format!("{OPTIM_PREFIX}{n}"), t)));
    }
    let mut out = Vec::new();
    write_bundle(&mut out, &entries).expect("writing to memory");
    out
}

pub fn save_checkpoint(path: &Path, model: &PlanetModel, optimizer: Option<&AdamW>) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint_bytes(model, optimizer)).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|msg| TrainError::Checkpoint { path: path.display().to_string(), msg })
}

fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, String> {
    let entries = read_bundle(bytes).map_err(|e| e.to_string())?;
    let meta = entries
        .iter()
        .find(|(n, _)| n == CONFIG_ENTRY)
        .map(|(_, t)| t)
        .ok_or_else(|| format!("missing {CONFIG_ENTRY}"))?;
    let json: Vec<u8> = meta
        .data()
        .iter()
        .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(format!("{CONFIG_ENTRY} holds {v}")) })
        .collect::<Result<_, _>>()?;
    let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| format!("{CONFIG_ENTRY}: {e}"))?;
    let mut model = PlanetModel::new(config, Seed(0)).map_err(|e| e.to_string())?;
    let (optim, params): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .filter(|(n, _)| n != CONFIG_ENTRY)
        .partition(|(n, _)| n.starts_with(OPTIM_PREFIX));
    if params.len() != model.store.len() {
        return Err(format!("{} parameter entries for a model with {}", params.len(), model.store.len()));
    }
    model.store.load_values(&params).map_err(|e| e.to_string())?;
    let optimizer_state = optim.into_iter().map(|(n, t)| (n[OPTIM_PREFIX.len()..].to_string(), t)).collect();
    Ok(Checkpoint { model, optimizer_state })
}
