use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::{read_tensors, write_tensors};
use crate::tensor::{Group, Tensor};

use super::{TrainConfig, TrainState};

const MOMENT_1: &str = "adam.m.";
const MOMENT_2: &str = "adam.v.";

/// Counters and configuration stored next to the tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub skipped_queries: u64,
    pub nan_steps: u64,
    /// Updates applied by each group's optimizer, in `pgn, qrn, cpn` order.
    pub adam_steps: [u64; 3],
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

fn saved(config: &TrainConfig, group: Group) -> bool {
    !(config.disable_cpn && group == Group::Cpn)
}

/// Writes every parameter, buffer and optimizer moment as named tensors plus a
/// JSON sidecar. Runs without the context policy omit its tensors.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let store = &state.model.store;
    let mut tensors: Vec<(String, Tensor<f32>)> = store
        .iter()
        .filter(|(_, p)| saved(&state.config, p.group))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    for adam in state.adam.iter().filter(|a| saved(&state.config, a.group)) {
        for slot in &adam.slots {
            let name = &store.param(slot.param).name;
            tensors.push((format!("{MOMENT_1}{name}"), slot.m.clone()));
            tensors.push((format!("{MOMENT_2}{name}"), slot.v.clone()));
        }
    }
    write_tensors(path, &tensors)?;
    let sidecar = Sidecar {
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        skipped_queries: state.skipped_queries,
        nan_steps: state.nan_steps,
        adam_steps: [state.adam[0].t, state.adam[1].t, state.adam[2].t],
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

/// Restores a [`TrainState`]. Context-policy tensors absent from the file are
/// freshly initialized (with a warning); any other missing tensor, or any
/// name the model does not know, is an error.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let side = sidecar_path(path);
    let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_slice(&text).map_err(|e| Error::Integrity(format!("bad sidecar: {e}")))?;
    let mut state = TrainState::new(&sidecar.config)?;
    let mut seen = BTreeSet::new();
    for (name, value) in read_tensors(path)? {
        let (target, moment) = if let Some(rest) = name.strip_prefix(MOMENT_1) {
            (rest, Some(0))
        } else if let Some(rest) = name.strip_prefix(MOMENT_2) {
            (rest, Some(1))
        } else {
            (name.as_str(), None)
        };
        let id = state
            .model
            .store
            .id(target)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        let shape_ok = value.shape() == state.model.store.get(id).shape();
        if !shape_ok {
            return Err(Error::Integrity(format!(
                "tensor `{name}` has shape {:?}",
                value.shape()
            )));
        }
        match moment {
            None => state.model.store.set(id, value)?,
            Some(which) => {
                let slot = state
                    .adam
                    .iter_mut()
                    .flat_map(|a| a.slots.iter_mut())
                    .find(|s| s.param == id)
                    .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
                if which == 0 {
                    slot.m = value;
                } else {
                    slot.v = value;
                }
            }
        }
        seen.insert(name);
    }
    let mut fresh_cpn = false;
    let mut expected: Vec<(String, Group)> = Vec::new();
    for (_, p) in state.model.store.iter() {
        expected.push((p.name.clone(), p.group));
    }
    for adam in &state.adam {
        for slot in &adam.slots {
            let name = &state.model.store.param(slot.param).name;
            expected.push((format!("{MOMENT_1}{name}"), adam.group));
            expected.push((format!("{MOMENT_2}{name}"), adam.group));
        }
    }
    for (name, group) in expected {
        if seen.contains(&name) {
            continue;
        }
        if group == Group::Cpn {
            fresh_cpn = true;
        } else {
            return Err(Error::MissingTensor(name));
        }
    }
    if fresh_cpn && !state.config.disable_cpn {
        log::warn!(
            "checkpoint has no context-policy tensors; they start from a fresh initialization"
        );
    }
    state.epoch = sidecar.epoch;
    state.step = sidecar.step;
    state.skipped_queries = sidecar.skipped_queries;
    state.nan_steps = sidecar.nan_steps;
    for (adam, &t) in state.adam.iter_mut().zip(&sidecar.adam_steps) {
        adam.t = if fresh_cpn && adam.group == Group::Cpn {
            0
        } else {
            t
        };
    }
    Ok(state)
}
