//! JSON checkpoints: widths, then every parameter by name with its shape,
//! row-major values and frozen flag. A pruned export additionally carries
//! the final skip set and its FLOP report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlopReport, Model, NetworkDims, PrunedNetwork, SkipMask, SkippableNetwork};
use crate::error::{DasError, Result};
use crate::tensor::{ParamGroup, ParamStore, Parameter, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub d_ff: usize,
    pub h_adapt: usize,
    pub h_skip: usize,
    pub classes: usize,
    pub params: BTreeMap<String, ParamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_mask: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flop_report: Option<FlopReport>,
}

/// Either kind of network a checkpoint can hold.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    Full(SkippableNetwork),
    Pruned(PrunedNetwork),
}

impl LoadedModel {
    pub fn dims(&self) -> &NetworkDims {
        match self {
            LoadedModel::Full(n) => n.dims(),
            LoadedModel::Pruned(p) => p.dims(),
        }
    }
}

fn group_of(name: &str) -> ParamGroup {
    match name.split('.').next() {
        Some("embed") => ParamGroup::Embed,
        Some("blocks") => ParamGroup::Block,
        Some("head") => ParamGroup::Head,
        _ => ParamGroup::Adapter,
    }
}

impl Checkpoint {
    fn from_model(model: &impl Model) -> Self {
        let dims = model.dims();
        let params = model
            .store()
            .iter()
            .map(|(_, name, _, p)| {
                (
                    name.to_string(),
                    ParamRecord {
                        shape: p.tensor.shape().to_vec(),
                        values: p.values().to_vec(),
                        frozen: p.frozen,
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            n: dims.n,
            d: dims.d,
            d_ff: dims.d_ff,
            h_adapt: dims.h_adapt,
            h_skip: dims.h_skip,
            classes: dims.classes,
            params,
            final_mask: None,
            flop_report: None,
        }
    }

    pub fn from_network(net: &SkippableNetwork) -> Self {
        Self::from_model(net)
    }

    pub fn from_pruned(net: &PrunedNetwork, flop_report: FlopReport) -> Self {
        let mut c = Self::from_model(net);
        c.final_mask = Some(net.mask().indices());
        c.flop_report = Some(flop_report);
        c
    }

    pub fn dims(&self) -> Result<NetworkDims> {
        let embed = self
            .params
            .get("embed.weight")
            .ok_or_else(|| DasError::validation("checkpoint lacks embed.weight"))?;
        let input_dim = *embed
            .shape
            .first()
            .ok_or_else(|| DasError::validation("embed.weight has no shape"))?;
        let dims = NetworkDims {
            n: self.n,
            input_dim,
            d: self.d,
            d_ff: self.d_ff,
            h_adapt: self.h_adapt,
            h_skip: self.h_skip,
            classes: self.classes,
        };
        dims.validate()?;
        Ok(dims)
    }

    /// Parameters in canonical network order, so that rebuilt stores enumerate
    /// exactly like freshly constructed ones.
    fn store(&self) -> Result<ParamStore> {
        let mut names: Vec<&String> = self.params.keys().collect();
        names.sort_by_key(|name| canonical_rank(name));
        let mut store = ParamStore::new();
        for name in names {
            let rec = &self.params[name];
            let tensor = Tensor::new(rec.shape.clone(), rec.values.clone())?;
            store.insert(name.clone(), group_of(name), Parameter::new(tensor, rec.frozen))?;
        }
        Ok(store)
    }

    pub fn into_model(self) -> Result<LoadedModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(DasError::validation(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let dims = self.dims()?;
        let store = self.store()?;
        match &self.final_mask {
            None => Ok(LoadedModel::Full(SkippableNetwork::from_store(dims, store)?)),
            Some(idx) => {
                let mask = SkipMask::new(dims.n, idx.iter().copied())?;
                Ok(LoadedModel::Pruned(PrunedNetwork::from_store(dims, store, mask)?))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| DasError::usage(format!("checkpoint serialization: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| DasError::Parse {
            path: path.to_path_buf(),
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| DasError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DasError::io(path, e))?;
        Self::from_json(&text, path)
    }
}

fn canonical_rank(name: &str) -> (usize, usize, usize, usize, String) {
    let parts: Vec<&str> = name.split('.').collect();
    let idx = parts.get(1).and_then(|p| p.parse::<usize>().ok()).unwrap_or(0);
    let within = match parts.last().copied() {
        Some("weight") | Some("w_in") => 0,
        _ => 1,
    };
    let layer = if name.contains(".fc2.") { 1 } else { 0 };
    let (section, slot) = match parts[0] {
        "embed" => (0, 0),
        "blocks" => (1, 0),
        "adapt" => (1, 1),
        "skip" => (1, 2),
        "head" => (2, 0),
        _ => (3, 0),
    };
    (section, idx, slot, 2 * layer + within, name.to_string())
}
