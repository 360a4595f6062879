//! JSON checkpoints for the trainable networks.
//!
//! A checkpoint stores the network config and seed plus every tensor by
//! name. Loading rebuilds the network from its config and then overwrites
//! each tensor, so a renamed or reshaped tensor is reported instead of
//! silently misassigned.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::confidence::{StudentConfig, StudentParams, TeacherConfig, TeacherParams};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorParams};
use crate::nn::{Params, Tensor};

pub const CHECKPOINT_FORMAT: &str = "virtview-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

/// A network that can be written to and restored from a checkpoint.
pub trait Checkpointable: Params + Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;

    fn config(&self) -> &Self::Config;
    fn seed(&self) -> u64;
    fn build(config: Self::Config, seed: u64) -> Result<Self>;

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: Self::KIND.into(),
            seed: self.seed(),
            config: serde_json::to_value(self.config())?,
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    dims: t.dims.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        })
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.kind != Self::KIND {
            return Err(Error::Format(format!("expected a {} checkpoint, got {}", Self::KIND, ck.kind)));
        }
        let config: Self::Config = serde_json::from_value(ck.config.clone())?;
        let mut net = Self::build(config, ck.seed)?;
        let names: Vec<String> = net.tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != ck.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, network has {}",
                ck.tensors.len(),
                names.len()
            )));
        }
        for ((name, dst), src) in names.iter().zip(net.tensors_mut()).zip(&ck.tensors) {
            if *name != src.name || dst.dims != src.dims || src.data.len() != dst.data.len() {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    src.name, src.dims, name, dst.dims
                )));
            }
            *dst = Tensor {
                dims: src.dims.clone(),
                data: src.data.clone(),
            };
        }
        if !net.all_finite() {
            return Err(Error::Format("checkpoint contains non-finite weights".into()));
        }
        Ok(net)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.to_checkpoint()?)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        Self::from_checkpoint(&ck)
    }
}

impl Checkpointable for EstimatorParams {
    const KIND: &'static str = "estimator";
    type Config = EstimatorConfig;

    fn config(&self) -> &EstimatorConfig {
        &self.config
    }
    fn seed(&self) -> u64 {
        self.seed
    }
    fn build(config: EstimatorConfig, seed: u64) -> Result<Self> {
        EstimatorParams::new(config, seed)
    }
}

impl Checkpointable for TeacherParams {
    const KIND: &'static str = "teacher";
    type Config = TeacherConfig;

    fn config(&self) -> &TeacherConfig {
        &self.config
    }
    fn seed(&self) -> u64 {
        self.seed
    }
    fn build(config: TeacherConfig, seed: u64) -> Result<Self> {
        TeacherParams::new(config, seed)
    }
}

impl Checkpointable for StudentParams {
    const KIND: &'static str = "student";
    type Config = StudentConfig;

    fn config(&self) -> &StudentConfig {
        &self.config
    }
    fn seed(&self) -> u64 {
        self.seed
    }
    fn build(config: StudentConfig, seed: u64) -> Result<Self> {
        StudentParams::new(config, seed)
    }
}
