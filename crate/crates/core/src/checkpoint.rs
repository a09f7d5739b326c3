//! JSON checkpoints: architecture metadata plus every named tensor
//! (parameters and batch-norm running statistics).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::resnet::{BatchNorm, Block, Branch, FeedforwardNet, FfLayer, Linear, ResidualNet, Skip};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    Identity,
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    PreActivation,
    Linear,
    Deleted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub skip: SkipKind,
    pub branch: BranchKind,
    pub stage: usize,
    pub width_in: usize,
    pub width_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelMeta {
    Residual {
        input_dim: usize,
        classes: usize,
        n: usize,
        transitions: Vec<usize>,
        blocks: Vec<BlockMeta>,
        #[serde(default)]
        head_norm: bool,
    },
    Feedforward {
        input_dim: usize,
        classes: usize,
        depth: usize,
        width: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: (usize, usize),
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(flatten)]
    pub model: ModelMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

/// Either kind of model, as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Residual(ResidualNet),
    Feedforward(FeedforwardNet),
}

fn store(named: Vec<(String, Tensor)>) -> BTreeMap<String, StoredTensor> {
    named
        .into_iter()
        .map(|(k, t)| {
            let shape = t.shape();
            (k, StoredTensor { shape, data: t.into_data() })
        })
        .collect()
}

impl Checkpoint {
    pub fn from_residual(net: &ResidualNet) -> Self {
        let blocks = net
            .blocks
            .iter()
            .map(|b| BlockMeta {
                skip: match b.skip {
                    Skip::Identity => SkipKind::Identity,
                    Skip::Projection(_) => SkipKind::Projection,
                },
                branch: match b.branch {
                    Some(Branch::PreActivation { .. }) => BranchKind::PreActivation,
                    Some(Branch::Linear { .. }) => BranchKind::Linear,
                    None => BranchKind::Deleted,
                },
                stage: b.stage,
                width_in: b.width_in(),
                width_out: b.width_out(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            model: ModelMeta::Residual {
                input_dim: net.input_dim(),
                classes: net.classes(),
                n: net.n(),
                transitions: net.transition_indices(),
                blocks,
                head_norm: net.head_bn.is_some(),
            },
            tensors: store(net.named_tensors()),
        }
    }

    pub fn from_feedforward(net: &FeedforwardNet) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: ModelMeta::Feedforward {
                input_dim: net.input_dim(),
                classes: net.classes(),
                depth: net.depth(),
                width: net.embed.output_dim(),
            },
            tensors: store(net.named_tensors()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported format_version {v}"))),
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Tensor::new(t.shape.0, t.shape.1, t.data).map_err(|_| Error::Checkpoint(format!("tensor {name}: data does not match shape")))
    }

    fn take_linear(&mut self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.take(&format!("{prefix}.weight"))?,
            bias: self.take(&format!("{prefix}.bias"))?,
        })
    }

    fn take_bn(&mut self, prefix: &str) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.take(&format!("{prefix}.gamma"))?,
            beta: self.take(&format!("{prefix}.beta"))?,
            running_mean: self.take(&format!("{prefix}.running_mean"))?.into_data(),
            running_var: self.take(&format!("{prefix}.running_var"))?.into_data(),
        })
    }

    pub fn into_model(mut self) -> Result<Model> {
        let bad = |e: Error| match e {
            Error::Checkpoint(m) => Error::Checkpoint(m),
            other => Error::Checkpoint(other.to_string()),
        };
        let model = match self.model.clone() {
            ModelMeta::Residual { n, blocks, head_norm, .. } => {
                if blocks.len() != n {
                    return Err(Error::Checkpoint(format!("{} block records for n = {n}", blocks.len())));
                }
                let embed = self.take_linear("embed")?;
                let mut out = Vec::with_capacity(n);
                for (i, m) in blocks.iter().enumerate() {
                    let skip = match m.skip {
                        SkipKind::Identity => Skip::Identity,
                        SkipKind::Projection => Skip::Projection(self.take(&format!("block.{i}.P"))?),
                    };
                    let branch = match m.branch {
                        BranchKind::PreActivation => Some(Branch::PreActivation {
                            bn_in: self.take_bn(&format!("block.{i}.bn_in"))?,
                            w_in: self.take(&format!("block.{i}.W_in"))?,
                            bn_out: self.take_bn(&format!("block.{i}.bn_out"))?,
                            w_out: self.take(&format!("block.{i}.W_out"))?,
                        }),
                        BranchKind::Linear => Some(Branch::Linear { weight: self.take(&format!("block.{i}.W"))? }),
                        BranchKind::Deleted => None,
                    };
                    out.push(Block::from_parts(skip, branch, m.stage, m.width_in, m.width_out));
                }
                let head_bn = if head_norm { Some(self.take_bn("head_bn")?) } else { None };
                let head = self.take_linear("head")?;
                let mut net = ResidualNet::from_parts(embed, out, head).map_err(bad)?;
                if let Some(bn) = head_bn {
                    net = net.with_head_bn(bn).map_err(bad)?;
                }
                Model::Residual(net)
            }
            ModelMeta::Feedforward { depth, .. } => {
                let embed = self.take_linear("embed")?;
                let mut layers = Vec::with_capacity(depth);
                for i in 0..depth {
                    layers.push(FfLayer {
                        weight: self.take(&format!("layer.{i}.W"))?,
                        bn: self.take_bn(&format!("layer.{i}.bn"))?,
                    });
                }
                let head = self.take_linear("head")?;
                Model::Feedforward(FeedforwardNet::from_parts(embed, layers, head).map_err(bad)?)
            }
        };
        if let Some(extra) = self.tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }
}

pub fn save_residual(net: &ResidualNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, Checkpoint::from_residual(net).to_json()?)?;
    Ok(())
}

pub fn save_feedforward(net: &FeedforwardNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, Checkpoint::from_feedforward(net).to_json()?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    Checkpoint::from_json(&fs::read_to_string(path)?)?.into_model()
}

pub fn load_residual(path: impl AsRef<Path>) -> Result<ResidualNet> {
    match load(path)? {
        Model::Residual(n) => Ok(n),
        Model::Feedforward(_) => Err(Error::Checkpoint("expected a residual model".into())),
    }
}
