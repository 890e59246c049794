use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::mask::{StructuralMask, UnitId, UnitKind};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Number of tensors per transformer block.
pub(crate) const BLOCK_PARAMS: usize = 10;
/// Tensors before the first block: patch weight, patch bias, class token,
/// positional embedding.
pub(crate) const STEM_PARAMS: usize = 4;

pub(crate) mod slot {
    pub const NORM1_W: usize = 0;
    pub const NORM1_B: usize = 1;
    pub const QKV: usize = 2;
    pub const PROJ_W: usize = 3;
    pub const PROJ_B: usize = 4;
    pub const NORM2_W: usize = 5;
    pub const NORM2_B: usize = 6;
    pub const FC1: usize = 7;
    pub const FC2_W: usize = 8;
    pub const FC2_B: usize = 9;
}

const BLOCK_NAMES: [&str; BLOCK_PARAMS] = [
    "norm1.weight",
    "norm1.bias",
    "attn.qkv.weight",
    "attn.proj.weight",
    "attn.proj.bias",
    "norm2.weight",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// Named weight tensors in a fixed canonical order.
///
/// Matrices are stored `[fan_in × fan_out]` and applied as `x · W`. The
/// query/key/value weight is one `[d × 3d]` matrix whose column blocks are
/// Q, K, V; head `h` owns columns `h·dh..(h+1)·dh` inside each block and rows
/// `h·dh..(h+1)·dh` of the output projection. MLP unit `j` owns column `j` of
/// `fc1` and row `j` of `fc2`. Query/key/value and `fc1` carry no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn from_parts(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ParameterStore {
            names,
            tensors,
            index,
        })
    }

    /// Names and shapes of a full model, in canonical order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let heads = vec![config.num_heads; config.num_layers];
        let units = vec![config.mlp_hidden; config.num_layers];
        layout_with(config, &heads, &units)
    }

    /// Random initialization: Xavier-uniform matrices, zero biases, unit
    /// layer-norm gains, N(0, 0.02²) class token and positional embedding.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let entries = Self::layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else if name.starts_with("norm") || name.contains(".norm") {
                    Tensor::ones(&shape)
                } else if name == "cls_token" || name == "pos_embed" {
                    Tensor::normal(&shape, 0.02, rng)
                } else {
                    let bound = math::sqrt(6.0 / (shape[0] + shape[1]) as f64);
                    Tensor::uniform(&shape, -bound, bound, rng)
                };
                (name, t)
            })
            .collect();
        Self::from_parts(entries)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks names and shapes against the full layout of `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = Self::layout(config);
        if layout.len() != self.len() {
            return Err(Error::Contract(format!(
                "store has {} tensors, layout expects {}",
                self.len(),
                layout.len()
            )));
        }
        for ((name, shape), (have_name, t)) in layout.iter().zip(self.iter()) {
            if name != have_name {
                return Err(Error::Contract(format!("expected tensor {name}, found {have_name}")));
            }
            if shape.as_slice() != t.shape() {
                return Err(Error::dim("check_layout", shape, t.shape()));
            }
        }
        Ok(())
    }

    /// Bitwise equality of every tensor (and of the name list).
    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

pub(crate) fn block_index(layer: usize, slot: usize) -> usize {
    STEM_PARAMS + layer * BLOCK_PARAMS + slot
}

/// Layout for blocks with per-layer head and unit counts (compact models).
pub(crate) fn layout_with(config: &ModelConfig, heads: &[usize], units: &[usize]) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let hd = config.head_dim();
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![config.patch_dim(), d]),
        ("patch_embed.bias".into(), vec![d]),
        ("cls_token".into(), vec![d]),
        ("pos_embed".into(), vec![config.tokens(), d]),
    ];
    for l in 0..config.num_layers {
        let w = heads[l] * hd;
        let u = units[l];
        let shapes: [Vec<usize>; BLOCK_PARAMS] = [
            vec![d],
            vec![d],
            vec![d, 3 * w],
            vec![w, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, u],
            vec![u, d],
            vec![d],
        ];
        for (name, shape) in BLOCK_NAMES.iter().zip(shapes) {
            out.push((format!("blocks.{l}.{name}"), shape));
        }
    }
    out.push(("norm.weight".into(), vec![d]));
    out.push(("norm.bias".into(), vec![d]));
    out.push(("head.weight".into(), vec![d, config.num_classes]));
    out.push(("head.bias".into(), vec![config.num_classes]));
    out
}

/// `(tensor index, flat element index)` of every weight owned by `unit` in a
/// full-layout store.
pub fn unit_entries(config: &ModelConfig, unit: UnitId) -> Vec<(usize, usize)> {
    let d = config.embed_dim;
    let hd = config.head_dim();
    let l = unit.layer;
    let mut out = Vec::new();
    match unit.kind {
        UnitKind::Head => {
            let qkv = block_index(l, slot::QKV);
            for row in 0..d {
                for block in 0..3 {
                    for t in 0..hd {
                        out.push((qkv, row * 3 * d + block * d + unit.index * hd + t));
                    }
                }
            }
            let proj = block_index(l, slot::PROJ_W);
            for t in 0..hd {
                for col in 0..d {
                    out.push((proj, (unit.index * hd + t) * d + col));
                }
            }
        }
        UnitKind::Mlp => {
            let h = config.mlp_hidden;
            let fc1 = block_index(l, slot::FC1);
            for row in 0..d {
                out.push((fc1, row * h + unit.index));
            }
            let fc2 = block_index(l, slot::FC2_W);
            for col in 0..d {
                out.push((fc2, unit.index * d + col));
            }
        }
    }
    out
}

/// Per-tensor element flags marking weights of units that `mask` switches
/// off. `None` for tensors that hold no prunable weights.
pub fn frozen_entries(config: &ModelConfig, mask: &StructuralMask) -> Vec<Option<Vec<bool>>> {
    let layout = ParameterStore::layout(config);
    let mut out: Vec<Option<Vec<bool>>> = vec![None; layout.len()];
    for unit in StructuralMask::units(config) {
        if mask.is_active(unit) {
            continue;
        }
        for (ti, ei) in unit_entries(config, unit) {
            let n: usize = layout[ti].1.iter().product();
            out[ti].get_or_insert_with(|| vec![false; n])[ei] = true;
        }
    }
    out
}
