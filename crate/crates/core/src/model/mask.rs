use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Kind of prunable structure. Heads order before MLP units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    Head,
    Mlp,
}

/// One prunable unit; ordering is (layer, kind, index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub kind: UnitKind,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub heads: Vec<bool>,
    pub units: Vec<bool>,
}

/// Per-layer on/off bits for attention heads and MLP hidden units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralMask {
    pub layers: Vec<LayerMask>,
}

impl StructuralMask {
    pub fn full(config: &ModelConfig) -> Self {
        StructuralMask {
            layers: (0..config.num_layers)
                .map(|_| LayerMask {
                    heads: vec![true; config.num_heads],
                    units: vec![true; config.mlp_hidden],
                })
                .collect(),
        }
    }

    /// Keeps only the first head and first MLP unit of every layer.
    pub fn minimal(config: &ModelConfig) -> Self {
        let mut mask = Self::full(config);
        for layer in &mut mask.layers {
            layer.heads.iter_mut().skip(1).for_each(|b| *b = false);
            layer.units.iter_mut().skip(1).for_each(|b| *b = false);
        }
        mask
    }

    /// Checks the mask shape against `config` and the guard that every layer
    /// keeps at least one head and one MLP unit.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers {
            return Err(Error::MaskInvariant(format!(
                "mask has {} layers, model has {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != config.num_heads || layer.units.len() != config.mlp_hidden {
                return Err(Error::MaskInvariant(format!(
                    "layer {l} mask has {} heads / {} units, model has {} / {}",
                    layer.heads.len(),
                    layer.units.len(),
                    config.num_heads,
                    config.mlp_hidden
                )));
            }
            if !layer.heads.iter().any(|&b| b) {
                return Err(Error::MaskInvariant(format!("layer {l} has no active head")));
            }
            if !layer.units.iter().any(|&b| b) {
                return Err(Error::MaskInvariant(format!("layer {l} has no active MLP unit")));
            }
        }
        Ok(())
    }

    pub fn is_active(&self, unit: UnitId) -> bool {
        let layer = &self.layers[unit.layer];
        match unit.kind {
            UnitKind::Head => layer.heads[unit.index],
            UnitKind::Mlp => layer.units[unit.index],
        }
    }

    pub fn set(&mut self, unit: UnitId, on: bool) {
        let layer = &mut self.layers[unit.layer];
        match unit.kind {
            UnitKind::Head => layer.heads[unit.index] = on,
            UnitKind::Mlp => layer.units[unit.index] = on,
        }
    }

    /// True when every bit set here is also set in `other`.
    pub fn is_subset_of(&self, other: &StructuralMask) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.heads.len() == b.heads.len()
                    && a.units.len() == b.units.len()
                    && a.heads.iter().zip(&b.heads).all(|(x, y)| !*x || *y)
                    && a.units.iter().zip(&b.units).all(|(x, y)| !*x || *y)
            })
    }

    pub fn active_heads(&self, layer: usize) -> Vec<usize> {
        active(&self.layers[layer].heads)
    }

    pub fn active_units(&self, layer: usize) -> Vec<usize> {
        active(&self.layers[layer].units)
    }

    pub fn count_active(&self) -> (usize, usize) {
        self.layers.iter().fold((0, 0), |(h, u), l| {
            (
                h + l.heads.iter().filter(|&&b| b).count(),
                u + l.units.iter().filter(|&&b| b).count(),
            )
        })
    }

    /// Every unit in (layer, kind, index) order.
    pub fn units(config: &ModelConfig) -> impl Iterator<Item = UnitId> + '_ {
        (0..config.num_layers).flat_map(move |layer| {
            (0..config.num_heads)
                .map(move |index| UnitId {
                    layer,
                    kind: UnitKind::Head,
                    index,
                })
                .chain((0..config.mlp_hidden).map(move |index| UnitId {
                    layer,
                    kind: UnitKind::Mlp,
                    index,
                }))
        })
    }

    /// Bits in layer-major order, heads before MLP units within a layer.
    pub fn to_bits(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.heads.iter().chain(&l.units).copied())
            .collect()
    }

    pub fn from_bits(config: &ModelConfig, bits: &[bool]) -> Result<Self> {
        let per_layer = config.num_heads + config.mlp_hidden;
        if bits.len() != per_layer * config.num_layers {
            return Err(Error::MaskInvariant(format!(
                "expected {} mask bits, got {}",
                per_layer * config.num_layers,
                bits.len()
            )));
        }
        let layers = bits
            .chunks_exact(per_layer)
            .map(|chunk| LayerMask {
                heads: chunk[..config.num_heads].to_vec(),
                units: chunk[config.num_heads..].to_vec(),
            })
            .collect();
        Ok(StructuralMask { layers })
    }

    /// Packs [`Self::to_bits`] into bytes, bit `k` at position `k % 8`
    /// (least significant first) of byte `k / 8`, zero-padded at the end.
    pub fn to_bytes(&self) -> Vec<u8> {
        let bits = self.to_bits();
        let mut out = vec![0u8; bits.len().div_ceil(8)];
        for (k, &b) in bits.iter().enumerate() {
            if b {
                out[k / 8] |= 1 << (k % 8);
            }
        }
        out
    }

    pub fn from_bytes(config: &ModelConfig, bytes: &[u8]) -> Result<Self> {
        let n = config.num_units();
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::MaskInvariant(format!(
                "expected {} mask bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let bits: Vec<bool> = (0..n).map(|k| bytes[k / 8] & (1 << (k % 8)) != 0).collect();
        if (n..bytes.len() * 8).any(|k| bytes[k / 8] & (1 << (k % 8)) != 0) {
            return Err(Error::MaskInvariant("non-zero padding bits".into()));
        }
        Self::from_bits(config, &bits)
    }
}

fn active(bits: &[bool]) -> Vec<usize> {
    bits.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}
