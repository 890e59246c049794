use alloc::vec::Vec;

use super::store::{block_index, layout_with, slot, BLOCK_PARAMS, STEM_PARAMS};
use super::{bind, forward_patches, patchify, ModelConfig, ParameterStore, StructuralMask};
use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// A physically pruned model: masked heads and MLP units are removed from
/// the weight tensors, so each layer may have a different head and unit
/// count.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    pub config: ModelConfig,
    pub heads: Vec<usize>,
    pub units: Vec<usize>,
    pub store: ParameterStore,
}

impl CompactModel {
    /// Copies the weights of the units `mask` keeps out of a full store.
    pub fn materialize(config: &ModelConfig, store: &ParameterStore, mask: &StructuralMask) -> Result<Self> {
        config.validate()?;
        mask.validate(config)?;
        store.check_layout(config)?;
        let d = config.embed_dim;
        let hd = config.head_dim();
        let h_full = config.mlp_hidden;
        let heads: Vec<usize> = (0..config.num_layers).map(|l| mask.active_heads(l).len()).collect();
        let units: Vec<usize> = (0..config.num_layers).map(|l| mask.active_units(l).len()).collect();
        let layout = layout_with(config, &heads, &units);
        let src = store.tensors();
        let mut tensors: Vec<Tensor> = Vec::with_capacity(layout.len());
        tensors.extend(src[..STEM_PARAMS].iter().cloned());
        for l in 0..config.num_layers {
            let active_heads = mask.active_heads(l);
            let active_units = mask.active_units(l);
            let w = active_heads.len() * hd;
            for s in 0..BLOCK_PARAMS {
                let full = &src[block_index(l, s)];
                let t = match s {
                    slot::QKV => {
                        let mut data = Vec::with_capacity(d * 3 * w);
                        for row in 0..d {
                            for block in 0..3 {
                                for &h in &active_heads {
                                    let start = row * 3 * d + block * d + h * hd;
                                    data.extend_from_slice(&full.data()[start..start + hd]);
                                }
                            }
                        }
                        Tensor::new(&[d, 3 * w], data)?
                    }
                    slot::PROJ_W => {
                        let mut data = Vec::with_capacity(w * d);
                        for &h in &active_heads {
                            data.extend_from_slice(&full.data()[h * hd * d..(h + 1) * hd * d]);
                        }
                        Tensor::new(&[w, d], data)?
                    }
                    slot::FC1 => {
                        let mut data = Vec::with_capacity(d * active_units.len());
                        for row in 0..d {
                            for &j in &active_units {
                                data.push(full.data()[row * h_full + j]);
                            }
                        }
                        Tensor::new(&[d, active_units.len()], data)?
                    }
                    slot::FC2_W => {
                        let mut data = Vec::with_capacity(active_units.len() * d);
                        for &j in &active_units {
                            data.extend_from_slice(full.row(j));
                        }
                        Tensor::new(&[active_units.len(), d], data)?
                    }
                    _ => full.clone(),
                };
                tensors.push(t);
            }
        }
        for t in &src[STEM_PARAMS + config.num_layers * BLOCK_PARAMS..] {
            tensors.push(t.clone());
        }
        let entries = layout.into_iter().map(|(n, _)| n).zip(tensors).collect();
        Ok(CompactModel {
            config: *config,
            heads,
            units,
            store: ParameterStore::from_parts(entries)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Parameters in the query/key/value, output-projection and MLP weight
    /// matrices, the same pool `param_counts` measures.
    pub fn prunable_params(&self) -> usize {
        (0..self.config.num_layers)
            .map(|l| {
                [slot::QKV, slot::PROJ_W, slot::FC1, slot::FC2_W]
                    .iter()
                    .map(|&s| self.store.tensors()[block_index(l, s)].len())
                    .sum::<usize>()
            })
            .sum()
    }

    /// Logits `[B × classes]` and hidden states `[B × tokens × d]`.
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let patches = patchify(&self.config, images)?;
        let batch = images.shape()[0];
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.store, &self.heads, false);
        let x = tape.constant(patches);
        let out = forward_patches(&mut tape, &self.config, &bound, None, x, batch)?;
        let logits = tape.value(out.logits).clone();
        let hidden = tape
            .value(out.hidden)
            .clone()
            .reshape(&[batch, self.config.tokens(), self.config.embed_dim])?;
        Ok((logits, hidden))
    }
}
