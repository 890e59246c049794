//! Mini vision transformer with gateable attention heads and MLP units.
//!
//! Pruning never changes the residual width: gating a head zeroes its slice
//! of the attention output before the output projection, and gating an MLP
//! unit zeroes its activation before the second affine map. Hidden states of
//! every candidate therefore have the teacher's shape.

mod compact;
mod config;
mod mask;
mod store;

use alloc::vec::Vec;

pub use compact::CompactModel;
pub use config::ModelConfig;
pub use mask::{LayerMask, StructuralMask, UnitId, UnitKind};
pub use store::{frozen_entries, unit_entries, ParameterStore};

use store::{block_index, slot};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tape handles for one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub norm1_w: Var,
    pub norm1_b: Var,
    pub qkv: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub norm2_w: Var,
    pub norm2_b: Var,
    pub fc1: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub heads: usize,
}

/// A parameter store recorded on a tape as leaves, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BoundBlock>,
    pub norm_w: Var,
    pub norm_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

/// Per-layer gate vectors: one entry per head and one per MLP unit.
#[derive(Debug, Clone, Copy)]
pub struct LayerGates {
    pub heads: Var,
    pub units: Var,
}

/// Tape outputs of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[batch × num_classes]`
    pub logits: Var,
    /// Final block output, `[batch·tokens × embed_dim]`.
    pub hidden: Var,
}

/// Records `store` on `tape`. `heads` gives the per-layer head count the
/// store was laid out with.
pub fn bind(tape: &mut Tape, store: &ParameterStore, heads: &[usize], trainable: bool) -> BoundModel {
    let vars: Vec<Var> = store
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone(), trainable))
        .collect();
    bind_vars(vars, heads)
}

/// Interprets already-recorded vars, in canonical store order, as a model.
pub fn bind_vars(vars: Vec<Var>, heads: &[usize]) -> BoundModel {
    let blocks = heads
        .iter()
        .enumerate()
        .map(|(l, &h)| {
            let v = |s: usize| vars[block_index(l, s)];
            BoundBlock {
                norm1_w: v(slot::NORM1_W),
                norm1_b: v(slot::NORM1_B),
                qkv: v(slot::QKV),
                proj_w: v(slot::PROJ_W),
                proj_b: v(slot::PROJ_B),
                norm2_w: v(slot::NORM2_W),
                norm2_b: v(slot::NORM2_B),
                fc1: v(slot::FC1),
                fc2_w: v(slot::FC2_W),
                fc2_b: v(slot::FC2_B),
                heads: h,
            }
        })
        .collect();
    let tail = vars.len() - 4;
    BoundModel {
        patch_w: vars[0],
        patch_b: vars[1],
        cls: vars[2],
        pos: vars[3],
        blocks,
        norm_w: vars[tail],
        norm_b: vars[tail + 1],
        head_w: vars[tail + 2],
        head_b: vars[tail + 3],
        vars,
    }
}

/// Gate constants (1 for active, 0 for masked) for every layer.
pub fn mask_gates(tape: &mut Tape, mask: &StructuralMask) -> Vec<LayerGates> {
    mask.layers
        .iter()
        .map(|l| LayerGates {
            heads: tape.constant(bits_tensor(&l.heads)),
            units: tape.constant(bits_tensor(&l.units)),
        })
        .collect()
}

/// Trainable gates fixed at 1; their gradients are the unit sensitivities.
pub fn probe_gates(tape: &mut Tape, config: &ModelConfig) -> Vec<LayerGates> {
    (0..config.num_layers)
        .map(|_| LayerGates {
            heads: tape.param(Tensor::ones(&[config.num_heads])),
            units: tape.param(Tensor::ones(&[config.mlp_hidden])),
        })
        .collect()
}

fn bits_tensor(bits: &[bool]) -> Tensor {
    let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[bits.len()], data).expect("non-empty mask layer")
}

/// Rearranges `[B×C×H×W]` images into `[B·P × C·p·p]` patch rows. Patches
/// are row-major over the patch grid; each row is ordered (channel, y, x).
pub fn patchify(config: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let shape = images.shape();
    let expected = [config.channels, config.image_size, config.image_size];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::dim("patchify", shape, &expected));
    }
    let batch = shape[0];
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        let img = &images.data()[b * config.image_len()..(b + 1) * config.image_len()];
        patchify_into(config, img, &mut out);
    }
    Tensor::new(&[batch * config.num_patches(), config.patch_dim()], out)
}

/// Appends the patch rows of one `C×H×W` image to `out`.
pub fn patchify_into(config: &ModelConfig, image: &[f64], out: &mut Vec<f64>) {
    let (s, p, g) = (config.image_size, config.patch_size, config.grid_side());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..config.channels {
                for y in 0..p {
                    let row = c * s * s + (gy * p + y) * s + gx * p;
                    out.extend_from_slice(&image[row..row + p]);
                }
            }
        }
    }
}

/// Forward pass over patch rows. With `gates == None` no gating op is
/// recorded at all (the unmasked teacher path).
pub fn forward_patches(
    tape: &mut Tape,
    config: &ModelConfig,
    model: &BoundModel,
    gates: Option<&[LayerGates]>,
    patches: Var,
    batch: usize,
) -> Result<ForwardVars> {
    if let Some(g) = gates {
        if g.len() != model.blocks.len() {
            return Err(Error::MaskInvariant("gate count does not match layer count".into()));
        }
    }
    let hd = config.head_dim();
    let tokens = config.tokens();
    let emb = tape.matmul(patches, model.patch_w)?;
    let emb = tape.add_row_bias(emb, model.patch_b)?;
    let mut x = tape.assemble_tokens(emb, model.cls, model.pos, batch)?;
    for (l, block) in model.blocks.iter().enumerate() {
        let h = tape.layer_norm(x, block.norm1_w, block.norm1_b)?;
        let qkv = tape.matmul(h, block.qkv)?;
        let mut a = tape.attention(qkv, batch, block.heads)?;
        if let Some(g) = gates {
            a = tape.scale_groups(a, g[l].heads, hd)?;
        }
        let o = tape.matmul(a, block.proj_w)?;
        let o = tape.add_row_bias(o, block.proj_b)?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm(x, block.norm2_w, block.norm2_b)?;
        let u = tape.matmul(h, block.fc1)?;
        let mut u = tape.gelu(u)?;
        if let Some(g) = gates {
            u = tape.scale_groups(u, g[l].units, 1)?;
        }
        let m = tape.matmul(u, block.fc2_w)?;
        let m = tape.add_row_bias(m, block.fc2_b)?;
        x = tape.add(x, m)?;
    }
    let hidden = x;
    let y = tape.layer_norm(x, model.norm_w, model.norm_b)?;
    let cls = tape.select_rows(y, tokens, 0)?;
    let logits = tape.matmul(cls, model.head_w)?;
    let logits = tape.add_row_bias(logits, model.head_b)?;
    Ok(ForwardVars { logits, hidden })
}

/// Masked forward of a full-layout store, without gradient tracking.
///
/// Returns logits `[B × num_classes]` and the final block's hidden states
/// `[B × tokens × embed_dim]`. `mask == None` runs the ungated teacher path.
pub fn forward(
    config: &ModelConfig,
    store: &ParameterStore,
    mask: Option<&StructuralMask>,
    images: &Tensor,
) -> Result<(Tensor, Tensor)> {
    config.validate()?;
    if let Some(m) = mask {
        m.validate(config)?;
    }
    let patches = patchify(config, images)?;
    let batch = images.shape()[0];
    let (logits, hidden) = forward_rows(config, store, mask, patches, batch)?;
    let hidden = hidden.reshape(&[batch, config.tokens(), config.embed_dim])?;
    Ok((logits, hidden))
}

/// [`forward`] on pre-patchified input; hidden states stay 2-D.
pub fn forward_rows(
    config: &ModelConfig,
    store: &ParameterStore,
    mask: Option<&StructuralMask>,
    patches: Tensor,
    batch: usize,
) -> Result<(Tensor, Tensor)> {
    let heads = alloc::vec![config.num_heads; config.num_layers];
    let mut tape = Tape::new();
    let bound = bind(&mut tape, store, &heads, false);
    let gates = mask.map(|m| mask_gates(&mut tape, m));
    let x = tape.constant(patches);
    let out = forward_patches(&mut tape, config, &bound, gates.as_deref(), x, batch)?;
    Ok((tape.value(out.logits).clone(), tape.value(out.hidden).clone()))
}

/// Active and total prunable parameter counts. Scale is `active / total`.
pub fn param_counts(config: &ModelConfig, mask: &StructuralMask) -> (usize, usize) {
    let (heads, units) = mask.count_active();
    let active = heads * config.params_per_head() + units * config.params_per_unit();
    (active, config.total_prunable())
}

pub fn scale_of(config: &ModelConfig, mask: &StructuralMask) -> f64 {
    let (a, t) = param_counts(config, mask);
    a as f64 / t as f64
}

/// Fraction of all model parameters (including embeddings, norms and the
/// classifier) that `mask` keeps.
pub fn whole_model_fraction(config: &ModelConfig, mask: &StructuralMask) -> f64 {
    let total: usize = ParameterStore::layout(config)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let (active, prunable) = param_counts(config, mask);
    (total - prunable + active) as f64 / total as f64
}
