//! Central finite-difference verification of tape gradients.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{self, ModelConfig, ParameterStore, StructuralMask};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Perturbation `h` of the central difference `(f(x+h) − f(x−h)) / 2h`.
    pub step: f64,
    /// Bound on `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub tolerance: f64,
    /// Magnitude below which differences are judged absolutely, since the
    /// difference quotient carries about `1e-10` of rounding noise.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, entry)` with the largest error.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passed(&self, opts: &GradCheck) -> bool {
        self.max_rel_err <= opts.tolerance
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences for every input entry (or an evenly spaced subset).
pub fn check<F>(inputs: &[Tensor], f: F, opts: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).ok_or_else(|| Error::State("missing gradient".into()))?.clone();
        let n = inputs[i].len();
        let stride = n.div_ceil(opts.max_entries.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + opts.step;
            let plus = eval(&work, &f)?;
            work[i].data_mut()[j] = x0 - opts.step;
            let minus = eval(&work, &f)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Training(format!("non-finite gradient at input {i} entry {j}")));
            }
            let denom = math::abs(a).max(math::abs(numeric)).max(opts.floor);
            let err = math::abs(a - numeric) / denom;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Scalar function of the recorded inputs.
pub type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A named gradient-check problem with random inputs.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

impl Case {
    pub fn run(&self, opts: &GradCheck) -> Result<GradCheckReport> {
        check(&self.inputs, &self.f, opts)
    }
}

/// Reduces a tensor output to a scalar through fixed random weights so
/// every output entry contributes a distinct coefficient.
fn weigh(t: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let c = t.constant(w.clone());
    let y = t.mul(out, c)?;
    t.sum(y)
}

fn weighted<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// One randomly drawn instance of every differentiable op, each op's output
/// reduced by [`weigh`], plus the masked mini-ViT distillation loss.
pub fn op_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<Case> {
    let u = |shape: &[usize], rng: &mut R| Tensor::uniform(shape, -1.0, 1.0, rng);
    let mut cases = Vec::new();
    let (r, k, c) = (3, 4, 5);
    let w = weighted(&[r, c], rng);
    cases.push(Case {
        name: "matmul",
        inputs: vec![u(&[r, k], rng), u(&[k, c], rng)],
        f: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y, &w)
        }),
    });
    let w = weighted(&[r, c], rng);
    cases.push(Case {
        name: "add",
        inputs: vec![u(&[r, c], rng), u(&[r, c], rng)],
        f: Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            weigh(t, y, &w)
        }),
    });
    let w = weighted(&[r, c], rng);
    cases.push(Case {
        name: "mul",
        inputs: vec![u(&[r, c], rng), u(&[r, c], rng)],
        f: Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            weigh(t, y, &w)
        }),
    });
    let w = weighted(&[r, c], rng);
    let factor = rng.random_range(-2.0..2.0);
    cases.push(Case {
        name: "scale",
        inputs: vec![u(&[r, c], rng)],
        f: Box::new(move |t, v| {
            let y = t.scale(v[0], factor)?;
            weigh(t, y, &w)
        }),
    });
    let w = weighted(&[r, c], rng);
    cases.push(Case {
        name: "add_row_bias",
        inputs: vec![u(&[r, c], rng), u(&[c], rng)],
        f: Box::new(move |t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            weigh(t, y, &w)
        }),
    });
    cases.push(Case {
        name: "sum",
        inputs: vec![u(&[r, c], rng)],
        f: Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        }),
    });
    let w = weighted(&[r, c], rng);
    cases.push(Case {
        name: "gelu",
        inputs: vec![Tensor::uniform(&[r, c], -3.0, 3.0, rng)],
        f: Box::new(move |t, v| {
            let y = t.gelu(v[0])?;
            weigh(t, y, &w)
        }),
    });
    let w = weighted(&[r, 6], rng);
    cases.push(Case {
        name: "scale_groups",
        inputs: vec![u(&[r, 6], rng), u(&[3], rng)],
        f: Box::new(move |t, v| {
            let y = t.scale_groups(v[0], v[1], 2)?;
            weigh(t, y, &w)
        }),
    });
    let w = weighted(&[r, c], rng);
    cases.push(Case {
        name: "layer_norm",
        inputs: vec![Tensor::uniform(&[r, c], -2.0, 2.0, rng), u(&[c], rng), u(&[c], rng)],
        f: Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weigh(t, y, &w)
        }),
    });
    let (batch, tokens, heads, hd) = (2, 3, 2, 2);
    let w = weighted(&[batch * tokens, heads * hd], rng);
    cases.push(Case {
        name: "attention",
        inputs: vec![Tensor::uniform(&[batch * tokens, 3 * heads * hd], -1.5, 1.5, rng)],
        f: Box::new(move |t, v| {
            let y = t.attention(v[0], batch, heads)?;
            weigh(t, y, &w)
        }),
    });
    let (patches, d) = (2, 3);
    let w = weighted(&[batch * (patches + 1), d], rng);
    cases.push(Case {
        name: "assemble_tokens",
        inputs: vec![u(&[batch * patches, d], rng), u(&[d], rng), u(&[patches + 1, d], rng)],
        f: Box::new(move |t, v| {
            let y = t.assemble_tokens(v[0], v[1], v[2], batch)?;
            weigh(t, y, &w)
        }),
    });
    let w = weighted(&[2, c], rng);
    cases.push(Case {
        name: "select_rows",
        inputs: vec![u(&[6, c], rng)],
        f: Box::new(move |t, v| {
            let y = t.select_rows(v[0], 3, 1)?;
            weigh(t, y, &w)
        }),
    });
    let w = weighted(&[r, c], rng);
    let gamma = rng.random_range(0.5..3.0);
    cases.push(Case {
        name: "softmax_temperature",
        inputs: vec![Tensor::uniform(&[r, c], -2.0, 2.0, rng)],
        f: Box::new(move |t, v| {
            let y = t.softmax_temperature(v[0], gamma)?;
            weigh(t, y, &w)
        }),
    });
    let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    cases.push(Case {
        name: "cross_entropy",
        inputs: vec![Tensor::uniform(&[r, c], -2.0, 2.0, rng)],
        f: Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
    });
    let teacher = Tensor::uniform(&[r, c], -2.0, 2.0, rng);
    let gamma = rng.random_range(0.5..3.0);
    cases.push(Case {
        name: "kl_soft_logits",
        inputs: vec![Tensor::uniform(&[r, c], -2.0, 2.0, rng)],
        f: Box::new(move |t, v| {
            let tl = t.constant(teacher.clone());
            t.kl_soft_logits(tl, v[0], gamma)
        }),
    });
    let target = u(&[r, c], rng);
    cases.push(Case {
        name: "mse_hidden",
        inputs: vec![u(&[r, c], rng)],
        f: Box::new(move |t, v| {
            let h = t.constant(target.clone());
            t.mse_hidden(h, v[0])
        }),
    });
    cases.push(vit_case(rng));
    cases
}

/// Tiny masked mini-ViT under the full `CE + α·KL + β·MSE` objective, with
/// every parameter tensor as an input.
pub fn vit_case<R: Rng + ?Sized>(rng: &mut R) -> Case {
    let config = ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 2,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_hidden: 6,
        num_classes: 3,
    };
    let store = ParameterStore::init(&config, rng).expect("valid config");
    // zero biases and tiny embeddings make a near-symmetric point
    let inputs: Vec<Tensor> = store
        .iter()
        .map(|(name, t)| {
            if name.ends_with(".bias") || name == "cls_token" || name == "pos_embed" {
                Tensor::uniform(t.shape(), -0.5, 0.5, rng)
            } else {
                t.clone()
            }
        })
        .collect();
    let batch = 2;
    let images = Tensor::uniform(&[batch, config.channels, config.image_size, config.image_size], -1.0, 1.0, rng);
    let patches = model::patchify(&config, &images).expect("shape");
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..config.num_classes)).collect();
    let tl = Tensor::uniform(&[batch, config.num_classes], -1.0, 1.0, rng);
    let th = Tensor::uniform(&[batch * config.tokens(), config.embed_dim], -1.0, 1.0, rng);
    let mut mask = StructuralMask::full(&config);
    mask.layers[0].heads[1] = false;
    mask.layers[1].units[rng.random_range(0..config.mlp_hidden)] = false;
    let heads = vec![config.num_heads; config.num_layers];
    Case {
        name: "mini_vit_loss",
        inputs,
        f: Box::new(move |t, v| {
            let bound = model::bind_vars(v.to_vec(), &heads);
            let gates = model::mask_gates(t, &mask);
            let x = t.constant(patches.clone());
            let out = model::forward_patches(t, &config, &bound, Some(&gates), x, batch)?;
            let ce = t.cross_entropy(out.logits, &labels)?;
            let tlv = t.constant(tl.clone());
            let kl = t.kl_soft_logits(tlv, out.logits, 1.0)?;
            let kl = t.scale(kl, 0.2)?;
            let thv = t.constant(th.clone());
            let mse = t.mse_hidden(thv, out.hidden)?;
            let mse = t.scale(mse, 100.0)?;
            let l = t.add(ce, kl)?;
            t.add(l, mse)
        }),
    }
}
