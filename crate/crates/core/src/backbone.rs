//! Patch embedding, behavior accumulation and transformer blocks.
//!
//! Per block:
//! `b ← b_prev + MLP_behavior(raw)`, `a ← MHA(x + b) + x`, `f ← MLP(a) + a`.

use avm_autodiff::{Activation, Tape, Tensor, Var};

use crate::config::BackboneConfig;
use crate::params::{Bound, Init, ParamGroup, ParamId, ParamStore, Slot};
use crate::{CoreError, Result};

const LN_EPS: f64 = 1e-5;

/// Handles of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub behavior1: Linear,
    pub behavior2: Linear,
    pub norms: Option<Norms>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub scale1: ParamId,
    pub shift1: ParamId,
    pub scale2: ParamId,
    pub shift2: ParamId,
}

impl Linear {
    /// `[fan_in×fan_out]` weight with uniform(±1/√fan_in) entries and zero bias.
    pub(crate) fn declare(slot: &mut Slot, prefix: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: slot.param(&format!("{prefix}.weight"), group, &[fan_in, fan_out], Init::Uniform(bound))?,
            bias: slot.param(&format!("{prefix}.bias"), group, &[fan_out], Init::Constant(0.0))?,
        })
    }

    /// `x·W + b` for `x: [n×fan_in]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.get(self.weight))?;
        Ok(tape.add_row(y, bound.get(self.bias))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl Backbone {
    /// Creates freshly initialized backbone parameters in `store`.
    pub fn init(store: &mut ParamStore, config: &BackboneConfig, seed: u64) -> Result<Self> {
        Self::declare(&mut Slot::Create { store, seed }, config)
    }

    /// Locates existing backbone parameters by name.
    pub fn resolve(store: &ParamStore, config: &BackboneConfig) -> Result<Self> {
        Self::declare(&mut Slot::Resolve(store), config)
    }

    fn declare(slot: &mut Slot, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Backbone;
        let d = config.embed_dim;
        let p2 = config.patch * config.patch;
        let patch = Linear::declare(slot, "backbone.patch", g, p2, d)?;
        let pos = slot.param(
            "backbone.pos",
            g,
            &[config.tokens(), d],
            Init::Uniform(1.0 / (d as f64).sqrt()),
        )?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let pre = format!("backbone.block{i}");
            let norms = if config.layernorm_enabled {
                Some(Norms {
                    scale1: slot.param(&format!("{pre}.norm1.scale"), g, &[d], Init::Constant(1.0))?,
                    shift1: slot.param(&format!("{pre}.norm1.shift"), g, &[d], Init::Constant(0.0))?,
                    scale2: slot.param(&format!("{pre}.norm2.scale"), g, &[d], Init::Constant(1.0))?,
                    shift2: slot.param(&format!("{pre}.norm2.shift"), g, &[d], Init::Constant(0.0))?,
                })
            } else {
                None
            };
            blocks.push(BlockParams {
                q: Linear::declare(slot, &format!("{pre}.attn.q"), g, d, d)?,
                k: Linear::declare(slot, &format!("{pre}.attn.k"), g, d, d)?,
                v: Linear::declare(slot, &format!("{pre}.attn.v"), g, d, d)?,
                o: Linear::declare(slot, &format!("{pre}.attn.o"), g, d, d)?,
                fc1: Linear::declare(slot, &format!("{pre}.mlp.fc1"), g, d, 4 * d)?,
                fc2: Linear::declare(slot, &format!("{pre}.mlp.fc2"), g, 4 * d, d)?,
                behavior1: Linear::declare(slot, &format!("{pre}.behavior.fc1"), g, config.behavior_dim, d)?,
                behavior2: Linear::declare(slot, &format!("{pre}.behavior.fc2"), g, d, d)?,
                norms,
            });
        }
        Ok(Self {
            config: config.clone(),
            patch,
            pos,
            blocks,
        })
    }
}

/// Rearranges an `[H×W]` image into `[tokens × patch²]`, tokens in row-major
/// grid order and pixels row-major within a patch.
pub fn patchify(image: &Tensor, config: &BackboneConfig) -> Result<Tensor> {
    let (h, w, p) = (config.image_h, config.image_w, config.patch);
    if image.shape() != [h, w] {
        return Err(CoreError::Config(format!(
            "image shape {:?} does not match configured {h}x{w}",
            image.shape()
        )));
    }
    let (rows, cols) = config.grid();
    let src = image.data();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..rows {
        for c in 0..cols {
            for u in 0..p {
                let start = (r * p + u) * w + c * p;
                out.extend_from_slice(&src[start..start + p]);
            }
        }
    }
    Ok(Tensor::new(&[rows * cols, p * p], out)?)
}

/// Token embeddings `[tokens×d]`: projected patches plus positional embedding.
pub fn patch_embed(tape: &mut Tape, bound: &Bound, backbone: &Backbone, image: &Tensor) -> Result<Var> {
    let patches = tape.constant(patchify(image, &backbone.config)?);
    let tokens = backbone.patch.forward(tape, bound, patches)?;
    Ok(tape.add(tokens, bound.get(backbone.pos))?)
}

/// `b_prev + MLP_behavior(raw)` for one block; `raw` has shape `[behavior_dim]`.
pub fn behavior_embed(tape: &mut Tape, bound: &Bound, block: &BlockParams, raw: Var, b_prev: Var) -> Result<Var> {
    let n = tape.shape(raw)?.iter().product::<usize>();
    let row = tape.reshape(raw, &[1, n])?;
    let hidden = block.behavior1.forward(tape, bound, row)?;
    let hidden = tape.relu(hidden)?;
    let out = block.behavior2.forward(tape, bound, hidden)?;
    let d = tape.shape(out)?[1];
    let out = tape.reshape(out, &[d])?;
    Ok(tape.add(b_prev, out)?)
}

/// Multi-head self-attention over `[tokens×d]`, including the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    bound: &Bound,
    block: &BlockParams,
    x: Var,
    num_heads: usize,
) -> Result<Var> {
    let d = tape.shape(x)?[1];
    let dh = d / num_heads;
    let q = block.q.forward(tape, bound, x)?;
    let k = block.k.forward(tape, bound, x)?;
    let v = block.v.forward(tape, bound, x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_last(q, h * dh, dh)?;
        let kh = tape.slice_last(k, h * dh, dh)?;
        let vh = tape.slice_last(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_lastdim(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_last(&heads)? };
    block.o.forward(tape, bound, joined)
}

/// Two-layer GELU MLP with hidden width `4d`.
pub fn block_mlp(tape: &mut Tape, bound: &Bound, block: &BlockParams, x: Var) -> Result<Var> {
    let h = block.fc1.forward(tape, bound, x)?;
    let h = tape.activation(h, Activation::Gelu)?;
    block.fc2.forward(tape, bound, h)
}

fn norm(tape: &mut Tape, bound: &Bound, x: Var, scale: ParamId, shift: ParamId) -> Result<Var> {
    Ok(tape.layer_norm(x, bound.get(scale), bound.get(shift), LN_EPS)?)
}

/// `MHA(x + b)` without the residual; pre-normalized when norms are enabled.
pub fn attention_branch(tape: &mut Tape, bound: &Bound, block: &BlockParams, x: Var, b: Var, num_heads: usize) -> Result<Var> {
    let mut h = tape.add_row(x, b)?;
    if let Some(n) = &block.norms {
        h = norm(tape, bound, h, n.scale1, n.shift1)?;
    }
    multi_head_attention(tape, bound, block, h, num_heads)
}

/// `MLP(a)` without the residual; pre-normalized when norms are enabled.
pub fn mlp_branch(tape: &mut Tape, bound: &Bound, block: &BlockParams, a: Var) -> Result<Var> {
    let mut h = a;
    if let Some(n) = &block.norms {
        h = norm(tape, bound, h, n.scale2, n.shift2)?;
    }
    block_mlp(tape, bound, block, h)
}

/// Returns `(a, f)` with `a = MHA(x + b) + x` and `f = MLP(a) + a`.
pub fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    block: &BlockParams,
    x: Var,
    b: Var,
    num_heads: usize,
) -> Result<(Var, Var)> {
    let attn = attention_branch(tape, bound, block, x, b, num_heads)?;
    let a = tape.add(attn, x)?;
    let m = mlp_branch(tape, bound, block, a)?;
    let f = tape.add(m, a)?;
    Ok((a, f))
}

/// Plain (unmodulated) forward pass; returns the feature map `[H'×W'×d]`.
pub fn backbone_forward(tape: &mut Tape, bound: &Bound, backbone: &Backbone, image: &Tensor, behavior: &Tensor) -> Result<Var> {
    let cfg = &backbone.config;
    let raw = behavior_input(tape, cfg, behavior)?;
    let mut x = patch_embed(tape, bound, backbone, image)?;
    let mut b = tape.constant(Tensor::zeros(&[cfg.embed_dim]));
    for block in &backbone.blocks {
        b = behavior_embed(tape, bound, block, raw, b)?;
        x = block_forward(tape, bound, block, x, b, cfg.num_heads)?.1;
    }
    to_feature_map(tape, cfg, x)
}

pub(crate) fn behavior_input(tape: &mut Tape, cfg: &BackboneConfig, behavior: &Tensor) -> Result<Var> {
    if behavior.numel() != cfg.behavior_dim {
        return Err(CoreError::Config(format!(
            "behavior vector has {} entries, expected {}",
            behavior.numel(),
            cfg.behavior_dim
        )));
    }
    Ok(tape.constant(behavior.clone().reshape(&[cfg.behavior_dim])?))
}

pub(crate) fn to_feature_map(tape: &mut Tape, cfg: &BackboneConfig, tokens: Var) -> Result<Var> {
    let (r, c) = cfg.grid();
    Ok(tape.reshape(tokens, &[r, c, cfg.embed_dim])?)
}
