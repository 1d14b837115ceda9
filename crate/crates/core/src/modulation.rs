//! Condition-aware modulation units (CAMUs) and the variant wirings.
//!
//! A unit computes `x + w·Up(ReLU(Down(x)))`. Each block carries three
//! insertion points: after attention (fed `x`), after the MLP (fed `a`), and
//! on the block output (fed `x` again).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use avm_autodiff::{Tape, Tensor, Var};

use crate::backbone::{attention_branch, behavior_embed, behavior_input, mlp_branch, patch_embed, to_feature_map, Backbone, BlockParams, Linear};
use crate::config::{BackboneConfig, CamuWiring, ModulationConfig, Variant};
use crate::params::{uniform_tensor, Bound, Init, ParamGroup, ParamStore, Slot};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CamuParams {
    pub name: String,
    pub down: Linear,
    pub up: Linear,
    pub weight: f64,
    pub bottleneck: usize,
}

impl CamuParams {
    fn declare(slot: &mut Slot, name: String, d: usize, config: &ModulationConfig) -> Result<Self> {
        let g = ParamGroup::Modulation;
        let m = config.bottleneck;
        let down = Linear::declare(slot, &format!("{name}.down"), g, d, m)?;
        let up = Linear {
            weight: slot.param(&format!("{name}.up.weight"), g, &[m, d], Init::Constant(0.0))?,
            bias: slot.param(&format!("{name}.up.bias"), g, &[d], Init::Constant(0.0))?,
        };
        Ok(Self {
            name,
            down,
            up,
            weight: config.weight,
            bottleneck: m,
        })
    }
}

/// One modulation path: per-block triplets plus, for AVM-B, cross units.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub config: ModulationConfig,
    /// `L` triplets, or a single shared one for AVM-S.
    pub triplets: Vec<[CamuParams; 3]>,
    /// Cross unit `k` reads the input of block `k` and adds to the output of
    /// block `k + 1`.
    pub cross: Vec<CamuParams>,
}

impl Modulation {
    pub fn init(store: &mut ParamStore, backbone: &BackboneConfig, config: &ModulationConfig, seed: u64) -> Result<Self> {
        Self::declare(&mut Slot::Create { store, seed }, backbone, config)
    }

    pub fn resolve(store: &ParamStore, backbone: &BackboneConfig, config: &ModulationConfig) -> Result<Self> {
        Self::declare(&mut Slot::Resolve(store), backbone, config)
    }

    fn declare(slot: &mut Slot, backbone: &BackboneConfig, config: &ModulationConfig) -> Result<Self> {
        config.validate()?;
        let d = backbone.embed_dim;
        let triplet = |slot: &mut Slot, prefix: &str| -> Result<[CamuParams; 3]> {
            Ok([
                CamuParams::declare(slot, format!("{prefix}.camu1"), d, config)?,
                CamuParams::declare(slot, format!("{prefix}.camu2"), d, config)?,
                CamuParams::declare(slot, format!("{prefix}.camu3"), d, config)?,
            ])
        };
        let triplets = match config.variant {
            Variant::AvmS => vec![triplet(slot, "modulation.shared")?],
            Variant::Avm | Variant::AvmB => (0..backbone.num_blocks)
                .map(|i| triplet(slot, &format!("modulation.block{i}")))
                .collect::<Result<_>>()?,
        };
        let cross = match config.variant {
            Variant::AvmB => (0..backbone.num_blocks - 1)
                .map(|k| CamuParams::declare(slot, format!("modulation.cross{k}"), d, config))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(Self {
            config: config.clone(),
            triplets,
            cross,
        })
    }

    /// Triplet used by block `i`.
    pub fn triplet(&self, i: usize) -> &[CamuParams; 3] {
        match self.config.variant {
            Variant::AvmS => &self.triplets[0],
            _ => &self.triplets[i],
        }
    }

    /// Every distinct unit, triplets first.
    pub fn units(&self) -> impl Iterator<Item = &CamuParams> {
        self.triplets.iter().flatten().chain(&self.cross)
    }

    pub fn unit_count(&self) -> usize {
        self.triplets.len() * 3 + self.cross.len()
    }

    pub fn set_weight(&mut self, w: f64) {
        self.config.weight = w;
        for t in &mut self.triplets {
            t.iter_mut().for_each(|c| c.weight = w);
        }
        self.cross.iter_mut().for_each(|c| c.weight = w);
    }
}

/// `Up(ReLU(Down(x)))`.
pub fn camu_branch(tape: &mut Tape, bound: &Bound, camu: &CamuParams, x: Var) -> Result<Var> {
    let h = camu.down.forward(tape, bound, x)?;
    let h = tape.relu(h)?;
    camu.up.forward(tape, bound, h)
}

/// `x + w·Up(ReLU(Down(x)))` over `[tokens×d]`.
pub fn camu_forward(tape: &mut Tape, bound: &Bound, camu: &CamuParams, x: Var) -> Result<Var> {
    check_width(tape, bound, camu, x)?;
    let branch = camu_branch(tape, bound, camu, x)?;
    let branch = tape.scale(branch, camu.weight)?;
    Ok(tape.add(x, branch)?)
}

fn check_width(tape: &Tape, bound: &Bound, camu: &CamuParams, x: Var) -> Result<()> {
    let shape = tape.shape(x)?;
    let d = tape.shape(bound.get(camu.down.weight))?[0];
    if shape.last() != Some(&d) {
        return Err(CoreError::Config(format!(
            "{}: input shape {shape:?} does not end in width {d}",
            camu.name
        )));
    }
    Ok(())
}

/// What an insertion point adds for input `v`.
fn contribution(tape: &mut Tape, bound: &Bound, camu: &CamuParams, v: Var, wiring: CamuWiring) -> Result<Var> {
    match wiring {
        CamuWiring::Residual => {
            let branch = camu_branch(tape, bound, camu, v)?;
            Ok(tape.scale(branch, camu.weight)?)
        }
        CamuWiring::Literal => camu_forward(tape, bound, camu, v),
    }
}

/// Block with all three insertion points:
/// `a = MHA(x+b) + x + C₁(x)`, `f_mid = MLP(a) + a + C₂(a)`, `f = f_mid + C₃(x)`.
#[allow(clippy::too_many_arguments)]
pub fn modulated_block_forward(
    tape: &mut Tape,
    bound: &Bound,
    block: &BlockParams,
    camus: &[CamuParams; 3],
    wiring: CamuWiring,
    x: Var,
    b: Var,
    num_heads: usize,
) -> Result<Var> {
    let attn = attention_branch(tape, bound, block, x, b, num_heads)?;
    let a = tape.add(attn, x)?;
    let c1 = contribution(tape, bound, &camus[0], x, wiring)?;
    let a = tape.add(a, c1)?;
    let m = mlp_branch(tape, bound, block, a)?;
    let f_mid = tape.add(m, a)?;
    let c2 = contribution(tape, bound, &camus[1], a, wiring)?;
    let f_mid = tape.add(f_mid, c2)?;
    let c3 = contribution(tape, bound, &camus[2], x, wiring)?;
    Ok(tape.add(f_mid, c3)?)
}

/// Modulated forward pass; returns the feature map `[H'×W'×d]`.
pub fn variant_forward(
    tape: &mut Tape,
    bound: &Bound,
    backbone: &Backbone,
    modulation: &Modulation,
    image: &Tensor,
    behavior: &Tensor,
) -> Result<Var> {
    let cfg = &backbone.config;
    let expected_triplets = match modulation.config.variant {
        Variant::AvmS => 1,
        _ => cfg.num_blocks,
    };
    if modulation.triplets.len() != expected_triplets {
        return Err(CoreError::Config(format!(
            "{} modulation has {} triplets for {} blocks",
            modulation.config.variant.name(),
            modulation.triplets.len(),
            cfg.num_blocks
        )));
    }
    let wiring = modulation.config.wiring;
    let raw = behavior_input(tape, cfg, behavior)?;
    let mut x = patch_embed(tape, bound, backbone, image)?;
    let mut b = tape.constant(Tensor::zeros(&[cfg.embed_dim]));
    let mut prev_input: Option<Var> = None;
    for (i, block) in backbone.blocks.iter().enumerate() {
        b = behavior_embed(tape, bound, block, raw, b)?;
        let mut f = modulated_block_forward(tape, bound, block, modulation.triplet(i), wiring, x, b, cfg.num_heads)?;
        if let (Some(cross), Some(src)) = (i.checked_sub(1).and_then(|k| modulation.cross.get(k)), prev_input) {
            let c = contribution(tape, bound, cross, src, wiring)?;
            f = tape.add(f, c)?;
        }
        prev_input = Some(x);
        x = f;
    }
    to_feature_map(tape, cfg, x)
}

/// Redraws down projections from `seed` and zeroes up projections and biases.
pub fn zero_init_modulation(store: &mut ParamStore, modulation: &Modulation, seed: u64) {
    for unit in modulation.units() {
        let (d, m) = {
            let s = store.value(unit.down.weight).shape();
            (s[0], s[1])
        };
        let name = store.get(unit.down.weight).name.clone();
        *store.value_mut(unit.down.weight) = uniform_tensor(&[d, m], 1.0 / (d as f64).sqrt(), seed, &name);
        for id in [unit.down.bias, unit.up.weight, unit.up.bias] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Writes one CSV per unit into `dir`; returns the paths written.
///
/// Columns: `block,unit,matrix,row,col,value`. Biases use row 0.
pub fn export_camu_weights(store: &ParamStore, modulation: &Modulation, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut units: Vec<(String, String, &CamuParams)> = Vec::new();
    for (i, t) in modulation.triplets.iter().enumerate() {
        let block = match modulation.config.variant {
            Variant::AvmS => "shared".to_string(),
            _ => i.to_string(),
        };
        for (k, c) in t.iter().enumerate() {
            units.push((block.clone(), (k + 1).to_string(), c));
        }
    }
    for (k, c) in modulation.cross.iter().enumerate() {
        units.push(((k + 1).to_string(), "cross".to_string(), c));
    }
    let mut paths = Vec::with_capacity(units.len());
    for (block, unit, camu) in units {
        let path = dir.join(format!("camu_block-{block}_unit-{unit}.csv"));
        let mut out = String::from("block,unit,matrix,row,col,value\n");
        for (label, id) in [
            ("down.weight", camu.down.weight),
            ("down.bias", camu.down.bias),
            ("up.weight", camu.up.weight),
            ("up.bias", camu.up.bias),
        ] {
            let t = store.value(id);
            let cols = *t.shape().last().unwrap_or(&1);
            for (n, v) in t.data().iter().enumerate() {
                out.push_str(&format!("{block},{unit},{label},{},{},{v}\n", n / cols, n % cols));
            }
        }
        let mut file = fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| CoreError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
