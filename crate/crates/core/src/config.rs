//! Architectural description of a model.

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub behavior_dim: usize,
    pub layernorm_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_h: 36,
            image_w: 64,
            patch: 4,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            behavior_dim: 5,
            layernorm_enabled: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        if self.patch == 0 || self.image_h == 0 || self.image_w == 0 {
            return fail("image and patch sizes must be positive".into());
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return fail(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be at least 1".into());
        }
        if self.behavior_dim == 0 {
            return fail("behavior_dim must be at least 1".into());
        }
        Ok(())
    }

    /// Token grid extent `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn embedding_parameter_count(&self) -> usize {
        let d = self.embed_dim;
        self.patch * self.patch * d + d + self.tokens() * d
    }

    pub fn block_parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let attention = 4 * (d * d + d);
        let mlp = d * 4 * d + 4 * d + 4 * d * d + d;
        let behavior = self.behavior_dim * d + d + d * d + d;
        let norms = if self.layernorm_enabled { 4 * d } else { 0 };
        attention + mlp + behavior + norms
    }

    pub fn parameter_count(&self) -> usize {
        self.embedding_parameter_count() + self.num_blocks * self.block_parameter_count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadoutConfig {
    pub num_neurons: usize,
    pub bias: bool,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            num_neurons: 200,
            bias: false,
        }
    }
}

impl ReadoutConfig {
    pub fn parameter_count(&self, embed_dim: usize) -> usize {
        self.num_neurons * (4 + embed_dim + usize::from(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "avm")]
    Avm,
    #[serde(rename = "avm-s")]
    AvmS,
    #[serde(rename = "avm-b")]
    AvmB,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Avm => "avm",
            Variant::AvmS => "avm-s",
            Variant::AvmB => "avm-b",
        }
    }

    /// Distinct CAMU units for `num_blocks` blocks.
    pub fn unit_count(self, num_blocks: usize) -> usize {
        match self {
            Variant::Avm => 3 * num_blocks,
            Variant::AvmS => 3,
            Variant::AvmB => 3 * num_blocks + num_blocks - 1,
        }
    }
}

/// How an insertion point consumes a CAMU.
///
/// `Residual` adds only the scaled bottleneck branch `w·Up(ReLU(Down(v)))`
/// at each insertion point, so zero up-projections reproduce the plain block
/// exactly. `Literal` adds the whole unit output `v + w·branch(v)`, which
/// double-counts the skip path that the block already carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamuWiring {
    #[default]
    Residual,
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationConfig {
    pub variant: Variant,
    pub bottleneck: usize,
    pub weight: f64,
    pub wiring: CamuWiring,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Avm,
            bottleneck: 31,
            weight: 1.0,
            wiring: CamuWiring::Residual,
        }
    }
}

impl ModulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(CoreError::Config("bottleneck must be at least 1".into()));
        }
        if !self.weight.is_finite() {
            return Err(CoreError::Config(format!("modulation weight {} is not finite", self.weight)));
        }
        Ok(())
    }

    pub fn parameter_count(&self, embed_dim: usize, num_blocks: usize) -> usize {
        self.variant.unit_count(num_blocks) * camu_parameter_count(embed_dim, self.bottleneck)
    }
}

/// `d·m + m + m·d + d`.
pub fn camu_parameter_count(d: usize, m: usize) -> usize {
    d * m + m + m * d + d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub readout: ReadoutConfig,
    pub modulation: Option<ModulationConfig>,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            readout: ReadoutConfig::default(),
            modulation: None,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.readout.num_neurons == 0 {
            return Err(CoreError::Config("num_neurons must be at least 1".into()));
        }
        if let Some(m) = &self.modulation {
            m.validate()?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let b = &self.backbone;
        b.parameter_count()
            + self.readout.parameter_count(b.embed_dim)
            + self
                .modulation
                .as_ref()
                .map_or(0, |m| m.parameter_count(b.embed_dim, b.num_blocks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_144_tokens() {
        let c = BackboneConfig::default();
        assert_eq!(c.grid(), (9, 16));
        assert_eq!(c.tokens(), 144);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = BackboneConfig { num_blocks: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c.num_blocks = 1;
        c.patch = 5;
        assert!(c.validate().is_err());
        c.patch = 4;
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_ordering_by_size() {
        let m = |v| ModulationConfig { variant: v, ..Default::default() }.parameter_count(64, 4);
        assert!(m(Variant::AvmS) < m(Variant::Avm));
        assert!(m(Variant::Avm) < m(Variant::AvmB));
        assert_eq!(camu_parameter_count(64, 31), 4063);
    }

    #[test]
    fn spec_json_rejects_unknown_fields() {
        let err = serde_json::from_str::<ModelSpec>(r#"{"backbone":{"patchsize":4}}"#);
        assert!(err.is_err());
        let spec: ModelSpec = serde_json::from_str(r#"{"modulation":{"variant":"avm-b"}}"#).unwrap();
        assert_eq!(spec.modulation.unwrap().variant, Variant::AvmB);
    }
}
