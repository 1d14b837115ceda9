//! A complete model: backbone, optional modulation path, and readout.

use avm_autodiff::{Tape, Tensor, Var};

use crate::backbone::{backbone_forward, Backbone};
use crate::config::{ModelSpec, ModulationConfig};
use crate::modulation::{variant_forward, Modulation};
use crate::params::{Bound, CountScope, FreezePlan, ParamGroup, ParamStore};
use crate::readout::{readout_forward, NeuronReadout, Sampling};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub readout: NeuronReadout,
    pub modulation: Option<Modulation>,
}

impl Model {
    /// Fresh parameters seeded by `spec.seed`; modulation, if present, starts
    /// with zero up-projections.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, &spec.backbone, spec.seed)?;
        let readout = NeuronReadout::init(&mut store, &spec.readout, spec.backbone.embed_dim, spec.seed)?;
        let modulation = match &spec.modulation {
            Some(m) => Some(Modulation::init(&mut store, &spec.backbone, m, spec.seed)?),
            None => None,
        };
        Ok(Self {
            spec,
            store,
            backbone,
            readout,
            modulation,
        })
    }

    /// Rebuilds module handles over an existing store, checking every shape.
    pub fn from_store(spec: ModelSpec, store: ParamStore) -> Result<Self> {
        spec.validate()?;
        let backbone = Backbone::resolve(&store, &spec.backbone)?;
        let readout = NeuronReadout::resolve(&store, &spec.readout, spec.backbone.embed_dim)?;
        let modulation = match &spec.modulation {
            Some(m) => Some(Modulation::resolve(&store, &spec.backbone, m)?),
            None => None,
        };
        let expected = spec.parameter_count();
        let actual = store.count(CountScope::All, &FreezePlan::phase1());
        if expected != actual {
            return Err(CoreError::Contract(format!(
                "store holds {actual} values but the spec describes {expected}"
            )));
        }
        Ok(Self {
            spec,
            store,
            backbone,
            readout,
            modulation,
        })
    }

    /// Replaces any modulation path with a fresh one (zero up-projections,
    /// down-projections drawn from `seed`).
    pub fn attach_modulation(&mut self, config: ModulationConfig, seed: u64) -> Result<()> {
        self.detach_modulation()?;
        let m = Modulation::init(&mut self.store, &self.spec.backbone, &config, seed)?;
        self.spec.modulation = Some(config);
        self.modulation = Some(m);
        Ok(())
    }

    pub fn detach_modulation(&mut self) -> Result<()> {
        if self.store.remove_group(ParamGroup::Modulation) > 0 {
            self.backbone = Backbone::resolve(&self.store, &self.spec.backbone)?;
            self.readout = NeuronReadout::resolve(&self.store, &self.spec.readout, self.spec.backbone.embed_dim)?;
        }
        self.spec.modulation = None;
        self.modulation = None;
        Ok(())
    }

    /// Feature map `[H'×W'×d]`, modulated when a path is attached.
    pub fn features(&self, tape: &mut Tape, bound: &Bound, image: &Tensor, behavior: &Tensor) -> Result<Var> {
        match &self.modulation {
            Some(m) => variant_forward(tape, bound, &self.backbone, m, image, behavior),
            None => backbone_forward(tape, bound, &self.backbone, image, behavior),
        }
    }

    /// Positive predictions `[N]`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: &Tensor,
        behavior: &Tensor,
        sampling: Sampling,
    ) -> Result<Var> {
        let fmap = self.features(tape, bound, image, behavior)?;
        readout_forward(tape, bound, &self.readout, fmap, sampling)
    }

    /// Eval-mode predictions on a private tape.
    pub fn predict_eval(&self, image: &Tensor, behavior: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, &FreezePlan::frozen());
        let y = self.predict(&mut tape, &bound, image, behavior, Sampling::Eval)?;
        Ok(tape.value(y)?.data().to_vec())
    }

    /// Eval-mode feature map values on a private tape.
    pub fn features_eval(&self, image: &Tensor, behavior: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, &FreezePlan::frozen());
        let f = self.features(&mut tape, &bound, image, behavior)?;
        Ok(tape.value(f)?.clone())
    }

    pub fn count_parameters(&self, scope: CountScope, plan: &FreezePlan) -> usize {
        self.store.count(scope, plan)
    }

    pub fn backbone_hash(&self) -> String {
        self.store.group_hash(ParamGroup::Backbone)
    }
}
