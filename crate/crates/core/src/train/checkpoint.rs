use std::path::Path;

use avm_autodiff::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Moments, OptimizerState};
use super::TrainConfig;
use crate::avmd::{self, AvmdError, Container};
use crate::config::ModelSpec;
use crate::model::Model;
use crate::params::{FreezePlan, ParamGroup, ParamStore};
use crate::{CoreError, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Exact position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| CoreError::Contract(format!("checkpoint rng {what} is malformed"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

/// Complete training state: resuming from it continues bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub plan: FreezePlan,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub lr: f64,
    pub history: Vec<f64>,
    pub rng: RngState,
    /// Trial visiting order of the current epoch and the next position in it.
    pub order: Vec<usize>,
    pub cursor: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    spec: ModelSpec,
    plan: FreezePlan,
    config: TrainConfig,
    groups: Vec<(String, ParamGroup)>,
    step: u64,
    epoch: usize,
    rng: RngState,
    order: Vec<usize>,
    cursor: usize,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_store(self.spec.clone(), self.store.clone())
    }

    pub fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            config: self.config.clone(),
            groups: self.store.iter().map(|(_, p)| (p.name.clone(), p.group)).collect(),
            step: self.optimizer.t,
            epoch: self.epoch,
            rng: self.rng.clone(),
            order: self.order.clone(),
            cursor: self.cursor,
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        // Floats live in blobs so they survive bit-exactly, infinities included.
        c.push("train.scalars", Tensor::new(&[2], vec![self.best_val_loss, self.lr]).expect("two scalars"));
        c.push(
            "train.history",
            Tensor::new(&[self.history.len()], self.history.clone()).expect("history vector"),
        );
        for (_, p) in self.store.iter() {
            c.push(format!("{PARAM}{}", p.name), p.value.clone());
        }
        for (name, mom) in &self.optimizer.moments {
            let n = mom.m.len();
            c.push(format!("{ADAM_M}{name}"), Tensor::new(&[n], mom.m.clone()).expect("moment vector"));
            c.push(format!("{ADAM_V}{name}"), Tensor::new(&[n], mom.v.clone()).expect("moment vector"));
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| AvmdError::Manifest(format!("checkpoint meta: {e}")))?;
        let scalars = c.take("train.scalars")?;
        let history = c.take("train.history")?.into_data();
        let mut store = ParamStore::new();
        for (name, group) in &meta.groups {
            store.insert(name.clone(), *group, c.take(&format!("{PARAM}{name}"))?)?;
        }
        let mut optimizer = OptimizerState {
            t: meta.step,
            ..Default::default()
        };
        let names: Vec<String> = c
            .blobs
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(ADAM_M).map(str::to_string))
            .collect();
        for name in names {
            let m = c.take(&format!("{ADAM_M}{name}"))?.into_data();
            let v = c.take(&format!("{ADAM_V}{name}"))?.into_data();
            optimizer.moments.insert(name, Moments { m, v });
        }
        let ckpt = Self {
            spec: meta.spec,
            store,
            plan: meta.plan,
            config: meta.config,
            optimizer,
            epoch: meta.epoch,
            best_val_loss: scalars.data()[0],
            lr: scalars.data()[1],
            history,
            rng: meta.rng,
            order: meta.order,
            cursor: meta.cursor,
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(avmd::write(path, &self.to_container())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(avmd::read(path)?)
    }
}
