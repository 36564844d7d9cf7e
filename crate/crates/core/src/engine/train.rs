//! The optimisation loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use autograd::{clip_grad_norm, ParamId, Sgd, Tape, Tensor, Var};
use log::{error, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, Sample};
use super::checkpoint::{Checkpoint, NamedTensor};
use super::config::{lr_at, TrainConfig};
use super::model::PersonSearchNet;
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::losses::{oim_update, LossComponents, OimState};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based index of the step just taken.
    pub step: usize,
    /// 1-based epoch the step belongs to.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: LossComponents,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub grad_norm: f64,
}

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub net: PersonSearchNet,
    pub oim: OimState,
    pub optimizer: Sgd,
    /// Optimizer steps completed.
    pub step: usize,
    index: &'d DatasetIndex,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, index: &'d DatasetIndex) -> Result<Self> {
        config.validate()?;
        if index.images().is_empty() {
            return Err(Error::Config(format!("dataset {} has no training images", index.name())));
        }
        let net = PersonSearchNet::new(&config.model, config.resize, config.seed);
        let oim = OimState::new(
            index.num_identities(),
            net.embedding_dim(),
            config.queue_size_for(index.name()),
            config.oim_temperature,
            config.oim_momentum,
        )?;
        Ok(Self {
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            config,
            net,
            oim,
            step: 0,
            index,
        })
    }

    /// Restores a trainer; `index` must be the dataset it was trained on.
    pub fn resume(ckpt: &Checkpoint, index: &'d DatasetIndex) -> Result<Self> {
        if ckpt.dataset != index.name() {
            return Err(Error::Checkpoint(format!(
                "checkpoint trained on {}, not {}",
                ckpt.dataset,
                index.name()
            )));
        }
        let mut t = Self::new(ckpt.config.clone(), index)?;
        load_params(&mut t.net, &ckpt.params)?;
        for b in &ckpt.buffers {
            let id = param_id(&t.net, &b.name)?;
            t.optimizer.set_buffer(id, b.value.clone());
        }
        if ckpt.oim.lut.dim() != t.oim.lut.dim() || ckpt.oim.cq.dim() != t.oim.cq.dim() {
            return Err(Error::Checkpoint("OIM memory shape does not match the dataset".into()));
        }
        t.oim = ckpt.oim.clone();
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.net.store;
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            dataset: self.index.name().to_string(),
            params: store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.as_ref().clone(),
                })
                .collect(),
            buffers: self
                .optimizer
                .buffers()
                .into_iter()
                .map(|(id, t)| NamedTensor {
                    name: store.get(id).name.clone(),
                    value: t.clone(),
                })
                .collect(),
            oim: self.oim.clone(),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch(self.index.images().len())
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.index.images().len())
    }

    /// Image positions used by optimizer step `step` (0-based): a seeded
    /// permutation per epoch, cut into consecutive batches.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.index.images().len();
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((1u64 << 32) + epoch as u64);
        order.shuffle(&mut rng);
        let b = self.config.batch_size;
        let start = (step % spe) * b;
        order[start.min(n)..(start + b).min(n)].to_vec()
    }

    /// One optimizer step. A non-finite loss leaves every piece of state
    /// untouched and returns [`Error::Divergence`].
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let spe = self.steps_per_epoch();
        let lr = lr_at(step, spe, &self.config);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);

        let tape = Tape::new();
        let batch = self.batch_indices(step);
        let inv = 1.0 / batch.len() as f64;
        let mut total: Option<Var> = None;
        let mut comps = LossComponents::default();
        let (mut rpn_cls, mut rpn_reg) = (0.0, 0.0);
        let mut memory = Vec::new();
        for &i in &batch {
            let sample = augment(&Sample::load(self.index, i)?, rng.random(), self.config.hflip_prob).resized(&self.config.resize);
            let il = self
                .net
                .image_losses(&tape, &sample, &self.oim, self.config.iou_threshold, &mut rng)?;
            let t = il.terms.combine(&self.config.loss_weights)?.scale(inv);
            total = Some(match total {
                None => t,
                Some(acc) => acc.add(t),
            });
            let c = il.terms.components();
            comps.reg1 += c.reg1 * inv;
            comps.cls1 += c.cls1 * inv;
            comps.reg2 += c.reg2 * inv;
            comps.cls2 += c.cls2 * inv;
            comps.reid += c.reid * inv;
            rpn_cls += il.terms.extra[0].1.item() * inv;
            rpn_reg += il.terms.extra[1].1.item() * inv;
            memory.extend(il.memory);
        }
        let total = total.expect("non-empty batch");
        let loss = total.item();
        if !loss.is_finite() {
            return Err(Error::Divergence { component: "total".into() });
        }
        let grads = tape.backward(total);
        let mut grads: Vec<(ParamId, Tensor)> = grads.param_grads().into_iter().map(|(id, g)| (id, g.clone())).collect();
        let grad_norm = match self.config.clip_grad_norm {
            Some(max) => clip_grad_norm(&mut grads, max),
            None => grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { component: "gradient".into() });
        }
        self.optimizer.step(&mut self.net.store, &grads, lr);
        for (x, label) in memory {
            oim_update(&mut self.oim, &x, label)?;
        }
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch: step / spe + 1,
            lr,
            loss,
            components: comps,
            rpn_cls,
            rpn_reg,
            grad_norm,
        })
    }

    /// Trains until `total_steps`, writing one JSON line per step to `log`
    /// and periodic checkpoints (plus a final one) into `checkpoint_dir`.
    /// On divergence the newest checkpoint on disk is the last good state.
    pub fn run(
        &mut self,
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>> {
        let total = self.total_steps();
        let mut logs = Vec::new();
        while self.step < total {
            let entry = match self.train_step() {
                Ok(e) => e,
                Err(e) => {
                    error!("step {}: {e}; stopping", self.step + 1);
                    return Err(e);
                }
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&entry)?)?;
            }
            on_step(&entry);
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if (every > 0 && self.step % every == 0) || self.step == total {
                    let path = checkpoint_path(dir, self.step);
                    self.checkpoint().save(&path)?;
                    self.checkpoint().save(&dir.join("last.ckpt"))?;
                    info!("saved {}", path.display());
                }
            }
            logs.push(entry);
        }
        Ok(logs)
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:07}.ckpt"))
}

fn param_id(net: &PersonSearchNet, name: &str) -> Result<ParamId> {
    net.store
        .find(name)
        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))
}

fn load_params(net: &mut PersonSearchNet, params: &[NamedTensor]) -> Result<()> {
    if params.len() != net.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            net.store.len()
        )));
    }
    for p in params {
        let id = param_id(net, &p.name)?;
        if net.store.value(id).shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
        }
        net.store.set(id, p.value.clone());
    }
    Ok(())
}

/// Rebuilds the network stored in a checkpoint, for inference.
pub fn net_from_checkpoint(ckpt: &Checkpoint) -> Result<PersonSearchNet> {
    let mut net = PersonSearchNet::new(&ckpt.config.model, ckpt.config.resize, ckpt.config.seed);
    load_params(&mut net, &ckpt.params)?;
    Ok(net)
}
