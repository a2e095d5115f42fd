//! One training stage: a fixed set of trainable groups, an epoch loop over
//! duration-capped batches, and per-epoch metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batching::{make_batches, MAX_BATCH_SECONDS};
use super::checkpoint::save_checkpoint;
use super::optim::{adam_step, clip_global_norm, lr_at, AdamConfig, OptimizerState};
use crate::data::SyntheticUtterance;
use crate::error::{Error, Result};
use crate::model::{Encoded, SpeechLlm};
use crate::params::{Graph, Group, GroupSet, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    /// Group names, e.g. `["projector", "fusion"]`.
    pub trainable: Vec<String>,
    pub epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_batch_seconds")]
    pub max_batch_seconds: f64,
}

fn default_batch_seconds() -> f64 {
    MAX_BATCH_SECONDS
}

impl StageConfig {
    pub fn groups(&self) -> Result<GroupSet> {
        self.trainable.iter().map(|s| s.parse()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far in this stage.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
}

/// Where a stage writes its artifacts. Either may be absent.
#[derive(Clone, Debug, Default)]
pub struct StageOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

/// Encoder outputs for a dataset, valid while the encoders are frozen.
pub fn encode_all(model: &SpeechLlm, store: &ParamStore, data: &[SyntheticUtterance]) -> Result<Vec<Encoded>> {
    data.iter().map(|u| model.encode(store, u)).collect()
}

/// Mean per-utterance teacher-forced loss.
pub fn mean_loss(model: &SpeechLlm, store: &ParamStore, data: &[SyntheticUtterance], cache: Option<&[Encoded]>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("loss evaluation data"));
    }
    let mut total = 0.0;
    for (i, u) in data.iter().enumerate() {
        let mut g = Graph::frozen(store);
        let l = model.utterance_loss(&mut g, u, cache.map(|c| &c[i]))?;
        total += g.tape().value(l).item();
    }
    Ok(total / data.len() as f64)
}

/// Trains the groups named in `stage`, leaving every other parameter
/// untouched. Encoder outputs are computed once up front unless an encoder
/// group is being trained.
pub fn run_stage(
    model: &SpeechLlm,
    store: &mut ParamStore,
    stage: &StageConfig,
    train: &[SyntheticUtterance],
    valid: &[SyntheticUtterance],
    seed: u64,
    outputs: &StageOutputs,
) -> Result<Vec<EpochMetrics>> {
    let groups = stage.groups()?;
    if train.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if groups.contains(&Group::Head) {
        return Err(Error::Invalid("the head group only exists during encoder pretraining".into()));
    }
    let encoders_frozen = groups.is_disjoint(&SpeechLlm::encoder_groups());
    let has_trainable = store.iter().any(|(_, p)| groups.contains(&p.group));

    let durations: Vec<f64> = train.iter().map(|u| u.duration_s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule: Vec<Vec<Vec<usize>>> = (0..stage.epochs)
        .map(|_| make_batches(&durations, stage.max_batch_seconds, rng.gen()))
        .collect::<Result<_>>()?;
    let total_steps: usize = schedule.iter().map(Vec::len).sum();

    let mut metrics_out = match &outputs.metrics_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let train_cache = if encoders_frozen { Some(encode_all(model, store, train)?) } else { None };
    let valid_cache = if encoders_frozen { Some(encode_all(model, store, valid)?) } else { None };
    let mut state = OptimizerState::new();
    let mut lr = 0.0;
    let mut history = Vec::with_capacity(stage.epochs);
    for (index, batches) in schedule.iter().enumerate() {
        let epoch = index + 1;
        let mut epoch_loss = 0.0;
        for batch in batches {
            let mut g = Graph::new(store, groups.clone());
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let cached = train_cache.as_ref().map(|c| &c[i]);
                parts.push(model.utterance_loss(&mut g, &train[i], cached)?);
            }
            let loss = g.mean_of(&parts)?;
            let value = g.tape().value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.name.clone(),
                    epoch,
                });
            }
            epoch_loss += value;
            if !has_trainable {
                continue;
            }
            let mut grads = g.param_grads(loss)?;
            drop(g);
            clip_global_norm(&mut grads, stage.adam.clip_norm)?;
            lr = lr_at(state.step + 1, stage.adam.warmup_steps, total_steps, stage.adam.peak_lr);
            adam_step(store, &grads, &mut state, lr, &stage.adam)?;
        }
        let valid_loss = if valid.is_empty() {
            f64::NAN
        } else {
            mean_loss(model, store, valid, valid_cache.as_deref())?
        };
        let m = EpochMetrics {
            stage: stage.name.clone(),
            epoch,
            step: state.step,
            lr,
            train_loss: epoch_loss / batches.len() as f64,
            valid_loss,
        };
        if !m.train_loss.is_finite() || !(valid.is_empty() || valid_loss.is_finite()) {
            return Err(Error::Diverged {
                stage: stage.name.clone(),
                epoch,
            });
        }
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            let meta = BTreeMap::from([
                ("stage".to_string(), stage.name.clone()),
                ("epoch".to_string(), epoch.to_string()),
                ("streams".to_string(), model.streams.key().to_string()),
            ]);
            save_checkpoint(&dir.join(format!("{}-epoch{epoch}.ckpt", stage.name)), store, &meta)?;
        }
        history.push(m);
    }
    Ok(history)
}
