//! Multi-task training: AdamW with decoupled weight decay on the trainable
//! set only, linear warmup then linear decay to zero, mixed-task batches
//! from the universal dataset, last checkpoint kept.

use std::collections::BTreeMap;
use std::time::Instant;

use super::data::{build_universal_dataset, UniversalDataset};
use super::eval::{evaluate, EvalReport};
use super::scenes::Featurizer;
use super::tasks::{Split, TaskData};
use crate::backbone::EncoderDecoderModel;
use crate::error::{Error, Result};
use crate::numerics::{DType, Element, GradTape, Gradients, ParamGroup, Tensor};
use crate::peft::PeftInstance;
use crate::rng::{derive_seed, Rng};
use crate::sharing::ParamRegistry;
use serde::{Deserialize, Serialize};

fn default_warmup() -> usize {
    2
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

fn default_eval_every() -> usize {
    1
}

fn default_dtype() -> DType {
    DType::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub use_prompt: bool,
    /// Validation cadence in epochs; the final epoch always evaluates.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 -> peak over the warmup, then linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "warmup {warmup_steps} must be below total steps {total_steps}"
        )));
    }
    Ok(if warmup_steps > 0 && step < warmup_steps {
        peak * step as f64 / warmup_steps as f64
    } else if step >= total_steps {
        0.0
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
    })
}

/// One epoch row of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_exact_match: Option<BTreeMap<String, f64>>,
    pub val_average: Option<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// AdamW with decoupled weight decay. Decay applies to matrices outside the
/// layer-norm group; biases and norms are exempt. Moments are kept at f64
/// regardless of the training dtype.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, state: BTreeMap::new() }
    }

    pub fn step(&mut self, reg: &mut ParamRegistry, grads: &Gradients, lr: f64) -> Result<()> {
        for (key, grad) in grads.iter() {
            let param = reg.get_mut(key)?;
            if !param.trainable {
                continue;
            }
            let g = grad.to_f64_vec();
            let n = g.len();
            let slot = self.state.entry(key.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let decay = if param.value.rank() >= 2 && param.group != ParamGroup::LayerNorm {
                self.weight_decay
            } else {
                0.0
            };
            let mut new_vals = param.value.to_f64_vec();
            for i in 0..n {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                new_vals[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * new_vals[i]);
            }
            param.value =
                Tensor::from_f64(param.value.shape().to_vec(), new_vals, param.value.dtype())?;
        }
        Ok(())
    }
}

/// Loss and gradients for one mixed-task batch: per-example token-mean cross
/// entropy, averaged over the batch's examples on a single tape, so shared
/// parameters accumulate gradients from every task in the batch.
pub fn batch_gradients<E: Element>(
    model: &EncoderDecoderModel,
    reg: &ParamRegistry,
    peft: &PeftInstance,
    ds: &UniversalDataset,
    features: &[Tensor],
    batch: &[usize],
) -> Result<(f64, Gradients)> {
    let mut tape = GradTape::<E>::new();
    let mut runtime = peft.runtime();
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let ex = &ds.examples[i];
        let task_idx = ds.task_index(&ex.task)?;
        let logits = model.forward(
            &mut tape,
            reg,
            &mut runtime,
            task_idx,
            &features[i],
            &ex.input_tokens,
            &ex.target_tokens,
        )?;
        losses.push(tape.cross_entropy_mean(logits, &ex.target_tokens, u32::MAX)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
    let loss_value = tape.value(loss).get(0);
    let grads = tape.backward(loss)?;
    Ok((loss_value, grads))
}

fn param_norms_by_group(reg: &ParamRegistry) -> String {
    let mut norms: BTreeMap<&'static str, f64> = BTreeMap::new();
    for (_, p) in reg.iter() {
        *norms.entry(p.group.name()).or_insert(0.0) += p.value.norm().powi(2);
    }
    norms
        .into_iter()
        .map(|(g, sq)| format!("{g}={:.3e}", sq.sqrt()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub struct TrainOutcome {
    pub history: Vec<MetricsRecord>,
}

/// Run the full training loop. `on_epoch` sees each record as it is produced
/// (the CLI streams metrics to disk so a NaN abort preserves partial output).
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &EncoderDecoderModel,
    reg: &mut ParamRegistry,
    peft: &PeftInstance,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    featurizer: &Featurizer,
    on_epoch: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    match cfg.dtype {
        DType::F32 => train_impl::<f32>(model, reg, peft, tasks, cfg, featurizer, on_epoch),
        DType::F64 => train_impl::<f64>(model, reg, peft, tasks, cfg, featurizer, on_epoch),
    }
}

fn train_impl<E: Element>(
    model: &EncoderDecoderModel,
    reg: &mut ParamRegistry,
    peft: &PeftInstance,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    featurizer: &Featurizer,
    on_epoch: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { history });
    }

    let train_ds = build_universal_dataset(tasks, Split::Train, cfg.use_prompt, cfg.seed)?;
    let val_ds = build_universal_dataset(tasks, Split::Val, cfg.use_prompt, cfg.seed)?;
    let features: Vec<Tensor> = train_ds
        .examples
        .iter()
        .map(|e| featurizer.featurize(&e.scene, cfg.dtype))
        .collect();

    let n = train_ds.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut global_step = 0usize;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = Rng::new(derive_seed(cfg.seed, &format!("epoch_order_{epoch}")));
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            global_step += 1;
            lr = lr_at(global_step, total_steps, warmup_steps, cfg.peak_lr)?;
            let step_result = batch_gradients::<E>(model, reg, peft, &train_ds, &features, batch);
            let (loss, grads) = match step_result {
                Ok(pair) if pair.0.is_finite() => pair,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    return Err(Error::Training(format!(
                        "NaN loss at step {global_step} (epoch {epoch}); param norms: {}",
                        param_norms_by_group(reg)
                    )));
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * batch.len() as f64;
            opt.step(reg, &grads, lr)?;
        }

        let (val_exact_match, val_average) =
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                let report: EvalReport = evaluate(model, reg, peft, &val_ds, featurizer)?;
                (Some(report.per_task), Some(report.average))
            } else {
                (None, None)
            };

        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_exact_match,
            val_average,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record)?;
        history.push(record);
    }

    Ok(TrainOutcome { history })
}
