//! Greedy-decoding exact-match evaluation, macro-averaged across tasks.
//!
//! Evaluation is read-only over the model and registry and may fan out over
//! worker threads (capped by PEFT_FORGE_THREADS); per-example results merge
//! in index order, so the numbers are identical however the work is split.

use std::collections::BTreeMap;

use super::data::UniversalDataset;
use super::scenes::Featurizer;
use crate::backbone::{generate_greedy, EncoderDecoderModel};
use crate::error::{Error, Result};
use crate::numerics::DType;
use crate::peft::PeftInstance;
use crate::sharing::ParamRegistry;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, f64>,
    pub average: f64,
    pub n_examples: BTreeMap<String, usize>,
}

/// Worker thread cap: PEFT_FORGE_THREADS, else available parallelism.
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("PEFT_FORGE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn registry_dtype(reg: &ParamRegistry) -> Result<DType> {
    reg.iter()
        .next()
        .map(|(_, p)| p.value.dtype())
        .ok_or_else(|| Error::Config("empty registry".into()))
}

fn exact_match(
    model: &EncoderDecoderModel,
    reg: &ParamRegistry,
    peft: &PeftInstance,
    ds: &UniversalDataset,
    featurizer: &Featurizer,
    dtype: DType,
    idx: usize,
    max_len: usize,
) -> Result<bool> {
    let ex = &ds.examples[idx];
    let task_idx = ds.task_index(&ex.task)?;
    let features = featurizer.featurize(&ex.scene, dtype);
    let mut runtime = peft.runtime();
    let generated = match dtype {
        DType::F32 => generate_greedy::<f32, _>(
            model, reg, &mut runtime, task_idx, &features, &ex.input_tokens, max_len,
        )?,
        DType::F64 => generate_greedy::<f64, _>(
            model, reg, &mut runtime, task_idx, &features, &ex.input_tokens, max_len,
        )?,
    };
    let want = &ex.target_tokens[..ex.target_tokens.len().saturating_sub(1)];
    Ok(generated == want)
}

/// Exact-match percentage per task plus the macro average.
pub fn evaluate(
    model: &EncoderDecoderModel,
    reg: &ParamRegistry,
    peft: &PeftInstance,
    ds: &UniversalDataset,
    featurizer: &Featurizer,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Config("evaluate: empty dataset".into()));
    }
    let dtype = registry_dtype(reg)?;
    let max_len = ds
        .examples
        .iter()
        .map(|e| e.target_tokens.len())
        .max()
        .unwrap_or(1)
        + 1;

    let n = ds.len();
    let threads = worker_threads().min(n).max(1);
    let chunk = n.div_ceil(threads);
    let mut hits = vec![false; n];

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (c, slot) in hits.chunks_mut(chunk).enumerate() {
            let start = c * chunk;
            handles.push(scope.spawn(move || -> Result<()> {
                for (off, hit) in slot.iter_mut().enumerate() {
                    *hit = exact_match(model, reg, peft, ds, featurizer, dtype, start + off, max_len)?;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("eval worker panicked")?;
        }
        Ok(())
    })?;

    let mut correct: BTreeMap<String, usize> = BTreeMap::new();
    let mut totals: BTreeMap<String, usize> = BTreeMap::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        *totals.entry(ex.task.clone()).or_insert(0) += 1;
        *correct.entry(ex.task.clone()).or_insert(0) += hits[i] as usize;
    }
    let per_task: BTreeMap<String, f64> = totals
        .iter()
        .map(|(task, &n)| (task.clone(), 100.0 * correct[task] as f64 / n as f64))
        .collect();
    let average = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(EvalReport { per_task, average, n_examples: totals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::multitask::data::build_universal_dataset;
    use crate::multitask::tasks::{generate_tasks, Split, TaskSetConfig, TaskSuite, Vocab};
    use crate::peft::PeftConfig;

    fn setup() -> (EncoderDecoderModel, ParamRegistry, PeftInstance, UniversalDataset, Featurizer) {
        let vocab = Vocab::standard();
        let model_cfg = ModelConfig {
            d_model: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ff: 24,
            vocab_size: vocab.len(),
            max_positions: 48,
            d_visual: 12,
            n_visual_tokens: 8,
            bos_token: 1,
            eos_token: 2,
        };
        let (model, mut reg) = EncoderDecoderModel::build(&model_cfg, 5, DType::F32).unwrap();
        let cfg = TaskSetConfig {
            train_size: 4,
            val_size: 12,
            test_size: 4,
            overrides: Default::default(),
            suite: TaskSuite::Standard,
        };
        let tasks = generate_tasks(&vocab, &cfg, 3).unwrap();
        let names: Vec<String> = tasks.iter().map(|t| t.spec.name.clone()).collect();
        let inst =
            PeftInstance::build(&PeftConfig::None, &model_cfg, &names, 1, DType::F32, &mut reg)
                .unwrap();
        let ds = build_universal_dataset(&tasks, Split::Val, true, 3).unwrap();
        let featurizer = Featurizer::new(3, model_cfg.d_visual);
        (model, reg, inst, ds, featurizer)
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (model, reg, inst, ds, featurizer) = setup();
        let a = evaluate(&model, &reg, &inst, &ds, &featurizer).unwrap();
        let b = evaluate(&model, &reg, &inst, &ds, &featurizer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_is_thread_count_invariant() {
        let (model, reg, inst, ds, featurizer) = setup();
        std::env::set_var("PEFT_FORGE_THREADS", "1");
        let a = evaluate(&model, &reg, &inst, &ds, &featurizer).unwrap();
        std::env::set_var("PEFT_FORGE_THREADS", "3");
        let b = evaluate(&model, &reg, &inst, &ds, &featurizer).unwrap();
        std::env::remove_var("PEFT_FORGE_THREADS");
        assert_eq!(a, b);
    }

    #[test]
    fn macro_average_is_mean_of_tasks() {
        let (model, reg, inst, ds, featurizer) = setup();
        let report = evaluate(&model, &reg, &inst, &ds, &featurizer).unwrap();
        let mean = report.per_task.values().sum::<f64>() / report.per_task.len() as f64;
        assert!((report.average - mean).abs() < 1e-12);
        assert_eq!(report.per_task.len(), 4);
    }
}
