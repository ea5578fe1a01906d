//! LoRA's two equivalent forms: delta at run time, or merged into the host
//! weights afterward with zero inference overhead.
//!
//!     cargo run --release --example lora_merge

use peft_forge::backbone::{EncoderDecoderModel, ModelConfig, NoPeft};
use peft_forge::multitask::{Featurizer, SceneInstance, Vocab, BOS, EOS};
use peft_forge::numerics::{DType, GradTape, Tensor};
use peft_forge::peft::{PeftConfig, PeftInstance};
use peft_forge::rng::Rng;
use peft_forge::sharing::SharingMode;

fn main() -> peft_forge::Result<()> {
    let vocab = Vocab::standard();
    let cfg = ModelConfig {
        d_model: 32,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 4,
        d_ff: 64,
        vocab_size: vocab.len(),
        max_positions: 64,
        d_visual: 20,
        n_visual_tokens: 16,
        bos_token: BOS,
        eos_token: EOS,
    };
    let tasks = vec!["count".to_string(), "exist".to_string()];
    let (model, mut reg) = EncoderDecoderModel::build(&cfg, 3, DType::F64)?;
    let peft = PeftConfig::Lora { rank: 4, train_bias: true, sharing: SharingMode::Single };
    let inst = PeftInstance::build(&peft, &cfg, &tasks, 4, DType::F64, &mut reg)?;

    // Give the deltas nonzero values, as if trained.
    let mut rng = Rng::new(11);
    let keys: Vec<String> = reg
        .keys()
        .filter(|k| k.contains("lora_b") || k.contains("lora_bias"))
        .cloned()
        .collect();
    for key in keys {
        let p = reg.get_mut(&key)?;
        p.value = Tensor::gaussian(p.value.shape().to_vec(), 0.05, &mut rng, DType::F64);
    }

    let scene = SceneInstance::random(&mut rng, 4);
    let features = Featurizer::new(5, cfg.d_visual).featurize(&[scene], DType::F64);
    let input = [vocab.id("is")?, vocab.id("there")?, vocab.id("a")?, vocab.id("star")?];
    let target = [vocab.id("yes")?, EOS];

    // Delta form: LoRA adjusts every attention projection on the fly.
    let mut tape = GradTape::<f64>::new();
    let mut rt = inst.runtime();
    let delta_logits = {
        let id = model.forward(&mut tape, &reg, &mut rt, 0, &features, &input, &target)?;
        tape.value(id)
    };

    // Merged form: fold A*B (and bias deltas) into the host weights, then run
    // the plain frozen forward.
    let merged = inst.lora_merged_registry(&reg, "count")?;
    let mut tape = GradTape::<f64>::new();
    let merged_logits = {
        let id = model.forward(&mut tape, &merged, &mut NoPeft, 0, &features, &input, &target)?;
        tape.value(id)
    };

    println!("max |delta-form - merged-form| = {:.3e}", delta_logits.max_abs_diff(&merged_logits));
    Ok(())
}
