//! Build every PEFT kind on a small model and show two things per kind:
//! the parameter count it adds, and that its step-0 output matches the
//! frozen backbone (identity at initialization).
//!
//!     cargo run --release --example adapter_zoo

use peft_forge::backbone::{EncoderDecoderModel, ModelConfig, NoPeft};
use peft_forge::multitask::{Featurizer, SceneInstance, Vocab, BOS, EOS};
use peft_forge::numerics::{DType, GradTape};
use peft_forge::peft::{peft_param_count, PeftConfig, PeftInstance};
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
    let tasks: Vec<String> = ["count", "exist", "pair", "caption"]
        .iter()
        .map(|s| s.to_string())
        .collect();

    let zoo = [
        PeftConfig::Adapter { d: 8, sharing: SharingMode::Single },
        PeftConfig::Adapter { d: 8, sharing: SharingMode::Multiple },
        PeftConfig::Adapter { d: 8, sharing: SharingMode::HalfSharedUp },
        PeftConfig::Compacter { d: 8, k: 2, share_a: false, low_rank: false, rank: 1, sharing: SharingMode::Single },
        PeftConfig::Compacter { d: 8, k: 2, share_a: true, low_rank: true, rank: 1, sharing: SharingMode::Single },
        PeftConfig::Hyperformer { d: 8, d_e: 4, d_p: 4 },
        PeftConfig::Lora { rank: 4, train_bias: true, sharing: SharingMode::Single },
        PeftConfig::Prompt { n_p: 5, d_m: 16, sharing: SharingMode::Single },
    ];

    // A fixed random input to compare step-0 logits against the frozen model.
    let mut rng = Rng::new(9);
    let scene = SceneInstance::random(&mut rng, 5);
    let featurizer = Featurizer::new(9, cfg.d_visual);
    let features = featurizer.featurize(&[scene], DType::F64);
    let input = [vocab.id("[count]")?, 3, vocab.id("how")?, vocab.id("many")?, vocab.id("red")?];
    let target = [vocab.id("two")?, EOS];

    let (model, base_reg) = EncoderDecoderModel::build(&cfg, 1, DType::F64)?;
    let mut tape = GradTape::<f64>::new();
    let frozen_logits = {
        let id = model.forward(&mut tape, &base_reg, &mut NoPeft, 0, &features, &input, &target)?;
        tape.value(id)
    };

    println!(
        "{:<46} {:>10} {:>14}",
        "peft config", "params", "step-0 |diff|"
    );
    for peft in &zoo {
        let mut reg = base_reg.clone();
        let inst = PeftInstance::build(peft, &cfg, &tasks, 2, DType::F64, &mut reg)?;
        let count = peft_param_count(peft, &cfg, tasks.len());
        let diff = if matches!(peft, PeftConfig::Prompt { .. }) {
            // Prompts prepend rows, so the logits are not length-comparable;
            // the zero-initialized network emits constant-zero prompt vectors.
            "n/a (longer input)".to_string()
        } else {
            let mut tape = GradTape::<f64>::new();
            let mut rt = inst.runtime();
            let logits =
                model.forward(&mut tape, &reg, &mut rt, 0, &features, &input, &target)?;
            format!("{:.3e}", tape.value(logits).max_abs_diff(&frozen_logits))
        };
        println!(
            "{:<46} {:>10} {:>18}",
            format!("{} {}", peft.kind_name(), peft.describe()),
            count,
            diff
        );
    }
    Ok(())
}
