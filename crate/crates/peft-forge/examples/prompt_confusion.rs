//! Task prompts resolve cross-task ambiguity: two tasks drawn from the same
//! input distribution but with opposite answers are unlearnable without
//! prompts (the Bayes ceiling of the mixture is 50%) and fully learnable
//! with them.
//!
//!     cargo run --release --example prompt_confusion

use peft_forge::cli::{Experiment, ExperimentConfig};
use peft_forge::multitask::{TaskSetConfig, TaskSuite, TrainConfig, Vocab, BOS, EOS};
use peft_forge::numerics::DType;
use peft_forge::peft::PeftConfig;
use peft_forge::sharing::TrainablePolicy;

fn run(use_prompt: bool) -> peft_forge::Result<f64> {
    let vocab = Vocab::standard();
    let config = ExperimentConfig {
        model: peft_forge::backbone::ModelConfig {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: vocab.len(),
            max_positions: 64,
            d_visual: 20,
            n_visual_tokens: 16,
            bos_token: BOS,
            eos_token: EOS,
        },
        peft: PeftConfig::FullFinetune,
        train: TrainConfig {
            epochs: 24,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_epochs: 2,
            weight_decay: 0.01,
            seed: 5,
            use_prompt,
            eval_every: 24,
            dtype: DType::F32,
        },
        tasks: TaskSetConfig {
            train_size: 1500,
            val_size: 50,
            test_size: 200,
            overrides: Default::default(),
            suite: TaskSuite::ConfusionPair,
        },
        trainable_policy: TrainablePolicy::Standard,
        init_checkpoint: None,
        output_dir: None,
    };
    let mut experiment = Experiment::build(&config)?;
    let report = experiment.run(&mut |_| Ok(()))?;
    println!(
        "  use_prompt={use_prompt:<5} -> per-task {:?}, average {:.1}%",
        report.test.per_task, report.test.average
    );
    Ok(report.test.average)
}

fn main() -> peft_forge::Result<()> {
    println!("mirror_a answers truthfully, mirror_b answers inverted, same inputs:");
    let with = run(true)?;
    let without = run(false)?;
    println!("\nprompted {with:.1}% vs unprompted {without:.1}% (ceiling 50%)");
    Ok(())
}
