use peft_forge::backbone::save_checkpoint;
use peft_forge::cli::{Experiment, ExperimentConfig};
use peft_forge::multitask::*;
use peft_forge::numerics::DType;
use peft_forge::peft::PeftConfig;
use peft_forge::sharing::TrainablePolicy;
use std::collections::BTreeMap;

fn model_cfg() -> peft_forge::backbone::ModelConfig {
    let vocab = Vocab::standard();
    peft_forge::backbone::ModelConfig {
        d_model: 64, n_enc_layers: 2, n_dec_layers: 2, n_heads: 4, d_ff: 128,
        vocab_size: vocab.len(), max_positions: 64, d_visual: 20, n_visual_tokens: 16,
        bos_token: BOS, eos_token: EOS,
    }
}

fn main() {
    let dir = std::env::temp_dir().join("probe_mirror");
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt = dir.join("exist_ckpt.json");

    // Exist-only grounding pretrain, same seed (= same featurizer) as the
    // mirror runs.
    let pre = ExperimentConfig {
        model: model_cfg(),
        peft: PeftConfig::FullFinetune,
        train: TrainConfig { epochs: 20, batch_size: 32, peak_lr: 1e-3, warmup_epochs: 2,
            weight_decay: 0.01, seed: 5, use_prompt: true, eval_every: 20, dtype: DType::F32 },
        tasks: TaskSetConfig { train_size: 3000, val_size: 100, test_size: 100, overrides: BTreeMap::new(), suite: TaskSuite::ExistOnly },
        trainable_policy: TrainablePolicy::Standard,
        init_checkpoint: None, output_dir: None,
    };
    let mut e = Experiment::build(&pre).unwrap();
    let r = e.run(&mut |_| Ok(())).unwrap();
    println!("exist pretrain test: {:?}", r.test.per_task);
    save_checkpoint(&ckpt, &e.checkpoint().unwrap()).unwrap();

    for use_prompt in [true, false] {
        let cfg = ExperimentConfig {
            model: model_cfg(),
            peft: PeftConfig::FullFinetune,
            train: TrainConfig { epochs: 16, batch_size: 32, peak_lr: 1e-3, warmup_epochs: 2,
                weight_decay: 0.01, seed: 5, use_prompt, eval_every: 16, dtype: DType::F32 },
            tasks: TaskSetConfig { train_size: 1500, val_size: 50, test_size: 200, overrides: BTreeMap::new(), suite: TaskSuite::ConfusionPair },
            trainable_policy: TrainablePolicy::Standard,
            init_checkpoint: Some(ckpt.clone()), output_dir: None,
        };
        let mut e = Experiment::build(&cfg).unwrap();
        let r = e.run(&mut |_| Ok(())).unwrap();
        println!("mirror use_prompt={use_prompt}: {:?} avg {:.1}", r.test.per_task, r.test.average);
    }
}
