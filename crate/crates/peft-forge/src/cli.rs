//! Experiment runner: train, evaluate, audit parameters, and run gradient
//! checks from declarative JSON configs.
//!
//! One command is one process. All randomness funnels through the config's
//! single seed; component seeds derive deterministically from it (see
//! [`crate::rng::derive_seed`]), so identical configs reproduce identical
//! metrics byte for byte (wall-clock fields aside).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backbone::{
    load_checkpoint, save_checkpoint, Checkpoint, EncoderDecoderModel, ModelConfig,
};
use crate::error::{Error, Result};
use crate::multitask::{
    batch_gradients, build_universal_dataset, evaluate, generate_tasks, train, EvalReport,
    Featurizer, MetricsRecord, Split, TaskData, TaskSetConfig, TrainConfig, UniversalDataset,
    Vocab, BOS, EOS,
};
use crate::numerics::fdcheck::{check_all_ops, GradCheckReport};
use crate::numerics::{DType, GradTape, Tensor};
use crate::peft::{PeftConfig, PeftInstance};
use crate::sharing::{
    anchor_rows, audit, build_trainable_set, table1_rows, AuditReport, AuditRow, ParamRegistry,
    SharingMode, TrainablePolicy,
};
use serde::{Deserialize, Serialize};

/// Fully declarative experiment. Unknown fields are rejected so typos fail
/// fast, before any compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub peft: PeftConfig,
    pub train: TrainConfig,
    pub tasks: TaskSetConfig,
    #[serde(default)]
    pub trainable_policy: TrainablePolicy,
    /// Optional checkpoint whose backbone parameters warm-start this run
    /// (the desk analog of starting from a pretrained language model).
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.peft.validate(&self.model)?;
        self.train.validate()?;
        self.tasks.validate()?;
        let vocab = Vocab::standard();
        if self.model.vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "model.vocab_size {} is below the task vocabulary size {}",
                self.model.vocab_size,
                vocab.len()
            )));
        }
        if self.model.bos_token != BOS || self.model.eos_token != EOS {
            return Err(Error::Config(format!(
                "model bos/eos tokens must be {BOS}/{EOS} to match the task vocabulary"
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&raw).map_err(|e| {
            Error::Config(format!(
                "{} line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a finished run reports: resolved config, test scores, audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub test: EvalReport,
    pub audit: AuditReport,
    pub wall_seconds: f64,
}

/// A built experiment, ready to train or evaluate.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: EncoderDecoderModel,
    pub registry: ParamRegistry,
    pub instance: PeftInstance,
    pub tasks: Vec<TaskData>,
    pub featurizer: Featurizer,
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Experiment> {
        config.validate()?;
        let vocab = Vocab::standard();
        let seed = config.train.seed;
        let (model, mut registry) =
            EncoderDecoderModel::build(&config.model, seed, config.train.dtype)?;
        if let Some(path) = &config.init_checkpoint {
            let checkpoint = load_checkpoint(path)?;
            checkpoint.warm_start(&mut registry)?;
        }
        let tasks = generate_tasks(&vocab, &config.tasks, seed)?;
        let names: Vec<String> = tasks.iter().map(|t| t.spec.name.clone()).collect();
        let instance = PeftInstance::build(
            &config.peft,
            &config.model,
            &names,
            seed,
            config.train.dtype,
            &mut registry,
        )?;
        build_trainable_set(&mut registry, &config.peft, config.trainable_policy);
        let featurizer = Featurizer::new(seed, config.model.d_visual);
        Ok(Experiment { config: config.clone(), model, registry, instance, tasks, featurizer })
    }

    pub fn dataset(&self, split: Split) -> Result<UniversalDataset> {
        build_universal_dataset(
            &self.tasks,
            split,
            self.config.train.use_prompt,
            self.config.train.seed,
        )
    }

    pub fn evaluate_split(&self, split: Split) -> Result<EvalReport> {
        let ds = self.dataset(split)?;
        evaluate(&self.model, &self.registry, &self.instance, &ds, &self.featurizer)
    }

    pub fn audit_report(&self) -> Result<AuditReport> {
        audit(
            &self.config.model,
            &self.config.peft,
            self.tasks.len(),
            self.config.trainable_policy,
        )
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_value(&self.config)?;
        Ok(Checkpoint::from_registry(&self.config.model, meta, &self.registry))
    }

    /// Train with metrics streamed through `on_epoch`, then return the final
    /// (last-checkpoint) test report.
    pub fn run(
        &mut self,
        on_epoch: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<RunReport> {
        let started = std::time::Instant::now();
        train(
            &self.model,
            &mut self.registry,
            &self.instance,
            &self.tasks,
            &self.config.train,
            &self.featurizer,
            on_epoch,
        )?;
        let test = self.evaluate_split(Split::Test)?;
        Ok(RunReport {
            config: self.config.clone(),
            test,
            audit: self.audit_report()?,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// `train` subcommand: run the config, writing metrics.jsonl, checkpoint
/// .json, and report.json into the output directory.
pub fn cmd_train(config_path: &Path, out_override: Option<&Path>) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let out_dir: PathBuf = out_override
        .map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (set output_dir or pass --out)".into()))?;
    std::fs::create_dir_all(&out_dir)?;

    let mut experiment = Experiment::build(&config)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    let run_result = experiment.run(&mut |record| {
        serde_json::to_writer(&mut metrics_file, record)?;
        metrics_file.write_all(b"\n")?;
        metrics_file.flush()?;
        Ok(())
    });
    // Metrics are already on disk if training aborted mid-run.
    let report = run_result?;

    save_checkpoint(&out_dir.join("checkpoint.json"), &experiment.checkpoint()?)?;
    let report_json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out_dir.join("report.json"), report_json)?;
    eprintln!(
        "trained {} epochs; test average {:.2}%; outputs in {}",
        config.train.epochs,
        report.test.average,
        out_dir.display()
    );
    Ok(())
}

/// `eval` subcommand: restore a checkpoint and print split scores as JSON.
pub fn cmd_eval(checkpoint_path: &Path, split: Split) -> Result<String> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let config: ExperimentConfig = serde_json::from_value(checkpoint.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint has no embedded config: {e}")))?;
    if config.model != checkpoint.model {
        return Err(Error::Checkpoint(
            "checkpoint model header disagrees with its embedded config".into(),
        ));
    }
    let mut experiment = Experiment::build(&config)?;
    checkpoint.apply_to_registry(&mut experiment.registry)?;
    let report = experiment.evaluate_split(split)?;
    Ok(serde_json::to_string_pretty(&report)?)
}

fn rows_to_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("regime,config,trainable_count,denominator,percent\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.2}\n",
            r.regime, r.config, r.trainable_count, r.denominator, r.percent
        ));
    }
    out
}

/// `audit-params` subcommand body: CSV for the reference table, the
/// calibration anchors, or one config.
pub fn cmd_audit(config_path: Option<&Path>, table1: bool, anchors: bool) -> Result<String> {
    let mut rows = Vec::new();
    if table1 {
        rows.extend(table1_rows()?);
    }
    if anchors {
        rows.extend(anchor_rows()?);
    }
    if let Some(path) = config_path {
        let config = ExperimentConfig::load(path)?;
        let vocab = Vocab::standard();
        let tasks = generate_tasks(&vocab, &config.tasks, config.train.seed)?;
        let report = audit(
            &config.model,
            &config.peft,
            tasks.len(),
            config.trainable_policy,
        )?;
        rows.push(AuditRow {
            regime: config.peft.kind_name().to_string(),
            config: config.peft.describe(),
            trainable_count: report.trainable_total,
            denominator: report.denominator_total,
            percent: report.updated_percent,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(
            "audit-params needs --table1, --anchors, or --config PATH".into(),
        ));
    }
    Ok(rows_to_csv(&rows))
}

/// Regimes exercised by the gradient-reach check.
pub fn gradcheck_regimes() -> Vec<(&'static str, PeftConfig)> {
    vec![
        ("adapter", PeftConfig::Adapter { d: 4, sharing: SharingMode::Single }),
        (
            "compacter",
            PeftConfig::Compacter {
                d: 8,
                k: 2,
                share_a: false,
                low_rank: false,
                rank: 1,
                sharing: SharingMode::Multiple,
            },
        ),
        ("hyperformer", PeftConfig::Hyperformer { d: 4, d_e: 4, d_p: 4 }),
        ("lora", PeftConfig::Lora { rank: 2, train_bias: true, sharing: SharingMode::Single }),
        ("prompt", PeftConfig::Prompt { n_p: 3, d_m: 8, sharing: SharingMode::Single }),
    ]
}

fn gradcheck_model() -> ModelConfig {
    let vocab = Vocab::standard();
    ModelConfig {
        d_model: 16,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 4,
        d_ff: 24,
        vocab_size: vocab.len(),
        max_positions: 64,
        d_visual: 20,
        n_visual_tokens: 16,
        bos_token: BOS,
        eos_token: EOS,
    }
}

/// Gradient reach: within a few optimizer steps on random batches, every
/// trainable parameter of the regime must receive a nonzero gradient at
/// least once (up-projections start at zero, so their inputs only see
/// gradient after the first update). Checked across seeds at f64.
pub fn gradient_reach_check(peft_cfg: &PeftConfig, seeds: &[u64]) -> Result<GradCheckReport> {
    let model_cfg = gradcheck_model();
    let vocab = Vocab::standard();
    let mut worst_unreached = 0usize;
    for &seed in seeds {
        let task_cfg = TaskSetConfig {
            train_size: 6,
            val_size: 2,
            test_size: 2,
            overrides: BTreeMap::new(),
            suite: Default::default(),
        };
        let tasks = generate_tasks(&vocab, &task_cfg, seed)?;
        let names: Vec<String> = tasks.iter().map(|t| t.spec.name.clone()).collect();
        let (model, mut reg) = EncoderDecoderModel::build(&model_cfg, seed, DType::F64)?;
        let instance =
            PeftInstance::build(peft_cfg, &model_cfg, &names, seed, DType::F64, &mut reg)?;
        build_trainable_set(&mut reg, peft_cfg, TrainablePolicy::Standard);
        let featurizer = Featurizer::new(seed, model_cfg.d_visual);
        let ds = build_universal_dataset(&tasks, Split::Train, true, seed)?;
        let features: Vec<Tensor> = ds
            .examples
            .iter()
            .map(|e| featurizer.featurize(&e.scene, DType::F64))
            .collect();
        let batch: Vec<usize> = (0..ds.len()).collect();

        let mut reached: BTreeMap<String, bool> = reg
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| (k.clone(), false))
            .collect();
        let mut opt = crate::multitask::AdamW::new(0.0);
        for _step in 0..3 {
            let (_, grads) =
                batch_gradients::<f64>(&model, &reg, &instance, &ds, &features, &batch)?;
            for (key, grad) in grads.iter() {
                if grad.to_f64_vec().iter().any(|&g| g != 0.0) {
                    if let Some(slot) = reached.get_mut(key) {
                        *slot = true;
                    }
                }
            }
            opt.step(&mut reg, &grads, 1e-3)?;
        }
        let unreached = reached.values().filter(|&&r| !r).count();
        worst_unreached = worst_unreached.max(unreached);
    }
    Ok(GradCheckReport {
        name: format!("gradient_reach_{}", peft_cfg.kind_name()),
        cases: seeds.len(),
        max_rel_err: worst_unreached as f64,
        tolerance: 0.5, // zero unreached parameters passes
    })
}

/// Factored vs materialized compacter gradients: push the same loss through
/// the factored forward and through an explicitly materialized dense adapter
/// built from the same factors; parameter gradients must agree.
pub fn compacter_gradient_agreement(seed: u64) -> Result<GradCheckReport> {
    use crate::peft::compacter::{phm_materialize, PhmB, PhmFactors};
    use crate::rng::Rng;

    let mut rng = Rng::new(seed);
    let (d_i, d, k) = (8usize, 4usize, 2usize);
    let x = Tensor::gaussian(vec![3, d_i], 1.0, &mut rng, DType::F64);
    let a_t: Vec<Tensor> = (0..k)
        .map(|_| Tensor::gaussian(vec![k, k], 0.5, &mut rng, DType::F64))
        .collect();
    let b_t: Vec<Tensor> = (0..k)
        .map(|_| Tensor::gaussian(vec![d_i / k, d / k], 0.5, &mut rng, DType::F64))
        .collect();
    let weights = Tensor::gaussian(vec![3, d], 1.0, &mut rng, DType::F64);

    // Route 1: factored forward, gradients w.r.t. the factors.
    let mut tape = GradTape::<f64>::new();
    let a_ids: Vec<_> = (0..k).map(|i| tape.var(&format!("a{i}"), &a_t[i])).collect();
    let b_ids: Vec<_> = (0..k).map(|i| tape.var(&format!("b{i}"), &b_t[i])).collect();
    let theta = phm_materialize(&mut tape, &PhmFactors { a: a_ids, b: PhmB::Dense(b_ids) })?;
    let xv = tape.constant(&x);
    let y = tape.matmul(xv, theta)?;
    let w = tape.constant(&weights);
    let prod = tape.mul(y, w)?;
    let loss = tape.sum_all(prod)?;
    let factored = tape.backward(loss)?;

    // Route 2: finite differences through an independent dense pipeline that
    // materializes the Kronecker sum with straight-line loops.
    let materialize = |a_all: &[Tensor], b_all: &[Tensor]| -> Tensor {
        let mut theta = vec![0.0f64; d_i * d];
        for t in 0..k {
            let av = a_all[t].to_f64_vec();
            let bv = b_all[t].to_f64_vec();
            let (m, n) = (d_i / k, d / k);
            for i in 0..k {
                for j in 0..k {
                    for s in 0..m {
                        for u in 0..n {
                            theta[(i * m + s) * d + j * n + u] += av[i * k + j] * bv[s * n + u];
                        }
                    }
                }
            }
        }
        Tensor::new_f64(vec![d_i, d], theta).expect("fixed shape")
    };
    let loss_of = |a_all: &[Tensor], b_all: &[Tensor]| -> f64 {
        let y = x.matmul(&materialize(a_all, b_all)).expect("dims fixed");
        y.to_f64_vec()
            .iter()
            .zip(weights.to_f64_vec())
            .map(|(v, w)| v * w)
            .sum()
    };

    let mut max_err = 0.0f64;
    let h = 1e-5;
    for t in 0..k {
        let analytic = factored.get(&format!("a{t}")).expect("gradient present");
        let numeric = crate::numerics::fdcheck::finite_diff_grad(
            |probe| {
                let mut a_all = a_t.clone();
                a_all[t] = probe.clone();
                Ok(loss_of(&a_all, &b_t))
            },
            &a_t[t],
            h,
        )?;
        max_err = max_err.max(crate::numerics::fdcheck::max_rel_error(analytic, &numeric));

        let analytic = factored.get(&format!("b{t}")).expect("gradient present");
        let numeric = crate::numerics::fdcheck::finite_diff_grad(
            |probe| {
                let mut b_all = b_t.clone();
                b_all[t] = probe.clone();
                Ok(loss_of(&a_t, &b_all))
            },
            &b_t[t],
            h,
        )?;
        max_err = max_err.max(crate::numerics::fdcheck::max_rel_error(analytic, &numeric));
    }
    Ok(GradCheckReport {
        name: "compacter_factored_vs_materialized".into(),
        cases: 2 * k,
        max_rel_err: max_err,
        tolerance: 1e-8,
    })
}

/// `gradcheck` subcommand body: one pass/fail line per check. Returns the
/// formatted report and whether everything passed.
pub fn cmd_gradcheck(regime: Option<&str>) -> Result<(String, bool)> {
    let mut reports: Vec<GradCheckReport> = Vec::new();
    match regime {
        None => {
            reports.extend(check_all_ops(0xC0FFEE, 20)?);
            for (_, cfg) in gradcheck_regimes() {
                reports.push(gradient_reach_check(&cfg, &[1, 2, 3, 4, 5])?);
            }
            reports.push(compacter_gradient_agreement(7)?);
        }
        Some(name) => {
            let regimes = gradcheck_regimes();
            let (_, cfg) = regimes
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("unknown gradcheck regime {name}")))?;
            reports.push(gradient_reach_check(cfg, &[1, 2, 3, 4, 5])?);
            if name == "compacter" {
                reports.push(compacter_gradient_agreement(7)?);
            }
        }
    }
    let mut out = String::new();
    let mut all_passed = true;
    for r in &reports {
        all_passed &= r.passed();
        out.push_str(&format!(
            "{} {:32} cases={:2} max_err={:.3e} tol={:.1e}\n",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.max_rel_err,
            r.tolerance
        ));
    }
    Ok((out, all_passed))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other} (train|val|test)"))),
    }
}

const USAGE: &str = "peft-forge <command>

commands:
  train --config PATH [--out DIR]     run an experiment config
  eval --checkpoint PATH --split S    score a checkpoint on train|val|test
  audit-params [--table1] [--anchors] [--config PATH]
                                      emit parameter-accounting CSV
  gradcheck [--regime NAME]           finite-difference and reach checks

env: PEFT_FORGE_THREADS caps evaluation worker threads";

fn flag_value<'a>(args: &'a [String], flag: &str) -> Option<&'a str> {
    args.iter()
        .position(|a| a == flag)
        .and_then(|i| args.get(i + 1))
        .map(|s| s.as_str())
}

/// Entry point for the binary: parse args, run, map errors to exit codes.
pub fn run(args: &[String]) -> i32 {
    let Some(command) = args.first().map(|s| s.as_str()) else {
        eprintln!("{USAGE}");
        return 2;
    };
    let rest = &args[1..];
    let outcome: Result<()> = match command {
        "train" => match flag_value(rest, "--config") {
            Some(cfg) => cmd_train(
                Path::new(cfg),
                flag_value(rest, "--out").map(Path::new),
            ),
            None => Err(Error::Config("train requires --config PATH".into())),
        },
        "eval" => match (flag_value(rest, "--checkpoint"), flag_value(rest, "--split")) {
            (Some(ckpt), Some(split)) => cmd_eval(Path::new(ckpt), match parse_split(split) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return 2;
                }
            })
            .map(|json| println!("{json}")),
            _ => Err(Error::Config("eval requires --checkpoint PATH --split S".into())),
        },
        "audit-params" => cmd_audit(
            flag_value(rest, "--config").map(Path::new),
            rest.iter().any(|a| a == "--table1"),
            rest.iter().any(|a| a == "--anchors"),
        )
        .map(|csv| print!("{csv}")),
        "gradcheck" => match cmd_gradcheck(flag_value(rest, "--regime")) {
            Ok((report, passed)) => {
                print!("{report}");
                return if passed { 0 } else { 1 };
            }
            Err(e) => Err(e),
        },
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            return 0;
        }
        other => {
            eprintln!("unknown command {other}\n{USAGE}");
            return 2;
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}
