//! Instantiation and runtime attachment of a PEFT config.
//!
//! `PeftInstance::layout` enumerates every parameter the config creates (the
//! audit counts this); `build` materializes it into the registry with the
//! identity-at-init policy: down projections Gaussian (std 0.02), up
//! projections zero, hypernet output heads zero, LoRA B zero, prompt
//! embeddings Gaussian (std 0.5). Each parameter's values are drawn from an
//! RNG seeded by (seed, key), so initialization is order-independent.

use std::collections::{BTreeMap, HashMap};

use super::adapter::bottleneck_forward;
use super::compacter::{factor_dims, phm_materialize, PhmB, PhmFactors};
use super::lora::{lora_adjust, merged_weight};
use super::prompt::prompt_forward;
use super::PeftConfig;
use crate::backbone::{
    enumerate_insertion_points, point_index, InsertionPoint, ModelConfig, PeftHooks, Side, Slot,
};
use crate::error::{Error, Result};
use crate::numerics::{DType, Element, GradTape, ParamGroup, Parameter, Tensor, ValueId};
use crate::rng::{derive_seed, Rng};
use crate::sharing::{
    resolve_key, AttnProj, Bottleneck, ParamRegistry, ParamSpec, PeftRole, PromptPart, SharingMode,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Gaussian(f64),
    Zeros,
}

const HEAD_KIND_NAMES: [&str; InsertionPoint::N_SLOT_KINDS] =
    ["enc_self_attn", "enc_ff", "dec_self_attn", "dec_cross_attn", "dec_ff"];

/// Dummy point for point-independent (prompt) roles.
fn prompt_point() -> InsertionPoint {
    InsertionPoint { side: Side::Encoder, layer: 0, slot: Slot::AfterSelfAttention }
}

/// Attention sublayers LoRA targets: encoder self, decoder self, decoder cross.
fn lora_sites(model: &ModelConfig) -> Vec<InsertionPoint> {
    let mut sites = Vec::new();
    for layer in 0..model.n_enc_layers {
        sites.push(InsertionPoint { side: Side::Encoder, layer, slot: Slot::AfterSelfAttention });
    }
    for layer in 0..model.n_dec_layers {
        sites.push(InsertionPoint { side: Side::Decoder, layer, slot: Slot::AfterSelfAttention });
        sites.push(InsertionPoint { side: Side::Decoder, layer, slot: Slot::AfterCrossAttention });
    }
    sites
}

/// A built PEFT attachment: the config plus the task inventory it serves.
#[derive(Debug, Clone)]
pub struct PeftInstance {
    pub cfg: PeftConfig,
    pub model_cfg: ModelConfig,
    pub task_names: Vec<String>,
}

impl PeftInstance {
    /// Enumerate every parameter this config creates: key, shape, init rule.
    /// Shared keys (sharing modes, global factors) appear exactly once.
    fn enumerate(
        cfg: &PeftConfig,
        model: &ModelConfig,
        task_names: &[String],
    ) -> Result<BTreeMap<String, (Vec<usize>, Init)>> {
        cfg.validate(model)?;
        let d_i = model.d_model;
        let mut out: BTreeMap<String, (Vec<usize>, Init)> = BTreeMap::new();
        let mut put = |key: String, shape: Vec<usize>, init: Init| {
            out.entry(key).or_insert((shape, init));
        };

        match cfg {
            PeftConfig::None | PeftConfig::FullFinetune => {}

            PeftConfig::Adapter { d, sharing } => {
                for point in enumerate_insertion_points(model) {
                    for task in task_names {
                        let k = |role: &PeftRole| resolve_key(*sharing, task, &point, role);
                        put(k(&PeftRole::Down { sub: None })?, vec![d_i, *d], Init::Gaussian(0.02));
                        put(k(&PeftRole::BiasDown)?, vec![*d], Init::Zeros);
                        put(k(&PeftRole::Up { sub: None })?, vec![*d, d_i], Init::Zeros);
                        put(k(&PeftRole::BiasUp)?, vec![d_i], Init::Zeros);
                    }
                }
            }

            PeftConfig::Compacter { d, k, share_a, low_rank, rank, sharing } => {
                if *share_a {
                    for i in 0..*k {
                        put(format!("peft/shared/phm_a{i}"), vec![*k, *k], Init::Gaussian(0.02));
                    }
                }
                for point in enumerate_insertion_points(model) {
                    for task in task_names {
                        let kk = |role: &PeftRole| resolve_key(*sharing, task, &point, role);
                        for matrix in [Bottleneck::Down, Bottleneck::Up] {
                            // Up-side factors start at zero so the module is
                            // the identity at initialization.
                            let zero_side = matrix == Bottleneck::Up;
                            let (rows, cols) = factor_dims(matrix, d_i, *d, *k);
                            if !share_a {
                                for i in 0..*k {
                                    put(
                                        kk(&PeftRole::Factor { matrix, index: i })?,
                                        vec![*k, *k],
                                        Init::Gaussian(0.02),
                                    );
                                }
                            }
                            let role_of = |sub: String| match matrix {
                                Bottleneck::Down => PeftRole::Down { sub: Some(sub) },
                                Bottleneck::Up => PeftRole::Up { sub: Some(sub) },
                            };
                            for i in 0..*k {
                                if *low_rank {
                                    put(
                                        kk(&role_of(format!("u{i}")))?,
                                        vec![rows, *rank],
                                        if zero_side { Init::Zeros } else { Init::Gaussian(0.02) },
                                    );
                                    put(
                                        kk(&role_of(format!("v{i}")))?,
                                        vec![*rank, cols],
                                        Init::Gaussian(0.02),
                                    );
                                } else {
                                    put(
                                        kk(&role_of(format!("b{i}")))?,
                                        vec![rows, cols],
                                        if zero_side { Init::Zeros } else { Init::Gaussian(0.02) },
                                    );
                                }
                            }
                        }
                        put(kk(&PeftRole::BiasDown)?, vec![*d], Init::Zeros);
                        put(kk(&PeftRole::BiasUp)?, vec![d_i], Init::Zeros);
                    }
                }
            }

            PeftConfig::Hyperformer { d, d_e, d_p } => {
                for task in task_names {
                    put(format!("peft/hyper/task_embed/task={task}"), vec![*d_e], Init::Gaussian(0.02));
                }
                for i in 0..model.n_insertion_points() {
                    put(format!("peft/hyper/point_embed/{i:02}"), vec![*d_e], Init::Gaussian(0.02));
                }
                put("peft/hyper/proj/w1".into(), vec![2 * d_e, *d_p], Init::Gaussian(0.02));
                put("peft/hyper/proj/b1".into(), vec![*d_p], Init::Zeros);
                put("peft/hyper/proj/w2".into(), vec![*d_p, *d_p], Init::Gaussian(0.02));
                put("peft/hyper/proj/b2".into(), vec![*d_p], Init::Zeros);
                let width = 2 * d * d_i + d + d_i;
                for kind in HEAD_KIND_NAMES {
                    put(format!("peft/hyper/head/{kind}/w"), vec![*d_p, width], Init::Zeros);
                    put(format!("peft/hyper/head/{kind}/b"), vec![width], Init::Zeros);
                }
            }

            PeftConfig::Lora { rank, train_bias, sharing } => {
                for point in lora_sites(model) {
                    for task in task_names {
                        for proj in AttnProj::all() {
                            let ka = resolve_key(*sharing, task, &point, &PeftRole::LoraA { proj })?;
                            let kb = resolve_key(*sharing, task, &point, &PeftRole::LoraB { proj })?;
                            put(ka, vec![d_i, *rank], Init::Gaussian(0.02));
                            put(kb, vec![*rank, d_i], Init::Zeros);
                            if *train_bias {
                                let kbias =
                                    resolve_key(*sharing, task, &point, &PeftRole::LoraBias { proj })?;
                                put(kbias, vec![d_i], Init::Zeros);
                            }
                        }
                    }
                }
            }

            PeftConfig::Prompt { n_p, d_m, sharing } => {
                let point = prompt_point();
                for task in task_names {
                    let k = |part: PromptPart| {
                        resolve_key(*sharing, task, &point, &PeftRole::Prompt { part })
                    };
                    put(k(PromptPart::Embedding)?, vec![*n_p, d_i], Init::Gaussian(0.5));
                    put(k(PromptPart::DownWeight)?, vec![d_i, *d_m], Init::Gaussian(0.02));
                    put(k(PromptPart::DownBias)?, vec![*d_m], Init::Zeros);
                    put(k(PromptPart::UpWeight)?, vec![*d_m, d_i], Init::Zeros);
                    put(k(PromptPart::UpBias)?, vec![d_i], Init::Zeros);
                }
            }
        }
        Ok(out)
    }

    /// Shape layout of every PEFT parameter (group `peft`), without values.
    pub fn layout(
        cfg: &PeftConfig,
        model: &ModelConfig,
        task_names: &[String],
    ) -> Result<Vec<ParamSpec>> {
        Ok(Self::enumerate(cfg, model, task_names)?
            .into_iter()
            .map(|(key, (shape, _))| ParamSpec::new(key, shape, ParamGroup::Peft))
            .collect())
    }

    /// Materialize the config's parameters into the registry.
    pub fn build(
        cfg: &PeftConfig,
        model: &ModelConfig,
        task_names: &[String],
        seed: u64,
        dtype: DType,
        reg: &mut ParamRegistry,
    ) -> Result<PeftInstance> {
        for (key, (shape, init)) in Self::enumerate(cfg, model, task_names)? {
            let value = match init {
                Init::Zeros => Tensor::zeros(shape, dtype),
                Init::Gaussian(std) => {
                    let mut rng = Rng::new(derive_seed(seed, &key));
                    Tensor::gaussian(shape, std, &mut rng, dtype)
                }
            };
            reg.insert(Parameter::new(key, value, true, ParamGroup::Peft))?;
        }
        Ok(PeftInstance {
            cfg: cfg.clone(),
            model_cfg: model.clone(),
            task_names: task_names.to_vec(),
        })
    }

    /// Fresh per-step runtime. One runtime per tape; the caches hold tape
    /// value handles that are only meaningful for that step.
    pub fn runtime(&self) -> PeftRuntime<'_> {
        PeftRuntime {
            inst: self,
            hyper_cache: HashMap::new(),
            prompt_cache: HashMap::new(),
        }
    }

    fn task_name(&self, task_idx: usize) -> Result<&str> {
        self.task_names
            .get(task_idx)
            .map(|s| s.as_str())
            .ok_or_else(|| {
                Error::Index(format!(
                    "task index {task_idx} out of range ({} tasks)",
                    self.task_names.len()
                ))
            })
    }

    /// Generate one adapter's weights from the hypernetwork for (task, point).
    /// Deterministic per step; cached by the runtime so repeated requests
    /// return bit-identical tape nodes.
    pub fn hyperformer_generate<E: Element>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        task_idx: usize,
        point_idx: usize,
    ) -> Result<GeneratedAdapter> {
        let PeftConfig::Hyperformer { d, d_e, d_p } = &self.cfg else {
            return Err(Error::Config("hyperformer_generate on a non-hyperformer config".into()));
        };
        let n_points = self.model_cfg.n_insertion_points();
        if point_idx >= n_points {
            return Err(Error::Index(format!(
                "point index {point_idx} out of range ({n_points} points)"
            )));
        }
        let task = self.task_name(task_idx)?;
        let points = enumerate_insertion_points(&self.model_cfg);
        let kind = HEAD_KIND_NAMES[points[point_idx].slot_kind()];

        let p = |tape: &mut GradTape<E>, key: String| -> Result<ValueId> {
            tape.param(reg.get(&key)?)
        };
        let t_emb = p(tape, format!("peft/hyper/task_embed/task={task}"))?;
        let l_emb = p(tape, format!("peft/hyper/point_embed/{point_idx:02}"))?;
        let t_row = tape.reshape(t_emb, vec![1, *d_e])?;
        let l_row = tape.reshape(l_emb, vec![1, *d_e])?;
        let z = tape.concat_cols(&[t_row, l_row])?;

        let w1 = p(tape, "peft/hyper/proj/w1".into())?;
        let b1 = p(tape, "peft/hyper/proj/b1".into())?;
        let w2 = p(tape, "peft/hyper/proj/w2".into())?;
        let b2 = p(tape, "peft/hyper/proj/b2".into())?;
        let h = tape.matmul(z, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w2)?;
        let h = tape.add_bias(h, b2)?;
        debug_assert_eq!(tape.shape(h), &[1, *d_p]);

        let hw = p(tape, format!("peft/hyper/head/{kind}/w"))?;
        let hb = p(tape, format!("peft/hyper/head/{kind}/b"))?;
        let out = tape.matmul(h, hw)?;
        let out = tape.add_bias(out, hb)?;

        // Slices partition the head output exactly:
        // [down (d_i*d) | bias_down (d) | up (d*d_i) | bias_up (d_i)].
        let d_i = self.model_cfg.d_model;
        let mut offset = 0;
        let mut slice = |tape: &mut GradTape<E>, len: usize, shape: Vec<usize>| -> Result<ValueId> {
            let flat = tape.col_slice(out, offset, len)?;
            offset += len;
            tape.reshape(flat, shape)
        };
        let down = slice(tape, d_i * d, vec![d_i, *d])?;
        let bias_down = slice(tape, *d, vec![*d])?;
        let up = slice(tape, d * d_i, vec![*d, d_i])?;
        let bias_up = slice(tape, d_i, vec![d_i])?;
        debug_assert_eq!(offset, 2 * d * d_i + d + d_i);
        Ok(GeneratedAdapter { down, bias_down, up, bias_up })
    }

    /// Clone the registry with every LoRA delta of one task merged into its
    /// host attention weights (theta' = theta + A B, bias' = bias + delta).
    pub fn lora_merged_registry(&self, reg: &ParamRegistry, task: &str) -> Result<ParamRegistry> {
        let PeftConfig::Lora { train_bias, sharing, .. } = &self.cfg else {
            return Err(Error::Config("lora_merged_registry on a non-lora config".into()));
        };
        let mut merged = reg.clone();
        for point in lora_sites(&self.model_cfg) {
            let attn = match point.slot {
                Slot::AfterSelfAttention => "self_attn",
                Slot::AfterCrossAttention => "cross_attn",
                Slot::AfterFeedForward => unreachable!(),
            };
            let prefix = format!("backbone/{}/{}/{attn}", point.side.name(), point.layer);
            for proj in AttnProj::all() {
                let a = &reg.get(&resolve_key(*sharing, task, &point, &PeftRole::LoraA { proj })?)?.value;
                let b = &reg.get(&resolve_key(*sharing, task, &point, &PeftRole::LoraB { proj })?)?.value;
                let host_key = format!("{prefix}/w{}", proj.short());
                let new_w = merged_weight(&reg.get(&host_key)?.value, a, b)?;
                merged.get_mut(&host_key)?.value = new_w;
                if *train_bias {
                    let delta = &reg
                        .get(&resolve_key(*sharing, task, &point, &PeftRole::LoraBias { proj })?)?
                        .value;
                    let bias_key = format!("{prefix}/b{}", proj.short());
                    let new_b = reg.get(&bias_key)?.value.add(delta)?;
                    merged.get_mut(&bias_key)?.value = new_b;
                }
            }
        }
        Ok(merged)
    }
}

/// Generated adapter weights as tape values.
#[derive(Debug, Clone, Copy)]
pub struct GeneratedAdapter {
    pub down: ValueId,
    pub bias_down: ValueId,
    pub up: ValueId,
    pub bias_up: ValueId,
}

/// Per-step attachment state. Holds the instance plus caches of generated
/// values so repeated (task, point) requests within a step are bit-identical.
pub struct PeftRuntime<'a> {
    inst: &'a PeftInstance,
    hyper_cache: HashMap<(usize, usize), GeneratedAdapter>,
    prompt_cache: HashMap<usize, ValueId>,
}

impl PeftRuntime<'_> {
    pub fn instance(&self) -> &PeftInstance {
        self.inst
    }

    fn adapter_leaves<E: Element>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        sharing: SharingMode,
        task: &str,
        point: &InsertionPoint,
    ) -> Result<GeneratedAdapter> {
        let leaf = |tape: &mut GradTape<E>, role: &PeftRole| -> Result<ValueId> {
            tape.param(reg.get(&resolve_key(sharing, task, point, role)?)?)
        };
        Ok(GeneratedAdapter {
            down: leaf(tape, &PeftRole::Down { sub: None })?,
            bias_down: leaf(tape, &PeftRole::BiasDown)?,
            up: leaf(tape, &PeftRole::Up { sub: None })?,
            bias_up: leaf(tape, &PeftRole::BiasUp)?,
        })
    }

    fn compacter_matrix<E: Element>(
        &self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        task: &str,
        point: &InsertionPoint,
        matrix: Bottleneck,
    ) -> Result<ValueId> {
        let PeftConfig::Compacter { k, share_a, low_rank, sharing, .. } = &self.inst.cfg else {
            unreachable!("dispatched on kind");
        };
        let mut a = Vec::with_capacity(*k);
        for i in 0..*k {
            let key = if *share_a {
                format!("peft/shared/phm_a{i}")
            } else {
                resolve_key(*sharing, task, point, &PeftRole::Factor { matrix, index: i })?
            };
            a.push(tape.param(reg.get(&key)?)?);
        }
        let role_of = |sub: String| match matrix {
            Bottleneck::Down => PeftRole::Down { sub: Some(sub) },
            Bottleneck::Up => PeftRole::Up { sub: Some(sub) },
        };
        let b = if *low_rank {
            let mut uv = Vec::with_capacity(*k);
            for i in 0..*k {
                let u = tape.param(reg.get(&resolve_key(*sharing, task, point, &role_of(format!("u{i}")))?)?)?;
                let v = tape.param(reg.get(&resolve_key(*sharing, task, point, &role_of(format!("v{i}")))?)?)?;
                uv.push((u, v));
            }
            PhmB::LowRank(uv)
        } else {
            let mut bs = Vec::with_capacity(*k);
            for i in 0..*k {
                bs.push(tape.param(reg.get(&resolve_key(*sharing, task, point, &role_of(format!("b{i}")))?)?)?);
            }
            PhmB::Dense(bs)
        };
        phm_materialize(tape, &PhmFactors { a, b })
    }
}

impl<E: Element> PeftHooks<E> for PeftRuntime<'_> {
    fn encoder_prefix(
        &mut self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        task_idx: usize,
    ) -> Result<Option<ValueId>> {
        let PeftConfig::Prompt { sharing, .. } = &self.inst.cfg else {
            return Ok(None);
        };
        if let Some(&cached) = self.prompt_cache.get(&task_idx) {
            return Ok(Some(cached));
        }
        let task = self.inst.task_name(task_idx)?;
        let point = prompt_point();
        let leaf = |tape: &mut GradTape<E>, part: PromptPart| -> Result<ValueId> {
            tape.param(reg.get(&resolve_key(*sharing, task, &point, &PeftRole::Prompt { part })?)?)
        };
        let embed = leaf(tape, PromptPart::Embedding)?;
        let down = leaf(tape, PromptPart::DownWeight)?;
        let bias_down = leaf(tape, PromptPart::DownBias)?;
        let up = leaf(tape, PromptPart::UpWeight)?;
        let bias_up = leaf(tape, PromptPart::UpBias)?;
        let rows = prompt_forward(tape, embed, down, bias_down, up, bias_up)?;
        self.prompt_cache.insert(task_idx, rows);
        Ok(Some(rows))
    }

    fn sublayer_hook(
        &mut self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        point: InsertionPoint,
        x: ValueId,
        task_idx: usize,
    ) -> Result<ValueId> {
        match &self.inst.cfg {
            PeftConfig::Adapter { sharing, .. } => {
                let task = self.inst.task_name(task_idx)?.to_string();
                let w = self.adapter_leaves(tape, reg, *sharing, &task, &point)?;
                bottleneck_forward(tape, x, w.down, w.bias_down, w.up, w.bias_up)
            }
            PeftConfig::Compacter { sharing, .. } => {
                let task = self.inst.task_name(task_idx)?.to_string();
                let down = self.compacter_matrix(tape, reg, &task, &point, Bottleneck::Down)?;
                let up = self.compacter_matrix(tape, reg, &task, &point, Bottleneck::Up)?;
                let bias_down =
                    tape.param(reg.get(&resolve_key(*sharing, &task, &point, &PeftRole::BiasDown)?)?)?;
                let bias_up =
                    tape.param(reg.get(&resolve_key(*sharing, &task, &point, &PeftRole::BiasUp)?)?)?;
                bottleneck_forward(tape, x, down, bias_down, up, bias_up)
            }
            PeftConfig::Hyperformer { .. } => {
                let point_idx = point_index(&self.inst.model_cfg, point);
                let generated = match self.hyper_cache.get(&(task_idx, point_idx)) {
                    Some(&g) => g,
                    None => {
                        let g = self.inst.hyperformer_generate(tape, reg, task_idx, point_idx)?;
                        self.hyper_cache.insert((task_idx, point_idx), g);
                        g
                    }
                };
                bottleneck_forward(tape, x, generated.down, generated.bias_down, generated.up, generated.bias_up)
            }
            _ => Ok(x),
        }
    }

    fn attn_adjust(
        &mut self,
        tape: &mut GradTape<E>,
        reg: &ParamRegistry,
        x_in: ValueId,
        base: ValueId,
        point: InsertionPoint,
        proj: AttnProj,
        task_idx: usize,
    ) -> Result<ValueId> {
        let PeftConfig::Lora { train_bias, sharing, .. } = &self.inst.cfg else {
            return Ok(base);
        };
        let task = self.inst.task_name(task_idx)?;
        let a = tape.param(reg.get(&resolve_key(*sharing, task, &point, &PeftRole::LoraA { proj })?)?)?;
        let b = tape.param(reg.get(&resolve_key(*sharing, task, &point, &PeftRole::LoraB { proj })?)?)?;
        let bias_delta = if *train_bias {
            Some(tape.param(
                reg.get(&resolve_key(*sharing, task, &point, &PeftRole::LoraBias { proj })?)?,
            )?)
        } else {
            None
        };
        lora_adjust(tape, x_in, base, a, b, bias_delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::counts::peft_param_count;

    fn model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 24,
            max_positions: 48,
            d_visual: 8,
            n_visual_tokens: 3,
            bos_token: 1,
            eos_token: 2,
        }
    }

    fn tasks() -> Vec<String> {
        vec!["count".into(), "exist".into(), "pair".into(), "caption".into()]
    }

    fn all_configs() -> Vec<PeftConfig> {
        let mut cfgs = Vec::new();
        for sharing in [
            SharingMode::Single,
            SharingMode::Multiple,
            SharingMode::HalfSharedUp,
            SharingMode::HalfSharedDown,
        ] {
            cfgs.push(PeftConfig::Adapter { d: 4, sharing });
            cfgs.push(PeftConfig::Compacter {
                d: 8,
                k: 2,
                share_a: false,
                low_rank: false,
                rank: 1,
                sharing,
            });
            cfgs.push(PeftConfig::Compacter {
                d: 8,
                k: 4,
                share_a: true,
                low_rank: true,
                rank: 2,
                sharing,
            });
        }
        for sharing in [SharingMode::Single, SharingMode::Multiple] {
            cfgs.push(PeftConfig::Lora { rank: 2, train_bias: true, sharing });
            cfgs.push(PeftConfig::Lora { rank: 3, train_bias: false, sharing });
            cfgs.push(PeftConfig::Prompt { n_p: 5, d_m: 12, sharing });
        }
        cfgs.push(PeftConfig::Hyperformer { d: 4, d_e: 3, d_p: 5 });
        cfgs
    }

    #[test]
    fn closed_form_counts_equal_layout_enumeration_exactly() {
        let model = model();
        let tasks = tasks();
        for cfg in all_configs() {
            let layout = PeftInstance::layout(&cfg, &model, &tasks).unwrap();
            let enumerated: u64 = layout.iter().map(|s| s.numel()).sum();
            let formula = peft_param_count(&cfg, &model, tasks.len());
            assert_eq!(enumerated, formula, "{cfg:?}");
        }
    }

    #[test]
    fn build_matches_layout_keys_and_shapes() {
        let model = model();
        let tasks = tasks();
        for cfg in all_configs() {
            let mut reg = ParamRegistry::new();
            PeftInstance::build(&cfg, &model, &tasks, 7, DType::F64, &mut reg).unwrap();
            let layout = PeftInstance::layout(&cfg, &model, &tasks).unwrap();
            assert_eq!(reg.len(), layout.len(), "{cfg:?}");
            for spec in layout {
                let p = reg.get(&spec.key).unwrap();
                assert_eq!(p.value.shape(), &spec.shape[..], "{}", spec.key);
                assert!(p.trainable);
                assert_eq!(p.group, ParamGroup::Peft);
            }
        }
    }

    #[test]
    fn single_mode_keys_never_carry_tasks() {
        let model = model();
        let cfg = PeftConfig::Adapter { d: 4, sharing: SharingMode::Single };
        for spec in PeftInstance::layout(&cfg, &model, &tasks()).unwrap() {
            assert!(!spec.key.contains("task="), "{}", spec.key);
        }
    }

    #[test]
    fn multiple_mode_has_n_tasks_times_single_params() {
        let model = model();
        let tasks = tasks();
        let single = PeftInstance::layout(
            &PeftConfig::Adapter { d: 4, sharing: SharingMode::Single },
            &model,
            &tasks,
        )
        .unwrap();
        let multiple = PeftInstance::layout(
            &PeftConfig::Adapter { d: 4, sharing: SharingMode::Multiple },
            &model,
            &tasks,
        )
        .unwrap();
        let total = |specs: &[ParamSpec]| specs.iter().map(|s| s.numel()).sum::<u64>();
        assert_eq!(total(&multiple), 4 * total(&single));
    }

    #[test]
    fn shared_a_mutation_is_visible_from_every_module() {
        // With share_A the same key backs every module's factors.
        let model = model();
        let cfg = PeftConfig::Compacter {
            d: 8,
            k: 2,
            share_a: true,
            low_rank: false,
            rank: 1,
            sharing: SharingMode::Single,
        };
        let mut reg = ParamRegistry::new();
        let inst = PeftInstance::build(&cfg, &model, &tasks(), 7, DType::F64, &mut reg).unwrap();

        let materialize = |reg: &ParamRegistry, point: &InsertionPoint| {
            let rt = inst.runtime();
            let mut tape = GradTape::<f64>::new();
            let theta = rt
                .compacter_matrix(&mut tape, reg, "count", point, Bottleneck::Down)
                .unwrap();
            tape.value(theta)
        };
        let points = enumerate_insertion_points(&model);
        let before0 = materialize(&reg, &points[0]);
        let before5 = materialize(&reg, &points[5]);
        reg.get_mut("peft/shared/phm_a0").unwrap().value.set(0, 9.0);
        let after0 = materialize(&reg, &points[0]);
        let after5 = materialize(&reg, &points[5]);
        assert!(before0.max_abs_diff(&after0) > 0.0);
        assert!(before5.max_abs_diff(&after5) > 0.0);
    }

    #[test]
    fn hyperformer_generation_is_deterministic_and_task_sensitive() {
        let model = model();
        let cfg = PeftConfig::Hyperformer { d: 4, d_e: 3, d_p: 5 };
        let mut reg = ParamRegistry::new();
        let inst = PeftInstance::build(&cfg, &model, &tasks(), 7, DType::F64, &mut reg).unwrap();
        // Give the heads nonzero weights so generation is informative.
        for key in ["peft/hyper/head/enc_self_attn/w", "peft/hyper/head/enc_self_attn/b"] {
            let p = reg.get_mut(key).unwrap();
            let mut rng = Rng::new(3);
            p.value = Tensor::gaussian(p.value.shape().to_vec(), 0.1, &mut rng, DType::F64);
        }
        let gen = |task_idx: usize| {
            let mut tape = GradTape::<f64>::new();
            let g = inst.hyperformer_generate(&mut tape, &reg, task_idx, 0).unwrap();
            tape.value(g.down)
        };
        assert!(gen(0).bitwise_eq(&gen(0)));
        assert!(gen(0).max_abs_diff(&gen(1)) > 0.0);
    }

    #[test]
    fn hyperformer_identical_task_embeddings_generate_identically() {
        let model = model();
        let cfg = PeftConfig::Hyperformer { d: 4, d_e: 3, d_p: 5 };
        let mut reg = ParamRegistry::new();
        let inst = PeftInstance::build(&cfg, &model, &tasks(), 7, DType::F64, &mut reg).unwrap();
        for key in ["peft/hyper/head/enc_self_attn/w", "peft/hyper/head/enc_self_attn/b"] {
            let p = reg.get_mut(key).unwrap();
            let mut rng = Rng::new(3);
            p.value = Tensor::gaussian(p.value.shape().to_vec(), 0.1, &mut rng, DType::F64);
        }
        let t0 = reg.get("peft/hyper/task_embed/task=count").unwrap().value.clone();
        reg.get_mut("peft/hyper/task_embed/task=exist").unwrap().value = t0;
        let gen = |task_idx: usize| {
            let mut tape = GradTape::<f64>::new();
            let g = inst.hyperformer_generate(&mut tape, &reg, task_idx, 0).unwrap();
            tape.value(g.down)
        };
        assert!(gen(0).bitwise_eq(&gen(1)));
    }

    #[test]
    fn hyperformer_rejects_out_of_range_indices() {
        let model = model();
        let cfg = PeftConfig::Hyperformer { d: 4, d_e: 3, d_p: 5 };
        let mut reg = ParamRegistry::new();
        let inst = PeftInstance::build(&cfg, &model, &tasks(), 7, DType::F64, &mut reg).unwrap();
        let mut tape = GradTape::<f64>::new();
        assert!(matches!(
            inst.hyperformer_generate(&mut tape, &reg, 9, 0),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            inst.hyperformer_generate(&mut tape, &reg, 0, 99),
            Err(Error::Index(_))
        ));
    }
}
