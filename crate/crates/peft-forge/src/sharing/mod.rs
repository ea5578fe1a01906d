//! Parameter registry and cross-task weight-sharing rules.
//!
//! Sharing regimes are expressed purely as key-resolution rules: two uses of
//! a module share weights exactly when [`resolve_key`] maps them to the same
//! registry key. The registry is the single source of truth for parameter
//! values and trainable flags.

mod audit;
mod registry;

pub use audit::{
    anchor_rows, audit, bart_base_like, build_trainable_set, table1_rows, AuditReport, AuditRow,
    TrainablePolicy,
};
pub use registry::{ParamRegistry, ParamSpec};

use crate::backbone::{InsertionPoint, Slot};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// How PEFT parameters are shared across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One full set of weights per task.
    Multiple,
    /// Upsampling layers shared across tasks, downsampling per task.
    HalfSharedUp,
    /// Downsampling layers shared across tasks, upsampling per task.
    HalfSharedDown,
    /// One set of weights for every task.
    #[default]
    Single,
}

impl SharingMode {
    pub fn name(self) -> &'static str {
        match self {
            SharingMode::Multiple => "multiple",
            SharingMode::HalfSharedUp => "half_shared_up",
            SharingMode::HalfSharedDown => "half_shared_down",
            SharingMode::Single => "single",
        }
    }
}

/// Which bottleneck matrix a compacter factor parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    Down,
    Up,
}

/// Attention projection targeted by a LoRA delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnProj {
    Query,
    Key,
    Value,
    Output,
}

impl AttnProj {
    pub fn all() -> [AttnProj; 4] {
        [AttnProj::Query, AttnProj::Key, AttnProj::Value, AttnProj::Output]
    }

    pub fn short(self) -> &'static str {
        match self {
            AttnProj::Query => "q",
            AttnProj::Key => "k",
            AttnProj::Value => "v",
            AttnProj::Output => "o",
        }
    }
}

/// Part of the prompt network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPart {
    Embedding,
    DownWeight,
    DownBias,
    UpWeight,
    UpBias,
}

impl PromptPart {
    fn render(self) -> &'static str {
        match self {
            PromptPart::Embedding => "embed",
            PromptPart::DownWeight => "down",
            PromptPart::DownBias => "bias_down",
            PromptPart::UpWeight => "up",
            PromptPart::UpBias => "bias_up",
        }
    }
}

/// Role of a PEFT parameter at an insertion point. The payloads carry the
/// detail needed to make keys unique (factor indices, projection names).
#[derive(Debug, Clone, PartialEq)]
pub enum PeftRole {
    /// Downsampling weight; `sub` distinguishes compacter factors (b0, u0, ...).
    Down { sub: Option<String> },
    /// Upsampling weight.
    Up { sub: Option<String> },
    BiasDown,
    BiasUp,
    /// Per-module compacter Kronecker factor A_i for one bottleneck matrix.
    Factor { matrix: Bottleneck, index: usize },
    LoraA { proj: AttnProj },
    LoraB { proj: AttnProj },
    LoraBias { proj: AttnProj },
    /// Prompt-network parameter (point-independent).
    Prompt { part: PromptPart },
}

impl PeftRole {
    /// Whether this role belongs to the downsampling half of a bottleneck.
    fn is_down_side(&self) -> Option<bool> {
        match self {
            PeftRole::Down { .. } | PeftRole::BiasDown => Some(true),
            PeftRole::Up { .. } | PeftRole::BiasUp => Some(false),
            PeftRole::Factor { matrix, .. } => Some(*matrix == Bottleneck::Down),
            _ => None,
        }
    }

    fn render(&self) -> String {
        match self {
            PeftRole::Down { sub: None } => "down".into(),
            PeftRole::Down { sub: Some(s) } => format!("down_{s}"),
            PeftRole::Up { sub: None } => "up".into(),
            PeftRole::Up { sub: Some(s) } => format!("up_{s}"),
            PeftRole::BiasDown => "bias_down".into(),
            PeftRole::BiasUp => "bias_up".into(),
            PeftRole::Factor { matrix: Bottleneck::Down, index } => format!("down_a{index}"),
            PeftRole::Factor { matrix: Bottleneck::Up, index } => format!("up_a{index}"),
            PeftRole::LoraA { proj } => format!("{}_lora_a", proj.short()),
            PeftRole::LoraB { proj } => format!("{}_lora_b", proj.short()),
            PeftRole::LoraBias { proj } => format!("{}_lora_bias", proj.short()),
            PeftRole::Prompt { part } => part.render().into(),
        }
    }
}

/// Map (mode, task, point, role) to a registry key.
///
/// Key schema: `peft/<side>/<layer>/<slot>/<role>[/task=<name>]`. Prompt
/// roles are point-independent and render as `peft/prompt/<part>[/task=...]`.
/// Under Single mode no peft key carries a task segment.
pub fn resolve_key(
    mode: SharingMode,
    task: &str,
    point: &InsertionPoint,
    role: &PeftRole,
) -> Result<String> {
    let task_qualified = match role {
        PeftRole::LoraA { .. } | PeftRole::LoraB { .. } | PeftRole::LoraBias { .. } => match mode {
            SharingMode::Multiple => true,
            SharingMode::Single => false,
            m => {
                return Err(Error::Config(format!(
                    "LoRA supports sharing modes multiple/single, got {}",
                    m.name()
                )))
            }
        },
        PeftRole::Prompt { .. } => match mode {
            SharingMode::Multiple => true,
            SharingMode::Single => false,
            m => {
                return Err(Error::Config(format!(
                    "prompt tuning supports sharing modes multiple/single, got {}",
                    m.name()
                )))
            }
        },
        _ => {
            let down = role
                .is_down_side()
                .expect("adapter-family roles have a side");
            match mode {
                SharingMode::Multiple => true,
                SharingMode::Single => false,
                SharingMode::HalfSharedUp => down,
                SharingMode::HalfSharedDown => !down,
            }
        }
    };

    if matches!(
        role,
        PeftRole::LoraA { .. } | PeftRole::LoraB { .. } | PeftRole::LoraBias { .. }
    ) && point.slot == Slot::AfterFeedForward
    {
        return Err(Error::Config(
            "LoRA targets attention sublayers, not feed-forward".into(),
        ));
    }

    let base = if matches!(role, PeftRole::Prompt { .. }) {
        format!("peft/prompt/{}", role.render())
    } else {
        format!(
            "peft/{}/{}/{}/{}",
            point.side.name(),
            point.layer,
            point.slot.name(),
            role.render()
        )
    };

    Ok(if task_qualified {
        format!("{base}/task={task}")
    } else {
        base
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Side;

    fn point() -> InsertionPoint {
        InsertionPoint { side: Side::Encoder, layer: 0, slot: Slot::AfterSelfAttention }
    }

    #[test]
    fn single_mode_keys_are_task_free() {
        let role = PeftRole::Down { sub: None };
        let k1 = resolve_key(SharingMode::Single, "t1", &point(), &role).unwrap();
        let k2 = resolve_key(SharingMode::Single, "t2", &point(), &role).unwrap();
        assert_eq!(k1, k2);
        assert!(!k1.contains("task="));
    }

    #[test]
    fn half_shared_up_shares_only_up_keys() {
        let up = resolve_key(
            SharingMode::HalfSharedUp,
            "t1",
            &point(),
            &PeftRole::Up { sub: None },
        )
        .unwrap();
        let down = resolve_key(
            SharingMode::HalfSharedUp,
            "t1",
            &point(),
            &PeftRole::Down { sub: None },
        )
        .unwrap();
        assert!(!up.contains("task="), "{up}");
        assert!(down.contains("task=t1"), "{down}");
        let bias_up = resolve_key(SharingMode::HalfSharedUp, "t1", &point(), &PeftRole::BiasUp)
            .unwrap();
        assert!(!bias_up.contains("task="));
    }

    #[test]
    fn multiple_mode_gives_one_key_per_task() {
        let role = PeftRole::Up { sub: None };
        let keys: std::collections::BTreeSet<String> = ["a", "b", "c", "d"]
            .iter()
            .map(|t| resolve_key(SharingMode::Multiple, t, &point(), &role).unwrap())
            .collect();
        assert_eq!(keys.len(), 4);
    }

    #[test]
    fn lora_rejects_half_shared() {
        let role = PeftRole::LoraA { proj: AttnProj::Query };
        assert!(matches!(
            resolve_key(SharingMode::HalfSharedUp, "t", &point(), &role),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lora_rejects_feed_forward_slot() {
        let ff = InsertionPoint { side: Side::Encoder, layer: 0, slot: Slot::AfterFeedForward };
        let role = PeftRole::LoraA { proj: AttnProj::Query };
        assert!(matches!(
            resolve_key(SharingMode::Single, "t", &ff, &role),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn key_count_ordering_single_half_multiple() {
        // |keys(single)| <= |keys(half_shared)| <= |keys(multiple)| over the
        // four adapter roles and two tasks.
        let roles = [
            PeftRole::Down { sub: None },
            PeftRole::BiasDown,
            PeftRole::Up { sub: None },
            PeftRole::BiasUp,
        ];
        let count = |mode: SharingMode| {
            let mut keys = std::collections::BTreeSet::new();
            for task in ["t1", "t2"] {
                for role in &roles {
                    keys.insert(resolve_key(mode, task, &point(), role).unwrap());
                }
            }
            keys.len()
        };
        let single = count(SharingMode::Single);
        let half = count(SharingMode::HalfSharedUp);
        let multiple = count(SharingMode::Multiple);
        assert!(single <= half && half <= multiple);
        assert_eq!(single, 4);
        assert_eq!(half, 6);
        assert_eq!(multiple, 8);
    }
}
