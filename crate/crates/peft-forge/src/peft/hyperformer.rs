//! Hypernetwork budget accounting.
//!
//! The generator only saves memory while its own parameters stay below the
//! cost of independent per-task adapters:
//! |theta_H| + |theta_T| + N_T |t| + N_L |l|  <  N_T N_L (|theta_U| + |theta_D|).
//! The dominant terms imply an upper bound on the projector width d_p.

use super::counts;
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::peft::PeftConfig;

#[derive(Debug, Clone)]
pub struct BudgetReport {
    /// Left-hand side: hypernet heads + projector + task and point embeddings.
    pub generator_params: u64,
    /// Right-hand side: what independent per-task adapters would cost.
    pub adapter_reference_params: u64,
    pub holds: bool,
    /// The paper's dominant-term bound on d_p: N_T * N_L.
    pub paper_bound_d_p: u64,
    /// Largest d_p for which the full inequality holds with these dims,
    /// found by exact integer evaluation.
    pub max_feasible_d_p: u64,
}

/// Evaluate both sides of the budget inequality exactly (integer arithmetic)
/// for a hyperformer config.
pub fn check_hyperformer_budget(
    cfg: &PeftConfig,
    model_cfg: &ModelConfig,
    n_tasks: usize,
    adapter_reference_count: u64,
) -> Result<BudgetReport> {
    let PeftConfig::Hyperformer { d, d_e, d_p } = cfg else {
        return Err(Error::Config(format!(
            "budget check applies to hyperformer configs, got {}",
            cfg.kind_name()
        )));
    };
    let n_points = model_cfg.n_insertion_points();
    let lhs_at = |dp: usize| -> u64 {
        counts::hyperformer_count(model_cfg.d_model, *d, *d_e, dp, n_points, n_tasks)
    };
    let generator_params = lhs_at(*d_p);
    let holds = generator_params < adapter_reference_count;
    let paper_bound_d_p = (n_tasks * n_points) as u64;

    let mut max_feasible_d_p = 0u64;
    let mut dp = 1usize;
    // lhs is strictly increasing in d_p, so scan until it crosses.
    while lhs_at(dp) < adapter_reference_count {
        max_feasible_d_p = dp as u64;
        dp += 1;
        if dp > 4 * n_tasks * n_points + 16 {
            break;
        }
    }

    Ok(BudgetReport {
        generator_params,
        adapter_reference_params: adapter_reference_count,
        holds,
        paper_bound_d_p,
        max_feasible_d_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::SharingMode;

    fn bart_like() -> ModelConfig {
        ModelConfig {
            d_model: 768,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 50_265,
            max_positions: 1024,
            d_visual: 2048,
            n_visual_tokens: 36,
            bos_token: 1,
            eos_token: 2,
        }
    }

    fn reference_count(model: &ModelConfig, d: usize, n_tasks: usize) -> u64 {
        counts::peft_param_count(
            &PeftConfig::Adapter { d, sharing: SharingMode::Multiple },
            model,
            n_tasks,
        )
    }

    #[test]
    fn paper_configuration_fits_the_budget() {
        let model = bart_like();
        let cfg = PeftConfig::Hyperformer { d: 96, d_e: 8, d_p: 8 };
        let rf = reference_count(&model, 96, 4);
        let report = check_hyperformer_budget(&cfg, &model, 4, rf).unwrap();
        assert!(report.holds);
        assert_eq!(report.paper_bound_d_p, 120);
        assert!(report.generator_params < report.adapter_reference_params);
    }

    #[test]
    fn d_p_equal_to_nt_nl_breaks_the_budget() {
        let model = bart_like();
        let cfg = PeftConfig::Hyperformer { d: 96, d_e: 8, d_p: 4 * 30 };
        let rf = reference_count(&model, 96, 4);
        let report = check_hyperformer_budget(&cfg, &model, 4, rf).unwrap();
        assert!(!report.holds);
    }

    #[test]
    fn d_p_one_always_fits_for_small_embeddings() {
        let model = bart_like();
        let cfg = PeftConfig::Hyperformer { d: 96, d_e: 8, d_p: 1 };
        let rf = reference_count(&model, 96, 4);
        let report = check_hyperformer_budget(&cfg, &model, 4, rf).unwrap();
        assert!(report.holds);
        assert!(report.max_feasible_d_p >= 1);
    }
}
