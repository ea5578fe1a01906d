//! The hypernetwork memory-budget inequality: the generator only pays off
//! while its parameters stay below the cost of independent per-task adapters.
//!
//!     cargo run --release --example hyperformer_budget

use peft_forge::peft::{check_hyperformer_budget, peft_param_count, PeftConfig};
use peft_forge::sharing::{bart_base_like, SharingMode};

fn main() -> peft_forge::Result<()> {
    let model = bart_base_like();
    let n_tasks = 4;
    let reference = peft_param_count(
        &PeftConfig::Adapter { d: 96, sharing: SharingMode::Multiple },
        &model,
        n_tasks,
    );

    for d_p in [1, 8, 24, 120] {
        let cfg = PeftConfig::Hyperformer { d: 96, d_e: 8, d_p };
        let report = check_hyperformer_budget(&cfg, &model, n_tasks, reference)?;
        println!(
            "d_p={d_p:>3}: generator {:>11} vs adapters {:>11} -> {}",
            report.generator_params,
            report.adapter_reference_params,
            if report.holds { "fits" } else { "exceeds" }
        );
        if d_p == 8 {
            println!(
                "        paper bound d_p < N_T*N_L = {}; exact crossover at d_p = {}",
                report.paper_bound_d_p, report.max_feasible_d_p
            );
        }
    }
    Ok(())
}
