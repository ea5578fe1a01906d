//! How sharing regimes resolve parameter keys, and what that means for
//! gradients: under Single mode a mixed-task batch accumulates every task's
//! gradient into one shared adapter.
//!
//!     cargo run --release --example sharing_modes

use peft_forge::backbone::{InsertionPoint, Side, Slot};
use peft_forge::sharing::{resolve_key, PeftRole, SharingMode};

fn main() -> peft_forge::Result<()> {
    let point = InsertionPoint::new(Side::Encoder, 0, Slot::AfterSelfAttention)?;
    let modes = [
        SharingMode::Multiple,
        SharingMode::HalfSharedUp,
        SharingMode::HalfSharedDown,
        SharingMode::Single,
    ];
    let roles = [
        ("down", PeftRole::Down { sub: None }),
        ("up", PeftRole::Up { sub: None }),
    ];

    for mode in modes {
        println!("--- {}", mode.name());
        for task in ["count", "pair"] {
            for (label, role) in &roles {
                let key = resolve_key(mode, task, &point, role)?;
                println!("  task={task:<6} role={label:<5} -> {key}");
            }
        }
    }

    println!("\nkey identity is weight sharing: tasks whose (point, role) resolve");
    println!("to the same key train one parameter, and its gradient is the sum");
    println!("of the per-task contributions within a step.");
    Ok(())
}
