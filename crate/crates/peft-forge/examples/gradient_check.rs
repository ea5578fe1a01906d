//! Finite-difference gradient checks for every tape op, plus the per-regime
//! gradient-reach checks.
//!
//!     cargo run --release --example gradient_check

fn main() -> peft_forge::Result<()> {
    let (report, passed) = peft_forge::cli::cmd_gradcheck(None)?;
    print!("{report}");
    println!("{}", if passed { "all checks passed" } else { "FAILURES above" });
    Ok(())
}
