//! Parameter accounting on the BART-base-like reference descriptor: the
//! twelve multi-task regimes plus the calibration anchors.
//!
//!     cargo run --release --example audit_table1

fn main() -> peft_forge::Result<()> {
    println!("{:<28} {:<18} {:>13} {:>13} {:>8}", "regime", "config", "trainable", "denominator", "percent");
    for row in peft_forge::sharing::table1_rows()? {
        println!(
            "{:<28} {:<18} {:>13} {:>13} {:>8.2}",
            row.regime, row.config, row.trainable_count, row.denominator, row.percent
        );
    }
    println!();
    for row in peft_forge::sharing::anchor_rows()? {
        println!(
            "{:<28} {:<18} {:>13} {:>13} {:>8.3}",
            row.regime, row.config, row.trainable_count, row.denominator, row.percent
        );
    }
    Ok(())
}
