//! Trainable-parameter counts for the fifteen reference configurations.

use reslm::cli::table1_rows;

fn main() -> reslm::Result<()> {
    for (config, expected, counted) in table1_rows(59)? {
        let mark = if expected == counted {
            "ok"
        } else {
            "MISMATCH"
        };
        println!("{:<40} {counted:>7} {mark}", config.describe());
    }
    Ok(())
}
