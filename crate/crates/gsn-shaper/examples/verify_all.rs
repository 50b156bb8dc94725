//! Run every verification suite and print one line per check.

use gsn_shaper::suites::{run_suite, SUITE_NAMES};

fn main() -> gsn_shaper::Result<()> {
    let mut all_ok = true;
    for name in SUITE_NAMES {
        let report = run_suite(name, 0)?;
        println!("{name}:");
        for row in &report.rows {
            let status = if row.pass { "PASS" } else { "FAIL" };
            if row.value.is_nan() {
                println!("  [{status}] {} / {}: {}", row.case, row.metric, row.detail);
            } else {
                println!(
                    "  [{status}] {} / {} = {:.3e} (limit {:.1e})",
                    row.case, row.metric, row.value, row.threshold
                );
            }
            all_ok &= row.pass;
        }
    }
    println!("\noverall: {}", if all_ok { "all checks passed" } else { "FAILURES" });
    std::process::exit(if all_ok { 0 } else { 1 });
}
