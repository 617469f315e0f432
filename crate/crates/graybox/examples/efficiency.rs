//! Shared-backbone efficiency accounting: one vault plus per-domain input
//! adapter pairs versus a full backbone copy per domain, in exact FLOP
//! counts (cross-checked against closed-form formulas) and resident
//! parameter bytes.
//!
//! ```bash
//! cargo run --release --example efficiency
//! ```

use graybox::harness::efficiency_bench;

fn main() -> anyhow::Result<()> {
    for domains in [1, 2, 10] {
        let report = efficiency_bench(domains, 100)?;
        print!("{}", report.render());
        println!();
    }
    Ok(())
}
