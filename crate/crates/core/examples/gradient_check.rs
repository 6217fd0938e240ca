//! Central-difference check of every sub-network's gradients on random tiny
//! models.
//!
//! cargo run --release --example gradient_check [seeds]

use trifuse::gradients::{check_seeds, GradModule, ModelCheckOptions};

fn main() -> trifuse::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(5, |s| s.parse().expect("seed count"));
    let results = check_seeds(&GradModule::ALL, 0..seeds, &ModelCheckOptions::default())?;
    for r in &results {
        println!(
            "{:<10} seed {:>2}  max rel error {:.2e}  worst {:<28} {}",
            r.module.key(),
            r.seed,
            r.max_rel_error,
            r.worst_param,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
