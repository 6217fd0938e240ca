//! Generate the default synthetic benchmark, train the full model, and print
//! the seven-condition evaluation matrix.
//!
//! cargo run --release --example quickstart [epochs]

use std::time::Instant;

use trifuse::eval::eval_matrix;
use trifuse::trainer::fit;
use trifuse::{Config, SplitData};

fn main() -> trifuse::Result<()> {
    let mut cfg = Config::default();
    if let Some(e) = std::env::args().nth(1) {
        cfg.train.epochs = e.parse().expect("epochs must be an integer");
    }
    let data = SplitData::synthetic(&cfg.synthetic())?;
    println!(
        "{} identities, {} train / {} val / {} test samples",
        data.num_classes,
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let start = Instant::now();
    let mut log = std::io::stdout();
    let (model, report) = fit(&data, &cfg, Some(&mut log))?;
    println!(
        "trained {} steps in {:.1?}, best epoch {}",
        report.steps,
        start.elapsed(),
        report.best_epoch
    );

    let eval = eval_matrix(&model, &data.test, &data.multi_session, cfg.ablation, &cfg.hash())?;
    println!("{eval}");
    Ok(())
}
