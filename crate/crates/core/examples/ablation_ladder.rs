//! Train the ablation ladder on the synthetic benchmark and print per-mask
//! Top-1 with deltas against the full model.
//!
//! cargo run --release --example ablation_ladder [cumulative|single] [epochs]

use trifuse::eval::{ablation_ladder, eval_matrix, LadderMode, LadderTable};
use trifuse::trainer::fit;
use trifuse::{Config, SplitData};

fn main() -> trifuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode: LadderMode = args.next().as_deref().unwrap_or("cumulative").parse()?;
    let mut cfg = Config::default();
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().expect("epochs must be an integer");
    }
    let data = SplitData::synthetic(&cfg.synthetic())?;

    let table = ablation_ladder(mode, |ablation| {
        let run = Config { ablation, ..cfg.clone() };
        let (model, _) = fit(&data, &run, None)?;
        let report = eval_matrix(&model, &data.test, &data.multi_session, ablation, &run.hash())?;
        eprintln!(
            "{:<40} trimodal {:6.2}  unimodal mean {:6.2}",
            ablation.to_string(),
            report.top1(&trifuse::ModalityMask::ALL).unwrap_or(0.0),
            LadderTable::unimodal_mean(&report)
        );
        Ok(report)
    })?;
    println!("{}", table.table());
    Ok(())
}
