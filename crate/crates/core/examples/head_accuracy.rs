//! Per-head Top-1 under every availability condition, with the mean
//! confidence each pathway reports. Shows how the ensemble leans on the
//! confidence-weighted branch when modalities go missing.
//!
//! cargo run --release --example head_accuracy [epochs] [ablation,...]

use trifuse::decision::{masked_batch, rank};
use trifuse::trainer::fit;
use trifuse::{AblationFlags, Config, FusionState, ModalityMask, SplitData};

fn main() -> trifuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = Config::default();
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().expect("epochs must be an integer");
    }
    if let Some(a) = args.next() {
        cfg.ablation = a.parse::<AblationFlags>()?;
    }
    let data = SplitData::synthetic(&cfg.synthetic())?;
    let (model, _) = fit(&data, &cfg, None)?;

    let heads: [(&str, fn(&FusionState) -> &[f64]); 7] = [
        ("face", |s| &s.modality_logits[0]),
        ("gesture", |s| &s.modality_logits[1]),
        ("voice", |s| &s.modality_logits[2]),
        ("fusion", |s| &s.p_fusion),
        ("conf", |s| &s.p_conf),
        ("ensemble", |s| &s.p_ensemble),
        ("final", |s| &s.p_final),
    ];
    print!("{:<14}", "mask");
    for (h, _) in &heads {
        print!(" {h:>8}");
    }
    println!("   mean c (face gesture voice)");
    for mask in ModalityMask::CONDITIONS {
        let refs: Vec<_> = data.test.iter().collect();
        let states = model.infer(&masked_batch(&refs, mask)?, cfg.ablation)?;
        print!("{:<14}", mask.label());
        for (_, get) in &heads {
            let hits = states
                .iter()
                .zip(&data.test)
                .filter(|(s, x)| rank(get(s))[0] == x.identity)
                .count();
            print!(" {:>8.2}", 100.0 * hits as f64 / states.len() as f64);
        }
        let n = states.len() as f64;
        let c: Vec<String> = (0..3)
            .map(|i| format!("{:.3}", states.iter().map(|s| s.confidence[i]).sum::<f64>() / n))
            .collect();
        println!("   {}", c.join(" "));
    }
    Ok(())
}
