//! The decision-stage arithmetic on hand-picked numbers: confidence-weighted
//! fusion, the ensemble average, and the correction residual.

use trifuse::decision::{apply_correction, confidence_weighted_fusion, ensemble};
use trifuse::numcore::softmax;

fn main() -> trifuse::Result<()> {
    let face = [2.0, 0.0, 0.0];
    let gesture = [0.0, 2.0, 0.0];
    let voice = [0.0, 0.0, 2.0];

    for c in [[1.0, 1.0, 1.0], [0.9, 0.3, 0.3], [0.2, 0.9, 0.2]] {
        let p = confidence_weighted_fusion([&face, &gesture, &voice], c)?;
        println!("confidences {c:?} -> p_conf {:?}", round(&p));
    }

    let p_conf = confidence_weighted_fusion([&face, &gesture, &voice], [0.9, 0.3, 0.3])?;
    let p_fusion = [1.0, 0.5, -0.5];
    let p_ens = ensemble(&p_conf, &p_fusion)?;
    let p_final = apply_correction(&p_ens, &[0.0, 1.0, 0.0])?;
    println!("p_ensemble {:?}", round(&p_ens));
    println!("p_final    {:?}", round(&p_final));
    println!("softmax    {:?}", round(&softmax(&p_final)));
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e6).round() / 1e6).collect()
}
