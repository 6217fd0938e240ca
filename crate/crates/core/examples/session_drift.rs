//! How session drift separates same-session from cross-session accuracy:
//! a nearest-centroid classifier per modality on the default synthetic data.

use trifuse::data::SyntheticConfig;
use trifuse::{ModalityId, SplitData};

fn main() -> trifuse::Result<()> {
    let cfg = SyntheticConfig::default();
    let data = SplitData::synthetic(&cfg)?;
    println!("modality  drift  same-session  cross-session");
    for m in ModalityId::ALL {
        let mut centroids = vec![vec![0.0; m.input_dim()]; data.num_classes];
        let mut counts = vec![0.0; data.num_classes];
        for s in &data.train {
            counts[s.identity] += 1.0;
            for (c, x) in centroids[s.identity].iter_mut().zip(s.embedding(m)) {
                *c += x;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let mut tally = [[0.0; 2]; 2];
        for s in &data.test {
            let x = s.embedding(m);
            let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..data.num_classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            let slot = usize::from(data.multi_session[s.identity]);
            tally[slot][0] += f64::from(u8::from(best == s.identity));
            tally[slot][1] += 1.0;
        }
        println!(
            "{:<8} {:>6.2} {:>13.2} {:>14.2}",
            m.key(),
            cfg.drift_std.get(m),
            100.0 * tally[0][0] / tally[0][1],
            100.0 * tally[1][0] / tally[1][1]
        );
    }
    Ok(())
}
