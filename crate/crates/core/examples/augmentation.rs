//! The training-time augmentations on a single sample and on a batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trifuse::augment::{augment_batch, feature_dropout, gaussian_noise, mixup, modality_mask, AugmentConfig};
use trifuse::data::SyntheticConfig;
use trifuse::{ModalityId, SplitData};

fn main() -> trifuse::Result<()> {
    let data = SplitData::synthetic(&SyntheticConfig {
        num_identities: 4,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = &data.train[0];
    let b = &data.train[data.train.len() - 1];

    let noisy = gaussian_noise(&a.voice[..4], 0.1, &mut rng)?;
    println!("voice[..4]   {:?}\n+ noise      {:?}", &a.voice[..4], noisy);
    println!("dropout 0.5  {:?}", feature_dropout(&a.voice[..8], 0.5, &mut rng)?);

    for _ in 0..5 {
        let (s, mask) = modality_mask(a, 1.0, &mut rng);
        let zeros: Vec<usize> = ModalityId::ALL
            .iter()
            .map(|&m| s.embedding(m).iter().filter(|v| **v == 0.0).count())
            .collect();
        println!("masked -> available {mask:<14} zeroed dims per modality {zeros:?}");
    }

    let mixed = mixup(a, b, 0.2, &mut rng)?;
    println!(
        "mixup lambda {:.3}: labels {} / {}",
        mixed.lambda, mixed.label_a, mixed.label_b
    );

    let refs: Vec<_> = data.train.iter().step_by(20).collect();
    let cfg = AugmentConfig {
        mixup_prob: 1.0,
        ..AugmentConfig::default()
    };
    let batch = augment_batch(&refs, &cfg, [1.0; 3], data.num_classes, 0.1, &mut rng)?;
    println!("batch targets (first row) {:?}", batch.targets.row(0));
    Ok(())
}
