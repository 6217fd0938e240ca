//! Training-time augmentation on raw embeddings: Gaussian noise, inverted
//! feature dropout, modality masking and mixup.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTriplet;
use crate::error::{Error, Result};
use crate::losses::smoothed_target;
use crate::model::BatchInput;
use crate::modality::{ModalityId, ModalityMask};
use crate::numcore::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskGranularity {
    /// One masking decision per batch, shared by all its samples.
    #[default]
    Batch,
    /// Independent decision per sample.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Noise std as a fraction of each modality's feature scale.
    pub noise_std: f64,
    pub dropout_rate: f64,
    pub mask_prob: f64,
    pub mask_granularity: MaskGranularity,
    pub mixup_alpha: f64,
    /// Probability that a batch is mixed; 0 disables mixup.
    pub mixup_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std: 0.05,
            dropout_rate: 0.2,
            mask_prob: 0.2,
            mask_granularity: MaskGranularity::Batch,
            mixup_alpha: 0.2,
            mixup_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Everything switched off.
    pub fn none() -> Self {
        AugmentConfig {
            noise_std: 0.0,
            dropout_rate: 0.0,
            mask_prob: 0.0,
            mask_granularity: MaskGranularity::Batch,
            mixup_alpha: 0.2,
            mixup_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        for (k, v) in [("mask_prob", self.mask_prob), ("mixup_prob", self.mixup_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} {v} outside [0, 1]")));
            }
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!("mixup_alpha {} must be > 0", self.mixup_alpha)));
        }
        Ok(())
    }

    /// Scales every augmentation probability and magnitude by `intensity` in [0, 1].
    pub fn scaled(&self, intensity: f64) -> Self {
        let s = intensity.clamp(0.0, 1.0);
        AugmentConfig {
            noise_std: self.noise_std * s,
            dropout_rate: self.dropout_rate * s,
            mask_prob: self.mask_prob * s,
            mixup_prob: self.mixup_prob * s,
            ..self.clone()
        }
    }
}

/// `x + eps`, `eps ~ N(0, std^2)` per element.
pub fn gaussian_noise(x: &[f64], std: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    add_noise(&mut out, std, rng)?;
    Ok(out)
}

fn add_noise(x: &mut [f64], std: f64, rng: &mut impl Rng) -> Result<()> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Invalid(format!("noise std {std} must be finite and >= 0")));
    }
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    for v in x {
        *v += normal.sample(rng);
    }
    Ok(())
}

/// Zeroes each element with probability `rate`, scaling survivors by `1 / (1 - rate)`.
pub fn feature_dropout(x: &[f64], rate: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    apply_dropout(&mut out, rate, rng)?;
    Ok(out)
}

fn apply_dropout(x: &mut [f64], rate: f64, rng: &mut impl Rng) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(());
    }
    let keep = 1.0 / (1.0 - rate);
    for v in x {
        if rng.random::<f64>() < rate {
            *v = 0.0;
        } else {
            *v *= keep;
        }
    }
    Ok(())
}

/// Inverted-dropout mask of 0 and `1/(1-rate)` entries.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Result<Matrix> {
    let mut m = Matrix::filled(rows, cols, 1.0);
    apply_dropout(m.as_mut_slice(), rate, rng)?;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskKind {
    /// The whole embedding is zeroed and the modality marked absent.
    Complete,
    /// This fraction of dimensions is zeroed; the modality stays present.
    Partial(f64),
}

/// Which modalities to degrade and how.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPlan {
    pub masked: ModalityMask,
    pub kind: MaskKind,
}

/// With probability `prob`, picks a nonempty proper subset of `available`
/// and a complete/partial choice (50/50). Needs at least two available
/// modalities so one stays intact.
pub fn draw_mask_plan(available: ModalityMask, prob: f64, rng: &mut impl Rng) -> Option<MaskPlan> {
    if prob <= 0.0 || rng.random::<f64>() >= prob {
        return None;
    }
    let present: Vec<ModalityId> = available.present().collect();
    if present.len() < 2 {
        return None;
    }
    // Nonzero bit patterns over `present` except all-ones.
    let n_subsets = (1u32 << present.len()) - 2;
    let bits = rng.random_range(1..=n_subsets);
    let mut masked = ModalityMask::NONE;
    for (i, &m) in present.iter().enumerate() {
        if bits & (1 << i) != 0 {
            masked.set(m, true);
        }
    }
    let kind = if rng.random::<bool>() {
        MaskKind::Complete
    } else {
        MaskKind::Partial(rng.random_range(0.2..0.8))
    };
    Some(MaskPlan { masked, kind })
}

/// Applies a plan to one sample in place.
pub fn apply_mask_plan(sample: &mut EmbeddingTriplet, plan: &MaskPlan, rng: &mut impl Rng) {
    for m in plan.masked.present() {
        if !sample.mask.has(m) {
            continue;
        }
        let v = sample.embedding_mut(m);
        match plan.kind {
            MaskKind::Complete => {
                v.iter_mut().for_each(|x| *x = 0.0);
                sample.mask.set(m, false);
            }
            MaskKind::Partial(frac) => {
                let k = ((frac * v.len() as f64).round() as usize).min(v.len());
                let mut dims: Vec<usize> = (0..v.len()).collect();
                dims.shuffle(rng);
                for &d in &dims[..k] {
                    v[d] = 0.0;
                }
            }
        }
    }
}

/// Per-sample modality masking; returns the sample and its resulting mask.
pub fn modality_mask(sample: &EmbeddingTriplet, prob: f64, rng: &mut impl Rng) -> (EmbeddingTriplet, ModalityMask) {
    let mut out = sample.clone();
    if let Some(plan) = draw_mask_plan(sample.mask, prob, rng) {
        apply_mask_plan(&mut out, &plan, rng);
    }
    let mask = out.mask;
    (out, mask)
}

/// A mixed sample with both labels and the weight of the first.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub sample: EmbeddingTriplet,
    pub label_a: usize,
    pub label_b: usize,
    pub lambda: f64,
}

/// `lambda a + (1 - lambda) b` per modality.
pub fn mix_with(a: &EmbeddingTriplet, b: &EmbeddingTriplet, lambda: f64) -> Mixed {
    let mut sample = a.clone();
    for m in ModalityId::ALL {
        let (va, vb) = (a.embedding(m), b.embedding(m));
        for (o, (x, y)) in sample.embedding_mut(m).iter_mut().zip(va.iter().zip(vb)) {
            *o = lambda * x + (1.0 - lambda) * y;
        }
    }
    sample.mask = a.mask.intersect(&b.mask);
    Mixed {
        sample,
        label_a: a.identity,
        label_b: b.identity,
        lambda,
    }
}

pub fn draw_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|_| Error::Invalid(format!("mixup alpha {alpha} must be > 0")))?;
    Ok(beta.sample(rng))
}

/// Mixup with `lambda ~ Beta(alpha, alpha)`.
pub fn mixup(a: &EmbeddingTriplet, b: &EmbeddingTriplet, alpha: f64, rng: &mut impl Rng) -> Result<Mixed> {
    Ok(mix_with(a, b, draw_lambda(alpha, rng)?))
}

/// Model input plus soft targets for one training batch.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub input: BatchInput,
    pub targets: Matrix,
}

/// Builds a training batch: mixup, then per-modality noise and dropout,
/// then modality masking. `feature_scale` holds each modality's feature
/// std; noise std is `cfg.noise_std * feature_scale[m]`. Targets are the
/// smoothed one-hot labels, mixed with the same weight as the inputs, which
/// makes the (linear in target) loss equal `lambda L(y_a) + (1-lambda) L(y_b)`.
pub fn augment_batch(
    samples: &[&EmbeddingTriplet],
    cfg: &AugmentConfig,
    feature_scale: [f64; 3],
    num_classes: usize,
    smoothing: f64,
    rng: &mut impl Rng,
) -> Result<AugmentedBatch> {
    let b = samples.len();
    let mut targets = Matrix::zeros(b, num_classes);
    let mut batch: Vec<EmbeddingTriplet> = samples.iter().map(|s| (*s).clone()).collect();
    for (r, s) in samples.iter().enumerate() {
        targets
            .row_mut(r)
            .copy_from_slice(&smoothed_target(s.identity, num_classes, smoothing)?);
    }

    if cfg.mixup_prob > 0.0 && b > 1 && rng.random::<f64>() < cfg.mixup_prob {
        let lambda = draw_lambda(cfg.mixup_alpha, rng)?;
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(rng);
        let mut mixed_targets = Matrix::zeros(b, num_classes);
        for r in 0..b {
            let p = perm[r];
            batch[r] = mix_with(samples[r], samples[p], lambda).sample;
            for (o, (x, y)) in mixed_targets
                .row_mut(r)
                .iter_mut()
                .zip(targets.row(r).iter().zip(targets.row(p)))
            {
                *o = lambda * x + (1.0 - lambda) * y;
            }
        }
        targets = mixed_targets;
    }

    for s in &mut batch {
        for m in ModalityId::ALL {
            if !s.mask.has(m) {
                continue;
            }
            let v = s.embedding_mut(m);
            add_noise(v, cfg.noise_std * feature_scale[m.index()], rng)?;
            apply_dropout(v, cfg.dropout_rate, rng)?;
        }
    }

    match cfg.mask_granularity {
        MaskGranularity::Batch => {
            let available = batch.iter().fold(ModalityMask::ALL, |acc, s| acc.intersect(&s.mask));
            if let Some(plan) = draw_mask_plan(available, cfg.mask_prob, rng) {
                for s in &mut batch {
                    apply_mask_plan(s, &plan, rng);
                }
            }
        }
        MaskGranularity::Sample => {
            for s in &mut batch {
                if let Some(plan) = draw_mask_plan(s.mask, cfg.mask_prob, rng) {
                    apply_mask_plan(s, &plan, rng);
                }
            }
        }
    }

    let refs: Vec<&EmbeddingTriplet> = batch.iter().collect();
    let input = crate::decision::masked_batch(&refs, ModalityMask::ALL)?;
    Ok(AugmentedBatch { input, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sample(identity: usize, fill: f64) -> EmbeddingTriplet {
        EmbeddingTriplet {
            face: vec![fill; 512],
            gesture: vec![fill; 768],
            voice: vec![fill; 256],
            identity,
            session: 0,
            mask: ModalityMask::ALL,
        }
    }

    #[test]
    fn zero_std_noise_is_identity() {
        let x = [1.0, -2.0, 3.5];
        assert_eq!(gaussian_noise(&x, 0.0, &mut rng(0)).unwrap(), x);
        assert!(gaussian_noise(&x, -1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let std = 0.7;
        let out = gaussian_noise(&vec![0.0; 1_000_000], std, &mut rng(1)).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!(mean.abs() < 4.0 * std / 1000.0, "mean {mean}");
    }

    #[test]
    fn noise_is_reproducible() {
        let x = vec![0.5; 64];
        assert_eq!(
            gaussian_noise(&x, 1.0, &mut rng(7)).unwrap(),
            gaussian_noise(&x, 1.0, &mut rng(7)).unwrap()
        );
    }

    #[test]
    fn dropout_rate_edges() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(feature_dropout(&x, 0.0, &mut rng(0)).unwrap(), x);
        assert!(feature_dropout(&x, 1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn dropout_zero_fraction_and_scaling() {
        let out = feature_dropout(&vec![1.0; 1_000_000], 0.2, &mut rng(2)).unwrap();
        let zeros = out.iter().filter(|v| **v == 0.0).count() as f64 / out.len() as f64;
        assert!((zeros - 0.2).abs() < 0.002, "zero fraction {zeros}");
        assert!(out.iter().all(|v| *v == 0.0 || *v == 1.25));
    }

    #[test]
    fn zero_probability_never_masks() {
        let s = sample(0, 1.0);
        let mut r = rng(3);
        for _ in 0..1000 {
            let (out, mask) = modality_mask(&s, 0.0, &mut r);
            assert_eq!(mask, ModalityMask::ALL);
            assert_eq!(out, s);
        }
    }

    #[test]
    fn forced_complete_gesture_mask() {
        let mut s = sample(0, 1.5);
        let plan = MaskPlan {
            masked: ModalityMask::only(ModalityId::Gesture),
            kind: MaskKind::Complete,
        };
        apply_mask_plan(&mut s, &plan, &mut rng(0));
        assert!(s.gesture.iter().all(|v| *v == 0.0));
        assert!(s.face.iter().chain(&s.voice).all(|v| *v == 1.5));
        assert!(!s.mask.gesture && s.mask.face && s.mask.voice);
    }

    #[test]
    fn masking_frequency_and_intact_modality() {
        let mut r = rng(4);
        let n = 10_000;
        let mut hits = 0;
        let mut complete = 0;
        for _ in 0..n {
            if let Some(plan) = draw_mask_plan(ModalityMask::ALL, 0.2, &mut r) {
                hits += 1;
                assert!(!plan.masked.is_empty() && plan.masked.count() < 3);
                if plan.kind == MaskKind::Complete {
                    complete += 1;
                }
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.2).abs() < 0.01, "frequency {freq}");
        let share = complete as f64 / hits as f64;
        assert!((share - 0.5).abs() < 0.05, "complete share {share}");
    }

    #[test]
    fn masking_never_removes_everything() {
        let mut r = rng(5);
        for i in 0..2000 {
            let mut s = sample(0, 1.0);
            if i % 3 == 0 {
                s.mask.voice = false;
            }
            let (out, mask) = modality_mask(&s, 1.0, &mut r);
            assert!(!mask.is_empty());
            let intact = ModalityId::ALL
                .iter()
                .any(|&m| mask.has(m) && out.embedding(m).iter().all(|v| *v == 1.0));
            assert!(intact);
        }
    }

    #[test]
    fn mixup_edges() {
        let a = sample(1, 2.0);
        let b = sample(2, -2.0);
        let m = mix_with(&a, &b, 1.0);
        assert_eq!(m.sample, a);
        let m = mix_with(&a, &b, 0.5);
        assert!(m.sample.face.iter().chain(&m.sample.voice).all(|v| *v == 0.0));
        assert_eq!((m.label_a, m.label_b), (1, 2));
        assert!(mixup(&a, &b, 0.0, &mut rng(0)).is_err());
    }

    #[test]
    fn beta_one_one_is_uniform() {
        // Kolmogorov-Smirnov against U(0,1); 1.628 / sqrt(n) is the 0.01 critical value.
        let mut r = rng(6);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| draw_lambda(1.0, &mut r).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = x - i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64 - x;
                lo.max(hi)
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn mixed_targets_keep_unit_mass() {
        let a = sample(0, 1.0);
        let b = sample(3, -1.0);
        let refs = [&a, &b, &a, &b];
        let cfg = AugmentConfig {
            mixup_prob: 1.0,
            ..AugmentConfig::default()
        };
        let out = augment_batch(&refs, &cfg, [1.0; 3], 5, 0.1, &mut rng(8)).unwrap();
        for r in 0..4 {
            let t = out.targets.row(r);
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t[1] > 0.0 && t[1] < 0.03);
        }
    }

    #[test]
    fn no_augmentation_leaves_batch_unchanged() {
        let a = sample(0, 0.25);
        let b = sample(1, -0.75);
        let out = augment_batch(&[&a, &b], &AugmentConfig::none(), [1.0; 3], 2, 0.0, &mut rng(9)).unwrap();
        let want = crate::decision::masked_batch(&[&a, &b], ModalityMask::ALL).unwrap();
        for m in ModalityId::ALL {
            assert_eq!(out.input.get(m), want.get(m));
        }
        assert_eq!(out.targets.row(0), &[1.0, 0.0]);
    }
}
