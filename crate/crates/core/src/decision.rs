//! Fusion classification and the final decision.
//!
//! ```text
//! z_concat   = [z_x_face | z_x_gest | z_x_voice]
//! g          = sigmoid(W2 relu(W1 z_concat + b1) + b2)
//! z_fused    = z_concat * g
//! p_fusion   = MLP_fused(z_fused)
//! p_conf     = sum_m c_m^2 p_m / sum_m c_m^2
//! p_ensemble = (p_conf + p_fusion) / 2
//! p_corr     = MLP_corr([p_face | p_gest | p_voice | p_ensemble])
//! p_final    = p_ensemble + 0.2 p_corr
//! ```

use crate::crossattn::CrossVars;
use crate::data::EmbeddingTriplet;
use crate::error::{Error, Result};
use crate::modality::{ModalityId, ModalityMask};
use crate::model::{AblationFlags, BatchInput, ForwardOptions, ForwardVars, ModelConfig, TrimodalModel};
use crate::numcore::{Matrix, ParamStore, Tape, Var};
use crate::pathways::{self, PathwayVars};

/// Weight of the correction logits in the final prediction.
pub const CORRECTION_SCALE: f64 = 0.2;

/// All intermediate decision values for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionState {
    pub z_concat: Vec<f64>,
    pub g: Vec<f64>,
    pub z_fused: Vec<f64>,
    pub p_fusion: Vec<f64>,
    pub p_conf: Vec<f64>,
    pub p_ensemble: Vec<f64>,
    pub p_corr: Vec<f64>,
    pub p_final: Vec<f64>,
    /// Per-modality confidences `c`, indexed by [`ModalityId::index`].
    pub confidence: [f64; 3],
    /// Per-modality logits, indexed by [`ModalityId::index`].
    pub modality_logits: [Vec<f64>; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct DecisionVars {
    pub z_concat: Var,
    /// `None` when gated fusion is bypassed (gate fixed to 1).
    pub g: Option<Var>,
    pub z_fused: Var,
    pub p_fusion: Var,
    pub p_conf: Var,
    pub p_ensemble: Var,
    /// `None` when mistake correction is bypassed.
    pub p_corr: Option<Var>,
    pub p_final: Var,
}

pub(crate) fn register_params(params: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<()> {
    let cd = cfg.concat_dim();
    let k = cfg.num_classes;
    pathways::register_dense(params, "fusion.gate1", cfg.gate_hidden, cd, seed)?;
    pathways::register_dense(params, "fusion.gate2", cd, cfg.gate_hidden, seed)?;
    pathways::register_dense(params, "fusion.mlp1", cfg.fusion_hidden, cd, seed)?;
    pathways::register_dense(params, "fusion.mlp2", k, cfg.fusion_hidden, seed)?;
    pathways::register_dense(params, "corr.l1", cfg.corr_hidden, 4 * k, seed)?;
    pathways::register_dense(params, "corr.l2", k, cfg.corr_hidden, seed)?;
    Ok(())
}

fn gated_fusion_vars(
    tape: &mut Tape,
    z_x: [Var; 3],
    bypass_gate: bool,
    dropout: Option<&Matrix>,
) -> Result<(Var, Option<Var>, Var, Var)> {
    let z_concat = tape.concat(&z_x)?;
    let (g, z_fused) = if bypass_gate {
        (None, z_concat)
    } else {
        let h = pathways::dense_named(tape, "fusion.gate1", z_concat)?;
        let h = tape.relu(h);
        let g = pathways::dense_named(tape, "fusion.gate2", h)?;
        let g = tape.sigmoid(g);
        (Some(g), tape.mul(z_concat, g)?)
    };
    let h = pathways::dense_named(tape, "fusion.mlp1", z_fused)?;
    let mut h = tape.relu(h);
    if let Some(mask) = dropout {
        let m = tape.input(mask.clone());
        h = tape.mul(h, m)?;
    }
    let p_fusion = pathways::dense_named(tape, "fusion.mlp2", h)?;
    Ok((z_concat, g, z_fused, p_fusion))
}

fn confidence_fusion_vars(tape: &mut Tape, pv: &[PathwayVars; 3], weighted: bool) -> Result<Var> {
    if !weighted {
        let s = tape.add(pv[0].p, pv[1].p)?;
        let s = tape.add(s, pv[2].p)?;
        return Ok(tape.scale(s, 1.0 / 3.0));
    }
    let mut num = None;
    let mut den = None;
    for v in pv {
        let csq = tape.mul(v.c, v.c)?;
        let term = tape.mul_col(v.p, csq)?;
        num = Some(match num {
            None => term,
            Some(n) => tape.add(n, term)?,
        });
        den = Some(match den {
            None => csq,
            Some(d) => tape.add(d, csq)?,
        });
    }
    tape.div_col(num.unwrap(), den.unwrap())
}

fn correction_vars(tape: &mut Tape, pv: &[PathwayVars; 3], p_ensemble: Var) -> Result<(Var, Var)> {
    let input = tape.concat(&[pv[0].p, pv[1].p, pv[2].p, p_ensemble])?;
    let h = pathways::dense_named(tape, "corr.l1", input)?;
    let h = tape.relu(h);
    let p_corr = pathways::dense_named(tape, "corr.l2", h)?;
    let scaled = tape.scale(p_corr, CORRECTION_SCALE);
    let p_final = tape.add(p_ensemble, scaled)?;
    Ok((p_corr, p_final))
}

pub(crate) fn decision_vars(
    tape: &mut Tape,
    _cfg: &ModelConfig,
    pv: &[PathwayVars; 3],
    cross: &CrossVars,
    opts: &ForwardOptions,
) -> Result<DecisionVars> {
    let ab = opts.ablation;
    let (z_concat, g, z_fused, p_fusion) =
        gated_fusion_vars(tape, cross.z_x, ab.no_gated_fusion, opts.fusion_dropout)?;
    let p_conf = confidence_fusion_vars(tape, pv, !ab.no_confidence)?;
    let sum = tape.add(p_conf, p_fusion)?;
    let p_ensemble = tape.scale(sum, 0.5);
    let (p_corr, p_final) = if ab.no_correction {
        (None, p_ensemble)
    } else {
        let (c, f) = correction_vars(tape, pv, p_ensemble)?;
        (Some(c), f)
    };
    Ok(DecisionVars {
        z_concat,
        g,
        z_fused,
        p_fusion,
        p_conf,
        p_ensemble,
        p_corr,
        p_final,
    })
}

/// Splits the batched forward values into one [`FusionState`] per row.
pub(crate) fn extract_states(tape: &Tape, vars: &ForwardVars) -> Vec<FusionState> {
    let d = &vars.decision;
    let rows = tape.shape(d.p_final).0;
    let k = tape.shape(d.p_final).1;
    let row = |v: Var, r: usize| tape.value(v).row(r).to_vec();
    (0..rows)
        .map(|r| FusionState {
            z_concat: row(d.z_concat, r),
            g: d.g.map_or_else(|| vec![1.0; tape.shape(d.z_concat).1], |g| row(g, r)),
            z_fused: row(d.z_fused, r),
            p_fusion: row(d.p_fusion, r),
            p_conf: row(d.p_conf, r),
            p_ensemble: row(d.p_ensemble, r),
            p_corr: d.p_corr.map_or_else(|| vec![0.0; k], |c| row(c, r)),
            p_final: row(d.p_final, r),
            confidence: vars.pathways.map(|p| tape.value(p.c).as_slice()[r]),
            modality_logits: vars.pathways.map(|p| row(p.p, r)),
        })
        .collect()
}

/// Gate, gated features and fusion logits for one sample.
pub fn gated_fusion(
    model: &TrimodalModel,
    z_x_face: &[f64],
    z_x_gest: &[f64],
    z_x_voice: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = model.config().feature_dim;
    let mut tape = Tape::new(model.params());
    let mut vars = [None; 3];
    for (slot, z) in vars.iter_mut().zip([z_x_face, z_x_gest, z_x_voice]) {
        if z.len() != d {
            return Err(Error::shape("gated_fusion", (1, d), (1, z.len())));
        }
        *slot = Some(tape.input(Matrix::row_vector(z.to_vec())));
    }
    let (_, g, z_fused, p) = gated_fusion_vars(&mut tape, vars.map(Option::unwrap), false, None)?;
    let g = g.expect("gate enabled");
    Ok((
        tape.value(g).as_slice().to_vec(),
        tape.value(z_fused).as_slice().to_vec(),
        tape.value(p).as_slice().to_vec(),
    ))
}

/// `sum_m c_m^2 p_m / sum_m c_m^2`.
pub fn confidence_weighted_fusion(p: [&[f64]; 3], c: [f64; 3]) -> Result<Vec<f64>> {
    let k = p[0].len();
    for pm in &p {
        if pm.len() != k {
            return Err(Error::shape("confidence_weighted_fusion", (1, k), (1, pm.len())));
        }
    }
    let w = c.map(|ci| ci * ci);
    let den: f64 = w.iter().sum();
    Ok((0..k)
        .map(|j| (w[0] * p[0][j] + w[1] * p[1][j] + w[2] * p[2][j]) / den)
        .collect())
}

/// Elementwise mean of the confidence-weighted and fusion logits.
pub fn ensemble(p_conf: &[f64], p_fusion: &[f64]) -> Result<Vec<f64>> {
    if p_conf.len() != p_fusion.len() {
        return Err(Error::shape("ensemble", (1, p_conf.len()), (1, p_fusion.len())));
    }
    Ok(p_conf.iter().zip(p_fusion).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// `p_ensemble + 0.2 p_corr`.
pub fn apply_correction(p_ensemble: &[f64], p_corr: &[f64]) -> Result<Vec<f64>> {
    if p_ensemble.len() != p_corr.len() {
        return Err(Error::shape("apply_correction", (1, p_ensemble.len()), (1, p_corr.len())));
    }
    Ok(p_ensemble
        .iter()
        .zip(p_corr)
        .map(|(e, c)| e + CORRECTION_SCALE * c)
        .collect())
}

/// Runs the correction network on the four logit vectors of one sample and
/// returns `(p_corr, p_final)`.
pub fn mistake_correction(
    model: &TrimodalModel,
    p_face: &[f64],
    p_gest: &[f64],
    p_voice: &[f64],
    p_ensemble: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = model.num_classes();
    for p in [p_face, p_gest, p_voice, p_ensemble] {
        if p.len() != k {
            return Err(Error::shape("mistake_correction", (1, k), (1, p.len())));
        }
    }
    let mut tape = Tape::new(model.params());
    let input = tape.input(Matrix::row_vector([p_face, p_gest, p_voice, p_ensemble].concat()));
    let h = pathways::dense_named(&mut tape, "corr.l1", input)?;
    let h = tape.relu(h);
    let p_corr = pathways::dense_named(&mut tape, "corr.l2", h)?;
    let p_corr = tape.value(p_corr).as_slice().to_vec();
    let p_final = apply_correction(p_ensemble, &p_corr)?;
    Ok((p_corr, p_final))
}

/// Identity indices sorted by descending score; ties go to the lower index.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Builds a batch from samples, zeroing every modality absent from either
/// the sample's own mask or `mask`.
pub fn masked_batch(samples: &[&EmbeddingTriplet], mask: ModalityMask) -> Result<BatchInput> {
    let mut mats = ModalityId::ALL.map(|m| Matrix::zeros(samples.len(), m.input_dim()));
    for (r, s) in samples.iter().enumerate() {
        let present = s.mask.intersect(&mask);
        for m in present.present() {
            let src = s.embedding(m);
            if src.len() != m.input_dim() {
                return Err(Error::shape("masked_batch", (1, m.input_dim()), (1, src.len())));
            }
            mats[m.index()].row_mut(r).copy_from_slice(src);
        }
    }
    let [f, g, v] = mats;
    BatchInput::new(f, g, v)
}

/// End-to-end prediction for one sample under an availability mask.
pub fn predict(
    model: &TrimodalModel,
    sample: &EmbeddingTriplet,
    mask: ModalityMask,
    ablation: AblationFlags,
) -> Result<(FusionState, Vec<usize>)> {
    let mut out = predict_batch(model, &[sample], mask, ablation)?;
    Ok(out.pop().expect("one sample"))
}

/// Batched [`predict`].
pub fn predict_batch(
    model: &TrimodalModel,
    samples: &[&EmbeddingTriplet],
    mask: ModalityMask,
    ablation: AblationFlags,
) -> Result<Vec<(FusionState, Vec<usize>)>> {
    if mask.is_empty() {
        return Err(Error::NoModality);
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let batch = masked_batch(samples, mask)?;
    let states = model.infer(&batch, ablation)?;
    Ok(states
        .into_iter()
        .map(|s| {
            let r = rank(&s.p_final);
            (s, r)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn equal_confidences_give_plain_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b, c) = (rv(&mut rng, 5), rv(&mut rng, 5), rv(&mut rng, 5));
        let out = confidence_weighted_fusion([&a, &b, &c], [0.37; 3]).unwrap();
        for j in 0..5 {
            assert!((out[j] - (a[j] + b[j] + c[j]) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn confidence_scaling_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, c) = (rv(&mut rng, 5), rv(&mut rng, 5), rv(&mut rng, 5));
        let base = confidence_weighted_fusion([&a, &b, &c], [0.9, 0.2, 0.6]).unwrap();
        for lambda in [1.0, 0.5, 0.013] {
            let s = confidence_weighted_fusion([&a, &b, &c], [0.9 * lambda, 0.2 * lambda, 0.6 * lambda]).unwrap();
            for j in 0..5 {
                assert!((s[j] - base[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_confidence_case() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let out = confidence_weighted_fusion([&e(0), &e(1), &e(2)], [0.9, 0.3, 0.3]).unwrap();
        let want = [0.818182, 0.090909, 0.090909];
        for j in 0..3 {
            assert!((out[j] - want[j]).abs() < 1e-6);
        }
        assert!((out[0] - 0.81 / 0.99).abs() < 1e-9);
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble(&[2.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        let v = [0.3, -1.7, 4.0];
        assert_eq!(ensemble(&v, &v).unwrap(), v.to_vec());
        assert!(ensemble(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn correction_arithmetic() {
        let out = apply_correction(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.2, 0.0]);
    }

    #[test]
    fn zero_correction_weights_leave_ensemble() {
        let mut model = TrimodalModel::new(ModelConfig::tiny(3)).unwrap();
        for n in ["corr.l1.w", "corr.l1.b", "corr.l2.w", "corr.l2.b"] {
            let id = model.params().id(n).unwrap();
            model.params_mut().value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps: Vec<Vec<f64>> = (0..4).map(|_| rv(&mut rng, 3)).collect();
        let (corr, fin) = mistake_correction(&model, &ps[0], &ps[1], &ps[2], &ps[3]).unwrap();
        assert!(corr.iter().all(|&c| c == 0.0));
        assert_eq!(fin, ps[3]);
    }

    #[test]
    fn correction_matches_oracle() {
        let model = TrimodalModel::new(ModelConfig::tiny(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps: Vec<Vec<f64>> = (0..4).map(|_| rv(&mut rng, 3)).collect();
        let (corr, fin) = mistake_correction(&model, &ps[0], &ps[1], &ps[2], &ps[3]).unwrap();
        let g = |n: &str| model.params().get(n).unwrap().clone();
        let x = ps.concat();
        let (w1, b1, w2, b2) = (g("corr.l1.w"), g("corr.l1.b"), g("corr.l2.w"), g("corr.l2.b"));
        let h: Vec<f64> = (0..w1.rows())
            .map(|r| (b1.as_slice()[r] + (0..12).map(|c| w1.get(r, c) * x[c]).sum::<f64>()).max(0.0))
            .collect();
        for j in 0..3 {
            let want = b2.as_slice()[j] + (0..h.len()).map(|c| w2.get(j, c) * h[c]).sum::<f64>();
            assert!((corr[j] - want).abs() < 1e-12);
            assert!((fin[j] - (ps[3][j] + 0.2 * want)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_weights_halve_features() {
        let mut model = TrimodalModel::new(ModelConfig::tiny(4)).unwrap();
        for n in ["fusion.gate1.w", "fusion.gate2.w"] {
            let id = model.params().id(n).unwrap();
            model.params_mut().value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, c) = (rv(&mut rng, 8), rv(&mut rng, 8), rv(&mut rng, 8));
        let (g, z, _) = gated_fusion(&model, &a, &b, &c).unwrap();
        assert!(g.iter().all(|&v| v == 0.5));
        let concat = [a, b, c].concat();
        for (zi, ci) in z.iter().zip(&concat) {
            assert_eq!(*zi, 0.5 * ci);
        }
    }

    #[test]
    fn zero_features_fuse_to_zero() {
        let model = TrimodalModel::new(ModelConfig::tiny(4)).unwrap();
        let z = [0.0; 8];
        let (g, fused, _) = gated_fusion(&model, &z, &z, &z).unwrap();
        assert!(fused.iter().all(|&v| v == 0.0));
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gated_fusion_matches_oracle() {
        let model = TrimodalModel::new(ModelConfig::tiny(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b, c) = (rv(&mut rng, 8), rv(&mut rng, 8), rv(&mut rng, 8));
        let (g, z, p) = gated_fusion(&model, &a, &b, &c).unwrap();
        let get = |n: &str| model.params().get(n).unwrap().clone();
        let lin = |w: &Matrix, b: &Matrix, x: &[f64]| -> Vec<f64> {
            (0..w.rows())
                .map(|r| b.as_slice()[r] + (0..w.cols()).map(|k| w.get(r, k) * x[k]).sum::<f64>())
                .collect()
        };
        let x = [a, b, c].concat();
        let h: Vec<f64> = lin(&get("fusion.gate1.w"), &get("fusion.gate1.b"), &x).into_iter().map(|v| v.max(0.0)).collect();
        let gw: Vec<f64> = lin(&get("fusion.gate2.w"), &get("fusion.gate2.b"), &h)
            .into_iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let zw: Vec<f64> = x.iter().zip(&gw).map(|(a, b)| a * b).collect();
        let h2: Vec<f64> = lin(&get("fusion.mlp1.w"), &get("fusion.mlp1.b"), &zw).into_iter().map(|v| v.max(0.0)).collect();
        let pw = lin(&get("fusion.mlp2.w"), &get("fusion.mlp2.b"), &h2);
        for (u, v) in g.iter().zip(&gw).chain(z.iter().zip(&zw)).chain(p.iter().zip(&pw)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank(&[0.1, 0.5, 0.2, 0.9]), vec![3, 1, 2, 0]);
        assert_eq!(rank(&[1.0, 2.0, 2.0, 1.0]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn dominant_confidence_wins_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let ps: Vec<Vec<f64>> = (0..3).map(|_| rv(&mut rng, 6)).collect();
            let dom = rng.random_range(0..3);
            let mut c = [0.0; 3];
            for (i, ci) in c.iter_mut().enumerate() {
                *ci = if i == dom { rng.random_range(0.9..0.999) } else { rng.random_range(0.001..0.05) };
            }
            let others: f64 = (0..3).filter(|&i| i != dom).map(|i| c[i] * c[i]).sum();
            assert!(c[dom] * c[dom] >= 100.0 * others);
            let sorted = rank(&ps[dom]);
            // Require a clear logit gap for the dominant head.
            if ps[dom][sorted[0]] - ps[dom][sorted[1]] < 0.2 {
                continue;
            }
            let out = confidence_weighted_fusion([&ps[0], &ps[1], &ps[2]], c).unwrap();
            assert_eq!(rank(&out)[0], sorted[0]);
        }
    }
}
