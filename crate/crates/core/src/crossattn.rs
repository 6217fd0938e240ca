//! Trimodal cross-attention.
//!
//! For each target branch `t` with sources `a`, `b`:
//!
//! ```text
//! s     = z_t + proj_t(z_a) + proj_t(z_b)
//! z_x_t = s + Attn_t(s)
//! ```
//!
//! `proj_t` is one linear map (with bias) per target, applied to each source
//! term separately, so the bias enters twice. All three branches read the
//! pre-cross pathway features.

use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::model::{ModelConfig, TrimodalModel};
use crate::numcore::{Matrix, ParamStore, Tape, Var};
use crate::pathways::{self, PathwayOutput, PathwayVars};

/// Cross-refined features for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossOutput {
    pub z_x_face: Vec<f64>,
    pub z_x_gest: Vec<f64>,
    pub z_x_voice: Vec<f64>,
}

impl CrossOutput {
    pub fn get(&self, m: ModalityId) -> &[f64] {
        match m {
            ModalityId::Face => &self.z_x_face,
            ModalityId::Gesture => &self.z_x_gest,
            ModalityId::Voice => &self.z_x_voice,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossVars {
    /// Indexed by [`ModalityId::index`].
    pub z_x: [Var; 3],
}

pub fn prefix(m: ModalityId) -> String {
    format!("cross.{}.", m.key())
}

pub(crate) fn register_params(params: &mut ParamStore, cfg: &ModelConfig, m: ModalityId, seed: u64) -> Result<()> {
    let p = prefix(m);
    pathways::register_dense(params, &format!("{p}proj"), cfg.feature_dim, cfg.feature_dim, seed)?;
    pathways::register_attention(params, &p, cfg.token_dim(), seed)
}

fn project_vars(tape: &mut Tape, target: ModalityId, z_a: Var, z_b: Var) -> Result<Var> {
    let name = format!("{}proj", prefix(target));
    let pa = pathways::dense_named(tape, &name, z_a)?;
    let pb = pathways::dense_named(tape, &name, z_b)?;
    tape.add(pa, pb)
}

fn block_vars(tape: &mut Tape, cfg: &ModelConfig, target: ModalityId, z_t: Var, injected: Var) -> Result<Var> {
    let s = tape.add(z_t, injected)?;
    pathways::attention_block(tape, &prefix(target), s, cfg.tokens)
}

/// All three cross branches over a batch.
pub fn trimodal_cross_vars(tape: &mut Tape, cfg: &ModelConfig, pv: &[PathwayVars; 3]) -> Result<CrossVars> {
    let mut z_x = Vec::with_capacity(3);
    for target in ModalityId::ALL {
        let [a, b] = target.others();
        let injected = project_vars(tape, target, pv[a.index()].z, pv[b.index()].z)?;
        z_x.push(block_vars(tape, cfg, target, pv[target.index()].z, injected)?);
    }
    Ok(CrossVars {
        z_x: z_x.try_into().expect("three branches"),
    })
}

fn check_len(what: &'static str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::shape(what, (1, d), (1, v.len())));
    }
    Ok(())
}

/// `proj_target(z_a) + proj_target(z_b)`.
pub fn cross_project(model: &TrimodalModel, target: ModalityId, z_a: &[f64], z_b: &[f64]) -> Result<Vec<f64>> {
    let d = model.config().feature_dim;
    check_len("cross_project", z_a, d)?;
    check_len("cross_project", z_b, d)?;
    let mut tape = Tape::new(model.params());
    let a = tape.input(Matrix::row_vector(z_a.to_vec()));
    let b = tape.input(Matrix::row_vector(z_b.to_vec()));
    let out = project_vars(&mut tape, target, a, b)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// `s + Attn_target(s)` with `s = z_t + injected`.
pub fn cross_attention_block(
    model: &TrimodalModel,
    target: ModalityId,
    z_t: &[f64],
    injected: &[f64],
) -> Result<Vec<f64>> {
    let d = model.config().feature_dim;
    check_len("cross_attention_block", z_t, d)?;
    check_len("cross_attention_block", injected, d)?;
    let mut tape = Tape::new(model.params());
    let zt = tape.input(Matrix::row_vector(z_t.to_vec()));
    let inj = tape.input(Matrix::row_vector(injected.to_vec()));
    let out = block_vars(&mut tape, model.config(), target, zt, inj)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Joint refinement of the three pathway outputs of one sample.
pub fn trimodal_cross(
    model: &TrimodalModel,
    face: &PathwayOutput,
    gesture: &PathwayOutput,
    voice: &PathwayOutput,
) -> Result<CrossOutput> {
    let outs = [face, gesture, voice];
    let mut z_x = Vec::with_capacity(3);
    for target in ModalityId::ALL {
        let [a, b] = target.others();
        let injected = cross_project(model, target, &outs[a.index()].z, &outs[b.index()].z)?;
        z_x.push(cross_attention_block(model, target, &outs[target.index()].z, &injected)?);
    }
    let mut it = z_x.into_iter();
    Ok(CrossOutput {
        z_x_face: it.next().unwrap(),
        z_x_gest: it.next().unwrap(),
        z_x_voice: it.next().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathways::pathway_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> TrimodalModel {
        TrimodalModel::new(ModelConfig::tiny(4)).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn zero_prefix(model: &mut TrimodalModel, prefix: &str) {
        let ids: Vec<_> = model.params().ids().filter(|id| model.params().name(*id).starts_with(prefix)).collect();
        for id in ids {
            model.params_mut().value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_inputs_zero_bias_project_to_zero() {
        let m = model();
        let out = cross_project(&m, ModalityId::Face, &[0.0; 8], &[0.0; 8]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_sums_sources() {
        let mut m = model();
        m.params_mut().set("cross.voice.proj.w", Matrix::identity(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let out = cross_project(&m, ModalityId::Voice, &a, &b).unwrap();
        for i in 0..8 {
            assert_eq!(out[i], a[i] + b[i]);
        }
    }

    #[test]
    fn projecting_terms_differs_from_projecting_sum_by_one_bias() {
        let mut m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bias = rand_vec(&mut rng, 8);
        m.params_mut().set("cross.face.proj.b", Matrix::row_vector(bias.clone())).unwrap();
        let (a, b) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let terms = cross_project(&m, ModalityId::Face, &a, &b).unwrap();
        // proj(a + b) alone = cross_project(a + b, 0) - bias.
        let whole = cross_project(&m, ModalityId::Face, &sum, &[0.0; 8]).unwrap();
        for i in 0..8 {
            let proj_sum = whole[i] - bias[i];
            assert!((terms[i] - proj_sum - bias[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_attention_and_injection_is_identity() {
        let mut m = model();
        zero_prefix(&mut m, "cross.face.attn");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_vec(&mut rng, 8);
        let out = cross_attention_block(&m, ModalityId::Face, &z, &[0.0; 8]).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn source_order_does_not_matter() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (zt, a, b) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let ab = cross_project(&m, ModalityId::Gesture, &a, &b).unwrap();
        let ba = cross_project(&m, ModalityId::Gesture, &b, &a).unwrap();
        let oab = cross_attention_block(&m, ModalityId::Gesture, &zt, &ab).unwrap();
        let oba = cross_attention_block(&m, ModalityId::Gesture, &zt, &ba).unwrap();
        for (x, y) in oab.iter().zip(&oba) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    fn outputs(m: &TrimodalModel, seed: u64) -> [PathwayOutput; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModalityId::ALL.map(|mo| pathway_forward(m, mo, &rand_vec(&mut rng, mo.input_dim())).unwrap())
    }

    #[test]
    fn zero_cross_weights_are_residual_identity() {
        let mut m = model();
        zero_prefix(&mut m, "cross.");
        let [f, g, v] = outputs(&m, 5);
        let out = trimodal_cross(&m, &f, &g, &v).unwrap();
        assert_eq!(out.z_x_face, f.z);
        assert_eq!(out.z_x_gest, g.z);
        assert_eq!(out.z_x_voice, v.z);
    }

    /// Straight-line oracle for the face branch.
    #[test]
    fn face_branch_matches_oracle() {
        let m = model();
        let [f, g, v] = outputs(&m, 6);
        let out = trimodal_cross(&m, &f, &g, &v).unwrap();
        let get = |n: &str| m.params().get(n).unwrap().clone();
        let (w, b) = (get("cross.face.proj.w"), get("cross.face.proj.b"));
        let proj = |x: &[f64]| -> Vec<f64> {
            (0..8).map(|r| b.as_slice()[r] + (0..8).map(|c| w.get(r, c) * x[c]).sum::<f64>()).collect()
        };
        let (pg, pv) = (proj(&g.z), proj(&v.z));
        let s: Vec<f64> = (0..8).map(|i| f.z[i] + pg[i] + pv[i]).collect();
        let (wq, wk, wv) = (get("cross.face.attn.wq"), get("cross.face.attn.wk"), get("cross.face.attn.wv"));
        let lin = |w: &Matrix, x: &[f64]| -> Vec<f64> { (0..2).map(|r| (0..2).map(|c| w.get(r, c) * x[c]).sum()).collect() };
        let toks: Vec<&[f64]> = s.chunks(2).collect();
        let mut want = s.clone();
        for i in 0..4 {
            let qi = lin(&wq, toks[i]);
            let scores: Vec<f64> = (0..4)
                .map(|j| {
                    let kj = lin(&wk, toks[j]);
                    (qi[0] * kj[0] + qi[1] * kj[1]) / 2f64.sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for j in 0..4 {
                let vj = lin(&wv, toks[j]);
                want[2 * i] += e[j] / tot * vj[0];
                want[2 * i + 1] += e[j] / tot * vj[1];
            }
        }
        for (a, b) in out.z_x_face.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_source_contributes_a_constant() {
        let m = model();
        let zero_gest = pathway_forward(&m, ModalityId::Gesture, &[0.0; 768]).unwrap();
        let zeros = vec![0.0; 8];
        let contrib = cross_project(&m, ModalityId::Face, &zero_gest.z, &zeros).unwrap();
        let again = cross_project(&m, ModalityId::Face, &zero_gest.z, &zeros).unwrap();
        assert_eq!(contrib, again);
    }
}
