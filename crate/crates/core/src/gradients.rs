//! Finite-difference verification of the model's analytic gradients, one
//! sub-network at a time or end to end through the weighted objective.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::augment::dropout_mask;
use crate::crossattn;
use crate::error::{Error, Result};
use crate::losses::{multitask_loss, smoothed_target, Head, LossConfig};
use crate::model::{AblationFlags, BatchInput, ForwardOptions, ModelConfig, TrimodalModel};
use crate::modality::ModalityId;
use crate::numcore::{grad_check, GradCheckOptions, GradCheckReport, Matrix, ParamId, Tape, Var};
use crate::pathways;

/// Tolerance on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradModule {
    /// Whole network through the uncertainty-weighted objective.
    All,
    Pathways,
    Crossattn,
    Decision,
    Losses,
}

impl GradModule {
    pub const ALL: [GradModule; 5] = [
        GradModule::All,
        GradModule::Pathways,
        GradModule::Crossattn,
        GradModule::Decision,
        GradModule::Losses,
    ];

    pub fn key(self) -> &'static str {
        match self {
            GradModule::All => "all",
            GradModule::Pathways => "pathways",
            GradModule::Crossattn => "crossattn",
            GradModule::Decision => "decision",
            GradModule::Losses => "losses",
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown module `{s}` (all|pathways|crossattn|decision|losses)")))
    }
}

#[derive(Clone, Debug)]
pub struct ModelCheckOptions {
    pub num_classes: usize,
    pub batch: usize,
    pub step: f64,
    /// Entries sampled per parameter tensor.
    pub entries_per_param: Option<usize>,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        ModelCheckOptions {
            num_classes: 5,
            batch: 3,
            step: 1e-5,
            entries_per_param: Some(6),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub module: GradModule,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl SeedResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= GRAD_TOLERANCE
    }
}

/// Random tiny model with nonzero biases and log-variances so that every
/// path carries gradient.
fn random_model(seed: u64, k: usize) -> Result<TrimodalModel> {
    let mut model = TrimodalModel::new(ModelConfig {
        init_seed: seed,
        ..ModelConfig::tiny(k)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let params = model.params_mut();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        if name.ends_with(".b") || name.starts_with("loss.") {
            for v in params.value_mut(id).as_mut_slice() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    Ok(model)
}

fn random_input(rng: &mut ChaCha8Rng, batch: usize) -> Result<BatchInput> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mats = ModalityId::ALL.map(|m| {
        let data = (0..batch * m.input_dim()).map(|_| normal.sample(rng)).collect();
        Matrix::from_vec(batch, m.input_dim(), data).expect("shape")
    });
    let [f, g, v] = mats;
    BatchInput::new(f, g, v)
}

fn random_weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn weighted_sum(tape: &mut Tape, x: Var, w: &Matrix) -> Result<Var> {
    let w = tape.input(w.clone());
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn params_with_prefix(model: &TrimodalModel, prefixes: &[String]) -> Vec<ParamId> {
    let p = model.params();
    p.ids()
        .filter(|&id| prefixes.iter().any(|pre| p.name(id).starts_with(pre.as_str())))
        .collect()
}

/// Checks one module's gradients on a random tiny model seeded by `seed`.
pub fn check_module(module: GradModule, seed: u64, opts: &ModelCheckOptions) -> Result<SeedResult> {
    let k = opts.num_classes;
    let mut model = random_model(seed, k)?;
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDA7A);
    let input = random_input(&mut rng, opts.batch)?;
    let mut targets = Matrix::zeros(opts.batch, k);
    for r in 0..opts.batch {
        let y = rng.random_range(0..k);
        targets.row_mut(r).copy_from_slice(&smoothed_target(y, k, 0.1)?);
    }
    let drop = dropout_mask(opts.batch, cfg.fusion_hidden, 0.2, &mut rng)?;
    let d = cfg.feature_dim;
    let probes: Vec<Matrix> = (0..6).map(|_| random_weights(&mut rng, opts.batch, d)).collect();
    let conf_probe = random_weights(&mut rng, opts.batch, 1);

    let gc = GradCheckOptions {
        step: opts.step,
        entries_per_param: opts.entries_per_param,
        seed,
    };
    let all_heads = LossConfig {
        loss_heads: Head::ALL.to_vec(),
        ..LossConfig::default()
    };
    let ids: Vec<ParamId>;
    let report: GradCheckReport = match module {
        GradModule::Pathways => {
            ids = params_with_prefix(&model, &ModalityId::ALL.map(pathways::prefix));
            grad_check(model.params_mut(), &ids, &gc, |tape| {
                let mut total = None;
                for m in ModalityId::ALL {
                    let x = tape.input(input.get(m).clone());
                    let pv = pathways::pathway_vars(tape, &cfg, m, x)?;
                    let lp = tape.focal_loss(pv.p, targets.clone(), 2.0)?;
                    let lz = weighted_sum(tape, pv.z, &probes[m.index()])?;
                    let lc = weighted_sum(tape, pv.c, &conf_probe)?;
                    let s = tape.add(lp, lz)?;
                    let s = tape.add(s, lc)?;
                    total = Some(match total {
                        None => s,
                        Some(t) => tape.add(t, s)?,
                    });
                }
                Ok(total.expect("three pathways"))
            })?
        }
        GradModule::Crossattn => {
            let mut prefixes: Vec<String> = ModalityId::ALL.map(crossattn::prefix).to_vec();
            prefixes.extend(ModalityId::ALL.map(pathways::prefix));
            ids = params_with_prefix(&model, &prefixes);
            grad_check(model.params_mut(), &ids, &gc, |tape| {
                let mut pv = Vec::new();
                for m in ModalityId::ALL {
                    let x = tape.input(input.get(m).clone());
                    pv.push(pathways::pathway_vars(tape, &cfg, m, x)?);
                }
                let pv: [_; 3] = pv.try_into().expect("three pathways");
                let cross = crossattn::trimodal_cross_vars(tape, &cfg, &pv)?;
                let mut total = None;
                for (i, z) in cross.z_x.into_iter().enumerate() {
                    let s = weighted_sum(tape, z, &probes[3 + i])?;
                    total = Some(match total {
                        None => s,
                        Some(t) => tape.add(t, s)?,
                    });
                }
                Ok(total.expect("three branches"))
            })?
        }
        GradModule::Decision | GradModule::Losses | GradModule::All => {
            let prefixes: Vec<String> = match module {
                GradModule::Decision => vec!["fusion.".into(), "corr.".into()],
                GradModule::Losses => vec!["loss.".into()],
                _ => vec![String::new()],
            };
            ids = params_with_prefix(&model, &prefixes);
            let loss_cfg = if module == GradModule::All { LossConfig::default() } else { all_heads };
            let fopts = ForwardOptions {
                ablation: AblationFlags::default(),
                fusion_dropout: Some(&drop),
            };
            grad_check(model.params_mut(), &ids, &gc, |tape| {
                let vars = TrimodalModel::forward(&cfg, tape, &input, &fopts)?;
                Ok(multitask_loss(tape, &vars, &targets, &loss_cfg)?.total)
            })?
        }
    };
    Ok(SeedResult {
        module,
        seed,
        max_rel_error: report.max_rel_error,
        worst_param: report.worst_param,
        checked: report.checked,
        skipped_kinks: report.skipped_kinks,
    })
}

/// Runs every module in `modules` over `seeds`.
pub fn check_seeds(modules: &[GradModule], seeds: std::ops::Range<u64>, opts: &ModelCheckOptions) -> Result<Vec<SeedResult>> {
    let mut out = Vec::new();
    for &m in modules {
        for s in seeds.clone() {
            out.push(check_module(m, s, opts)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes_on_a_few_seeds() {
        let opts = ModelCheckOptions::default();
        for r in check_seeds(&GradModule::ALL, 0..3, &opts).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn module_names_parse() {
        for m in GradModule::ALL {
            assert_eq!(m.key().parse::<GradModule>().unwrap(), m);
        }
        assert!("everything".parse::<GradModule>().is_err());
    }
}
