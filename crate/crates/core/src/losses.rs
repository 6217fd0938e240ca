//! Multi-task objective: focal loss with label smoothing on each prediction
//! head, combined with learnable log-variance weights
//! `sum_i 0.5 exp(-s_i) L_i + 0.5 s_i` where `s_i = log sigma_i^2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardVars;
use crate::numcore::{focal_row, Matrix, Tape, Var};

/// Prediction heads that can enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Face,
    Gesture,
    Voice,
    Fusion,
    Conf,
    Ensemble,
    Correction,
    Final,
}

impl Head {
    pub const ALL: [Head; 8] = [
        Head::Face,
        Head::Gesture,
        Head::Voice,
        Head::Fusion,
        Head::Conf,
        Head::Ensemble,
        Head::Correction,
        Head::Final,
    ];

    /// Heads supervised by default.
    pub const DEFAULT: [Head; 6] = [
        Head::Face,
        Head::Gesture,
        Head::Voice,
        Head::Fusion,
        Head::Ensemble,
        Head::Final,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Head::Face => "face",
            Head::Gesture => "gesture",
            Head::Voice => "voice",
            Head::Fusion => "fusion",
            Head::Conf => "conf",
            Head::Ensemble => "ensemble",
            Head::Correction => "correction",
            Head::Final => "final",
        }
    }

    /// Name of this head's log-variance parameter.
    pub fn log_var_name(self) -> String {
        format!("loss.log_var.{}", self.key())
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Head::ALL
            .into_iter()
            .find(|h| h.key() == s.trim())
            .ok_or_else(|| Error::Invalid(format!("unknown loss head `{s}`")))
    }
}

/// Smoothed one-hot target `(1 - eps) onehot(y) + eps / K`.
pub fn smoothed_target(label: usize, classes: usize, smoothing: f64) -> Result<Vec<f64>> {
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    let mut t = vec![smoothing / classes as f64; classes];
    t[label] += 1.0 - smoothing;
    Ok(t)
}

/// Focal loss of one logit vector against label `y`:
/// `-sum_k t_k (1 - q_k)^gamma log q_k`, `q = softmax(p)`, `t` smoothed.
pub fn focal_loss(logits: &[f64], label: usize, gamma: f64, smoothing: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Invalid(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    if gamma < 0.0 {
        return Err(Error::Invalid(format!("focal gamma {gamma} is negative")));
    }
    let t = smoothed_target(label, logits.len(), smoothing)?;
    Ok(focal_row(logits, &t, gamma))
}

/// `sum_i 0.5 exp(-s_i) L_i + 0.5 s_i`.
pub fn uncertainty_weighted_total(losses: &[f64], log_vars: &[f64]) -> Result<f64> {
    if losses.len() != log_vars.len() {
        return Err(Error::shape("uncertainty_weighted_total", (1, losses.len()), (1, log_vars.len())));
    }
    Ok(losses
        .iter()
        .zip(log_vars)
        .map(|(l, s)| 0.5 * (-s).exp() * l + 0.5 * s)
        .sum())
}

/// Loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub label_smoothing: f64,
    pub loss_heads: Vec<Head>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            label_smoothing: 0.1,
            loss_heads: Head::DEFAULT.to_vec(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!("focal_gamma {} must be >= 0", self.focal_gamma)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.loss_heads.is_empty() {
            return Err(Error::Config("loss_heads is empty".into()));
        }
        for (i, h) in self.loss_heads.iter().enumerate() {
            if self.loss_heads[..i].contains(h) {
                return Err(Error::Config(format!("loss head `{h}` listed twice")));
            }
        }
        Ok(())
    }
}

/// Tape nodes of the objective.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    /// Per-head focal loss, in the order heads were used.
    pub per_head: Vec<(Head, Var)>,
}

/// Builds the weighted multi-task objective for a batch. `targets` holds one
/// soft target distribution per row (already smoothed and/or mixed). Heads
/// the forward pass did not produce (for example the correction head when
/// it is bypassed) are skipped.
pub fn multitask_loss(tape: &mut Tape, vars: &ForwardVars, targets: &Matrix, cfg: &LossConfig) -> Result<LossVars> {
    let mut per_head = Vec::new();
    let mut log_vars = Vec::new();
    for &head in &cfg.loss_heads {
        let Some(logits) = vars.head(head) else { continue };
        let l = tape.focal_loss(logits, targets.clone(), cfg.focal_gamma)?;
        per_head.push((head, l));
        log_vars.push(tape.param_named(&head.log_var_name())?);
    }
    if per_head.is_empty() {
        return Err(Error::Config("no configured loss head is produced by the model".into()));
    }
    let s = tape.concat(&log_vars)?;
    let losses: Vec<Var> = per_head.iter().map(|(_, v)| *v).collect();
    let total = tape.uncertainty_total(&losses, s)?;
    Ok(LossVars { total, per_head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops::log_softmax;

    #[test]
    fn uniform_logits_cross_entropy() {
        let l = focal_loss(&[0.0; 4], 2, 0.0, 0.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn focal_target_term_hand_value() {
        // Two classes with q_y = 0.9: logits (ln 9, 0).
        let l = focal_loss(&[9f64.ln(), 0.0], 0, 2.0, 0.0).unwrap();
        let want = 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((l - want).abs() < 1e-15);
        assert!((l - 0.00105361).abs() < 1e-8);
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let l = focal_loss(&[60.0, 0.0, 0.0], 0, 2.0, 0.0).unwrap();
        assert!(l < 1e-40);
        let l = focal_loss(&[60.0, 0.0, 0.0], 0, 0.0, 0.0).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn invalid_label_is_rejected() {
        assert!(matches!(focal_loss(&[0.0; 3], 3, 2.0, 0.1), Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let logits = [1.3, -0.2, 0.7, 2.2, -3.0];
        for y in 0..5 {
            let ce = -log_softmax(&logits)[y];
            assert!((focal_loss(&logits, y, 0.0, 0.0).unwrap() - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn uncertainty_examples() {
        assert!((uncertainty_weighted_total(&[1.0, 3.0], &[0.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(uncertainty_weighted_total(&[2.0], &[0.0]).unwrap(), 1.0);
        assert!(uncertainty_weighted_total(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gradient_descent_on_log_variance_finds_log_loss() {
        // d/ds (0.5 e^{-s} L + 0.5 s) = -0.5 e^{-s} L + 0.5, zero at s = ln L.
        for l in [0.3, 1.0, 2.5, 7.0] {
            let mut s = 0.0f64;
            for _ in 0..20_000 {
                s -= 0.05 * (-0.5 * (-s).exp() * l + 0.5);
            }
            assert!((s - f64::ln(l)).abs() < 1e-9, "L={l}: s={s}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            label_smoothing: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let dup = LossConfig {
            loss_heads: vec![Head::Face, Head::Face],
            ..Default::default()
        };
        assert!(dup.validate().is_err());
        assert_eq!("final".parse::<Head>().unwrap(), Head::Final);
    }
}
