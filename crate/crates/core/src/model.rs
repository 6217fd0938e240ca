//! Network configuration, parameter layout, and the batched end-to-end forward pass.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crossattn::{self, CrossVars};
use crate::decision::{self, DecisionVars};
use crate::error::{Error, Result};
use crate::losses::Head;
use crate::modality::ModalityId;
use crate::numcore::{Matrix, ParamStore, Tape, Var};
use crate::pathways::{self, PathwayVars};

/// Layer widths. Input widths are fixed per [`ModalityId`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of identities `K`; taken from the dataset, not the config file.
    #[serde(skip)]
    pub num_classes: usize,
    /// Width of the first dense layer in each pathway.
    pub hidden_dim: usize,
    /// Common pathway output width `D`; the fused vector has `3 D` entries.
    pub feature_dim: usize,
    /// Tokens the `D`-vector is split into for attention.
    pub tokens: usize,
    pub conf_hidden: usize,
    pub gate_hidden: usize,
    pub fusion_hidden: usize,
    pub corr_hidden: usize,
    /// Weight initialisation seed; set from the run seed.
    #[serde(skip)]
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 50,
            hidden_dim: 512,
            feature_dim: 320,
            tokens: 8,
            conf_hidden: 64,
            gate_hidden: 256,
            fusion_hidden: 512,
            corr_hidden: 128,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A tiny network for gradient checks and unit tests.
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            hidden_dim: 6,
            feature_dim: 8,
            tokens: 4,
            conf_hidden: 3,
            gate_hidden: 5,
            fusion_hidden: 6,
            corr_hidden: 4,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("num_classes", self.num_classes),
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
            ("tokens", self.tokens),
            ("conf_hidden", self.conf_hidden),
            ("gate_hidden", self.gate_hidden),
            ("fusion_hidden", self.fusion_hidden),
            ("corr_hidden", self.corr_hidden),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.feature_dim % self.tokens != 0 {
            return Err(Error::Config(format!(
                "model.feature_dim {} is not divisible by model.tokens {}",
                self.feature_dim, self.tokens
            )));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.feature_dim / self.tokens
    }

    pub fn concat_dim(&self) -> usize {
        3 * self.feature_dim
    }
}

/// Mechanisms that can be bypassed for ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// `p_final = p_ensemble`.
    pub no_correction: bool,
    /// Cross-refined features are the pathway features unchanged.
    pub no_cross_attention: bool,
    /// Gate fixed to 1 (plain concatenation).
    pub no_gated_fusion: bool,
    /// Confidence weighting replaced by the unweighted mean of the three heads.
    pub no_confidence: bool,
    /// Training-time augmentation disabled.
    pub no_augmentation: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 5] = [
        "no_correction",
        "no_cross_attention",
        "no_gated_fusion",
        "no_confidence",
        "no_augmentation",
    ];

    pub fn is_full(&self) -> bool {
        *self == AblationFlags::default()
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        match name {
            "no_correction" => self.no_correction = on,
            "no_cross_attention" => self.no_cross_attention = on,
            "no_gated_fusion" => self.no_gated_fusion = on,
            "no_confidence" => self.no_confidence = on,
            "no_augmentation" => self.no_augmentation = on,
            other => return Err(Error::Invalid(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> bool {
        match name {
            "no_correction" => self.no_correction,
            "no_cross_attention" => self.no_cross_attention,
            "no_gated_fusion" => self.no_gated_fusion,
            "no_confidence" => self.no_confidence,
            "no_augmentation" => self.no_augmentation,
            _ => false,
        }
    }

    pub fn active(&self) -> Vec<&'static str> {
        Self::NAMES.into_iter().filter(|n| self.get(n)).collect()
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let active = self.active();
        if active.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&active.join(","))
        }
    }
}

impl FromStr for AblationFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = AblationFlags::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part != "full" {
                flags.set(part, true)?;
            }
        }
        Ok(flags)
    }
}

/// A batch of raw embeddings, one `B x input_dim` matrix per modality.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub raw: [Matrix; 3],
}

impl BatchInput {
    pub fn new(face: Matrix, gesture: Matrix, voice: Matrix) -> Result<Self> {
        let b = face.rows();
        for (m, x) in ModalityId::ALL.iter().zip([&face, &gesture, &voice]) {
            if x.cols() != m.input_dim() || x.rows() != b {
                return Err(Error::shape("BatchInput", (b, m.input_dim()), x.shape()));
            }
        }
        Ok(BatchInput {
            raw: [face, gesture, voice],
        })
    }

    pub fn rows(&self) -> usize {
        self.raw[0].rows()
    }

    pub fn get(&self, m: ModalityId) -> &Matrix {
        &self.raw[m.index()]
    }
}

/// Per-call switches for the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub ablation: AblationFlags,
    /// Inverted-dropout mask (`B x fusion_hidden`) for the fusion classifier;
    /// `None` at evaluation.
    pub fusion_dropout: Option<&'a Matrix>,
}

/// Every tape node the loss or a caller may need.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub pathways: [PathwayVars; 3],
    pub cross: CrossVars,
    pub decision: DecisionVars,
}

impl ForwardVars {
    pub fn head(&self, head: Head) -> Option<Var> {
        let d = &self.decision;
        match head {
            Head::Face => Some(self.pathways[0].p),
            Head::Gesture => Some(self.pathways[1].p),
            Head::Voice => Some(self.pathways[2].p),
            Head::Fusion => Some(d.p_fusion),
            Head::Conf => Some(d.p_conf),
            Head::Ensemble => Some(d.p_ensemble),
            Head::Correction => d.p_corr,
            Head::Final => Some(d.p_final),
        }
    }
}

/// The trimodal identification network.
#[derive(Clone, Debug)]
pub struct TrimodalModel {
    config: ModelConfig,
    params: ParamStore,
}

impl TrimodalModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let seed = config.init_seed;
        for m in ModalityId::ALL {
            pathways::register_params(&mut params, &config, m, seed)?;
        }
        for m in ModalityId::ALL {
            crossattn::register_params(&mut params, &config, m, seed)?;
        }
        decision::register_params(&mut params, &config, seed)?;
        for head in Head::ALL {
            params.register(head.log_var_name(), Matrix::zeros(1, 1))?;
        }
        Ok(TrimodalModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Builds the full forward graph for a batch on `tape`.
    pub fn forward(
        config: &ModelConfig,
        tape: &mut Tape,
        input: &BatchInput,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        let mut pv = Vec::with_capacity(3);
        for m in ModalityId::ALL {
            let x = tape.input(input.get(m).clone());
            pv.push(pathways::pathway_vars(tape, config, m, x)?);
        }
        let pathways: [PathwayVars; 3] = pv.try_into().expect("three pathways");
        let cross = if opts.ablation.no_cross_attention {
            CrossVars {
                z_x: [pathways[0].z, pathways[1].z, pathways[2].z],
            }
        } else {
            crossattn::trimodal_cross_vars(tape, config, &pathways)?
        };
        let decision = decision::decision_vars(tape, config, &pathways, &cross, opts)?;
        Ok(ForwardVars {
            pathways,
            cross,
            decision,
        })
    }

    /// Evaluation-mode forward for a batch, returning one state per row.
    pub fn infer(&self, input: &BatchInput, ablation: AblationFlags) -> Result<Vec<decision::FusionState>> {
        let mut tape = Tape::new(&self.params);
        let opts = ForwardOptions {
            ablation,
            fusion_dropout: None,
        };
        let vars = Self::forward(&self.config, &mut tape, input, &opts)?;
        Ok(decision::extract_states(&tape, &vars))
    }
}
