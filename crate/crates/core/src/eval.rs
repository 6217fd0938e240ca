//! Top-k accuracy under every modality-availability condition, split by
//! single- and multi-session identities, and the ablation ladder.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTriplet;
use crate::decision::{masked_batch, rank};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, TrimodalModel};
use crate::modality::ModalityMask;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rows per inference batch.
const EVAL_BATCH: usize = 256;

/// Fraction of samples whose label is among the first `k` entries of its ranking.
pub fn topk_accuracy(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("top-k needs k >= 1".into()));
    }
    if rankings.len() != labels.len() {
        return Err(Error::shape("topk_accuracy", (rankings.len(), 1), (labels.len(), 1)));
    }
    if labels.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, y)| r.iter().take(k).any(|c| c == *y))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionCondition {
    SingleSession,
    MultiSession,
    Overall,
}

impl SessionCondition {
    pub const ALL: [SessionCondition; 3] = [
        SessionCondition::SingleSession,
        SessionCondition::MultiSession,
        SessionCondition::Overall,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SessionCondition::SingleSession => "single-session",
            SessionCondition::MultiSession => "multi-session",
            SessionCondition::Overall => "overall",
        }
    }
}

/// One (mask, session condition) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub mask: String,
    pub condition: SessionCondition,
    pub count: usize,
    pub top1_hits: usize,
    pub top5_hits: usize,
    /// Percentages; zero when `count` is zero.
    pub top1: f64,
    pub top5: f64,
}

impl EvalCell {
    fn new(mask: &ModalityMask, condition: SessionCondition, count: usize, top1_hits: usize, top5_hits: usize) -> Self {
        let pct = |h: usize| if count == 0 { 0.0 } else { 100.0 * h as f64 / count as f64 };
        EvalCell {
            mask: mask.label(),
            condition,
            count,
            top1_hits,
            top5_hits,
            top1: pct(top1_hits),
            top5: pct(top5_hits),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub ablation: AblationFlags,
    pub config_hash: String,
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn cell(&self, mask: &ModalityMask, condition: SessionCondition) -> Option<&EvalCell> {
        let label = mask.label();
        self.cells.iter().find(|c| c.mask == label && c.condition == condition)
    }

    /// Overall Top-1 (percent) for `mask`.
    pub fn top1(&self, mask: &ModalityMask) -> Option<f64> {
        self.cell(mask, SessionCondition::Overall).map(|c| c.top1)
    }

    pub fn top5(&self, mask: &ModalityMask) -> Option<f64> {
        self.cell(mask, SessionCondition::Overall).map(|c| c.top5)
    }

    pub fn masks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.mask) {
                out.push(c.mask.clone());
            }
        }
        out
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Fixed-width table, percentages to two decimals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "ablation: {}", self.ablation).unwrap();
        writeln!(
            s,
            "{:<14} {:>16} {:>16} {:>16}",
            "mask", "single-session", "multi-session", "overall"
        )
        .unwrap();
        writeln!(s, "{:<14} {:>16} {:>16} {:>16}", "", "top1 / top5", "top1 / top5", "top1 / top5").unwrap();
        for mask in self.masks() {
            write!(s, "{mask:<14}").unwrap();
            for cond in SessionCondition::ALL {
                let cell = self.cells.iter().find(|c| c.mask == mask && c.condition == cond);
                match cell {
                    Some(c) if c.count > 0 => write!(s, " {:>16}", format!("{:.2} / {:.2}", c.top1, c.top5)).unwrap(),
                    _ => write!(s, " {:>16}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}

/// Rankings of `p_final` for every sample under `mask`.
pub fn rankings(
    model: &TrimodalModel,
    samples: &[EmbeddingTriplet],
    mask: ModalityMask,
    ablation: AblationFlags,
) -> Result<Vec<Vec<usize>>> {
    if mask.is_empty() {
        return Err(Error::NoModality);
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&EmbeddingTriplet> = chunk.iter().collect();
        let batch = masked_batch(&refs, mask)?;
        for state in model.infer(&batch, ablation)? {
            out.push(rank(&state.p_final));
        }
    }
    Ok(out)
}

/// Evaluates `masks` over `samples`. `multi_session[identity]` says whether
/// the identity was recorded in more than one session.
pub fn eval_masks(
    model: &TrimodalModel,
    samples: &[EmbeddingTriplet],
    multi_session: &[bool],
    ablation: AblationFlags,
    masks: &[ModalityMask],
    config_hash: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut cells = Vec::with_capacity(masks.len() * 3);
    for mask in masks {
        let ranks = rankings(model, samples, *mask, ablation)?;
        let mut tallies = [(0usize, 0usize, 0usize); 3];
        for (r, s) in ranks.iter().zip(samples) {
            let multi = *multi_session
                .get(s.identity)
                .ok_or_else(|| Error::Data(format!("no session info for identity {}", s.identity)))?;
            let t1 = usize::from(r[0] == s.identity);
            let t5 = usize::from(r.iter().take(5).any(|c| *c == s.identity));
            for slot in [if multi { 1 } else { 0 }, 2] {
                tallies[slot].0 += 1;
                tallies[slot].1 += t1;
                tallies[slot].2 += t5;
            }
        }
        for (cond, (n, h1, h5)) in SessionCondition::ALL.into_iter().zip(tallies) {
            cells.push(EvalCell::new(mask, cond, n, h1, h5));
        }
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        ablation,
        config_hash: config_hash.to_string(),
        cells,
    })
}

/// All seven availability conditions.
pub fn eval_matrix(
    model: &TrimodalModel,
    samples: &[EmbeddingTriplet],
    multi_session: &[bool],
    ablation: AblationFlags,
    config_hash: &str,
) -> Result<EvalReport> {
    eval_masks(model, samples, multi_session, ablation, &ModalityMask::CONDITIONS, config_hash)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LadderMode {
    /// Each row removes one more module than the row above.
    Cumulative,
    /// Each row removes exactly one module from the full model.
    Single,
}

impl std::str::FromStr for LadderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative" => Ok(LadderMode::Cumulative),
            "single" => Ok(LadderMode::Single),
            _ => Err(Error::Invalid(format!("unknown ablation mode `{s}` (cumulative|single)"))),
        }
    }
}

/// Removal order of the ladder.
pub const LADDER_ORDER: [&str; 5] = [
    "no_correction",
    "no_cross_attention",
    "no_gated_fusion",
    "no_confidence",
    "no_augmentation",
];

/// Ablation settings of every ladder row, starting with the full model.
pub fn ladder_rows(mode: LadderMode) -> Vec<(String, AblationFlags)> {
    let mut rows = vec![("full".to_string(), AblationFlags::default())];
    let mut acc = AblationFlags::default();
    for name in LADDER_ORDER {
        let flags = match mode {
            LadderMode::Cumulative => {
                acc.set(name, true).expect("known flag");
                acc
            }
            LadderMode::Single => {
                let mut f = AblationFlags::default();
                f.set(name, true).expect("known flag");
                f
            }
        };
        rows.push((format!("-{}", name.trim_start_matches("no_").replace('_', " ")), flags));
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub name: String,
    pub ablation: AblationFlags,
    pub report: EvalReport,
    /// Overall Top-1 minus the full model's, per mask (percentage points).
    pub delta_top1: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderTable {
    pub mode: LadderMode,
    pub rows: Vec<LadderRow>,
}

impl LadderTable {
    /// Mean overall Top-1 over the three single-modality masks.
    pub fn unimodal_mean(report: &EvalReport) -> f64 {
        let ms = [ModalityMask::new(true, false, false), ModalityMask::new(false, true, false), ModalityMask::new(false, false, true)];
        ms.iter().map(|m| report.top1(m).unwrap_or(0.0)).sum::<f64>() / 3.0
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let masks = self.rows.first().map(|r| r.report.masks()).unwrap_or_default();
        write!(s, "{:<18}", "model").unwrap();
        for m in &masks {
            write!(s, " {m:>13}").unwrap();
        }
        s.push('\n');
        for row in &self.rows {
            write!(s, "{:<18}", row.name).unwrap();
            for (m, d) in masks.iter().zip(&row.delta_top1) {
                let mask: ModalityMask = m.parse().expect("report masks parse");
                let v = row.report.top1(&mask).unwrap_or(0.0);
                if row.name == "full" {
                    write!(s, " {:>13}", format!("{v:.2}")).unwrap();
                } else {
                    write!(s, " {:>13}", format!("{v:.2} ({:+.2})", d.1)).unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Runs `train_and_eval` for each ladder row and tabulates Top-1 deltas
/// against the full model.
pub fn ablation_ladder<F>(mode: LadderMode, mut train_and_eval: F) -> Result<LadderTable>
where
    F: FnMut(AblationFlags) -> Result<EvalReport>,
{
    let mut rows: Vec<LadderRow> = Vec::new();
    for (name, flags) in ladder_rows(mode) {
        let report = train_and_eval(flags)?;
        let delta_top1 = report
            .masks()
            .into_iter()
            .map(|m| {
                let mask: ModalityMask = m.parse().expect("report masks parse");
                let full = rows.first().map_or(&report, |r| &r.report);
                let d = report.top1(&mask).unwrap_or(0.0) - full.top1(&mask).unwrap_or(0.0);
                (m, d)
            })
            .collect();
        rows.push(LadderRow {
            name,
            ablation: flags,
            report,
            delta_top1,
        });
    }
    Ok(LadderTable { mode, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top2_hand_case() {
        let r = rank(&[0.1, 0.5, 0.2, 0.9]);
        assert_eq!(&r[..2], &[3, 1]);
        assert_eq!(topk_accuracy(&[r.clone()], &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&[r], &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn k_equal_to_classes_is_always_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ranks: Vec<Vec<usize>> = (0..100)
            .map(|_| rank(&(0..7).map(|_| rng.random::<f64>()).collect::<Vec<_>>()))
            .collect();
        let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..7)).collect();
        assert_eq!(topk_accuracy(&ranks, &labels, 7).unwrap(), 1.0);
        assert!(topk_accuracy(&ranks, &labels, 0).is_err());
        assert!(matches!(topk_accuracy(&[], &[], 1), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn random_scores_hit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1000;
        let ranks: Vec<Vec<usize>> = (0..n)
            .map(|_| rank(&(0..50).map(|_| rng.random::<f64>()).collect::<Vec<_>>()))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..50)).collect();
        let acc = topk_accuracy(&ranks, &labels, 1).unwrap();
        let bound = 3.0 * (0.02f64 * 0.98 / n as f64).sqrt();
        assert!((acc - 0.02).abs() <= bound, "top1 {acc}");
    }

    proptest! {
        #[test]
        fn topk_ignores_sample_order(seed in 0u64..1000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let ranks: Vec<Vec<usize>> = (0..n)
                .map(|_| rank(&(0..6).map(|_| rng.random::<f64>()).collect::<Vec<_>>()))
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
            let r2: Vec<Vec<usize>> = order.iter().map(|&i| ranks[i].clone()).collect();
            let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(topk_accuracy(&ranks, &labels, k).unwrap(), topk_accuracy(&r2, &l2, k).unwrap());
        }
    }

    #[test]
    fn cumulative_ladder_accumulates() {
        let rows = ladder_rows(LadderMode::Cumulative);
        assert_eq!(rows.len(), 6);
        assert!(rows[0].1.is_full());
        for (i, (_, f)) in rows.iter().enumerate().skip(1) {
            assert_eq!(f.active().len(), i);
        }
        for (_, f) in ladder_rows(LadderMode::Single).iter().skip(1) {
            assert_eq!(f.active().len(), 1);
        }
        assert_eq!(rows[1].0, "-correction");
    }
}
