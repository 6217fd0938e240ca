use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three input streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Face,
    Gesture,
    Voice,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::Face, ModalityId::Gesture, ModalityId::Voice];

    /// Raw embedding width produced by the upstream encoder.
    pub const fn input_dim(self) -> usize {
        match self {
            ModalityId::Face => 512,
            ModalityId::Gesture => 768,
            ModalityId::Voice => 256,
        }
    }

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn key(self) -> &'static str {
        match self {
            ModalityId::Face => "face",
            ModalityId::Gesture => "gesture",
            ModalityId::Voice => "voice",
        }
    }

    /// The two other modalities, in canonical order.
    pub fn others(self) -> [ModalityId; 2] {
        match self {
            ModalityId::Face => [ModalityId::Gesture, ModalityId::Voice],
            ModalityId::Gesture => [ModalityId::Face, ModalityId::Voice],
            ModalityId::Voice => [ModalityId::Face, ModalityId::Gesture],
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "face" | "f" => Ok(ModalityId::Face),
            "gesture" | "gest" | "g" => Ok(ModalityId::Gesture),
            "voice" | "v" => Ok(ModalityId::Voice),
            other => Err(Error::Invalid(format!("unknown modality `{other}`"))),
        }
    }
}

/// Which modalities are present for a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub face: bool,
    pub gesture: bool,
    pub voice: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        ModalityMask::ALL
    }
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        face: true,
        gesture: true,
        voice: true,
    };
    pub const NONE: ModalityMask = ModalityMask {
        face: false,
        gesture: false,
        voice: false,
    };

    /// The seven non-empty availability conditions, in report column order.
    pub const CONDITIONS: [ModalityMask; 7] = [
        ModalityMask::only(ModalityId::Face),
        ModalityMask::only(ModalityId::Gesture),
        ModalityMask::only(ModalityId::Voice),
        ModalityMask::new(true, false, true),
        ModalityMask::new(true, true, false),
        ModalityMask::new(false, true, true),
        ModalityMask::ALL,
    ];

    pub const fn new(face: bool, gesture: bool, voice: bool) -> Self {
        ModalityMask { face, gesture, voice }
    }

    pub const fn only(m: ModalityId) -> Self {
        match m {
            ModalityId::Face => ModalityMask::new(true, false, false),
            ModalityId::Gesture => ModalityMask::new(false, true, false),
            ModalityId::Voice => ModalityMask::new(false, false, true),
        }
    }

    pub fn has(&self, m: ModalityId) -> bool {
        match m {
            ModalityId::Face => self.face,
            ModalityId::Gesture => self.gesture,
            ModalityId::Voice => self.voice,
        }
    }

    pub fn set(&mut self, m: ModalityId, present: bool) {
        match m {
            ModalityId::Face => self.face = present,
            ModalityId::Gesture => self.gesture = present,
            ModalityId::Voice => self.voice = present,
        }
    }

    pub fn count(&self) -> usize {
        ModalityId::ALL.iter().filter(|m| self.has(**m)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn present(&self) -> impl Iterator<Item = ModalityId> + '_ {
        ModalityId::ALL.into_iter().filter(|m| self.has(*m))
    }

    pub fn intersect(&self, other: &ModalityMask) -> ModalityMask {
        ModalityMask::new(
            self.face && other.face,
            self.gesture && other.gesture,
            self.voice && other.voice,
        )
    }

    /// Column label as used in reports, e.g. `face+voice` or `trimodal`.
    pub fn label(&self) -> String {
        match self.count() {
            0 => "none".to_string(),
            3 => "trimodal".to_string(),
            _ => self.present().map(|m| m.key()).collect::<Vec<_>>().join("+"),
        }
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(&self.label())
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    /// Parses `face,voice`, `face+voice`, `trimodal` or `all`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("trimodal") || s.eq_ignore_ascii_case("all") {
            return Ok(ModalityMask::ALL);
        }
        let mut mask = ModalityMask::NONE;
        for part in s.split([',', '+']).filter(|p| !p.trim().is_empty()) {
            mask.set(part.parse()?, true);
        }
        if mask.is_empty() {
            return Err(Error::NoModality);
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditions_are_the_seven_nonempty_masks() {
        let mut seen = std::collections::HashSet::new();
        for m in ModalityMask::CONDITIONS {
            assert!(!m.is_empty());
            assert!(seen.insert(m));
        }
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn parse_and_label() {
        let m: ModalityMask = "voice,face".parse().unwrap();
        assert_eq!(m, ModalityMask::new(true, false, true));
        assert_eq!(m.label(), "face+voice");
        assert_eq!("gesture".parse::<ModalityMask>().unwrap().label(), "gesture");
        assert_eq!("trimodal".parse::<ModalityMask>().unwrap(), ModalityMask::ALL);
        assert!("".parse::<ModalityMask>().is_err());
        assert!("nose".parse::<ModalityMask>().is_err());
    }
}
