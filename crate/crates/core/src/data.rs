//! Synthetic identities with a session model, session-aware splits, and the
//! binary embedding file format.
//!
//! Each identity has one prototype per modality, each session adds an offset
//! drawn with the modality's drift, and each sample adds within-session
//! noise:
//!
//! ```text
//! x = mu_identity + delta_session + eps,   mu ~ N(0, I), delta ~ N(0, drift^2 I), eps ~ N(0, noise^2 I)
//! ```
//!
//! Values are rounded to `f32` precision so that a dataset written to disk
//! and read back is bit-identical to the in-memory one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{ModalityId, ModalityMask};

pub const DATA_FORMAT_VERSION: u32 = 1;

/// One sample: three raw embeddings plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTriplet {
    pub face: Vec<f64>,
    pub gesture: Vec<f64>,
    pub voice: Vec<f64>,
    pub identity: usize,
    pub session: u32,
    /// Modalities actually present; absent ones hold zero vectors.
    pub mask: ModalityMask,
}

impl EmbeddingTriplet {
    pub fn embedding(&self, m: ModalityId) -> &[f64] {
        match m {
            ModalityId::Face => &self.face,
            ModalityId::Gesture => &self.gesture,
            ModalityId::Voice => &self.voice,
        }
    }

    pub fn embedding_mut(&mut self, m: ModalityId) -> &mut Vec<f64> {
        match m {
            ModalityId::Face => &mut self.face,
            ModalityId::Gesture => &mut self.gesture,
            ModalityId::Voice => &mut self.voice,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for m in ModalityId::ALL {
            let len = self.embedding(m).len();
            if len != m.input_dim() {
                return Err(Error::Data(format!(
                    "{m} embedding has {len} values, expected {}",
                    m.input_dim()
                )));
            }
        }
        if self.identity >= num_classes {
            return Err(Error::Data(format!(
                "unknown identity {} (dataset has {num_classes})",
                self.identity
            )));
        }
        Ok(())
    }
}

/// A value per modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerModality<T> {
    pub face: T,
    pub gesture: T,
    pub voice: T,
}

impl<T: Copy> PerModality<T> {
    pub fn get(&self, m: ModalityId) -> T {
        match m {
            ModalityId::Face => self.face,
            ModalityId::Gesture => self.gesture,
            ModalityId::Voice => self.voice,
        }
    }

    pub fn splat(v: T) -> Self {
        PerModality {
            face: v,
            gesture: v,
            voice: v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    /// Fraction of identities recorded in a single session.
    pub single_session_fraction: f64,
    /// Multi-session identities get a uniform count in `2..=max_sessions`.
    pub max_sessions: usize,
    pub train_per_identity: usize,
    pub val_per_identity: usize,
    pub test_per_identity: usize,
    pub noise_std: PerModality<f64>,
    pub drift_std: PerModality<f64>,
    /// Scale every embedding to unit L2 norm.
    pub unit_norm: bool,
    /// Set from the run seed when loaded from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_identities: 50,
            single_session_fraction: 0.5,
            max_sessions: 3,
            train_per_identity: 40,
            val_per_identity: 10,
            test_per_identity: 10,
            noise_std: PerModality::splat(2.5),
            drift_std: PerModality {
                face: 0.8,
                gesture: 2.4,
                voice: 0.8,
            },
            unit_norm: false,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::Config("data.num_identities must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.single_session_fraction) {
            return Err(Error::Config("data.single_session_fraction outside [0, 1]".into()));
        }
        if self.max_sessions < 2 && self.single_session_fraction < 1.0 {
            return Err(Error::Config("data.max_sessions must be >= 2 for multi-session identities".into()));
        }
        if self.train_per_identity == 0 || self.test_per_identity == 0 {
            return Err(Error::Config("data: every identity needs train and test samples".into()));
        }
        for m in ModalityId::ALL {
            for (what, v) in [("noise_std", self.noise_std.get(m)), ("drift_std", self.drift_std.get(m))] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("data.{what}.{m} = {v} must be finite and >= 0")));
                }
            }
        }
        Ok(())
    }

    fn total_per_identity(&self) -> usize {
        self.train_per_identity + self.val_per_identity + self.test_per_identity
    }
}

/// A labelled set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<EmbeddingTriplet>,
}

impl Dataset {
    /// Distinct sessions per identity.
    pub fn sessions_by_identity(&self) -> Vec<BTreeSet<u32>> {
        let mut out = vec![BTreeSet::new(); self.num_classes];
        for s in &self.samples {
            out[s.identity].insert(s.session);
        }
        out
    }

    /// `true` for identities recorded in more than one session.
    pub fn multi_session_flags(&self) -> Vec<bool> {
        self.sessions_by_identity().iter().map(|s| s.len() > 1).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<EmbeddingTriplet> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }

    /// Raw little-endian bytes of every value, for reproducibility checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_records(&mut buf, &self.samples).expect("writing to a Vec cannot fail");
        buf
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws a dataset from the session model. Session ids are globally unique
/// and increase with identity; within an identity the last session holds
/// the test samples, the one before it the validation samples when there
/// are at least three.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_identities;
    let n_single = (cfg.single_session_fraction * k as f64).round() as usize;
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut session_counts = vec![0usize; k];
    for (rank, &id) in order.iter().enumerate() {
        session_counts[id] = if rank < n_single {
            1
        } else {
            rng.random_range(2..=cfg.max_sessions.max(2))
        };
    }

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(k * cfg.total_per_identity());
    let mut next_session = 0u32;
    for (identity, &n_sessions) in session_counts.iter().enumerate() {
        let protos: Vec<Vec<f64>> = ModalityId::ALL
            .iter()
            .map(|m| (0..m.input_dim()).map(|_| std_normal.sample(&mut rng)).collect())
            .collect();
        for (s, count) in samples_per_session(cfg, n_sessions).into_iter().enumerate() {
            let session = next_session + s as u32;
            let offsets: Vec<Vec<f64>> = ModalityId::ALL
                .iter()
                .map(|&m| {
                    let d = cfg.drift_std.get(m);
                    (0..m.input_dim()).map(|_| d * std_normal.sample(&mut rng)).collect()
                })
                .collect();
            for _ in 0..count {
                let mut emb: Vec<Vec<f64>> = Vec::with_capacity(3);
                for m in ModalityId::ALL {
                    let i = m.index();
                    let noise = cfg.noise_std.get(m);
                    let mut v: Vec<f64> = (0..m.input_dim())
                        .map(|j| protos[i][j] + offsets[i][j] + noise * std_normal.sample(&mut rng))
                        .collect();
                    if cfg.unit_norm {
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            v.iter_mut().for_each(|x| *x /= norm);
                        }
                    }
                    v.iter_mut().for_each(|x| *x = round_f32(*x));
                    emb.push(v);
                }
                let voice = emb.pop().unwrap();
                let gesture = emb.pop().unwrap();
                let face = emb.pop().unwrap();
                samples.push(EmbeddingTriplet {
                    face,
                    gesture,
                    voice,
                    identity,
                    session,
                    mask: ModalityMask::ALL,
                });
            }
        }
        next_session += n_sessions as u32;
    }
    Ok(Dataset {
        num_classes: k,
        samples,
    })
}

/// Sample counts per session (in session order) so that the canonical
/// session assignment yields the configured split sizes.
fn samples_per_session(cfg: &SyntheticConfig, n_sessions: usize) -> Vec<usize> {
    let (tr, va, te) = (cfg.train_per_identity, cfg.val_per_identity, cfg.test_per_identity);
    match n_sessions {
        1 => vec![tr + va + te],
        2 => vec![tr + va, te],
        n => {
            let n_train = n - 2;
            let mut v: Vec<usize> = (0..n_train)
                .map(|i| tr / n_train + usize::from(i < tr % n_train))
                .collect();
            v.push(va);
            v.push(te);
            v
        }
    }
}

/// Session and sample assignment of one identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySplit {
    pub identity: usize,
    pub train_sessions: Vec<u32>,
    pub val_sessions: Vec<u32>,
    pub test_sessions: Vec<u32>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-identity split assignment (indices into the source dataset).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub identities: Vec<IdentitySplit>,
}

impl SplitManifest {
    pub fn train(&self) -> Vec<usize> {
        self.identities.iter().flat_map(|i| i.train.iter().copied()).collect()
    }

    pub fn val(&self) -> Vec<usize> {
        self.identities.iter().flat_map(|i| i.val.iter().copied()).collect()
    }

    pub fn test(&self) -> Vec<usize> {
        self.identities.iter().flat_map(|i| i.test.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitOptions {
    /// Share of a single-session identity's samples used for validation.
    pub val_fraction: f64,
    /// Share of a single-session identity's samples used for test.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            val_fraction: 1.0 / 6.0,
            test_fraction: 1.0 / 6.0,
            seed: 0,
        }
    }
}

impl SplitOptions {
    /// Fractions matching a [`SyntheticConfig`]'s per-identity counts.
    pub fn for_config(cfg: &SyntheticConfig) -> Self {
        let total = cfg.total_per_identity() as f64;
        SplitOptions {
            val_fraction: cfg.val_per_identity as f64 / total,
            test_fraction: cfg.test_per_identity as f64 / total,
            seed: cfg.seed,
        }
    }
}

/// Session-aware split:
/// * one session: its samples are shuffled and shared across all three splits;
/// * two sessions: the last is test, the other is split into train and validation;
/// * three or more: last is test, second to last is validation, the rest train.
pub fn build_splits(dataset: &Dataset, opts: &SplitOptions) -> Result<SplitManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_5EED);
    let mut by_id: Vec<BTreeMap<u32, Vec<usize>>> = vec![BTreeMap::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.identity >= dataset.num_classes {
            return Err(Error::Data(format!("unknown identity {}", s.identity)));
        }
        by_id[s.identity].entry(s.session).or_default().push(i);
    }
    let mut identities = Vec::with_capacity(dataset.num_classes);
    for (identity, sessions) in by_id.into_iter().enumerate() {
        if sessions.is_empty() {
            return Err(Error::Data(format!("identity {identity} has no samples")));
        }
        let ids: Vec<u32> = sessions.keys().copied().collect();
        let mut split = IdentitySplit {
            identity,
            train_sessions: vec![],
            val_sessions: vec![],
            test_sessions: vec![],
            train: vec![],
            val: vec![],
            test: vec![],
        };
        match ids.len() {
            1 => {
                let mut idx = sessions[&ids[0]].clone();
                idx.shuffle(&mut rng);
                let n = idx.len();
                let n_test = ((opts.test_fraction * n as f64).round() as usize).min(n);
                let n_val = ((opts.val_fraction * n as f64).round() as usize).min(n - n_test);
                split.test = idx[..n_test].to_vec();
                split.val = idx[n_test..n_test + n_val].to_vec();
                split.train = idx[n_test + n_val..].to_vec();
                split.train_sessions = ids.clone();
                split.val_sessions = ids.clone();
                split.test_sessions = ids;
            }
            2 => {
                let mut idx = sessions[&ids[0]].clone();
                idx.shuffle(&mut rng);
                let share = opts.val_fraction / (1.0 - opts.test_fraction).max(f64::EPSILON);
                let n_val = ((share * idx.len() as f64).round() as usize).min(idx.len());
                split.val = idx[..n_val].to_vec();
                split.train = idx[n_val..].to_vec();
                split.test = sessions[&ids[1]].clone();
                split.train_sessions = vec![ids[0]];
                split.val_sessions = vec![ids[0]];
                split.test_sessions = vec![ids[1]];
            }
            n => {
                for &s in &ids[..n - 2] {
                    split.train.extend(&sessions[&s]);
                }
                split.val = sessions[&ids[n - 2]].clone();
                split.test = sessions[&ids[n - 1]].clone();
                split.train_sessions = ids[..n - 2].to_vec();
                split.val_sessions = vec![ids[n - 2]];
                split.test_sessions = vec![ids[n - 1]];
            }
        }
        identities.push(split);
    }
    Ok(SplitManifest { identities })
}

/// Exhaustive leak scan: no sample index in two splits, and for identities
/// with two or more sessions no test-session sample outside the test split
/// and no test sample from a train session.
pub fn verify_no_test_leak(dataset: &Dataset, manifest: &SplitManifest) -> Result<()> {
    let mut owner = vec![None; dataset.samples.len()];
    for ident in &manifest.identities {
        for (name, list) in [("train", &ident.train), ("val", &ident.val), ("test", &ident.test)] {
            for &i in list {
                let s = dataset
                    .samples
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("manifest index {i} out of range")))?;
                if s.identity != ident.identity {
                    return Err(Error::Data(format!("sample {i} filed under the wrong identity")));
                }
                if let Some(prev) = owner[i].replace(name) {
                    return Err(Error::Data(format!("sample {i} appears in both {prev} and {name}")));
                }
            }
        }
    }
    let sessions = dataset.sessions_by_identity();
    for ident in &manifest.identities {
        if sessions[ident.identity].len() < 2 {
            continue;
        }
        let test: BTreeSet<u32> = ident.test_sessions.iter().copied().collect();
        for &i in ident.train.iter().chain(&ident.val) {
            if test.contains(&dataset.samples[i].session) {
                return Err(Error::Data(format!(
                    "identity {}: sample {i} from a test session used outside test",
                    ident.identity
                )));
            }
        }
        for &i in &ident.test {
            if !test.contains(&dataset.samples[i].session) {
                return Err(Error::Data(format!(
                    "identity {}: test sample {i} from a non-test session",
                    ident.identity
                )));
            }
        }
    }
    Ok(())
}

/// Train, validation and test sets with identity metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub num_classes: usize,
    pub train: Vec<EmbeddingTriplet>,
    pub val: Vec<EmbeddingTriplet>,
    pub test: Vec<EmbeddingTriplet>,
    /// Per identity: recorded in more than one session.
    pub multi_session: Vec<bool>,
}

impl SplitData {
    pub fn from_manifest(dataset: &Dataset, manifest: &SplitManifest) -> Self {
        SplitData {
            num_classes: dataset.num_classes,
            train: dataset.subset(&manifest.train()),
            val: dataset.subset(&manifest.val()),
            test: dataset.subset(&manifest.test()),
            multi_session: dataset.multi_session_flags(),
        }
    }

    /// Generates a synthetic dataset and splits it.
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        let ds = generate(cfg)?;
        let manifest = build_splits(&ds, &SplitOptions::for_config(cfg))?;
        verify_no_test_leak(&ds, &manifest)?;
        Ok(SplitData::from_manifest(&ds, &manifest))
    }
}

// ---------------------------------------------------------------------------
// File format
//
// One binary file per split. Each record is
//   u32 identity, u32 session, then for face, gesture, voice:
//   u32 length followed by `length` f32 values, all little-endian.
// A length of 0 marks a missing modality. A JSON manifest sits alongside.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFileEntry {
    pub file: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub format_version: u32,
    pub dims: PerModality<usize>,
    pub num_identities: usize,
    pub train: SplitFileEntry,
    pub val: SplitFileEntry,
    pub test: SplitFileEntry,
    /// Sessions recorded per identity, across all splits.
    pub sessions_per_identity: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticConfig>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_records(w: &mut impl Write, samples: &[EmbeddingTriplet]) -> std::io::Result<()> {
    for s in samples {
        let id = u32::try_from(s.identity).map_err(|_| std::io::Error::other("identity exceeds u32"))?;
        w.write_all(&id.to_le_bytes())?;
        w.write_all(&s.session.to_le_bytes())?;
        for m in ModalityId::ALL {
            let v = if s.mask.has(m) { s.embedding(m) } else { &[][..] };
            w.write_all(&(v.len() as u32).to_le_bytes())?;
            for x in v {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_split_file(path: &Path, samples: &[EmbeddingTriplet]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_records(&mut w, samples).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads records until end of input. Truncated records and wrong
/// dimensions are errors; identities must be below `num_classes`.
pub fn read_records(r: &mut impl Read, num_classes: usize) -> Result<Vec<EmbeddingTriplet>> {
    let mut out = Vec::new();
    loop {
        let mut head = [0u8; 4];
        match read_full(r, &mut head)? {
            0 => break,
            4 => {}
            _ => return Err(Error::Data(format!("record {}: truncated header", out.len()))),
        }
        let identity = u32::from_le_bytes(head) as usize;
        let n = out.len();
        let session = read_u32(r).map_err(|_| Error::Data(format!("record {n}: truncated header")))?;
        let mut mask = ModalityMask::ALL;
        let mut embs: Vec<Vec<f64>> = Vec::with_capacity(3);
        for m in ModalityId::ALL {
            let len = read_u32(r).map_err(|_| Error::Data(format!("record {n}: truncated {m} length")))? as usize;
            if len == 0 {
                mask.set(m, false);
                embs.push(vec![0.0; m.input_dim()]);
                continue;
            }
            if len != m.input_dim() {
                return Err(Error::Data(format!(
                    "record {n}: {m} dimension {len}, expected {}",
                    m.input_dim()
                )));
            }
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Data(format!("record {n}: truncated {m} values")))?;
            let v = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            embs.push(v);
        }
        let voice = embs.pop().unwrap();
        let gesture = embs.pop().unwrap();
        let face = embs.pop().unwrap();
        let sample = EmbeddingTriplet {
            face,
            gesture,
            voice,
            identity,
            session,
            mask,
        };
        sample
            .validate(num_classes)
            .map_err(|e| Error::Data(format!("record {n}: {e}")))?;
        out.push(sample);
    }
    Ok(out)
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Data(e.to_string())),
        }
    }
    Ok(got)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes `train.bin`, `val.bin`, `test.bin` and `manifest.json` into `dir`.
pub fn write_split_dir(dir: &Path, data: &SplitData, generator: Option<&SyntheticConfig>) -> Result<DataManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sessions: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); data.num_classes];
    for s in data.train.iter().chain(&data.val).chain(&data.test) {
        sessions[s.identity].insert(s.session);
    }
    let entry = |name: &str, samples: &[EmbeddingTriplet]| -> Result<SplitFileEntry> {
        let file = format!("{name}.bin");
        write_split_file(&dir.join(&file), samples)?;
        Ok(SplitFileEntry {
            file,
            count: samples.len(),
        })
    };
    let manifest = DataManifest {
        format_version: DATA_FORMAT_VERSION,
        dims: PerModality {
            face: ModalityId::Face.input_dim(),
            gesture: ModalityId::Gesture.input_dim(),
            voice: ModalityId::Voice.input_dim(),
        },
        num_identities: data.num_classes,
        train: entry("train", &data.train)?,
        val: entry("val", &data.val)?,
        test: entry("test", &data.test)?,
        sessions_per_identity: sessions.iter().map(BTreeSet::len).collect(),
        generator: generator.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<DataManifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DataManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATA_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported data format version {}",
            manifest.format_version
        )));
    }
    for m in ModalityId::ALL {
        if manifest.dims.get(m) != m.input_dim() {
            return Err(Error::Data(format!(
                "manifest declares {m} dimension {}, expected {}",
                manifest.dims.get(m),
                m.input_dim()
            )));
        }
    }
    if manifest.sessions_per_identity.len() != manifest.num_identities {
        return Err(Error::Data("sessions_per_identity length does not match num_identities".into()));
    }
    Ok(manifest)
}

fn read_split_file(path: &Path, num_classes: usize, expected: usize) -> Result<Vec<EmbeddingTriplet>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let samples = read_records(&mut BufReader::new(f), num_classes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if samples.len() != expected {
        return Err(Error::Data(format!(
            "{}: manifest lists {expected} records, file has {}",
            path.display(),
            samples.len()
        )));
    }
    Ok(samples)
}

/// Loads a split directory (or its manifest path) written by [`write_split_dir`]
/// or by any tool producing the same format.
pub fn ingest(path: &Path) -> Result<SplitData> {
    let manifest = read_manifest(path)?;
    let mpath = manifest_path(path);
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let k = manifest.num_identities;
    let train = read_split_file(&dir.join(&manifest.train.file), k, manifest.train.count)?;
    let val = read_split_file(&dir.join(&manifest.val.file), k, manifest.val.count)?;
    let test = read_split_file(&dir.join(&manifest.test.file), k, manifest.test.count)?;
    Ok(SplitData {
        num_classes: k,
        train,
        val,
        test,
        multi_session: manifest.sessions_per_identity.iter().map(|&n| n > 1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_identities: 6,
            train_per_identity: 4,
            val_per_identity: 2,
            test_per_identity: 2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn no_drift_no_noise_gives_identical_samples() {
        let cfg = SyntheticConfig {
            noise_std: PerModality::splat(0.0),
            drift_std: PerModality::splat(0.0),
            ..small(1)
        };
        let ds = generate(&cfg).unwrap();
        for id in 0..cfg.num_identities {
            let of: Vec<_> = ds.samples.iter().filter(|s| s.identity == id).collect();
            assert!(of.windows(2).all(|w| w[0].face == w[1].face && w[0].gesture == w[1].gesture));
        }
    }

    #[test]
    fn drift_without_noise_separates_sessions_only() {
        let cfg = SyntheticConfig {
            noise_std: PerModality::splat(0.0),
            ..small(2)
        };
        let ds = generate(&cfg).unwrap();
        for a in &ds.samples {
            for b in &ds.samples {
                if a.identity != b.identity {
                    continue;
                }
                assert_eq!(a.session == b.session, a.voice == b.voice);
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(&small(9)).unwrap();
        let b = generate(&small(9)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), generate(&small(10)).unwrap().to_bytes());
    }

    #[test]
    fn split_sizes_follow_config() {
        let cfg = SyntheticConfig::default();
        let ds = generate(&cfg).unwrap();
        let m = build_splits(&ds, &SplitOptions::for_config(&cfg)).unwrap();
        for ident in &m.identities {
            assert_eq!(ident.train.len(), 40, "identity {}", ident.identity);
            assert_eq!(ident.val.len(), 10);
            assert_eq!(ident.test.len(), 10);
        }
        let singles = ds.multi_session_flags().iter().filter(|m| !**m).count();
        assert_eq!(singles, 25);
        verify_no_test_leak(&ds, &m).unwrap();
    }

    #[test]
    fn session_rules() {
        let ds = generate(&SyntheticConfig {
            num_identities: 30,
            max_sessions: 4,
            ..small(3)
        })
        .unwrap();
        let m = build_splits(&ds, &SplitOptions::default()).unwrap();
        let sessions = ds.sessions_by_identity();
        for ident in &m.identities {
            match sessions[ident.identity].len() {
                1 => {
                    assert_eq!(ident.train_sessions, ident.test_sessions);
                    assert_eq!(ident.val_sessions, ident.test_sessions);
                }
                2 => {
                    assert_eq!(ident.train_sessions, ident.val_sessions);
                    assert_ne!(ident.train_sessions, ident.test_sessions);
                }
                _ => {
                    let all: BTreeSet<u32> = ident
                        .train_sessions
                        .iter()
                        .chain(&ident.val_sessions)
                        .chain(&ident.test_sessions)
                        .copied()
                        .collect();
                    assert_eq!(all.len(), ident.train_sessions.len() + 2);
                }
            }
        }
    }

    #[test]
    fn leak_scan_catches_planted_leak() {
        let cfg = SyntheticConfig {
            single_session_fraction: 0.0,
            ..small(4)
        };
        let ds = generate(&cfg).unwrap();
        let mut m = build_splits(&ds, &SplitOptions::for_config(&cfg)).unwrap();
        verify_no_test_leak(&ds, &m).unwrap();
        let moved = m.identities[0].test.pop().unwrap();
        m.identities[0].train.push(moved);
        assert!(verify_no_test_leak(&ds, &m).is_err());
    }

    #[test]
    fn identity_without_samples_is_an_error() {
        let mut ds = generate(&small(5)).unwrap();
        ds.samples.retain(|s| s.identity != 2);
        assert!(build_splits(&ds, &SplitOptions::default()).is_err());
    }

    #[test]
    fn invalid_std_is_rejected() {
        let mut cfg = small(6);
        cfg.noise_std.gesture = -1.0;
        assert!(generate(&cfg).is_err());
        cfg.noise_std.gesture = f64::NAN;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn file_round_trip_with_missing_modality() {
        let mut ds = generate(&small(7)).unwrap();
        ds.samples[0].mask.gesture = false;
        ds.samples[0].gesture = vec![0.0; 768];
        let mut buf = Vec::new();
        write_records(&mut buf, &ds.samples).unwrap();
        let back = read_records(&mut buf.as_slice(), ds.num_classes).unwrap();
        assert_eq!(back, ds.samples);
    }

    #[test]
    fn reader_rejects_bad_records() {
        let ds = generate(&small(8)).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &ds.samples[..1]).unwrap();
        // Unknown identity.
        let mut bad = buf.clone();
        bad[..4].copy_from_slice(&99u32.to_le_bytes());
        assert!(read_records(&mut bad.as_slice(), 6).is_err());
        // Wrong face dimension.
        let mut bad = buf.clone();
        bad[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(read_records(&mut bad.as_slice(), 6).is_err());
        // Truncated.
        let bad = &buf[..buf.len() - 5];
        assert!(read_records(&mut &bad[..], 6).is_err());
        assert!(read_records(&mut &buf[..6], 6).is_err());
    }

    #[test]
    fn ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(11);
        let data = SplitData::synthetic(&cfg).unwrap();
        write_split_dir(dir.path(), &data, Some(&cfg)).unwrap();
        let back = ingest(dir.path()).unwrap();
        assert_eq!(back, data);
        let back = ingest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.test.len(), data.test.len());
    }

    #[test]
    fn per_modality_statistics_match_config() {
        let cfg = SyntheticConfig {
            num_identities: 200,
            train_per_identity: 40,
            val_per_identity: 5,
            test_per_identity: 5,
            seed: 12,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        assert!(ds.samples.len() >= 10_000);
        for m in ModalityId::ALL {
            let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
            for s in &ds.samples {
                for &x in s.embedding(m) {
                    n += 1.0;
                    sum += x;
                    sq += x * x;
                }
            }
            let mean = sum / n;
            let std = (sq / n - mean * mean).sqrt();
            let want = (1.0 + cfg.drift_std.get(m).powi(2) + cfg.noise_std.get(m).powi(2)).sqrt();
            assert!((std - want).abs() < 0.05 * want, "{m}: std {std} vs {want}");
            assert!(mean.abs() < 0.05 * want, "{m}: mean {mean}");
        }
    }

    fn centroid_accuracy(data: &SplitData, m: ModalityId) -> (f64, f64) {
        let dim = m.input_dim();
        let mut centroids = vec![vec![0.0; dim]; data.num_classes];
        let mut counts = vec![0usize; data.num_classes];
        for s in &data.train {
            counts[s.identity] += 1;
            for (c, x) in centroids[s.identity].iter_mut().zip(s.embedding(m)) {
                *c += x;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let (mut same, mut same_n, mut cross, mut cross_n) = (0.0, 0.0, 0.0, 0.0);
        for s in &data.test {
            let x = s.embedding(m);
            let best = (0..data.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            let hit = f64::from(u8::from(best == s.identity));
            if data.multi_session[s.identity] {
                cross += hit;
                cross_n += 1.0;
            } else {
                same += hit;
                same_n += 1.0;
            }
        }
        (100.0 * same / same_n, 100.0 * cross / cross_n)
    }

    #[test]
    fn gesture_drift_opens_a_session_gap_for_nearest_centroid() {
        let cfg = SyntheticConfig::default();
        let data = SplitData::synthetic(&cfg).unwrap();
        let (same, cross) = centroid_accuracy(&data, ModalityId::Gesture);
        assert!(same - cross >= 20.0, "gesture same {same:.1} cross {cross:.1}");
        let (same_f, cross_f) = centroid_accuracy(&data, ModalityId::Face);
        assert!(same_f - cross_f < same - cross, "face gap {same_f:.1}/{cross_f:.1}");
    }
}
