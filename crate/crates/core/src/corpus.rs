//! Utterance records, the corpus manifest format, and the synthetic corpus generator.
//!
//! Synthetic frames are a sum of planted components,
//!
//! ```text
//! phone_anchor[label] * phone_scale + speaker_offset[spk] * speaker_scale
//!     + emotion_offset[emo] * emotion_scale + noise
//! ```
//!
//! which makes content, speaker, and emotion recoverable by simple classifiers
//! on the raw features.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANCHORS_FILE: &str = "anchors.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub emotion_label: u32,
    /// Ground-truth phone-like class for every frame.
    pub content_labels: Vec<u32>,
    pub features: FeatureMatrix,
}

impl Utterance {
    pub fn new(
        utt_id: impl Into<String>,
        speaker_id: impl Into<String>,
        emotion_label: u32,
        content_labels: Vec<u32>,
        features: FeatureMatrix,
    ) -> Result<Self> {
        let utt_id = utt_id.into();
        if content_labels.len() != features.rows() {
            return Err(Error::validation(
                "content_labels",
                format!(
                    "utterance {utt_id} has {} labels for {} frames",
                    content_labels.len(),
                    features.rows()
                ),
            ));
        }
        Ok(Self {
            utt_id,
            speaker_id: speaker_id.into(),
            emotion_label,
            content_labels,
            features,
        })
    }

    /// Same record with a different feature matrix (row count must match).
    pub fn with_features(&self, features: FeatureMatrix) -> Result<Self> {
        Utterance::new(
            self.utt_id.clone(),
            self.speaker_id.clone(),
            self.emotion_label,
            self.content_labels.clone(),
            features,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    speakers: Vec<String>,
    dim: usize,
}

impl Corpus {
    /// Validates the roster against the utterances: every roster entry must be
    /// used, every utterance speaker must be on the roster, and utt ids are unique.
    pub fn new(utterances: Vec<Utterance>, speakers: Vec<String>) -> Result<Self> {
        let first = utterances
            .first()
            .ok_or_else(|| Error::validation("utterances", "corpus must not be empty"))?;
        let dim = first.features.dim();

        let roster: HashSet<&str> = speakers.iter().map(String::as_str).collect();
        if roster.len() != speakers.len() {
            return Err(Error::validation("speakers", "roster contains duplicate ids"));
        }
        let mut seen_ids = HashSet::with_capacity(utterances.len());
        let mut used = HashSet::with_capacity(speakers.len());
        for utt in &utterances {
            if utt.features.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: utt.features.dim(),
                    context: format!("utterance {}", utt.utt_id),
                });
            }
            if !seen_ids.insert(utt.utt_id.as_str()) {
                return Err(Error::validation(
                    "utt_id",
                    format!("duplicate utterance id {}", utt.utt_id),
                ));
            }
            if !roster.contains(utt.speaker_id.as_str()) {
                return Err(Error::validation(
                    "speaker_id",
                    format!("utterance {} names unknown speaker {}", utt.utt_id, utt.speaker_id),
                ));
            }
            used.insert(utt.speaker_id.as_str());
        }
        if used.len() != roster.len() {
            let unused: Vec<_> = speakers
                .iter()
                .filter(|s| !used.contains(s.as_str()))
                .take(3)
                .collect();
            return Err(Error::validation(
                "speakers",
                format!("roster lists speakers without utterances, e.g. {unused:?}"),
            ));
        }
        Ok(Self {
            utterances,
            speakers,
            dim,
        })
    }

    /// Roster in order of first appearance.
    pub fn from_utterances(utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = HashSet::new();
        let speakers = utterances
            .iter()
            .filter(|u| seen.insert(u.speaker_id.clone()))
            .map(|u| u.speaker_id.clone())
            .collect();
        Self::new(utterances, speakers)
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance(&self, utt_id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.utt_id == utt_id)
    }

    pub fn utterances_of<'a>(&'a self, speaker_id: &'a str) -> impl Iterator<Item = &'a Utterance> {
        self.utterances.iter().filter(move |u| u.speaker_id == speaker_id)
    }

    /// Sub-corpus holding the given utterance positions, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Corpus> {
        let utts = indices
            .iter()
            .map(|&i| {
                self.utterances.get(i).cloned().ok_or_else(|| {
                    Error::validation("indices", format!("utterance index {i} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::from_utterances(utts)
    }

    /// Content hash over ids, labels, and feature bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for s in &self.speakers {
            h.update(s.as_bytes());
            h.update([0]);
        }
        for u in &self.utterances {
            h.update(u.utt_id.as_bytes());
            h.update([0]);
            h.update(u.speaker_id.as_bytes());
            h.update([0]);
            h.update(u.emotion_label.to_le_bytes());
            for l in &u.content_labels {
                h.update(l.to_le_bytes());
            }
            h.update(u.features.to_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub num_phones: usize,
    pub num_speakers: usize,
    pub num_emotions: usize,
    pub utts_per_speaker: usize,
    /// Inclusive `[min, max]` frame count per utterance.
    pub frames_per_utt: [usize; 2],
    pub phone_scale: f64,
    pub speaker_scale: f64,
    pub emotion_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let min_count = |field: &str, value: usize, min: usize| {
            if value < min {
                Err(Error::validation(field, format!("must be >= {min}, got {value}")))
            } else {
                Ok(())
            }
        };
        min_count("dim", self.dim, 1)?;
        min_count("num_phones", self.num_phones, 2)?;
        min_count("num_speakers", self.num_speakers, 2)?;
        min_count("num_emotions", self.num_emotions, 2)?;
        min_count("utts_per_speaker", self.utts_per_speaker, 1)?;
        let [lo, hi] = self.frames_per_utt;
        if lo < 1 || lo > hi {
            return Err(Error::validation(
                "frames_per_utt",
                format!("range [{lo}, {hi}] must be non-empty with min >= 1"),
            ));
        }
        for (field, value) in [
            ("phone_scale", self.phone_scale),
            ("speaker_scale", self.speaker_scale),
            ("emotion_scale", self.emotion_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::validation(field, format!("must be finite and >= 0, got {value}")));
            }
        }
        Ok(())
    }

    pub fn speaker_id(&self, index: usize) -> String {
        let width = (self.num_speakers.saturating_sub(1)).to_string().len().max(4);
        format!("spk{index:0width$}")
    }
}

/// The planted vectors behind a synthetic corpus. Stored unscaled together with
/// the scales, so that `phone_vector` reproduces exactly what was added to frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub phone_anchors: FeatureMatrix,
    pub speaker_offsets: FeatureMatrix,
    pub emotion_offsets: FeatureMatrix,
    /// Speaker id for each row of `speaker_offsets`.
    pub speakers: Vec<String>,
    pub phone_scale: f64,
    pub speaker_scale: f64,
    pub emotion_scale: f64,
}

impl AnchorSet {
    pub fn num_phones(&self) -> usize {
        self.phone_anchors.rows()
    }

    pub fn num_emotions(&self) -> usize {
        self.emotion_offsets.rows()
    }

    pub fn dim(&self) -> usize {
        self.phone_anchors.dim()
    }

    pub fn phone_vector(&self, phone: usize) -> Vec<f32> {
        scaled(self.phone_anchors.row(phone), self.phone_scale)
    }

    pub fn speaker_vector(&self, speaker_id: &str) -> Option<Vec<f32>> {
        let idx = self.speakers.iter().position(|s| s == speaker_id)?;
        Some(scaled(self.speaker_offsets.row(idx), self.speaker_scale))
    }

    pub fn emotion_vector(&self, emotion: usize) -> Vec<f32> {
        scaled(self.emotion_offsets.row(emotion), self.emotion_scale)
    }

    /// Writes `anchors.json` plus three feature files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let sub = dir.join("anchors");
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        self.phone_anchors.save(&sub.join("phones.sefm"))?;
        self.speaker_offsets.save(&sub.join("speakers.sefm"))?;
        self.emotion_offsets.save(&sub.join("emotions.sefm"))?;
        let index = AnchorIndex {
            dim: self.dim(),
            phone_anchors: "anchors/phones.sefm".into(),
            speaker_offsets: "anchors/speakers.sefm".into(),
            emotion_offsets: "anchors/emotions.sefm".into(),
            speakers: self.speakers.clone(),
            phone_scale: self.phone_scale,
            speaker_scale: self.speaker_scale,
            emotion_scale: self.emotion_scale,
        };
        let path = dir.join(ANCHORS_FILE);
        write_json(&path, &index)?;
        Ok(path)
    }

    pub fn load(index_path: &Path) -> Result<Self> {
        let index: AnchorIndex = read_json(index_path)?;
        let base = index_path.parent().unwrap_or(Path::new("."));
        let load = |rel: &str| -> Result<FeatureMatrix> {
            let m = FeatureMatrix::load(&base.join(rel))?;
            if m.dim() != index.dim {
                return Err(Error::DimensionMismatch {
                    expected: index.dim,
                    actual: m.dim(),
                    context: rel.to_string(),
                });
            }
            Ok(m)
        };
        let anchors = AnchorSet {
            phone_anchors: load(&index.phone_anchors)?,
            speaker_offsets: load(&index.speaker_offsets)?,
            emotion_offsets: load(&index.emotion_offsets)?,
            speakers: index.speakers,
            phone_scale: index.phone_scale,
            speaker_scale: index.speaker_scale,
            emotion_scale: index.emotion_scale,
        };
        if anchors.speakers.len() != anchors.speaker_offsets.rows() {
            return Err(Error::format(index_path, "speaker list does not match offset rows"));
        }
        Ok(anchors)
    }
}

fn scaled(row: &[f32], scale: f64) -> Vec<f32> {
    row.iter().map(|&v| (v as f64 * scale) as f32).collect()
}

#[derive(Serialize, Deserialize)]
struct AnchorIndex {
    dim: usize,
    phone_anchors: String,
    speaker_offsets: String,
    emotion_offsets: String,
    speakers: Vec<String>,
    phone_scale: f64,
    speaker_scale: f64,
    emotion_scale: f64,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> FeatureMatrix {
    let data = (0..rows * dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    FeatureMatrix::new(data, rows, dim).expect("gaussian draws are finite")
}

/// Generates a labelled synthetic corpus. Pure in `spec` (seed included).
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<(Corpus, AnchorSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let phones = gaussian_matrix(&mut rng, spec.num_phones, d);
    let speaker_offsets = gaussian_matrix(&mut rng, spec.num_speakers, d);
    let emotions = gaussian_matrix(&mut rng, spec.num_emotions, d);
    let speakers: Vec<String> = (0..spec.num_speakers).map(|s| spec.speaker_id(s)).collect();

    let [lo, hi] = spec.frames_per_utt;
    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utts_per_speaker);
    let mut frame = vec![0f64; d];
    for (s, speaker_id) in speakers.iter().enumerate() {
        let spk = speaker_offsets.row(s);
        for u in 0..spec.utts_per_speaker {
            let emotion = rng.gen_range(0..spec.num_emotions);
            let frames = rng.gen_range(lo..=hi);
            let emo = emotions.row(emotion);
            let mut labels = Vec::with_capacity(frames);
            let mut data = Vec::with_capacity(frames * d);
            for _ in 0..frames {
                let label = rng.gen_range(0..spec.num_phones);
                let anchor = phones.row(label);
                for j in 0..d {
                    frame[j] = anchor[j] as f64 * spec.phone_scale
                        + spk[j] as f64 * spec.speaker_scale
                        + emo[j] as f64 * spec.emotion_scale;
                }
                if spec.noise_scale > 0.0 {
                    for v in frame.iter_mut() {
                        *v += rng.sample::<f64, _>(StandardNormal) * spec.noise_scale;
                    }
                }
                data.extend(frame.iter().map(|&v| v as f32));
                labels.push(label as u32);
            }
            let features = FeatureMatrix::new(data, frames, d)?;
            utterances.push(Utterance::new(
                format!("{speaker_id}-u{u:03}"),
                speaker_id.clone(),
                emotion as u32,
                labels,
                features,
            )?);
        }
    }
    let corpus = Corpus::new(utterances, speakers.clone())?;
    let anchors = AnchorSet {
        phone_anchors: phones,
        speaker_offsets,
        emotion_offsets: emotions,
        speakers,
        phone_scale: spec.phone_scale,
        speaker_scale: spec.speaker_scale,
        emotion_scale: spec.emotion_scale,
    };
    Ok((corpus, anchors))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    speakers: Vec<String>,
    utterances: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    utt_id: String,
    speaker_id: String,
    emotion: u32,
    content_labels: Vec<u32>,
    feature_file: String,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Invariant(format!("serializing {}: {e}", path.display())))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `manifest.json` and one feature file per utterance into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let feats = dir.join("features");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, utt) in corpus.utterances().iter().enumerate() {
        let rel = format!("features/{i:06}.sefm");
        utt.features.save(&dir.join(&rel))?;
        entries.push(ManifestEntry {
            utt_id: utt.utt_id.clone(),
            speaker_id: utt.speaker_id.clone(),
            emotion: utt.emotion_label,
            content_labels: utt.content_labels.clone(),
            feature_file: rel,
        });
    }
    let manifest = Manifest {
        dim: corpus.dim(),
        speakers: corpus.speakers().to_vec(),
        utterances: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for entry in manifest.utterances {
        let path = base.join(&entry.feature_file);
        let bytes = fs::read(&path).map_err(|e| {
            Error::io(
                &path,
                std::io::Error::new(e.kind(), format!("feature file for utterance {}: {e}", entry.utt_id)),
            )
        })?;
        let (_, dim) = FeatureMatrix::peek_shape(&bytes, &path)?;
        if dim != manifest.dim {
            return Err(Error::DimensionMismatch {
                expected: manifest.dim,
                actual: dim,
                context: format!("feature file of utterance {}", entry.utt_id),
            });
        }
        let features = FeatureMatrix::from_bytes(&bytes, &path)?;
        utterances.push(Utterance::new(
            entry.utt_id,
            entry.speaker_id,
            entry.emotion,
            entry.content_labels,
            features,
        )?);
    }
    Corpus::new(utterances, manifest.speakers)
}

/// Distinct emotion labels present in a corpus.
pub fn emotion_classes(corpus: &Corpus) -> BTreeSet<u32> {
    corpus.utterances().iter().map(|u| u.emotion_label).collect()
}
