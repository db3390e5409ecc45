//! Pools of k-means codebooks: speaker partitioning, pool training, keyed random
//! model selection, and pool-level anonymization.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use siphasher::sip::SipHasher13;

use crate::corpus::{hex, read_json, write_json, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansModel, KMeansParams};
use crate::matrix::FeatureMatrix;

pub const POOL_FILE: &str = "pool.json";
pub const POOL_FORMAT_VERSION: u32 = 1;

// Domain separators so the same seed feeds independent streams.
const SELECT_DOMAIN: u64 = 0x5345_4c45_4354_0001;
const MODEL_SEED_DOMAIN: u64 = 0x4d4f_4445_4c53_0001;

/// How the training speakers are split into codebooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// One codebook over every speaker.
    All,
    /// One codebook per group of `L` speakers (`floor(S / L)` codebooks).
    PerGroup(usize),
    /// One codebook per utterance, applied only to that utterance.
    PerUtterance,
}

impl fmt::Display for PartitionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionStrategy::All => write!(f, "all"),
            PartitionStrategy::PerGroup(l) => write!(f, "group:{l}"),
            PartitionStrategy::PerUtterance => write!(f, "utterance"),
        }
    }
}

impl FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(PartitionStrategy::All),
            "utterance" | "resyn" => Ok(PartitionStrategy::PerUtterance),
            _ => {
                let l = s
                    .strip_prefix("group:")
                    .and_then(|l| l.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::validation("strategy", format!("expected all|group:L|utterance, got {s:?}"))
                    })?;
                if l == 0 {
                    return Err(Error::validation("strategy", "group size L must be >= 1"));
                }
                Ok(PartitionStrategy::PerGroup(l))
            }
        }
    }
}

impl Serialize for PartitionStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PartitionStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Utterance,
    Frame,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "utterance" => Ok(Granularity::Utterance),
            "frame" => Ok(Granularity::Frame),
            _ => Err(Error::validation("granularity", format!("expected utterance|frame, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub granularity: Granularity,
    pub seed: u64,
}

/// Splits a roster into training groups.
///
/// Speakers are sorted lexicographically and chunked into groups of `L`; the
/// `S mod L` leftovers join the final group, so the group count is `floor(S / L)`.
/// `PerUtterance` yields one singleton group per speaker; the per-utterance split
/// itself happens in [`train_pool`].
pub fn partition_speakers(speakers: &[String], strategy: PartitionStrategy) -> Result<Vec<Vec<String>>> {
    if speakers.is_empty() {
        return Err(Error::validation("speakers", "roster must not be empty"));
    }
    let mut sorted = speakers.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != speakers.len() {
        return Err(Error::validation("speakers", "roster contains duplicate ids"));
    }
    match strategy {
        PartitionStrategy::All => Ok(vec![sorted]),
        PartitionStrategy::PerUtterance => Ok(sorted.into_iter().map(|s| vec![s]).collect()),
        PartitionStrategy::PerGroup(l) => {
            let s = sorted.len();
            if l == 0 {
                return Err(Error::validation("strategy", "group size L must be >= 1"));
            }
            if l > s {
                return Err(Error::validation(
                    "strategy",
                    format!("group size L = {l} exceeds the {s} available speakers"),
                ));
            }
            let n = s / l;
            let mut groups: Vec<Vec<String>> = Vec::with_capacity(n);
            let mut iter = sorted.into_iter();
            for g in 0..n {
                let take = if g + 1 == n { usize::MAX } else { l };
                groups.push(iter.by_ref().take(take).collect());
            }
            Ok(groups)
        }
    }
}

/// Seed for the `index`-th model of a pool trained with `base` seed.
pub fn derive_model_seed(base: u64, index: usize) -> u64 {
    let mut h = SipHasher13::new_with_keys(base, MODEL_SEED_DOMAIN);
    h.write_u64(index as u64);
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansPool {
    models: Vec<KMeansModel>,
    strategy: PartitionStrategy,
    source_corpus_id: String,
    /// For `PerUtterance` pools: the utterance each model belongs to.
    utt_keys: Vec<String>,
}

impl KMeansPool {
    pub fn new(
        models: Vec<KMeansModel>,
        strategy: PartitionStrategy,
        source_corpus_id: String,
        utt_keys: Vec<String>,
    ) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::validation("models", "pool needs at least one model"))?;
        let (k, d) = (first.k(), first.dim());
        for (i, m) in models.iter().enumerate() {
            if m.k() != k || m.dim() != d {
                return Err(Error::validation(
                    "models",
                    format!("model {i} is {}x{} but model 0 is {k}x{d}", m.k(), m.dim()),
                ));
            }
        }
        match strategy {
            PartitionStrategy::PerUtterance => {
                if utt_keys.len() != models.len() {
                    return Err(Error::validation("utt_keys", "per-utterance pool needs one key per model"));
                }
            }
            _ if !utt_keys.is_empty() => {
                return Err(Error::validation("utt_keys", "only per-utterance pools carry utterance keys"));
            }
            PartitionStrategy::PerGroup(_) => {
                let mut seen = std::collections::HashSet::new();
                for m in &models {
                    for s in m.trained_on() {
                        if !seen.insert(s.as_str()) {
                            return Err(Error::validation(
                                "models",
                                format!("speaker {s} appears in more than one group"),
                            ));
                        }
                    }
                }
            }
            PartitionStrategy::All => {}
        }
        Ok(Self {
            models,
            strategy,
            source_corpus_id,
            utt_keys,
        })
    }

    pub fn models(&self) -> &[KMeansModel] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn strategy(&self) -> PartitionStrategy {
        self.strategy
    }

    pub fn source_corpus_id(&self) -> &str {
        &self.source_corpus_id
    }

    pub fn utt_keys(&self) -> &[String] {
        &self.utt_keys
    }

    pub fn k(&self) -> usize {
        self.models[0].k()
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    /// Hash of the serialized pool; equal pools have equal hashes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.strategy.to_string().as_bytes());
        h.update([0]);
        h.update(self.source_corpus_id.as_bytes());
        h.update([0]);
        for key in &self.utt_keys {
            h.update(key.as_bytes());
            h.update([0]);
        }
        for m in &self.models {
            let bytes = m.to_bytes();
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        hex(&h.finalize())
    }
}

/// Trains one codebook per speaker group (or per utterance for `PerUtterance`).
///
/// Model `i` is fit with seed `derive_model_seed(kparams.seed, i)`, so results do
/// not depend on the order in which groups are trained.
pub fn train_pool(corpus: &Corpus, strategy: PartitionStrategy, kparams: &KMeansParams) -> Result<KMeansPool> {
    kparams.validate()?;
    if corpus.is_empty() {
        return Err(Error::validation("corpus", "cannot train a pool on an empty corpus"));
    }
    let corpus_id = corpus.fingerprint();
    if strategy == PartitionStrategy::PerUtterance {
        let models = corpus
            .utterances()
            .par_iter()
            .enumerate()
            .map(|(i, utt)| {
                let params = KMeansParams {
                    seed: derive_model_seed(kparams.seed, i),
                    ..kparams.clone()
                };
                kmeans::fit_traced(&utt.features, &params, vec![utt.speaker_id.clone()]).map(|(m, _)| m)
            })
            .collect::<Result<Vec<_>>>()?;
        let keys = corpus.utterances().iter().map(|u| u.utt_id.clone()).collect();
        return KMeansPool::new(models, strategy, corpus_id, keys);
    }

    let groups = partition_speakers(corpus.speakers(), strategy)?;
    let mut by_speaker: HashMap<&str, Vec<&FeatureMatrix>> = HashMap::new();
    for utt in corpus.utterances() {
        by_speaker.entry(utt.speaker_id.as_str()).or_default().push(&utt.features);
    }
    let models = groups
        .par_iter()
        .enumerate()
        .map(|(i, group)| {
            let parts: Vec<&FeatureMatrix> = group
                .iter()
                .flat_map(|s| by_speaker.get(s.as_str()).into_iter().flatten().copied())
                .collect();
            if parts.is_empty() {
                return Err(Error::validation(
                    "corpus",
                    format!("group {i} ({}) has no frames", group.join(",")),
                ));
            }
            let data = FeatureMatrix::concat(parts)?;
            let params = KMeansParams {
                seed: derive_model_seed(kparams.seed, i),
                ..kparams.clone()
            };
            kmeans::fit_traced(&data, &params, group.clone()).map(|(m, _)| m)
        })
        .collect::<Result<Vec<_>>>()?;
    KMeansPool::new(models, strategy, corpus_id, Vec::new())
}

fn keyed_index(seed: u64, utt_id: &str, frame: Option<usize>, n: usize) -> usize {
    let mut h = SipHasher13::new_with_keys(seed, SELECT_DOMAIN);
    h.write(utt_id.as_bytes());
    h.write_u8(0xff);
    if let Some(t) = frame {
        h.write_u64(t as u64);
    }
    // Multiply-shift maps the 64-bit hash onto [0, n).
    ((h.finish() as u128 * n as u128) >> 64) as usize
}

/// Picks the pool member used for one utterance (or one frame of it).
///
/// Stateless: the draw is a keyed hash of `(policy.seed, utt_id)`, plus the frame
/// index at frame granularity. A per-utterance pool always returns the model
/// trained on `utt_id` and rejects any other utterance.
pub fn select_model(pool: &KMeansPool, policy: &SelectionPolicy, utt_id: &str, frame_index: usize) -> Result<usize> {
    if pool.strategy == PartitionStrategy::PerUtterance {
        return pool.utt_keys.iter().position(|k| k == utt_id).ok_or_else(|| {
            Error::validation(
                "pool",
                format!("per-utterance pool has no model for utterance {utt_id}"),
            )
        });
    }
    let n = pool.models.len();
    if n == 1 {
        return Ok(0);
    }
    Ok(match policy.granularity {
        Granularity::Utterance => keyed_index(policy.seed, utt_id, None, n),
        Granularity::Frame => keyed_index(policy.seed, utt_id, Some(frame_index), n),
    })
}

/// Replaces the features of `utt` by centroids of the selected pool member(s).
pub fn anonymize_utterance(pool: &KMeansPool, policy: &SelectionPolicy, utt: &Utterance) -> Result<Utterance> {
    let h = &utt.features;
    if h.dim() != pool.dim() {
        return Err(Error::DimensionMismatch {
            expected: pool.dim(),
            actual: h.dim(),
            context: format!("utterance {}", utt.utt_id),
        });
    }
    let per_utterance = policy.granularity == Granularity::Utterance || pool.strategy == PartitionStrategy::PerUtterance;
    let features = if per_utterance {
        let i = select_model(pool, policy, &utt.utt_id, 0)?;
        kmeans::quantize(&pool.models[i], h)?
    } else {
        let mut data = Vec::with_capacity(h.rows() * h.dim());
        for t in 0..h.rows() {
            let i = select_model(pool, policy, &utt.utt_id, t)?;
            let model = &pool.models[i];
            let (z, _) = kmeans::nearest_centroid(model, h.row(t));
            data.extend_from_slice(model.centroid(z as usize));
        }
        FeatureMatrix::new(data, h.rows(), h.dim())?
    };
    utt.with_features(features)
}

pub fn anonymize_corpus(pool: &KMeansPool, policy: &SelectionPolicy, corpus: &Corpus) -> Result<Corpus> {
    let utts = corpus
        .utterances()
        .par_iter()
        .map(|u| anonymize_utterance(pool, policy, u))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(utts, corpus.speakers().to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolIndex {
    format_version: u32,
    strategy: PartitionStrategy,
    n: usize,
    k: usize,
    dim: usize,
    source_corpus_id: String,
    models: Vec<PoolEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolEntry {
    file: String,
    seed: u64,
    trained_on: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    utt_id: Option<String>,
}

/// Writes `pool.json` and one `SEFK` file per model into `dir`.
pub fn save_pool(pool: &KMeansPool, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pool.len());
    for (i, m) in pool.models.iter().enumerate() {
        let file = format!("model_{i:06}.sefk");
        m.save(&dir.join(&file))?;
        entries.push(PoolEntry {
            file,
            seed: m.seed(),
            trained_on: m.trained_on().to_vec(),
            utt_id: pool.utt_keys.get(i).cloned(),
        });
    }
    let index = PoolIndex {
        format_version: POOL_FORMAT_VERSION,
        strategy: pool.strategy,
        n: pool.len(),
        k: pool.k(),
        dim: pool.dim(),
        source_corpus_id: pool.source_corpus_id.clone(),
        models: entries,
    };
    let path = dir.join(POOL_FILE);
    write_json(&path, &index)?;
    Ok(path)
}

/// Loads a pool from a directory or from its `pool.json`.
pub fn load_pool(path: &Path) -> Result<KMeansPool> {
    let index_path = if path.is_dir() { path.join(POOL_FILE) } else { path.to_path_buf() };
    let index: PoolIndex = read_json(&index_path)?;
    if index.format_version != POOL_FORMAT_VERSION {
        return Err(Error::format(
            &index_path,
            format!("unsupported pool version {}", index.format_version),
        ));
    }
    if index.n != index.models.len() {
        return Err(Error::format(&index_path, "model count does not match the entry list"));
    }
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut models = Vec::with_capacity(index.n);
    let mut keys = Vec::new();
    for entry in &index.models {
        let m = KMeansModel::load(&base.join(&entry.file))?;
        if m.k() != index.k || m.dim() != index.dim || m.seed() != entry.seed || m.trained_on() != entry.trained_on {
            return Err(Error::format(&index_path, format!("model {} disagrees with pool.json", entry.file)));
        }
        if let Some(u) = &entry.utt_id {
            keys.push(u.clone());
        }
        models.push(m);
    }
    KMeansPool::new(models, index.strategy, index.source_corpus_id, keys)
        .map_err(|e| Error::format(&index_path, e.to_string()))
}
