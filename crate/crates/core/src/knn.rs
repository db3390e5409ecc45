//! kNN frame-matching baseline: every source frame becomes the mean of its `k`
//! nearest frames (cosine distance) from a target speaker's frame bank.

use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::matrix::{cosine, FeatureMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TargetBank {
    pub speaker_id: String,
    pub frames: FeatureMatrix,
}

impl TargetBank {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

/// All frames of `speaker_id`, in corpus order.
pub fn build_bank(corpus: &Corpus, speaker_id: &str) -> Result<TargetBank> {
    let parts: Vec<&FeatureMatrix> = corpus.utterances_of(speaker_id).map(|u| &u.features).collect();
    if parts.is_empty() {
        return Err(Error::validation(
            "target_speaker",
            format!("speaker {speaker_id} has no utterances in the corpus"),
        ));
    }
    Ok(TargetBank {
        speaker_id: speaker_id.to_string(),
        frames: FeatureMatrix::concat(parts)?,
    })
}

/// `1 - cos(a, b)`, or `+inf` when either vector has zero norm.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    match cosine(a, b) {
        Some(c) => 1.0 - c,
        None => f64::INFINITY,
    }
}

/// Bank rows nearest to `query`, ordered by (distance, index).
pub fn nearest_rows(query: &[f32], bank: &FeatureMatrix, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = bank
        .iter_rows()
        .enumerate()
        .map(|(i, row)| (cosine_distance(query, row), i))
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by_key);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_key);
    scored.into_iter().map(|(_, i)| i).collect()
}

pub fn knn_anonymize(h: &FeatureMatrix, bank: &TargetBank, k: usize) -> Result<FeatureMatrix> {
    let m = bank.len();
    if k == 0 || k > m {
        return Err(Error::validation("k", format!("must be in 1..={m} for this bank, got {k}")));
    }
    if h.dim() != bank.frames.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.frames.dim(),
            actual: h.dim(),
            context: format!("source frames vs. bank of {}", bank.speaker_id),
        });
    }
    let d = h.dim();
    let rows: Vec<Vec<f32>> = (0..h.rows())
        .into_par_iter()
        .map(|t| {
            let mut picked = nearest_rows(h.row(t), &bank.frames, k);
            // Sum in bank order so the mean does not depend on distance ties.
            picked.sort_unstable();
            let mut acc = vec![0f64; d];
            for i in picked {
                for (a, &v) in acc.iter_mut().zip(bank.frames.row(i)) {
                    *a += v as f64;
                }
            }
            acc.iter().map(|&a| (a / k as f64) as f32).collect()
        })
        .collect();
    FeatureMatrix::from_rows(&rows)
}

/// Applies the baseline to every utterance of `corpus`.
pub fn knn_anonymize_corpus(corpus: &Corpus, bank: &TargetBank, k: usize) -> Result<Corpus> {
    let utts = corpus
        .utterances()
        .iter()
        .map(|u| u.with_features(knn_anonymize(&u.features, bank, k)?))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(utts, corpus.speakers().to_vec())
}
