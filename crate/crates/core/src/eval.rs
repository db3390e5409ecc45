//! Feature-level evaluation game: a template-based ASV proxy scored by EER, a
//! frame-level content error rate, an emotion-recall proxy, and the full/semi
//! attacker orchestration.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher13;

use crate::corpus::{AnchorSet, Corpus};
use crate::error::{Error, Result};
use crate::matrix::{cosine, FeatureMatrix};
use crate::pool::{anonymize_corpus, KMeansPool, SelectionPolicy};

const SPLIT_DOMAIN: u64 = 0x5350_4c49_5400_0001;

/// Mean frame vector.
pub fn utterance_embedding(h: &FeatureMatrix) -> Vec<f64> {
    let mut acc = vec![0f64; h.dim()];
    for row in h.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = h.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Cosine similarity of two embeddings; 0 when either has zero norm.
pub fn score(template: &[f64], embedding: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&a, &b) in template.iter().zip(embedding) {
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Equal error rate in percent.
///
/// Candidate thresholds are the pooled scores. At threshold `t`, FAR is the share
/// of impostor scores `>= t` and FRR the share of genuine scores `< t`; the EER is
/// `(FAR + FRR) / 2` at the threshold minimizing `|FAR - FRR|`, the lowest such
/// threshold on ties.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::validation("scores", "need at least one genuine and one impostor score"));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::validation("scores", "scores must be finite"));
    }
    let mut g = genuine.to_vec();
    let mut i = impostor.to_vec();
    g.sort_unstable_by(f64::total_cmp);
    i.sort_unstable_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_unstable_by(f64::total_cmp);
    thresholds.dedup();

    let (ng, ni) = (g.len() as f64, i.len() as f64);
    let mut best_gap = f64::INFINITY;
    let mut best = 0.0;
    let (mut gi, mut ii) = (0usize, 0usize);
    for &t in &thresholds {
        while gi < g.len() && g[gi] < t {
            gi += 1;
        }
        while ii < i.len() && i[ii] < t {
            ii += 1;
        }
        let frr = gi as f64 / ng;
        let far = (i.len() - ii) as f64 / ni;
        let gap = (far - frr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = (far + frr) / 2.0;
        }
    }
    Ok(100.0 * best)
}

fn cosine_argmax<'a>(frame: &[f32], candidates: impl Iterator<Item = &'a [f32]>) -> Option<usize> {
    let mut best = None;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, c) in candidates.enumerate() {
        if let Some(sim) = cosine(frame, c) {
            if sim > best_sim {
                best_sim = sim;
                best = Some(i);
            }
        }
    }
    best
}

fn phone_table(anchors: &AnchorSet) -> Vec<Vec<f32>> {
    (0..anchors.num_phones()).map(|p| anchors.phone_vector(p)).collect()
}

/// Percentage of frames whose nearest phone anchor (cosine) differs from the
/// frame's content label. Zero-norm frames count as errors.
pub fn content_error_rate(corpus: &Corpus, anchors: &AnchorSet) -> Result<f64> {
    if corpus.dim() != anchors.dim() {
        return Err(Error::DimensionMismatch {
            expected: anchors.dim(),
            actual: corpus.dim(),
            context: "corpus vs. anchor set".into(),
        });
    }
    let phones = phone_table(anchors);
    let (errors, frames) = corpus
        .utterances()
        .par_iter()
        .map(|u| {
            let errs = u
                .features
                .iter_rows()
                .zip(&u.content_labels)
                .filter(|(row, &label)| {
                    cosine_argmax(row, phones.iter().map(Vec::as_slice)) != Some(label as usize)
                })
                .count();
            (errs, u.features.rows())
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(100.0 * errors as f64 / frames as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UarResult {
    pub uar: f64,
    /// Per-class `(correct, total)` keyed by emotion id.
    pub confusion: BTreeMap<u32, (usize, usize)>,
    pub warnings: Vec<String>,
}

/// Predicted emotion of one utterance: subtract each frame's nearest phone
/// anchor, average the residuals, and pick the closest emotion offset (cosine).
pub fn predict_emotion(h: &FeatureMatrix, phones: &[Vec<f32>], emotions: &[Vec<f32>]) -> Option<usize> {
    let d = h.dim();
    let mut residual = vec![0f64; d];
    for row in h.iter_rows() {
        let p = cosine_argmax(row, phones.iter().map(Vec::as_slice)).unwrap_or(0);
        for ((r, &v), &a) in residual.iter_mut().zip(row).zip(&phones[p]) {
            *r += v as f64 - a as f64;
        }
    }
    let n = h.rows() as f64;
    let residual: Vec<f32> = residual.iter().map(|&r| (r / n) as f32).collect();
    cosine_argmax(&residual, emotions.iter().map(Vec::as_slice))
}

/// Unweighted average recall of the emotion proxy, in percent. Classes of the
/// anchor set that never occur in the corpus are skipped and reported.
pub fn emotion_uar(corpus: &Corpus, anchors: &AnchorSet) -> Result<UarResult> {
    if corpus.dim() != anchors.dim() {
        return Err(Error::DimensionMismatch {
            expected: anchors.dim(),
            actual: corpus.dim(),
            context: "corpus vs. anchor set".into(),
        });
    }
    let phones = phone_table(anchors);
    let emotions: Vec<Vec<f32>> = (0..anchors.num_emotions()).map(|e| anchors.emotion_vector(e)).collect();
    for u in corpus.utterances() {
        if u.emotion_label as usize >= emotions.len() {
            return Err(Error::validation(
                "emotion",
                format!("utterance {} has label {} outside the anchor set", u.utt_id, u.emotion_label),
            ));
        }
    }
    let predictions: Vec<(u32, Option<usize>)> = corpus
        .utterances()
        .par_iter()
        .map(|u| (u.emotion_label, predict_emotion(&u.features, &phones, &emotions)))
        .collect();
    let mut confusion: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (label, pred) in predictions {
        let entry = confusion.entry(label).or_default();
        entry.1 += 1;
        if pred == Some(label as usize) {
            entry.0 += 1;
        }
    }
    let warnings = (0..emotions.len() as u32)
        .filter(|e| !confusion.contains_key(e))
        .map(|e| format!("emotion class {e} absent from corpus; excluded from UAR"))
        .collect();
    let recalls: Vec<f64> = confusion.values().map(|&(c, t)| c as f64 / t as f64).collect();
    let uar = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(UarResult { uar, confusion, warnings })
}

/// Utterance positions of the three evaluation subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub attacker_train: Vec<usize>,
    pub enroll: Vec<usize>,
    pub trial: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seed: u64,
    /// Shares of attacker-train, enrollment, and trial utterances.
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
}

fn default_ratios() -> [f64; 3] {
    [0.5, 0.25, 0.25]
}

impl SplitConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ratios: default_ratios(),
        }
    }
}

fn split_key(seed: u64, utt_id: &str) -> u64 {
    let mut h = SipHasher13::new_with_keys(seed, SPLIT_DOMAIN);
    h.write(utt_id.as_bytes());
    h.finish()
}

/// Deterministic per-speaker split.
///
/// Each speaker's utterances are ordered by a keyed hash of their id and cut at
/// the configured ratios. Speakers with two or more utterances always get at
/// least one enrollment and one trial utterance.
pub fn split_corpus(corpus: &Corpus, config: &SplitConfig) -> Result<Splits> {
    let r = config.ratios;
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || r.iter().sum::<f64>() <= 0.0 {
        return Err(Error::validation("ratios", "split ratios must be non-negative with a positive sum"));
    }
    let total: f64 = r.iter().sum();
    let mut splits = Splits {
        attacker_train: Vec::new(),
        enroll: Vec::new(),
        trial: Vec::new(),
    };
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in corpus.utterances().iter().enumerate() {
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(i);
    }
    for (_, mut idx) in by_speaker {
        idx.sort_by_key(|&i| (split_key(config.seed, &corpus.utterances()[i].utt_id), i));
        let n = idx.len();
        let mut n_enroll = (n as f64 * r[1] / total).round() as usize;
        let mut n_trial = (n as f64 * r[2] / total).round() as usize;
        if n >= 2 {
            n_enroll = n_enroll.max(1);
            n_trial = n_trial.max(1);
        }
        while n_enroll + n_trial > n {
            if n_enroll >= n_trial {
                n_enroll -= 1;
            } else {
                n_trial -= 1;
            }
        }
        let n_train = n - n_enroll - n_trial;
        splits.attacker_train.extend(&idx[..n_train]);
        splits.enroll.extend(&idx[n_train..n_train + n_enroll]);
        splits.trial.extend(&idx[n_train + n_enroll..]);
    }
    for part in [&mut splits.attacker_train, &mut splits.enroll, &mut splits.trial] {
        part.sort_unstable();
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialLabel {
    Genuine,
    Impostor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll_speaker: String,
    pub utt_id: String,
    pub label: TrialLabel,
}

/// Every trial utterance against every enrolled speaker.
pub fn build_trials(enrolled: &[String], trials: &Corpus) -> Result<Vec<Trial>> {
    let mut list = Vec::with_capacity(enrolled.len() * trials.len());
    for u in trials.utterances() {
        for s in enrolled {
            list.push(Trial {
                enroll_speaker: s.clone(),
                utt_id: u.utt_id.clone(),
                label: if *s == u.speaker_id {
                    TrialLabel::Genuine
                } else {
                    TrialLabel::Impostor
                },
            });
        }
    }
    let genuine = list.iter().filter(|t| t.label == TrialLabel::Genuine).count();
    if genuine == 0 || genuine == list.len() {
        return Err(Error::validation(
            "trials",
            "trial list needs at least one genuine and one impostor pair",
        ));
    }
    Ok(list)
}

/// Scoring front end the attacker fits on its (anonymized) training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackendKind {
    /// Subtract the training mean.
    Centered,
    /// Centre, then whiten the within-speaker covariance.
    Wccn,
    /// Centre, whiten within-speaker covariance, keep the `dims` most
    /// speaker-discriminant directions.
    Lda { dims: usize },
}

impl BackendKind {
    pub fn label(&self) -> String {
        match self {
            BackendKind::Centered => "centered".into(),
            BackendKind::Wccn => "wccn".into(),
            BackendKind::Lda { dims } => format!("lda:{dims}"),
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(BackendKind::Centered),
            "wccn" => Ok(BackendKind::Wccn),
            _ => s
                .strip_prefix("lda:")
                .and_then(|d| d.parse().ok())
                .filter(|&d: &usize| d > 0)
                .map(|dims| BackendKind::Lda { dims })
                .ok_or_else(|| Error::validation("backend", format!("expected centered|wccn|lda:N, got {s:?}"))),
        }
    }
}

impl Default for BackendKind {
    fn default() -> Self {
        BackendKind::Lda { dims: 20 }
    }
}

/// Linear map `x -> P (x - mean)` applied to utterance embeddings before cosine scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct AsvBackend {
    pub mean: Vec<f64>,
    /// Row-major `out_dim x dim` projection; `None` means identity.
    pub projection: Option<DMatrix<f64>>,
}

/// Ridge added to the within-speaker covariance, relative to its mean eigenvalue.
const WITHIN_RIDGE: f64 = 1e-3;

impl AsvBackend {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            projection: None,
        }
    }

    pub fn train(corpus: &Corpus, kind: BackendKind) -> Result<Self> {
        let d = corpus.dim();
        let embs: Vec<(&str, DVector<f64>)> = corpus
            .utterances()
            .iter()
            .map(|u| (u.speaker_id.as_str(), DVector::from_vec(utterance_embedding(&u.features))))
            .collect();
        let n = embs.len() as f64;
        let mean = embs.iter().fold(DVector::zeros(d), |acc, (_, e)| acc + e) / n;
        if kind == BackendKind::Centered {
            return Ok(Self {
                mean: mean.iter().copied().collect(),
                projection: None,
            });
        }

        let mut groups: BTreeMap<&str, Vec<&DVector<f64>>> = BTreeMap::new();
        for (s, e) in &embs {
            groups.entry(s).or_default().push(e);
        }
        let mut within = DMatrix::<f64>::zeros(d, d);
        let mut between = DMatrix::<f64>::zeros(d, d);
        for members in groups.values() {
            let mu = members.iter().fold(DVector::zeros(d), |acc, e| acc + *e) / members.len() as f64;
            for e in members {
                let c = *e - &mu;
                within += &c * c.transpose();
            }
            let c = &mu - &mean;
            between += (&c * c.transpose()) * members.len() as f64;
        }
        within /= n;
        between /= n;

        let ridge = WITHIN_RIDGE * (within.trace() + between.trace()) / d as f64 + 1e-12;
        within += DMatrix::identity(d, d) * ridge;
        let eig = SymmetricEigen::new(within);
        let inv_sqrt = DVector::from_iterator(d, eig.eigenvalues.iter().map(|&l| 1.0 / l.max(ridge).sqrt()));
        let whiten = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();

        let projection = match kind {
            BackendKind::Wccn => whiten,
            BackendKind::Lda { dims } => {
                if dims == 0 {
                    return Err(Error::validation("backend.dims", "must be >= 1"));
                }
                let wb = &whiten * between * &whiten;
                let eig = SymmetricEigen::new(wb);
                let mut order: Vec<usize> = (0..d).collect();
                order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
                // At most `speakers - 1` directions carry between-speaker variance.
                let keep = dims.min(d).min(groups.len().saturating_sub(1)).max(1);
                let mut basis = DMatrix::<f64>::zeros(keep, d);
                for (r, &i) in order.iter().take(keep).enumerate() {
                    basis.set_row(r, &eig.eigenvectors.column(i).transpose());
                }
                basis * whiten
            }
            BackendKind::Centered => unreachable!(),
        };
        Ok(Self {
            mean: mean.iter().copied().collect(),
            projection: Some(projection),
        })
    }

    pub fn embed(&self, h: &FeatureMatrix) -> Vec<f64> {
        let mut e = utterance_embedding(h);
        for (v, m) in e.iter_mut().zip(&self.mean) {
            *v -= m;
        }
        match &self.projection {
            None => e,
            Some(p) => (p * DVector::from_vec(e)).iter().copied().collect(),
        }
    }
}

/// Per-speaker mean of backend embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTemplates {
    pub templates: BTreeMap<String, Vec<f64>>,
}

impl SpeakerTemplates {
    pub fn build(enroll: &Corpus, backend: &AsvBackend) -> Self {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for u in enroll.utterances() {
            let e = backend.embed(&u.features);
            let entry = sums
                .entry(u.speaker_id.clone())
                .or_insert_with(|| (vec![0.0; e.len()], 0));
            for (s, v) in entry.0.iter_mut().zip(&e) {
                *s += v;
            }
            entry.1 += 1;
        }
        let templates = sums
            .into_iter()
            .map(|(k, (mut s, n))| {
                s.iter_mut().for_each(|v| *v /= n as f64);
                (k, s)
            })
            .collect();
        Self { templates }
    }

    pub fn speakers(&self) -> Vec<String> {
        self.templates.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// The attacker owns the user's exact pool.
    Full,
    /// The attacker anonymizes with its own pool.
    Semi,
}

/// Scores every trial; returns `(genuine, impostor)` score lists.
pub fn score_trials(
    trials: &[Trial],
    templates: &SpeakerTemplates,
    trial_corpus: &Corpus,
    backend: &AsvBackend,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let embeddings: HashMap<&str, Vec<f64>> = trial_corpus
        .utterances()
        .par_iter()
        .map(|u| (u.utt_id.as_str(), backend.embed(&u.features)))
        .collect();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for t in trials {
        let template = templates.templates.get(&t.enroll_speaker).ok_or_else(|| {
            Error::validation("trials", format!("speaker {} has no enrollment template", t.enroll_speaker))
        })?;
        let emb = embeddings
            .get(t.utt_id.as_str())
            .ok_or_else(|| Error::validation("trials", format!("unknown trial utterance {}", t.utt_id)))?;
        let s = score(template, emb);
        match t.label {
            TrialLabel::Genuine => genuine.push(s),
            TrialLabel::Impostor => impostor.push(s),
        }
    }
    Ok((genuine, impostor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub genuine: usize,
    pub impostor: usize,
    pub trial_utterances: usize,
    pub trial_frames: usize,
    pub enroll_utterances: usize,
    pub attacker_train_utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub strategy: String,
    pub models: usize,
    pub k: usize,
    pub hash: String,
    pub source_corpus_id: String,
}

impl PoolSummary {
    pub fn of(pool: &KMeansPool) -> Self {
        Self {
            strategy: pool.strategy().to_string(),
            models: pool.len(),
            k: pool.k(),
            hash: pool.content_hash(),
            source_corpus_id: pool.source_corpus_id().to_string(),
        }
    }
}

/// Outcome of one attack simulation. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub asv: String,
    pub mode: AttackMode,
    pub eer: f64,
    pub cer: f64,
    pub uar_proxy: f64,
    pub counts: EvalCounts,
    pub user_pool: PoolSummary,
    pub attacker_pool: PoolSummary,
    pub user_selection: SelectionPolicy,
    pub attacker_selection: SelectionPolicy,
    pub split: SplitConfig,
    pub backend: BackendKind,
    pub raw_eer: Option<f64>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Everything `run_attack` needs besides the corpus.
pub struct AttackSetup<'a> {
    pub mode: AttackMode,
    pub user_pool: &'a KMeansPool,
    pub attacker_pool: &'a KMeansPool,
    pub user_selection: SelectionPolicy,
    pub attacker_selection: SelectionPolicy,
    pub split: SplitConfig,
    pub backend: BackendKind,
}

/// Intermediate corpora of one attack, kept for embedding dumps.
pub struct AttackArtifacts {
    pub report: EvalReport,
    pub user_trials: Corpus,
    pub attacker_enroll: Corpus,
    pub attacker_train: Corpus,
}

/// Runs the user-vs-attacker game.
///
/// 1. The user anonymizes the trial utterances with the user pool.
/// 2. The attacker anonymizes its training and enrollment utterances with the
///    attacker pool (the user's pool in full mode) and fits its backend on the
///    anonymized training split.
/// 3. Templates come from the anonymized enrollment; every trial is scored
///    against every enrolled speaker and the EER is computed.
/// 4. CER and UAR are measured on the user-anonymized trials.
pub fn run_attack(corpus: &Corpus, anchors: &AnchorSet, setup: &AttackSetup<'_>) -> Result<AttackArtifacts> {
    if setup.mode == AttackMode::Full && setup.user_pool.content_hash() != setup.attacker_pool.content_hash() {
        return Err(Error::validation(
            "attacker_pool",
            "full-attacker mode requires the attacker to use the user's pool",
        ));
    }
    let splits = split_corpus(corpus, &setup.split)?;
    check_disjoint(&splits)?;
    if splits.enroll.is_empty() || splits.trial.is_empty() || splits.attacker_train.is_empty() {
        return Err(Error::validation(
            "split",
            "attacker-train, enrollment, and trial subsets must all be non-empty",
        ));
    }
    let train = corpus.subset(&splits.attacker_train)?;
    let enroll = corpus.subset(&splits.enroll)?;
    let trial = corpus.subset(&splits.trial)?;

    let user_trials = anonymize_corpus(setup.user_pool, &setup.user_selection, &trial)?;
    let attacker_train = anonymize_corpus(setup.attacker_pool, &setup.attacker_selection, &train)?;
    let attacker_enroll = anonymize_corpus(setup.attacker_pool, &setup.attacker_selection, &enroll)?;

    let backend = AsvBackend::train(&attacker_train, setup.backend)?;
    let templates = SpeakerTemplates::build(&attacker_enroll, &backend);
    let enrolled = templates.speakers();
    for u in user_trials.utterances() {
        if !templates.templates.contains_key(&u.speaker_id) {
            return Err(Error::validation(
                "split",
                format!("trial speaker {} has no enrollment utterances", u.speaker_id),
            ));
        }
    }
    let trials = build_trials(&enrolled, &user_trials)?;
    let (genuine, impostor) = score_trials(&trials, &templates, &user_trials, &backend)?;
    let eer = compute_eer(&genuine, &impostor)?;
    let cer = content_error_rate(&user_trials, anchors)?;
    let uar = emotion_uar(&user_trials, anchors)?;

    let report = EvalReport {
        asv: format!("proxy-ASV: mean-pooled cosine templates, {} backend", setup.backend.label()),
        mode: setup.mode,
        eer,
        cer,
        uar_proxy: uar.uar,
        counts: EvalCounts {
            genuine: genuine.len(),
            impostor: impostor.len(),
            trial_utterances: user_trials.len(),
            trial_frames: user_trials.utterances().iter().map(|u| u.features.rows()).sum(),
            enroll_utterances: attacker_enroll.len(),
            attacker_train_utterances: attacker_train.len(),
        },
        user_pool: PoolSummary::of(setup.user_pool),
        attacker_pool: PoolSummary::of(setup.attacker_pool),
        user_selection: setup.user_selection,
        attacker_selection: setup.attacker_selection,
        split: setup.split,
        backend: setup.backend,
        raw_eer: None,
        warnings: uar.warnings,
        config: None,
    };
    Ok(AttackArtifacts {
        report,
        user_trials,
        attacker_enroll,
        attacker_train,
    })
}

fn check_disjoint(splits: &Splits) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for &i in splits.attacker_train.iter().chain(&splits.enroll).chain(&splits.trial) {
        if !seen.insert(i) {
            return Err(Error::validation("split", format!("utterance {i} appears in two subsets")));
        }
    }
    Ok(())
}

/// EER of the ASV proxy on un-anonymized features, using the same split.
pub fn raw_eer(corpus: &Corpus, split: &SplitConfig, backend: BackendKind) -> Result<f64> {
    let splits = split_corpus(corpus, split)?;
    let train = corpus.subset(&splits.attacker_train)?;
    let enroll = corpus.subset(&splits.enroll)?;
    let trial = corpus.subset(&splits.trial)?;
    let backend = AsvBackend::train(&train, backend)?;
    let templates = SpeakerTemplates::build(&enroll, &backend);
    let trials = build_trials(&templates.speakers(), &trial)?;
    let (g, i) = score_trials(&trials, &templates, &trial, &backend)?;
    compute_eer(&g, &i)
}
