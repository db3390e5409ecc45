//! Command-line front end. Every command reads an optional JSON experiment
//! config, applies flag overrides, and embeds the resolved config in what it
//! writes, so a run is reproducible from its outputs alone.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, read_json, write_json, AnchorSet, Corpus, SyntheticSpec, ANCHORS_FILE};
use crate::error::{Error, Result};
use crate::eval::{self, AttackMode, AttackSetup, BackendKind, SplitConfig};
use crate::kmeans::KMeansParams;
use crate::knn;
use crate::matrix::FeatureMatrix;
use crate::pool::{self, Granularity, KMeansPool, PartitionStrategy, SelectionPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Spec(SyntheticSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub strategy: PartitionStrategy,
    pub kmeans: KMeansParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub target_speaker: String,
    pub k: usize,
}

/// The single JSON document every command reads. All sections are optional;
/// a command fails with a validation error when a section it needs is missing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusSource>,
    /// The first `n` roster speakers train the pools; the rest are evaluated.
    /// When absent, pools and evaluation share every speaker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_speakers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<PoolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker: Option<PoolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker_selection: Option<SelectionPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<AttackMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn: Option<KnnConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| match e {
            Error::Format { reason, .. } => Error::validation("config", reason),
            other => other,
        })
    }

    fn require<'a, T>(value: &'a Option<T>, field: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::validation(field, "missing from config and not given as a flag"))
    }

    fn output_dir(&self) -> Result<&Path> {
        Self::require(&self.output, "output").map(PathBuf::as_path)
    }

    fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "mkanon", version, about = "Multi-codebook k-means voice anonymization toolkit")]
pub struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (or report file for evaluate/attack-sim).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (manifest, features, anchors).
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a pool of k-means codebooks.
    TrainPool {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// all | group:L | utterance
        #[arg(long)]
        strategy: Option<PartitionStrategy>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Which pool section of the config to use.
        #[arg(long, default_value = "user")]
        role: Role,
    },
    /// Quantize a corpus with a pool.
    Anonymize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        pool: PathBuf,
        /// utterance | frame
        #[arg(long)]
        granularity: Option<Granularity>,
        #[arg(long)]
        selection_seed: Option<u64>,
    },
    /// kNN frame-matching baseline against a target speaker's frames.
    KnnAnonymize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Corpus holding the target speaker; defaults to --corpus.
        #[arg(long)]
        bank_corpus: Option<PathBuf>,
        #[arg(long)]
        target_speaker: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score pre-trained user and attacker pools on a corpus.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Anchor index; defaults to anchors.json next to the manifest.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        user_pool: PathBuf,
        /// Defaults to the user pool.
        #[arg(long)]
        attacker_pool: Option<PathBuf>,
        #[command(flatten)]
        game: GameFlags,
    },
    /// End-to-end attack simulation: build the corpus, train both pools, evaluate.
    AttackSim {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        game: GameFlags,
        /// Write per-stage utterance embeddings (SEFM) into this directory.
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct GameFlags {
    /// full | semi
    #[arg(long)]
    pub mode: Option<Mode>,
    /// centered | wccn | lda:N
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub granularity: Option<Granularity>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Role {
    User,
    Attacker,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Mode {
    Full,
    Semi,
}

impl From<Mode> for AttackMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => AttackMode::Full,
            Mode::Semi => AttackMode::Semi,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

/// Loads or generates the configured corpus and its anchors (when available).
fn resolve_corpus(cfg: &ExperimentConfig) -> Result<(Corpus, Option<AnchorSet>)> {
    match ExperimentConfig::require(&cfg.corpus, "corpus")? {
        CorpusSource::Spec(spec) => {
            let (c, a) = corpus::generate_corpus(spec)?;
            Ok((c, Some(a)))
        }
        CorpusSource::Path(p) => {
            let c = corpus::load_corpus(p)?;
            let anchors_path = p.parent().unwrap_or(Path::new(".")).join(ANCHORS_FILE);
            let a = if anchors_path.exists() {
                Some(AnchorSet::load(&anchors_path)?)
            } else {
                None
            };
            Ok((c, a))
        }
    }
}

/// Splits the roster into pool-training speakers and evaluation speakers.
pub fn split_pool_speakers(corpus: &Corpus, pool_speakers: Option<usize>) -> Result<(Corpus, Corpus)> {
    let Some(n) = pool_speakers else {
        return Ok((corpus.clone(), corpus.clone()));
    };
    let roster = corpus.speakers();
    if n == 0 || n >= roster.len() {
        return Err(Error::validation(
            "pool_speakers",
            format!("must leave both sides non-empty (1..{}), got {n}", roster.len()),
        ));
    }
    let pool_set: std::collections::HashSet<&str> = roster[..n].iter().map(String::as_str).collect();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, u) in corpus.utterances().iter().enumerate() {
        if pool_set.contains(u.speaker_id.as_str()) {
            train.push(i);
        } else {
            eval.push(i);
        }
    }
    Ok((corpus.subset(&train)?, corpus.subset(&eval)?))
}

fn pool_spec_for(cfg: &ExperimentConfig, role: Role) -> Result<&PoolSpec> {
    match role {
        Role::User => ExperimentConfig::require(&cfg.user, "user"),
        Role::Attacker => ExperimentConfig::require(&cfg.attacker, "attacker"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_gen_corpus(mut cfg: ExperimentConfig, seed: Option<u64>) -> Result<PathBuf> {
    let spec = match &mut cfg.corpus {
        Some(CorpusSource::Spec(spec)) => spec,
        _ => return Err(Error::validation("corpus.spec", "gen-corpus needs a synthetic spec")),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (corpus, anchors) = corpus::generate_corpus(spec)?;
    let out = cfg.output_dir()?.to_path_buf();
    create_dir(&out)?;
    let manifest = corpus::save_corpus(&corpus, &out)?;
    anchors.save(&out)?;
    write_json(&out.join("config.json"), &cfg)?;
    Ok(manifest)
}

pub fn cmd_train_pool(cfg: ExperimentConfig, role: Role) -> Result<PathBuf> {
    let spec = pool_spec_for(&cfg, role)?;
    let (corpus, _) = resolve_corpus(&cfg)?;
    let (train, _) = split_pool_speakers(&corpus, cfg.pool_speakers)?;
    let pool = pool::train_pool(&train, spec.strategy, &spec.kmeans)?;
    let out = cfg.output_dir()?;
    let path = pool::save_pool(&pool, out)?;
    write_json(&out.join("config.json"), &cfg)?;
    Ok(path)
}

pub fn cmd_anonymize(cfg: ExperimentConfig, pool_dir: &Path) -> Result<PathBuf> {
    let policy = *ExperimentConfig::require(&cfg.selection, "selection")?;
    let (corpus, _) = resolve_corpus(&cfg)?;
    let pool = pool::load_pool(pool_dir)?;
    let anon = pool::anonymize_corpus(&pool, &policy, &corpus)?;
    let out = cfg.output_dir()?;
    create_dir(out)?;
    let manifest = corpus::save_corpus(&anon, out)?;
    write_json(&out.join("config.json"), &cfg)?;
    Ok(manifest)
}

pub fn cmd_knn_anonymize(cfg: ExperimentConfig, bank_corpus: Option<&Path>) -> Result<PathBuf> {
    let knn_cfg = ExperimentConfig::require(&cfg.knn, "knn")?;
    let (corpus, _) = resolve_corpus(&cfg)?;
    let bank_source = match bank_corpus {
        Some(p) => corpus::load_corpus(p)?,
        None => corpus.clone(),
    };
    let bank = knn::build_bank(&bank_source, &knn_cfg.target_speaker)?;
    let anon = knn::knn_anonymize_corpus(&corpus, &bank, knn_cfg.k)?;
    let out = cfg.output_dir()?;
    create_dir(out)?;
    let manifest = corpus::save_corpus(&anon, out)?;
    write_json(&out.join("config.json"), &cfg)?;
    Ok(manifest)
}

fn attack_setup<'a>(cfg: &ExperimentConfig, user: &'a KMeansPool, attacker: &'a KMeansPool) -> Result<AttackSetup<'a>> {
    let user_selection = *ExperimentConfig::require(&cfg.selection, "selection")?;
    Ok(AttackSetup {
        mode: *ExperimentConfig::require(&cfg.mode, "mode")?,
        user_pool: user,
        attacker_pool: attacker,
        user_selection,
        attacker_selection: cfg.attacker_selection.unwrap_or(user_selection),
        split: *ExperimentConfig::require(&cfg.split, "split")?,
        backend: cfg.backend.unwrap_or_default(),
    })
}

fn write_report(cfg: &ExperimentConfig, mut report: eval::EvalReport) -> Result<PathBuf> {
    report.config = Some(cfg.to_value());
    let out = cfg.output_dir()?.to_path_buf();
    let path = if out.extension().map(|e| e == "json").unwrap_or(false) {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        out
    } else {
        create_dir(&out)?;
        out.join("report.json")
    };
    write_json(&path, &report)?;
    Ok(path)
}

fn anchors_or_err(anchors: Option<AnchorSet>) -> Result<AnchorSet> {
    anchors.ok_or_else(|| Error::validation("anchors", "no anchor set found for this corpus"))
}

pub fn cmd_evaluate(
    cfg: ExperimentConfig,
    anchors_path: Option<&Path>,
    user_pool: &Path,
    attacker_pool: Option<&Path>,
) -> Result<PathBuf> {
    let (corpus, anchors) = resolve_corpus(&cfg)?;
    let anchors = match anchors_path {
        Some(p) => AnchorSet::load(p)?,
        None => anchors_or_err(anchors)?,
    };
    let (_, eval_corpus) = split_pool_speakers(&corpus, cfg.pool_speakers)?;
    let user = pool::load_pool(user_pool)?;
    let attacker = match attacker_pool {
        Some(p) => pool::load_pool(p)?,
        None => user.clone(),
    };
    let setup = attack_setup(&cfg, &user, &attacker)?;
    let mut report = eval::run_attack(&eval_corpus, &anchors, &setup)?.report;
    report.raw_eer = Some(eval::raw_eer(&eval_corpus, &setup.split, setup.backend)?);
    write_report(&cfg, report)
}

pub fn cmd_attack_sim(cfg: ExperimentConfig, dump: Option<&Path>) -> Result<PathBuf> {
    let (corpus, anchors) = resolve_corpus(&cfg)?;
    let anchors = anchors_or_err(anchors)?;
    let (train, eval_corpus) = split_pool_speakers(&corpus, cfg.pool_speakers)?;
    let mode = *ExperimentConfig::require(&cfg.mode, "mode")?;
    let user_spec = pool_spec_for(&cfg, Role::User)?;
    let user = pool::train_pool(&train, user_spec.strategy, &user_spec.kmeans)?;
    let attacker = match mode {
        AttackMode::Full => {
            if let Some(a) = &cfg.attacker {
                if a != user_spec {
                    return Err(Error::validation(
                        "attacker",
                        "full mode requires the attacker pool spec to equal the user's",
                    ));
                }
            }
            user.clone()
        }
        AttackMode::Semi => {
            let spec = pool_spec_for(&cfg, Role::Attacker)?;
            pool::train_pool(&train, spec.strategy, &spec.kmeans)?
        }
    };
    let setup = attack_setup(&cfg, &user, &attacker)?;
    let artifacts = eval::run_attack(&eval_corpus, &anchors, &setup)?;
    let mut report = artifacts.report;
    report.raw_eer = Some(eval::raw_eer(&eval_corpus, &setup.split, setup.backend)?);
    if let Some(dir) = dump {
        create_dir(dir)?;
        let splits = eval::split_corpus(&eval_corpus, &setup.split)?;
        let raw_trials = eval_corpus.subset(&splits.trial)?;
        for (name, c) in [
            ("raw_trials", &raw_trials),
            ("user_trials", &artifacts.user_trials),
            ("attacker_enroll", &artifacts.attacker_enroll),
            ("attacker_train", &artifacts.attacker_train),
        ] {
            dump_embeddings(c, &dir.join(format!("{name}.sefm")))?;
        }
    }
    write_report(&cfg, report)
}

/// One row per utterance (mean frame), plus a sidecar list of `utt_id speaker_id`.
fn dump_embeddings(corpus: &Corpus, path: &Path) -> Result<()> {
    let rows: Vec<Vec<f32>> = corpus
        .utterances()
        .iter()
        .map(|u| eval::utterance_embedding(&u.features).iter().map(|&v| v as f32).collect())
        .collect();
    FeatureMatrix::from_rows(&rows)?.save(path)?;
    let labels: String = corpus
        .utterances()
        .iter()
        .map(|u| format!("{} {}\n", u.utt_id, u.speaker_id))
        .collect();
    let label_path = path.with_extension("txt");
    fs::write(&label_path, labels).map_err(|e| Error::io(&label_path, e))
}

fn set_corpus_path(cfg: &mut ExperimentConfig, path: Option<PathBuf>) {
    if let Some(p) = path {
        cfg.corpus = Some(CorpusSource::Path(p));
    }
}

fn apply_game_flags(cfg: &mut ExperimentConfig, game: GameFlags) {
    if let Some(m) = game.mode {
        cfg.mode = Some(m.into());
    }
    if let Some(b) = game.backend {
        cfg.backend = Some(b);
    }
    if let Some(g) = game.granularity {
        if let Some(sel) = cfg.selection.as_mut() {
            sel.granularity = g;
        }
        if let Some(sel) = cfg.attacker_selection.as_mut() {
            sel.granularity = g;
        }
    }
}

/// Runs a parsed command line and returns what should be printed on success.
pub fn run(cli: Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::validation("threads", "must be >= 1"));
        }
        // Fails only if a global pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let path = match cli.command {
        Command::GenCorpus { common, seed } => cmd_gen_corpus(load_config(&common)?, seed)?,
        Command::TrainPool {
            common,
            corpus,
            strategy,
            k,
            seed,
            role,
        } => {
            let mut cfg = load_config(&common)?;
            set_corpus_path(&mut cfg, corpus);
            let slot = match role {
                Role::User => &mut cfg.user,
                Role::Attacker => &mut cfg.attacker,
            };
            if slot.is_none() {
                if let (Some(strategy), Some(k), Some(seed)) = (strategy, k, seed) {
                    *slot = Some(PoolSpec {
                        strategy,
                        kmeans: KMeansParams::new(k, seed),
                    });
                }
            }
            if let Some(spec) = slot.as_mut() {
                if let Some(s) = strategy {
                    spec.strategy = s;
                }
                if let Some(k) = k {
                    spec.kmeans.k = k;
                }
                if let Some(seed) = seed {
                    spec.kmeans.seed = seed;
                }
            }
            cmd_train_pool(cfg, role)?
        }
        Command::Anonymize {
            common,
            corpus,
            pool,
            granularity,
            selection_seed,
        } => {
            let mut cfg = load_config(&common)?;
            set_corpus_path(&mut cfg, corpus);
            match (&mut cfg.selection, granularity, selection_seed) {
                (Some(sel), g, s) => {
                    if let Some(g) = g {
                        sel.granularity = g;
                    }
                    if let Some(s) = s {
                        sel.seed = s;
                    }
                }
                (None, g, Some(seed)) => {
                    cfg.selection = Some(SelectionPolicy {
                        granularity: g.unwrap_or(Granularity::Utterance),
                        seed,
                    })
                }
                (None, _, None) => {}
            }
            cmd_anonymize(cfg, &pool)?
        }
        Command::KnnAnonymize {
            common,
            corpus,
            bank_corpus,
            target_speaker,
            k,
        } => {
            let mut cfg = load_config(&common)?;
            set_corpus_path(&mut cfg, corpus);
            match (&mut cfg.knn, target_speaker, k) {
                (Some(knn), t, k) => {
                    if let Some(t) = t {
                        knn.target_speaker = t;
                    }
                    if let Some(k) = k {
                        knn.k = k;
                    }
                }
                (None, Some(target_speaker), Some(k)) => cfg.knn = Some(KnnConfig { target_speaker, k }),
                (None, _, _) => {}
            }
            cmd_knn_anonymize(cfg, bank_corpus.as_deref())?
        }
        Command::Evaluate {
            common,
            corpus,
            anchors,
            user_pool,
            attacker_pool,
            game,
        } => {
            let mut cfg = load_config(&common)?;
            set_corpus_path(&mut cfg, corpus);
            apply_game_flags(&mut cfg, game);
            cmd_evaluate(cfg, anchors.as_deref(), &user_pool, attacker_pool.as_deref())?
        }
        Command::AttackSim {
            common,
            game,
            dump_embeddings,
        } => {
            let mut cfg = load_config(&common)?;
            apply_game_flags(&mut cfg, game);
            cmd_attack_sim(cfg, dump_embeddings.as_deref())?
        }
    };
    Ok(path.display().to_string())
}
