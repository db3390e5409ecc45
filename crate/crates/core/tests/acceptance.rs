//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{brute_force_kmeans, eer_oracle, gaussian_matrix, knn_oracle, rows_f64};
use mkanon::eval::{compute_eer, raw_eer, run_attack, AttackMode, AttackSetup, BackendKind, SplitConfig};
use mkanon::kmeans::fit_traced;
use mkanon::knn::{knn_anonymize, TargetBank};
use mkanon::pool::{load_pool, partition_speakers, save_pool, train_pool, Granularity, PartitionStrategy, SelectionPolicy};
use mkanon::{fit, generate_corpus, load_corpus, quantize, save_corpus, Corpus, KMeansModel, KMeansParams, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed <= limit
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cases = [(1172, 20, 58), (1172, 10, 117), (1172, 1, 1172), (5994, 20, 299), (5994, 10, 599), (5994, 1, 5994)];
    let mut wrong = Vec::new();
    for (s, l, want) in cases {
        let roster: Vec<String> = (0..s).map(|i| format!("id{i:05}")).collect();
        let got = partition_speakers(&roster, PartitionStrategy::PerGroup(l)).map(|g| g.len()).unwrap_or(0);
        if got != want {
            wrong.push(format!("S={s} L={l}: {got} != {want}"));
        }
    }
    let t = start.elapsed();
    outcome(wrong.is_empty() && within(t, Duration::from_secs(1)), format!("6/6 pool sizes exact={} in {t:.2?} {wrong:?}", wrong.is_empty()))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (mut hits, mut below) = (0, 0);
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let n = rng.gen_range(4..=12);
        let k = rng.gen_range(1..=3);
        let d = rng.gen_range(1..=3);
        let data = gaussian_matrix(n, d, 5000 + i);
        let opt = brute_force_kmeans(&rows_f64(&data), k);
        let got = fit(&data, &KMeansParams::new(k, i)).unwrap().inertia();
        if got < opt * (1.0 - 1e-9) {
            below += 1;
        }
        if (got - opt).abs() <= 1e-9 * opt {
            hits += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        hits >= 95 && below == 0 && within(t, Duration::from_secs(30)),
        format!("{hits}/100 at the exhaustive optimum (need 95), {below} below it, {t:.2?}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for inst in 0..1000 {
        let ng = rng.gen_range(1..60);
        let ni = rng.gen_range(1..60);
        let (g, i): (Vec<f64>, Vec<f64>) = if inst % 2 == 0 {
            let shift = rng.gen_range(0.0..3.0);
            (
                (0..ng).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect(),
                (0..ni).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            )
        } else {
            (
                (0..ng).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect(),
                (0..ni).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect(),
            )
        };
        worst = worst.max((compute_eer(&g, &i).unwrap() - eer_oracle(&g, &i)).abs());
    }
    let separated = compute_eer(&[1.0; 20], &[0.0; 30]).unwrap();
    let multiset = [0.2, 0.9, 0.4, 0.4, 0.7, 0.1];
    let identical = compute_eer(&multiset, &[0.4, 0.1, 0.7, 0.9, 0.2, 0.4]).unwrap();
    let t = start.elapsed();
    outcome(
        worst <= 1e-9 && separated == 0.0 && identical == 50.0 && within(t, Duration::from_secs(10)),
        format!("max |eer - oracle| = {worst:.1e} over 1000 sets, separated {separated}%, identical {identical}%, {t:.2?}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut idem, mut member, mut mono) = (0, 0, 0);
    let instances = 600;
    for inst in 0..instances {
        let n = rng.gen_range(1..80);
        let d = rng.gen_range(1..6);
        let k = rng.gen_range(1..10);
        let data = gaussian_matrix(n, d, 40_000 + inst);
        let mut params = KMeansParams::new(k, inst);
        params.rel_tol = if inst % 2 == 0 { 0.0 } else { 1e-4 };
        let (model, trace) = fit_traced(&data, &params, Vec::new()).unwrap();
        mono += trace.inertia.windows(2).filter(|w| w[1] > w[0]).count();
        let probe = gaussian_matrix(rng.gen_range(1..40), d, 90_000 + inst);
        for h in [&data, &probe] {
            let q = quantize(&model, h).unwrap();
            if quantize(&model, &q).unwrap() != q {
                idem += 1;
            }
            member += q.iter_rows().filter(|r| !model.centroids().iter_rows().any(|c| c == *r)).count();
        }
    }
    outcome(
        idem + member + mono == 0,
        format!("{instances} instances: {idem} idempotence, {member} membership, {mono} inertia-increase violations"),
    )
}

fn game_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        dim: 64,
        num_phones: 30,
        num_speakers: 60,
        num_emotions: 4,
        utts_per_speaker: 16,
        frames_per_utt: [40, 80],
        phone_scale: 1.0,
        speaker_scale: 2.0,
        emotion_scale: 0.3,
        noise_scale: 0.5,
        seed,
    }
}

/// Per-seed measurements shared by the defense and attack criteria.
struct GameSeed {
    raw_eer: f64,
    cer_all: f64,
    cer_g2: f64,
    full_eer_g2: f64,
    semi_eer_all: f64,
    semi_eer_g1: f64,
}

fn play(seed: u64) -> GameSeed {
    const POOL_SPEAKERS: usize = 40;
    let (full, anchors) = generate_corpus(&game_spec(seed)).unwrap();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    let pool_set = &full.speakers()[..POOL_SPEAKERS];
    for (i, u) in full.utterances().iter().enumerate() {
        if pool_set.contains(&u.speaker_id) {
            train.push(i);
        } else {
            eval.push(i);
        }
    }
    let pool_corpus = full.subset(&train).unwrap();
    let corpus = full.subset(&eval).unwrap();
    let k = |s| KMeansParams::new(32, s);
    let user_all = train_pool(&pool_corpus, PartitionStrategy::All, &k(seed * 10 + 1)).unwrap();
    let user_g2 = train_pool(&pool_corpus, PartitionStrategy::PerGroup(2), &k(seed * 10 + 2)).unwrap();
    let att_all = train_pool(&pool_corpus, PartitionStrategy::All, &k(seed * 10 + 3)).unwrap();
    let att_g1 = train_pool(&pool_corpus, PartitionStrategy::PerGroup(1), &k(seed * 10 + 4)).unwrap();
    let split = SplitConfig::new(seed + 100);
    let backend = BackendKind::default();
    let attack = |mode, user, attacker| {
        let setup = AttackSetup {
            mode,
            user_pool: user,
            attacker_pool: attacker,
            user_selection: SelectionPolicy { granularity: Granularity::Utterance, seed: 5 },
            attacker_selection: SelectionPolicy { granularity: Granularity::Utterance, seed: 6 },
            split,
            backend,
        };
        run_attack(&corpus, &anchors, &setup).unwrap().report
    };
    let full_all = attack(AttackMode::Full, &user_all, &user_all);
    let full_g2 = attack(AttackMode::Full, &user_g2, &user_g2);
    let semi_all = attack(AttackMode::Semi, &user_g2, &att_all);
    let semi_g1 = attack(AttackMode::Semi, &user_g2, &att_g1);
    GameSeed {
        raw_eer: raw_eer(&corpus, &split, backend).unwrap(),
        cer_all: full_all.cer,
        cer_g2: full_g2.cer,
        full_eer_g2: full_g2.eer,
        semi_eer_all: semi_all.eer,
        semi_eer_g1: semi_g1.eer,
    }
}

fn criteria_5_and_6() -> (Outcome, Outcome) {
    let start = Instant::now();
    let seeds: Vec<GameSeed> = (0..5).map(play).collect();
    let t = start.elapsed();
    let mean = |f: fn(&GameSeed) -> f64| seeds.iter().map(f).sum::<f64>() / seeds.len() as f64;
    let (raw, cer_all, cer_g2) = (mean(|s| s.raw_eer), mean(|s| s.cer_all), mean(|s| s.cer_g2));
    let full = mean(|s| s.full_eer_g2);
    let (semi_all, semi_g1) = (mean(|s| s.semi_eer_all), mean(|s| s.semi_eer_g1));
    let budget = Duration::from_secs(300);
    let five = outcome(
        cer_g2 <= cer_all && full - raw >= 15.0 && within(t, budget),
        format!(
            "mean CER group:2 {cer_g2:.2}% <= all {cer_all:.2}%; full-attacker EER (group:2) {full:.2}% vs raw {raw:.2}% (+{:.2}, need 15); {t:.1?} for 5 seeds",
            full - raw
        ),
    );
    let six = outcome(
        semi_all - semi_g1 >= 5.0 && within(t, budget),
        format!(
            "mean semi-attacker EER: attacker group:1 {semi_g1:.2}% vs attacker all {semi_all:.2}% (gap {:.2}, need 5); shared run {t:.1?}",
            semi_all - semi_g1
        ),
    );
    (five, six)
}

fn criterion_7() -> Outcome {
    let h = gaussian_matrix(30, 8, 70);
    let self_bank = TargetBank { speaker_id: "self".into(), frames: h.clone() };
    let identity = knn_anonymize(&h, &self_bank, 1).unwrap() == h;

    let bank = gaussian_matrix(30, 8, 71);
    let target = TargetBank { speaker_id: "t".into(), frames: bank.clone() };
    let brows = rows_f64(&bank);
    let mean: Vec<f64> = (0..8).map(|j| brows.iter().map(|r| r[j]).sum::<f64>() / 30.0).collect();
    let all = knn_anonymize(&h, &target, 30).unwrap();
    let mean_err = all
        .iter_rows()
        .flat_map(|r| r.iter().zip(&mean).map(|(&a, &b)| (a as f64 - b).abs()))
        .fold(0.0, f64::max);

    let src = gaussian_matrix(20, 8, 72);
    let out = knn_anonymize(&src, &target, 4).unwrap();
    let brute_err = rows_f64(&src)
        .iter()
        .enumerate()
        .flat_map(|(t, q)| {
            let want = knn_oracle(q, &brows, 4);
            out.row(t).iter().zip(want).map(|(&a, b)| (a as f64 - b).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    outcome(
        identity && mean_err <= 1e-6 && brute_err <= 1e-6,
        format!("k=1 self identity {identity}, k=M max error {mean_err:.1e}, 20x30 k=4 max error vs brute force {brute_err:.1e}"),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec = json!({
        "dim": 8, "num_phones": 6, "num_speakers": 10, "num_emotions": 3, "utts_per_speaker": 4,
        "frames_per_utt": [10, 20], "phone_scale": 1.0, "speaker_scale": 2.0, "emotion_scale": 0.3,
        "noise_scale": 0.5, "seed": 8
    });
    let corpus_dir = d.join("corpus");
    let manifest = corpus_dir.join("manifest.json");
    let m = manifest.to_str().unwrap();
    let config = json!({
        "corpus": {"path": m},
        "pool_speakers": 5,
        "user": {"strategy": "group:2", "kmeans": {"k": 6, "seed": 1}},
        "attacker": {"strategy": "all", "kmeans": {"k": 6, "seed": 2}},
        "selection": {"granularity": "frame", "seed": 3},
        "split": {"seed": 4},
        "mode": "semi",
        "knn": {"target_speaker": "spk0002", "k": 3}
    });
    fs::write(d.join("gen.json"), json!({"corpus": {"spec": spec}}).to_string()).unwrap();
    fs::write(d.join("cfg.json"), config.to_string()).unwrap();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let steps: Vec<(String, Vec<String>)> = vec![
        ("corpus".into(), vec!["gen-corpus".into(), "--config".into(), p("gen.json"), "--out".into(), p("corpus")]),
        ("pool".into(), vec!["train-pool".into(), "--config".into(), p("cfg.json"), "--out".into(), p("pool")]),
        ("anon".into(), vec!["anonymize".into(), "--config".into(), p("cfg.json"), "--pool".into(), p("pool"), "--out".into(), p("anon")]),
        ("knn".into(), vec!["knn-anonymize".into(), "--config".into(), p("cfg.json"), "--out".into(), p("knn")]),
        ("eval".into(), vec!["evaluate".into(), "--config".into(), p("cfg.json"), "--user-pool".into(), p("pool"), "--out".into(), p("eval")]),
        ("sim".into(), vec!["attack-sim".into(), "--config".into(), p("cfg.json"), "--out".into(), p("sim")]),
    ];
    let mut mismatched = Vec::new();
    let mut failed = Vec::new();
    for (out, args) in &steps {
        let mut snapshots = Vec::new();
        for threads in ["1", "1", "4"] {
            let _ = fs::remove_dir_all(d.join(out));
            let status = Command::new(env!("CARGO_BIN_EXE_mkanon")).arg("--threads").arg(threads).args(args).output().unwrap();
            if !status.status.success() {
                failed.push(format!("{out}: {}", String::from_utf8_lossy(&status.stderr).trim()));
            }
            snapshots.push(tree(&d.join(out)));
        }
        if snapshots.iter().any(|s| s != &snapshots[0]) || snapshots[0].is_empty() {
            mismatched.push(out.clone());
        }
    }

    let corpus = load_corpus(&manifest).unwrap();
    let again = tempfile::tempdir().unwrap();
    save_corpus(&corpus, again.path()).unwrap();
    let mut original = tree(&corpus_dir);
    original.retain(|k, _| k == "manifest.json" || k.starts_with("features"));
    let corpus_ok = tree(again.path()) == original;

    let pool = load_pool(&d.join("pool")).unwrap();
    let pool_again = tempfile::tempdir().unwrap();
    save_pool(&pool, pool_again.path()).unwrap();
    let mut pool_files = tree(&d.join("pool"));
    pool_files.remove("config.json");
    let pool_ok = tree(pool_again.path()) == pool_files;
    let model_ok = pool
        .models()
        .iter()
        .all(|m| KMeansModel::from_bytes(&m.to_bytes(), Path::new("mem")).map(|b| b.to_bytes() == m.to_bytes()).unwrap_or(false));

    let regenerated: Corpus = generate_corpus(&serde_json::from_value(spec).unwrap()).unwrap().0;
    let gen_ok = regenerated == corpus;
    outcome(
        mismatched.is_empty() && failed.is_empty() && corpus_ok && pool_ok && model_ok && gen_ok,
        format!(
            "{} commands x (rerun, --threads 4): differing {mismatched:?}, failed {failed:?}; round-trips corpus {corpus_ok} pool {pool_ok} model {model_ok}; regenerate {gen_ok}",
            steps.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = vec![(1, criterion_1()), (2, criterion_2()), (3, criterion_3()), (4, criterion_4())];
    let (five, six) = criteria_5_and_6();
    results.push((5, five));
    results.push((6, six));
    results.push((7, criterion_7()));
    results.push((8, criterion_8()));
    let mut failures = 0;
    for (n, o) in &results {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failures, results.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
