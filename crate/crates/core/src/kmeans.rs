//! k-means codebooks: k-means++ seeding, Lloyd iteration (full or mini-batch),
//! nearest-centroid assignment, and centroid lookup.
//!
//! Full-batch training finishes with single-point transfer sweeps (Hartigan)
//! after Lloyd converges, and keeps the best of `n_init` seeded restarts.
//!
//! Training runs in `f64`; the stored codebook is `f32` so that it matches the
//! on-disk `SEFK` layout bit for bit. `KMeansModel::inertia` is always the
//! distortion of the training data against the stored `f32` centroids.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, FeatureMatrix};

pub const MODEL_MAGIC: &[u8; 4] = b"SEFK";
pub const MODEL_VERSION: u32 = 1;
const MODEL_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8;

/// Rows per rayon task in the assignment step.
const ASSIGN_CHUNK: usize = 256;

const N_INIT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KMeansMode {
    Full,
    MiniBatch { batch_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: KMeansMode,
    /// Independent seeded restarts; the lowest-inertia codebook is kept.
    #[serde(default = "default_n_init")]
    pub n_init: usize,
}

fn default_max_iters() -> usize {
    100
}
fn default_rel_tol() -> f64 {
    1e-4
}
fn default_mode() -> KMeansMode {
    KMeansMode::Full
}
fn default_n_init() -> usize {
    N_INIT
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            seed,
            mode: KMeansMode::Full,
            n_init: default_n_init(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("k", "cluster count must be >= 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters", "must be >= 1"));
        }
        if self.n_init == 0 {
            return Err(Error::validation("n_init", "must be >= 1"));
        }
        if self.rel_tol.is_nan() || self.rel_tol < 0.0 {
            return Err(Error::validation("rel_tol", "must be >= 0"));
        }
        if let KMeansMode::MiniBatch { batch_size: 0 } = self.mode {
            return Err(Error::validation("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

impl Default for KMeansParams {
    fn default() -> Self {
        // The codebook size used for real SSL features.
        Self::new(1024, 0)
    }
}

/// A trained codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    centroids: FeatureMatrix,
    inertia: f64,
    trained_on: Vec<String>,
    seed: u64,
}

/// Cluster index per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignments(pub Vec<u32>);

impl Assignments {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl KMeansModel {
    pub fn new(centroids: FeatureMatrix, inertia: f64, trained_on: Vec<String>, seed: u64) -> Result<Self> {
        if !inertia.is_finite() || inertia < 0.0 {
            return Err(Error::validation("inertia", format!("must be finite and >= 0, got {inertia}")));
        }
        Ok(Self {
            centroids,
            inertia,
            trained_on,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn centroids(&self) -> &FeatureMatrix {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        self.centroids.row(k)
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn trained_on(&self) -> &[String] {
        &self.trained_on
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.k();
        let d = self.dim();
        let trailer = serde_json::to_vec(&ModelTrailer {
            trained_on: self.trained_on.clone(),
        })
        .expect("string list serializes");
        let mut out = Vec::with_capacity(MODEL_HEADER_LEN + k * d * 4 + 4 + trailer.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.inertia.to_le_bytes());
        for v in self.centroids.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
        out.extend_from_slice(&trailer);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < MODEL_HEADER_LEN {
            return Err(Error::format(origin, "truncated model header"));
        }
        if &bytes[0..4] != MODEL_MAGIC {
            return Err(Error::format(origin, "bad magic, expected SEFK"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != MODEL_VERSION {
            return Err(Error::format(origin, format!("unsupported model version {version}")));
        }
        let k = u32_at(8) as usize;
        let d = u32_at(12) as usize;
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let inertia = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let body = k * d * 4;
        let trailer_at = MODEL_HEADER_LEN + body;
        if bytes.len() < trailer_at + 4 {
            return Err(Error::format(origin, "truncated centroid block"));
        }
        let data = bytes[MODEL_HEADER_LEN..trailer_at]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let trailer_len = u32_at(trailer_at) as usize;
        let trailer = &bytes[trailer_at + 4..];
        if trailer.len() != trailer_len {
            return Err(Error::format(
                origin,
                format!("trailer length {trailer_len} but {} bytes remain", trailer.len()),
            ));
        }
        let trailer: ModelTrailer =
            serde_json::from_slice(trailer).map_err(|e| Error::format(origin, e.to_string()))?;
        let centroids = FeatureMatrix::new(data, k, d).map_err(|e| Error::format(origin, e.to_string()))?;
        KMeansModel::new(centroids, inertia, trailer.trained_on, seed)
            .map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelTrailer {
    trained_on: Vec<String>,
}

/// One k-means++ draw: the row picked and the distribution it was drawn from.
#[derive(Debug, Clone)]
pub struct SeedingStep {
    pub chosen: usize,
    pub probabilities: Vec<f64>,
}

/// Runs k-means++ seeding and records the sampling distribution at every step.
///
/// Once every row coincides with a chosen centroid the D² weights are all zero;
/// from then on rows are drawn uniformly, so `k` may exceed the number of
/// distinct rows.
pub fn kmeanspp_trace(data: &FeatureMatrix, k: usize, seed: u64) -> Result<Vec<SeedingStep>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kmeanspp_with(data, k, &mut rng, true)
}

/// k-means++ seeding; returns `k` rows of `data`.
pub fn kmeanspp_init(data: &FeatureMatrix, k: usize, seed: u64) -> Result<FeatureMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = kmeanspp_with(data, k, &mut rng, false)?;
    let rows: Vec<&[f32]> = steps.iter().map(|s| data.row(s.chosen)).collect();
    FeatureMatrix::from_rows(&rows)
}

fn kmeanspp_with(
    data: &FeatureMatrix,
    k: usize,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<Vec<SeedingStep>> {
    if k == 0 {
        return Err(Error::validation("k", "cluster count must be >= 1"));
    }
    let n = data.rows();
    let uniform = |n: usize| vec![1.0 / n as f64; n];
    let mut steps = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    steps.push(SeedingStep {
        chosen: first,
        probabilities: if record { uniform(n) } else { Vec::new() },
    });
    let mut nearest: Vec<f64> = (0..n)
        .into_par_iter()
        .with_min_len(ASSIGN_CHUNK)
        .map(|i| squared_distance(data.row(i), data.row(first)))
        .collect();
    while steps.len() < k {
        let total: f64 = nearest.iter().sum();
        let (chosen, probabilities) = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            let chosen = chosen.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap());
            let probs = if record {
                nearest.iter().map(|w| w / total).collect()
            } else {
                Vec::new()
            };
            (chosen, probs)
        } else {
            (rng.gen_range(0..n), if record { uniform(n) } else { Vec::new() })
        };
        steps.push(SeedingStep { chosen, probabilities });
        let c = data.row(chosen);
        nearest
            .par_iter_mut()
            .with_min_len(ASSIGN_CHUNK)
            .enumerate()
            .for_each(|(i, w)| {
                let d = squared_distance(data.row(i), c);
                if d < *w {
                    *w = d;
                }
            });
    }
    Ok(steps)
}

/// Per-iteration record of a fit, used by tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    /// Inertia measured at each assignment step, against the `f64` working centroids.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

pub fn fit(data: &FeatureMatrix, params: &KMeansParams) -> Result<KMeansModel> {
    fit_traced(data, params, Vec::new()).map(|(m, _)| m)
}

/// Trains a codebook and labels it with the speakers it was trained on.
pub fn fit_traced(
    data: &FeatureMatrix,
    params: &KMeansParams,
    trained_on: Vec<String>,
) -> Result<(KMeansModel, FitTrace)> {
    params.validate()?;
    let mut best: Option<(KMeansModel, FitTrace)> = None;
    for restart in 0..params.n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(restart as u64);
        let run = fit_once(data, params, &mut rng, trained_on.clone())?;
        if best.as_ref().is_none_or(|(m, _)| run.0.inertia < m.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

fn fit_once(
    data: &FeatureMatrix,
    params: &KMeansParams,
    rng: &mut ChaCha8Rng,
    trained_on: Vec<String>,
) -> Result<(KMeansModel, FitTrace)> {
    let n = data.rows();
    let d = data.dim();
    let init = kmeanspp_with(data, params.k, rng, false)?;
    let mut centroids: Vec<f64> = init
        .iter()
        .flat_map(|s| data.row(s.chosen).iter().map(|&v| v as f64))
        .collect();

    let trace = match params.mode {
        KMeansMode::MiniBatch { batch_size } if batch_size < n => {
            minibatch_lloyd(data, params, batch_size, rng, &mut centroids)
        }
        _ => {
            let mut trace = full_lloyd(data, params, &mut centroids);
            hartigan_refine(data, params, &mut centroids, &mut trace);
            trace
        }
    };

    let stored: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
    let stored = FeatureMatrix::new(stored, params.k, d)
        .map_err(|e| Error::Invariant(format!("k-means produced an invalid codebook: {e}")))?;
    let mut model = KMeansModel::new(stored, 0.0, trained_on, params.seed)?;
    model.inertia = distortion(&model, data)?;
    Ok((model, trace))
}

fn nearest_f64(row: &[f32], centroids: &[f64], d: usize) -> (u32, f64) {
    let mut best = 0u32;
    let mut best_dist = f64::INFINITY;
    for (k, c) in centroids.chunks_exact(d).enumerate() {
        let dist: f64 = row
            .iter()
            .zip(c)
            .map(|(&x, &y)| {
                let t = x as f64 - y;
                t * t
            })
            .sum();
        if dist < best_dist {
            best_dist = dist;
            best = k as u32;
        }
    }
    (best, best_dist)
}

fn assign_f64(data: &FeatureMatrix, centroids: &[f64]) -> Vec<(u32, f64)> {
    let d = data.dim();
    (0..data.rows())
        .into_par_iter()
        .with_min_len(ASSIGN_CHUNK)
        .map(|i| nearest_f64(data.row(i), centroids, d))
        .collect()
}

fn full_lloyd(data: &FeatureMatrix, params: &KMeansParams, centroids: &mut [f64]) -> FitTrace {
    let d = data.dim();
    let k = params.k;
    let mut trace = FitTrace::default();
    let mut previous: Option<Vec<u32>> = None;
    for _ in 0..params.max_iters {
        let assigned = assign_f64(data, centroids);
        // Sequential sum keeps the reduction order fixed.
        let inertia: f64 = assigned.iter().map(|&(_, dist)| dist).sum();
        let labels: Vec<u32> = assigned.iter().map(|&(z, _)| z).collect();
        trace.iterations += 1;
        let stalled = previous.as_ref() == Some(&labels);
        let converged = match trace.inertia.last() {
            Some(&prev) => prev - inertia <= params.rel_tol * prev,
            None => false,
        };
        trace.inertia.push(inertia);
        if stalled || converged || inertia == 0.0 {
            break;
        }

        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &z) in labels.iter().enumerate() {
            let z = z as usize;
            counts[z] += 1;
            for (s, &v) in sums[z * d..(z + 1) * d].iter_mut().zip(data.row(i)) {
                *s += v as f64;
            }
        }
        let mut spread: Vec<f64> = assigned.iter().map(|&(_, dist)| dist).collect();
        for c in 0..k {
            let target = &mut centroids[c * d..(c + 1) * d];
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                for (t, &s) in target.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *t = s / inv;
                }
            } else {
                // Empty cluster: move it onto the row farthest from its own centroid.
                let mut far = 0usize;
                for (i, &v) in spread.iter().enumerate() {
                    if v > spread[far] {
                        far = i;
                    }
                }
                spread[far] = -1.0;
                for (t, &v) in target.iter_mut().zip(data.row(far)) {
                    *t = v as f64;
                }
                trace.reseeded += 1;
            }
        }
        previous = Some(labels);
    }
    trace
}

/// Single-point transfers (Hartigan): moves a row to another cluster whenever
/// that lowers the total cost, until a full sweep makes no move.
fn hartigan_refine(data: &FeatureMatrix, params: &KMeansParams, centroids: &mut [f64], trace: &mut FitTrace) {
    let d = data.dim();
    let k = params.k;
    let n = data.rows();
    let mut labels: Vec<u32> = assign_f64(data, centroids).iter().map(|&(z, _)| z).collect();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0f64; k * d];
    for (i, &z) in labels.iter().enumerate() {
        let z = z as usize;
        counts[z] += 1;
        for (s, &v) in sums[z * d..(z + 1) * d].iter_mut().zip(data.row(i)) {
            *s += v as f64;
        }
    }
    let mean_of = |sums: &[f64], counts: &[usize], c: usize, out: &mut [f64]| {
        for (o, &s) in out.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
            *o = s / counts[c] as f64;
        }
    };
    for c in 0..k {
        if counts[c] > 0 {
            mean_of(&sums, &counts, c, &mut centroids[c * d..(c + 1) * d]);
        }
    }
    let dist = |row: &[f32], c: &[f64]| -> f64 {
        row.iter()
            .zip(c)
            .map(|(&x, &y)| {
                let t = x as f64 - y;
                t * t
            })
            .sum()
    };
    for _ in 0..params.max_iters {
        let mut moved = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let row = data.row(i);
            let a = *label as usize;
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * dist(row, &centroids[a * d..(a + 1) * d]);
            let mut best = a;
            let mut best_add = f64::INFINITY;
            for b in 0..k {
                if b == a || counts[b] == 0 {
                    continue;
                }
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * dist(row, &centroids[b * d..(b + 1) * d]);
                if add < best_add {
                    best_add = add;
                    best = b;
                }
            }
            // Relative margin keeps rounding noise from cycling rows back and forth.
            if best != a && best_add < remove * (1.0 - 1e-12) {
                for (j, &v) in row.iter().enumerate() {
                    sums[a * d + j] -= v as f64;
                    sums[best * d + j] += v as f64;
                }
                counts[a] -= 1;
                counts[best] += 1;
                *label = best as u32;
                mean_of(&sums, &counts, a, &mut centroids[a * d..(a + 1) * d]);
                mean_of(&sums, &counts, best, &mut centroids[best * d..(best + 1) * d]);
                moved = true;
            }
        }
        if !moved {
            break;
        }
        // Recompute the means exactly so incremental updates do not drift.
        let mut exact = vec![0f64; k * d];
        for (i, &z) in labels.iter().enumerate() {
            for (s, &v) in exact[z as usize * d..(z as usize + 1) * d].iter_mut().zip(data.row(i)) {
                *s += v as f64;
            }
        }
        sums = exact;
        for c in 0..k {
            if counts[c] > 0 {
                mean_of(&sums, &counts, c, &mut centroids[c * d..(c + 1) * d]);
            }
        }
        let inertia: f64 = (0..n).map(|i| dist(data.row(i), &centroids[labels[i] as usize * d..][..d])).sum();
        trace.inertia.push(inertia);
        trace.iterations += 1;
    }
}

fn minibatch_lloyd(
    data: &FeatureMatrix,
    params: &KMeansParams,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    centroids: &mut [f64],
) -> FitTrace {
    let d = data.dim();
    let n = data.rows();
    let mut counts = vec![0u64; params.k];
    let mut trace = FitTrace::default();
    for _ in 0..params.max_iters {
        let mut batch = index::sample(rng, n, batch_size).into_vec();
        batch.sort_unstable();
        let labels: Vec<u32> = batch
            .par_iter()
            .map(|&i| nearest_f64(data.row(i), centroids, d).0)
            .collect();
        for (&i, &z) in batch.iter().zip(&labels) {
            let z = z as usize;
            counts[z] += 1;
            let eta = 1.0 / counts[z] as f64;
            for (c, &v) in centroids[z * d..(z + 1) * d].iter_mut().zip(data.row(i)) {
                *c += eta * (v as f64 - *c);
            }
        }
        let inertia: f64 = assign_f64(data, centroids).iter().map(|&(_, dist)| dist).sum();
        trace.iterations += 1;
        let converged = match trace.inertia.last() {
            Some(&prev) => (prev - inertia).abs() <= params.rel_tol * prev,
            None => false,
        };
        trace.inertia.push(inertia);
        if converged || inertia == 0.0 {
            break;
        }
    }
    trace
}

fn check_dim(model: &KMeansModel, h: &FeatureMatrix) -> Result<()> {
    if model.dim() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: h.dim(),
            context: "features vs. codebook".into(),
        });
    }
    Ok(())
}

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(model: &KMeansModel, frame: &[f32]) -> (u32, f64) {
    let mut best = 0u32;
    let mut best_dist = f64::INFINITY;
    for (k, c) in model.centroids.iter_rows().enumerate() {
        let dist = squared_distance(frame, c);
        if dist < best_dist {
            best_dist = dist;
            best = k as u32;
        }
    }
    (best, best_dist)
}

pub fn assign(model: &KMeansModel, h: &FeatureMatrix) -> Result<Assignments> {
    check_dim(model, h)?;
    let z = (0..h.rows())
        .into_par_iter()
        .with_min_len(ASSIGN_CHUNK)
        .map(|t| nearest_centroid(model, h.row(t)).0)
        .collect();
    Ok(Assignments(z))
}

/// Replaces every index by its centroid row.
pub fn centers(model: &KMeansModel, z: &Assignments) -> Result<FeatureMatrix> {
    if z.is_empty() {
        return Err(Error::validation("assignments", "empty assignment sequence"));
    }
    let k = model.k();
    let mut data = Vec::with_capacity(z.len() * model.dim());
    for (t, &idx) in z.0.iter().enumerate() {
        if idx as usize >= k {
            return Err(Error::validation(
                "assignments",
                format!("index {idx} at frame {t} is out of range for K = {k}"),
            ));
        }
        data.extend_from_slice(model.centroid(idx as usize));
    }
    FeatureMatrix::new(data, z.len(), model.dim())
}

pub fn quantize(model: &KMeansModel, h: &FeatureMatrix) -> Result<FeatureMatrix> {
    centers(model, &assign(model, h)?)
}

/// Sum of squared distances from each frame to its nearest centroid.
pub fn distortion(model: &KMeansModel, h: &FeatureMatrix) -> Result<f64> {
    check_dim(model, h)?;
    let per_frame: Vec<f64> = (0..h.rows())
        .into_par_iter()
        .with_min_len(ASSIGN_CHUNK)
        .map(|t| nearest_centroid(model, h.row(t)).1)
        .collect();
    Ok(per_frame.iter().sum())
}
