//! Zero-shot action recognition.
//!
//! A video is embedded as `α·VE(v) + β·SE(o(v))`, where `o(v)` is the mean of
//! its object-description vectors, and assigned to the class whose prototype
//! sentence embedding has the highest cosine similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    segment_rows, write_fvec, ClassPrototypeEntry, Dataset, DatasetManifest, SegmentAnnotation,
    VideoEntry,
};
use crate::embedder::{center_crop, sem_forward, vem_forward, ModelParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::netmath::Mask;
use crate::seed::{rng_for, STREAM_SPLITS, STREAM_SYNTH};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            alpha: 0.8,
            beta: 0.2,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite())
        {
            return Err(Error::Config(
                "alpha and beta must be finite and non-negative".into(),
            ));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub class_name: String,
    pub embedding: Vec<f32>,
}

/// Embeds every class prototype sentence of the dataset.
pub fn class_prototypes(ds: &Dataset, p: &ModelParams<f32>) -> Result<Vec<ClassPrototype>> {
    ds.prototypes()
        .iter()
        .map(|c| {
            Ok(ClassPrototype {
                class_name: c.class_name.clone(),
                embedding: sem_forward(ds.sentence(c.prototype_sentence_id), p)?.0,
            })
        })
        .collect()
}

/// Fused video embedding. `objects` is the mean object-description vector,
/// if the video has one. Without it and with `β > 0`, strict mode fails and
/// otherwise the visual term is used alone.
pub fn vid_embedding(
    stack: &Matrix<f32>,
    objects: Option<&[f32]>,
    w: &FusionWeights,
    p: &ModelParams<f32>,
    strict: bool,
) -> Result<Vec<f32>> {
    w.validate()?;
    let mut out = vec![0.0f32; p.arch.d_emb];
    if w.alpha > 0.0 {
        let (a, b) = center_crop(stack.rows(), p.arch.max_rows);
        let crop = stack.slice_rows(a, b);
        let ve = vem_forward(&crop, p, &Mask::all_valid(crop.rows()))?;
        for (o, v) in out.iter_mut().zip(ve.as_slice()) {
            *o += (w.alpha * *v as f64) as f32;
        }
    }
    if w.beta > 0.0 {
        match objects {
            Some(o) => {
                let se = sem_forward(o, p)?;
                for (out, v) in out.iter_mut().zip(se.as_slice()) {
                    *out += (w.beta * *v as f64) as f32;
                }
            }
            None if strict => {
                return Err(Error::Invalid(
                    "video has no object sentences and beta > 0".into(),
                ));
            }
            None => log::warn!("video without object sentences, using the visual embedding alone"),
        }
    }
    Ok(out)
}

fn cos64(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        d += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    (na > 0.0 && nb > 0.0).then(|| d / (na.sqrt() * nb.sqrt()))
}

/// Index of the nearest prototype by cosine, ties going to the
/// lexicographically smallest class name. `None` is an abstention: the
/// embedding has zero norm, or every prototype does.
pub fn classify(embedding: &[f32], prototypes: &[&ClassPrototype]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, proto) in prototypes.iter().enumerate() {
        let Some(c) = cos64(embedding, &proto.embedding) else {
            continue;
        };
        best = match best {
            Some((bc, bi))
                if bc > c || (bc == c && prototypes[bi].class_name <= proto.class_name) =>
            {
                Some((bc, bi))
            }
            _ => Some((c, i)),
        };
    }
    best.map(|(_, i)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub k: usize,
    pub seed: u64,
    /// One sorted class subset per run.
    pub runs: Vec<Vec<String>>,
}

/// `runs` subsets of `k` classes, each drawn uniformly without replacement.
/// Using every class forces a single run.
pub fn make_splits(class_names: &[String], k: usize, runs: usize, seed: u64) -> Result<SplitSpec> {
    let mut names: Vec<String> = class_names.to_vec();
    names.sort();
    names.dedup();
    if k == 0 || k > names.len() {
        return Err(Error::Config(format!(
            "k = {k} with {} classes",
            names.len()
        )));
    }
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    let runs = if k == names.len() { 1 } else { runs };
    let subsets = (0..runs)
        .map(|r| {
            let mut rng = rng_for(seed, &[STREAM_SPLITS, r as u64]);
            let mut idx = rand::seq::index::sample(&mut rng, names.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| names[i].clone()).collect()
        })
        .collect();
    Ok(SplitSpec {
        k,
        seed,
        runs: subsets,
    })
}

/// A labelled video, already embedded.
#[derive(Clone, Debug)]
pub struct EvalVideo {
    pub video_id: String,
    pub class_name: String,
    pub embedding: Vec<f32>,
}

/// Mean of the object-description vectors over all segments of a video.
pub fn object_vector(ds: &Dataset, video: &VideoEntry) -> Option<Vec<f32>> {
    let ids: BTreeSet<usize> = video
        .segments
        .iter()
        .flat_map(|s| s.object_sentence_ids.iter().copied())
        .collect();
    if ids.is_empty() {
        return None;
    }
    let mut mean = vec![0.0f64; ds.sentences.cols()];
    for &id in &ids {
        for (m, &v) in mean.iter_mut().zip(ds.sentence(id)) {
            *m += v as f64;
        }
    }
    Some(
        mean.into_iter()
            .map(|m| (m / ids.len() as f64) as f32)
            .collect(),
    )
}

/// Embeds every video that carries a class label.
pub fn embed_videos(
    ds: &Dataset,
    w: &FusionWeights,
    p: &ModelParams<f32>,
    strict: bool,
) -> Result<Vec<EvalVideo>> {
    ds.videos()
        .par_iter()
        .zip(&ds.features)
        .filter_map(|(v, f)| v.class_name.as_ref().map(|c| (v, f, c)))
        .map(|(v, f, c)| {
            let objects = object_vector(ds, v);
            let embedding = vid_embedding(f, objects.as_deref(), w, p, strict)
                .map_err(|e| Error::Invalid(format!("video {}: {e}", v.video_id)))?;
            Ok(EvalVideo {
                video_id: v.video_id.clone(),
                class_name: c.clone(),
                embedding,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub classes: Vec<String>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class_name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunResult>,
    pub mean_accuracy: f64,
    /// Population standard deviation of the run accuracies.
    pub std_accuracy: f64,
    pub pooled_accuracy: f64,
    pub abstentions: usize,
    /// Row and column labels of `confusion`; the last column counts
    /// abstentions.
    pub class_names: Vec<String>,
    /// `confusion[truth][predicted]`, summed over runs.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassResult>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const ABSTAIN: &str = "abstain";

/// Runs the split protocol with an arbitrary predictor. `predict` receives
/// the run index, the video index and the run's class subset and returns a
/// class name from the subset or `None` to abstain.
pub fn evaluate_with<F>(truths: &[&str], split: &SplitSpec, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(usize, usize, &[String]) -> Option<String>,
{
    let all: BTreeSet<&str> = split.runs.iter().flatten().map(String::as_str).collect();
    let class_names: Vec<String> = all.iter().map(|s| s.to_string()).collect();
    let col: BTreeMap<&str, usize> = all.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = class_names.len();
    let mut confusion = vec![vec![0usize; n + 1]; n];
    let mut runs = Vec::with_capacity(split.runs.len());
    let mut abstentions = 0;

    for (r, subset) in split.runs.iter().enumerate() {
        let present: Vec<String> = subset
            .iter()
            .filter(|c| {
                let has = truths.iter().any(|t| t == c);
                if !has {
                    log::warn!("run {r}: class {c:?} has no test videos and is left out");
                }
                has
            })
            .cloned()
            .collect();
        if present.is_empty() {
            return Err(Error::Invalid(format!("run {r} has no test videos")));
        }
        let (mut correct, mut total) = (0, 0);
        for (vi, truth) in truths.iter().enumerate() {
            if !present.iter().any(|c| c == truth) {
                continue;
            }
            total += 1;
            let row = col[truth];
            match predict(r, vi, &present) {
                Some(pred) => {
                    let c = *col
                        .get(pred.as_str())
                        .filter(|_| present.contains(&pred))
                        .ok_or_else(|| {
                            Error::Invalid(format!("prediction {pred:?} outside run {r}"))
                        })?;
                    confusion[row][c] += 1;
                    correct += usize::from(c == row);
                }
                None => {
                    confusion[row][n] += 1;
                    abstentions += 1;
                }
            }
        }
        runs.push(RunResult {
            classes: present,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        });
    }

    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
    let per_class: Vec<ClassResult> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let total: usize = confusion[i].iter().sum();
            let correct = confusion[i][i];
            ClassResult {
                class_name: c.clone(),
                correct,
                total,
                accuracy: if total > 0 {
                    correct as f64 / total as f64
                } else {
                    0.0
                },
            }
        })
        .collect();
    let diag: usize = (0..n).map(|i| confusion[i][i]).sum();
    let total: usize = confusion.iter().flatten().sum();
    Ok(EvalReport {
        runs,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        pooled_accuracy: diag as f64 / total as f64,
        abstentions,
        class_names,
        confusion,
        per_class,
        config: serde_json::Value::Null,
    })
}

/// Nearest-prototype evaluation of embedded videos.
pub fn evaluate(
    videos: &[EvalVideo],
    prototypes: &[ClassPrototype],
    split: &SplitSpec,
) -> Result<EvalReport> {
    let by_name: BTreeMap<&str, &ClassPrototype> = prototypes
        .iter()
        .map(|p| (p.class_name.as_str(), p))
        .collect();
    for c in split.runs.iter().flatten() {
        if !by_name.contains_key(c.as_str()) {
            return Err(Error::Invalid(format!("class {c:?} has no prototype")));
        }
    }
    let truths: Vec<&str> = videos.iter().map(|v| v.class_name.as_str()).collect();
    evaluate_with(&truths, split, |_, vi, subset| {
        let protos: Vec<&ClassPrototype> = subset.iter().map(|c| by_name[c.as_str()]).collect();
        let hit = classify(&videos[vi].embedding, &protos);
        if hit.is_none() {
            log::warn!(
                "video {} has a zero embedding; counted as an error",
                videos[vi].video_id
            );
        }
        hit.map(|i| protos[i].class_name.clone())
    })
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Rows are true classes; the header lists predicted classes and the
    /// abstention column.
    pub fn confusion_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["truth"];
        header.extend(self.class_names.iter().map(String::as_str));
        header.push(ABSTAIN);
        w.write_record(&header).expect("in-memory write");
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn per_class_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.per_class {
            w.serialize(c).expect("in-memory write");
        }
        if self.per_class.is_empty() {
            w.write_record(["class_name", "correct", "total", "accuracy"])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Result of [`pca_project`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each axis.
    pub variances: [f64; 2],
    /// True when the points span fewer than two dimensions; the second axis
    /// is then all zeros.
    pub degenerate: bool,
}

/// Projects onto the top two principal components. Each axis is oriented so
/// that its largest-magnitude loading is positive.
pub fn pca_project(vectors: &[Vec<f32>]) -> Result<Projection> {
    if vectors.len() < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("vectors must share a non-zero length".into()));
    }
    let n = vectors.len();
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x as f64 / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] as f64 - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let scale = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
    let mut coords = vec![[0.0; 2]; n];
    let mut variances = [0.0; 2];
    let mut degenerate = false;
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if axis == 1 && (d < 2 || lambda <= 1e-10 * scale) {
            degenerate = true;
            log::warn!("points span fewer than two dimensions; second axis set to zero");
            break;
        }
        let mut u: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = (0..d).fold(0, |b, j| if u[j].abs() > u[b].abs() { j } else { b });
        if u[lead] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, c) in coords.iter_mut().enumerate() {
            c[axis] = centered.row(i).iter().zip(&u).map(|(a, b)| a * b).sum();
        }
        variances[axis] = lambda.max(0.0);
    }
    if d < 2 {
        degenerate = true;
    }
    Ok(Projection {
        coords,
        variances,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub id: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

pub fn write_projection(path: impl AsRef<Path>, rows: &[ProjectionRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    if rows.is_empty() {
        w.write_record(["id", "label", "x", "y"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean silhouette coefficient of labelled 2-D points (Euclidean).
pub fn silhouette(points: &[[f64; 2]], labels: &[&str]) -> f64 {
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let classes: BTreeSet<&str> = labels.iter().copied().collect();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut mean_to = BTreeMap::new();
        for &c in &classes {
            let (s, k) = points
                .iter()
                .zip(labels)
                .enumerate()
                .filter(|&(j, (_, &l))| l == c && j != i)
                .fold((0.0, 0usize), |(s, k), (_, (q, _))| (s + dist(p, q), k + 1));
            if k > 0 {
                mean_to.insert(c, s / k as f64);
            }
        }
        let Some(&a) = mean_to.get(labels[i]) else {
            continue;
        };
        let b = mean_to
            .iter()
            .filter(|(&c, _)| c != labels[i])
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / points.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub sigma_v: f64,
    pub sigma_s: f64,
    /// Classes held out of the training manifest for zero-shot evaluation.
    pub eval_classes: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            per_class: 30,
            d_c: 64,
            d_s: 32,
            sigma_v: 0.05,
            sigma_s: 0.05,
            eval_classes: 3,
            min_rows: 3,
            max_rows: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.eval_classes == 0 || self.eval_classes >= self.classes {
            return Err(Error::Config(format!(
                "eval_classes must lie in 1..{}, got {}",
                self.classes, self.eval_classes
            )));
        }
        if self.per_class == 0 || self.d_c == 0 || self.d_s == 0 {
            return Err(Error::Config(
                "per_class, d_c and d_s must be positive".into(),
            ));
        }
        if self.min_rows == 0 || self.min_rows > self.max_rows {
            return Err(Error::Config("need 1 <= min_rows <= max_rows".into()));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_s >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    /// Videos of the training classes.
    pub train: PathBuf,
    /// Videos and prototypes of the held-out classes.
    pub eval: PathBuf,
    /// Everything.
    pub all: PathBuf,
    pub eval_classes: Vec<String>,
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Writes a synthetic dataset of Gaussian classes to `dir`.
///
/// Each class has a unit centre `c` in sentence space. Descriptions are
/// `|c + N(0, σ_s²)|`, the class prototype is `|c|`, and a video is a stack
/// of `A·c + N(0, σ_v²)` rows for one fixed Gaussian matrix `A`; the row
/// count is drawn once per class. Every video lists its class prototype as
/// its object description.
pub fn synth_generate(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut rng = rng_for(cfg.seed, &[STREAM_SYNTH]);

    let centres: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| loop {
            let v = normal_vec(&mut rng, cfg.d_s, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect();
    let lift = normal_vec(&mut rng, cfg.d_c * cfg.d_s, 1.0);
    let names: Vec<String> = (0..cfg.classes).map(|g| format!("class_{g:02}")).collect();
    let mut held = rand::seq::index::sample(&mut rng, cfg.classes, cfg.eval_classes).into_vec();
    held.sort_unstable();

    let n_videos = cfg.classes * cfg.per_class;
    let mut sentences: Vec<Vec<f32>> = Vec::with_capacity(n_videos + cfg.classes);
    let mut videos: Vec<(usize, VideoEntry)> = Vec::with_capacity(n_videos);
    for (g, c) in centres.iter().enumerate() {
        let visual: Vec<f64> = (0..cfg.d_c)
            .map(|i| (0..cfg.d_s).map(|j| lift[i * cfg.d_s + j] * c[j]).sum())
            .collect();
        let t = rng.random_range(cfg.min_rows..=cfg.max_rows);
        for k in 0..cfg.per_class {
            let mut data = Vec::with_capacity(t * cfg.d_c);
            for _ in 0..t {
                let noise = normal_vec(&mut rng, cfg.d_c, cfg.sigma_v);
                data.extend(visual.iter().zip(noise).map(|(v, e)| (v + e) as f32));
            }
            let id = format!("{}_{k:03}", names[g]);
            let rel = PathBuf::from("features").join(format!("{id}.fvec"));
            write_fvec(dir.join(&rel), &Matrix::new(t, cfg.d_c, data)?)?;
            let noise = normal_vec(&mut rng, cfg.d_s, cfg.sigma_s);
            sentences.push(
                c.iter()
                    .zip(noise)
                    .map(|(x, e)| (x + e).abs() as f32)
                    .collect(),
            );
            videos.push((
                g,
                VideoEntry {
                    video_id: id,
                    fvec_path: rel,
                    class_name: Some(names[g].clone()),
                    segments: vec![SegmentAnnotation {
                        start_s: 0.0,
                        end_s: t as f64,
                        sentence_id: sentences.len() - 1,
                        object_sentence_ids: vec![n_videos + g],
                    }],
                },
            ));
        }
    }
    for c in &centres {
        sentences.push(c.iter().map(|x| x.abs() as f32).collect());
    }
    write_fvec(dir.join("sentences.fvec"), &Matrix::from_rows(&sentences)?)?;

    let protos = |keep: &dyn Fn(usize) -> bool| -> Vec<ClassPrototypeEntry> {
        (0..cfg.classes)
            .filter(|&g| keep(g))
            .map(|g| ClassPrototypeEntry {
                class_name: names[g].clone(),
                prototype_sentence_id: n_videos + g,
            })
            .collect()
    };
    let subset = |keep: &dyn Fn(usize) -> bool| DatasetManifest {
        videos: videos
            .iter()
            .filter(|(g, _)| keep(*g))
            .map(|(_, v)| v.clone())
            .collect(),
        sentence_table_path: "sentences.fvec".into(),
        class_prototypes: protos(keep),
    };
    let is_eval = |g: usize| held.contains(&g);
    let out = SynthOutput {
        train: dir.join("train.json"),
        eval: dir.join("eval.json"),
        all: dir.join("all.json"),
        eval_classes: held.iter().map(|&g| names[g].clone()).collect(),
    };
    for (path, m) in [
        (&out.train, subset(&|g| !is_eval(g))),
        (&out.eval, subset(&is_eval)),
        (&out.all, subset(&|_| true)),
    ] {
        std::fs::write(path, m.to_json()).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

/// Accuracy of classifying each labelled video's description vector by
/// cosine against the raw prototype vectors of `classes`.
pub fn raw_sentence_accuracy(ds: &Dataset, classes: &[String]) -> Result<f64> {
    let protos: Vec<ClassPrototype> = ds
        .prototypes()
        .iter()
        .filter(|p| classes.contains(&p.class_name))
        .map(|p| ClassPrototype {
            class_name: p.class_name.clone(),
            embedding: ds.sentence(p.prototype_sentence_id).to_vec(),
        })
        .collect();
    let refs: Vec<&ClassPrototype> = protos.iter().collect();
    let (mut correct, mut total) = (0usize, 0usize);
    for v in ds.videos() {
        let Some(truth) = v.class_name.as_ref().filter(|c| classes.contains(c)) else {
            continue;
        };
        for s in &v.segments {
            total += 1;
            let hit = classify(ds.sentence(s.sentence_id), &refs).map(|i| &refs[i].class_name);
            correct += usize::from(hit == Some(truth));
        }
    }
    if total == 0 {
        return Err(Error::Invalid(
            "no labelled segments for the given classes".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

/// The rows of a video covered by its segments, for projection plots.
pub fn segment_stack(ds: &Dataset, video: usize, seg: &SegmentAnnotation) -> Matrix<f32> {
    let f = &ds.features[video];
    let (a, b) = segment_rows(seg.start_s, seg.end_s, f.rows());
    f.slice_rows(a, b)
}
