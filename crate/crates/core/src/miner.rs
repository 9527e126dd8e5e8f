//! Hard-negative triplet mining.
//!
//! A sentence is a valid negative for an anchor when their cosine similarity
//! is at most `1 − τ`. When a segment carries object descriptions, the two
//! most similar to the human description join it as positives and a negative
//! has to pass the test against all three.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_fvec, SegmentAnnotation, ValidatedManifest};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{rng_for, str_key, STREAM_NEGATIVES, STREAM_WINDOWS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub tau: f64,
    pub n_negatives: usize,
    pub n_aug_segments: usize,
    pub max_window_s: f64,
    pub seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            tau: 0.8,
            n_negatives: 10,
            n_aug_segments: 3,
            max_window_s: 10.0,
            seed: 0,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if self.n_negatives == 0 || self.n_aug_segments == 0 {
            return Err(Error::Config(
                "n_negatives and n_aug_segments must be at least 1".into(),
            ));
        }
        if !(self.max_window_s >= 1.0 && self.max_window_s.is_finite()) {
            return Err(Error::Config("max_window_s must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training example: a window of a video, its description and a mined
/// negative description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub positive_id: usize,
    pub negative_id: usize,
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

/// `cos(a, b) > 1 − τ`, evaluated in double precision.
pub fn is_similar(a: &[f32], b: &[f32], tau: f64) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm64(a), norm64(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot64(a, b) / (na * nb) > 1.0 - tau)
}

/// Candidate negatives: a set of sentence ids into a sentence table, with
/// their norms cached.
pub struct Corpus<'a> {
    table: &'a Matrix<f32>,
    ids: Vec<usize>,
    norms: Vec<f64>,
}

impl<'a> Corpus<'a> {
    /// Ids are sorted and deduplicated, so the order they arrive in is
    /// irrelevant.
    pub fn new(table: &'a Matrix<f32>, ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut ids: Vec<usize> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        let mut norms = Vec::with_capacity(ids.len());
        for &id in &ids {
            if id >= table.rows() {
                return Err(Error::DanglingSentence {
                    id,
                    rows: table.rows(),
                });
            }
            let n = norm64(table.row(id));
            if n == 0.0 {
                return Err(Error::Invalid(format!("sentence {id} has zero norm")));
            }
            norms.push(n);
        }
        Ok(Corpus { table, ids, norms })
    }

    /// Every row of the table.
    pub fn full(table: &'a Matrix<f32>) -> Result<Self> {
        Self::new(table, 0..table.rows())
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn vector(&self, id: usize) -> Result<&'a [f32]> {
        if id >= self.table.rows() {
            return Err(Error::DanglingSentence {
                id,
                rows: self.table.rows(),
            });
        }
        Ok(self.table.row(id))
    }

    /// Ids `j ≠ anchor` not similar to any of `positives`, ascending.
    pub fn pool(&self, anchor: usize, positives: &[usize], tau: f64) -> Result<Vec<usize>> {
        let mut refs = Vec::with_capacity(positives.len());
        for &p in positives {
            let v = self.vector(p)?;
            if v.len() != self.table.cols() {
                return Err(Error::Shape("positive dimension mismatch".into()));
            }
            let n = norm64(v);
            if n == 0.0 {
                return Err(Error::ZeroNorm);
            }
            refs.push((v, n));
        }
        let threshold = 1.0 - tau;
        Ok(self
            .ids
            .iter()
            .zip(&self.norms)
            .filter(|&(&j, &nj)| {
                j != anchor
                    && refs.iter().all(|&(v, nv)| {
                        let c = dot64(v, self.table.row(j)) / (nv * nj);
                        c <= threshold
                    })
            })
            .map(|(&j, _)| j)
            .collect())
    }
}

/// A mined set of negatives for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Negatives {
    /// Selected ids, ascending.
    pub ids: Vec<usize>,
    pub pool_size: usize,
}

impl Negatives {
    pub fn is_unmined(&self) -> bool {
        self.pool_size == 0
    }
}

/// Draws `min(n, |pool|)` ids uniformly without replacement. The stream is
/// keyed by the run seed and the anchor id only.
pub fn select_from_pool(pool: &[usize], anchor: usize, cfg: &MinerConfig) -> Vec<usize> {
    let k = cfg.n_negatives.min(pool.len());
    let mut rng = rng_for(cfg.seed, &[STREAM_NEGATIVES, anchor as u64]);
    let mut ids: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    ids.sort_unstable();
    ids
}

pub fn mine_negatives(anchor: usize, corpus: &Corpus<'_>, cfg: &MinerConfig) -> Result<Negatives> {
    object_filtered_negatives(anchor, &[], corpus, cfg)
}

/// Negatives dissimilar to the anchor and to each object description.
pub fn object_filtered_negatives(
    anchor: usize,
    object_ids: &[usize],
    corpus: &Corpus<'_>,
    cfg: &MinerConfig,
) -> Result<Negatives> {
    let mut positives = vec![anchor];
    positives.extend_from_slice(object_ids);
    let pool = corpus.pool(anchor, &positives, cfg.tau)?;
    Ok(Negatives {
        ids: select_from_pool(&pool, anchor, cfg),
        pool_size: pool.len(),
    })
}

/// The (at most) two candidates most similar to the anchor, ties going to the
/// lower id.
pub fn select_object_sentences(
    anchor: usize,
    candidates: &[usize],
    table: &Matrix<f32>,
) -> Result<Vec<usize>> {
    let a = table.row(anchor);
    let na = norm64(a);
    let mut scored = Vec::with_capacity(candidates.len());
    for &c in candidates {
        if c >= table.rows() {
            return Err(Error::DanglingSentence {
                id: c,
                rows: table.rows(),
            });
        }
        let v = table.row(c);
        let n = norm64(v);
        if n == 0.0 || na == 0.0 {
            return Err(Error::ZeroNorm);
        }
        scored.push((dot64(a, v) / (na * n), c));
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    scored.dedup_by_key(|s| s.1);
    Ok(scored.into_iter().take(2).map(|(_, c)| c).collect())
}

/// `n_aug_segments` windows of length `min(max_window_s, duration)` with
/// uniformly drawn starts inside the segment.
pub fn augment_segments<R: Rng>(
    seg: &SegmentAnnotation,
    cfg: &MinerConfig,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let len = cfg.max_window_s.min(seg.duration());
    let slack = seg.duration() - len;
    (0..cfg.n_aug_segments)
        .map(|_| {
            let start = if slack > 0.0 {
                seg.start_s + rng.random::<f64>() * slack
            } else {
                seg.start_s
            };
            (start, (start + len).min(seg.end_s))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub config: MinerConfig,
    pub corpus_size: usize,
    pub segments: usize,
    /// Segments shorter than one second, left out.
    pub skipped_short: usize,
    /// Segments whose negative pool was empty.
    pub unmined: usize,
    /// Segments whose pool held fewer than `n_negatives` sentences.
    pub short_pools: usize,
    pub object_filtered: usize,
    pub records: usize,
    pub mean_pool_size: f64,
    pub min_pool_size: usize,
    pub max_pool_size: usize,
    /// Counts of pool size as a fraction of the corpus, in ten equal bins
    /// over [0, 1].
    pub pool_fraction_histogram: [usize; 10],
}

impl MiningReport {
    fn empty(cfg: &MinerConfig, corpus_size: usize) -> Self {
        MiningReport {
            config: cfg.clone(),
            corpus_size,
            segments: 0,
            skipped_short: 0,
            unmined: 0,
            short_pools: 0,
            object_filtered: 0,
            records: 0,
            mean_pool_size: 0.0,
            min_pool_size: 0,
            max_pool_size: 0,
            pool_fraction_histogram: [0; 10],
        }
    }
}

/// Mines triplets for every segment of the manifest.
///
/// The candidate negatives are the human descriptions of all segments.
/// Videos and segments are visited in manifest order, so the output does not
/// depend on the number of worker threads.
pub fn build_triplets(
    manifest: &ValidatedManifest,
    sentences: &Matrix<f32>,
    cfg: &MinerConfig,
) -> Result<(Vec<TripletRecord>, MiningReport)> {
    cfg.validate()?;
    let segments: Vec<(&str, usize, &SegmentAnnotation)> = manifest
        .videos()
        .iter()
        .flat_map(|v| {
            v.segments
                .iter()
                .enumerate()
                .map(move |(i, s)| (v.video_id.as_str(), i, s))
        })
        .collect();
    let corpus = Corpus::new(sentences, segments.iter().map(|s| s.2.sentence_id))?;
    let mut report = MiningReport::empty(cfg, corpus.len());

    let mined: Vec<Option<(Negatives, bool, Vec<(f64, f64)>)>> = segments
        .par_iter()
        .map(|&(video_id, index, seg)| -> Result<_> {
            if seg.duration() < 1.0 {
                return Ok(None);
            }
            let objects =
                select_object_sentences(seg.sentence_id, &seg.object_sentence_ids, sentences)?;
            let negatives = object_filtered_negatives(seg.sentence_id, &objects, &corpus, cfg)?;
            let mut rng = rng_for(cfg.seed, &[STREAM_WINDOWS, str_key(video_id), index as u64]);
            let windows = augment_segments(seg, cfg, &mut rng);
            Ok(Some((negatives, !objects.is_empty(), windows)))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut pool_sum = 0usize;
    let mut mined_segments = 0usize;
    for (&(video_id, _, seg), m) in segments.iter().zip(mined) {
        report.segments += 1;
        let Some((neg, filtered, windows)) = m else {
            report.skipped_short += 1;
            continue;
        };
        mined_segments += 1;
        pool_sum += neg.pool_size;
        report.min_pool_size = if mined_segments == 1 {
            neg.pool_size
        } else {
            report.min_pool_size.min(neg.pool_size)
        };
        report.max_pool_size = report.max_pool_size.max(neg.pool_size);
        let frac = neg.pool_size as f64 / corpus.len().max(1) as f64;
        report.pool_fraction_histogram[((frac * 10.0) as usize).min(9)] += 1;
        report.object_filtered += usize::from(filtered);
        if neg.is_unmined() {
            report.unmined += 1;
            continue;
        }
        if neg.pool_size < cfg.n_negatives {
            report.short_pools += 1;
        }
        for &(start_s, end_s) in &windows {
            for &negative_id in &neg.ids {
                records.push(TripletRecord {
                    video_id: video_id.to_string(),
                    start_s,
                    end_s,
                    positive_id: seg.sentence_id,
                    negative_id,
                });
            }
        }
    }
    if mined_segments > 0 {
        report.mean_pool_size = pool_sum as f64 / mined_segments as f64;
    }
    if report.unmined > 0 {
        log::warn!("{} segment(s) had an empty negative pool", report.unmined);
    }
    if report.short_pools > 0 {
        log::warn!(
            "{} segment(s) had fewer than {} negatives",
            report.short_pools,
            cfg.n_negatives
        );
    }
    report.records = records.len();
    Ok((records, report))
}

/// Loads the sentence table named by the manifest and mines it.
pub fn mine_manifest(
    manifest: &ValidatedManifest,
    cfg: &MinerConfig,
) -> Result<(Vec<TripletRecord>, MiningReport)> {
    let sentences = read_fvec(manifest.resolve(&manifest.manifest.sentence_table_path))?;
    build_triplets(manifest, &sentences, cfg)
}

pub fn write_triplets(path: impl AsRef<Path>, records: &[TripletRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    if records.is_empty() {
        w.write_record(["video_id", "start_s", "end_s", "positive_id", "negative_id"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>()
        != ["video_id", "start_s", "end_s", "positive_id", "negative_id"]
    {
        return Err(Error::Invalid(format!(
            "{}: unexpected triplet header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: TripletRecord = rec?;
        if rec.positive_id == rec.negative_id {
            return Err(Error::Invalid(format!(
                "{}: triplet with positive == negative ({})",
                path.display(),
                rec.positive_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Pool sizes per anchor, keyed by anchor id; handy for τ sweeps.
pub fn pool_sizes(corpus: &Corpus<'_>, tau: f64) -> Result<BTreeMap<usize, usize>> {
    corpus
        .ids()
        .par_iter()
        .map(|&a| Ok((a, corpus.pool(a, &[a], tau)?.len())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{validate_manifest, write_fvec, DatasetManifest, VideoEntry};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: f64) -> MinerConfig {
        MinerConfig {
            tau,
            seed: 11,
            ..MinerConfig::default()
        }
    }

    #[test]
    fn similarity_threshold() {
        let a = [1.0f32, 2.0, 0.5];
        assert!(is_similar(&a, &a, 0.01).unwrap());
        assert!(!is_similar(&[1.0, 0.0], &[0.0, 3.0], 0.8).unwrap());
        // cos = 0.25
        let b = [0.25f32, (1.0f32 - 0.0625).sqrt()];
        assert!(is_similar(&[1.0, 0.0], &b, 0.8).unwrap());
        assert!(!is_similar(&[1.0, 0.0], &b, 0.7).unwrap());
        assert!(matches!(
            is_similar(&[0.0, 0.0], &b, 0.8),
            Err(Error::ZeroNorm)
        ));
    }

    fn one_hot(n: usize) -> Matrix<f32> {
        Matrix::identity(n)
    }

    #[test]
    fn orthogonal_and_duplicate_corpora() {
        let t = one_hot(6);
        let c = Corpus::full(&t).unwrap();
        let neg = mine_negatives(2, &c, &cfg(0.8)).unwrap();
        assert_eq!(neg.pool_size, 5);
        assert_eq!(neg.ids, vec![0, 1, 3, 4, 5]);

        let dup = Matrix::filled(4, 3, 0.5f32);
        let c = Corpus::full(&dup).unwrap();
        let neg = mine_negatives(0, &c, &cfg(0.8)).unwrap();
        assert!(neg.is_unmined() && neg.ids.is_empty());
    }

    #[test]
    fn object_filter_is_a_conjunction() {
        // anchor e0, object sentences e1 and e2, candidates
        let rows = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.9, 0.1], // close to object #2 only
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let t = Matrix::from_rows(&rows).unwrap();
        let c = Corpus::new(&t, [0, 3, 4]).unwrap();
        let plain = mine_negatives(0, &c, &cfg(0.8)).unwrap();
        assert_eq!(plain.ids, vec![3, 4]);
        let filtered = object_filtered_negatives(0, &[1, 2], &c, &cfg(0.8)).unwrap();
        assert_eq!(filtered.ids, vec![4]);
        // object sentences identical to the anchor change nothing
        let same = object_filtered_negatives(0, &[0, 0], &c, &cfg(0.8)).unwrap();
        assert_eq!(same, plain);
    }

    #[test]
    fn object_selection_ranks_by_cosine_then_id() {
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![1.0, 0.1],
        ];
        let t = Matrix::from_rows(&rows).unwrap();
        assert_eq!(
            select_object_sentences(0, &[1, 3, 2, 4], &t).unwrap(),
            vec![4, 2]
        );
        assert_eq!(select_object_sentences(0, &[1], &t).unwrap(), vec![1]);
        assert!(select_object_sentences(0, &[], &t).unwrap().is_empty());
    }

    fn seg(start: f64, end: f64) -> SegmentAnnotation {
        SegmentAnnotation {
            start_s: start,
            end_s: end,
            sentence_id: 0,
            object_sentence_ids: vec![],
        }
    }

    #[test]
    fn windows() {
        let c = MinerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            augment_segments(&seg(5.0, 15.0), &c, &mut rng),
            vec![(5.0, 15.0); 3]
        );
        let w = augment_segments(&seg(2.0, 32.0), &c, &mut rng);
        assert_eq!(w.len(), 3);
        for (s, e) in &w {
            assert!(*s >= 2.0 && *e <= 32.0 && ((e - s) - 10.0).abs() < 1e-9);
        }
        let again =
            |seed| augment_segments(&seg(0.0, 100.0), &c, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(again(9), again(9));
        assert_ne!(again(9), again(10));
    }

    /// Exhaustive pairwise scan, written independently of `Corpus`.
    fn brute_force_pool(
        t: &Matrix<f32>,
        ids: &[usize],
        anchor: usize,
        positives: &[usize],
        tau: f64,
    ) -> Vec<usize> {
        let cos = |i: usize, j: usize| {
            let (a, b) = (t.row(i), t.row(j));
            let mut d = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for k in 0..a.len() {
                d += a[k] as f64 * b[k] as f64;
                na += a[k] as f64 * a[k] as f64;
                nb += b[k] as f64 * b[k] as f64;
            }
            d / (na.sqrt() * nb.sqrt())
        };
        let mut pool: Vec<usize> = Vec::new();
        for j in 0..t.rows() {
            if !ids.contains(&j) || j == anchor {
                continue;
            }
            if positives.iter().all(|&p| !(cos(p, j) > 1.0 - tau)) {
                pool.push(j);
            }
        }
        pool
    }

    fn clustered_table(n: usize, d: usize, seed: u64) -> Matrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f32>> = (0..8)
            .map(|_| (0..d).map(|_| rng.random::<f32>()).collect())
            .collect();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let c = &centers[rng.random_range(0..centers.len())];
            let spread = if i % 2 == 0 { 0.02 } else { 1.0 };
            rows.push(
                c.iter()
                    .map(|&x| (x + spread * (rng.random::<f32>() - 0.5)).abs() + 1e-3)
                    .collect(),
            );
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn matches_brute_force_on_200_sentences() {
        let t = clustered_table(200, 12, 5);
        let ids: Vec<usize> = (0..200).collect();
        let c = Corpus::full(&t).unwrap();
        for tau in [0.7, 0.8, 0.9] {
            let cf = cfg(tau);
            for anchor in (0..200).step_by(7) {
                let expect = brute_force_pool(&t, &ids, anchor, &[anchor], tau);
                let got = mine_negatives(anchor, &c, &cf).unwrap();
                assert_eq!(got.pool_size, expect.len());
                assert_eq!(got.ids, select_from_pool(&expect, anchor, &cf));
                assert!(got.ids.iter().all(|j| expect.contains(j)));
            }
        }
    }

    #[test]
    fn object_filter_matches_brute_force_with_planted_duplicates() {
        let mut t = clustered_table(100, 10, 6);
        // rows 50..60 are near-copies of rows 0..10
        for i in 0..10 {
            let copy: Vec<f32> = t.row(i).iter().map(|v| v * 1.01 + 1e-4).collect();
            t.row_mut(50 + i).copy_from_slice(&copy);
        }
        let ids: Vec<usize> = (0..100).collect();
        let c = Corpus::full(&t).unwrap();
        for tau in [0.05, 0.3, 0.8] {
            let cf = cfg(tau);
            for anchor in 10..40 {
                let objects = [anchor + 40, (anchor * 3) % 100];
                let expect =
                    brute_force_pool(&t, &ids, anchor, &[anchor, objects[0], objects[1]], tau);
                let got = object_filtered_negatives(anchor, &objects, &c, &cf).unwrap();
                assert_eq!(got.pool_size, expect.len());
                assert_eq!(got.ids, select_from_pool(&expect, anchor, &cf));
            }
        }
    }

    fn toy_manifest(
        dir: &Path,
        durations: &[(f64, f64)],
        sentences: &Matrix<f32>,
    ) -> ValidatedManifest {
        write_fvec(dir.join("s.fvec"), sentences).unwrap();
        let mut videos = Vec::new();
        for (i, &(s, e)) in durations.iter().enumerate() {
            let rows = e.ceil() as usize + 1;
            write_fvec(
                dir.join(format!("v{i}.fvec")),
                &Matrix::filled(rows, 2, 1.0),
            )
            .unwrap();
            videos.push(VideoEntry {
                video_id: format!("v{i}"),
                fvec_path: format!("v{i}.fvec").into(),
                class_name: None,
                segments: vec![SegmentAnnotation {
                    start_s: s,
                    end_s: e,
                    sentence_id: 2 * i,
                    object_sentence_ids: if i % 2 == 0 { vec![2 * i + 1] } else { vec![] },
                }],
            });
        }
        let m = DatasetManifest {
            videos,
            sentence_table_path: "s.fvec".into(),
            class_prototypes: vec![],
        };
        validate_manifest(m, dir.to_path_buf()).unwrap()
    }

    #[test]
    fn single_segment_with_full_pool_gives_thirty_records() {
        let dir = tempfile::tempdir().unwrap();
        // 12 orthogonal sentences; the corpus is the 12 segment descriptions
        let mut durations = vec![(0.0, 20.0)];
        durations.extend((1..12).map(|_| (0.0, 5.0)));
        let t = Matrix::identity(24);
        let m = toy_manifest(dir.path(), &durations, &t);
        let (records, report) = build_triplets(&m, &t, &MinerConfig::default()).unwrap();
        let first: Vec<_> = records.iter().filter(|r| r.video_id == "v0").collect();
        assert_eq!(first.len(), 30);
        assert_eq!(report.unmined, 0);
        assert_eq!(report.records, records.len());
    }

    #[test]
    fn no_segments_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let t = Matrix::identity(3);
        write_fvec(dir.path().join("s.fvec"), &t).unwrap();
        let m = validate_manifest(
            DatasetManifest {
                videos: vec![],
                sentence_table_path: "s.fvec".into(),
                class_prototypes: vec![],
            },
            dir.path().to_path_buf(),
        )
        .unwrap();
        let (records, report) = build_triplets(&m, &t, &MinerConfig::default()).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.segments, 0);
    }

    #[test]
    fn toy_manifest_matches_enumeration() {
        let dir = tempfile::tempdir().unwrap();
        let t = clustered_table(10, 4, 9);
        let durations = [(0.0, 4.0), (1.0, 14.5), (0.0, 0.5), (2.0, 9.0), (0.0, 30.0)];
        let m = toy_manifest(dir.path(), &durations, &t);
        let c = MinerConfig {
            tau: 0.05,
            n_negatives: 2,
            seed: 4,
            ..MinerConfig::default()
        };
        let (records, report) = build_triplets(&m, &t, &c).unwrap();
        assert_eq!(report.skipped_short, 1);

        let corpus_ids = [0, 2, 4, 6, 8];
        let mut expect = Vec::new();
        for (i, &(s, e)) in durations.iter().enumerate() {
            if e - s < 1.0 {
                continue;
            }
            let anchor = 2 * i;
            let mut positives = vec![anchor];
            if i % 2 == 0 {
                positives.push(anchor + 1);
            }
            let pool = brute_force_pool(&t, &corpus_ids, anchor, &positives, c.tau);
            let negs = select_from_pool(&pool, anchor, &c);
            let mut rng = rng_for(c.seed, &[STREAM_WINDOWS, str_key(&format!("v{i}")), 0]);
            for (ws, we) in augment_segments(&seg(s, e), &c, &mut rng) {
                for &n in &negs {
                    expect.push((format!("v{i}"), ws, we, anchor, n));
                }
            }
        }
        let got: Vec<_> = records
            .iter()
            .map(|r| {
                (
                    r.video_id.clone(),
                    r.start_s,
                    r.end_s,
                    r.positive_id,
                    r.negative_id,
                )
            })
            .collect();
        assert_eq!(got, expect);
        for r in &records {
            assert!(!is_similar(t.row(r.positive_id), t.row(r.negative_id), c.tau).unwrap());
        }
    }

    #[test]
    fn triplet_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let recs = vec![
            TripletRecord {
                video_id: "a,b".into(),
                start_s: 0.1,
                end_s: 10.1,
                positive_id: 1,
                negative_id: 7,
            },
            TripletRecord {
                video_id: "c".into(),
                start_s: 3.0,
                end_s: 4.0,
                positive_id: 0,
                negative_id: 2,
            },
        ];
        write_triplets(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("video_id,start_s,end_s,positive_id,negative_id\n"));
        assert_eq!(read_triplets(&path).unwrap(), recs);
        write_triplets(&path, &[]).unwrap();
        assert!(read_triplets(&path).unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn raising_tau_weakly_shrinks_pools(seed in any::<u64>(), a in 0.05f64..0.95, b in 0.05f64..0.95) {
            let t = clustered_table(60, 6, seed);
            let c = Corpus::full(&t).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let loose = pool_sizes(&c, lo).unwrap();
            let strict = pool_sizes(&c, hi).unwrap();
            for (k, v) in loose {
                prop_assert!(v >= strict[&k]);
            }
        }

        #[test]
        fn candidate_order_is_irrelevant(seed in any::<u64>(), anchor in 0usize..40) {
            use rand::seq::SliceRandom;
            let t = clustered_table(40, 5, seed);
            let mut ids: Vec<usize> = (0..40).collect();
            let a = mine_negatives(anchor, &Corpus::new(&t, ids.clone()).unwrap(), &cfg(0.8)).unwrap();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let b = mine_negatives(anchor, &Corpus::new(&t, ids).unwrap(), &cfg(0.8)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
