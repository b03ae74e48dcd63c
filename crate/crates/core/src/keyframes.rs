//! Video datasets to goal-step format: k-means keyframes for untrimmed
//! videos, one sampled frame per annotated segment for segmented ones.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Article, Corpus, Method, Step};
use crate::embed_store::{squared_distance, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub video_id: String,
    pub goal: String,
    pub category: Option<String>,
    pub frames: Vec<Vec<f32>>,
    pub segments: Vec<Segment>,
}

impl FrameSequence {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::InvalidArgument(format!("video {} has no frames", self.video_id)));
        }
        let dim = self.frames[0].len();
        if let Some(f) = self.frames.iter().find(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, actual: f.len() });
        }
        let mut sorted: Vec<&Segment> = self.segments.iter().collect();
        sorted.sort_by_key(|s| s.start);
        for s in &sorted {
            if s.start > s.end {
                return Err(Error::InvalidArgument(format!("video {}: empty segment [{}, {}]", self.video_id, s.start, s.end)));
            }
            if s.end >= n {
                return Err(Error::InvalidArgument(format!("video {}: segment end {} beyond {} frames", self.video_id, s.end, n)));
            }
        }
        if let Some(w) = sorted.windows(2).find(|w| w[1].start <= w[0].end) {
            return Err(Error::InvalidArgument(format!("video {}: segments overlap at frame {}", self.video_id, w[1].start)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Squared Euclidean distance on raw features.
    #[default]
    Euclidean,
    /// Euclidean distance after L2-normalizing every frame.
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Total within-cluster squared distance of the final assignment.
    pub objective: f64,
    /// Objective after the initial assignment and after every Lloyd step.
    pub history: Vec<f64>,
}

fn dist2(frame: &[f32], centroid: &[f64]) -> f64 {
    frame.iter().zip(centroid).map(|(&x, c)| (x as f64 - c).powi(2)).sum()
}

/// Nearest centroid per frame (ties to the lower index) and the total
/// squared distance.
fn assign<F: AsRef<[f32]> + Sync>(frames: &[F], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let best: Vec<(usize, f64)> = frames
        .par_iter()
        .map(|f| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = dist2(f.as_ref(), c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect();
    let objective = best.iter().map(|b| b.1).sum();
    (best.into_iter().map(|b| b.0).collect(), objective)
}

fn plus_plus_init<F: AsRef<[f32]>>(frames: &[F], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng_for(seed, "kmeans++");
    let n = frames.len();
    let to_f64 = |i: usize| frames[i].as_ref().iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(frames[i].as_ref(), frames[chosen[0]].as_ref())).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every frame coincides with a chosen one
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(frames[i].as_ref(), frames[next].as_ref()));
        }
    }
    chosen.into_iter().map(to_f64).collect()
}

/// k-means with k-means++ seeding and Lloyd iterations, stopping at
/// `max_iters` updates or when the assignment stops changing. A cluster that
/// loses all its frames keeps its previous centroid.
pub fn kmeans_cluster<F: AsRef<[f32]> + Sync>(frames: &[F], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k > frames.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} frames", frames.len())));
    }
    let dim = frames[0].as_ref().len();
    if let Some(f) = frames.iter().find(|f| f.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: f.as_ref().len() });
    }

    let mut centroids = plus_plus_init(frames, k, seed);
    let (mut assignment, mut objective) = assign(frames, &centroids);
    let mut history = vec![objective];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &a) in frames.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(f.as_ref()) {
                *s += x as f64;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let (next, obj) = assign(frames, &centroids);
        history.push(obj);
        objective = obj;
        let fixpoint = next == assignment;
        assignment = next;
        if fixpoint {
            break;
        }
    }
    Ok(KMeansResult { centroids, assignment, objective, history })
}

/// Index of the frame nearest each centroid (ties to the lower index),
/// deduplicated and in ascending order.
pub fn nearest_frames<F: AsRef<[f32]>>(frames: &[F], centroids: &[Vec<f64>]) -> Vec<usize> {
    let mut picks: Vec<usize> = centroids
        .iter()
        .map(|c| {
            let mut best = (0, f64::INFINITY);
            for (i, f) in frames.iter().enumerate() {
                let d = dist2(f.as_ref(), c);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();
    picks.sort_unstable();
    picks.dedup();
    picks
}

fn normalized(frames: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
    frames
        .iter()
        .map(|f| crate::embed_store::l2_normalize(f))
        .collect()
}

pub fn select_keyframes_with(frames: &[Vec<f32>], k: usize, seed: u64, metric: Metric) -> Result<Vec<usize>> {
    match metric {
        Metric::Euclidean => {
            let r = kmeans_cluster(frames, k, seed, DEFAULT_MAX_ITERS)?;
            Ok(nearest_frames(frames, &r.centroids))
        }
        Metric::Cosine => {
            let unit = normalized(frames)?;
            let r = kmeans_cluster(&unit, k, seed, DEFAULT_MAX_ITERS)?;
            Ok(nearest_frames(&unit, &r.centroids))
        }
    }
}

pub fn select_keyframes(frames: &[Vec<f32>], k: usize, seed: u64) -> Result<Vec<usize>> {
    select_keyframes_with(frames, k, seed, Metric::Euclidean)
}

pub fn default_k(frame_count: usize) -> usize {
    frame_count.min(frame_count.div_ceil(10))
}

/// One uniformly drawn frame per annotated segment, in segment order.
pub fn sample_segment_frames(seq: &FrameSequence, seed: u64) -> Result<Vec<usize>> {
    if seq.segments.is_empty() {
        return Err(Error::InvalidArgument(format!("video {} has no segments", seq.video_id)));
    }
    seq.validate()?;
    let mut rng = seed::rng_for(seed, &format!("segments/{}", seq.video_id));
    Ok(seq.segments.iter().map(|s| rng.random_range(s.start..=s.end)).collect())
}

pub fn frame_id(video_id: &str, index: usize) -> String {
    format!("{video_id}#{index}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConversionMode {
    /// Keyframes by clustering. `k` defaults to [`default_k`]; `cap` bounds
    /// the number of keyframes per video.
    KMeans { k: Option<usize>, cap: Option<usize>, metric: Metric },
    Segments,
}

fn pick_frames(seq: &FrameSequence, mode: ConversionMode, seed: u64) -> Result<Vec<(usize, String)>> {
    let video_seed = seed::derive(seed, &seq.video_id);
    match mode {
        ConversionMode::KMeans { k, cap, metric } => {
            seq.validate()?;
            let n = seq.frames.len();
            let mut k = k.unwrap_or_else(|| default_k(n)).min(n);
            if let Some(cap) = cap {
                k = k.min(cap.max(1));
            }
            let picks = select_keyframes_with(&seq.frames, k, video_seed, metric)?;
            Ok(picks.into_iter().map(|i| (i, format!("keyframe {i} of {}", seq.goal))).collect())
        }
        ConversionMode::Segments => {
            let picks = sample_segment_frames(seq, video_seed)?;
            Ok(picks.into_iter().zip(&seq.segments).map(|(i, s)| (i, s.text.clone())).collect())
        }
    }
}

/// One pseudo-article per video whose steps are the selected frames, plus
/// the image matrix for those frames.
pub fn convert_videos(videos: &[FrameSequence], mode: ConversionMode, seed: u64) -> Result<(Corpus, EmbeddingMatrix)> {
    let converted: Vec<(Article, Vec<(String, Vec<f32>)>)> = videos
        .par_iter()
        .map(|seq| {
            let picks = pick_frames(seq, mode, seed)?;
            let method_id = format!("{}-m0", seq.video_id);
            let steps = picks
                .iter()
                .map(|(i, text)| Step { step_id: frame_id(&seq.video_id, *i), text: text.clone(), image_id: frame_id(&seq.video_id, *i) })
                .collect();
            let rows = picks.iter().map(|(i, _)| (frame_id(&seq.video_id, *i), seq.frames[*i].clone())).collect();
            let article = Article {
                article_id: seq.video_id.clone(),
                goal_title: seq.goal.clone(),
                category: seq.category.clone().unwrap_or_else(|| "video".into()),
                methods: vec![Method { method_id, title: seq.goal.clone(), steps }],
            };
            Ok((article, rows))
        })
        .collect::<Result<_>>()?;
    let dim = videos.first().map_or(0, |v| v.frames[0].len());
    let mut articles = Vec::with_capacity(converted.len());
    let mut rows = Vec::new();
    for (a, r) in converted {
        articles.push(a);
        rows.extend(r);
    }
    Ok((Corpus::from_articles(articles)?, EmbeddingMatrix::from_rows(dim, rows)?))
}

/// Per-video metadata, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub goal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<Segment>,
}

pub fn parse_video_records(reader: impl BufRead) -> Result<Vec<VideoRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::MalformedRecord { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn read_video_records(path: impl AsRef<Path>) -> Result<Vec<VideoRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_video_records(std::io::BufReader::new(file))
}

/// Joins video metadata with frame features stored under
/// `"videoid#frameindex"` ids. Frame indices of a video must be contiguous
/// from 0.
pub fn assemble_sequences(records: &[VideoRecord], frames: &EmbeddingMatrix) -> Result<Vec<FrameSequence>> {
    let mut by_video: HashMap<&str, BTreeMap<usize, usize>> = HashMap::new();
    for (row, id) in frames.ids().iter().enumerate() {
        let Some((vid, idx)) = id.rsplit_once('#') else { continue };
        let Ok(idx) = idx.parse::<usize>() else { continue };
        by_video.entry(vid).or_default().insert(idx, row);
    }
    records
        .iter()
        .map(|r| {
            let rows = by_video
                .get(r.video_id.as_str())
                .ok_or_else(|| Error::MissingEmbedding(frame_id(&r.video_id, 0)))?;
            if let Some((pos, (&idx, _))) = rows.iter().enumerate().find(|(pos, (idx, _))| *pos != **idx) {
                return Err(Error::MissingEmbedding(frame_id(&r.video_id, pos.min(idx))));
            }
            let seq = FrameSequence {
                video_id: r.video_id.clone(),
                goal: r.goal.clone(),
                category: r.category.clone(),
                frames: rows.values().map(|&row| frames.row(row).to_vec()).collect(),
                segments: r.segments.clone(),
            };
            seq.validate()?;
            Ok(seq)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_frames(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).collect()
    }

    fn two_pairs() -> Vec<Vec<f32>> {
        vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 12.0]]
    }

    #[test]
    fn two_pairs_give_pair_means() {
        let r = kmeans_cluster(&two_pairs(), 2, 3, 50).unwrap();
        let mut c = r.centroids.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 11.0]]);
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        let picks = select_keyframes(&two_pairs(), 2, 3).unwrap();
        assert_eq!(picks.len(), 2);
        assert!(picks[0] < 2 && picks[1] >= 2);
    }

    #[test]
    fn k_equals_n_has_zero_objective() {
        let frames = random_frames(12, 4, 1);
        let r = kmeans_cluster(&frames, 12, 5, 50).unwrap();
        assert_eq!(r.objective, 0.0);
        let mut a = r.assignment.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn k_one_picks_frame_nearest_mean() {
        let frames = random_frames(30, 3, 2);
        let mean: Vec<f64> = (0..3).map(|j| frames.iter().map(|f| f[j] as f64).sum::<f64>() / 30.0).collect();
        let nearest = (0..30).min_by(|&a, &b| dist2(&frames[a], &mean).total_cmp(&dist2(&frames[b], &mean))).unwrap();
        assert_eq!(select_keyframes(&frames, 1, 9).unwrap(), vec![nearest]);
    }

    #[test]
    fn errors() {
        let frames = random_frames(3, 2, 1);
        assert!(kmeans_cluster(&frames, 4, 0, 10).is_err());
        assert!(kmeans_cluster(&frames, 0, 0, 10).is_err());
        let seq = FrameSequence { video_id: "v".into(), goal: "g".into(), category: None, frames, segments: vec![] };
        assert!(sample_segment_frames(&seq, 0).is_err());
        let bad = FrameSequence { segments: vec![Segment { start: 2, end: 1, text: "x".into() }], ..seq.clone() };
        assert!(sample_segment_frames(&bad, 0).is_err());
        let overlap = FrameSequence {
            segments: vec![Segment { start: 0, end: 1, text: "a".into() }, Segment { start: 1, end: 2, text: "b".into() }],
            ..seq
        };
        assert!(overlap.validate().is_err());
    }

    #[test]
    fn duplicate_frames_still_seed_k_centroids() {
        let frames = vec![vec![1.0f32, 1.0]; 5];
        let r = kmeans_cluster(&frames, 3, 0, 10).unwrap();
        assert_eq!(r.centroids.len(), 3);
        assert_eq!(r.objective, 0.0);
        assert_eq!(select_keyframes(&frames, 3, 0).unwrap(), vec![0]);
    }

    #[test]
    fn segment_sampling() {
        let seq = FrameSequence {
            video_id: "v1".into(),
            goal: "g".into(),
            category: None,
            frames: random_frames(12, 2, 4),
            segments: vec![Segment { start: 3, end: 3, text: "a".into() }, Segment { start: 5, end: 9, text: "b".into() }],
        };
        for s in 0..50 {
            let picks = sample_segment_frames(&seq, s).unwrap();
            assert_eq!(picks[0], 3);
            assert!((5..=9).contains(&picks[1]));
            assert_eq!(picks, sample_segment_frames(&seq, s).unwrap());
        }
    }

    #[test]
    fn default_k_values() {
        assert_eq!(default_k(1), 1);
        assert_eq!(default_k(10), 1);
        assert_eq!(default_k(11), 2);
        assert_eq!(default_k(247), 25);
    }

    #[test]
    fn conversion_builds_valid_corpus() {
        let videos: Vec<FrameSequence> = (0..4)
            .map(|v| FrameSequence {
                video_id: format!("vid{v}"),
                goal: format!("goal {v}"),
                category: Some(format!("c{}", v % 2)),
                frames: random_frames(25, 6, v),
                segments: vec![Segment { start: 0, end: 4, text: "first".into() }, Segment { start: 10, end: 20, text: "second".into() }],
            })
            .collect();
        let (corpus, images) = convert_videos(&videos, ConversionMode::KMeans { k: None, cap: None, metric: Metric::Euclidean }, 1).unwrap();
        assert_eq!(corpus.articles().len(), 4);
        assert_eq!(corpus.stats().total.steps, 4 * 3);
        for a in corpus.articles() {
            for (_, s) in a.steps() {
                assert!(images.get(&s.image_id).is_some());
            }
        }
        let (seg, seg_images) = convert_videos(&videos, ConversionMode::Segments, 1).unwrap();
        assert_eq!(seg.stats().total.steps, 8);
        assert_eq!(seg_images.len(), 8);
        let again = convert_videos(&videos, ConversionMode::Segments, 1).unwrap();
        assert_eq!(again.1, seg_images);
        let capped = convert_videos(&videos, ConversionMode::KMeans { k: Some(10), cap: Some(2), metric: Metric::Cosine }, 1).unwrap();
        assert!(capped.0.articles().iter().all(|a| a.step_count() <= 2));
    }

    #[test]
    fn assemble_from_frame_ids() {
        let rows: Vec<(String, Vec<f32>)> = (0..3).map(|i| (frame_id("v", i), vec![i as f32, 1.0])).collect();
        let m = EmbeddingMatrix::from_rows(2, rows).unwrap();
        let recs = parse_video_records(
            "{\"video_id\":\"v\",\"goal\":\"make tea\",\"segments\":[{\"start\":0,\"end\":2,\"text\":\"boil\"}]}\n".as_bytes(),
        )
        .unwrap();
        let seqs = assemble_sequences(&recs, &m).unwrap();
        assert_eq!(seqs[0].frames.len(), 3);
        assert_eq!(seqs[0].frames[2], vec![2.0, 1.0]);
        let missing = vec![VideoRecord { video_id: "w".into(), goal: "x".into(), category: None, segments: vec![] }];
        assert!(matches!(assemble_sequences(&missing, &m), Err(Error::MissingEmbedding(_))));
    }
}
