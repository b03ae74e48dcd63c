//! Multiple-choice accuracy and goal→image retrieval metrics.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{text_key, Corpus, PromptLevel};
use crate::embed_store::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::models::MatchScorer;
use crate::sampler::{MCQuestion, Strategy, NUM_CHOICES};
use crate::seed;

/// Image and text feature tables.
#[derive(Clone, Copy)]
pub struct Embeddings<'a> {
    pub images: &'a EmbeddingMatrix,
    pub texts: &'a EmbeddingMatrix,
}

/// Index of the largest score; the first one wins ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub chosen: usize,
    pub scores: [f64; NUM_CHOICES],
}

pub fn answer_question<S: MatchScorer + ?Sized>(scorer: &S, q: &MCQuestion, emb: Embeddings<'_>) -> Result<Answer> {
    let text = emb.texts.require(&q.prompt_embedding_id)?;
    let mut scores = [0.0; NUM_CHOICES];
    for (slot, id) in q.candidates().into_iter().enumerate() {
        scores[slot] = scorer.score(text, emb.images.require(id)?)?;
    }
    Ok(Answer { chosen: argmax_first(&scores), scores })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mc,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_strategy: BTreeMap<Strategy, Tally>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_prompt_level: BTreeMap<PromptLevel, Tally>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub recall_at: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_rank: Option<usize>,
    pub questions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Run tag, e.g. `agg` for step-aggregated scoring.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl EvalReport {
    fn empty(task: TaskKind) -> Self {
        EvalReport {
            task,
            accuracy: None,
            per_strategy: BTreeMap::new(),
            per_prompt_level: BTreeMap::new(),
            recall_at: BTreeMap::new(),
            median_rank: None,
            questions: 0,
            pool_size: None,
            model: None,
            seed: None,
            tag: None,
        }
    }

    /// Accuracy table with one column per strategy.
    pub fn mc_table(&self, row_label: &str) -> String {
        let mut header = format!("{:<24}", "Model");
        let mut row = format!("{row_label:<24}");
        for s in Strategy::ALL {
            if let Some(t) = self.per_strategy.get(&s) {
                header.push_str(&format!("{:>12}", format!("{} ({})", capitalize(s.as_str()), t.total)));
                row.push_str(&format!("{:>12}", fmt_accuracy(t.accuracy)));
            }
        }
        format!("{header}\n{row}\n")
    }

    pub fn retrieval_table(&self, row_label: &str) -> String {
        let mut header = format!("{:<24}", "Model");
        let mut row = format!("{row_label:<24}");
        for (k, r) in &self.recall_at {
            header.push_str(&format!("{:>8}", format!("R@{k}")));
            row.push_str(&format!("{:>8.1}", r * 100.0));
        }
        header.push_str(&format!("{:>8}", "Med r"));
        row.push_str(&format!("{:>8}", self.median_rank.map_or("-".to_string(), |m| m.to_string())));
        format!("{header}\n{row}\n")
    }
}

/// `0.25` → `.2500`
fn fmt_accuracy(a: f64) -> String {
    let s = format!("{a:.4}");
    s.strip_prefix('0').map(str::to_string).unwrap_or(s)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
}

pub fn evaluate_mc<S: MatchScorer + ?Sized>(scorer: &S, questions: &[MCQuestion], emb: Embeddings<'_>) -> Result<EvalReport> {
    if questions.is_empty() {
        return Err(Error::InvalidArgument("no questions to evaluate".into()));
    }
    let outcomes: Vec<bool> = questions
        .par_iter()
        .map(|q| answer_question(scorer, q, emb).map(|a| a.chosen == q.gold_position))
        .collect::<Result<_>>()?;
    let mut report = EvalReport::empty(TaskKind::Mc);
    let mut all = Tally::default();
    for (q, ok) in questions.iter().zip(outcomes) {
        all.add(ok);
        report.per_strategy.entry(q.strategy).or_default().add(ok);
        report.per_prompt_level.entry(q.prompt_level).or_default().add(ok);
    }
    report.accuracy = Some(all.accuracy);
    report.questions = all.total;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text_id: String,
    pub gold_image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPool {
    pub image_ids: Vec<String>,
    pub queries: Vec<RetrievalQuery>,
}

pub const DEFAULT_KS_5K: [usize; 4] = [10, 25, 50, 100];
pub const DEFAULT_KS_1K: [usize; 4] = [1, 5, 10, 25];

impl RetrievalPool {
    /// Recall cut-offs used for pools of this size.
    pub fn default_ks(&self) -> Vec<usize> {
        if self.image_ids.len() >= 5000 {
            DEFAULT_KS_5K.to_vec()
        } else {
            DEFAULT_KS_1K.to_vec()
        }
    }
}

/// Pick `goals` articles from `article_ids` and `per_goal` of each one's
/// step images; each chosen goal becomes a query whose golds are its images.
pub fn build_retrieval_pool(corpus: &Corpus, article_ids: &[String], goals: usize, per_goal: usize, seed: u64) -> Result<RetrievalPool> {
    if article_ids.is_empty() || goals == 0 || per_goal == 0 {
        return Err(Error::InvalidArgument("retrieval pool needs goals and images".into()));
    }
    let mut rng = seed::rng_for(seed, "retrieval_pool");
    let picks = index::sample(&mut rng, article_ids.len(), goals.min(article_ids.len()));
    let mut pool = RetrievalPool { image_ids: Vec::new(), queries: Vec::new() };
    for i in picks {
        let article = corpus.article(&article_ids[i]).ok_or_else(|| Error::UnknownId(article_ids[i].clone()))?;
        let mut images: Vec<String> = article.steps().map(|(_, s)| s.image_id.clone()).collect();
        images.shuffle(&mut rng);
        images.truncate(per_goal);
        pool.image_ids.extend(images.iter().cloned());
        pool.queries.push(RetrievalQuery { text_id: text_key(PromptLevel::Goal, &article.article_id), gold_image_ids: images });
    }
    Ok(pool)
}

/// Best (smallest) 1-based gold rank per query. Pool images are ordered by
/// score descending, ties by ascending image id.
pub fn retrieval_ranks<S: MatchScorer + ?Sized>(scorer: &S, pool: &RetrievalPool, emb: Embeddings<'_>) -> Result<Vec<usize>> {
    if pool.image_ids.is_empty() || pool.queries.is_empty() {
        return Err(Error::InvalidArgument("empty retrieval pool".into()));
    }
    let position: std::collections::HashMap<&str, usize> =
        pool.image_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let images: Vec<&[f32]> = pool.image_ids.iter().map(|id| emb.images.require(id)).collect::<Result<_>>()?;
    let texts: Vec<&[f32]> = pool.queries.iter().map(|q| emb.texts.require(&q.text_id)).collect::<Result<_>>()?;
    let mut gold_slots = Vec::with_capacity(pool.queries.len());
    for q in &pool.queries {
        let slots: Vec<usize> = q
            .gold_image_ids
            .iter()
            .map(|g| position.get(g.as_str()).copied().ok_or_else(|| Error::InvalidArgument(format!("gold image {g:?} missing from pool"))))
            .collect::<Result<_>>()?;
        if slots.is_empty() {
            return Err(Error::InvalidArgument(format!("query {:?} has no gold images", q.text_id)));
        }
        gold_slots.push(slots);
    }
    let scores = scorer.score_matrix(&texts, &images)?;
    let ids = &pool.image_ids;
    Ok(scores
        .par_iter()
        .zip(&gold_slots)
        .map(|(row, golds)| {
            golds
                .iter()
                .map(|&g| {
                    let sg = row[g];
                    1 + row
                        .iter()
                        .enumerate()
                        .filter(|&(j, &s)| s > sg || (s == sg && ids[j] < ids[g]))
                        .count()
                })
                .min()
                .expect("non-empty golds")
        })
        .collect())
}

/// Lower median of the ranks.
pub fn lower_median(ranks: &[usize]) -> Option<usize> {
    if ranks.is_empty() {
        return None;
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Some(sorted[(sorted.len() - 1) / 2])
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> (BTreeMap<usize, f64>, Option<usize>) {
    let n = ranks.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    (recall, lower_median(ranks))
}

pub fn evaluate_retrieval<S: MatchScorer + ?Sized>(scorer: &S, pool: &RetrievalPool, emb: Embeddings<'_>, ks: &[usize]) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("recall cut-offs must be >= 1".into()));
    }
    let ranks = retrieval_ranks(scorer, pool, emb)?;
    let (recall, median) = metrics_from_ranks(&ranks, ks);
    let mut report = EvalReport::empty(TaskKind::Retrieval);
    report.recall_at = recall;
    report.median_rank = median;
    report.questions = ranks.len();
    report.pool_size = Some(pool.image_ids.len());
    Ok(report)
}

/// Uniform scores in [0, 1) derived from a hash of the text and image
/// features, so the baseline is a pure function of its inputs.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl MatchScorer for RandomScorer {
    fn score(&self, text: &[f32], image: &[f32]) -> Result<f64> {
        let mut key = String::with_capacity((text.len() + image.len()) * 9);
        for v in text.iter().chain(std::iter::once(&f32::NAN)).chain(image) {
            key.push_str(&format!("{:08x}", v.to_bits()));
        }
        Ok((seed::derive(self.seed, &key) >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// Scores every pair the same.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl MatchScorer for ConstantScorer {
    fn score(&self, _: &[f32], _: &[f32]) -> Result<f64> {
        Ok(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::QuestionSampler;
    use crate::synth::{generate_synthetic, SynthSpec};

    /// Scores 1 when the image is the gold of some question for that text.
    struct OracleScorer {
        golds: std::collections::HashSet<(Vec<u32>, Vec<u32>)>,
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    impl MatchScorer for OracleScorer {
        fn score(&self, text: &[f32], image: &[f32]) -> Result<f64> {
            Ok(if self.golds.contains(&(bits(text), bits(image))) { 1.0 } else { 0.0 })
        }
    }

    fn synth_questions(n_clusters: usize, strategy: Strategy) -> (crate::synth::SynthData, Vec<MCQuestion>) {
        let data = generate_synthetic(&SynthSpec { clusters: n_clusters, noise_scale: 0.2, ..Default::default() }).unwrap();
        let ids: Vec<String> = data.corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let qs = QuestionSampler::new(&data.corpus, &data.images)
            .unwrap()
            .make_question_set(&ids, strategy, PromptLevel::Goal, 9)
            .unwrap()
            .questions;
        (data, qs)
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_first(&[0.1, 0.5, 0.2, 0.2]), 1);
        assert_eq!(argmax_first(&[0.3, 0.3, 0.3, 0.3]), 0);
        assert_eq!(argmax_first(&[0.0, 0.7, 0.7, 0.1]), 1);
    }

    #[test]
    fn oracle_and_constant_scorers() {
        let (data, qs) = synth_questions(30, Strategy::Random);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let oracle = OracleScorer {
            golds: qs
                .iter()
                .map(|q| (bits(data.texts.get(&q.prompt_embedding_id).unwrap()), bits(data.images.get(&q.gold_image_id).unwrap())))
                .collect(),
        };
        assert_eq!(evaluate_mc(&oracle, &qs, emb).unwrap().accuracy, Some(1.0));
        let at_zero = qs.iter().filter(|q| q.gold_position == 0).count() as f64 / qs.len() as f64;
        let report = evaluate_mc(&ConstantScorer(0.3), &qs, emb).unwrap();
        assert_eq!(report.accuracy, Some(at_zero));
        assert_eq!(report.per_strategy[&Strategy::Random].total, qs.len());
        assert_eq!(report.per_prompt_level[&PromptLevel::Goal].total, qs.len());
    }

    #[test]
    fn missing_embedding_is_an_error() {
        let (data, mut qs) = synth_questions(10, Strategy::Random);
        qs[0].prompt_embedding_id = "goal:nope".into();
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        assert!(matches!(answer_question(&ConstantScorer(0.0), &qs[0], emb), Err(Error::MissingEmbedding(_))));
        assert!(evaluate_mc(&ConstantScorer(0.0), &[], emb).is_err());
    }

    #[test]
    fn evaluation_is_order_independent() {
        let (data, qs) = synth_questions(40, Strategy::Similarity);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let scorer = RandomScorer { seed: 3 };
        let a = evaluate_mc(&scorer, &qs, emb).unwrap();
        let mut rev = qs.clone();
        rev.reverse();
        let b = evaluate_mc(&scorer, &rev, emb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_query_rank_three() {
        // text [1, 0]; images ranked by cosine: a (1.0), b (0.8), gold (0.6), c (0.0)
        let texts = EmbeddingMatrix::from_rows(2, vec![("goal:q".into(), vec![1.0, 0.0])]).unwrap();
        let images = EmbeddingMatrix::from_rows(2, vec![
            ("a".into(), vec![1.0, 0.0]),
            ("b".into(), vec![0.8, 0.6]),
            ("gold".into(), vec![0.6, 0.8]),
            ("c".into(), vec![0.0, 1.0]),
        ])
        .unwrap();
        struct Dot;
        impl MatchScorer for Dot {
            fn score(&self, t: &[f32], i: &[f32]) -> Result<f64> {
                Ok(crate::embed_store::dot(t, i))
            }
        }
        let pool = RetrievalPool {
            image_ids: vec!["a".into(), "b".into(), "gold".into(), "c".into()],
            queries: vec![RetrievalQuery { text_id: "goal:q".into(), gold_image_ids: vec!["gold".into()] }],
        };
        let emb = Embeddings { images: &images, texts: &texts };
        let report = evaluate_retrieval(&Dot, &pool, emb, &[1, 5]).unwrap();
        assert_eq!(report.recall_at[&1], 0.0);
        assert_eq!(report.recall_at[&5], 1.0);
        assert_eq!(report.median_rank, Some(3));

        let mut missing = pool.clone();
        missing.queries[0].gold_image_ids.push("zzz".into());
        assert!(evaluate_retrieval(&Dot, &missing, emb, &[1]).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(lower_median(&[1, 3, 7]), Some(3));
        assert_eq!(lower_median(&[4, 1, 3, 2]), Some(2));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn recall_is_monotone_and_complete() {
        let data = generate_synthetic(&SynthSpec { clusters: 40, noise_scale: 0.3, ..Default::default() }).unwrap();
        let ids: Vec<String> = data.corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let pool = build_retrieval_pool(&data.corpus, &ids, 30, 3, 1).unwrap();
        assert_eq!(pool.image_ids.len(), 90);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let ks: Vec<usize> = vec![1, 5, 10, 25, 50, 90];
        let report = evaluate_retrieval(&RandomScorer { seed: 1 }, &pool, emb, &ks).unwrap();
        let values: Vec<f64> = report.recall_at.values().copied().collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(report.recall_at[&90], 1.0);
        assert!(report.median_rank.unwrap() >= 1);
    }

    #[test]
    fn report_tables_render() {
        let (data, qs) = synth_questions(20, Strategy::Random);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let r = evaluate_mc(&ConstantScorer(0.0), &qs, emb).unwrap();
        let t = r.mc_table("Constant");
        assert!(t.contains("Random (100)"), "{t}");
    }
}
