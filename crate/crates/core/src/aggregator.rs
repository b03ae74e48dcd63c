//! Step aggregation: an unseen goal borrows the step texts of its nearest
//! reference article, and an image is scored against both the goal and the
//! best-matching borrowed step.

use serde::{Deserialize, Serialize};

use crate::corpus::{text_key, Corpus, PromptLevel};
use crate::embed_store::{l2_normalize_f64, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::models::MatchScorer;

pub const AGG_TAG: &str = "agg";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Weight of the goal score; the best step score gets `1 − lambda`.
    pub lambda: f64,
    /// Reference articles whose steps are pooled.
    pub neighbors: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig { lambda: 0.5, neighbors: 1 }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.neighbors == 0 {
            return Err(Error::InvalidArgument("neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lambda · score(goal, image) + (1 − lambda) · max_i score(step_i, image)`.
/// At `lambda = 1` the step terms are not evaluated.
pub fn aggregate_match<S: MatchScorer + ?Sized>(scorer: &S, goal: &[f32], steps: &[&[f32]], image: &[f32], lambda: f64) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("aggregation needs at least one step".into()));
    }
    let goal_score = scorer.score(goal, image)?;
    if lambda == 1.0 {
        return Ok(goal_score);
    }
    let mut step_score = f64::NEG_INFINITY;
    for s in steps {
        step_score = step_score.max(scorer.score(s, image)?);
    }
    Ok(lambda * goal_score + (1.0 - lambda) * step_score)
}

fn unit(v: &[f32]) -> Result<Vec<f64>> {
    Ok(l2_normalize_f64(&v.iter().map(|&x| x as f64).collect::<Vec<_>>())?.0)
}

struct Entry {
    article_id: String,
    goal: Vec<f64>,
    steps: Vec<usize>,
}

/// Goal-title embeddings of a reference corpus with the text rows of every
/// step (all methods) of each article.
pub struct ReferenceIndex<'a> {
    texts: &'a EmbeddingMatrix,
    entries: Vec<Entry>,
}

impl<'a> ReferenceIndex<'a> {
    pub fn build(corpus: &Corpus, article_ids: &[String], texts: &'a EmbeddingMatrix) -> Result<Self> {
        let mut entries = Vec::with_capacity(article_ids.len());
        for id in article_ids {
            let article = corpus.article(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            let goal = texts.require(&text_key(PromptLevel::Goal, id))?;
            let goal = unit(goal)?;
            let steps = article
                .steps()
                .map(|(_, s)| {
                    let key = text_key(PromptLevel::Step, &s.step_id);
                    texts.position(&key).ok_or(Error::MissingEmbedding(key))
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(Entry { article_id: id.clone(), goal, steps });
        }
        if entries.is_empty() {
            return Err(Error::NoArticles);
        }
        entries.sort_by(|a, b| a.article_id.cmp(&b.article_id));
        Ok(ReferenceIndex { texts, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `n` articles with the highest cosine similarity to `query`,
    /// ties to the smaller article id.
    pub fn nearest(&self, query: &[f32], n: usize) -> Result<Vec<&str>> {
        let q = unit(query)?;
        if q.len() != self.entries[0].goal.len() {
            return Err(Error::DimensionMismatch { expected: self.entries[0].goal.len(), actual: q.len() });
        }
        Ok(self.nearest_entries(&q, n).into_iter().map(|e| e.article_id.as_str()).collect())
    }

    fn nearest_entries(&self, q: &[f64], n: usize) -> Vec<&Entry> {
        let mut scored: Vec<(f64, &Entry)> = self
            .entries
            .iter()
            .map(|e| (e.goal.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), e))
            .collect();
        // entries are id-sorted and the sort is stable
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.into_iter().take(n).map(|(_, e)| e).collect()
    }

    /// Step text embeddings of the `n` nearest articles.
    pub fn borrowed_steps(&self, query: &[f32], n: usize) -> Result<Vec<&'a [f32]>> {
        let q = unit(query)?;
        if q.len() != self.entries[0].goal.len() {
            return Err(Error::DimensionMismatch { expected: self.entries[0].goal.len(), actual: q.len() });
        }
        let texts = self.texts;
        Ok(self
            .nearest_entries(&q, n)
            .into_iter()
            .flat_map(|e| e.steps.iter().map(move |&r| texts.row(r)))
            .collect())
    }
}

/// Wraps a scorer so that every goal/image score is aggregated with the
/// steps of the goal's nearest reference articles.
pub struct AggregatingScorer<'a, S: ?Sized> {
    pub inner: &'a S,
    pub index: ReferenceIndex<'a>,
    pub config: AggregationConfig,
}

impl<'a, S: MatchScorer + ?Sized> AggregatingScorer<'a, S> {
    pub fn new(inner: &'a S, index: ReferenceIndex<'a>, config: AggregationConfig) -> Result<Self> {
        config.validate()?;
        Ok(AggregatingScorer { inner, index, config })
    }
}

impl<S: MatchScorer + ?Sized> MatchScorer for AggregatingScorer<'_, S> {
    fn score(&self, text: &[f32], image: &[f32]) -> Result<f64> {
        if self.config.lambda == 1.0 {
            return self.inner.score(text, image);
        }
        let steps = self.index.borrowed_steps(text, self.config.neighbors)?;
        aggregate_match(self.inner, text, &steps, image, self.config.lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::article;
    use crate::embed_store::dot;

    /// Score = plain dot product, so expected values are easy to write down.
    struct Dot;

    impl MatchScorer for Dot {
        fn score(&self, text: &[f32], image: &[f32]) -> Result<f64> {
            Ok(dot(text, image))
        }
    }

    #[test]
    fn interpolation_examples() {
        let img = [1.0f32, 0.0];
        let goal = [0.2f32, 0.0];
        let steps: [&[f32]; 2] = [&[0.6, 0.0], &[0.1, 5.0]];
        assert!((aggregate_match(&Dot, &goal, &steps, &img, 0.5).unwrap() - 0.4).abs() < 1e-7);
        assert_eq!(aggregate_match(&Dot, &goal, &steps, &img, 1.0).unwrap(), Dot.score(&goal, &img).unwrap());
        assert!((aggregate_match(&Dot, &goal, &steps, &img, 0.0).unwrap() - 0.6).abs() < 1e-7);
        // a step below the current max changes nothing
        let more: [&[f32]; 3] = [&[0.6, 0.0], &[0.1, 5.0], &[0.3, 0.0]];
        assert_eq!(
            aggregate_match(&Dot, &goal, &more, &img, 0.5).unwrap(),
            aggregate_match(&Dot, &goal, &steps, &img, 0.5).unwrap()
        );
        assert!(aggregate_match(&Dot, &goal, &[], &img, 0.5).is_err());
    }

    fn reference() -> (Corpus, EmbeddingMatrix) {
        let corpus = Corpus::from_articles(vec![article("b", "c", &[2]), article("a", "c", &[1]), article("c", "c", &[1])]).unwrap();
        let rows = vec![
            (text_key(PromptLevel::Goal, "a"), vec![1.0, 0.0]),
            (text_key(PromptLevel::Goal, "b"), vec![2.0, 0.0]),
            (text_key(PromptLevel::Goal, "c"), vec![0.0, 1.0]),
            (text_key(PromptLevel::Step, "a-m0-s0"), vec![0.5, 0.5]),
            (text_key(PromptLevel::Step, "b-m0-s0"), vec![0.0, 3.0]),
            (text_key(PromptLevel::Step, "b-m0-s1"), vec![3.0, 0.0]),
            (text_key(PromptLevel::Step, "c-m0-s0"), vec![-1.0, 0.0]),
        ];
        (corpus, EmbeddingMatrix::from_rows(2, rows).unwrap())
    }

    #[test]
    fn nearest_article_ties_by_id() {
        let (corpus, texts) = reference();
        let ids: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let index = ReferenceIndex::build(&corpus, &ids, &texts).unwrap();
        // a and b have the same direction
        assert_eq!(index.nearest(&[3.0, 0.1], 1).unwrap(), vec!["a"]);
        assert_eq!(index.nearest(&[3.0, 0.1], 2).unwrap(), vec!["a", "b"]);
        assert_eq!(index.nearest(&[0.0, 1.0], 1).unwrap(), vec!["c"]);
        let single = ReferenceIndex::build(&corpus, &["c".to_string()], &texts).unwrap();
        assert_eq!(single.nearest(&[1.0, 0.0], 1).unwrap(), vec!["c"]);
        assert!(index.nearest(&[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn scorer_pools_neighbor_steps() {
        let (corpus, texts) = reference();
        let ids: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let img = [0.0f32, 1.0];
        let one = AggregatingScorer::new(&Dot, ReferenceIndex::build(&corpus, &ids, &texts).unwrap(), AggregationConfig::default()).unwrap();
        // nearest is a: max step score 0.5
        assert!((one.score(&[1.0, 0.0], &img).unwrap() - 0.25).abs() < 1e-7);
        let two = AggregatingScorer::new(
            &Dot,
            ReferenceIndex::build(&corpus, &ids, &texts).unwrap(),
            AggregationConfig { lambda: 0.5, neighbors: 2 },
        )
        .unwrap();
        // a and b pooled: b's first step scores 3
        assert!((two.score(&[1.0, 0.0], &img).unwrap() - 1.5).abs() < 1e-7);
        assert!(AggregationConfig { lambda: 1.5, neighbors: 1 }.validate().is_err());
    }
}
