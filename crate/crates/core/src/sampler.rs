//! Four-way multiple-choice question construction.
//!
//! Each question pairs a prompt text (goal, method title or step text) with the
//! step's image and three distractors drawn from three distinct other
//! articles, using one of three strategies:
//!
//! * `random`: three random other articles, one random image each;
//! * `similarity`: the three images nearest to the gold image (cosine on the raw
//!   image features), at most one per article;
//! * `category`: like `random`, restricted to articles of the gold's category.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{text_key, Corpus, PromptLevel, StepLocation};
use crate::embed_store::{dot, norm, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Similarity,
    Category,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Similarity, Strategy::Category];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Similarity => "similarity",
            Strategy::Category => "category",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "similarity" => Ok(Strategy::Similarity),
            "category" => Ok(Strategy::Category),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

pub const NUM_CHOICES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQuestion {
    pub prompt_text: String,
    pub prompt_level: PromptLevel,
    pub prompt_embedding_id: String,
    pub gold_image_id: String,
    pub distractor_image_ids: Vec<String>,
    pub strategy: Strategy,
    /// Slot of the gold image among the four presented candidates.
    pub gold_position: usize,
    pub article_id: String,
    pub step_id: String,
    /// Feature space the similarity neighbors were computed in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_anchor: Option<String>,
}

impl MCQuestion {
    /// Candidate image ids in presentation order.
    pub fn candidates(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.distractor_image_ids.iter().map(String::as_str).collect();
        out.insert(self.gold_position.min(out.len()), &self.gold_image_id);
        out
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("question for step {:?}: {m}", self.step_id)));
        if self.distractor_image_ids.len() != NUM_CHOICES - 1 {
            return bad("needs exactly 3 distractors");
        }
        if self.gold_position >= NUM_CHOICES {
            return bad("gold position out of range");
        }
        let mut articles = HashSet::new();
        let gold = corpus
            .locate_image(&self.gold_image_id)
            .ok_or_else(|| Error::UnknownId(self.gold_image_id.clone()))?;
        articles.insert(gold.article);
        for d in &self.distractor_image_ids {
            let loc = corpus.locate_image(d).ok_or_else(|| Error::UnknownId(d.clone()))?;
            if !articles.insert(loc.article) {
                return bad("distractors must come from distinct non-gold articles");
            }
        }
        Ok(())
    }
}

/// Exact cosine nearest-neighbor index over image features, tagged by article.
pub struct NNIndex<'a> {
    images: &'a EmbeddingMatrix,
    articles: Vec<usize>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub image_id: String,
    pub article: usize,
    pub similarity: f64,
}

pub fn build_index<'a>(images: &'a EmbeddingMatrix, corpus: &Corpus) -> Result<NNIndex<'a>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot index zero images".into()));
    }
    let mut articles = Vec::with_capacity(images.len());
    let mut norms = Vec::with_capacity(images.len());
    for (id, row) in images.rows() {
        let loc = corpus.locate_image(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::ZeroNorm("indexed image"));
        }
        articles.push(loc.article);
        norms.push(n);
    }
    Ok(NNIndex { images, articles, norms })
}

impl NNIndex<'_> {
    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    /// The `k` most similar images, at most one per article, skipping the
    /// excluded articles (by corpus index). Ties go to the smaller image id.
    pub fn query(&self, query: &[f32], k: usize, exclude_articles: &HashSet<usize>) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if query.len() != self.images.dim() {
            return Err(Error::DimensionMismatch { expected: self.images.dim(), actual: query.len() });
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::ZeroNorm("knn query"));
        }
        let ids = self.images.ids();
        // best row per article
        let mut best: std::collections::HashMap<usize, (f64, usize)> = std::collections::HashMap::new();
        for (row, &article) in self.articles.iter().enumerate() {
            if exclude_articles.contains(&article) {
                continue;
            }
            let sim = dot(query, self.images.row(row)) / (qn * self.norms[row]);
            best.entry(article)
                .and_modify(|cur| {
                    if sim > cur.0 || (sim == cur.0 && ids[row] < ids[cur.1]) {
                        *cur = (sim, row);
                    }
                })
                .or_insert((sim, row));
        }
        if best.len() < k {
            return Err(Error::InsufficientCandidates { needed: k, found: best.len() });
        }
        let mut hits: Vec<(f64, usize, usize)> = best.into_iter().map(|(a, (s, r))| (s, r, a)).collect();
        hits.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| ids[a.1].cmp(&ids[b.1])));
        Ok(hits
            .into_iter()
            .take(k)
            .map(|(similarity, row, article)| Neighbor { image_id: ids[row].clone(), article, similarity })
            .collect())
    }
}

/// Query by article id strings.
pub fn knn_query(index: &NNIndex<'_>, corpus: &Corpus, query: &[f32], k: usize, exclude_articles: &HashSet<String>) -> Result<Vec<String>> {
    let exclude = exclude_articles
        .iter()
        .filter_map(|a| corpus.article_index(a))
        .collect();
    Ok(index.query(query, k, &exclude)?.into_iter().map(|n| n.image_id).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptRef {
    pub location: StepLocation,
    pub level: PromptLevel,
}

/// Skipped step and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub step_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub questions: Vec<MCQuestion>,
    pub skipped: Vec<Skip>,
}

pub struct QuestionSampler<'a> {
    corpus: &'a Corpus,
    images: &'a EmbeddingMatrix,
    index: NNIndex<'a>,
    /// article indices per category, in corpus order
    by_category: std::collections::HashMap<&'a str, Vec<usize>>,
}

impl<'a> QuestionSampler<'a> {
    pub fn new(corpus: &'a Corpus, images: &'a EmbeddingMatrix) -> Result<Self> {
        for article in corpus.articles() {
            for (_, step) in article.steps() {
                images.require(&step.image_id)?;
            }
        }
        let index = build_index(images, corpus)?;
        let mut by_category: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
        for (i, a) in corpus.articles().iter().enumerate() {
            by_category.entry(a.category.as_str()).or_default().push(i);
        }
        Ok(QuestionSampler { corpus, images, index, by_category })
    }

    pub fn index(&self) -> &NNIndex<'a> {
        &self.index
    }

    fn random_distractors(&self, pool: &[usize], gold_article: usize, rng: &mut impl Rng) -> Result<Vec<String>> {
        let others: Vec<usize> = pool.iter().copied().filter(|&a| a != gold_article).collect();
        if others.len() < NUM_CHOICES - 1 {
            return Err(Error::InsufficientCandidates { needed: NUM_CHOICES - 1, found: others.len() });
        }
        let picks = index::sample(rng, others.len(), NUM_CHOICES - 1);
        Ok(picks
            .into_iter()
            .map(|i| {
                let article = &self.corpus.articles()[others[i]];
                let images: Vec<&str> = article.steps().map(|(_, s)| s.image_id.as_str()).collect();
                images.choose(rng).expect("validated article has steps").to_string()
            })
            .collect())
    }

    pub fn make_question(&self, prompt: PromptRef, strategy: Strategy, seed: u64) -> Result<MCQuestion> {
        let (article, method, step) = self.corpus.step_at(prompt.location);
        let gold_article = prompt.location.article;
        let mut rng = seed::rng_for(seed, &step.step_id);
        let (distractors, anchor) = match strategy {
            Strategy::Random => {
                let all: Vec<usize> = (0..self.corpus.articles().len()).collect();
                (self.random_distractors(&all, gold_article, &mut rng)?, None)
            }
            Strategy::Category => {
                let pool = &self.by_category[article.category.as_str()];
                (self.random_distractors(pool, gold_article, &mut rng)?, None)
            }
            Strategy::Similarity => {
                let gold = self.images.require(&step.image_id)?;
                let exclude = HashSet::from([gold_article]);
                let hits = self.index.query(gold, NUM_CHOICES - 1, &exclude)?;
                (hits.into_iter().map(|n| n.image_id).collect(), Some("gold_image".to_string()))
            }
        };
        let (prompt_text, embedding_id) = match prompt.level {
            PromptLevel::Goal => (article.goal_title.clone(), text_key(PromptLevel::Goal, &article.article_id)),
            PromptLevel::Method => (method.title.clone(), text_key(PromptLevel::Method, &method.method_id)),
            PromptLevel::Step => (step.text.clone(), text_key(PromptLevel::Step, &step.step_id)),
        };
        Ok(MCQuestion {
            prompt_text,
            prompt_level: prompt.level,
            prompt_embedding_id: embedding_id,
            gold_image_id: step.image_id.clone(),
            distractor_image_ids: distractors,
            strategy,
            gold_position: rng.random_range(0..NUM_CHOICES),
            article_id: article.article_id.clone(),
            step_id: step.step_id.clone(),
            similarity_anchor: anchor,
        })
    }

    /// One question per step of the listed articles, in article then step order.
    /// Steps whose candidate pool is too small are skipped and logged.
    pub fn make_question_set(&self, article_ids: &[String], strategy: Strategy, level: PromptLevel, seed: u64) -> Result<QuestionSet> {
        let mut prompts = Vec::new();
        for id in article_ids {
            let ai = self.corpus.article_index(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            for (mi, m) in self.corpus.articles()[ai].methods.iter().enumerate() {
                for si in 0..m.steps.len() {
                    prompts.push(PromptRef { location: StepLocation { article: ai, method: mi, step: si }, level });
                }
            }
        }
        self.make_questions(&prompts, strategy, seed)
    }

    /// Questions for explicit prompts, in prompt order, skipping steps whose
    /// candidate pool is too small.
    pub fn make_questions(&self, prompts: &[PromptRef], strategy: Strategy, seed: u64) -> Result<QuestionSet> {
        let results: Vec<(PromptRef, Result<MCQuestion>)> = prompts
            .par_iter()
            .map(|&p| (p, self.make_question(p, strategy, seed)))
            .collect();
        let mut set = QuestionSet::default();
        for (p, r) in results {
            match r {
                Ok(q) => set.questions.push(q),
                Err(e @ Error::InsufficientCandidates { .. }) => {
                    let step_id = self.corpus.step_at(p.location).2.step_id.clone();
                    log::warn!("skipping step {step_id}: {e}");
                    set.skipped.push(Skip { step_id, reason: e.to_string() });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(set)
    }
}

pub fn make_question(corpus: &Corpus, images: &EmbeddingMatrix, prompt: PromptRef, strategy: Strategy, seed: u64) -> Result<MCQuestion> {
    QuestionSampler::new(corpus, images)?.make_question(prompt, strategy, seed)
}

pub fn make_question_set(corpus: &Corpus, images: &EmbeddingMatrix, article_ids: &[String], strategy: Strategy, level: PromptLevel, seed: u64) -> Result<QuestionSet> {
    QuestionSampler::new(corpus, images)?.make_question_set(article_ids, strategy, level, seed)
}

pub fn write_questions(questions: &[MCQuestion], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for q in questions {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_questions(path: impl AsRef<Path>) -> Result<Vec<MCQuestion>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::article;
    use crate::synth::{generate_synthetic, SynthSpec};

    fn fixture(n_articles: usize, category_of: impl Fn(usize) -> String) -> (Corpus, EmbeddingMatrix) {
        let corpus = Corpus::from_articles(
            (0..n_articles).map(|i| article(&format!("a{i}"), &category_of(i), &[2])).collect(),
        )
        .unwrap();
        let mut rows = Vec::new();
        for (i, a) in corpus.articles().iter().enumerate() {
            for (j, (_, s)) in a.steps().enumerate() {
                rows.push((s.image_id.clone(), vec![1.0 + i as f32, j as f32 + 0.5, (i * j) as f32 * 0.1]));
            }
        }
        (corpus, EmbeddingMatrix::from_rows(3, rows).unwrap())
    }

    fn loc(a: usize) -> StepLocation {
        StepLocation { article: a, method: 0, step: 0 }
    }

    #[test]
    fn single_image_index() {
        let corpus = Corpus::from_articles(vec![article("a", "C", &[1])]).unwrap();
        let images = EmbeddingMatrix::from_rows(2, vec![("img-a-0-0".into(), vec![0.3, 0.4])]).unwrap();
        let index = build_index(&images, &corpus).unwrap();
        let hits = knn_query(&index, &corpus, &[0.3, 0.4], 1, &HashSet::new()).unwrap();
        assert_eq!(hits, vec!["img-a-0-0".to_string()]);
    }

    #[test]
    fn empty_index_rejected() {
        let corpus = Corpus::from_articles(vec![article("a", "C", &[1])]).unwrap();
        let images = EmbeddingMatrix::new(2, vec![], vec![]).unwrap();
        assert!(build_index(&images, &corpus).is_err());
    }

    #[test]
    fn excluding_everything_is_insufficient() {
        let (corpus, images) = fixture(5, |_| "C".into());
        let index = build_index(&images, &corpus).unwrap();
        let all: HashSet<String> = corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let err = knn_query(&index, &corpus, images.row(0), 1, &all).unwrap_err();
        assert!(err.to_string().contains("insufficient candidates"));
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let corpus = Corpus::from_articles(vec![article("a", "C", &[1]), article("b", "C", &[1]), article("c", "C", &[1])]).unwrap();
        let images = EmbeddingMatrix::from_rows(2, vec![
            ("img-c-0-0".into(), vec![1.0, 0.0]),
            ("img-b-0-0".into(), vec![2.0, 0.0]),
            ("img-a-0-0".into(), vec![0.0, 1.0]),
        ])
        .unwrap();
        let index = build_index(&images, &corpus).unwrap();
        let hits = knn_query(&index, &corpus, &[1.0, 0.0], 3, &HashSet::new()).unwrap();
        assert_eq!(hits, vec!["img-b-0-0", "img-c-0-0", "img-a-0-0"]);
    }

    #[test]
    fn four_articles_force_random_choice() {
        let (corpus, images) = fixture(4, |_| "C".into());
        let q = make_question(&corpus, &images, PromptRef { location: loc(0), level: PromptLevel::Goal }, Strategy::Random, 3).unwrap();
        q.validate(&corpus).unwrap();
        let mut arts: Vec<&str> = q.distractor_image_ids.iter().map(|d| corpus.resolve_image(d).unwrap().0).collect();
        arts.sort();
        assert_eq!(arts, vec!["a1", "a2", "a3"]);
        assert_eq!(q.prompt_text, "Goal a0");
        assert_eq!(q.prompt_embedding_id, "goal:a0");
    }

    #[test]
    fn category_needs_three_others() {
        let (corpus, images) = fixture(6, |i| if i < 3 { "X".into() } else { "Y".into() });
        let err = make_question(&corpus, &images, PromptRef { location: loc(0), level: PromptLevel::Goal }, Strategy::Category, 1).unwrap_err();
        assert!(matches!(err, Error::InsufficientCandidates { .. }));
        let (corpus, images) = fixture(8, |i| if i < 4 { "X".into() } else { "Y".into() });
        let q = make_question(&corpus, &images, PromptRef { location: loc(0), level: PromptLevel::Goal }, Strategy::Category, 1).unwrap();
        for d in &q.distractor_image_ids {
            let a = corpus.article(corpus.resolve_image(d).unwrap().0).unwrap();
            assert_eq!(a.category, "X");
        }
    }

    #[test]
    fn two_articles_all_skipped() {
        let (corpus, images) = fixture(2, |_| "C".into());
        let ids: Vec<String> = corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let set = make_question_set(&corpus, &images, &ids, Strategy::Random, PromptLevel::Goal, 1).unwrap();
        assert!(set.questions.is_empty());
        assert_eq!(set.skipped.len(), 4);
    }

    #[test]
    fn step_prompts_use_step_text_and_set_is_deterministic() {
        let data = generate_synthetic(&SynthSpec { clusters: 20, steps_per_article: 5, ..Default::default() }).unwrap();
        let ids: Vec<String> = data.corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let sampler = QuestionSampler::new(&data.corpus, &data.images).unwrap();
        let a = sampler.make_question_set(&ids, Strategy::Random, PromptLevel::Step, 11).unwrap();
        assert_eq!(a.questions.len(), 100);
        for q in &a.questions {
            let (_, _, step) = data.corpus.step_at(data.corpus.locate_image(&q.gold_image_id).unwrap());
            assert_eq!(q.prompt_text, step.text);
            assert_eq!(q.prompt_embedding_id, format!("step:{}", step.step_id));
            q.validate(&data.corpus).unwrap();
        }
        let b = sampler.make_question_set(&ids, Strategy::Random, PromptLevel::Step, 11).unwrap();
        assert_eq!(a, b);
        let positions: HashSet<usize> = a.questions.iter().map(|q| q.gold_position).collect();
        assert_eq!(positions.len(), 4);
    }

    #[test]
    fn similarity_matches_linear_scan() {
        let data = generate_synthetic(&SynthSpec { clusters: 20, noise_scale: 0.3, ..Default::default() }).unwrap();
        let sampler = QuestionSampler::new(&data.corpus, &data.images).unwrap();
        let ids: Vec<String> = data.corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let set = sampler.make_question_set(&ids, Strategy::Similarity, PromptLevel::Goal, 0).unwrap();
        for q in &set.questions {
            let gold = data.images.get(&q.gold_image_id).unwrap();
            let gold_article = data.corpus.resolve_image(&q.gold_image_id).unwrap().0;
            // oracle: sort every other-article image by (sim desc, id asc), keep first per article
            let mut all: Vec<(f64, &str)> = data
                .images
                .rows()
                .filter(|(id, _)| data.corpus.resolve_image(id).unwrap().0 != gold_article)
                .map(|(id, v)| (crate::embed_store::cosine_similarity(gold, v).unwrap(), id))
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            let mut seen = HashSet::new();
            let expected: Vec<&str> = all
                .into_iter()
                .filter(|(_, id)| seen.insert(data.corpus.resolve_image(id).unwrap().0))
                .take(3)
                .map(|(_, id)| id)
                .collect();
            assert_eq!(q.distractor_image_ids, expected);
            assert_eq!(q.similarity_anchor.as_deref(), Some("gold_image"));
        }
    }

    #[test]
    fn questions_file_roundtrip() {
        let data = generate_synthetic(&SynthSpec::default()).unwrap();
        let ids: Vec<String> = data.corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let set = make_question_set(&data.corpus, &data.images, &ids, Strategy::Similarity, PromptLevel::Method, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        write_questions(&set.questions, &path).unwrap();
        assert_eq!(read_questions(&path).unwrap(), set.questions);
    }

    #[test]
    fn candidates_place_gold() {
        let q = MCQuestion {
            prompt_text: "p".into(),
            prompt_level: PromptLevel::Goal,
            prompt_embedding_id: "goal:a".into(),
            gold_image_id: "g".into(),
            distractor_image_ids: vec!["x".into(), "y".into(), "z".into()],
            strategy: Strategy::Random,
            gold_position: 2,
            article_id: "a".into(),
            step_id: "s".into(),
            similarity_anchor: None,
        };
        assert_eq!(q.candidates(), vec!["x", "y", "g", "z"]);
    }
}
