//! The goal → method → step hierarchy.
//!
//! Corpora are stored as JSON lines, one article per line:
//!
//! ```text
//! {"article_id":"a1","goal_title":"Bake Fish","category":"Food","methods":[
//!   {"method_id":"a1-m1","title":"Baking the Fish","steps":[
//!     {"step_id":"a1-m1-s1","text":"Preheat the oven.","image_id":"img-1"}]}]}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub step_id: String,
    pub text: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub method_id: String,
    pub title: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub article_id: String,
    pub goal_title: String,
    pub category: String,
    pub methods: Vec<Method>,
}

impl Article {
    pub fn steps(&self) -> impl Iterator<Item = (&Method, &Step)> {
        self.methods
            .iter()
            .flat_map(|m| m.steps.iter().map(move |s| (m, s)))
    }

    pub fn step_count(&self) -> usize {
        self.methods.iter().map(|m| m.steps.len()).sum()
    }
}

/// Position of a step inside the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepLocation {
    pub article: usize,
    pub method: usize,
    pub step: usize,
}

/// Which text of the hierarchy is used as a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptLevel {
    Goal,
    Method,
    Step,
}

impl PromptLevel {
    pub const ALL: [PromptLevel; 3] = [PromptLevel::Goal, PromptLevel::Method, PromptLevel::Step];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptLevel::Goal => "goal",
            PromptLevel::Method => "method",
            PromptLevel::Step => "step",
        }
    }
}

impl std::str::FromStr for PromptLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "goal" => Ok(PromptLevel::Goal),
            "method" => Ok(PromptLevel::Method),
            "step" => Ok(PromptLevel::Step),
            other => Err(Error::InvalidArgument(format!("unknown prompt level {other:?}"))),
        }
    }
}

/// Key of a text in the text embedding file.
///
/// Goal, method and step ids live in separate namespaces, so text ids carry
/// the level as a prefix: `goal:<article_id>`, `method:<method_id>`,
/// `step:<step_id>`.
pub fn text_key(level: PromptLevel, id: &str) -> String {
    format!("{}:{}", level.as_str(), id)
}

/// A validated corpus with an image index.
#[derive(Debug, Clone)]
pub struct Corpus {
    articles: Vec<Article>,
    by_article: HashMap<String, usize>,
    by_image: HashMap<String, StepLocation>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub goals: usize,
    pub methods: usize,
    pub steps: usize,
    pub images: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.goals += rhs.goals;
        self.methods += rhs.methods;
        self.steps += rhs.steps;
        self.images += rhs.images;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub per_category: BTreeMap<String, Counts>,
    pub total: Counts,
}

impl CorpusStats {
    /// Counts for one category; zero when the category is absent.
    pub fn category(&self, name: &str) -> Counts {
        self.per_category.get(name).copied().unwrap_or_default()
    }
}

impl Corpus {
    /// Validate a list of articles and build the image index.
    pub fn from_articles(articles: Vec<Article>) -> Result<Self> {
        if articles.is_empty() {
            return Err(Error::NoArticles);
        }
        let mut by_article = HashMap::with_capacity(articles.len());
        let mut by_image = HashMap::new();
        let mut step_ids = HashSet::new();
        let mut method_ids = HashSet::new();
        for (ai, article) in articles.iter().enumerate() {
            if article.article_id.is_empty() {
                return Err(Error::InvalidCorpus(format!("article #{ai} has an empty id")));
            }
            if article.goal_title.trim().is_empty() {
                return Err(Error::InvalidCorpus(format!(
                    "article {:?} has an empty goal title",
                    article.article_id
                )));
            }
            if by_article.insert(article.article_id.clone(), ai).is_some() {
                return Err(Error::InvalidCorpus(format!(
                    "duplicate article_id {:?}",
                    article.article_id
                )));
            }
            if article.methods.is_empty() {
                return Err(Error::InvalidCorpus(format!(
                    "article {:?} has no methods",
                    article.article_id
                )));
            }
            for (mi, method) in article.methods.iter().enumerate() {
                if !method_ids.insert(method.method_id.as_str()) {
                    return Err(Error::InvalidCorpus(format!(
                        "duplicate method_id {:?}",
                        method.method_id
                    )));
                }
                if method.steps.is_empty() {
                    return Err(Error::InvalidCorpus(format!(
                        "method {:?} has no steps",
                        method.method_id
                    )));
                }
                for (si, step) in method.steps.iter().enumerate() {
                    if step.text.trim().is_empty() {
                        return Err(Error::InvalidCorpus(format!(
                            "step {:?} has empty text",
                            step.step_id
                        )));
                    }
                    if !step_ids.insert(step.step_id.as_str()) {
                        return Err(Error::InvalidCorpus(format!(
                            "duplicate step_id {:?}",
                            step.step_id
                        )));
                    }
                    let loc = StepLocation { article: ai, method: mi, step: si };
                    if by_image.insert(step.image_id.clone(), loc).is_some() {
                        return Err(Error::InvalidCorpus(format!(
                            "duplicate image_id {:?}",
                            step.image_id
                        )));
                    }
                }
            }
        }
        Ok(Corpus { articles, by_article, by_image })
    }

    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    pub fn article(&self, article_id: &str) -> Option<&Article> {
        self.by_article.get(article_id).map(|&i| &self.articles[i])
    }

    pub fn article_index(&self, article_id: &str) -> Option<usize> {
        self.by_article.get(article_id).copied()
    }

    pub fn locate_image(&self, image_id: &str) -> Option<StepLocation> {
        self.by_image.get(image_id).copied()
    }

    /// `(article_id, method_id, step_id)` owning an image.
    pub fn resolve_image(&self, image_id: &str) -> Option<(&str, &str, &str)> {
        self.locate_image(image_id).map(|loc| {
            let a = &self.articles[loc.article];
            let m = &a.methods[loc.method];
            (a.article_id.as_str(), m.method_id.as_str(), m.steps[loc.step].step_id.as_str())
        })
    }

    pub fn step_at(&self, loc: StepLocation) -> (&Article, &Method, &Step) {
        let a = &self.articles[loc.article];
        let m = &a.methods[loc.method];
        (a, m, &m.steps[loc.step])
    }

    pub fn image_count(&self) -> usize {
        self.by_image.len()
    }

    pub fn stats(&self) -> CorpusStats {
        corpus_stats(self)
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for article in corpus.articles() {
        let steps = article.step_count();
        let counts = Counts {
            goals: 1,
            methods: article.methods.len(),
            steps,
            images: steps,
        };
        *stats.per_category.entry(article.category.clone()).or_default() += counts;
        stats.total += counts;
    }
    stats
}

/// Parse a corpus from JSON-lines text. Blank lines are skipped.
pub fn parse_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut articles = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let article: Article = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        articles.push(article);
    }
    Corpus::from_articles(articles)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file))
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for article in corpus.articles() {
        serde_json::to_writer(&mut out, article)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            "all" => Ok(SplitPart::All),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> Vec<String> {
        match part {
            SplitPart::Train => self.train.clone(),
            SplitPart::Val => self.val.clone(),
            SplitPart::Test => self.test.clone(),
            SplitPart::All => self
                .train
                .iter()
                .chain(&self.val)
                .chain(&self.test)
                .cloned()
                .collect(),
        }
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Shuffle article ids with `seed` and cut them into train/val/test.
///
/// Train and val sizes are rounded half-up; test takes the remainder.
pub fn split_by_goal(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidArgument(format!("split ratios must be >= 0: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    let mut ids: Vec<String> = corpus.articles().iter().map(|a| a.article_id.clone()).collect();
    ids.shuffle(&mut seed::rng_for(seed, "split_by_goal"));
    let n = ids.len();
    let n_train = round_half_up(n as f64 * ratios[0]).min(n);
    let n_val = round_half_up(n as f64 * ratios[1]).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(DatasetSplit { train: ids, val, test, seed })
}
