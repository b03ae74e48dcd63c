//! Pretrain → zero-shot / K-shot transfer protocols and learning curves.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{round_half_up, Corpus, PromptLevel, StepLocation};
use crate::embed_store::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_mc, Embeddings};
use crate::models::checkpoint::Checkpoint;
use crate::models::{ModelDims, ModelParams};
use crate::sampler::{MCQuestion, PromptRef, QuestionSampler, Strategy};
use crate::seed;
use crate::trainer::{fine_tune, train, TrainConfig};

pub const DEFAULT_BUDGETS: [usize; 6] = [0, 5, 10, 15, 20, 25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Every goal appears in training; each goal's steps are divided
    /// between the training pool and the test set.
    KshotSeenGoals,
    /// Goals are divided; test goals are never trained on.
    SplitUnseenGoals,
}

impl std::str::FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kshot_seen_goals" | "seen" => Ok(TransferMode::KshotSeenGoals),
            "split_unseen_goals" | "unseen" => Ok(TransferMode::SplitUnseenGoals),
            _ => Err(Error::InvalidArgument(format!("unknown transfer mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferProtocol {
    pub mode: TransferMode,
    /// Training questions per goal, one curve point each.
    pub budgets: Vec<usize>,
    /// Train share: of goals (unseen mode) or of each goal's steps (seen mode).
    pub train_ratio: f64,
    pub seed: u64,
    /// Strategy of the training-pool questions.
    pub train_strategy: Strategy,
    pub level: PromptLevel,
}

impl TransferProtocol {
    pub fn new(mode: TransferMode, seed: u64) -> Self {
        TransferProtocol {
            mode,
            budgets: DEFAULT_BUDGETS.to_vec(),
            train_ratio: 0.8,
            seed,
            train_strategy: Strategy::Random,
            level: PromptLevel::Goal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!("train ratio must be in (0, 1), got {}", self.train_ratio)));
        }
        if self.budgets.is_empty() {
            return Err(Error::InvalidArgument("no budgets".into()));
        }
        Ok(())
    }
}

/// Seeded goal split; the train side gets `round_half_up(ratio · n)` goals,
/// clamped so both sides are non-empty. Both lists come back sorted.
pub fn split_goals(goals: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if goals.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 goals, got {}", goals.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("ratio must be in (0, 1), got {ratio}")));
    }
    let mut ids = goals.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != goals.len() {
        return Err(Error::InvalidArgument("duplicate goal ids".into()));
    }
    ids.shuffle(&mut seed::rng_for(seed, "split_goals"));
    let n_train = round_half_up(ids.len() as f64 * ratio).clamp(1, ids.len() - 1);
    let mut test = ids.split_off(n_train);
    ids.sort();
    test.sort();
    Ok((ids, test))
}

pub fn group_by_goal(questions: Vec<MCQuestion>) -> BTreeMap<String, Vec<MCQuestion>> {
    let mut out: BTreeMap<String, Vec<MCQuestion>> = BTreeMap::new();
    for q in questions {
        out.entry(q.article_id.clone()).or_default().push(q);
    }
    out
}

/// The first `min(k, available)` questions of a seeded per-goal permutation.
/// The permutation does not depend on `k`, so sets for growing `k` are
/// nested.
pub fn build_kshot_set(by_goal: &BTreeMap<String, Vec<MCQuestion>>, k: usize, seed: u64) -> Vec<MCQuestion> {
    let mut out = Vec::new();
    for (goal, questions) in by_goal {
        if questions.len() < k {
            log::warn!("goal {goal} has {} questions, fewer than k = {k}", questions.len());
        }
        let mut order: Vec<usize> = (0..questions.len()).collect();
        order.shuffle(&mut seed::rng_for(seed::derive(seed, "kshot"), goal));
        out.extend(order.into_iter().take(k).map(|i| questions[i].clone()));
    }
    out
}

/// Target-domain questions: a per-goal training pool and one test set per
/// strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferData {
    pub train_pool: BTreeMap<String, Vec<MCQuestion>>,
    pub test: Vec<(Strategy, Vec<MCQuestion>)>,
}

pub fn prepare_transfer(corpus: &Corpus, images: &EmbeddingMatrix, protocol: &TransferProtocol) -> Result<TransferData> {
    protocol.validate()?;
    let sampler = QuestionSampler::new(corpus, images)?;
    let mut train_prompts = Vec::new();
    let mut test_prompts = Vec::new();
    let prompts_of = |ai: usize| -> Vec<PromptRef> {
        corpus.articles()[ai]
            .methods
            .iter()
            .enumerate()
            .flat_map(|(mi, m)| {
                (0..m.steps.len()).map(move |si| PromptRef { location: StepLocation { article: ai, method: mi, step: si }, level: protocol.level })
            })
            .collect()
    };
    match protocol.mode {
        TransferMode::SplitUnseenGoals => {
            let ids: Vec<String> = corpus.articles().iter().map(|a| a.article_id.clone()).collect();
            let (train_goals, test_goals) = split_goals(&ids, protocol.train_ratio, protocol.seed)?;
            for id in &train_goals {
                train_prompts.extend(prompts_of(corpus.article_index(id).expect("listed id")));
            }
            for id in &test_goals {
                test_prompts.extend(prompts_of(corpus.article_index(id).expect("listed id")));
            }
        }
        TransferMode::KshotSeenGoals => {
            for (ai, article) in corpus.articles().iter().enumerate() {
                let mut prompts = prompts_of(ai);
                if prompts.len() < 2 {
                    return Err(Error::InvalidArgument(format!("goal {} needs at least 2 steps", article.article_id)));
                }
                prompts.shuffle(&mut seed::rng_for(seed::derive(protocol.seed, "seen_steps"), &article.article_id));
                let n_train = round_half_up(prompts.len() as f64 * protocol.train_ratio).clamp(1, prompts.len() - 1);
                let test = prompts.split_off(n_train);
                train_prompts.extend(prompts);
                test_prompts.extend(test);
            }
        }
    }
    let pool = sampler.make_questions(&train_prompts, protocol.train_strategy, seed::derive(protocol.seed, "pool"))?;
    let mut test = Vec::new();
    for s in Strategy::ALL {
        let questions = sampler.make_questions(&test_prompts, s, seed::derive(protocol.seed, "test"))?.questions;
        if questions.is_empty() {
            log::warn!("no {} test questions; strategy dropped", s.as_str());
        } else {
            test.push((s, questions));
        }
    }
    Ok(TransferData { train_pool: group_by_goal(pool.questions), test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Questions per goal.
    pub budget: usize,
    /// Training questions actually used.
    pub examples: usize,
    pub strategy: Strategy,
    pub accuracy: f64,
}

/// For each budget: fine-tune the checkpoint (or train from scratch without
/// one) on the K-shot set and evaluate every test strategy. Budget 0
/// evaluates the checkpoint, or an untrained model, as is. The fine-tuning
/// runs have no validation set and use `config.max_epochs`.
pub fn run_learning_curve(
    checkpoint: Option<&Checkpoint>,
    protocol: &TransferProtocol,
    config: &TrainConfig,
    data: &TransferData,
    emb: Embeddings<'_>,
) -> Result<Vec<CurveRow>> {
    protocol.validate()?;
    let mut rows = Vec::new();
    for &budget in &protocol.budgets {
        let train_set = build_kshot_set(&data.train_pool, budget, protocol.seed);
        let params = match (checkpoint, train_set.is_empty()) {
            (Some(c), true) => c.params.clone(),
            (Some(c), false) => fine_tune(c, config, &train_set, &[], emb)?.checkpoint.params,
            (None, true) => {
                let dims = ModelDims { goal: emb.texts.dim(), image: emb.images.dim(), joint: config.joint_dim };
                ModelParams::init(config.model, dims, config.seed)
            }
            (None, false) => train(config, &train_set, &[], emb)?.checkpoint.params,
        };
        for (strategy, questions) in &data.test {
            let accuracy = evaluate_mc(&params, questions, emb)?.accuracy.unwrap_or(0.0);
            rows.push(CurveRow { budget, examples: train_set.len(), strategy: *strategy, accuracy });
        }
    }
    Ok(rows)
}

pub fn format_curve(rows: &[CurveRow]) -> String {
    let mut out = String::from("budget\texamples\tstrategy\taccuracy\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{:.4}\n", r.budget, r.examples, r.strategy.as_str(), r.accuracy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use crate::synth::{generate_synthetic, SynthSpec};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i:04}")).collect()
    }

    #[test]
    fn goal_split_sizes() {
        let (tr, te) = split_goals(&ids(10), 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr, te) = split_goals(&ids(869), 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (695, 174));
        assert!(tr.iter().all(|g| !te.contains(g)));
        assert_eq!(split_goals(&ids(869), 0.8, 1).unwrap().0, tr);
        assert!(split_goals(&ids(1), 0.8, 1).is_err());
        let (tr, te) = split_goals(&ids(2), 0.99, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }

    fn pool(goals: usize, per_goal: usize) -> BTreeMap<String, Vec<MCQuestion>> {
        let data = generate_synthetic(&SynthSpec { clusters: goals, steps_per_article: per_goal, ..Default::default() }).unwrap();
        let sampler = QuestionSampler::new(&data.corpus, &data.images).unwrap();
        let all: Vec<String> = data.corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        group_by_goal(sampler.make_question_set(&all, Strategy::Random, PromptLevel::Goal, 1).unwrap().questions)
    }

    #[test]
    fn kshot_counts_and_nesting() {
        let by_goal = pool(180, 6);
        assert!(build_kshot_set(&by_goal, 0, 3).is_empty());
        let five = build_kshot_set(&by_goal, 5, 3);
        assert_eq!(five.len(), 900);
        assert_eq!(five, build_kshot_set(&by_goal, 5, 3));
        let six = build_kshot_set(&by_goal, 6, 3);
        for goal in by_goal.keys() {
            let a: Vec<&str> = five.iter().filter(|q| &q.article_id == goal).map(|q| q.step_id.as_str()).collect();
            let b: Vec<&str> = six.iter().filter(|q| &q.article_id == goal).map(|q| q.step_id.as_str()).collect();
            assert_eq!(a[..], b[..5]);
        }
        // fewer than k available: take everything
        assert_eq!(build_kshot_set(&by_goal, 50, 3).len(), 180 * 6);
    }

    #[test]
    fn seen_mode_keeps_goals_and_separates_steps() {
        let data = generate_synthetic(&SynthSpec { clusters: 10, steps_per_article: 10, ..Default::default() }).unwrap();
        let protocol = TransferProtocol::new(TransferMode::KshotSeenGoals, 4);
        let t = prepare_transfer(&data.corpus, &data.images, &protocol).unwrap();
        assert_eq!(t.train_pool.len(), 10);
        assert!(t.train_pool.values().all(|q| q.len() == 8));
        let (_, test) = &t.test[0];
        assert_eq!(test.len(), 20);
        for q in test {
            assert!(t.train_pool[&q.article_id].iter().all(|p| p.step_id != q.step_id));
        }
        let unseen = prepare_transfer(&data.corpus, &data.images, &TransferProtocol::new(TransferMode::SplitUnseenGoals, 4)).unwrap();
        assert_eq!(unseen.train_pool.len(), 8);
        assert!(unseen.test[0].1.iter().all(|q| !unseen.train_pool.contains_key(&q.article_id)));
    }

    #[test]
    fn zero_budget_rows() {
        let data = generate_synthetic(&SynthSpec { clusters: 12, steps_per_article: 6, ..Default::default() }).unwrap();
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let protocol = TransferProtocol { budgets: vec![0], ..TransferProtocol::new(TransferMode::KshotSeenGoals, 2) };
        let t = prepare_transfer(&data.corpus, &data.images, &protocol).unwrap();
        let config = TrainConfig { joint_dim: 8, ..TrainConfig::new(ModelKind::Triplet) };
        let ckpt = Checkpoint::new(ModelParams::init(ModelKind::Triplet, ModelDims { goal: 32, image: 32, joint: 8 }, 5), 0.2);
        let rows = run_learning_curve(Some(&ckpt), &protocol, &config, &t, emb).unwrap();
        // four categories of three goals leave too few category distractors
        assert_eq!(t.test.len(), 2);
        assert_eq!(rows.len(), 2);
        for (row, (_, qs)) in rows.iter().zip(&t.test) {
            assert_eq!(row.accuracy, evaluate_mc(&ckpt.params, qs, emb).unwrap().accuracy.unwrap());
        }
        let table = format_curve(&rows);
        assert_eq!(table.lines().count(), 3);
        assert!(run_learning_curve(None, &protocol, &config, &t, emb).is_ok());
    }
}
