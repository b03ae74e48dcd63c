//! Training loop: turns multiple-choice questions into model examples, runs
//! shuffled mini-batch epochs, and keeps the parameters of the best
//! validation epoch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate_mc, Embeddings};
use crate::models::checkpoint::Checkpoint;
use crate::models::{ModelDims, ModelKind, ModelParams, OptimizerKind, OptimizerState, TrainExample, DEFAULT_JOINT_DIM, DEFAULT_MARGIN};
use crate::sampler::MCQuestion;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub margin: f64,
    pub joint_dim: usize,
    /// Overrides the model's default optimizer.
    pub optimizer: Option<OptimizerKind>,
    /// Overrides the model's default learning rate.
    pub learning_rate: Option<f64>,
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> Self {
        TrainConfig {
            model,
            batch_size: 1024,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            margin: DEFAULT_MARGIN,
            joint_dim: DEFAULT_JOINT_DIM,
            optimizer: None,
            learning_rate: None,
        }
    }

    pub fn optimizer_settings(&self) -> (OptimizerKind, f64) {
        let (kind, lr) = self.model.default_optimizer();
        (self.optimizer.unwrap_or(kind), self.learning_rate.unwrap_or(lr))
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidArgument("margin must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<Option<f64>>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.best_epoch.and_then(|e| self.val_accuracy[e])
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub examples: usize,
}

/// Run record written next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub examples: usize,
    pub history: TrainHistory,
    pub best_val_accuracy: Option<f64>,
}

impl TrainOutcome {
    pub fn report(&self, config: &TrainConfig) -> RunReport {
        RunReport {
            config: config.clone(),
            examples: self.examples,
            history: self.history.clone(),
            best_val_accuracy: self.history.best_val_accuracy(),
        }
    }
}

/// Model inputs for a question set.
///
/// Triplet: three triplets per question (gold against each distractor).
/// Similarity network: the positive pair three times plus the three
/// negative pairs. DeViSE: the positive pair only.
pub fn build_examples<'a>(kind: ModelKind, questions: &[MCQuestion], emb: Embeddings<'a>) -> Result<Vec<TrainExample<'a>>> {
    let mut out = Vec::with_capacity(questions.len() * 6);
    for q in questions {
        let goal = emb.texts.require(&q.prompt_embedding_id)?;
        let gold = emb.images.require(&q.gold_image_id)?;
        match kind {
            ModelKind::Devise => out.push(TrainExample { goal, image: gold, negative: None, label: 1.0 }),
            ModelKind::Triplet => {
                for d in &q.distractor_image_ids {
                    let neg = emb.images.require(d)?;
                    out.push(TrainExample { goal, image: gold, negative: Some(neg), label: 1.0 });
                }
            }
            ModelKind::SimNet => {
                for d in &q.distractor_image_ids {
                    out.push(TrainExample { goal, image: gold, negative: None, label: 1.0 });
                    out.push(TrainExample { goal, image: emb.images.require(d)?, negative: None, label: 0.0 });
                }
            }
        }
    }
    Ok(out)
}

fn check_dims(params: &ModelParams, emb: Embeddings<'_>) -> Result<()> {
    let dims = params.dims();
    if emb.texts.dim() != dims.goal {
        return Err(Error::DimensionMismatch { expected: dims.goal, actual: emb.texts.dim() });
    }
    if emb.images.dim() != dims.image {
        return Err(Error::DimensionMismatch { expected: dims.image, actual: emb.images.dim() });
    }
    Ok(())
}

fn run(mut params: ModelParams, config: &TrainConfig, train: &[MCQuestion], val: &[MCQuestion], emb: Embeddings<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    check_dims(&params, emb)?;
    let examples = build_examples(params.kind(), train, emb)?;
    if examples.is_empty() && config.max_epochs > 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let (opt_kind, lr) = config.optimizer_settings();
    let mut optimizer = OptimizerState::new(opt_kind, lr, &params.tensor_sizes());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams, OptimizerState)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive_index(config.seed, "epoch", epoch as u64)));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainExample<'_>> = chunk.iter().map(|&i| examples[i]).collect();
            let (loss, grads) = params.loss_grad(&batch, config.margin)?;
            params.apply(&mut optimizer, &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / examples.len() as f64;
        if !train_loss.is_finite() || !params.is_finite() {
            return Err(Error::InvalidArgument(format!("training diverged at epoch {epoch}")));
        }
        history.train_loss.push(train_loss);

        if val.is_empty() {
            history.val_accuracy.push(None);
            history.best_epoch = Some(epoch);
            continue;
        }
        let acc = evaluate_mc(&params, val, emb)?.accuracy.unwrap_or(0.0);
        history.val_accuracy.push(Some(acc));
        log::debug!("epoch {epoch}: loss {train_loss:.6} val acc {acc:.4}");
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, params.clone(), optimizer.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (params, optimizer) = match best {
        Some((_, p, o)) => (p, o),
        None => (params, optimizer),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { params, margin: config.margin, optimizer: Some(optimizer) },
        history,
        examples: examples.len(),
    })
}

/// Train a freshly initialized model.
pub fn train(config: &TrainConfig, train: &[MCQuestion], val: &[MCQuestion], emb: Embeddings<'_>) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let dims = ModelDims { goal: emb.texts.dim(), image: emb.images.dim(), joint: config.joint_dim };
    run(ModelParams::init(config.model, dims, config.seed), config, train, val, emb)
}

/// Continue training a checkpoint with a fresh optimizer state.
pub fn fine_tune(checkpoint: &Checkpoint, config: &TrainConfig, train: &[MCQuestion], val: &[MCQuestion], emb: Embeddings<'_>) -> Result<TrainOutcome> {
    if checkpoint.params.kind() != config.model {
        return Err(Error::KindMismatch {
            checkpoint: checkpoint.params.kind().to_string(),
            config: config.model.to_string(),
        });
    }
    run(checkpoint.params.clone(), config, train, val, emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{split_by_goal, PromptLevel};
    use crate::sampler::{QuestionSampler, Strategy};
    use crate::synth::{generate_synthetic, SynthData, SynthSpec};

    fn setup(noise: f64) -> (SynthData, Vec<MCQuestion>, Vec<MCQuestion>) {
        let data = generate_synthetic(&SynthSpec { clusters: 20, noise_scale: noise, seed: 1, ..Default::default() }).unwrap();
        let split = split_by_goal(&data.corpus, [0.8, 0.0, 0.2], 1).unwrap();
        let sampler = QuestionSampler::new(&data.corpus, &data.images).unwrap();
        let train = sampler.make_question_set(&split.train, Strategy::Random, PromptLevel::Goal, 1).unwrap().questions;
        // validation reuses the training goals with fresh distractors
        let val = sampler.make_question_set(&split.train, Strategy::Random, PromptLevel::Goal, 2).unwrap().questions;
        (data, train, val)
    }

    fn fast(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            joint_dim: 16,
            learning_rate: Some(1e-2),
            max_epochs: 30,
            ..TrainConfig::new(kind)
        }
    }

    #[test]
    fn example_counts() {
        let (data, train, _) = setup(0.1);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let trip = build_examples(ModelKind::Triplet, &train, emb).unwrap();
        assert_eq!(trip.len(), 3 * train.len());
        let sim = build_examples(ModelKind::SimNet, &train, emb).unwrap();
        assert_eq!(sim.len(), 6 * train.len());
        assert_eq!(sim.iter().filter(|e| e.label == 1.0).count(), 3 * train.len());
        assert_eq!(build_examples(ModelKind::Devise, &train, emb).unwrap().len(), train.len());
    }

    #[test]
    fn zero_noise_triplet_learns_quickly() {
        let (data, train, val) = setup(0.0);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let cfg = TrainConfig { max_epochs: 10, ..fast(ModelKind::Triplet) };
        let out = train_fn(&cfg, &train, &val, emb);
        assert_eq!(out.history.best_val_accuracy(), Some(1.0), "{:?}", out.history);
    }

    fn train_fn(cfg: &TrainConfig, t: &[MCQuestion], v: &[MCQuestion], emb: Embeddings<'_>) -> TrainOutcome {
        train(cfg, t, v, emb).unwrap()
    }

    #[test]
    fn constant_val_accuracy_stops_after_patience() {
        let (data, train, val) = setup(0.1);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        // a zero learning rate leaves the model (and its accuracy) unchanged
        let cfg = TrainConfig { patience: 1, learning_rate: Some(0.0), ..fast(ModelKind::Triplet) };
        let out = train_fn(&cfg, &train, &val, emb);
        assert_eq!(out.history.epochs(), 2);
        assert_eq!(out.history.best_epoch, Some(0));
    }

    #[test]
    fn best_epoch_is_returned() {
        let (data, train, val) = setup(0.3);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let cfg = TrainConfig { patience: 3, ..fast(ModelKind::SimNet) };
        let out = train_fn(&cfg, &train, &val, emb);
        let best = out.history.best_epoch.unwrap();
        assert!(best < out.history.epochs());
        let acc = evaluate_mc(&out.checkpoint.params, &val, emb).unwrap().accuracy.unwrap();
        assert_eq!(Some(acc), out.history.val_accuracy[best]);
        assert!(out.history.val_accuracy.iter().all(|a| a.unwrap() <= acc));
    }

    #[test]
    fn training_is_deterministic() {
        let (data, train, val) = setup(0.2);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        for kind in [ModelKind::Devise, ModelKind::SimNet, ModelKind::Triplet] {
            let cfg = TrainConfig { max_epochs: 5, ..fast(kind) };
            let a = train_fn(&cfg, &train, &val, emb);
            let b = train_fn(&cfg, &train, &val, emb);
            assert_eq!(a.history, b.history);
            assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        }
    }

    #[test]
    fn fine_tune_semantics() {
        let (data, train, val) = setup(0.2);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let base = train_fn(&fast(ModelKind::Triplet), &train, &val, emb);
        let zero = fine_tune(&base.checkpoint, &TrainConfig { max_epochs: 0, ..fast(ModelKind::Triplet) }, &train, &val, emb).unwrap();
        assert_eq!(zero.checkpoint.params, base.checkpoint.params);

        let before = evaluate_mc(&base.checkpoint.params, &val, emb).unwrap().accuracy.unwrap();
        let tuned = fine_tune(&base.checkpoint, &TrainConfig { max_epochs: 10, ..fast(ModelKind::Triplet) }, &train, &val, emb).unwrap();
        let after = evaluate_mc(&tuned.checkpoint.params, &val, emb).unwrap().accuracy.unwrap();
        assert!(after >= before - 0.05, "{after} < {before}");

        let err = fine_tune(&base.checkpoint, &fast(ModelKind::SimNet), &train, &val, emb).unwrap_err();
        assert!(matches!(err, Error::KindMismatch { .. }));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (data, train, val) = setup(0.1);
        let emb = Embeddings { images: &data.images, texts: &data.texts };
        let params = ModelParams::init(ModelKind::Triplet, ModelDims { goal: 5, image: 32, joint: 4 }, 0);
        let err = fine_tune(&Checkpoint::new(params, 0.2), &fast(ModelKind::Triplet), &train, &val, emb).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
