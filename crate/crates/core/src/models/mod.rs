//! Cross-modal matching models: DeViSE, similarity network and triplet
//! network, with hand-derived gradients.

pub mod checkpoint;
mod devise;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
mod simnet;
mod triplet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use devise::DeviseParams;
pub use linalg::{Matrix, Scalar};
pub use optim::{OptimizerKind, OptimizerState};
pub use simnet::{SimNetParams, P_CLAMP};
pub use triplet::{TripletParams, DEFAULT_MARGIN};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Devise,
    SimNet,
    Triplet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Devise => "devise",
            ModelKind::SimNet => "simnet",
            ModelKind::Triplet => "triplet",
        }
    }

    /// Optimizer and learning rate each model was tuned with.
    pub fn default_optimizer(self) -> (OptimizerKind, f64) {
        match self {
            ModelKind::Devise => (OptimizerKind::RmsProp, 5e-6),
            ModelKind::SimNet => (OptimizerKind::RmsProp, 5e-6),
            ModelKind::Triplet => (OptimizerKind::Adam, 1e-5),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "devise" => Ok(ModelKind::Devise),
            "simnet" => Ok(ModelKind::SimNet),
            "triplet" => Ok(ModelKind::Triplet),
            other => Err(Error::InvalidArgument(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub goal: usize,
    pub image: usize,
    /// Ignored by DeViSE, which projects straight into the goal space.
    pub joint: usize,
}

pub const DEFAULT_JOINT_DIM: usize = 1024;

/// One training example. DeViSE reads `goal` and `image` (a positive pair);
/// the similarity network reads `goal`, `image` and `label`; the triplet
/// network reads `goal`, `image` (positive) and `negative`.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub goal: &'a [f32],
    pub image: &'a [f32],
    pub negative: Option<&'a [f32]>,
    pub label: f64,
}

/// Anything that scores how well an image matches a text; predictions take
/// the argmax over candidates.
pub trait MatchScorer: Sync {
    fn score(&self, text: &[f32], image: &[f32]) -> Result<f64>;

    /// Scores for every (text, image) pair, `out[t][i]`.
    fn score_matrix(&self, texts: &[&[f32]], images: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        texts
            .par_iter()
            .map(|t| images.iter().map(|i| self.score(t, i)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelParams {
    Devise(DeviseParams<f32>),
    SimNet(SimNetParams<f32>),
    Triplet(TripletParams<f32>),
}

impl ModelParams {
    pub fn init(kind: ModelKind, dims: ModelDims, seed: u64) -> Self {
        let mut rng = seed::rng_for(seed, &format!("init/{kind}"));
        match kind {
            ModelKind::Devise => ModelParams::Devise(DeviseParams::init(dims.goal, dims.image, &mut rng)),
            ModelKind::SimNet => ModelParams::SimNet(SimNetParams::init(dims.goal, dims.image, dims.joint, &mut rng)),
            ModelKind::Triplet => ModelParams::Triplet(TripletParams::init(dims.goal, dims.image, dims.joint, &mut rng)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Devise(_) => ModelKind::Devise,
            ModelParams::SimNet(_) => ModelKind::SimNet,
            ModelParams::Triplet(_) => ModelKind::Triplet,
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self {
            ModelParams::Devise(p) => ModelDims { goal: p.img_to_goal.cols, image: p.img_to_goal.rows, joint: 0 },
            ModelParams::SimNet(p) => ModelDims { goal: p.goal_to_joint.rows, image: p.img_to_joint.rows, joint: p.img_to_joint.cols },
            ModelParams::Triplet(p) => ModelDims { goal: p.goal_to_joint.rows, image: p.img_to_joint.rows, joint: p.img_to_joint.cols },
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix<f32>> {
        match self {
            ModelParams::Devise(p) => p.tensors(),
            ModelParams::SimNet(p) => p.tensors(),
            ModelParams::Triplet(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<f32>> {
        match self {
            ModelParams::Devise(p) => p.tensors_mut(),
            ModelParams::SimNet(p) => p.tensors_mut(),
            ModelParams::Triplet(p) => p.tensors_mut(),
        }
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.data.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensor_sizes().iter().sum()
    }

    /// Loss and per-tensor gradients (same order as [`ModelParams::tensors`]).
    pub fn loss_grad(&self, batch: &[TrainExample<'_>], margin: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        fn flat(ts: Vec<&Matrix<f64>>) -> Vec<Vec<f64>> {
            ts.into_iter().map(|t| t.data.clone()).collect()
        }
        Ok(match self {
            ModelParams::Devise(p) => {
                let (l, g) = p.loss_grad(batch)?;
                (l, flat(g.tensors()))
            }
            ModelParams::SimNet(p) => {
                let (l, g) = p.loss_grad(batch)?;
                (l, flat(g.tensors()))
            }
            ModelParams::Triplet(p) => {
                let (l, g) = p.loss_grad(batch, margin)?;
                (l, flat(g.tensors()))
            }
        })
    }

    pub fn apply(&mut self, optimizer: &mut OptimizerState, grads: &[Vec<f64>]) -> Result<()> {
        let mut params: Vec<&mut [f32]> = self.tensors_mut().into_iter().map(|t| t.data.as_mut_slice()).collect();
        let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        optimizer.step(&mut params, &grads)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn encode_text(&self, text: &[f32]) -> Result<Vec<f64>> {
        match self {
            ModelParams::Devise(p) => p.encode_goal(text),
            ModelParams::SimNet(p) => p.encode_goal(text),
            ModelParams::Triplet(p) => p.encode_goal(text),
        }
    }

    fn encode_image(&self, image: &[f32]) -> Result<Vec<f64>> {
        match self {
            ModelParams::Devise(p) => p.encode_image(image),
            ModelParams::SimNet(p) => p.encode_image(image),
            ModelParams::Triplet(p) => p.encode_image(image),
        }
    }

    fn combine(&self, text: &[f64], image: &[f64]) -> f64 {
        match self {
            ModelParams::SimNet(p) => {
                let a = p.head(text, image);
                a[0] - a[1]
            }
            _ => linalg::dot64(text, image),
        }
    }
}

impl MatchScorer for ModelParams {
    fn score(&self, text: &[f32], image: &[f32]) -> Result<f64> {
        match self {
            ModelParams::Devise(p) => p.score(text, image),
            ModelParams::SimNet(p) => p.score(text, image),
            ModelParams::Triplet(p) => p.score(text, image),
        }
    }

    fn score_matrix(&self, texts: &[&[f32]], images: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        let images: Vec<Vec<f64>> = images.par_iter().map(|i| self.encode_image(i)).collect::<Result<_>>()?;
        texts
            .par_iter()
            .map(|t| {
                let t = self.encode_text(t)?;
                Ok(images.iter().map(|i| self.combine(&t, i)).collect())
            })
            .collect()
    }
}

/// Flatten 64-bit parameters for [`gradcheck::finite_diff_check`].
pub fn flatten<T: Scalar>(tensors: &[&Matrix<T>]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_f64())).collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(flat: &[f64], tensors: Vec<&mut Matrix<f64>>) {
    let mut offset = 0;
    for t in tensors {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len(), "flat parameter length mismatch");
}
