//! Goal and image branches into a shared joint space, trained with a cosine
//! margin (hinge) loss over (goal, positive image, negative image) triplets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{add_assign, add_outer, batch_reduce, dot64, normalize, normalize_backward, project, scale, Matrix, Scalar};
use super::TrainExample;
use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletParams<T> {
    /// `d_goal × d_joint`
    pub goal_to_joint: Matrix<T>,
    /// `d_image × d_joint`, shared by the positive and negative branches.
    pub img_to_joint: Matrix<T>,
}

impl<T: Scalar> TripletParams<T> {
    pub fn init(d_goal: usize, d_image: usize, d_joint: usize, rng: &mut impl Rng) -> Self {
        TripletParams {
            goal_to_joint: Matrix::glorot(d_goal, d_joint, rng),
            img_to_joint: Matrix::glorot(d_image, d_joint, rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        vec![&self.goal_to_joint, &self.img_to_joint]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![&mut self.goal_to_joint, &mut self.img_to_joint]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&Matrix<T>) -> Matrix<U>) -> TripletParams<U> {
        TripletParams { goal_to_joint: f(&self.goal_to_joint), img_to_joint: f(&self.img_to_joint) }
    }

    pub fn encode_goal(&self, goal: &[f32]) -> Result<Vec<f64>> {
        Ok(normalize(project(goal, &self.goal_to_joint)?, "triplet goal branch")?.0)
    }

    pub fn encode_image(&self, image: &[f32]) -> Result<Vec<f64>> {
        Ok(normalize(project(image, &self.img_to_joint)?, "triplet image branch")?.0)
    }

    /// Cosine similarity in the joint space (higher is a better match).
    pub fn score(&self, goal: &[f32], image: &[f32]) -> Result<f64> {
        Ok(dot64(&self.encode_goal(goal)?, &self.encode_image(image)?))
    }

    /// Mean of `max(0, d(G, pos) − d(G, neg) + margin)` with `d = 1 − cos`.
    pub fn loss_grad(&self, batch: &[TrainExample<'_>], margin: f64) -> Result<(f64, TripletParams<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if !(margin >= 0.0) {
            return Err(Error::InvalidArgument(format!("margin must be >= 0, got {margin}")));
        }
        let zero = || TripletParams {
            goal_to_joint: Matrix::<f64>::zeros(self.goal_to_joint.rows, self.goal_to_joint.cols),
            img_to_joint: Matrix::<f64>::zeros(self.img_to_joint.rows, self.img_to_joint.cols),
        };
        let (loss, mut grad) = batch_reduce(
            batch.len(),
            zero,
            |i, g| {
                let ex = &batch[i];
                let neg = ex
                    .negative
                    .ok_or_else(|| Error::InvalidArgument("triplet example without a negative".into()))?;
                let (a, na) = normalize(project(ex.goal, &self.goal_to_joint)?, "triplet goal branch")?;
                let (p, np) = normalize(project(ex.image, &self.img_to_joint)?, "triplet image branch")?;
                let (n, nn) = normalize(project(neg, &self.img_to_joint)?, "triplet image branch")?;
                let sp = dot64(&a, &p);
                let sn = dot64(&a, &n);
                let hinge = sn - sp + margin;
                if hinge <= 0.0 {
                    return Ok(0.0);
                }
                let ga: Vec<f64> = n.iter().zip(&p).map(|(x, y)| x - y).collect();
                let gp: Vec<f64> = a.iter().map(|x| -x).collect();
                add_outer(&mut g.goal_to_joint, ex.goal, &normalize_backward(&a, na, &ga));
                add_outer(&mut g.img_to_joint, ex.image, &normalize_backward(&p, np, &gp));
                add_outer(&mut g.img_to_joint, neg, &normalize_backward(&n, nn, &a));
                Ok(hinge)
            },
            |dst, src| {
                add_assign(&mut dst.goal_to_joint, &src.goal_to_joint);
                add_assign(&mut dst.img_to_joint, &src.img_to_joint);
            },
        )?;
        let k = 1.0 / batch.len() as f64;
        scale(&mut grad.goal_to_joint, k);
        scale(&mut grad.img_to_joint, k);
        Ok((loss * k, grad))
    }
}
