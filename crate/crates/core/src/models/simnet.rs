//! Two-branch similarity network: both modalities are projected and
//! normalized, multiplied elementwise, and classified by a softmax head.
//! The match score is `α[0] − α[1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{add_assign, add_outer, batch_reduce, normalize, normalize_backward, project, scale, Matrix, Scalar};
use super::TrainExample;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNetParams<T> {
    /// `d_image × d_joint`
    pub img_to_joint: Matrix<T>,
    /// `d_goal × d_joint`
    pub goal_to_joint: Matrix<T>,
    /// `d_joint × 2`
    pub head_weight: Matrix<T>,
    /// `1 × 2`
    pub head_bias: Matrix<T>,
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

impl<T: Scalar> SimNetParams<T> {
    pub fn init(d_goal: usize, d_image: usize, d_joint: usize, rng: &mut impl Rng) -> Self {
        SimNetParams {
            img_to_joint: Matrix::glorot(d_image, d_joint, rng),
            goal_to_joint: Matrix::glorot(d_goal, d_joint, rng),
            head_weight: Matrix::glorot(d_joint, 2, rng),
            head_bias: Matrix::zeros(1, 2),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        vec![&self.img_to_joint, &self.goal_to_joint, &self.head_weight, &self.head_bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![&mut self.img_to_joint, &mut self.goal_to_joint, &mut self.head_weight, &mut self.head_bias]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&Matrix<T>) -> Matrix<U>) -> SimNetParams<U> {
        SimNetParams {
            img_to_joint: f(&self.img_to_joint),
            goal_to_joint: f(&self.goal_to_joint),
            head_weight: f(&self.head_weight),
            head_bias: f(&self.head_bias),
        }
    }

    pub fn encode_goal(&self, goal: &[f32]) -> Result<Vec<f64>> {
        Ok(normalize(project(goal, &self.goal_to_joint)?, "simnet goal branch")?.0)
    }

    pub fn encode_image(&self, image: &[f32]) -> Result<Vec<f64>> {
        Ok(normalize(project(image, &self.img_to_joint)?, "simnet image branch")?.0)
    }

    fn logits(&self, joint: &[f64]) -> [f64; 2] {
        let mut z = [self.head_bias.at(0, 0).to_f64(), self.head_bias.at(0, 1).to_f64()];
        for (j, v) in joint.iter().enumerate() {
            z[0] += v * self.head_weight.at(j, 0).to_f64();
            z[1] += v * self.head_weight.at(j, 1).to_f64();
        }
        z
    }

    /// Class probabilities `(matched, unmatched)` from encoded branches.
    pub fn head(&self, goal_enc: &[f64], image_enc: &[f64]) -> [f64; 2] {
        let joint: Vec<f64> = image_enc.iter().zip(goal_enc).map(|(a, b)| a * b).collect();
        softmax2(self.logits(&joint))
    }

    pub fn score(&self, goal: &[f32], image: &[f32]) -> Result<f64> {
        let alpha = self.head(&self.encode_goal(goal)?, &self.encode_image(image)?);
        Ok(alpha[0] - alpha[1])
    }

    /// Mean binary cross-entropy with `p(y) = α[0]`.
    pub fn loss_grad(&self, batch: &[TrainExample<'_>]) -> Result<(f64, SimNetParams<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let zero = || self.map(|m| Matrix::<f64>::zeros(m.rows, m.cols));
        let (loss, mut grad) = batch_reduce(
            batch.len(),
            zero,
            |i, g| {
                let ex = &batch[i];
                let y = ex.label;
                if y != 0.0 && y != 1.0 {
                    return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {y}")));
                }
                let (a, na) = normalize(project(ex.image, &self.img_to_joint)?, "simnet image branch")?;
                let (b, nb) = normalize(project(ex.goal, &self.goal_to_joint)?, "simnet goal branch")?;
                let joint: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
                let alpha = softmax2(self.logits(&joint));
                let p = alpha[0].clamp(P_CLAMP, 1.0 - P_CLAMP);
                let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                if p != alpha[0] {
                    // saturated: the clamp is flat here
                    return Ok(loss);
                }
                let dz0 = alpha[0] - y;
                let dz = [dz0, -dz0];
                for (j, v) in joint.iter().enumerate() {
                    g.head_weight.data[j * 2] += v * dz[0];
                    g.head_weight.data[j * 2 + 1] += v * dz[1];
                }
                g.head_bias.data[0] += dz[0];
                g.head_bias.data[1] += dz[1];
                let gj: Vec<f64> = (0..joint.len())
                    .map(|j| self.head_weight.at(j, 0).to_f64() * dz[0] + self.head_weight.at(j, 1).to_f64() * dz[1])
                    .collect();
                let ga: Vec<f64> = gj.iter().zip(&b).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = gj.iter().zip(&a).map(|(x, y)| x * y).collect();
                add_outer(&mut g.img_to_joint, ex.image, &normalize_backward(&a, na, &ga));
                add_outer(&mut g.goal_to_joint, ex.goal, &normalize_backward(&b, nb, &gb));
                Ok(loss)
            },
            |dst, src| {
                for (d, s) in dst.tensors_mut().into_iter().zip(src.tensors()) {
                    add_assign(d, s);
                }
            },
        )?;
        let k = 1.0 / batch.len() as f64;
        for t in grad.tensors_mut() {
            scale(t, k);
        }
        Ok((loss * k, grad))
    }
}
