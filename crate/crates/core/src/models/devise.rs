//! Image features projected into the goal-text space and compared by cosine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{add_assign, add_outer, batch_reduce, dot64, normalize, normalize_backward, normalize_input, project, scale, Matrix, Scalar};
use super::TrainExample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviseParams<T> {
    /// `d_image × d_goal`
    pub img_to_goal: Matrix<T>,
}

impl<T: Scalar> DeviseParams<T> {
    pub fn init(d_goal: usize, d_image: usize, rng: &mut impl Rng) -> Self {
        DeviseParams { img_to_goal: Matrix::glorot(d_image, d_goal, rng) }
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        vec![&self.img_to_goal]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![&mut self.img_to_goal]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&Matrix<T>) -> Matrix<U>) -> DeviseParams<U> {
        DeviseParams { img_to_goal: f(&self.img_to_goal) }
    }

    pub fn encode_goal(&self, goal: &[f32]) -> Result<Vec<f64>> {
        if goal.len() != self.img_to_goal.cols {
            return Err(Error::DimensionMismatch { expected: self.img_to_goal.cols, actual: goal.len() });
        }
        normalize_input(goal, "devise goal")
    }

    pub fn encode_image(&self, image: &[f32]) -> Result<Vec<f64>> {
        Ok(normalize(project(image, &self.img_to_goal)?, "devise image projection")?.0)
    }

    /// Cosine between the projected image and the goal features.
    pub fn score(&self, goal: &[f32], image: &[f32]) -> Result<f64> {
        Ok(dot64(&self.encode_goal(goal)?, &self.encode_image(image)?))
    }

    /// Mean cosine distance over positive pairs; negatives are ignored.
    pub fn loss_grad(&self, batch: &[TrainExample<'_>]) -> Result<(f64, DeviseParams<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let w = &self.img_to_goal;
        let (loss, mut grad) = batch_reduce(
            batch.len(),
            || Matrix::<f64>::zeros(w.rows, w.cols),
            |i, g| {
                let ex = &batch[i];
                let goal = self.encode_goal(ex.goal)?;
                let (p, np) = normalize(project(ex.image, w)?, "devise image projection")?;
                let s = dot64(&p, &goal);
                // d(1 - s)/dp̂ = -ĝ
                let gp: Vec<f64> = goal.iter().map(|x| -x).collect();
                add_outer(g, ex.image, &normalize_backward(&p, np, &gp));
                Ok(1.0 - s)
            },
            add_assign,
        )?;
        let n = batch.len() as f64;
        scale(&mut grad, 1.0 / n);
        Ok((loss / n, DeviseParams { img_to_goal: grad }))
    }
}
