//! Adam and RMSProp over flat `f32` parameter tensors with `f64` gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Hyper {
    pub fn defaults(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => Hyper { beta1: 0.9, beta2: 0.999, rho: 0.0, eps: 1e-8 },
            OptimizerKind::RmsProp => Hyper { beta1: 0.0, beta2: 0.0, rho: 0.9, eps: 1e-7 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub hyper: Hyper,
    pub step: u64,
    /// Adam first moment; empty tensors for RMSProp.
    pub first: Vec<Vec<f32>>,
    /// Adam second moment or RMSProp running mean of squares.
    pub second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[usize]) -> Self {
        let first = match kind {
            OptimizerKind::Adam => shapes.iter().map(|&n| vec![0.0; n]).collect(),
            OptimizerKind::RmsProp => shapes.iter().map(|_| Vec::new()).collect(),
        };
        OptimizerState {
            kind,
            lr,
            hyper: Hyper::defaults(kind),
            step: 0,
            first,
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.second.iter().map(Vec::len).collect()
    }

    /// One update of every tensor. `params[i]` and `grads[i]` must have the
    /// shape the state was created with.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.second.len() || grads.len() != self.second.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.second.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let n = self.second[i].len();
            if p.len() != n || g.len() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: p.len().max(g.len()) });
            }
        }
        self.step += 1;
        let Hyper { beta1, beta2, rho, eps } = self.hyper;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        let gj = g[j];
                        let mj = beta1 * f64::from(m[j]) + (1.0 - beta1) * gj;
                        let vj = beta2 * f64::from(v[j]) + (1.0 - beta2) * gj * gj;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                        p[j] = (f64::from(p[j]) - update) as f32;
                    }
                }
            }
            OptimizerKind::RmsProp => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let v = &mut self.second[i];
                    for j in 0..p.len() {
                        let gj = g[j];
                        let vj = rho * f64::from(v[j]) + (1.0 - rho) * gj * gj;
                        v[j] = vj as f32;
                        p[j] = (f64::from(p[j]) - lr * gj / (vj.sqrt() + eps)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut st = OptimizerState::new(OptimizerKind::Adam, 1e-3, &[3]);
            let mut p = vec![1.0f32, 2.0, 3.0];
            let before = p.clone();
            st.step(&mut [&mut p], &[&[g, g, g]]).unwrap();
            for (a, b) in p.iter().zip(&before) {
                let moved = f64::from(b - a);
                let expected = 1e-3 * g / (g.abs() + 1e-8);
                assert!((moved - expected).abs() < 1e-6, "{moved} vs {expected}");
            }
            assert_eq!(st.step, 1);
        }
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        for kind in [OptimizerKind::Adam, OptimizerKind::RmsProp] {
            let mut st = OptimizerState::new(kind, 0.1, &[2]);
            let mut p = vec![1.0f32, -1.0];
            st.step(&mut [&mut p], &[&[1.0, 1.0]]).unwrap();
            let after_one = p.clone();
            let v_before = st.second[0][0];
            st.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
            if kind == OptimizerKind::RmsProp {
                assert_eq!(p, after_one);
                assert!(st.second[0][0] < v_before);
            } else {
                // Adam's momentum still moves parameters; the moments decay.
                assert!(st.second[0][0] < v_before);
                assert!(st.first[0][0] < 0.1 + 1e-9);
            }
        }
        // from a fresh state a zero gradient leaves parameters untouched
        for kind in [OptimizerKind::Adam, OptimizerKind::RmsProp] {
            let mut st = OptimizerState::new(kind, 0.1, &[2]);
            let mut p = vec![1.0f32, -1.0];
            st.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
            assert_eq!(p, vec![1.0, -1.0]);
        }
    }

    #[test]
    fn quadratic_loss_strictly_decreases() {
        for kind in [OptimizerKind::Adam, OptimizerKind::RmsProp] {
            let mut st = OptimizerState::new(kind, 0.01, &[4]);
            let mut w = vec![1.0f32; 4];
            let loss = |w: &[f32]| w.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>();
            let mut prev = loss(&w);
            for _ in 0..100 {
                let g: Vec<f64> = w.iter().map(|x| 2.0 * f64::from(*x)).collect();
                st.step(&mut [&mut w], &[&g]).unwrap();
                let cur = loss(&w);
                assert!(cur < prev, "{kind:?}: {cur} >= {prev}");
                prev = cur;
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut st = OptimizerState::new(OptimizerKind::Adam, 0.1, &[2]);
        let mut p = vec![0.0f32; 3];
        assert!(st.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).is_err());
        assert!(st.step(&mut [], &[]).is_err());
    }
}
