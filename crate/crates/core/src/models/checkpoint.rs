//! Binary model checkpoints.
//!
//! Layout (little-endian): `b"VGSC"`, u32 version, u8 model kind
//! (0 devise, 1 simnet, 2 triplet), u32 d_goal, u32 d_image, u32 d_joint,
//! f64 margin, u32 tensor count, then per tensor u32 rows, u32 cols and
//! `rows·cols` f32 values. An optimizer section follows: u8 present flag,
//! and if set u8 kind (0 adam, 1 rmsprop), f64 lr, f64 beta1, beta2, rho,
//! eps, u64 step, then per tensor the first moment (adam only) and the
//! second moment as f32 runs with the tensor's length.

use std::io::{Read, Write};
use std::path::Path;

use super::linalg::Matrix;
use super::optim::{Hyper, OptimizerKind, OptimizerState};
use super::{DeviseParams, ModelDims, ModelKind, ModelParams, SimNetParams, TripletParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VGSC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub margin: f64,
    pub optimizer: Option<OptimizerState>,
}

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Devise => 0,
        ModelKind::SimNet => 1,
        ModelKind::Triplet => 2,
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams, margin: f64) -> Self {
        Checkpoint { params, margin, optimizer: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let dims = self.params.dims();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(kind_tag(self.params.kind()));
        for d in [dims.goal, dims.image, dims.joint] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.margin.to_le_bytes());
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            put_f32s(&mut out, &t.data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.push(match opt.kind {
                    OptimizerKind::Adam => 0,
                    OptimizerKind::RmsProp => 1,
                });
                let h = opt.hyper;
                for v in [opt.lr, h.beta1, h.beta2, h.rho, h.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&opt.step.to_le_bytes());
                for i in 0..tensors.len() {
                    if opt.kind == OptimizerKind::Adam {
                        put_f32s(&mut out, &opt.first[i]);
                    }
                    put_f32s(&mut out, &opt.second[i]);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::InvalidCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::InvalidCheckpoint(format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => ModelKind::Devise,
            1 => ModelKind::SimNet,
            2 => ModelKind::Triplet,
            t => return Err(Error::InvalidCheckpoint(format!("unknown model tag {t}"))),
        };
        let dims = ModelDims { goal: r.u32()? as usize, image: r.u32()? as usize, joint: r.u32()? as usize };
        let margin = r.f64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            tensors.push(Matrix { rows, cols, data: r.f32s(rows * cols)? });
        }
        let params = assemble(kind, dims, tensors)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let kind = match r.u8()? {
                    0 => OptimizerKind::Adam,
                    1 => OptimizerKind::RmsProp,
                    t => return Err(Error::InvalidCheckpoint(format!("unknown optimizer tag {t}"))),
                };
                let lr = r.f64()?;
                let hyper = Hyper { beta1: r.f64()?, beta2: r.f64()?, rho: r.f64()?, eps: r.f64()? };
                let step = r.u64()?;
                let sizes = params.tensor_sizes();
                let mut state = OptimizerState::new(kind, lr, &sizes);
                state.hyper = hyper;
                state.step = step;
                for (i, &n) in sizes.iter().enumerate() {
                    if kind == OptimizerKind::Adam {
                        state.first[i] = r.f32s(n)?;
                    }
                    state.second[i] = r.f32s(n)?;
                }
                Some(state)
            }
            t => return Err(Error::InvalidCheckpoint(format!("bad optimizer flag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::InvalidCheckpoint("trailing bytes".into()));
        }
        if !params.is_finite() {
            return Err(Error::InvalidCheckpoint("non-finite parameter".into()));
        }
        Ok(Checkpoint { params, margin, optimizer })
    }
}

fn assemble(kind: ModelKind, dims: ModelDims, tensors: Vec<Matrix<f32>>) -> Result<ModelParams> {
    let expect: Vec<(usize, usize)> = match kind {
        ModelKind::Devise => vec![(dims.image, dims.goal)],
        ModelKind::SimNet => vec![(dims.image, dims.joint), (dims.goal, dims.joint), (dims.joint, 2), (1, 2)],
        ModelKind::Triplet => vec![(dims.goal, dims.joint), (dims.image, dims.joint)],
    };
    let shapes: Vec<(usize, usize)> = tensors.iter().map(|t| (t.rows, t.cols)).collect();
    if shapes != expect {
        return Err(Error::InvalidCheckpoint(format!("tensor shapes {shapes:?} do not match {kind} dims {dims:?}")));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("shape-checked");
    Ok(match kind {
        ModelKind::Devise => ModelParams::Devise(DeviseParams { img_to_goal: next() }),
        ModelKind::SimNet => ModelParams::SimNet(SimNetParams {
            img_to_joint: next(),
            goal_to_joint: next(),
            head_weight: next(),
            head_bias: next(),
        }),
        ModelKind::Triplet => ModelParams::Triplet(TripletParams { goal_to_joint: next(), img_to_joint: next() }),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::InvalidCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::InvalidCheckpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_all_kinds_with_optimizer() {
        let dims = ModelDims { goal: 3, image: 5, joint: 4 };
        for kind in [ModelKind::Devise, ModelKind::SimNet, ModelKind::Triplet] {
            let params = ModelParams::init(kind, dims, 9);
            let (opt_kind, lr) = kind.default_optimizer();
            let mut opt = OptimizerState::new(opt_kind, lr, &params.tensor_sizes());
            opt.step = 17;
            opt.second[0][1] = 0.25;
            let ckpt = Checkpoint { params, margin: 0.2, optimizer: Some(opt) };
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            assert_eq!(back, ckpt);
            let bare = Checkpoint::new(ckpt.params.clone(), 0.3);
            assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
        }
    }

    #[test]
    fn rejects_corruption() {
        let ckpt = Checkpoint::new(ModelParams::init(ModelKind::Triplet, ModelDims { goal: 2, image: 2, joint: 2 }, 1), 0.2);
        let bytes = ckpt.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
    }
}
