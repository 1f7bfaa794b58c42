//! Trained state: the filter plus the fusion projections it was trained with.
//!
//! File layout (little-endian):
//!
//! ```text
//! "TPF1" | u32 C | u32 hidden
//! w1 f32[hidden * 2C] | b1 f32[hidden] | w2 f32[2 * hidden] | b2 f32[2]
//! u32 Cf | 3 x ( u32 C_l | weight f32[Cf * C_l] | bias f32[Cf] )   // L2, L3, L4
//! u32 pooling | f32 eps
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::episode::{EpisodeError, FusionProjections, Projection};
use crate::tensor::{Matrix, TensorError, Vector};
use crate::tpf::{LocalPooling, TpfError, TpfModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPF1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] TpfError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tpf: TpfModel,
    pub fusion: FusionProjections,
}

impl Checkpoint {
    /// The filter must read both fused maps and L4 maps, so both widths have
    /// to equal its input channel count.
    pub fn new(tpf: TpfModel, fusion: FusionProjections) -> Result<Self, TpfError> {
        let c = tpf.in_channels();
        if fusion.output_channels() != c || fusion.input_channels()[2] != c {
            return Err(TpfError::Config(format!(
                "filter reads {c} channels but fusion maps {:?} -> {}",
                fusion.input_channels(),
                fusion.output_channels()
            )));
        }
        Ok(Self { tpf, fusion })
    }

    /// Seeded filter weights and identity-padded fusion projections.
    pub fn initialize(
        channels: [usize; 3],
        cf: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self, TpfError> {
        let tpf = TpfModel::init(cf, hidden, seed)?;
        let fusion = FusionProjections::identity(channels, cf)?;
        Self::new(tpf, fusion)
    }

    pub fn is_finite(&self) -> bool {
        let tpf = [self.tpf.w1().data(), self.tpf.b1().as_slice(), self.tpf.w2().data(), self.tpf.b2().as_slice()];
        let fusion = self.fusion.levels().iter().flat_map(|p| [p.weight.data(), p.bias.as_slice()]);
        tpf.into_iter().chain(fusion).all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let put_f32s = |out: &mut Vec<u8>, vs: &[f32]| {
            for v in vs {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, self.tpf.in_channels());
        put_u32(&mut out, self.tpf.hidden());
        put_f32s(&mut out, self.tpf.w1().data());
        put_f32s(&mut out, self.tpf.b1().as_slice());
        put_f32s(&mut out, self.tpf.w2().data());
        put_f32s(&mut out, self.tpf.b2().as_slice());
        put_u32(&mut out, self.fusion.output_channels());
        for p in self.fusion.levels() {
            put_u32(&mut out, p.weight.cols());
            put_f32s(&mut out, p.weight.data());
            put_f32s(&mut out, p.bias.as_slice());
        }
        put_u32(&mut out, self.tpf.pooling().tag() as usize);
        put_f32s(&mut out, &[self.tpf.eps()]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format("missing TPF1 magic".into()));
        }
        let c = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        if c == 0 || hidden == 0 {
            return Err(CheckpointError::Format("zero channel or hidden width".into()));
        }
        let w1 = Matrix::new(hidden, 2 * c, r.f32s(hidden * 2 * c)?)?;
        let b1 = Vector::new(r.f32s(hidden)?)?;
        let w2 = Matrix::new(2, hidden, r.f32s(2 * hidden)?)?;
        let b2 = Vector::new(r.f32s(2)?)?;
        let cf = r.u32()? as usize;
        let mut levels = Vec::with_capacity(3);
        for _ in 0..3 {
            let cl = r.u32()? as usize;
            let weight = Matrix::new(cf, cl, r.f32s(cf * cl)?)?;
            let bias = Vector::new(r.f32s(cf)?)?;
            levels.push(Projection { weight, bias });
        }
        let pooling = LocalPooling::from_tag(r.u32()?)
            .ok_or_else(|| CheckpointError::Format("unknown pooling tag".into()))?;
        let eps = r.f32s(1)?[0];
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let levels: [Projection; 3] = levels.try_into().expect("three levels");
        let tpf = TpfModel::from_parts(c, w1, b1, w2, b2)?.with_eps(eps)?.with_pooling(pooling);
        Ok(Self::new(tpf, FusionProjections::new(levels)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let len = n.checked_mul(4).ok_or_else(|| CheckpointError::Format("size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let ckpt = Checkpoint::initialize([2, 3, 4], 4, 5, 0).unwrap();
        let b = ckpt.to_bytes();
        assert_eq!(&b[..4], b"TPF1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 5);
        let w0 = f32::from_le_bytes(b[12..16].try_into().unwrap());
        assert_eq!(w0, ckpt.tpf.w1().data()[0]);
        let expected_len = 12 + 4 * (5 * 8 + 5 + 10 + 2) + 4 + 3 * 4 + 4 * (4 * (2 + 3 + 4) + 3 * 4) + 8;
        assert_eq!(b.len(), expected_len);
    }

    #[test]
    fn rejects_damage() {
        let b = Checkpoint::initialize([2, 3, 4], 4, 5, 0).unwrap().to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut long = b.clone();
        long.push(1);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn rejects_channel_disagreement() {
        let tpf = TpfModel::init(4, 8, 0).unwrap();
        assert!(Checkpoint::new(tpf.clone(), FusionProjections::identity([2, 3, 4], 5).unwrap())
            .is_err());
        assert!(Checkpoint::new(tpf, FusionProjections::identity([2, 3, 6], 4).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(seed in 0u64..500, hidden in 1usize..9, cf in 1usize..6, global in any::<bool>()) {
            let mut ckpt = Checkpoint::initialize([2, 3, cf], cf, hidden, seed).unwrap();
            if global {
                ckpt.tpf = ckpt.tpf.clone().with_pooling(LocalPooling::GlobalMax);
            }
            let bytes = ckpt.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ckpt);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
