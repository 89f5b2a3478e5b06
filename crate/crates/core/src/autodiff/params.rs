//! Named parameter tensors with paired gradient slots, and the flat binary
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "HCKP" | version u8 = 1 | count u32
//! count x { name_len u16 | name utf-8 | kind u8 | ndim u8 = 4 | dims 4 x u32 }
//! payload: every tensor in table order, f32 little-endian
//! ```

use std::io::{Read, Write};

use super::tensor::Tensor4;
use crate::bytes::ByteCursor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Convolution kernel.
    Weight,
    /// Convolution bias.
    Bias,
    /// Batch-norm gamma.
    BnScale,
    /// Batch-norm beta.
    BnShift,
    RunningMean,
    RunningVar,
    /// Number of running-statistic updates (scalar).
    BnSteps,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        matches!(
            self,
            ParamKind::Weight | ParamKind::Bias | ParamKind::BnScale | ParamKind::BnShift
        )
    }

    /// Included in the parameter L1 penalty.
    pub fn regularized(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }

    fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::BnScale => 2,
            ParamKind::BnShift => 3,
            ParamKind::RunningMean => 4,
            ParamKind::RunningVar => 5,
            ParamKind::BnSteps => 6,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::BnScale,
            3 => ParamKind::BnShift,
            4 => ParamKind::RunningMean,
            5 => ParamKind::RunningVar,
            6 => ParamKind::BnSteps,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown parameter kind {other}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor4,
    pub grad: Tensor4,
}

/// Parameters in insertion order; that order is the iteration and
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor4) -> ParamId {
        let grad = Tensor4::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }
    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }
    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].value
    }
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.params[id.0].value
    }
    pub fn grad(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor4) {
        self.params[id.0].grad.add_assign(g);
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Sum of `|theta|` over regularized parameters.
    pub fn l1_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind.regularized())
            .flat_map(|p| p.value.data())
            .map(|v| v.abs())
            .sum()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidConfig(format!("parameter name too long: {}", p.name)))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(p.kind.code());
            buf.push(4);
            for d in p.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for p in &self.params {
            for v in p.value.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes);
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = cur.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = cur.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::InvalidConfig("parameter name is not UTF-8".into()))?;
            let kind = ParamKind::from_code(cur.u8()?)?;
            let ndim = cur.u8()?;
            if ndim != 4 {
                return Err(Error::InvalidConfig(format!("unsupported rank {ndim}")));
            }
            let dims = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?];
            let n = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .filter(|&n| n > 0 && n <= (1 << 34))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| Error::DimOverflow(dims.to_vec()))?;
            table.push((name, kind, dims.map(|d| d as usize), n));
        }
        let mut store = ParamStore::new();
        for (name, kind, shape, n) in table {
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::DimOverflow(vec![n as u32]))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            store.add(name, kind, Tensor4::from_vec(shape, data)?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("conv.w", ParamKind::Weight, Tensor4::from_vec([2, 1, 1, 1], vec![-2.0, 0.5]).unwrap());
        s.add("bn.gamma", ParamKind::BnScale, Tensor4::filled([1, 1, 1, 1], 3.0));
        s.add("bn.mean", ParamKind::RunningMean, Tensor4::filled([1, 1, 1, 1], 0.25));
        s
    }

    #[test]
    fn l1_excludes_batch_norm() {
        assert_eq!(store().l1_norm(), 2.5);
        assert_eq!(store().trainable_count(), 3);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let s = store();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, s);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::read_checkpoint(&bad[..]), Err(Error::BadMagic { .. })));
        let mut ver = buf.clone();
        ver[4] = 9;
        assert!(matches!(ParamStore::read_checkpoint(&ver[..]), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(
            ParamStore::read_checkpoint(&buf[..buf.len() - 4]),
            Err(Error::Truncated { .. })
        ));
    }
}
