//! `DATCKPT1` container of named single-precision tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DATCKPT1"                      8 bytes
//! tensor count                    u32
//! per tensor:
//!   name length                   u16
//!   name                          UTF-8 bytes
//!   rank                          u8
//!   dims                          rank × u32
//!   payload                       Π dims × f32, row-major
//! ```

use std::path::Path;

use dat_tensor::{Scalar, Tensor};

use crate::error::{io_err, DatError, Result};

pub const MAGIC: &[u8; 8] = b"DATCKPT1";

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

fn corrupt(offset: usize, reason: impl Into<String>) -> DatError {
    DatError::Checkpoint {
        offset,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds or replaces a tensor, converting to single precision.
    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let name = name.into();
        let t = tensor.cast::<f32>();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| DatError::MissingTensor(name.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (n, t) in &other.entries {
            self.insert(format!("{prefix}{n}"), t);
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(
            12 + self
                .entries
                .iter()
                .map(|(_, t)| 4 * t.len() + 64)
                .sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        let count =
            u32::try_from(self.entries.len()).map_err(|_| corrupt(8, "too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| corrupt(out.len(), format!("name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank =
                u8::try_from(t.rank()).map_err(|_| corrupt(out.len(), "rank exceeds 255"))?;
            out.push(rank);
            for &d in t.shape() {
                let d =
                    u32::try_from(d).map_err(|_| corrupt(out.len(), "dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(corrupt(
                0,
                format!(
                    "bad magic {:?}; expected \"DATCKPT1\"",
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let count = r.u32("tensor count")?;
        let mut ck = Checkpoint::new();
        for i in 0..count {
            let name_at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| corrupt(name_at + 2, format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            if ck.get(&name).is_some() {
                return Err(corrupt(name_at, format!("duplicate tensor name `{name}`")));
            }
            let rank_at = r.pos;
            let rank = r.u8("rank")? as usize;
            if rank == 0 {
                return Err(corrupt(rank_at, format!("tensor `{name}` has rank 0")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut total: usize = 1;
            for _ in 0..rank {
                let at = r.pos;
                let d = r.u32("dimension")? as usize;
                if d == 0 {
                    return Err(corrupt(at, format!("tensor `{name}` has a zero dimension")));
                }
                total = total
                    .checked_mul(d)
                    .filter(|t| t.checked_mul(4).is_some())
                    .ok_or_else(|| corrupt(at, format!("tensor `{name}`: dimension overflow")))?;
                dims.push(d);
            }
            let remaining = bytes.len() - r.pos;
            if total * 4 > remaining {
                return Err(corrupt(
                    r.pos,
                    format!(
                        "truncated payload for `{name}`: need {} bytes, {remaining} remain",
                        total * 4
                    ),
                ));
            }
            let payload = r.take(total * 4, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            ck.entries.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(corrupt(
                r.pos,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes)
    }
}

pub fn save_checkpoint(path: &Path, tensors: &Checkpoint) -> Result<()> {
    tensors.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_checkpoint_is_twelve_bytes() {
        let bytes = Checkpoint::new().encode().unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..8], b"DATCKPT1");
        assert_eq!(&bytes[8..], &[0, 0, 0, 0]);
        assert!(Checkpoint::decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut ck = Checkpoint::new();
        ck.insert(
            "ab",
            &Tensor::<f32>::new([2, 3], vec![1.0, -2.0, 0.5, 0.0, -0.0, 3.25]).unwrap(),
        );
        let b = ck.encode().unwrap();
        let mut want = b"DATCKPT1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(2);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f32, -2.0, 0.5, 0.0, -0.0, 3.25] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(b, want);
        let back = Checkpoint::decode(&b).unwrap();
        assert!(back.get("ab").unwrap().bitwise_eq(ck.get("ab").unwrap()));
    }

    #[test]
    fn rejects_malformed_inputs() {
        let mut ck = Checkpoint::new();
        ck.insert("w", &Tensor::<f32>::ones([4]));
        let good = ck.encode().unwrap();

        let mut bad_magic = good.clone();
        bad_magic[7] = b'2';
        assert!(matches!(
            Checkpoint::decode(&bad_magic),
            Err(DatError::Checkpoint { offset: 0, .. })
        ));

        let truncated = &good[..good.len() - 3];
        let err = Checkpoint::decode(truncated).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");

        // One dimension of u32::MAX twice overflows any payload.
        let mut overflow = b"DATCKPT1".to_vec();
        overflow.extend_from_slice(&1u32.to_le_bytes());
        overflow.extend_from_slice(&1u16.to_le_bytes());
        overflow.push(b'x');
        overflow.push(3);
        for _ in 0..3 {
            overflow.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = Checkpoint::decode(&overflow).unwrap_err().to_string();
        assert!(
            err.contains("overflow") || err.contains("truncated"),
            "{err}"
        );

        let mut trailing = good;
        trailing.push(0);
        assert!(Checkpoint::decode(&trailing).is_err());
    }
}
