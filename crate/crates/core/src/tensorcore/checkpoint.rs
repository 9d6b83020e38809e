//! Flat little-endian tensor archive.
//!
//! ```text
//! magic "MPCK" | version u32 | count u32
//! per tensor: name_len u32 | name bytes | rank u32 | dims u64 x rank | f64 x numel
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&f64::from(v).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(8) > r.len() {
                return Err(TensorError::Checkpoint(format!("tensor `{name}` truncated")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b) as Real);
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(TensorError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|_| TensorError::Checkpoint("unexpected end of data".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, TensorError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let ck = Checkpoint { entries: vec![("ab".into(), Tensor::new(vec![2], vec![1.0, -0.5]).unwrap())] };
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"MPCK");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..18], b"ab");
        assert_eq!(&b[18..22], &1u32.to_le_bytes());
        assert_eq!(&b[22..30], &2u64.to_le_bytes());
        assert_eq!(&b[30..38], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 46);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint { entries: vec![("w".into(), Tensor::zeros(&[3]))] };
        let mut b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..4), any::<u64>()), 0..5)
        ) {
            let entries: Vec<(String, Tensor)> = tensors
                .iter()
                .enumerate()
                .map(|(i, (shape, seed))| {
                    let n: usize = shape.iter().product();
                    // arbitrary bit patterns, including negative zero and subnormals
                    let data = (0..n)
                        .map(|j| f64::from_bits(seed.wrapping_mul(j as u64 + 1).rotate_left(j as u32)) as Real)
                        .map(|v| if v.is_nan() { 0.0 } else { v })
                        .collect();
                    (format!("t{i}"), Tensor::new(shape.clone(), data).unwrap())
                })
                .collect();
            let ck = Checkpoint { entries };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.entries.len(), ck.entries.len());
            for ((n1, t1), (n2, t2)) in ck.entries.iter().zip(&back.entries) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let same = t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }
}
