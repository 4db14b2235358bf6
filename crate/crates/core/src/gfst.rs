//! GFST binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GFST" | u32 version = 1 | u8 dtype (0 = f32, 1 = f64) | u8 rank
//!        | rank × u64 dims | row-major payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"GFST";
pub const VERSION: u32 = 1;

/// A tensor read from disk in whichever precision it was written.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + T::BYTES * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("truncated GFST stream".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn decode_payload<T: Real>(dims: Vec<usize>, mut bytes: &[u8]) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    let payload = take(&mut bytes, n * T::BYTES)?;
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(dims, data)
}

pub fn decode(mut bytes: &[u8]) -> Result<AnyTensor> {
    if take(&mut bytes, 4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let dtype = take(&mut bytes, 1)?[0];
    let rank = take(&mut bytes, 1)?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| Error::Format("dim overflow".into()))?);
    }
    match dtype {
        0 => Ok(AnyTensor::F32(decode_payload(dims, bytes)?)),
        1 => Ok(AnyTensor::F64(decode_payload(dims, bytes)?)),
        other => Err(Error::Format(format!("unknown dtype {}", other))),
    }
}

pub fn write<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn read_as<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read(path)?.into_real())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        let mut expect = b"GFST".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 0, 2]);
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corrupt_streams() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(0usize..4, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), AnyTensor::F64(t.clone()));
            let t32: Tensor<f32> = t.cast();
            prop_assert_eq!(decode(&encode(&t32)).unwrap(), AnyTensor::F32(t32));
        }
    }
}
