//! TFT1: one tensor as `b"TFT1"`, a little-endian `u32` rank, `u64` dims
//! and `f64` values in row-major order.

use std::fs;
use std::path::Path;

use transfer_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"TFT1";

/// Size in bytes of the encoding of a tensor with `shape`.
pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 4 + 8 * shape.len() + 8 * shape.iter().product::<usize>()
}

pub fn encode(tensor: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err(format!("truncated: needed {n} more bytes, {} left", bytes.len()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Decodes one tensor from the front of `bytes`, advancing the slice.
pub fn decode(bytes: &mut &[u8]) -> Result<Tensor, String> {
    if take(bytes, 4)? != MAGIC {
        return Err("missing TFT1 magic".into());
    }
    let rank = u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")) as usize;
    if rank > 8 {
        return Err(format!("rank {rank} too large"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| format!("dimension {d} too large"))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let raw = take(bytes, len.checked_mul(8).ok_or("element count overflows")?)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn save(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(encoded_len(tensor.shape()));
    encode(tensor, &mut out);
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut rest = bytes.as_slice();
    let t = decode(&mut rest).map_err(|m| CliError::format(path, m))?;
    if !rest.is_empty() {
        return Err(CliError::format(path, format!("{} trailing bytes", rest.len())));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin() * 1e-300 + i as f64);
        let mut buf = Vec::new();
        encode(&t, &mut buf);
        assert_eq!(buf.len(), encoded_len(t.shape()));
        let mut rest = buf.as_slice();
        let back = decode(&mut rest).unwrap();
        assert!(back.bitwise_eq(&t));
        assert!(rest.is_empty());
    }

    #[test]
    fn scalar_and_special_values() {
        let t = Tensor::new(&[3], vec![f64::NAN, -0.0, f64::INFINITY]).unwrap();
        let mut buf = Vec::new();
        encode(&t, &mut buf);
        let back = decode(&mut buf.as_slice()).unwrap();
        assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut buf = Vec::new();
        encode(&Tensor::zeros(&[4]), &mut buf);
        assert!(decode(&mut &buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(decode(&mut buf.as_slice()).is_err());
    }
}
