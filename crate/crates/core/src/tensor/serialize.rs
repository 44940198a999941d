//! Little-endian tensor blobs: `rank: u64`, `dims: [u64; rank]`, then the
//! elements as raw `f32`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

/// Largest rank and element count accepted when reading, to reject garbage headers
/// before allocating.
const MAX_RANK: u64 = 8;
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor<f32>) -> Result<()> {
    out.write_all(&(tensor.rank() as u64).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(input)?))
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor<f32>> {
    let rank = read_u64(input)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel = 1u64;
    for _ in 0..rank {
        let d = read_u64(input)?;
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel == 0 || numel > MAX_ELEMENTS {
        return Err(Error::Format(format!("tensor shape {shape:?} out of range")));
    }
    let mut bytes = vec![0u8; numel as usize * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(buf.len(), 8 + 8 * shape.len() + 4 * n);
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let t = Tensor::<f32>::ones(&[2, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
