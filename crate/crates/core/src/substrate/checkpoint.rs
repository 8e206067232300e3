//! `JR2W` weight container: magic, version, block count, then per block the
//! name, the shape and a binary32 little-endian payload. Optimizer moments are
//! not stored.

use std::fs;
use std::path::Path;

use super::Parameters;
use crate::error::{Error, Result};

pub const JR2W_MAGIC: &[u8; 4] = b"JR2W";
pub const JR2W_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode_checkpoint<P: Parameters + ?Sized>(params: &P) -> Vec<u8> {
    let mut blocks = Vec::new();
    params.visit("", &mut |name, shape, values| {
        blocks.push(ParamBlock { name: name.to_string(), shape: shape.to_vec(), values: values.to_vec() })
    });
    encode_blocks(&blocks)
}

pub fn encode_blocks(blocks: &[ParamBlock]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(JR2W_MAGIC);
    out.extend_from_slice(&JR2W_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &b.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Length { expected: self.at + n, found: self.bytes.len() });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<ParamBlock>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).map_err(|_| Error::Format("checkpoint shorter than its magic".into()))? != JR2W_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != JR2W_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values: Vec<f64> = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite weight in block {name}")));
        }
        blocks.push(ParamBlock { name, shape, values });
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last block", bytes.len() - r.at)));
    }
    Ok(blocks)
}

pub fn write_checkpoint<P: Parameters + ?Sized>(params: &P, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<ParamBlock>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Copies blocks into `params`, requiring identical names, order and shapes.
pub fn assign_blocks<P: Parameters + ?Sized>(params: &mut P, blocks: &[ParamBlock]) -> Result<()> {
    let mut idx = 0;
    let mut failure = None;
    params.visit_mut("", &mut |name, shape, values| {
        if failure.is_some() {
            return;
        }
        match blocks.get(idx) {
            Some(b) if b.name == name && b.shape == shape => values.copy_from_slice(&b.values),
            Some(b) => failure = Some(format!("block {idx} is {} {:?}, model expects {name} {shape:?}", b.name, b.shape)),
            None => failure = Some(format!("checkpoint ends before {name}")),
        }
        idx += 1;
    });
    if let Some(msg) = failure {
        return Err(Error::Format(msg));
    }
    if idx != blocks.len() {
        return Err(Error::Format(format!("checkpoint has {} blocks, model has {idx}", blocks.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{ConvParams, Scalar};
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_preserves_names_and_f32_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let conv = ConvParams::he_normal(2, 3, (3, 3), &mut rng).unwrap();
        let bytes = encode_checkpoint(&conv);
        let blocks = decode_checkpoint(&bytes).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].name, "weight");
        assert_eq!(blocks[0].shape, vec![2, 3, 3, 3]);
        let mut back = conv.zeros_like();
        assign_blocks(&mut back, &blocks).unwrap();
        for (a, b) in back.weight.iter().zip(&conv.weight) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_layout_mismatch_and_garbage() {
        let blocks = decode_checkpoint(&encode_checkpoint(&Scalar(1.5))).unwrap();
        let mut conv = ConvParams::zeros(1, 1, (3, 3)).unwrap();
        assert!(assign_blocks(&mut conv, &blocks).is_err());
        assert!(matches!(decode_checkpoint(b"NOPE\x01\0\0\0\0\0\0\0"), Err(Error::Format(_))));
        let mut bytes = encode_checkpoint(&Scalar(1.5));
        bytes.pop();
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Length { .. })));
    }
}
