//! Binary codec for `samples/<id>.rec` files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "IFR1" | version u32 = 1 | sample_id u64 | true_class i32 | flags u32
//! C u32 | logits f32 x C
//! spatial_rank u32 | dims u32 x rank
//! F u32 | features f32 x F*prod(dims)
//! n_grad_classes u32 | (class_id i32 | grads f32 x F*prod(dims)) x n
//! if flags & 1: channels u32 | H_in u32 | W_in u32 | f32 x channels*H_in*W_in
//! ```

use std::collections::BTreeMap;

use crate::error::{IfaError, Result};

use super::{InputImage, SampleRecord};

pub const RECORD_MAGIC: &[u8; 4] = b"IFR1";
pub const RECORD_VERSION: u32 = 1;
const FLAG_INPUT: u32 = 1;

pub fn encode(rec: &SampleRecord) -> Vec<u8> {
    let payload = rec.features.len() * (1 + rec.grads.len());
    let mut out = Vec::with_capacity(64 + 4 * (payload + rec.logits.len()));
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&rec.sample_id.to_le_bytes());
    out.extend_from_slice(&rec.true_class.to_le_bytes());
    let flags = if rec.input.is_some() { FLAG_INPUT } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    put_u32(&mut out, rec.logits.len());
    put_f32s(&mut out, &rec.logits);
    put_u32(&mut out, rec.dims.len());
    for &d in &rec.dims {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, rec.num_features);
    put_f32s(&mut out, &rec.features);
    put_u32(&mut out, rec.grads.len());
    for (&class_id, g) in &rec.grads {
        out.extend_from_slice(&class_id.to_le_bytes());
        put_f32s(&mut out, g);
    }
    if let Some(input) = &rec.input {
        put_u32(&mut out, input.channels);
        put_u32(&mut out, input.height);
        put_u32(&mut out, input.width);
        put_f32s(&mut out, &input.data);
    }
    out
}

/// Decodes a record without checking finiteness.
pub fn decode(bytes: &[u8], expected_id: u64) -> Result<SampleRecord> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        sample_id: expected_id,
    };
    if cur.take(4)? != RECORD_MAGIC {
        return Err(cur.corrupt("bad record magic"));
    }
    let version = cur.u32()?;
    if version != RECORD_VERSION {
        return Err(cur.corrupt(format!("unsupported record version {version}")));
    }
    let sample_id = cur.u64()?;
    if sample_id != expected_id {
        return Err(cur.corrupt(format!("file holds sample id {sample_id}")));
    }
    let true_class = cur.i32()?;
    let flags = cur.u32()?;
    let num_classes = cur.len()?;
    let logits = cur.f32s(num_classes)?;
    let rank = cur.len()?;
    let mut dims = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        dims.push(cur.len()?);
    }
    let num_features = cur.len()?;
    let spatial = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| cur.corrupt("dims overflow"))?;
    let plane = num_features
        .checked_mul(spatial)
        .ok_or_else(|| cur.corrupt("feature size overflow"))?;
    let features = cur.f32s(plane)?;
    let n_grads = cur.len()?;
    let mut grads = BTreeMap::new();
    for _ in 0..n_grads {
        let class_id = cur.i32()?;
        let g = cur.f32s(plane)?;
        if grads.insert(class_id, g).is_some() {
            return Err(cur.corrupt(format!("duplicate gradient class {class_id}")));
        }
    }
    let input = if flags & FLAG_INPUT != 0 {
        let channels = cur.len()?;
        let height = cur.len()?;
        let width = cur.len()?;
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| cur.corrupt("input size overflow"))?;
        Some(InputImage {
            channels,
            height,
            width,
            data: cur.f32s(n)?,
        })
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(cur.corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(SampleRecord {
        sample_id,
        true_class,
        logits,
        dims,
        num_features,
        features,
        grads,
        input,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    sample_id: u64,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> IfaError {
        IfaError::CorruptRecord {
            sample_id: self.sample_id,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SampleRecord {
        let mut grads = BTreeMap::new();
        grads.insert(1, vec![0.5, -0.25, 1.0, 2.0]);
        SampleRecord {
            sample_id: 7,
            true_class: 1,
            logits: vec![0.1, -0.2],
            dims: vec![2, 2],
            num_features: 1,
            features: vec![1.0, 2.0, 3.0, 4.0],
            grads,
            input: Some(InputImage {
                channels: 1,
                height: 1,
                width: 2,
                data: vec![0.0, 1.0],
            }),
        }
    }

    #[test]
    fn header_bytes_follow_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[0..4], b"IFR1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 7);
        assert_eq!(i32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 2);
        // 4+4+8+4+4 + 4+8 + 4+8 + 4+16 + 4+(4+16) + 12+8
        assert_eq!(bytes.len(), 24 + 12 + 12 + 20 + 24 + 20);
    }

    #[test]
    fn decode_inverts_encode() {
        let rec = sample();
        assert_eq!(decode(&encode(&rec), 7).unwrap(), rec);
    }

    #[test]
    fn truncation_is_reported_with_id() {
        let bytes = encode(&sample());
        let err = decode(&bytes[..bytes.len() - 3], 7).unwrap_err();
        assert!(matches!(err, IfaError::CorruptRecord { sample_id: 7, .. }));
    }

    #[test]
    fn id_mismatch_is_corruption() {
        let bytes = encode(&sample());
        assert!(matches!(
            decode(&bytes, 8),
            Err(IfaError::CorruptRecord { sample_id: 8, .. })
        ));
    }
}
