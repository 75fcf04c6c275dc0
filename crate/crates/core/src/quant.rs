//! Uniform b-bit group quantization.
//!
//! A group of reals is mapped to integer codes in `[0, 2^b - 1]` through an
//! affine grid: `code = round((x - m) / Δ)` with zero-point `m = min` and
//! scale `Δ = (max - min) / (2^b - 1)`. Dequantization is `code·Δ + m`.
//! Codes are bit-packed LSB-first into little-endian bytes, one group padded
//! to a byte boundary.
//!
//! Group parameters are stored as `f32` (two per group); all arithmetic runs
//! in `f64` on the stored values, so every accuracy statement is relative to
//! the stored scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-point, scale and bit width of one quantization group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub zero_point: f32,
    pub scale: f32,
}

/// Packed b-bit codes plus the parameters needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    packed: Vec<u8>,
    params: QuantParams,
    len: usize,
}

impl QuantizedGroup {
    /// Reassemble a group from its stored parts (e.g. after deserialization).
    pub fn from_parts(packed: Vec<u8>, params: QuantParams, len: usize) -> Result<Self> {
        if !(1..=8).contains(&params.bits) {
            return Err(Error::InvalidBits(params.bits));
        }
        let expected = packed_len(len, params.bits);
        if packed.len() != expected {
            return Err(Error::CorruptPack {
                expected,
                actual: packed.len(),
                len,
                bits: params.bits,
            });
        }
        Ok(Self {
            packed,
            params,
            len,
        })
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Packed little-endian code bytes.
    pub fn packed_bytes(&self) -> &[u8] {
        &self.packed
    }

    /// Unpacked integer codes, one per element.
    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.packed, self.params.bits, self.len)
    }

    pub fn dequantize(&self) -> Result<Vec<f64>> {
        dequantize_group(self)
    }

    /// Serialized size of this group: packed codes plus two f32 parameters.
    pub fn stored_bytes(&self) -> usize {
        self.packed.len() + 8
    }
}

/// Bytes needed to pack `len` codes of `bits` bits each.
pub fn packed_len(len: usize, bits: u8) -> usize {
    (len * bits as usize).div_ceil(8)
}

/// Pack codes LSB-first into little-endian bytes.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bit = 0usize;
    for &code in codes {
        for j in 0..bits {
            if code >> j & 1 == 1 {
                out[bit >> 3] |= 1 << (bit & 7);
            }
            bit += 1;
        }
    }
    out
}

/// Inverse of [`pack_codes`]. Fails if the buffer length does not match.
pub fn unpack_codes(packed: &[u8], bits: u8, len: usize) -> Result<Vec<u8>> {
    let expected = packed_len(len, bits);
    if packed.len() != expected {
        return Err(Error::CorruptPack {
            expected,
            actual: packed.len(),
            len,
            bits,
        });
    }
    let mut out = Vec::with_capacity(len);
    let mut bit = 0usize;
    for _ in 0..len {
        let mut code = 0u8;
        for j in 0..bits {
            if packed[bit >> 3] >> (bit & 7) & 1 == 1 {
                code |= 1 << j;
            }
            bit += 1;
        }
        out.push(code);
    }
    Ok(out)
}

/// Quantize one group of values to `bits`-bit codes.
///
/// Zero-point and scale come from the group min/max. A constant group stores
/// `Δ = 0` with all codes zero, so dequantization returns the zero-point
/// exactly. Codes are clamped to `[0, 2^b - 1]`; the clamp only matters for
/// values pushed outside the group range by in-flight updates upstream.
pub fn quantize_group(values: &[f64], bits: u8) -> Result<QuantizedGroup> {
    if values.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidBits(bits));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite(v));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let zero_point = lo as f32;
    let scale = if hi > lo { ((hi - lo) / levels) as f32 } else { 0.0 };

    // Arithmetic on the stored (f32-rounded) parameters keeps codes and
    // dequantization consistent.
    let m = zero_point as f64;
    let delta = scale as f64;
    let max_code = ((1u32 << bits) - 1) as u8;
    let codes: Vec<u8> = values
        .iter()
        .map(|&x| {
            if delta == 0.0 {
                0
            } else {
                ((x - m) / delta).round().clamp(0.0, max_code as f64) as u8
            }
        })
        .collect();

    Ok(QuantizedGroup {
        packed: pack_codes(&codes, bits),
        params: QuantParams {
            bits,
            zero_point,
            scale,
        },
        len: values.len(),
    })
}

/// Map codes back to reals: `code·Δ + m`, length preserved.
pub fn dequantize_group(group: &QuantizedGroup) -> Result<Vec<f64>> {
    let codes = group.codes()?;
    let m = group.params.zero_point as f64;
    let delta = group.params.scale as f64;
    Ok(codes.iter().map(|&c| c as f64 * delta + m).collect())
}
