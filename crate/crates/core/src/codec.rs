//! Wire formats: sparse model deltas (downlink), sample batches (uplink) and
//! the 12-byte control record. All integers are little-endian.
//!
//! Delta layout:
//! `"AMSD" | version u8 | phase u32 | P u32 | M u32 | gzip(bitmask, M bytes) | S u32 | S × f16`
//! where the bitmask has `⌈P/8⌉` bytes and bit `j` sits in byte `j/8`, LSB first.
//!
//! Uplink layout:
//! `"AMSU" | version u8 | client u32 | count u32 | count × f32 timestamps | L u32 | gzip(f16 features, L bytes)`

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::{Compression, GzBuilder};
use half::f16;
use thiserror::Error;

use crate::optimizer::CoordinateMask;
use crate::workload::ParamVector;

pub const DELTA_MAGIC: &[u8; 4] = b"AMSD";
pub const UPLINK_MAGIC: &[u8; 4] = b"AMSU";
pub const DELTA_VERSION: u8 = 1;
pub const UPLINK_VERSION: u8 = 1;
pub const GZIP_LEVEL: u32 = 6;
/// Fixed-size prefix of an encoded delta, excluding the mask and values.
pub const DELTA_HEADER_BYTES: usize = 4 + 1 + 4 + 4 + 4 + 4;
pub const CONTROL_RECORD_BYTES: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload")]
    Truncated,
    #[error("mask popcount {popcount} does not match value count {count}")]
    Integrity { popcount: usize, count: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("length mismatch: params {params}, delta {delta}")]
    LengthMismatch { params: usize, delta: usize },
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Downlink unit: the new values of the masked coordinates after phase `phase`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDelta {
    pub phase: u32,
    pub mask: CoordinateMask,
    /// One value per mask index, ascending index order.
    pub values: Vec<f16>,
}

impl ModelDelta {
    /// Quantizes `params` at the mask coordinates.
    pub fn from_params(phase: u32, mask: CoordinateMask, params: &ParamVector) -> Self {
        let values = mask.indices().iter().map(|&j| f16::from_f64(params.0[j])).collect();
        Self { phase, mask, values }
    }

    pub fn total_params(&self) -> usize {
        self.mask.total()
    }
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzBuilder::new()
        .mtime(0)
        .operating_system(255)
        .write(Vec::with_capacity(bytes.len() / 4 + 32), Compression::new(GZIP_LEVEL));
    enc.write_all(bytes).expect("writing to Vec cannot fail");
    enc.finish().expect("writing to Vec cannot fail")
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| CodecError::Malformed(format!("gzip: {e}")))?;
    Ok(out)
}

pub fn pack_mask(mask: &CoordinateMask) -> Vec<u8> {
    let mut bits = vec![0u8; mask.total().div_ceil(8)];
    for &j in mask.indices() {
        bits[j / 8] |= 1 << (j % 8);
    }
    bits
}

fn unpack_mask(bits: &[u8], total: usize) -> Result<CoordinateMask> {
    if bits.len() != total.div_ceil(8) {
        return Err(CodecError::Malformed(format!(
            "bitmask has {} bytes, expected {}",
            bits.len(),
            total.div_ceil(8)
        )));
    }
    let mut indices = Vec::new();
    for (b, &byte) in bits.iter().enumerate() {
        let mut rest = byte;
        while rest != 0 {
            let j = b * 8 + rest.trailing_zeros() as usize;
            if j >= total {
                return Err(CodecError::Malformed("bitmask padding bits set".into()));
            }
            indices.push(j);
            rest &= rest - 1;
        }
    }
    Ok(CoordinateMask::from_indices(total, indices))
}

pub fn encode_delta(delta: &ModelDelta) -> Vec<u8> {
    debug_assert_eq!(delta.values.len(), delta.mask.count());
    let mask = gzip(&pack_mask(&delta.mask));
    let mut out = Vec::with_capacity(DELTA_HEADER_BYTES + mask.len() + 2 * delta.values.len());
    out.extend_from_slice(DELTA_MAGIC);
    out.push(DELTA_VERSION);
    out.extend_from_slice(&delta.phase.to_le_bytes());
    out.extend_from_slice(&(delta.total_params() as u32).to_le_bytes());
    out.extend_from_slice(&(mask.len() as u32).to_le_bytes());
    out.extend_from_slice(&mask);
    out.extend_from_slice(&(delta.values.len() as u32).to_le_bytes());
    for v in &delta.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CodecError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Malformed(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn check_header(r: &mut Reader<'_>, magic: &[u8; 4], version: u8) -> Result<()> {
    if r.take(4).map_err(|_| CodecError::BadMagic)? != magic {
        return Err(CodecError::BadMagic);
    }
    match r.u8()? {
        v if v == version => Ok(()),
        v => Err(CodecError::UnsupportedVersion(v)),
    }
}

pub fn decode_delta(bytes: &[u8]) -> Result<ModelDelta> {
    let mut r = Reader { buf: bytes };
    check_header(&mut r, DELTA_MAGIC, DELTA_VERSION)?;
    let phase = r.u32()?;
    let total = r.u32()? as usize;
    let mask_len = r.u32()? as usize;
    let mask = unpack_mask(&gunzip(r.take(mask_len)?)?, total)?;
    let count = r.u32()? as usize;
    if count != mask.count() {
        return Err(CodecError::Integrity { popcount: mask.count(), count });
    }
    let raw = r.take(count.checked_mul(2).ok_or(CodecError::Truncated)?)?;
    let values = raw
        .chunks_exact(2)
        .map(|c| f16::from_le_bytes([c[0], c[1]]))
        .collect();
    r.finish()?;
    Ok(ModelDelta { phase, mask, values })
}

/// Writes the delta's dequantized values into `params`.
pub fn apply_delta(params: &mut ParamVector, delta: &ModelDelta) -> Result<()> {
    if params.len() != delta.total_params() {
        return Err(CodecError::LengthMismatch {
            params: params.len(),
            delta: delta.total_params(),
        });
    }
    for (&j, v) in delta.mask.indices().iter().zip(&delta.values) {
        params.0[j] = v.to_f64();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UplinkSample {
    pub timestamp: f32,
    /// Flattened `cells × dim` features.
    pub features: Vec<f16>,
}

impl UplinkSample {
    pub fn from_features(timestamp: f64, features: &[f64]) -> Self {
        Self {
            timestamp: timestamp as f32,
            features: features.iter().map(|&x| f16::from_f64(x)).collect(),
        }
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|x| x.to_f64()).collect()
    }
}

/// Buffered samples from one edge client.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkBatch {
    pub client_id: u32,
    pub samples: Vec<UplinkSample>,
}

/// Returns `None` for an empty batch: nothing goes on the wire.
pub fn encode_uplink(batch: &UplinkBatch) -> Option<Vec<u8>> {
    if batch.samples.is_empty() {
        return None;
    }
    let per_sample = batch.samples[0].features.len();
    assert!(
        batch.samples.iter().all(|s| s.features.len() == per_sample),
        "uplink samples must share one feature shape"
    );
    let mut raw = Vec::with_capacity(batch.samples.len() * per_sample * 2);
    for s in &batch.samples {
        for v in &s.features {
            raw.extend_from_slice(&v.to_le_bytes());
        }
    }
    let payload = gzip(&raw);
    let mut out = Vec::with_capacity(17 + 4 * batch.samples.len() + payload.len());
    out.extend_from_slice(UPLINK_MAGIC);
    out.push(UPLINK_VERSION);
    out.extend_from_slice(&batch.client_id.to_le_bytes());
    out.extend_from_slice(&(batch.samples.len() as u32).to_le_bytes());
    for s in &batch.samples {
        out.extend_from_slice(&s.timestamp.to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Some(out)
}

pub fn decode_uplink(bytes: &[u8]) -> Result<UplinkBatch> {
    let mut r = Reader { buf: bytes };
    check_header(&mut r, UPLINK_MAGIC, UPLINK_VERSION)?;
    let client_id = r.u32()?;
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(CodecError::Malformed("empty uplink batch".into()));
    }
    let timestamps = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let len = r.u32()? as usize;
    let raw = gunzip(r.take(len)?)?;
    r.finish()?;
    if raw.len() % (2 * count) != 0 {
        return Err(CodecError::Malformed(format!(
            "feature payload of {} bytes does not split into {count} samples",
            raw.len()
        )));
    }
    let per_sample = raw.len() / 2 / count;
    let samples = timestamps
        .into_iter()
        .zip(raw.chunks_exact(2 * per_sample.max(1)))
        .map(|(timestamp, chunk)| UplinkSample {
            timestamp,
            features: chunk.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect(),
        })
        .collect();
    Ok(UplinkBatch { client_id, samples })
}

/// Controller directives piggybacked on every downlink message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlRecord {
    pub rate: f32,
    pub t_update: f32,
    pub flags: u32,
}

impl ControlRecord {
    pub const FLAG_DELTA: u32 = 1;
    pub const FLAG_SLOWDOWN: u32 = 1 << 1;

    pub fn to_bytes(&self) -> [u8; CONTROL_RECORD_BYTES] {
        let mut out = [0u8; CONTROL_RECORD_BYTES];
        out[..4].copy_from_slice(&self.rate.to_le_bytes());
        out[4..8].copy_from_slice(&self.t_update.to_le_bytes());
        out[8..].copy_from_slice(&self.flags.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        Ok(Self { rate: r.f32()?, t_update: r.f32()?, flags: r.u32()? })
    }
}

/// Control record followed by the encoded delta, if any.
pub fn encode_downlink(control: ControlRecord, delta: Option<&ModelDelta>) -> Vec<u8> {
    let mut control = control;
    control.flags &= !ControlRecord::FLAG_DELTA;
    if delta.is_some() {
        control.flags |= ControlRecord::FLAG_DELTA;
    }
    let mut out = control.to_bytes().to_vec();
    if let Some(d) = delta {
        out.extend_from_slice(&encode_delta(d));
    }
    out
}

pub fn decode_downlink(bytes: &[u8]) -> Result<(ControlRecord, Option<ModelDelta>)> {
    if bytes.len() < CONTROL_RECORD_BYTES {
        return Err(CodecError::Truncated);
    }
    let (head, rest) = bytes.split_at(CONTROL_RECORD_BYTES);
    let control = ControlRecord::from_bytes(head)?;
    let delta = if control.flags & ControlRecord::FLAG_DELTA != 0 {
        Some(decode_delta(rest)?)
    } else if rest.is_empty() {
        None
    } else {
        return Err(CodecError::Malformed("payload without delta flag".into()));
    };
    Ok((control, delta))
}

/// Fixed delta used for the checked-in golden bytes.
pub fn golden_delta() -> ModelDelta {
    let mask = CoordinateMask::from_indices(212, vec![0, 3, 7, 8, 64, 127, 200, 211]);
    let values = [0.1, -1.5, 2.0, 0.0, 65504.0, -0.000061035156, 3.140625, -7.25]
        .iter()
        .map(|&x| f16::from_f64(x))
        .collect();
    ModelDelta { phase: 7, mask, values }
}

/// Fixed uplink batch used for the checked-in golden bytes.
pub fn golden_uplink() -> UplinkBatch {
    let samples = (0..3)
        .map(|k| {
            let features: Vec<f64> = (0..16).map(|i| ((i * 7 + k * 3) % 11) as f64 * 0.25 - 1.0).collect();
            UplinkSample::from_features(10.0 + k as f64 / 3.0, &features)
        })
        .collect();
    UplinkBatch { client_id: 42, samples }
}
