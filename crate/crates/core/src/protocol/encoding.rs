//! Lossless delta encoding of event times with their basis bits.
//!
//! Deltas are coded in chunks of [`CHUNK_EVENTS`]. Each chunk opens with a
//! 6-bit width `b`, the bit length of the chunk's median delta. A delta `d` is
//! written as the Elias-gamma code of `(d >> b) + 1` followed by the low `b`
//! bits, so a delta below `2^b` costs `b + 1` bits and larger ones escape into
//! the gamma prefix. Every event carries one basis bit after its delta (the
//! first event's bit opens the payload).

use std::collections::HashMap;

use thiserror::Error;

use crate::simulator::{Basis, TimestampStream};

pub const CHUNK_EVENTS: usize = 256;
const WIDTH_BITS: u32 = 6;
/// Fixed part of the serialized block: event count and first tick.
pub const BLOCK_HEADER_LEN: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("ticks not monotone at event {0}")]
    NotMonotone(usize),
    #[error("{ticks} ticks but {bases} basis bits")]
    LengthMismatch { ticks: usize, bases: usize },
    #[error("encoded block truncated")]
    Truncated,
    #[error("corrupt encoded block: {0}")]
    Corrupt(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTimingBlock {
    pub count: u32,
    pub first_tick: u64,
    pub payload: Vec<u8>,
    /// Meaningful bits in `payload`.
    pub payload_bits: u64,
}

impl EncodedTimingBlock {
    pub fn total_bits(&self) -> u64 {
        8 * BLOCK_HEADER_LEN as u64 + self.payload_bits
    }

    pub fn bits_per_event(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.total_bits() as f64 / f64::from(self.count)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOCK_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.first_tick.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncodingError> {
        if bytes.len() < BLOCK_HEADER_LEN {
            return Err(EncodingError::Truncated);
        }
        let payload = bytes[BLOCK_HEADER_LEN..].to_vec();
        Ok(EncodedTimingBlock {
            count: u32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            first_tick: u64::from_le_bytes(bytes[4..12].try_into().unwrap()),
            payload_bits: 8 * payload.len() as u64,
            payload,
        })
    }
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    len: u64,
}

impl BitWriter {
    fn bit(&mut self, b: bool) {
        if self.len.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if b {
            *self.bytes.last_mut().unwrap() |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    /// Low `n` bits of `v`, most significant first.
    fn bits(&mut self, v: u64, n: u32) {
        for i in (0..n).rev() {
            self.bit(v >> i & 1 == 1);
        }
    }

    fn gamma(&mut self, x: u64) {
        debug_assert!(x >= 1);
        let n = 63 - x.leading_zeros();
        self.bits(0, n);
        self.bits(x, n + 1);
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl BitReader<'_> {
    fn bit(&mut self) -> Result<bool, EncodingError> {
        let byte = self.bytes.get((self.pos / 8) as usize).ok_or(EncodingError::Truncated)?;
        let b = byte & (0x80 >> (self.pos % 8)) != 0;
        self.pos += 1;
        Ok(b)
    }

    fn bits(&mut self, n: u32) -> Result<u64, EncodingError> {
        let mut v = 0u64;
        for _ in 0..n {
            v = v << 1 | u64::from(self.bit()?);
        }
        Ok(v)
    }

    fn gamma(&mut self) -> Result<u64, EncodingError> {
        let mut n = 0;
        while !self.bit()? {
            n += 1;
            if n > 63 {
                return Err(EncodingError::Corrupt("gamma prefix too long"));
            }
        }
        Ok(1 << n | self.bits(n)?)
    }
}

fn chunk_width(deltas: &[u64]) -> u32 {
    let mut s = deltas.to_vec();
    s.sort_unstable();
    let median = s[(s.len() - 1) / 2];
    (64 - median.leading_zeros()).min((1 << WIDTH_BITS) - 1)
}

pub fn encode_timing(ticks: &[u64], bases: &[Basis]) -> Result<EncodedTimingBlock, EncodingError> {
    if ticks.len() != bases.len() {
        return Err(EncodingError::LengthMismatch {
            ticks: ticks.len(),
            bases: bases.len(),
        });
    }
    if let Some(i) = ticks.windows(2).position(|w| w[1] < w[0]) {
        return Err(EncodingError::NotMonotone(i + 1));
    }
    let Some(&first_tick) = ticks.first() else {
        return Ok(EncodedTimingBlock {
            count: 0,
            first_tick: 0,
            payload: Vec::new(),
            payload_bits: 0,
        });
    };
    let count = u32::try_from(ticks.len()).map_err(|_| EncodingError::Corrupt("too many events"))?;
    let deltas: Vec<u64> = ticks.windows(2).map(|w| w[1] - w[0]).collect();
    let mut w = BitWriter::default();
    w.bit(bases[0] == Basis::Diagonal);
    for (c, chunk) in deltas.chunks(CHUNK_EVENTS).enumerate() {
        let b = chunk_width(chunk);
        w.bits(u64::from(b), WIDTH_BITS);
        for (k, &d) in chunk.iter().enumerate() {
            w.gamma((d >> b) + 1);
            w.bits(d, b);
            w.bit(bases[c * CHUNK_EVENTS + k + 1] == Basis::Diagonal);
        }
    }
    Ok(EncodedTimingBlock {
        count,
        first_tick,
        payload_bits: w.len,
        payload: w.bytes,
    })
}

/// Encodes the events of `stream` in `range`, keeping only their bases.
pub fn encode_stream(stream: &TimestampStream, range: std::ops::Range<usize>) -> Result<EncodedTimingBlock, EncodingError> {
    let words = &stream.words()[range];
    let ticks: Vec<u64> = words.iter().map(|w| w >> 4).collect();
    let bases: Vec<Basis> = words.iter().map(|w| Basis::of((w & 0xf) as u8)).collect();
    encode_timing(&ticks, &bases)
}

pub fn decode_timing(block: &EncodedTimingBlock) -> Result<(Vec<u64>, Vec<Basis>), EncodingError> {
    let n = block.count as usize;
    let mut ticks = Vec::with_capacity(n);
    let mut bases = Vec::with_capacity(n);
    if n == 0 {
        return Ok((ticks, bases));
    }
    let mut r = BitReader {
        bytes: &block.payload,
        pos: 0,
    };
    let basis = |bit: bool| if bit { Basis::Diagonal } else { Basis::HV };
    let mut t = block.first_tick;
    ticks.push(t);
    bases.push(basis(r.bit()?));
    let mut b = 0;
    for i in 0..n - 1 {
        if i % CHUNK_EVENTS == 0 {
            b = r.bits(WIDTH_BITS)? as u32;
        }
        let q = r.gamma()? - 1;
        let hi = q.checked_shl(b).filter(|v| v >> b == q).ok_or(EncodingError::Corrupt("delta overflow"))?;
        let d = hi | r.bits(b)?;
        t = t.checked_add(d).ok_or(EncodingError::Corrupt("tick overflow"))?;
        ticks.push(t);
        bases.push(basis(r.bit()?));
    }
    Ok((ticks, bases))
}

/// Empirical entropy (bits) of a delta sample. Deltas are histogrammed in
/// bins of `max(1, mean / 64)` ticks; the plug-in entropy of the bins with
/// the Miller-Madow correction, plus `log2` of the bin width, estimates the
/// entropy of the tick-resolution distribution.
pub fn delta_entropy(deltas: &[u64]) -> f64 {
    let n = deltas.len();
    if n == 0 {
        return 0.0;
    }
    let mean = deltas.iter().map(|&d| d as f64).sum::<f64>() / n as f64;
    let width = ((mean / 64.0).floor() as u64).max(1);
    let mut hist: HashMap<u64, u64> = HashMap::new();
    for &d in deltas {
        *hist.entry(d / width).or_default() += 1;
    }
    let nf = n as f64;
    let plug_in: f64 = hist
        .values()
        .map(|&c| {
            let p = c as f64 / nf;
            -p * p.log2()
        })
        .sum();
    let miller_madow = (hist.len() as f64 - 1.0) / (2.0 * nf * std::f64::consts::LN_2);
    plug_in + miller_madow + (width as f64).log2()
}

/// Encoded delta bits per event against the empirical delta entropy.
/// Basis bits are left out of both sides; they are sent one-for-one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overhead {
    pub events: usize,
    pub bits_per_delta: f64,
    pub entropy_per_delta: f64,
}

impl Overhead {
    pub fn ratio(&self) -> f64 {
        self.bits_per_delta / self.entropy_per_delta
    }
}

pub fn measure_overhead(ticks: &[u64], bases: &[Basis]) -> Result<Overhead, EncodingError> {
    let block = encode_timing(ticks, bases)?;
    let n = ticks.len();
    if n < 2 {
        return Err(EncodingError::Corrupt("need at least two events"));
    }
    let deltas: Vec<u64> = ticks.windows(2).map(|w| w[1] - w[0]).collect();
    let delta_bits = block.total_bits() - n as u64;
    Ok(Overhead {
        events: n,
        bits_per_delta: delta_bits as f64 / (n - 1) as f64,
        entropy_per_delta: delta_entropy(&deltas),
    })
}
