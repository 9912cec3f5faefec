//! Coincidence identification, basis sifting and QBER estimation.

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::index;
use thiserror::Error;

use crate::seed;
use crate::simulator::{raw_bit, Basis, Party, TimestampStream};
use crate::timesync::OffsetTimeline;
use crate::{secs_to_ticks, ticks_to_secs};

/// Two-sided 95 % normal quantile.
pub const Z95: f64 = 1.959_964;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SiftError {
    #[error("keys differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("QBER sample is empty")]
    EmptySample,
    #[error("sample fraction {0} outside (0, 1]")]
    BadFraction(String),
    #[error("sifted key file line {0}: expected `basis,bit` with 0/1 values")]
    Parse(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoincidencePair {
    pub index_a: usize,
    pub index_b: usize,
    pub detector_a: u8,
    pub detector_b: u8,
    /// `t_B - t_A - offset` (s).
    pub residual: f64,
}

impl CoincidencePair {
    pub fn same_basis(&self) -> bool {
        Basis::of(self.detector_a) == Basis::of(self.detector_b)
    }
}

/// All coincidences for side-A events in `a_range`. Each event is used at
/// most once; competing candidates go to the smallest |residual|.
pub fn find_coincidences_in(
    a: &TimestampStream,
    a_range: Range<usize>,
    b: &TimestampStream,
    offsets: &OffsetTimeline,
    tau_c: f64,
) -> Vec<CoincidencePair> {
    let half = secs_to_ticks(tau_c) / 2.0;
    let bw = b.words();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut j = 0usize;
    for i in a_range {
        let ta = a.tick(i) as f64;
        let centre = ta + secs_to_ticks(offsets.offset_at(ticks_to_secs(ta)));
        while j < bw.len() && ((bw[j] >> 4) as f64) < centre - half - 64.0 {
            j += 1;
        }
        for (k, &w) in bw.iter().enumerate().skip(j) {
            let r = (w >> 4) as f64 - centre;
            if r > half {
                break;
            }
            if r >= -half {
                candidates.push((r, i, k));
            }
        }
    }
    candidates.sort_by(|x, y| {
        x.0.abs()
            .total_cmp(&y.0.abs())
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut used_a = HashSet::new();
    let mut used_b = HashSet::new();
    let mut pairs: Vec<CoincidencePair> = candidates
        .into_iter()
        .filter(|&(_, i, k)| {
            if used_a.contains(&i) || used_b.contains(&k) {
                return false;
            }
            used_a.insert(i);
            used_b.insert(k);
            true
        })
        .map(|(r, i, k)| CoincidencePair {
            index_a: i,
            index_b: k,
            detector_a: a.detector(i),
            detector_b: b.detector(k),
            residual: ticks_to_secs(r),
        })
        .collect();
    pairs.sort_by_key(|p| p.index_a);
    pairs
}

pub fn find_coincidences(
    a: &TimestampStream,
    b: &TimestampStream,
    offsets: &OffsetTimeline,
    tau_c: f64,
) -> Vec<CoincidencePair> {
    find_coincidences_in(a, 0..a.len(), b, offsets, tau_c)
}

/// Key bit of a detector for one party. Side A reports the complement so
/// that anticorrelated outcomes give equal bits.
pub fn key_bit(party: Party, detector: u8) -> bool {
    match party {
        Party::A => !raw_bit(detector),
        Party::B => raw_bit(detector),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiftCounts {
    pub matched: u64,
    pub unmatched: u64,
    pub total: u64,
}

impl SiftCounts {
    pub fn sift_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiftedKey {
    pub party: Option<Party>,
    pub bits: Vec<bool>,
    pub bases: Vec<Basis>,
    pub counts: SiftCounts,
    /// Side-A times (s) of the first and last coincidence.
    pub span: (f64, f64),
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Removes the bits at sorted `positions`.
    pub fn remove_positions(&mut self, positions: &[usize]) {
        let mut drop = positions.iter().peekable();
        let mut keep_bits = Vec::with_capacity(self.bits.len() - positions.len());
        let mut keep_bases = Vec::with_capacity(keep_bits.capacity());
        for (i, (b, s)) in self.bits.iter().zip(&self.bases).enumerate() {
            if drop.peek() == Some(&&i) {
                drop.next();
                continue;
            }
            keep_bits.push(*b);
            keep_bases.push(*s);
        }
        self.bits = keep_bits;
        self.bases = keep_bases;
    }
}

/// Writes a sifted key as CSV `basis,bit` (basis 0 = HV, 1 = diagonal).
pub fn write_sifted<W: std::io::Write>(key: &SiftedKey, mut out: W) -> std::io::Result<()> {
    writeln!(out, "basis,bit")?;
    for (b, s) in key.bits.iter().zip(&key.bases) {
        writeln!(out, "{},{}", s.index(), *b as u8)?;
    }
    Ok(())
}

pub fn read_sifted(text: &str, party: Option<Party>) -> Result<SiftedKey, SiftError> {
    let mut key = SiftedKey {
        party,
        ..SiftedKey::default()
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (basis, bit) = match line.split_once(',') {
            Some(("0", b)) => (Basis::HV, b),
            Some(("1", b)) => (Basis::Diagonal, b),
            _ => return Err(SiftError::Parse(i + 1)),
        };
        key.bits.push(match bit {
            "0" => false,
            "1" => true,
            _ => return Err(SiftError::Parse(i + 1)),
        });
        key.bases.push(basis);
    }
    Ok(key)
}

/// Keeps same-basis pairs and maps them to key bits on both sides.
pub fn sift(pairs: &[CoincidencePair], a: &TimestampStream) -> (SiftedKey, SiftedKey) {
    let mut ka = SiftedKey {
        party: Some(Party::A),
        ..SiftedKey::default()
    };
    let mut kb = SiftedKey {
        party: Some(Party::B),
        ..SiftedKey::default()
    };
    let mut counts = SiftCounts::default();
    let mut span = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pairs {
        counts.total += 1;
        if !p.same_basis() {
            counts.unmatched += 1;
            continue;
        }
        counts.matched += 1;
        let basis = Basis::of(p.detector_a);
        ka.bits.push(key_bit(Party::A, p.detector_a));
        kb.bits.push(key_bit(Party::B, p.detector_b));
        ka.bases.push(basis);
        kb.bases.push(basis);
        let t = a.get(p.index_a).seconds();
        span = (span.0.min(t), span.1.max(t));
    }
    if counts.matched == 0 {
        span = (0.0, 0.0);
    }
    for k in [&mut ka, &mut kb] {
        k.counts = counts;
        k.span = span;
    }
    (ka, kb)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorRatio {
    pub errors: u64,
    pub sampled: u64,
}

impl ErrorRatio {
    pub fn ratio(&self) -> f64 {
        if self.sampled == 0 {
            f64::NAN
        } else {
            self.errors as f64 / self.sampled as f64
        }
    }

    pub fn wilson(&self) -> (f64, f64) {
        wilson_interval(self.errors, self.sampled, Z95)
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QberEstimate {
    pub hv: ErrorRatio,
    pub diag: ErrorRatio,
    pub combined: ErrorRatio,
}

impl QberEstimate {
    pub fn q(&self) -> f64 {
        self.combined.ratio()
    }
}

/// Sorted positions disclosed for QBER estimation.
pub fn sample_positions(n: usize, fraction: f64, session_seed: u64, block: u64) -> Result<Vec<usize>, SiftError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SiftError::BadFraction(fraction.to_string()));
    }
    let k = ((n as f64 * fraction).round() as usize).min(n);
    if k == 0 {
        return Err(SiftError::EmptySample);
    }
    let mut rng = seed::rng(seed::derive_indexed(session_seed, "qber-sample", block), "qber-sample");
    let mut v = index::sample(&mut rng, n, k).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// Compares disclosed bits. `bases` gives the basis of each sampled bit.
pub fn compare_sample(a: &[bool], b: &[bool], bases: &[Basis]) -> QberEstimate {
    let mut est = QberEstimate::default();
    for ((x, y), basis) in a.iter().zip(b).zip(bases) {
        let slot = match basis {
            Basis::HV => &mut est.hv,
            Basis::Diagonal => &mut est.diag,
        };
        slot.sampled += 1;
        est.combined.sampled += 1;
        if x != y {
            slot.errors += 1;
            est.combined.errors += 1;
        }
    }
    est
}

/// Discloses a seeded random sample of both keys, compares it and removes the
/// sampled bits from the keys.
pub fn measure_qber(
    key_a: &mut SiftedKey,
    key_b: &mut SiftedKey,
    sample_fraction: f64,
    session_seed: u64,
) -> Result<QberEstimate, SiftError> {
    if key_a.len() != key_b.len() {
        return Err(SiftError::LengthMismatch(key_a.len(), key_b.len()));
    }
    let pos = sample_positions(key_a.len(), sample_fraction, session_seed, 0)?;
    let pick = |k: &SiftedKey| pos.iter().map(|&i| k.bits[i]).collect::<Vec<bool>>();
    let bases: Vec<Basis> = pos.iter().map(|&i| key_a.bases[i]).collect();
    let est = compare_sample(&pick(key_a), &pick(key_b), &bases);
    key_a.remove_positions(&pos);
    key_b.remove_positions(&pos);
    Ok(est)
}
