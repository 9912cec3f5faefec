//! Privacy amplification by multiplying each key block with a rectangular
//! binary matrix whose rows are consecutive slices of an LFSR stream.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::{Rng, TryRngCore};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::cascade::ReconciledKey;
use super::entropy::binary_entropy;
use super::lfsr::Lfsr32;
use super::{bits_to_bytes, pack_bits};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum AmplifyError {
    #[error("reconciled key was not verified")]
    Unverified,
    #[error("block of {len} bits is shorter than the {min}-bit minimum")]
    TooShort { len: usize, min: usize },
    #[error("QBER {0} outside [0, 0.5]")]
    BadQber(f64),
    #[error("entropy source failed: {0}")]
    Entropy(String),
}

/// Supplier of the per-block matrix seeds.
pub trait SeedSource {
    /// A nonzero 32-bit seed.
    fn next_seed(&mut self) -> Result<u32, AmplifyError>;
}

/// Replayable seeds for simulation.
#[derive(Debug, Clone)]
pub struct ChaChaSeeds(ChaCha8Rng);

impl ChaChaSeeds {
    pub fn new(session_seed: u64) -> Self {
        ChaChaSeeds(seed::rng(session_seed, "amplify"))
    }
}

impl SeedSource for ChaChaSeeds {
    fn next_seed(&mut self) -> Result<u32, AmplifyError> {
        loop {
            let s: u32 = self.0.random();
            if s != 0 {
                return Ok(s);
            }
        }
    }
}

/// Operating-system entropy for live operation.
#[derive(Debug, Clone, Copy, Default)]
pub struct OsSeeds;

impl SeedSource for OsSeeds {
    fn next_seed(&mut self) -> Result<u32, AmplifyError> {
        loop {
            let s = rand::rngs::OsRng
                .try_next_u32()
                .map_err(|e| AmplifyError::Entropy(e.to_string()))?;
            if s != 0 {
                return Ok(s);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplifyConfig {
    pub block_min: usize,
    pub safety_margin: u64,
    /// Extra fraction of the block removed for detector asymmetry; 0 disables.
    pub asymmetry_penalty: f64,
}

impl Default for AmplifyConfig {
    fn default() -> Self {
        AmplifyConfig {
            block_min: 5000,
            safety_margin: 0,
            asymmetry_penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockAccounting {
    pub block: u64,
    pub n_in: u64,
    pub qber: f64,
    pub leak_ec: u64,
    /// `ceil(n_in h(qber))`.
    pub i_e_bits: u64,
    pub penalty_bits: u64,
    pub safety_margin: u64,
    pub n_out: u64,
}

/// `n - ceil(n h(q)) - leak - margin - penalty`, or 0 when not positive.
pub fn output_length(n: u64, q_t: f64, leak_ec: u64, safety_margin: u64, penalty_bits: u64) -> u64 {
    let i_e = (n as f64 * binary_entropy(q_t)).ceil() as i128;
    let m = n as i128 - i_e - leak_ec as i128 - safety_margin as i128 - penalty_bits as i128;
    m.max(0) as u64
}

/// Output bit `j` is the parity of the key AND the `j`-th `n`-bit slice of
/// the LFSR stream started at `seed`.
pub fn hash_block(bits: &[bool], m: usize, seed: u32) -> Vec<bool> {
    let n = bits.len();
    let key = pack_bits(bits);
    let mut lfsr = Lfsr32::new(seed).expect("nonzero seed");
    let mut out = Vec::with_capacity(m);
    let full = n / 64;
    let tail = n % 64;
    for _ in 0..m {
        let mut acc = 0u64;
        for &k in &key[..full] {
            acc ^= lfsr.next_word() & k;
        }
        if tail > 0 {
            let mut w = 0u64;
            for i in 0..tail {
                w |= u64::from(lfsr.next_bit()) << i;
            }
            acc ^= w & key[full];
        }
        out.push(acc.count_ones() & 1 == 1);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinalKey {
    pub bits: Vec<bool>,
    /// QBER of the most recent block.
    pub q_t_used: f64,
    pub blocks: Vec<BlockAccounting>,
}

impl FinalKey {
    pub fn n_in(&self) -> u64 {
        self.blocks.iter().map(|b| b.n_in).sum()
    }

    pub fn n_out(&self) -> u64 {
        self.blocks.iter().map(|b| b.n_out).sum()
    }

    pub fn leak_ec(&self) -> u64 {
        self.blocks.iter().map(|b| b.leak_ec).sum()
    }

    pub fn append(&mut self, other: FinalKey) {
        self.bits.extend(other.bits);
        self.q_t_used = other.q_t_used;
        self.blocks.extend(other.blocks);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        bits_to_bytes(&self.bits)
    }

    pub fn write_accounting<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "block,n_in,qber,leak_ec,n_out")?;
        for b in &self.blocks {
            writeln!(out, "{},{},{},{},{}", b.block, b.n_in, b.qber, b.leak_ec, b.n_out)?;
        }
        Ok(())
    }

    /// Writes the packed key bits and the accounting sidecar.
    pub fn save(&self, key_path: impl AsRef<Path>, accounting_path: impl AsRef<Path>) -> io::Result<()> {
        std::fs::write(key_path, self.to_bytes())?;
        let mut w = BufWriter::new(File::create(accounting_path)?);
        self.write_accounting(&mut w)?;
        w.flush()
    }
}

/// Compresses one reconciled block with a fresh matrix seed.
pub fn privacy_amplify(
    key: &ReconciledKey,
    q_t: f64,
    seeds: &mut dyn SeedSource,
    cfg: &AmplifyConfig,
    block: u64,
) -> Result<FinalKey, AmplifyError> {
    let seed = seeds.next_seed()?;
    amplify_with_seed(key, q_t, seed, cfg, block)
}

/// As [`privacy_amplify`] with the matrix seed given, for the side that
/// receives it over the channel.
pub fn amplify_with_seed(
    key: &ReconciledKey,
    q_t: f64,
    seed: u32,
    cfg: &AmplifyConfig,
    block: u64,
) -> Result<FinalKey, AmplifyError> {
    if !key.verified {
        return Err(AmplifyError::Unverified);
    }
    let n = key.bits.len();
    if n < cfg.block_min {
        return Err(AmplifyError::TooShort {
            len: n,
            min: cfg.block_min,
        });
    }
    if !(0.0..=0.5).contains(&q_t) {
        return Err(AmplifyError::BadQber(q_t));
    }
    let n64 = n as u64;
    let penalty_bits = (cfg.asymmetry_penalty.max(0.0) * n as f64).ceil() as u64;
    let m = output_length(n64, q_t, key.leaked_bits, cfg.safety_margin, penalty_bits);
    let bits = if m == 0 || seed == 0 {
        Vec::new()
    } else {
        hash_block(&key.bits, m as usize, seed)
    };
    Ok(FinalKey {
        bits,
        q_t_used: q_t,
        blocks: vec![BlockAccounting {
            block,
            n_in: n64,
            qber: q_t,
            leak_ec: key.leaked_bits,
            i_e_bits: (n as f64 * binary_entropy(q_t)).ceil() as u64,
            penalty_bits,
            safety_margin: cfg.safety_margin,
            n_out: m,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::lfsr32_stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn reconciled(bits: Vec<bool>, leaked: u64) -> ReconciledKey {
        ReconciledKey {
            bits,
            leaked_bits: leaked,
            blocks: vec![],
            verified: true,
            corrected: 0,
        }
    }

    fn random_bits(n: usize, s: u64) -> Vec<bool> {
        let mut rng = seed::rng(s, "pa-test");
        (0..n).map(|_| rng.random()).collect()
    }

    #[test]
    fn matrix_rows_are_consecutive_stream_slices() {
        let bits = random_bits(100, 1);
        let out = hash_block(&bits, 7, 0xBEEF);
        let stream = lfsr32_stream(0xBEEF, 700).unwrap();
        for (j, o) in out.iter().enumerate() {
            let p = stream[j * 100..(j + 1) * 100]
                .iter()
                .zip(&bits)
                .fold(false, |acc, (r, k)| acc ^ (r & k));
            assert_eq!(*o, p, "row {j}");
        }
    }

    #[test]
    fn lossless_block_keeps_length() {
        let key = reconciled(random_bits(5000, 2), 0);
        let f = privacy_amplify(&key, 0.0, &mut ChaChaSeeds::new(1), &AmplifyConfig::default(), 0).unwrap();
        assert_eq!(f.bits.len(), 5000);
        assert_ne!(f.bits, key.bits);
    }

    #[test]
    fn threshold_qber_leaves_nothing() {
        let n = 10_000u64;
        let leak = (n as f64 * binary_entropy(0.11) * 1.1) as u64;
        let key = reconciled(random_bits(n as usize, 3), leak);
        let f = privacy_amplify(&key, 0.11, &mut ChaChaSeeds::new(1), &AmplifyConfig::default(), 0).unwrap();
        assert!(f.bits.is_empty());
        assert_eq!(f.n_out(), 0);
    }

    #[test]
    fn accounting_identity() {
        let n = 12_345usize;
        let key = reconciled(random_bits(n, 4), 3_500);
        let cfg = AmplifyConfig {
            safety_margin: 17,
            ..AmplifyConfig::default()
        };
        let f = privacy_amplify(&key, 0.05, &mut ChaChaSeeds::new(2), &cfg, 3).unwrap();
        let b = f.blocks[0];
        let expected = n as u64 - (n as f64 * binary_entropy(0.05)).ceil() as u64 - 3_500 - 17;
        assert_eq!(b.n_out, expected);
        assert_eq!(f.bits.len() as u64, expected);
        let fraction = b.n_out as f64 / n as f64;
        let accounted = 1.0 - binary_entropy(0.05) - 3_500.0 / n as f64;
        assert!((fraction - accounted).abs() < 0.01);

        let mut csv = Vec::new();
        f.write_accounting(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some("block,n_in,qber,leak_ec,n_out"));
        assert_eq!(text.lines().nth(1).unwrap(), format!("3,{n},0.05,3500,{expected}"));
    }

    #[test]
    fn asymmetry_penalty_is_optional() {
        let key = reconciled(random_bits(10_000, 5), 0);
        let cfg = AmplifyConfig {
            asymmetry_penalty: 0.0045,
            ..AmplifyConfig::default()
        };
        let f = privacy_amplify(&key, 0.0, &mut ChaChaSeeds::new(1), &cfg, 0).unwrap();
        assert_eq!(f.n_out(), 10_000 - 45);
    }

    #[test]
    fn rejects_unverified_and_short() {
        let mut key = reconciled(random_bits(5000, 6), 0);
        let cfg = AmplifyConfig::default();
        key.verified = false;
        assert_eq!(
            privacy_amplify(&key, 0.0, &mut ChaChaSeeds::new(1), &cfg, 0),
            Err(AmplifyError::Unverified)
        );
        let short = reconciled(random_bits(100, 6), 0);
        assert!(matches!(
            privacy_amplify(&short, 0.0, &mut ChaChaSeeds::new(1), &cfg, 0),
            Err(AmplifyError::TooShort { .. })
        ));
    }

    #[test]
    fn os_seeds_are_nonzero() {
        let mut s = OsSeeds;
        assert_ne!(s.next_seed().unwrap(), 0);
    }

    #[test]
    fn avalanche() {
        let mut seeds = ChaChaSeeds::new(9);
        let mut fractions = Vec::new();
        for t in 0..100 {
            let bits = random_bits(5000, 100 + t);
            let mut flipped = bits.clone();
            flipped[(t as usize * 37) % 5000] ^= true;
            let seed = seeds.next_seed().unwrap();
            let a = hash_block(&bits, 1000, seed);
            let b = hash_block(&flipped, 1000, seed);
            let d = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            fractions.push(d as f64 / 1000.0);
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!((mean - 0.5).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn monobit() {
        let mut seeds = ChaChaSeeds::new(10);
        let mut ones = 0usize;
        let mut total = 0usize;
        let mut t = 0;
        while total < 1_000_000 {
            let key = reconciled(random_bits(20_000, 500 + t), 0);
            let f = privacy_amplify(&key, 0.0, &mut seeds, &AmplifyConfig::default(), t).unwrap();
            ones += f.bits.iter().filter(|b| **b).count();
            total += f.bits.len();
            t += 1;
        }
        let f = ones as f64 / total as f64;
        let sigma = 0.5 / (total as f64).sqrt();
        assert!((f - 0.5).abs() <= 4.0 * sigma, "{f}");
    }

    proptest! {
        #[test]
        fn output_length_identity(n in 5000u64..100_000, q in 0.0f64..0.5, leak in 0u64..50_000, margin in 0u64..100) {
            let m = output_length(n, q, leak, margin, 0);
            let raw = n as i128 - (n as f64 * binary_entropy(q)).ceil() as i128 - leak as i128 - margin as i128;
            prop_assert_eq!(m as i128, raw.max(0));
        }
    }
}
