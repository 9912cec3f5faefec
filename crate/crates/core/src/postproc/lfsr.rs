//! 32-bit Fibonacci LFSR with feedback polynomial x^32 + x^22 + x^2 + x + 1.

use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LfsrError {
    #[error("LFSR seed must be nonzero")]
    ZeroSeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lfsr32 {
    state: u32,
}

impl Lfsr32 {
    pub fn new(seed: u32) -> Result<Self, LfsrError> {
        if seed == 0 {
            return Err(LfsrError::ZeroSeed);
        }
        Ok(Lfsr32 { state: seed })
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    /// Emits the register LSB and shifts the feedback in at the top.
    #[inline]
    pub fn next_bit(&mut self) -> bool {
        let s = self.state;
        let out = s & 1;
        let fb = (s ^ (s >> 10) ^ (s >> 30) ^ (s >> 31)) & 1;
        self.state = (s >> 1) | (fb << 31);
        out == 1
    }

    /// Next 64 outputs, first output in bit 0.
    ///
    /// The register holds the next 32 outputs, and 32 steps are a linear map
    /// of the state, applied here with byte-wise lookup tables.
    pub fn next_word(&mut self) -> u64 {
        let lo = self.state;
        let hi = jump32(lo);
        self.state = jump32(hi);
        u64::from(lo) | (u64::from(hi) << 32)
    }
}

fn jump_tables() -> &'static [[u32; 256]; 4] {
    static TABLES: OnceLock<[[u32; 256]; 4]> = OnceLock::new();
    TABLES.get_or_init(|| {
        let basis: Vec<u32> = (0..32)
            .map(|i| {
                let mut r = Lfsr32 { state: 1 << i };
                for _ in 0..32 {
                    r.next_bit();
                }
                r.state
            })
            .collect();
        let mut t = [[0u32; 256]; 4];
        for (byte, table) in t.iter_mut().enumerate() {
            for (v, entry) in table.iter_mut().enumerate() {
                *entry = (0..8)
                    .filter(|j| v >> j & 1 == 1)
                    .fold(0, |acc, j| acc ^ basis[byte * 8 + j]);
            }
        }
        t
    })
}

#[inline]
fn jump32(s: u32) -> u32 {
    let t = jump_tables();
    t[0][(s & 0xff) as usize]
        ^ t[1][(s >> 8 & 0xff) as usize]
        ^ t[2][(s >> 16 & 0xff) as usize]
        ^ t[3][(s >> 24) as usize]
}

pub fn lfsr32_stream(seed: u32, n_bits: usize) -> Result<Vec<bool>, LfsrError> {
    let mut r = Lfsr32::new(seed)?;
    Ok((0..n_bits).map(|_| r.next_bit()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: &str = include_str!("../../tests/data/lfsr32_golden.txt");

    #[test]
    fn matches_golden_file() {
        let mut checked = 0;
        for line in GOLDEN.lines().filter(|l| !l.starts_with('#')) {
            let (seed, bits) = line.split_once(' ').unwrap();
            let expected: Vec<bool> = bits.trim().chars().map(|c| c == '1').collect();
            let got = lfsr32_stream(seed.parse().unwrap(), expected.len()).unwrap();
            assert_eq!(got, expected, "seed {seed}");
            checked += 1;
        }
        assert_eq!(checked, 3);
    }

    #[test]
    fn first_outputs_are_the_seed() {
        let bits = lfsr32_stream(1, 32).unwrap();
        assert!(bits[0] && bits[1..].iter().all(|b| !b));
    }

    #[test]
    fn word_output_matches_bit_output() {
        let mut words = Lfsr32::new(0x9E37_79B9).unwrap();
        let mut bits = words;
        bits.next_bit();
        words.next_bit();
        for _ in 0..50 {
            let w = words.next_word();
            for i in 0..64 {
                assert_eq!(w >> i & 1 == 1, bits.next_bit());
            }
            assert_eq!(words, bits);
        }
    }

    #[test]
    fn zero_seed_rejected() {
        assert_eq!(Lfsr32::new(0), Err(LfsrError::ZeroSeed));
    }

    #[test]
    fn no_short_period() {
        for seed in [1u32, 0x1234_5678, u32::MAX] {
            let mut r = Lfsr32::new(seed).unwrap();
            for _ in 0..(1 << 20) {
                r.next_bit();
                assert_ne!(r.state(), seed);
            }
        }
    }

    #[test]
    fn period_is_maximal() {
        let mut r = Lfsr32::new(1).unwrap();
        let mut steps = 0u64;
        loop {
            r.next_bit();
            steps += 1;
            if r.state() == 1 {
                break;
            }
        }
        assert_eq!(steps, (1u64 << 32) - 1);
    }

    #[test]
    fn balanced() {
        let mut r = Lfsr32::new(0xACE1).unwrap();
        let ones: u32 = (0..1_000_000 / 64 + 1).map(|_| r.next_word().count_ones()).sum();
        let total = (1_000_000 / 64 + 1) * 64;
        let f = f64::from(ones) / f64::from(total);
        assert!((f - 0.5).abs() <= 0.002, "{f}");
    }
}
