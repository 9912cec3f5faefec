//! Classical post-processing: error correction and privacy amplification.

pub mod amplify;
pub mod cascade;
pub mod entropy;
pub mod lfsr;

pub use amplify::{
    amplify_with_seed, hash_block, output_length, privacy_amplify, AmplifyConfig, AmplifyError, BlockAccounting, ChaChaSeeds,
    FinalKey, OsSeeds, SeedSource,
};
pub use cascade::{
    cascade_correct, cascade_reconcile, hash_point, polynomial_hash, residual_schedule, CascadeConfig,
    CascadeError, LocalResponder, ParityChannel, RangeQuery, ReconciledKey, HASH_BITS,
};
pub use entropy::binary_entropy;
pub use lfsr::{lfsr32_stream, Lfsr32, LfsrError};

/// Packs bits LSB-first into 64-bit words.
pub fn pack_bits(bits: &[bool]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

pub fn unpack_bits(words: &[u64], n: usize) -> Vec<bool> {
    (0..n).map(|i| words[i / 64] >> (i % 64) & 1 == 1).collect()
}

/// Packs bits LSB-first into bytes.
pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn bytes_to_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_round_trips() {
        let bits: Vec<bool> = (0..130).map(|i| i % 7 == 0 || i == 129).collect();
        assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
        assert_eq!(bytes_to_bits(&bits_to_bytes(&bits), bits.len()), bits);
        assert_eq!(bits_to_bytes(&[true, false, false, false, false, false, false, false, true]), [1, 1]);
    }
}
