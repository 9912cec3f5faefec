//! CASCADE reconciliation with backtracking, batched per round so that every
//! round trip carries all parity questions that can be asked at that point.
//!
//! Side A answers parity questions about its key; side B corrects its own
//! copy. Both derive the same per-pass permutations from a shared seed, so a
//! question is just `(pass, start, end)` in permuted order.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use thiserror::Error;

use super::pack_bits;
use crate::seed;

/// Pass-1 block size is `ceil(K1_FACTOR / q)`.
pub const K1_FACTOR: f64 = 0.73;
/// Bits disclosed by one verification hash.
pub const HASH_BITS: u64 = 64;
const HASH_MODULUS: u64 = u64::MAX - 58;

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error("keys differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("key of {len} bits is shorter than the {min}-bit minimum block")]
    TooShort { len: usize, min: usize },
    #[error("QBER estimate {0} outside (0, 0.5)")]
    BadQber(f64),
    #[error("keys still differ after {passes} passes; block discarded")]
    VerificationFailed { passes: usize },
    #[error("parity channel: {0}")]
    Channel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RangeQuery {
    pub pass: u16,
    pub start: u32,
    pub end: u32,
}

/// Access to side A's parities.
pub trait ParityChannel {
    fn parities(&mut self, queries: &[RangeQuery]) -> Result<Vec<bool>, CascadeError>;
    /// Side A's polynomial hash at the evaluation point derived from `index`.
    fn hash(&mut self, index: u64) -> Result<u64, CascadeError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeConfig {
    pub block_min: usize,
    pub target_residual: f64,
    pub min_passes: usize,
    pub max_passes: usize,
    /// Shared seed for permutations and the hash point.
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            block_min: 5000,
            target_residual: 1e-9,
            min_passes: 4,
            max_passes: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconciledKey {
    pub bits: Vec<bool>,
    /// Parity and hash bits disclosed on the channel.
    pub leaked_bits: u64,
    /// CASCADE block size of each pass.
    pub blocks: Vec<usize>,
    pub verified: bool,
    /// Bits flipped on side B.
    pub corrected: u64,
}

impl ReconciledKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Block count summed over passes.
    pub fn block_count(&self) -> usize {
        self.blocks.iter().map(|k| self.bits.len().div_ceil(*k)).sum()
    }

    /// Error ratio found by reconciliation.
    pub fn corrected_ratio(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.corrected as f64 / self.bits.len() as f64
        }
    }
}

/// Block sizes of the scheduled passes: doubling from `ceil(0.73/q)` until
/// the modelled residual error ratio drops to `target`, at least
/// `min_passes` and at most `max_passes`.
pub fn residual_schedule(q: f64, n: usize, cfg: &CascadeConfig) -> Vec<usize> {
    let mut k = ((K1_FACTOR / q).ceil() as usize).clamp(2, n.max(2));
    let mut residual = q;
    let mut sizes = Vec::new();
    while sizes.len() < cfg.max_passes.max(1) {
        sizes.push(k.min(n));
        residual *= (1.0 - (1.0 - 2.0 * residual).powi(k.min(n) as i32 - 1)) / 2.0;
        if sizes.len() >= cfg.min_passes && residual <= cfg.target_residual {
            break;
        }
        k = (k * 2).min(n);
    }
    sizes
}

pub fn pass_permutation(n: usize, seed: u64, pass: usize) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut rng = seed::rng(seed::derive_indexed(seed, "cascade-permutation", pass as u64), "cascade");
    perm.shuffle(&mut rng);
    perm
}

/// Hash evaluation point for the `index`-th verification.
pub fn hash_point(seed: u64, index: u64) -> u64 {
    seed::derive_indexed(seed, "cascade-hash", index) % HASH_MODULUS
}

/// Polynomial hash modulo `2^64 - 59` over 32-bit chunks of the key, with the
/// length appended.
pub fn polynomial_hash(bits: &[bool], point: u64) -> u64 {
    let p = u128::from(HASH_MODULUS);
    let r = u128::from(point);
    let mut h: u128 = 0;
    let step = |h: u128, c: u64| (h * r + u128::from(c) + 1) % p;
    for w in pack_bits(bits) {
        h = step(h, w & 0xffff_ffff);
        h = step(h, w >> 32);
    }
    step(h, bits.len() as u64) as u64
}

/// Side A's end of the parity channel over a local key.
#[derive(Debug, Clone)]
pub struct LocalResponder {
    bits: Vec<bool>,
    seed: u64,
    prefix: HashMap<u16, Vec<bool>>,
    leaked: u64,
}

impl LocalResponder {
    pub fn new(bits: Vec<bool>, seed: u64) -> Self {
        LocalResponder {
            bits,
            seed,
            prefix: HashMap::new(),
            leaked: 0,
        }
    }

    /// Bits disclosed so far.
    pub fn leaked(&self) -> u64 {
        self.leaked
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }

    fn prefix(&mut self, pass: u16) -> &Vec<bool> {
        let (bits, seed) = (&self.bits, self.seed);
        self.prefix.entry(pass).or_insert_with(|| {
            let perm = pass_permutation(bits.len(), seed, pass as usize);
            let mut pre = Vec::with_capacity(bits.len() + 1);
            let mut acc = false;
            pre.push(acc);
            for &i in &perm {
                acc ^= bits[i as usize];
                pre.push(acc);
            }
            pre
        })
    }

    pub fn answer(&mut self, q: &RangeQuery) -> Result<bool, CascadeError> {
        let n = self.bits.len();
        if q.start >= q.end || q.end as usize > n {
            return Err(CascadeError::Channel(format!("bad range {q:?} for {n} bits")));
        }
        let pre = self.prefix(q.pass);
        let p = pre[q.end as usize] ^ pre[q.start as usize];
        self.leaked += 1;
        Ok(p)
    }

    pub fn answer_hash(&mut self, index: u64) -> u64 {
        self.leaked += HASH_BITS;
        polynomial_hash(&self.bits, hash_point(self.seed, index))
    }
}

impl ParityChannel for LocalResponder {
    fn parities(&mut self, queries: &[RangeQuery]) -> Result<Vec<bool>, CascadeError> {
        queries.iter().map(|q| self.answer(q)).collect()
    }

    fn hash(&mut self, index: u64) -> Result<u64, CascadeError> {
        Ok(self.answer_hash(index))
    }
}

struct Pass {
    perm: Vec<u32>,
    inv: Vec<u32>,
    k: usize,
    /// Side-A parities known for ranges of this pass.
    known: HashMap<(u32, u32), bool>,
    /// Whether B's block parity currently differs from A's.
    odd: Vec<bool>,
}

impl Pass {
    fn block_of(&self, pos: usize) -> usize {
        self.inv[pos] as usize / self.k
    }

    fn block_range(&self, b: usize) -> (u32, u32) {
        let n = self.perm.len();
        ((b * self.k) as u32, ((b + 1) * self.k).min(n) as u32)
    }
}

#[derive(Debug, Clone, Copy)]
struct Search {
    pass: usize,
    block: usize,
    start: u32,
    end: u32,
}

enum Step {
    Ask(RangeQuery),
    Found(usize),
    Stale,
}

struct Corrector<'a> {
    bits: &'a mut [bool],
    passes: Vec<Pass>,
    searches: Vec<Search>,
    searching: HashSet<(usize, usize)>,
    leaked: u64,
    corrected: u64,
}

impl Corrector<'_> {
    fn parity(&self, pass: usize, start: u32, end: u32) -> bool {
        let perm = &self.passes[pass].perm;
        perm[start as usize..end as usize]
            .iter()
            .fold(false, |acc, &i| acc ^ self.bits[i as usize])
    }

    fn open_pass(&mut self, k: usize, seed: u64, channel: &mut dyn ParityChannel) -> Result<(), CascadeError> {
        let n = self.bits.len();
        let pass = self.passes.len();
        let perm = pass_permutation(n, seed, pass);
        let mut inv = vec![0u32; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p as usize] = i as u32;
        }
        let n_blocks = n.div_ceil(k);
        self.passes.push(Pass {
            perm,
            inv,
            k,
            known: HashMap::new(),
            odd: vec![false; n_blocks],
        });
        let queries: Vec<RangeQuery> = (0..n_blocks)
            .map(|b| {
                let (start, end) = self.passes[pass].block_range(b);
                RangeQuery {
                    pass: pass as u16,
                    start,
                    end,
                }
            })
            .collect();
        let answers = channel.parities(&queries)?;
        self.leaked += queries.len() as u64;
        for (b, (q, a)) in queries.iter().zip(answers).enumerate() {
            let odd = self.parity(pass, q.start, q.end) != a;
            let st = &mut self.passes[pass];
            st.known.insert((q.start, q.end), a);
            st.odd[b] = odd;
            if odd {
                self.start_search(pass, b);
            }
        }
        self.run(channel)
    }

    fn start_search(&mut self, pass: usize, block: usize) {
        if self.searching.insert((pass, block)) {
            let (start, end) = self.passes[pass].block_range(block);
            self.searches.push(Search {
                pass,
                block,
                start,
                end,
            });
        }
    }

    /// Narrows a search using known parities until a question is needed.
    fn advance(&self, s: &mut Search) -> Step {
        let st = &self.passes[s.pass];
        loop {
            if s.end - s.start == 1 {
                let pos = st.perm[s.start as usize] as usize;
                return match st.known.get(&(s.start, s.end)) {
                    Some(&a) if a != self.bits[pos] => Step::Found(pos),
                    _ => Step::Stale,
                };
            }
            let mid = s.start + (s.end - s.start) / 2;
            match st.known.get(&(s.start, mid)) {
                Some(&a) => {
                    if self.parity(s.pass, s.start, mid) != a {
                        s.end = mid;
                    } else {
                        s.start = mid;
                    }
                }
                None => {
                    return Step::Ask(RangeQuery {
                        pass: s.pass as u16,
                        start: s.start,
                        end: mid,
                    })
                }
            }
        }
    }

    fn flip(&mut self, pos: usize) {
        self.bits[pos] = !self.bits[pos];
        self.corrected += 1;
        for p in 0..self.passes.len() {
            let b = self.passes[p].block_of(pos);
            self.passes[p].odd[b] = !self.passes[p].odd[b];
        }
    }

    fn run(&mut self, channel: &mut dyn ParityChannel) -> Result<(), CascadeError> {
        while !self.searches.is_empty() {
            let mut searches = std::mem::take(&mut self.searches);
            let mut asks: Vec<(Search, RangeQuery)> = Vec::new();
            let mut flipped: Vec<usize> = Vec::new();
            let mut touched: Vec<(usize, usize)> = Vec::new();
            for s in &mut searches {
                match self.advance(s) {
                    Step::Ask(q) => asks.push((*s, q)),
                    Step::Found(pos) => {
                        self.searching.remove(&(s.pass, s.block));
                        if self.bits[pos] != self.passes[s.pass].known[&(s.start, s.end)] {
                            self.flip(pos);
                            flipped.push(pos);
                        }
                    }
                    Step::Stale => {
                        self.searching.remove(&(s.pass, s.block));
                        touched.push((s.pass, s.block));
                    }
                }
            }

            // Searches whose range contains a flip may have lost their error.
            let mut queries = Vec::with_capacity(asks.len());
            for (s, q) in asks {
                let st = &self.passes[s.pass];
                let hit = flipped
                    .iter()
                    .any(|&p| (s.start..s.end).contains(&st.inv[p]));
                if hit && self.parity(s.pass, s.start, s.end) == st.known[&(s.start, s.end)] {
                    self.searching.remove(&(s.pass, s.block));
                    touched.push((s.pass, s.block));
                    continue;
                }
                self.searches.push(s);
                queries.push(q);
            }

            // Backtracking: blocks made odd by the flips get a fresh search.
            for &pos in &flipped {
                for p in 0..self.passes.len() {
                    touched.push((p, self.passes[p].block_of(pos)));
                }
            }
            for (p, b) in touched {
                if self.passes[p].odd[b] {
                    self.start_search(p, b);
                }
            }

            if queries.is_empty() {
                continue;
            }
            let answers = channel.parities(&queries)?;
            if answers.len() != queries.len() {
                return Err(CascadeError::Channel(format!(
                    "{} answers for {} questions",
                    answers.len(),
                    queries.len()
                )));
            }
            self.leaked += queries.len() as u64;
            // The first `queries.len()` searches asked these questions in order.
            for (i, (q, a)) in queries.iter().zip(answers).enumerate() {
                let s = self.searches[i];
                let st = &mut self.passes[q.pass as usize];
                let parent = st.known[&(s.start, s.end)];
                st.known.insert((q.start, q.end), a);
                st.known.insert((q.end, s.end), parent ^ a);
            }
        }
        Ok(())
    }
}

/// Corrects `bits` (side B) towards side A's key behind `channel`.
pub fn cascade_correct(
    bits: &mut [bool],
    q_est: f64,
    cfg: &CascadeConfig,
    channel: &mut dyn ParityChannel,
) -> Result<ReconciledKey, CascadeError> {
    let n = bits.len();
    if n < cfg.block_min {
        return Err(CascadeError::TooShort {
            len: n,
            min: cfg.block_min,
        });
    }
    if !(q_est > 0.0 && q_est < 0.5) {
        return Err(CascadeError::BadQber(q_est));
    }
    let schedule = residual_schedule(q_est, n, cfg);
    let mut c = Corrector {
        bits,
        passes: Vec::new(),
        searches: Vec::new(),
        searching: HashSet::new(),
        leaked: 0,
        corrected: 0,
    };
    for &k in &schedule {
        c.open_pass(k, cfg.seed, channel)?;
    }

    let mut checks = 0u64;
    loop {
        let theirs = channel.hash(checks)?;
        c.leaked += HASH_BITS;
        let ours = polynomial_hash(c.bits, hash_point(cfg.seed, checks));
        checks += 1;
        if ours == theirs {
            break;
        }
        if c.passes.len() >= cfg.max_passes {
            return Err(CascadeError::VerificationFailed {
                passes: c.passes.len(),
            });
        }
        let k = (c.passes.last().map_or(2, |p| p.k) * 2).min(n);
        log::debug!("verification failed, extra pass with block size {k}");
        c.open_pass(k, cfg.seed, channel)?;
    }

    let blocks = c.passes.iter().map(|p| p.k).collect();
    let (leaked, corrected) = (c.leaked, c.corrected);
    Ok(ReconciledKey {
        bits: bits.to_vec(),
        leaked_bits: leaked,
        blocks,
        verified: true,
        corrected,
    })
}

/// Reconciles two local keys. Side A's key is returned unchanged.
pub fn cascade_reconcile(
    key_a: &[bool],
    key_b: &[bool],
    q_est: f64,
    cfg: &CascadeConfig,
) -> Result<(ReconciledKey, ReconciledKey), CascadeError> {
    if key_a.len() != key_b.len() {
        return Err(CascadeError::LengthMismatch(key_a.len(), key_b.len()));
    }
    let mut responder = LocalResponder::new(key_a.to_vec(), cfg.seed);
    let mut b = key_b.to_vec();
    let rb = cascade_correct(&mut b, q_est, cfg, &mut responder)?;
    debug_assert_eq!(responder.leaked(), rb.leaked_bits);
    let ra = ReconciledKey {
        bits: responder.into_bits(),
        ..rb.clone()
    };
    Ok((ra, rb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::binary_entropy;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_key(n: usize, seed: u64) -> Vec<bool> {
        let mut rng = seed::rng(seed, "test-key");
        (0..n).map(|_| rng.random()).collect()
    }

    fn with_errors(key: &[bool], q: f64, seed: u64) -> Vec<bool> {
        let mut rng = seed::rng(seed, "test-errors");
        key.iter().map(|&b| b ^ (rng.random::<f64>() < q)).collect()
    }

    #[test]
    fn schedule_follows_residual_model() {
        let cfg = CascadeConfig::default();
        let s = residual_schedule(0.05, 50_000, &cfg);
        assert_eq!(s[0], 15);
        assert!(s.windows(2).all(|w| w[1] == (w[0] * 2).min(50_000)));
        assert!(s.len() >= 4);
        let mut q: f64 = 0.05;
        for &k in &s {
            q *= (1.0 - (1.0 - 2.0 * q).powi(k as i32 - 1)) / 2.0;
        }
        assert!(q <= 1e-9);
        assert_eq!(residual_schedule(0.01, 10_000, &cfg)[0], 73);
    }

    #[test]
    fn identical_keys_leak_only_block_parities() {
        let key = random_key(10_000, 1);
        let cfg = CascadeConfig::default();
        let (ra, rb) = cascade_reconcile(&key, &key, 0.01, &cfg).unwrap();
        assert_eq!(rb.corrected, 0);
        assert_eq!(ra.bits, rb.bits);
        let parities: usize = rb.blocks.iter().map(|k| 10_000usize.div_ceil(*k)).sum();
        assert_eq!(rb.leaked_bits, parities as u64 + HASH_BITS);
        assert!(rb.leaked_bits >= rb.block_count() as u64);
    }

    #[test]
    fn single_error_is_found() {
        let key = random_key(10_000, 2);
        let mut other = key.clone();
        other[4321] = !other[4321];
        let (ra, rb) = cascade_reconcile(&key, &other, 0.01, &CascadeConfig::default()).unwrap();
        assert_eq!(rb.bits, key);
        assert_eq!(ra.bits, key);
        assert_eq!(rb.corrected, 1);
        assert!(rb.verified);
    }

    #[test]
    fn rejects_bad_input() {
        let key = random_key(6000, 3);
        let cfg = CascadeConfig::default();
        assert!(matches!(
            cascade_reconcile(&key[..4000], &key[..4000], 0.05, &cfg),
            Err(CascadeError::TooShort { .. })
        ));
        assert!(matches!(cascade_reconcile(&key, &key, 0.0, &cfg), Err(CascadeError::BadQber(_))));
        assert!(matches!(cascade_reconcile(&key, &key[1..], 0.05, &cfg), Err(CascadeError::LengthMismatch(..))));
    }

    #[test]
    fn five_percent_is_corrected_efficiently() {
        let n = 50_000;
        let a = random_key(n, 4);
        let b = with_errors(&a, 0.05, 4);
        let flips = a.iter().zip(&b).filter(|(x, y)| x != y).count() as u64;
        let cfg = CascadeConfig { seed: 4, ..CascadeConfig::default() };
        let (ra, rb) = cascade_reconcile(&a, &b, 0.05, &cfg).unwrap();
        assert_eq!(ra.bits, rb.bits);
        assert_eq!(rb.corrected, flips);
        let f = rb.leaked_bits as f64 / (n as f64 * binary_entropy(0.05));
        assert!((1.0..=1.4).contains(&f), "efficiency {f}");
    }

    #[test]
    fn transcript_matches_counter() {
        let a = random_key(8000, 5);
        let b = with_errors(&a, 0.03, 5);
        let mut responder = LocalResponder::new(a.clone(), 9);
        let mut bits = b.clone();
        let cfg = CascadeConfig { seed: 9, ..CascadeConfig::default() };
        let r = cascade_correct(&mut bits, 0.03, &cfg, &mut responder).unwrap();
        assert_eq!(responder.leaked(), r.leaked_bits);
        assert_eq!(bits, a);
    }

    struct LyingResponder(LocalResponder);

    impl ParityChannel for LyingResponder {
        fn parities(&mut self, q: &[RangeQuery]) -> Result<Vec<bool>, CascadeError> {
            self.0.parities(q)
        }
        fn hash(&mut self, _: u64) -> Result<u64, CascadeError> {
            Ok(0)
        }
    }

    #[test]
    fn persistent_hash_mismatch_aborts() {
        let a = random_key(6000, 6);
        let mut bits = a.clone();
        let cfg = CascadeConfig { max_passes: 6, ..CascadeConfig::default() };
        let err = cascade_correct(&mut bits, 0.02, &cfg, &mut LyingResponder(LocalResponder::new(a, 0)))
            .unwrap_err();
        assert_eq!(err, CascadeError::VerificationFailed { passes: 6 });
    }

    #[test]
    fn hash_separates_keys() {
        let a = random_key(1000, 7);
        let mut b = a.clone();
        b[999] = !b[999];
        assert_ne!(polynomial_hash(&a, 12345), polynomial_hash(&b, 12345));
        assert_ne!(polynomial_hash(&a[..999], 12345), polynomial_hash(&a, 12345));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reconciled_keys_are_identical(seed in 0u64..10_000, q in 0.005f64..0.11) {
            let a = random_key(6000, seed);
            let b = with_errors(&a, q, seed + 1);
            let cfg = CascadeConfig { seed, ..CascadeConfig::default() };
            let (ra, rb) = cascade_reconcile(&a, &b, q, &cfg).unwrap();
            prop_assert_eq!(&ra.bits, &a);
            prop_assert_eq!(&rb.bits, &a);
        }
    }
}
