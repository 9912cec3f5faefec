//! One-shot processing of a recorded or simulated session: lock, track,
//! coincidences, sifting, QBER sampling, CASCADE and privacy amplification.
//!
//! The key is cut into blocks of `block_bits` sifted bits. Each block gets its
//! own disclosed sample, reconciliation seed and matrix seed, all derived from
//! the session seed, so a run is replayable.

use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::params::{ParamError, ParamFile};
use crate::postproc::{
    amplify_with_seed, bits_to_bytes, bytes_to_bits, cascade_reconcile, AmplifyConfig, AmplifyError, CascadeConfig, CascadeError, ChaChaSeeds,
    FinalKey, OsSeeds, ReconciledKey, SeedSource,
};
use crate::seed;
use crate::sifter::{compare_sample, find_coincidences, sample_positions, sift, QberEstimate, SiftedKey};
use crate::simulator::{Basis, TimestampStream};
use crate::timesync::{lock, track_stream, OffsetEstimate, SyncConfig, SyncError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub seed: u64,
    pub sync: SyncConfig,
    pub tau_c: f64,
    /// Length of one timing block on the classical channel (s).
    pub chunk_secs: f64,
    /// Sifted bits collected before a key block is post-processed.
    pub block_bits: usize,
    pub sample_fraction: f64,
    pub qber_limit: f64,
    pub cascade: CascadeConfig,
    pub amplify: AmplifyConfig,
    /// Draw matrix seeds from the operating system instead of the session seed.
    pub live_entropy: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            seed: 1,
            sync: SyncConfig::default(),
            tau_c: 2e-9,
            chunk_secs: 10.0,
            block_bits: 20_000,
            sample_fraction: 0.1,
            qber_limit: 0.11,
            cascade: CascadeConfig::default(),
            amplify: AmplifyConfig::default(),
            live_entropy: false,
        }
    }
}

impl SessionConfig {
    pub fn from_params(p: &ParamFile) -> Result<Self, ParamError> {
        let d = SessionConfig::default();
        let sync = SyncConfig::from_params(p).map_err(|e| ParamError::Invalid {
            key: "sync".into(),
            reason: e.to_string(),
        })?;
        let cfg = SessionConfig {
            seed: p.get_or("seed", d.seed)?,
            sync,
            tau_c: p.get_or("tau_c", d.tau_c)?,
            chunk_secs: p.get_or("chunk_secs", d.chunk_secs)?,
            block_bits: p.get_or("block_bits", d.block_bits)?,
            sample_fraction: p.get_or("sample_fraction", d.sample_fraction)?,
            qber_limit: p.get_or("qber_limit", d.qber_limit)?,
            cascade: CascadeConfig {
                target_residual: p.get_or("cascade_target", d.cascade.target_residual)?,
                max_passes: p.get_or("cascade_max_passes", d.cascade.max_passes)?,
                ..d.cascade
            },
            amplify: AmplifyConfig {
                safety_margin: p.get_or("safety_margin", d.amplify.safety_margin)?,
                asymmetry_penalty: p.get_or("asymmetry_penalty", d.amplify.asymmetry_penalty)?,
                ..d.amplify
            },
            live_entropy: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let bad = |key: &str, reason: &str| {
            Err(ParamError::Invalid {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return bad("tau_c", "must be positive");
        }
        if !(self.chunk_secs >= self.sync.acquisition_window) {
            return bad("chunk_secs", "must cover the acquisition window");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction < 1.0) {
            return bad("sample_fraction", "must lie in (0, 1)");
        }
        if !(self.qber_limit > 0.0 && self.qber_limit < 0.5) {
            return bad("qber_limit", "must lie in (0, 0.5)");
        }
        if self.block_bits < self.min_block_bits() {
            return bad("block_bits", "too small for the reconciliation minimum after sampling");
        }
        if self.cascade.max_passes < self.cascade.min_passes {
            return bad("cascade_max_passes", "below the minimum pass count");
        }
        Ok(())
    }

    /// Bits left in a block of `n` after the disclosed sample.
    pub fn kept_after_sample(&self, n: usize) -> usize {
        n - ((n as f64 * self.sample_fraction).round() as usize).min(n)
    }

    /// Smallest key block that survives sampling with enough bits to process.
    pub fn min_block_bits(&self) -> usize {
        let need = self.cascade.block_min.max(self.amplify.block_min);
        (need as f64 / (1.0 - self.sample_fraction)).ceil() as usize + 1
    }

    pub fn cascade_for(&self, block: u64) -> CascadeConfig {
        CascadeConfig {
            seed: seed::derive_indexed(self.seed, "cascade", block),
            ..self.cascade
        }
    }

    /// Source of the privacy-amplification seed for a key block.
    pub fn seeds_for(&self, block: u64) -> Box<dyn SeedSource> {
        if self.live_entropy {
            Box::new(OsSeeds)
        } else {
            Box::new(ChaChaSeeds::new(seed::derive_indexed(self.seed, "amplify-block", block)))
        }
    }
}

/// QBER passed to CASCADE: a zero-error sample is replaced by one error in
/// the sample so the block sizes stay finite.
pub fn cascade_qber(est: &QberEstimate) -> f64 {
    let n = est.combined.sampled.max(1) as f64;
    est.q().max(1.0 / n).min(0.45)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyOutcome {
    Amplified,
    /// QBER above the limit; no key from this block.
    Paused,
    /// Keys still differed after the last CASCADE pass.
    Failed,
    /// Too few bits to process.
    Discarded,
}

impl fmt::Display for KeyOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyOutcome::Amplified => "amplified",
            KeyOutcome::Paused => "paused",
            KeyOutcome::Failed => "failed",
            KeyOutcome::Discarded => "discarded",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyBlockReport {
    pub block: u64,
    pub sifted: usize,
    pub qber: Option<QberEstimate>,
    pub outcome: KeyOutcome,
    pub leak_ec: u64,
    pub n_in: u64,
    pub n_out: u64,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("synchronization: {0}")]
    Sync(#[from] SyncError),
    #[error("reconciliation: {0}")]
    Cascade(#[from] CascadeError),
    #[error("privacy amplification: {0}")]
    Amplify(#[from] AmplifyError),
    #[error("final keys differ in block {0}")]
    KeyMismatch(u64),
}

/// Result of post-processing one key block on both sides.
pub struct BlockResult {
    pub report: KeyBlockReport,
    pub keys: Option<(FinalKey, FinalKey)>,
}

/// Splits the sifted keys into key blocks. A tail shorter than the processing
/// minimum joins the previous block.
pub fn key_block_ranges(n: usize, cfg: &SessionConfig) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + cfg.block_bits).min(n);
        if end - start < cfg.min_block_bits() {
            match out.last_mut() {
                Some(last) => last.end = end,
                None => out.push(start..end),
            }
        } else {
            out.push(start..end);
        }
        start = end;
    }
    out
}

/// Both sides' reconciled copies of one key block.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconciled {
    pub block: u64,
    pub qber: f64,
    pub a: ReconciledKey,
    pub b: ReconciledKey,
}

/// QBER sampling and CASCADE for one key block held by both sides locally.
/// Returns no keys when the block is discarded, paused or unverified.
pub fn reconcile_block(
    bits_a: &[bool],
    bits_b: &[bool],
    bases: &[Basis],
    block: u64,
    cfg: &SessionConfig,
) -> Result<(KeyBlockReport, Option<Reconciled>), PipelineError> {
    let n = bits_a.len();
    let mut report = KeyBlockReport {
        block,
        sifted: n,
        qber: None,
        outcome: KeyOutcome::Discarded,
        leak_ec: 0,
        n_in: 0,
        n_out: 0,
    };
    if n < cfg.min_block_bits() {
        return Ok((report, None));
    }
    let pos = sample_positions(n, cfg.sample_fraction, cfg.seed, block).expect("validated fraction and size");
    let pick = |bits: &[bool]| pos.iter().map(|&i| bits[i]).collect::<Vec<bool>>();
    let sample_bases: Vec<Basis> = pos.iter().map(|&i| bases[i]).collect();
    let est = compare_sample(&pick(bits_a), &pick(bits_b), &sample_bases);
    report.qber = Some(est);
    if est.q() > cfg.qber_limit {
        report.outcome = KeyOutcome::Paused;
        return Ok((report, None));
    }
    let keep = |bits: &[bool]| drop_positions(bits, &pos);
    let (ka, kb) = (keep(bits_a), keep(bits_b));
    report.n_in = ka.len() as u64;
    match cascade_reconcile(&ka, &kb, cascade_qber(&est), &cfg.cascade_for(block)) {
        Ok((a, b)) => {
            report.leak_ec = b.leaked_bits;
            Ok((
                report,
                Some(Reconciled {
                    block,
                    qber: est.q(),
                    a,
                    b,
                }),
            ))
        }
        Err(CascadeError::VerificationFailed { .. }) => {
            report.outcome = KeyOutcome::Failed;
            Ok((report, None))
        }
        Err(e) => Err(e.into()),
    }
}

/// Amplifies one reconciled key with the block's matrix seed.
pub fn amplify_key(key: &ReconciledKey, qber: f64, block: u64, cfg: &SessionConfig) -> Result<FinalKey, PipelineError> {
    let seed = cfg.seeds_for(block).next_seed()?;
    Ok(amplify_with_seed(key, qber, seed, &cfg.amplify, block)?)
}

/// Post-processes one key block held by both sides locally.
pub fn process_block(
    bits_a: &[bool],
    bits_b: &[bool],
    bases: &[Basis],
    block: u64,
    cfg: &SessionConfig,
) -> Result<BlockResult, PipelineError> {
    let (mut report, rec) = reconcile_block(bits_a, bits_b, bases, block, cfg)?;
    let Some(rec) = rec else {
        return Ok(BlockResult { report, keys: None });
    };
    // One seed serves both sides, as it would after crossing the channel.
    let seed = cfg.seeds_for(block).next_seed()?;
    let fa = amplify_with_seed(&rec.a, rec.qber, seed, &cfg.amplify, block)?;
    let fb = amplify_with_seed(&rec.b, rec.qber, seed, &cfg.amplify, block)?;
    if fa.bits != fb.bits {
        return Err(PipelineError::KeyMismatch(block));
    }
    report.n_out = fa.n_out();
    report.outcome = KeyOutcome::Amplified;
    Ok(BlockResult {
        report,
        keys: Some((fa, fb)),
    })
}

/// Text form of one side's reconciled blocks: CSV
/// `block,qber,leak_ec,n,bits` with the bits as hex of the packed bytes.
pub fn write_reconciled<W: Write>(blocks: &[(u64, f64, &ReconciledKey)], mut out: W) -> io::Result<()> {
    writeln!(out, "block,qber,leak_ec,n,bits")?;
    for (block, qber, key) in blocks {
        let hex: String = bits_to_bytes(&key.bits).iter().map(|b| format!("{b:02x}")).collect();
        writeln!(out, "{block},{qber:.17e},{},{},{hex}", key.leaked_bits, key.bits.len())?;
    }
    Ok(())
}

pub fn read_reconciled(text: &str) -> Result<Vec<(u64, f64, ReconciledKey)>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("block,qber,leak_ec,n,bits") {
        return Err("missing reconciled-key header".into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| format!("line {}: bad {what}", i + 2);
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(bad("field count"));
            }
            let block = f[0].parse().map_err(|_| bad("block"))?;
            let qber = f[1].parse().map_err(|_| bad("qber"))?;
            let leaked_bits = f[2].parse().map_err(|_| bad("leak_ec"))?;
            let n: usize = f[3].parse().map_err(|_| bad("n"))?;
            if f[4].len() != 2 * n.div_ceil(8) {
                return Err(bad("bit string length"));
            }
            let bytes = (0..f[4].len())
                .step_by(2)
                .map(|k| u8::from_str_radix(&f[4][k..k + 2], 16))
                .collect::<Result<Vec<u8>, _>>()
                .map_err(|_| bad("hex"))?;
            Ok((block, qber, responder_key(bytes_to_bits(&bytes, n), leaked_bits)))
        })
        .collect()
}

/// Bits of `bits` not at the sorted `positions`.
pub fn drop_positions(bits: &[bool], positions: &[usize]) -> Vec<bool> {
    let mut skip = positions.iter().peekable();
    bits.iter()
        .enumerate()
        .filter(|(i, _)| {
            if skip.peek() == Some(&i) {
                skip.next();
                false
            } else {
                true
            }
        })
        .map(|(_, b)| *b)
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub lock: OffsetEstimate,
    pub coincidences: usize,
    pub sifted: usize,
    pub blocks: Vec<KeyBlockReport>,
    pub key_a: FinalKey,
    pub key_b: FinalKey,
}

impl PipelineReport {
    pub fn secret_bits(&self) -> u64 {
        self.key_a.n_out()
    }
}

impl fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "offset {:.6e} s, drift {:.3e}, confidence {:.1}",
            self.lock.offset, self.lock.freq_drift, self.lock.confidence
        )?;
        writeln!(f, "coincidences {}, sifted {}", self.coincidences, self.sifted)?;
        writeln!(f, "block,sifted,qber,outcome,n_in,leak_ec,n_out")?;
        for b in &self.blocks {
            let q = b.qber.map_or(String::from("-"), |q| format!("{:.4}", q.q()));
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                b.block, b.sifted, q, b.outcome, b.n_in, b.leak_ec, b.n_out
            )?;
        }
        write!(f, "secret bits {}", self.secret_bits())
    }
}

/// Runs the whole chain on two recorded streams.
pub fn run_pipeline(a: &TimestampStream, b: &TimestampStream, cfg: &SessionConfig) -> Result<PipelineReport, PipelineError> {
    let est = lock(a, b, &cfg.sync)?;
    log::info!("locked: offset {:.6e} s, drift {:.3e}", est.offset, est.freq_drift);
    let (timeline, _) = track_stream(a, b, &est, &cfg.sync)?;
    let pairs = find_coincidences(a, b, &timeline, cfg.tau_c);
    let (sa, sb) = sift(&pairs, a);
    run_postprocessing(&sa, &sb, cfg).map(|(blocks, key_a, key_b)| PipelineReport {
        lock: est,
        coincidences: pairs.len(),
        sifted: sa.len(),
        blocks,
        key_a,
        key_b,
    })
}

/// Key-block loop over two aligned sifted keys.
pub fn run_postprocessing(
    sa: &SiftedKey,
    sb: &SiftedKey,
    cfg: &SessionConfig,
) -> Result<(Vec<KeyBlockReport>, FinalKey, FinalKey), PipelineError> {
    let mut blocks = Vec::new();
    let mut key_a = FinalKey::default();
    let mut key_b = FinalKey::default();
    for (j, r) in key_block_ranges(sa.len(), cfg).into_iter().enumerate() {
        let res = process_block(&sa.bits[r.clone()], &sb.bits[r.clone()], &sa.bases[r], j as u64, cfg)?;
        log::info!("key block {j}: {}", res.report.outcome);
        if let Some((fa, fb)) = res.keys {
            key_a.append(fa);
            key_b.append(fb);
        }
        blocks.push(res.report);
    }
    Ok((blocks, key_a, key_b))
}

/// Reconciled key assembled by side A from what it learned over the channel.
pub fn responder_key(bits: Vec<bool>, leaked_bits: u64) -> ReconciledKey {
    ReconciledKey {
        bits,
        leaked_bits,
        blocks: Vec::new(),
        verified: true,
        corrected: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::binary_entropy;
    use crate::simulator::{simulate_session, SimConfig};

    fn night(duration: f64, seed: u64) -> (TimestampStream, TimestampStream) {
        let s = simulate_session(&SimConfig {
            duration,
            seed,
            ..SimConfig::night()
        })
        .unwrap();
        (s.a, s.b)
    }

    #[test]
    fn block_ranges_absorb_short_tail() {
        let cfg = SessionConfig::default();
        let r = key_block_ranges(45_000, &cfg);
        assert_eq!(r, vec![0..20_000, 20_000..45_000]);
        assert_eq!(key_block_ranges(3000, &cfg), vec![0..3000]);
        assert!(key_block_ranges(0, &cfg).is_empty());
    }

    #[test]
    fn reconciled_text_round_trip() {
        let k = responder_key(vec![true, false, true, true, false, false, true, false, true], 17);
        let mut buf = Vec::new();
        write_reconciled(&[(3, 0.0312, &k)], &mut buf).unwrap();
        let back = read_reconciled(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, vec![(3, 0.0312, k)]);
    }

    #[test]
    fn drop_positions_keeps_the_rest() {
        let bits = [true, false, true, true, false];
        assert_eq!(drop_positions(&bits, &[0, 3]), vec![false, true, false]);
    }

    #[test]
    fn night_session_yields_identical_keys_with_exact_accounting() {
        let (a, b) = night(30.0, 4);
        let cfg = SessionConfig {
            seed: 4,
            ..SessionConfig::default()
        };
        let r = run_pipeline(&a, &b, &cfg).unwrap();
        assert!(r.secret_bits() > 0, "{r}");
        assert_eq!(r.key_a.bits, r.key_b.bits);
        for blk in &r.key_a.blocks {
            let i_e = (blk.n_in as f64 * binary_entropy(blk.qber)).ceil() as u64;
            assert_eq!(blk.n_out, blk.n_in - i_e - blk.leak_ec);
        }
        let again = run_pipeline(&a, &b, &cfg).unwrap();
        assert_eq!(again.key_a.to_bytes(), r.key_a.to_bytes());
    }

    #[test]
    fn high_qber_pauses_key_generation() {
        let s = simulate_session(&SimConfig {
            duration: 20.0,
            seed: 8,
            source: crate::linkmodel::SourceParams {
                v_hv: 0.7,
                v_diag: 0.7,
                ..SimConfig::night().source
            },
            ..SimConfig::night()
        })
        .unwrap();
        let r = run_pipeline(&s.a, &s.b, &SessionConfig::default()).unwrap();
        assert!(!r.blocks.is_empty());
        assert!(r.blocks.iter().all(|b| b.outcome == KeyOutcome::Paused));
        assert_eq!(r.secret_bits(), 0);
    }
}
