//! Stochastic photon-event generator for both receivers.
//!
//! Pairs, unpaired singles and background are independent Poisson processes.
//! Every detected photon picks a basis with probability ½; inside a pair with
//! matching bases the outcomes are anticorrelated up to an error probability
//! `(1 - V)/2`. Event times get a detector lag and Gaussian jitter, side B is
//! then mapped through its own clock `t -> (1 + skew) t + offset`, times are
//! quantized to 125 ps ticks, and finally two non-paralyzable dead times are
//! applied: `tau_d` per detector and the timestamp unit dead time per side.
//!
//! Generation runs in half-second segments so memory stays proportional to
//! the output, and is fully determined by the seed.

mod stream;

pub use stream::{
    detector_for, raw_bit, read_stream, write_stream, Basis, Party, StreamError,
    TimestampEvent, TimestampStream, DETECTOR_NAMES, H, HEADER_LEN, M45, MAGIC, MAX_TICK, P45, V,
};

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use thiserror::Error;

use crate::linkmodel::{ChannelParams, DetectorParams, LinkModel, ModelError, SourceParams};
use crate::params::{ParamError, ParamFile};
use crate::{seed, TICK_SECONDS};

const SEGMENT_SECS: f64 = 0.5;
const NO_PAIR: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid simulator setting {name}: {reason}")]
    Config { name: &'static str, reason: String },
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("session too long: {0} pairs exceed the pair id space")]
    TooManyPairs(u64),
}

/// Square-wave background: `channel.r_bg` for the first half of every period
/// ("night"), `day_rate` for the second half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundCycle {
    pub period: f64,
    pub day_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub source: SourceParams,
    pub channel: ChannelParams,
    pub detector: DetectorParams,
    /// Per-detector Gaussian timing jitter (s).
    pub jitter_sigma: f64,
    pub lags_a: [f64; 4],
    pub lags_b: [f64; 4],
    pub efficiency_a: [f64; 4],
    pub efficiency_b: [f64; 4],
    /// Relative weight of each receiver detector in the background light.
    pub background_weights: [f64; 4],
    pub background_cycle: Option<BackgroundCycle>,
    /// Relative frequency offset of the side-B clock.
    pub clock_skew: f64,
    /// Side-B clock reading at side-A time zero (s).
    pub clock_offset: f64,
    /// Dead time of each side's timestamp unit (s).
    pub unit_dead_time: f64,
    pub duration: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::night()
    }
}

impl SimConfig {
    /// Night-time link: the typical source, 15 % channel transmission and
    /// 7 kcps of dark counts at the receiver.
    pub fn night() -> Self {
        let m = LinkModel::typical();
        SimConfig {
            source: m.source,
            channel: ChannelParams {
                transmission: 0.15,
                r_bg: 7_000.0,
            },
            detector: m.detector,
            jitter_sigma: 0.35e-9,
            lags_a: [0.0; 4],
            lags_b: [0.0, 0.5e-9, 0.0, 0.5e-9],
            efficiency_a: [1.0; 4],
            efficiency_b: [1.0; 4],
            background_weights: [1.0; 4],
            background_cycle: None,
            clock_skew: 0.0,
            clock_offset: 1.234_567e-3,
            unit_dead_time: 128e-9,
            duration: 10.0,
            seed: 1,
        }
    }

    pub fn from_params(p: &ParamFile) -> Result<Self, SimError> {
        let d = SimConfig::night();
        let mut p = p.clone();
        if !p.contains("r_bg") {
            p.set("r_bg", d.channel.r_bg);
        }
        let link = LinkModel::from_params(&p)?;
        let cfg = SimConfig {
            source: link.source,
            channel: link.channel,
            detector: link.detector,
            jitter_sigma: p.get_or("jitter_sigma", d.jitter_sigma)?,
            lags_a: p.get_quad("lags_a")?.unwrap_or(d.lags_a),
            lags_b: p.get_quad("lags_b")?.unwrap_or(d.lags_b),
            efficiency_a: p.get_quad("efficiency_a")?.unwrap_or(d.efficiency_a),
            efficiency_b: p.get_quad("efficiency_b")?.unwrap_or(d.efficiency_b),
            background_weights: p
                .get_quad("background_weights")?
                .unwrap_or(d.background_weights),
            background_cycle: None,
            clock_skew: p.get_or("clock_skew", d.clock_skew)?,
            clock_offset: p.get_or("clock_offset", d.clock_offset)?,
            unit_dead_time: p.get_or("unit_dead_time", d.unit_dead_time)?,
            duration: p.get_or("duration", d.duration)?,
            seed: p.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.source.validate()?;
        self.channel.validate()?;
        self.detector.validate()?;
        let bad = |name: &'static str, reason: &str| {
            Err(SimError::Config {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad("duration", "must be positive");
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return bad("jitter_sigma", "must be non-negative");
        }
        if !(self.unit_dead_time.is_finite() && self.unit_dead_time >= 0.0) {
            return bad("unit_dead_time", "must be non-negative");
        }
        for e in self.efficiency_a.iter().chain(&self.efficiency_b) {
            if !(*e > 0.0 && *e <= 1.0) {
                return bad("efficiency", "must lie in (0, 1]");
            }
        }
        if self.background_weights.iter().any(|w| !(*w >= 0.0))
            || self.background_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("background_weights", "must be non-negative with a positive sum");
        }
        if self.lags_a.iter().chain(&self.lags_b).any(|l| !l.is_finite()) {
            return bad("lags", "must be finite");
        }
        if !self.clock_skew.is_finite() || self.clock_skew <= -1.0 {
            return bad("clock_skew", "must be greater than -1");
        }
        if !self.clock_offset.is_finite() {
            return bad("clock_offset", "must be finite");
        }
        if let Some(c) = self.background_cycle {
            if !(c.period > 0.0 && c.day_rate >= 0.0) {
                return bad("background_cycle", "needs a positive period and rate");
            }
        }
        Ok(())
    }

    /// Background rate in effect at source time `t`.
    pub fn background_at(&self, t: f64) -> f64 {
        match self.background_cycle {
            Some(c) if (t / c.period).fract() >= 0.5 => c.day_rate,
            _ => self.channel.r_bg,
        }
    }

    /// Side-B clock reading for source time `t`.
    pub fn to_receiver_clock(&self, t: f64) -> f64 {
        (1.0 + self.clock_skew) * t + self.clock_offset
    }

    /// Link model of the same operating point.
    pub fn link_model(&self) -> LinkModel {
        LinkModel {
            source: self.source,
            channel: self.channel,
            detector: self.detector,
            q_i_override: None,
        }
    }
}

/// A true photon pair that survived to both output streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruePair {
    pub pair_id: u32,
    pub index_a: usize,
    pub index_b: usize,
}

/// Per-side bookkeeping of the generator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SideCounts {
    /// Events that reached the timestamp stage (non-negative times).
    pub generated: u64,
    pub detector_dead: u64,
    pub unit_dead: u64,
    pub emitted: u64,
}

impl SideCounts {
    pub fn suppressed_fraction(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            (self.detector_dead + self.unit_dead) as f64 / self.generated as f64
        }
    }
}

/// What actually happened in a simulated session. Never sent over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub pairs: Vec<TruePair>,
    pub clock_offset: f64,
    pub clock_skew: f64,
    pub counts_a: SideCounts,
    pub counts_b: SideCounts,
    /// Set when more than half of one side's events were lost to dead time.
    pub saturation_warning: bool,
}

impl GroundTruth {
    /// True `t_B - t_A` clock offset (s) at source time `t` (s).
    pub fn offset_at(&self, t: f64) -> f64 {
        self.clock_offset + self.clock_skew * t
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "pair_id,index_a,index_b")?;
        for p in &self.pairs {
            writeln!(out, "{},{},{}", p.pair_id, p.index_a, p.index_b)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()
    }

    /// Reads a pair sidecar. Only the pair list is stored in the file.
    pub fn read_pairs(path: impl AsRef<Path>) -> io::Result<Vec<TruePair>> {
        let bad = |line: usize| io::Error::new(io::ErrorKind::InvalidData, format!("line {line}"));
        let mut pairs = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(i + 1));
            }
            pairs.push(TruePair {
                pair_id: f[0].trim().parse().map_err(|_| bad(i + 1))?,
                index_a: f[1].trim().parse().map_err(|_| bad(i + 1))?,
                index_b: f[2].trim().parse().map_err(|_| bad(i + 1))?,
            });
        }
        Ok(pairs)
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub a: TimestampStream,
    pub b: TimestampStream,
    pub truth: GroundTruth,
}

/// Streaming dead-time filter and emitter for one side.
struct SideSink {
    party: Party,
    pending: Vec<(u64, u32)>,
    out: Vec<u64>,
    last_on_detector: [Option<u64>; 4],
    last_on_side: Option<u64>,
    detector_dead_ticks: u64,
    unit_dead_ticks: u64,
    counts: SideCounts,
    pair_index: Vec<u32>,
}

impl SideSink {
    fn new(party: Party, det: &DetectorParams, unit_dead_time: f64) -> Self {
        SideSink {
            party,
            pending: Vec::new(),
            out: Vec::new(),
            last_on_detector: [None; 4],
            last_on_side: None,
            detector_dead_ticks: (det.tau_d / TICK_SECONDS).ceil() as u64,
            unit_dead_ticks: (unit_dead_time / TICK_SECONDS).ceil() as u64,
            counts: SideCounts::default(),
            pair_index: Vec::new(),
        }
    }

    fn push(&mut self, time: f64, detector: u8, pair: u32) {
        if !(time >= 0.0) {
            return;
        }
        let tick = (time / TICK_SECONDS).floor() as u64;
        if tick > MAX_TICK {
            return;
        }
        self.counts.generated += 1;
        self.pending.push(((tick << 4) | u64::from(detector), pair));
    }

    /// Emits all pending events with a word below `cutoff` in time order.
    fn flush_before(&mut self, cutoff: u64) {
        self.pending.sort_unstable();
        let split = self.pending.partition_point(|&(w, _)| w < cutoff);
        let ready: Vec<(u64, u32)> = self.pending.drain(..split).collect();
        for (word, pair) in ready {
            let tick = word >> 4;
            let d = (word & 0xf) as usize;
            if let Some(last) = self.last_on_detector[d] {
                if tick - last < self.detector_dead_ticks {
                    self.counts.detector_dead += 1;
                    continue;
                }
            }
            self.last_on_detector[d] = Some(tick);
            if let Some(last) = self.last_on_side {
                if tick - last < self.unit_dead_ticks || word <= *self.out.last().unwrap() {
                    self.counts.unit_dead += 1;
                    continue;
                }
            }
            self.last_on_side = Some(tick);
            if pair != NO_PAIR {
                self.pair_index[pair as usize] = self.out.len() as u32;
            }
            self.out.push(word);
            self.counts.emitted += 1;
        }
    }

    fn finish(mut self) -> (TimestampStream, SideCounts, Vec<u32>) {
        self.flush_before(u64::MAX);
        (
            TimestampStream::from_words_unchecked(self.party, self.out),
            self.counts,
            self.pair_index,
        )
    }
}

fn poisson_times(rng: &mut ChaCha8Rng, rate: f64, t0: f64, t1: f64, out: &mut Vec<f64>) {
    out.clear();
    if rate <= 0.0 {
        return;
    }
    let gap = Exp::new(rate).expect("positive rate");
    let mut t = t0 + gap.sample(rng);
    while t < t1 {
        out.push(t);
        t += gap.sample(rng);
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64; 4], total: f64) -> u8 {
    let mut x = rng.random::<f64>() * total;
    for (d, w) in weights.iter().enumerate() {
        if x < *w {
            return d as u8;
        }
        x -= w;
    }
    3
}

fn random_detector(rng: &mut ChaCha8Rng) -> u8 {
    rng.random_range(0..4u8)
}

/// Generates both timestamp streams and the ground truth of one session.
pub fn simulate_session(cfg: &SimConfig) -> Result<Session, SimError> {
    cfg.validate()?;
    let expected_pairs = (cfg.source.rc * cfg.duration * 1.1 + 1000.0) as u64;
    if expected_pairs >= u64::from(NO_PAIR) {
        return Err(SimError::TooManyPairs(expected_pairs));
    }

    let mut rng = seed::rng(cfg.seed, "simulator");
    let jitter = Normal::new(0.0, cfg.jitter_sigma).expect("finite jitter");
    let src = &cfg.source;
    let t_ch = cfg.channel.transmission;
    let error_prob = [(1.0 - src.v_hv) / 2.0, (1.0 - src.v_diag) / 2.0];
    let weight_total: f64 = cfg.background_weights.iter().sum();

    let mut sink_a = SideSink::new(Party::A, &cfg.detector, cfg.unit_dead_time);
    let mut sink_b = SideSink::new(Party::B, &cfg.detector, cfg.unit_dead_time);

    let max_lag = cfg
        .lags_a
        .iter()
        .chain(&cfg.lags_b)
        .fold(0.0f64, |m, l| m.max(l.abs()));
    let margin = 1e-6 + 2.0 * max_lag + 40.0 * cfg.jitter_sigma;

    let time_a = |rng: &mut ChaCha8Rng, t: f64, d: u8| t + cfg.lags_a[d as usize] + jitter.sample(rng);
    let time_b = |rng: &mut ChaCha8Rng, t: f64, d: u8| {
        cfg.to_receiver_clock(t + cfg.lags_b[d as usize] + jitter.sample(rng))
    };

    let mut times = Vec::new();
    let mut pair_count: u32 = 0;
    let mut seg_start = 0.0;
    while seg_start < cfg.duration {
        let seg_end = (seg_start + SEGMENT_SECS).min(cfg.duration);

        poisson_times(&mut rng, src.rc, seg_start, seg_end, &mut times);
        for &t in &times {
            let id = pair_count;
            pair_count += 1;
            sink_a.pair_index.push(NO_PAIR);
            sink_b.pair_index.push(NO_PAIR);

            let basis_a = if rng.random::<bool>() { Basis::Diagonal } else { Basis::HV };
            let bit_a: bool = rng.random();
            let det_a = detector_for(basis_a, bit_a);
            if rng.random::<f64>() < cfg.efficiency_a[det_a as usize] {
                let ta = time_a(&mut rng, t, det_a);
                sink_a.push(ta, det_a, id);
            }

            if rng.random::<f64>() >= t_ch {
                continue;
            }
            let basis_b = if rng.random::<bool>() { Basis::Diagonal } else { Basis::HV };
            let bit_b = if basis_b == basis_a {
                let flip = rng.random::<f64>() < error_prob[basis_a.index()];
                !bit_a ^ flip
            } else {
                rng.random()
            };
            let det_b = detector_for(basis_b, bit_b);
            if rng.random::<f64>() < cfg.efficiency_b[det_b as usize] {
                let tb = time_b(&mut rng, t, det_b);
                sink_b.push(tb, det_b, id);
            }
        }

        poisson_times(&mut rng, src.r1 - src.rc, seg_start, seg_end, &mut times);
        for &t in &times {
            let d = random_detector(&mut rng);
            if rng.random::<f64>() < cfg.efficiency_a[d as usize] {
                let ta = time_a(&mut rng, t, d);
                sink_a.push(ta, d, NO_PAIR);
            }
        }

        poisson_times(&mut rng, (src.r2 - src.rc) * t_ch, seg_start, seg_end, &mut times);
        for &t in &times {
            let d = random_detector(&mut rng);
            if rng.random::<f64>() < cfg.efficiency_b[d as usize] {
                let tb = time_b(&mut rng, t, d);
                sink_b.push(tb, d, NO_PAIR);
            }
        }

        let r_bg = cfg.background_at(seg_start);
        poisson_times(&mut rng, r_bg, seg_start, seg_end, &mut times);
        for &t in &times {
            let d = pick_weighted(&mut rng, &cfg.background_weights, weight_total);
            if rng.random::<f64>() < cfg.efficiency_b[d as usize] {
                let tb = time_b(&mut rng, t, d);
                sink_b.push(tb, d, NO_PAIR);
            }
        }

        let cutoff = |secs: f64| -> u64 {
            if secs <= 0.0 {
                0
            } else {
                ((secs / TICK_SECONDS).floor() as u64).min(MAX_TICK) << 4
            }
        };
        sink_a.flush_before(cutoff(seg_end - margin));
        sink_b.flush_before(cutoff(cfg.to_receiver_clock(seg_end) - margin));
        seg_start = seg_end;
    }

    let (a, counts_a, index_a) = sink_a.finish();
    let (b, counts_b, index_b) = sink_b.finish();
    let pairs = index_a
        .iter()
        .zip(&index_b)
        .enumerate()
        .filter(|(_, (ia, ib))| **ia != NO_PAIR && **ib != NO_PAIR)
        .map(|(id, (&ia, &ib))| TruePair {
            pair_id: id as u32,
            index_a: ia as usize,
            index_b: ib as usize,
        })
        .collect();

    let saturation_warning =
        counts_a.suppressed_fraction() > 0.5 || counts_b.suppressed_fraction() > 0.5;
    if saturation_warning {
        log::warn!(
            "detector saturation: {:.0} % (A) and {:.0} % (B) of events lost to dead time",
            100.0 * counts_a.suppressed_fraction(),
            100.0 * counts_b.suppressed_fraction()
        );
    }

    Ok(Session {
        a,
        b,
        truth: GroundTruth {
            pairs,
            clock_offset: cfg.clock_offset,
            clock_skew: cfg.clock_skew,
            counts_a,
            counts_b,
            saturation_warning,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            duration: 2.0,
            ..SimConfig::night()
        }
    }

    #[test]
    fn no_pair_process_means_no_pairs() {
        let cfg = SimConfig {
            source: SourceParams::new(1000.0, 1000.0, 0.0, 0.975, 0.921).unwrap(),
            channel: ChannelParams::new(1.0, 0.0).unwrap(),
            duration: 10.0,
            seed: 11,
            ..SimConfig::night()
        };
        let s = simulate_session(&cfg).unwrap();
        assert!(s.truth.pairs.is_empty());
        assert!(s.a.len() > 9000 && s.b.len() > 9000);
    }

    #[test]
    fn same_seed_same_bytes() {
        let s1 = simulate_session(&small()).unwrap();
        let s2 = simulate_session(&small()).unwrap();
        assert_eq!(s1.a, s2.a);
        assert_eq!(s1.b, s2.b);
        assert_eq!(s1.truth, s2.truth);
        let s3 = simulate_session(&SimConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(s1.a, s3.a);
    }

    #[test]
    fn dead_times_hold() {
        let cfg = SimConfig {
            channel: ChannelParams::new(0.15, 400_000.0).unwrap(),
            ..small()
        };
        let s = simulate_session(&cfg).unwrap();
        let tau_d = (cfg.detector.tau_d / TICK_SECONDS).ceil() as u64;
        let tau_u = (cfg.unit_dead_time / TICK_SECONDS).ceil() as u64;
        for stream in [&s.a, &s.b] {
            let mut last = [None::<u64>; 4];
            for i in 0..stream.len() {
                let (t, d) = (stream.tick(i), stream.detector(i) as usize);
                if i > 0 {
                    assert!(t - stream.tick(i - 1) >= tau_u);
                }
                if let Some(l) = last[d] {
                    assert!(t - l >= tau_d);
                }
                last[d] = Some(t);
            }
        }
        assert!(!s.truth.saturation_warning);
    }

    #[test]
    fn true_pairs_point_at_matching_events() {
        let s = simulate_session(&small()).unwrap();
        assert!(!s.truth.pairs.is_empty());
        for p in s.truth.pairs.iter().take(2000) {
            let ta = s.a.get(p.index_a).seconds();
            let tb = s.b.get(p.index_b).seconds();
            let residual = tb - ta - s.truth.offset_at(ta);
            assert!(residual.abs() < 5e-9, "{residual}");
        }
    }

    #[test]
    fn ground_truth_csv_round_trip() {
        let s = simulate_session(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        s.truth.save(&path).unwrap();
        assert_eq!(GroundTruth::read_pairs(&path).unwrap(), s.truth.pairs);
    }

    #[test]
    fn saturation_warning_when_flooded() {
        let cfg = SimConfig {
            channel: ChannelParams::new(0.15, 2e7).unwrap(),
            duration: 0.2,
            ..SimConfig::night()
        };
        let s = simulate_session(&cfg).unwrap();
        assert!(s.truth.saturation_warning);
    }

    #[test]
    fn config_from_params() {
        let p = ParamFile::parse(
            "rates = intrinsic\nr_bg = 1000\nduration = 3\nseed = 9\nlags_b = 0,0,0,0\nefficiency_a = 1, 0.9, 1, 1\n",
        )
        .unwrap();
        let cfg = SimConfig::from_params(&p).unwrap();
        assert_eq!(cfg.channel.r_bg, 1000.0);
        assert_eq!(cfg.duration, 3.0);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lags_b, [0.0; 4]);
        assert_eq!(cfg.efficiency_a[1], 0.9);
        let bad = ParamFile::parse("efficiency_b = 0, 1, 1, 1").unwrap();
        assert!(SimConfig::from_params(&bad).is_err());
    }
}
