//! Offset acquisition and drift tracking between the two receiver clocks.
//!
//! Acquisition bins both streams, finds a coarse lag with an FFT
//! cross-correlation and refines it with a direct difference histogram.
//! Tracking is a first-order servo on coincidence residuals with a slow
//! frequency estimate fitted to the offset history.

use std::collections::VecDeque;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::params::{ParamError, ParamFile};
use crate::simulator::TimestampStream;
use crate::{secs_to_ticks, ticks_to_secs};

const MIN_PEAK_COUNT: u64 = 10;
const PEAK_TO_MEDIAN: f64 = 5.0;
const HISTORY_STEP: f64 = 0.1;
const FREQ_SPAN_TAUS: f64 = 10.0;
const FREQ_MIN_TAUS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("invalid sync setting {name}: {reason}")]
    Config { name: &'static str, reason: String },
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("acquisition failed: peak {peak} vs median {median} (ratio {confidence:.2})")]
    AcquisitionFailed {
        peak: u64,
        median: f64,
        confidence: f64,
    },
    #[error("tracking lost: no coincidences for {gap:.3} s (holdover {holdover:.3} s)")]
    TrackingLost { gap: f64, holdover: f64 },
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    pub acquisition_window: f64,
    pub coarse_bin: f64,
    pub fine_bin: f64,
    pub track_window: f64,
    pub servo_tau: f64,
    /// Relative frequency uncertainty of the free-running clocks.
    pub freq_uncertainty: f64,
    /// Walk that can be absorbed before the lock is lost (s).
    pub max_walk: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            acquisition_window: 5.0,
            coarse_bin: 2.048e-6,
            fine_bin: 2e-9,
            track_window: 3.75e-9,
            servo_tau: 2.0,
            freq_uncertainty: 1e-12,
            max_walk: 7.5e-9,
        }
    }
}

impl SyncConfig {
    pub fn from_params(p: &ParamFile) -> Result<Self, SyncError> {
        let d = SyncConfig::default();
        let cfg = SyncConfig {
            acquisition_window: p.get_or("acquisition_window", d.acquisition_window)?,
            coarse_bin: p.get_or("coarse_bin", d.coarse_bin)?,
            fine_bin: p.get_or("fine_bin", d.fine_bin)?,
            track_window: p.get_or("track_window", d.track_window)?,
            servo_tau: p.get_or("servo_tau", d.servo_tau)?,
            freq_uncertainty: p.get_or("freq_uncertainty", d.freq_uncertainty)?,
            max_walk: p.get_or("max_walk", d.max_walk)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        let fields = [
            ("acquisition_window", self.acquisition_window),
            ("coarse_bin", self.coarse_bin),
            ("fine_bin", self.fine_bin),
            ("track_window", self.track_window),
            ("servo_tau", self.servo_tau),
            ("freq_uncertainty", self.freq_uncertainty),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(SyncError::Config {
                    name,
                    reason: format!("{v} is not positive"),
                });
            }
        }
        if self.fine_bin > self.coarse_bin {
            return Err(SyncError::Config {
                name: "fine_bin",
                reason: "wider than coarse_bin".into(),
            });
        }
        if secs_to_ticks(self.fine_bin) < 1.0 {
            return Err(SyncError::Config {
                name: "fine_bin",
                reason: "narrower than one tick".into(),
            });
        }
        if !(self.max_walk >= 0.0) {
            return Err(SyncError::Config {
                name: "max_walk",
                reason: "negative".into(),
            });
        }
        Ok(())
    }

    pub fn holdover(&self) -> f64 {
        holdover_budget(self.freq_uncertainty, self.max_walk)
    }
}

/// Time the link can coast without coincidences.
pub fn holdover_budget(freq_uncertainty: f64, max_walk: f64) -> f64 {
    assert!(freq_uncertainty > 0.0, "frequency uncertainty must be positive");
    max_walk / freq_uncertainty
}

/// Clock relation `t_B - t_A = offset + freq_drift (t_A - epoch)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetEstimate {
    pub offset: f64,
    pub freq_drift: f64,
    /// Peak-to-median ratio of the acquisition histogram.
    pub confidence: f64,
    /// Side-A time (s) at which `offset` applies.
    pub epoch: f64,
    /// Residuals accepted by the last tracking update.
    pub used_events: u64,
}

impl OffsetEstimate {
    pub fn new(offset: f64, epoch: f64) -> Self {
        OffsetEstimate {
            offset,
            freq_drift: 0.0,
            confidence: 0.0,
            epoch,
            used_events: 0,
        }
    }

    pub fn predict(&self, t_a: f64) -> f64 {
        self.offset + self.freq_drift * (t_a - self.epoch)
    }

    pub fn at_epoch(&self, epoch: f64) -> Self {
        OffsetEstimate {
            offset: self.predict(epoch),
            epoch,
            ..*self
        }
    }
}

fn window_end(first: u64, cfg: &SyncConfig) -> u64 {
    first.saturating_add(secs_to_ticks(cfg.acquisition_window).ceil() as u64)
}

fn check_span(s: &TimestampStream, cfg: &SyncConfig) -> Result<u64, SyncError> {
    let (Some(first), Some(last)) = (s.start_tick(), s.end_tick()) else {
        return Err(SyncError::InsufficientData(format!("{:?} stream is empty", s.party())));
    };
    let span = ticks_to_secs((last - first) as f64);
    if span < 0.9 * cfg.acquisition_window {
        return Err(SyncError::InsufficientData(format!(
            "{:?} stream spans {span:.3} s, need {:.3} s",
            s.party(),
            cfg.acquisition_window
        )));
    }
    Ok(first)
}

struct Correlator {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Correlator {
    fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Correlator {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    /// Circular `c[k] = sum_n a[n] b[n + k]` of two real sequences with one
    /// forward transform of `a + i b`.
    fn correlate(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let n = self.size;
        let mut z: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(*a.get(i).unwrap_or(&0.0), *b.get(i).unwrap_or(&0.0)))
            .collect();
        self.forward.process(&mut z);
        let mut prod = vec![Complex::new(0.0, 0.0); n];
        for k in 0..n {
            let zk = z[k];
            let zr = z[(n - k) % n].conj();
            let fa = (zk + zr) * 0.5;
            let fb = (zk - zr) * Complex::new(0.0, -0.5);
            prod[k] = fa.conj() * fb;
        }
        self.inverse.process(&mut prod);
        prod.iter().map(|c| c.re / n as f64).collect()
    }
}

fn bin_counts(s: &TimestampStream, first: u64, end: u64, width: u64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &w in &s.words()[s.tick_range(first, end)] {
        let i = (((w >> 4) - first) / width) as usize;
        if i < bins {
            h[i] += 1.0;
        }
    }
    h
}

/// Coarse tier: candidate `t_B - t_A` in ticks.
fn coarse_candidate(
    a: &TimestampStream,
    b: &TimestampStream,
    first_a: u64,
    first_b: u64,
    cfg: &SyncConfig,
) -> i64 {
    let width = (secs_to_ticks(cfg.coarse_bin).round() as u64).max(1);
    let bins = (secs_to_ticks(cfg.acquisition_window) / width as f64).ceil() as usize;
    let size = (bins + bins / 2).next_power_of_two().max(8);
    let ha = bin_counts(a, first_a, window_end(first_a, cfg), width, bins);
    let hb = bin_counts(b, first_b, window_end(first_b, cfg), width, bins);
    let c = Correlator::new(size).correlate(&ha, &hb);

    let max_lag = (size - bins) as i64;
    let at = |k: i64| c[k.rem_euclid(size as i64) as usize];
    let mut best = (f64::NEG_INFINITY, 0i64);
    for k in -max_lag..max_lag {
        let s = at(k) + at(k + 1);
        if s > best.0 {
            best = (s, k);
        }
    }
    let k = best.1;
    let lag = if at(k + 1) > at(k) { k + 1 } else { k };
    first_b as i64 - first_a as i64 + lag * width as i64
}

struct FineHistogram {
    counts: Vec<u64>,
    sums: Vec<i64>,
    width: i64,
    lo: i64,
}

/// Fine tier: histogram of all `t_B - t_A` within two coarse bins of the
/// candidate, with bin `len/2` centred on the candidate.
fn fine_histogram(
    a: &TimestampStream,
    b: &TimestampStream,
    first_a: u64,
    candidate: i64,
    cfg: &SyncConfig,
) -> FineHistogram {
    let width = (secs_to_ticks(cfg.fine_bin).round() as i64).max(1);
    let coarse = (secs_to_ticks(cfg.coarse_bin).round() as i64).max(1);
    let half_bins = (2 * coarse + width - 1) / width;
    let len = (2 * half_bins + 1) as usize;
    let lo = candidate - half_bins * width - width / 2;
    let hi = lo + len as i64 * width;
    let mut h = FineHistogram {
        counts: vec![0; len],
        sums: vec![0; len],
        width,
        lo,
    };
    let bt = b.words();
    let mut j = 0usize;
    for &w in &a.words()[a.tick_range(first_a, window_end(first_a, cfg))] {
        let ta = (w >> 4) as i64;
        while j < bt.len() && ((bt[j] >> 4) as i64) < ta + lo {
            j += 1;
        }
        let mut k = j;
        while k < bt.len() {
            let d = (bt[k] >> 4) as i64 - ta;
            if d >= hi {
                break;
            }
            let i = ((d - lo) / width) as usize;
            h.counts[i] += 1;
            h.sums[i] += d;
            k += 1;
        }
    }
    h
}

fn median_u64(v: &[u64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

/// Recovers the offset between two streams from their first
/// `acquisition_window` seconds. Each stream's window starts at its own first
/// event, so no prior knowledge of the offset is needed.
pub fn acquire_offset(
    a: &TimestampStream,
    b: &TimestampStream,
    cfg: &SyncConfig,
) -> Result<OffsetEstimate, SyncError> {
    cfg.validate()?;
    let first_a = check_span(a, cfg)?;
    let first_b = check_span(b, cfg)?;
    let candidate = coarse_candidate(a, b, first_a, first_b, cfg);
    let h = fine_histogram(a, b, first_a, candidate, cfg);

    let (peak_bin, &peak) = h
        .counts
        .iter()
        .enumerate()
        .max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i)))
        .expect("non-empty histogram");
    let median = median_u64(&h.counts);
    let confidence = if median > 0.0 {
        peak as f64 / median
    } else if peak > 0 {
        f64::INFINITY
    } else {
        0.0
    };
    if peak < MIN_PEAK_COUNT || (peak as f64) < PEAK_TO_MEDIAN * median {
        return Err(SyncError::AcquisitionFailed {
            peak,
            median,
            confidence,
        });
    }

    // Background-subtracted centroid of the peak bin and its neighbours.
    let lo_bin = peak_bin.saturating_sub(1);
    let hi_bin = (peak_bin + 1).min(h.counts.len() - 1);
    let outside: Vec<u64> = h
        .counts
        .iter()
        .enumerate()
        .filter(|(i, _)| i.abs_diff(peak_bin) > 8)
        .map(|(_, c)| *c)
        .collect();
    let bg = if outside.is_empty() {
        0.0
    } else {
        outside.iter().sum::<u64>() as f64 / outside.len() as f64
    };
    let mut count = 0u64;
    let mut sum = 0i64;
    let mut centre_sum = 0i64;
    for i in lo_bin..=hi_bin {
        count += h.counts[i];
        sum += h.sums[i];
        centre_sum += h.lo + h.width * i as i64 + h.width / 2;
    }
    let n_bins = (hi_bin - lo_bin + 1) as f64;
    let signal = count as f64 - bg * n_bins;
    let offset_ticks = if signal > 0.5 * count as f64 {
        (sum as f64 - bg * centre_sum as f64) / signal
    } else {
        sum as f64 / count as f64
    };

    let window_ticks = secs_to_ticks(cfg.acquisition_window);
    Ok(OffsetEstimate {
        offset: ticks_to_secs(offset_ticks),
        freq_drift: 0.0,
        confidence,
        epoch: ticks_to_secs(first_a as f64 + window_ticks / 2.0),
        used_events: count,
    })
}

/// Nearest-partner residuals `t_B - t_A - predict(t_A)` (s) for side-A events
/// in `a_range`, keeping those within `half_window`.
pub fn residuals_near(
    a: &TimestampStream,
    a_range: std::ops::Range<usize>,
    b: &TimestampStream,
    est: &OffsetEstimate,
    half_window: f64,
) -> Vec<(f64, f64)> {
    let bt = b.words();
    let hw = secs_to_ticks(half_window);
    let mut out = Vec::new();
    let mut j = 0usize;
    for &w in &a.words()[a_range] {
        let ta = (w >> 4) as f64;
        let t_secs = ticks_to_secs(ta);
        let centre = ta + secs_to_ticks(est.predict(t_secs));
        let lo = centre - hw;
        while j < bt.len() && ((bt[j] >> 4) as f64) < lo - 64.0 {
            j += 1;
        }
        let mut best: Option<f64> = None;
        let mut k = j;
        while k < bt.len() {
            let r = (bt[k] >> 4) as f64 - centre;
            if r > hw {
                break;
            }
            if r >= -hw && best.is_none_or(|b| r.abs() < b.abs()) {
                best = Some(r);
            }
            k += 1;
        }
        if let Some(r) = best {
            out.push((t_secs, ticks_to_secs(r)));
        }
    }
    out
}

fn linear_fit(points: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64, usize)> {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0usize, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in points {
        n += 1;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let var = sxx - sx * sx / nf;
    if var <= 0.0 {
        return None;
    }
    let slope = (sxy - sx * sy / nf) / var;
    let intercept = (sy - slope * sx) / nf;
    Some((intercept, slope, n))
}

/// Fits offset and frequency to the coincidences of the acquisition window.
/// The returned estimate refers to the start of the window.
pub fn refine_lock(
    a: &TimestampStream,
    b: &TimestampStream,
    est: &OffsetEstimate,
    cfg: &SyncConfig,
) -> Result<OffsetEstimate, SyncError> {
    let first_a = a
        .start_tick()
        .ok_or_else(|| SyncError::InsufficientData("empty side-A stream".into()))?;
    let range = a.tick_range(first_a, window_end(first_a, cfg));
    let mut e = est.at_epoch(ticks_to_secs(first_a as f64));
    for half in [cfg.track_window, cfg.track_window / 2.0] {
        let res = residuals_near(a, range.clone(), b, &e, half);
        let Some((c0, c1, n)) = linear_fit(res.iter().map(|(t, r)| (t - e.epoch, *r))) else {
            return Err(SyncError::InsufficientData(
                "too few coincidences to fit the clock drift".into(),
            ));
        };
        e.offset += c0;
        e.freq_drift += c1;
        e.used_events = n as u64;
    }
    Ok(e)
}

/// Acquisition followed by a drift fit: the usual way to establish a lock.
pub fn lock(
    a: &TimestampStream,
    b: &TimestampStream,
    cfg: &SyncConfig,
) -> Result<OffsetEstimate, SyncError> {
    let est = acquire_offset(a, b, cfg)?;
    let refined = refine_lock(a, b, &est, cfg)?;
    Ok(OffsetEstimate {
        confidence: est.confidence,
        ..refined
    })
}

/// Piecewise-linear record of the tracked offset against side-A time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OffsetTimeline {
    knots: Vec<(f64, f64)>,
    tail_freq: f64,
}

impl OffsetTimeline {
    pub fn constant(est: &OffsetEstimate) -> Self {
        OffsetTimeline {
            knots: vec![(est.epoch, est.offset)],
            tail_freq: est.freq_drift,
        }
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Frequency offset used beyond the last knot.
    pub fn tail_freq(&self) -> f64 {
        self.tail_freq
    }

    /// CSV `t_a_s,offset_s,tail_freq`; the last column repeats on every row.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_a_s,offset_s,tail_freq")?;
        for (t, o) in &self.knots {
            writeln!(out, "{t:.17e},{o:.17e},{:.17e}", self.tail_freq)?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self, SyncError> {
        let mut tl = OffsetTimeline::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| SyncError::Config {
                    name: "timeline",
                    reason: format!("line {}: not a number", i + 1),
                })?;
            if v.len() != 3 || tl.knots.last().is_some_and(|(t, _)| v[0] <= *t) {
                return Err(SyncError::Config {
                    name: "timeline",
                    reason: format!("line {}: malformed", i + 1),
                });
            }
            tl.knots.push((v[0], v[1]));
            tl.tail_freq = v[2];
        }
        Ok(tl)
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    fn push(&mut self, t: f64, offset: f64, freq: f64) {
        if self.knots.last().is_some_and(|(lt, _)| t <= *lt) {
            self.knots.pop();
        }
        self.knots.push((t, offset));
        self.tail_freq = freq;
    }

    /// Offset (s) at side-A time `t` (s). Extrapolates linearly beyond the ends.
    pub fn offset_at(&self, t: f64) -> f64 {
        let k = &self.knots;
        match k.len() {
            0 => 0.0,
            1 => k[0].1 + self.tail_freq * (t - k[0].0),
            n => {
                if t <= k[0].0 {
                    let slope = (k[1].1 - k[0].1) / (k[1].0 - k[0].0);
                    return k[0].1 + slope * (t - k[0].0);
                }
                if t >= k[n - 1].0 {
                    return k[n - 1].1 + self.tail_freq * (t - k[n - 1].0);
                }
                let i = k.partition_point(|(kt, _)| *kt <= t);
                let (t0, o0) = k[i - 1];
                let (t1, o1) = k[i];
                o0 + (o1 - o0) * (t - t0) / (t1 - t0)
            }
        }
    }
}

/// Offset servo: exponential moving average with time constant `servo_tau`
/// plus a frequency estimate regressed over the last `10 servo_tau` of
/// offset history.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: SyncConfig,
    est: OffsetEstimate,
    history: VecDeque<(f64, f64)>,
    last_residual: Option<f64>,
    timeline: OffsetTimeline,
}

impl Tracker {
    pub fn new(est: OffsetEstimate, cfg: SyncConfig) -> Self {
        let mut timeline = OffsetTimeline::default();
        timeline.push(est.epoch, est.offset, est.freq_drift);
        Tracker {
            cfg,
            est: OffsetEstimate { used_events: 0, ..est },
            history: VecDeque::from([(est.epoch, est.offset)]),
            last_residual: None,
            timeline,
        }
    }

    pub fn estimate(&self) -> OffsetEstimate {
        self.est
    }

    pub fn timeline(&self) -> &OffsetTimeline {
        &self.timeline
    }

    pub fn into_timeline(mut self) -> OffsetTimeline {
        let e = self.est;
        self.timeline.push(e.epoch, e.offset, e.freq_drift);
        self.timeline
    }

    pub fn predict(&self, t: f64) -> f64 {
        self.est.predict(t)
    }

    fn advance(&mut self, t: f64) {
        if t <= self.est.epoch {
            return;
        }
        let step = HISTORY_STEP;
        while let Some(&(last_t, _)) = self.history.back() {
            let next = last_t + step;
            if next > t {
                break;
            }
            let off = self.est.predict(next);
            self.record(next, off);
        }
        self.est = self.est.at_epoch(t);
    }

    fn record(&mut self, t: f64, offset: f64) {
        self.history.push_back((t, offset));
        self.timeline.push(t, offset, self.est.freq_drift);
        let horizon = FREQ_SPAN_TAUS * self.cfg.servo_tau;
        while self.history.front().is_some_and(|(ft, _)| t - ft > horizon) {
            self.history.pop_front();
        }
        let span = t - self.history.front().map_or(t, |h| h.0);
        if span >= FREQ_MIN_TAUS * self.cfg.servo_tau {
            if let Some((_, slope, _)) = linear_fit(self.history.iter().map(|(ht, o)| (ht - t, *o))) {
                self.est.freq_drift = slope;
            }
        }
    }

    /// Elapsed time since the last accepted residual that would lose the lock.
    pub fn check_gap(&self, t: f64) -> Result<(), SyncError> {
        let since = self.last_residual.unwrap_or(self.est.epoch);
        let gap = t - since;
        let holdover = self.cfg.holdover();
        if gap > holdover {
            return Err(SyncError::TrackingLost { gap, holdover });
        }
        Ok(())
    }

    /// Applies one residual measured against the current prediction.
    /// Returns whether it fell inside the tracking window.
    pub fn update(&mut self, t: f64, residual: f64) -> Result<bool, SyncError> {
        self.check_gap(t)?;
        if residual.abs() > self.cfg.track_window {
            self.advance(t);
            return Ok(false);
        }
        let prev = self.last_residual.unwrap_or(self.est.epoch).min(t);
        self.advance(t);
        let gain = 1.0 - (-(t - prev) / self.cfg.servo_tau).exp();
        self.est.offset += gain * residual;
        self.est.used_events += 1;
        self.last_residual = Some(t);
        Ok(true)
    }
}

/// Batch servo update. `residuals` are `(t_A, t_B - t_A - estimate.predict(t_A))`
/// pairs in time order.
pub fn track(
    estimate: &OffsetEstimate,
    residuals: &[(f64, f64)],
    cfg: &SyncConfig,
) -> Result<OffsetEstimate, SyncError> {
    let mut tr = Tracker::new(*estimate, *cfg);
    for &(t, r) in residuals {
        let correction = tr.predict(t) - estimate.predict(t);
        tr.update(t, r - correction)?;
    }
    Ok(tr.estimate())
}

/// Online follower: matches side-A events to their nearest side-B partner
/// around the servo prediction and feeds the residuals to the tracker.
#[derive(Debug, Clone)]
pub struct Follower {
    tracker: Tracker,
    b_cursor: usize,
}

impl Follower {
    pub fn new(est: OffsetEstimate, cfg: SyncConfig) -> Self {
        Follower {
            tracker: Tracker::new(est, cfg),
            b_cursor: 0,
        }
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn estimate(&self) -> OffsetEstimate {
        self.tracker.estimate()
    }

    pub fn timeline(&self) -> &OffsetTimeline {
        self.tracker.timeline()
    }

    pub fn into_timeline(self) -> OffsetTimeline {
        self.tracker.into_timeline()
    }

    /// Forgets the side-B position, for when the next call passes a new
    /// side-B stream.
    pub fn reset_cursor(&mut self) {
        self.b_cursor = 0;
    }

    /// Processes side-A event words in time order against the full side-B
    /// stream.
    pub fn process(&mut self, a_words: &[u64], b: &TimestampStream) -> Result<(), SyncError> {
        let bt = b.words();
        let hw = secs_to_ticks(self.tracker.cfg.track_window);
        for &w in a_words {
            let ta = (w >> 4) as f64;
            let t = ticks_to_secs(ta);
            let centre = ta + secs_to_ticks(self.tracker.predict(t));
            while self.b_cursor < bt.len() && ((bt[self.b_cursor] >> 4) as f64) < centre - hw - 64.0 {
                self.b_cursor += 1;
            }
            let mut best: Option<f64> = None;
            for &bw in &bt[self.b_cursor..] {
                let r = (bw >> 4) as f64 - centre;
                if r > hw {
                    break;
                }
                if r >= -hw && best.is_none_or(|x| r.abs() < x.abs()) {
                    best = Some(r);
                }
            }
            match best {
                Some(r) => {
                    self.tracker.update(t, ticks_to_secs(r))?;
                }
                None => self.tracker.check_gap(t)?,
            }
        }
        Ok(())
    }
}

/// Locks onto the start of the streams and tracks the offset through all of
/// side A.
pub fn track_stream(
    a: &TimestampStream,
    b: &TimestampStream,
    est: &OffsetEstimate,
    cfg: &SyncConfig,
) -> Result<(OffsetTimeline, OffsetEstimate), SyncError> {
    let start = a.start_tick().map_or(0.0, |t| ticks_to_secs(t as f64));
    let mut f = Follower::new(est.at_epoch(start.min(est.epoch)), *cfg);
    f.process(a.words(), b)?;
    let last = f.estimate();
    Ok((f.into_timeline(), last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkmodel::ChannelParams;
    use crate::simulator::{simulate_session, Party, SimConfig};
    use proptest::prelude::*;

    fn short_cfg() -> SyncConfig {
        SyncConfig {
            acquisition_window: 2.0,
            ..SyncConfig::default()
        }
    }

    fn night(duration: f64, seed: u64) -> SimConfig {
        SimConfig {
            duration,
            seed,
            lags_b: [0.0; 4],
            ..SimConfig::night()
        }
    }

    #[test]
    fn timeline_csv_round_trip() {
        let mut tl = OffsetTimeline::constant(&OffsetEstimate::new(1.25e-3, 0.5));
        tl.push(1.5, 1.2500001e-3, 2e-9);
        let mut buf = Vec::new();
        tl.write_csv(&mut buf).unwrap();
        let back = OffsetTimeline::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, tl);
    }

    #[test]
    fn holdover_examples() {
        assert!((holdover_budget(1e-12, 7.2e-9) - 7200.0).abs() < 1e-6);
        assert!((holdover_budget(1e-9, 7.2e-9) - 7.2).abs() < 1e-12);
        assert_eq!(holdover_budget(1e-12, 0.0), 0.0);
        assert!((SyncConfig::default().holdover() - 7500.0).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(SyncConfig::default().validate().is_ok());
        let bad = SyncConfig {
            fine_bin: 1e-5,
            ..SyncConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyncConfig {
            servo_tau: 0.0,
            ..SyncConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn correlator_matches_direct_sum() {
        let a = [1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 1.0];
        let c = Correlator::new(8).correlate(&a, &b);
        for k in 0..8 {
            let direct: f64 = (0..8).map(|n| a[n] * b[(n + k) % 8]).sum();
            assert!((c[k] - direct).abs() < 1e-9, "{k}: {} vs {direct}", c[k]);
        }
    }

    #[test]
    fn autocorrelation_gives_zero() {
        let s = simulate_session(&night(2.5, 3)).unwrap();
        let b = TimestampStream::from_words(Party::B, s.a.words().to_vec()).unwrap();
        let est = acquire_offset(&s.a, &b, &short_cfg()).unwrap();
        assert_eq!(est.offset, 0.0);
        let cross = acquire_offset(&s.a, &s.b, &short_cfg()).unwrap();
        assert!(est.confidence > 10.0 * cross.confidence, "{est:?} {cross:?}");
    }

    #[test]
    fn recovers_simulated_offset() {
        let s = simulate_session(&night(2.5, 5)).unwrap();
        let est = acquire_offset(&s.a, &s.b, &short_cfg()).unwrap();
        assert!((est.offset - s.truth.clock_offset).abs() < 2e-9, "{est:?}");
        assert!(est.confidence > 5.0);
    }

    #[test]
    fn unrelated_streams_fail() {
        let mut cfg = night(2.5, 8);
        cfg.source.rc = 0.0;
        let s = simulate_session(&cfg).unwrap();
        let err = acquire_offset(&s.a, &s.b, &short_cfg()).unwrap_err();
        assert!(matches!(err, SyncError::AcquisitionFailed { .. }), "{err:?}");
    }

    #[test]
    fn short_streams_rejected() {
        let s = simulate_session(&night(0.5, 2)).unwrap();
        assert!(matches!(
            acquire_offset(&s.a, &s.b, &short_cfg()),
            Err(SyncError::InsufficientData(_))
        ));
    }

    #[test]
    fn shifting_b_shifts_offset_exactly() {
        let s = simulate_session(&night(2.5, 6)).unwrap();
        let base = acquire_offset(&s.a, &s.b, &short_cfg()).unwrap();
        for delta in [12_345i64, 8_000_000_000, 1] {
            let shifted = acquire_offset(&s.a, &s.b.shifted(delta), &short_cfg()).unwrap();
            let d = shifted.offset - base.offset;
            assert!((d - ticks_to_secs(delta as f64)).abs() < 1e-15, "{delta}: {d}");
        }
    }

    #[test]
    fn zero_residuals_leave_estimate_unchanged() {
        let est = OffsetEstimate {
            freq_drift: 3e-10,
            ..OffsetEstimate::new(1e-3, 0.0)
        };
        let res: Vec<(f64, f64)> = (1..2000).map(|i| (i as f64 * 0.01, 0.0)).collect();
        let out = track(&est, &res, &SyncConfig::default()).unwrap();
        for t in [0.0, 10.0, 100.0] {
            assert!((out.predict(t) - est.predict(t)).abs() < 1e-15);
        }
        assert_eq!(out.used_events, res.len() as u64);
    }

    #[test]
    fn step_response_is_first_order() {
        let est = OffsetEstimate::new(0.0, 0.0);
        let cfg = SyncConfig::default();
        let dt = 1e-3;
        let at = |secs: f64| {
            let res: Vec<(f64, f64)> = (1..=(secs / dt) as usize)
                .map(|i| (i as f64 * dt, 0.5e-9))
                .collect();
            track(&est, &res, &cfg).unwrap().offset
        };
        let one_tau = at(cfg.servo_tau);
        assert!((one_tau / 0.5e-9 - (1.0 - (-1.0f64).exp())).abs() < 0.01, "{one_tau}");
        assert!((at(40.0) - 0.5e-9).abs() < 0.02e-9);
    }

    #[test]
    fn residuals_outside_window_are_ignored() {
        let est = OffsetEstimate::new(0.0, 0.0);
        let res: Vec<(f64, f64)> = (1..100).map(|i| (i as f64 * 0.01, 5e-9)).collect();
        let out = track(&est, &res, &SyncConfig::default()).unwrap();
        assert_eq!(out.offset, 0.0);
        assert_eq!(out.used_events, 0);
    }

    #[test]
    fn long_gap_loses_tracking() {
        let cfg = SyncConfig {
            freq_uncertainty: 1e-9,
            max_walk: 1e-9,
            ..SyncConfig::default()
        };
        let est = OffsetEstimate::new(0.0, 0.0);
        let res = [(0.5, 0.0), (2.0, 0.0)];
        assert!(matches!(
            track(&est, &res, &cfg),
            Err(SyncError::TrackingLost { .. })
        ));
    }

    #[test]
    fn follows_clock_skew() {
        let mut sim = night(30.0, 9);
        sim.clock_skew = 1e-9;
        let s = simulate_session(&sim).unwrap();
        let cfg = SyncConfig::default();
        let est = lock(&s.a, &s.b, &cfg).unwrap();
        assert!((est.freq_drift - 1e-9).abs() < 1e-10, "{est:?}");
        let (timeline, last) = track_stream(&s.a, &s.b, &est, &cfg).unwrap();
        assert!(last.used_events > 10_000);
        for i in 0..300 {
            let t = 0.1 * i as f64;
            let err = timeline.offset_at(t) - s.truth.offset_at(t);
            assert!(err.abs() < 1e-9, "t = {t}: {err}");
        }
    }

    #[test]
    fn daylight_acquisition() {
        let mut sim = night(2.5, 12);
        sim.channel = ChannelParams::new(1500.0 / 11_000.0, 250_000.0).unwrap();
        let s = simulate_session(&sim).unwrap();
        let est = acquire_offset(&s.a, &s.b, &short_cfg()).unwrap();
        assert!((est.offset - s.truth.clock_offset).abs() < 2e-9, "{est:?}");
    }

    #[test]
    fn timeline_interpolates() {
        let mut tl = OffsetTimeline::default();
        tl.push(0.0, 1.0, 0.0);
        tl.push(1.0, 3.0, 0.5);
        assert_eq!(tl.offset_at(0.5), 2.0);
        assert_eq!(tl.offset_at(-1.0), -1.0);
        assert_eq!(tl.offset_at(3.0), 4.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn steady_state_error_is_bounded(skew in -1e-8f64..1e-8) {
            // Loop dynamics only: the window is opened so the initial ramp
            // lag of up to skew * tau stays visible to the servo.
            let cfg = SyncConfig { track_window: 100e-9, ..SyncConfig::default() };
            let est = OffsetEstimate::new(0.0, 0.0);
            let mut tr = Tracker::new(est, cfg);
            let dt = 2e-3;
            let mut worst: f64 = 0.0;
            for i in 1..30_000 {
                let t = i as f64 * dt;
                let r = skew * t - tr.predict(t);
                tr.update(t, r).unwrap();
                if t > 10.0 * cfg.servo_tau {
                    worst = worst.max((tr.predict(t) - skew * t).abs());
                }
            }
            prop_assert!(worst <= skew.abs() * cfg.servo_tau + cfg.fine_bin, "{}", worst);
        }
    }
}
