//! Closed-form background, saturation and QBER model of the link.
//!
//! A pair source is characterised by its singles rates `r1`, `r2` and pair rate
//! `rc`; side 1 sits next to the source, side 2 receives photons over a channel
//! of transmission `T` and is the only side exposed to ambient background
//! `r_bg`. With four passively quenched detectors per side the saturation is
//! modelled by a common dead-time factor `alpha`, which scales signal and
//! accidental coincidences alike and therefore leaves the QBER untouched.
//!
//! All rates are events per second, all times are seconds.

use std::io::{self, Write};

use statrs::function::erf::erf;
use thiserror::Error;

use crate::params::{ParamError, ParamFile};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{name} must be non-negative and finite, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("{name} must lie in [0, 1], got {value}")]
    OutOfUnitRange { name: &'static str, value: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("pair rate {rc} exceeds singles rate {singles}")]
    PairRateTooHigh { rc: f64, singles: f64 },
    #[error("detected rate {rate} is at or beyond the saturation limit 1/tau_d = {limit}")]
    NotInvertible { rate: f64, limit: f64 },
    #[error("QBER limit {q_limit} is not above the intrinsic QBER {q_i}; no background is tolerable")]
    ThresholdUnreachable { q_limit: f64, q_i: f64 },
    #[error("QBER limit {0} is only approached asymptotically (q_t < 0.5 for every finite background)")]
    ThresholdAtInfinity(f64),
    #[error("sweep grid is empty")]
    EmptyGrid,
}

fn non_negative(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(ModelError::Negative { name, value })
    }
}

fn unit_range(name: &'static str, value: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::OutOfUnitRange { name, value })
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ModelError::NonPositive { name, value })
    }
}

/// Pair source seen through its (dead-time free) event rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    /// Singles rate on the source side.
    pub r1: f64,
    /// Singles rate on the receiver side, before channel loss.
    pub r2: f64,
    /// Pair coincidence rate.
    pub rc: f64,
    /// Polarization visibility in the H/V basis.
    pub v_hv: f64,
    /// Polarization visibility in the ±45° basis.
    pub v_diag: f64,
}

impl SourceParams {
    pub fn new(r1: f64, r2: f64, rc: f64, v_hv: f64, v_diag: f64) -> Result<Self, ModelError> {
        let s = SourceParams {
            r1,
            r2,
            rc,
            v_hv,
            v_diag,
        };
        s.validate()?;
        Ok(s)
    }

    /// Builds the source from rates registered by dead-time limited detectors.
    ///
    /// Each side spreads its events over four detectors, so every rate is
    /// desaturated with a per-detector dead time of `tau_d / 4`.
    pub fn from_detected(
        r1_detected: f64,
        r2_detected: f64,
        rc_detected: f64,
        v_hv: f64,
        v_diag: f64,
        tau_d: f64,
    ) -> Result<Self, ModelError> {
        let tau = tau_d / 4.0;
        Self::new(
            desaturate(r1_detected, tau)?,
            desaturate(r2_detected, tau)?,
            desaturate(rc_detected, tau)?,
            v_hv,
            v_diag,
        )
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        non_negative("r1", self.r1)?;
        non_negative("r2", self.r2)?;
        non_negative("rc", self.rc)?;
        unit_range("v_hv", self.v_hv)?;
        unit_range("v_diag", self.v_diag)?;
        let singles = self.r1.min(self.r2);
        if self.rc > singles {
            return Err(ModelError::PairRateTooHigh {
                rc: self.rc,
                singles,
            });
        }
        Ok(())
    }

    /// QBER of matched pairs caused by imperfect polarization correlations,
    /// with both bases used equally often.
    pub fn intrinsic_qber(&self) -> f64 {
        0.5 * (1.0 - (self.v_hv + self.v_diag) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    /// Transmission of the whole optical channel.
    pub transmission: f64,
    /// External background rate at the receiver.
    pub r_bg: f64,
}

impl ChannelParams {
    pub fn new(transmission: f64, r_bg: f64) -> Result<Self, ModelError> {
        let c = ChannelParams {
            transmission,
            r_bg,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        unit_range("transmission", self.transmission)?;
        non_negative("r_bg", self.r_bg)
    }

    pub fn with_background(self, r_bg: f64) -> Self {
        ChannelParams { r_bg, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    /// Detector dead time.
    pub tau_d: f64,
    /// Full width of the coincidence window.
    pub tau_c: f64,
    /// Detectors per side.
    pub n_detectors: u32,
}

impl DetectorParams {
    pub fn new(tau_d: f64, tau_c: f64) -> Result<Self, ModelError> {
        let d = DetectorParams {
            tau_d,
            tau_c,
            n_detectors: 4,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        positive("tau_d", self.tau_d)?;
        positive("tau_c", self.tau_c)
    }

    /// Dead time seen by the rate of a whole side when events spread evenly
    /// over all detectors.
    pub fn side_dead_time(&self) -> f64 {
        self.tau_d / f64::from(self.n_detectors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBreakdown {
    /// Sifted signal rate without detector saturation.
    pub r_sig: f64,
    /// Accidental coincidence rate with matching bases.
    pub r_a: f64,
    /// Dead-time correction factor of the receiver side.
    pub alpha: f64,
    /// Sifted signal rate including saturation.
    pub r_sig_prime: f64,
    /// Total rate registered by the receiver detectors.
    pub r_total_detected: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QberBreakdown {
    pub q_i: f64,
    pub q_t: f64,
    /// Excess QBER `q_t - q_i`.
    pub delta_q: f64,
    /// Small-background approximation of the excess QBER.
    pub delta_q_approx: f64,
}

/// Rate registered by a detector with non-paralyzable dead time `tau_d` when
/// photoevents arrive at rate `r`.
pub fn saturate(r: f64, tau_d: f64) -> Result<f64, ModelError> {
    non_negative("rate", r)?;
    non_negative("tau_d", tau_d)?;
    Ok(r / (1.0 + r * tau_d))
}

/// Inverse of [`saturate`]: the photoevent rate that produces `r_detected`.
pub fn desaturate(r_detected: f64, tau_d: f64) -> Result<f64, ModelError> {
    non_negative("rate", r_detected)?;
    non_negative("tau_d", tau_d)?;
    let load = r_detected * tau_d;
    if load >= 1.0 {
        return Err(ModelError::NotInvertible {
            rate: r_detected,
            limit: 1.0 / tau_d,
        });
    }
    Ok(r_detected / (1.0 - load))
}

/// Signal, accidental and saturation rates for one operating point.
pub fn rate_breakdown(
    src: &SourceParams,
    ch: &ChannelParams,
    det: &DetectorParams,
) -> Result<RateBreakdown, ModelError> {
    src.validate()?;
    ch.validate()?;
    det.validate()?;
    let t = ch.transmission;
    let r_sig = 0.5 * src.rc * t;
    let unpaired_source = src.r1 - t * src.rc;
    let unpaired_receiver = ch.r_bg + t * (src.r2 - src.rc);
    let r_a = 0.5 * unpaired_source * unpaired_receiver * det.tau_c;
    let receiver_rate = ch.r_bg + src.r2 * t;
    let alpha = 1.0 / (1.0 + receiver_rate * det.side_dead_time());
    Ok(RateBreakdown {
        r_sig,
        r_a,
        alpha,
        r_sig_prime: alpha * r_sig,
        r_total_detected: alpha * receiver_rate,
    })
}

/// Weighted QBER of signal (error `q_i`) and accidentals (error ½).
pub(crate) fn mix_qber(q_i: f64, signal: f64, accidental: f64) -> f64 {
    let total = signal + accidental;
    if total <= 0.0 {
        return 0.5;
    }
    ((q_i * signal + 0.5 * accidental) / total).min(0.5)
}

/// Total QBER for an operating point. `q_i_override` replaces the
/// visibility-derived intrinsic QBER when given.
pub fn qber_total(
    src: &SourceParams,
    ch: &ChannelParams,
    det: &DetectorParams,
    q_i_override: Option<f64>,
) -> Result<QberBreakdown, ModelError> {
    let rates = rate_breakdown(src, ch, det)?;
    let q_i = match q_i_override {
        Some(q) => {
            if !(0.0..=0.5).contains(&q) {
                return Err(ModelError::OutOfUnitRange {
                    name: "q_i",
                    value: q,
                });
            }
            q
        }
        None => src.intrinsic_qber(),
    };
    let q_t = mix_qber(q_i, rates.r_sig, rates.r_a).max(q_i);
    let pair_ratio = if src.r1 > 0.0 { src.rc / src.r1 } else { 0.0 };
    let approx_den = 2.0 * ch.transmission * pair_ratio;
    let delta_q_approx = if approx_den > 0.0 {
        ch.r_bg * det.tau_c / approx_den
    } else if ch.r_bg > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(QberBreakdown {
        q_i,
        q_t,
        delta_q: q_t - q_i,
        delta_q_approx,
    })
}

/// A complete link description with the background left free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub source: SourceParams,
    pub channel: ChannelParams,
    pub detector: DetectorParams,
    pub q_i_override: Option<f64>,
}

impl LinkModel {
    /// Operating point of the model examples: `r1 = 78 kcps`, `r2 = 71 kcps`,
    /// `rc = 11 kcps`, `T = 0.15`, `tau_d = 1 µs`, `tau_c = 2 ns`, `q_i = 4.3 %`.
    pub fn typical() -> Self {
        LinkModel {
            source: SourceParams {
                r1: 78_000.0,
                r2: 71_000.0,
                rc: 11_000.0,
                v_hv: 0.975,
                v_diag: 0.921,
            },
            channel: ChannelParams {
                transmission: 0.15,
                r_bg: 0.0,
            },
            detector: DetectorParams {
                tau_d: 1e-6,
                tau_c: 2e-9,
                n_detectors: 4,
            },
            q_i_override: Some(0.043),
        }
    }

    /// Reads a link from a parameter file.
    ///
    /// Rates are taken as detector readings and desaturated unless the file
    /// says `rates = intrinsic`.
    pub fn from_params(p: &ParamFile) -> Result<Self, ParamError> {
        let d = LinkModel::typical();
        let tau_d = p.get_or("tau_d", d.detector.tau_d)?;
        let tau_c = p.get_or("tau_c", d.detector.tau_c)?;
        let r1 = p.get_or("r1", d.source.r1)?;
        let r2 = p.get_or("r2", d.source.r2)?;
        let rc = p.get_or("rc", d.source.rc)?;
        let v_hv = p.get_or("v_hv", d.source.v_hv)?;
        let v_diag = p.get_or("v_diag", d.source.v_diag)?;
        let invalid = |key: &str, e: ModelError| ParamError::Invalid {
            key: key.to_string(),
            reason: e.to_string(),
        };
        let source = match p.raw("rates").unwrap_or("detected") {
            "detected" => SourceParams::from_detected(r1, r2, rc, v_hv, v_diag, tau_d),
            "intrinsic" => SourceParams::new(r1, r2, rc, v_hv, v_diag),
            other => {
                return Err(ParamError::Value {
                    key: "rates".into(),
                    value: other.into(),
                })
            }
        }
        .map_err(|e| invalid("rates", e))?;
        let channel = ChannelParams::new(
            p.get_or("transmission", d.channel.transmission)?,
            p.get_or("r_bg", 0.0)?,
        )
        .map_err(|e| invalid("transmission", e))?;
        let detector = DetectorParams::new(tau_d, tau_c).map_err(|e| invalid("tau_d", e))?;
        Ok(LinkModel {
            source,
            channel,
            detector,
            q_i_override: p.get("q_i")?,
        })
    }

    pub fn at_background(&self, r_bg: f64) -> ChannelParams {
        self.channel.with_background(r_bg)
    }

    pub fn rates(&self, r_bg: f64) -> Result<RateBreakdown, ModelError> {
        rate_breakdown(&self.source, &self.at_background(r_bg), &self.detector)
    }

    pub fn qber(&self, r_bg: f64) -> Result<QberBreakdown, ModelError> {
        qber_total(
            &self.source,
            &self.at_background(r_bg),
            &self.detector,
            self.q_i_override,
        )
    }

    pub fn background_threshold(&self, q_limit: f64) -> Result<f64, ModelError> {
        background_threshold(
            &self.source,
            &self.channel,
            &self.detector,
            self.q_i_override,
            q_limit,
        )
    }

    pub fn sweep(&self, r_bg_grid: &[f64]) -> Result<Vec<SweepRow>, ModelError> {
        sweep(
            &self.source,
            &self.channel,
            &self.detector,
            self.q_i_override,
            r_bg_grid,
        )
    }
}

/// Background rate at which the total QBER reaches `q_limit`.
///
/// The QBER grows monotonically with the background, so the root is bracketed
/// by doubling from 1 cps and then bisected. The background already present in
/// `ch` is ignored. Returns 0 when the dark-count floor alone reaches the limit.
pub fn background_threshold(
    src: &SourceParams,
    ch: &ChannelParams,
    det: &DetectorParams,
    q_i_override: Option<f64>,
    q_limit: f64,
) -> Result<f64, ModelError> {
    let q_at = |r_bg: f64| -> Result<f64, ModelError> {
        Ok(qber_total(src, &ch.with_background(r_bg), det, q_i_override)?.q_t)
    };
    let base = qber_total(src, &ch.with_background(0.0), det, q_i_override)?;
    if q_limit <= base.q_i {
        return Err(ModelError::ThresholdUnreachable {
            q_limit,
            q_i: base.q_i,
        });
    }
    if q_limit >= 0.5 {
        return Err(ModelError::ThresholdAtInfinity(q_limit));
    }
    if base.q_t >= q_limit {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while q_at(hi)? < q_limit {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(ModelError::ThresholdAtInfinity(q_limit));
        }
    }
    while hi - lo > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        if q_at(mid)? < q_limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One line of a background sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub r_bg: f64,
    pub detected_total: f64,
    pub sifted_rate: f64,
    pub qber: f64,
}

pub fn sweep(
    src: &SourceParams,
    ch: &ChannelParams,
    det: &DetectorParams,
    q_i_override: Option<f64>,
    r_bg_grid: &[f64],
) -> Result<Vec<SweepRow>, ModelError> {
    if r_bg_grid.is_empty() {
        return Err(ModelError::EmptyGrid);
    }
    r_bg_grid
        .iter()
        .map(|&r_bg| {
            let c = ch.with_background(r_bg);
            let rates = rate_breakdown(src, &c, det)?;
            let q = qber_total(src, &c, det, q_i_override)?;
            Ok(SweepRow {
                r_bg,
                detected_total: rates.r_total_detected,
                sifted_rate: rates.r_sig_prime,
                qber: q.q_t,
            })
        })
        .collect()
}

/// Background grid with `points` entries between `min` and `max`, linear or
/// logarithmic.
pub fn background_grid(min: f64, max: f64, points: usize, log: bool) -> Result<Vec<f64>, ModelError> {
    if points == 0 {
        return Err(ModelError::EmptyGrid);
    }
    non_negative("rbg-min", min)?;
    non_negative("rbg-max", max)?;
    if points == 1 {
        return Ok(vec![min]);
    }
    if log {
        positive("rbg-min", min)?;
    }
    let n = (points - 1) as f64;
    Ok((0..points)
        .map(|i| {
            let f = i as f64 / n;
            if log {
                (min.ln() + f * (max.ln() - min.ln())).exp()
            } else {
                min + f * (max - min)
            }
        })
        .collect())
}

/// Writes the sweep as `r_bg,detected_total,sifted_rate,qber` CSV.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> io::Result<()> {
    writeln!(out, "r_bg,detected_total,sifted_rate,qber")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.r_bg, r.detected_total, r.sifted_rate, r.qber
        )?;
    }
    Ok(())
}

/// Fraction of a Gaussian residual distribution (mean `mean`, width `sigma`)
/// that falls inside a coincidence window of full width `tau_c`.
pub fn window_capture_fraction(sigma: f64, mean: f64, tau_c: f64) -> f64 {
    let half = tau_c / 2.0;
    if sigma <= 0.0 {
        return if mean.abs() <= half { 1.0 } else { 0.0 };
    }
    let cdf = |x: f64| 0.5 * (1.0 + erf(x / (sigma * std::f64::consts::SQRT_2)));
    cdf(half - mean) - cdf(-half - mean)
}

/// Properties of the timestamping chain that the pure link model leaves out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainParams {
    /// Dead time of the timestamp unit, shared by all detectors of a side.
    pub unit_dead_time: f64,
    /// Standard deviation of the pair residual `t_B - t_A`.
    pub residual_sigma: f64,
    /// Mean of the pair residual relative to the window center.
    pub residual_mean: f64,
}

/// Expected output of the full detection chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainPrediction {
    /// Basis-matched coincidences per second, true pairs plus accidentals.
    pub sifted_rate: f64,
    pub signal_rate: f64,
    pub accidental_rate: f64,
    pub qber: f64,
    pub window_capture: f64,
    /// Survival probability of an event on the source side.
    pub source_side_factor: f64,
    /// Survival probability of an event on the receiver side.
    pub receiver_side_factor: f64,
}

/// Extends [`rate_breakdown`] to what a timestamp pipeline actually counts:
/// source-side detector saturation, the timestamp unit dead time on both sides,
/// and the part of the pair residual distribution clipped by the window.
///
/// All of these scale signal and accidentals equally except the window clip,
/// which only removes true pairs.
pub fn chain_prediction(
    src: &SourceParams,
    ch: &ChannelParams,
    det: &DetectorParams,
    q_i_override: Option<f64>,
    chain: &ChainParams,
) -> Result<ChainPrediction, ModelError> {
    let rates = rate_breakdown(src, ch, det)?;
    let q = qber_total(src, ch, det, q_i_override)?;
    let others = (f64::from(det.n_detectors) - 1.0) / f64::from(det.n_detectors);

    let alpha_a = 1.0 / (1.0 + src.r1 * det.side_dead_time());
    let unit_a = 1.0 / (1.0 + others * alpha_a * src.r1 * chain.unit_dead_time);
    let unit_b = 1.0 / (1.0 + others * rates.r_total_detected * chain.unit_dead_time);
    let source_side_factor = alpha_a * unit_a;
    let receiver_side_factor = rates.alpha * unit_b;

    let capture = window_capture_fraction(chain.residual_sigma, chain.residual_mean, det.tau_c);
    let scale = source_side_factor * receiver_side_factor;
    let signal_rate = rates.r_sig * capture * scale;
    let accidental_rate = rates.r_a * scale;
    Ok(ChainPrediction {
        sifted_rate: signal_rate + accidental_rate,
        signal_rate,
        accidental_rate,
        qber: mix_qber(q.q_i, signal_rate, accidental_rate),
        window_capture: capture,
        source_side_factor,
        receiver_side_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn typical() -> LinkModel {
        LinkModel::typical()
    }

    #[test]
    fn saturate_examples() {
        assert_eq!(saturate(0.0, 1e-6).unwrap(), 0.0);
        assert_eq!(saturate(1e6, 1e-6).unwrap(), 5e5);
        // alpha at the peak background of the model plot, by hand:
        // 1 / (1 + 460650 * 0.25e-6) = 0.896730...
        let r = 450_000.0 + 10_650.0;
        let alpha = saturate(r, 1e-6 / 4.0).unwrap() / r;
        assert!((alpha - 0.896_730).abs() < 1e-6, "{alpha}");
        assert!(saturate(-1.0, 1e-6).is_err());
        assert!(saturate(1.0, -1e-6).is_err());
    }

    #[test]
    fn desaturate_examples() {
        assert_eq!(desaturate(0.0, 1e-6).unwrap(), 0.0);
        assert!((desaturate(5e5, 1e-6).unwrap() - 1e6).abs() < 1e-6);
        // Oracle: fixed-point iteration r <- r' (1 + r tau).
        let (target, tau) = (78_000.0, 1e-6 / 4.0);
        let mut r = target;
        for _ in 0..200 {
            r = target * (1.0 + r * tau);
        }
        let inv = desaturate(target, tau).unwrap();
        assert!((inv - r).abs() / r < 1e-12);
        assert!((inv - 79_554.0).abs() / 79_554.0 < 1e-4, "{inv}");
        assert!(matches!(
            desaturate(1e6, 1e-6),
            Err(ModelError::NotInvertible { .. })
        ));
    }

    #[test]
    fn rate_breakdown_examples() {
        let m = typical();
        let r = m.rates(0.0).unwrap();
        assert!((r.r_sig - 825.0).abs() < 1e-9);
        // 0.5 * (78000 - 1650) * (0.15 * 60000) * 2e-9
        assert!((r.r_a - 0.687_15).abs() < 1e-9, "{}", r.r_a);
        assert!((r.r_sig_prime - r.alpha * r.r_sig).abs() < 1e-12);

        let mut opaque = m;
        opaque.channel.transmission = 0.0;
        assert_eq!(opaque.rates(0.0).unwrap().r_sig, 0.0);

        let bright = m.rates(450_000.0).unwrap();
        assert!((bright.alpha - 0.8967).abs() < 5e-4);
        assert!((1.0 - bright.r_sig_prime / bright.r_sig - 0.103).abs() < 2e-3);
    }

    #[test]
    fn qber_examples() {
        let m = typical();
        let dark = m.qber(0.0).unwrap();
        assert!((dark.q_t - 0.0434).abs() < 5e-5, "{}", dark.q_t);
        assert!((dark.delta_q - (dark.q_t - dark.q_i)).abs() < 1e-15);

        let bright = m.qber(450_000.0).unwrap();
        assert!((bright.q_t - 0.0616).abs() < 5e-4, "{}", bright.q_t);
        assert!((bright.q_t - 0.065).abs() < 0.005);

        // r1 = T rc with rc <= r1 forces T = 1: every singles event is a pair.
        let src = SourceParams::new(1650.0, 1650.0, 1650.0, 1.0, 1.0).unwrap();
        let ch = ChannelParams::new(1.0, 0.0).unwrap();
        let q = qber_total(&src, &ch, &m.detector, None).unwrap();
        assert_eq!(q.q_i, 0.0);
        assert_eq!(q.q_t, 0.0);

        let mut opaque = m;
        opaque.channel.transmission = 0.0;
        assert_eq!(opaque.qber(1000.0).unwrap().q_t, 0.5);
    }

    #[test]
    fn threshold_examples() {
        let m = typical();
        let thr = m.background_threshold(0.11).unwrap();
        // Closed form: A (r_bg + T(r2 - rc)) tau_c (1/2 - q) = (q - q_i) rc T
        let a = 78_000.0 - 0.15 * 11_000.0;
        let x = (0.11 - 0.043) * 11_000.0 * 0.15 / ((0.5 - 0.11) * 2e-9);
        let closed = x / a - 0.15 * 60_000.0;
        assert!((thr - closed).abs() / closed < 1e-9, "{thr} vs {closed}");
        assert!((thr - 1.85e6).abs() / 1.85e6 < 0.01);
        assert!((thr - 1.8e6).abs() / 1.8e6 < 0.10);
        assert!((m.qber(thr).unwrap().q_t - 0.11).abs() < 1e-6);

        assert!(matches!(
            m.background_threshold(0.043),
            Err(ModelError::ThresholdUnreachable { .. })
        ));
        assert!(matches!(
            m.background_threshold(0.5),
            Err(ModelError::ThresholdAtInfinity(_))
        ));
    }

    #[test]
    fn sweep_examples() {
        let m = typical();
        let single = m.sweep(&[0.0]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].qber, m.qber(0.0).unwrap().q_t);
        assert_eq!(single[0].sifted_rate, m.rates(0.0).unwrap().r_sig_prime);

        let rows = m.sweep(&[0.0, 1e5, 1e6]).unwrap();
        assert!(rows.windows(2).all(|w| w[1].qber > w[0].qber));

        let grid = background_grid(1e3, 1e7, 41, true).unwrap();
        let rows = m.sweep(&grid).unwrap();
        let thr = m.background_threshold(0.11).unwrap();
        let crossing = rows
            .windows(2)
            .find(|w| w[0].qber < 0.11 && w[1].qber >= 0.11)
            .expect("q_t crosses 11 %");
        assert!(crossing[0].r_bg < thr && thr <= crossing[1].r_bg);
        assert!(matches!(m.sweep(&[]), Err(ModelError::EmptyGrid)));
    }

    #[test]
    fn sweep_csv_format() {
        let rows = typical().sweep(&[0.0, 1e6]).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], "r_bg,detected_total,sifted_rate,qber");
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("1000000,"));
        assert!(!text.contains('\r'));
        assert!(
            lines[1..].iter().all(|l| !l.contains('e')),
            "decimal notation only: {text}"
        );
    }

    #[test]
    fn params_file_round_trip() {
        let p = ParamFile::parse(
            "rates = intrinsic\nr1=78000\nr2=71000\nrc=11000\ntransmission=0.15\nq_i=0.043\n",
        )
        .unwrap();
        assert_eq!(LinkModel::from_params(&p).unwrap(), LinkModel::typical());

        let detected = ParamFile::parse("q_i = 0.043").unwrap();
        let m = LinkModel::from_params(&detected).unwrap();
        assert!((m.source.r1 - desaturate(78_000.0, 0.25e-6).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn capture_fraction_limits() {
        assert_eq!(window_capture_fraction(0.0, 0.0, 2e-9), 1.0);
        assert_eq!(window_capture_fraction(0.0, 2e-9, 2e-9), 0.0);
        // ±1 sigma
        let f = window_capture_fraction(1e-9, 0.0, 2e-9);
        assert!((f - 0.682_689_5).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn saturation_is_monotone_concave_and_bounded(
            r in 0.0f64..1e8, dr in 1.0f64..1e6, tau in 1e-9f64..1e-5,
        ) {
            let a = saturate(r, tau).unwrap();
            let b = saturate(r + dr, tau).unwrap();
            let c = saturate(r + 2.0 * dr, tau).unwrap();
            prop_assert!(b > a);
            prop_assert!(b - a >= c - b - 1e-9 * c);
            prop_assert!(a <= r.min(1.0 / tau) * (1.0 + 1e-15));
        }

        #[test]
        fn desaturate_inverts_saturate(r in 0.0f64..1e8, tau in 1e-9f64..1e-5) {
            let back = desaturate(saturate(r, tau).unwrap(), tau).unwrap();
            prop_assert!((back - r).abs() <= 1e-9 * r.max(1.0));
        }

        #[test]
        fn qber_monotone_in_background(a in 0.0f64..1e7, b in 0.0f64..1e7) {
            let m = typical();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(m.qber(lo).unwrap().q_t <= m.qber(hi).unwrap().q_t);
            let q = m.qber(hi).unwrap();
            prop_assert!(q.q_i <= q.q_t && q.q_t <= 0.5);
        }

        #[test]
        fn alpha_cancels_in_qber(r_bg in 0.0f64..1e7) {
            let m = typical();
            let rates = m.rates(r_bg).unwrap();
            let q = m.qber(r_bg).unwrap();
            let scaled = mix_qber(q.q_i, rates.alpha * rates.r_sig, rates.alpha * rates.r_a);
            prop_assert!((scaled - q.q_t).abs() < 1e-12);
            prop_assert!(rates.alpha > 0.0 && rates.alpha <= 1.0);
        }

        #[test]
        fn excess_qber_approximation(r_bg in 5e4f64..=5e5) {
            let q = typical().qber(r_bg).unwrap();
            prop_assert!(q.delta_q_approx >= 0.0);
            prop_assert!((q.delta_q_approx - q.delta_q).abs() <= 0.15 * q.delta_q);
        }

        #[test]
        fn threshold_round_trips(q_limit in 0.05f64..0.45) {
            let m = typical();
            let thr = m.background_threshold(q_limit).unwrap();
            prop_assert!((m.qber(thr).unwrap().q_t - q_limit).abs() < 1e-6);
        }
    }
}
