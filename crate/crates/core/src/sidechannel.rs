//! Leakage from hardware imperfections: detector correlation matrix, bit and
//! basis asymmetries, and detector timing distinguishability.
//!
//! Timing leakage of a basis is the mutual information between the bit value
//! and the binned pair residual when both bit values are equally likely,
//! i.e. the Jensen-Shannon divergence of the two residual histograms. It is
//! one reading of a "timing leakage" figure, not a bound on Eve's knowledge.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::postproc::binary_entropy;
use crate::sifter::{key_bit, CoincidencePair};
use crate::simulator::{Party, TimestampStream, DETECTOR_NAMES, H, M45, P45, V};

/// Pairs needed per combination before a timing histogram is trusted.
pub const MIN_TIMING_PAIRS: u64 = 1000;

/// Reference correlation matrix of a field measurement: rows are the source
/// side detector, columns the receiver side, in the order H, +45, V, -45.
pub const TABLE1: [[u64; 4]; 4] = [
    [599, 22_791, 34_032, 18_409],
    [18_647, 2_894, 17_512, 44_841],
    [29_062, 16_422, 2_125, 25_246],
    [14_635, 40_558, 22_280, 1_498],
];

const CSV_NAMES: [&str; 4] = ["H", "P45", "V", "M45"];

#[derive(Debug, Error)]
pub enum SideChannelError {
    #[error("no correctly anticorrelated {0} events")]
    EmptyBasis(&'static str),
    #[error("matrix file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorrelationMatrix {
    /// `counts[a][b]` for side-A detector `a` and side-B detector `b`.
    pub counts: [[u64; 4]; 4],
}

impl CorrelationMatrix {
    pub fn table1() -> Self {
        CorrelationMatrix { counts: TABLE1 }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> [u64; 4] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn col_sums(&self) -> [u64; 4] {
        let mut s = [0; 4];
        for r in &self.counts {
            for (c, v) in r.iter().enumerate() {
                s[c] += v;
            }
        }
        s
    }

    pub fn scaled(&self, factor: u64) -> Self {
        CorrelationMatrix {
            counts: self.counts.map(|r| r.map(|v| v * factor)),
        }
    }

    pub fn parse_csv(text: &str) -> Result<Self, SideChannelError> {
        let mut m = CorrelationMatrix::default();
        let mut seen = [false; 4];
        let mut header = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |reason: String| SideChannelError::Parse { line: i + 1, reason };
            let Some(cols) = &header else {
                let cols: Vec<usize> = fields[1..]
                    .iter()
                    .map(|f| detector_index(f).ok_or_else(|| bad(format!("unknown detector {f}"))))
                    .collect::<Result<_, _>>()?;
                if cols.len() != 4 {
                    return Err(bad("expected four detector columns".into()));
                }
                header = Some(cols);
                continue;
            };
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            }
            let row = detector_index(fields[0]).ok_or_else(|| bad(format!("unknown detector {}", fields[0])))?;
            if seen[row] {
                return Err(bad(format!("duplicate row {}", fields[0])));
            }
            seen[row] = true;
            for (f, &c) in fields[1..].iter().zip(cols) {
                m.counts[row][c] = f.parse().map_err(|_| bad(format!("bad count {f}")))?;
            }
        }
        if !seen.iter().all(|s| *s) {
            return Err(SideChannelError::Parse {
                line: 0,
                reason: "matrix needs all four rows".into(),
            });
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SideChannelError> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "detector,{}", CSV_NAMES.join(","))?;
        for (name, row) in CSV_NAMES.iter().zip(&self.counts) {
            writeln!(out, "{name},{},{},{},{}", row[0], row[1], row[2], row[3])?;
        }
        Ok(())
    }
}

fn detector_index(name: &str) -> Option<usize> {
    CSV_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
        .or_else(|| DETECTOR_NAMES.iter().position(|n| *n == name))
}

pub fn build_matrix(pairs: &[CoincidencePair]) -> CorrelationMatrix {
    let mut m = CorrelationMatrix::default();
    for p in pairs {
        m.counts[p.detector_a as usize][p.detector_b as usize] += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LeakageReport {
    /// Fraction of (H, V) among correctly anticorrelated HV events.
    pub hv_bit_ratio: f64,
    /// Fraction of (+45, -45) among correctly anticorrelated diagonal events.
    pub diag_bit_ratio: f64,
    /// Fraction of HV among correctly anticorrelated events.
    pub basis_ratio: f64,
    pub hv_entropy_leak: f64,
    pub diag_entropy_leak: f64,
    pub timing_leak_hv: Option<f64>,
    pub timing_leak_diag: Option<f64>,
}

impl fmt::Display for LeakageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |x: f64| 100.0 * x;
        writeln!(f, "HV bit ratio        {:.1}:{:.1} %", pct(self.hv_bit_ratio), pct(1.0 - self.hv_bit_ratio))?;
        writeln!(f, "+-45 bit ratio      {:.1}:{:.1} %", pct(self.diag_bit_ratio), pct(1.0 - self.diag_bit_ratio))?;
        writeln!(f, "HV : +-45 ratio     {:.1}:{:.1} %", pct(self.basis_ratio), pct(1.0 - self.basis_ratio))?;
        writeln!(f, "HV entropy leak     {:.2} %", pct(self.hv_entropy_leak))?;
        write!(f, "+-45 entropy leak   {:.2} %", pct(self.diag_entropy_leak))?;
        if let Some(t) = self.timing_leak_hv {
            write!(f, "\nHV timing leak      {:.2} % (Jensen-Shannon estimate)", pct(t))?;
        }
        if let Some(t) = self.timing_leak_diag {
            write!(f, "\n+-45 timing leak    {:.2} % (Jensen-Shannon estimate)", pct(t))?;
        }
        Ok(())
    }
}

/// Bit and basis asymmetry of the correctly anticorrelated entries.
pub fn asymmetry_stats(m: &CorrelationMatrix) -> Result<LeakageReport, SideChannelError> {
    let c = &m.counts;
    let (hv0, hv1) = (c[H as usize][V as usize], c[V as usize][H as usize]);
    let (d0, d1) = (c[P45 as usize][M45 as usize], c[M45 as usize][P45 as usize]);
    if hv0 + hv1 == 0 {
        return Err(SideChannelError::EmptyBasis("HV"));
    }
    if d0 + d1 == 0 {
        return Err(SideChannelError::EmptyBasis("+-45"));
    }
    let hv_bit_ratio = hv0 as f64 / (hv0 + hv1) as f64;
    let diag_bit_ratio = d0 as f64 / (d0 + d1) as f64;
    Ok(LeakageReport {
        hv_bit_ratio,
        diag_bit_ratio,
        basis_ratio: (hv0 + hv1) as f64 / (hv0 + hv1 + d0 + d1) as f64,
        hv_entropy_leak: 1.0 - binary_entropy(hv_bit_ratio),
        diag_entropy_leak: 1.0 - binary_entropy(diag_bit_ratio),
        timing_leak_hv: None,
        timing_leak_diag: None,
    })
}

/// The four key-generating detector combinations `(a, b)`.
pub const KEY_COMBINATIONS: [(u8, u8); 4] = [(H, V), (V, H), (P45, M45), (M45, P45)];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualHistogram {
    pub combination: (u8, u8),
    pub bin_width: f64,
    /// Bin index `floor(residual / bin_width)` to count.
    pub bins: BTreeMap<i64, u64>,
    pub count: u64,
}

impl ResidualHistogram {
    pub fn label(&self) -> String {
        format!(
            "{}/{}",
            DETECTOR_NAMES[self.combination.0 as usize], DETECTOR_NAMES[self.combination.1 as usize]
        )
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let s: f64 = self.bins.iter().map(|(b, c)| (*b as f64 + 0.5) * *c as f64).sum();
        s / self.count as f64 * self.bin_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub histograms: [ResidualHistogram; 4],
    pub leak_hv: f64,
    pub leak_diag: f64,
    /// Combinations with fewer than [`MIN_TIMING_PAIRS`] events.
    pub insufficient: Vec<String>,
}

/// Jensen-Shannon divergence (bits) of two histograms, each normalized.
pub fn js_divergence(p: &BTreeMap<i64, u64>, q: &BTreeMap<i64, u64>) -> f64 {
    let np: u64 = p.values().sum();
    let nq: u64 = q.values().sum();
    if np == 0 || nq == 0 {
        return 0.0;
    }
    let mut keys: Vec<i64> = p.keys().chain(q.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let term = |x: f64, m: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
    let mut js = 0.0;
    for k in keys {
        let x = *p.get(&k).unwrap_or(&0) as f64 / np as f64;
        let y = *q.get(&k).unwrap_or(&0) as f64 / nq as f64;
        let m = (x + y) / 2.0;
        js += 0.5 * term(x, m) + 0.5 * term(y, m);
    }
    js.clamp(0.0, 1.0)
}

pub fn timing_histograms(pairs: &[CoincidencePair], bin_width: f64) -> TimingReport {
    let mut histograms = KEY_COMBINATIONS.map(|combination| ResidualHistogram {
        combination,
        bin_width,
        ..ResidualHistogram::default()
    });
    for p in pairs {
        if let Some(i) = KEY_COMBINATIONS
            .iter()
            .position(|c| *c == (p.detector_a, p.detector_b))
        {
            let h = &mut histograms[i];
            *h.bins.entry((p.residual / bin_width).floor() as i64).or_default() += 1;
            h.count += 1;
        }
    }
    let insufficient = histograms
        .iter()
        .filter(|h| h.count < MIN_TIMING_PAIRS)
        .map(ResidualHistogram::label)
        .collect::<Vec<_>>();
    for label in &insufficient {
        log::warn!("timing histogram {label} has fewer than {MIN_TIMING_PAIRS} pairs");
    }
    TimingReport {
        leak_hv: js_divergence(&histograms[0].bins, &histograms[1].bins),
        leak_diag: js_divergence(&histograms[2].bins, &histograms[3].bins),
        histograms,
        insufficient,
    }
}

/// Matrix statistics plus timing leakage from the same pairs.
pub fn analyze_pairs(pairs: &[CoincidencePair], bin_width: f64) -> Result<(LeakageReport, TimingReport), SideChannelError> {
    let mut report = asymmetry_stats(&build_matrix(pairs))?;
    let timing = timing_histograms(pairs, bin_width);
    report.timing_leak_hv = Some(timing.leak_hv);
    report.timing_leak_diag = Some(timing.leak_diag);
    Ok((report, timing))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStat {
    pub start: f64,
    pub end: f64,
    pub sifted: u64,
    /// Fraction of sifted key bits equal to 0.
    pub zero_fraction: f64,
    pub alarm: bool,
}

/// Bit asymmetry over tumbling windows of side-A time. Windows deviating from
/// balance by more than `alarm_threshold` (if given) are flagged.
pub fn windowed_asymmetry(
    pairs: &[CoincidencePair],
    a: &TimestampStream,
    window: f64,
    alarm_threshold: Option<f64>,
) -> Vec<WindowStat> {
    let mut acc: BTreeMap<i64, (u64, u64)> = BTreeMap::new();
    for p in pairs.iter().filter(|p| p.same_basis()) {
        let t = a.get(p.index_a).seconds();
        let e = acc.entry((t / window).floor() as i64).or_default();
        e.0 += 1;
        if !key_bit(Party::B, p.detector_b) {
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(w, (n, zeros))| {
            let zero_fraction = zeros as f64 / n as f64;
            WindowStat {
                start: w as f64 * window,
                end: (w + 1) as f64 * window,
                sifted: n,
                zero_fraction,
                alarm: alarm_threshold.is_some_and(|th| (zero_fraction - 0.5).abs() > th),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkmodel::ChannelParams;
    use crate::sifter::find_coincidences;
    use crate::simulator::{simulate_session, BackgroundCycle, SimConfig};
    use crate::timesync::{OffsetEstimate, OffsetTimeline};
    use proptest::prelude::*;

    fn pair(a: u8, b: u8, residual: f64) -> CoincidencePair {
        CoincidencePair {
            index_a: 0,
            index_b: 0,
            detector_a: a,
            detector_b: b,
            residual,
        }
    }

    #[test]
    fn matrix_accumulation() {
        assert_eq!(build_matrix(&[]), CorrelationMatrix::default());
        let m = build_matrix(&[pair(H, V, 0.0)]);
        assert_eq!(m.counts[0][2], 1);
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn bundled_file_matches_constant() {
        let m = CorrelationMatrix::parse_csv(include_str!("../data/table1.csv")).unwrap();
        assert_eq!(m, CorrelationMatrix::table1());
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(CorrelationMatrix::parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), m);
        assert!(CorrelationMatrix::parse_csv("detector,H,P45,V,M45\nH,1,2,3,4\n").is_err());
    }

    #[test]
    fn table1_ratios() {
        let r = asymmetry_stats(&CorrelationMatrix::table1()).unwrap();
        // Oracle: direct arithmetic on the four anticorrelated cells.
        let hv = 34_032.0 / (34_032.0 + 29_062.0);
        let dg = 44_841.0 / (44_841.0 + 40_558.0);
        assert!((r.hv_bit_ratio - hv).abs() < 1e-12);
        assert!((r.diag_bit_ratio - dg).abs() < 1e-12);
        assert!((r.hv_bit_ratio - 0.539).abs() < 0.001);
        assert!((r.diag_bit_ratio - 0.525).abs() < 0.001);
        assert!((r.basis_ratio - 0.425).abs() < 0.001);
        assert!((r.hv_entropy_leak - 0.0045).abs() < 0.0002);
        assert!((r.diag_entropy_leak - 0.0018).abs() < 0.0002);
        // The anticorrelated events are exactly the matched ensemble size.
        assert_eq!(34_032 + 29_062 + 44_841 + 40_558, 148_493);
    }

    #[test]
    fn symmetric_matrix_has_no_leak() {
        let m = CorrelationMatrix {
            counts: [[1, 5, 100, 5], [5, 1, 5, 100], [100, 5, 1, 5], [5, 100, 5, 1]],
        };
        let r = asymmetry_stats(&m).unwrap();
        assert_eq!((r.hv_bit_ratio, r.diag_bit_ratio, r.basis_ratio), (0.5, 0.5, 0.5));
        assert_eq!(r.hv_entropy_leak, 0.0);
        assert!(asymmetry_stats(&CorrelationMatrix::default()).is_err());
    }

    #[test]
    fn timing_leak_limits() {
        let same: Vec<_> = (0..2000)
            .flat_map(|i| {
                let r = (i % 16) as f64 * 125e-12;
                [pair(H, V, r), pair(V, H, r)]
            })
            .collect();
        assert_eq!(timing_histograms(&same, 125e-12).leak_hv, 0.0);
        let disjoint: Vec<_> = (0..2000)
            .flat_map(|i| [pair(H, V, (i % 8) as f64 * 125e-12), pair(V, H, -1e-9 - (i % 8) as f64 * 125e-12)])
            .collect();
        let t = timing_histograms(&disjoint, 125e-12);
        assert!((t.leak_hv - 1.0).abs() < 1e-12);
        assert_eq!(t.insufficient, vec!["+45/-45".to_string(), "-45/+45".to_string()]);
    }

    /// Jensen-Shannon divergence of N(0, s) and N(d, s) by quadrature.
    fn gaussian_js(d: f64, s: f64) -> f64 {
        let pdf = |x: f64, m: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let (lo, hi, n) = (-10.0 * s, d + 10.0 * s, 200_000);
        let dx = (hi - lo) / n as f64;
        (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * dx;
                let (p, q) = (pdf(x, 0.0), pdf(x, d));
                let m = (p + q) / 2.0;
                let t = |v: f64| if v > 0.0 { v * (v / m).log2() } else { 0.0 };
                0.5 * (t(p) + t(q)) * dx
            })
            .sum()
    }

    fn session_pairs(cfg: &SimConfig) -> (Vec<CoincidencePair>, TimestampStream) {
        let s = simulate_session(cfg).unwrap();
        let tl = OffsetTimeline::constant(&OffsetEstimate::new(cfg.clock_offset, 0.0));
        (find_coincidences(&s.a, &s.b, &tl, 4e-9), s.a)
    }

    #[test]
    fn timing_leak_follows_lag_mismatch() {
        let base = SimConfig {
            duration: 30.0,
            seed: 31,
            channel: ChannelParams::new(0.15, 0.0).unwrap(),
            ..SimConfig::night()
        };
        // Inter-basis lag only: no intra-basis distinguishability.
        let (pairs, _) = session_pairs(&base);
        let t = timing_histograms(&pairs, 125e-12);
        assert!(t.insufficient.is_empty());
        assert!(t.leak_hv < 0.005 && t.leak_diag < 0.005, "{} {}", t.leak_hv, t.leak_diag);

        // 0.3 ns between V and H on side B separates (H,V) from (V,H).
        let skewed = SimConfig {
            lags_b: [0.0, 0.5e-9, 0.3e-9, 0.5e-9],
            ..base
        };
        let (pairs, _) = session_pairs(&skewed);
        let t = timing_histograms(&pairs, 125e-12);
        let sigma = 2f64.sqrt() * base.jitter_sigma;
        let oracle = gaussian_js(0.3e-9, sigma);
        assert!((t.leak_hv - oracle).abs() < 0.5 * oracle, "{} vs {oracle}", t.leak_hv);
        assert!(t.leak_diag < 0.005);
    }

    #[test]
    fn efficiency_mismatch_shows_in_column_sums() {
        let eff = [1.0, 0.8, 0.6, 0.9];
        let cfg = SimConfig {
            duration: 20.0,
            seed: 41,
            efficiency_b: eff,
            lags_b: [0.0; 4],
            ..SimConfig::night()
        };
        let (pairs, _) = session_pairs(&cfg);
        let cols = build_matrix(&pairs).col_sums();
        let total: u64 = cols.iter().sum();
        let eff_sum: f64 = eff.iter().sum();
        for d in 0..4 {
            let expected = total as f64 * eff[d] / eff_sum;
            let sigma = expected.sqrt();
            assert!((cols[d] as f64 - expected).abs() < 3.0 * sigma, "{d}: {} vs {expected}", cols[d]);
        }
    }

    #[test]
    fn windowed_monitor_separates_day_and_night() {
        let cfg = SimConfig {
            duration: 40.0,
            seed: 51,
            lags_b: [0.0; 4],
            background_weights: [1.0, 0.0, 0.0, 0.0],
            background_cycle: Some(BackgroundCycle {
                period: 20.0,
                day_rate: 400_000.0,
            }),
            ..SimConfig::night()
        };
        // A wide window lets accidentals on the lit detector outweigh its
        // dead-time loss.
        let s = simulate_session(&cfg).unwrap();
        let tl = OffsetTimeline::constant(&OffsetEstimate::new(cfg.clock_offset, 0.0));
        let (pairs, a) = (find_coincidences(&s.a, &s.b, &tl, 20e-9), s.a);
        let w = windowed_asymmetry(&pairs, &a, 10.0, Some(0.01));
        assert_eq!(w.len(), 4);
        let night = (w[0].zero_fraction + w[2].zero_fraction) / 2.0;
        let day = (w[1].zero_fraction + w[3].zero_fraction) / 2.0;
        // Dead time and accidentals on the lit detector pull in opposite
        // directions; only the separation is asserted.
        assert!((day - night).abs() > 0.015, "night {night} day {day}");
        assert!(!w[0].alarm && !w[2].alarm);
        assert!(w[1].alarm && w[3].alarm);
    }

    proptest! {
        #[test]
        fn entropy_leak_is_scale_invariant(
            cells in proptest::array::uniform16(1u64..100_000),
            factor in 2u64..1000,
        ) {
            let mut counts = [[0u64; 4]; 4];
            for (i, c) in cells.iter().enumerate() {
                counts[i / 4][i % 4] = *c;
            }
            let m = CorrelationMatrix { counts };
            let a = asymmetry_stats(&m).unwrap();
            let b = asymmetry_stats(&m.scaled(factor)).unwrap();
            prop_assert!((a.hv_entropy_leak - b.hv_entropy_leak).abs() < 1e-12);
            prop_assert!((a.diag_entropy_leak - b.diag_entropy_leak).abs() < 1e-12);
            prop_assert!((a.basis_ratio - b.basis_ratio).abs() < 1e-12);
        }

        #[test]
        fn js_is_bounded_and_shrinks_when_blended(
            p in proptest::collection::vec(0u64..50, 8),
            q in proptest::collection::vec(0u64..50, 8),
        ) {
            prop_assume!(p.iter().sum::<u64>() > 0 && q.iter().sum::<u64>() > 0);
            let to_map = |v: &[u64]| v.iter().enumerate().map(|(i, c)| (i as i64, *c)).collect::<BTreeMap<_, _>>();
            // Blend toward the average with integer weights on normalized counts.
            let (sp, sq) = (p.iter().sum::<u64>(), q.iter().sum::<u64>());
            let blend = |w: u64| -> (BTreeMap<i64, u64>, BTreeMap<i64, u64>) {
                let pn: Vec<u64> = p.iter().map(|c| c * sq).collect();
                let qn: Vec<u64> = q.iter().map(|c| c * sp).collect();
                let pb: Vec<u64> = pn.iter().zip(&qn).map(|(x, y)| x * (10 - w) + (x + y) / 2 * w).collect();
                let qb: Vec<u64> = pn.iter().zip(&qn).map(|(x, y)| y * (10 - w) + (x + y) / 2 * w).collect();
                (to_map(&pb), to_map(&qb))
            };
            let mut last = f64::INFINITY;
            for w in 0..=10 {
                let (a, b) = blend(w);
                let js = js_divergence(&a, &b);
                prop_assert!((0.0..=1.0).contains(&js));
                prop_assert!(js <= last + 1e-9);
                last = js;
            }
        }
    }
}
