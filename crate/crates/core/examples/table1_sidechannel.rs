//! Detector asymmetry of the bundled correlation matrix, then the same
//! analysis on a simulated session whose receiver detectors have unequal
//! efficiencies and delays.

use qkdlink::sidechannel::{analyze_pairs, asymmetry_stats, build_matrix, CorrelationMatrix};
use qkdlink::sifter::find_coincidences;
use qkdlink::simulator::{simulate_session, SimConfig};
use qkdlink::timesync::{OffsetEstimate, OffsetTimeline};

fn main() {
    let m = CorrelationMatrix::table1();
    println!("{}\n", asymmetry_stats(&m).unwrap());

    let sim = SimConfig {
        duration: 30.0,
        efficiency_b: [1.0, 0.9, 0.8, 1.0],
        lags_b: [0.0, 0.5e-9, 0.0, 0.5e-9],
        seed: 4,
        ..SimConfig::night()
    };
    let s = simulate_session(&sim).unwrap();
    let tl = OffsetTimeline::constant(&OffsetEstimate::new(sim.clock_offset, 0.0));
    let pairs = find_coincidences(&s.a, &s.b, &tl, 2e-9);
    let (report, _) = analyze_pairs(&pairs, 125e-12).unwrap();
    println!("simulated matrix\n{}", {
        let mut csv = Vec::new();
        build_matrix(&pairs).write_csv(&mut csv).unwrap();
        String::from_utf8(csv).unwrap()
    });
    println!("{report}");
}
