//! Recovers the clock offset between the two receivers without any prior
//! knowledge, then follows a 1e-9 frequency skew for a minute.

use qkdlink::simulator::{simulate_session, SimConfig};
use qkdlink::timesync::{lock, track_stream, SyncConfig};

fn main() {
    let sim = SimConfig {
        duration: 60.0,
        clock_skew: 1e-9,
        seed: 8,
        ..SimConfig::night()
    };
    let s = simulate_session(&sim).unwrap();
    let cfg = SyncConfig::default();

    let est = lock(&s.a, &s.b, &cfg).unwrap();
    println!(
        "locked: offset {:.9} s (true {:.9} s), drift {:.2e}",
        est.offset, s.truth.clock_offset, est.freq_drift
    );

    let (timeline, _) = track_stream(&s.a, &s.b, &est, &cfg).unwrap();
    for t in [10.0, 30.0, 59.0] {
        let err = timeline.offset_at(t) - s.truth.offset_at(t);
        println!("t = {t:>4} s  tracking error {:+.3} ns", err * 1e9);
    }
}
