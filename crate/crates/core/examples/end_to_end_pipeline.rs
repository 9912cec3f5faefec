//! Whole chain in one process on a simulated minute of night-time data.

use qkdlink::pipeline::{run_pipeline, SessionConfig};
use qkdlink::simulator::{simulate_session, SimConfig};

fn main() {
    let sim = SimConfig { duration: 60.0, seed: 7, ..SimConfig::night() };
    let s = simulate_session(&sim).unwrap();
    let report = run_pipeline(&s.a, &s.b, &SessionConfig { seed: 7, ..SessionConfig::default() }).unwrap();
    println!("{report}");
    println!("{:.0} secret bits per second", report.secret_bits() as f64 / sim.duration);
}
