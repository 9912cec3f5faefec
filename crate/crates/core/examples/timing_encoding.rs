//! Compresses a side's timestamps and bases for the classical channel and
//! compares the cost with the entropy of the time differences.

use qkdlink::protocol::{decode_timing, encode_stream, measure_overhead};
use qkdlink::simulator::{simulate_session, SimConfig};

fn main() {
    let s = simulate_session(&SimConfig { duration: 5.0, seed: 6, ..SimConfig::night() }).unwrap();
    let block = encode_stream(&s.b, 0..s.b.len()).unwrap();
    println!(
        "{} events in {} bytes ({:.2} bits/event)",
        block.count,
        block.to_bytes().len(),
        block.bits_per_event()
    );
    let (ticks, bases) = decode_timing(&block).unwrap();
    assert_eq!(ticks.len(), s.b.len());

    let o = measure_overhead(&ticks, &bases).unwrap();
    println!(
        "{:.2} bits per delta vs {:.2} bits entropy: {:.1} % overhead",
        o.bits_per_delta,
        o.entropy_per_delta,
        100.0 * (o.ratio() - 1.0)
    );
}
