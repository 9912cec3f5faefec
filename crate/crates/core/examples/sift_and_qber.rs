use qkdlink::simulator::{simulate_session, SimConfig};
use qkdlink::sifter::{find_coincidences, measure_qber, sift};
use qkdlink::timesync::{lock, track_stream, SyncConfig};

fn main() {
    let sim = SimConfig {
        duration: 20.0,
        seed: 2,
        ..SimConfig::night()
    };
    let s = simulate_session(&sim).unwrap();
    let sync = SyncConfig::default();
    let est = lock(&s.a, &s.b, &sync).unwrap();
    let (timeline, _) = track_stream(&s.a, &s.b, &est, &sync).unwrap();

    let pairs = find_coincidences(&s.a, &s.b, &timeline, sim.detector.tau_c);
    let (mut ka, mut kb) = sift(&pairs, &s.a);
    println!("{} coincidences, sift fraction {:.3}", pairs.len(), ka.counts.sift_fraction());

    // 10 % of the sifted bits are disclosed and dropped.
    let q = measure_qber(&mut ka, &mut kb, 0.1, sim.seed).unwrap();
    let (lo, hi) = q.combined.wilson();
    println!(
        "QBER {:.2} % (95 % CI {:.2}..{:.2} %), HV {:.2} %, +-45 {:.2} %",
        100.0 * q.q(),
        100.0 * lo,
        100.0 * hi,
        100.0 * q.hv.ratio(),
        100.0 * q.diag.ratio()
    );
    println!("{} bits left for the key", ka.len());
}
