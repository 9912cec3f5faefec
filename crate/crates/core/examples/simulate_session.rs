//! Simulates ten seconds of a night-time session and writes both timestamp
//! files plus the ground truth into a temporary directory.

use qkdlink::simulator::{read_stream, simulate_session, write_stream, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SimConfig {
        duration: 10.0,
        seed: 3,
        ..SimConfig::night()
    };
    let s = simulate_session(&cfg)?;
    println!("side A {} events, side B {} events", s.a.len(), s.b.len());
    println!("true pairs {}", s.truth.pairs.len());

    let dir = std::env::temp_dir().join("qkdlink-example");
    std::fs::create_dir_all(&dir)?;
    write_stream(&s.a, dir.join("a.ts"))?;
    write_stream(&s.b, dir.join("b.ts"))?;
    s.truth.save(dir.join("truth.csv"))?;
    assert_eq!(read_stream(dir.join("a.ts"))?, s.a);
    println!("written to {}", dir.display());
    Ok(())
}
