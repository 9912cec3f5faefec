//! CASCADE on a 50 kbit key with 5 % errors. Side B's key is corrected
//! towards side A's; the disclosed bits are compared with h(q) n.

use qkdlink::postproc::{binary_entropy, cascade_reconcile, CascadeConfig};
use qkdlink::seed;
use rand::Rng;

fn main() {
    let (n, q) = (50_000, 0.05);
    let mut rng = seed::rng(5, "example");
    let a: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    let b: Vec<bool> = a.iter().map(|&x| x ^ rng.random_bool(q)).collect();
    let errors = a.iter().zip(&b).filter(|(x, y)| x != y).count();

    let cfg = CascadeConfig { seed: 5, ..CascadeConfig::default() };
    let (ra, rb) = cascade_reconcile(&a, &b, q, &cfg).unwrap();
    assert_eq!(ra.bits, rb.bits);
    println!("{errors} errors, {} corrected in {} passes", rb.corrected, rb.blocks.len());
    println!("block sizes {:?}", rb.blocks);
    println!(
        "disclosed {} bits = {:.3} x h(q) n",
        rb.leaked_bits,
        rb.leaked_bits as f64 / (binary_entropy(q) * n as f64)
    );
}
