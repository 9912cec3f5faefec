//! Shrinks a reconciled key by the information an eavesdropper may hold and
//! prints the accounting row.

use qkdlink::pipeline::responder_key;
use qkdlink::postproc::{privacy_amplify, AmplifyConfig, ChaChaSeeds};
use qkdlink::seed;
use rand::Rng;

fn main() {
    let mut rng = seed::rng(1, "example");
    let bits: Vec<bool> = (0..20_000).map(|_| rng.random()).collect();
    let key = responder_key(bits, 6_100);

    let mut seeds = ChaChaSeeds::new(1);
    let out = privacy_amplify(&key, 0.045, &mut seeds, &AmplifyConfig::default(), 0).unwrap();
    let acc = out.blocks[0];
    println!(
        "n_in {} - I_E {} - leak_ec {} = n_out {}",
        acc.n_in, acc.i_e_bits, acc.leak_ec, acc.n_out
    );
    let ones = out.bits.iter().filter(|b| **b).count();
    println!("fraction of ones {:.4}", ones as f64 / out.bits.len() as f64);
}
