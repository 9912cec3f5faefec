//! Sifted key rate and QBER of the typical link as the ambient background
//! grows, and the background at which the QBER crosses 11 %.
//!
//! cargo run --example background_threshold

use qkdlink::linkmodel::{background_grid, LinkModel};

fn main() {
    let model = LinkModel::typical();
    println!("{:>12} {:>12} {:>8}", "r_bg (cps)", "sifted (cps)", "QBER");
    for row in model.sweep(&background_grid(1e3, 1e7, 9, true).unwrap()).unwrap() {
        println!("{:>12.3e} {:>12.1} {:>7.2}%", row.r_bg, row.sifted_rate, 100.0 * row.qber);
    }
    let r = model.background_threshold(0.11).unwrap();
    println!("QBER reaches 11 % at {r:.3e} cps");
}
