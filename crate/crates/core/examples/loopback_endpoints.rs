//! Both ends of the protocol in one process over an in-memory link. The
//! link is cut once mid-session; the sender reconnects and both sides resume
//! from their last common key block.

use std::thread;

use qkdlink::pipeline::SessionConfig;
use qkdlink::protocol::{Endpoint, MemoryLink, Role};
use qkdlink::simulator::{simulate_session, SimConfig};

fn main() {
    let s = simulate_session(&SimConfig { duration: 40.0, seed: 10, ..SimConfig::night() }).unwrap();
    let cfg = SessionConfig { seed: 10, block_bits: 8000, ..SessionConfig::default() };
    let mut sender = Endpoint::new(Role::Sender, s.b, cfg).unwrap();
    let mut receiver = Endpoint::new(Role::Receiver, s.a, cfg).unwrap();

    let mut cut = true;
    loop {
        let (mut ls, mut lr, kill) = MemoryLink::pair();
        if cut {
            kill.kill_after(60);
            cut = false;
        }
        let (r, rx) = thread::scope(|sc| {
            let h = sc.spawn(|| sender.run(&mut ls));
            let rx = receiver.run(&mut lr);
            (h.join().unwrap(), rx)
        });
        match (r, rx) {
            (Ok(a), Ok(b)) => {
                println!("sender:\n{a}\n\nreceiver:\n{b}");
                assert_eq!(a.key.bits, b.key.bits);
                break;
            }
            (a, b) => {
                let e = a.err().or(b.err()).unwrap();
                println!("link dropped ({e}), reconnecting");
            }
        }
    }
}
