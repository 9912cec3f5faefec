//! Reliable ordered frame transports: an in-process pair with fault
//! injection and a TCP stream.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use super::frame::{Frame, FrameError};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("link closed")]
    Closed,
    #[error("no frame within {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait Transport {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Frame, TransportError>;
}

/// Severs a [`MemoryLink`] pair, either on demand or once a number of frames
/// has been sent in total.
#[derive(Debug, Clone, Default)]
pub struct KillSwitch {
    killed: Arc<AtomicBool>,
    sent: Arc<AtomicU64>,
    limit: Arc<AtomicU64>,
}

impl KillSwitch {
    pub fn kill(&self) {
        self.killed.store(true, Ordering::SeqCst);
    }

    pub fn is_killed(&self) -> bool {
        self.killed.load(Ordering::SeqCst)
    }

    /// Kills the link when the `n`-th frame is about to be sent.
    pub fn kill_after(&self, n: u64) {
        self.limit.store(n, Ordering::SeqCst);
    }

    pub fn frames_sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    fn on_send(&self) -> bool {
        let n = self.sent.fetch_add(1, Ordering::SeqCst) + 1;
        let limit = self.limit.load(Ordering::SeqCst);
        if limit > 0 && n >= limit {
            self.kill();
        }
        !self.is_killed()
    }
}

/// One end of an in-process link. Frames travel serialized, and every byte
/// sent is appended to this end's transcript.
#[derive(Debug)]
pub struct MemoryLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    kill: KillSwitch,
    transcript: Arc<Mutex<Vec<u8>>>,
    timeout: Duration,
}

impl MemoryLink {
    pub fn pair() -> (MemoryLink, MemoryLink, KillSwitch) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        let kill = KillSwitch::default();
        let end = |tx, rx| MemoryLink {
            tx,
            rx,
            kill: kill.clone(),
            transcript: Arc::default(),
            timeout: Duration::from_secs(120),
        };
        let a = end(tx_a, rx_a);
        let b = end(tx_b, rx_b);
        (a, b, kill)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Shared handle to the bytes sent from this end.
    pub fn transcript(&self) -> Arc<Mutex<Vec<u8>>> {
        Arc::clone(&self.transcript)
    }
}

impl Transport for MemoryLink {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        if !self.kill.on_send() {
            return Err(TransportError::Closed);
        }
        let bytes = frame.to_bytes();
        self.transcript.lock().expect("transcript lock").extend_from_slice(&bytes);
        self.tx.send(bytes).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let poll = Duration::from_millis(20);
        let mut waited = Duration::ZERO;
        loop {
            if self.kill.is_killed() {
                return Err(TransportError::Closed);
            }
            match self.rx.recv_timeout(poll) {
                Ok(bytes) => return Ok(Frame::read_from(&bytes[..])?),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
                Err(RecvTimeoutError::Timeout) => {
                    waited += poll;
                    if waited >= self.timeout {
                        return Err(TransportError::Timeout(self.timeout));
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(TcpTransport {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        TcpTransport::new(TcpStream::connect(addr)?)
    }

    /// Accepts a single peer.
    pub fn accept(listener: &TcpListener) -> io::Result<Self> {
        let (stream, peer) = listener.accept()?;
        log::info!("peer connected from {peer}");
        TcpTransport::new(stream)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        frame.write_to(&mut self.writer)?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        match Frame::read_from(&mut self.reader) {
            Err(FrameError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => Err(TransportError::Closed),
            r => Ok(r?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::frame::FrameType;
    use super::*;

    #[test]
    fn memory_pair_delivers_in_order_and_records() {
        let (mut a, mut b, _) = MemoryLink::pair();
        for i in 0..5 {
            a.send(&Frame::new(FrameType::Control, i, vec![i as u8])).unwrap();
        }
        for i in 0..5 {
            assert_eq!(b.recv().unwrap().seq, i);
        }
        assert_eq!(a.transcript().lock().unwrap().len(), 5 * 14);
        assert!(b.transcript().lock().unwrap().is_empty());
    }

    #[test]
    fn kill_switch_severs_both_ends() {
        let (mut a, mut b, kill) = MemoryLink::pair();
        kill.kill_after(3);
        a.send(&Frame::new(FrameType::Control, 0, vec![])).unwrap();
        b.send(&Frame::new(FrameType::Control, 0, vec![])).unwrap();
        assert!(matches!(a.send(&Frame::new(FrameType::Control, 1, vec![])), Err(TransportError::Closed)));
        assert!(matches!(b.recv(), Err(TransportError::Closed)));
    }

    #[test]
    fn tcp_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let mut t = TcpTransport::accept(&listener).unwrap();
            let f = t.recv().unwrap();
            t.send(&Frame::new(FrameType::Hash, f.seq + 1, f.payload)).unwrap();
        });
        let mut c = TcpTransport::connect(addr).unwrap();
        c.send(&Frame::new(FrameType::Hash, 7, vec![1, 2, 3])).unwrap();
        let back = c.recv().unwrap();
        assert_eq!((back.kind, back.seq, back.payload), (FrameType::Hash, 8, vec![1, 2, 3]));
        h.join().unwrap();
        assert!(matches!(c.recv(), Err(TransportError::Closed)));
    }
}
