//! Two-party session over a [`Transport`].
//!
//! The sender streams one TIMING frame per chunk of `chunk_secs`. The receiver
//! locks onto the sender's events, tracks the offset, finds coincidences and
//! answers with the sender indices of the basis-matched ones. Once
//! `block_bits` sifted bits are pending both sides post-process a key block:
//! side A discloses its sample bits and side B returns the error counts, side
//! B corrects against side A's parities, and side A sends the matrix seed.
//!
//! Each finished key block is a checkpoint. After a transport failure the
//! next [`Endpoint::run`] rolls both sides back to the last checkpoint they
//! share and the receiver acquires afresh.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use thiserror::Error;

use super::encoding::{decode_timing, encode_stream, EncodedTimingBlock, EncodingError};
use super::frame::{Frame, FrameType};
use super::transport::{Transport, TransportError};
use crate::pipeline::{cascade_qber, drop_positions, responder_key, KeyBlockReport, KeyOutcome, SessionConfig};
use crate::postproc::{
    amplify_with_seed, bits_to_bytes, bytes_to_bits, cascade_correct, AmplifyError, CascadeError, FinalKey,
    LocalResponder, ParityChannel, RangeQuery,
};
use crate::seed;
use crate::sifter::{compare_sample, find_coincidences, key_bit, sample_positions, ErrorRatio, QberEstimate};
use crate::simulator::{Basis, Party, TimestampStream};
use crate::timesync::{lock, Follower};
use crate::{secs_to_ticks, ticks_to_secs};

const MSG_HELLO: u8 = 1;
const MSG_SIFTED: u8 = 2;
const MSG_RECONCILED: u8 = 3;
const FLAG_LAST: u8 = 1;
const QUERY_BYTES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Streams its timing information; usually the side with fewer events.
    Sender,
    /// Holds both event streams and finds the coincidences.
    Receiver,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sender" => Ok(Role::Sender),
            "receiver" => Ok(Role::Receiver),
            _ => Err(format!("unknown role `{s}` (sender|receiver)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("timing encoding: {0}")]
    Encoding(#[from] EncodingError),
    #[error("handshake: {0}")]
    Handshake(String),
    #[error("expected a {expected:?} frame, got {got:?}")]
    Unexpected { expected: FrameType, got: FrameType },
    #[error("malformed {0} payload")]
    Malformed(&'static str),
    #[error("sequence number {got} does not follow {last}")]
    Sequence { got: u64, last: u64 },
    #[error("reconciliation: {0}")]
    Cascade(CascadeError),
    #[error("privacy amplification: {0}")]
    Amplify(#[from] AmplifyError),
}

impl ProtocolError {
    /// Whether a new transport can resume the session.
    pub fn is_transport(&self) -> bool {
        matches!(self, ProtocolError::Transport(_))
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }
    fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn varint(mut self, mut v: u64) -> Self {
        while v >= 0x80 {
            self.0.push(v as u8 | 0x80);
            v >>= 7;
        }
        self.0.push(v as u8);
        self
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() < n {
            return Err(ProtocolError::Malformed(self.what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn varint(&mut self) -> Result<u64, ProtocolError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(ProtocolError::Malformed(self.what))
    }
    fn rest(self) -> &'a [u8] {
        self.buf
    }
    fn finish(self) -> Result<(), ProtocolError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ProtocolError::Malformed(self.what))
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Wire {
    tx_seq: u64,
    rx_last: Option<u64>,
}

struct Channel<'a> {
    t: &'a mut dyn Transport,
    wire: &'a mut Wire,
}

impl Channel<'_> {
    fn send(&mut self, kind: FrameType, payload: Vec<u8>) -> Result<(), ProtocolError> {
        let f = Frame::new(kind, self.wire.tx_seq, payload);
        self.wire.tx_seq += 1;
        Ok(self.t.send(&f)?)
    }

    fn recv_any(&mut self) -> Result<Frame, ProtocolError> {
        let f = self.t.recv()?;
        if let Some(last) = self.wire.rx_last {
            if f.seq <= last {
                return Err(ProtocolError::Sequence { got: f.seq, last });
            }
        }
        self.wire.rx_last = Some(f.seq);
        Ok(f)
    }

    fn recv(&mut self, expected: FrameType) -> Result<Vec<u8>, ProtocolError> {
        let f = self.recv_any()?;
        if f.kind != expected {
            return Err(ProtocolError::Unexpected { expected, got: f.kind });
        }
        Ok(f.payload)
    }
}

/// Side B's view of side A's parities, carried over the channel.
struct RemoteParity<'a, 'b> {
    ch: &'a mut Channel<'b>,
    failure: Option<ProtocolError>,
}

impl RemoteParity<'_, '_> {
    fn fail(&mut self, e: ProtocolError) -> CascadeError {
        let msg = e.to_string();
        self.failure = Some(e);
        CascadeError::Channel(msg)
    }
}

impl ParityChannel for RemoteParity<'_, '_> {
    fn parities(&mut self, queries: &[RangeQuery]) -> Result<Vec<bool>, CascadeError> {
        let mut w = Writer::default();
        for q in queries {
            w.0.extend_from_slice(&q.pass.to_le_bytes());
            w = w.u32(q.start).u32(q.end);
        }
        let reply = self
            .ch
            .send(FrameType::Parity, w.0)
            .and_then(|_| self.ch.recv(FrameType::Parity));
        match reply {
            Ok(bytes) if bytes.len() == queries.len().div_ceil(8) => Ok(bytes_to_bits(&bytes, queries.len())),
            Ok(_) => Err(self.fail(ProtocolError::Malformed("parity reply"))),
            Err(e) => Err(self.fail(e)),
        }
    }

    fn hash(&mut self, index: u64) -> Result<u64, CascadeError> {
        let reply = self
            .ch
            .send(FrameType::Hash, index.to_le_bytes().to_vec())
            .and_then(|_| self.ch.recv(FrameType::Hash));
        match reply {
            Ok(bytes) => match <[u8; 8]>::try_from(bytes.as_slice()) {
                Ok(b) => Ok(u64::from_le_bytes(b)),
                Err(_) => Err(self.fail(ProtocolError::Malformed("hash reply"))),
            },
            Err(e) => Err(self.fail(e)),
        }
    }
}

/// Per-chunk record of the synchronization state.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStat {
    pub chunk: u32,
    /// Sender time at the chunk start (s).
    pub start: f64,
    pub sender_events: usize,
    pub locked: bool,
    /// Tracked offset at the chunk start, NaN when unlocked.
    pub offset: f64,
    pub sifted: usize,
}

#[derive(Debug, Clone)]
struct Checkpoint {
    next_chunk: u32,
    report: KeyBlockReport,
    key: Option<FinalKey>,
}

#[derive(Debug, Clone)]
pub struct SessionReport {
    pub role: Role,
    pub party: Party,
    pub key: FinalKey,
    pub chunks: Vec<ChunkStat>,
    pub blocks: Vec<KeyBlockReport>,
    pub acquisitions: u32,
    pub connections: u32,
}

impl SessionReport {
    pub fn write_stats<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "chunk,start_s,sender_events,locked,offset_s,sifted")?;
        for c in &self.chunks {
            writeln!(
                out,
                "{},{:.6},{},{},{:.12e},{}",
                c.chunk, c.start, c.sender_events, c.locked as u8, c.offset, c.sifted
            )?;
        }
        Ok(())
    }

    /// Whether every chunk after the first lock stayed locked.
    pub fn stayed_locked(&self) -> bool {
        self.chunks.iter().skip_while(|c| !c.locked).all(|c| c.locked)
    }
}

impl fmt::Display for SessionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let locked = self.chunks.iter().filter(|c| c.locked).count();
        writeln!(
            f,
            "{:?} (side {:?}): {} chunks, {} locked, {} acquisitions, {} connections",
            self.role,
            self.party,
            self.chunks.len(),
            locked,
            self.acquisitions,
            self.connections
        )?;
        for b in &self.blocks {
            let q = b.qber.map_or(String::from("-"), |q| format!("{:.4}", q.q()));
            writeln!(
                f,
                "key block {}: {} sifted, qber {}, {}, n_in {}, leak {}, n_out {}",
                b.block, b.sifted, q, b.outcome, b.n_in, b.leak_ec, b.n_out
            )?;
        }
        write!(f, "final key {} bits", self.key.n_out())
    }
}

#[derive(Debug, Default)]
struct Pending {
    bits: Vec<bool>,
    bases: Vec<Basis>,
}

struct Hello {
    role: Role,
    party: Party,
    tag: u64,
    committed: u32,
    first_tick: u64,
    chunk_ticks: u64,
}

impl Hello {
    fn encode(&self) -> Vec<u8> {
        Writer::default()
            .u8(MSG_HELLO)
            .u8(self.role as u8)
            .u8(self.party.id() as u8)
            .u64(self.tag)
            .u32(self.committed)
            .u64(self.first_tick)
            .u64(self.chunk_ticks)
            .0
    }

    fn decode(bytes: &[u8]) -> Result<Hello, ProtocolError> {
        let mut r = Reader::new(bytes, "hello");
        if r.u8()? != MSG_HELLO {
            return Err(ProtocolError::Malformed("hello"));
        }
        let role = match r.u8()? {
            0 => Role::Sender,
            1 => Role::Receiver,
            _ => return Err(ProtocolError::Malformed("hello")),
        };
        let party = Party::from_id(u32::from(r.u8()?)).ok_or(ProtocolError::Malformed("hello"))?;
        let h = Hello {
            role,
            party,
            tag: r.u64()?,
            committed: r.u32()?,
            first_tick: r.u64()?,
            chunk_ticks: r.u64()?,
        };
        r.finish()?;
        Ok(h)
    }
}

/// One side of a session. Survives transport failures; call [`run`](Self::run)
/// again with a fresh transport to resume.
pub struct Endpoint {
    cfg: SessionConfig,
    role: Role,
    stream: TimestampStream,
    wire: Wire,
    checkpoints: Vec<Checkpoint>,
    chunks: Vec<ChunkStat>,
    follower: Option<Follower>,
    own_used: Option<usize>,
    acquisitions: u32,
    connections: u32,
}

impl Endpoint {
    pub fn new(role: Role, stream: TimestampStream, cfg: SessionConfig) -> Result<Self, ProtocolError> {
        cfg.validate().map_err(|e| ProtocolError::Handshake(e.to_string()))?;
        Ok(Endpoint {
            cfg,
            role,
            stream,
            wire: Wire::default(),
            checkpoints: Vec::new(),
            chunks: Vec::new(),
            follower: None,
            own_used: None,
            acquisitions: 0,
            connections: 0,
        })
    }

    pub fn party(&self) -> Party {
        self.stream.party()
    }

    pub fn report(&self) -> SessionReport {
        let mut key = FinalKey::default();
        for c in &self.checkpoints {
            if let Some(k) = &c.key {
                key.append(k.clone());
            }
        }
        SessionReport {
            role: self.role,
            party: self.party(),
            key,
            chunks: self.chunks.clone(),
            blocks: self.checkpoints.iter().map(|c| c.report.clone()).collect(),
            acquisitions: self.acquisitions,
            connections: self.connections,
        }
    }

    /// Runs (or resumes) the session to the end of the sender's stream.
    pub fn run(&mut self, t: &mut dyn Transport) -> Result<SessionReport, ProtocolError> {
        self.connections += 1;
        let mut wire = self.wire;
        let r = self.run_inner(&mut Channel { t, wire: &mut wire });
        self.wire = wire;
        r.map(|_| self.report())
    }

    fn session_tag(&self) -> u64 {
        seed::derive(self.cfg.seed, "session-tag")
    }

    fn chunk_ticks(&self) -> u64 {
        secs_to_ticks(self.cfg.chunk_secs) as u64
    }

    fn handshake(&mut self, ch: &mut Channel) -> Result<Hello, ProtocolError> {
        let mine = Hello {
            role: self.role,
            party: self.party(),
            tag: self.session_tag(),
            committed: self.checkpoints.len() as u32,
            first_tick: self.stream.start_tick().unwrap_or(0),
            chunk_ticks: self.chunk_ticks(),
        };
        let theirs = match self.role {
            Role::Sender => {
                ch.send(FrameType::Control, mine.encode())?;
                Hello::decode(&ch.recv(FrameType::Control)?)?
            }
            Role::Receiver => {
                let h = Hello::decode(&ch.recv(FrameType::Control)?)?;
                ch.send(FrameType::Control, mine.encode())?;
                h
            }
        };
        if theirs.role == self.role || theirs.party == self.party() {
            return Err(ProtocolError::Handshake("peer has the same role or side".into()));
        }
        if theirs.tag != mine.tag {
            return Err(ProtocolError::Handshake("peer uses a different session seed".into()));
        }
        Ok(theirs)
    }

    fn run_inner(&mut self, ch: &mut Channel) -> Result<(), ProtocolError> {
        let peer = self.handshake(ch)?;
        let agreed = (self.checkpoints.len() as u32).min(peer.committed) as usize;
        if agreed < self.checkpoints.len() {
            log::warn!("rolling back {} key blocks", self.checkpoints.len() - agreed);
        }
        self.checkpoints.truncate(agreed);
        let start = self.checkpoints.last().map_or(0, |c| c.next_chunk);
        self.chunks.retain(|c| c.chunk < start);
        self.follower = None;
        self.own_used = None;
        let (first_tick, chunk_ticks) = match self.role {
            Role::Sender => (self.stream.start_tick().unwrap_or(0), self.chunk_ticks()),
            Role::Receiver => (peer.first_tick, peer.chunk_ticks.max(1)),
        };

        let mut pending = Pending::default();
        let mut k = start;
        loop {
            let (stat, last) = match self.role {
                Role::Sender => self.sender_chunk(ch, k, first_tick, chunk_ticks, &mut pending)?,
                Role::Receiver => self.receiver_chunk(ch, k, peer.party, &mut pending)?,
            };
            log::debug!("chunk {k}: {stat:?}");
            self.chunks.push(stat);
            if pending.bits.len() >= self.cfg.block_bits || (last && !pending.bits.is_empty()) {
                self.key_block(ch, k + 1, std::mem::take(&mut pending))?;
            }
            if last {
                return Ok(());
            }
            k += 1;
        }
    }

    fn sender_chunk(
        &mut self,
        ch: &mut Channel,
        k: u32,
        first_tick: u64,
        chunk_ticks: u64,
        pending: &mut Pending,
    ) -> Result<(ChunkStat, bool), ProtocolError> {
        let lo = first_tick + u64::from(k) * chunk_ticks;
        let range = self.stream.tick_range(lo, lo + chunk_ticks);
        let last = self.stream.end_tick().is_none_or(|end| end < lo + chunk_ticks);
        let block = encode_stream(&self.stream, range.clone())?;
        let mut payload = Writer::default().u32(k).u8(if last { FLAG_LAST } else { 0 }).0;
        payload.extend_from_slice(&block.to_bytes());
        ch.send(FrameType::Timing, payload)?;

        let (locked, offset, indices) = decode_sifted(&ch.recv(FrameType::Control)?, k, range.len())?;
        let party = self.party();
        for &i in &indices {
            let d = self.stream.detector(range.start + i as usize);
            pending.bits.push(key_bit(party, d));
            pending.bases.push(Basis::of(d));
        }
        let stat = ChunkStat {
            chunk: k,
            start: ticks_to_secs(lo as f64),
            sender_events: range.len(),
            locked,
            offset,
            sifted: indices.len(),
        };
        Ok((stat, last))
    }

    fn receiver_chunk(
        &mut self,
        ch: &mut Channel,
        k: u32,
        sender: Party,
        pending: &mut Pending,
    ) -> Result<(ChunkStat, bool), ProtocolError> {
        let payload = ch.recv(FrameType::Timing)?;
        let mut r = Reader::new(&payload, "timing");
        let chunk = r.u32()?;
        let last = r.u8()? & FLAG_LAST != 0;
        if chunk != k {
            return Err(ProtocolError::Handshake(format!("expected chunk {k}, got {chunk}")));
        }
        let (ticks, bases) = decode_timing(&EncodedTimingBlock::from_bytes(r.rest())?)?;
        let words = ticks.iter().zip(&bases).map(|(t, b)| t << 4 | b.index() as u64).collect();
        let remote = TimestampStream::from_words(sender, words).map_err(|_| ProtocolError::Malformed("timing"))?;

        let (locked, offset, matched) = self.match_chunk(&remote);
        let mut w = Writer::default()
            .u8(MSG_SIFTED)
            .u32(k)
            .u8(locked as u8)
            .u64(offset.to_bits())
            .varint(matched.len() as u64);
        let mut prev = 0u64;
        for (n, (i, bit, basis)) in matched.iter().enumerate() {
            let i = u64::from(*i);
            w = w.varint(if n == 0 { i } else { i - prev - 1 });
            prev = i;
            pending.bits.push(*bit);
            pending.bases.push(*basis);
        }
        ch.send(FrameType::Control, w.0)?;
        let stat = ChunkStat {
            chunk: k,
            start: remote.start_tick().map_or(0.0, |t| ticks_to_secs(t as f64)),
            sender_events: remote.len(),
            locked,
            offset,
            sifted: matched.len(),
        };
        Ok((stat, last))
    }

    /// Locks or follows on one chunk and returns the basis-matched
    /// coincidences as (sender index, own key bit, basis), by sender index.
    fn match_chunk(&mut self, remote: &TimestampStream) -> (bool, f64, Vec<(u32, bool, Basis)>) {
        let (Some(lo), Some(hi)) = (remote.start_tick(), remote.end_tick()) else {
            return (self.follower.is_some(), f64::NAN, Vec::new());
        };
        let own = self.party();
        let own_is_a = own == Party::A;
        // Sender-clock position mapped to the own clock; offset is t_B - t_A.
        let to_own = |t: u64, off: f64| -> u64 {
            let shift = secs_to_ticks(if own_is_a { -off } else { off });
            (t as f64 + shift).max(0.0) as u64
        };
        let sync = self.cfg.sync;
        let guess = self.follower.as_ref().map_or(0.0, |f| {
            let t = ticks_to_secs(lo as f64);
            if own_is_a {
                f.timeline().offset_at(t - f.timeline().offset_at(t))
            } else {
                f.timeline().offset_at(t)
            }
        });
        let margin = secs_to_ticks(1e-6 + 2.0 * sync.track_window) as u64;
        let own_range = self
            .stream
            .tick_range(to_own(lo, guess).saturating_sub(margin), to_own(hi, guess) + margin + 1);
        let local = self.stream.slice(own_range.clone());
        let (a, b) = if own_is_a { (&local, remote) } else { (remote, &local) };

        if self.follower.is_none() {
            self.acquisitions += 1;
            match lock(a, b, &sync) {
                Ok(est) => {
                    log::info!("acquired: offset {:.6e} s, confidence {:.1}", est.offset, est.confidence);
                    let start = a.start_tick().map_or(0.0, |t| ticks_to_secs(t as f64));
                    self.follower = Some(Follower::new(est.at_epoch(start.min(est.epoch)), sync));
                }
                Err(e) => {
                    log::warn!("acquisition failed: {e}");
                    return (false, f64::NAN, Vec::new());
                }
            }
        }
        let f = self.follower.as_mut().expect("locked");
        f.reset_cursor();
        if let Err(e) = f.process(a.words(), b) {
            log::warn!("lock lost: {e}");
            self.follower = None;
            return (false, f64::NAN, Vec::new());
        }
        let a_start = a.start_tick().map_or(0.0, |t| ticks_to_secs(t as f64));
        let offset = f.timeline().offset_at(a_start);
        let pairs = find_coincidences(a, b, f.timeline(), self.cfg.tau_c);

        let mut matched = Vec::new();
        let mut used = self.own_used;
        for p in pairs.iter().filter(|p| p.same_basis()) {
            let (remote_i, own_i, own_det) = if own_is_a {
                (p.index_b, p.index_a, p.detector_a)
            } else {
                (p.index_a, p.index_b, p.detector_b)
            };
            let own_global = own_range.start + own_i;
            if self.own_used.is_some_and(|u| own_global <= u) {
                continue;
            }
            used = Some(used.map_or(own_global, |u| u.max(own_global)));
            matched.push((remote_i as u32, key_bit(own, own_det), Basis::of(own_det)));
        }
        self.own_used = used;
        matched.sort_by_key(|m| m.0);
        (true, offset, matched)
    }

    fn commit(&mut self, next_chunk: u32, report: KeyBlockReport, key: Option<FinalKey>) {
        log::info!("key block {}: {}", report.block, report.outcome);
        self.checkpoints.push(Checkpoint {
            next_chunk,
            report,
            key,
        });
    }

    fn key_block(&mut self, ch: &mut Channel, next_chunk: u32, pending: Pending) -> Result<(), ProtocolError> {
        let cfg = self.cfg;
        let j = self.checkpoints.len() as u64;
        let n = pending.bits.len();
        let mut report = KeyBlockReport {
            block: j,
            sifted: n,
            qber: None,
            outcome: KeyOutcome::Discarded,
            leak_ec: 0,
            n_in: 0,
            n_out: 0,
        };
        if n < cfg.min_block_bits() {
            self.commit(next_chunk, report, None);
            return Ok(());
        }
        let is_a = self.party() == Party::A;

        let pos = sample_positions(n, cfg.sample_fraction, cfg.seed, j).expect("validated fraction and size");
        let mine: Vec<bool> = pos.iter().map(|&i| pending.bits[i]).collect();
        let bases: Vec<Basis> = pos.iter().map(|&i| pending.bases[i]).collect();
        let est = if is_a {
            ch.send(FrameType::QberSample, bits_to_bytes(&mine))?;
            decode_qber(&ch.recv(FrameType::QberSample)?)?
        } else {
            let theirs = ch.recv(FrameType::QberSample)?;
            if theirs.len() != pos.len().div_ceil(8) {
                return Err(ProtocolError::Malformed("qber sample"));
            }
            let est = compare_sample(&bytes_to_bits(&theirs, pos.len()), &mine, &bases);
            ch.send(FrameType::QberSample, encode_qber(&est))?;
            est
        };
        report.qber = Some(est);
        if est.q() > cfg.qber_limit {
            log::warn!("QBER {:.4} above {:.4}: key generation paused", est.q(), cfg.qber_limit);
            report.outcome = KeyOutcome::Paused;
            self.commit(next_chunk, report, None);
            return Ok(());
        }

        let mut kept = drop_positions(&pending.bits, &pos);
        report.n_in = kept.len() as u64;
        let ccfg = cfg.cascade_for(j);
        let reconciled = if is_a {
            let mut responder = LocalResponder::new(kept, ccfg.seed);
            let (ok, leaked) = answer_parities(ch, &mut responder)?;
            if !ok {
                report.outcome = KeyOutcome::Failed;
                self.commit(next_chunk, report, None);
                return Ok(());
            }
            if leaked != responder.leaked() {
                return Err(ProtocolError::Handshake(format!(
                    "peer counts {leaked} disclosed bits, {} answered",
                    responder.leaked()
                )));
            }
            let seed = cfg.seeds_for(j).next_seed()?;
            ch.send(FrameType::Seed, seed.to_le_bytes().to_vec())?;
            (responder_key(responder.into_bits(), leaked), seed)
        } else {
            let mut remote = RemoteParity { ch, failure: None };
            let result = cascade_correct(&mut kept, cascade_qber(&est), &ccfg, &mut remote);
            let failure = remote.failure.take();
            let rk = match result {
                Ok(rk) => rk,
                Err(CascadeError::VerificationFailed { passes }) => {
                    log::warn!("block {j} unverified after {passes} passes");
                    ch.send(FrameType::Control, Writer::default().u8(MSG_RECONCILED).u8(0).u64(0).0)?;
                    report.outcome = KeyOutcome::Failed;
                    self.commit(next_chunk, report, None);
                    return Ok(());
                }
                Err(e) => return Err(failure.unwrap_or(ProtocolError::Cascade(e))),
            };
            ch.send(
                FrameType::Control,
                Writer::default().u8(MSG_RECONCILED).u8(1).u64(rk.leaked_bits).0,
            )?;
            let bytes = ch.recv(FrameType::Seed)?;
            let seed = u32::from_le_bytes(bytes.try_into().map_err(|_| ProtocolError::Malformed("seed"))?);
            (rk, seed)
        };
        let (rk, seed) = reconciled;
        let key = amplify_with_seed(&rk, est.q(), seed, &cfg.amplify, j)?;
        report.leak_ec = rk.leaked_bits;
        report.n_out = key.n_out();
        report.outcome = KeyOutcome::Amplified;
        self.commit(next_chunk, report, Some(key));
        Ok(())
    }
}

/// Side A's loop answering parity and hash questions until side B reports
/// the outcome. Returns (verified, disclosed bits).
fn answer_parities(ch: &mut Channel, responder: &mut LocalResponder) -> Result<(bool, u64), ProtocolError> {
    loop {
        let f = ch.recv_any()?;
        match f.kind {
            FrameType::Parity => {
                if f.payload.len() % QUERY_BYTES != 0 {
                    return Err(ProtocolError::Malformed("parity query"));
                }
                let mut r = Reader::new(&f.payload, "parity query");
                let mut bits = Vec::with_capacity(f.payload.len() / QUERY_BYTES);
                for _ in 0..f.payload.len() / QUERY_BYTES {
                    let q = RangeQuery {
                        pass: r.u16()?,
                        start: r.u32()?,
                        end: r.u32()?,
                    };
                    bits.push(responder.answer(&q).map_err(|_| ProtocolError::Malformed("parity query"))?);
                }
                ch.send(FrameType::Parity, bits_to_bytes(&bits))?;
            }
            FrameType::Hash => {
                let mut r = Reader::new(&f.payload, "hash request");
                let index = r.u64()?;
                r.finish()?;
                ch.send(FrameType::Hash, responder.answer_hash(index).to_le_bytes().to_vec())?;
            }
            FrameType::Control => {
                let mut r = Reader::new(&f.payload, "reconciled");
                if r.u8()? != MSG_RECONCILED {
                    return Err(ProtocolError::Malformed("reconciled"));
                }
                let ok = r.u8()? == 1;
                let leaked = r.u64()?;
                r.finish()?;
                return Ok((ok, leaked));
            }
            got => {
                return Err(ProtocolError::Unexpected {
                    expected: FrameType::Parity,
                    got,
                })
            }
        }
    }
}

fn decode_sifted(bytes: &[u8], k: u32, events: usize) -> Result<(bool, f64, Vec<u32>), ProtocolError> {
    let mut r = Reader::new(bytes, "sifted");
    if r.u8()? != MSG_SIFTED || r.u32()? != k {
        return Err(ProtocolError::Malformed("sifted"));
    }
    let locked = r.u8()? == 1;
    let offset = f64::from_bits(r.u64()?);
    let n = r.varint()? as usize;
    if n > events {
        return Err(ProtocolError::Malformed("sifted"));
    }
    let mut out = Vec::with_capacity(n);
    let mut next = 0u64;
    for _ in 0..n {
        let i = next + r.varint()?;
        if i >= events as u64 {
            return Err(ProtocolError::Malformed("sifted"));
        }
        out.push(i as u32);
        next = i + 1;
    }
    r.finish()?;
    Ok((locked, offset, out))
}

fn encode_qber(est: &QberEstimate) -> Vec<u8> {
    Writer::default()
        .u64(est.hv.errors)
        .u64(est.hv.sampled)
        .u64(est.diag.errors)
        .u64(est.diag.sampled)
        .0
}

fn decode_qber(bytes: &[u8]) -> Result<QberEstimate, ProtocolError> {
    let mut r = Reader::new(bytes, "qber counts");
    let hv = ErrorRatio {
        errors: r.u64()?,
        sampled: r.u64()?,
    };
    let diag = ErrorRatio {
        errors: r.u64()?,
        sampled: r.u64()?,
    };
    r.finish()?;
    if hv.errors > hv.sampled || diag.errors > diag.sampled {
        return Err(ProtocolError::Malformed("qber counts"));
    }
    Ok(QberEstimate {
        hv,
        diag,
        combined: ErrorRatio {
            errors: hv.errors + diag.errors,
            sampled: hv.sampled + diag.sampled,
        },
    })
}

/// Runs one endpoint to completion over `transport`.
pub fn run_endpoint(
    role: Role,
    stream: TimestampStream,
    cfg: SessionConfig,
    transport: &mut dyn Transport,
) -> Result<SessionReport, ProtocolError> {
    Endpoint::new(role, stream, cfg)?.run(transport)
}

#[cfg(test)]
mod tests {
    use super::super::transport::{KillSwitch, MemoryLink};
    use super::*;
    use crate::simulator::{simulate_session, SimConfig};
    use std::thread;

    fn sessions(duration: f64, seed: u64) -> (TimestampStream, TimestampStream) {
        let s = simulate_session(&SimConfig {
            duration,
            seed,
            ..SimConfig::night()
        })
        .unwrap();
        (s.a, s.b)
    }

    fn cfg(seed: u64) -> SessionConfig {
        SessionConfig {
            seed,
            ..SessionConfig::default()
        }
    }

    type Outcome = (Endpoint, Result<SessionReport, ProtocolError>, Vec<u8>);

    /// Side B sends, side A receives.
    fn run_pair(sender: Endpoint, receiver: Endpoint, setup: impl Fn(&KillSwitch)) -> (Outcome, Outcome) {
        let (mut ls, mut lr, kill) = MemoryLink::pair();
        setup(&kill);
        let go = |mut ep: Endpoint, mut link: MemoryLink| {
            thread::spawn(move || {
                let r = ep.run(&mut link);
                let bytes = link.transcript().lock().unwrap().clone();
                drop(link);
                (ep, r, bytes)
            })
        };
        let hs = go(sender, std::mem::replace(&mut ls, MemoryLink::pair().0));
        let hr = go(receiver, std::mem::replace(&mut lr, MemoryLink::pair().0));
        (hs.join().unwrap(), hr.join().unwrap())
    }

    fn endpoints(a: TimestampStream, b: TimestampStream, c: SessionConfig) -> (Endpoint, Endpoint) {
        (
            Endpoint::new(Role::Sender, b, c).unwrap(),
            Endpoint::new(Role::Receiver, a, c).unwrap(),
        )
    }

    #[test]
    fn loopback_session_agrees_and_is_deterministic() {
        let (a, b) = sessions(40.0, 21);
        let (s, r) = endpoints(a.clone(), b.clone(), cfg(21));
        let ((_, rs, ts), (_, rr, tr)) = run_pair(s, r, |_| {});
        let (rs, rr) = (rs.unwrap(), rr.unwrap());
        assert!(rs.key.n_out() > 0, "{rr}");
        assert_eq!(rs.key.bits, rr.key.bits);
        assert_eq!(rs.key.blocks, rr.key.blocks);
        assert!(rr.chunks.iter().all(|c| c.locked));
        assert_eq!(rr.acquisitions, 1);

        let (s, r) = endpoints(a, b, cfg(21));
        let ((_, _, ts2), (_, _, tr2)) = run_pair(s, r, |_| {});
        assert_eq!(ts, ts2);
        assert_eq!(tr, tr2);
    }

    #[test]
    fn high_qber_pauses_but_keeps_lock() {
        let s = simulate_session(&SimConfig {
            duration: 30.0,
            seed: 5,
            source: crate::linkmodel::SourceParams {
                v_hv: 0.7,
                v_diag: 0.7,
                ..SimConfig::night().source
            },
            ..SimConfig::night()
        })
        .unwrap();
        let (snd, rcv) = endpoints(s.a, s.b, cfg(5));
        let ((_, rs, _), (_, rr, _)) = run_pair(snd, rcv, |_| {});
        let (rs, rr) = (rs.unwrap(), rr.unwrap());
        assert_eq!(rs.key.n_out(), 0);
        assert!(!rr.blocks.is_empty());
        for b in &rr.blocks {
            assert_eq!(b.outcome, KeyOutcome::Paused);
            let q = b.qber.unwrap().q();
            assert!((q - 0.15).abs() < 0.02, "{q}");
        }
        assert!(rr.chunks.iter().all(|c| c.locked));
    }

    #[test]
    fn resumes_after_transport_loss() {
        let (a, b) = sessions(50.0, 33);
        let (s, r) = endpoints(a, b, cfg(33));
        // Frames 0-1 are the handshake; a few chunks and a key block follow.
        let ((s, rs, _), (r, rr, _)) = run_pair(s, r, |k| k.kill_after(40));
        assert!(rs.unwrap_err().is_transport());
        assert!(rr.unwrap_err().is_transport());
        let ((_, rs, _), (_, rr, _)) = run_pair(s, r, |_| {});
        let (rs, rr) = (rs.unwrap(), rr.unwrap());
        assert_eq!(rs.key.bits, rr.key.bits);
        assert!(rr.key.n_out() > 0);
        assert_eq!(rr.connections, 2);
        assert!(rr.acquisitions >= 2, "{rr}");
        assert!(rr.chunks.iter().all(|c| c.locked));
        assert_eq!(rr.chunks.len(), 5);
    }
}
