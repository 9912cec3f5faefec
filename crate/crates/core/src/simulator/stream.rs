//! Timestamp streams and their on-disk format.
//!
//! A file starts with the magic `QKDTS001`, followed by the party id and the
//! event count as little-endian `u32`s (16 header bytes in total). Each event is
//! one little-endian `u64`: bits 63..4 hold the tick (125 ps units), bits 3..0
//! the detector index.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::TICK_SECONDS;

pub const MAGIC: &[u8; 8] = b"QKDTS001";
pub const HEADER_LEN: usize = 16;

/// Detector indices, shared by both sides.
pub const H: u8 = 0;
pub const P45: u8 = 1;
pub const V: u8 = 2;
pub const M45: u8 = 3;
pub const DETECTOR_NAMES: [&str; 4] = ["H", "+45", "V", "-45"];

/// Largest tick representable in the 60-bit tick field.
pub const MAX_TICK: u64 = (1 << 60) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    HV,
    Diagonal,
}

impl Basis {
    pub fn of(detector: u8) -> Basis {
        if detector & 1 == 0 {
            Basis::HV
        } else {
            Basis::Diagonal
        }
    }

    pub fn index(self) -> usize {
        match self {
            Basis::HV => 0,
            Basis::Diagonal => 1,
        }
    }
}

/// Raw measurement bit of a detector: 0 for {H, +45°}, 1 for {V, −45°}.
pub fn raw_bit(detector: u8) -> bool {
    detector >= 2
}

/// Detector registering `bit` in `basis`.
pub fn detector_for(basis: Basis, bit: bool) -> u8 {
    basis.index() as u8 + if bit { 2 } else { 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    /// Source side; its detectors see the pair source directly.
    A,
    /// Receiver behind the free-space channel.
    B,
}

impl Party {
    pub fn id(self) -> u32 {
        match self {
            Party::A => 0,
            Party::B => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Party> {
        match id {
            0 => Some(Party::A),
            1 => Some(Party::B),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimestampEvent {
    pub tick: u64,
    pub detector: u8,
}

impl TimestampEvent {
    pub fn new(tick: u64, detector: u8) -> Self {
        TimestampEvent { tick, detector }
    }

    pub fn word(self) -> u64 {
        (self.tick << 4) | u64::from(self.detector)
    }

    pub fn from_word(word: u64) -> Self {
        TimestampEvent {
            tick: word >> 4,
            detector: (word & 0xf) as u8,
        }
    }

    pub fn seconds(self) -> f64 {
        self.tick as f64 * TICK_SECONDS
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("bad magic: not a timestamp file")]
    BadMagic,
    #[error("truncated: header promises {expected} events, file holds {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("event {index} is not after its predecessor")]
    NonMonotone { index: usize },
    #[error("event {index} names detector {detector}")]
    InvalidDetector { index: usize, detector: u8 },
    #[error("unknown party id {0}")]
    UnknownParty(u32),
    #[error("tick {0} does not fit the 60-bit tick field")]
    TickOverflow(u64),
    #[error("{0} events exceed the format limit")]
    TooManyEvents(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StreamError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            StreamError::BadMagic => 1,
            StreamError::Truncated { .. } => 2,
            StreamError::NonMonotone { .. } => 3,
            StreamError::InvalidDetector { .. } => 4,
            StreamError::UnknownParty(_) => 5,
            StreamError::TickOverflow(_) => 6,
            StreamError::TooManyEvents(_) => 7,
            StreamError::Io(_) => 8,
        }
    }
}

/// Time-ordered detector clicks of one party.
///
/// Events are stored as packed words, which sort by tick and then by detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampStream {
    party: Party,
    words: Vec<u64>,
}

impl TimestampStream {
    pub fn new(party: Party) -> Self {
        TimestampStream {
            party,
            words: Vec::new(),
        }
    }

    /// Wraps packed words, checking order and detector range.
    pub fn from_words(party: Party, words: Vec<u64>) -> Result<Self, StreamError> {
        validate(&words)?;
        Ok(TimestampStream { party, words })
    }

    pub(crate) fn from_words_unchecked(party: Party, words: Vec<u64>) -> Self {
        debug_assert!(validate(&words).is_ok());
        TimestampStream { party, words }
    }

    pub fn from_events<I>(party: Party, events: I) -> Result<Self, StreamError>
    where
        I: IntoIterator<Item = TimestampEvent>,
    {
        let mut words = Vec::new();
        for e in events {
            if e.tick > MAX_TICK {
                return Err(StreamError::TickOverflow(e.tick));
            }
            words.push(e.word());
        }
        Self::from_words(party, words)
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> TimestampEvent {
        TimestampEvent::from_word(self.words[i])
    }

    #[inline]
    pub fn tick(&self, i: usize) -> u64 {
        self.words[i] >> 4
    }

    #[inline]
    pub fn detector(&self, i: usize) -> u8 {
        (self.words[i] & 0xf) as u8
    }

    pub fn iter(&self) -> impl Iterator<Item = TimestampEvent> + '_ {
        self.words.iter().map(|&w| TimestampEvent::from_word(w))
    }

    /// Tick of the first event, if any.
    pub fn start_tick(&self) -> Option<u64> {
        self.words.first().map(|w| w >> 4)
    }

    pub fn end_tick(&self) -> Option<u64> {
        self.words.last().map(|w| w >> 4)
    }

    /// Index range of events with `lo <= tick < hi`.
    pub fn tick_range(&self, lo: u64, hi: u64) -> Range<usize> {
        let start = self.words.partition_point(|&w| (w >> 4) < lo);
        let end = self.words.partition_point(|&w| (w >> 4) < hi);
        start..end.max(start)
    }

    /// Copy of the events in `range`.
    pub fn slice(&self, range: Range<usize>) -> TimestampStream {
        TimestampStream {
            party: self.party,
            words: self.words[range].to_vec(),
        }
    }

    /// Every tick moved by `delta`; events that would leave the tick range are dropped.
    pub fn shifted(&self, delta: i64) -> TimestampStream {
        let words = self
            .words
            .iter()
            .filter_map(|&w| {
                let t = (w >> 4) as i128 + i128::from(delta);
                (0..=MAX_TICK as i128)
                    .contains(&t)
                    .then(|| ((t as u64) << 4) | (w & 0xf))
            })
            .collect();
        TimestampStream {
            party: self.party,
            words,
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), StreamError> {
        let count =
            u32::try_from(self.words.len()).map_err(|_| StreamError::TooManyEvents(self.len()))?;
        out.write_all(MAGIC)?;
        out.write_all(&self.party.id().to_le_bytes())?;
        out.write_all(&count.to_le_bytes())?;
        for w in &self.words {
            out.write_all(&w.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, StreamError> {
        let mut header = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            let n = input.read(&mut header[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got < MAGIC.len() || &header[..8] != MAGIC {
            return Err(StreamError::BadMagic);
        }
        if got < HEADER_LEN {
            return Err(StreamError::Truncated {
                expected: 0,
                found: 0,
            });
        }
        let party_id = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let party = Party::from_id(party_id).ok_or(StreamError::UnknownParty(party_id))?;
        let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;

        let mut body = Vec::new();
        input.read_to_end(&mut body)?;
        let found = body.len() / 8;
        if found < count || body.len() % 8 != 0 || found > count {
            return Err(StreamError::Truncated {
                expected: count as u64,
                found: found as u64,
            });
        }
        let words: Vec<u64> = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_words(party, words)
    }
}

fn validate(words: &[u64]) -> Result<(), StreamError> {
    for (i, &w) in words.iter().enumerate() {
        let detector = (w & 0xf) as u8;
        if detector > 3 {
            return Err(StreamError::InvalidDetector { index: i, detector });
        }
        if i > 0 && w <= words[i - 1] {
            return Err(StreamError::NonMonotone { index: i });
        }
    }
    Ok(())
}

pub fn write_stream(stream: &TimestampStream, path: impl AsRef<Path>) -> Result<(), StreamError> {
    stream.write_to(BufWriter::new(File::create(path)?))
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<TimestampStream, StreamError> {
    TimestampStream::read_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(s: &TimestampStream) -> Vec<u8> {
        let mut v = Vec::new();
        s.write_to(&mut v).unwrap();
        v
    }

    #[test]
    fn empty_stream_is_header_only() {
        let s = TimestampStream::new(Party::B);
        let b = bytes(&s);
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(TimestampStream::read_from(&b[..]).unwrap(), s);
    }

    #[test]
    fn single_event_layout() {
        let s = TimestampStream::from_events(Party::A, [TimestampEvent::new(1, 3)]).unwrap();
        let b = bytes(&s);
        assert_eq!(b.len(), HEADER_LEN + 8);
        assert_eq!(&b[HEADER_LEN..], &0x13u64.to_le_bytes());
        assert_eq!(TimestampStream::read_from(&b[..]).unwrap(), s);
    }

    #[test]
    fn read_errors_are_distinct() {
        let good = bytes(
            &TimestampStream::from_events(
                Party::A,
                [TimestampEvent::new(5, 0), TimestampEvent::new(9, 2)],
            )
            .unwrap(),
        );

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let e1 = TimestampStream::read_from(&bad_magic[..]).unwrap_err();
        assert!(matches!(e1, StreamError::BadMagic));

        let e2 = TimestampStream::read_from(&good[..good.len() - 3]).unwrap_err();
        assert!(matches!(e2, StreamError::Truncated { .. }));

        let mut swapped = good.clone();
        let (first, second) = swapped[HEADER_LEN..].split_at_mut(8);
        first.swap_with_slice(second);
        let e3 = TimestampStream::read_from(&swapped[..]).unwrap_err();
        assert!(matches!(e3, StreamError::NonMonotone { index: 1 }));

        assert!(e1.code() != e2.code() && e2.code() != e3.code() && e1.code() != e3.code());
    }

    #[test]
    fn detector_conventions() {
        assert_eq!(Basis::of(H), Basis::HV);
        assert_eq!(Basis::of(V), Basis::HV);
        assert_eq!(Basis::of(P45), Basis::Diagonal);
        assert_eq!(Basis::of(M45), Basis::Diagonal);
        assert!(!raw_bit(H) && !raw_bit(P45) && raw_bit(V) && raw_bit(M45));
        for d in 0..4 {
            assert_eq!(detector_for(Basis::of(d), raw_bit(d)), d);
        }
    }

    #[test]
    fn tick_range_and_shift() {
        let s = TimestampStream::from_events(
            Party::B,
            (0..10).map(|i| TimestampEvent::new(100 * i, (i % 4) as u8)),
        )
        .unwrap();
        assert_eq!(s.tick_range(150, 450), 2..5);
        let t = s.shifted(-150);
        assert_eq!(t.len(), 8);
        assert_eq!(t.tick(0), 50);
    }
}
