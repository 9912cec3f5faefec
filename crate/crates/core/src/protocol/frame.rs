//! Length-prefixed frames: 1-byte type, 4-byte LE payload length, 8-byte LE
//! sequence number, payload.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const FRAME_HEADER_LEN: usize = 13;
/// Upper bound on a payload, to reject corrupt length fields early.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameType {
    Timing = 1,
    Parity = 2,
    QberSample = 3,
    Seed = 4,
    Control = 5,
    Hash = 6,
}

impl FrameType {
    pub const ALL: [FrameType; 6] = [
        FrameType::Timing,
        FrameType::Parity,
        FrameType::QberSample,
        FrameType::Seed,
        FrameType::Control,
        FrameType::Hash,
    ];

    pub fn from_u8(v: u8) -> Option<FrameType> {
        FrameType::ALL.into_iter().find(|t| *t as u8 == v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub seq: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Frame {
    pub fn new(kind: FrameType, seq: u64, payload: Vec<u8>) -> Self {
        Frame { kind, seq, payload }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), FrameError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(FrameError::TooLarge(self.payload.len()));
        }
        let mut header = [0u8; FRAME_HEADER_LEN];
        header[0] = self.kind as u8;
        header[1..5].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        header[5..13].copy_from_slice(&self.seq.to_le_bytes());
        out.write_all(&header)?;
        out.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Frame, FrameError> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        input.read_exact(&mut header)?;
        let kind = FrameType::from_u8(header[0]).ok_or(FrameError::UnknownType(header[0]))?;
        let len = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(FrameError::TooLarge(len));
        }
        let seq = u64::from_le_bytes(header[5..13].try_into().unwrap());
        let mut payload = vec![0u8; len];
        input.read_exact(&mut payload)?;
        Ok(Frame { kind, seq, payload })
    }
}

/// Split of a byte transcript into frames.
pub fn parse_transcript(mut bytes: &[u8]) -> Result<Vec<Frame>, FrameError> {
    let mut frames = Vec::new();
    while !bytes.is_empty() {
        frames.push(Frame::read_from(&mut bytes)?);
    }
    Ok(frames)
}
