//! Classical channel: framing, timing encoding, transports and the two-party
//! session.

pub mod encoding;
pub mod endpoint;
pub mod frame;
pub mod transport;

pub use encoding::{decode_timing, delta_entropy, encode_stream, encode_timing, measure_overhead, EncodedTimingBlock, EncodingError, Overhead};
pub use frame::{Frame, FrameError, FrameType};
pub use transport::{KillSwitch, MemoryLink, TcpTransport, Transport, TransportError};
pub use endpoint::{run_endpoint, ChunkStat, Endpoint, ProtocolError, Role, SessionReport};
