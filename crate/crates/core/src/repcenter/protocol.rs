//! Framed binary protocol between the computation and parameter sides.
//!
//! Frame: magic `0x4D 0x4D`, one opcode byte, u32 little-endian payload
//! length, payload. Keys are u64 LE; vectors are a u16 LE dim followed by
//! that many f32 LE values.
//!
//! | opcode | payload |
//! |---|---|
//! | `0x01` GET | u32 count, count × u64 key |
//! | `0x02` PUT | u64 key, vector |
//! | `0x03` STATS | empty |
//! | `0x81` GET_RESP | u64 version, u32 count, count × (u8 hit, vector) |
//! | `0x82` PUT_ACK | u32 pending, u64 version |
//! | `0x83` STATS_RESP | u64 version, u64 entries, u16 dim, u32 pending, u64 rss bytes |
//! | `0xFF` ERR | u8 code, UTF-8 message |

use std::io::{self, Read, Write};

pub const MAGIC: [u8; 2] = [0x4D, 0x4D];
pub const GET: u8 = 0x01;
pub const PUT: u8 = 0x02;
pub const STATS: u8 = 0x03;
pub const GET_RESP: u8 = 0x81;
pub const PUT_ACK: u8 = 0x82;
pub const STATS_RESP: u8 = 0x83;
pub const ERR: u8 = 0xFF;

/// Largest payload either side accepts.
pub const MAX_PAYLOAD: u32 = 64 << 20;

/// Codes carried in ERR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    LengthMismatch = 1,
    BadMagic = 2,
    UnknownOpcode = 3,
    DimMismatch = 4,
    TooLarge = 5,
    Internal = 6,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: u8, payload: Vec<u8>) -> Self {
        Self { opcode, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.opcode);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn error(code: ErrorCode, message: &str) -> Self {
        let mut p = vec![code as u8];
        p.extend_from_slice(message.as_bytes());
        Self::new(ERR, p)
    }
}

#[derive(Debug)]
pub enum ReadError {
    /// Peer closed the connection between frames.
    Closed,
    BadMagic([u8; 2]),
    TooLarge(u32),
    Io(io::Error),
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, ReadError> {
    let mut header = [0u8; 7];
    let mut filled = 0;
    while filled < header.len() {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(ReadError::Closed),
            Ok(0) => return Err(ReadError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ReadError::Io(e)),
        }
    }
    if header[..2] != MAGIC {
        return Err(ReadError::BadMagic([header[0], header[1]]));
    }
    let len = u32::from_le_bytes(header[3..7].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(ReadError::TooLarge(len));
    }
    let mut payload = vec![0; len as usize];
    r.read_exact(&mut payload).map_err(ReadError::Io)?;
    Ok(Frame::new(header[2], payload))
}

/// Little-endian cursor over a payload; every read checks the remaining length.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn vector(&mut self) -> Option<Vec<f32>> {
        let dim = self.u16()? as usize;
        let raw = self.take(4 * dim)?;
        Some(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.bytes)
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

fn put_vector(out: &mut Vec<u8>, v: &[f32]) {
    out.extend_from_slice(&(v.len() as u16).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_get(keys: &[u64]) -> Frame {
    let mut p = Vec::with_capacity(4 + 8 * keys.len());
    p.extend_from_slice(&(keys.len() as u32).to_le_bytes());
    for k in keys {
        p.extend_from_slice(&k.to_le_bytes());
    }
    Frame::new(GET, p)
}

/// Keys of a GET payload, or `None` if the count disagrees with the length.
pub fn decode_get(payload: &[u8]) -> Option<Vec<u64>> {
    let mut c = Cursor::new(payload);
    let count = c.u32()? as usize;
    if payload.len() != 4 + 8 * count {
        return None;
    }
    (0..count).map(|_| c.u64()).collect()
}

pub fn encode_put(key: u64, values: &[f32]) -> Frame {
    let mut p = Vec::with_capacity(10 + 4 * values.len());
    p.extend_from_slice(&key.to_le_bytes());
    put_vector(&mut p, values);
    Frame::new(PUT, p)
}

pub fn decode_put(payload: &[u8]) -> Option<(u64, Vec<f32>)> {
    let mut c = Cursor::new(payload);
    let key = c.u64()?;
    let v = c.vector()?;
    c.is_empty().then_some((key, v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GetResponse {
    pub version: u64,
    /// `(hit, values)` per requested key, in request order.
    pub entries: Vec<(bool, Vec<f32>)>,
}

impl GetResponse {
    pub fn encode(&self) -> Frame {
        let dim = self.entries.first().map_or(0, |e| e.1.len());
        let mut p = Vec::with_capacity(12 + self.entries.len() * (3 + 4 * dim));
        p.extend_from_slice(&self.version.to_le_bytes());
        p.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (hit, v) in &self.entries {
            p.push(u8::from(*hit));
            put_vector(&mut p, v);
        }
        Frame::new(GET_RESP, p)
    }

    pub fn decode(payload: &[u8]) -> Option<Self> {
        let mut c = Cursor::new(payload);
        let version = c.u64()?;
        let count = c.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let hit = match c.u8()? {
                0 => false,
                1 => true,
                _ => return None,
            };
            entries.push((hit, c.vector()?));
        }
        c.is_empty().then_some(Self { version, entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutAck {
    pub pending: u32,
    pub version: u64,
}

impl PutAck {
    pub fn encode(&self) -> Frame {
        let mut p = Vec::with_capacity(12);
        p.extend_from_slice(&self.pending.to_le_bytes());
        p.extend_from_slice(&self.version.to_le_bytes());
        Frame::new(PUT_ACK, p)
    }

    pub fn decode(payload: &[u8]) -> Option<Self> {
        let mut c = Cursor::new(payload);
        let ack = Self {
            pending: c.u32()?,
            version: c.u64()?,
        };
        c.is_empty().then_some(ack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsResponse {
    pub version: u64,
    pub entries: u64,
    pub dim: u16,
    pub pending: u32,
    /// Resident set size of the serving process, 0 where unavailable.
    pub rss_bytes: u64,
}

impl StatsResponse {
    pub fn encode(&self) -> Frame {
        let mut p = Vec::with_capacity(30);
        p.extend_from_slice(&self.version.to_le_bytes());
        p.extend_from_slice(&self.entries.to_le_bytes());
        p.extend_from_slice(&self.dim.to_le_bytes());
        p.extend_from_slice(&self.pending.to_le_bytes());
        p.extend_from_slice(&self.rss_bytes.to_le_bytes());
        Frame::new(STATS_RESP, p)
    }

    pub fn decode(payload: &[u8]) -> Option<Self> {
        let mut c = Cursor::new(payload);
        let s = Self {
            version: c.u64()?,
            entries: c.u64()?,
            dim: c.u16()?,
            pending: c.u32()?,
            rss_bytes: c.u64()?,
        };
        c.is_empty().then_some(s)
    }
}

/// `(code, message)` of an ERR payload.
pub fn decode_error(payload: &[u8]) -> Option<(u8, String)> {
    let mut c = Cursor::new(payload);
    let code = c.u8()?;
    Some((code, String::from_utf8_lossy(c.rest()).into_owned()))
}

/// Resident set size from `/proc/self/status`, if available.
pub fn resident_bytes() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmRSS:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map_or(0, |kb| kb * 1024)
}
