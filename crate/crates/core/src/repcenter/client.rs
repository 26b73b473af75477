use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};

use parking_lot::Mutex;

use super::protocol::{
    decode_error, encode_get, encode_put, read_frame, write_frame, Frame, GetResponse, PutAck, ReadError,
    StatsResponse, ERR, GET_RESP, PUT_ACK, STATS, STATS_RESP,
};
use super::store::widen;
use super::RepError;
use crate::ciubm::{CiubmError, MmEntry, MmLookup};

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// Computation-side connection to a parameter server. Requests on one client
/// are serialized; open several clients for concurrency.
pub struct ParamClient {
    conn: Mutex<Conn>,
    dim: usize,
}

/// Vectors returned by a remote GET.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteLookup {
    pub version: u64,
    pub entries: Vec<MmEntry>,
}

impl ParamClient {
    /// Connects and learns the store dimension with a STATS request.
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, RepError> {
        let stream = TcpStream::connect(addr).map_err(|e| RepError::Io(format!("connect: {e}")))?;
        let _ = stream.set_nodelay(true);
        let write_half = stream.try_clone().map_err(|e| RepError::Io(e.to_string()))?;
        let client = Self {
            conn: Mutex::new(Conn {
                reader: BufReader::new(stream),
                writer: BufWriter::new(write_half),
            }),
            dim: 0,
        };
        let stats = client.stats()?;
        Ok(Self {
            dim: stats.dim as usize,
            ..client
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sends one frame and returns the reply, turning ERR frames into errors.
    pub fn request(&self, frame: &Frame, expect: u8) -> Result<Frame, RepError> {
        let mut c = self.conn.lock();
        write_frame(&mut c.writer, frame).map_err(|e| RepError::Io(format!("send: {e}")))?;
        let reply = read_frame(&mut c.reader).map_err(|e| match e {
            ReadError::Closed => RepError::Io("server closed the connection".into()),
            ReadError::Io(e) => RepError::Io(e.to_string()),
            ReadError::BadMagic(_) => RepError::Malformed("reply has bad magic".into()),
            ReadError::TooLarge(n) => RepError::Malformed(format!("reply of {n} bytes")),
        })?;
        if reply.opcode == ERR {
            let (code, message) = decode_error(&reply.payload).unwrap_or((0, String::new()));
            return Err(RepError::Remote { code, message });
        }
        if reply.opcode != expect {
            return Err(RepError::Malformed(format!(
                "expected opcode 0x{expect:02x}, got 0x{:02x}",
                reply.opcode
            )));
        }
        Ok(reply)
    }

    pub fn remote_lookup(&self, keys: &[u64]) -> Result<RemoteLookup, RepError> {
        let reply = self.request(&encode_get(keys), GET_RESP)?;
        let resp = GetResponse::decode(&reply.payload).ok_or_else(|| RepError::Malformed("GET_RESP payload".into()))?;
        if resp.entries.len() != keys.len() {
            return Err(RepError::Malformed(format!(
                "asked for {} keys, got {}",
                keys.len(),
                resp.entries.len()
            )));
        }
        Ok(RemoteLookup {
            version: resp.version,
            entries: resp
                .entries
                .into_iter()
                .map(|(hit, v)| MmEntry { vector: widen(&v), hit })
                .collect(),
        })
    }

    pub fn remote_put(&self, key: u64, values: &[f32]) -> Result<PutAck, RepError> {
        let reply = self.request(&encode_put(key, values), PUT_ACK)?;
        PutAck::decode(&reply.payload).ok_or_else(|| RepError::Malformed("PUT_ACK payload".into()))
    }

    pub fn stats(&self) -> Result<StatsResponse, RepError> {
        let reply = self.request(&Frame::new(STATS, Vec::new()), STATS_RESP)?;
        StatsResponse::decode(&reply.payload).ok_or_else(|| RepError::Malformed("STATS_RESP payload".into()))
    }
}

impl MmLookup for ParamClient {
    fn d_mm(&self) -> usize {
        self.dim
    }

    fn lookup(&self, keys: &[u64]) -> Result<Vec<MmEntry>, CiubmError> {
        self.remote_lookup(keys)
            .map(|r| r.entries)
            .map_err(|e| CiubmError::Lookup(e.to_string()))
    }
}
