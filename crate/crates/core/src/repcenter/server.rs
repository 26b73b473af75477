//! Parameter-side TCP server: one thread per connection plus a ticker that
//! flushes the ingestion window once it ages out.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::protocol::{
    decode_get, decode_put, read_frame, resident_bytes, write_frame, ErrorCode, Frame, GetResponse, PutAck, ReadError,
    StatsResponse, GET, PUT, STATS,
};
use super::{EmbeddingStore, RepError, WindowBuffer};

/// A running server; dropping it stops accepting and joins the ticker.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    ticker: Option<JoinHandle<()>>,
    store: Arc<EmbeddingStore>,
    window: Arc<WindowBuffer>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<EmbeddingStore> {
        &self.store
    }

    /// Flushes the ingestion window immediately.
    pub fn flush(&self) -> Result<usize, RepError> {
        self.window.flush(&self.store)
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    /// Blocks until the accept loop ends (it only ends on shutdown).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        if let Some(h) = self.ticker.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

/// Binds `bind` and serves GET, PUT and STATS until the handle is dropped.
pub fn serve_parameters(
    store: Arc<EmbeddingStore>,
    window: Arc<WindowBuffer>,
    bind: &str,
) -> Result<ServerHandle, RepError> {
    let listener = TcpListener::bind(bind).map_err(|e| RepError::Io(format!("bind {bind}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| RepError::Io(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));

    let accept = {
        let (store, window, stop) = (store.clone(), window.clone(), stop.clone());
        thread::Builder::new()
            .name("repcenter-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            let (store, window) = (store.clone(), window.clone());
                            let _ = thread::Builder::new()
                                .name("repcenter-conn".into())
                                .spawn(move || handle_connection(stream, &store, &window));
                        }
                        Err(e) => warn!("accept failed: {e}"),
                    }
                }
            })
            .map_err(|e| RepError::Io(e.to_string()))?
    };

    let ticker = {
        let (store, window, stop) = (store.clone(), window.clone(), stop.clone());
        let tick = (window.max_age / 4).clamp(Duration::from_millis(1), Duration::from_millis(50));
        thread::Builder::new()
            .name("repcenter-window".into())
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    thread::sleep(tick);
                    if let Err(e) = window.flush_if_stale(&store) {
                        warn!("window flush failed: {e}");
                    }
                }
            })
            .map_err(|e| RepError::Io(e.to_string()))?
    };

    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
        ticker: Some(ticker),
        store,
        window,
    })
}

fn handle_connection(stream: TcpStream, store: &EmbeddingStore, window: &WindowBuffer) {
    let _ = stream.set_nodelay(true);
    let peer = stream.peer_addr().ok();
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    loop {
        let (reply, close) = match read_frame(&mut reader) {
            Ok(frame) => (respond(&frame, store, window), false),
            Err(ReadError::Closed) => break,
            Err(ReadError::BadMagic(m)) => (
                Frame::error(ErrorCode::BadMagic, &format!("bad magic {:02x}{:02x}", m[0], m[1])),
                true,
            ),
            Err(ReadError::TooLarge(n)) => (
                Frame::error(ErrorCode::TooLarge, &format!("payload of {n} bytes")),
                true,
            ),
            Err(ReadError::Io(e)) => {
                debug!("connection {peer:?} dropped: {e}");
                break;
            }
        };
        if write_frame(&mut writer, &reply).is_err() || close {
            break;
        }
    }
}

fn respond(frame: &Frame, store: &EmbeddingStore, window: &WindowBuffer) -> Frame {
    match frame.opcode {
        GET => {
            let Some(keys) = decode_get(&frame.payload) else {
                return Frame::error(ErrorCode::LengthMismatch, "GET payload length does not match key count");
            };
            let snap = store.snapshot();
            let zeros = vec![0.0f32; store.dim()];
            let entries = keys
                .iter()
                .map(|k| match snap.entries.get(k) {
                    Some(v) => (true, v.values.to_vec()),
                    None => (false, zeros.clone()),
                })
                .collect();
            GetResponse {
                version: snap.version,
                entries,
            }
            .encode()
        }
        PUT => {
            let Some((key, values)) = decode_put(&frame.payload) else {
                return Frame::error(ErrorCode::LengthMismatch, "PUT payload length does not match dim");
            };
            match window.submit_vector(store, key, values) {
                Ok(ack) => PutAck {
                    pending: ack.pending as u32,
                    version: ack.version,
                }
                .encode(),
                Err(e @ RepError::DimMismatch { .. }) => Frame::error(ErrorCode::DimMismatch, &e.to_string()),
                Err(e) => Frame::error(ErrorCode::Internal, &e.to_string()),
            }
        }
        STATS => {
            let snap = store.snapshot();
            StatsResponse {
                version: snap.version,
                entries: snap.entries.len() as u64,
                dim: store.dim() as u16,
                pending: window.pending() as u32,
                rss_bytes: resident_bytes(),
            }
            .encode()
        }
        op => Frame::error(ErrorCode::UnknownOpcode, &format!("unknown opcode 0x{op:02x}")),
    }
}
