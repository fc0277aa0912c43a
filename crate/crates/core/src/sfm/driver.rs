use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::{Connection, Frame, SfmError, TransportConfig, TransportErrorKind, MAX_CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub max_frame_hint: usize,
    pub ordered: bool,
    pub reliable: bool,
}

const BUNDLED: Capabilities = Capabilities {
    max_frame_hint: MAX_CHUNK,
    ordered: true,
    reliable: true,
};

/// Outbound half of a driver link.
pub trait FrameTx: Send {
    /// Hands a frame to the driver, blocking while its window is full.
    fn send(&mut self, frame: Frame) -> Result<(), TransportErrorKind>;
    fn close(&mut self);
}

/// Inbound half of a driver link.
pub trait FrameRx: Send {
    /// `Ok(None)` when nothing arrived within `timeout`.
    fn recv(&mut self, timeout: Duration) -> Result<Option<Frame>, SfmError>;
}

/// Client-side connection factory.
pub trait Driver: Send + Sync {
    fn capabilities(&self) -> Capabilities;
    fn open(&self, config: &TransportConfig) -> Result<Connection, SfmError>;
}

/// Server-side connection factory.
pub trait Acceptor: Send + Sync {
    fn accept(&self, config: &TransportConfig) -> Result<Connection, SfmError>;
}

struct ChannelTx(Option<SyncSender<Result<Frame, SfmError>>>);

impl FrameTx for ChannelTx {
    fn send(&mut self, frame: Frame) -> Result<(), TransportErrorKind> {
        let tx = self.0.as_ref().ok_or(TransportErrorKind::Closed)?;
        tx.send(Ok(frame)).map_err(|_| TransportErrorKind::Closed)
    }

    fn close(&mut self) {
        self.0 = None;
    }
}

struct ChannelRx(Receiver<Result<Frame, SfmError>>);

impl FrameRx for ChannelRx {
    fn recv(&mut self, timeout: Duration) -> Result<Option<Frame>, SfmError> {
        match self.0.recv_timeout(timeout) {
            Ok(Ok(frame)) => Ok(Some(frame)),
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                Err(SfmError::transport(TransportErrorKind::Closed))
            }
        }
    }
}

/// Two connected in-memory endpoints. Each direction is a bounded channel
/// holding at most `config.window` frames.
pub fn memory_pair(config: &TransportConfig) -> (Connection, Connection) {
    let (a_tx, b_rx) = mpsc::sync_channel(config.window);
    let (b_tx, a_rx) = mpsc::sync_channel(config.window);
    let a = Connection::new(
        Box::new(ChannelTx(Some(a_tx))),
        Box::new(ChannelRx(a_rx)),
        BUNDLED,
        *config,
    );
    let b = Connection::new(
        Box::new(ChannelTx(Some(b_tx))),
        Box::new(ChannelRx(b_rx)),
        BUNDLED,
        *config,
    );
    (a, b)
}

/// In-process driver: `open` creates a pair and hands the far end to the
/// matching [`MemoryAcceptor`].
pub struct MemoryDriver {
    pending: Mutex<mpsc::Sender<Connection>>,
}

pub struct MemoryAcceptor {
    incoming: Mutex<Receiver<Connection>>,
}

impl MemoryDriver {
    pub fn new() -> (MemoryDriver, MemoryAcceptor) {
        let (tx, rx) = mpsc::channel();
        (
            MemoryDriver {
                pending: Mutex::new(tx),
            },
            MemoryAcceptor {
                incoming: Mutex::new(rx),
            },
        )
    }
}

impl Driver for MemoryDriver {
    fn capabilities(&self) -> Capabilities {
        BUNDLED
    }

    fn open(&self, config: &TransportConfig) -> Result<Connection, SfmError> {
        config.validate()?;
        let (near, far) = memory_pair(config);
        self.pending
            .lock()
            .expect("driver lock")
            .send(far)
            .map_err(|_| SfmError::transport(TransportErrorKind::Closed))?;
        Ok(near)
    }
}

impl Acceptor for MemoryAcceptor {
    fn accept(&self, config: &TransportConfig) -> Result<Connection, SfmError> {
        let rx = self.incoming.lock().expect("acceptor lock");
        match rx.recv_timeout(config.timeout()) {
            Ok(conn) => Ok(conn),
            Err(RecvTimeoutError::Timeout) => Err(SfmError::StreamTimeout {
                stream_id: None,
                idle_ms: config.timeout_ms,
            }),
            Err(RecvTimeoutError::Disconnected) => {
                Err(SfmError::transport(TransportErrorKind::Closed))
            }
        }
    }
}

fn io_err(e: std::io::Error) -> SfmError {
    SfmError::transport(TransportErrorKind::Io(e.to_string()))
}

/// A writer thread drains a bounded queue onto the socket and a reader
/// thread parses frames into another, so socket I/O never blocks the
/// caller beyond the window.
fn tcp_connection(stream: TcpStream, config: &TransportConfig) -> Result<Connection, SfmError> {
    stream.set_nodelay(true).map_err(io_err)?;
    // bounds how long close() can wait on a peer that stopped reading
    stream.set_write_timeout(Some(config.timeout())).map_err(io_err)?;
    let read_half = stream.try_clone().map_err(io_err)?;

    let (out_tx, out_rx) = mpsc::sync_channel::<Frame>(config.window);
    let (err_tx, err_rx) = mpsc::sync_channel::<String>(1);
    let writer = thread::Builder::new()
        .name("sfm-tcp-writer".into())
        .spawn(move || {
            let mut w = BufWriter::with_capacity(256 << 10, &stream);
            let result = (|| -> std::io::Result<()> {
                while let Ok(frame) = out_rx.recv() {
                    frame.write_to(&mut w)?;
                    while let Ok(frame) = out_rx.try_recv() {
                        frame.write_to(&mut w)?;
                    }
                    w.flush()?;
                }
                w.flush()
            })();
            drop(w);
            if let Err(e) = result {
                let _ = err_tx.try_send(e.to_string());
            }
            let _ = stream.shutdown(Shutdown::Write);
        })
        .map_err(io_err)?;

    let (in_tx, in_rx) = mpsc::sync_channel(config.window);
    thread::Builder::new()
        .name("sfm-tcp-reader".into())
        .spawn(move || {
            let mut r = BufReader::with_capacity(256 << 10, read_half);
            loop {
                let item = match Frame::read_from(&mut r) {
                    Ok(Some(frame)) => frame,
                    Ok(None) => break,
                    Err(e) => Err(io_err(e)),
                };
                let stop = item.is_err();
                if in_tx.send(item).is_err() || stop {
                    break;
                }
            }
        })
        .map_err(io_err)?;

    Ok(Connection::new(
        Box::new(TcpTx {
            frames: Some(out_tx),
            errors: err_rx,
            writer: Some(writer),
        }),
        Box::new(ChannelRx(in_rx)),
        BUNDLED,
        *config,
    ))
}

struct TcpTx {
    frames: Option<SyncSender<Frame>>,
    errors: Receiver<String>,
    writer: Option<thread::JoinHandle<()>>,
}

impl FrameTx for TcpTx {
    fn send(&mut self, frame: Frame) -> Result<(), TransportErrorKind> {
        let tx = self.frames.as_ref().ok_or(TransportErrorKind::Closed)?;
        let result = match tx.try_send(frame) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(frame)) => tx.send(frame).map_err(|_| ()),
            Err(TrySendError::Disconnected(_)) => Err(()),
        };
        result.map_err(|()| match self.errors.try_recv() {
            Ok(msg) => TransportErrorKind::Io(msg),
            Err(_) => TransportErrorKind::Closed,
        })
    }

    /// Waits until queued frames are on the socket, so a process may exit
    /// right after closing.
    fn close(&mut self) {
        self.frames = None;
        if let Some(writer) = self.writer.take() {
            let _ = writer.join();
        }
    }
}

impl Drop for TcpTx {
    fn drop(&mut self) {
        self.close();
    }
}

pub struct TcpDriver {
    addr: String,
}

impl TcpDriver {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into() }
    }
}

impl Driver for TcpDriver {
    fn capabilities(&self) -> Capabilities {
        BUNDLED
    }

    fn open(&self, config: &TransportConfig) -> Result<Connection, SfmError> {
        config.validate()?;
        let addrs: Vec<SocketAddr> = self.addr.to_socket_addrs().map_err(io_err)?.collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, config.timeout()) {
                // a loopback connect to a free ephemeral port can land on itself
                Ok(stream) if stream.local_addr().ok() == stream.peer_addr().ok() => {
                    last = Some(std::io::Error::new(
                        std::io::ErrorKind::ConnectionRefused,
                        "connected to own socket",
                    ));
                }
                Ok(stream) => return tcp_connection(stream, config),
                Err(e) => last = Some(e),
            }
        }
        Err(io_err(last.unwrap_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::NotFound, "address resolved to nothing")
        })))
    }
}

pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: &str) -> Result<Self, SfmError> {
        Ok(Self {
            listener: TcpListener::bind(addr).map_err(io_err)?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, SfmError> {
        self.listener.local_addr().map_err(io_err)
    }
}

impl Acceptor for TcpAcceptor {
    fn accept(&self, config: &TransportConfig) -> Result<Connection, SfmError> {
        config.validate()?;
        let (stream, _) = self.listener.accept().map_err(io_err)?;
        tcp_connection(stream, config)
    }
}
