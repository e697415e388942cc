use std::io;
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use crate::wire;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("timed out waiting for peer")]
    Timeout,
    #[error("peer closed the connection")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Moves whole frames between two peers.
pub trait Transport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Vec<u8>, TransportError>;
}

/// In-process transport used by tests and the virtual-clock harness.
pub struct MemoryTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

pub fn memory_pair(timeout: Duration) -> (MemoryTransport, MemoryTransport) {
    let (atx, brx) = mpsc::channel();
    let (btx, arx) = mpsc::channel();
    (
        MemoryTransport {
            tx: atx,
            rx: arx,
            timeout,
        },
        MemoryTransport {
            tx: btx,
            rx: brx,
            timeout,
        },
    )
}

impl Transport for MemoryTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx.send(frame.to_vec()).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(f) => Ok(f),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

/// Frames over a TCP stream, same byte layout as the memory transport.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream, timeout: Option<Duration>) -> io::Result<Self> {
        stream.set_read_timeout(timeout)?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }

    pub fn into_inner(self) -> TcpStream {
        self.stream
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        wire::write_frame(&mut self.stream, frame)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        wire::read_frame(&mut self.stream).map_err(|e| match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout,
            io::ErrorKind::UnexpectedEof => TransportError::Closed,
            _ => TransportError::Io(e),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{client_handshake, generate_pki, server_handshake, Validity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::net::TcpListener;

    #[test]
    fn handshake_and_record_over_loopback() {
        let pki = generate_pki("svc", Validity::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let cert = pki.certificate().clone();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut t = TcpTransport::new(s, Some(Duration::from_secs(5))).unwrap();
            let mut sess = server_handshake(&mut t, &pki).unwrap();
            let rec = crate::channel::Record::from_frame(&t.recv().unwrap()).unwrap();
            let msg = sess.open_record(&rec).unwrap();
            t.send(&sess.seal_record(&msg).to_frame()).unwrap();
        });
        let mut t = TcpTransport::new(TcpStream::connect(addr).unwrap(), Some(Duration::from_secs(5))).unwrap();
        let mut sess = client_handshake(&mut t, &cert).unwrap();
        t.send(&sess.seal_record(b"echo").to_frame()).unwrap();
        let rec = crate::channel::Record::from_frame(&t.recv().unwrap()).unwrap();
        assert_eq!(sess.open_record(&rec).unwrap(), b"echo");
        server.join().unwrap();
    }
}
