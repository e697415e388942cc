//! AECS request/response frames.
//!
//! ```text
//! CreateServicePki  0x10  service_id:str | measurement[32]
//! GetCertificate    0x11  service_id:str
//! ProvisionPki      0x12  service_id:str | report:bytes | temp_pk[32]
//! FetchStorageKey   0x13  report:bytes | temp_pk[32]
//! DeleteServicePki  0x14  service_id:str
//! Ok                0x20  body:bytes   (certificate, ciphertext, or empty)
//! Error             0x21  code:u8 | message:str
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::channel::{Certificate, Transport, TransportError};
use crate::substrate::{EnclaveReport, Measurement};
use crate::wire::{decode_frame, encode_frame, Reader, WireError, Writer};

use super::{AecsError, AecsReplica, FetchKeyRequest, KeySource, ProvisionRequest};

mod kind {
    pub const CREATE: u8 = 0x10;
    pub const GET_CERT: u8 = 0x11;
    pub const PROVISION: u8 = 0x12;
    pub const FETCH_KEY: u8 = 0x13;
    pub const DELETE: u8 = 0x14;
    pub const OK: u8 = 0x20;
    pub const ERR: u8 = 0x21;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AecsRequest {
    CreateServicePki {
        service_id: String,
        measurement: Measurement,
    },
    GetCertificate {
        service_id: String,
    },
    ProvisionPki(ProvisionRequest),
    FetchStorageKey(FetchKeyRequest),
    DeleteServicePki {
        service_id: String,
    },
}

impl AecsRequest {
    pub fn to_frame(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let k = match self {
            AecsRequest::CreateServicePki {
                service_id,
                measurement,
            } => {
                w.str(service_id).fixed(&measurement.0);
                kind::CREATE
            }
            AecsRequest::GetCertificate { service_id } => {
                w.str(service_id);
                kind::GET_CERT
            }
            AecsRequest::ProvisionPki(req) => {
                w.str(&req.service_id)
                    .bytes(&req.report.to_bytes())
                    .fixed(&req.temp_public_key);
                kind::PROVISION
            }
            AecsRequest::FetchStorageKey(req) => {
                w.bytes(&req.report.to_bytes()).fixed(&req.temp_public_key);
                kind::FETCH_KEY
            }
            AecsRequest::DeleteServicePki { service_id } => {
                w.str(service_id);
                kind::DELETE
            }
        };
        encode_frame(k, &w.into_inner())
    }

    pub fn from_frame(frame: &[u8]) -> Result<Self, WireError> {
        let (k, payload) = decode_frame(frame)?;
        let mut r = Reader::new(payload);
        let req = match k {
            kind::CREATE => AecsRequest::CreateServicePki {
                service_id: r.str()?.to_owned(),
                measurement: Measurement(r.fixed()?),
            },
            kind::GET_CERT => AecsRequest::GetCertificate {
                service_id: r.str()?.to_owned(),
            },
            kind::PROVISION => AecsRequest::ProvisionPki(ProvisionRequest {
                service_id: r.str()?.to_owned(),
                report: EnclaveReport::from_bytes(r.bytes()?)?,
                temp_public_key: r.fixed()?,
            }),
            kind::FETCH_KEY => AecsRequest::FetchStorageKey(FetchKeyRequest {
                report: EnclaveReport::from_bytes(r.bytes()?)?,
                temp_public_key: r.fixed()?,
            }),
            kind::DELETE => AecsRequest::DeleteServicePki {
                service_id: r.str()?.to_owned(),
            },
            other => return Err(WireError::Kind(other)),
        };
        r.finish()?;
        Ok(req)
    }
}

fn error_code(e: &AecsError) -> u8 {
    match e {
        AecsError::ServiceExists => 1,
        AecsError::UnknownService => 2,
        AecsError::StoreConflictExhausted => 3,
        AecsError::AttestationMismatch => 4,
        AecsError::BindingMismatch => 5,
        AecsError::Unavailable => 6,
        AecsError::Malformed(_) => 7,
        _ => 0,
    }
}

fn error_from_code(code: u8, msg: &str) -> AecsError {
    match code {
        1 => AecsError::ServiceExists,
        2 => AecsError::UnknownService,
        3 => AecsError::StoreConflictExhausted,
        4 => AecsError::AttestationMismatch,
        5 => AecsError::BindingMismatch,
        6 => AecsError::Unavailable,
        _ => AecsError::Remote(msg.to_owned()),
    }
}

fn ok_frame(body: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(body);
    encode_frame(kind::OK, &w.into_inner())
}

fn err_frame(e: &AecsError) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(error_code(e)).str(&e.to_string());
    encode_frame(kind::ERR, &w.into_inner())
}

/// Dispatches one request frame against a replica and returns the response
/// frame. Never fails; errors travel as `Error` frames.
pub fn handle_frame(replica: &AecsReplica, frame: &[u8]) -> Vec<u8> {
    let result = AecsRequest::from_frame(frame)
        .map_err(AecsError::from)
        .and_then(|req| match req {
            AecsRequest::CreateServicePki {
                service_id,
                measurement,
            } => replica
                .create_service_pki(&service_id, measurement)
                .map(|c| c.to_bytes()),
            AecsRequest::GetCertificate { service_id } => replica.get_certificate(&service_id).map(|c| c.to_bytes()),
            AecsRequest::ProvisionPki(req) => replica.provision_pki(&req),
            AecsRequest::FetchStorageKey(req) => replica.fetch_storage_key(&req),
            AecsRequest::DeleteServicePki { service_id } => replica.delete_service_pki(&service_id).map(|_| Vec::new()),
        });
    match result {
        Ok(body) => ok_frame(&body),
        Err(e) => err_frame(&e),
    }
}

fn parse_response(frame: &[u8]) -> Result<Vec<u8>, AecsError> {
    let (k, payload) = decode_frame(frame)?;
    let mut r = Reader::new(payload);
    match k {
        kind::OK => {
            let body = r.bytes()?.to_vec();
            r.finish()?;
            Ok(body)
        }
        kind::ERR => {
            let code = r.u8()?;
            let msg = r.str()?;
            r.finish()?;
            Err(error_from_code(code, msg))
        }
        other => Err(WireError::Kind(other).into()),
    }
}

/// Serves requests on one connection until the peer disconnects.
pub fn serve_connection<T: Transport + ?Sized>(replica: &AecsReplica, transport: &mut T) -> Result<(), TransportError> {
    loop {
        match transport.recv() {
            Ok(frame) => transport.send(&handle_frame(replica, &frame))?,
            Err(TransportError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}

/// Request/response carrier.
pub trait RpcChannel: Send + Sync {
    fn call(&self, request: &[u8]) -> Result<Vec<u8>, AecsError>;
}

/// Records every frame that crosses a channel, for byte scans.
#[derive(Debug, Clone, Default)]
pub struct WireCapture {
    frames: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl WireCapture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, frame: &[u8]) {
        self.frames.lock().expect("capture poisoned").push(frame.to_vec());
    }

    pub fn frames(&self) -> Vec<Vec<u8>> {
        self.frames.lock().expect("capture poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.frames.lock().expect("capture poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The set of AECS replicas reachable behind one service address.
#[derive(Debug, Clone, Default)]
pub struct AecsDirectory {
    replicas: Arc<RwLock<Vec<Arc<AecsReplica>>>>,
}

impl AecsDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, replica: Arc<AecsReplica>) {
        self.replicas.write().expect("directory poisoned").push(replica);
    }

    pub fn clear(&self) {
        self.replicas.write().expect("directory poisoned").clear();
    }

    pub fn serving(&self) -> Vec<Arc<AecsReplica>> {
        self.replicas
            .read()
            .expect("directory poisoned")
            .iter()
            .filter(|r| r.is_serving())
            .cloned()
            .collect()
    }
}

/// In-process channel that round-robins over serving replicas. Frames are
/// fully encoded and decoded, and optionally captured.
#[derive(Debug, Clone)]
pub struct Loopback {
    directory: AecsDirectory,
    capture: Option<WireCapture>,
    cursor: Arc<AtomicUsize>,
}

impl Loopback {
    pub fn new(directory: AecsDirectory) -> Self {
        Loopback {
            directory,
            capture: None,
            cursor: Arc::default(),
        }
    }

    pub fn with_capture(mut self, capture: WireCapture) -> Self {
        self.capture = Some(capture);
        self
    }
}

impl RpcChannel for Loopback {
    fn call(&self, request: &[u8]) -> Result<Vec<u8>, AecsError> {
        let serving = self.directory.serving();
        if serving.is_empty() {
            return Err(AecsError::Unavailable);
        }
        let i = self.cursor.fetch_add(1, Ordering::Relaxed) % serving.len();
        let response = handle_frame(&serving[i], request);
        if let Some(c) = &self.capture {
            c.record(request);
            c.record(&response);
        }
        Ok(response)
    }
}

/// Channel over a framed transport such as TCP.
pub struct StreamChannel<T> {
    transport: Mutex<T>,
    capture: Option<WireCapture>,
}

impl<T: Transport + Send> StreamChannel<T> {
    pub fn new(transport: T) -> Self {
        StreamChannel {
            transport: Mutex::new(transport),
            capture: None,
        }
    }

    pub fn with_capture(mut self, capture: WireCapture) -> Self {
        self.capture = Some(capture);
        self
    }
}

impl<T: Transport + Send> RpcChannel for StreamChannel<T> {
    fn call(&self, request: &[u8]) -> Result<Vec<u8>, AecsError> {
        let mut t = self.transport.lock().expect("transport poisoned");
        let io = |e: TransportError| match e {
            TransportError::Closed | TransportError::Timeout => AecsError::Unavailable,
            other => AecsError::Remote(other.to_string()),
        };
        t.send(request).map_err(io)?;
        let response = t.recv().map_err(io)?;
        if let Some(c) = &self.capture {
            c.record(request);
            c.record(&response);
        }
        Ok(response)
    }
}

/// Typed client for the AECS RPC surface.
#[derive(Clone)]
pub struct AecsClient {
    channel: Arc<dyn RpcChannel>,
}

impl std::fmt::Debug for AecsClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AecsClient")
    }
}

impl AecsClient {
    pub fn new(channel: Arc<dyn RpcChannel>) -> Self {
        AecsClient { channel }
    }

    fn call(&self, req: &AecsRequest) -> Result<Vec<u8>, AecsError> {
        parse_response(&self.channel.call(&req.to_frame())?)
    }

    pub fn create_service_pki(&self, service_id: &str, measurement: Measurement) -> Result<Certificate, AecsError> {
        let body = self.call(&AecsRequest::CreateServicePki {
            service_id: service_id.to_owned(),
            measurement,
        })?;
        Certificate::from_bytes(&body).map_err(|_| AecsError::Corrupt("certificate"))
    }

    pub fn get_certificate(&self, service_id: &str) -> Result<Certificate, AecsError> {
        let body = self.call(&AecsRequest::GetCertificate {
            service_id: service_id.to_owned(),
        })?;
        Certificate::from_bytes(&body).map_err(|_| AecsError::Corrupt("certificate"))
    }

    pub fn provision_pki(&self, req: &ProvisionRequest) -> Result<Vec<u8>, AecsError> {
        self.call(&AecsRequest::ProvisionPki(req.clone()))
    }

    pub fn delete_service_pki(&self, service_id: &str) -> Result<(), AecsError> {
        self.call(&AecsRequest::DeleteServicePki {
            service_id: service_id.to_owned(),
        })
        .map(|_| ())
    }
}

impl KeySource for AecsClient {
    fn fetch_storage_key(&self, req: &FetchKeyRequest) -> Result<Vec<u8>, AecsError> {
        self.call(&AecsRequest::FetchStorageKey(req.clone()))
    }
}
