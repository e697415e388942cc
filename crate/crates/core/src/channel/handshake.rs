use ring::hmac;

use super::record::{Role, Session, TrafficKeys};
use super::{kind, Certificate, ChannelError, ServicePki, Transport, SIGNATURE_LEN};
use crate::crypto::{self, TempKeyPair};
use crate::wire::{encode_frame, expect_frame, Reader, Writer};

const SIG_CONTEXT: &[u8] = b"enclave-serve/handshake/server-signature/v1";

/// Client side of the handshake, between sending ClientHello and receiving
/// ServerHello.
pub struct ClientHandshake {
    eph: TempKeyPair,
    client_hello: Vec<u8>,
    expected_cert: Vec<u8>,
}

impl ClientHandshake {
    /// Returns the state and the ClientHello frame to send.
    pub fn start(expected_cert: &Certificate) -> (Self, Vec<u8>) {
        let eph = TempKeyPair::generate();
        let mut w = Writer::new();
        w.fixed(&crypto::random_bytes::<32>()).fixed(&eph.public_key());
        let client_hello = encode_frame(kind::CLIENT_HELLO, &w.into_inner());
        let frame = client_hello.clone();
        (
            ClientHandshake {
                eph,
                client_hello,
                expected_cert: expected_cert.to_bytes(),
            },
            frame,
        )
    }

    /// Consumes the ServerHello and returns the session plus the
    /// ClientFinished frame.
    pub fn finish(self, server_hello: &[u8]) -> Result<(Session, Vec<u8>), ChannelError> {
        let payload = expect_frame(server_hello, kind::SERVER_HELLO)?;
        let mut r = Reader::new(payload);
        let _server_random: [u8; 32] = r.fixed()?;
        let server_pub: [u8; 32] = r.fixed()?;
        let cert_bytes = r.bytes()?;
        let signed_len = server_hello.len() - SIGNATURE_LEN;
        let sig: [u8; SIGNATURE_LEN] = r.fixed()?;
        r.finish()?;

        if cert_bytes != self.expected_cert.as_slice() {
            return Err(ChannelError::CertificateMismatch);
        }
        let cert = Certificate::from_bytes(cert_bytes)?;
        let signed = crypto::sha256(&[&self.client_hello, &server_hello[..signed_len]]);
        if !super::verify_signature(&cert.public_key, &[SIG_CONTEXT, &signed].concat(), &sig) {
            return Err(ChannelError::SignatureInvalid);
        }
        let shared = self.eph.agree(&server_pub).map_err(|_| ChannelError::KeyAgreement)?;
        let transcript = crypto::sha256(&[&self.client_hello, server_hello]);
        let keys = TrafficKeys::derive(&shared, &transcript);
        let mac = hmac::sign(&hmac::Key::new(hmac::HMAC_SHA256, &keys.finished), &transcript);
        let finished = encode_frame(kind::CLIENT_FINISHED, mac.as_ref());
        Ok((Session::new(Role::Client, keys, transcript), finished))
    }
}

/// Entry point for the server side.
pub struct ServerHandshake;

/// Server state awaiting ClientFinished.
pub struct PendingServer {
    keys: TrafficKeys,
    transcript: [u8; 32],
}

impl ServerHandshake {
    /// Processes a ClientHello and returns the ServerHello frame.
    pub fn respond(pki: &ServicePki, client_hello: &[u8]) -> Result<(PendingServer, Vec<u8>), ChannelError> {
        let payload = expect_frame(client_hello, kind::CLIENT_HELLO)?;
        let mut r = Reader::new(payload);
        let _client_random: [u8; 32] = r.fixed()?;
        let client_pub: [u8; 32] = r.fixed()?;
        r.finish()?;

        let eph = TempKeyPair::generate();
        let mut w = Writer::new();
        w.fixed(&crypto::random_bytes::<32>())
            .fixed(&eph.public_key())
            .bytes(&pki.certificate().to_bytes());
        let unsigned = w.into_inner();

        // The frame header commits to the final length, signature included.
        let mut frame = encode_frame(
            kind::SERVER_HELLO,
            &[unsigned.as_slice(), &[0u8; SIGNATURE_LEN]].concat(),
        );
        let signed_len = frame.len() - SIGNATURE_LEN;
        let signed = crypto::sha256(&[client_hello, &frame[..signed_len]]);
        let sig = pki.sign(&[SIG_CONTEXT, &signed].concat());
        frame[signed_len..].copy_from_slice(&sig);

        let shared = eph.agree(&client_pub).map_err(|_| ChannelError::KeyAgreement)?;
        let transcript = crypto::sha256(&[client_hello, &frame]);
        Ok((
            PendingServer {
                keys: TrafficKeys::derive(&shared, &transcript),
                transcript,
            },
            frame,
        ))
    }
}

impl PendingServer {
    pub fn finish(self, client_finished: &[u8]) -> Result<Session, ChannelError> {
        let mac = expect_frame(client_finished, kind::CLIENT_FINISHED)?;
        hmac::verify(
            &hmac::Key::new(hmac::HMAC_SHA256, &self.keys.finished),
            &self.transcript,
            mac,
        )
        .map_err(|_| ChannelError::FinishedInvalid)?;
        Ok(Session::new(Role::Server, self.keys, self.transcript))
    }
}

/// Runs the client side over a blocking transport.
pub fn client_handshake<T: Transport + ?Sized>(
    transport: &mut T,
    expected_cert: &Certificate,
) -> Result<Session, ChannelError> {
    let (state, hello) = ClientHandshake::start(expected_cert);
    transport.send(&hello)?;
    let server_hello = transport.recv()?;
    let (session, finished) = state.finish(&server_hello)?;
    transport.send(&finished)?;
    Ok(session)
}

pub fn server_handshake<T: Transport + ?Sized>(transport: &mut T, pki: &ServicePki) -> Result<Session, ChannelError> {
    let hello = transport.recv()?;
    let (pending, server_hello) = ServerHandshake::respond(pki, &hello)?;
    transport.send(&server_hello)?;
    let finished = transport.recv()?;
    pending.finish(&finished)
}
