//! Length-prefixed binary encoding shared by every on-wire and on-disk format.
//!
//! Integers are big-endian. Variable-length fields carry a `u32` length
//! prefix, strings a `u16` one. A frame is
//!
//! ```text
//! +---------+------+-------------+-----------------+
//! | version | kind | len (u32be) | payload (len B) |
//! +---------+------+-------------+-----------------+
//! ```

use std::io::{self, Read, Write};

pub const WIRE_VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: usize = 6;
/// Upper bound on a single frame payload.
pub const MAX_FRAME_LEN: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("truncated input")]
    Truncated,
    #[error("trailing bytes after message")]
    Trailing,
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("unexpected frame kind {0}")]
    Kind(u8),
    #[error("frame too large: {0} bytes")]
    TooLarge(usize),
    #[error("invalid utf-8 string")]
    Utf8,
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn fixed(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.fixed()?))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.fixed()?))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.fixed()?))
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        if n > MAX_FRAME_LEN {
            return Err(WireError::TooLarge(n));
        }
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str, WireError> {
        let n = self.u16()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| WireError::Utf8)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn finish(&self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Trailing)
        }
    }
}

pub fn encode_frame(kind: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.push(WIRE_VERSION);
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits a complete frame into `(kind, payload)`. The declared length must
/// match the buffer exactly.
pub fn decode_frame(frame: &[u8]) -> Result<(u8, &[u8]), WireError> {
    if frame.len() < FRAME_HEADER_LEN {
        return Err(WireError::Truncated);
    }
    if frame[0] != WIRE_VERSION {
        return Err(WireError::Version(frame[0]));
    }
    let len = u32::from_be_bytes([frame[2], frame[3], frame[4], frame[5]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len));
    }
    let payload = &frame[FRAME_HEADER_LEN..];
    match payload.len().cmp(&len) {
        std::cmp::Ordering::Less => Err(WireError::Truncated),
        std::cmp::Ordering::Greater => Err(WireError::Trailing),
        std::cmp::Ordering::Equal => Ok((frame[1], payload)),
    }
}

pub fn expect_frame(frame: &[u8], kind: u8) -> Result<&[u8], WireError> {
    let (k, payload) = decode_frame(frame)?;
    if k != kind {
        return Err(WireError::Kind(k));
    }
    Ok(payload)
}

/// Reads one frame from a byte stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    r.read_exact(&mut header)?;
    let len = u32::from_be_bytes([header[2], header[3], header[4], header[5]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + len);
    frame.extend_from_slice(&header);
    frame.resize(FRAME_HEADER_LEN + len, 0);
    r.read_exact(&mut frame[FRAME_HEADER_LEN..])?;
    Ok(frame)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame)?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn frame_round_trip(kind in any::<u8>(), payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let f = encode_frame(kind, &payload);
            let (k, p) = decode_frame(&f).unwrap();
            prop_assert_eq!(k, kind);
            prop_assert_eq!(p, &payload[..]);
            let mut cursor = std::io::Cursor::new(f.clone());
            prop_assert_eq!(read_frame(&mut cursor).unwrap(), f);
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut f = encode_frame(3, b"abc");
        f.push(0);
        assert_eq!(decode_frame(&f), Err(WireError::Trailing));
        assert_eq!(decode_frame(&f[..7]), Err(WireError::Truncated));
        let mut g = encode_frame(3, b"abc");
        g[0] = 9;
        assert_eq!(decode_frame(&g), Err(WireError::Version(9)));
    }

    #[test]
    fn reader_fields() {
        let mut w = Writer::new();
        w.u8(1).u16(2).u32(3).u64(4).str("hi").bytes(b"xyz").fixed(&[9, 9]);
        let buf = w.into_inner();
        let mut r = Reader::new(&buf);
        assert_eq!(r.u8().unwrap(), 1);
        assert_eq!(r.u16().unwrap(), 2);
        assert_eq!(r.u32().unwrap(), 3);
        assert_eq!(r.u64().unwrap(), 4);
        assert_eq!(r.str().unwrap(), "hi");
        assert_eq!(r.bytes().unwrap(), b"xyz");
        assert_eq!(r.fixed::<2>().unwrap(), [9, 9]);
        r.finish().unwrap();
    }
}
