//! Length-prefixed framing.
//!
//! A frame is an unsigned 64-bit little-endian payload length followed by
//! the payload bytes, verbatim. Nothing else travels on a relay connection.

use std::io::{self, Read, Write};

use bytes::{Bytes, BytesMut};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Size of the length prefix in bytes.
pub const HEADER_LEN: usize = 8;

/// Default upper bound on a single payload: 1 GiB.
pub const DEFAULT_MAX_FRAME: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {len} bytes exceeds the maximum of {max} bytes")]
    TooLarge { len: u64, max: u64 },
    #[error("stream ended inside a frame ({got} of {expected} bytes)")]
    Truncated { expected: u64, got: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FrameError {
    /// After these errors the byte stream can no longer be resynchronised.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, FrameError::Io(e) if e.kind() == io::ErrorKind::Interrupted)
    }
}

/// Header bytes for a payload of `len` bytes.
pub fn header(len: u64) -> [u8; HEADER_LEN] {
    len.to_le_bytes()
}

/// Encodes one frame with the default maximum size.
pub fn encode_frame(payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    encode_frame_with_max(payload, DEFAULT_MAX_FRAME)
}

pub fn encode_frame_with_max(payload: &[u8], max: u64) -> Result<Vec<u8>, FrameError> {
    let len = payload.len() as u64;
    if len > max {
        return Err(FrameError::TooLarge { len, max });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header(len));
    out.extend_from_slice(payload);
    Ok(out)
}

/// Reads exactly `buf.len()` bytes, reporting how many arrived before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads the next frame from a blocking byte source.
///
/// Returns `Ok(None)` on a clean end of stream between frames. Nothing past
/// the end of the frame is consumed.
pub fn decode_frame<R: Read>(r: &mut R, max: u64) -> Result<Option<Vec<u8>>, FrameError> {
    let mut hdr = [0u8; HEADER_LEN];
    let got = read_full(r, &mut hdr)?;
    if got == 0 {
        return Ok(None);
    }
    if got < HEADER_LEN {
        return Err(FrameError::Truncated {
            expected: HEADER_LEN as u64,
            got: got as u64,
        });
    }
    let len = u64::from_le_bytes(hdr);
    if len > max {
        return Err(FrameError::TooLarge { len, max });
    }
    // Grow while reading so a lying header cannot force a huge allocation up front.
    let mut payload = Vec::with_capacity(len.min(1 << 20) as usize);
    let got = r.by_ref().take(len).read_to_end(&mut payload)? as u64;
    if got < len {
        return Err(FrameError::Truncated {
            expected: len,
            got,
        });
    }
    Ok(Some(payload))
}

/// Writes one frame to a blocking sink.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8], max: u64) -> Result<(), FrameError> {
    let len = payload.len() as u64;
    if len > max {
        return Err(FrameError::TooLarge { len, max });
    }
    w.write_all(&header(len))?;
    w.write_all(payload)?;
    Ok(())
}

/// Async counterpart of [`decode_frame`].
pub async fn read_frame<R>(r: &mut R, max: u64) -> Result<Option<Bytes>, FrameError>
where
    R: AsyncRead + Unpin,
{
    let mut hdr = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = r.read(&mut hdr[got..]).await?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(FrameError::Truncated {
                expected: HEADER_LEN as u64,
                got: got as u64,
            });
        }
        got += n;
    }
    let len = u64::from_le_bytes(hdr);
    if len > max {
        return Err(FrameError::TooLarge { len, max });
    }
    let len_us = len as usize;
    let mut buf = BytesMut::with_capacity(len_us.min(64 << 20));
    while buf.len() < len_us {
        if buf.capacity() == buf.len() {
            buf.reserve((len_us - buf.len()).min(64 << 20));
        }
        let want = len_us - buf.len();
        let n = {
            let mut limited = (&mut *r).take(want as u64);
            limited.read_buf(&mut buf).await?
        };
        if n == 0 {
            return Err(FrameError::Truncated {
                expected: len,
                got: buf.len() as u64,
            });
        }
    }
    Ok(Some(buf.freeze()))
}

/// Async counterpart of [`write_frame`]. Does not flush.
pub async fn write_frame_async<W>(w: &mut W, payload: &[u8], max: u64) -> Result<(), FrameError>
where
    W: AsyncWrite + Unpin,
{
    let len = payload.len() as u64;
    if len > max {
        return Err(FrameError::TooLarge { len, max });
    }
    w.write_all(&header(len)).await?;
    w.write_all(payload).await?;
    Ok(())
}

/// Splits a byte slice holding whole frames back into payloads.
pub fn split_frames(mut bytes: &[u8], max: u64) -> Result<Vec<Vec<u8>>, FrameError> {
    let mut out = Vec::new();
    while let Some(p) = decode_frame(&mut bytes, max)? {
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_abc() {
        let f = encode_frame(b"abc").unwrap();
        assert_eq!(f, [3, 0, 0, 0, 0, 0, 0, 0, b'a', b'b', b'c']);
    }

    #[test]
    fn empty_payload_is_eight_zero_bytes() {
        assert_eq!(encode_frame(b"").unwrap(), vec![0u8; 8]);
        let mut src: &[u8] = &[0u8; 8];
        assert_eq!(decode_frame(&mut src, DEFAULT_MAX_FRAME).unwrap(), Some(vec![]));
        assert_eq!(decode_frame(&mut src, DEFAULT_MAX_FRAME).unwrap(), None);
    }

    #[test]
    fn one_mib_round_trip() {
        use rand::RngCore;
        let mut payload = vec![0u8; 1 << 20];
        rand::rng().fill_bytes(&mut payload);
        let f = encode_frame(&payload).unwrap();
        assert_eq!(f.len(), 1_048_584);
        let mut src = f.as_slice();
        assert_eq!(decode_frame(&mut src, DEFAULT_MAX_FRAME).unwrap().unwrap(), payload);
        assert!(src.is_empty());
    }

    #[test]
    fn short_header_is_truncation() {
        let mut src: &[u8] = &[1, 2, 3, 4, 5, 6, 7];
        assert!(matches!(
            decode_frame(&mut src, DEFAULT_MAX_FRAME),
            Err(FrameError::Truncated { expected: 8, got: 7 })
        ));
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut f = encode_frame(b"hello").unwrap();
        f.pop();
        let mut src = f.as_slice();
        assert!(matches!(
            decode_frame(&mut src, DEFAULT_MAX_FRAME),
            Err(FrameError::Truncated { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn oversize_rejected_both_ways() {
        assert!(matches!(
            encode_frame_with_max(&[0u8; 17], 16),
            Err(FrameError::TooLarge { len: 17, max: 16 })
        ));
        let mut src: &[u8] = &u64::MAX.to_le_bytes();
        assert!(matches!(
            decode_frame(&mut src, DEFAULT_MAX_FRAME),
            Err(FrameError::TooLarge { .. })
        ));
    }

    #[tokio::test]
    async fn async_reader_matches_sync() {
        let mut wire = Vec::new();
        for p in [&b"x"[..], b"", b"second frame"] {
            wire.extend(encode_frame(p).unwrap());
        }
        let mut src = wire.as_slice();
        let mut got = Vec::new();
        while let Some(p) = read_frame(&mut src, DEFAULT_MAX_FRAME).await.unwrap() {
            got.push(p.to_vec());
        }
        assert_eq!(got, split_frames(&wire, DEFAULT_MAX_FRAME).unwrap());
        wire.truncate(wire.len() - 1);
        let mut src = wire.as_slice();
        let last = loop {
            match read_frame(&mut src, DEFAULT_MAX_FRAME).await {
                Ok(Some(_)) => continue,
                other => break other,
            }
        };
        assert!(matches!(last, Err(FrameError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn concatenation_splits_back(payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..300), 0..100)) {
            // Oracle: concatenate headers and payloads by hand.
            let mut wire = Vec::new();
            for p in &payloads {
                wire.extend_from_slice(&(p.len() as u64).to_le_bytes());
                wire.extend_from_slice(p);
            }
            prop_assert_eq!(split_frames(&wire, DEFAULT_MAX_FRAME).unwrap(), payloads);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = split_frames(&bytes, 1024);
        }
    }
}
