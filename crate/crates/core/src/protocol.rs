//! Wire protocol for out-of-process score models, version 1.
//!
//! Little-endian frames over a byte stream:
//!
//! ```text
//! request:  "SCM1" | u32 length L | f64 sigma | L x f32 samples
//! response: "SCM1" | u32 length L | L x f32 scores
//! error:    "SCER" | u32 code
//! ```
//!
//! One request gets exactly one response. A zero-length request is the
//! handshake; peers answer it with a zero-length response.

use crate::error::ScoreTransportError;
use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 4] = b"SCM1";
pub const ERROR_MAGIC: &[u8; 4] = b"SCER";

/// Error code a peer should report for a request it cannot serve.
pub const ERR_BAD_REQUEST: u32 = 1;

pub fn write_request<W: Write>(w: &mut W, samples: &[f32], sigma: f64) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&sigma.to_le_bytes())?;
    for s in samples {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

/// Server side: reads one request. Returns `None` on a clean end of stream.
pub fn read_request<R: Read>(r: &mut R) -> io::Result<Option<(Vec<f32>, f64)>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    if &magic != MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad request magic {magic:?}"),
        ));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let len = u32::from_le_bytes(len4) as usize;
    let mut sig8 = [0u8; 8];
    r.read_exact(&mut sig8)?;
    let sigma = f64::from_le_bytes(sig8);
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf)?;
    let samples = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some((samples, sigma)))
}

pub fn write_response<W: Write>(w: &mut W, scores: &[f32]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(scores.len() as u32).to_le_bytes())?;
    for s in scores {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_error<W: Write>(w: &mut W, code: u32) -> io::Result<()> {
    w.write_all(ERROR_MAGIC)?;
    w.write_all(&code.to_le_bytes())?;
    Ok(())
}

/// Client side: reads one response or error frame.
pub fn read_response<R: Read>(r: &mut R) -> Result<Vec<f32>, ScoreTransportError> {
    let mut magic = [0u8; 4];
    read_exact_transport(r, &mut magic)?;
    if &magic == ERROR_MAGIC {
        let mut code4 = [0u8; 4];
        read_exact_transport(r, &mut code4)?;
        return Err(ScoreTransportError::PeerError(u32::from_le_bytes(code4)));
    }
    if &magic != MAGIC {
        return Err(ScoreTransportError::MalformedFrame(format!(
            "unexpected magic {magic:?}"
        )));
    }
    let mut len4 = [0u8; 4];
    read_exact_transport(r, &mut len4)?;
    let len = u32::from_le_bytes(len4) as usize;
    let mut buf = vec![0u8; len * 4];
    read_exact_transport(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_exact_transport<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ScoreTransportError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ScoreTransportError::PeerExited(" (stream closed mid-frame)".into())
        } else {
            ScoreTransportError::MalformedFrame(e.to_string())
        }
    })
}

/// Serves score requests until end of stream. The callback maps samples and
/// sigma to scores, or to a protocol error code.
pub fn serve_scores<R, W, F>(r: &mut R, w: &mut W, mut f: F) -> io::Result<()>
where
    R: Read,
    W: Write,
    F: FnMut(&[f32], f64) -> Result<Vec<f32>, u32>,
{
    while let Some((samples, sigma)) = read_request(r)? {
        match f(&samples, sigma) {
            Ok(scores) => write_response(w, &scores)?,
            Err(code) => write_error(w, code)?,
        }
        w.flush()?;
    }
    Ok(())
}
