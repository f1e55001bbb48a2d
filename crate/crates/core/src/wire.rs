//! Binary wire format for the two protocol messages.
//!
//! All integers are little-endian. Both messages share a six-byte prefix:
//! magic `CCQF`, version `1`, and a message type.
//!
//! ShadowSet (type 1):
//! `iteration u32 | n_qubits u16 | p u32 | M u32 | M2 u16` followed by
//! `(2p+1)·M` snapshots in canonical entry order, one byte per qubit,
//! `byte = 2·basis + outcome` with X = 0, Y = 1, Z = 2.
//!
//! LocalGradient (type 2):
//! `iteration u32 | client_id u16 | m_i u32 | p u32 | p × f64 | f64 local_loss`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::federation::LocalGradientMsg;
use crate::qnn::GradientVector;
use crate::shadows::{ClassicalShadow, MomConfig, ShadowSet};
use crate::sim::MAX_QUBITS;

pub const MAGIC: [u8; 4] = *b"CCQF";
pub const VERSION: u8 = 1;
pub const MSG_SHADOW_SET: u8 = 1;
pub const MSG_LOCAL_GRADIENT: u8 = 2;

const PREFIX_LEN: usize = 6;
pub const SHADOW_HEADER_LEN: usize = PREFIX_LEN + 4 + 2 + 4 + 4 + 2;
pub const GRADIENT_HEADER_LEN: usize = PREFIX_LEN + 4 + 2 + 4 + 4;

/// Decoded fixed-size header of a ShadowSet message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowSetHeader {
    pub iteration: u32,
    pub n_qubits: u16,
    pub n_params: u32,
    pub shots: u32,
    pub chunks: u16,
}

impl ShadowSetHeader {
    /// Payload length implied by the header, if it fits in memory arithmetic.
    pub fn payload_len(&self) -> Option<usize> {
        (2 * self.n_params as usize + 1)
            .checked_mul(self.shots as usize)?
            .checked_mul(self.n_qubits as usize)
    }
}

/// Any protocol message.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ShadowSet(ShadowSet),
    LocalGradient(LocalGradientMsg),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::protocol(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::protocol(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn check_prefix(c: &mut Cursor<'_>, expected_type: u8) -> Result<()> {
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::protocol(0, format!("bad magic {magic:02x?}")));
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(Error::protocol(4, format!("unsupported version {version}")));
    }
    let msg_type = c.u8("message type")?;
    if msg_type != expected_type {
        return Err(Error::protocol(
            5,
            format!("message type {msg_type}, expected {expected_type}"),
        ));
    }
    Ok(())
}

/// Peeks the message type of a buffer after validating magic and version.
pub fn message_type(bytes: &[u8]) -> Result<u8> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::protocol(0, format!("bad magic {magic:02x?}")));
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(Error::protocol(4, format!("unsupported version {version}")));
    }
    c.u8("message type")
}

pub fn encode_shadow_set(set: &ShadowSet) -> Vec<u8> {
    let n = set.n_qubits();
    let mut out = Vec::with_capacity(SHADOW_HEADER_LEN + set.entries().len() * set.shots() * n);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(MSG_SHADOW_SET);
    out.extend_from_slice(&set.iteration().to_le_bytes());
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&(set.n_params() as u32).to_le_bytes());
    out.extend_from_slice(&(set.shots() as u32).to_le_bytes());
    out.extend_from_slice(&set.chunks().to_le_bytes());
    for e in set.entries() {
        out.extend_from_slice(e.codes());
    }
    out
}

/// Encoded size of a ShadowSet message without building it.
pub fn shadow_set_len(set: &ShadowSet) -> usize {
    SHADOW_HEADER_LEN + set.entries().len() * set.shots() * set.n_qubits()
}

fn read_shadow_header(c: &mut Cursor<'_>) -> Result<ShadowSetHeader> {
    check_prefix(c, MSG_SHADOW_SET)?;
    let header = ShadowSetHeader {
        iteration: c.u32("iteration")?,
        n_qubits: c.u16("n_qubits")?,
        n_params: c.u32("p")?,
        shots: c.u32("M")?,
        chunks: c.u16("M2")?,
    };
    if header.n_qubits == 0 || header.n_qubits as usize > MAX_QUBITS {
        return Err(Error::protocol(
            10,
            format!("n_qubits {} out of range", header.n_qubits),
        ));
    }
    if header.shots == 0 {
        return Err(Error::protocol(16, "M must be at least 1"));
    }
    if header.chunks == 0 || !header.shots.is_multiple_of(header.chunks as u32) {
        return Err(Error::protocol(
            20,
            format!(
                "M2 = {} does not divide M = {}",
                header.chunks, header.shots
            ),
        ));
    }
    Ok(header)
}

/// Decodes and validates only the fixed header.
pub fn decode_shadow_header(bytes: &[u8]) -> Result<ShadowSetHeader> {
    read_shadow_header(&mut Cursor::new(bytes))
}

pub fn decode_shadow_set(bytes: &[u8]) -> Result<ShadowSet> {
    let mut c = Cursor::new(bytes);
    let h = read_shadow_header(&mut c)?;
    let n = h.n_qubits as usize;
    let m = h.shots as usize;
    let entries = 2 * h.n_params as usize + 1;
    let total = h
        .payload_len()
        .ok_or_else(|| Error::protocol(SHADOW_HEADER_LEN, "payload size overflows"))?;
    let payload = c.take(total, "snapshot payload")?;
    c.finish()?;
    if let Some(i) = payload.iter().position(|&b| b > 5) {
        return Err(Error::protocol(
            SHADOW_HEADER_LEN + i,
            format!("illegal snapshot byte {}", payload[i]),
        ));
    }
    let shadows = payload
        .chunks_exact(m * n)
        .take(entries)
        .map(|chunk| ClassicalShadow::from_codes(n, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::protocol(SHADOW_HEADER_LEN, e.to_string()))?;
    ShadowSet::new(h.iteration, h.n_params as usize, h.chunks, shadows)
        .map_err(|e| Error::protocol(SHADOW_HEADER_LEN, e.to_string()))
}

pub fn encode_local_gradient(msg: &LocalGradientMsg) -> Vec<u8> {
    let p = msg.gradient.len();
    let mut out = Vec::with_capacity(GRADIENT_HEADER_LEN + 8 * (p + 1));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(MSG_LOCAL_GRADIENT);
    out.extend_from_slice(&msg.iteration.to_le_bytes());
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&msg.samples.to_le_bytes());
    out.extend_from_slice(&(p as u32).to_le_bytes());
    for g in msg.gradient.values() {
        out.extend_from_slice(&g.to_le_bytes());
    }
    out.extend_from_slice(&msg.local_loss.to_le_bytes());
    out
}

pub fn decode_local_gradient(bytes: &[u8]) -> Result<LocalGradientMsg> {
    let mut c = Cursor::new(bytes);
    check_prefix(&mut c, MSG_LOCAL_GRADIENT)?;
    let iteration = c.u32("iteration")?;
    let client_id = c.u16("client_id")?;
    let samples = c.u32("m_i")?;
    let p = c.u32("p")? as usize;
    let needed = p
        .checked_mul(8)
        .and_then(|b| b.checked_add(8))
        .ok_or_else(|| Error::protocol(16, "gradient length overflows"))?;
    if bytes.len() < GRADIENT_HEADER_LEN + needed {
        return Err(Error::protocol(
            GRADIENT_HEADER_LEN,
            format!(
                "truncated gradient: need {needed} bytes, {} left",
                bytes.len() - GRADIENT_HEADER_LEN
            ),
        ));
    }
    let mut gradient = Vec::with_capacity(p);
    for k in 0..p {
        let offset = c.pos;
        let g = c.f64("gradient")?;
        if !g.is_finite() {
            return Err(Error::protocol(
                offset,
                format!("non-finite gradient component {k}"),
            ));
        }
        gradient.push(g);
    }
    let loss_offset = c.pos;
    let local_loss = c.f64("local_loss")?;
    if !local_loss.is_finite() {
        return Err(Error::protocol(loss_offset, "non-finite local loss"));
    }
    c.finish()?;
    Ok(LocalGradientMsg {
        client_id,
        iteration,
        samples,
        gradient: GradientVector(gradient),
        local_loss,
    })
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    match msg {
        Message::ShadowSet(s) => encode_shadow_set(s),
        Message::LocalGradient(g) => encode_local_gradient(g),
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    match message_type(bytes)? {
        MSG_SHADOW_SET => decode_shadow_set(bytes).map(Message::ShadowSet),
        MSG_LOCAL_GRADIENT => decode_local_gradient(bytes).map(Message::LocalGradient),
        t => Err(Error::protocol(5, format!("unknown message type {t}"))),
    }
}

pub fn write_message<W: Write + ?Sized>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode_message(msg))?;
    w.flush()?;
    Ok(())
}

fn read_exact_at<R: Read + ?Sized>(r: &mut R, buf: &mut [u8], offset: usize) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::protocol(offset, "stream ended inside a message")
        } else {
            Error::Io(e)
        }
    })
}

/// Reads one self-delimiting message from a byte stream.
pub fn read_message<R: Read + ?Sized>(r: &mut R) -> Result<Message> {
    let mut prefix = [0u8; PREFIX_LEN];
    read_exact_at(r, &mut prefix, 0)?;
    let msg_type = message_type(&prefix)?;
    let header_len = match msg_type {
        MSG_SHADOW_SET => SHADOW_HEADER_LEN,
        MSG_LOCAL_GRADIENT => GRADIENT_HEADER_LEN,
        t => return Err(Error::protocol(5, format!("unknown message type {t}"))),
    };
    let mut buf = prefix.to_vec();
    buf.resize(header_len, 0);
    read_exact_at(r, &mut buf[PREFIX_LEN..], PREFIX_LEN)?;
    let body_len = if msg_type == MSG_SHADOW_SET {
        decode_shadow_header(&buf)?
            .payload_len()
            .ok_or_else(|| Error::protocol(SHADOW_HEADER_LEN, "payload size overflows"))?
    } else {
        let p = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        p.checked_add(1)
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::protocol(16, "gradient length overflows"))?
    };
    // grow with the data actually received rather than trusting the header
    let got = r.take(body_len as u64).read_to_end(&mut buf)?;
    if got != body_len {
        return Err(Error::protocol(
            header_len + got,
            "stream ended inside a message",
        ));
    }
    decode_message(&buf)
}

/// Checks that `mom` can be used with a received shadow set.
pub fn check_mom_for(set: &ShadowSet, mom: &MomConfig) -> Result<()> {
    if mom.total() != set.shots() {
        return Err(Error::protocol(
            16,
            format!(
                "client expects M = {}, shadow set carries M = {}",
                mom.total(),
                set.shots()
            ),
        ));
    }
    Ok(())
}
