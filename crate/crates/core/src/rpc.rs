//! Application-facing value model and the metadata framing that rides
//! inside packet payloads.
//!
//! Values ([`Value`]) are deliberately small: fixed-point-friendly arrays,
//! integer maps, scalars, and opaque bytes. Everything a switch can touch is
//! a signed 32-bit integer stream, so floating-point fields are quantized
//! (`round(x * 10^precision)` half away from zero) on the way in and
//! dequantized on the way out; the worst-case error per summand is
//! `0.5 / 10^precision`.
//!
//! Map keys become 32-bit logical addresses via inline FNV-1a hashing
//! ([`laddr_of_str`], [`laddr_of_int`]); the control plane later binds
//! logical addresses to physical register cells. Colliding keys simply stay
//! on the software path, so hashing affects performance, never correctness.
//!
//! Call metadata (headers, mapping grants, fallback key bindings, use
//! counts, corrections) is carried as a sequence of length-prefixed,
//! kind-tagged frames ([`PayloadFrame`]) in the payload section of data and
//! acknowledgement packets. All integers little-endian; strings are UTF-8
//! with a u16 length; f64 values travel as raw bits.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

// ---------------------------------------------------------------------------
// Values and messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    FpArray(Vec<f64>),
    IntArray(Vec<i64>),
    StrIntMap(BTreeMap<String, i64>),
    IntIntMap(BTreeMap<i64, i64>),
    Int(i64),
    Opaque(Vec<u8>),
}

impl Value {
    pub fn type_tag(&self) -> u8 {
        match self {
            Value::FpArray(_) => 1,
            Value::IntArray(_) => 2,
            Value::StrIntMap(_) => 3,
            Value::IntIntMap(_) => 4,
            Value::Int(_) => 5,
            Value::Opaque(_) => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Message {
    pub name: String,
    pub fields: BTreeMap<String, Value>,
}

impl Message {
    pub fn new(name: &str) -> Self {
        Message {
            name: name.to_string(),
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: &str, value: Value) -> Self {
        self.fields.insert(field.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RpcError {
    /// The handler itself reported failure.
    Handler(String),
    /// No reply within the deadline.
    Timeout,
    /// Malformed metadata or protocol violation.
    Protocol(String),
}

impl fmt::Display for RpcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RpcError::Handler(e) => write!(f, "handler error: {e}"),
            RpcError::Timeout => write!(f, "call timed out"),
            RpcError::Protocol(e) => write!(f, "protocol error: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RpcError {}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Value does not fit the 32-bit fixed-point range (or is not finite); the
/// raw value must travel on the software overflow path instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOverflow(pub f64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    scale: f64,
}

impl Quantizer {
    /// `precision` decimal digits; must be <= 15 so the scale is exact in
    /// f64 (enforced at NetFilter parse time).
    pub fn new(precision: u32) -> Self {
        let mut scale = 1.0f64;
        for _ in 0..precision.min(15) {
            scale *= 10.0;
        }
        Quantizer { scale }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Round half away from zero into the 32-bit register domain.
    pub fn quantize(&self, x: f64) -> Result<i32, QuantizeOverflow> {
        let y = x * self.scale;
        if !y.is_finite()
            || y >= i32::MAX as f64 + 0.5
            || y <= i32::MIN as f64 - 0.5
        {
            return Err(QuantizeOverflow(x));
        }
        let r = if y >= 0.0 { (y + 0.5) as i64 } else { (y - 0.5) as i64 };
        Ok(r as i32)
    }

    pub fn dequantize(&self, v: i32) -> f64 {
        v as f64 / self.scale
    }

    /// Dequantize a wide (server-side, overflow-corrected) sum.
    pub fn dequantize_i64(&self, v: i64) -> f64 {
        v as f64 / self.scale
    }

    /// Worst-case absolute error contributed by one quantized summand.
    pub fn unit_error(&self) -> f64 {
        0.5 / self.scale
    }
}

/// Clamp-free i64 -> i32 for integer-typed fields (scale 1).
pub fn fit_i32(v: i64) -> Result<i32, QuantizeOverflow> {
    i32::try_from(v).map_err(|_| QuantizeOverflow(v as f64))
}

// ---------------------------------------------------------------------------
// Packet op types
// ---------------------------------------------------------------------------

/// Ordinary data/update traffic.
pub const OP_UPDATE: u8 = 0;
/// Keyed read: slots name logical addresses whose current totals the server
/// answers with a unicast reply echoing the request's chunk tag.
pub const OP_QUERY: u8 = 2;

// ---------------------------------------------------------------------------
// Logical addressing
// ---------------------------------------------------------------------------

/// FNV-1a, 32-bit. Inline so callers in hot paths do not pay for a hasher
/// object; the function is tiny and the corpus of keys is user data, so a
/// cryptographic hash would buy nothing (collisions only cost performance).
pub fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub fn laddr_of_str(key: &str) -> u32 {
    fnv1a(key.as_bytes())
}

pub fn laddr_of_int(key: i64) -> u32 {
    fnv1a(&key.to_le_bytes())
}

// ---------------------------------------------------------------------------
// Payload frames
// ---------------------------------------------------------------------------

/// Per-field manifest inside call/reply headers: how the field travels.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldManifest {
    pub name: String,
    pub type_tag: u8,
    /// Elements (array length / map entries); 0 for scalars and opaque.
    pub len: u32,
    /// First logical address for dense (array) fields.
    pub laddr_base: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorrectionValue {
    /// Wide exact sum of quantized contributions.
    Wide(i64),
    /// Raw floating-point sum (quantization overflowed at the source).
    Raw(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayloadFrame {
    /// First packet of a call: identifies it and declares its shape.
    CallHeader {
        call_id: u32,
        method: String,
        /// First sequence number of the call on this flow.
        seq_base: u32,
        /// Data packets the call occupies (chunk i = seq_base + i).
        total_packets: u32,
        fields: Vec<FieldManifest>,
    },
    /// First packet of a reply stream.
    ReplyHeader {
        call_id: u32,
        ok: bool,
        error: String,
        seq_base: u32,
        total_packets: u32,
        fields: Vec<FieldManifest>,
    },
    /// Every data packet names its call so loss cannot orphan chunks.
    CallTag { call_id: u32 },
    /// Physical cell bindings granted by the callee side (piggybacked on
    /// acknowledgements).
    MappingGrants { entries: Vec<(u32, u32)> },
    /// First-seen bindings of logical addresses to string keys, so the
    /// callee can run map operations in software.
    FallbackBindings { entries: Vec<(u32, String)> },
    /// laddr -> integer key bindings (for integer-keyed maps).
    FallbackIntBindings { entries: Vec<(u32, i64)> },
    /// Access counts reported to the cache policy, per logical address.
    UseCounts { entries: Vec<(u32, u32)> },
    /// A complete value travelling on the software path.
    PayloadValue { field: String, value: Value },
    /// Exact per-element replacements after a register overflow.
    Corrections {
        field: String,
        entries: Vec<(u32, CorrectionValue)>,
    },
    /// Every data packet names its call and chunk, so reassembly survives
    /// loss, striping across flows, and arbitrary arrival order.
    ChunkTag { call_id: u32, chunk: u32 },
}

impl PayloadFrame {
    fn kind(&self) -> u8 {
        match self {
            PayloadFrame::CallHeader { .. } => 1,
            PayloadFrame::ReplyHeader { .. } => 2,
            PayloadFrame::CallTag { .. } => 3,
            PayloadFrame::MappingGrants { .. } => 4,
            PayloadFrame::FallbackBindings { .. } => 5,
            PayloadFrame::FallbackIntBindings { .. } => 6,
            PayloadFrame::UseCounts { .. } => 7,
            PayloadFrame::PayloadValue { .. } => 8,
            PayloadFrame::Corrections { .. } => 9,
            PayloadFrame::ChunkTag { .. } => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameError(pub &'static str);

impl fmt::Display for FrameError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed payload frame: {}", self.0)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FrameError {}

// ---- primitive writers/readers ----

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        debug_assert!(s.len() <= u16::MAX as usize);
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.pos + n > self.b.len() {
            return Err(FrameError("truncated"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, FrameError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FrameError> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.take(8)?.try_into().unwrap(),
        )))
    }
    fn str(&mut self) -> Result<String, FrameError> {
        let n = self.u16()? as usize;
        let s = self.take(n)?;
        core::str::from_utf8(s)
            .map(|s| s.to_string())
            .map_err(|_| FrameError("invalid utf-8"))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, FrameError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn done(&self) -> bool {
        self.pos == self.b.len()
    }
}

fn write_value(w: &mut Writer, v: &Value) {
    w.u8(v.type_tag());
    match v {
        Value::FpArray(a) => {
            w.u32(a.len() as u32);
            for &x in a {
                w.f64(x);
            }
        }
        Value::IntArray(a) => {
            w.u32(a.len() as u32);
            for &x in a {
                w.i64(x);
            }
        }
        Value::StrIntMap(m) => {
            w.u32(m.len() as u32);
            for (k, &x) in m {
                w.str(k);
                w.i64(x);
            }
        }
        Value::IntIntMap(m) => {
            w.u32(m.len() as u32);
            for (&k, &x) in m {
                w.i64(k);
                w.i64(x);
            }
        }
        Value::Int(x) => w.i64(*x),
        Value::Opaque(b) => w.bytes(b),
    }
}

fn read_value(r: &mut Reader<'_>) -> Result<Value, FrameError> {
    Ok(match r.u8()? {
        1 => {
            let n = r.u32()? as usize;
            let mut a = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                a.push(r.f64()?);
            }
            Value::FpArray(a)
        }
        2 => {
            let n = r.u32()? as usize;
            let mut a = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                a.push(r.i64()?);
            }
            Value::IntArray(a)
        }
        3 => {
            let n = r.u32()?;
            let mut m = BTreeMap::new();
            for _ in 0..n {
                let k = r.str()?;
                m.insert(k, r.i64()?);
            }
            Value::StrIntMap(m)
        }
        4 => {
            let n = r.u32()?;
            let mut m = BTreeMap::new();
            for _ in 0..n {
                let k = r.i64()?;
                m.insert(k, r.i64()?);
            }
            Value::IntIntMap(m)
        }
        5 => Value::Int(r.i64()?),
        6 => Value::Opaque(r.bytes()?),
        _ => return Err(FrameError("unknown value tag")),
    })
}

fn write_manifests(w: &mut Writer, fields: &[FieldManifest]) {
    w.u16(fields.len() as u16);
    for f in fields {
        w.str(&f.name);
        w.u8(f.type_tag);
        w.u32(f.len);
        w.u32(f.laddr_base);
    }
}

fn read_manifests(r: &mut Reader<'_>) -> Result<Vec<FieldManifest>, FrameError> {
    let n = r.u16()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        out.push(FieldManifest {
            name: r.str()?,
            type_tag: r.u8()?,
            len: r.u32()?,
            laddr_base: r.u32()?,
        });
    }
    Ok(out)
}

/// Appends one frame (kind byte, u32 body length, body) to `out`.
pub fn write_frame(out: &mut Vec<u8>, frame: &PayloadFrame) {
    let mut w = Writer(Vec::new());
    match frame {
        PayloadFrame::CallHeader {
            call_id,
            method,
            seq_base,
            total_packets,
            fields,
        } => {
            w.u32(*call_id);
            w.str(method);
            w.u32(*seq_base);
            w.u32(*total_packets);
            write_manifests(&mut w, fields);
        }
        PayloadFrame::ReplyHeader {
            call_id,
            ok,
            error,
            seq_base,
            total_packets,
            fields,
        } => {
            w.u32(*call_id);
            w.u8(*ok as u8);
            w.str(error);
            w.u32(*seq_base);
            w.u32(*total_packets);
            write_manifests(&mut w, fields);
        }
        PayloadFrame::CallTag { call_id } => w.u32(*call_id),
        PayloadFrame::MappingGrants { entries } => {
            w.u32(entries.len() as u32);
            for &(l, c) in entries {
                w.u32(l);
                w.u32(c);
            }
        }
        PayloadFrame::FallbackBindings { entries } => {
            w.u32(entries.len() as u32);
            for (l, k) in entries {
                w.u32(*l);
                w.str(k);
            }
        }
        PayloadFrame::FallbackIntBindings { entries } => {
            w.u32(entries.len() as u32);
            for &(l, k) in entries {
                w.u32(l);
                w.i64(k);
            }
        }
        PayloadFrame::UseCounts { entries } => {
            w.u32(entries.len() as u32);
            for &(l, n) in entries {
                w.u32(l);
                w.u32(n);
            }
        }
        PayloadFrame::PayloadValue { field, value } => {
            w.str(field);
            write_value(&mut w, value);
        }
        PayloadFrame::Corrections { field, entries } => {
            w.str(field);
            w.u32(entries.len() as u32);
            for (i, v) in entries {
                w.u32(*i);
                match v {
                    CorrectionValue::Wide(x) => {
                        w.u8(0);
                        w.i64(*x);
                    }
                    CorrectionValue::Raw(x) => {
                        w.u8(1);
                        w.f64(*x);
                    }
                }
            }
        }
        PayloadFrame::ChunkTag { call_id, chunk } => {
            w.u32(*call_id);
            w.u32(*chunk);
        }
    }
    out.push(frame.kind());
    out.extend_from_slice(&(w.0.len() as u32).to_le_bytes());
    out.extend_from_slice(&w.0);
}

/// Encodes a frame sequence into a payload.
pub fn encode_frames(frames: &[PayloadFrame]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in frames {
        write_frame(&mut out, f);
    }
    out
}

/// Parses a payload back into frames; the whole buffer must be consumed.
pub fn decode_frames(payload: &[u8]) -> Result<Vec<PayloadFrame>, FrameError> {
    let mut frames = Vec::new();
    let mut outer = Reader { b: payload, pos: 0 };
    while !outer.done() {
        let kind = outer.u8()?;
        let body_len = outer.u32()? as usize;
        let body = outer.take(body_len)?;
        let mut r = Reader { b: body, pos: 0 };
        let frame = match kind {
            1 => PayloadFrame::CallHeader {
                call_id: r.u32()?,
                method: r.str()?,
                seq_base: r.u32()?,
                total_packets: r.u32()?,
                fields: read_manifests(&mut r)?,
            },
            2 => PayloadFrame::ReplyHeader {
                call_id: r.u32()?,
                ok: r.u8()? != 0,
                error: r.str()?,
                seq_base: r.u32()?,
                total_packets: r.u32()?,
                fields: read_manifests(&mut r)?,
            },
            3 => PayloadFrame::CallTag { call_id: r.u32()? },
            4 => {
                let n = r.u32()?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    entries.push((r.u32()?, r.u32()?));
                }
                PayloadFrame::MappingGrants { entries }
            }
            5 => {
                let n = r.u32()?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    entries.push((r.u32()?, r.str()?));
                }
                PayloadFrame::FallbackBindings { entries }
            }
            6 => {
                let n = r.u32()?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    entries.push((r.u32()?, r.i64()?));
                }
                PayloadFrame::FallbackIntBindings { entries }
            }
            7 => {
                let n = r.u32()?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    entries.push((r.u32()?, r.u32()?));
                }
                PayloadFrame::UseCounts { entries }
            }
            8 => PayloadFrame::PayloadValue {
                field: r.str()?,
                value: read_value(&mut r)?,
            },
            9 => {
                let field = r.str()?;
                let n = r.u32()?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let i = r.u32()?;
                    let v = match r.u8()? {
                        0 => CorrectionValue::Wide(r.i64()?),
                        1 => CorrectionValue::Raw(r.f64()?),
                        _ => return Err(FrameError("unknown correction tag")),
                    };
                    entries.push((i, v));
                }
                PayloadFrame::Corrections { field, entries }
            }
            10 => PayloadFrame::ChunkTag {
                call_id: r.u32()?,
                chunk: r.u32()?,
            },
            _ => return Err(FrameError("unknown frame kind")),
        };
        if !r.done() {
            return Err(FrameError("trailing bytes in frame body"));
        }
        frames.push(frame);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quantizer_rounds_half_away_from_zero() {
        let q = Quantizer::new(0);
        assert_eq!(q.quantize(2.5).unwrap(), 3);
        assert_eq!(q.quantize(-2.5).unwrap(), -3);
        assert_eq!(q.quantize(2.4).unwrap(), 2);
        assert_eq!(q.quantize(-2.4).unwrap(), -2);
        assert_eq!(q.quantize(0.0).unwrap(), 0);

        let q8 = Quantizer::new(8);
        let x = 0.123456789;
        let v = q8.quantize(x).unwrap();
        assert_eq!(v, 12345679, "ninth digit rounds up");
        assert!((q8.dequantize(v) - x).abs() <= q8.unit_error());
    }

    #[test]
    fn quantizer_overflow_boundaries() {
        let q = Quantizer::new(0);
        assert_eq!(q.quantize(i32::MAX as f64).unwrap(), i32::MAX);
        assert!(q.quantize(i32::MAX as f64 + 0.5).is_err());
        assert_eq!(q.quantize(i32::MIN as f64).unwrap(), i32::MIN);
        assert!(q.quantize(i32::MIN as f64 - 0.5).is_err());
        assert!(q.quantize(f64::NAN).is_err());
        assert!(q.quantize(f64::INFINITY).is_err());

        let q4 = Quantizer::new(4);
        assert!(q4.quantize(300_000.0).is_err(), "3e9 exceeds the register");
        assert!(q4.quantize(200_000.0).is_ok());

        assert_eq!(fit_i32(77), Ok(77));
        assert!(fit_i32(i64::from(i32::MAX) + 1).is_err());
    }

    #[test]
    fn fnv1a_known_vectors() {
        assert_eq!(fnv1a(b""), 0x811c_9dc5);
        assert_eq!(fnv1a(b"a"), 0xe40c_292c);
        assert_eq!(fnv1a(b"foobar"), 0xbf9c_f968);
        assert_eq!(laddr_of_str("foobar"), 0xbf9c_f968);
        assert_ne!(laddr_of_int(1), laddr_of_int(2));
    }

    fn sample_frames() -> Vec<PayloadFrame> {
        vec![
            PayloadFrame::CallHeader {
                call_id: 42,
                method: "Update".to_string(),
                seq_base: 100,
                total_packets: 7,
                fields: vec![FieldManifest {
                    name: "tensor".to_string(),
                    type_tag: 1,
                    len: 200,
                    laddr_base: 50_000,
                }],
            },
            PayloadFrame::ReplyHeader {
                call_id: 42,
                ok: false,
                error: "bad input".to_string(),
                seq_base: 9,
                total_packets: 1,
                fields: vec![],
            },
            PayloadFrame::CallTag { call_id: 7 },
            PayloadFrame::ChunkTag {
                call_id: 7,
                chunk: 93,
            },
            PayloadFrame::MappingGrants {
                entries: vec![(0xdead, 2048), (0xbeef, 2049)],
            },
            PayloadFrame::FallbackBindings {
                entries: vec![(17, "the".to_string()), (18, "quick".to_string())],
            },
            PayloadFrame::FallbackIntBindings {
                entries: vec![(19, -5), (20, i64::MAX)],
            },
            PayloadFrame::UseCounts {
                entries: vec![(17, 3), (18, 1)],
            },
            PayloadFrame::PayloadValue {
                field: "blob".to_string(),
                value: Value::Opaque(vec![1, 2, 3]),
            },
            PayloadFrame::Corrections {
                field: "tensor".to_string(),
                entries: vec![
                    (3, CorrectionValue::Wide(1234567890123)),
                    (4, CorrectionValue::Raw(-0.0)),
                ],
            },
        ]
    }

    #[test]
    fn frames_round_trip() {
        let frames = sample_frames();
        let bytes = encode_frames(&frames);
        let back = decode_frames(&bytes).unwrap();
        assert_eq!(frames, back);
        // Bit-exact f64: -0.0 must stay -0.0.
        if let PayloadFrame::Corrections { entries, .. } = &back[8] {
            match entries[1].1 {
                CorrectionValue::Raw(x) => assert_eq!(x.to_bits(), (-0.0f64).to_bits()),
                _ => panic!("wrong variant"),
            }
        }
    }

    #[test]
    fn values_round_trip() {
        let values = vec![
            Value::FpArray(vec![0.1, -2.5e300, f64::MIN_POSITIVE]),
            Value::IntArray(vec![i64::MIN, 0, i64::MAX]),
            Value::StrIntMap(BTreeMap::from([
                ("the".to_string(), 3),
                ("énergie".to_string(), -1),
            ])),
            Value::IntIntMap(BTreeMap::from([(-9, 9), (0, 0)])),
            Value::Int(-42),
            Value::Opaque(vec![]),
        ];
        for v in values {
            let frames = vec![PayloadFrame::PayloadValue {
                field: "f".to_string(),
                value: v.clone(),
            }];
            let back = decode_frames(&encode_frames(&frames)).unwrap();
            assert_eq!(back, frames, "value {v:?}");
        }
    }

    #[test]
    fn malformed_payloads_rejected() {
        let bytes = encode_frames(&sample_frames());
        assert!(decode_frames(&bytes[..bytes.len() - 1]).is_err(), "truncated");
        let mut garbled = bytes.clone();
        garbled[0] = 99;
        assert!(decode_frames(&garbled).is_err(), "unknown kind");
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_frames(&trailing).is_err(), "trailing byte");
        assert_eq!(decode_frames(&[]).unwrap(), vec![]);
    }
}
