//! Binary packet layout shared by hosts and switches.
//!
//! All integers are little-endian. A packet is a fixed 32-byte header, a
//! fixed slot block, and a length-prefixed payload:
//!
//! ```text
//! offset  size  field
//! ------  ----  -----------------------------------------------------------
//!      0     3  magic "INC"
//!      3     1  version (currently 1)
//!      4     4  gaid            global application id (0 = plain traffic)
//!      8     4  seq             per-flow sequence number
//!     12     2  srrt            switch retransmission-state slot id
//!     14     2  flags           see bit table below
//!     16     1  op_type         stream-modify operator selector
//!     17     1  pad (zero)
//!     18     4  bitmap          slot i participates iff bit i is set
//!     22     4  counter_index   CntFwd counter address / elided key base
//!     26     4  counter_threshold
//!     30     2  pad (zero)
//!     32   256  slots, kv mode:     32 x { key u32, value i32 }
//!          128  slots, elided mode: 32 x { value i32 }
//!      +     4  payload length (u32)
//!      +     n  payload bytes
//! ```
//!
//! Flag bits (in the u16 at offset 14):
//!
//! ```text
//! bit 0  IS_OF     value overflowed; switch must bypass to the server
//! bit 1  IS_CNF    CntFwd applies to this packet
//! bit 2  IS_CLR    Map.clear applies on this traversal
//! bit 3  IS_CROSS  skip in-network processing, cross to the server agent
//! bit 4  ECN       congestion experienced
//! bit 5  IS_SA     packet originates at the server agent
//! bit 6  IS_MCAST  fan out to every registered client of the gaid
//! bit 7  flip      retransmission-window parity (kept outside `flags` in
//!                  the decoded struct; see `Packet::flip`)
//! bit 8  elided    keys omitted; slot i's key is counter_index + i
//! ```
//!
//! Without a payload a kv-mode packet is 292 bytes and an elided packet is
//! 164; eliding keys always saves exactly 128 bytes. Values are two's
//! complement signed 32-bit, keys unsigned 32-bit.

use alloc::vec::Vec;
use core::fmt;

pub const MAGIC: [u8; 3] = *b"INC";
pub const WIRE_VERSION: u8 = 1;
pub const SLOT_COUNT: usize = 32;
pub const HEADER_LEN: usize = 32;

/// Encoded length of a packet with an empty payload.
pub const KV_BASE_LEN: usize = HEADER_LEN + SLOT_COUNT * 8 + 4;
pub const ELIDED_BASE_LEN: usize = HEADER_LEN + SLOT_COUNT * 4 + 4;

const FLAG_OF: u16 = 1 << 0;
const FLAG_CNF: u16 = 1 << 1;
const FLAG_CLR: u16 = 1 << 2;
const FLAG_CROSS: u16 = 1 << 3;
const FLAG_ECN: u16 = 1 << 4;
const FLAG_SA: u16 = 1 << 5;
const FLAG_MCAST: u16 = 1 << 6;
const FLAG_FLIP: u16 = 1 << 7;
const FLAG_ELIDED: u16 = 1 << 8;
const FLAG_KNOWN: u16 = FLAG_OF
    | FLAG_CNF
    | FLAG_CLR
    | FLAG_CROSS
    | FLAG_ECN
    | FLAG_SA
    | FLAG_MCAST
    | FLAG_FLIP
    | FLAG_ELIDED;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireError {
    /// Keys were not the contiguous run `counter_index..counter_index+32`
    /// even though key elision was requested.
    ElideViolation,
    /// Buffer failed structural validation; the reason is diagnostic only.
    MalformedPacket(&'static str),
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireError::ElideViolation => write!(f, "keys not contiguous, cannot elide"),
            WireError::MalformedPacket(why) => write!(f, "malformed packet: {why}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for WireError {}

/// Boolean packet flags other than the window parity bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PacketFlags(u16);

impl PacketFlags {
    pub const fn new() -> Self {
        PacketFlags(0)
    }

    pub fn is_of(self) -> bool {
        self.0 & FLAG_OF != 0
    }
    pub fn is_cnf(self) -> bool {
        self.0 & FLAG_CNF != 0
    }
    pub fn is_clr(self) -> bool {
        self.0 & FLAG_CLR != 0
    }
    pub fn is_cross(self) -> bool {
        self.0 & FLAG_CROSS != 0
    }
    pub fn ecn(self) -> bool {
        self.0 & FLAG_ECN != 0
    }
    pub fn is_sa(self) -> bool {
        self.0 & FLAG_SA != 0
    }
    pub fn is_mcast(self) -> bool {
        self.0 & FLAG_MCAST != 0
    }

    pub fn set_of(&mut self, on: bool) {
        self.set(FLAG_OF, on)
    }
    pub fn set_cnf(&mut self, on: bool) {
        self.set(FLAG_CNF, on)
    }
    pub fn set_clr(&mut self, on: bool) {
        self.set(FLAG_CLR, on)
    }
    pub fn set_cross(&mut self, on: bool) {
        self.set(FLAG_CROSS, on)
    }
    pub fn set_ecn(&mut self, on: bool) {
        self.set(FLAG_ECN, on)
    }
    pub fn set_sa(&mut self, on: bool) {
        self.set(FLAG_SA, on)
    }
    pub fn set_mcast(&mut self, on: bool) {
        self.set(FLAG_MCAST, on)
    }

    fn set(&mut self, mask: u16, on: bool) {
        if on {
            self.0 |= mask;
        } else {
            self.0 &= !mask;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Slot {
    pub key: u32,
    pub value: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub gaid: u32,
    pub seq: u32,
    pub srrt: u16,
    /// Retransmission-window parity: `(seq / w_max) % 2` at build time.
    pub flip: bool,
    pub flags: PacketFlags,
    pub op_type: u8,
    pub bitmap: u32,
    pub counter_index: u32,
    pub counter_threshold: u32,
    pub slots: [Slot; SLOT_COUNT],
    pub payload: Vec<u8>,
}

impl Default for Packet {
    fn default() -> Self {
        Packet {
            gaid: 0,
            seq: 0,
            srrt: 0,
            flip: false,
            flags: PacketFlags::new(),
            op_type: 0,
            bitmap: 0,
            counter_index: 0,
            counter_threshold: 0,
            slots: [Slot::default(); SLOT_COUNT],
            payload: Vec::new(),
        }
    }
}

impl Packet {
    pub fn slot_enabled(&self, i: usize) -> bool {
        debug_assert!(i < SLOT_COUNT);
        self.bitmap & (1u32 << i) != 0
    }

    pub fn set_slot_enabled(&mut self, i: usize, on: bool) {
        debug_assert!(i < SLOT_COUNT);
        if on {
            self.bitmap |= 1u32 << i;
        } else {
            self.bitmap &= !(1u32 << i);
        }
    }

    /// Encoded length in bytes for the given mode, including the payload.
    pub fn encoded_len(&self, elide_keys: bool) -> usize {
        let base = if elide_keys { ELIDED_BASE_LEN } else { KV_BASE_LEN };
        base + self.payload.len()
    }
}

pub fn encode_packet(p: &Packet, elide_keys: bool) -> Result<Vec<u8>, WireError> {
    if elide_keys {
        for (i, s) in p.slots.iter().enumerate() {
            if s.key != p.counter_index.wrapping_add(i as u32) {
                return Err(WireError::ElideViolation);
            }
        }
    }
    let mut out = Vec::with_capacity(p.encoded_len(elide_keys));
    out.extend_from_slice(&MAGIC);
    out.push(WIRE_VERSION);
    out.extend_from_slice(&p.gaid.to_le_bytes());
    out.extend_from_slice(&p.seq.to_le_bytes());
    out.extend_from_slice(&p.srrt.to_le_bytes());
    let mut flags = p.flags.0;
    if p.flip {
        flags |= FLAG_FLIP;
    }
    if elide_keys {
        flags |= FLAG_ELIDED;
    }
    out.extend_from_slice(&flags.to_le_bytes());
    out.push(p.op_type);
    out.push(0);
    out.extend_from_slice(&p.bitmap.to_le_bytes());
    out.extend_from_slice(&p.counter_index.to_le_bytes());
    out.extend_from_slice(&p.counter_threshold.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    debug_assert_eq!(out.len(), HEADER_LEN);
    for s in &p.slots {
        if !elide_keys {
            out.extend_from_slice(&s.key.to_le_bytes());
        }
        out.extend_from_slice(&s.value.to_le_bytes());
    }
    out.extend_from_slice(&(p.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&p.payload);
    Ok(out)
}

pub fn decode_packet(b: &[u8]) -> Result<Packet, WireError> {
    if b.len() < ELIDED_BASE_LEN {
        return Err(WireError::MalformedPacket("shorter than minimum packet"));
    }
    if b[0..3] != MAGIC {
        return Err(WireError::MalformedPacket("bad magic"));
    }
    if b[3] != WIRE_VERSION {
        return Err(WireError::MalformedPacket("unsupported version"));
    }
    let flags_raw = u16::from_le_bytes([b[14], b[15]]);
    if flags_raw & !FLAG_KNOWN != 0 {
        return Err(WireError::MalformedPacket("unknown flag bits"));
    }
    let elided = flags_raw & FLAG_ELIDED != 0;
    let base = if elided { ELIDED_BASE_LEN } else { KV_BASE_LEN };
    if b.len() < base {
        return Err(WireError::MalformedPacket("truncated slot block"));
    }
    let plen_off = base - 4;
    let plen = u32::from_le_bytes([b[plen_off], b[plen_off + 1], b[plen_off + 2], b[plen_off + 3]])
        as usize;
    if b.len() != base + plen {
        return Err(WireError::MalformedPacket("length mismatch"));
    }

    let rd_u32 = |off: usize| u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]]);
    let counter_index = rd_u32(22);
    let mut slots = [Slot::default(); SLOT_COUNT];
    for (i, s) in slots.iter_mut().enumerate() {
        if elided {
            let off = HEADER_LEN + i * 4;
            s.key = counter_index.wrapping_add(i as u32);
            s.value = i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]]);
        } else {
            let off = HEADER_LEN + i * 8;
            s.key = rd_u32(off);
            s.value = i32::from_le_bytes([b[off + 4], b[off + 5], b[off + 6], b[off + 7]]);
        }
    }

    Ok(Packet {
        gaid: rd_u32(4),
        seq: rd_u32(8),
        srrt: u16::from_le_bytes([b[12], b[13]]),
        flip: flags_raw & FLAG_FLIP != 0,
        flags: PacketFlags(flags_raw & !(FLAG_FLIP | FLAG_ELIDED)),
        op_type: b[16],
        bitmap: rd_u32(18),
        counter_index,
        counter_threshold: rd_u32(26),
        slots,
        payload: b[base..].to_vec(),
    })
}

/// Application id at byte 4 without a full decode. Cheap peek used by
/// accounting paths that must not pay for a full decode.
pub fn peek_gaid(b: &[u8]) -> Option<u32> {
    if b.len() >= 8 && b[0..3] == MAGIC {
        Some(u32::from_le_bytes([b[4], b[5], b[6], b[7]]))
    } else {
        None
    }
}

/// Whether the buffer carries elided keys (and so must be re-encoded in the
/// same mode to stay byte-identical).
pub fn peek_elided(b: &[u8]) -> Option<bool> {
    if b.len() >= 16 && b[0..3] == MAGIC {
        Some(u16::from_le_bytes([b[14], b[15]]) & FLAG_ELIDED != 0)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn arbitrary_packet(rng: &mut StdRng, elidable: bool) -> Packet {
        let mut p = Packet {
            gaid: rng.gen(),
            seq: rng.gen(),
            srrt: rng.gen(),
            flip: rng.gen(),
            flags: PacketFlags(rng.gen::<u16>() & 0x7f),
            op_type: rng.gen(),
            bitmap: rng.gen(),
            counter_index: rng.gen(),
            counter_threshold: rng.gen(),
            slots: [Slot::default(); SLOT_COUNT],
            payload: (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect(),
        };
        for (i, s) in p.slots.iter_mut().enumerate() {
            s.key = if elidable {
                p.counter_index.wrapping_add(i as u32)
            } else {
                rng.gen()
            };
            s.value = rng.gen();
        }
        p
    }

    #[test]
    fn zero_packet_round_trips_at_fixed_length() {
        let p = Packet::default();
        let b = encode_packet(&p, false).unwrap();
        assert_eq!(b.len(), KV_BASE_LEN);
        assert_eq!(b.len(), 292);
        assert!(b.len() >= 192 && b.len() <= 320);
        assert_eq!(decode_packet(&b).unwrap(), p);
    }

    #[test]
    fn eliding_keys_saves_exactly_128_bytes() {
        let mut rng = StdRng::seed_from_u64(7);
        let p = arbitrary_packet(&mut rng, true);
        let kv = encode_packet(&p, false).unwrap();
        let elided = encode_packet(&p, true).unwrap();
        assert_eq!(kv.len() - elided.len(), 128);
        assert_eq!(decode_packet(&kv).unwrap(), p);
        assert_eq!(decode_packet(&elided).unwrap(), p);
    }

    #[test]
    fn random_round_trips_both_modes() {
        let mut rng = StdRng::seed_from_u64(0x1dc0de);
        for i in 0..10_000 {
            let elide = i % 2 == 0;
            let p = arbitrary_packet(&mut rng, elide);
            let b = encode_packet(&p, elide).unwrap();
            let q = decode_packet(&b).unwrap();
            assert_eq!(p, q, "mismatch at iteration {i}");
        }
    }

    #[test]
    fn truncated_buffer_is_malformed() {
        let p = Packet::default();
        let b = encode_packet(&p, false).unwrap();
        for cut in [0, 1, ELIDED_BASE_LEN - 1, KV_BASE_LEN - 1] {
            assert!(matches!(
                decode_packet(&b[..cut]),
                Err(WireError::MalformedPacket(_))
            ));
        }
        // Trailing garbage is a length mismatch, not extra payload.
        let mut long = b.clone();
        long.push(0);
        assert!(decode_packet(&long).is_err());
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let b = encode_packet(&Packet::default(), false).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_packet(&bad).is_err());
        let mut bad = b;
        bad[3] = 9;
        assert!(decode_packet(&bad).is_err());
    }

    #[test]
    fn elide_violation_detected() {
        let mut p = Packet::default();
        p.counter_index = 100;
        for (i, s) in p.slots.iter_mut().enumerate() {
            s.key = 100 + i as u32;
        }
        p.slots[17].key = 9999;
        assert_eq!(encode_packet(&p, true), Err(WireError::ElideViolation));
        p.slots[17].key = 117;
        assert!(encode_packet(&p, true).is_ok());
    }

    #[test]
    fn toggling_one_flag_changes_one_bit() {
        let mut rng = StdRng::seed_from_u64(99);
        let setters: [fn(&mut PacketFlags, bool); 7] = [
            PacketFlags::set_of,
            PacketFlags::set_cnf,
            PacketFlags::set_clr,
            PacketFlags::set_cross,
            PacketFlags::set_ecn,
            PacketFlags::set_sa,
            PacketFlags::set_mcast,
        ];
        for _ in 0..200 {
            let p = arbitrary_packet(&mut rng, false);
            let base = encode_packet(&p, false).unwrap();
            for (fi, set) in setters.iter().enumerate() {
                let mut q = p.clone();
                let before = [
                    q.flags.is_of(),
                    q.flags.is_cnf(),
                    q.flags.is_clr(),
                    q.flags.is_cross(),
                    q.flags.ecn(),
                    q.flags.is_sa(),
                    q.flags.is_mcast(),
                ][fi];
                set(&mut q.flags, !before);
                let enc = encode_packet(&q, false).unwrap();
                let diff_bits: u32 = base
                    .iter()
                    .zip(enc.iter())
                    .map(|(a, b)| (a ^ b).count_ones())
                    .sum();
                assert_eq!(diff_bits, 1, "flag {fi} not independent");
            }
            // flip behaves like an eighth independent flag
            let mut q = p.clone();
            q.flip = !q.flip;
            let enc = encode_packet(&q, false).unwrap();
            let diff_bits: u32 = base
                .iter()
                .zip(enc.iter())
                .map(|(a, b)| (a ^ b).count_ones())
                .sum();
            assert_eq!(diff_bits, 1);
        }
    }
}
