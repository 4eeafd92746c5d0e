//! Server-side host agent.
//!
//! Terminates application flows at the service host: acknowledges every data
//! packet, reassembles software calls and dispatches them to a handler,
//! backs up aggregation rounds and replays their results reliably, heals
//! register saturation with an exact correction protocol, and sub-allocates
//! switch cells to hot keys under a pluggable cache policy.
//!
//! The agent is a pure state machine over simulated time: `on_packet` and
//! `on_timer` consume events and return the packets to transmit, and the
//! caller owns delivery. Switch registers are reached through the
//! [`SwitchControl`] trait so the agent can be driven against a real switch
//! state or a test stub.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::controller::KvRegion;
use crate::netfilter::{ClearPolicy, FieldPath, SwitchProgram};
use crate::rpc::{
    decode_frames, encode_frames, fit_i32, CorrectionValue, FieldManifest, Message, PayloadFrame,
    Quantizer, RpcError, Value, OP_QUERY, OP_UPDATE,
};
use crate::switch::{flip_for, Emit, PoolCfg};
use crate::wire::{Packet, PacketFlags, Slot, SLOT_COUNT};
use crate::{NodeId, SimTime, NANOS_PER_MILLI};

// ---------------------------------------------------------------------------
// Switch control-plane access
// ---------------------------------------------------------------------------

/// Reliable control-channel access to the application's switch registers.
/// The data plane never goes through this; it carries cache installs,
/// drains, and late adds, which the emulation treats as instantaneous.
pub trait SwitchControl {
    fn read_cell(&mut self, cell: u32) -> i32;
    fn write_cell(&mut self, cell: u32, v: i32);
}

/// Control backend for applications that hold no switch reservation. Any
/// access is a logic error on the agent's part.
pub struct NoSwitch;

impl SwitchControl for NoSwitch {
    fn read_cell(&mut self, _cell: u32) -> i32 {
        debug_assert!(false, "control read without a reservation");
        0
    }
    fn write_cell(&mut self, _cell: u32, _v: i32) {
        debug_assert!(false, "control write without a reservation");
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    /// Greedy-fill on first sight, then periodic re-rank: hotter uncached
    /// keys evict strictly colder cached ones.
    PeriodicLru,
    /// First key to appear takes a cell and keeps it.
    Fcfs,
    /// Key pins to `data_base + laddr % data_len`; collisions stay software.
    Hash,
    /// Promote once a key has been used at least `pon_threshold` times.
    PoN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheCfg {
    pub policy: CachePolicy,
    /// Use-count window; also the sweep period for [`CachePolicy::PeriodicLru`].
    pub window: SimTime,
    /// Promotion threshold for [`CachePolicy::PoN`].
    pub pon_threshold: u64,
}

impl Default for CacheCfg {
    fn default() -> Self {
        CacheCfg {
            policy: CachePolicy::PeriodicLru,
            window: 100 * NANOS_PER_MILLI,
            pon_threshold: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerAgentCfg {
    pub node: NodeId,
    pub gaid: u32,
    pub app_name: String,
    pub program: SwitchProgram,
    /// Fixed-point digits for array fields (mirrors the deployed filter).
    pub precision: u32,
    /// All client hosts of the application.
    pub clients: Vec<NodeId>,
    /// Result fan-out set; the hosts expected to acknowledge every
    /// server-flow delivery. Defaults to `clients` when built via `basic`.
    pub fanout: Vec<NodeId>,
    /// Flow slot for the server's own emissions.
    pub server_srrt: u16,
    pub w_max: u32,
    /// Stream pool granted on the switch, when any.
    pub pool: Option<PoolCfg>,
    /// Key-value region granted on the switch, when any.
    pub kv: Option<KvRegion>,
    pub cache: CacheCfg,
    /// Lower bound for the retransmission timeout.
    pub rto_floor: SimTime,
    /// Initial smoothed-RTT estimate, refined from acknowledgements.
    pub srtt_init: SimTime,
    /// Field whose elements travel in correction frames (the aggregated
    /// request field), e.g. `"grad"` for a tensor-aggregation service.
    pub correction_field: String,
    /// Request field holding the keyed map for software reassembly, when
    /// the service aggregates a map.
    pub map_field: Option<FieldPath>,
}

impl ServerAgentCfg {
    pub fn basic(
        node: NodeId,
        gaid: u32,
        program: SwitchProgram,
        clients: Vec<NodeId>,
        server_srrt: u16,
        w_max: u32,
    ) -> Self {
        ServerAgentCfg {
            node,
            gaid,
            app_name: String::new(),
            program,
            precision: 0,
            fanout: clients.clone(),
            clients,
            server_srrt,
            w_max,
            pool: None,
            kv: None,
            cache: CacheCfg::default(),
            rto_floor: 4 * NANOS_PER_MILLI,
            srtt_init: NANOS_PER_MILLI,
            correction_field: String::new(),
            map_field: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Events and statistics
// ---------------------------------------------------------------------------

/// Logical key behind a logical address, once learned from bindings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum KeyName {
    Str(String),
    Int(i64),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerEvent {
    /// A software call finished reassembly and was dispatched.
    CallAssembled {
        client: NodeId,
        call_id: u32,
        method: String,
        ok: bool,
    },
    /// A round's result left the agent (first transmission).
    RoundReplied { counter_index: u32, corrected: bool },
    /// Originals were requested from contributors after saturation.
    CorrectionRequested { counter_index: u32 },
    Installed { laddr: u32, cell: u32 },
    Evicted { laddr: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub data_packets: u64,
    pub duplicates: u64,
    pub acks_sent: u64,
    pub crossings_received: u64,
    pub replies_sent: u64,
    pub reply_retransmits: u64,
    pub corrections_requested: u64,
    pub corrections_completed: u64,
    pub software_chunks: u64,
    pub queries_served: u64,
    pub grants_piggybacked: u64,
    pub revokes_sent: u64,
    pub installs: u64,
    pub evictions: u64,
    pub late_adds: u64,
    pub fallback_slots: u64,
    pub kv_saturations: u64,
    pub handler_calls: u64,
    pub drained_ignored: u64,
    pub stale_crossings: u64,
    pub round_tag_conflicts: u64,
}

pub type Handler = Box<dyn FnMut(&str, &Message) -> Result<Message, RpcError>>;

// ---------------------------------------------------------------------------
// Reply flow (server -> clients) with per-target acknowledgement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum TxPurpose {
    /// Result of an aggregation round (normal or corrected). The epoch pins
    /// the round instance: copy and lazy streams reuse counter indexes every
    /// round, so the key alone is ambiguous.
    Reply { round: u32, epoch: u64 },
    /// Ask contributors to resend originals for a saturated round.
    CorrectionRequest,
    /// Cache-cell revocation; cells return to the free list when every
    /// client has acknowledged and residue has been folded back.
    Revoke { entries: Vec<(u32, u32)> },
    /// Software reply to an assembled call, or a keyed-query answer.
    CallReply,
    /// Server-initiated register clear (lock release, administrative).
    Clear,
}

#[derive(Debug, Clone)]
struct PendingTx {
    pkt: Packet,
    elided: bool,
    /// `Some(node)`: send one copy toward `node` and let the switch fan it
    /// out. `None`: unicast a copy to every pending target.
    fork_via: Option<NodeId>,
    pending: BTreeSet<NodeId>,
    purpose: TxPurpose,
}

#[derive(Debug, Clone)]
struct ReplyTx {
    pkt: Packet,
    elided: bool,
    fork_via: Option<NodeId>,
    pending: BTreeSet<NodeId>,
    purpose: TxPurpose,
    first_sent: SimTime,
    rto_at: SimTime,
    retransmits: u32,
    sampled: bool,
}

fn emit_tx(tx: &ReplyTx, out: &mut Vec<Emit>) {
    match tx.fork_via {
        Some(via) => out.push(Emit {
            pkt: tx.pkt.clone(),
            dst: via,
            elided: tx.elided,
        }),
        None => {
            for &dst in &tx.pending {
                out.push(Emit {
                    pkt: tx.pkt.clone(),
                    dst,
                    elided: tx.elided,
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rounds (aggregation bookkeeping)
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct Round {
    /// Distinguishes successive rounds that share a counter index.
    epoch: u64,
    /// Client-assigned round number, learned from resent originals. Echoed
    /// on requests and corrected replies so endpoints that have already
    /// advanced past this round can tell the reply is not for them.
    round_tag: Option<u32>,
    contributors: BTreeSet<NodeId>,
    /// Exact per-element contributions, replayed by clients on request or
    /// volunteered for software chunks; keyed by contributor then element.
    originals: BTreeMap<NodeId, BTreeMap<u32, CorrectionValue>>,
    /// Aggregate snapshot from the threshold crossing: bitmap, keyed slots,
    /// counter_threshold.
    backup: Option<(u32, Vec<(u32, i32)>, u32)>,
    /// Some register feeding this round saturated; slot values cannot be
    /// trusted and originals must be collected.
    poisoned: bool,
    requested: bool,
    /// Round data travelled with elided keys; replies echo the encoding.
    elided: bool,
    /// Server-flow sequence of the reply, once one left the queue.
    reply_seq: Option<u32>,
    replied: bool,
    /// Reply acknowledged by every fan-out target.
    done: bool,
}

/// What `advance_round` decided while holding the round borrow.
enum RoundAction {
    None,
    Normal {
        epoch: u64,
        bitmap: u32,
        slots: Vec<(u32, i32)>,
        counter_threshold: u32,
        elided: bool,
    },
    Correct {
        epoch: u64,
        originals: BTreeMap<NodeId, BTreeMap<u32, CorrectionValue>>,
        counter_threshold: u32,
        /// A crossing snapshot exists, i.e. switch registers backed this
        /// round and the server owns their clearing.
        has_backup: bool,
        poisoned: bool,
        round_tag: Option<u32>,
    },
    Request {
        targets: BTreeSet<NodeId>,
        round_tag: Option<u32>,
    },
}

// ---------------------------------------------------------------------------
// Software call reassembly
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct CallAssembly {
    method: String,
    total: Option<u32>,
    received: BTreeSet<u32>,
    values: BTreeMap<String, Value>,
    /// Keyed-map contributions accumulated across the call's packets
    /// (software fallback slots and forwarded in-network slots alike).
    map_entries: BTreeMap<u32, i64>,
    dispatched: bool,
}

impl CallAssembly {
    fn new() -> Self {
        CallAssembly {
            method: String::new(),
            total: None,
            received: BTreeSet::new(),
            values: BTreeMap::new(),
            map_entries: BTreeMap::new(),
            dispatched: false,
        }
    }

    fn complete(&self) -> bool {
        match self.total {
            Some(t) => self.received.len() as u32 >= t,
            None => false,
        }
    }
}

// ---------------------------------------------------------------------------
// Key-value cache state
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct KvEntry {
    name: KeyName,
    /// Server-side accumulator; authoritative while the key is uncached,
    /// exactly zero while a register holds the value.
    shadow: i64,
    cell: Option<u32>,
    quarantined: bool,
}

#[derive(Debug)]
struct KvState {
    region: KvRegion,
    entries: BTreeMap<u32, KvEntry>,
    /// Free data cells, sorted descending so `pop` yields the lowest.
    free: Vec<u32>,
    cell_owner: BTreeMap<u32, u32>,
    /// Reported use counts in the current window.
    window_counts: BTreeMap<u32, u64>,
    totals: BTreeMap<u32, u64>,
    sweep_at: SimTime,
    /// Reservation released (idle drain); no installs until rebound.
    dormant: bool,
}

impl KvState {
    fn new(region: KvRegion, first_sweep: SimTime) -> Self {
        let mut free: Vec<u32> = (region.data_base..region.data_base + region.data_len).collect();
        free.sort_unstable_by(|a, b| b.cmp(a));
        KvState {
            region,
            entries: BTreeMap::new(),
            free,
            cell_owner: BTreeMap::new(),
            window_counts: BTreeMap::new(),
            totals: BTreeMap::new(),
            sweep_at: first_sweep,
            dormant: false,
        }
    }

    fn entry(&mut self, laddr: u32) -> &mut KvEntry {
        self.entries.entry(laddr).or_insert_with(|| KvEntry {
            name: KeyName::Unknown,
            shadow: 0,
            cell: None,
            quarantined: false,
        })
    }

    fn cached_cell(&self, laddr: u32) -> Option<u32> {
        self.entries
            .get(&laddr)
            .filter(|e| !e.quarantined)
            .and_then(|e| e.cell)
    }
}

// ---------------------------------------------------------------------------
// The agent
// ---------------------------------------------------------------------------

pub struct ServerAgent {
    cfg: ServerAgentCfg,
    quant: Quantizer,
    /// Per-(origin, flow) sequence numbers already seen, for at-most-once
    /// application of non-idempotent effects. Every packet is acknowledged
    /// regardless.
    seen: BTreeMap<(NodeId, u16), BTreeSet<u32>>,
    calls: BTreeMap<(NodeId, u32), CallAssembly>,
    rounds: BTreeMap<u32, Round>,
    round_epoch: u64,
    kv: Option<KvState>,
    handler: Option<Handler>,
    /// Installs decided while the control channel was not at hand.
    pending_installs: Vec<(u32, Option<u32>)>,

    // Server flow.
    next_seq: u32,
    inflight: BTreeMap<u32, ReplyTx>,
    queue: VecDeque<PendingTx>,
    srtt: SimTime,

    pub events: Vec<ServerEvent>,
    pub stats: ServerStats,
}

impl fmt::Debug for ServerAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerAgent")
            .field("gaid", &self.cfg.gaid)
            .field("inflight", &self.inflight.len())
            .field("rounds", &self.rounds.len())
            .finish()
    }
}

impl ServerAgent {
    pub fn new(cfg: ServerAgentCfg) -> Self {
        let kv = cfg.kv.map(|region| KvState::new(region, cfg.cache.window));
        let quant = Quantizer::new(cfg.precision);
        let srtt = cfg.srtt_init;
        ServerAgent {
            cfg,
            quant,
            seen: BTreeMap::new(),
            calls: BTreeMap::new(),
            rounds: BTreeMap::new(),
            round_epoch: 0,
            kv,
            handler: None,
            pending_installs: Vec::new(),
            next_seq: 0,
            inflight: BTreeMap::new(),
            queue: VecDeque::new(),
            srtt,
            events: Vec::new(),
            stats: ServerStats::default(),
        }
    }

    pub fn set_handler(&mut self, h: Handler) {
        self.handler = Some(h);
    }

    pub fn cfg(&self) -> &ServerAgentCfg {
        &self.cfg
    }

    /// Nothing queued, nothing awaiting acknowledgement.
    pub fn quiescent(&self) -> bool {
        self.queue.is_empty() && self.inflight.is_empty()
    }

    /// Earliest time `on_timer` has work to do.
    pub fn next_timer(&self) -> Option<SimTime> {
        let mut t: Option<SimTime> = self.inflight.values().map(|tx| tx.rto_at).min();
        if let Some(kv) = &self.kv {
            if self.cfg.cache.policy == CachePolicy::PeriodicLru
                && !kv.dormant
                && kv.region.data_len > 0
            {
                t = Some(match t {
                    Some(x) => x.min(kv.sweep_at),
                    None => kv.sweep_at,
                });
            }
        }
        t
    }

    // -- ingress --------------------------------------------------------

    pub fn on_packet(
        &mut self,
        now: SimTime,
        src: NodeId,
        pkt: &Packet,
        elided: bool,
        ce: bool,
        ctl: &mut dyn SwitchControl,
    ) -> Vec<Emit> {
        let mut out = Vec::new();
        let frames = decode_frames(&pkt.payload).unwrap_or_default();

        if pkt.flags.is_sa() {
            // Acknowledgements and standalone reports: never acknowledged
            // back, never deduplicated (their effects are idempotent).
            self.intake_reports(&frames);
            self.run_pending_installs(ctl);
            if pkt.srrt == self.cfg.server_srrt {
                self.on_ack(now, src, pkt.seq, ctl);
            }
            self.flush(now, &mut out);
            return out;
        }

        self.stats.data_packets += 1;
        let fresh = self.note_seen(src, pkt.srrt, pkt.seq);
        if !fresh {
            self.stats.duplicates += 1;
        }

        // Name bindings and piggybacked reports are idempotent; run them for
        // duplicates too so a lost ack cannot lose a binding.
        self.intake_reports(&frames);
        self.intake_call_frames(src, pkt, &frames, fresh);

        // Round bookkeeping belongs to threshold streams; a key-value app
        // with a notify counter forwards sub-threshold traffic here too, but
        // its packets carry no rounds to track.
        let rounds_on = self.cfg.program.threshold > 0 && self.kv.is_none();
        let is_data_update = pkt.op_type == OP_UPDATE && !pkt.flags.is_clr();
        // A fresh packet whose tag names an already-answered round is a
        // straggler that missed the reply: replay it instead of opening a
        // new round instance.
        let replayed = is_data_update
            && rounds_on
            && fresh
            && self.replay_completed(now, pkt.counter_index, round_tag_of(&frames), &mut out);

        if pkt.op_type == OP_QUERY && pkt.flags.is_cross() {
            self.serve_query(pkt, &frames, src, ctl);
        } else if replayed {
            // Nothing further: the stored reply is already on its way.
        } else if is_data_update && pkt.flags.is_cnf() {
            // A threshold crossing reached the server.
            self.stats.crossings_received += 1;
            if rounds_on {
                self.on_crossing(now, src, pkt, elided, fresh, &mut out);
            }
        } else if is_data_update && has_corrections(&frames) {
            // Originals: solicited resends or volunteered software chunks.
            if rounds_on {
                self.record_originals(src, pkt, &frames, elided, fresh);
            }
        } else if is_data_update && pkt.flags.is_cross() {
            // Software-path data: key-value fallback, or a software chunk of
            // a threshold stream carrying its exact values in the slots.
            if self.kv.is_some() {
                if fresh {
                    self.apply_fallback_slots(pkt, ctl);
                }
            } else if rounds_on {
                self.record_slot_originals(src, pkt, &frames, elided, fresh);
            }
        } else if is_data_update && rounds_on && pkt.srrt != 0 {
            // Sub-threshold in-network forward: contributor bookkeeping.
            // Slot contents were already folded into switch registers.
            let is_of = pkt.flags.is_of();
            if let Some(r) = self.round_entry(pkt.counter_index, fresh) {
                r.contributors.insert(src);
                r.elided = elided;
                if is_of {
                    r.poisoned = true;
                }
            }
        }

        if rounds_on && is_data_update && !replayed {
            self.advance_round(pkt.counter_index);
        }
        if let Some(call_id) = chunk_tag_of(&frames) {
            self.maybe_dispatch_call(src, call_id);
        }

        // Acknowledge everything, duplicates included: the ack is what stops
        // the sender's retransmission timer.
        let grants = self.grants_for(pkt, &frames);
        out.push(self.make_ack(pkt, src, ce, grants));
        self.flush(now, &mut out);
        out
    }

    /// Retransmission timeouts and the periodic cache sweep.
    pub fn on_timer(&mut self, now: SimTime, ctl: &mut dyn SwitchControl) -> Vec<Emit> {
        let mut out = Vec::new();
        let rto = self.rto();
        let due: Vec<u32> = self
            .inflight
            .iter()
            .filter(|(_, tx)| tx.rto_at <= now)
            .map(|(&s, _)| s)
            .collect();
        for seq in due {
            let tx = self.inflight.get_mut(&seq).expect("due tx");
            tx.retransmits += 1;
            tx.rto_at = now + rto;
            self.stats.reply_retransmits += 1;
            emit_tx(tx, &mut out);
        }

        let sweep_now = match &self.kv {
            Some(kv) => {
                self.cfg.cache.policy == CachePolicy::PeriodicLru
                    && !kv.dormant
                    && kv.region.data_len > 0
                    && kv.sweep_at <= now
            }
            None => false,
        };
        if sweep_now {
            self.lru_sweep(ctl);
            let kv = self.kv.as_mut().expect("kv state");
            kv.window_counts.clear();
            kv.sweep_at = now + self.cfg.cache.window;
        }

        self.flush(now, &mut out);
        out
    }

    // -- administrative entry points --------------------------------------

    /// Fold the controller's idle drain back into server-side state. Stream
    /// pools hold only transient round state, which is dropped; key-value
    /// registers merge into shadows and every binding is released.
    pub fn absorb_drained(&mut self, drained: &[(u32, i32)]) {
        let Some(kv) = &mut self.kv else {
            self.stats.drained_ignored += drained.len() as u64;
            return;
        };
        for &(cell, v) in drained {
            if let Some(&laddr) = kv.cell_owner.get(&cell) {
                kv.entries.get_mut(&laddr).expect("owned cell").shadow += v as i64;
            }
        }
        for e in kv.entries.values_mut() {
            e.cell = None;
            e.quarantined = false;
        }
        kv.cell_owner.clear();
        kv.free.clear();
        kv.dormant = true;
        self.pending_installs.clear();
    }

    /// Attach a (re-)granted key-value region after an idle drain. Cached
    /// bindings restart empty; shadows are re-granted by the cache policy.
    pub fn rebind_kv(&mut self, region: KvRegion, now: SimTime) {
        let window = self.cfg.cache.window;
        let preserved = self.kv.take();
        let mut fresh = KvState::new(region, now + window);
        if let Some(old) = preserved {
            fresh.entries = old.entries;
            for e in fresh.entries.values_mut() {
                e.cell = None;
                e.quarantined = false;
            }
            fresh.totals = old.totals;
        }
        self.kv = Some(fresh);
    }

    /// Deliver (stub alive) or delete the application's server-side state.
    pub fn second_level_sweep(
        &mut self,
        stub_alive: bool,
        ctl: &mut dyn SwitchControl,
    ) -> Option<Vec<(u32, KeyName, i64)>> {
        let dump = if stub_alive {
            Some(self.kv_totals(ctl))
        } else {
            None
        };
        self.kv = None;
        self.calls.clear();
        self.rounds.clear();
        dump
    }

    /// Current value of every known key: shadow plus the live register for
    /// cached entries.
    pub fn kv_totals(&mut self, ctl: &mut dyn SwitchControl) -> Vec<(u32, KeyName, i64)> {
        let Some(kv) = &self.kv else {
            return Vec::new();
        };
        kv.entries
            .iter()
            .map(|(&laddr, e)| {
                let reg = match (e.cell, e.quarantined) {
                    (Some(c), false) => ctl.read_cell(c) as i64,
                    _ => 0,
                };
                (laddr, e.name.clone(), e.shadow + reg)
            })
            .collect()
    }

    /// Enqueue a server-initiated clear of the named slots and counter
    /// (administrative resets, lock release).
    pub fn request_clear(&mut self, now: SimTime, keys: &[u32], counter_index: u32) -> Vec<Emit> {
        let mut pkt = self.base_packet();
        pkt.flags.set_clr(true);
        pkt.counter_index = counter_index;
        for (i, &k) in keys.iter().take(SLOT_COUNT).enumerate() {
            pkt.slots[i] = Slot { key: k, value: 0 };
            pkt.set_slot_enabled(i, true);
        }
        let via = self.cfg.fanout.first().copied();
        self.queue.push_back(PendingTx {
            pkt,
            elided: false,
            fork_via: via,
            pending: self.cfg.fanout.iter().copied().collect(),
            purpose: TxPurpose::Clear,
        });
        let mut out = Vec::new();
        self.flush(now, &mut out);
        out
    }

    // -- internals: dedup, acks, flow --------------------------------------

    fn note_seen(&mut self, src: NodeId, srrt: u16, seq: u32) -> bool {
        let set = self.seen.entry((src, srrt)).or_default();
        let fresh = set.insert(seq);
        // Bounded memory: anything this far behind the head cannot be a live
        // retransmission under the sender's window discipline.
        let cap = (8 * self.cfg.w_max) as usize;
        if set.len() > cap {
            let head = *set.iter().next_back().expect("non-empty");
            let cut = head.saturating_sub(4 * self.cfg.w_max);
            set.retain(|&s| s >= cut);
        }
        fresh
    }

    fn make_ack(&mut self, pkt: &Packet, src: NodeId, ce: bool, grants: Vec<(u32, u32)>) -> Emit {
        let mut ack = Packet {
            gaid: self.cfg.gaid,
            seq: pkt.seq,
            srrt: pkt.srrt,
            counter_index: pkt.counter_index,
            ..Packet::default()
        };
        ack.flags.set_sa(true);
        // Congestion observed on the way here travels back on the ack.
        ack.flags.set_ecn(ce || pkt.flags.ecn());
        if !grants.is_empty() {
            self.stats.grants_piggybacked += grants.len() as u64;
            ack.payload = encode_frames(&[PayloadFrame::MappingGrants { entries: grants }]);
        }
        self.stats.acks_sent += 1;
        Emit {
            pkt: ack,
            dst: src,
            elided: false,
        }
    }

    fn rto(&self) -> SimTime {
        (2 * self.srtt).max(self.cfg.rto_floor)
    }

    fn window_open(&self) -> bool {
        if self.inflight.len() >= self.cfg.w_max as usize {
            return false;
        }
        match self.next_seq.checked_sub(self.cfg.w_max) {
            Some(old) => !self.inflight.contains_key(&old),
            None => true,
        }
    }

    fn flush(&mut self, now: SimTime, out: &mut Vec<Emit>) {
        while !self.queue.is_empty() && self.window_open() {
            let p = self.queue.pop_front().expect("non-empty queue");
            let seq = self.next_seq;
            self.next_seq += 1;
            let mut pkt = p.pkt;
            pkt.seq = seq;
            pkt.flip = flip_for(seq, self.cfg.w_max);
            if let TxPurpose::Reply { round, epoch } = &p.purpose {
                if let Some(r) = self.rounds.get_mut(round) {
                    if r.epoch == *epoch {
                        r.reply_seq = Some(seq);
                    }
                }
            }
            let tx = ReplyTx {
                pkt,
                elided: p.elided,
                fork_via: p.fork_via,
                pending: p.pending,
                purpose: p.purpose,
                first_sent: now,
                rto_at: now + self.rto(),
                retransmits: 0,
                sampled: false,
            };
            emit_tx(&tx, out);
            self.stats.replies_sent += 1;
            self.inflight.insert(seq, tx);
        }
    }

    fn on_ack(&mut self, now: SimTime, src: NodeId, seq: u32, ctl: &mut dyn SwitchControl) {
        let Some(tx) = self.inflight.get_mut(&seq) else {
            return;
        };
        if !tx.pending.remove(&src) {
            return;
        }
        if !tx.sampled && tx.retransmits == 0 {
            tx.sampled = true;
            let sample = now.saturating_sub(tx.first_sent).max(1);
            self.srtt = (7 * self.srtt + sample) / 8;
        }
        if tx.pending.is_empty() {
            let tx = self.inflight.remove(&seq).expect("completed tx");
            self.complete_tx(tx, ctl);
        }
    }

    fn complete_tx(&mut self, tx: ReplyTx, ctl: &mut dyn SwitchControl) {
        match tx.purpose {
            TxPurpose::Reply { round, epoch } => {
                if let Some(r) = self.rounds.get_mut(&round) {
                    if r.epoch == epoch {
                        r.done = true;
                    }
                }
                self.gc_rounds();
            }
            TxPurpose::Revoke { entries } => {
                let Some(kv) = &mut self.kv else { return };
                for (laddr, cell) in entries {
                    // Everything that raced the revocation has drained
                    // through by now (same-path FIFO); fold the residue.
                    let residue = ctl.read_cell(cell);
                    if residue != 0 {
                        ctl.write_cell(cell, 0);
                    }
                    if let Some(e) = kv.entries.get_mut(&laddr) {
                        e.shadow += residue as i64;
                        e.cell = None;
                        e.quarantined = false;
                    }
                    kv.cell_owner.remove(&cell);
                    kv.free.push(cell);
                }
                kv.free.sort_unstable_by(|a, b| b.cmp(a));
            }
            TxPurpose::CorrectionRequest | TxPurpose::CallReply | TxPurpose::Clear => {}
        }
    }

    fn gc_rounds(&mut self) {
        let cap = (4 * self.cfg.w_max) as usize;
        while self.rounds.len() > cap {
            let victim = self
                .rounds
                .iter()
                .find(|(_, r)| r.done)
                .map(|(&k, _)| k);
            match victim {
                Some(k) => {
                    self.rounds.remove(&k);
                }
                None => break,
            }
        }
    }

    // -- internals: rounds ----------------------------------------------

    /// Round bookkeeping entry point. A fresh contribution to a key whose
    /// previous round has already been answered starts a new round instance;
    /// a duplicate for a round that no longer exists is stale and touches
    /// nothing (it still gets acknowledged by the caller).
    fn round_entry(&mut self, key: u32, fresh: bool) -> Option<&mut Round> {
        if fresh {
            if self.rounds.get(&key).map(|r| r.replied).unwrap_or(false) {
                self.rounds.remove(&key);
            }
        } else if !self.rounds.contains_key(&key) {
            self.stats.stale_crossings += 1;
            return None;
        }
        self.round_epoch += 1;
        let epoch = self.round_epoch;
        Some(self.rounds.entry(key).or_insert_with(|| Round {
            epoch,
            ..Round::default()
        }))
    }

    /// If `tag` names the round instance this key last answered, push the
    /// stored reply out again (toward whoever has not acknowledged it) and
    /// report `true`; the caller then skips all round bookkeeping.
    fn replay_completed(
        &mut self,
        now: SimTime,
        key: u32,
        tag: Option<u32>,
        out: &mut Vec<Emit>,
    ) -> bool {
        let Some(tag) = tag else { return false };
        let reply_seq = match self.rounds.get(&key) {
            Some(r) if r.replied && r.round_tag == Some(tag) => r.reply_seq,
            _ => return false,
        };
        let rto = self.rto();
        match reply_seq.and_then(|s| self.inflight.get_mut(&s)) {
            Some(tx) => {
                tx.retransmits += 1;
                tx.rto_at = now + rto;
                self.stats.reply_retransmits += 1;
                emit_tx(tx, out);
            }
            None => self.stats.stale_crossings += 1,
        }
        true
    }

    fn on_crossing(
        &mut self,
        now: SimTime,
        src: NodeId,
        pkt: &Packet,
        elided: bool,
        fresh: bool,
        out: &mut Vec<Emit>,
    ) {
        let rto = self.rto();
        let Some(r) = self.round_entry(pkt.counter_index, fresh) else {
            return;
        };
        r.contributors.insert(src);
        r.elided = elided;
        if pkt.flags.is_of() {
            r.poisoned = true;
        }
        if r.backup.is_none() {
            let mut slots = Vec::new();
            for i in 0..SLOT_COUNT {
                if pkt.slot_enabled(i) {
                    slots.push((pkt.slots[i].key, pkt.slots[i].value));
                }
            }
            r.backup = Some((pkt.bitmap, slots, pkt.counter_threshold));
        }
        if !fresh {
            // A re-fired crossing means some client is still retransmitting:
            // push the reply out again without waiting for the timer.
            let reply_seq = r.reply_seq;
            let was_done = r.replied && r.done;
            match reply_seq.and_then(|s| self.inflight.get_mut(&s)) {
                Some(tx) => {
                    tx.retransmits += 1;
                    tx.rto_at = now + rto;
                    self.stats.reply_retransmits += 1;
                    emit_tx(tx, out);
                }
                None => {
                    if was_done {
                        self.stats.stale_crossings += 1;
                    }
                }
            }
        }
    }

    fn record_originals(
        &mut self,
        src: NodeId,
        pkt: &Packet,
        frames: &[PayloadFrame],
        elided: bool,
        fresh: bool,
    ) {
        let is_of = pkt.flags.is_of();
        let tag = round_tag_of(frames);
        let Some(r) = self.round_entry(pkt.counter_index, fresh) else {
            return;
        };
        if let (Some(have), Some(got)) = (r.round_tag, tag) {
            if have != got {
                // A contribution from an adjacent round of the same counter
                // index; folding it here would corrupt both rounds. The
                // sender retains its originals and re-sends them on its
                // round-watch timer until the round it belongs to is open.
                self.stats.round_tag_conflicts += 1;
                return;
            }
        }
        r.contributors.insert(src);
        r.elided = elided;
        r.round_tag = r.round_tag.or(tag);
        // An overflowed contributor means switch registers for this round
        // cannot be trusted; the eventual reply must clear them.
        if is_of {
            r.poisoned = true;
        }
        let dest = r.originals.entry(src).or_default();
        for f in frames {
            if let PayloadFrame::Corrections { entries, .. } = f {
                for (k, v) in entries {
                    dest.insert(*k, v.clone());
                }
            }
        }
        self.stats.software_chunks += 1;
    }

    /// A software chunk without explicit correction frames: the enabled
    /// slots are the contributor's exact quantized values.
    fn record_slot_originals(
        &mut self,
        src: NodeId,
        pkt: &Packet,
        frames: &[PayloadFrame],
        elided: bool,
        fresh: bool,
    ) {
        let is_of = pkt.flags.is_of();
        let tag = round_tag_of(frames);
        let Some(r) = self.round_entry(pkt.counter_index, fresh) else {
            return;
        };
        if let (Some(have), Some(got)) = (r.round_tag, tag) {
            if have != got {
                self.stats.round_tag_conflicts += 1;
                return;
            }
        }
        r.contributors.insert(src);
        r.elided = elided;
        r.round_tag = r.round_tag.or(tag);
        if is_of {
            r.poisoned = true;
        }
        let dest = r.originals.entry(src).or_default();
        for i in 0..SLOT_COUNT {
            if pkt.slot_enabled(i) {
                dest.insert(
                    pkt.slots[i].key,
                    CorrectionValue::Wide(pkt.slots[i].value as i64),
                );
            }
        }
        self.stats.software_chunks += 1;
    }

    fn advance_round(&mut self, round_key: u32) {
        let th = self.cfg.program.threshold;
        if th == 0 {
            return;
        }
        // Under copy clearing the registers are the server's to reset: every
        // reply clears them on the way through the switch and fans out from
        // there. Under shadow or lazy clearing the registers renew without
        // the server (mirror wipe, cumulative snapshots), so replies must
        // travel the software path and leave switch state alone.
        let clear_owned = self.cfg.program.clear == ClearPolicy::Copy;
        let fanout: Vec<NodeId> = self.cfg.fanout.clone();
        let action = {
            let Some(r) = self.rounds.get_mut(&round_key) else {
                return;
            };
            if r.replied {
                RoundAction::None
            } else if r.originals.len() as u32 >= th {
                r.replied = true;
                RoundAction::Correct {
                    epoch: r.epoch,
                    originals: r.originals.clone(),
                    counter_threshold: r.backup.as_ref().map(|b| b.2).unwrap_or(th),
                    has_backup: r.backup.is_some(),
                    poisoned: r.poisoned,
                    round_tag: r.round_tag,
                }
            } else if !r.requested
                && (r.poisoned
                    || (!r.originals.is_empty() && r.contributors.len() as u32 >= th))
                && (r.originals.len() as u32) < th
            {
                r.requested = true;
                // A poisoned round may have contributors the server never
                // saw (absorbed sub-threshold traffic), so ask the whole
                // fan-out set; otherwise only the known contributors.
                let base: BTreeSet<NodeId> = if r.poisoned {
                    fanout.iter().copied().collect()
                } else {
                    r.contributors.clone()
                };
                let targets: BTreeSet<NodeId> = base
                    .into_iter()
                    .filter(|n| !r.originals.contains_key(n))
                    .collect();
                if targets.is_empty() {
                    RoundAction::None
                } else {
                    RoundAction::Request {
                        targets,
                        round_tag: r.round_tag,
                    }
                }
            } else if !r.poisoned && r.originals.is_empty() && r.backup.is_some() {
                r.replied = true;
                let (bitmap, slots, counter_threshold) =
                    r.backup.clone().expect("backup just checked");
                RoundAction::Normal {
                    epoch: r.epoch,
                    bitmap,
                    slots,
                    counter_threshold,
                    elided: r.elided,
                }
            } else {
                RoundAction::None
            }
        };

        match action {
            RoundAction::None => {}
            RoundAction::Normal {
                epoch,
                bitmap,
                slots,
                counter_threshold,
                elided,
            } => {
                // Clean crossing: replay the aggregate, clearing registers on
                // the way when the policy hands them back to the server.
                let mut pkt = self.base_packet();
                pkt.counter_index = round_key;
                pkt.counter_threshold = counter_threshold;
                pkt.bitmap = bitmap;
                pkt.flags.set_cnf(true);
                if clear_owned {
                    pkt.flags.set_clr(true);
                } else {
                    pkt.flags.set_cross(true);
                }
                let mut it = slots.iter();
                for i in 0..SLOT_COUNT {
                    if pkt.slot_enabled(i) {
                        let &(k, v) = it.next().expect("backup slot per bitmap bit");
                        pkt.slots[i] = Slot { key: k, value: v };
                    }
                }
                // A clearing reply forks at the switch; a software reply
                // travels the bypass lane and must be addressed per client.
                let via = if clear_owned {
                    self.cfg.fanout.first().copied()
                } else {
                    None
                };
                self.queue.push_back(PendingTx {
                    pkt,
                    elided,
                    fork_via: via,
                    pending: self.cfg.fanout.iter().copied().collect(),
                    purpose: TxPurpose::Reply {
                        round: round_key,
                        epoch,
                    },
                });
                self.events.push(ServerEvent::RoundReplied {
                    counter_index: round_key,
                    corrected: false,
                });
            }
            RoundAction::Correct {
                epoch,
                originals,
                counter_threshold,
                has_backup,
                poisoned,
                round_tag,
            } => {
                let (slots, any_raw) = finalize_originals(&originals, &self.quant);
                let mut pkt = self.base_packet();
                pkt.counter_index = round_key;
                pkt.counter_threshold = counter_threshold;
                pkt.flags.set_cnf(true);
                if clear_owned {
                    // Wipe the untrusted registers on the way through the
                    // switch; the correction frames carry the exact values.
                    // No overflow or software marks here: either would put
                    // the packet on the bypass lane, skipping the fork.
                    pkt.flags.set_clr(true);
                } else {
                    // The registers are not this round's to reset -
                    // successor rounds may already be accumulating in them.
                    // The reply itself is the result.
                    pkt.flags.set_cross(true);
                    if poisoned || any_raw {
                        pkt.flags.set_of(true);
                    }
                }
                let mut entries = Vec::new();
                for (i, (k, v, cv)) in slots.iter().enumerate() {
                    if i < SLOT_COUNT {
                        pkt.slots[i] = Slot { key: *k, value: *v };
                        pkt.set_slot_enabled(i, true);
                    }
                    entries.push((*k, cv.clone()));
                }
                let mut frames = Vec::new();
                if let Some(tag) = round_tag {
                    frames.push(PayloadFrame::CallTag { call_id: tag });
                }
                frames.push(PayloadFrame::Corrections {
                    field: self.cfg.correction_field.clone(),
                    entries,
                });
                pkt.payload = encode_frames(&frames);
                let via = if clear_owned {
                    self.cfg.fanout.first().copied()
                } else {
                    None
                };
                self.queue.push_back(PendingTx {
                    pkt,
                    elided: false,
                    fork_via: via,
                    pending: self.cfg.fanout.iter().copied().collect(),
                    purpose: TxPurpose::Reply {
                        round: round_key,
                        epoch,
                    },
                });
                let corrected = has_backup || poisoned;
                if corrected {
                    self.stats.corrections_completed += 1;
                }
                self.events.push(ServerEvent::RoundReplied {
                    counter_index: round_key,
                    corrected,
                });
            }
            RoundAction::Request { targets, round_tag } => {
                let mut pkt = self.base_packet();
                pkt.counter_index = round_key;
                pkt.counter_threshold = th;
                pkt.flags.set_of(true);
                pkt.flags.set_cross(true);
                if let Some(tag) = round_tag {
                    pkt.payload =
                        encode_frames(&[PayloadFrame::CallTag { call_id: tag }]);
                }
                self.queue.push_back(PendingTx {
                    pkt,
                    elided: false,
                    fork_via: None,
                    pending: targets,
                    purpose: TxPurpose::CorrectionRequest,
                });
                self.stats.corrections_requested += 1;
                self.events.push(ServerEvent::CorrectionRequested {
                    counter_index: round_key,
                });
            }
        }
    }

    // -- internals: software calls -----------------------------------------

    fn intake_call_frames(
        &mut self,
        src: NodeId,
        pkt: &Packet,
        frames: &[PayloadFrame],
        fresh: bool,
    ) {
        let Some((call_id, chunk)) = chunk_and_tag_of(frames) else {
            return;
        };
        // Keyed-map contributions feed call reconstruction; the map itself
        // was merged elsewhere (switch registers or fallback shadows). Only
        // fresh packets accumulate, mirroring at-most-once merge semantics.
        let mut map_adds: Vec<(u32, i64)> = Vec::new();
        if fresh
            && pkt.op_type == OP_UPDATE
            && !pkt.flags.is_clr()
            && self.cfg.map_field.is_some()
        {
            for i in 0..SLOT_COUNT {
                if pkt.slot_enabled(i) {
                    map_adds.push((
                        self.laddr_of_slot_key(pkt.slots[i].key),
                        pkt.slots[i].value as i64,
                    ));
                }
            }
        }
        let call = self
            .calls
            .entry((src, call_id))
            .or_insert_with(CallAssembly::new);
        call.received.insert(chunk);
        for f in frames {
            match f {
                PayloadFrame::CallHeader {
                    method,
                    total_packets,
                    ..
                } => {
                    call.method = method.clone();
                    call.total = Some(*total_packets);
                }
                PayloadFrame::PayloadValue { field, value } => {
                    call.values.insert(field.clone(), value.clone());
                }
                _ => {}
            }
        }
        for (laddr, v) in map_adds {
            *call.map_entries.entry(laddr).or_insert(0) += v;
        }
    }

    /// Map a slot key back to its logical address: in-network packets carry
    /// physical cells for cached keys, software packets carry the address
    /// itself.
    fn laddr_of_slot_key(&self, key: u32) -> u32 {
        if let Some(kv) = &self.kv {
            if let Some(&laddr) = kv.cell_owner.get(&key) {
                return laddr;
            }
        }
        key
    }

    fn maybe_dispatch_call(&mut self, src: NodeId, call_id: u32) {
        let ready = match self.calls.get(&(src, call_id)) {
            Some(c) => !c.dispatched && c.complete(),
            None => false,
        };
        if !ready {
            return;
        }
        let (method, request) = {
            let call = self.calls.get_mut(&(src, call_id)).expect("checked above");
            call.dispatched = true;
            let mut request = Message::new(&call.method);
            for (k, v) in &call.values {
                request.fields.insert(k.clone(), v.clone());
            }
            (call.method.clone(), request)
        };
        let request = match &self.cfg.map_field {
            Some(path) => {
                let entries = self.calls[&(src, call_id)].map_entries.clone();
                let map = self.reconstruct_map(&entries);
                let mut r = request;
                r.fields.insert(path.field.clone(), map);
                r
            }
            None => request,
        };

        let reply = match &mut self.handler {
            Some(h) => {
                self.stats.handler_calls += 1;
                Some(h(&method, &request))
            }
            None => None,
        };
        let ok = !matches!(reply, Some(Err(_)));
        self.events.push(ServerEvent::CallAssembled {
            client: src,
            call_id,
            method: method.clone(),
            ok,
        });

        let Some(result) = reply else { return };
        // Single-packet software reply: header, values, and the tag the
        // caller matches on.
        let mut frames = Vec::new();
        frames.push(PayloadFrame::ChunkTag { call_id, chunk: 0 });
        match result {
            Ok(msg) => {
                let fields: Vec<FieldManifest> = msg
                    .fields
                    .iter()
                    .map(|(name, v)| FieldManifest {
                        name: name.clone(),
                        type_tag: v.type_tag(),
                        len: 0,
                        laddr_base: 0,
                    })
                    .collect();
                frames.push(PayloadFrame::ReplyHeader {
                    call_id,
                    ok: true,
                    error: String::new(),
                    seq_base: 0,
                    total_packets: 1,
                    fields,
                });
                for (name, v) in &msg.fields {
                    frames.push(PayloadFrame::PayloadValue {
                        field: name.clone(),
                        value: v.clone(),
                    });
                }
            }
            Err(e) => {
                frames.push(PayloadFrame::ReplyHeader {
                    call_id,
                    ok: false,
                    error: error_text(&e),
                    seq_base: 0,
                    total_packets: 1,
                    fields: Vec::new(),
                });
            }
        }
        let mut out_pkt = self.base_packet();
        out_pkt.flags.set_cross(true);
        out_pkt.payload = encode_frames(&frames);
        let mut pending = BTreeSet::new();
        pending.insert(src);
        self.queue.push_back(PendingTx {
            pkt: out_pkt,
            elided: false,
            fork_via: None,
            pending,
            purpose: TxPurpose::CallReply,
        });
    }

    fn reconstruct_map(&self, entries: &BTreeMap<u32, i64>) -> Value {
        let mut str_map: BTreeMap<String, i64> = BTreeMap::new();
        let mut int_map: BTreeMap<i64, i64> = BTreeMap::new();
        let mut ints = 0usize;
        let mut strs = 0usize;
        for (&laddr, &v) in entries {
            let name = self
                .kv
                .as_ref()
                .and_then(|kv| kv.entries.get(&laddr))
                .map(|e| e.name.clone())
                .unwrap_or(KeyName::Unknown);
            match name {
                KeyName::Str(s) => {
                    strs += 1;
                    *str_map.entry(s).or_insert(0) += v;
                }
                KeyName::Int(i) => {
                    ints += 1;
                    *int_map.entry(i).or_insert(0) += v;
                }
                KeyName::Unknown => {}
            }
        }
        if ints > strs {
            Value::IntIntMap(int_map)
        } else {
            Value::StrIntMap(str_map)
        }
    }

    // -- internals: key-value cache -----------------------------------------

    fn intake_reports(&mut self, frames: &[PayloadFrame]) {
        for f in frames {
            match f {
                PayloadFrame::FallbackBindings { entries } => {
                    for (laddr, name) in entries {
                        self.learn_binding(*laddr, KeyName::Str(name.clone()));
                    }
                }
                PayloadFrame::FallbackIntBindings { entries } => {
                    for (laddr, key) in entries {
                        self.learn_binding(*laddr, KeyName::Int(*key));
                    }
                }
                PayloadFrame::UseCounts { entries } => {
                    let mut candidates: Vec<u32> = Vec::new();
                    if let Some(kv) = &mut self.kv {
                        for (laddr, n) in entries {
                            *kv.window_counts.entry(*laddr).or_insert(0) += *n as u64;
                            *kv.totals.entry(*laddr).or_insert(0) += *n as u64;
                            candidates.push(*laddr);
                        }
                    }
                    // Usage can push a key over the promote-on-use bar.
                    if self.cfg.cache.policy == CachePolicy::PoN {
                        for laddr in candidates {
                            self.consider_install(laddr);
                        }
                    }
                }
                _ => {}
            }
        }
    }

    fn learn_binding(&mut self, laddr: u32, name: KeyName) {
        match &mut self.kv {
            Some(kv) => {
                let e = kv.entry(laddr);
                if e.name == KeyName::Unknown {
                    e.name = name;
                }
            }
            None => return,
        }
        self.consider_install(laddr);
    }

    /// First-sight promotion for the immediate policies. The periodic policy
    /// greedy-fills while cells are free and rebalances at sweeps.
    fn consider_install(&mut self, laddr: u32) {
        let decision: Option<Option<u32>> = {
            let Some(kv) = &self.kv else { return };
            if kv.dormant || kv.region.data_len == 0 {
                return;
            }
            let already = kv
                .entries
                .get(&laddr)
                .map(|e| e.cell.is_some() || e.quarantined)
                .unwrap_or(false);
            if already || self.pending_installs.iter().any(|(l, _)| *l == laddr) {
                return;
            }
            let queued = self.pending_installs.len();
            match self.cfg.cache.policy {
                CachePolicy::Fcfs | CachePolicy::PeriodicLru => {
                    if kv.free.len() > queued {
                        Some(None)
                    } else {
                        None
                    }
                }
                CachePolicy::Hash => {
                    let cell = kv.region.data_base + laddr % kv.region.data_len;
                    if kv.cell_owner.contains_key(&cell)
                        || self.pending_installs.iter().any(|(_, c)| *c == Some(cell))
                    {
                        None
                    } else {
                        Some(Some(cell))
                    }
                }
                CachePolicy::PoN => {
                    let hot = kv.totals.get(&laddr).copied().unwrap_or(0)
                        >= self.cfg.cache.pon_threshold;
                    if hot && kv.free.len() > queued {
                        Some(None)
                    } else {
                        None
                    }
                }
            }
        };
        if let Some(cell) = decision {
            self.pending_installs.push((laddr, cell));
        }
    }

    fn run_pending_installs(&mut self, ctl: &mut dyn SwitchControl) {
        if self.pending_installs.is_empty() {
            return;
        }
        let work: Vec<(u32, Option<u32>)> = self.pending_installs.drain(..).collect();
        for (laddr, cell) in work {
            self.install(laddr, cell, ctl);
        }
    }

    fn install(&mut self, laddr: u32, fixed_cell: Option<u32>, ctl: &mut dyn SwitchControl) {
        let installed: Option<(u32, u32)> = {
            let Some(kv) = &mut self.kv else { return };
            if kv.dormant {
                return;
            }
            let e = kv.entry(laddr);
            if e.cell.is_some() || e.quarantined {
                return;
            }
            let shadow = e.shadow;
            if i32::try_from(shadow).is_err() {
                // The accumulated value no longer fits a register; the key
                // stays on the software path.
                return;
            }
            let cell = match fixed_cell {
                Some(c) => {
                    if kv.cell_owner.contains_key(&c) {
                        return;
                    }
                    c
                }
                None => match kv.free.pop() {
                    Some(c) => c,
                    None => return,
                },
            };
            let e = kv.entry(laddr);
            e.cell = Some(cell);
            e.shadow = 0;
            kv.cell_owner.insert(cell, laddr);
            ctl.write_cell(cell, shadow as i32);
            Some((laddr, cell))
        };
        if let Some((laddr, cell)) = installed {
            self.stats.installs += 1;
            self.events.push(ServerEvent::Installed { laddr, cell });
        }
    }

    /// Apply software-path map updates. Cached keys late-add straight into
    /// the register so the value-location invariant holds (register
    /// authoritative, shadow zero); everything else accumulates in shadow.
    fn apply_fallback_slots(&mut self, pkt: &Packet, ctl: &mut dyn SwitchControl) {
        for i in 0..SLOT_COUNT {
            if !pkt.slot_enabled(i) {
                continue;
            }
            let laddr = pkt.slots[i].key;
            let v = pkt.slots[i].value;
            self.stats.fallback_slots += 1;
            let mut saturated = false;
            let mut late_add = false;
            {
                let Some(kv) = &mut self.kv else { return };
                match kv.cached_cell(laddr) {
                    Some(cell) => {
                        let cur = ctl.read_cell(cell);
                        let wide = cur as i64 + v as i64;
                        match fit_i32(wide) {
                            Ok(x) => ctl.write_cell(cell, x),
                            Err(_) => {
                                ctl.write_cell(cell, if wide > 0 { i32::MAX } else { i32::MIN });
                                saturated = true;
                            }
                        }
                        late_add = true;
                    }
                    None => {
                        kv.entry(laddr).shadow += v as i64;
                    }
                }
            }
            if late_add {
                self.stats.late_adds += 1;
            }
            if saturated {
                self.stats.kv_saturations += 1;
            }
            self.consider_install(laddr);
        }
        self.run_pending_installs(ctl);
    }

    /// Grants to piggyback on an ack: every logical address this packet
    /// mentioned that is currently cached.
    fn grants_for(&self, pkt: &Packet, frames: &[PayloadFrame]) -> Vec<(u32, u32)> {
        let Some(kv) = &self.kv else {
            return Vec::new();
        };
        let mut mentioned: BTreeSet<u32> = BTreeSet::new();
        if pkt.flags.is_cross() && pkt.op_type == OP_UPDATE {
            for i in 0..SLOT_COUNT {
                if pkt.slot_enabled(i) {
                    mentioned.insert(pkt.slots[i].key);
                }
            }
        }
        for f in frames {
            match f {
                PayloadFrame::FallbackBindings { entries } => {
                    mentioned.extend(entries.iter().map(|(l, _)| *l));
                }
                PayloadFrame::FallbackIntBindings { entries } => {
                    mentioned.extend(entries.iter().map(|(l, _)| *l));
                }
                _ => {}
            }
        }
        mentioned
            .into_iter()
            .filter_map(|l| kv.cached_cell(l).map(|c| (l, c)))
            .collect()
    }

    fn serve_query(
        &mut self,
        pkt: &Packet,
        frames: &[PayloadFrame],
        src: NodeId,
        ctl: &mut dyn SwitchControl,
    ) {
        self.stats.queries_served += 1;
        let mut reply = self.base_packet();
        reply.op_type = OP_QUERY;
        reply.flags.set_cross(true);
        reply.bitmap = pkt.bitmap;
        reply.counter_index = pkt.counter_index;
        let mut wide_entries: Vec<(u32, CorrectionValue)> = Vec::new();
        for i in 0..SLOT_COUNT {
            if !pkt.slot_enabled(i) {
                continue;
            }
            let laddr = pkt.slots[i].key;
            let total = match &self.kv {
                Some(kv) => {
                    let e = kv.entries.get(&laddr);
                    let shadow = e.map(|e| e.shadow).unwrap_or(0);
                    let reg = match e.and_then(|e| if e.quarantined { None } else { e.cell }) {
                        Some(c) => ctl.read_cell(c) as i64,
                        None => 0,
                    };
                    shadow + reg
                }
                None => 0,
            };
            let clamped = match fit_i32(total) {
                Ok(x) => x,
                Err(_) => {
                    reply.flags.set_of(true);
                    wide_entries.push((laddr, CorrectionValue::Wide(total)));
                    if total > 0 {
                        i32::MAX
                    } else {
                        i32::MIN
                    }
                }
            };
            reply.slots[i] = Slot {
                key: laddr,
                value: clamped,
            };
        }
        let mut out_frames: Vec<PayloadFrame> = Vec::new();
        for f in frames {
            if let PayloadFrame::ChunkTag { call_id, chunk } = f {
                out_frames.push(PayloadFrame::ChunkTag {
                    call_id: *call_id,
                    chunk: *chunk,
                });
            }
        }
        if !wide_entries.is_empty() {
            out_frames.push(PayloadFrame::Corrections {
                field: self.cfg.correction_field.clone(),
                entries: wide_entries,
            });
        }
        if !out_frames.is_empty() {
            reply.payload = encode_frames(&out_frames);
        }
        let mut pending = BTreeSet::new();
        pending.insert(src);
        self.queue.push_back(PendingTx {
            pkt: reply,
            elided: false,
            fork_via: None,
            pending,
            purpose: TxPurpose::CallReply,
        });
    }

    /// Periodic re-rank. Free cells greedy-fill with the hottest uncached
    /// keys; once full, hotter uncached keys evict strictly colder cached
    /// ones. Evicted cells only return to service after every client has
    /// acknowledged the revocation, so the matching installs happen at a
    /// later sweep; one revocation batch is in flight at a time.
    fn lru_sweep(&mut self, ctl: &mut dyn SwitchControl) {
        let mut to_evict: Vec<u32> = Vec::new();
        {
            let Some(kv) = &self.kv else { return };
            if kv.dormant || kv.region.data_len == 0 {
                return;
            }
            let quarantine_active = kv.entries.values().any(|e| e.quarantined);

            let count_of =
                |l: u32| -> u64 { kv.window_counts.get(&l).copied().unwrap_or(0) };

            // This window's keys, hottest first, ties by address.
            let mut ranked: Vec<(u64, u32)> =
                kv.window_counts.iter().map(|(&l, &n)| (n, l)).collect();
            ranked.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

            // Cached keys, coldest first, ties by address (higher first so
            // the survivor set is deterministic).
            let mut cold: Vec<(u64, u32)> = kv
                .entries
                .iter()
                .filter(|(_, e)| e.cell.is_some() && !e.quarantined)
                .map(|(&l, _)| (count_of(l), l))
                .collect();
            cold.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            let mut cold = cold.into_iter();
            let mut next_cold = cold.next();

            let mut free_budget = kv.free.len();
            for &(hot_n, hot_l) in &ranked {
                let is_cached = kv
                    .entries
                    .get(&hot_l)
                    .map(|e| e.cell.is_some() || e.quarantined)
                    .unwrap_or(false);
                if is_cached {
                    continue;
                }
                if free_budget > 0 {
                    free_budget -= 1;
                    self.pending_installs.push((hot_l, None));
                    continue;
                }
                if quarantine_active {
                    break;
                }
                match next_cold {
                    Some((cold_n, cold_l)) if hot_n > cold_n => {
                        to_evict.push(cold_l);
                        next_cold = cold.next();
                    }
                    _ => break,
                }
            }
        }

        // Drain and quarantine the victims, then revoke their grants.
        let mut sentinel_grants: Vec<(u32, u32)> = Vec::new();
        let mut revoked: Vec<(u32, u32)> = Vec::new();
        {
            if let Some(kv) = &mut self.kv {
                for laddr in to_evict {
                    let Some(e) = kv.entries.get_mut(&laddr) else {
                        continue;
                    };
                    let Some(cell) = e.cell else { continue };
                    let v = ctl.read_cell(cell);
                    e.shadow += v as i64;
                    ctl.write_cell(cell, 0);
                    e.quarantined = true;
                    sentinel_grants.push((laddr, u32::MAX));
                    revoked.push((laddr, cell));
                }
            }
        }
        for &(laddr, _) in &revoked {
            self.stats.evictions += 1;
            self.events.push(ServerEvent::Evicted { laddr });
        }
        if !revoked.is_empty() {
            let mut pkt = self.base_packet();
            pkt.flags.set_cross(true);
            pkt.payload = encode_frames(&[PayloadFrame::MappingGrants {
                entries: sentinel_grants,
            }]);
            self.queue.push_back(PendingTx {
                pkt,
                elided: false,
                fork_via: None,
                pending: self.cfg.clients.iter().copied().collect(),
                purpose: TxPurpose::Revoke { entries: revoked },
            });
            self.stats.revokes_sent += 1;
        }

        self.run_pending_installs(ctl);
    }

    fn base_packet(&self) -> Packet {
        Packet {
            gaid: self.cfg.gaid,
            seq: 0,
            srrt: self.cfg.server_srrt,
            flip: false,
            flags: PacketFlags::new(),
            op_type: OP_UPDATE,
            bitmap: 0,
            counter_index: 0,
            counter_threshold: 0,
            slots: [Slot { key: 0, value: 0 }; SLOT_COUNT],
            payload: Vec::new(),
        }
    }
}

fn has_corrections(frames: &[PayloadFrame]) -> bool {
    frames
        .iter()
        .any(|f| matches!(f, PayloadFrame::Corrections { .. }))
}

fn chunk_tag_of(frames: &[PayloadFrame]) -> Option<u32> {
    chunk_and_tag_of(frames).map(|(c, _)| c)
}

/// Round tag carried on resent originals so contributions from adjacent
/// rounds of the same counter index never mix.
fn round_tag_of(frames: &[PayloadFrame]) -> Option<u32> {
    frames.iter().find_map(|f| match f {
        PayloadFrame::CallTag { call_id } => Some(*call_id),
        _ => None,
    })
}

fn chunk_and_tag_of(frames: &[PayloadFrame]) -> Option<(u32, u32)> {
    frames.iter().find_map(|f| match f {
        PayloadFrame::ChunkTag { call_id, chunk } => Some((*call_id, *chunk)),
        _ => None,
    })
}

fn error_text(e: &RpcError) -> String {
    match e {
        RpcError::Handler(s) => s.clone(),
        RpcError::Timeout => "timeout".to_string(),
        RpcError::Protocol(s) => s.clone(),
    }
}

/// Exact per-element finalization in contributor order: all-integer element
/// sums stay wide integers; any raw (unquantizable) contribution switches
/// the element to floating-point accumulation.
fn finalize_originals(
    originals: &BTreeMap<NodeId, BTreeMap<u32, CorrectionValue>>,
    quant: &Quantizer,
) -> (Vec<(u32, i32, CorrectionValue)>, bool) {
    let mut keys: BTreeSet<u32> = BTreeSet::new();
    for m in originals.values() {
        keys.extend(m.keys().copied());
    }
    let mut out = Vec::new();
    let mut any_raw_at_all = false;
    for k in keys {
        let any_raw = originals
            .values()
            .any(|m| matches!(m.get(&k), Some(CorrectionValue::Raw(_))));
        let cv = if any_raw {
            any_raw_at_all = true;
            let mut acc = 0.0f64;
            for m in originals.values() {
                match m.get(&k) {
                    Some(CorrectionValue::Raw(x)) => acc += x,
                    Some(CorrectionValue::Wide(q)) => acc += quant.dequantize_i64(*q),
                    None => {}
                }
            }
            CorrectionValue::Raw(acc)
        } else {
            let mut acc = 0i64;
            for m in originals.values() {
                if let Some(CorrectionValue::Wide(q)) = m.get(&k) {
                    acc += *q;
                }
            }
            CorrectionValue::Wide(acc)
        };
        let clamped = match &cv {
            CorrectionValue::Wide(q) => (*q).clamp(i32::MIN as i64, i32::MAX as i64) as i32,
            CorrectionValue::Raw(_) => 0,
        };
        out.push((k, clamped, cv));
    }
    (out, any_raw_at_all)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
