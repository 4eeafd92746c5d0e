//! Client-side host agent.
//!
//! The client turns application calls into wire packets and recovers the
//! results no matter what the network does to the traffic in between:
//!
//! * **Call framing.** Array reductions are cut into 32-element chunks that
//!   map onto the deployed register pool; keyed-map updates and queries are
//!   split between granted keys (named by physical cell, folded in the
//!   network) and everything else (named by logical address, carried to the
//!   server on the software path). Small control calls travel whole as
//!   payload frames.
//! * **Round accounting.** Each pool slot runs a sequence of aggregation
//!   rounds. Consecutive rounds of one slot are serialized — a chunk is not
//!   released until the previous round on its slot has produced a result —
//!   while distinct slots pipeline freely. Every stream chunk carries the
//!   round it belongs to, so results and exact-value requests from other
//!   rounds can never be confused with this one.
//! * **Loss recovery.** Every packet retransmits on a timeout until the
//!   event it waits for arrives: an acknowledgement, a turnaround of the
//!   packet itself, a query reply, or the round result. A round chunk whose
//!   result refuses to arrive escalates: the packet morphs (same sequence
//!   number) into a software-path copy of the exact values it contributed,
//!   letting the server finish the round by correction.
//! * **Overflow honesty.** A value the fixed-point encoding cannot hold is
//!   sent as a deliberately poisoned register write plus a separate
//!   software-path packet with the exact value, so the network result is
//!   flagged unusable and the corrected result is exact.
//! * **Congestion control.** A congestion-experienced mark anywhere on the
//!   path comes back on acknowledgements and fan-outs; the send window
//!   halves at most once per smoothed round trip and grows by one packet
//!   per window of completions.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::netfilter::{ClearPolicy, SwitchProgram};
use crate::rpc::{
    decode_frames, encode_frames, fit_i32, laddr_of_int, laddr_of_str, CorrectionValue,
    FieldManifest, Message, PayloadFrame, Quantizer, OP_QUERY, OP_UPDATE,
};
use crate::server_agent::KeyName;
use crate::switch::{flip_for, Emit, PoolCfg};
use crate::wire::{Packet, Slot, SLOT_COUNT};
use crate::{NodeId, SimTime, NANOS_PER_MILLI};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClientAgentCfg {
    pub node: NodeId,
    pub gaid: u32,
    pub app_name: String,
    /// The filter program deployed for this application; the client derives
    /// packet shapes (thresholds, route expectations) from it.
    pub program: SwitchProgram,
    /// Fixed-point digits for array fields (mirrors the deployed filter).
    pub precision: u32,
    pub server: NodeId,
    /// Flow slot the server emits on; packets carrying it are server-sent.
    pub server_srrt: u16,
    /// Flow slot for this client's own emissions.
    pub srrt: u16,
    pub w_max: u32,
    /// Stream pool granted on the switch, when any.
    pub pool: Option<PoolCfg>,
    /// Counter cell keyed-update packets name, when the filter counts
    /// updates toward a notification threshold. `None` sends them
    /// counterless (plain-routed).
    pub notify_counter: Option<u32>,
    /// When false the application holds no switch state and every packet
    /// travels the software path.
    pub inc: bool,
    /// Field name used in correction frames for array reductions.
    pub correction_field: String,
    pub rto_floor: SimTime,
    pub srtt_init: SimTime,
    pub cwnd_init: f64,
    /// Period for standalone use-count reports; 0 disables them.
    pub report_period: SimTime,
    /// Ballot retries a lock waiter makes (one per observed clear) before
    /// giving up.
    pub max_lock_polls: u32,
    /// Retransmissions of a round chunk tolerated before its exact values
    /// are volunteered on the software path.
    pub escalate_after: u32,
}

impl ClientAgentCfg {
    pub fn basic(
        node: NodeId,
        gaid: u32,
        program: SwitchProgram,
        server: NodeId,
        server_srrt: u16,
        srrt: u16,
        w_max: u32,
    ) -> Self {
        ClientAgentCfg {
            node,
            gaid,
            app_name: String::new(),
            program,
            precision: 0,
            server,
            server_srrt,
            srrt,
            w_max,
            pool: None,
            notify_counter: None,
            inc: true,
            correction_field: String::new(),
            rto_floor: 4 * NANOS_PER_MILLI,
            srtt_init: NANOS_PER_MILLI,
            cwnd_init: 4.0,
            report_period: 0,
            max_lock_polls: 16,
            escalate_after: 3,
        }
    }
}

// ---------------------------------------------------------------------------
// Calls, events, statistics
// ---------------------------------------------------------------------------

/// Values handed to an array reduction.
#[derive(Debug, Clone)]
pub enum ReduceValues {
    Fp(Vec<f64>),
    Int(Vec<i64>),
}

impl ReduceValues {
    fn len(&self) -> usize {
        match self {
            ReduceValues::Fp(v) => v.len(),
            ReduceValues::Int(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CallKind {
    Reduce,
    MapAdd,
    Query,
    Ballot,
    Lock,
    Software,
}

#[derive(Debug)]
struct CallState {
    kind: CallKind,
    method: String,
    started: SimTime,
    /// Chunks dispatched and not yet complete.
    open_chunks: u32,
    /// Chunks built and waiting for the window.
    queued_chunks: u32,
    n_elems: u32,
    /// Completion additionally requires the server's reply frame.
    expect_reply: bool,
    got_reply: bool,
    ok: bool,
    result: BTreeMap<u32, CorrectionValue>,
    query_vals: BTreeMap<u32, i64>,
    reply: Option<Message>,
    won: Option<bool>,
    lock_ci: u32,
    lock_polls: u32,
    /// A lost lock ballot parks here until the holder's release clears the
    /// counter, then re-polls.
    awaiting_clear: bool,
    done: bool,
    finished_at: SimTime,
}

impl CallState {
    fn new(kind: CallKind, now: SimTime) -> Self {
        CallState {
            kind,
            method: String::new(),
            started: now,
            open_chunks: 0,
            queued_chunks: 0,
            n_elems: 0,
            expect_reply: false,
            got_reply: false,
            ok: true,
            result: BTreeMap::new(),
            query_vals: BTreeMap::new(),
            reply: None,
            won: None,
            lock_ci: 0,
            lock_polls: 0,
            awaiting_clear: false,
            done: false,
            finished_at: 0,
        }
    }
}

/// Final state of a finished call, handed back to the application.
#[derive(Debug, Clone)]
pub struct CallOutcome {
    pub ok: bool,
    pub latency: SimTime,
    /// Per-element reduction results, element order.
    pub reduced: Vec<CorrectionValue>,
    /// Query results by key.
    pub query_values: Vec<(KeyName, i64)>,
    /// Software reply, when the call has one.
    pub reply: Option<Message>,
    /// Ballot / lock verdict.
    pub won: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    CallDone { call: u64, ok: bool },
    GrantLearned { laddr: u32, cell: u32 },
    GrantRevoked { laddr: u32 },
    /// A keyed-update counter crossed its threshold somewhere in the
    /// network and the notification fanned out to this host.
    Notified { counter_index: u32, srrt: u16, seq: u32 },
    /// The server cleared a counter (and any named registers).
    Cleared { counter_index: u32 },
}

#[derive(Debug, Default, Clone)]
pub struct ClientStats {
    pub chunks_sent: u64,
    pub retransmits: u64,
    pub acks_received: u64,
    pub acks_sent: u64,
    pub late_acks: u64,
    pub duplicates: u64,
    pub rounds_completed: u64,
    pub corrections_applied: u64,
    pub escalations: u64,
    pub originals_resent: u64,
    pub requests_unmatched: u64,
    pub volunteers_sent: u64,
    pub turnarounds: u64,
    pub query_hits: u64,
    pub query_fallbacks: u64,
    pub granted_slots: u64,
    pub fallback_slots: u64,
    pub values_saturated: u64,
    pub ecn_signals: u64,
    pub cwnd_halvings: u64,
    pub rto_fires: u64,
    pub stray_results: u64,
    pub stale_results: u64,
    pub stray_packets: u64,
    pub notifications: u64,
    pub wins: u64,
    pub losses: u64,
    pub repolls: u64,
    pub reports_sent: u64,
}

// ---------------------------------------------------------------------------
// Internal bookkeeping
// ---------------------------------------------------------------------------

/// What has to happen for an in-flight packet to be finished with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WaitKind {
    /// The server's acknowledgement completes it.
    Ack,
    /// The result of the named round completes it; acknowledgements only
    /// slow its retransmission down to a watch cadence.
    Round { ci: u32 },
    /// Values for the named call chunk complete it (switch turnaround or
    /// server reply).
    Query { chunk: u32 },
    /// A threshold-crossing turnaround (win) or an acknowledgement of the
    /// forwarded ballot (recorded, lost) completes it.
    Ballot,
}

/// A packet built but not yet admitted by the send window.
#[derive(Debug)]
struct ProtoChunk {
    pkt: Packet,
    elided: bool,
    call: u64,
    wait: WaitKind,
    /// Stream round bookkeeping: (slot, round, call chunk index).
    round: Option<(u32, u64, u32)>,
}

/// A packet in flight.
#[derive(Debug)]
struct OutChunk {
    pkt: Packet,
    elided: bool,
    call: u64,
    wait: WaitKind,
    sent_at: SimTime,
    rto_at: SimTime,
    retransmits: u32,
    acked: bool,
}

/// One unresolved aggregation round.
#[derive(Debug, Clone, Copy)]
struct PendingRound {
    seq: u32,
    call: u64,
    round: u64,
    slot: u32,
    chunk: u32,
    escalated: bool,
}

/// Per-flow duplicate filter with a bounded horizon.
#[derive(Debug, Default)]
struct SeenSet {
    seqs: BTreeSet<u32>,
    hi: u32,
}

impl SeenSet {
    /// Returns true when the sequence number is new.
    fn check_and_insert(&mut self, seq: u32, w_max: u32) -> bool {
        if !self.seqs.insert(seq) {
            return false;
        }
        self.hi = self.hi.max(seq);
        // Anything the retransmission window can still produce stays; a
        // generous margin keeps very late duplicates recognizable.
        let floor = self.hi.saturating_sub(8 * w_max.max(1));
        while let Some(&lo) = self.seqs.first() {
            if lo >= floor {
                break;
            }
            self.seqs.remove(&lo);
        }
        true
    }
}

// ---------------------------------------------------------------------------
// The agent
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ClientAgent {
    cfg: ClientAgentCfg,
    quant: Quantizer,
    next_seq: u32,
    inflight: BTreeMap<u32, OutChunk>,
    /// Non-stream packets awaiting the window (FIFO; recovery packets jump
    /// the line at the front).
    ready_queue: VecDeque<ProtoChunk>,
    /// Stream chunks per pool slot; one round per slot runs at a time.
    stream_queues: BTreeMap<u32, VecDeque<ProtoChunk>>,
    slot_busy: BTreeSet<u32>,
    /// Unresolved rounds by counter index.
    pending: BTreeMap<u32, PendingRound>,
    /// Next round number per pool slot.
    next_round: BTreeMap<u32, u64>,
    /// Exact values most recently contributed per slot (last two rounds),
    /// kept for correction requests.
    sent_originals: BTreeMap<u32, VecDeque<(u64, Vec<(u32, CorrectionValue)>)>>,
    /// Register value at the end of the last completed round per stream
    /// key, for filters that never clear: the round result is the delta.
    lazy_snap: BTreeMap<u32, i64>,
    /// Logical address -> physical cell, as granted.
    grants: BTreeMap<u32, u32>,
    grant_cells: BTreeMap<u32, u32>,
    bound_names: BTreeMap<u32, KeyName>,
    bindings_sent: BTreeSet<u32>,
    use_counts: BTreeMap<u32, u32>,
    next_report: SimTime,
    seen: BTreeMap<u16, SeenSet>,
    calls: BTreeMap<u64, CallState>,
    next_call: u64,
    cwnd: f64,
    srtt: SimTime,
    last_halving: Option<SimTime>,
    events: Vec<ClientEvent>,
    pub stats: ClientStats,
}

impl ClientAgent {
    pub fn new(cfg: ClientAgentCfg) -> Self {
        let quant = Quantizer::new(cfg.precision);
        let srtt = cfg.srtt_init;
        let cwnd = cfg.cwnd_init;
        let next_report = cfg.report_period;
        ClientAgent {
            cfg,
            quant,
            next_seq: 1,
            inflight: BTreeMap::new(),
            ready_queue: VecDeque::new(),
            stream_queues: BTreeMap::new(),
            slot_busy: BTreeSet::new(),
            pending: BTreeMap::new(),
            next_round: BTreeMap::new(),
            sent_originals: BTreeMap::new(),
            lazy_snap: BTreeMap::new(),
            grants: BTreeMap::new(),
            grant_cells: BTreeMap::new(),
            bound_names: BTreeMap::new(),
            bindings_sent: BTreeSet::new(),
            use_counts: BTreeMap::new(),
            next_report,
            seen: BTreeMap::new(),
            calls: BTreeMap::new(),
            next_call: 1,
            cwnd,
            srtt,
            last_halving: None,
            events: Vec::new(),
            stats: ClientStats::default(),
        }
    }

    pub fn cfg(&self) -> &ClientAgentCfg {
        &self.cfg
    }

    pub fn cwnd(&self) -> f64 {
        self.cwnd
    }

    pub fn srtt(&self) -> SimTime {
        self.srtt
    }

    pub fn granted_cell(&self, laddr: u32) -> Option<u32> {
        self.grants.get(&laddr).copied()
    }

    /// Forgets every learned cell mapping. The control plane calls this when
    /// the application's switch reservation is reclaimed; subsequent adds
    /// take the software path until fresh grants arrive.
    pub fn drop_grants(&mut self) {
        self.grants.clear();
        self.grant_cells.clear();
    }

    pub fn quiescent(&self) -> bool {
        self.inflight.is_empty()
            && self.ready_queue.is_empty()
            && self.stream_queues.values().all(|q| q.is_empty())
            && self.pending.is_empty()
    }

    pub fn take_events(&mut self) -> Vec<ClientEvent> {
        core::mem::take(&mut self.events)
    }

    /// Removes and returns a finished call.
    pub fn take_outcome(&mut self, call: u64) -> Option<CallOutcome> {
        if !self.calls.get(&call)?.done {
            return None;
        }
        let st = self.calls.remove(&call)?;
        let mut reduced = Vec::with_capacity(st.n_elems as usize);
        for e in 0..st.n_elems {
            reduced.push(
                st.result
                    .get(&e)
                    .cloned()
                    .unwrap_or(CorrectionValue::Wide(0)),
            );
        }
        let query_values = st
            .query_vals
            .iter()
            .map(|(&laddr, &v)| {
                let name = self
                    .bound_names
                    .get(&laddr)
                    .cloned()
                    .unwrap_or(KeyName::Int(laddr as i64));
                (name, v)
            })
            .collect();
        Some(CallOutcome {
            ok: st.ok,
            latency: st.finished_at.saturating_sub(st.started),
            reduced,
            query_values,
            reply: st.reply,
            won: st.won,
        })
    }

    pub fn call_done(&self, call: u64) -> bool {
        self.calls.get(&call).map(|c| c.done).unwrap_or(false)
    }

    // -----------------------------------------------------------------
    // Call entry points
    // -----------------------------------------------------------------

    /// Starts an array reduction. The result is the element-wise total over
    /// every participant, one aggregation round per 32-element chunk.
    pub fn begin_reduce(&mut self, now: SimTime, values: ReduceValues) -> (u64, Vec<Emit>) {
        let call = self.alloc_call(CallKind::Reduce, now);
        let n = values.len() as u32;
        let n_chunks = n.div_ceil(SLOT_COUNT as u32);
        {
            let st = self.calls.get_mut(&call).expect("just created");
            st.n_elems = n;
        }
        for c in 0..n_chunks {
            self.build_reduce_chunk(call, c, &values, n);
        }
        let mut out = Vec::new();
        self.pump(now, &mut out);
        (call, out)
    }

    /// Starts a batch of keyed additions. With `method` set the batch is a
    /// call the server assembles and replies to; without it the batch
    /// completes when every packet is acknowledged.
    pub fn begin_map_add(
        &mut self,
        now: SimTime,
        method: Option<&str>,
        entries: &[(KeyName, i64)],
    ) -> (u64, Vec<Emit>) {
        let call = self.alloc_call(CallKind::MapAdd, now);
        let mut granted: Vec<(u32, i32)> = Vec::new();
        let mut fallback: Vec<(u32, i32)> = Vec::new();
        for (key, v) in entries {
            let laddr = self.bind(key);
            *self.use_counts.entry(laddr).or_insert(0) += 1;
            let v32 = match fit_i32(*v) {
                Ok(x) => x,
                Err(_) => {
                    self.stats.values_saturated += 1;
                    if *v > 0 {
                        i32::MAX
                    } else {
                        i32::MIN
                    }
                }
            };
            match self.grants.get(&laddr) {
                Some(&cell) if self.cfg.inc => {
                    self.stats.granted_slots += 1;
                    granted.push((cell, v32));
                }
                _ => {
                    self.stats.fallback_slots += 1;
                    fallback.push((laddr, v32));
                }
            }
        }
        let total = (granted.len().div_ceil(SLOT_COUNT) + fallback.len().div_ceil(SLOT_COUNT))
            .max(1) as u32;
        let mut protos: Vec<ProtoChunk> = Vec::new();
        let mut chunk_no: u32 = 0;
        for batch in granted.chunks(SLOT_COUNT) {
            protos.push(self.build_kv_chunk(call, method, chunk_no, total, batch, false));
            chunk_no += 1;
        }
        for batch in fallback.chunks(SLOT_COUNT) {
            protos.push(self.build_kv_chunk(call, method, chunk_no, total, batch, true));
            chunk_no += 1;
        }
        if protos.is_empty() {
            // Nothing to add; still a call so the caller's bookkeeping works.
            protos.push(self.build_kv_chunk(call, method, 0, 1, &[], true));
        }
        {
            let st = self.calls.get_mut(&call).expect("just created");
            st.expect_reply = method.is_some();
            if let Some(m) = method {
                st.method = String::from(m);
            }
            st.queued_chunks = protos.len() as u32;
        }
        self.ready_queue.extend(protos);
        let mut out = Vec::new();
        self.pump(now, &mut out);
        (call, out)
    }

    /// Starts a read of keyed totals. Granted keys turn around at the
    /// switch when the filter reads registers on the way in; everything
    /// else asks the server.
    pub fn begin_query(&mut self, now: SimTime, keys: &[KeyName]) -> (u64, Vec<Emit>) {
        let call = self.alloc_call(CallKind::Query, now);
        let call_id = call as u32;
        let mut granted: Vec<u32> = Vec::new();
        let mut fallback: Vec<u32> = Vec::new();
        // Register reads at the switch need the inbound fill stage; without
        // it a granted read would come back zero-valued.
        let switch_reads = self.cfg.inc && self.cfg.program.get_to_server;
        for key in keys {
            let laddr = self.bind(key);
            *self.use_counts.entry(laddr).or_insert(0) += 1;
            match self.grants.get(&laddr) {
                Some(&cell) if switch_reads => granted.push(cell),
                _ => fallback.push(laddr),
            }
        }
        let mut chunk_no: u32 = 0;
        let mut protos: Vec<ProtoChunk> = Vec::new();
        for batch in granted.chunks(SLOT_COUNT) {
            self.stats.query_hits += batch.len() as u64;
            let mut pkt = self.blank_packet();
            pkt.op_type = OP_QUERY;
            for (i, &cell) in batch.iter().enumerate() {
                pkt.slots[i] = Slot { key: cell, value: 0 };
                pkt.bitmap |= 1 << i;
            }
            protos.push(ProtoChunk {
                pkt,
                elided: false,
                call,
                wait: WaitKind::Query { chunk: chunk_no },
                round: None,
            });
            chunk_no += 1;
        }
        for batch in fallback.chunks(SLOT_COUNT) {
            self.stats.query_fallbacks += batch.len() as u64;
            let mut pkt = self.blank_packet();
            pkt.op_type = OP_QUERY;
            pkt.flags.set_cross(true);
            for (i, &laddr) in batch.iter().enumerate() {
                pkt.slots[i] = Slot {
                    key: laddr,
                    value: 0,
                };
                pkt.bitmap |= 1 << i;
            }
            pkt.payload = encode_frames(&[PayloadFrame::ChunkTag {
                call_id,
                chunk: chunk_no,
            }]);
            protos.push(ProtoChunk {
                pkt,
                elided: false,
                call,
                wait: WaitKind::Query { chunk: chunk_no },
                round: None,
            });
            chunk_no += 1;
        }
        {
            let st = self.calls.get_mut(&call).expect("just created");
            st.queued_chunks = protos.len() as u32;
            if protos.is_empty() {
                st.done = true;
                st.finished_at = now;
                self.events.push(ClientEvent::CallDone { call, ok: true });
            }
        }
        self.ready_queue.extend(protos);
        let mut out = Vec::new();
        self.pump(now, &mut out);
        (call, out)
    }

    /// Casts a ballot on a first-crossing-wins counter. The winner's packet
    /// turns around at the switch with the confirmation mark; losers learn
    /// their fate from the server's acknowledgement of the forwarded
    /// ballot.
    pub fn begin_ballot(&mut self, now: SimTime, counter_index: u32, value: i32) -> (u64, Vec<Emit>) {
        let call = self.alloc_call(CallKind::Ballot, now);
        self.queue_ballot(call, counter_index, value);
        let mut out = Vec::new();
        self.pump(now, &mut out);
        (call, out)
    }

    /// Acquires a lock cell: a ballot that, when lost, waits for the
    /// holder's release to clear the counter and then polls again.
    pub fn begin_lock(&mut self, now: SimTime, counter_index: u32) -> (u64, Vec<Emit>) {
        let call = self.alloc_call(CallKind::Lock, now);
        {
            let st = self.calls.get_mut(&call).expect("just created");
            st.lock_ci = counter_index;
        }
        self.queue_ballot(call, counter_index, 1);
        let mut out = Vec::new();
        self.pump(now, &mut out);
        (call, out)
    }

    /// Starts a software call: the request travels whole as payload frames
    /// and the reply (when the server has a handler) completes it.
    pub fn begin_call(&mut self, now: SimTime, method: &str, msg: &Message) -> (u64, Vec<Emit>) {
        let call = self.alloc_call(CallKind::Software, now);
        let call_id = call as u32;
        let mut fields: Vec<FieldManifest> = Vec::new();
        let mut frames: Vec<PayloadFrame> = vec![PayloadFrame::ChunkTag { call_id, chunk: 0 }];
        for (name, value) in &msg.fields {
            fields.push(FieldManifest {
                name: name.clone(),
                type_tag: value.type_tag(),
                len: 0,
                laddr_base: 0,
            });
        }
        frames.push(PayloadFrame::CallHeader {
            call_id,
            method: String::from(method),
            seq_base: 0,
            total_packets: 1,
            fields,
        });
        for (name, value) in &msg.fields {
            frames.push(PayloadFrame::PayloadValue {
                field: name.clone(),
                value: value.clone(),
            });
        }
        let mut pkt = self.blank_packet();
        pkt.flags.set_cross(true);
        pkt.payload = encode_frames(&frames);
        {
            let st = self.calls.get_mut(&call).expect("just created");
            st.expect_reply = true;
            st.method = String::from(method);
            st.queued_chunks = 1;
        }
        self.ready_queue.push_back(ProtoChunk {
            pkt,
            elided: false,
            call,
            wait: WaitKind::Ack,
            round: None,
        });
        let mut out = Vec::new();
        self.pump(now, &mut out);
        (call, out)
    }

    // -----------------------------------------------------------------
    // Packet intake
    // -----------------------------------------------------------------

    pub fn on_packet(&mut self, now: SimTime, pkt: &Packet, ce: bool) -> Vec<Emit> {
        let mut out = Vec::new();
        let frames = decode_frames(&pkt.payload).unwrap_or_default();

        if pkt.flags.is_sa() {
            // Acknowledgements: grants ride on them; never acknowledged
            // back, never deduplicated.
            self.intake_grants(&frames);
            if ce || pkt.flags.ecn() {
                self.congestion_event(now);
            }
            if pkt.srrt == self.cfg.srrt {
                self.handle_ack(now, pkt);
            }
            self.pump(now, &mut out);
            return out;
        }

        if ce || pkt.flags.ecn() {
            self.congestion_event(now);
        }
        let fresh = self
            .seen
            .entry(pkt.srrt)
            .or_default()
            .check_and_insert(pkt.seq, self.cfg.w_max);

        if pkt.srrt == self.cfg.server_srrt {
            if fresh {
                self.handle_server_packet(now, pkt, &frames, &mut out);
            } else {
                self.stats.duplicates += 1;
            }
            // The acknowledgement is what stops the server's retransmission,
            // so duplicates are acknowledged too.
            out.push(self.make_ack(pkt, ce));
            self.pump(now, &mut out);
            return out;
        }

        if !fresh {
            self.stats.duplicates += 1;
            self.pump(now, &mut out);
            return out;
        }

        if pkt.flags.is_cnf() {
            self.handle_confirmation(now, pkt, &frames, &mut out);
            self.pump(now, &mut out);
            return out;
        }

        if pkt.srrt == self.cfg.srrt {
            self.handle_turnaround(now, pkt);
            self.pump(now, &mut out);
            return out;
        }

        self.stats.stray_packets += 1;
        out
    }

    pub fn next_timer(&self) -> Option<SimTime> {
        let mut t = self.inflight.values().map(|c| c.rto_at).min();
        if self.cfg.report_period > 0 && !self.use_counts.is_empty() {
            t = Some(t.map_or(self.next_report, |x| x.min(self.next_report)));
        }
        t
    }

    pub fn on_timer(&mut self, now: SimTime) -> Vec<Emit> {
        let mut out = Vec::new();
        let due: Vec<u32> = self
            .inflight
            .iter()
            .filter(|(_, c)| c.rto_at <= now)
            .map(|(&s, _)| s)
            .collect();
        for seq in due {
            let (wait, retransmits) = {
                let c = &self.inflight[&seq];
                (c.wait, c.retransmits)
            };
            if let WaitKind::Round { ci } = wait {
                if retransmits >= self.cfg.escalate_after
                    && self.pending.get(&ci).map(|p| !p.escalated).unwrap_or(false)
                {
                    self.escalate(now, ci, &mut out);
                    continue;
                }
            }
            self.stats.rto_fires += 1;
            self.congestion_event(now);
            let rto = self.rto();
            let c = self.inflight.get_mut(&seq).expect("collected above");
            c.retransmits += 1;
            self.stats.retransmits += 1;
            // Acknowledged chunks are only watching for a result; they
            // re-poll gently instead of hammering the path.
            c.rto_at = now + if c.acked { 4 * rto } else { rto };
            out.push(Emit {
                pkt: c.pkt.clone(),
                dst: self.cfg.server,
                elided: c.elided,
            });
        }
        if self.cfg.report_period > 0 && now >= self.next_report && !self.use_counts.is_empty() {
            self.emit_report(&mut out);
            self.next_report = now + self.cfg.report_period;
        }
        self.pump(now, &mut out);
        out
    }

    // -----------------------------------------------------------------
    // Chunk building
    // -----------------------------------------------------------------

    fn alloc_call(&mut self, kind: CallKind, now: SimTime) -> u64 {
        let call = self.next_call;
        self.next_call += 1;
        self.calls.insert(call, CallState::new(kind, now));
        call
    }

    fn bind(&mut self, key: &KeyName) -> u32 {
        let laddr = match key {
            KeyName::Str(s) => laddr_of_str(s),
            KeyName::Int(i) => laddr_of_int(*i),
            KeyName::Unknown => 0,
        };
        self.bound_names.entry(laddr).or_insert_with(|| key.clone());
        laddr
    }

    fn blank_packet(&self) -> Packet {
        Packet {
            gaid: self.cfg.gaid,
            srrt: self.cfg.srrt,
            op_type: OP_UPDATE,
            ..Packet::default()
        }
    }

    /// Pool slot for a call chunk index.
    fn chunk_slot(&self, chunk: u32) -> u32 {
        match &self.cfg.pool {
            Some(p) if self.cfg.inc => chunk % p.chunk_capacity,
            // Software rounds never contend for registers; every chunk gets
            // its own slot and pipelines freely.
            _ => chunk,
        }
    }

    /// Counter index (first slot key) of a slot's round.
    fn stream_ci(&self, slot: u32, round: u64) -> u32 {
        match &self.cfg.pool {
            Some(p) if self.cfg.inc => {
                let half = if p.mirrored { (round % 2) as u32 } else { 0 };
                p.base_key + (half * p.chunk_capacity + slot) * SLOT_COUNT as u32
            }
            _ => slot * SLOT_COUNT as u32,
        }
    }

    /// Slot behind a counter index (either mirror half folds to one slot).
    fn slot_of_ci(&self, ci: u32) -> u32 {
        match &self.cfg.pool {
            Some(p) if self.cfg.inc => {
                let rel = ci.saturating_sub(p.base_key) / SLOT_COUNT as u32;
                rel % p.chunk_capacity
            }
            _ => ci / SLOT_COUNT as u32,
        }
    }

    fn build_reduce_chunk(&mut self, call: u64, c: u32, values: &ReduceValues, n: u32) {
        let slot = self.chunk_slot(c);
        let round = {
            let r = self.next_round.entry(slot).or_insert(0);
            let round = *r;
            *r += 1;
            round
        };
        let ci = self.stream_ci(slot, round);
        let mut pkt = self.blank_packet();
        pkt.counter_index = ci;
        pkt.counter_threshold = self.cfg.program.threshold;
        let mut originals: Vec<(u32, CorrectionValue)> = Vec::new();
        let mut poisoned = false;
        for i in 0..SLOT_COUNT as u32 {
            let e = c * SLOT_COUNT as u32 + i;
            if e >= n {
                break;
            }
            let key = ci + i;
            let (q, orig) = match values {
                ReduceValues::Fp(v) => match self.quant.quantize(v[e as usize]) {
                    Ok(q) => (q, CorrectionValue::Wide(q as i64)),
                    Err(_) => {
                        poisoned = true;
                        (i32::MAX, CorrectionValue::Raw(v[e as usize]))
                    }
                },
                ReduceValues::Int(v) => match fit_i32(v[e as usize]) {
                    Ok(q) => (q, CorrectionValue::Wide(v[e as usize])),
                    Err(_) => {
                        poisoned = true;
                        (i32::MAX, CorrectionValue::Wide(v[e as usize]))
                    }
                },
            };
            pkt.slots[i as usize] = Slot { key, value: q };
            pkt.bitmap |= 1 << i;
            originals.push((key, orig));
        }
        // Exact values are retained for the two most recent rounds of the
        // slot: the one in flight and the one a slower peer may still be
        // asked about.
        let deque = self.sent_originals.entry(slot).or_default();
        deque.push_back((round, originals.clone()));
        while deque.len() > 2 {
            deque.pop_front();
        }
        let inc = self.cfg.inc;
        let tag = PayloadFrame::CallTag {
            call_id: round as u32,
        };
        if inc {
            pkt.payload = encode_frames(&[tag]);
        } else {
            // Software path: mark the bypass and, when a value did not fit,
            // attach the exact chunk so the fold is exact.
            pkt.flags.set_cross(true);
            if poisoned {
                pkt.flags.set_of(true);
                pkt.payload = encode_frames(&[
                    tag,
                    PayloadFrame::Corrections {
                        field: self.cfg.correction_field.clone(),
                        entries: originals.clone(),
                    },
                ]);
            } else {
                pkt.payload = encode_frames(&[tag]);
            }
        }
        let proto = ProtoChunk {
            pkt,
            elided: true,
            call,
            wait: WaitKind::Round { ci },
            round: Some((slot, round, c)),
        };
        self.stream_queues.entry(slot).or_default().push_back(proto);
        let mut queued = 1;
        if inc && poisoned {
            // The register write is deliberately poisoned; the exact values
            // travel separately on the software path, because a payload on
            // an absorbed packet would never reach the server.
            let mut vol = self.blank_packet();
            vol.counter_index = ci;
            vol.counter_threshold = self.cfg.program.threshold;
            vol.flags.set_of(true);
            vol.flags.set_cross(true);
            vol.payload = encode_frames(&[
                PayloadFrame::CallTag {
                    call_id: round as u32,
                },
                PayloadFrame::Corrections {
                    field: self.cfg.correction_field.clone(),
                    entries: originals,
                },
            ]);
            self.ready_queue.push_back(ProtoChunk {
                pkt: vol,
                elided: false,
                call,
                wait: WaitKind::Ack,
                round: None,
            });
            self.stats.volunteers_sent += 1;
            queued += 1;
        }
        let st = self.calls.get_mut(&call).expect("caller created it");
        st.queued_chunks += queued;
    }

    fn build_kv_chunk(
        &mut self,
        call: u64,
        method: Option<&str>,
        chunk: u32,
        total: u32,
        batch: &[(u32, i32)],
        is_fallback: bool,
    ) -> ProtoChunk {
        let mut pkt = self.blank_packet();
        let mut frames: Vec<PayloadFrame> = Vec::new();
        if method.is_some() {
            frames.push(PayloadFrame::ChunkTag {
                call_id: call as u32,
                chunk,
            });
            if chunk == 0 {
                frames.push(PayloadFrame::CallHeader {
                    call_id: call as u32,
                    method: String::from(method.expect("checked")),
                    seq_base: 0,
                    total_packets: total,
                    fields: Vec::new(),
                });
            }
        }
        for (i, &(key, v)) in batch.iter().enumerate() {
            pkt.slots[i] = Slot { key, value: v };
            pkt.bitmap |= 1 << i;
        }
        if is_fallback {
            pkt.flags.set_cross(true);
            // First-seen keys carry their names so the server can run the
            // map in software and rank candidates for promotion.
            let mut strs: Vec<(u32, String)> = Vec::new();
            let mut ints: Vec<(u32, i64)> = Vec::new();
            for &(laddr, _) in batch {
                if self.bindings_sent.contains(&laddr) {
                    continue;
                }
                match self.bound_names.get(&laddr) {
                    Some(KeyName::Str(s)) => strs.push((laddr, s.clone())),
                    Some(KeyName::Int(k)) => ints.push((laddr, *k)),
                    _ => {}
                }
                self.bindings_sent.insert(laddr);
            }
            if !strs.is_empty() {
                frames.push(PayloadFrame::FallbackBindings { entries: strs });
            }
            if !ints.is_empty() {
                frames.push(PayloadFrame::FallbackIntBindings { entries: ints });
            }
        } else {
            // Granted updates fold in the network; a notify counter, when
            // deployed, counts them toward its threshold.
            if let Some(ctr) = self.cfg.notify_counter {
                pkt.counter_index = ctr;
                pkt.counter_threshold = self.cfg.program.threshold;
            }
        }
        if !frames.is_empty() {
            pkt.payload = encode_frames(&frames);
        }
        ProtoChunk {
            pkt,
            elided: false,
            call,
            wait: WaitKind::Ack,
            round: None,
        }
    }

    fn queue_ballot(&mut self, call: u64, counter_index: u32, value: i32) {
        let mut pkt = self.blank_packet();
        pkt.counter_index = counter_index;
        pkt.counter_threshold = self.cfg.program.threshold;
        pkt.slots[0] = Slot {
            key: counter_index,
            value,
        };
        pkt.bitmap = 1;
        {
            let st = self.calls.get_mut(&call).expect("caller created it");
            st.queued_chunks += 1;
        }
        self.ready_queue.push_back(ProtoChunk {
            pkt,
            elided: false,
            call,
            wait: WaitKind::Ballot,
            round: None,
        });
    }

    // -----------------------------------------------------------------
    // Dispatch and pacing
    // -----------------------------------------------------------------

    fn window_open(&self) -> bool {
        // One packet may always fly; beyond that the congestion window
        // gates admission (integer comparison: n+1 packets fit iff
        // n+1 <= cwnd).
        if !self.inflight.is_empty() && (self.inflight.len() + 1) as f64 > self.cwnd {
            return false;
        }
        // Sequence-ring guard: the oldest outstanding number must stay
        // within one retransmission window of the next, or flip parity
        // stops disambiguating.
        match self.inflight.first_key_value() {
            Some((&lo, _)) => self.next_seq.saturating_sub(lo) < self.cfg.w_max,
            None => true,
        }
    }

    fn pump(&mut self, now: SimTime, out: &mut Vec<Emit>) {
        loop {
            if !self.window_open() {
                return;
            }
            if let Some(proto) = self.ready_queue.pop_front() {
                self.dispatch(now, proto, out);
                continue;
            }
            let mut picked = None;
            for (&slot, q) in &self.stream_queues {
                if !q.is_empty() && !self.slot_busy.contains(&slot) {
                    picked = Some(slot);
                    break;
                }
            }
            let Some(slot) = picked else { return };
            let proto = self
                .stream_queues
                .get_mut(&slot)
                .and_then(|q| q.pop_front())
                .expect("picked non-empty");
            if self
                .stream_queues
                .get(&slot)
                .map(|q| q.is_empty())
                .unwrap_or(false)
            {
                self.stream_queues.remove(&slot);
            }
            self.dispatch(now, proto, out);
        }
    }

    fn dispatch(&mut self, now: SimTime, proto: ProtoChunk, out: &mut Vec<Emit>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let mut pkt = proto.pkt;
        pkt.seq = seq;
        pkt.flip = flip_for(seq, self.cfg.w_max);
        if let Some((slot, round, chunk)) = proto.round {
            let ci = match proto.wait {
                WaitKind::Round { ci } => ci,
                _ => unreachable!("round bookkeeping only on round waits"),
            };
            self.pending.insert(
                ci,
                PendingRound {
                    seq,
                    call: proto.call,
                    round,
                    slot,
                    chunk,
                    escalated: false,
                },
            );
            self.slot_busy.insert(slot);
        }
        if let Some(st) = self.calls.get_mut(&proto.call) {
            st.queued_chunks = st.queued_chunks.saturating_sub(1);
            st.open_chunks += 1;
        }
        let rto = self.rto();
        self.inflight.insert(
            seq,
            OutChunk {
                pkt: pkt.clone(),
                elided: proto.elided,
                call: proto.call,
                wait: proto.wait,
                sent_at: now,
                rto_at: now + rto,
                retransmits: 0,
                acked: false,
            },
        );
        self.stats.chunks_sent += 1;
        out.push(Emit {
            pkt,
            dst: self.cfg.server,
            elided: proto.elided,
        });
    }

    // -----------------------------------------------------------------
    // Intake paths
    // -----------------------------------------------------------------

    fn handle_ack(&mut self, now: SimTime, pkt: &Packet) {
        let Some(c) = self.inflight.get_mut(&pkt.seq) else {
            self.stats.late_acks += 1;
            return;
        };
        self.stats.acks_received += 1;
        if !c.acked {
            c.acked = true;
            if c.retransmits == 0 {
                // Unambiguous sample: the packet was transmitted once.
                let sample = now.saturating_sub(c.sent_at);
                self.srtt = (7 * self.srtt + sample) / 8;
            }
        }
        match c.wait {
            WaitKind::Ack => self.complete_chunk(now, pkt.seq),
            WaitKind::Ballot => {
                let call = c.call;
                self.stats.losses += 1;
                if let Some(st) = self.calls.get_mut(&call) {
                    if st.kind == CallKind::Lock {
                        // Recorded below threshold: someone holds the lock.
                        // Park until the release clears the cell.
                        st.awaiting_clear = true;
                    } else {
                        st.won = Some(false);
                    }
                }
                self.complete_chunk(now, pkt.seq);
            }
            WaitKind::Round { .. } | WaitKind::Query { .. } => {
                // The ball is in someone else's court now (a crossing or a
                // reply); keep a slow watch in case it never comes.
                let rto = 4 * (2 * self.srtt).max(self.cfg.rto_floor);
                let c = self.inflight.get_mut(&pkt.seq).expect("checked above");
                c.rto_at = now + rto;
            }
        }
    }

    fn handle_server_packet(
        &mut self,
        now: SimTime,
        pkt: &Packet,
        frames: &[PayloadFrame],
        out: &mut Vec<Emit>,
    ) {
        self.intake_grants(frames);
        if pkt.op_type == OP_QUERY && pkt.flags.is_cross() {
            self.handle_query_reply(now, pkt, frames);
            return;
        }
        if pkt.flags.is_cnf() {
            // A round result on the server flow: either the clearing fork
            // or a software-path correction.
            self.apply_round(now, pkt, frames, out);
            return;
        }
        if frames
            .iter()
            .any(|f| matches!(f, PayloadFrame::ReplyHeader { .. }))
        {
            self.handle_reply(now, pkt, frames);
            return;
        }
        if pkt.flags.is_of() && pkt.flags.is_cross() {
            self.handle_correction_request(now, pkt, frames, out);
            return;
        }
        if pkt.flags.is_clr() {
            self.handle_clear_notice(now, pkt);
        }
        // Anything else (pure revocation carriers and the like) was fully
        // handled by the grant intake above.
    }

    /// In-network confirmations: threshold crossings fanned out by the
    /// switch, carrying another flow's slot (or this client's own when it
    /// triggered the crossing).
    fn handle_confirmation(
        &mut self,
        now: SimTime,
        pkt: &Packet,
        frames: &[PayloadFrame],
        out: &mut Vec<Emit>,
    ) {
        if pkt.srrt == self.cfg.srrt {
            if let Some(c) = self.inflight.get(&pkt.seq) {
                match c.wait {
                    WaitKind::Ballot => {
                        // The packet crossed the threshold and turned
                        // around: this client won the cell.
                        let call = c.call;
                        self.stats.wins += 1;
                        if let Some(st) = self.calls.get_mut(&call) {
                            st.won = Some(true);
                        }
                        self.complete_chunk(now, pkt.seq);
                        self.events.push(ClientEvent::Notified {
                            counter_index: pkt.counter_index,
                            srrt: pkt.srrt,
                            seq: pkt.seq,
                        });
                        return;
                    }
                    WaitKind::Ack => {
                        // A keyed update that itself tripped the notify
                        // counter: the fan-out copy doubles as delivery
                        // confirmation (the packet never reached the
                        // server).
                        self.complete_chunk(now, pkt.seq);
                        self.events.push(ClientEvent::Notified {
                            counter_index: pkt.counter_index,
                            srrt: pkt.srrt,
                            seq: pkt.seq,
                        });
                        self.stats.notifications += 1;
                        return;
                    }
                    WaitKind::Round { .. } | WaitKind::Query { .. } => {}
                }
            }
        }
        if self.pending.contains_key(&pkt.counter_index) {
            self.apply_round(now, pkt, frames, out);
            return;
        }
        // Not a round of ours: a notification for the application.
        self.stats.notifications += 1;
        self.events.push(ClientEvent::Notified {
            counter_index: pkt.counter_index,
            srrt: pkt.srrt,
            seq: pkt.seq,
        });
    }

    /// One of this client's own packets came back without a confirmation
    /// mark: a switch turnaround (register read or plain route home).
    fn handle_turnaround(&mut self, now: SimTime, pkt: &Packet) {
        let Some(c) = self.inflight.get(&pkt.seq) else {
            self.stats.stray_packets += 1;
            return;
        };
        self.stats.turnarounds += 1;
        match c.wait {
            WaitKind::Query { .. } => {
                let call = c.call;
                for i in 0..SLOT_COUNT {
                    if !pkt.slot_enabled(i) {
                        continue;
                    }
                    // Keys on the in-network path are physical cells.
                    let Some(&laddr) = self.grant_cells.get(&pkt.slots[i].key) else {
                        continue;
                    };
                    if let Some(st) = self.calls.get_mut(&call) {
                        st.query_vals.insert(laddr, pkt.slots[i].value as i64);
                    }
                }
                self.complete_chunk(now, pkt.seq);
            }
            WaitKind::Ack => {
                // Plain-routed home: the switch is the terminal hop for
                // this shape, nothing more is coming.
                self.complete_chunk(now, pkt.seq);
            }
            WaitKind::Ballot | WaitKind::Round { .. } => {
                self.stats.stray_packets += 1;
            }
        }
    }

    /// Applies a round result: the crossing fan-out (registers), the
    /// clearing fork, or a correction (exact values).
    fn apply_round(
        &mut self,
        now: SimTime,
        pkt: &Packet,
        frames: &[PayloadFrame],
        out: &mut Vec<Emit>,
    ) {
        let ci = pkt.counter_index;
        let Some(p) = self.pending.get(&ci).copied() else {
            self.stats.stray_results += 1;
            return;
        };
        if let Some(tag) = round_tag_of(frames) {
            if tag != p.round as u32 {
                self.stats.stale_results += 1;
                return;
            }
        }
        let corrections: Option<&Vec<(u32, CorrectionValue)>> = frames.iter().find_map(|f| {
            match f {
                PayloadFrame::Corrections { entries, .. } => Some(entries),
                _ => None,
            }
        });
        if pkt.flags.is_of() && corrections.is_none() {
            // The registers cannot be trusted and no exact values came
            // along: volunteer ours so the server can correct the round.
            self.escalate(now, ci, out);
            return;
        }
        let lazy = self.cfg.program.clear == ClearPolicy::Lazy && self.cfg.inc;
        let base_elem = p.chunk * SLOT_COUNT as u32;
        let mut results: Vec<(u32, CorrectionValue)> = Vec::new();
        match corrections {
            Some(entries) => {
                for (key, cv) in entries {
                    let Some(i) = key.checked_sub(ci) else { continue };
                    if i >= SLOT_COUNT as u32 {
                        continue;
                    }
                    results.push((base_elem + i, cv.clone()));
                    if lazy {
                        // The registers really did advance by the corrected
                        // amount for representable elements; keep the
                        // snapshot aligned so the next delta stays exact.
                        // An unrepresentable element leaves its register
                        // saturated for good, and every later round of this
                        // cell arrives flagged and corrected anyway.
                        if let CorrectionValue::Wide(w) = cv {
                            *self.lazy_snap.entry(*key).or_insert(0) += w;
                        }
                    }
                }
                self.stats.corrections_applied += 1;
            }
            None => {
                for i in 0..SLOT_COUNT {
                    if !pkt.slot_enabled(i) {
                        continue;
                    }
                    let key = pkt.slots[i].key;
                    let v = pkt.slots[i].value as i64;
                    let total = if lazy {
                        let snap = self.lazy_snap.get(&key).copied().unwrap_or(0);
                        self.lazy_snap.insert(key, v);
                        v - snap
                    } else {
                        v
                    };
                    let Some(off) = key.checked_sub(ci) else { continue };
                    if off >= SLOT_COUNT as u32 {
                        continue;
                    }
                    results.push((base_elem + off, CorrectionValue::Wide(total)));
                }
            }
        }
        if let Some(st) = self.calls.get_mut(&p.call) {
            for (e, cv) in results {
                st.result.insert(e, cv);
            }
        }
        self.stats.rounds_completed += 1;
        self.pending.remove(&ci);
        self.slot_busy.remove(&p.slot);
        self.complete_chunk(now, p.seq);
    }

    /// Re-sends the exact values this client contributed to a round the
    /// server is trying to finish by correction.
    fn handle_correction_request(
        &mut self,
        now: SimTime,
        pkt: &Packet,
        frames: &[PayloadFrame],
        out: &mut Vec<Emit>,
    ) {
        let ci = pkt.counter_index;
        let tag = round_tag_of(frames);
        if let Some(p) = self.pending.get(&ci).copied() {
            if tag.is_none() || tag == Some(p.round as u32) {
                // The round is still open here: morph the in-flight chunk
                // rather than adding a second packet for the same data.
                self.escalate(now, ci, out);
                return;
            }
        }
        let slot = self.slot_of_ci(ci);
        let entry = self.sent_originals.get(&slot).and_then(|dq| {
            match tag {
                Some(t) => dq.iter().find(|(r, _)| *r as u32 == t),
                None => dq.back(),
            }
            .cloned()
        });
        let Some((round, originals)) = entry else {
            self.stats.requests_unmatched += 1;
            return;
        };
        let mut pkt2 = self.blank_packet();
        pkt2.counter_index = ci;
        pkt2.counter_threshold = self.cfg.program.threshold;
        pkt2.flags.set_of(true);
        pkt2.flags.set_cross(true);
        pkt2.payload = encode_frames(&[
            PayloadFrame::CallTag {
                call_id: round as u32,
            },
            PayloadFrame::Corrections {
                field: self.cfg.correction_field.clone(),
                entries: originals,
            },
        ]);
        self.stats.originals_resent += 1;
        // Recovery traffic jumps the queue; the round it unblocks is
        // stalling a slot for every participant.
        self.ready_queue.push_front(ProtoChunk {
            pkt: pkt2,
            elided: false,
            call: 0,
            wait: WaitKind::Ack,
            round: None,
        });
        self.pump(now, out);
    }

    fn handle_clear_notice(&mut self, now: SimTime, pkt: &Packet) {
        let ci = pkt.counter_index;
        // Registers named by the clear are zero again; snapshots follow.
        for i in 0..SLOT_COUNT {
            if pkt.slot_enabled(i) {
                self.lazy_snap.insert(pkt.slots[i].key, 0);
            }
        }
        self.events.push(ClientEvent::Cleared { counter_index: ci });
        // A parked lock waiter polls again on every observed release.
        let repoll: Vec<u64> = self
            .calls
            .iter()
            .filter(|(_, st)| {
                st.kind == CallKind::Lock && st.awaiting_clear && st.lock_ci == ci && !st.done
            })
            .map(|(&c, _)| c)
            .collect();
        for call in repoll {
            let give_up = {
                let st = self.calls.get_mut(&call).expect("collected above");
                st.awaiting_clear = false;
                st.lock_polls += 1;
                st.lock_polls > self.cfg.max_lock_polls
            };
            if give_up {
                let st = self.calls.get_mut(&call).expect("collected above");
                st.won = Some(false);
                self.finish_call(call, now);
            } else {
                self.stats.repolls += 1;
                self.queue_ballot(call, ci, 1);
            }
        }
    }

    fn handle_reply(&mut self, now: SimTime, _pkt: &Packet, frames: &[PayloadFrame]) {
        let Some((call_id, ok)) = frames.iter().find_map(|f| match f {
            PayloadFrame::ReplyHeader { call_id, ok, .. } => Some((*call_id, *ok)),
            _ => None,
        }) else {
            return;
        };
        let call = call_id as u64;
        let Some(st) = self.calls.get_mut(&call) else {
            self.stats.stray_packets += 1;
            return;
        };
        if st.got_reply {
            return;
        }
        st.got_reply = true;
        st.ok = ok;
        let mut msg = Message::new(&st.method);
        for f in frames {
            if let PayloadFrame::PayloadValue { field, value } = f {
                msg.fields.insert(field.clone(), value.clone());
            }
        }
        st.reply = Some(msg);
        self.maybe_finish_call(call, now);
    }

    fn handle_query_reply(&mut self, now: SimTime, pkt: &Packet, frames: &[PayloadFrame]) {
        let Some((call_id, chunk)) = frames.iter().find_map(|f| match f {
            PayloadFrame::ChunkTag { call_id, chunk } => Some((*call_id, *chunk)),
            _ => None,
        }) else {
            self.stats.stray_packets += 1;
            return;
        };
        let call = call_id as u64;
        // Values by logical address, exact overrides last.
        let mut vals: Vec<(u32, i64)> = Vec::new();
        for i in 0..SLOT_COUNT {
            if pkt.slot_enabled(i) {
                vals.push((pkt.slots[i].key, pkt.slots[i].value as i64));
            }
        }
        for f in frames {
            if let PayloadFrame::Corrections { entries, .. } = f {
                for (laddr, cv) in entries {
                    let v = match cv {
                        CorrectionValue::Wide(w) => *w,
                        CorrectionValue::Raw(x) => *x as i64,
                    };
                    vals.push((*laddr, v));
                }
            }
        }
        let Some(st) = self.calls.get_mut(&call) else {
            self.stats.stray_packets += 1;
            return;
        };
        for (laddr, v) in vals {
            st.query_vals.insert(laddr, v);
        }
        // Find the in-flight chunk this reply answers.
        let seq = self
            .inflight
            .iter()
            .find(|(_, c)| c.call == call && c.wait == WaitKind::Query { chunk })
            .map(|(&s, _)| s);
        if let Some(seq) = seq {
            self.complete_chunk(now, seq);
        }
    }

    /// Morphs the in-flight chunk of an unresolved round into a
    /// software-path packet carrying the exact values it contributed. Same
    /// sequence number: wherever the original got to, the switch treats
    /// the morph as its duplicate and the bypass mark walks it to the
    /// server.
    fn escalate(&mut self, now: SimTime, ci: u32, out: &mut Vec<Emit>) {
        let (slot, round, seq) = match self.pending.get(&ci) {
            Some(p) if !p.escalated => (p.slot, p.round, p.seq),
            _ => return,
        };
        let originals = self.sent_originals.get(&slot).and_then(|dq| {
            dq.iter()
                .find(|(r, _)| *r == round)
                .map(|(_, o)| o.clone())
        });
        let Some(originals) = originals else {
            return;
        };
        if !self.inflight.contains_key(&seq) {
            return;
        }
        let mut pkt = self.blank_packet();
        pkt.counter_index = ci;
        pkt.counter_threshold = self.cfg.program.threshold;
        pkt.flags.set_of(true);
        pkt.flags.set_cross(true);
        pkt.payload = encode_frames(&[
            PayloadFrame::CallTag {
                call_id: round as u32,
            },
            PayloadFrame::Corrections {
                field: self.cfg.correction_field.clone(),
                entries: originals,
            },
        ]);
        let rto = self.rto();
        let c = self.inflight.get_mut(&seq).expect("checked above");
        pkt.seq = c.pkt.seq;
        pkt.flip = c.pkt.flip;
        c.pkt = pkt.clone();
        c.elided = false;
        c.retransmits += 1;
        c.rto_at = now + rto;
        self.pending
            .get_mut(&ci)
            .expect("checked above")
            .escalated = true;
        self.stats.escalations += 1;
        self.stats.retransmits += 1;
        out.push(Emit {
            pkt,
            dst: self.cfg.server,
            elided: false,
        });
    }

    // -----------------------------------------------------------------
    // Completion plumbing
    // -----------------------------------------------------------------

    fn complete_chunk(&mut self, now: SimTime, seq: u32) {
        let Some(c) = self.inflight.remove(&seq) else {
            return;
        };
        // Every completed exchange grows the window a little; halving on
        // congestion marks is what pulls it back.
        self.cwnd = (self.cwnd + 1.0 / self.cwnd).min(self.cfg.w_max as f64);
        if c.call != 0 {
            if let Some(st) = self.calls.get_mut(&c.call) {
                st.open_chunks = st.open_chunks.saturating_sub(1);
            }
            self.maybe_finish_call(c.call, now);
        }
    }

    fn maybe_finish_call(&mut self, call: u64, now: SimTime) {
        let finish = {
            let Some(st) = self.calls.get(&call) else {
                return;
            };
            if st.done {
                return;
            }
            match st.kind {
                CallKind::Ballot | CallKind::Lock => st.won.is_some(),
                _ => {
                    st.open_chunks == 0
                        && st.queued_chunks == 0
                        && (!st.expect_reply || st.got_reply)
                }
            }
        };
        if finish {
            self.finish_call(call, now);
        }
    }

    fn finish_call(&mut self, call: u64, now: SimTime) {
        let Some(st) = self.calls.get_mut(&call) else {
            return;
        };
        if st.done {
            return;
        }
        st.done = true;
        st.finished_at = now;
        let ok = st.ok;
        self.events.push(ClientEvent::CallDone { call, ok });
    }

    // -----------------------------------------------------------------
    // Grants, reports, acks
    // -----------------------------------------------------------------

    fn intake_grants(&mut self, frames: &[PayloadFrame]) {
        for f in frames {
            let PayloadFrame::MappingGrants { entries } = f else {
                continue;
            };
            for &(laddr, cell) in entries {
                if cell == u32::MAX {
                    if let Some(old) = self.grants.remove(&laddr) {
                        self.grant_cells.remove(&old);
                        self.events.push(ClientEvent::GrantRevoked { laddr });
                    }
                } else if self.grants.get(&laddr) != Some(&cell) {
                    if let Some(old) = self.grants.insert(laddr, cell) {
                        self.grant_cells.remove(&old);
                    }
                    self.grant_cells.insert(cell, laddr);
                    self.events.push(ClientEvent::GrantLearned { laddr, cell });
                }
            }
        }
    }

    fn emit_report(&mut self, out: &mut Vec<Emit>) {
        let entries: Vec<(u32, u32)> = self
            .use_counts
            .iter()
            .map(|(&laddr, &n)| (laddr, n))
            .collect();
        self.use_counts.clear();
        let mut pkt = self.blank_packet();
        pkt.flags.set_sa(true);
        pkt.flags.set_cross(true);
        pkt.payload = encode_frames(&[PayloadFrame::UseCounts { entries }]);
        self.stats.reports_sent += 1;
        out.push(Emit {
            pkt,
            dst: self.cfg.server,
            elided: false,
        });
    }

    fn make_ack(&mut self, pkt: &Packet, ce: bool) -> Emit {
        let mut ack = Packet {
            gaid: self.cfg.gaid,
            seq: pkt.seq,
            srrt: pkt.srrt,
            counter_index: pkt.counter_index,
            ..Packet::default()
        };
        ack.flags.set_sa(true);
        ack.flags.set_ecn(ce || pkt.flags.ecn());
        self.stats.acks_sent += 1;
        Emit {
            pkt: ack,
            dst: self.cfg.server,
            elided: false,
        }
    }

    // -----------------------------------------------------------------
    // Congestion control
    // -----------------------------------------------------------------

    fn rto(&self) -> SimTime {
        (2 * self.srtt).max(self.cfg.rto_floor)
    }

    fn congestion_event(&mut self, now: SimTime) {
        self.stats.ecn_signals += 1;
        let due = match self.last_halving {
            Some(t) => now.saturating_sub(t) >= self.srtt,
            None => true,
        };
        if due {
            self.cwnd = (self.cwnd / 2.0).max(1.0);
            self.last_halving = Some(now);
            self.stats.cwnd_halvings += 1;
        }
    }
}

fn round_tag_of(frames: &[PayloadFrame]) -> Option<u32> {
    frames.iter().find_map(|f| match f {
        PayloadFrame::CallTag { call_id } => Some(*call_id),
        _ => None,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netfilter::{ModifySpec, RouteTarget};
    use crate::rpc::Value;

    const MS: SimTime = NANOS_PER_MILLI;
    const SERVER: NodeId = 1;
    const ME: NodeId = 7;
    const MY_SRRT: u16 = 3;
    const SERVER_SRRT: u16 = 100;

    fn stream_program(th: u32, clear: ClearPolicy, crossing: RouteTarget) -> SwitchProgram {
        SwitchProgram {
            add_to: true,
            get_to_server: true,
            get_from_server: true,
            clear,
            modify: ModifySpec::NOP,
            threshold: th,
            sub_threshold_to_server: clear == ClearPolicy::Copy,
            crossing,
            plain_route: RouteTarget::Server,
        }
    }

    fn kv_program(th: u32) -> SwitchProgram {
        SwitchProgram {
            add_to: true,
            get_to_server: true,
            get_from_server: false,
            clear: ClearPolicy::Nop,
            modify: ModifySpec::NOP,
            threshold: th,
            sub_threshold_to_server: true,
            crossing: RouteTarget::Clients,
            plain_route: RouteTarget::Source,
        }
    }

    fn pool() -> PoolCfg {
        PoolCfg {
            base_key: 64,
            data_base: 0,
            chunk_capacity: 4,
            cnt_base: 1000,
            mirrored: false,
        }
    }

    fn stream_client(th: u32, clear: ClearPolicy) -> ClientAgent {
        let mirrored = clear == ClearPolicy::Shadow;
        let mut cfg = ClientAgentCfg::basic(
            ME,
            9,
            stream_program(th, clear, RouteTarget::Clients),
            SERVER,
            SERVER_SRRT,
            MY_SRRT,
            64,
        );
        cfg.precision = 2;
        cfg.pool = Some(PoolCfg {
            mirrored,
            ..pool()
        });
        cfg.correction_field = String::from("grad");
        ClientAgent::new(cfg)
    }

    fn ack_for(emit: &Emit, ecn: bool) -> Packet {
        let mut ack = Packet {
            gaid: emit.pkt.gaid,
            seq: emit.pkt.seq,
            srrt: emit.pkt.srrt,
            counter_index: emit.pkt.counter_index,
            ..Packet::default()
        };
        ack.flags.set_sa(true);
        ack.flags.set_ecn(ecn);
        ack
    }

    fn done_call(agent: &mut ClientAgent, call: u64) -> CallOutcome {
        assert!(agent.call_done(call), "call should be finished");
        agent.take_outcome(call).expect("outcome available")
    }

    #[test]
    fn software_call_completes_on_reply_and_ack_grows_window() {
        let program = stream_program(0, ClearPolicy::Nop, RouteTarget::Server);
        let mut cfg = ClientAgentCfg::basic(ME, 9, program, SERVER, SERVER_SRRT, MY_SRRT, 64);
        cfg.cwnd_init = 2.0;
        let mut agent = ClientAgent::new(cfg);
        let mut msg = Message::new("release");
        msg.fields.insert(String::from("who"), Value::Int(7));
        let (call, emits) = agent.begin_call(0, "release", &msg);
        assert_eq!(emits.len(), 1);
        let req = &emits[0];
        assert!(req.pkt.flags.is_cross() && !req.pkt.flags.is_sa());
        assert_eq!(req.pkt.srrt, MY_SRRT);

        // Ack: rtt sampled, window grows, chunk done — call still waiting.
        let cwnd0 = agent.cwnd();
        let out = agent.on_packet(2 * MS, &ack_for(req, false), false);
        assert!(out.is_empty());
        assert!(agent.cwnd() > cwnd0);
        assert!(!agent.call_done(call));
        assert!(agent.quiescent());

        // Server reply with the header and a value completes it.
        let mut reply = Packet {
            gaid: 9,
            seq: 50,
            srrt: SERVER_SRRT,
            ..Packet::default()
        };
        reply.flags.set_cross(true);
        reply.payload = encode_frames(&[
            PayloadFrame::ChunkTag {
                call_id: call as u32,
                chunk: 0,
            },
            PayloadFrame::ReplyHeader {
                call_id: call as u32,
                ok: true,
                error: String::new(),
                seq_base: 0,
                total_packets: 1,
                fields: Vec::new(),
            },
            PayloadFrame::PayloadValue {
                field: String::from("status"),
                value: Value::Int(1),
            },
        ]);
        let out = agent.on_packet(3 * MS, &reply, false);
        // The reply is acknowledged.
        assert_eq!(out.len(), 1);
        assert!(out[0].pkt.flags.is_sa());
        assert_eq!(out[0].pkt.seq, 50);
        assert_eq!(out[0].pkt.srrt, SERVER_SRRT);
        let outcome = done_call(&mut agent, call);
        assert!(outcome.ok);
        let r = outcome.reply.expect("reply present");
        assert_eq!(r.fields.get("status"), Some(&Value::Int(1)));

        // A duplicate reply is acknowledged but changes nothing.
        let out = agent.on_packet(4 * MS, &reply, false);
        assert_eq!(out.len(), 1);
        assert!(out[0].pkt.flags.is_sa());
        assert_eq!(agent.stats.duplicates, 1);
    }

    #[test]
    fn copy_round_completes_on_clearing_fork_and_serializes_the_slot() {
        let mut agent = stream_client(2, ClearPolicy::Copy);
        // 5 chunks on 4 slots: slot 0 runs rounds 0 and 1 back to back.
        let values: Vec<f64> = (0..160).map(|i| i as f64).collect();
        let (call, emits) = agent.begin_reduce(0, ReduceValues::Fp(values.clone()));
        // Only four chunks go out: the fifth shares slot 0 with the first.
        assert_eq!(emits.len(), 4);
        assert!(emits.iter().all(|e| e.elided));
        let first = emits[0].pkt.clone();
        assert_eq!(first.counter_index, 64);
        assert_eq!(first.counter_threshold, 2);
        assert_eq!(round_tag_of(&decode_frames(&first.payload).unwrap()), Some(0));
        // Quantized at two digits: element 1 -> 100.
        assert_eq!(first.slots[1].value, 100);

        // The clearing fork: confirmation + clear, server flow, register
        // sums for round 0 of slot 0.
        let mut fork = Packet {
            gaid: 9,
            seq: 900,
            srrt: SERVER_SRRT,
            counter_index: 64,
            counter_threshold: 2,
            bitmap: u32::MAX,
            ..Packet::default()
        };
        fork.flags.set_cnf(true);
        fork.flags.set_clr(true);
        fork.flags.set_mcast(true);
        for i in 0..SLOT_COUNT {
            fork.slots[i] = Slot {
                key: 64 + i as u32,
                value: 2 * (i as i32) * 100,
            };
        }
        let out = agent.on_packet(5 * MS, &fork, false);
        // Ack for the fork, plus the fifth chunk released on slot 0.
        let acks: Vec<&Emit> = out.iter().filter(|e| e.pkt.flags.is_sa()).collect();
        assert_eq!(acks.len(), 1);
        assert_eq!(acks[0].pkt.seq, 900);
        let released: Vec<&Emit> = out.iter().filter(|e| !e.pkt.flags.is_sa()).collect();
        assert_eq!(released.len(), 1);
        let second = &released[0].pkt;
        assert_eq!(second.counter_index, 64);
        assert_eq!(
            round_tag_of(&decode_frames(&second.payload).unwrap()),
            Some(1)
        );
        assert_eq!(agent.stats.rounds_completed, 1);
        assert!(!agent.call_done(call));
    }

    #[test]
    fn shadow_rounds_alternate_counter_halves() {
        let mut agent = stream_client(2, ClearPolicy::Shadow);
        let values: Vec<f64> = (0..160).map(|_| 1.0).collect();
        let (_, emits) = agent.begin_reduce(0, ReduceValues::Fp(values));
        assert_eq!(emits.len(), 4);
        assert_eq!(emits[0].pkt.counter_index, 64);

        // Round 0 of slot 0 completes via an in-network crossing fanned out
        // on another client's flow: no ack must be sent.
        let mut crossing = Packet {
            gaid: 9,
            seq: 31,
            srrt: 44,
            counter_index: 64,
            counter_threshold: 2,
            bitmap: u32::MAX,
            ..Packet::default()
        };
        crossing.flags.set_cnf(true);
        crossing.flags.set_mcast(true);
        for i in 0..SLOT_COUNT {
            crossing.slots[i] = Slot {
                key: 64 + i as u32,
                value: 200,
            };
        }
        crossing.payload = encode_frames(&[PayloadFrame::CallTag { call_id: 0 }]);
        let out = agent.on_packet(3 * MS, &crossing, false);
        assert!(out.iter().all(|e| !e.pkt.flags.is_sa()), "no ack for in-network results");
        // Round 1 reuses slot 0 through the mirror half.
        let released: Vec<&Emit> = out.iter().filter(|e| !e.pkt.flags.is_sa()).collect();
        assert_eq!(released.len(), 1);
        assert_eq!(
            released[0].pkt.counter_index,
            64 + 4 * SLOT_COUNT as u32,
            "round parity selects the mirror half"
        );
        assert_eq!(agent.stats.rounds_completed, 1);
    }

    #[test]
    fn lazy_rounds_report_register_deltas() {
        let mut agent = stream_client(2, ClearPolicy::Lazy);
        let values: Vec<f64> = (0..64).map(|_| 3.0).collect();
        let (call, emits) = agent.begin_reduce(0, ReduceValues::Fp(values));
        assert_eq!(emits.len(), 2);

        // Round 0 of slot 0: cumulative registers read 600 (two clients,
        // 3.00 each).
        let mk_crossing = |ci: u32, value: i32, tag: u32, seq: u32| {
            let mut p = Packet {
                gaid: 9,
                seq,
                srrt: 44,
                counter_index: ci,
                counter_threshold: 2,
                bitmap: u32::MAX,
                ..Packet::default()
            };
            p.flags.set_cnf(true);
            p.flags.set_mcast(true);
            for i in 0..SLOT_COUNT {
                p.slots[i] = Slot {
                    key: ci + i as u32,
                    value,
                };
            }
            p.payload = encode_frames(&[PayloadFrame::CallTag { call_id: tag }]);
            p
        };
        agent.on_packet(3 * MS, &mk_crossing(64, 600, 0, 31), false);
        agent.on_packet(4 * MS, &mk_crossing(96, 600, 0, 32), false);
        let outcome = done_call(&mut agent, call);
        assert!(outcome
            .reduced
            .iter()
            .all(|cv| *cv == CorrectionValue::Wide(600)));

        // A second reduction on the same registers: cumulative 1200, delta
        // 600 again.
        let (call2, emits) = agent.begin_reduce(10 * MS, ReduceValues::Fp(
            (0..64).map(|_| 3.0).collect(),
        ));
        assert_eq!(emits.len(), 2);
        assert_eq!(
            round_tag_of(&decode_frames(&emits[0].pkt.payload).unwrap()),
            Some(1),
            "rounds on a slot keep counting across calls"
        );
        agent.on_packet(12 * MS, &mk_crossing(64, 1200, 1, 41), false);
        agent.on_packet(13 * MS, &mk_crossing(96, 1200, 1, 42), false);
        let outcome = done_call(&mut agent, call2);
        assert!(outcome
            .reduced
            .iter()
            .all(|cv| *cv == CorrectionValue::Wide(600)));
    }

    #[test]
    fn flagged_crossing_escalates_and_correction_completes_the_round() {
        let mut agent = stream_client(2, ClearPolicy::Lazy);
        let values: Vec<f64> = (0..32).map(|_| 2.0).collect();
        let (call, emits) = agent.begin_reduce(0, ReduceValues::Fp(values));
        assert_eq!(emits.len(), 1);
        let seq = emits[0].pkt.seq;

        // The crossing arrives flagged: registers poisoned, no exact
        // values. The client volunteers its originals on the same sequence
        // number instead of applying the result.
        let mut crossing = Packet {
            gaid: 9,
            seq: 77,
            srrt: 44,
            counter_index: 64,
            counter_threshold: 2,
            bitmap: u32::MAX,
            ..Packet::default()
        };
        crossing.flags.set_cnf(true);
        crossing.flags.set_of(true);
        crossing.flags.set_mcast(true);
        crossing.payload = encode_frames(&[PayloadFrame::CallTag { call_id: 0 }]);
        let out = agent.on_packet(3 * MS, &crossing, false);
        assert_eq!(out.len(), 1);
        let esc = &out[0].pkt;
        assert_eq!(esc.seq, seq, "escalation morphs the in-flight chunk");
        assert!(esc.flags.is_of() && esc.flags.is_cross());
        let frames = decode_frames(&esc.payload).unwrap();
        assert_eq!(round_tag_of(&frames), Some(0));
        let entries = frames
            .iter()
            .find_map(|f| match f {
                PayloadFrame::Corrections { entries, .. } => Some(entries.clone()),
                _ => None,
            })
            .expect("exact values attached");
        assert_eq!(entries.len(), 32);
        assert!(entries
            .iter()
            .all(|(_, cv)| *cv == CorrectionValue::Wide(200)));
        assert_eq!(agent.stats.escalations, 1);
        assert!(!agent.call_done(call));

        // The server's correction (exact sums, flagged, confirmation) ends
        // the round; the lazy snapshot follows the corrected amounts.
        let mut corr = Packet {
            gaid: 9,
            seq: 901,
            srrt: SERVER_SRRT,
            counter_index: 64,
            counter_threshold: 2,
            ..Packet::default()
        };
        corr.flags.set_cnf(true);
        corr.flags.set_cross(true);
        corr.flags.set_of(true);
        corr.payload = encode_frames(&[
            PayloadFrame::CallTag { call_id: 0 },
            PayloadFrame::Corrections {
                field: String::from("grad"),
                entries: (0..32).map(|i| (64 + i, CorrectionValue::Wide(400))).collect(),
            },
        ]);
        let out = agent.on_packet(6 * MS, &corr, false);
        assert!(out.iter().any(|e| e.pkt.flags.is_sa() && e.pkt.seq == 901));
        let outcome = done_call(&mut agent, call);
        assert!(outcome
            .reduced
            .iter()
            .all(|cv| *cv == CorrectionValue::Wide(400)));
        assert_eq!(agent.stats.corrections_applied, 1);
        assert!(agent.quiescent());
    }

    #[test]
    fn round_chunk_escalates_after_retransmit_budget() {
        let mut agent = stream_client(2, ClearPolicy::Copy);
        let values: Vec<f64> = (0..32).map(|_| 1.0).collect();
        let (_, emits) = agent.begin_reduce(0, ReduceValues::Fp(values));
        let seq = emits[0].pkt.seq;

        // Three timeouts retransmit the chunk unchanged.
        for k in 1..=3 {
            let now = agent
                .next_timer()
                .expect("retransmission timer armed");
            let out = agent.on_timer(now);
            assert_eq!(out.len(), 1, "retransmit {k}");
            assert_eq!(out[0].pkt.seq, seq);
            assert!(!out[0].pkt.flags.is_cross(), "still the data chunk");
        }
        // The fourth gives up on the network result and volunteers the
        // exact values.
        let now = agent.next_timer().expect("timer still armed");
        let out = agent.on_timer(now);
        assert_eq!(out.len(), 1);
        assert!(out[0].pkt.flags.is_of() && out[0].pkt.flags.is_cross());
        assert_eq!(out[0].pkt.seq, seq, "same sequence number");
        assert_eq!(agent.stats.escalations, 1);
        assert_eq!(agent.stats.retransmits, 4);
    }

    #[test]
    fn correction_request_resends_stored_rounds_by_tag() {
        let mut agent = stream_client(2, ClearPolicy::Lazy);
        // Two completed rounds on slot 0.
        let (c1, e1) = agent.begin_reduce(0, ReduceValues::Fp(vec![5.0; 32]));
        let mut crossing = Packet {
            gaid: 9,
            seq: 70,
            srrt: 44,
            counter_index: 64,
            counter_threshold: 2,
            bitmap: u32::MAX,
            ..Packet::default()
        };
        crossing.flags.set_cnf(true);
        crossing.flags.set_mcast(true);
        for i in 0..SLOT_COUNT {
            crossing.slots[i] = Slot {
                key: 64 + i as u32,
                value: 1000,
            };
        }
        crossing.payload = encode_frames(&[PayloadFrame::CallTag { call_id: 0 }]);
        agent.on_packet(2 * MS, &crossing, false);
        done_call(&mut agent, c1);
        let (c2, _) = agent.begin_reduce(3 * MS, ReduceValues::Fp(vec![7.0; 32]));
        let mut crossing2 = crossing.clone();
        crossing2.seq = 71;
        for i in 0..SLOT_COUNT {
            crossing2.slots[i].value = 2400;
        }
        crossing2.payload = encode_frames(&[PayloadFrame::CallTag { call_id: 1 }]);
        agent.on_packet(4 * MS, &crossing2, false);
        done_call(&mut agent, c2);
        assert!(e1[0].pkt.seq > 0);

        // The server asks for round 0 (a slower peer went missing): the
        // stored exact values come back tagged.
        let mut req = Packet {
            gaid: 9,
            seq: 910,
            srrt: SERVER_SRRT,
            counter_index: 64,
            counter_threshold: 2,
            ..Packet::default()
        };
        req.flags.set_of(true);
        req.flags.set_cross(true);
        req.payload = encode_frames(&[PayloadFrame::CallTag { call_id: 0 }]);
        let out = agent.on_packet(6 * MS, &req, false);
        let resend: Vec<&Emit> = out.iter().filter(|e| !e.pkt.flags.is_sa()).collect();
        assert_eq!(resend.len(), 1);
        let frames = decode_frames(&resend[0].pkt.payload).unwrap();
        assert_eq!(round_tag_of(&frames), Some(0));
        let entries = frames
            .iter()
            .find_map(|f| match f {
                PayloadFrame::Corrections { entries, .. } => Some(entries.clone()),
                _ => None,
            })
            .expect("stored values attached");
        assert!(entries.iter().all(|(_, cv)| *cv == CorrectionValue::Wide(500)));
        assert_eq!(agent.stats.originals_resent, 1);

        // An untagged request falls back to the latest round.
        let mut req2 = req.clone();
        req2.seq = 911;
        req2.payload = Vec::new();
        let out = agent.on_packet(7 * MS, &req2, false);
        let resend: Vec<&Emit> = out.iter().filter(|e| !e.pkt.flags.is_sa()).collect();
        assert_eq!(resend.len(), 1);
        let frames = decode_frames(&resend[0].pkt.payload).unwrap();
        assert_eq!(round_tag_of(&frames), Some(1));
    }

    #[test]
    fn unrepresentable_value_poisons_the_chunk_and_volunteers_exact_values() {
        let mut agent = stream_client(2, ClearPolicy::Copy);
        let mut values = vec![1.0; 32];
        values[5] = 1.0e9; // 1e11 quantized: does not fit an i32
        let (_, emits) = agent.begin_reduce(0, ReduceValues::Fp(values));
        assert_eq!(emits.len(), 2, "data chunk plus volunteered exact values");
        let data = &emits
            .iter()
            .find(|e| !e.pkt.flags.is_cross())
            .expect("register write present")
            .pkt;
        assert_eq!(data.slots[5].value, i32::MAX, "deliberate poison");
        assert_eq!(data.slots[0].value, 100);
        let vol = &emits
            .iter()
            .find(|e| e.pkt.flags.is_cross())
            .expect("software copy present")
            .pkt;
        assert!(vol.flags.is_of());
        let frames = decode_frames(&vol.payload).unwrap();
        assert_eq!(round_tag_of(&frames), Some(0));
        let entries = frames
            .iter()
            .find_map(|f| match f {
                PayloadFrame::Corrections { entries, .. } => Some(entries.clone()),
                _ => None,
            })
            .expect("exact values attached");
        assert_eq!(entries.len(), 32);
        assert_eq!(entries[5].1, CorrectionValue::Raw(1.0e9));
        assert_eq!(entries[0].1, CorrectionValue::Wide(100));
        assert_eq!(agent.stats.volunteers_sent, 1);
    }

    #[test]
    fn kv_adds_split_between_granted_and_fallback_paths() {
        let mut cfg = ClientAgentCfg::basic(ME, 11, kv_program(0), SERVER, SERVER_SRRT, MY_SRRT, 64);
        cfg.report_period = 10 * MS;
        let mut agent = ClientAgent::new(cfg);
        let w = |s: &str| KeyName::Str(String::from(s));

        // Nothing granted yet: one software-path packet, bindings attached.
        let (c1, emits) = agent.begin_map_add(0, Some("merge"), &[(w("alpha"), 3), (w("beta"), 4)]);
        assert_eq!(emits.len(), 1);
        let pkt = &emits[0].pkt;
        assert!(pkt.flags.is_cross());
        let frames = decode_frames(&pkt.payload).unwrap();
        assert!(frames
            .iter()
            .any(|f| matches!(f, PayloadFrame::CallHeader { total_packets: 1, .. })));
        let bindings: Vec<(u32, String)> = frames
            .iter()
            .find_map(|f| match f {
                PayloadFrame::FallbackBindings { entries } => Some(entries.clone()),
                _ => None,
            })
            .expect("first-seen names attached");
        assert_eq!(bindings.len(), 2);
        let alpha = laddr_of_str("alpha");
        assert!(bindings.iter().any(|(l, s)| *l == alpha && s == "alpha"));

        // Ack carrying a grant for alpha, then the assembled call's reply.
        let mut ack = ack_for(&emits[0], false);
        ack.payload = encode_frames(&[PayloadFrame::MappingGrants {
            entries: vec![(alpha, 500)],
        }]);
        agent.on_packet(MS, &ack, false);
        assert_eq!(agent.granted_cell(alpha), Some(500));
        assert!(agent
            .take_events()
            .iter()
            .any(|e| *e == ClientEvent::GrantLearned { laddr: alpha, cell: 500 }));
        let mut reply = Packet {
            gaid: 11,
            seq: 300,
            srrt: SERVER_SRRT,
            ..Packet::default()
        };
        reply.flags.set_cross(true);
        reply.payload = encode_frames(&[
            PayloadFrame::ChunkTag {
                call_id: c1 as u32,
                chunk: 0,
            },
            PayloadFrame::ReplyHeader {
                call_id: c1 as u32,
                ok: true,
                error: String::new(),
                seq_base: 0,
                total_packets: 1,
                fields: Vec::new(),
            },
        ]);
        agent.on_packet(2 * MS, &reply, false);
        assert!(done_call(&mut agent, c1).ok);

        // Second batch: alpha rides the in-network path named by its cell,
        // beta stays in software; no repeated bindings for beta.
        let (_, emits) = agent.begin_map_add(3 * MS, Some("merge"), &[(w("alpha"), 5), (w("beta"), 6)]);
        assert_eq!(emits.len(), 2);
        let granted = &emits[0].pkt;
        assert!(!granted.flags.is_cross());
        assert_eq!(granted.slots[0], Slot { key: 500, value: 5 });
        let fb = &emits[1].pkt;
        assert!(fb.flags.is_cross());
        let fb_frames = decode_frames(&fb.payload).unwrap();
        assert!(
            !fb_frames
                .iter()
                .any(|f| matches!(f, PayloadFrame::FallbackBindings { .. })),
            "names are sent once"
        );

        // Revocation by sentinel: alpha falls back to the software path.
        let mut revoke = Packet {
            gaid: 11,
            seq: 301,
            srrt: SERVER_SRRT,
            ..Packet::default()
        };
        revoke.flags.set_cross(true);
        revoke.payload = encode_frames(&[PayloadFrame::MappingGrants {
            entries: vec![(alpha, u32::MAX)],
        }]);
        agent.on_packet(4 * MS, &revoke, false);
        assert_eq!(agent.granted_cell(alpha), None);
        assert!(agent
            .take_events()
            .iter()
            .any(|e| *e == ClientEvent::GrantRevoked { laddr: alpha }));

        // The use-count report goes out on the report timer.
        let t = agent.next_timer().expect("report due");
        let out = agent.on_timer(t.max(10 * MS));
        let reports: Vec<&Emit> = out
            .iter()
            .filter(|e| e.pkt.flags.is_sa() && e.pkt.flags.is_cross())
            .collect();
        assert_eq!(reports.len(), 1);
        let frames = decode_frames(&reports[0].pkt.payload).unwrap();
        let counts = frames
            .iter()
            .find_map(|f| match f {
                PayloadFrame::UseCounts { entries } => Some(entries.clone()),
                _ => None,
            })
            .expect("counts attached");
        assert!(counts.iter().any(|(l, n)| *l == alpha && *n == 2));
    }

    #[test]
    fn query_merges_switch_turnaround_and_server_reply() {
        let mut agent = ClientAgent::new(ClientAgentCfg::basic(
            ME,
            11,
            kv_program(4),
            SERVER,
            SERVER_SRRT,
            MY_SRRT,
            64,
        ));
        let k1 = KeyName::Int(17);
        let k2 = KeyName::Int(23);
        let l1 = laddr_of_int(17);
        let l2 = laddr_of_int(23);
        // Pre-grant k1.
        let mut grant = Packet {
            gaid: 11,
            seq: 1,
            srrt: SERVER_SRRT,
            ..Packet::default()
        };
        grant.flags.set_sa(true);
        grant.payload = encode_frames(&[PayloadFrame::MappingGrants {
            entries: vec![(l1, 640)],
        }]);
        agent.on_packet(0, &grant, false);

        let (call, emits) = agent.begin_query(MS, &[k1.clone(), k2.clone()]);
        assert_eq!(emits.len(), 2);
        let hit = &emits[0].pkt;
        assert_eq!(hit.op_type, OP_QUERY);
        assert!(!hit.flags.is_cross());
        assert_eq!(hit.slots[0], Slot { key: 640, value: 0 });
        assert_eq!(hit.counter_index, 0, "reads stay off the notify counter");
        let miss = &emits[1].pkt;
        assert!(miss.flags.is_cross());
        assert_eq!(miss.slots[0], Slot { key: l2, value: 0 });

        // Switch turnaround answers the granted read: same packet, value
        // filled, still this client's flow.
        let mut turn = hit.clone();
        turn.slots[0].value = 42;
        let out = agent.on_packet(2 * MS, &turn, false);
        assert!(out.iter().all(|e| !e.pkt.flags.is_sa()), "turnarounds are not acknowledged");
        assert!(!agent.call_done(call));
        assert_eq!(agent.stats.turnarounds, 1);

        // Server reply answers the rest.
        let mut reply = Packet {
            gaid: 11,
            seq: 400,
            srrt: SERVER_SRRT,
            op_type: OP_QUERY,
            bitmap: 1,
            ..Packet::default()
        };
        reply.flags.set_cross(true);
        reply.slots[0] = Slot { key: l2, value: 7 };
        reply.payload = encode_frames(&[PayloadFrame::ChunkTag {
            call_id: call as u32,
            chunk: 1,
        }]);
        let out = agent.on_packet(3 * MS, &reply, false);
        assert!(out.iter().any(|e| e.pkt.flags.is_sa() && e.pkt.seq == 400));
        let outcome = done_call(&mut agent, call);
        let mut vals = outcome.query_values.clone();
        vals.sort_by_key(|(_, v)| *v);
        assert_eq!(vals, vec![(k2, 7), (k1, 42)]);
    }

    #[test]
    fn keyed_update_notification_completes_the_update_and_raises_an_event() {
        let mut cfg = ClientAgentCfg::basic(ME, 11, kv_program(4), SERVER, SERVER_SRRT, MY_SRRT, 64);
        cfg.notify_counter = Some(1025);
        let mut agent = ClientAgent::new(cfg);
        let l1 = laddr_of_int(17);
        let mut grant = Packet {
            gaid: 11,
            seq: 1,
            srrt: SERVER_SRRT,
            ..Packet::default()
        };
        grant.flags.set_sa(true);
        grant.payload = encode_frames(&[PayloadFrame::MappingGrants {
            entries: vec![(l1, 640)],
        }]);
        agent.on_packet(0, &grant, false);

        let (call, emits) = agent.begin_map_add(MS, None, &[(KeyName::Int(17), 2)]);
        assert_eq!(emits.len(), 1);
        assert_eq!(emits[0].pkt.counter_index, 1025);
        assert_eq!(emits[0].pkt.counter_threshold, 4);

        // This update trips the notify counter: the fan-out copy on this
        // client's own flow confirms delivery and carries the event.
        let mut fanout = emits[0].pkt.clone();
        fanout.flags.set_cnf(true);
        fanout.flags.set_mcast(true);
        let out = agent.on_packet(2 * MS, &fanout, false);
        assert!(out.iter().all(|e| !e.pkt.flags.is_sa()));
        assert!(done_call(&mut agent, call).ok);
        let events = agent.take_events();
        assert!(events
            .iter()
            .any(|e| matches!(e, ClientEvent::Notified { counter_index: 1025, .. })));

        // A notification triggered by a peer's update raises the event too.
        let mut peer = Packet {
            gaid: 11,
            seq: 9,
            srrt: 44,
            counter_index: 1025,
            ..Packet::default()
        };
        peer.flags.set_cnf(true);
        peer.flags.set_mcast(true);
        agent.on_packet(3 * MS, &peer, false);
        let events = agent.take_events();
        assert!(events
            .iter()
            .any(|e| matches!(e, ClientEvent::Notified { counter_index: 1025, srrt: 44, .. })));
    }

    #[test]
    fn ballot_wins_on_crossing_turnaround_and_loses_on_ack() {
        let program = stream_program(1, ClearPolicy::Nop, RouteTarget::Source);
        let mut cfg = ClientAgentCfg::basic(ME, 12, program, SERVER, SERVER_SRRT, MY_SRRT, 64);
        cfg.pool = Some(PoolCfg {
            base_key: 0,
            data_base: 0,
            chunk_capacity: 1024,
            cnt_base: 0,
            mirrored: false,
        });
        let mut agent = ClientAgent::new(cfg);

        // Win: the ballot comes back confirmed on this client's own flow.
        let (c1, emits) = agent.begin_ballot(0, 320, 7);
        let mut win = emits[0].pkt.clone();
        win.flags.set_cnf(true);
        let out = agent.on_packet(MS, &win, false);
        assert!(out.iter().all(|e| !e.pkt.flags.is_sa()));
        assert_eq!(done_call(&mut agent, c1).won, Some(true));
        assert_eq!(agent.stats.wins, 1);

        // Loss: the ballot was forwarded below threshold and the server's
        // acknowledgement records it.
        let (c2, emits) = agent.begin_ballot(2 * MS, 352, 7);
        let out = agent.on_packet(3 * MS, &ack_for(&emits[0], false), false);
        assert!(out.is_empty());
        assert_eq!(done_call(&mut agent, c2).won, Some(false));
        assert_eq!(agent.stats.losses, 1);
    }

    #[test]
    fn lock_repolls_on_clear_and_gives_up_after_the_budget() {
        let program = stream_program(1, ClearPolicy::Nop, RouteTarget::Source);
        let mut cfg = ClientAgentCfg::basic(ME, 12, program, SERVER, SERVER_SRRT, MY_SRRT, 64);
        cfg.max_lock_polls = 2;
        let mut agent = ClientAgent::new(cfg);

        let (call, emits) = agent.begin_lock(0, 320);
        // Lost: acknowledged below threshold. The call parks.
        agent.on_packet(MS, &ack_for(&emits[0], false), false);
        assert!(!agent.call_done(call));
        assert!(agent.quiescent(), "no traffic while parked");

        // Release observed: the server's clear fans out; the waiter polls
        // again with a fresh ballot.
        let mut clear = Packet {
            gaid: 12,
            seq: 500,
            srrt: SERVER_SRRT,
            counter_index: 320,
            ..Packet::default()
        };
        clear.flags.set_clr(true);
        clear.flags.set_mcast(true);
        let out = agent.on_packet(2 * MS, &clear, false);
        let polls: Vec<&Emit> = out.iter().filter(|e| !e.pkt.flags.is_sa()).collect();
        assert_eq!(polls.len(), 1);
        assert_eq!(polls[0].pkt.counter_index, 320);
        assert_eq!(agent.stats.repolls, 1);

        // This poll wins.
        let mut win = polls[0].pkt.clone();
        win.flags.set_cnf(true);
        agent.on_packet(3 * MS, &win, false);
        assert_eq!(done_call(&mut agent, call).won, Some(true));

        // A second waiter exhausts its budget and gives up.
        let (c2, emits) = agent.begin_lock(10 * MS, 320);
        agent.on_packet(11 * MS, &ack_for(&emits[0], false), false);
        for k in 0..3u32 {
            let mut clr = clear.clone();
            clr.seq = 600 + k;
            let out = agent.on_packet((12 + k as u64) * MS, &clr, false);
            let polls: Vec<&Emit> = out.iter().filter(|e| !e.pkt.flags.is_sa()).collect();
            if k < 2 {
                assert_eq!(polls.len(), 1, "poll {k} goes out");
                let ack = ack_for(polls[0], false);
                agent.on_packet((12 + k as u64) * MS + MS / 2, &ack, false);
            } else {
                assert!(polls.is_empty(), "budget exhausted");
            }
        }
        assert_eq!(done_call(&mut agent, c2).won, Some(false));
    }

    #[test]
    fn congestion_marks_halve_the_window_once_per_round_trip() {
        let program = stream_program(0, ClearPolicy::Nop, RouteTarget::Server);
        let mut cfg = ClientAgentCfg::basic(ME, 9, program, SERVER, SERVER_SRRT, MY_SRRT, 64);
        cfg.cwnd_init = 16.0;
        cfg.srtt_init = 2 * MS;
        let mut agent = ClientAgent::new(cfg);
        let msg = Message::new("ping");
        let (_, e1) = agent.begin_call(0, "ping", &msg);
        let (_, e2) = agent.begin_call(0, "ping", &msg);
        let (_, e3) = agent.begin_call(0, "ping", &msg);

        agent.on_packet(MS, &ack_for(&e1[0], true), false);
        let w1 = agent.cwnd();
        assert!(w1 < 16.0 && w1 >= 8.0, "halved: {w1}");
        // A second mark within the same round trip does not halve again.
        agent.on_packet(MS + MS / 4, &ack_for(&e2[0], true), false);
        assert!(agent.cwnd() >= w1, "no second halving inside one srtt");
        assert_eq!(agent.stats.cwnd_halvings, 1);
        // Past one srtt it does.
        agent.on_packet(4 * MS, &ack_for(&e3[0], true), false);
        assert_eq!(agent.stats.cwnd_halvings, 2);
        assert!(agent.cwnd() < w1);
    }

    #[test]
    fn window_paces_stream_chunks_and_acked_round_chunks_keep_watching() {
        let mut agent = stream_client(2, ClearPolicy::Copy);
        // Shrink the window to 2: only two of four slots may fly.
        agent.cwnd = 2.0;
        let values: Vec<f64> = (0..128).map(|i| i as f64).collect();
        let (_, emits) = agent.begin_reduce(0, ReduceValues::Fp(values));
        assert_eq!(emits.len(), 2, "window caps the launch");
        let seq0 = emits[0].pkt.seq;

        // Acks release nothing (round results do), but mark the chunks.
        let out = agent.on_packet(MS, &ack_for(&emits[0], false), false);
        assert!(out.is_empty(), "round chunks stay in flight when acked");
        let out = agent.on_packet(MS, &ack_for(&emits[1], false), false);
        assert!(out.is_empty());
        // The acked chunks retransmit on a gentle watch cadence rather
        // than the loss cadence.
        let t = agent.next_timer().expect("watch timer armed");
        assert!(t >= MS + 4 * agent.rto());
        let out = agent.on_timer(t);
        assert!(out.iter().any(|e| e.pkt.seq == seq0), "re-poll of the acked chunk");
    }
}
