//! Per-packet register pipeline of a programmable switch.
//!
//! A switch owns a flat file of signed 32-bit cells. Applications are
//! admitted with a contiguous cell reservation and a [`SwitchProgram`]
//! derived from their NetFilter; every data packet then walks one fixed
//! pipeline:
//!
//! 1. **Admission** - unknown application ids are forwarded untouched.
//! 2. **Retransmission check** - each flow (`srrt` slot) keeps a one-bit-per-
//!    sequence window. A packet whose stored bit already equals its `flip`
//!    parity is a duplicate: it may read registers and re-trigger forwarding
//!    decisions but never mutates a value or a counter again. The check runs
//!    for *every* admitted tracked packet, including ones that bypass the map
//!    stage, so mixed traffic still advances window parity correctly.
//! 3. **Bypass** - acknowledgements (`isSA`), software-path traffic
//!    (`isCross`), and overflow corrections (`isOf`) skip the map stage.
//! 4. **Stream modify** - an optional scalar operator applied to slot values.
//! 5. **Count-and-forward** - a per-chunk counter decides whether the packet
//!    is absorbed, forwarded to the server, turned around to its source, or
//!    fanned out to every client. Exactly one *fresh* packet crosses a given
//!    threshold; duplicates re-derive their verdict without incrementing.
//!    Only counter-addressed packets take this stage: one naming no valid
//!    counter routes like plain traffic, which is how keyed reads turn
//!    around at the switch even when the application runs a notify counter.
//! 6. **Map ops** - `register += value` (fresh only, saturating; saturation
//!    poisons the packet with `isOf`) fused with a read-back that replaces
//!    slot values with register contents.
//! 7. **Clear** - on reply-direction packets flagged `isClr` (fresh only),
//!    and as mirror-wipes at shadow crossings.
//!
//! Addressing comes in two shapes. *Key-value* slots carry physical cell
//! indexes granted by the controller. *Elided streams* carry consecutive
//! logical keys that the switch folds into a fixed cell pool
//! (`cell = base + (key - base_key) mod pool`), so an unbounded stream
//! reuses a bounded register region; the matching per-chunk counters live in
//! a parallel pool. A mirrored pool doubles both regions and the fold, which
//! gives round-parity (shadow) clearing for free: the crossing of round `t`
//! wipes the half that round `t+1` will use.
//!
//! The first cell of every reservation is the application's congestion
//! latch: a CE-marked data packet sets it, and the next reply-direction
//! packet reads-and-clears it into its own ECN flag so the signal reaches
//! clients even when the marked packet's own reply is lost.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::netfilter::{ClearPolicy, RouteTarget, StreamOp, SwitchProgram};
use crate::wire::{Packet, SLOT_COUNT};
use crate::{NodeId, SimTime};

/// Cells per switch in the default register file (5 MiB of i32).
pub const DEFAULT_CELL_COUNT: u32 = 1_310_720;

/// Default retransmission-window modulus (bits per flow tracker).
pub const DEFAULT_W_MAX: u32 = 256;

/// Cell indexes below this are reserved for the control plane and are never
/// granted to applications.
pub const FIRST_GRANTABLE_CELL: u32 = 1024;

// ---------------------------------------------------------------------------
// Per-flow retransmission trackers
// ---------------------------------------------------------------------------

/// One-bit-per-sequence window. Bits start at 1; a fresh sequence with flip
/// parity `p` stores `p`. Window discipline (send `s` only once `s - w_max`
/// is acknowledged) plus FIFO links guarantee that when sequence `s`
/// arrives, its bit holds either `parity(s)` (seen before) or
/// `parity(s - w_max)` / the initial 1 (not seen), which differ.
#[derive(Debug, Clone)]
struct SrrtTracker {
    bits: Vec<u64>,
    last_seen: SimTime,
}

impl SrrtTracker {
    fn new(w_max: u32) -> Self {
        SrrtTracker {
            bits: vec![!0u64; (w_max as usize).div_ceil(64)],
            last_seen: 0,
        }
    }

    /// Returns true when the packet is fresh, recording its parity.
    fn observe(&mut self, seq: u32, flip: bool, w_max: u32, now: SimTime) -> bool {
        self.last_seen = now;
        let idx = (seq % w_max) as usize;
        let (word, bit) = (idx / 64, idx % 64);
        let stored = self.bits[word] >> bit & 1 == 1;
        if stored == flip {
            false
        } else {
            if flip {
                self.bits[word] |= 1 << bit;
            } else {
                self.bits[word] &= !(1 << bit);
            }
            true
        }
    }
}

/// Flip parity a sender must stamp on sequence `seq` under window `w_max`.
pub fn flip_for(seq: u32, w_max: u32) -> bool {
    (seq / w_max) % 2 == 1
}

// ---------------------------------------------------------------------------
// Application deployment
// ---------------------------------------------------------------------------

/// Cell-pool geometry for elided (consecutive-key) streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolCfg {
    /// First logical key of the stream; slot keys below it are misaddressed.
    pub base_key: u32,
    /// First data cell of the pool.
    pub data_base: u32,
    /// Pool entries (chunks of 32 cells) per half.
    pub chunk_capacity: u32,
    /// First per-chunk counter cell; one counter per pool entry.
    pub cnt_base: u32,
    /// Two halves alternate by round parity (shadow clearing).
    pub mirrored: bool,
}

impl PoolCfg {
    pub fn halves(&self) -> u32 {
        if self.mirrored {
            2
        } else {
            1
        }
    }
    pub fn data_cells(&self) -> u32 {
        self.halves() * self.chunk_capacity * 32
    }
    pub fn cnt_cells(&self) -> u32 {
        self.halves() * self.chunk_capacity
    }

    /// Physical data cell for a logical stream key; agents use the same
    /// mapping to name cells the switch will touch.
    pub fn data_cell(&self, key: u32) -> Option<u32> {
        let rel = key.checked_sub(self.base_key)?;
        Some(self.data_base + rel % self.data_cells())
    }

    /// Physical counter cell for a chunk's counter index.
    pub fn counter_cell(&self, counter_index: u32) -> Option<u32> {
        let rel = counter_index.checked_sub(self.base_key)?;
        Some(self.cnt_base + (rel / 32) % self.cnt_cells())
    }

    fn mirror_data(&self, cell: u32) -> u32 {
        let half = self.chunk_capacity * 32;
        self.data_base + ((cell - self.data_base) + half) % (2 * half)
    }

    fn mirror_counter(&self, cell: u32) -> u32 {
        let half = self.chunk_capacity;
        self.cnt_base + ((cell - self.cnt_base) + half) % (2 * half)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppMode {
    /// Slot keys and counter indexes are physical cell addresses.
    KeyValue,
    /// Consecutive logical keys folded into a bounded cell pool.
    ElidedStream(PoolCfg),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchAppConfig {
    pub gaid: u32,
    pub program: SwitchProgram,
    pub w_max: u32,
    pub mode: AppMode,
    /// Reservation `[cell_base, cell_base + cell_len)`. `cell_base` itself
    /// is the congestion latch.
    pub cell_base: u32,
    pub cell_len: u32,
    pub server: NodeId,
    /// Fan-out targets for client-directed crossings (all registered
    /// clients, or the endpoint subset named by the filter).
    pub fanout: Vec<NodeId>,
}

impl SwitchAppConfig {
    fn ecn_cell(&self) -> u32 {
        self.cell_base
    }

    fn in_reservation(&self, cell: u32) -> bool {
        cell >= self.cell_base && cell - self.cell_base < self.cell_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstallError {
    OutOfRange,
    Overlap(u32),
    EmptyReservation,
    PoolOutsideReservation,
    ShadowNeedsMirroredPool,
    BadWindow,
    DuplicateApp,
}

impl fmt::Display for InstallError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstallError::OutOfRange => write!(f, "reservation exceeds the register file"),
            InstallError::Overlap(g) => write!(f, "reservation overlaps application {g}"),
            InstallError::EmptyReservation => write!(f, "reservation must hold at least 2 cells"),
            InstallError::PoolOutsideReservation => {
                write!(f, "pool regions fall outside the reservation")
            }
            InstallError::ShadowNeedsMirroredPool => {
                write!(f, "shadow clearing requires a mirrored elided pool")
            }
            InstallError::BadWindow => write!(f, "w_max must be a positive multiple of 2"),
            InstallError::DuplicateApp => write!(f, "application id already installed"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for InstallError {}

#[derive(Debug)]
struct AppState {
    cfg: SwitchAppConfig,
    trackers: BTreeMap<u16, SrrtTracker>,
    /// Which (srrt, seq) caused the live crossing of a counter cell, so a
    /// retransmission of exactly that packet can re-trigger a lost
    /// source-directed delivery without granting bystanders.
    crossing_memo: BTreeMap<u32, (u16, u32)>,
    /// Timestamp of the last admitted packet; the control plane polls this
    /// to drive its idle-application reclamation.
    last_activity: SimTime,
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchStats {
    pub packets: u64,
    /// Frames for unregistered application ids (or foreign direction).
    pub passthrough: u64,
    pub acks: u64,
    pub fresh: u64,
    pub duplicates: u64,
    pub bypass: u64,
    /// Register saturations during addTo.
    pub saturations: u64,
    pub crossings: u64,
    /// Crossing deliveries re-triggered by duplicates.
    pub recrossings: u64,
    /// Sub-threshold packets absorbed (dropped by design).
    pub absorbed: u64,
    pub turnarounds: u64,
    pub fanout_copies: u64,
    pub clears: u64,
    pub mirror_wipes: u64,
    /// Slots skipped because their key fell outside the reservation.
    pub misaddressed_slots: u64,
    pub ce_latched: u64,
    pub ecn_reflected: u64,
}

// ---------------------------------------------------------------------------
// Packet I/O
// ---------------------------------------------------------------------------

/// A decoded packet arriving at the switch, with frame metadata.
#[derive(Debug, Clone)]
pub struct PacketIn {
    pub pkt: Packet,
    pub src: NodeId,
    pub dst: NodeId,
    /// Keys were elided on the wire; emissions must re-encode the same way.
    pub elided: bool,
    /// The frame was CE-marked in a queue on the way here.
    pub ce: bool,
    pub now: SimTime,
}

/// One packet the switch sends onward.
#[derive(Debug, Clone)]
pub struct Emit {
    pub pkt: Packet,
    pub dst: NodeId,
    pub elided: bool,
}

// ---------------------------------------------------------------------------
// Switch state
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SwitchState {
    pub node: NodeId,
    cells: Vec<i32>,
    apps: BTreeMap<u32, AppState>,
    pub stats: SwitchStats,
}

impl SwitchState {
    pub fn new(node: NodeId, cell_count: u32) -> Self {
        SwitchState {
            node,
            cells: vec![0; cell_count as usize],
            apps: BTreeMap::new(),
            stats: SwitchStats::default(),
        }
    }

    pub fn cell_count(&self) -> u32 {
        self.cells.len() as u32
    }

    pub fn cell(&self, i: u32) -> i32 {
        self.cells[i as usize]
    }

    /// Control-plane write (grant installs, drains, late adds).
    pub fn write_cell(&mut self, i: u32, v: i32) {
        self.cells[i as usize] = v;
    }

    pub fn read_range(&self, base: u32, len: u32) -> &[i32] {
        &self.cells[base as usize..(base + len) as usize]
    }

    pub fn registered(&self, gaid: u32) -> bool {
        self.apps.contains_key(&gaid)
    }

    pub fn app_config(&self, gaid: u32) -> Option<&SwitchAppConfig> {
        self.apps.get(&gaid).map(|a| &a.cfg)
    }

    pub fn install_app(&mut self, cfg: SwitchAppConfig) -> Result<(), InstallError> {
        if self.apps.contains_key(&cfg.gaid) {
            return Err(InstallError::DuplicateApp);
        }
        if cfg.cell_len < 2 {
            return Err(InstallError::EmptyReservation);
        }
        if cfg.w_max == 0 || cfg.w_max % 2 != 0 {
            return Err(InstallError::BadWindow);
        }
        let end = cfg
            .cell_base
            .checked_add(cfg.cell_len)
            .ok_or(InstallError::OutOfRange)?;
        if end > self.cell_count() {
            return Err(InstallError::OutOfRange);
        }
        for other in self.apps.values() {
            let o = &other.cfg;
            if cfg.cell_base < o.cell_base + o.cell_len && o.cell_base < end {
                return Err(InstallError::Overlap(o.gaid));
            }
        }
        if let AppMode::ElidedStream(p) = &cfg.mode {
            let data_ok = cfg.in_reservation(p.data_base)
                && p.data_base + p.data_cells() <= end
                && p.data_base + p.data_cells() > p.data_base;
            let cnt_ok =
                cfg.in_reservation(p.cnt_base) && p.cnt_base + p.cnt_cells() <= end;
            if !data_ok || !cnt_ok || p.chunk_capacity == 0 {
                return Err(InstallError::PoolOutsideReservation);
            }
        }
        if cfg.program.clear == ClearPolicy::Shadow {
            match &cfg.mode {
                AppMode::ElidedStream(p) if p.mirrored => {}
                _ => return Err(InstallError::ShadowNeedsMirroredPool),
            }
        }
        self.apps.insert(
            cfg.gaid,
            AppState {
                cfg,
                trackers: BTreeMap::new(),
                crossing_memo: BTreeMap::new(),
                last_activity: 0,
            },
        );
        Ok(())
    }

    /// When the application last saw an admitted packet, or `None` if it is
    /// not installed. Freshly installed applications report time zero until
    /// traffic arrives; the control plane tracks installation time itself.
    pub fn app_last_activity(&self, gaid: u32) -> Option<SimTime> {
        self.apps.get(&gaid).map(|a| a.last_activity)
    }

    /// Removes an application; its cells keep their contents until the
    /// control plane zeroes or re-grants them.
    pub fn remove_app(&mut self, gaid: u32) -> Option<SwitchAppConfig> {
        self.apps.remove(&gaid).map(|a| a.cfg)
    }

    /// Drops flow trackers idle for at least `idle`; returns how many.
    /// A reclaimed slot id must not be reused without resetting sequence
    /// numbers, so the control plane allocates slot ids monotonically.
    pub fn sweep_trackers(&mut self, now: SimTime, idle: SimTime) -> usize {
        let mut removed = 0;
        for app in self.apps.values_mut() {
            let before = app.trackers.len();
            app.trackers
                .retain(|_, t| now.saturating_sub(t.last_seen) < idle);
            removed += before - app.trackers.len();
        }
        removed
    }

    /// Runs the pipeline on one packet and returns everything the switch
    /// emits in response (zero packets = absorbed).
    pub fn process_packet(&mut self, input: PacketIn) -> Vec<Emit> {
        self.stats.packets += 1;
        let SwitchState {
            cells, apps, stats, ..
        } = self;
        let Some(app) = apps.get_mut(&input.pkt.gaid) else {
            stats.passthrough += 1;
            return forward(input);
        };
        app.last_activity = input.now;
        process_app(app, cells, stats, input)
    }
}

fn forward(input: PacketIn) -> Vec<Emit> {
    vec![Emit {
        dst: input.dst,
        pkt: input.pkt,
        elided: input.elided,
    }]
}

// ---------------------------------------------------------------------------
// The pipeline
// ---------------------------------------------------------------------------

/// A register holding exactly MAX or MIN is treated as overflow-poisoned.
fn poisoned(v: i32) -> bool {
    v == i32::MAX || v == i32::MIN
}

fn data_cell(cfg: &SwitchAppConfig, key: u32) -> Option<u32> {
    match &cfg.mode {
        AppMode::KeyValue => {
            (cfg.in_reservation(key) && key != cfg.ecn_cell()).then_some(key)
        }
        AppMode::ElidedStream(p) => p.data_cell(key),
    }
}

fn counter_cell(cfg: &SwitchAppConfig, counter_index: u32) -> Option<u32> {
    match &cfg.mode {
        AppMode::KeyValue => (cfg.in_reservation(counter_index)
            && counter_index != cfg.ecn_cell())
        .then_some(counter_index),
        AppMode::ElidedStream(p) => p.counter_cell(counter_index),
    }
}

/// Read-and-clear the congestion latch; used when emitting toward clients.
fn take_ecn_latch(app: &SwitchAppConfig, cells: &mut [i32], stats: &mut SwitchStats) -> bool {
    let i = app.ecn_cell() as usize;
    if cells[i] != 0 {
        cells[i] = 0;
        stats.ecn_reflected += 1;
        true
    } else {
        false
    }
}

/// Zero every cell named by the packet's enabled slots plus its counter and
/// the congestion latch; drop crossing memos for the zeroed counters.
fn exec_clear(
    app: &mut AppState,
    cells: &mut [i32],
    stats: &mut SwitchStats,
    pkt: &Packet,
) {
    for i in 0..SLOT_COUNT {
        if !pkt.slot_enabled(i) {
            continue;
        }
        match data_cell(&app.cfg, pkt.slots[i].key) {
            Some(c) => cells[c as usize] = 0,
            None => stats.misaddressed_slots += 1,
        }
    }
    if let Some(c) = counter_cell(&app.cfg, pkt.counter_index) {
        cells[c as usize] = 0;
        app.crossing_memo.remove(&c);
    }
    cells[app.cfg.ecn_cell() as usize] = 0;
    stats.clears += 1;
}

fn process_app(
    app: &mut AppState,
    cells: &mut [i32],
    stats: &mut SwitchStats,
    input: PacketIn,
) -> Vec<Emit> {
    let PacketIn {
        mut pkt,
        src,
        dst,
        elided,
        ce,
        now,
    } = input;

    // Acknowledgements are untracked and touch nothing.
    if pkt.flags.is_sa() {
        stats.acks += 1;
        return vec![Emit { pkt, dst, elided }];
    }

    let to_server = dst == app.cfg.server;
    let from_server = src == app.cfg.server;
    if !to_server && !from_server {
        stats.passthrough += 1;
        return vec![Emit { pkt, dst, elided }];
    }

    // Retransmission check for every admitted tracked packet, before any
    // bypass, so that mixed software/in-network flows keep parity advancing.
    let fresh = if pkt.srrt == 0 {
        None
    } else {
        let w_max = app.cfg.w_max;
        let tracker = app
            .trackers
            .entry(pkt.srrt)
            .or_insert_with(|| SrrtTracker::new(w_max));
        let f = tracker.observe(pkt.seq, pkt.flip, w_max, now);
        if f {
            stats.fresh += 1;
        } else {
            stats.duplicates += 1;
        }
        Some(f)
    };

    // Bypass lane: software-path traffic, overflow packets, untracked flows.
    if pkt.srrt == 0 || pkt.flags.is_cross() || pkt.flags.is_of() {
        stats.bypass += 1;
        // Overflow corrections still clear the registers they repair.
        if from_server && pkt.flags.is_clr() && fresh == Some(true) {
            exec_clear(app, cells, stats, &pkt);
        }
        if from_server && take_ecn_latch(&app.cfg, cells, stats) {
            pkt.flags.set_ecn(true);
        }
        return vec![Emit { pkt, dst, elided }];
    }
    let fresh = fresh.expect("tracked packet");

    if from_server {
        return process_from_server(app, cells, stats, pkt, dst, elided, fresh);
    }

    // ---- Client-to-server direction ----
    let program = app.cfg.program.clone();

    // Stream modify runs on duplicates too: it transforms the packet, not
    // switch state, and both transmissions must present the same view.
    if program.modify.op != StreamOp::Nop {
        for i in 0..SLOT_COUNT {
            if pkt.slot_enabled(i) {
                let (v, of) = program.modify.op.apply(pkt.slots[i].value, program.modify.para);
                pkt.slots[i].value = v;
                if of {
                    pkt.flags.set_of(true);
                }
            }
        }
    }

    // Congestion latch: remember the mark for the next reply-direction
    // packet; the marked packet itself also carries the flag forward.
    if ce {
        pkt.flags.set_ecn(true);
        cells[app.cfg.ecn_cell() as usize] = 1;
        stats.ce_latched += 1;
    }

    // Count-and-forward runs before the map ops on this path; the two touch
    // disjoint state, so only the crossing decision is fixed here while the
    // forwarding itself happens at egress, after the map stage. It applies
    // only to counter-addressed packets: one naming no valid counter (a
    // keyed read, for instance) skips the threshold machinery entirely and
    // takes the plain route at egress.
    let counter = if program.threshold > 0 {
        counter_cell(&app.cfg, pkt.counter_index)
    } else {
        None
    };
    let mut crossed = false;
    if let Some(ctr) = counter {
        let th = program.threshold as i64;
        if fresh {
            let n = cells[ctr as usize].saturating_add(1);
            cells[ctr as usize] = n;
            crossed = if program.clear == ClearPolicy::Lazy {
                (n as i64) % th == 0
            } else {
                n as i64 == th
            };
            if crossed {
                app.crossing_memo.insert(ctr, (pkt.srrt, pkt.seq));
            }
        } else {
            let stored = cells[ctr as usize] as i64;
            crossed = match program.crossing {
                // Re-delivering a client fan-out is safe and is how
                // lost crossing branches recover.
                RouteTarget::Clients => {
                    stored > 0
                        && if program.clear == ClearPolicy::Lazy {
                            stored % th == 0
                        } else {
                            stored == th
                        }
                }
                // A turnaround must only re-fire for the packet
                // that originally crossed, or a bystander's
                // retransmission would receive a grant.
                RouteTarget::Source => {
                    app.crossing_memo.get(&ctr) == Some(&(pkt.srrt, pkt.seq))
                }
                // Server-directed streams re-forward below anyway.
                RouteTarget::Server => false,
            };
            if crossed {
                stats.recrossings += 1;
            }
        }
    }

    // Map ops: add (fresh only) fused with read-back.
    for i in 0..SLOT_COUNT {
        if !pkt.slot_enabled(i) {
            continue;
        }
        let Some(c) = data_cell(&app.cfg, pkt.slots[i].key) else {
            stats.misaddressed_slots += 1;
            continue;
        };
        let c = c as usize;
        if fresh && program.add_to {
            // Saturation poisons the register: MAX/MIN are absorbing, so a
            // later negative addend cannot mask an earlier overflow from
            // the endpoints that must trigger the correction protocol.
            if poisoned(cells[c]) {
                pkt.flags.set_of(true);
                stats.saturations += 1;
            } else {
                let wide = cells[c] as i64 + pkt.slots[i].value as i64;
                if wide > i32::MAX as i64 || wide < i32::MIN as i64 {
                    cells[c] = if wide > 0 { i32::MAX } else { i32::MIN };
                    pkt.flags.set_of(true);
                    stats.saturations += 1;
                } else {
                    cells[c] = wide as i32;
                }
            }
        }
        if program.get_to_server {
            pkt.slots[i].value = cells[c];
            if poisoned(cells[c]) {
                pkt.flags.set_of(true);
            }
        }
    }

    // Shadow: the fresh crossing of round t wipes the mirror half that
    // round t+1 will use. Duplicates must never wipe again - the next round
    // may already be accumulating there.
    if crossed && fresh && program.clear == ClearPolicy::Shadow {
        if let AppMode::ElidedStream(pool) = app.cfg.mode {
            for i in 0..SLOT_COUNT {
                if !pkt.slot_enabled(i) {
                    continue;
                }
                if let Some(c) = pool.data_cell(pkt.slots[i].key) {
                    cells[pool.mirror_data(c) as usize] = 0;
                }
            }
            if let Some(ctr) = pool.counter_cell(pkt.counter_index) {
                let m = pool.mirror_counter(ctr);
                cells[m as usize] = 0;
                app.crossing_memo.remove(&m);
            }
            stats.mirror_wipes += 1;
        }
    }

    // Egress.
    if counter.is_some() {
        if crossed {
            if fresh {
                stats.crossings += 1;
            }
            pkt.flags.set_cnf(true);
            match program.crossing {
                RouteTarget::Server => vec![Emit { pkt, dst, elided }],
                RouteTarget::Source => {
                    stats.turnarounds += 1;
                    if take_ecn_latch(&app.cfg, cells, stats) {
                        pkt.flags.set_ecn(true);
                    }
                    vec![Emit {
                        pkt,
                        dst: src,
                        elided,
                    }]
                }
                RouteTarget::Clients => {
                    if take_ecn_latch(&app.cfg, cells, stats) {
                        pkt.flags.set_ecn(true);
                    }
                    if fresh {
                        pkt.flags.set_mcast(true);
                        let copies: Vec<Emit> = app
                            .cfg
                            .fanout
                            .iter()
                            .map(|&c| Emit {
                                pkt: pkt.clone(),
                                dst: c,
                                elided,
                            })
                            .collect();
                        stats.fanout_copies += copies.len() as u64;
                        copies
                    } else {
                        // Re-fire only toward the retransmitting client: it
                        // is the one that missed the result. Bystanders must
                        // never see a stale replay - under lazy clearing the
                        // counter index repeats every round, and a replay
                        // could masquerade as the next round's crossing.
                        stats.turnarounds += 1;
                        vec![Emit {
                            pkt,
                            dst: src,
                            elided,
                        }]
                    }
                }
            }
        } else if program.sub_threshold_to_server {
            vec![Emit { pkt, dst, elided }]
        } else {
            stats.absorbed += 1;
            Vec::new()
        }
    } else {
        match program.plain_route {
            RouteTarget::Source => {
                stats.turnarounds += 1;
                if take_ecn_latch(&app.cfg, cells, stats) {
                    pkt.flags.set_ecn(true);
                }
                vec![Emit {
                    pkt,
                    dst: src,
                    elided,
                }]
            }
            _ => vec![Emit { pkt, dst, elided }],
        }
    }
}

fn process_from_server(
    app: &mut AppState,
    cells: &mut [i32],
    stats: &mut SwitchStats,
    mut pkt: Packet,
    dst: NodeId,
    elided: bool,
    fresh: bool,
) -> Vec<Emit> {
    let program = app.cfg.program.clone();

    if pkt.flags.is_clr() {
        // Clear packets: execute once, fan out every time so every client
        // learns the round completed even when the first fan-out is lost.
        if fresh {
            exec_clear(app, cells, stats, &pkt);
        }
        if take_ecn_latch(&app.cfg, cells, stats) {
            pkt.flags.set_ecn(true);
        }
        pkt.flags.set_mcast(true);
        let copies: Vec<Emit> = app
            .cfg
            .fanout
            .iter()
            .map(|&c| Emit {
                pkt: pkt.clone(),
                dst: c,
                elided,
            })
            .collect();
        stats.fanout_copies += copies.len() as u64;
        return copies;
    }

    // Reply-stream read: fill slots from registers (idempotent, duplicates
    // included) so reply packets can carry switch-resident values.
    if program.get_from_server {
        for i in 0..SLOT_COUNT {
            if !pkt.slot_enabled(i) {
                continue;
            }
            match data_cell(&app.cfg, pkt.slots[i].key) {
                Some(c) => {
                    pkt.slots[i].value = cells[c as usize];
                    if poisoned(pkt.slots[i].value) {
                        pkt.flags.set_of(true);
                    }
                }
                None => stats.misaddressed_slots += 1,
            }
        }
    }
    if take_ecn_latch(&app.cfg, cells, stats) {
        pkt.flags.set_ecn(true);
    }
    vec![Emit { pkt, dst, elided }]
}
