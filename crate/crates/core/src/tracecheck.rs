//! Self-verification harnesses: randomized traces with independent oracles.
//!
//! These checks are product surface (the CLI's `verify` subcommand runs
//! them) as well as the backbone of the test suite. Each harness builds its
//! own expectation from first principles - pure arithmetic over the trace -
//! and never calls into the machinery under test to produce the expected
//! side of a comparison.
//!
//! * [`run_idempotence_traces`] drives a switch with randomized duplication
//!   and bounded reordering and proves register/counter/crossing state
//!   equals the effect of applying every unique sequence exactly once.
//! * [`run_wire_roundtrips`] proves encode/decode is a bijection on random
//!   packets (decode(encode(p)) == p and re-encode is byte-identical).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::netfilter::{ClearPolicy, ModifySpec, RouteTarget, SwitchProgram};
use crate::switch::{flip_for, AppMode, PacketIn, PoolCfg, SwitchAppConfig, SwitchState};
use crate::wire::{decode_packet, encode_packet, Packet, PacketFlags, Slot, SLOT_COUNT};
use crate::{derive_seed, NodeId};

#[derive(Debug, Clone, Default)]
pub struct TraceReport {
    pub traces_run: usize,
    pub packets_processed: u64,
    pub duplicates_injected: u64,
    pub failures: Vec<String>,
}

impl TraceReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

const GAID: u32 = 77;
const SERVER: NodeId = 200;

/// One client flow in a generated trace.
struct FlowPlan {
    srrt: u16,
    src: NodeId,
    /// copies[seq] = how many times the packet for `seq` is transmitted.
    copies: Vec<u8>,
    /// Per-chunk base value; slot i of chunk c carries `value(c) + i`.
    values: Vec<i32>,
}

/// Generates a transmission schedule that respects what a real sender can
/// produce: per flow, every copy of sequence `s - w_max` is sent (and, on a
/// FIFO path, received) before the first copy of `s`; within that window,
/// copies interleave arbitrarily. Flows interleave freely with each other.
fn schedule(rng: &mut ChaCha12Rng, flows: &[FlowPlan], w_max: u32) -> Vec<(usize, u32)> {
    struct Cursor {
        next_to_activate: u32,
        pending: Vec<(u32, u8)>, // (seq, copies left)
    }
    let mut cursors: Vec<Cursor> = flows
        .iter()
        .map(|_| Cursor {
            next_to_activate: 0,
            pending: Vec::new(),
        })
        .collect();
    let mut trace = Vec::new();
    loop {
        // Activate sequences whose window slot is free: `next` may enter
        // only once `next - w_max` has drained all of its copies.
        for (f, cur) in cursors.iter_mut().enumerate() {
            while (cur.next_to_activate as usize) < flows[f].copies.len() {
                let next = cur.next_to_activate;
                if cur.pending.iter().any(|(s, _)| s + w_max <= next) {
                    break;
                }
                cur.pending.push((next, flows[f].copies[next as usize]));
                cur.next_to_activate += 1;
            }
        }
        let live: Vec<usize> = cursors
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.pending.is_empty())
            .map(|(i, _)| i)
            .collect();
        if live.is_empty() {
            break;
        }
        let f = live[rng.gen_range(0..live.len())];
        let cur = &mut cursors[f];
        let k = rng.gen_range(0..cur.pending.len());
        let (seq, left) = &mut cur.pending[k];
        let seq = *seq;
        *left -= 1;
        if *left == 0 {
            cur.pending.remove(k);
        }
        trace.push((f, seq));
    }
    trace
}

fn chunk_packet(flow: &FlowPlan, seq: u32, w_max: u32, base_key: u32) -> Packet {
    let chunk = seq; // one chunk per sequence in this harness
    let mut p = Packet {
        gaid: GAID,
        seq,
        srrt: flow.srrt,
        flip: flip_for(seq, w_max),
        flags: PacketFlags::new(),
        op_type: 0,
        bitmap: !0u32,
        counter_index: base_key + 32 * chunk,
        counter_threshold: 0,
        slots: [Slot::default(); SLOT_COUNT],
        payload: Vec::new(),
    };
    for i in 0..SLOT_COUNT {
        p.slots[i].key = p.counter_index + i as u32;
        p.slots[i].value = flow.values[chunk as usize] + i as i32;
    }
    p
}

/// Randomized duplication/reorder traces against an exactly-once oracle.
///
/// Each trace builds a fresh switch running a no-clear aggregation program
/// (threshold = number of flows, client fan-out) over an elided pool large
/// enough that no cell is reused, streams a legal schedule with duplicated
/// transmissions through it, and then checks, cell by cell:
///
/// * every data cell equals the sum over flows of that element's value,
///   applied exactly once per unique sequence;
/// * every chunk counter equals the number of distinct flows;
/// * each chunk crossed exactly once, fanning out one copy per client,
///   with late duplicates re-firing one copy to their own sender;
/// * fresh/duplicate tallies equal the schedule's unique/extra counts.
pub fn run_idempotence_traces(n: usize, master_seed: u64) -> TraceReport {
    let mut report = TraceReport::default();
    for trace_idx in 0..n {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(master_seed, trace_idx as u64));
        let w_max = [4u32, 16, 256][trace_idx % 3];
        let n_flows = rng.gen_range(1..=3usize);
        let chunks = rng.gen_range(1..=20u32);

        let flows: Vec<FlowPlan> = (0..n_flows)
            .map(|f| FlowPlan {
                srrt: 10 + f as u16,
                src: 1 + f as NodeId,
                copies: (0..chunks).map(|_| rng.gen_range(1..=3u8)).collect(),
                values: (0..chunks).map(|_| rng.gen_range(-1000..=1000)).collect(),
            })
            .collect();

        let base_key = 50_000;
        let pool = PoolCfg {
            base_key,
            data_base: 2048,
            // No reuse: every chunk gets its own pool entry.
            chunk_capacity: chunks,
            cnt_base: 1100,
            mirrored: false,
        };
        let mut sw = SwitchState::new(99, 2048 + 32 * chunks + 64);
        sw.install_app(SwitchAppConfig {
            gaid: GAID,
            program: SwitchProgram {
                add_to: true,
                get_to_server: true,
                get_from_server: true,
                clear: ClearPolicy::Nop,
                modify: ModifySpec::NOP,
                threshold: n_flows as u32,
                sub_threshold_to_server: false,
                crossing: RouteTarget::Clients,
                plain_route: RouteTarget::Server,
            },
            w_max,
            mode: AppMode::ElidedStream(pool),
            cell_base: 1099,
            cell_len: 2048 + 32 * chunks + 64 - 1099,
            server: SERVER,
            fanout: flows.iter().map(|f| f.src).collect(),
        })
        .expect("valid install");

        let trace = schedule(&mut rng, &flows, w_max);
        let total: u64 = trace.len() as u64;
        let unique: u64 = flows.iter().map(|f| f.copies.len() as u64).sum();
        report.packets_processed += total;
        report.duplicates_injected += total - unique;

        // Trace-derived forwarding oracle: chunk c crosses at the position
        // of the latest first-occurrence among flows and fans out one copy
        // per client; every copy after that position is a duplicate that
        // must re-fire a single copy back to its sender (lost-branch
        // recovery), so the chunk yields n_flows + late_dups copies.
        let mut first_pos: BTreeMap<(usize, u32), usize> = BTreeMap::new();
        for (pos, &(f, seq)) in trace.iter().enumerate() {
            first_pos.entry((f, seq)).or_insert(pos);
        }
        let crossing_pos = |c: u32| -> usize {
            (0..n_flows)
                .map(|f| first_pos[&(f, c)])
                .max()
                .expect("at least one flow")
        };
        let mut late_dups: BTreeMap<u32, u64> = BTreeMap::new();
        for (pos, &(_, seq)) in trace.iter().enumerate() {
            if pos > crossing_pos(seq) {
                *late_dups.entry(seq).or_default() += 1;
            }
        }

        let mut fanout_seen: BTreeMap<u32, u64> = BTreeMap::new();
        for (f, seq) in trace {
            let pkt = chunk_packet(&flows[f], seq, w_max, base_key);
            let emits = sw.process_packet(PacketIn {
                pkt,
                src: flows[f].src,
                dst: SERVER,
                elided: true,
                ce: false,
                now: 0,
            });
            for e in emits {
                if e.pkt.flags.is_cnf() {
                    *fanout_seen.entry(e.pkt.counter_index).or_default() += 1;
                }
            }
        }

        let mut fail = |msg: String| {
            if report.failures.len() < 20 {
                report.failures.push(format!("trace {trace_idx}: {msg}"));
            }
        };

        // Oracle: apply every unique sequence exactly once.
        for c in 0..chunks {
            for i in 0..SLOT_COUNT {
                let expect: i64 = flows
                    .iter()
                    .map(|f| (f.values[c as usize] + i as i32) as i64)
                    .sum();
                let got = sw.cell(2048 + 32 * c + i as u32) as i64;
                if got != expect {
                    fail(format!(
                        "cell for chunk {c} slot {i}: got {got}, want {expect}"
                    ));
                }
            }
            let ctr = sw.cell(1100 + c);
            if ctr != n_flows as i32 {
                fail(format!("counter of chunk {c}: got {ctr}, want {n_flows}"));
            }
            let copies = fanout_seen
                .get(&(base_key + 32 * c))
                .copied()
                .unwrap_or(0);
            let want = n_flows as u64 + late_dups.get(&c).copied().unwrap_or(0);
            if copies != want {
                fail(format!("chunk {c}: {copies} fan-out copies, want {want}"));
            }
        }
        if sw.stats.fresh != unique {
            fail(format!(
                "fresh count {} != unique sequences {unique}",
                sw.stats.fresh
            ));
        }
        if sw.stats.duplicates != total - unique {
            fail(format!(
                "duplicate count {} != injected {}",
                sw.stats.duplicates,
                total - unique
            ));
        }
        if sw.stats.crossings != chunks as u64 {
            fail(format!(
                "fresh crossings {} != chunks {chunks}",
                sw.stats.crossings
            ));
        }
        let want_recross: u64 = late_dups.values().sum();
        if sw.stats.recrossings != want_recross {
            fail(format!(
                "re-fired crossings {} != late duplicates {want_recross}",
                sw.stats.recrossings
            ));
        }
        report.traces_run += 1;
    }
    report
}

/// Encode/decode bijection on random packets, in both key modes.
///
/// For each iteration: build a random packet, encode, decode, compare
/// structurally, re-encode, compare byte-for-byte.
pub fn run_wire_roundtrips(n: usize, master_seed: u64) -> TraceReport {
    let mut report = TraceReport::default();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(master_seed, 0x3193));
    for i in 0..n {
        let elide = i % 2 == 0;
        let mut p = Packet {
            gaid: rng.gen(),
            seq: rng.gen(),
            srrt: rng.gen(),
            flip: rng.gen(),
            flags: PacketFlags::new(),
            op_type: rng.gen_range(0..=10),
            bitmap: rng.gen(),
            counter_index: rng.gen(),
            counter_threshold: rng.gen(),
            slots: [Slot::default(); SLOT_COUNT],
            payload: (0..rng.gen_range(0..200u16)).map(|_| rng.gen()).collect(),
        };
        p.flags.set_of(rng.gen());
        p.flags.set_cnf(rng.gen());
        p.flags.set_clr(rng.gen());
        p.flags.set_cross(rng.gen());
        p.flags.set_ecn(rng.gen());
        p.flags.set_sa(rng.gen());
        p.flags.set_mcast(rng.gen());
        for (k, s) in p.slots.iter_mut().enumerate() {
            s.key = if elide {
                p.counter_index.wrapping_add(k as u32)
            } else {
                rng.gen()
            };
            s.value = rng.gen();
        }
        let bytes = match encode_packet(&p, elide) {
            Ok(b) => b,
            Err(e) => {
                report.failures.push(format!("iteration {i}: encode failed: {e}"));
                continue;
            }
        };
        match decode_packet(&bytes) {
            Ok(q) if q == p => match encode_packet(&q, elide) {
                Ok(b2) if b2 == bytes => {}
                Ok(_) => report
                    .failures
                    .push(format!("iteration {i}: re-encode not byte-identical")),
                Err(e) => report
                    .failures
                    .push(format!("iteration {i}: re-encode failed: {e}")),
            },
            Ok(_) => report
                .failures
                .push(format!("iteration {i}: decode mismatch")),
            Err(e) => report
                .failures
                .push(format!("iteration {i}: decode failed: {e}")),
        }
        report.packets_processed += 1;
        if report.failures.len() >= 20 {
            break;
        }
    }
    report.traces_run = n;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_idempotence_batch_is_clean() {
        let report = run_idempotence_traces(50, 0xace_0fba5e);
        assert!(report.ok(), "failures: {:?}", report.failures);
        assert!(report.duplicates_injected > 0, "traces must contain dups");
    }

    #[test]
    fn wire_roundtrip_batch_is_clean() {
        let report = run_wire_roundtrips(2000, 0xbeef);
        assert!(report.ok(), "failures: {:?}", report.failures);
    }
}
