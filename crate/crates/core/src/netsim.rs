//! Seeded discrete-event network: directed links with serialization delay,
//! propagation delay, bounded FIFO queues, tail drop, per-traversal loss,
//! and queue-depth CE marking.
//!
//! The network is a passive transport. Node behavior (hosts, switches)
//! lives above it: callers push frames with [`Network::send_toward`] and
//! drain deliveries with [`Network::next_arrival_before`], re-sending at
//! intermediate nodes. Routing is a static next-hop table supplied at
//! construction, so a `(topology, workload, seed)` triple fully determines
//! every queue length, drop, and delivery time.
//!
//! Determinism: every link owns a counter-based RNG seeded from
//! `derive_seed(master, link index)`, and loss draws happen in departure
//! order on that link - adding traffic to one link never perturbs the draws
//! another link sees. Heap ties break on a monotone tick.

use alloc::collections::{BTreeMap, BinaryHeap, VecDeque};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::{derive_seed, NodeId, SimTime, NANOS_PER_SEC};

/// A block of bytes in flight between endpoints. `src`/`dst` are the
/// original endpoints, not the current hop; `ce` is the congestion mark
/// accumulated in queues along the path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: NodeId,
    pub dst: NodeId,
    pub bytes: Vec<u8>,
    pub ce: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkCfg {
    pub from: NodeId,
    pub to: NodeId,
    /// Propagation delay, nanoseconds.
    pub delay: SimTime,
    /// Serialization rate, bits per second.
    pub rate_bps: u64,
    /// Maximum frames queued (including the one serializing). Next frame is
    /// tail-dropped.
    pub queue_cap: usize,
    /// Per-traversal loss probability in [0, 1].
    pub loss: f64,
    /// Mark CE when the queue holds more than this many frames after a
    /// push. Only meaningful when `mark_ecn` is set (links into
    /// computation-capable switches).
    pub ecn_threshold: usize,
    pub mark_ecn: bool,
    /// Stress knob: probability that a departing frame is held for extra
    /// jitter, letting later frames overtake it. Zero (the default)
    /// preserves strict FIFO delivery.
    pub reorder: f64,
    /// Maximum extra delay, nanoseconds, for a jittered frame.
    pub reorder_span: SimTime,
}

impl LinkCfg {
    /// A lossless FIFO link; fields beyond the basics take their defaults.
    pub fn basic(from: NodeId, to: NodeId, delay: SimTime, rate_bps: u64) -> Self {
        LinkCfg {
            from,
            to,
            delay,
            rate_bps,
            queue_cap: 64,
            loss: 0.0,
            ecn_threshold: 32,
            mark_ecn: false,
            reorder: 0.0,
            reorder_span: 0,
        }
    }

    pub fn serialization_time(&self, len: usize) -> SimTime {
        (len as u64)
            .saturating_mul(8)
            .saturating_mul(NANOS_PER_SEC)
            / self.rate_bps.max(1)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub enqueued: u64,
    pub delivered: u64,
    pub lost: u64,
    pub tail_dropped: u64,
    pub ce_marked: u64,
    pub bytes_sent: u64,
    /// Largest queue depth observed after a push.
    pub peak_queue: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteError {
    pub at: NodeId,
    pub dst: NodeId,
}

impl fmt::Display for RouteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no route from node {} toward node {}", self.at, self.dst)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RouteError {}

/// A frame delivered to its next node.
#[derive(Debug, Clone)]
pub struct Arrival {
    pub time: SimTime,
    pub node: NodeId,
    pub frame: Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogKind {
    Enqueue,
    Depart,
    Deliver,
    Lost,
    TailDrop,
    CeMark,
}

/// Compact event-log entry for determinism checks and debugging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub time: SimTime,
    pub kind: LogKind,
    pub link: u16,
    pub len: u32,
    pub gaid: u32,
}

struct Link {
    cfg: LinkCfg,
    queue: VecDeque<Frame>,
    /// A departure event is pending for the queue head.
    draining: bool,
    rng: ChaCha12Rng,
    stats: LinkStats,
}

enum EvKind {
    Departure { link: u16 },
    Arrival { link: u16, frame: Frame },
}

struct Ev {
    time: SimTime,
    tick: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.tick == other.tick
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        (other.time, other.tick).cmp(&(self.time, self.tick))
    }
}

pub struct Network {
    links: Vec<Link>,
    routes: BTreeMap<(NodeId, NodeId), u16>,
    heap: BinaryHeap<Ev>,
    tick: u64,
    /// 0 = off, 1 = deliveries/drops, 2 = + enqueues/departures.
    pub log_level: u8,
    log: Vec<LogEntry>,
}

impl Network {
    pub fn new(
        master_seed: u64,
        links: Vec<LinkCfg>,
        routes: BTreeMap<(NodeId, NodeId), u16>,
    ) -> Self {
        let links = links
            .into_iter()
            .enumerate()
            .map(|(i, cfg)| Link {
                cfg,
                queue: VecDeque::new(),
                draining: false,
                rng: ChaCha12Rng::seed_from_u64(derive_seed(master_seed, 0x11f5 ^ i as u64)),
                stats: LinkStats::default(),
            })
            .collect();
        Network {
            links,
            routes,
            heap: BinaryHeap::new(),
            tick: 0,
            log_level: 0,
            log: Vec::new(),
        }
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn link_cfg(&self, i: u16) -> &LinkCfg {
        &self.links[i as usize].cfg
    }

    pub fn link_stats(&self, i: u16) -> &LinkStats {
        &self.links[i as usize].stats
    }

    pub fn total<F: Fn(&LinkStats) -> u64>(&self, f: F) -> u64 {
        self.links.iter().map(|l| f(&l.stats)).sum()
    }

    pub fn take_log(&mut self) -> Vec<LogEntry> {
        core::mem::take(&mut self.log)
    }

    fn log(&mut self, time: SimTime, kind: LogKind, link: u16, frame: &Frame) {
        let min_level = match kind {
            LogKind::Deliver | LogKind::Lost | LogKind::TailDrop | LogKind::CeMark => 1,
            LogKind::Enqueue | LogKind::Depart => 2,
        };
        if self.log_level >= min_level {
            self.log.push(LogEntry {
                time,
                kind,
                link,
                len: frame.bytes.len() as u32,
                gaid: crate::wire::peek_gaid(&frame.bytes).unwrap_or(0),
            });
        }
    }

    fn push_ev(&mut self, time: SimTime, kind: EvKind) {
        self.tick += 1;
        let tick = self.tick;
        self.heap.push(Ev { time, tick, kind });
    }

    /// Enqueue a frame at `at` on the next-hop link toward `frame.dst`.
    pub fn send_toward(
        &mut self,
        now: SimTime,
        at: NodeId,
        mut frame: Frame,
    ) -> Result<(), RouteError> {
        let li = *self
            .routes
            .get(&(at, frame.dst))
            .ok_or(RouteError { at, dst: frame.dst })?;
        let link = &mut self.links[li as usize];
        if link.queue.len() >= link.cfg.queue_cap {
            link.stats.tail_dropped += 1;
            self.log(now, LogKind::TailDrop, li, &frame);
            return Ok(());
        }
        link.stats.enqueued += 1;
        link.queue.push_back(frame.clone());
        let depth = link.queue.len();
        link.stats.peak_queue = link.stats.peak_queue.max(depth);
        let mark = link.cfg.mark_ecn && depth > link.cfg.ecn_threshold;
        if mark {
            // Mark the frame just pushed (the queue tail).
            link.queue.back_mut().expect("just pushed").ce = true;
            link.stats.ce_marked += 1;
            frame.ce = true;
            self.log(now, LogKind::CeMark, li, &frame);
        }
        self.log(now, LogKind::Enqueue, li, &frame);
        if !self.links[li as usize].draining {
            self.links[li as usize].draining = true;
            let finish =
                now + self.links[li as usize].cfg.serialization_time(frame.bytes.len());
            self.push_ev(finish, EvKind::Departure { link: li });
        }
        Ok(())
    }

    /// Time of the next internal event, if any.
    pub fn peek_next_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.time)
    }

    /// Advances internal transmissions and returns the next frame delivered
    /// at or before `limit`, or None once no such delivery can exist.
    pub fn next_arrival_before(&mut self, limit: SimTime) -> Option<Arrival> {
        while let Some(ev) = self.heap.peek() {
            if ev.time > limit {
                return None;
            }
            let Ev { time, kind, .. } = self.heap.pop().expect("peeked");
            match kind {
                EvKind::Departure { link } => self.handle_departure(time, link),
                EvKind::Arrival { link, frame } => {
                    self.links[link as usize].stats.delivered += 1;
                    self.log(time, LogKind::Deliver, link, &frame);
                    let node = self.links[link as usize].cfg.to;
                    return Some(Arrival { time, node, frame });
                }
            }
        }
        None
    }

    fn handle_departure(&mut self, time: SimTime, li: u16) {
        let link = &mut self.links[li as usize];
        let frame = link.queue.pop_front().expect("departure with empty queue");
        link.stats.bytes_sent += frame.bytes.len() as u64;
        let lost = link.cfg.loss > 0.0 && link.rng.gen::<f64>() < link.cfg.loss;
        let mut delay = link.cfg.delay;
        if link.cfg.reorder > 0.0 && link.rng.gen::<f64>() < link.cfg.reorder {
            delay += link.rng.gen_range(1..=link.cfg.reorder_span.max(1));
        }
        let next_len = link.queue.front().map(|f| f.bytes.len());
        if lost {
            link.stats.lost += 1;
            self.log(time, LogKind::Lost, li, &frame);
        } else {
            self.log(time, LogKind::Depart, li, &frame);
            self.push_ev(time + delay, EvKind::Arrival { link: li, frame });
        }
        match next_len {
            Some(len) => {
                let finish = time + self.links[li as usize].cfg.serialization_time(len);
                self.push_ev(finish, EvKind::Departure { link: li });
            }
            None => self.links[li as usize].draining = false,
        }
    }
}

/// Convenience builder: bidirectional link pair with identical parameters.
pub fn duplex(cfg: LinkCfg) -> [LinkCfg; 2] {
    let back = LinkCfg {
        from: cfg.to,
        to: cfg.from,
        ..cfg.clone()
    };
    [cfg, back]
}

/// Static shortest-path next-hop table over the given links (hop count,
/// ties broken by lower node id for determinism).
pub fn shortest_path_routes(
    node_count: NodeId,
    links: &[LinkCfg],
) -> BTreeMap<(NodeId, NodeId), u16> {
    let mut adj: BTreeMap<NodeId, Vec<(NodeId, u16)>> = BTreeMap::new();
    for (i, l) in links.iter().enumerate() {
        adj.entry(l.from).or_default().push((l.to, i as u16));
    }
    for neighbors in adj.values_mut() {
        neighbors.sort();
    }
    let mut routes = BTreeMap::new();
    for dst in 0..node_count {
        // BFS backwards is awkward on a digraph; BFS forward from every
        // source instead (node counts are tiny).
        for src in 0..node_count {
            if src == dst {
                continue;
            }
            // BFS from src until dst, remembering the first hop.
            let mut first_hop: BTreeMap<NodeId, u16> = BTreeMap::new();
            let mut q = VecDeque::new();
            q.push_back(src);
            let mut seen = alloc::collections::BTreeSet::new();
            seen.insert(src);
            'bfs: while let Some(n) = q.pop_front() {
                if let Some(neigh) = adj.get(&n) {
                    for &(m, li) in neigh {
                        if seen.insert(m) {
                            let hop = if n == src {
                                li
                            } else {
                                first_hop[&n]
                            };
                            first_hop.insert(m, hop);
                            if m == dst {
                                routes.insert((src, dst), hop);
                                break 'bfs;
                            }
                            q.push_back(m);
                        }
                    }
                }
            }
        }
    }
    routes
}
