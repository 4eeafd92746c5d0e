//! Deterministic, desk-scale emulation of an in-network computation (INC)
//! stack. Programmable switches keep signed 32-bit registers; host agents
//! stream key-value packets through them so that aggregation, counting,
//! caching, and forwarding decisions happen on-path instead of at the server.
//!
//! The crate is organized bottom-up:
//!
//! * [`wire`] - fixed binary packet layout shared by every component
//! * [`netfilter`] - per-application configuration: which message fields bind
//!   to which in-network primitives, and how the switch program is derived
//! * [`switch`] - the register-machine pipeline a switch applies per packet
//! * [`client_agent`] - quantization, windowed flows, congestion control,
//!   and stream construction on the caller side
//! * [`server_agent`] - address mapping, cache policy, software fallback,
//!   and clear-policy orchestration on the callee side
//! * [`controller`] - registration, memory reservation, timeout polling
//! * [`rpc`] - the application-facing call/serve facade and value model
//! * [`netsim`] - seeded discrete-event network: links, queues, loss, ECN
//! * [`stack`] - glue that deploys agents and switches onto a topology and
//!   runs whole calls end to end
//!
//! Everything is single-threaded and seeded: a (topology, workload, seed)
//! triple fully determines execution. No wall-clock time is consulted
//! anywhere; time is simulated integer nanoseconds.
//!
//! The crate is `no_std`-compatible (with `alloc`); the `std` feature (on by
//! default) only adds `std::error::Error` impls and is required by the test
//! suite.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod client_agent;
pub mod controller;
pub mod netfilter;
pub mod netsim;
pub mod rpc;
pub mod server_agent;
pub mod stack;
pub mod switch;
pub mod tracecheck;
pub mod wire;

/// Simulated time in integer nanoseconds since simulation start.
pub type SimTime = u64;

/// Index of a node (host or switch) in a deployed topology.
pub type NodeId = u16;

pub const NANOS_PER_MICRO: u64 = 1_000;
pub const NANOS_PER_MILLI: u64 = 1_000_000;
pub const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Splitmix64 step, used to derive independent RNG seeds from a master seed
/// and a domain tag so that adding an RNG consumer never perturbs the draws
/// seen by existing consumers.
pub fn derive_seed(master: u64, domain: u64) -> u64 {
    let mut z = master ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
