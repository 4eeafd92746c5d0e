//! Control plane: application registration, switch register-file
//! reservations, flow-slot allocation, and the periodic idle-application
//! poll that reclaims switch memory in two stages.
//!
//! The controller talks to switches over a reliable in-process channel (the
//! caller hands it mutable access at call time), so control actions are
//! modeled as instantaneous relative to data-plane traffic.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::netfilter::{
    pipeline_config, validate, ClearPolicy, NetFilter, SchemaMismatch, ServiceSchema,
    SwitchProgram,
};
use crate::switch::{
    AppMode, InstallError, PoolCfg, SwitchAppConfig, SwitchState, FIRST_GRANTABLE_CELL,
};
use crate::{NodeId, SimTime, NANOS_PER_MILLI, NANOS_PER_SEC};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControllerCfg {
    /// How often the harness is expected to call [`Controller::poll`].
    pub poll_period: SimTime,
    /// Idle time after which an application's switch state is drained to its
    /// server and its admission removed.
    pub level1_idle: SimTime,
    /// Idle time after which the drained state itself is delivered or
    /// deleted at the server.
    pub level2_idle: SimTime,
    /// Flow-slot budget; slot ids are allocated monotonically and never
    /// reused, so this caps the total flows over a run.
    pub max_flows: u32,
}

impl Default for ControllerCfg {
    fn default() -> Self {
        ControllerCfg {
            poll_period: 250 * NANOS_PER_MILLI,
            level1_idle: NANOS_PER_SEC,
            level2_idle: 60 * NANOS_PER_SEC,
            max_flows: 0xFFFF,
        }
    }
}

// ---------------------------------------------------------------------------
// Registration requests and grants
// ---------------------------------------------------------------------------

/// How an application wants its reservation laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeRequest {
    /// Consecutive-key streams folded into a cell pool; `chunk_capacity` is
    /// the number of in-flight chunks per half (0 means "use `w_max`").
    Stream { chunk_capacity: u32 },
    /// Server-granted key cells plus a dedicated counter region.
    KeyValue { data_cells: u32, counter_cells: u32 },
}

#[derive(Debug, Clone)]
pub struct RegisterRequest {
    pub nf: NetFilter,
    /// Validated against the filter when given; registration fails on any
    /// mismatch rather than deploying a filter the schema cannot satisfy.
    pub schema: Option<ServiceSchema>,
    pub server: NodeId,
    pub clients: Vec<NodeId>,
    /// The computation-capable switch to deploy on; `None` runs the
    /// application entirely in software.
    pub switch: Option<NodeId>,
    pub mode: ModeRequest,
    pub w_max: u32,
    /// Crossing fan-out targets; defaults to all registered clients.
    pub fanout: Option<Vec<NodeId>>,
}

/// The key-value layout inside a reservation, handed to the server agent
/// which sub-allocates data cells to logical addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvRegion {
    pub counter_base: u32,
    pub counter_len: u32,
    pub data_base: u32,
    pub data_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub switch: NodeId,
    pub cell_base: u32,
    pub cell_len: u32,
    pub pool: Option<PoolCfg>,
    pub kv: Option<KvRegion>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppGrant {
    pub gaid: u32,
    pub program: SwitchProgram,
    /// Flow slot for the server's own emissions (replies, clears).
    pub server_srrt: u16,
    /// `None` when no switch memory was granted: the application still runs,
    /// with every packet taking the software path.
    pub reservation: Option<Reservation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegisterError {
    DuplicateAppName,
    Schema(Vec<SchemaMismatch>),
    Install(InstallError),
    UnknownSwitch(NodeId),
    UnknownApp(u32),
    NotDormant(u32),
}

impl fmt::Display for RegisterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegisterError::DuplicateAppName => write!(f, "application name already registered"),
            RegisterError::Schema(ms) => write!(f, "filter/schema mismatches: {}", ms.len()),
            RegisterError::Install(e) => write!(f, "switch install failed: {e}"),
            RegisterError::UnknownSwitch(n) => write!(f, "no such switch node: {n}"),
            RegisterError::UnknownApp(g) => write!(f, "no such application: {g}"),
            RegisterError::NotDormant(g) => write!(f, "application {g} is not dormant"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RegisterError {}

// ---------------------------------------------------------------------------
// Timeout notifications
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimeoutEvent {
    /// The application idled past the first threshold: its nonzero register
    /// values were drained (cell, value) and its switch admission removed.
    /// The server agent must absorb the values into its shadow store and
    /// forget any cell bindings.
    Level1 {
        gaid: u32,
        server: NodeId,
        drained: Vec<(u32, i32)>,
    },
    /// The application idled past the second threshold: the server agent
    /// should deliver the saved state to a surviving stub or delete it.
    Level2 { gaid: u32, server: NodeId },
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct RegEntry {
    name: String,
    server: NodeId,
    clients: Vec<NodeId>,
    fanout: Vec<NodeId>,
    program: SwitchProgram,
    mode: ModeRequest,
    w_max: u32,
    requested_switch: Option<NodeId>,
    reservation: Option<Reservation>,
    server_srrt: u16,
    /// Wall-clock floor for idleness: registration or resume time.
    active_floor: SimTime,
    /// Set when level-1 fires; holds the instant level-2 becomes due.
    level2_due: Option<SimTime>,
    /// Level-2 already delivered; the entry is retained for name uniqueness
    /// and the registry dump only.
    retired: bool,
}

/// One row of the registry dump exposed to the harness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryRow {
    pub gaid: u32,
    pub name: String,
    pub server: NodeId,
    pub switch: Option<NodeId>,
    pub cell_base: u32,
    pub cell_len: u32,
    pub dormant: bool,
}

pub struct Controller {
    cfg: ControllerCfg,
    next_gaid: u32,
    next_srrt: u32,
    regs: BTreeMap<u32, RegEntry>,
    names: BTreeSet<String>,
    /// Next never-granted cell, per switch.
    cursors: BTreeMap<NodeId, u32>,
    /// Ranges released by level-1 reclamation, reusable first-fit.
    free: BTreeMap<NodeId, Vec<(u32, u32)>>,
}

impl Controller {
    pub fn new(cfg: ControllerCfg) -> Self {
        Controller {
            cfg,
            next_gaid: 1,
            next_srrt: 1,
            regs: BTreeMap::new(),
            names: BTreeSet::new(),
            cursors: BTreeMap::new(),
            free: BTreeMap::new(),
        }
    }

    pub fn cfg(&self) -> &ControllerCfg {
        &self.cfg
    }

    /// Registers an application: assigns a fresh gaid, validates the filter
    /// against the schema when one is given, reserves switch memory
    /// first-come-first-served, and installs the switch program. A request
    /// that does not fit still registers — it just runs without a
    /// reservation, taking the software path.
    pub fn register_app(
        &mut self,
        now: SimTime,
        req: RegisterRequest,
        switches: &mut BTreeMap<NodeId, SwitchState>,
    ) -> Result<AppGrant, RegisterError> {
        if self.names.contains(&req.nf.app_name) {
            return Err(RegisterError::DuplicateAppName);
        }
        if let Some(schema) = &req.schema {
            let mismatches = validate(&req.nf, schema);
            if !mismatches.is_empty() {
                return Err(RegisterError::Schema(mismatches));
            }
        }
        let program = pipeline_config(&req.nf);
        let gaid = self.next_gaid;
        let server_srrt = self.take_srrt();
        let fanout = req.fanout.clone().unwrap_or_else(|| req.clients.clone());

        let mut reservation = None;
        if let Some(sw) = req.switch {
            let switch = switches
                .get_mut(&sw)
                .ok_or(RegisterError::UnknownSwitch(sw))?;
            reservation = self.try_reserve(
                gaid,
                sw,
                switch,
                &program,
                req.w_max,
                req.mode,
                req.server,
                &fanout,
            )?;
        }

        self.next_gaid += 1;
        self.names.insert(req.nf.app_name.clone());
        self.regs.insert(
            gaid,
            RegEntry {
                name: req.nf.app_name,
                server: req.server,
                clients: req.clients,
                fanout,
                program: program.clone(),
                mode: req.mode,
                w_max: req.w_max,
                requested_switch: req.switch,
                reservation: reservation.clone(),
                server_srrt,
                active_floor: now,
                level2_due: None,
                retired: false,
            },
        );
        Ok(AppGrant {
            gaid,
            program,
            server_srrt,
            reservation,
        })
    }

    /// Allocates `n` flow slots, monotonically and never reused. Exhausted
    /// budget yields slot 0, the untracked sentinel: such flows still work,
    /// entirely in software.
    pub fn allocate_flows(&mut self, n: u32) -> Vec<u16> {
        (0..n).map(|_| self.take_srrt()).collect()
    }

    fn take_srrt(&mut self) -> u16 {
        if self.next_srrt > self.cfg.max_flows || self.next_srrt > 0xFFFF {
            return 0;
        }
        let s = self.next_srrt as u16;
        self.next_srrt += 1;
        s
    }

    /// The periodic idle check. Emits at most one level-1 and one level-2
    /// notification per application over its dormancy; also sweeps idle flow
    /// trackers so reclaimed slots stop holding switch memory.
    pub fn poll(
        &mut self,
        now: SimTime,
        switches: &mut BTreeMap<NodeId, SwitchState>,
    ) -> Vec<TimeoutEvent> {
        let mut events = Vec::new();
        for (&gaid, entry) in self.regs.iter_mut() {
            if entry.retired {
                continue;
            }
            if let Some(due) = entry.level2_due {
                if now >= due {
                    entry.level2_due = None;
                    entry.retired = true;
                    events.push(TimeoutEvent::Level2 {
                        gaid,
                        server: entry.server,
                    });
                }
                continue;
            }
            let Some(res) = &entry.reservation else {
                continue;
            };
            let Some(switch) = switches.get_mut(&res.switch) else {
                continue;
            };
            let last = switch
                .app_last_activity(gaid)
                .unwrap_or(0)
                .max(entry.active_floor);
            if now.saturating_sub(last) < self.cfg.level1_idle {
                continue;
            }
            // Level 1: drain nonzero registers, free the reservation.
            let mut drained = Vec::new();
            for c in res.cell_base..res.cell_base + res.cell_len {
                let v = switch.cell(c);
                if v != 0 {
                    drained.push((c, v));
                    switch.write_cell(c, 0);
                }
            }
            switch.remove_app(gaid);
            self.free
                .entry(res.switch)
                .or_default()
                .push((res.cell_base, res.cell_len));
            entry.reservation = None;
            entry.level2_due = Some(last + self.cfg.level2_idle);
            events.push(TimeoutEvent::Level1 {
                gaid,
                server: entry.server,
                drained,
            });
        }
        for switch in switches.values_mut() {
            switch.sweep_trackers(now, self.cfg.level1_idle);
        }
        events
    }

    /// Re-installs a dormant application (level-1 fired, level-2 not yet):
    /// a fresh reservation is laid out and the switch program reinstalled.
    /// Key-value cell bindings start empty — the server agent re-grants hot
    /// keys from its shadow store as traffic resumes.
    pub fn resume_app(
        &mut self,
        gaid: u32,
        now: SimTime,
        switches: &mut BTreeMap<NodeId, SwitchState>,
    ) -> Result<AppGrant, RegisterError> {
        let entry = self.regs.get(&gaid).ok_or(RegisterError::UnknownApp(gaid))?;
        if entry.level2_due.is_none() || entry.retired {
            return Err(RegisterError::NotDormant(gaid));
        }
        let sw = entry
            .requested_switch
            .ok_or(RegisterError::NotDormant(gaid))?;
        let switch = switches
            .get_mut(&sw)
            .ok_or(RegisterError::UnknownSwitch(sw))?;
        let (program, w_max, mode, server, fanout, server_srrt) = {
            let e = &self.regs[&gaid];
            (
                e.program.clone(),
                e.w_max,
                e.mode,
                e.server,
                e.fanout.clone(),
                e.server_srrt,
            )
        };
        let reservation =
            self.try_reserve(gaid, sw, switch, &program, w_max, mode, server, &fanout)?;
        let entry = self.regs.get_mut(&gaid).expect("checked above");
        entry.reservation = reservation.clone();
        entry.level2_due = None;
        entry.active_floor = now;
        Ok(AppGrant {
            gaid,
            program,
            server_srrt,
            reservation,
        })
    }

    pub fn registry_dump(&self) -> Vec<RegistryRow> {
        self.regs
            .iter()
            .map(|(&gaid, e)| RegistryRow {
                gaid,
                name: e.name.clone(),
                server: e.server,
                switch: e.reservation.as_ref().map(|r| r.switch),
                cell_base: e.reservation.as_ref().map(|r| r.cell_base).unwrap_or(0),
                cell_len: e.reservation.as_ref().map(|r| r.cell_len).unwrap_or(0),
                dormant: e.level2_due.is_some() || e.retired,
            })
            .collect()
    }

    pub fn clients_of(&self, gaid: u32) -> Option<&[NodeId]> {
        self.regs.get(&gaid).map(|e| e.clients.as_slice())
    }

    // -- reservation internals ---------------------------------------------

    #[allow(clippy::too_many_arguments)]
    fn try_reserve(
        &mut self,
        gaid: u32,
        sw: NodeId,
        switch: &mut SwitchState,
        program: &SwitchProgram,
        w_max: u32,
        mode: ModeRequest,
        server: NodeId,
        fanout: &[NodeId],
    ) -> Result<Option<Reservation>, RegisterError> {
        let shadow = program.clear == ClearPolicy::Shadow;
        let (need, build): (u32, fn(u32, u32, ModeRequest, bool) -> (AppMode, Option<PoolCfg>, Option<KvRegion>)) =
            match mode {
                ModeRequest::Stream { chunk_capacity } => {
                    let p = if chunk_capacity == 0 { w_max } else { chunk_capacity };
                    let halves = if shadow { 2 } else { 1 };
                    (1 + halves * p * 32 + halves * p, build_stream)
                }
                ModeRequest::KeyValue {
                    data_cells,
                    counter_cells,
                } => (1 + counter_cells + data_cells, build_kv),
            };
        let Some(base) = self.find_space(sw, switch, need) else {
            return Ok(None);
        };
        let mode_req = match mode {
            ModeRequest::Stream { chunk_capacity } if chunk_capacity == 0 => {
                ModeRequest::Stream { chunk_capacity: w_max }
            }
            m => m,
        };
        let (app_mode, pool, kv) = build(base, need, mode_req, shadow);
        switch
            .install_app(SwitchAppConfig {
                gaid,
                program: program.clone(),
                w_max,
                mode: app_mode,
                cell_base: base,
                cell_len: need,
                server,
                fanout: fanout.to_vec(),
            })
            .map_err(RegisterError::Install)?;
        Ok(Some(Reservation {
            switch: sw,
            cell_base: base,
            cell_len: need,
            pool,
            kv,
        }))
    }

    /// First-fit over reclaimed ranges, then the never-granted cursor.
    fn find_space(&mut self, sw: NodeId, switch: &SwitchState, need: u32) -> Option<u32> {
        if let Some(list) = self.free.get_mut(&sw) {
            for i in 0..list.len() {
                let (base, len) = list[i];
                if len >= need {
                    if len == need {
                        list.remove(i);
                    } else {
                        list[i] = (base + need, len - need);
                    }
                    return Some(base);
                }
            }
        }
        let cursor = self.cursors.entry(sw).or_insert(FIRST_GRANTABLE_CELL);
        if cursor.checked_add(need)? <= switch.cell_count() {
            let base = *cursor;
            *cursor += need;
            Some(base)
        } else {
            None
        }
    }
}

fn build_stream(
    base: u32,
    _need: u32,
    mode: ModeRequest,
    shadow: bool,
) -> (AppMode, Option<PoolCfg>, Option<KvRegion>) {
    let ModeRequest::Stream { chunk_capacity } = mode else {
        unreachable!("stream builder called for stream requests only");
    };
    let halves = if shadow { 2 } else { 1 };
    let pool = PoolCfg {
        base_key: 0,
        data_base: base + 1,
        chunk_capacity,
        cnt_base: base + 1 + halves * chunk_capacity * 32,
        mirrored: shadow,
    };
    (AppMode::ElidedStream(pool), Some(pool), None)
}

fn build_kv(
    base: u32,
    _need: u32,
    mode: ModeRequest,
    _shadow: bool,
) -> (AppMode, Option<PoolCfg>, Option<KvRegion>) {
    let ModeRequest::KeyValue {
        data_cells,
        counter_cells,
    } = mode
    else {
        unreachable!("kv builder called for kv requests only");
    };
    let kv = KvRegion {
        counter_base: base + 1,
        counter_len: counter_cells,
        data_base: base + 1 + counter_cells,
        data_len: data_cells,
    };
    (AppMode::KeyValue, None, Some(kv))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netfilter::parse_netfilter;

    const SW: NodeId = 50;
    const SERVER: NodeId = 100;

    fn nf(name: &str, clear: &str) -> NetFilter {
        let text = alloc::format!(
            r#"{{
                "AppName": "{name}",
                "Precision": 8,
                "get": "NewGrad.tensor",
                "addTo": "AgtrGrad.tensor",
                "clear": "{clear}",
                "modify": "nop",
                "CntFwd": {{ "to": "ALL", "threshold": 2, "key": "ClientID" }}
            }}"#
        );
        parse_netfilter(&text).expect("test filter parses")
    }

    fn kv_nf(name: &str) -> NetFilter {
        let text = alloc::format!(
            r#"{{
                "AppName": "{name}",
                "Precision": 0,
                "get": "nop",
                "addTo": "Delta.counts",
                "clear": "nop",
                "modify": "nop",
                "CntFwd": {{ "to": "SERVER", "threshold": 0, "key": "NULL" }}
            }}"#
        );
        parse_netfilter(&text).expect("test filter parses")
    }

    fn request(nf: NetFilter, mode: ModeRequest) -> RegisterRequest {
        RegisterRequest {
            nf,
            schema: None,
            server: SERVER,
            clients: alloc::vec![1, 2],
            switch: Some(SW),
            mode,
            w_max: 16,
            fanout: None,
        }
    }

    fn world(cells: u32) -> BTreeMap<NodeId, SwitchState> {
        let mut m = BTreeMap::new();
        m.insert(SW, SwitchState::new(SW, cells));
        m
    }

    #[test]
    fn stream_reservations_are_sized_and_disjoint() {
        let mut ctl = Controller::new(ControllerCfg::default());
        let mut switches = world(FIRST_GRANTABLE_CELL + 10_000);

        let a = ctl
            .register_app(0, request(nf("a", "nop"), ModeRequest::Stream { chunk_capacity: 4 }), &mut switches)
            .unwrap();
        let ra = a.reservation.expect("granted");
        // 1 latch + 4*32 data + 4 counters.
        assert_eq!(ra.cell_len, 1 + 128 + 4);
        assert_eq!(ra.cell_base, FIRST_GRANTABLE_CELL);
        let pool = ra.pool.expect("stream pool");
        assert_eq!(pool.data_base, ra.cell_base + 1);
        assert_eq!(pool.cnt_base, ra.cell_base + 1 + 128);
        assert!(!pool.mirrored);

        // Shadow doubles both regions.
        let b = ctl
            .register_app(0, request(nf("b", "shadow"), ModeRequest::Stream { chunk_capacity: 4 }), &mut switches)
            .unwrap();
        let rb = b.reservation.expect("granted");
        assert_eq!(rb.cell_len, 1 + 256 + 8);
        assert_eq!(rb.cell_base, ra.cell_base + ra.cell_len, "FCFS packing");
        assert!(rb.pool.unwrap().mirrored);
        assert_ne!(a.gaid, b.gaid);
        assert_ne!(a.server_srrt, b.server_srrt);
    }

    #[test]
    fn kv_layout_and_budget_exhaustion() {
        let mut ctl = Controller::new(ControllerCfg::default());
        let mut switches = world(FIRST_GRANTABLE_CELL + 150);

        let a = ctl
            .register_app(
                0,
                request(kv_nf("kv"), ModeRequest::KeyValue { data_cells: 100, counter_cells: 10 }),
                &mut switches,
            )
            .unwrap();
        let r = a.reservation.expect("granted");
        assert_eq!(r.cell_len, 111);
        let kv = r.kv.expect("kv region");
        assert_eq!(kv.counter_base, r.cell_base + 1);
        assert_eq!(kv.data_base, r.cell_base + 11);
        assert_eq!(kv.data_len, 100);

        // Second app does not fit: registered, but software-only.
        let b = ctl
            .register_app(
                0,
                request(kv_nf("kv2"), ModeRequest::KeyValue { data_cells: 100, counter_cells: 10 }),
                &mut switches,
            )
            .unwrap();
        assert!(b.reservation.is_none());
        assert!(b.gaid > a.gaid);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut ctl = Controller::new(ControllerCfg::default());
        let mut switches = world(FIRST_GRANTABLE_CELL + 10_000);
        ctl.register_app(0, request(nf("dup", "nop"), ModeRequest::Stream { chunk_capacity: 2 }), &mut switches)
            .unwrap();
        let err = ctl
            .register_app(0, request(nf("dup", "nop"), ModeRequest::Stream { chunk_capacity: 2 }), &mut switches)
            .unwrap_err();
        assert_eq!(err, RegisterError::DuplicateAppName);
    }

    #[test]
    fn flow_slots_are_monotone_and_cap_to_untracked() {
        let mut ctl = Controller::new(ControllerCfg {
            max_flows: 3,
            ..ControllerCfg::default()
        });
        // Slot 1 goes to nothing yet; allocate 5 flows against a cap of 3.
        let flows = ctl.allocate_flows(5);
        assert_eq!(flows, alloc::vec![1, 2, 3, 0, 0]);
    }

    #[test]
    fn level1_drains_and_frees_then_level2_retires() {
        let cfg = ControllerCfg::default();
        let mut ctl = Controller::new(cfg);
        let mut switches = world(FIRST_GRANTABLE_CELL + 1_000);
        let grant = ctl
            .register_app(
                0,
                request(kv_nf("mon"), ModeRequest::KeyValue { data_cells: 8, counter_cells: 2 }),
                &mut switches,
            )
            .unwrap();
        let res = grant.reservation.clone().unwrap();
        let kv = res.kv.unwrap();
        switches.get_mut(&SW).unwrap().write_cell(kv.data_base + 3, 77);

        // Active within level-1: nothing fires.
        assert!(ctl.poll(cfg.level1_idle - 1, &mut switches).is_empty());

        let events = ctl.poll(cfg.level1_idle + 1, &mut switches);
        assert_eq!(
            events,
            alloc::vec![TimeoutEvent::Level1 {
                gaid: grant.gaid,
                server: SERVER,
                drained: alloc::vec![(kv.data_base + 3, 77)],
            }]
        );
        assert!(!switches[&SW].registered(grant.gaid));
        assert_eq!(switches[&SW].cell(kv.data_base + 3), 0, "drain zeroes");

        // Only once.
        assert!(ctl.poll(cfg.level1_idle + 2, &mut switches).is_empty());
        assert!(ctl.registry_dump()[0].dormant);

        // The freed range is reusable first-fit.
        let again = ctl
            .register_app(
                0,
                request(kv_nf("mon2"), ModeRequest::KeyValue { data_cells: 8, counter_cells: 2 }),
                &mut switches,
            )
            .unwrap();
        assert_eq!(again.reservation.unwrap().cell_base, res.cell_base);

        // Level 2 fires once, relative to last activity. (The second app
        // idles past level-1 by now; only the first app's events matter.)
        let events = ctl.poll(cfg.level2_idle + 1, &mut switches);
        assert!(events.contains(&TimeoutEvent::Level2 {
            gaid: grant.gaid,
            server: SERVER
        }));
        assert!(ctl.poll(cfg.level2_idle + 2, &mut switches).iter().all(
            |e| !matches!(e, TimeoutEvent::Level2 { gaid, .. } if *gaid == grant.gaid)
        ));
    }

    #[test]
    fn resume_between_levels_reinstalls() {
        let cfg = ControllerCfg::default();
        let mut ctl = Controller::new(cfg);
        let mut switches = world(FIRST_GRANTABLE_CELL + 1_000);
        let grant = ctl
            .register_app(
                0,
                request(kv_nf("mon"), ModeRequest::KeyValue { data_cells: 8, counter_cells: 2 }),
                &mut switches,
            )
            .unwrap();
        let events = ctl.poll(cfg.level1_idle + 1, &mut switches);
        assert_eq!(events.len(), 1);

        let now = cfg.level1_idle + 2;
        let regrant = ctl.resume_app(grant.gaid, now, &mut switches).unwrap();
        assert_eq!(regrant.gaid, grant.gaid);
        assert_eq!(regrant.server_srrt, grant.server_srrt);
        assert!(regrant.reservation.is_some());
        assert!(switches[&SW].registered(grant.gaid));
        assert!(!ctl.registry_dump()[0].dormant);

        // Resuming a live app is an error.
        assert_eq!(
            ctl.resume_app(grant.gaid, now, &mut switches).unwrap_err(),
            RegisterError::NotDormant(grant.gaid)
        );
        // And no stale level-2 fires later.
        assert!(ctl
            .poll(now + cfg.level1_idle - 1, &mut switches)
            .is_empty());
    }

    #[test]
    fn schema_validation_gates_registration() {
        use crate::netfilter::parse_schema;
        let schema = parse_schema(
            r#"{
                "service": "T",
                "messages": { "Other": { "x": "Int" } },
                "methods": { "M": { "request": "Other", "reply": "Other" } }
            }"#,
        )
        .expect("schema parses");
        let mut ctl = Controller::new(ControllerCfg::default());
        let mut switches = world(FIRST_GRANTABLE_CELL + 1_000);
        let mut req = request(nf("bad", "nop"), ModeRequest::Stream { chunk_capacity: 2 });
        req.schema = Some(schema);
        match ctl.register_app(0, req, &mut switches).unwrap_err() {
            RegisterError::Schema(ms) => assert!(!ms.is_empty()),
            other => panic!("expected schema failure, got {other:?}"),
        }
    }
}
