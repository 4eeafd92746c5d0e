//! Per-application configuration: NetFilters and service schemas.
//!
//! A NetFilter is a small JSON document that binds message fields to
//! in-network primitives. The accepted keys are exactly:
//!
//! ```text
//! {
//!   "AppName":   "DT-1",
//!   "Precision": 8,
//!   "get":       "AgtrGrad.tensor",          or "nop"
//!   "addTo":     "NewGrad.tensor",           or "nop"
//!   "clear":     "copy" | "shadow" | "lazy" | "nop",
//!   "modify":    "nop"  or {"op": "ADD", "para": 5},
//!   "CntFwd":    {"to": "ALL" | "SRC" | "SERVER" | ["host", ...],
//!                 "threshold": 2,
//!                 "key": "ClientID" | "NULL" | "LockRequest.kvs"}
//! }
//! ```
//!
//! All seven keys are required and unknown keys are rejected, so a typo in a
//! deployed filter fails loudly at parse time instead of silently running
//! with a default.
//!
//! Service schemas describe messages and methods in a declarative JSON form
//! (no IDL compiler involved):
//!
//! ```text
//! {
//!   "service":  "Training",
//!   "messages": {"NewGrad":  {"tensor": "FPArray"},
//!                "AgtrGrad": {"tensor": "FPArray"}},
//!   "methods":  {"Update": {"request": "NewGrad", "reply": "AgtrGrad"}}
//! }
//! ```
//!
//! Field types: `FPArray`, `IntArray`, `StrIntMap`, `IntIntMap`, `Int`,
//! `Opaque`. Only the first five may be bound by a NetFilter.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetFilterError {
    Json(String),
    MissingField(String),
    UnknownField(String),
    BadValue { field: String, why: String },
}

impl fmt::Display for NetFilterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetFilterError::Json(e) => write!(f, "invalid JSON: {e}"),
            NetFilterError::MissingField(k) => write!(f, "missing required key {k:?}"),
            NetFilterError::UnknownField(k) => write!(f, "unknown key {k:?}"),
            NetFilterError::BadValue { field, why } => write!(f, "bad value for {field:?}: {why}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for NetFilterError {}

fn bad(field: &str, why: impl fmt::Display) -> NetFilterError {
    NetFilterError::BadValue {
        field: field.to_string(),
        why: why.to_string(),
    }
}

/// `Message.field` reference into a service schema.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FieldPath {
    pub message: String,
    pub field: String,
}

impl FieldPath {
    pub fn parse(s: &str) -> Option<FieldPath> {
        let (m, f) = s.split_once('.')?;
        if m.is_empty() || f.is_empty() || f.contains('.') {
            return None;
        }
        Some(FieldPath {
            message: m.to_string(),
            field: f.to_string(),
        })
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.message, self.field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Nop,
    Field(FieldPath),
}

impl Binding {
    pub fn field(&self) -> Option<&FieldPath> {
        match self {
            Binding::Nop => None,
            Binding::Field(p) => Some(p),
        }
    }
    pub fn is_bound(&self) -> bool {
        self.field().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClearPolicy {
    /// Stream carries values to the server; the server backs them up and its
    /// reply clears the registers. Survives any single loss, costs a server
    /// round trip.
    Copy,
    /// Two register segments alternate by round parity; the crossing packet
    /// of round t wipes the mirror cells for round t+1. Doubles memory.
    Shadow,
    /// Registers accumulate forever; receivers subtract the previous
    /// snapshot. No clear traffic until an overflow forces a reset.
    Lazy,
    /// Never clear.
    Nop,
}

impl ClearPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ClearPolicy::Copy => "copy",
            ClearPolicy::Shadow => "shadow",
            ClearPolicy::Lazy => "lazy",
            ClearPolicy::Nop => "nop",
        }
    }
}

/// Table of stream-modify operators. `ADD` saturates and reports overflow;
/// shifts use the low five bits of the operand; `BNOT` ignores the operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamOp {
    Nop,
    Max,
    Min,
    Add,
    Assign,
    ShiftL,
    ShiftR,
    BAnd,
    BOr,
    BNot,
    BXor,
}

impl StreamOp {
    pub fn apply(self, v: i32, para: i32) -> (i32, bool) {
        match self {
            StreamOp::Nop => (v, false),
            StreamOp::Max => (v.max(para), false),
            StreamOp::Min => (v.min(para), false),
            StreamOp::Add => match v.checked_add(para) {
                Some(x) => (x, false),
                None => (v.saturating_add(para), true),
            },
            StreamOp::Assign => (para, false),
            StreamOp::ShiftL => (v.wrapping_shl(para as u32 & 31), false),
            StreamOp::ShiftR => (v.wrapping_shr(para as u32 & 31), false),
            StreamOp::BAnd => (v & para, false),
            StreamOp::BOr => (v | para, false),
            StreamOp::BNot => (!v, false),
            StreamOp::BXor => (v ^ para, false),
        }
    }

    pub fn to_wire(self) -> u8 {
        match self {
            StreamOp::Nop => 0,
            StreamOp::Max => 1,
            StreamOp::Min => 2,
            StreamOp::Add => 3,
            StreamOp::Assign => 4,
            StreamOp::ShiftL => 5,
            StreamOp::ShiftR => 6,
            StreamOp::BAnd => 7,
            StreamOp::BOr => 8,
            StreamOp::BNot => 9,
            StreamOp::BXor => 10,
        }
    }

    pub fn from_wire(b: u8) -> Option<StreamOp> {
        Some(match b {
            0 => StreamOp::Nop,
            1 => StreamOp::Max,
            2 => StreamOp::Min,
            3 => StreamOp::Add,
            4 => StreamOp::Assign,
            5 => StreamOp::ShiftL,
            6 => StreamOp::ShiftR,
            7 => StreamOp::BAnd,
            8 => StreamOp::BOr,
            9 => StreamOp::BNot,
            10 => StreamOp::BXor,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            StreamOp::Nop => "NOP",
            StreamOp::Max => "MAX",
            StreamOp::Min => "MIN",
            StreamOp::Add => "ADD",
            StreamOp::Assign => "ASSIGN",
            StreamOp::ShiftL => "SHIFTL",
            StreamOp::ShiftR => "SHIFTR",
            StreamOp::BAnd => "BAND",
            StreamOp::BOr => "BOR",
            StreamOp::BNot => "BNOT",
            StreamOp::BXor => "BXOR",
        }
    }

    fn from_name(s: &str) -> Option<StreamOp> {
        Some(match s {
            "NOP" => StreamOp::Nop,
            "MAX" => StreamOp::Max,
            "MIN" => StreamOp::Min,
            "ADD" => StreamOp::Add,
            "ASSIGN" => StreamOp::Assign,
            "SHIFTL" => StreamOp::ShiftL,
            "SHIFTR" => StreamOp::ShiftR,
            "BAND" => StreamOp::BAnd,
            "BOR" => StreamOp::BOr,
            "BNOT" => StreamOp::BNot,
            "BXOR" => StreamOp::BXor,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModifySpec {
    pub op: StreamOp,
    pub para: i32,
}

impl ModifySpec {
    pub const NOP: ModifySpec = ModifySpec {
        op: StreamOp::Nop,
        para: 0,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteSpec {
    All,
    Src,
    Server,
    Endpoints(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CounterKey {
    /// No counter identity; only valid with threshold 0.
    Null,
    /// Count distinct client identities per stream chunk.
    ClientId,
    /// Counter cell comes from the named field's key mapping.
    Field(FieldPath),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CntFwd {
    pub to: RouteSpec,
    pub threshold: u32,
    pub key: CounterKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetFilter {
    pub app_name: String,
    pub precision: u32,
    pub get: Binding,
    pub add_to: Binding,
    pub clear: ClearPolicy,
    pub modify: ModifySpec,
    pub cntfwd: CntFwd,
}

fn parse_binding(field: &str, v: &Value) -> Result<Binding, NetFilterError> {
    let s = v
        .as_str()
        .ok_or_else(|| bad(field, "expected a string"))?;
    if s == "nop" {
        return Ok(Binding::Nop);
    }
    FieldPath::parse(s)
        .map(Binding::Field)
        .ok_or_else(|| bad(field, format!("{s:?} is neither \"nop\" nor \"Message.field\"")))
}

pub fn parse_netfilter(text: &str) -> Result<NetFilter, NetFilterError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| NetFilterError::Json(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| NetFilterError::Json("top level must be an object".to_string()))?;

    const KEYS: [&str; 7] = ["AppName", "Precision", "get", "addTo", "clear", "modify", "CntFwd"];
    for k in obj.keys() {
        if !KEYS.contains(&k.as_str()) {
            return Err(NetFilterError::UnknownField(k.clone()));
        }
    }
    let get_key = |k: &str| -> Result<&Value, NetFilterError> {
        obj.get(k).ok_or_else(|| NetFilterError::MissingField(k.to_string()))
    };

    let app_name = get_key("AppName")?
        .as_str()
        .ok_or_else(|| bad("AppName", "expected a string"))?
        .to_string();
    if app_name.is_empty() {
        return Err(bad("AppName", "must be non-empty"));
    }

    let precision = get_key("Precision")?
        .as_u64()
        .ok_or_else(|| bad("Precision", "expected a non-negative integer"))?;
    if precision > 15 {
        return Err(bad("Precision", "must be at most 15 (10^p must stay exact in f64)"));
    }

    let get = parse_binding("get", get_key("get")?)?;
    let add_to = parse_binding("addTo", get_key("addTo")?)?;

    let clear = match get_key("clear")?.as_str() {
        Some("copy") => ClearPolicy::Copy,
        Some("shadow") => ClearPolicy::Shadow,
        Some("lazy") => ClearPolicy::Lazy,
        Some("nop") => ClearPolicy::Nop,
        Some(other) => return Err(bad("clear", format!("{other:?} is not a clear policy"))),
        None => return Err(bad("clear", "expected a string")),
    };

    let modify = match get_key("modify")? {
        Value::String(s) if s == "nop" => ModifySpec::NOP,
        Value::Object(m) => {
            for k in m.keys() {
                if k != "op" && k != "para" {
                    return Err(bad("modify", format!("unknown key {k:?}")));
                }
            }
            let op_name = m
                .get("op")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("modify", "missing op name"))?;
            let op = StreamOp::from_name(op_name)
                .ok_or_else(|| bad("modify", format!("{op_name:?} is not an operator")))?;
            let para = match m.get("para") {
                None => 0,
                Some(p) => p
                    .as_i64()
                    .filter(|x| i32::try_from(*x).is_ok())
                    .ok_or_else(|| bad("modify", "para must fit in signed 32 bits"))?
                    as i32,
            };
            ModifySpec { op, para }
        }
        _ => return Err(bad("modify", "expected \"nop\" or {\"op\": ..., \"para\": ...}")),
    };

    let cf = get_key("CntFwd")?
        .as_object()
        .ok_or_else(|| bad("CntFwd", "expected an object"))?;
    for k in cf.keys() {
        if k != "to" && k != "threshold" && k != "key" {
            return Err(NetFilterError::UnknownField(format!("CntFwd.{k}")));
        }
    }
    let to = match cf.get("to") {
        Some(Value::String(s)) => match s.as_str() {
            "ALL" => RouteSpec::All,
            "SRC" => RouteSpec::Src,
            "SERVER" => RouteSpec::Server,
            other => return Err(bad("CntFwd.to", format!("{other:?} is not a route"))),
        },
        Some(Value::Array(a)) => {
            let mut eps = Vec::new();
            for e in a {
                match e.as_str() {
                    Some(s) if !s.is_empty() => eps.push(s.to_string()),
                    _ => return Err(bad("CntFwd.to", "endpoint list must hold non-empty strings")),
                }
            }
            if eps.is_empty() {
                return Err(bad("CntFwd.to", "endpoint list must be non-empty"));
            }
            RouteSpec::Endpoints(eps)
        }
        _ => return Err(NetFilterError::MissingField("CntFwd.to".to_string())),
    };
    let threshold = cf
        .get("threshold")
        .ok_or_else(|| NetFilterError::MissingField("CntFwd.threshold".to_string()))?
        .as_u64()
        .filter(|t| u32::try_from(*t).is_ok())
        .ok_or_else(|| bad("CntFwd.threshold", "expected an unsigned 32-bit integer"))?
        as u32;
    let key = match cf
        .get("key")
        .ok_or_else(|| NetFilterError::MissingField("CntFwd.key".to_string()))?
        .as_str()
    {
        Some("NULL") => CounterKey::Null,
        Some("ClientID") => CounterKey::ClientId,
        Some(s) => CounterKey::Field(
            FieldPath::parse(s)
                .ok_or_else(|| bad("CntFwd.key", format!("{s:?} is not a field path")))?,
        ),
        None => return Err(bad("CntFwd.key", "expected a string")),
    };

    Ok(NetFilter {
        app_name,
        precision: precision as u32,
        get,
        add_to,
        clear,
        modify,
        cntfwd: CntFwd { to, threshold, key },
    })
}

/// Canonical JSON rendering; `parse_netfilter` inverts it exactly.
pub fn serialize_netfilter(nf: &NetFilter) -> String {
    let binding = |b: &Binding| match b {
        Binding::Nop => json!("nop"),
        Binding::Field(p) => json!(p.to_string()),
    };
    let modify = if nf.modify == ModifySpec::NOP {
        json!("nop")
    } else {
        json!({"op": nf.modify.op.name(), "para": nf.modify.para})
    };
    let to = match &nf.cntfwd.to {
        RouteSpec::All => json!("ALL"),
        RouteSpec::Src => json!("SRC"),
        RouteSpec::Server => json!("SERVER"),
        RouteSpec::Endpoints(e) => json!(e),
    };
    let key = match &nf.cntfwd.key {
        CounterKey::Null => json!("NULL"),
        CounterKey::ClientId => json!("ClientID"),
        CounterKey::Field(p) => json!(p.to_string()),
    };
    let doc = json!({
        "AppName": nf.app_name,
        "Precision": nf.precision,
        "get": binding(&nf.get),
        "addTo": binding(&nf.add_to),
        "clear": nf.clear.as_str(),
        "modify": modify,
        "CntFwd": {"to": to, "threshold": nf.cntfwd.threshold, "key": key},
    });
    serde_json::to_string_pretty(&doc).expect("json value always serializes")
}

// ---------------------------------------------------------------------------
// Service schemas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldType {
    FpArray,
    IntArray,
    StrIntMap,
    IntIntMap,
    Int,
    Opaque,
}

impl FieldType {
    pub fn inc_capable(self) -> bool {
        !matches!(self, FieldType::Opaque)
    }

    fn from_name(s: &str) -> Option<FieldType> {
        Some(match s {
            "FPArray" => FieldType::FpArray,
            "IntArray" => FieldType::IntArray,
            "StrIntMap" => FieldType::StrIntMap,
            "IntIntMap" => FieldType::IntIntMap,
            "Int" => FieldType::Int,
            "Opaque" => FieldType::Opaque,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldType::FpArray => "FPArray",
            FieldType::IntArray => "IntArray",
            FieldType::StrIntMap => "StrIntMap",
            FieldType::IntIntMap => "IntIntMap",
            FieldType::Int => "Int",
            FieldType::Opaque => "Opaque",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MessageSchema {
    pub fields: BTreeMap<String, FieldType>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodSchema {
    pub request: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSchema {
    pub name: String,
    pub messages: BTreeMap<String, MessageSchema>,
    pub methods: BTreeMap<String, MethodSchema>,
}

impl ServiceSchema {
    pub fn field_type(&self, path: &FieldPath) -> Option<FieldType> {
        self.messages
            .get(&path.message)
            .and_then(|m| m.fields.get(&path.field))
            .copied()
    }
}

pub fn parse_schema(text: &str) -> Result<ServiceSchema, NetFilterError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| NetFilterError::Json(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| NetFilterError::Json("top level must be an object".to_string()))?;
    for k in obj.keys() {
        if k != "service" && k != "messages" && k != "methods" {
            return Err(NetFilterError::UnknownField(k.clone()));
        }
    }
    let name = obj
        .get("service")
        .and_then(Value::as_str)
        .ok_or_else(|| NetFilterError::MissingField("service".to_string()))?
        .to_string();

    let mut messages = BTreeMap::new();
    let msgs: &Map<String, Value> = obj
        .get("messages")
        .and_then(Value::as_object)
        .ok_or_else(|| NetFilterError::MissingField("messages".to_string()))?;
    for (mname, fields) in msgs {
        let fobj = fields
            .as_object()
            .ok_or_else(|| bad(mname, "message must map field names to types"))?;
        let mut ms = MessageSchema::default();
        for (fname, ftype) in fobj {
            let tname = ftype
                .as_str()
                .ok_or_else(|| bad(fname, "field type must be a string"))?;
            let ft = FieldType::from_name(tname)
                .ok_or_else(|| bad(fname, format!("{tname:?} is not a field type")))?;
            ms.fields.insert(fname.clone(), ft);
        }
        messages.insert(mname.clone(), ms);
    }

    let mut methods = BTreeMap::new();
    let mths = obj
        .get("methods")
        .and_then(Value::as_object)
        .ok_or_else(|| NetFilterError::MissingField("methods".to_string()))?;
    for (mname, def) in mths {
        let dobj = def
            .as_object()
            .ok_or_else(|| bad(mname, "method must be an object"))?;
        let request = dobj
            .get("request")
            .and_then(Value::as_str)
            .ok_or_else(|| bad(mname, "missing request message"))?
            .to_string();
        let reply = dobj
            .get("reply")
            .and_then(Value::as_str)
            .ok_or_else(|| bad(mname, "missing reply message"))?
            .to_string();
        for m in [&request, &reply] {
            if !messages.contains_key(m) {
                return Err(bad(mname, format!("references undefined message {m:?}")));
            }
        }
        methods.insert(mname.clone(), MethodSchema { request, reply });
    }

    Ok(ServiceSchema {
        name,
        messages,
        methods,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// One validation problem; an empty report means the filter is deployable
/// against the schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaMismatch {
    pub path: String,
    pub why: String,
}

impl fmt::Display for SchemaMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.why)
    }
}

pub fn validate(nf: &NetFilter, schema: &ServiceSchema) -> Vec<SchemaMismatch> {
    fn check_path(
        report: &mut Vec<SchemaMismatch>,
        schema: &ServiceSchema,
        label: &str,
        p: &FieldPath,
        role: &str,
    ) {
        match schema.field_type(p) {
            None => report.push(SchemaMismatch {
                path: format!("{label}: {p}"),
                why: "does not resolve in the schema".to_string(),
            }),
            Some(t) if !t.inc_capable() => report.push(SchemaMismatch {
                path: format!("{label}: {p}"),
                why: format!("{} fields cannot {role}", t.name()),
            }),
            Some(_) => {}
        }
    }

    let mut report = Vec::new();
    if let Binding::Field(p) = &nf.get {
        check_path(&mut report, schema, "get", p, "bind to in-network primitives");
    }
    if let Binding::Field(p) = &nf.add_to {
        check_path(&mut report, schema, "addTo", p, "bind to in-network primitives");
    }
    if let CounterKey::Field(p) = &nf.cntfwd.key {
        check_path(&mut report, schema, "CntFwd.key", p, "carry counter keys");
    }
    if nf.cntfwd.threshold > 0 && nf.cntfwd.key == CounterKey::Null {
        report.push(SchemaMismatch {
            path: "CntFwd".to_string(),
            why: "threshold > 0 requires a counter key".to_string(),
        });
    }
    if nf.cntfwd.threshold == 0 && nf.cntfwd.to == RouteSpec::All {
        report.push(SchemaMismatch {
            path: "CntFwd".to_string(),
            why: "route ALL needs a threshold; every packet would be multicast".to_string(),
        });
    }
    report
}

// ---------------------------------------------------------------------------
// Switch program derivation
// ---------------------------------------------------------------------------

/// Where the switch sends a packet after processing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteTarget {
    /// Continue toward the application's server.
    Server,
    /// Turn the packet around to its source host.
    Source,
    /// Fan copies out to every registered client of the application.
    Clients,
}

/// Deterministic projection of a NetFilter onto switch behavior. Everything
/// the switch consults per packet lives here; deployment-time facts (cell
/// addresses, client lists) are layered on separately.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchProgram {
    /// Register += value on client-to-server traversals.
    pub add_to: bool,
    /// Slot values are replaced with register contents on the way in
    /// (fused with add_to, or a pure read for turnaround services).
    pub get_to_server: bool,
    /// Slot values are replaced with register contents on reply traversals.
    pub get_from_server: bool,
    pub clear: ClearPolicy,
    pub modify: ModifySpec,
    /// CntFwd threshold; 0 disables counting entirely.
    pub threshold: u32,
    /// Below-threshold packets continue to the server instead of dropping.
    /// True exactly when the clear policy needs the stream at the server.
    pub sub_threshold_to_server: bool,
    /// Egress for the packet that reaches the threshold.
    pub crossing: RouteTarget,
    /// Egress when threshold == 0.
    pub plain_route: RouteTarget,
}

pub fn pipeline_config(nf: &NetFilter) -> SwitchProgram {
    let add_to = nf.add_to.is_bound();
    let get = nf.get.is_bound();
    // Copy keeps its authoritative backup at the server, so the stream must
    // cross regardless of the configured route.
    let needs_server = nf.clear == ClearPolicy::Copy;
    // A field-keyed counter addresses individually meaningful packets
    // (monitored updates, race entries); an identity-keyed counter tallies
    // interchangeable contributions to one round.
    let keyed = matches!(nf.cntfwd.key, CounterKey::Field(_));
    let route = |spec: &RouteSpec| match spec {
        RouteSpec::Server => RouteTarget::Server,
        RouteSpec::Src => RouteTarget::Source,
        RouteSpec::All | RouteSpec::Endpoints(_) => RouteTarget::Clients,
    };
    let crossing = if needs_server {
        RouteTarget::Server
    } else {
        route(&nf.cntfwd.to)
    };
    // Keyed sub-threshold packets continue downstream: the server's
    // acknowledgement is what confirms a monitored update, and what tells a
    // race loser it lost. Identity-counted chunks are absorbed below the
    // threshold - the round result is their only meaningful confirmation -
    // unless the clear policy needs the whole stream at the server.
    let sub_threshold_to_server = needs_server || keyed;
    let plain_route = if needs_server {
        RouteTarget::Server
    } else if get && keyed {
        // Counterless packets of a keyed reader are reads of granted
        // registers; they are answered where the registers live.
        RouteTarget::Source
    } else {
        match route(&nf.cntfwd.to) {
            RouteTarget::Clients => RouteTarget::Server, // rejected by validate()
            r => r,
        }
    };
    SwitchProgram {
        add_to,
        // A pure read only makes sense when the values leave from the
        // switch; with add_to the read is the fused half of add-then-get.
        get_to_server: get && (add_to || plain_route == RouteTarget::Source),
        get_from_server: get,
        clear: nf.clear,
        modify: nf.modify,
        threshold: nf.cntfwd.threshold,
        sub_threshold_to_server,
        crossing,
        plain_route,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const AGTR_NF: &str = r#"{
        "AppName": "DT-1",
        "Precision": 8,
        "get": "AgtrGrad.tensor",
        "addTo": "NewGrad.tensor",
        "clear": "copy",
        "modify": "nop",
        "CntFwd": {"to": "ALL", "threshold": 2, "key": "ClientID"}
    }"#;

    pub const TRAINING_SCHEMA: &str = r#"{
        "service": "Training",
        "messages": {
            "NewGrad":  {"tensor": "FPArray"},
            "AgtrGrad": {"tensor": "FPArray"}
        },
        "methods": {"Update": {"request": "NewGrad", "reply": "AgtrGrad"}}
    }"#;

    fn fig3() -> NetFilter {
        parse_netfilter(AGTR_NF).unwrap()
    }

    #[test]
    fn training_filter_parses_to_expected_struct() {
        let nf = fig3();
        assert_eq!(nf.app_name, "DT-1");
        assert_eq!(nf.precision, 8);
        assert_eq!(
            nf.get,
            Binding::Field(FieldPath::parse("AgtrGrad.tensor").unwrap())
        );
        assert_eq!(
            nf.add_to,
            Binding::Field(FieldPath::parse("NewGrad.tensor").unwrap())
        );
        assert_eq!(nf.clear, ClearPolicy::Copy);
        assert_eq!(nf.modify, ModifySpec::NOP);
        assert_eq!(
            nf.cntfwd,
            CntFwd {
                to: RouteSpec::All,
                threshold: 2,
                key: CounterKey::ClientId
            }
        );
    }

    #[test]
    fn lock_filter_parses() {
        let nf = parse_netfilter(
            r#"{
            "AppName": "lock-svc",
            "Precision": 0,
            "get": "nop",
            "addTo": "nop",
            "clear": "nop",
            "modify": "nop",
            "CntFwd": {"to": "SRC", "threshold": 1, "key": "LockRequest.kvs"}
        }"#,
        )
        .unwrap();
        assert_eq!(nf.cntfwd.threshold, 1);
        assert_eq!(nf.cntfwd.to, RouteSpec::Src);
        assert_eq!(
            nf.cntfwd.key,
            CounterKey::Field(FieldPath::parse("LockRequest.kvs").unwrap())
        );
    }

    #[test]
    fn empty_object_reports_missing_keys() {
        assert!(matches!(
            parse_netfilter("{}"),
            Err(NetFilterError::MissingField(_))
        ));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = AGTR_NF.replace("\"Precision\"", "\"Threshold\"");
        match parse_netfilter(&text) {
            Err(NetFilterError::UnknownField(k)) => assert_eq!(k, "Threshold"),
            other => panic!("expected UnknownField, got {other:?}"),
        }
    }

    #[test]
    fn bad_enum_values_rejected() {
        let text = AGTR_NF.replace("\"copy\"", "\"sometimes\"");
        assert!(matches!(
            parse_netfilter(&text),
            Err(NetFilterError::BadValue { .. })
        ));
        let text = AGTR_NF.replace("\"ALL\"", "\"EVERYONE\"");
        assert!(parse_netfilter(&text).is_err());
    }

    #[test]
    fn modify_object_form_parses() {
        let nf = parse_netfilter(
            &AGTR_NF.replace(r#""modify": "nop""#, r#""modify": {"op": "ADD", "para": 5}"#),
        )
        .unwrap();
        assert_eq!(
            nf.modify,
            ModifySpec {
                op: StreamOp::Add,
                para: 5
            }
        );
        let nf = parse_netfilter(
            &AGTR_NF.replace(r#""modify": "nop""#, r#""modify": {"op": "BNOT"}"#),
        )
        .unwrap();
        assert_eq!(nf.modify.op, StreamOp::BNot);
    }

    #[test]
    fn parse_serialize_round_trip() {
        for text in [
            AGTR_NF.to_string(),
            AGTR_NF.replace(r#""modify": "nop""#, r#""modify": {"op": "SHIFTR", "para": 3}"#),
            AGTR_NF.replace(r#""ALL""#, r#"["h1", "h2"]"#),
        ] {
            let nf = parse_netfilter(&text).unwrap();
            let round = parse_netfilter(&serialize_netfilter(&nf)).unwrap();
            assert_eq!(nf, round);
        }
    }

    #[test]
    fn schema_parses_and_validates_training_filter() {
        let schema = parse_schema(TRAINING_SCHEMA).unwrap();
        assert_eq!(schema.name, "Training");
        assert_eq!(
            schema.field_type(&FieldPath::parse("NewGrad.tensor").unwrap()),
            Some(FieldType::FpArray)
        );
        assert!(validate(&fig3(), &schema).is_empty());
    }

    #[test]
    fn unresolved_path_reported_once() {
        let schema = parse_schema(TRAINING_SCHEMA).unwrap();
        let mut nf = fig3();
        nf.add_to = Binding::Field(FieldPath::parse("Missing.field").unwrap());
        let report = validate(&nf, &schema);
        assert_eq!(report.len(), 1);
        assert!(report[0].path.contains("Missing.field"));
    }

    #[test]
    fn opaque_binding_reported() {
        let schema = parse_schema(
            r#"{
            "service": "S",
            "messages": {"Req": {"blob": "Opaque"}, "Rep": {"blob": "Opaque"}},
            "methods": {"M": {"request": "Req", "reply": "Rep"}}
        }"#,
        )
        .unwrap();
        let mut nf = fig3();
        nf.get = Binding::Nop;
        nf.add_to = Binding::Field(FieldPath::parse("Req.blob").unwrap());
        nf.clear = ClearPolicy::Nop;
        nf.cntfwd = CntFwd {
            to: RouteSpec::Server,
            threshold: 0,
            key: CounterKey::Null,
        };
        let report = validate(&nf, &schema);
        assert_eq!(report.len(), 1);
        assert!(report[0].why.contains("Opaque"));
    }

    #[test]
    fn pipeline_for_training_filter() {
        let cfg = pipeline_config(&fig3());
        assert!(cfg.add_to);
        assert!(cfg.get_to_server, "aggregate read back on the data path");
        assert!(cfg.get_from_server);
        assert_eq!(cfg.clear, ClearPolicy::Copy);
        assert_eq!(cfg.threshold, 2);
        assert!(cfg.sub_threshold_to_server);
        assert_eq!(cfg.crossing, RouteTarget::Server);
    }

    #[test]
    fn pipeline_for_lock_filter() {
        let nf = parse_netfilter(
            r#"{
            "AppName": "lock-svc", "Precision": 0,
            "get": "nop", "addTo": "nop", "clear": "nop", "modify": "nop",
            "CntFwd": {"to": "SRC", "threshold": 1, "key": "LockRequest.kvs"}
        }"#,
        )
        .unwrap();
        let cfg = pipeline_config(&nf);
        assert!(!cfg.add_to && !cfg.get_to_server && !cfg.get_from_server);
        assert_eq!(cfg.threshold, 1);
        assert!(
            cfg.sub_threshold_to_server,
            "losers learn from the server's acknowledgement"
        );
        assert_eq!(cfg.crossing, RouteTarget::Source);
    }

    #[test]
    fn pipeline_for_pure_modify_filter() {
        let nf = parse_netfilter(
            r#"{
            "AppName": "scaler", "Precision": 0,
            "get": "nop", "addTo": "nop", "clear": "nop",
            "modify": {"op": "ASSIGN", "para": 7},
            "CntFwd": {"to": "SERVER", "threshold": 0, "key": "NULL"}
        }"#,
        )
        .unwrap();
        let cfg = pipeline_config(&nf);
        assert!(!cfg.add_to && !cfg.get_to_server && !cfg.get_from_server);
        assert_eq!(
            cfg.modify,
            ModifySpec {
                op: StreamOp::Assign,
                para: 7
            }
        );
        assert_eq!(cfg.plain_route, RouteTarget::Server);
    }

    #[test]
    fn stream_ops_match_semantics_table() {
        use StreamOp::*;
        assert_eq!(Max.apply(3, 9), (9, false));
        assert_eq!(Min.apply(3, 9), (3, false));
        assert_eq!(Add.apply(3, 9), (12, false));
        assert_eq!(Add.apply(i32::MAX, 1), (i32::MAX, true));
        assert_eq!(Add.apply(i32::MIN, -1), (i32::MIN, true));
        assert_eq!(Assign.apply(3, 9), (9, false));
        assert_eq!(ShiftL.apply(1, 4), (16, false));
        assert_eq!(ShiftR.apply(-16, 2), (-4, false), "arithmetic shift");
        assert_eq!(BAnd.apply(0b1100, 0b1010), (0b1000, false));
        assert_eq!(BOr.apply(0b1100, 0b1010), (0b1110, false));
        assert_eq!(BNot.apply(0, 77), (!0, false));
        assert_eq!(BXor.apply(0b1100, 0b1010), (0b0110, false));
        assert_eq!(Nop.apply(5, 77), (5, false));
        for (op, b) in [
            (Nop, 0u8),
            (Max, 1),
            (Min, 2),
            (Add, 3),
            (Assign, 4),
            (ShiftL, 5),
            (ShiftR, 6),
            (BAnd, 7),
            (BOr, 8),
            (BNot, 9),
            (BXor, 10),
        ] {
            assert_eq!(op.to_wire(), b);
            assert_eq!(StreamOp::from_wire(b), Some(op));
        }
        assert_eq!(StreamOp::from_wire(11), None);
    }
}
