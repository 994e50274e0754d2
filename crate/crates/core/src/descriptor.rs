//! Unified robot description model.
//!
//! A robot is described by one extended-SenML document carrying four
//! characteristic groups: static (physical properties, sensors, actuators,
//! personal info), behavioral, dynamic and interaction. The short labels
//! `ph`, `sen`, `act`, `info`, `sname`, `sval` and `su` are the wire labels
//! of the static group; actuators use `aname`, `aval` and `au`.
//!
//! The canonical serialization has a fixed block order, sorted object keys
//! and no insignificant whitespace, so structurally equal descriptors are
//! byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Top-level wire labels, in canonical order.
pub const TOP_LEVEL_LABELS: [&str; 8] = [
    "robotid",
    "ph",
    "sen",
    "act",
    "info",
    "behavioral",
    "dynamic",
    "interaction",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DescriptorError {
    #[error("malformed document at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown wire label `{0}`")]
    UnknownLabel(String),
    #[error("range `{value}` of `{label}` is invalid: {reason}")]
    Range {
        label: String,
        value: String,
        reason: String,
    },
    #[error("field `{field}` is invalid: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot merge an empty descriptor list")]
    EmptyMerge,
    #[error("robot `{0}` appears more than once in the merge list")]
    DuplicateMember(String),
}

impl DescriptorError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DescriptorError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Lowercase-trim normalization shared by every capability tag.
pub fn normalize_tag(tag: &str) -> String {
    tag.trim().to_lowercase()
}

/// Presence state of a robot, shared by the dynamic characteristics, the
/// marketplace records and the simulated robots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RobotState {
    Idle,
    Assigned,
    Executing,
    Failed,
    Offline,
}

impl RobotState {
    pub fn as_str(self) -> &'static str {
        match self {
            RobotState::Idle => "IDLE",
            RobotState::Assigned => "ASSIGNED",
            RobotState::Executing => "EXECUTING",
            RobotState::Failed => "FAILED",
            RobotState::Offline => "OFFLINE",
        }
    }
}

impl fmt::Display for RobotState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RobotState {
    type Err = DescriptorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "IDLE" => Ok(RobotState::Idle),
            "ASSIGNED" => Ok(RobotState::Assigned),
            "EXECUTING" => Ok(RobotState::Executing),
            "FAILED" => Ok(RobotState::Failed),
            "OFFLINE" => Ok(RobotState::Offline),
            other => Err(DescriptorError::invalid(
                "state",
                format!("`{other}` is not one of IDLE, ASSIGNED, EXECUTING, FAILED, OFFLINE"),
            )),
        }
    }
}

/// An ordered `(min,max)` pair as carried by `sval` / `aval`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    /// Parses `(min,max)`. Whitespace around the numbers is accepted.
    pub fn parse(label: &str, text: &str) -> Result<Self, DescriptorError> {
        let range_err = |reason: &str| DescriptorError::Range {
            label: label.to_string(),
            value: text.to_string(),
            reason: reason.to_string(),
        };
        let inner = text
            .trim()
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| range_err("expected `(min,max)`"))?;
        let (lo, hi) = inner
            .split_once(',')
            .ok_or_else(|| range_err("expected two comma-separated values"))?;
        let min: f64 = lo.trim().parse().map_err(|_| range_err("min is not a number"))?;
        let max: f64 = hi.trim().parse().map_err(|_| range_err("max is not a number"))?;
        if !min.is_finite() || !max.is_finite() {
            return Err(range_err("bounds must be finite"));
        }
        if min > max {
            return Err(range_err("min > max"));
        }
        Ok(ValueRange { min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorSpec {
    pub sname: String,
    pub sval: String,
    pub su: String,
}

impl SensorSpec {
    pub fn new(sname: &str, sval: &str, su: &str) -> Self {
        SensorSpec {
            sname: normalize_tag(sname),
            sval: sval.to_string(),
            su: su.to_string(),
        }
    }

    /// The sensing range, if `sval` is set and well-formed.
    pub fn range(&self) -> Option<ValueRange> {
        if self.sval.is_empty() {
            None
        } else {
            ValueRange::parse("sval", &self.sval).ok()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActuatorSpec {
    pub aname: String,
    pub aval: String,
    pub au: String,
}

impl ActuatorSpec {
    pub fn new(aname: &str, aval: &str, au: &str) -> Self {
        ActuatorSpec {
            aname: normalize_tag(aname),
            aval: aval.to_string(),
            au: au.to_string(),
        }
    }
}

/// One entry of the opaque `info` array.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InfoProperty {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StaticCharacteristics {
    pub physical: BTreeMap<String, String>,
    pub sensors: Vec<SensorSpec>,
    pub actuators: Vec<ActuatorSpec>,
    pub info: Vec<InfoProperty>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BehavioralCharacteristics {
    pub supported_tasks: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Location { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicCharacteristics {
    pub location: Location,
    pub battery_pct: f64,
    pub state: RobotState,
}

impl Default for DynamicCharacteristics {
    fn default() -> Self {
        DynamicCharacteristics {
            location: Location::default(),
            battery_pct: 100.0,
            state: RobotState::Idle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InteractionCharacteristics {
    pub protocol: String,
    pub endpoint: String,
}

/// The unified description of one robot.
///
/// An empty `robot_id` means "not yet assigned"; the marketplace assigns one
/// on first publication. Serde (de)serializes the canonical wire document,
/// validating on the way in.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RobotDescriptor {
    pub robot_id: String,
    pub static_ch: StaticCharacteristics,
    pub behavioral_ch: BehavioralCharacteristics,
    pub dynamic_ch: DynamicCharacteristics,
    pub interaction_ch: InteractionCharacteristics,
}

/// Normalized capability tags of a robot (or of a request).
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapabilitySet(BTreeSet<String>);

impl CapabilitySet {
    pub fn new() -> Self {
        CapabilitySet(BTreeSet::new())
    }

    pub fn insert(&mut self, tag: &str) -> bool {
        let tag = normalize_tag(tag);
        if tag.is_empty() {
            return false;
        }
        self.0.insert(tag)
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.0.contains(&normalize_tag(tag))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }

    pub fn is_superset(&self, other: &CapabilitySet) -> bool {
        self.0.is_superset(&other.0)
    }

    pub fn union_with(&mut self, other: &CapabilitySet) {
        self.0.extend(other.0.iter().cloned());
    }

    pub fn intersection(&self, other: &CapabilitySet) -> CapabilitySet {
        CapabilitySet(self.0.intersection(&other.0).cloned().collect())
    }

    /// Tags of `self` that `other` lacks.
    pub fn difference(&self, other: &CapabilitySet) -> CapabilitySet {
        CapabilitySet(self.0.difference(&other.0).cloned().collect())
    }

    pub fn to_vec(&self) -> Vec<String> {
        self.0.iter().cloned().collect()
    }
}

impl<S: AsRef<str>> FromIterator<S> for CapabilitySet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut set = CapabilitySet::new();
        for tag in iter {
            set.insert(tag.as_ref());
        }
        set
    }
}

impl fmt::Display for CapabilitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, tag) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            f.write_str(tag)?;
        }
        write!(f, "}}")
    }
}

/// Which kind of resource a capability tag names on a given robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    Sensor,
    Actuator,
    Task,
}

impl RobotDescriptor {
    /// Copy with every capability tag normalized.
    pub fn normalized(&self) -> RobotDescriptor {
        let mut d = self.clone();
        d.robot_id = d.robot_id.trim().to_string();
        for s in &mut d.static_ch.sensors {
            s.sname = normalize_tag(&s.sname);
        }
        for a in &mut d.static_ch.actuators {
            a.aname = normalize_tag(&a.aname);
        }
        for t in &mut d.behavioral_ch.supported_tasks {
            *t = normalize_tag(t);
        }
        d
    }

    pub fn capability_set(&self) -> CapabilitySet {
        capability_set(self)
    }

    /// A descriptor with no capabilities is valid but cannot be published.
    pub fn is_publishable(&self) -> bool {
        !self.capability_set().is_empty()
    }

    pub fn tag_kind(&self, tag: &str) -> Option<TagKind> {
        let tag = normalize_tag(tag);
        if self.static_ch.actuators.iter().any(|a| normalize_tag(&a.aname) == tag) {
            Some(TagKind::Actuator)
        } else if self.static_ch.sensors.iter().any(|s| normalize_tag(&s.sname) == tag) {
            Some(TagKind::Sensor)
        } else if self
            .behavioral_ch
            .supported_tasks
            .iter()
            .any(|t| normalize_tag(t) == tag)
        {
            Some(TagKind::Task)
        } else {
            None
        }
    }

    pub fn sensor(&self, name: &str) -> Option<&SensorSpec> {
        let name = normalize_tag(name);
        self.static_ch
            .sensors
            .iter()
            .find(|s| normalize_tag(&s.sname) == name)
    }

    pub fn info_value(&self, name: &str) -> Option<&str> {
        self.static_ch
            .info
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.value.as_str())
    }

    /// Checks every per-type invariant, returning the first violation.
    pub fn validate(&self) -> Result<(), DescriptorError> {
        validate_robot_id(&self.robot_id)?;
        for s in &self.static_ch.sensors {
            if normalize_tag(&s.sname).is_empty() {
                return Err(DescriptorError::invalid("sname", "sensor name is empty"));
            }
            if !s.sval.is_empty() {
                ValueRange::parse("sval", &s.sval)?;
            }
        }
        for a in &self.static_ch.actuators {
            if normalize_tag(&a.aname).is_empty() {
                return Err(DescriptorError::invalid("aname", "actuator name is empty"));
            }
            if !a.aval.is_empty() {
                ValueRange::parse("aval", &a.aval)?;
            }
        }
        for t in &self.behavioral_ch.supported_tasks {
            if normalize_tag(t).is_empty() {
                return Err(DescriptorError::invalid("supported_tasks", "empty task tag"));
            }
        }
        let dynamic = &self.dynamic_ch;
        if !(0.0..=100.0).contains(&dynamic.battery_pct) {
            return Err(DescriptorError::invalid(
                "battery_pct",
                format!("{} is outside [0,100]", dynamic.battery_pct),
            ));
        }
        if !dynamic.location.x.is_finite() || !dynamic.location.y.is_finite() {
            return Err(DescriptorError::invalid("location", "coordinates must be finite"));
        }
        let endpoint = &self.interaction_ch.endpoint;
        if !endpoint.is_empty() {
            url::Url::parse(endpoint)
                .map_err(|e| DescriptorError::invalid("endpoint", format!("`{endpoint}`: {e}")))?;
        }
        Ok(())
    }
}

/// Robot ids must be usable as a single URI path segment.
pub fn validate_robot_id(id: &str) -> Result<(), DescriptorError> {
    let ok = id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '~'));
    if ok {
        Ok(())
    } else {
        Err(DescriptorError::invalid(
            "robotid",
            format!("`{id}` is not URI-safe"),
        ))
    }
}

pub fn capability_set(d: &RobotDescriptor) -> CapabilitySet {
    let sensors = d.static_ch.sensors.iter().map(|s| s.sname.as_str());
    let actuators = d.static_ch.actuators.iter().map(|a| a.aname.as_str());
    let tasks = d.behavioral_ch.supported_tasks.iter().map(String::as_str);
    sensors.chain(actuators).chain(tasks).collect()
}

// ---------------------------------------------------------------------------
// Parsing

/// Parses and validates one extended-SenML document.
pub fn parse_descriptor(text: &str) -> Result<RobotDescriptor, DescriptorError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DescriptorError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let d = descriptor_from_value(&value)?;
    d.validate()?;
    Ok(d)
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub(crate) fn descriptor_from_value(value: &Value) -> Result<RobotDescriptor, DescriptorError> {
    let top = as_object(value, "document")?;
    reject_unknown(top, &TOP_LEVEL_LABELS)?;
    let mut d = RobotDescriptor {
        robot_id: match top.get("robotid") {
            Some(v) => as_str(v, "robotid")?.trim().to_string(),
            None => String::new(),
        },
        ..Default::default()
    };
    if let Some(ph) = top.get("ph") {
        for (k, v) in as_object(ph, "ph")? {
            d.static_ch.physical.insert(k.clone(), scalar_string(v, k)?);
        }
    }
    if let Some(sen) = top.get("sen") {
        for entry in as_array(sen, "sen")? {
            let [name, range, unit] = triple(entry, "sen", ["sname", "sval", "su"])?;
            d.static_ch.sensors.push(SensorSpec::new(&name, &range, &unit));
        }
    }
    if let Some(act) = top.get("act") {
        for entry in as_array(act, "act")? {
            let [name, range, unit] = triple(entry, "act", ["aname", "aval", "au"])?;
            d.static_ch.actuators.push(ActuatorSpec::new(&name, &range, &unit));
        }
    }
    if let Some(info) = top.get("info") {
        for entry in as_array(info, "info")? {
            let obj = as_object(entry, "info")?;
            reject_unknown(obj, &["n", "vs"])?;
            d.static_ch.info.push(InfoProperty {
                name: obj.get("n").map(|v| as_str(v, "n")).transpose()?.unwrap_or("").to_string(),
                value: obj.get("vs").map(|v| scalar_string(v, "vs")).transpose()?.unwrap_or_default(),
            });
        }
    }
    if let Some(b) = top.get("behavioral") {
        let obj = as_object(b, "behavioral")?;
        reject_unknown(obj, &["supported_tasks"])?;
        if let Some(tasks) = obj.get("supported_tasks") {
            for t in as_array(tasks, "supported_tasks")? {
                d.behavioral_ch.supported_tasks.push(normalize_tag(as_str(t, "supported_tasks")?));
            }
        }
    }
    if let Some(dy) = top.get("dynamic") {
        let obj = as_object(dy, "dynamic")?;
        reject_unknown(obj, &["battery_pct", "location", "state"])?;
        if let Some(b) = obj.get("battery_pct") {
            d.dynamic_ch.battery_pct = as_f64(b, "battery_pct")?;
        }
        if let Some(loc) = obj.get("location") {
            let arr = as_array(loc, "location")?;
            if arr.len() != 2 {
                return Err(DescriptorError::invalid("location", "expected [x, y]"));
            }
            d.dynamic_ch.location = Location::new(as_f64(&arr[0], "location")?, as_f64(&arr[1], "location")?);
        }
        if let Some(s) = obj.get("state") {
            d.dynamic_ch.state = as_str(s, "state")?.parse()?;
        }
    }
    if let Some(i) = top.get("interaction") {
        let obj = as_object(i, "interaction")?;
        reject_unknown(obj, &["endpoint", "protocol"])?;
        if let Some(p) = obj.get("protocol") {
            d.interaction_ch.protocol = as_str(p, "protocol")?.to_string();
        }
        if let Some(e) = obj.get("endpoint") {
            d.interaction_ch.endpoint = as_str(e, "endpoint")?.to_string();
        }
    }
    Ok(d)
}

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str]) -> Result<(), DescriptorError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(DescriptorError::UnknownLabel(k.clone())),
        None => Ok(()),
    }
}

/// Sensor/actuator entries are either `{"sname":..,"sval":..,"su":..}` or
/// the positional form `[name, range, unit]` (trailing items optional).
fn triple(entry: &Value, block: &str, labels: [&str; 3]) -> Result<[String; 3], DescriptorError> {
    let mut out: [String; 3] = Default::default();
    match entry {
        Value::Object(obj) => {
            reject_unknown(obj, &labels)?;
            for (slot, label) in out.iter_mut().zip(labels) {
                if let Some(v) = obj.get(label) {
                    *slot = as_str(v, label)?.to_string();
                }
            }
        }
        Value::Array(items) => {
            if items.is_empty() || items.len() > 3 {
                return Err(DescriptorError::invalid(block, "positional entry needs 1 to 3 items"));
            }
            for ((slot, label), v) in out.iter_mut().zip(labels).zip(items) {
                *slot = as_str(v, label)?.to_string();
            }
        }
        _ => return Err(DescriptorError::invalid(block, "entry must be an object or array")),
    }
    Ok(out)
}

fn as_object<'a>(v: &'a Value, field: &str) -> Result<&'a Map<String, Value>, DescriptorError> {
    v.as_object()
        .ok_or_else(|| DescriptorError::invalid(field, "expected an object"))
}

fn as_array<'a>(v: &'a Value, field: &str) -> Result<&'a Vec<Value>, DescriptorError> {
    v.as_array()
        .ok_or_else(|| DescriptorError::invalid(field, "expected an array"))
}

fn as_str<'a>(v: &'a Value, field: &str) -> Result<&'a str, DescriptorError> {
    v.as_str()
        .ok_or_else(|| DescriptorError::invalid(field, "expected a string"))
}

fn as_f64(v: &Value, field: &str) -> Result<f64, DescriptorError> {
    v.as_f64()
        .ok_or_else(|| DescriptorError::invalid(field, "expected a number"))
}

fn scalar_string(v: &Value, field: &str) -> Result<String, DescriptorError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(DescriptorError::invalid(field, "expected a scalar value")),
    }
}

// ---------------------------------------------------------------------------
// Serialization

/// Emits the canonical document. Capability tags are normalized on output.
pub fn serialize_descriptor(d: &RobotDescriptor) -> Result<String, DescriptorError> {
    d.validate()?;
    Ok(canonical_string(&d.normalized()))
}

impl Serialize for RobotDescriptor {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let d = self.normalized();
        let blocks = blocks(&d);
        let mut map = serializer.serialize_map(Some(blocks.len() + usize::from(!d.robot_id.is_empty())))?;
        if !d.robot_id.is_empty() {
            map.serialize_entry("robotid", &d.robot_id)?;
        }
        for (label, value) in &blocks {
            map.serialize_entry(label, value)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for RobotDescriptor {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let value = Value::deserialize(deserializer)?;
        let d = descriptor_from_value(&value).map_err(D::Error::custom)?;
        d.validate().map_err(D::Error::custom)?;
        Ok(d)
    }
}

/// The seven fixed blocks in canonical order.
fn blocks(d: &RobotDescriptor) -> [(&'static str, Value); 7] {
    let ph: Map<String, Value> = d
        .static_ch
        .physical
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    let sen: Vec<Value> = d
        .static_ch
        .sensors
        .iter()
        .map(|s| object([("sname", &s.sname), ("su", &s.su), ("sval", &s.sval)]))
        .collect();
    let act: Vec<Value> = d
        .static_ch
        .actuators
        .iter()
        .map(|a| object([("aname", &a.aname), ("au", &a.au), ("aval", &a.aval)]))
        .collect();
    let info: Vec<Value> = d
        .static_ch
        .info
        .iter()
        .map(|p| object([("n", &p.name), ("vs", &p.value)]))
        .collect();
    let behavioral = serde_json::json!({ "supported_tasks": d.behavioral_ch.supported_tasks });
    let dynamic = serde_json::json!({
        "battery_pct": d.dynamic_ch.battery_pct,
        "location": [d.dynamic_ch.location.x, d.dynamic_ch.location.y],
        "state": d.dynamic_ch.state.as_str(),
    });
    let interaction = serde_json::json!({
        "endpoint": d.interaction_ch.endpoint,
        "protocol": d.interaction_ch.protocol,
    });

    [
        ("ph", Value::Object(ph)),
        ("sen", Value::Array(sen)),
        ("act", Value::Array(act)),
        ("info", Value::Array(info)),
        ("behavioral", behavioral),
        ("dynamic", dynamic),
        ("interaction", interaction),
    ]
}

fn canonical_string(d: &RobotDescriptor) -> String {
    let blocks = blocks(d);
    let mut out = String::from("{");
    if !d.robot_id.is_empty() {
        out.push_str("\"robotid\":");
        out.push_str(&Value::String(d.robot_id.clone()).to_string());
        out.push(',');
    }
    for (i, (label, value)) in blocks.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('"');
        out.push_str(label);
        out.push_str("\":");
        out.push_str(&value.to_string());
    }
    out.push('}');
    out
}

fn object<const N: usize>(pairs: [(&str, &String); N]) -> Value {
    Value::Object(
        pairs
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v.clone())))
            .collect(),
    )
}

/// `serialize_descriptor(parse_descriptor(text))`.
pub fn canonicalize(text: &str) -> Result<String, DescriptorError> {
    serialize_descriptor(&parse_descriptor(text)?)
}

// ---------------------------------------------------------------------------
// Composition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcedSensor {
    pub source: String,
    pub sensor: SensorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcedActuator {
    pub source: String,
    pub actuator: ActuatorSpec,
}

/// The merged pattern of several robot services.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompositeDescriptor {
    pub members: Vec<String>,
    pub capabilities: CapabilitySet,
    pub sensors: Vec<SourcedSensor>,
    pub actuators: Vec<SourcedActuator>,
}

pub fn merge_descriptors(ds: &[RobotDescriptor]) -> Result<CompositeDescriptor, DescriptorError> {
    if ds.is_empty() {
        return Err(DescriptorError::EmptyMerge);
    }
    let mut seen = BTreeSet::new();
    let mut composite = CompositeDescriptor::default();
    for d in ds {
        d.validate()?;
        if !seen.insert(d.robot_id.as_str()) {
            return Err(DescriptorError::DuplicateMember(d.robot_id.clone()));
        }
        let d = d.normalized();
        composite.members.push(d.robot_id.clone());
        composite.capabilities.union_with(&d.capability_set());
        composite.sensors.extend(d.static_ch.sensors.iter().map(|s| SourcedSensor {
            source: d.robot_id.clone(),
            sensor: s.clone(),
        }));
        composite.actuators.extend(d.static_ch.actuators.iter().map(|a| SourcedActuator {
            source: d.robot_id.clone(),
            actuator: a.clone(),
        }));
    }
    Ok(composite)
}
