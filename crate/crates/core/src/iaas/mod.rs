//! One IaaS-for-robots node.
//!
//! The node owns a robots repository, a lease table and a gateway pool, and
//! keeps a discovery cache fed by presence notifications (or overlay
//! advertisements). A service request flows through discovery, coalition
//! formation, composition and delegation; local members are driven through
//! the gateways, remote members are handed to their owner node over the
//! federation routes.
//!
//! Routes:
//!
//! | route | purpose |
//! |---|---|
//! | `POST /admin/robots[?fault_p=p]` | add a robot from its metadata document |
//! | `GET /admin/robots` | list the repository |
//! | `DELETE /admin/robots/{id}` | remove an idle robot |
//! | `POST /admin/robots/{id}/reset` | return a FAILED robot to IDLE |
//! | `POST /services/requests` | submit a [`ServiceRequest`] |
//! | `GET /services/requests/{id}` | assignment by request or assignment id |
//! | `GET /discovery[?caps=a,b]` | current discovery view |
//! | `POST /discovery/subscribe` | timed discovery round (IRDD probe) |
//! | `POST /federation/tasks` | sub-task from a peer node |
//! | `POST /federation/events` | completion of a delegated sub-task |
//! | `POST /notify` | presence notification callback |
//! | `POST /overlay/result` | overlay discovery result |
//! | `POST /gateways/{protocol}` | ensure a gateway instance |

pub mod lease;
pub mod repository;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::warn;

use crate::coalition::{form_coalition, Candidate, Coalition, CoalitionError, CoalitionParams};
use crate::descriptor::{
    parse_descriptor, serialize_descriptor, CapabilitySet, CompositeDescriptor, DescriptorError,
    Location, RobotDescriptor, RobotState, TagKind,
};
use crate::gateway::{Command, EventKind, GatewayError, GatewayPool, RobotEvent};
use crate::net::{encode_query, Context, Endpoint, Method, Millis, Request, Response, Service};
use crate::overlay::{AdvertiseBody, DiscoverBody, DiscoverResult, PipeBody};
use crate::presence::Notification;

pub use lease::{HeldLease, LeaseConflict, LeaseKind, LeaseRequest, LeaseTable};
pub use repository::{metadata_key, RepoEntry, RepoError, RobotsRepository};

const GATEWAY_TIMER: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Marketplace publication and discovery, direct federation calls.
    #[default]
    Presence,
    /// Overlay advertisements and discovery, federation over pipes.
    Overlay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    pub backend: Backend,
    pub marketplace: Option<Endpoint>,
    /// The co-hosted overlay node (overlay backend only).
    pub overlay: Option<Endpoint>,
    /// Subscribe to every marketplace robot at start.
    pub standing_subscription: bool,
    pub coalition: CoalitionParams,
    pub seed: u64,
    pub storage: Option<PathBuf>,
}

impl NodeConfig {
    pub fn new(node_id: &str) -> Self {
        NodeConfig {
            node_id: node_id.to_string(),
            backend: Backend::Presence,
            marketplace: None,
            overlay: None,
            standing_subscription: true,
            coalition: CoalitionParams::default(),
            seed: 0,
            storage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default)]
    pub task_id: String,
    pub site: Location,
    pub kind: String,
    /// Work time per member once on site.
    pub duration_est: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Paas,
    PeerIaas(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    #[serde(default)]
    pub request_id: String,
    pub required_caps: CapabilitySet,
    pub task: TaskSpec,
    #[serde(default)]
    pub origin: Origin,
}

impl ServiceRequest {
    pub fn new(required_caps: CapabilitySet, task: TaskSpec) -> Self {
        ServiceRequest {
            request_id: String::new(),
            required_caps,
            task,
            origin: Origin::Paas,
        }
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        if self.required_caps.is_empty() {
            return Err(NodeError::Usage("required_caps is empty".into()));
        }
        let t = &self.task;
        if !t.site.x.is_finite() || !t.site.y.is_finite() {
            return Err(NodeError::Usage("task site must be finite".into()));
        }
        if !(t.duration_est > 0.0 && t.duration_est.is_finite()) {
            return Err(NodeError::Usage("duration_est must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MemberStatus {
    Pending,
    Sent,
    Running,
    Done,
    Failed,
}

impl MemberStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, MemberStatus::Done | MemberStatus::Failed)
    }

    /// Legal single steps: PENDING -> SENT -> RUNNING -> DONE, and FAILED
    /// from any non-terminal state.
    pub fn can_step(self, to: MemberStatus) -> bool {
        use MemberStatus::*;
        matches!(
            (self, to),
            (Pending, Sent) | (Sent, Running) | (Running, Done) | (Pending | Sent | Running, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensedValue {
    pub tag: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberTask {
    pub robot_id: String,
    pub owner_iaas: String,
    pub local: bool,
    pub assigned: CapabilitySet,
    pub commands: Vec<Command>,
    pub status: MemberStatus,
    /// Every status this member went through, in order.
    pub history: Vec<MemberStatus>,
    pub sensed: Vec<SensedValue>,
    pub reason: Option<String>,
    /// A failed member whose tags a re-plan handed to other robots.
    pub replaced: bool,
}

impl MemberTask {
    fn step(&mut self, to: MemberStatus) {
        if self.status.can_step(to) {
            self.status = to;
            self.history.push(to);
        }
    }

    /// Steps forward through the intermediate states up to `to`.
    fn advance(&mut self, to: MemberStatus) {
        use MemberStatus::*;
        if to == Failed {
            self.step(Failed);
            return;
        }
        for s in [Sent, Running, Done] {
            if self.status == to || self.status.is_terminal() {
                break;
            }
            self.step(s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AssignmentStatus {
    Running,
    Done,
    Failed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub assignment_id: String,
    pub request_id: String,
    pub required_caps: CapabilitySet,
    pub task: TaskSpec,
    pub origin: Origin,
    pub coalition: Coalition,
    /// Composite pattern recorded at formation time.
    pub composite: CompositeDescriptor,
    pub replans: Vec<Coalition>,
    pub members: Vec<MemberTask>,
    pub status: AssignmentStatus,
    pub fast_path: bool,
    pub degraded: bool,
    pub created_at: Millis,
    pub finished_at: Option<Millis>,
}

impl TaskAssignment {
    fn replanned(&self) -> bool {
        !self.replans.is_empty()
    }

    fn finish(&mut self, status: AssignmentStatus, now: Millis) {
        if self.status == AssignmentStatus::Running {
            self.status = status;
            self.finished_at = Some(now);
        }
    }
}

/// Body of `POST /federation/tasks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationTask {
    pub assignment_id: String,
    /// Endpoint of the delegating node.
    pub origin: String,
    #[serde(rename = "robotid")]
    pub robot_id: String,
    pub commands: Vec<Command>,
    pub work_ms: Millis,
    pub sent_at: Millis,
    #[serde(default)]
    pub via_overlay: bool,
}

/// Body of `POST /federation/events`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationEvent {
    pub assignment_id: String,
    #[serde(rename = "robotid")]
    pub robot_id: String,
    pub ok: bool,
    pub reason: Option<String>,
    pub sensed: Vec<SensedValue>,
    pub location: Option<Location>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedRobot {
    pub descriptor: RobotDescriptor,
    pub owner: String,
    pub state: RobotState,
    pub version: u64,
}

/// Presence state of remote robots as last notified.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscoveryCache {
    entries: BTreeMap<String, CachedRobot>,
    /// Last version seen for robots that went OFFLINE.
    tombstones: BTreeMap<String, u64>,
}

impl DiscoveryCache {
    /// Applies a notification; stale or duplicate versions are ignored.
    /// Returns true if the cache changed.
    pub fn apply(&mut self, n: &Notification) -> bool {
        let seen = self
            .entries
            .get(&n.robot_id)
            .map(|e| e.version)
            .max(self.tombstones.get(&n.robot_id).copied())
            .unwrap_or(0);
        if n.version <= seen {
            return false;
        }
        if n.state == RobotState::Offline {
            self.entries.remove(&n.robot_id);
            self.tombstones.insert(n.robot_id.clone(), n.version);
            return true;
        }
        let descriptor = match (&n.descriptor, self.entries.get(&n.robot_id)) {
            (Some(d), _) => d.clone(),
            (None, Some(e)) => e.descriptor.clone(),
            (None, None) => return false,
        };
        let mut descriptor = descriptor;
        descriptor.robot_id = n.robot_id.clone();
        descriptor.dynamic_ch.state = n.state;
        self.entries.insert(
            n.robot_id.clone(),
            CachedRobot {
                descriptor,
                owner: n.owner.clone(),
                state: n.state,
                version: n.version,
            },
        );
        true
    }

    pub fn get(&self, robot_id: &str) -> Option<&CachedRobot> {
        self.entries.get(robot_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CachedRobot> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredRobot {
    pub descriptor: RobotDescriptor,
    pub owner: String,
    pub local: bool,
    pub state: RobotState,
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    /// Available robots first, then by robot id.
    pub candidates: Vec<DiscoveredRobot>,
    /// The marketplace could not be reached; only local robots are fresh.
    pub degraded: bool,
}

/// One task-assignment delay observation at a hosting node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TadSample {
    pub assignment_id: String,
    #[serde(rename = "robotid")]
    pub robot_id: String,
    pub origin: String,
    pub value_ms: Millis,
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("robot `{0}` is part of a live assignment")]
    Busy(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Coalition(#[from] CoalitionError),
    #[error("lease conflict: {0}")]
    Lease(#[from] LeaseConflict),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("malformed body: {0}")]
    Json(#[from] serde_json::Error),
}

impl NodeError {
    pub fn status(&self) -> u16 {
        match self {
            NodeError::NotFound(_) => 404,
            NodeError::Conflict(_) | NodeError::Busy(_) | NodeError::Lease(_) => 409,
            NodeError::Usage(_) | NodeError::Json(_) => 400,
            NodeError::Descriptor(_) | NodeError::Coalition(_) => 422,
            NodeError::Repo(RepoError::Duplicate(_)) => 409,
            NodeError::Repo(RepoError::NotFound(_)) => 404,
            NodeError::Repo(_) => 500,
            NodeError::Gateway(_) => 409,
        }
    }

    fn response(&self) -> Response {
        let mut body = json!({ "error": self.to_string() });
        if let NodeError::Coalition(CoalitionError::Unsatisfiable { missing }) = self {
            body["missing"] = json!(missing);
        }
        Response::json(self.status(), &body)
    }
}

enum Call {
    Publish { pending: Option<String>, rollback: Option<String> },
    Subscribe,
    ProbeSubscribe { probe: u64 },
    Federation { assignment_id: String, robot_id: String },
    Other,
}

struct PendingAdd {
    descriptor: RobotDescriptor,
    key: String,
    fault_p: f64,
}

#[derive(Debug, Clone)]
enum TaskOwner {
    Local { assignment_id: String },
    Hosted { key: String },
}

struct HostedTask {
    origin: String,
    assignment_id: String,
    robot_id: String,
    via_overlay: bool,
    sensed: Vec<SensedValue>,
}

struct Probe {
    id: u64,
    start: Millis,
    subscriber_id: Option<String>,
    expected: Option<usize>,
    received: BTreeMap<String, usize>,
    query_id: Option<String>,
    done: bool,
}

#[derive(Default)]
struct Counters {
    request: u64,
    assignment: u64,
    task: u64,
    robot: u64,
    add: u64,
    probe: u64,
}

/// The IaaS node service.
pub struct IaasNode {
    cfg: NodeConfig,
    me: Endpoint,
    pub repo: RobotsRepository,
    pub leases: LeaseTable,
    pub gateways: GatewayPool,
    pub cache: DiscoveryCache,
    calls: BTreeMap<u64, Call>,
    pending_adds: BTreeMap<String, PendingAdd>,
    assignments: BTreeMap<String, TaskAssignment>,
    request_index: BTreeMap<String, String>,
    tasks: BTreeMap<String, TaskOwner>,
    hosted: BTreeMap<String, HostedTask>,
    overlay_versions: BTreeMap<String, u64>,
    seq: Counters,
    subscriber_id: Option<String>,
    probe: Option<Probe>,
    armed: BTreeSet<u64>,
    degraded: bool,
    pub irdd_samples: Vec<Millis>,
    pub tad_samples: Vec<TadSample>,
    pub unknown_events: u64,
}

fn ms_key(ms: Millis) -> u64 {
    (ms * 1000.0).round().max(0.0) as u64
}

impl IaasNode {
    pub fn new(cfg: NodeConfig) -> Result<Self, RepoError> {
        let repo = match &cfg.storage {
            Some(dir) => RobotsRepository::open(dir)?,
            None => RobotsRepository::new(),
        };
        Ok(IaasNode {
            gateways: GatewayPool::new(cfg.seed),
            cfg,
            me: Endpoint::new(""),
            repo,
            leases: LeaseTable::new(),
            cache: DiscoveryCache::default(),
            calls: BTreeMap::new(),
            pending_adds: BTreeMap::new(),
            assignments: BTreeMap::new(),
            request_index: BTreeMap::new(),
            tasks: BTreeMap::new(),
            hosted: BTreeMap::new(),
            overlay_versions: BTreeMap::new(),
            seq: Counters::default(),
            subscriber_id: None,
            probe: None,
            armed: BTreeSet::new(),
            degraded: false,
            irdd_samples: Vec::new(),
            tad_samples: Vec::new(),
            unknown_events: 0,
        })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.me
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn subscriber_id(&self) -> Option<&str> {
        self.subscriber_id.as_deref()
    }

    pub fn assignments(&self) -> impl Iterator<Item = &TaskAssignment> {
        self.assignments.values()
    }

    /// Assignment by assignment id or request id.
    pub fn assignment(&self, id: &str) -> Option<&TaskAssignment> {
        self.assignments
            .get(id)
            .or_else(|| self.assignments.get(self.request_index.get(id)?))
    }

    pub fn pending_adds(&self) -> usize {
        self.pending_adds.len()
    }

    pub fn hosted_tasks(&self) -> usize {
        self.hosted.len()
    }

    /// State of every robot in the repository.
    pub fn robot_states(&self) -> BTreeMap<String, RobotState> {
        self.repo
            .iter()
            .map(|e| (e.descriptor.robot_id.clone(), e.state()))
            .collect()
    }

    fn call(&mut self, to: &Endpoint, req: Request, call: Call, ctx: &mut dyn Context) {
        let token = ctx.send(to, req);
        self.calls.insert(token, call);
    }

    fn arm(&mut self, ctx: &mut dyn Context) {
        if let Some(deadline) = self.gateways.next_deadline() {
            if self.armed.insert(ms_key(deadline)) {
                ctx.schedule((deadline - ctx.now()).max(0.0), GATEWAY_TIMER);
            }
        }
    }

    // -- publication -------------------------------------------------------

    fn publish_new(&mut self, d: &RobotDescriptor, call: Call, ctx: &mut dyn Context) -> Result<(), NodeError> {
        match self.cfg.backend {
            Backend::Presence => {
                let Some(market) = self.cfg.marketplace.clone() else {
                    return Ok(());
                };
                let body = serialize_descriptor(d)?;
                self.call(&market, Request::post("/robots", body), call, ctx);
            }
            Backend::Overlay => self.advertise(d, ctx),
        }
        Ok(())
    }

    fn advertise(&mut self, d: &RobotDescriptor, ctx: &mut dyn Context) {
        let Some(overlay) = self.cfg.overlay.clone() else {
            return;
        };
        let v = self.overlay_versions.entry(d.robot_id.clone()).or_insert(0);
        *v += 1;
        let body = AdvertiseBody {
            descriptor: d.clone(),
            version: *v,
        };
        self.call(&overlay, Request::json(Method::Post, "/overlay/advertise", &body), Call::Other, ctx);
    }

    /// Re-publishes the current descriptor of an owned robot.
    fn republish(&mut self, robot_id: &str, ctx: &mut dyn Context) {
        let Some(entry) = self.repo.get(robot_id) else {
            return;
        };
        let d = entry.descriptor.clone();
        match self.cfg.backend {
            Backend::Presence => {
                let Some(market) = self.cfg.marketplace.clone() else {
                    return;
                };
                match serialize_descriptor(&d) {
                    Ok(body) => {
                        let req = Request::put(format!("/robots/{robot_id}"), body);
                        self.call(&market, req, Call::Other, ctx);
                    }
                    Err(e) => warn!("cannot republish {robot_id}: {e}"),
                }
            }
            Backend::Overlay => self.advertise(&d, ctx),
        }
        ctx.record("republish", json!({ "robotid": robot_id, "state": d.dynamic_ch.state }));
    }

    fn insert_local(&mut self, mut d: RobotDescriptor, fault_p: f64, ctx: &mut dyn Context) -> Result<(), NodeError> {
        d.dynamic_ch.state = RobotState::Idle;
        self.repo.insert(d.clone(), fault_p)?;
        let gateway_id = self.gateways.bind(&d, fault_p)?;
        ctx.record("robot_added", json!({ "robotid": d.robot_id, "gateway": gateway_id }));
        Ok(())
    }

    fn drop_local(&mut self, robot_id: &str, ctx: &mut dyn Context) {
        let _ = self.repo.remove(robot_id);
        self.gateways.unbind(robot_id, ctx.now());
        self.arm(ctx);
    }

    /// O&M: adds a robot from its metadata document.
    pub fn add_robot(&mut self, body: &str, fault_p: f64, ctx: &mut dyn Context) -> Result<Response, NodeError> {
        let d = parse_descriptor(body)?.normalized();
        if !d.is_publishable() {
            return Err(NodeError::Usage("robot has no capabilities".into()));
        }
        let key = metadata_key(&d)?;
        if self.repo.find_metadata(&key).is_some() || self.pending_adds.values().any(|p| p.key == key) {
            return Err(NodeError::Conflict("robot metadata already added".into()));
        }
        if !d.robot_id.is_empty() && self.repo.contains(&d.robot_id) {
            return Err(NodeError::Conflict(format!("robot `{}` already added", d.robot_id)));
        }
        let via_marketplace = self.cfg.backend == Backend::Presence && self.cfg.marketplace.is_some();
        if via_marketplace && d.robot_id.is_empty() {
            self.seq.add += 1;
            let pending = format!("add-{}", self.seq.add);
            self.publish_new(
                &d,
                Call::Publish {
                    pending: Some(pending.clone()),
                    rollback: None,
                },
                ctx,
            )?;
            self.pending_adds.insert(
                pending.clone(),
                PendingAdd {
                    descriptor: d,
                    key,
                    fault_p,
                },
            );
            return Ok(Response::json(202, &json!({ "pending": pending })));
        }
        let mut d = d;
        if d.robot_id.is_empty() {
            self.seq.robot += 1;
            d.robot_id = format!("{}-r{}", self.cfg.node_id, self.seq.robot);
        }
        let id = d.robot_id.clone();
        self.insert_local(d.clone(), fault_p, ctx)?;
        let stored = self.repo.get(&id).expect("inserted above").descriptor.clone();
        self.publish_new(
            &stored,
            Call::Publish {
                pending: None,
                rollback: Some(id.clone()),
            },
            ctx,
        )?;
        Ok(Response::json(201, &json!({ "robotid": id })))
    }

    /// O&M: removes an idle robot here and from the marketplace.
    pub fn remove_robot(&mut self, robot_id: &str, ctx: &mut dyn Context) -> Result<Response, NodeError> {
        if !self.repo.contains(robot_id) {
            return Err(NodeError::NotFound(format!("robot `{robot_id}`")));
        }
        let queued = self.gateways.robot(robot_id).is_some_and(|r| r.queued() > 0);
        if self.leases.is_leased(robot_id) || queued {
            return Err(NodeError::Busy(robot_id.to_string()));
        }
        match self.cfg.backend {
            Backend::Presence => {
                if let Some(market) = self.cfg.marketplace.clone() {
                    let target = format!("/robots/{robot_id}?owner={}", encode_query(self.me.as_str()));
                    self.call(&market, Request::delete(target), Call::Other, ctx);
                }
            }
            Backend::Overlay => {
                if let Some(e) = self.repo.get(robot_id) {
                    let mut d = e.descriptor.clone();
                    d.dynamic_ch.state = RobotState::Offline;
                    self.advertise(&d, ctx);
                }
            }
        }
        self.drop_local(robot_id, ctx);
        ctx.record("robot_removed", json!({ "robotid": robot_id }));
        Ok(Response::json(200, &json!({ "robotid": robot_id })))
    }

    fn reset_robot(&mut self, robot_id: &str, ctx: &mut dyn Context) -> Result<Response, NodeError> {
        let robot = self
            .gateways
            .robot_mut(robot_id)
            .ok_or_else(|| NodeError::NotFound(format!("robot `{robot_id}`")))?;
        robot.reset();
        self.sync_robot(robot_id, ctx);
        Ok(Response::json(200, &json!({ "robotid": robot_id })))
    }

    /// Copies the gateway's view of a robot into the repository and
    /// re-publishes it when its state changed.
    fn sync_robot(&mut self, robot_id: &str, ctx: &mut dyn Context) {
        let Some(r) = self.gateways.robot(robot_id) else {
            return;
        };
        let (state, position) = (r.state, r.position);
        match self.repo.set_dynamic(robot_id, state, position) {
            Ok(true) => self.republish(robot_id, ctx),
            Ok(false) => {}
            Err(e) => warn!("cannot update {robot_id}: {e}"),
        }
    }

    // -- discovery ---------------------------------------------------------

    /// Local matches plus cached remote presence state. A robot matches if
    /// it offers at least one required tag (any robot when `required` is
    /// empty).
    pub fn discover(&self, required: &CapabilitySet) -> Discovery {
        self.discover_with(required, false)
    }

    /// With `include_leased`, busy local robots count as available so that
    /// delegation surfaces the lease conflict instead of an empty cover.
    fn discover_with(&self, required: &CapabilitySet, include_leased: bool) -> Discovery {
        let matches = |d: &RobotDescriptor| required.is_empty() || !d.capability_set().intersection(required).is_empty();
        let mut out = Vec::new();
        for e in self.repo.iter() {
            let d = &e.descriptor;
            if !matches(d) {
                continue;
            }
            out.push(DiscoveredRobot {
                available: self.locally_available(d, required, include_leased),
                descriptor: d.clone(),
                owner: self.me.to_string(),
                local: true,
                state: e.state(),
            });
        }
        for c in self.cache.iter() {
            if c.owner == self.me.as_str() || self.repo.contains(&c.descriptor.robot_id) || !matches(&c.descriptor) {
                continue;
            }
            out.push(DiscoveredRobot {
                descriptor: c.descriptor.clone(),
                owner: c.owner.clone(),
                local: false,
                state: c.state,
                available: c.state == RobotState::Idle,
            });
        }
        out.sort_by(|a, b| {
            b.available
                .cmp(&a.available)
                .then_with(|| a.descriptor.robot_id.cmp(&b.descriptor.robot_id))
        });
        Discovery {
            candidates: out,
            degraded: self.degraded,
        }
    }

    /// An IDLE robot is available if its leases are free; a busy one only
    /// for sensor-only work.
    fn locally_available(&self, d: &RobotDescriptor, required: &CapabilitySet, include_leased: bool) -> bool {
        let state = d.dynamic_ch.state;
        if matches!(state, RobotState::Failed | RobotState::Offline) {
            return false;
        }
        if include_leased {
            return true;
        }
        let tags = d.capability_set().intersection(required);
        let leases = lease_requests(d, &commands_for(d, &tags, Location::default()));
        let sensor_only = leases.iter().all(|l| l.kind == LeaseKind::Shared);
        (state == RobotState::Idle || sensor_only) && self.leases.admits("", &leases)
    }

    fn plan(
        &self,
        required: &CapabilitySet,
        site: Location,
        exclude: &BTreeSet<String>,
        include_leased: bool,
    ) -> Result<(Coalition, bool, bool), CoalitionError> {
        let discovery = self.discover_with(required, include_leased);
        let available: Vec<Candidate> = discovery
            .candidates
            .into_iter()
            .filter(|c| c.available && !exclude.contains(&c.descriptor.robot_id))
            .map(|c| Candidate {
                descriptor: c.descriptor,
                owner_iaas: c.owner,
                remote: !c.local,
            })
            .collect();
        let local_full: Vec<Candidate> = available
            .iter()
            .filter(|c| !c.remote && c.descriptor.capability_set().is_superset(required))
            .cloned()
            .collect();
        if !local_full.is_empty() {
            let c = form_coalition(&local_full, required, site, &self.cfg.coalition)?;
            return Ok((c, true, discovery.degraded));
        }
        let c = form_coalition(&available, required, site, &self.cfg.coalition)?;
        Ok((c, false, discovery.degraded))
    }

    // -- requests and delegation --------------------------------------------

    /// Request handler: discover, form a coalition, compose and delegate.
    pub fn handle_request(&mut self, req: ServiceRequest, ctx: &mut dyn Context) -> Result<Value, NodeError> {
        req.validate()?;
        let now = ctx.now();
        self.seq.request += 1;
        let request_id = format!("{}-req-{}", self.cfg.node_id, self.seq.request);
        let mut task = req.task.clone();
        if task.task_id.is_empty() {
            task.task_id = request_id.clone();
        }
        let required = req.required_caps.clone();
        let none = BTreeSet::new();
        let planned = self
            .plan(&required, task.site, &none, false)
            .or_else(|e| self.plan(&required, task.site, &none, true).map_err(|_| e));
        let (coalition, fast_path, degraded) = match planned {
            Ok(p) => p,
            Err(e) => {
                ctx.record("request_rejected", json!({ "request_id": request_id, "error": e.to_string() }));
                return Err(e.into());
            }
        };
        self.seq.assignment += 1;
        let assignment_id = format!("{}-a{}", self.cfg.node_id, self.seq.assignment);
        let members = self.member_tasks(&coalition, &task);
        let a = TaskAssignment {
            assignment_id: assignment_id.clone(),
            request_id: request_id.clone(),
            required_caps: required,
            task,
            origin: req.origin.clone(),
            composite: coalition.pattern.clone(),
            coalition: coalition.clone(),
            replans: Vec::new(),
            members,
            status: AssignmentStatus::Running,
            fast_path,
            degraded,
            created_at: now,
            finished_at: None,
        };
        ctx.record(
            "coalition",
            json!({
                "assignment_id": assignment_id,
                "members": coalition.robot_ids(),
                "cost": coalition.cost,
                "composite": a.composite.capabilities,
                "fast_path": fast_path,
            }),
        );
        let idxs: Vec<usize> = (0..a.members.len()).collect();
        self.assignments.insert(assignment_id.clone(), a);
        self.request_index.insert(request_id.clone(), assignment_id.clone());
        if let Err(e) = self.delegate(&assignment_id, &idxs, ctx) {
            if let Some(a) = self.assignments.get_mut(&assignment_id) {
                a.finish(AssignmentStatus::Aborted, now);
            }
            ctx.record("assignment_aborted", json!({ "assignment_id": assignment_id, "error": e.to_string() }));
            return Err(e);
        }
        Ok(json!({
            "request_id": request_id,
            "assignment_id": assignment_id,
            "coalition": coalition,
            "fast_path": fast_path,
            "degraded": degraded,
        }))
    }

    fn member_tasks(&self, coalition: &Coalition, task: &TaskSpec) -> Vec<MemberTask> {
        coalition
            .members
            .iter()
            .map(|m| {
                let local = self.repo.contains(&m.robot_id);
                let d = if local {
                    self.repo.get(&m.robot_id).map(|e| e.descriptor.clone())
                } else {
                    self.cache.get(&m.robot_id).map(|c| c.descriptor.clone())
                }
                .unwrap_or_default();
                MemberTask {
                    robot_id: m.robot_id.clone(),
                    owner_iaas: m.owner_iaas.clone(),
                    local,
                    assigned: m.assigned.clone(),
                    commands: commands_for(&d, &m.assigned, task.site),
                    status: MemberStatus::Pending,
                    history: vec![MemberStatus::Pending],
                    sensed: Vec::new(),
                    reason: None,
                    replaced: false,
                }
            })
            .collect()
    }

    /// Task delegator: leases local members all-or-nothing, drives them
    /// through the gateways, and hands remote members to their owners.
    fn delegate(&mut self, assignment_id: &str, idxs: &[usize], ctx: &mut dyn Context) -> Result<(), NodeError> {
        let a = self.assignments.get(assignment_id).expect("delegating a known assignment");
        let mut wanted = Vec::new();
        for &i in idxs {
            let m = &a.members[i];
            if m.local {
                if let Some(e) = self.repo.get(&m.robot_id) {
                    wanted.extend(lease_requests(&e.descriptor, &m.commands));
                }
            }
        }
        self.leases.try_acquire(assignment_id, &wanted)?;
        let work_ms = a.task.duration_est;
        let now = ctx.now();
        for &i in idxs {
            let a = self.assignments.get_mut(assignment_id).expect("known assignment");
            let m = a.members[i].clone();
            if m.local {
                let owner = TaskOwner::Local {
                    assignment_id: assignment_id.to_string(),
                };
                match self.dispatch_local(&m.robot_id, &m.commands, work_ms, owner, ctx) {
                    Ok(_) => {
                        let a = self.assignments.get_mut(assignment_id).expect("known assignment");
                        a.members[i].advance(MemberStatus::Running);
                    }
                    Err(e) => {
                        self.leases.release_robot(assignment_id, &m.robot_id);
                        self.member_finished(assignment_id, &m.robot_id, false, Some(e.to_string()), ctx);
                    }
                }
            } else {
                let body = FederationTask {
                    assignment_id: assignment_id.to_string(),
                    origin: self.me.to_string(),
                    robot_id: m.robot_id.clone(),
                    commands: m.commands.clone(),
                    work_ms,
                    sent_at: now,
                    via_overlay: self.cfg.backend == Backend::Overlay,
                };
                a.members[i].advance(MemberStatus::Sent);
                ctx.record(
                    "tad_send",
                    json!({ "assignment_id": assignment_id, "robotid": m.robot_id, "to": m.owner_iaas }),
                );
                let call = Call::Federation {
                    assignment_id: assignment_id.to_string(),
                    robot_id: m.robot_id.clone(),
                };
                let payload = serde_json::to_string(&body)?;
                self.send_to_peer(&m.owner_iaas, "/federation/tasks", payload, call, ctx);
            }
        }
        Ok(())
    }

    fn send_to_peer(&mut self, owner: &str, target: &str, body: String, call: Call, ctx: &mut dyn Context) {
        match (self.cfg.backend, self.cfg.overlay.clone()) {
            (Backend::Overlay, Some(overlay)) => {
                let pipe = PipeBody {
                    dst: owner.to_string(),
                    target: target.to_string(),
                    body,
                };
                self.call(&overlay, Request::json(Method::Post, "/overlay/pipe", &pipe), Call::Other, ctx);
            }
            _ => {
                let ep = Endpoint::new(owner);
                self.call(&ep, Request::post(target, body), call, ctx);
            }
        }
    }

    fn dispatch_local(
        &mut self,
        robot_id: &str,
        commands: &[Command],
        work_ms: Millis,
        owner: TaskOwner,
        ctx: &mut dyn Context,
    ) -> Result<String, GatewayError> {
        self.seq.task += 1;
        let task_id = format!("t{}", self.seq.task);
        let lines = self
            .gateways
            .translate_and_send(robot_id, &task_id, commands, work_ms, ctx.now())?;
        for line in lines {
            ctx.record("frame", json!({ "robotid": robot_id, "line": line }));
        }
        self.tasks.insert(task_id.clone(), owner);
        self.sync_robot(robot_id, ctx);
        self.arm(ctx);
        Ok(task_id)
    }

    // -- monitoring --------------------------------------------------------

    /// Robot monitor: handles one event surfaced by the gateways.
    pub fn on_robot_event(&mut self, ev: RobotEvent, ctx: &mut dyn Context) {
        let Some(owner) = self.tasks.get(&ev.task_id).cloned() else {
            self.unknown_events += 1;
            warn!("dropping event for unknown task {} of {}", ev.task_id, ev.robot_id);
            return;
        };
        let line = match &ev.kind {
            EventKind::Done => format!("EVT {} DONE", ev.task_id),
            EventKind::Fail { reason } => format!("EVT {} FAIL {reason}", ev.task_id),
            EventKind::Sensed { tag, value } => format!("EVT {} SENSED {tag} {value:.2}", ev.task_id),
        };
        ctx.record("frame", json!({ "robotid": ev.robot_id, "line": line }));
        let (ok, reason) = match ev.kind {
            EventKind::Sensed { tag, value } => {
                let v = SensedValue { tag, value };
                match owner {
                    TaskOwner::Local { assignment_id } => {
                        if let Some(m) = self.member_mut(&assignment_id, &ev.robot_id) {
                            m.sensed.push(v);
                        }
                    }
                    TaskOwner::Hosted { key } => {
                        if let Some(h) = self.hosted.get_mut(&key) {
                            h.sensed.push(v);
                        }
                    }
                }
                return;
            }
            EventKind::Done => (true, None),
            EventKind::Fail { reason } => (false, Some(reason)),
        };
        self.tasks.remove(&ev.task_id);
        match owner {
            TaskOwner::Local { assignment_id } => {
                self.leases.release_robot(&assignment_id, &ev.robot_id);
                self.member_finished(&assignment_id, &ev.robot_id, ok, reason, ctx);
            }
            TaskOwner::Hosted { key } => {
                self.leases.release_robot(&key, &ev.robot_id);
                if let Some(h) = self.hosted.remove(&key) {
                    let event = FederationEvent {
                        assignment_id: h.assignment_id,
                        robot_id: h.robot_id,
                        ok,
                        reason,
                        sensed: h.sensed,
                        location: self.gateways.robot(&ev.robot_id).map(|r| r.position),
                    };
                    self.report_to_origin(&h.origin, h.via_overlay, &event, ctx);
                }
            }
        }
    }

    fn report_to_origin(&mut self, origin: &str, via_overlay: bool, event: &FederationEvent, ctx: &mut dyn Context) {
        let body = serde_json::to_string(event).expect("serializable event");
        if via_overlay && self.cfg.overlay.is_some() {
            self.send_to_peer(origin, "/federation/events", body, Call::Other, ctx);
        } else {
            self.call(&Endpoint::new(origin), Request::post("/federation/events", body), Call::Other, ctx);
        }
    }

    fn member_mut(&mut self, assignment_id: &str, robot_id: &str) -> Option<&mut MemberTask> {
        self.assignments
            .get_mut(assignment_id)?
            .members
            .iter_mut()
            .find(|m| m.robot_id == robot_id && !m.status.is_terminal())
    }

    fn member_finished(
        &mut self,
        assignment_id: &str,
        robot_id: &str,
        ok: bool,
        reason: Option<String>,
        ctx: &mut dyn Context,
    ) {
        let Some(a) = self.assignments.get_mut(assignment_id) else {
            return;
        };
        let Some(idx) = a
            .members
            .iter()
            .position(|m| m.robot_id == robot_id && !m.status.is_terminal())
        else {
            return;
        };
        let m = &mut a.members[idx];
        if ok {
            m.advance(MemberStatus::Done);
        } else {
            m.advance(MemberStatus::Failed);
            m.reason = reason.clone();
        }
        ctx.record(
            "member",
            json!({ "assignment_id": assignment_id, "robotid": robot_id, "status": m.status, "reason": reason }),
        );
        if !ok {
            self.replan(assignment_id, idx, ctx);
        }
        self.check_complete(assignment_id, ctx);
    }

    /// One re-planning attempt for the tags of a failed member.
    fn replan(&mut self, assignment_id: &str, idx: usize, ctx: &mut dyn Context) {
        let now = ctx.now();
        let a = self.assignments.get_mut(assignment_id).expect("known assignment");
        if a.status != AssignmentStatus::Running {
            return;
        }
        if a.replanned() {
            a.finish(AssignmentStatus::Failed, now);
            ctx.record("assignment_failed", json!({ "assignment_id": assignment_id, "reason": "re-plan exhausted" }));
            return;
        }
        let missing = a.members[idx].assigned.clone();
        let site = a.task.site;
        let exclude: BTreeSet<String> = a.members.iter().map(|m| m.robot_id.clone()).collect();
        let plan = self.plan(&missing, site, &exclude, false);
        let a = self.assignments.get_mut(assignment_id).expect("known assignment");
        match plan {
            Err(e) => {
                a.replans.push(Coalition {
                    members: Vec::new(),
                    cost: 0.0,
                    pattern: CompositeDescriptor::default(),
                    exact: true,
                });
                a.finish(AssignmentStatus::Failed, now);
                ctx.record("assignment_failed", json!({ "assignment_id": assignment_id, "reason": e.to_string() }));
            }
            Ok((c, _, _)) => {
                a.members[idx].replaced = true;
                a.replans.push(c.clone());
                let task = a.task.clone();
                let new_members = self.member_tasks(&c, &task);
                let a = self.assignments.get_mut(assignment_id).expect("known assignment");
                let start = a.members.len();
                a.members.extend(new_members);
                let idxs: Vec<usize> = (start..a.members.len()).collect();
                ctx.record("replan", json!({ "assignment_id": assignment_id, "members": c.robot_ids() }));
                if let Err(e) = self.delegate(assignment_id, &idxs, ctx) {
                    let a = self.assignments.get_mut(assignment_id).expect("known assignment");
                    for i in idxs {
                        a.members[i].advance(MemberStatus::Failed);
                    }
                    a.finish(AssignmentStatus::Failed, now);
                    ctx.record("assignment_failed", json!({ "assignment_id": assignment_id, "reason": e.to_string() }));
                }
            }
        }
    }

    fn check_complete(&mut self, assignment_id: &str, ctx: &mut dyn Context) {
        let now = ctx.now();
        let Some(a) = self.assignments.get_mut(assignment_id) else {
            return;
        };
        if a.status != AssignmentStatus::Running || !a.members.iter().all(|m| m.status.is_terminal()) {
            return;
        }
        let ok = a
            .members
            .iter()
            .all(|m| m.status == MemberStatus::Done || m.replaced);
        if ok {
            a.finish(AssignmentStatus::Done, now);
            ctx.record("assignment_done", json!({ "assignment_id": assignment_id }));
        } else {
            a.finish(AssignmentStatus::Failed, now);
            ctx.record("assignment_failed", json!({ "assignment_id": assignment_id }));
        }
    }

    // -- federation ----------------------------------------------------------

    fn accept_federation_task(&mut self, t: FederationTask, ctx: &mut dyn Context) -> Result<Response, NodeError> {
        let now = ctx.now();
        let sample = TadSample {
            assignment_id: t.assignment_id.clone(),
            robot_id: t.robot_id.clone(),
            origin: t.origin.clone(),
            value_ms: now - t.sent_at,
        };
        ctx.record("tad", serde_json::to_value(&sample)?);
        self.tad_samples.push(sample);

        let entry = self
            .repo
            .get(&t.robot_id)
            .ok_or_else(|| NodeError::NotFound(format!("robot `{}`", t.robot_id)))?;
        if entry.state() == RobotState::Failed {
            return Err(NodeError::Conflict(format!("robot `{}` is FAILED", t.robot_id)));
        }
        let key = format!("fed:{}:{}", t.assignment_id, t.robot_id);
        let wanted = lease_requests(&entry.descriptor, &t.commands);
        self.leases.try_acquire(&key, &wanted)?;
        let owner = TaskOwner::Hosted { key: key.clone() };
        match self.dispatch_local(&t.robot_id, &t.commands, t.work_ms, owner, ctx) {
            Ok(task_id) => {
                self.hosted.insert(
                    key,
                    HostedTask {
                        origin: t.origin,
                        assignment_id: t.assignment_id,
                        robot_id: t.robot_id,
                        via_overlay: t.via_overlay,
                        sensed: Vec::new(),
                    },
                );
                Ok(Response::json(202, &json!({ "task_id": task_id })))
            }
            Err(e) => {
                self.leases.release(&key);
                Err(e.into())
            }
        }
    }

    fn on_federation_task(&mut self, body: &str, ctx: &mut dyn Context) -> Response {
        let t: FederationTask = match serde_json::from_str(body) {
            Ok(t) => t,
            Err(e) => return NodeError::from(e).response(),
        };
        let (origin, via_overlay) = (t.origin.clone(), t.via_overlay);
        let (assignment_id, robot_id) = (t.assignment_id.clone(), t.robot_id.clone());
        match self.accept_federation_task(t, ctx) {
            Ok(r) => r,
            Err(e) => {
                ctx.record("federation_rejected", json!({ "assignment_id": assignment_id, "robotid": robot_id, "error": e.to_string() }));
                if via_overlay {
                    let event = FederationEvent {
                        assignment_id,
                        robot_id,
                        ok: false,
                        reason: Some(e.to_string()),
                        sensed: Vec::new(),
                        location: None,
                    };
                    self.report_to_origin(&origin, true, &event, ctx);
                }
                e.response()
            }
        }
    }

    fn on_federation_event(&mut self, body: &str, ctx: &mut dyn Context) -> Response {
        let ev: FederationEvent = match serde_json::from_str(body) {
            Ok(e) => e,
            Err(e) => return NodeError::from(e).response(),
        };
        if let Some(m) = self.member_mut(&ev.assignment_id, &ev.robot_id) {
            m.sensed.extend(ev.sensed.iter().cloned());
        }
        self.member_finished(&ev.assignment_id, &ev.robot_id, ev.ok, ev.reason, ctx);
        Response::json(200, &json!({ "assignment_id": ev.assignment_id }))
    }

    // -- discovery callbacks and probes ----------------------------------------

    fn on_notify(&mut self, req: &Request, ctx: &mut dyn Context) -> Response {
        let n: Notification = match serde_json::from_str(&req.body) {
            Ok(n) => n,
            Err(e) => return NodeError::from(e).response(),
        };
        if n.owner != self.me.as_str() && !self.repo.contains(&n.robot_id) && self.cache.apply(&n) {
            ctx.record(
                "cache",
                json!({ "robotid": n.robot_id, "state": n.state, "version": n.version }),
            );
        }
        if let (Some(probe), Some(id)) = (self.probe.as_mut(), req.query("probe")) {
            if n.initial && id == probe.id.to_string() {
                *probe.received.entry(n.subscriber_id.clone()).or_default() += 1;
            }
        }
        self.check_probe(ctx);
        Response::new(200, "")
    }

    fn check_probe(&mut self, ctx: &mut dyn Context) {
        let now = ctx.now();
        let Some(p) = self.probe.as_mut() else {
            return;
        };
        if p.done {
            return;
        }
        let (Some(sub), Some(expected)) = (&p.subscriber_id, p.expected) else {
            return;
        };
        if p.received.get(sub).copied().unwrap_or(0) >= expected {
            p.done = true;
            let value = now - p.start;
            self.irdd_samples.push(value);
            ctx.record("irdd", json!({ "value_ms": value, "robots": expected, "backend": "presence" }));
        }
    }

    fn start_probe(&mut self, ctx: &mut dyn Context) -> Result<Response, NodeError> {
        self.seq.probe += 1;
        let id = self.seq.probe;
        let mut probe = Probe {
            id,
            start: ctx.now(),
            subscriber_id: None,
            expected: None,
            received: BTreeMap::new(),
            query_id: None,
            done: false,
        };
        match self.cfg.backend {
            Backend::Presence => {
                let market = self
                    .cfg
                    .marketplace
                    .clone()
                    .ok_or_else(|| NodeError::Usage("no marketplace configured".into()))?;
                let fromuri = self.me.uri(&format!("/notify?probe={id}"));
                let req = Request::post(format!("/robots?fromuri={}", encode_query(&fromuri)), "");
                self.probe = Some(probe);
                self.call(&market, req, Call::ProbeSubscribe { probe: id }, ctx);
            }
            Backend::Overlay => {
                let overlay = self
                    .cfg
                    .overlay
                    .clone()
                    .ok_or_else(|| NodeError::Usage("no overlay node configured".into()))?;
                let query_id = format!("{}-q{id}", self.cfg.node_id);
                probe.query_id = Some(query_id.clone());
                self.probe = Some(probe);
                let body = DiscoverBody {
                    query_id,
                    caps: Vec::new(),
                    force_remote: true,
                };
                self.call(&overlay, Request::json(Method::Post, "/overlay/discover", &body), Call::Other, ctx);
            }
        }
        Ok(Response::json(202, &json!({ "probe": id })))
    }

    fn on_overlay_result(&mut self, body: &str, ctx: &mut dyn Context) -> Response {
        let r: DiscoverResult = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return NodeError::from(e).response(),
        };
        for ad in &r.ads {
            if ad.owner != self.me.as_str() {
                self.cache.apply(&Notification {
                    robot_id: ad.robot_id.clone(),
                    owner: ad.owner.clone(),
                    state: ad.state,
                    version: ad.version,
                    subscriber_id: String::new(),
                    initial: false,
                    descriptor: Some(ad.descriptor.clone()),
                });
            }
        }
        let now = ctx.now();
        if let Some(p) = self.probe.as_mut() {
            if !p.done && p.query_id.as_deref() == Some(r.query_id.as_str()) {
                p.done = true;
                let value = now - p.start;
                self.irdd_samples.push(value);
                ctx.record(
                    "irdd",
                    json!({ "value_ms": value, "robots": r.ads.len(), "backend": "overlay", "complete": r.complete }),
                );
            }
        }
        Response::new(200, "")
    }

    // -- routing ---------------------------------------------------------------

    fn dispatch(&mut self, req: &Request, ctx: &mut dyn Context) -> Result<Response, NodeError> {
        let segs = req.segments();
        match (req.method, segs.as_slice()) {
            (Method::Post, ["admin", "robots"]) => {
                let fault_p = req.query("fault_p").and_then(|p| p.parse().ok()).unwrap_or(0.0);
                self.add_robot(&req.body, fault_p, ctx)
            }
            (Method::Get, ["admin", "robots"]) => {
                let robots: Vec<&RobotDescriptor> = self.repo.iter().map(|e| &e.descriptor).collect();
                Ok(Response::json(200, &json!({ "robots": robots, "pending": self.pending_adds.len() })))
            }
            (Method::Delete, ["admin", "robots", id]) => self.remove_robot(id, ctx),
            (Method::Post, ["admin", "robots", id, "reset"]) => self.reset_robot(id, ctx),
            (Method::Post, ["services", "requests"]) => {
                let sr: ServiceRequest = serde_json::from_str(&req.body)?;
                let body = self.handle_request(sr, ctx)?;
                Ok(Response::json(201, &body))
            }
            (Method::Get, ["services", "requests", id]) => self
                .assignment(id)
                .map(|a| Response::json(200, a))
                .ok_or_else(|| NodeError::NotFound(format!("request `{id}`"))),
            (Method::Get, ["discovery"]) => {
                let caps: CapabilitySet = req
                    .query("caps")
                    .map(|c| c.split(',').map(str::to_string).collect())
                    .unwrap_or_default();
                Ok(Response::json(200, &self.discover(&caps)))
            }
            (Method::Post, ["discovery", "subscribe"]) => self.start_probe(ctx),
            (Method::Post, ["federation", "tasks"]) => Ok(self.on_federation_task(&req.body, ctx)),
            (Method::Post, ["federation", "events"]) => Ok(self.on_federation_event(&req.body, ctx)),
            (Method::Post, ["notify"]) => Ok(self.on_notify(req, ctx)),
            (Method::Post, ["overlay", "result"]) => Ok(self.on_overlay_result(&req.body, ctx)),
            (Method::Post, ["gateways", protocol]) => {
                let gw = self.gateways.ensure_gateway(protocol);
                Ok(Response::json(200, gw))
            }
            _ => Err(NodeError::NotFound(format!("route {} {}", req.method.as_str(), req.path()))),
        }
    }

    fn on_publish_reply(&mut self, pending: Option<String>, rollback: Option<String>, resp: Response, ctx: &mut dyn Context) {
        if resp.is_success() {
            let Some(p) = pending.and_then(|k| self.pending_adds.remove(&k)) else {
                return;
            };
            let id = serde_json::from_str::<Value>(&resp.body)
                .ok()
                .and_then(|v| v.get("robotid")?.as_str().map(String::from));
            let Some(id) = id else {
                warn!("publish reply without robot id: {}", resp.body);
                return;
            };
            let mut d = p.descriptor;
            d.robot_id = id;
            if let Err(e) = self.insert_local(d, p.fault_p, ctx) {
                warn!("cannot store published robot: {e}");
            }
            return;
        }
        if let Some(p) = pending {
            self.pending_adds.remove(&p);
        }
        if let Some(id) = rollback {
            self.drop_local(&id, ctx);
            ctx.record("add_rolled_back", json!({ "robotid": id, "status": resp.status }));
        } else {
            ctx.record("add_rejected", json!({ "status": resp.status, "body": resp.body }));
        }
    }
}

/// Commands for a member that contributes `assigned`: move to the site if
/// it contributes its movement motor, then sense or actuate every other
/// contributed tag.
pub fn commands_for(d: &RobotDescriptor, assigned: &CapabilitySet, site: Location) -> Vec<Command> {
    let mut out = Vec::new();
    if assigned.contains("movement-motor") && d.tag_kind("movement-motor") == Some(TagKind::Actuator) {
        out.push(Command::Move { x: site.x, y: site.y });
    }
    for tag in assigned.iter().filter(|t| t.as_str() != "movement-motor") {
        match d.tag_kind(tag) {
            Some(TagKind::Sensor) => out.push(Command::Sense { tag: tag.clone() }),
            Some(TagKind::Actuator | TagKind::Task) => out.push(Command::Actuate { tag: tag.clone() }),
            None => {}
        }
    }
    out
}

/// Leases a command list needs: moving and actuating are exclusive,
/// sensing is shared.
pub fn lease_requests(d: &RobotDescriptor, commands: &[Command]) -> Vec<LeaseRequest> {
    let id = d.robot_id.as_str();
    commands
        .iter()
        .map(|c| match c {
            Command::Move { .. } => LeaseRequest::new(id, "movement-motor", LeaseKind::Exclusive),
            Command::Actuate { tag } => LeaseRequest::new(id, tag, LeaseKind::Exclusive),
            Command::Sense { tag } => LeaseRequest::new(id, tag, LeaseKind::Shared),
        })
        .collect()
}

impl Service for IaasNode {
    fn start(&mut self, ctx: &mut dyn Context) {
        self.me = ctx.me().clone();
        let loaded: Vec<RepoEntry> = self.repo.iter().cloned().collect();
        for e in loaded {
            if let Err(err) = self.gateways.bind(&e.descriptor, e.fault_p) {
                warn!("cannot bind stored robot: {err}");
            }
            let call = Call::Publish {
                pending: None,
                rollback: None,
            };
            if let Err(err) = self.publish_new(&e.descriptor, call, ctx) {
                warn!("cannot publish stored robot: {err}");
            }
        }
        if self.cfg.backend == Backend::Presence && self.cfg.standing_subscription {
            if let Some(market) = self.cfg.marketplace.clone() {
                let fromuri = self.me.uri("/notify");
                let req = Request::post(format!("/robots?fromuri={}", encode_query(&fromuri)), "");
                self.call(&market, req, Call::Subscribe, ctx);
            }
        }
    }

    fn handle(&mut self, _from: &Endpoint, req: &Request, ctx: &mut dyn Context) -> Response {
        self.dispatch(req, ctx).unwrap_or_else(|e| e.response())
    }

    fn on_reply(&mut self, token: u64, resp: Response, ctx: &mut dyn Context) {
        let Some(call) = self.calls.remove(&token) else {
            return;
        };
        let body = || serde_json::from_str::<Value>(&resp.body).unwrap_or(Value::Null);
        match call {
            Call::Publish { pending, rollback } => self.on_publish_reply(pending, rollback, resp, ctx),
            Call::Subscribe => {
                if resp.is_success() {
                    self.subscriber_id = body()["subscriberid"].as_str().map(String::from);
                    self.degraded = false;
                } else {
                    self.degraded = true;
                    ctx.record("degraded", json!({ "status": resp.status }));
                }
            }
            Call::ProbeSubscribe { probe } => {
                let v = body();
                if let Some(p) = self.probe.as_mut().filter(|p| p.id == probe) {
                    if resp.is_success() {
                        p.subscriber_id = v["subscriberid"].as_str().map(String::from);
                        p.expected = v["initial"].as_u64().map(|n| n as usize);
                    } else {
                        p.done = true;
                        ctx.record("irdd_censored", json!({ "status": resp.status }));
                    }
                }
                self.check_probe(ctx);
            }
            Call::Federation { assignment_id, robot_id } => {
                if resp.is_success() {
                    if let Some(m) = self.member_mut(&assignment_id, &robot_id) {
                        m.advance(MemberStatus::Running);
                    }
                } else {
                    let reason = format!("rejected by owner ({})", resp.status);
                    self.member_finished(&assignment_id, &robot_id, false, Some(reason), ctx);
                }
            }
            Call::Other => {
                if !resp.is_success() {
                    warn!("call failed with {}: {}", resp.status, resp.body);
                }
            }
        }
    }

    fn on_timer(&mut self, _tag: u64, ctx: &mut dyn Context) {
        let now = ctx.now();
        let key = ms_key(now);
        self.armed.retain(|&k| k > key);
        let events = self.gateways.sim_step(now);
        let touched: BTreeSet<String> = events.iter().map(|e| e.robot_id.clone()).collect();
        for ev in events {
            self.on_robot_event(ev, ctx);
        }
        for id in touched {
            self.sync_robot(&id, ctx);
        }
        self.arm(ctx);
    }
}
