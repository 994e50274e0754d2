//! Robots services marketplace: a presence server.
//!
//! Publishers (IaaS publication engines) create and update presentities
//! (robots); watchers (IaaS discovery engines) subscribe to one robot or to
//! all of them and receive a callback `POST` on their `fromuri` for every
//! state-changing publication. The REST surface follows the publication
//! interface routes:
//!
//! | Operation                 | Route                                        |
//! |---------------------------|----------------------------------------------|
//! | publish                   | `POST /robots`                               |
//! | subscribe to one robot    | `POST /robots/{robotid}?fromuri={uri}`       |
//! | subscribe to all robots   | `POST /robots?fromuri={uri}`                 |
//! | re-publish                | `PUT /robots/{robotid}`                      |
//! | unsubscribe (one robot)   | `DELETE /robots/{robotid}/{subscriberid}`    |
//! | unsubscribe (all robots)  | `DELETE /robots/{subscriberid}`              |
//!
//! Extensions: `DELETE /robots/{robotid}?owner={iaasuri}` removes a robot
//! and `GET /robots?caps=a,b&state=IDLE` queries records without
//! subscribing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::descriptor::{
    parse_descriptor, serialize_descriptor, validate_robot_id, CapabilitySet, DescriptorError,
    RobotDescriptor, RobotState,
};
use crate::net::{Context, Endpoint, Method, Millis, Request, Response, Service};

pub const ROBOT_ID_PREFIX: &str = "rob-";
pub const SUBSCRIBER_ID_PREFIX: &str = "sub-";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PresenceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("`{caller}` does not own robot `{robot_id}`")]
    Forbidden { robot_id: String, caller: String },
    #[error("invalid descriptor: {0}")]
    Invalid(#[from] DescriptorError),
    #[error("bad request: {0}")]
    Usage(String),
}

impl PresenceError {
    pub fn status(&self) -> u16 {
        match self {
            PresenceError::NotFound(_) => 404,
            PresenceError::Conflict(_) => 409,
            PresenceError::Forbidden { .. } => 403,
            PresenceError::Invalid(_) => 422,
            PresenceError::Usage(_) => 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceRecord {
    pub robot_id: String,
    pub owner_iaas: String,
    pub descriptor: RobotDescriptor,
    pub state: RobotState,
    pub version: u64,
    pub updated_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Robot(String),
    All,
}

impl Scope {
    fn matches(&self, robot_id: &str) -> bool {
        match self {
            Scope::All => true,
            Scope::Robot(id) => id == robot_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub subscriber_id: String,
    pub subscriber_uri: String,
    pub scope: Scope,
    pub created_at: Millis,
}

/// Body of the callback `POST` sent to a watcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    #[serde(rename = "robotid")]
    pub robot_id: String,
    pub owner: String,
    pub state: RobotState,
    pub version: u64,
    #[serde(rename = "subscriberid")]
    pub subscriber_id: String,
    /// True for the notification sent right after subscribing.
    #[serde(default)]
    pub initial: bool,
    /// Full descriptor on the first notification of a subscription (and
    /// whenever the descriptor itself changed); state-only otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<RobotDescriptor>,
}

/// A notification bound for a watcher's callback URI.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub to_uri: String,
    pub notification: Notification,
}

/// Result of a marketplace operation plus the notifications it triggered.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome<T> {
    pub value: T,
    pub deliveries: Vec<Delivery>,
}

impl<T> Outcome<T> {
    fn new(value: T, deliveries: Vec<Delivery>) -> Self {
        Outcome { value, deliveries }
    }
}

/// What a re-publication changes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Update {
    pub state: Option<RobotState>,
    pub descriptor: Option<RobotDescriptor>,
    /// Optimistic concurrency check against the current version.
    pub expected_version: Option<u64>,
}

/// Presence state with no transport attached.
#[derive(Debug, Default)]
pub struct Marketplace {
    records: BTreeMap<String, PresenceRecord>,
    /// Last version of removed robots, so a re-published id keeps counting up.
    retired: BTreeMap<String, u64>,
    subs: BTreeMap<String, Subscription>,
    /// (subscriber, robot) pairs that already received the full descriptor.
    described: BTreeSet<(String, String)>,
    next_robot: u64,
    next_sub: u64,
    storage: Option<PathBuf>,
}

impl Marketplace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Persists one canonical descriptor document per robot under `dir`.
    pub fn with_storage(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Marketplace {
            storage: Some(dir),
            ..Default::default()
        })
    }

    pub fn record(&self, robot_id: &str) -> Option<&PresenceRecord> {
        self.records.get(robot_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &PresenceRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subs.values()
    }

    fn fresh_robot_id(&mut self) -> String {
        loop {
            self.next_robot += 1;
            let id = format!("{ROBOT_ID_PREFIX}{}", self.next_robot);
            if !self.records.contains_key(&id) && !self.retired.contains_key(&id) {
                return id;
            }
        }
    }

    fn notification(&mut self, sub_id: &str, rec: &PresenceRecord, initial: bool, force_full: bool) -> Notification {
        let first = self
            .described
            .insert((sub_id.to_string(), rec.robot_id.clone()));
        Notification {
            robot_id: rec.robot_id.clone(),
            owner: rec.owner_iaas.clone(),
            state: rec.state,
            version: rec.version,
            subscriber_id: sub_id.to_string(),
            initial,
            descriptor: (first || force_full).then(|| rec.descriptor.clone()),
        }
    }

    fn fan_out(&mut self, rec: &PresenceRecord, force_full: bool) -> Vec<Delivery> {
        let targets: Vec<(String, String)> = self
            .subs
            .values()
            .filter(|s| s.scope.matches(&rec.robot_id))
            .map(|s| (s.subscriber_id.clone(), s.subscriber_uri.clone()))
            .collect();
        targets
            .into_iter()
            .map(|(sub_id, uri)| Delivery {
                to_uri: uri,
                notification: self.notification(&sub_id, rec, false, force_full),
            })
            .collect()
    }

    fn persist(&self, rec: &PresenceRecord) {
        if let Some(dir) = &self.storage {
            let path = dir.join(format!("{}.robot.senml.json", rec.robot_id));
            match serialize_descriptor(&rec.descriptor) {
                Ok(text) => {
                    if let Err(e) = fs::write(&path, text) {
                        warn!("cannot persist {}: {e}", path.display());
                    }
                }
                Err(e) => warn!("cannot serialize {}: {e}", rec.robot_id),
            }
        }
    }

    fn unpersist(&self, robot_id: &str) {
        if let Some(dir) = &self.storage {
            let _ = fs::remove_file(dir.join(format!("{robot_id}.robot.senml.json")));
        }
    }

    /// Creates a presentity in state IDLE, version 1 (or one past the last
    /// version of a removed robot with the same id).
    pub fn publish(
        &mut self,
        descriptor: RobotDescriptor,
        owner: &str,
        now: Millis,
    ) -> Result<Outcome<(String, u64)>, PresenceError> {
        descriptor.validate()?;
        if !descriptor.is_publishable() {
            return Err(PresenceError::Usage(
                "descriptor has an empty capability set".into(),
            ));
        }
        let mut descriptor = descriptor.normalized();
        let robot_id = if descriptor.robot_id.is_empty() {
            self.fresh_robot_id()
        } else {
            descriptor.robot_id.clone()
        };
        if robot_id.starts_with(SUBSCRIBER_ID_PREFIX) {
            return Err(PresenceError::Usage(format!(
                "robot ids may not start with `{SUBSCRIBER_ID_PREFIX}`"
            )));
        }
        if self.records.contains_key(&robot_id) {
            return Err(PresenceError::Conflict(format!("robot `{robot_id}` already published")));
        }
        descriptor.robot_id = robot_id.clone();
        descriptor.dynamic_ch.state = RobotState::Idle;
        let version = self.retired.remove(&robot_id).unwrap_or(0) + 1;
        let rec = PresenceRecord {
            robot_id: robot_id.clone(),
            owner_iaas: owner.to_string(),
            descriptor,
            state: RobotState::Idle,
            version,
            updated_at: now,
        };
        self.persist(&rec);
        let deliveries = self.fan_out(&rec, false);
        self.records.insert(robot_id.clone(), rec);
        Ok(Outcome::new((robot_id, version), deliveries))
    }

    fn find_sub(&self, uri: &str, scope: &Scope) -> Option<String> {
        self.subs
            .values()
            .find(|s| s.subscriber_uri == uri && &s.scope == scope)
            .map(|s| s.subscriber_id.clone())
    }

    fn new_sub(&mut self, uri: &str, scope: Scope, now: Millis) -> String {
        self.next_sub += 1;
        let id = format!("{SUBSCRIBER_ID_PREFIX}{}", self.next_sub);
        self.subs.insert(
            id.clone(),
            Subscription {
                subscriber_id: id.clone(),
                subscriber_uri: uri.to_string(),
                scope,
                created_at: now,
            },
        );
        id
    }

    fn check_uri(uri: &str) -> Result<(), PresenceError> {
        Endpoint::split_uri(uri)
            .map(|_| ())
            .ok_or_else(|| PresenceError::Usage(format!("`{uri}` is not a valid callback URI")))
    }

    /// Subscribes `fromuri` to one robot. Re-subscribing the same pair
    /// returns the existing id without a new initial notification.
    pub fn subscribe(
        &mut self,
        robot_id: &str,
        fromuri: &str,
        now: Millis,
    ) -> Result<Outcome<String>, PresenceError> {
        Self::check_uri(fromuri)?;
        let rec = self
            .records
            .get(robot_id)
            .cloned()
            .ok_or_else(|| PresenceError::NotFound(format!("robot `{robot_id}`")))?;
        let scope = Scope::Robot(robot_id.to_string());
        if let Some(existing) = self.find_sub(fromuri, &scope) {
            return Ok(Outcome::new(existing, Vec::new()));
        }
        let id = self.new_sub(fromuri, scope, now);
        let n = self.notification(&id, &rec, true, false);
        Ok(Outcome::new(
            id,
            vec![Delivery {
                to_uri: fromuri.to_string(),
                notification: n,
            }],
        ))
    }

    /// Subscribes `fromuri` to every robot, current and future. The initial
    /// notifications carry the current state of every record.
    pub fn subscribe_all(&mut self, fromuri: &str, now: Millis) -> Result<Outcome<String>, PresenceError> {
        Self::check_uri(fromuri)?;
        if let Some(existing) = self.find_sub(fromuri, &Scope::All) {
            return Ok(Outcome::new(existing, Vec::new()));
        }
        let id = self.new_sub(fromuri, Scope::All, now);
        let recs: Vec<PresenceRecord> = self.records.values().cloned().collect();
        let deliveries = recs
            .iter()
            .map(|rec| Delivery {
                to_uri: fromuri.to_string(),
                notification: self.notification(&id, rec, true, false),
            })
            .collect();
        Ok(Outcome::new(id, deliveries))
    }

    /// Re-publishes a robot. The version always increments; watchers are
    /// notified only when the state or the descriptor changed.
    pub fn republish(
        &mut self,
        robot_id: &str,
        caller: &str,
        update: Update,
        now: Millis,
    ) -> Result<Outcome<u64>, PresenceError> {
        let rec = self
            .records
            .get(robot_id)
            .ok_or_else(|| PresenceError::NotFound(format!("robot `{robot_id}`")))?;
        if rec.owner_iaas != caller {
            return Err(PresenceError::Forbidden {
                robot_id: robot_id.to_string(),
                caller: caller.to_string(),
            });
        }
        if let Some(expected) = update.expected_version {
            if expected != rec.version {
                return Err(PresenceError::Conflict(format!(
                    "stale version {expected}, current is {}",
                    rec.version
                )));
            }
        }
        let mut descriptor = match update.descriptor {
            Some(d) => {
                d.validate()?;
                if !d.robot_id.is_empty() && d.robot_id != robot_id {
                    return Err(PresenceError::Usage(format!(
                        "descriptor id `{}` does not match `{robot_id}`",
                        d.robot_id
                    )));
                }
                let mut d = d.normalized();
                d.robot_id = robot_id.to_string();
                d
            }
            None => rec.descriptor.clone(),
        };
        let state = update.state.unwrap_or(descriptor.dynamic_ch.state);
        descriptor.dynamic_ch.state = state;

        let mut old_static = rec.descriptor.clone();
        old_static.dynamic_ch.state = state;
        let descriptor_changed = old_static != descriptor;
        let changed = descriptor_changed || state != rec.state;

        let rec = self.records.get_mut(robot_id).expect("checked above");
        rec.version += 1;
        rec.state = state;
        rec.descriptor = descriptor;
        rec.updated_at = now;
        let snapshot = rec.clone();
        let version = snapshot.version;
        if descriptor_changed {
            self.persist(&snapshot);
        }
        let deliveries = if changed {
            self.fan_out(&snapshot, descriptor_changed)
        } else {
            debug!("no-change re-publication of {robot_id}, notifications suppressed");
            Vec::new()
        };
        Ok(Outcome::new(version, deliveries))
    }

    pub fn unsubscribe(&mut self, robot_id: &str, subscriber_id: &str) -> Result<(), PresenceError> {
        match self.subs.get(subscriber_id) {
            Some(s) if s.scope == Scope::Robot(robot_id.to_string()) => {
                self.drop_sub(subscriber_id);
                Ok(())
            }
            _ => Err(PresenceError::NotFound(format!(
                "subscription `{subscriber_id}` on `{robot_id}`"
            ))),
        }
    }

    pub fn unsubscribe_all(&mut self, subscriber_id: &str) -> Result<(), PresenceError> {
        if self.subs.contains_key(subscriber_id) {
            self.drop_sub(subscriber_id);
            Ok(())
        } else {
            Err(PresenceError::NotFound(format!("subscription `{subscriber_id}`")))
        }
    }

    fn drop_sub(&mut self, subscriber_id: &str) {
        self.subs.remove(subscriber_id);
        self.described.retain(|(s, _)| s != subscriber_id);
    }

    /// Notifies watchers with state OFFLINE, then deletes the record.
    /// Subscriptions scoped to the removed robot are dropped with it.
    pub fn remove_robot(
        &mut self,
        robot_id: &str,
        caller: &str,
        now: Millis,
    ) -> Result<Outcome<u64>, PresenceError> {
        let out = self.republish(
            robot_id,
            caller,
            Update {
                state: Some(RobotState::Offline),
                ..Default::default()
            },
            now,
        )?;
        let rec = self.records.remove(robot_id).expect("republished above");
        self.retired.insert(robot_id.to_string(), rec.version);
        self.unpersist(robot_id);
        let scoped: Vec<String> = self
            .subs
            .values()
            .filter(|s| s.scope == Scope::Robot(robot_id.to_string()))
            .map(|s| s.subscriber_id.clone())
            .collect();
        for s in scoped {
            self.drop_sub(&s);
        }
        self.described.retain(|(_, r)| r != robot_id);
        Ok(out)
    }

    /// Records whose capabilities include every tag of `caps` and whose
    /// state equals `state`, ordered by robot id.
    pub fn query_robots(&self, caps: Option<&CapabilitySet>, state: Option<RobotState>) -> Vec<PresenceRecord> {
        self.records
            .values()
            .filter(|r| caps.is_none_or(|c| r.descriptor.capability_set().is_superset(c)))
            .filter(|r| state.is_none_or(|s| r.state == s))
            .cloned()
            .collect()
    }
}

// ---------------------------------------------------------------------------
// REST surface

/// A request resolved against the marketplace routes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Publish { owner: Option<String> },
    SubscribeAll { fromuri: String },
    Subscribe { robot_id: String, fromuri: String },
    Republish { robot_id: String, owner: Option<String>, version: Option<u64> },
    Unsubscribe { robot_id: String, subscriber_id: String },
    UnsubscribeAll { subscriber_id: String },
    Remove { robot_id: String, owner: String },
    Query { caps: Option<String>, state: Option<String> },
    Get { robot_id: String },
}

/// Resolves a request. The `fromuri` parameter selects subscription
/// semantics on `POST`; the `sub-` prefix selects unsubscription on the
/// single-segment `DELETE`.
pub fn route(req: &Request) -> Result<Route, PresenceError> {
    let segs = req.segments();
    if segs.first() != Some(&"robots") {
        return Err(PresenceError::NotFound(format!("route {}", req.path())));
    }
    let fromuri = req.query("fromuri");
    let owner = req.query("owner");
    let bad = || PresenceError::Usage(format!("unsupported {} {}", req.method.as_str(), req.target));
    match (req.method, &segs[1..]) {
        (Method::Post, []) => Ok(match fromuri {
            Some(fromuri) => Route::SubscribeAll { fromuri },
            None => Route::Publish { owner },
        }),
        (Method::Post, [robot_id]) => match fromuri {
            Some(fromuri) => Ok(Route::Subscribe {
                robot_id: robot_id.to_string(),
                fromuri,
            }),
            None => Err(bad()),
        },
        (Method::Put, [robot_id]) => Ok(Route::Republish {
            robot_id: robot_id.to_string(),
            owner,
            version: req.query("version").and_then(|v| v.parse().ok()),
        }),
        (Method::Delete, [robot_id, subscriber_id]) => Ok(Route::Unsubscribe {
            robot_id: robot_id.to_string(),
            subscriber_id: subscriber_id.to_string(),
        }),
        (Method::Delete, [id]) if id.starts_with(SUBSCRIBER_ID_PREFIX) => Ok(Route::UnsubscribeAll {
            subscriber_id: id.to_string(),
        }),
        (Method::Delete, [robot_id]) => match owner {
            Some(owner) => Ok(Route::Remove {
                robot_id: robot_id.to_string(),
                owner,
            }),
            None => Err(bad()),
        },
        (Method::Get, []) => Ok(Route::Query {
            caps: req.query("caps"),
            state: req.query("state"),
        }),
        (Method::Get, [robot_id]) => Ok(Route::Get {
            robot_id: robot_id.to_string(),
        }),
        _ => Err(bad()),
    }
}

/// Body of `PUT /robots/{robotid}`: either a full descriptor document or a
/// state-only update `{"state": "EXECUTING"}`.
pub fn parse_update(body: &str) -> Result<Update, PresenceError> {
    let value: Value = serde_json::from_str(body).map_err(|e| {
        PresenceError::Invalid(DescriptorError::Parse {
            offset: 0,
            message: e.to_string(),
        })
    })?;
    if let Some(state) = value.get("state").and_then(Value::as_str) {
        return Ok(Update {
            state: Some(state.parse()?),
            ..Default::default()
        });
    }
    Ok(Update {
        descriptor: Some(parse_descriptor(body)?),
        ..Default::default()
    })
}

/// The marketplace bound to a transport.
pub struct MarketplaceService {
    pub market: Marketplace,
    /// Notification callbacks that failed (unreachable watcher).
    pub failed_deliveries: u64,
}

impl MarketplaceService {
    pub fn new(market: Marketplace) -> Self {
        MarketplaceService {
            market,
            failed_deliveries: 0,
        }
    }

    fn deliver(&self, deliveries: Vec<Delivery>, ctx: &mut dyn Context) -> usize {
        let n = deliveries.len();
        for d in deliveries {
            match Endpoint::split_uri(&d.to_uri) {
                Some((ep, target)) => {
                    ctx.record(
                        "notify",
                        json!({
                            "robotid": d.notification.robot_id,
                            "subscriberid": d.notification.subscriber_id,
                            "version": d.notification.version,
                            "state": d.notification.state,
                            "initial": d.notification.initial,
                        }),
                    );
                    ctx.send(&ep, Request::json(Method::Post, target, &d.notification));
                }
                None => warn!("dropping notification to invalid uri {}", d.to_uri),
            }
        }
        n
    }

    fn dispatch(&mut self, from: &Endpoint, req: &Request, ctx: &mut dyn Context) -> Result<Response, PresenceError> {
        let now = ctx.now();
        match route(req)? {
            Route::Publish { owner } => {
                let owner = owner.unwrap_or_else(|| from.to_string());
                let d = parse_descriptor(&req.body)?;
                let out = self.market.publish(d, &owner, now)?;
                let (robot_id, version) = out.value;
                ctx.record("publish", json!({ "robotid": robot_id, "owner": owner }));
                self.deliver(out.deliveries, ctx);
                Ok(Response::json(201, &json!({ "robotid": robot_id, "version": version })))
            }
            Route::SubscribeAll { fromuri } => {
                let out = self.market.subscribe_all(&fromuri, now)?;
                let n = self.deliver(out.deliveries, ctx);
                Ok(Response::json(201, &json!({ "subscriberid": out.value, "initial": n })))
            }
            Route::Subscribe { robot_id, fromuri } => {
                let out = self.market.subscribe(&robot_id, &fromuri, now)?;
                let n = self.deliver(out.deliveries, ctx);
                Ok(Response::json(201, &json!({ "subscriberid": out.value, "initial": n })))
            }
            Route::Republish { robot_id, owner, version } => {
                let caller = owner.unwrap_or_else(|| from.to_string());
                let mut update = parse_update(&req.body)?;
                update.expected_version = version;
                let out = self.market.republish(&robot_id, &caller, update, now)?;
                let n = self.deliver(out.deliveries, ctx);
                Ok(Response::json(200, &json!({ "robotid": robot_id, "version": out.value, "notified": n })))
            }
            Route::Unsubscribe { robot_id, subscriber_id } => {
                self.market.unsubscribe(&robot_id, &subscriber_id)?;
                Ok(Response::json(200, &json!({ "subscriberid": subscriber_id })))
            }
            Route::UnsubscribeAll { subscriber_id } => {
                self.market.unsubscribe_all(&subscriber_id)?;
                Ok(Response::json(200, &json!({ "subscriberid": subscriber_id })))
            }
            Route::Remove { robot_id, owner } => {
                let out = self.market.remove_robot(&robot_id, &owner, now)?;
                self.deliver(out.deliveries, ctx);
                ctx.record("remove", json!({ "robotid": robot_id }));
                Ok(Response::json(200, &json!({ "robotid": robot_id, "version": out.value })))
            }
            Route::Query { caps, state } => {
                let caps: Option<CapabilitySet> = caps.map(|c| c.split(',').collect());
                let state = state.map(|s| s.parse()).transpose()?;
                Ok(Response::json(200, &self.market.query_robots(caps.as_ref(), state)))
            }
            Route::Get { robot_id } => {
                validate_robot_id(&robot_id)?;
                match self.market.record(&robot_id) {
                    Some(r) => Ok(Response::json(200, r)),
                    None => Err(PresenceError::NotFound(format!("robot `{robot_id}`"))),
                }
            }
        }
    }
}

impl Service for MarketplaceService {
    fn handle(&mut self, from: &Endpoint, req: &Request, ctx: &mut dyn Context) -> Response {
        self.dispatch(from, req, ctx)
            .unwrap_or_else(|e| Response::error(e.status(), e))
    }

    fn on_reply(&mut self, _token: u64, resp: Response, _ctx: &mut dyn Context) {
        if !resp.is_success() {
            self.failed_deliveries += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn robot(caps: &[&str]) -> RobotDescriptor {
        let acts: Vec<String> = caps.iter().map(|c| format!("[\"{c}\"]")).collect();
        parse_descriptor(&format!("{{\"act\":[{}]}}", acts.join(","))).unwrap()
    }

    fn light() -> RobotDescriptor {
        parse_descriptor(r#"{"sen":[{"sname":"light","sval":"(0,100)","su":"lux"}],"act":[["kicking-arm"],["movement-motor"]]}"#).unwrap()
    }

    const W1: &str = "sim://iaas-1/notify";
    const W2: &str = "sim://iaas-2/notify";

    #[test]
    fn first_publication_gets_rob_1() {
        let mut m = Marketplace::new();
        let out = m.publish(light(), "sim://iaas-1", 0.0).unwrap();
        assert_eq!(out.value, ("rob-1".to_string(), 1));
        assert_eq!(m.record("rob-1").unwrap().state, RobotState::Idle);
    }

    #[test]
    fn duplicate_publication_conflicts() {
        let mut m = Marketplace::new();
        let mut d = light();
        d.robot_id = "rob-7".into();
        m.publish(d.clone(), "a", 0.0).unwrap();
        let before = m.record("rob-7").cloned();
        assert!(matches!(m.publish(d, "a", 1.0), Err(PresenceError::Conflict(_))));
        assert_eq!(m.record("rob-7").cloned(), before);
    }

    #[test]
    fn unpublishable_and_sub_prefixed_ids_are_rejected() {
        let mut m = Marketplace::new();
        assert!(matches!(m.publish(RobotDescriptor::default(), "a", 0.0), Err(PresenceError::Usage(_))));
        let mut d = light();
        d.robot_id = "sub-3".into();
        assert!(matches!(m.publish(d, "a", 0.0), Err(PresenceError::Usage(_))));
    }

    #[test]
    fn subscribe_sends_one_initial_notification() {
        let mut m = Marketplace::new();
        m.publish(light(), "a", 0.0).unwrap();
        let out = m.subscribe("rob-1", W1, 1.0).unwrap();
        assert_eq!(out.value, "sub-1");
        assert_eq!(out.deliveries.len(), 1);
        let n = &out.deliveries[0].notification;
        assert_eq!(n.state, RobotState::Idle);
        assert!(n.initial && n.descriptor.is_some());
        // idempotent
        let again = m.subscribe("rob-1", W1, 2.0).unwrap();
        assert_eq!(again.value, "sub-1");
        assert!(again.deliveries.is_empty());
    }

    #[test]
    fn subscribe_unknown_robot_stores_nothing() {
        let mut m = Marketplace::new();
        assert!(matches!(m.subscribe("rob-99", W1, 0.0), Err(PresenceError::NotFound(_))));
        assert_eq!(m.subscriptions().count(), 0);
    }

    #[test]
    fn subscribe_all_then_publish_k() {
        let mut m = Marketplace::new();
        let out = m.subscribe_all(W1, 0.0).unwrap();
        assert!(out.deliveries.is_empty());
        let total: usize = (0..5)
            .map(|_| m.publish(light(), "a", 0.0).unwrap().deliveries.len())
            .sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn republish_notifies_once_and_suppresses_no_change() {
        let mut m = Marketplace::new();
        m.publish(light(), "a", 0.0).unwrap();
        m.subscribe("rob-1", W1, 0.0).unwrap();
        let out = m
            .republish("rob-1", "a", Update { state: Some(RobotState::Executing), ..Default::default() }, 1.0)
            .unwrap();
        assert_eq!(out.value, 2);
        assert_eq!(out.deliveries.len(), 1);
        let n = &out.deliveries[0].notification;
        assert_eq!((n.state, n.version), (RobotState::Executing, 2));
        assert!(n.descriptor.is_none(), "state-only after the first notify");

        let same = m
            .republish("rob-1", "a", Update { state: Some(RobotState::Executing), ..Default::default() }, 2.0)
            .unwrap();
        assert_eq!(same.value, 3);
        assert!(same.deliveries.is_empty());
    }

    #[test]
    fn republish_errors() {
        let mut m = Marketplace::new();
        m.publish(light(), "a", 0.0).unwrap();
        let upd = || Update { state: Some(RobotState::Failed), ..Default::default() };
        assert!(matches!(m.republish("rob-2", "a", upd(), 0.0), Err(PresenceError::NotFound(_))));
        assert!(matches!(m.republish("rob-1", "b", upd(), 0.0), Err(PresenceError::Forbidden { .. })));
        let stale = Update { expected_version: Some(5), ..upd() };
        assert!(matches!(m.republish("rob-1", "a", stale, 0.0), Err(PresenceError::Conflict(_))));
        assert_eq!(m.record("rob-1").unwrap().version, 1);
    }

    #[test]
    fn descriptor_change_resends_descriptor() {
        let mut m = Marketplace::new();
        m.publish(light(), "a", 0.0).unwrap();
        m.subscribe("rob-1", W1, 0.0).unwrap();
        let mut d = m.record("rob-1").unwrap().descriptor.clone();
        d.dynamic_ch.location.x = 3.0;
        let out = m.republish("rob-1", "a", Update { descriptor: Some(d), ..Default::default() }, 1.0).unwrap();
        assert_eq!(out.deliveries.len(), 1);
        assert!(out.deliveries[0].notification.descriptor.is_some());
    }

    #[test]
    fn unsubscribe_stops_delivery() {
        let mut m = Marketplace::new();
        m.publish(light(), "a", 0.0).unwrap();
        m.subscribe("rob-1", W1, 0.0).unwrap();
        m.unsubscribe("rob-1", "sub-1").unwrap();
        let out = m
            .republish("rob-1", "a", Update { state: Some(RobotState::Executing), ..Default::default() }, 1.0)
            .unwrap();
        assert!(out.deliveries.is_empty());
        assert!(matches!(m.unsubscribe("rob-1", "sub-1"), Err(PresenceError::NotFound(_))));
        assert!(matches!(m.unsubscribe_all("sub-1"), Err(PresenceError::NotFound(_))));
    }

    #[test]
    fn removal_notifies_offline_and_keeps_versions_monotonic() {
        let mut m = Marketplace::new();
        let mut d = light();
        d.robot_id = "rob-x".into();
        m.publish(d.clone(), "a", 0.0).unwrap();
        m.subscribe_all(W2, 0.0).unwrap();
        let out = m.remove_robot("rob-x", "a", 1.0).unwrap();
        assert_eq!(out.deliveries[0].notification.state, RobotState::Offline);
        assert_eq!(out.value, 2);
        assert!(m.is_empty());
        let again = m.publish(d, "a", 2.0).unwrap();
        assert_eq!(again.value.1, 3);
    }

    #[test]
    fn query_filters_by_caps_and_state() {
        let mut m = Marketplace::new();
        m.publish(light(), "a", 0.0).unwrap();
        m.publish(robot(&["gripper-arm", "movement-motor"]), "a", 0.0).unwrap();
        let caps: CapabilitySet = ["light"].into_iter().collect();
        let hits = m.query_robots(Some(&caps), None);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].robot_id, "rob-1");
        assert_eq!(m.query_robots(None, None).len(), 2);
        assert!(m.query_robots(None, Some(RobotState::Failed)).is_empty());
    }

    #[test]
    fn routes_follow_the_publication_interface() {
        let r = |m, t: &str| route(&Request::new(m, t, ""));
        assert_eq!(r(Method::Post, "/robots").unwrap(), Route::Publish { owner: None });
        assert_eq!(
            r(Method::Post, "/robots?fromuri=sim%3A%2F%2Fa%2Fnotify").unwrap(),
            Route::SubscribeAll { fromuri: "sim://a/notify".into() }
        );
        assert_eq!(
            r(Method::Post, "/robots/rob-1?fromuri=x").unwrap(),
            Route::Subscribe { robot_id: "rob-1".into(), fromuri: "x".into() }
        );
        assert_eq!(
            r(Method::Put, "/robots/rob-1").unwrap(),
            Route::Republish { robot_id: "rob-1".into(), owner: None, version: None }
        );
        assert_eq!(
            r(Method::Delete, "/robots/rob-1/sub-2").unwrap(),
            Route::Unsubscribe { robot_id: "rob-1".into(), subscriber_id: "sub-2".into() }
        );
        assert_eq!(
            r(Method::Delete, "/robots/sub-2").unwrap(),
            Route::UnsubscribeAll { subscriber_id: "sub-2".into() }
        );
        assert_eq!(
            r(Method::Delete, "/robots/rob-1?owner=sim%3A%2F%2Fiaas-1").unwrap(),
            Route::Remove { robot_id: "rob-1".into(), owner: "sim://iaas-1".into() }
        );
        assert!(r(Method::Delete, "/robots/rob-1").is_err());
        assert!(r(Method::Post, "/robots/rob-1").is_err());
        assert!(r(Method::Get, "/nothing").is_err());
    }

    #[test]
    fn update_bodies() {
        assert_eq!(parse_update(r#"{"state":"FAILED"}"#).unwrap().state, Some(RobotState::Failed));
        assert!(parse_update(r#"{"act":[["arm"]]}"#).unwrap().descriptor.is_some());
        assert!(parse_update("{").is_err());
    }

    #[test]
    fn storage_mirrors_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Marketplace::with_storage(dir.path()).unwrap();
        m.publish(light(), "a", 0.0).unwrap();
        let path = dir.path().join("rob-1.robot.senml.json");
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(parse_descriptor(&text).unwrap().robot_id, "rob-1");
        m.remove_robot("rob-1", "a", 1.0).unwrap();
        assert!(!path.exists());
    }
}
