//! Randomized marketplace replay against an in-test model of who must be
//! notified of what.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roboiaas::descriptor::{serialize_descriptor, ActuatorSpec, RobotDescriptor, RobotState, SensorSpec};
use roboiaas::net::{encode_query, Context, Endpoint, Request, Response, Service, SimNet, SimParams};
use roboiaas::presence::{Marketplace, MarketplaceService, Notification};

/// (subscriber, robot, version, state) of one notification.
pub type Note = (String, String, u64, RobotState);

#[derive(Default)]
struct Watcher {
    got: Vec<Note>,
}

impl Service for Watcher {
    fn handle(&mut self, _from: &Endpoint, req: &Request, _ctx: &mut dyn Context) -> Response {
        let n: Notification = serde_json::from_str(&req.body).expect("notification body");
        self.got.push((n.subscriber_id, n.robot_id, n.version, n.state));
        Response::new(200, "")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub ops: usize,
    pub expected: usize,
    pub delivered: usize,
    pub lost: usize,
    pub duplicated: usize,
    pub unexpected: usize,
    pub order_violations: usize,
    pub reply_mismatches: usize,
}

impl ReplayReport {
    pub fn exact(&self) -> bool {
        self.lost == 0
            && self.duplicated == 0
            && self.unexpected == 0
            && self.order_violations == 0
            && self.reply_mismatches == 0
    }
}

struct Rec {
    owner: String,
    state: RobotState,
    version: u64,
}

#[derive(Default)]
struct Model {
    records: BTreeMap<String, Rec>,
    retired: BTreeMap<String, u64>,
    next_robot: u64,
    /// sub id -> (uri, scope); `None` scope means all robots.
    subs: BTreeMap<String, (String, Option<String>)>,
    next_sub: u64,
    expected: Vec<Note>,
}

impl Model {
    fn fresh_id(&mut self) -> String {
        loop {
            self.next_robot += 1;
            let id = format!("rob-{}", self.next_robot);
            if !self.records.contains_key(&id) && !self.retired.contains_key(&id) {
                return id;
            }
        }
    }

    fn notify_watchers(&mut self, robot: &str) {
        let r = &self.records[robot];
        let (v, s) = (r.version, r.state);
        for (sub, (_, scope)) in &self.subs {
            if scope.as_deref().is_none_or(|x| x == robot) {
                self.expected.push((sub.clone(), robot.to_string(), v, s));
            }
        }
    }

    fn find_sub(&self, uri: &str, scope: &Option<String>) -> Option<String> {
        self.subs
            .iter()
            .find(|(_, (u, s))| u == uri && s == scope)
            .map(|(id, _)| id.clone())
    }

    fn add_sub(&mut self, uri: &str, scope: Option<String>) -> Option<String> {
        if self.find_sub(uri, &scope).is_some() {
            return None;
        }
        self.next_sub += 1;
        let id = format!("sub-{}", self.next_sub);
        self.subs.insert(id.clone(), (uri.to_string(), scope));
        Some(id)
    }
}

fn robot_doc(rng: &mut ChaCha8Rng) -> String {
    let mut d = RobotDescriptor::default();
    d.static_ch.sensors.push(SensorSpec::new(["light", "camera", "sonar"][rng.gen_range(0..3)], "(0,10)", "u"));
    if rng.gen_bool(0.5) {
        d.static_ch.actuators.push(ActuatorSpec::new("movement-motor", "", ""));
    }
    serialize_descriptor(&d).expect("valid descriptor")
}

const STATES: [RobotState; 4] = [RobotState::Idle, RobotState::Assigned, RobotState::Executing, RobotState::Failed];

/// Runs `ops` random marketplace operations, issued 0.5 ms apart so that
/// notifications are still in flight when later operations land.
pub fn replay(seed: u64, ops: usize) -> ReplayReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SimNet::new(SimParams {
        latency_ms: 5.0,
        jitter_ms: 2.0,
        seed,
    })
    .without_trace();
    let market = net.add("marketplace", "market-host", Box::new(MarketplaceService::new(Marketplace::new())));
    let watchers: Vec<Endpoint> = (0..4)
        .map(|i| net.add(&format!("watcher-{i}"), &format!("w-host-{i}"), Box::<Watcher>::default()))
        .collect();
    let owners: Vec<String> = (0..3).map(|i| format!("sim://owner-{i}")).collect();

    let mut m = Model::default();
    let mut checks: Vec<(u64, u16, Option<String>)> = Vec::new();
    for i in 0..ops {
        let t = i as f64 * 0.5;
        let robots: Vec<String> = m.records.keys().cloned().collect();
        let subs: Vec<String> = m.subs.keys().cloned().collect();
        let w = rng.gen_range(0..watchers.len());
        let uri = watchers[w].uri("/notify");
        let roll = rng.gen_range(0..100);
        let (req, status, id) = if robots.is_empty() || roll < 15 {
            let owner = owners[rng.gen_range(0..owners.len())].clone();
            let id = m.fresh_id();
            m.records.insert(id.clone(), Rec { owner: owner.clone(), state: RobotState::Idle, version: 1 });
            m.notify_watchers(&id);
            let req = Request::post(format!("/robots?owner={}", encode_query(&owner)), robot_doc(&mut rng));
            (req, 201, Some(id))
        } else if roll < 45 {
            let r = robots[rng.gen_range(0..robots.len())].clone();
            let state = STATES[rng.gen_range(0..STATES.len())];
            let rec = m.records.get_mut(&r).unwrap();
            rec.version += 1;
            let changed = rec.state != state;
            rec.state = state;
            let owner = rec.owner.clone();
            if changed {
                m.notify_watchers(&r);
            }
            let body = serde_json::json!({ "state": state }).to_string();
            (Request::put(format!("/robots/{r}?owner={}", encode_query(&owner)), body), 200, None)
        } else if roll < 60 {
            let r = robots[rng.gen_range(0..robots.len())].clone();
            let fresh = m.add_sub(&uri, Some(r.clone()));
            if let Some(sub) = &fresh {
                let rec = &m.records[&r];
                m.expected.push((sub.clone(), r.clone(), rec.version, rec.state));
            }
            let req = Request::post(format!("/robots/{r}?fromuri={}", encode_query(&uri)), "");
            (req, 201, m.find_sub(&uri, &Some(r)))
        } else if roll < 68 {
            let fresh = m.add_sub(&uri, None);
            if let Some(sub) = &fresh {
                for (r, rec) in &m.records {
                    m.expected.push((sub.clone(), r.clone(), rec.version, rec.state));
                }
            }
            (Request::post(format!("/robots?fromuri={}", encode_query(&uri)), ""), 201, m.find_sub(&uri, &None))
        } else if roll < 80 && !subs.is_empty() {
            let sub = subs[rng.gen_range(0..subs.len())].clone();
            let scope = m.subs[&sub].1.clone();
            match scope {
                Some(r) if rng.gen_bool(0.5) => {
                    m.subs.remove(&sub);
                    (Request::delete(format!("/robots/{r}/{sub}")), 200, None)
                }
                _ => {
                    m.subs.remove(&sub);
                    (Request::delete(format!("/robots/{sub}")), 200, None)
                }
            }
        } else if roll < 88 {
            let r = robots[rng.gen_range(0..robots.len())].clone();
            let rec = m.records.get_mut(&r).unwrap();
            rec.version += 1;
            rec.state = RobotState::Offline;
            let owner = rec.owner.clone();
            m.notify_watchers(&r);
            let v = m.records.remove(&r).unwrap().version;
            m.retired.insert(r.clone(), v);
            m.subs.retain(|_, (_, s)| s.as_deref() != Some(r.as_str()));
            (Request::delete(format!("/robots/{r}?owner={}", encode_query(&owner))), 200, None)
        } else if roll < 94 {
            // Unknown robot: rejected, nothing stored, nothing sent.
            (Request::post(format!("/robots/rob-99999?fromuri={}", encode_query(&uri)), ""), 404, None)
        } else {
            // Non-owner update: forbidden, no version bump.
            let r = robots[rng.gen_range(0..robots.len())].clone();
            let body = serde_json::json!({ "state": "FAILED" }).to_string();
            (Request::put(format!("/robots/{r}?owner=sim%3A%2F%2Fintruder"), body), 403, None)
        };
        let token = net.inject_at(t, &market, req);
        net.run_until(t);
        checks.push((token, status, id));
    }
    net.run_until_idle();

    let mut report = ReplayReport {
        ops,
        expected: m.expected.len(),
        ..Default::default()
    };
    for (token, status, id) in checks {
        let Some(resp) = net.reply(token) else {
            report.reply_mismatches += 1;
            continue;
        };
        let v: serde_json::Value = serde_json::from_str(&resp.body).unwrap_or_default();
        let got_id = v["robotid"].as_str().or(v["subscriberid"].as_str());
        if resp.status != status || id.as_deref().is_some_and(|id| got_id != Some(id)) {
            report.reply_mismatches += 1;
        }
    }

    let mut want: BTreeMap<&Note, i64> = BTreeMap::new();
    for n in &m.expected {
        *want.entry(n).or_default() += 1;
    }
    let mut got: BTreeMap<Note, i64> = BTreeMap::new();
    for w in &watchers {
        let watcher = net.service::<Watcher>(w).unwrap();
        report.delivered += watcher.got.len();
        let mut last: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for n in &watcher.got {
            *got.entry(n.clone()).or_default() += 1;
            let prev = last.insert((&n.0, &n.1), n.2);
            if prev.is_some_and(|p| p >= n.2) {
                report.order_violations += 1;
            }
        }
    }
    let keys: BTreeSet<&Note> = want.keys().copied().chain(got.keys()).collect();
    for k in keys {
        let w = want.get(k).copied().unwrap_or(0);
        let g = got.get(k).copied().unwrap_or(0);
        match (w, g) {
            (0, g) => report.unexpected += g as usize,
            (w, g) if g < w => report.lost += (w - g) as usize,
            (w, g) if g > w => report.duplicated += (g - w) as usize,
            _ => {}
        }
    }
    report
}
