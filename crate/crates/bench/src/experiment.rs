//! Scenario runs and the two delay experiments.

use std::collections::BTreeMap;

use roboiaas::descriptor::{CapabilitySet, RobotDescriptor, RobotState};
use roboiaas::exec::Execution;
use roboiaas::fleet;
use roboiaas::iaas::{AssignmentStatus, IaasNode, ServiceRequest, TaskSpec};
use roboiaas::net::{Endpoint, Finished, LogEntry, Method, Request, Response};
use roboiaas::presence::MarketplaceService;
use serde::Serialize;
use serde_json::Value;
use tracing::{debug, info};

use crate::config::{BackendConfig, ScenarioConfig, ScriptEntry, TransportConfig};
use crate::deploy::{boot, new_network, DeploySpec, Deployment};
use crate::report::{Metric, MetricSample};
use crate::BenchError;

/// Outcome of one scenario run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub backend: String,
    pub iaas_count: usize,
    pub samples: Vec<MetricSample>,
    /// Timed-out or partial measurements, excluded from `samples`.
    pub censored: usize,
    /// Status codes of the scripted requests, in script order.
    pub replies: Vec<u16>,
    pub marketplace_records: usize,
    /// Boot failure cause; nothing ran when set.
    pub aborted: Option<String>,
    pub log: Vec<LogEntry>,
}

/// Services left after a run, for inspection.
struct Run {
    report: RunReport,
    finished: Option<Finished>,
    deployment: Option<Deployment>,
    reply_bodies: Vec<Option<Response>>,
}

fn script_request(entry: &ScriptEntry) -> Request {
    if entry.probe {
        return Request::post("/discovery/subscribe", "");
    }
    let caps: CapabilitySet = entry.caps.iter().map(String::as_str).collect();
    let sr = ServiceRequest::new(
        caps,
        TaskSpec {
            task_id: String::new(),
            site: entry.site(),
            kind: entry.kind.clone(),
            duration_est: entry.duration_ms,
        },
    );
    Request::json(Method::Post, "/services/requests", &sr)
}

fn execute(scenario: &str, spec: &DeploySpec, script: &[ScriptEntry]) -> Run {
    let mut report = RunReport {
        scenario: scenario.to_string(),
        backend: spec.backend.label().to_string(),
        iaas_count: spec.iaas_count(),
        ..Default::default()
    };
    let mut net = new_network(&spec.transport, spec.seed);
    let deployment = match boot(net.as_mut(), spec) {
        Ok(d) => d,
        Err(e) => {
            report.aborted = Some(e.to_string());
            let finished = net.finish();
            report.log = finished.log;
            return Run {
                report,
                finished: None,
                deployment: None,
                reply_bodies: Vec::new(),
            };
        }
    };
    let t0 = net.now();
    let tokens: Vec<u64> = script
        .iter()
        .map(|e| net.inject(t0 + e.at_ms, &deployment.nodes[e.node], script_request(e)))
        .collect();
    net.settle();
    let reply_bodies: Vec<Option<Response>> = tokens.iter().map(|t| net.reply(*t).cloned()).collect();
    report.replies = reply_bodies.iter().map(|r| r.as_ref().map_or(0, |r| r.status)).collect();
    let finished = net.finish();

    if let Some(m) = &deployment.marketplace {
        report.marketplace_records = finished.service::<MarketplaceService>(m).map_or(0, |s| s.market.len());
    }
    let node_index: BTreeMap<&Endpoint, usize> = deployment.nodes.iter().enumerate().map(|(i, e)| (e, i)).collect();
    let mut reps: BTreeMap<Metric, usize> = BTreeMap::new();
    let mut push = |report: &mut RunReport, metric: Metric, scenario: String, value_ms: f64| {
        let rep = reps.entry(metric).or_default();
        report.samples.push(MetricSample {
            metric,
            scenario,
            backend: spec.backend.label().to_string(),
            iaas_count: spec.iaas_count(),
            rep: *rep,
            value_ms: value_ms.max(0.0),
        });
        *rep += 1;
    };
    for e in &finished.log {
        let value = e.data.get("value_ms").and_then(Value::as_f64);
        match (e.kind.as_str(), value) {
            ("irdd", Some(v)) => {
                if e.data.get("complete").and_then(Value::as_bool) == Some(false) {
                    report.censored += 1;
                } else {
                    push(&mut report, Metric::Irdd, scenario.to_string(), v);
                }
            }
            ("tad", Some(v)) => {
                let receiver = node_index.get(&e.at).map_or_else(|| e.at.to_string(), |i| format!("iaas-{}", i + 1));
                push(&mut report, Metric::Tad, receiver, v);
            }
            ("irdd_censored", _) => report.censored += 1,
            _ => {}
        }
    }
    report.log = finished.log.clone();
    Run {
        report,
        finished: Some(finished),
        deployment: Some(deployment),
        reply_bodies,
    }
}

/// Boots the configured federation, plays the script and tears down.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport, BenchError> {
    cfg.validate()?;
    let spec = DeploySpec::new(cfg.backend, cfg.transport, cfg.seed, cfg.fleet()?);
    let run = execute("scenario", &spec, &cfg.script);
    info!(
        samples = run.report.samples.len(),
        aborted = run.report.aborted.is_some(),
        "scenario finished"
    );
    Ok(run.report)
}

/// Shared parameters of a measurement sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub transport: TransportConfig,
    pub seed: u64,
    pub reps: usize,
    pub execution: Execution,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            transport: TransportConfig::default(),
            seed: 0,
            reps: 30,
            execution: Execution::default(),
        }
    }
}

impl SweepOptions {
    /// Socket runs share the host clock, so they never run concurrently.
    fn execution(&self) -> Execution {
        if self.transport.is_sim() {
            self.execution
        } else {
            Execution::Sequential
        }
    }

    fn rep_seed(&self, backend: usize, n: usize, rep: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(((backend * 64 + n) * 100_000 + rep) as u64)
    }
}

/// Samples of a sweep plus the number of censored measurements.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Measurement {
    pub samples: Vec<MetricSample>,
    pub censored: usize,
    /// Boot failures, one line each.
    pub aborted: Vec<String>,
}

fn collect(runs: Vec<(usize, RunReport)>, metric: Metric) -> Measurement {
    let mut m = Measurement::default();
    for (rep, r) in runs {
        m.censored += r.censored;
        if let Some(a) = r.aborted {
            m.aborted.push(a);
        }
        m.samples.extend(r.samples.into_iter().filter(|s| s.metric == metric).map(|mut s| {
            s.rep = rep;
            s
        }));
    }
    m
}

/// One cold discovery probe per repetition, from node 0 of a default fleet.
pub fn measure_irdd(counts: &[usize], backends: &[BackendConfig], opts: &SweepOptions) -> Result<Measurement, BenchError> {
    if counts.is_empty() || backends.is_empty() || opts.reps == 0 {
        return Err(BenchError::Usage("irdd needs at least one count, backend and repetition".into()));
    }
    if let Some(n) = counts.iter().find(|&&n| n < 2) {
        return Err(BenchError::Usage(format!("irdd sweep values must be at least 2, got {n}")));
    }
    let jobs: Vec<(usize, BackendConfig, usize, usize)> = backends
        .iter()
        .enumerate()
        .flat_map(|(b, backend)| {
            counts
                .iter()
                .flat_map(move |&n| (0..opts.reps).map(move |rep| (b, *backend, n, rep)))
        })
        .collect();
    debug!(jobs = jobs.len(), "irdd sweep");
    let runs = opts.execution().map(jobs, |(b, backend, n, rep)| {
        let spec = DeploySpec::new(backend, opts.transport, opts.rep_seed(b, n, rep), fleet::default_fleet(n));
        (rep, execute("irdd", &spec, &[ScriptEntry::probe(0.0, 0)]).report)
    });
    Ok(collect(runs, Metric::Irdd))
}

/// Node 0 requests a coalition that needs one robot from every other node;
/// every hosting node records the send-to-receive delay. Sample `scenario`
/// names the receiver.
pub fn measure_tad(iaas_count: usize, backends: &[BackendConfig], opts: &SweepOptions) -> Result<Measurement, BenchError> {
    if iaas_count < 2 {
        return Err(BenchError::Usage(format!("tad needs at least 2 IaaS, got {iaas_count}")));
    }
    if backends.is_empty() || opts.reps == 0 {
        return Err(BenchError::Usage("tad needs at least one backend and repetition".into()));
    }
    let jobs: Vec<(usize, BackendConfig, usize)> = backends
        .iter()
        .enumerate()
        .flat_map(|(b, backend)| (0..opts.reps).map(move |rep| (b, *backend, rep)))
        .collect();
    let caps = fleet::tad_caps(iaas_count);
    let runs = opts.execution().map(jobs, |(b, backend, rep)| {
        let spec = DeploySpec::new(
            backend,
            opts.transport,
            opts.rep_seed(b, iaas_count, rep),
            fleet::tad_fleet(iaas_count),
        );
        (rep, execute("tad", &spec, &[ScriptEntry::request(0.0, 0, &caps)]).report)
    });
    Ok(collect(runs, Metric::Tad))
}

/// Which fleet the fire-suppression run starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FireFleet {
    #[default]
    Default,
    WithoutLight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FireOptions {
    pub iaas_count: usize,
    pub backend: BackendConfig,
    pub transport: TransportConfig,
    pub seed: u64,
    pub fleet: FireFleet,
    /// Robots of this type fail every task.
    pub faulty_type: Option<String>,
    /// Node that receives the request.
    pub entry_node: usize,
}

impl Default for FireOptions {
    fn default() -> Self {
        FireOptions {
            iaas_count: 4,
            backend: BackendConfig::Presence,
            transport: TransportConfig::default(),
            seed: 0,
            fleet: FireFleet::Default,
            faulty_type: None,
            entry_node: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoalitionEntry {
    pub robot_id: String,
    pub robot_type: String,
    pub owner: String,
    pub assigned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FireReport {
    /// `done`, `failed`, `rejected` or `aborted`.
    pub outcome: String,
    pub http_status: u16,
    pub error: Option<String>,
    pub coalition: Vec<CoalitionEntry>,
    pub composite: Vec<String>,
    pub replans: usize,
    pub frames: Vec<String>,
    pub events: Vec<String>,
    pub final_states: BTreeMap<String, RobotState>,
    pub marketplace_converged: bool,
    #[serde(skip)]
    pub log: Vec<LogEntry>,
}

impl FireReport {
    /// Checks the end-to-end invariants of a successful run and names the
    /// first one that does not hold.
    pub fn check(&self) -> Result<(), String> {
        if self.outcome != "done" {
            return Err(format!(
                "assignment completed: outcome is {} ({})",
                self.outcome,
                self.error.as_deref().unwrap_or("no detail")
            ));
        }
        let types: std::collections::BTreeSet<&str> = self.coalition.iter().map(|c| c.robot_type.as_str()).collect();
        if !(types.contains("light") && types.contains("arms")) {
            return Err(format!("coalition holds both robot types: got {types:?}"));
        }
        for tag in ["light", "kicking-arm", "movement-motor"] {
            if !self.composite.iter().any(|c| c == tag) {
                return Err(format!("composite covers `{tag}`"));
            }
        }
        if let Some((id, s)) = self.final_states.iter().find(|(_, s)| **s != RobotState::Idle) {
            return Err(format!("all robots IDLE: {id} is {s}"));
        }
        if !self.marketplace_converged {
            return Err("marketplace state converged".into());
        }
        Ok(())
    }
}

fn robot_index(finished: &Finished, nodes: &[Endpoint]) -> BTreeMap<String, (RobotDescriptor, RobotState, String)> {
    let mut out = BTreeMap::new();
    for ep in nodes {
        if let Some(node) = finished.service::<IaasNode>(ep) {
            for e in node.repo.iter() {
                out.insert(
                    e.descriptor.robot_id.clone(),
                    (e.descriptor.clone(), e.state(), ep.to_string()),
                );
            }
        }
    }
    out
}

/// Published presence matches every owner's repository. Without a
/// marketplace, each node's discovery cache must match instead.
fn converged(finished: &Finished, d: &Deployment, robots: &BTreeMap<String, (RobotDescriptor, RobotState, String)>) -> bool {
    match &d.marketplace {
        Some(m) => {
            let Some(svc) = finished.service::<MarketplaceService>(m) else {
                return false;
            };
            svc.market.len() == robots.len()
                && svc
                    .market
                    .records()
                    .all(|r| robots.get(&r.robot_id).is_some_and(|(_, s, owner)| *s == r.state && *owner == r.owner_iaas))
        }
        None => d.nodes.iter().all(|ep| {
            finished.service::<IaasNode>(ep).is_some_and(|node| {
                node.cache
                    .iter()
                    .all(|c| robots.get(&c.descriptor.robot_id).is_some_and(|(_, s, _)| *s == c.state))
            })
        }),
    }
}

/// Scripted client: one fire-suppression request against a booted fleet.
pub fn run_fire_suppression(opts: &FireOptions) -> Result<FireReport, BenchError> {
    if opts.entry_node >= opts.iaas_count {
        return Err(BenchError::Usage(format!("entry node {} does not exist", opts.entry_node)));
    }
    let fleet = match opts.fleet {
        FireFleet::Default => fleet::default_fleet(opts.iaas_count),
        FireFleet::WithoutLight => fleet::fleet_without_light(opts.iaas_count),
    };
    let faults = fleet
        .iter()
        .map(|robots| {
            robots
                .iter()
                .map(|d| {
                    let faulty = opts.faulty_type.as_deref().is_some_and(|t| fleet::robot_type(d) == Some(t));
                    if faulty { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let mut spec = DeploySpec::new(opts.backend, opts.transport, opts.seed, fleet);
    spec.faults = faults;
    let script = [ScriptEntry::request(0.0, opts.entry_node, &fleet::fire_suppression_caps())];
    let run = execute("fire-suppression", &spec, &script);

    let mut report = FireReport {
        outcome: "aborted".into(),
        http_status: run.report.replies.first().copied().unwrap_or(0),
        error: run.report.aborted.clone(),
        coalition: Vec::new(),
        composite: Vec::new(),
        replans: 0,
        frames: Vec::new(),
        events: Vec::new(),
        final_states: BTreeMap::new(),
        marketplace_converged: false,
        log: run.report.log.clone(),
    };
    let (Some(finished), Some(deployment)) = (&run.finished, &run.deployment) else {
        return Ok(report);
    };
    for e in &finished.log {
        if e.kind == "frame" {
            if let Some(line) = e.data["line"].as_str() {
                if line.starts_with("EVT") {
                    report.events.push(line.to_string());
                } else {
                    report.frames.push(line.to_string());
                }
            }
        }
    }
    let robots = robot_index(finished, &deployment.nodes);
    report.final_states = robots.iter().map(|(id, (_, s, _))| (id.clone(), *s)).collect();
    report.marketplace_converged = converged(finished, deployment, &robots);

    let reply = run.reply_bodies.first().cloned().flatten();
    let entry = finished.service::<IaasNode>(&deployment.nodes[opts.entry_node]);
    match (reply, entry.and_then(|n| n.assignments().next())) {
        (_, Some(a)) => {
            report.outcome = match a.status {
                AssignmentStatus::Done => "done",
                AssignmentStatus::Failed => "failed",
                AssignmentStatus::Aborted => "aborted",
                AssignmentStatus::Running => "running",
            }
            .into();
            report.replans = a.replans.len();
            report.composite = a.composite.capabilities.to_vec();
            report.coalition = a
                .coalition
                .members
                .iter()
                .map(|m| CoalitionEntry {
                    robot_id: m.robot_id.clone(),
                    robot_type: robots
                        .get(&m.robot_id)
                        .and_then(|(d, _, _)| fleet::robot_type(d))
                        .unwrap_or("unknown")
                        .to_string(),
                    owner: m.owner_iaas.clone(),
                    assigned: m.assigned.to_vec(),
                })
                .collect();
            if report.outcome != "done" {
                report.error = a.members.iter().find_map(|m| m.reason.clone()).or(Some(report.outcome.clone()));
            }
        }
        (Some(r), None) => {
            report.outcome = "rejected".into();
            report.error = Some(
                serde_json::from_str::<Value>(&r.body)
                    .ok()
                    .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_string))
                    .unwrap_or(r.body),
            );
        }
        (None, None) => report.error = Some("no reply to the service request".into()),
    }
    Ok(report)
}
