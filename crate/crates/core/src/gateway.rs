//! Robot gateways and the simulated robot fleet.
//!
//! The IaaS node talks to robots only through a [`GatewayPool`]: it hands
//! over a command list and gets back [`RobotEvent`]s. Underneath, commands
//! are framed in a line-oriented wire protocol:
//!
//! ```text
//! CMD <taskid> MOVE <x> <y>
//! CMD <taskid> ACTUATE <tag>
//! CMD <taskid> SENSE <tag>
//! EVT <taskid> DONE
//! EVT <taskid> FAIL <reason>
//! EVT <taskid> SENSED <tag> <value>
//! ```
//!
//! Every task is answered by exactly one terminal `DONE` or `FAIL` frame.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{Location, RobotDescriptor, RobotState};
use crate::net::Millis;

/// Linear-motion speed of every simulated robot.
pub const SPEED_M_PER_S: f64 = 0.5;
/// Time an unused gateway stays DRAINING before going DOWN.
pub const DRAIN_TIMEOUT_MS: Millis = 2000.0;
/// Protocol used by descriptors that leave `interaction.protocol` empty.
pub const DEFAULT_PROTOCOL: &str = "sim";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "UPPERCASE")]
pub enum Command {
    Move { x: f64, y: f64 },
    Actuate { tag: String },
    Sense { tag: String },
}

impl Command {
    pub fn frame(&self, task_id: &str) -> String {
        match self {
            Command::Move { x, y } => format!("CMD {task_id} MOVE {x} {y}"),
            Command::Actuate { tag } => format!("CMD {task_id} ACTUATE {tag}"),
            Command::Sense { tag } => format!("CMD {task_id} SENSE {tag}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "UPPERCASE")]
pub enum EventKind {
    Done,
    Fail { reason: String },
    Sensed { tag: String, value: f64 },
}

impl EventKind {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, EventKind::Sensed { .. })
    }
}

/// A robot event as surfaced to the robot monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotEvent {
    pub robot_id: String,
    pub task_id: String,
    pub kind: EventKind,
    pub at: Millis,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("malformed frame `{0}`")]
    Malformed(String),
}

/// Parses an `EVT` frame into `(task_id, kind)`.
pub fn parse_event(line: &str) -> Result<(String, EventKind), FrameError> {
    let bad = || FrameError::Malformed(line.to_string());
    let toks: Vec<&str> = line.split(' ').collect();
    match toks.as_slice() {
        ["EVT", t, "DONE"] => Ok((t.to_string(), EventKind::Done)),
        ["EVT", t, "FAIL", reason @ ..] if !reason.is_empty() => Ok((
            t.to_string(),
            EventKind::Fail {
                reason: reason.join(" "),
            },
        )),
        ["EVT", t, "SENSED", tag, v] => Ok((
            t.to_string(),
            EventKind::Sensed {
                tag: tag.to_string(),
                value: v.parse().map_err(|_| bad())?,
            },
        )),
        _ => Err(bad()),
    }
}

fn event_frame(task_id: &str, kind: &EventKind) -> String {
    match kind {
        EventKind::Done => format!("EVT {task_id} DONE"),
        EventKind::Fail { reason } => format!("EVT {task_id} FAIL {reason}"),
        EventKind::Sensed { tag, value } => format!("EVT {task_id} SENSED {tag} {value:.2}"),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("robot `{0}` is not bound to a gateway")]
    Unbound(String),
    #[error("robot `{0}` is FAILED")]
    RobotFailed(String),
    #[error("robot `{0}` is already bound")]
    AlreadyBound(String),
    #[error("robot `{robot_id}` cannot {what}")]
    Unsupported { robot_id: String, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Lifecycle {
    Up,
    Draining,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayInstance {
    pub gateway_id: String,
    pub protocol: String,
    pub robots: BTreeSet<String>,
    pub lifecycle: Lifecycle,
    /// Set while DRAINING.
    pub drain_deadline: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq)]
struct Task {
    task_id: String,
    commands: Vec<Command>,
    work_ms: Millis,
}

#[derive(Debug, Clone, PartialEq)]
struct Running {
    task: Task,
    started: Millis,
    from: Location,
    to: Location,
    travel_ms: Millis,
    ends: Millis,
    fails: bool,
}

/// A simulated physical robot.
///
/// State machine: IDLE -> ASSIGNED -> EXECUTING -> {IDLE, FAILED}; FAILED
/// returns to IDLE only through [`SimRobot::reset`]. Queued tasks run FIFO.
#[derive(Debug, Clone)]
pub struct SimRobot {
    pub robot_id: String,
    pub descriptor: RobotDescriptor,
    pub position: Location,
    pub battery_pct: f64,
    pub state: RobotState,
    pub fault_p: f64,
    queue: VecDeque<Task>,
    running: Option<Running>,
    rng: ChaCha8Rng,
}

/// Rounds up to the next whole microsecond so deadlines land exactly on
/// timer ticks.
pub fn quantize(ms: Millis) -> Millis {
    (ms * 1000.0).ceil() / 1000.0
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl SimRobot {
    pub fn new(descriptor: RobotDescriptor, fault_p: f64, seed: u64) -> Self {
        SimRobot {
            robot_id: descriptor.robot_id.clone(),
            position: descriptor.dynamic_ch.location,
            battery_pct: descriptor.dynamic_ch.battery_pct,
            state: RobotState::Idle,
            fault_p: fault_p.clamp(0.0, 1.0),
            queue: VecDeque::new(),
            running: None,
            rng: ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&descriptor.robot_id)),
            descriptor,
        }
    }

    pub fn reset(&mut self) {
        if self.state == RobotState::Failed {
            self.state = RobotState::Idle;
        }
    }

    pub fn queued(&self) -> usize {
        self.queue.len() + usize::from(self.running.is_some())
    }

    /// End time of the running task, if any.
    pub fn busy_until(&self) -> Option<Millis> {
        self.running.as_ref().map(|r| r.ends)
    }

    fn enqueue(&mut self, task: Task) {
        self.queue.push_back(task);
        if self.state == RobotState::Idle {
            self.state = RobotState::Assigned;
        }
    }

    fn start_next(&mut self, at: Millis) {
        let Some(task) = self.queue.pop_front() else {
            return;
        };
        let to = task
            .commands
            .iter()
            .rev()
            .find_map(|c| match c {
                Command::Move { x, y } => Some(Location::new(*x, *y)),
                _ => None,
            })
            .unwrap_or(self.position);
        let travel_ms = self.position.distance(&to) / SPEED_M_PER_S * 1000.0;
        let fails = self.rng.gen_bool(self.fault_p);
        self.running = Some(Running {
            ends: quantize(at + travel_ms + task.work_ms),
            task,
            started: at,
            from: self.position,
            to,
            travel_ms,
            fails,
        });
        self.state = RobotState::Executing;
    }

    /// Advances the robot to `now`, returning `(task_id, kind, at)` events.
    pub fn sim_step(&mut self, now: Millis) -> Vec<(String, EventKind, Millis)> {
        let mut out = Vec::new();
        loop {
            if self.running.is_none() {
                if self.state == RobotState::Assigned && !self.queue.is_empty() {
                    self.start_next(now);
                    continue;
                }
                break;
            }
            let r = self.running.as_ref().expect("checked above");
            if r.ends > now {
                let f = if r.travel_ms > 0.0 {
                    ((now - r.started) / r.travel_ms).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                self.position = Location::new(
                    r.from.x + (r.to.x - r.from.x) * f,
                    r.from.y + (r.to.y - r.from.y) * f,
                );
                break;
            }
            let r = self.running.take().expect("checked above");
            self.position = r.to;
            let id = r.task.task_id.clone();
            if r.fails {
                out.push((id, EventKind::Fail { reason: "fault".into() }, r.ends));
                self.state = RobotState::Failed;
                let dropped: Vec<Task> = self.queue.drain(..).collect();
                for t in dropped {
                    out.push((t.task_id, EventKind::Fail { reason: "robot-failed".into() }, r.ends));
                }
                break;
            }
            for c in &r.task.commands {
                if let Command::Sense { tag } = c {
                    let value = self.read_sensor(tag);
                    out.push((id.clone(), EventKind::Sensed { tag: tag.clone(), value }, r.ends));
                }
            }
            out.push((id, EventKind::Done, r.ends));
            if self.queue.is_empty() {
                self.state = RobotState::Idle;
            } else {
                self.state = RobotState::Assigned;
                self.start_next(r.ends);
            }
        }
        out
    }

    fn read_sensor(&mut self, tag: &str) -> f64 {
        let range = self.descriptor.sensor(tag).and_then(|s| s.range());
        let v = match range {
            Some(r) if r.max > r.min => self.rng.gen_range(r.min..=r.max),
            Some(r) => r.min,
            None => self.rng.gen_range(0.0..=1.0),
        };
        (v * 100.0).round() / 100.0
    }
}

/// A frame on the wire, in either direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub at: Millis,
    pub gateway_id: String,
    pub robot_id: String,
    pub line: String,
}

/// All gateways of one IaaS node and the robots behind them.
#[derive(Debug, Clone)]
pub struct GatewayPool {
    gateways: BTreeMap<String, GatewayInstance>,
    robots: BTreeMap<String, SimRobot>,
    frames: Vec<Frame>,
    next_gateway: u64,
    seed: u64,
}

impl GatewayPool {
    pub fn new(seed: u64) -> Self {
        GatewayPool {
            gateways: BTreeMap::new(),
            robots: BTreeMap::new(),
            frames: Vec::new(),
            next_gateway: 0,
            seed,
        }
    }

    /// Returns the live gateway for `protocol`, instantiating one if needed.
    /// A DRAINING instance is revived.
    pub fn ensure_gateway(&mut self, protocol: &str) -> &GatewayInstance {
        let protocol = if protocol.is_empty() { DEFAULT_PROTOCOL } else { protocol };
        let live = self
            .gateways
            .get(protocol)
            .is_some_and(|g| g.lifecycle != Lifecycle::Down);
        if !live {
            self.next_gateway += 1;
            let gw = GatewayInstance {
                gateway_id: format!("gw-{}", self.next_gateway),
                protocol: protocol.to_string(),
                robots: BTreeSet::new(),
                lifecycle: Lifecycle::Up,
                drain_deadline: None,
            };
            self.gateways.insert(protocol.to_string(), gw);
        }
        let gw = self.gateways.get_mut(protocol).expect("inserted above");
        gw.lifecycle = Lifecycle::Up;
        gw.drain_deadline = None;
        gw
    }

    pub fn gateway(&self, protocol: &str) -> Option<&GatewayInstance> {
        self.gateways.get(protocol)
    }

    pub fn gateways(&self) -> impl Iterator<Item = &GatewayInstance> {
        self.gateways.values()
    }

    fn protocol_of(d: &RobotDescriptor) -> &str {
        let p = d.interaction_ch.protocol.as_str();
        if p.is_empty() {
            DEFAULT_PROTOCOL
        } else {
            p
        }
    }

    /// Binds a robot to the gateway of its protocol. Returns the gateway id.
    pub fn bind(&mut self, descriptor: &RobotDescriptor, fault_p: f64) -> Result<String, GatewayError> {
        let id = descriptor.robot_id.clone();
        if self.robots.contains_key(&id) {
            return Err(GatewayError::AlreadyBound(id));
        }
        let protocol = Self::protocol_of(descriptor).to_string();
        self.ensure_gateway(&protocol);
        let gw = self.gateways.get_mut(&protocol).expect("ensured above");
        gw.robots.insert(id.clone());
        let gateway_id = gw.gateway_id.clone();
        self.robots
            .insert(id, SimRobot::new(descriptor.clone(), fault_p, self.seed));
        Ok(gateway_id)
    }

    /// Unbinds a robot; a gateway left without robots starts draining.
    pub fn unbind(&mut self, robot_id: &str, now: Millis) -> Option<SimRobot> {
        let robot = self.robots.remove(robot_id)?;
        for gw in self.gateways.values_mut() {
            if gw.robots.remove(robot_id) && gw.robots.is_empty() && gw.lifecycle == Lifecycle::Up {
                gw.lifecycle = Lifecycle::Draining;
                gw.drain_deadline = Some(quantize(now + DRAIN_TIMEOUT_MS));
            }
        }
        Some(robot)
    }

    pub fn robot(&self, robot_id: &str) -> Option<&SimRobot> {
        self.robots.get(robot_id)
    }

    pub fn robot_mut(&mut self, robot_id: &str) -> Option<&mut SimRobot> {
        self.robots.get_mut(robot_id)
    }

    pub fn robots(&self) -> impl Iterator<Item = &SimRobot> {
        self.robots.values()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    fn gateway_of(&self, robot_id: &str) -> Option<&GatewayInstance> {
        self.gateways
            .values()
            .find(|g| g.lifecycle == Lifecycle::Up && g.robots.contains(robot_id))
    }

    /// Frames `commands` as task `task_id` and queues it on the robot.
    /// Returns the emitted `CMD` lines.
    pub fn translate_and_send(
        &mut self,
        robot_id: &str,
        task_id: &str,
        commands: &[Command],
        work_ms: Millis,
        now: Millis,
    ) -> Result<Vec<String>, GatewayError> {
        let gateway_id = self
            .gateway_of(robot_id)
            .map(|g| g.gateway_id.clone())
            .ok_or_else(|| GatewayError::Unbound(robot_id.to_string()))?;
        let robot = self
            .robots
            .get(robot_id)
            .ok_or_else(|| GatewayError::Unbound(robot_id.to_string()))?;
        if robot.state == RobotState::Failed {
            return Err(GatewayError::RobotFailed(robot_id.to_string()));
        }
        for c in commands {
            let ok = match c {
                Command::Move { .. } => robot.descriptor.capability_set().contains("movement-motor"),
                Command::Actuate { tag } => robot.descriptor.capability_set().contains(tag),
                Command::Sense { tag } => robot.descriptor.sensor(tag).is_some(),
            };
            if !ok {
                return Err(GatewayError::Unsupported {
                    robot_id: robot_id.to_string(),
                    what: c.frame(task_id),
                });
            }
        }
        let lines: Vec<String> = commands.iter().map(|c| c.frame(task_id)).collect();
        for line in &lines {
            self.frames.push(Frame {
                at: now,
                gateway_id: gateway_id.clone(),
                robot_id: robot_id.to_string(),
                line: line.clone(),
            });
        }
        let robot = self.robots.get_mut(robot_id).expect("checked above");
        robot.enqueue(Task {
            task_id: task_id.to_string(),
            commands: commands.to_vec(),
            work_ms: work_ms.max(0.0),
        });
        if robot.running.is_none() {
            robot.start_next(now);
        }
        Ok(lines)
    }

    /// Advances every robot and gateway to `now` and returns the events that
    /// occurred, decoded from their `EVT` frames, in time order.
    pub fn sim_step(&mut self, now: Millis) -> Vec<RobotEvent> {
        let mut events = Vec::new();
        for (id, robot) in self.robots.iter_mut() {
            for (task_id, kind, at) in robot.sim_step(now) {
                let gateway_id = self
                    .gateways
                    .values()
                    .find(|g| g.robots.contains(id))
                    .map(|g| g.gateway_id.clone())
                    .unwrap_or_default();
                let line = event_frame(&task_id, &kind);
                self.frames.push(Frame {
                    at,
                    gateway_id,
                    robot_id: id.clone(),
                    line: line.clone(),
                });
                let (task_id, kind) = parse_event(&line).expect("well-formed event frame");
                events.push(RobotEvent {
                    robot_id: id.clone(),
                    task_id,
                    kind,
                    at,
                });
            }
        }
        for gw in self.gateways.values_mut() {
            if gw.lifecycle == Lifecycle::Draining && gw.drain_deadline.is_some_and(|d| d <= now) {
                gw.lifecycle = Lifecycle::Down;
                gw.drain_deadline = None;
            }
        }
        events.sort_by(|a, b| a.at.total_cmp(&b.at));
        events
    }

    /// Earliest instant at which [`GatewayPool::sim_step`] has work to do.
    pub fn next_deadline(&self) -> Option<Millis> {
        let robots = self.robots.values().filter_map(SimRobot::busy_until);
        let drains = self.gateways.values().filter_map(|g| g.drain_deadline);
        robots.chain(drains).min_by(|a, b| a.total_cmp(b))
    }
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lifecycle::Up => "UP",
            Lifecycle::Draining => "DRAINING",
            Lifecycle::Down => "DOWN",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::parse_descriptor;

    fn light() -> RobotDescriptor {
        parse_descriptor(
            r#"{"robotid":"light-1","sen":[{"sname":"light","sval":"(0,100)","su":"lux"}],
                "act":[["kicking-arm"],["movement-motor"]]}"#,
        )
        .unwrap()
    }

    #[test]
    fn ensure_gateway_is_idempotent() {
        let mut pool = GatewayPool::new(1);
        let a = pool.ensure_gateway("nxt").gateway_id.clone();
        let b = pool.ensure_gateway("nxt").gateway_id.clone();
        assert_eq!(a, b);
        assert_eq!(pool.gateways().count(), 1);
    }

    #[test]
    fn drained_gateway_goes_down() {
        let mut pool = GatewayPool::new(1);
        pool.bind(&light(), 0.0).unwrap();
        pool.unbind("light-1", 100.0);
        pool.sim_step(2099.0);
        assert_eq!(pool.gateway("sim").unwrap().lifecycle, Lifecycle::Draining);
        pool.sim_step(2100.0);
        assert_eq!(pool.gateway("sim").unwrap().lifecycle, Lifecycle::Down);
        let revived = pool.ensure_gateway("sim").gateway_id.clone();
        assert_eq!(revived, "gw-2");
    }

    #[test]
    fn move_and_kick_frames() {
        let mut pool = GatewayPool::new(1);
        pool.bind(&light(), 0.0).unwrap();
        let cmds = [
            Command::Move { x: 2.0, y: 3.0 },
            Command::Actuate { tag: "kicking-arm".into() },
        ];
        let lines = pool.translate_and_send("light-1", "t1", &cmds, 100.0, 0.0).unwrap();
        assert_eq!(lines, vec!["CMD t1 MOVE 2 3", "CMD t1 ACTUATE kicking-arm"]);
        let end = pool.next_deadline().unwrap();
        let travel = 13f64.sqrt() / SPEED_M_PER_S * 1000.0;
        assert!((end - (travel + 100.0)).abs() <= 1e-3);
        let evs = pool.sim_step(end);
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].kind, EventKind::Done);
        let r = pool.robot("light-1").unwrap();
        assert_eq!(r.position, Location::new(2.0, 3.0));
        assert_eq!(r.state, RobotState::Idle);
        let wire: Vec<&str> = pool.frames().iter().map(|f| f.line.as_str()).collect();
        assert_eq!(wire, vec!["CMD t1 MOVE 2 3", "CMD t1 ACTUATE kicking-arm", "EVT t1 DONE"]);
    }

    #[test]
    fn position_moves_linearly() {
        let mut pool = GatewayPool::new(1);
        pool.bind(&light(), 0.0).unwrap();
        pool.translate_and_send("light-1", "t1", &[Command::Move { x: 4.0, y: 0.0 }], 0.0, 0.0)
            .unwrap();
        pool.sim_step(4000.0);
        let r = pool.robot("light-1").unwrap();
        assert_eq!(r.state, RobotState::Executing);
        assert!((r.position.x - 2.0).abs() < 1e-9);
    }

    #[test]
    fn sensed_value_is_in_range() {
        let mut pool = GatewayPool::new(7);
        pool.bind(&light(), 0.0).unwrap();
        pool.translate_and_send("light-1", "t", &[Command::Sense { tag: "light".into() }], 10.0, 0.0)
            .unwrap();
        let evs = pool.sim_step(10.0);
        match &evs[0].kind {
            EventKind::Sensed { tag, value } => {
                assert_eq!(tag, "light");
                assert!((0.0..=100.0).contains(value));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(evs[1].kind, EventKind::Done);
    }

    #[test]
    fn failed_robot_gets_no_frames() {
        let mut pool = GatewayPool::new(1);
        pool.bind(&light(), 1.0).unwrap();
        pool.translate_and_send("light-1", "t1", &[], 100.0, 0.0).unwrap();
        let evs = pool.sim_step(100.0);
        assert!(matches!(evs[0].kind, EventKind::Fail { .. }));
        let before = pool.frames().len();
        let err = pool.translate_and_send("light-1", "t2", &[], 100.0, 200.0).unwrap_err();
        assert_eq!(err, GatewayError::RobotFailed("light-1".into()));
        assert_eq!(pool.frames().len(), before);
        pool.robot_mut("light-1").unwrap().reset();
        assert_eq!(pool.robot("light-1").unwrap().state, RobotState::Idle);
    }

    #[test]
    fn unbound_robot_is_a_routing_error() {
        let mut pool = GatewayPool::new(1);
        assert_eq!(
            pool.translate_and_send("nope", "t", &[], 1.0, 0.0).unwrap_err(),
            GatewayError::Unbound("nope".into())
        );
    }

    #[test]
    fn fault_rate_matches_probability() {
        let mut d = light();
        let mut fails = 0;
        for i in 0..1000 {
            d.robot_id = format!("r{i}");
            let mut r = SimRobot::new(d.clone(), 0.2, 42);
            r.enqueue(Task {
                task_id: "t".into(),
                commands: vec![],
                work_ms: 1.0,
            });
            let evs = r.sim_step(0.0).into_iter().chain(r.sim_step(1.0)).collect::<Vec<_>>();
            assert_eq!(evs.iter().filter(|e| e.1.is_terminal()).count(), 1);
            if matches!(evs[0].1, EventKind::Fail { .. }) {
                fails += 1;
            }
        }
        let frac = fails as f64 / 1000.0;
        assert!((frac - 0.2).abs() <= 0.03, "fail fraction {frac}");
    }

    #[test]
    fn event_frames_parse() {
        assert_eq!(parse_event("EVT t1 DONE").unwrap(), ("t1".into(), EventKind::Done));
        assert_eq!(
            parse_event("EVT t1 SENSED light 42.50").unwrap().1,
            EventKind::Sensed { tag: "light".into(), value: 42.5 }
        );
        assert!(parse_event("EVT t1 FAIL").is_err());
        assert!(parse_event("CMD t1 DONE").is_err());
    }
}
