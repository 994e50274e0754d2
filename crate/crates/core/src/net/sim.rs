use std::any::Any;
use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{
    harness_endpoint, Context, Endpoint, Finished, LogEntry, Millis, Network, Request, Response,
    Service,
};

/// Link model of the simulated transport.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// One-way latency between services on different hosts.
    pub latency_ms: Millis,
    /// Extra one-way delay drawn uniformly from `[0, jitter_ms]`.
    pub jitter_ms: Millis,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            latency_ms: 5.0,
            jitter_ms: 0.0,
            seed: 0,
        }
    }
}

fn to_us(ms: Millis) -> u64 {
    (ms.max(0.0) * 1000.0).round() as u64
}

fn to_ms(us: u64) -> Millis {
    us as f64 / 1000.0
}

enum EventKind {
    Start,
    Deliver {
        from: Endpoint,
        req: Request,
        token: Option<u64>,
    },
    Reply {
        token: u64,
        resp: Response,
    },
    Timer {
        tag: u64,
    },
}

struct Event {
    to: Endpoint,
    kind: EventKind,
}

struct Slot {
    host: String,
    svc: Option<Box<dyn Service>>,
}

enum Out {
    Send { to: Endpoint, req: Request, token: u64 },
    Timer { delay_us: u64, tag: u64 },
}

struct SimCtx<'a> {
    now_us: u64,
    me: Endpoint,
    next_token: &'a mut u64,
    log: &'a mut Vec<LogEntry>,
    out: Vec<Out>,
}

impl Context for SimCtx<'_> {
    fn now(&self) -> Millis {
        to_ms(self.now_us)
    }

    fn me(&self) -> &Endpoint {
        &self.me
    }

    fn send(&mut self, to: &Endpoint, req: Request) -> u64 {
        *self.next_token += 1;
        let token = *self.next_token;
        self.out.push(Out::Send {
            to: to.clone(),
            req,
            token,
        });
        token
    }

    fn schedule(&mut self, delay: Millis, tag: u64) {
        self.out.push(Out::Timer {
            delay_us: to_us(delay),
            tag,
        });
    }

    fn record(&mut self, kind: &str, data: Value) {
        self.log.push(LogEntry {
            t_ms: to_ms(self.now_us),
            at: self.me.clone(),
            kind: kind.to_string(),
            data,
        });
    }
}

/// Deterministic discrete-event runtime.
///
/// Messages between distinct hosts take `latency + U[0, jitter]`; messages
/// within one host are instantaneous. Each directed link is FIFO. Events
/// scheduled for the same instant run in scheduling order.
pub struct SimNet {
    params: SimParams,
    now_us: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    slots: BTreeMap<Endpoint, Slot>,
    link_clock: HashMap<(Endpoint, Endpoint), u64>,
    rng: ChaCha8Rng,
    next_token: u64,
    log: Vec<LogEntry>,
    harness_replies: BTreeMap<u64, Response>,
    hosts: HashMap<Endpoint, String>,
    trace: bool,
}

impl SimNet {
    pub fn new(params: SimParams) -> Self {
        SimNet {
            params,
            now_us: 0,
            seq: 0,
            queue: BTreeMap::new(),
            slots: BTreeMap::new(),
            link_clock: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            next_token: 0,
            log: Vec::new(),
            harness_replies: BTreeMap::new(),
            hosts: HashMap::new(),
            trace: true,
        }
    }

    /// Disables the per-delivery `recv` log entries.
    pub fn without_trace(mut self) -> Self {
        self.trace = false;
        self
    }

    pub fn params(&self) -> SimParams {
        self.params
    }

    pub fn add(&mut self, name: &str, host: &str, svc: Box<dyn Service>) -> Endpoint {
        let ep = Endpoint::sim(name);
        self.add_at(ep.clone(), host, svc);
        ep
    }

    pub fn add_at(&mut self, ep: Endpoint, host: &str, svc: Box<dyn Service>) {
        self.slots.insert(
            ep.clone(),
            Slot {
                host: host.to_string(),
                svc: Some(svc),
            },
        );
        self.push(self.now_us, Event {
            to: ep,
            kind: EventKind::Start,
        });
    }

    pub fn now_ms(&self) -> Millis {
        to_ms(self.now_us)
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn reply(&self, token: u64) -> Option<&Response> {
        self.harness_replies.get(&token)
    }

    pub fn service<T: Service>(&self, ep: &Endpoint) -> Option<&T> {
        let svc: &dyn Any = self.slots.get(ep)?.svc.as_deref()?;
        svc.downcast_ref::<T>()
    }

    pub fn service_mut<T: Service>(&mut self, ep: &Endpoint) -> Option<&mut T> {
        let svc: &mut dyn Any = self.slots.get_mut(ep)?.svc.as_deref_mut()?;
        svc.downcast_mut::<T>()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    fn push(&mut self, at_us: u64, ev: Event) {
        self.seq += 1;
        self.queue.insert((at_us, self.seq), ev);
    }

    fn host_of(&self, ep: &Endpoint) -> Option<&str> {
        self.slots.get(ep).map(|s| s.host.as_str())
    }

    fn link_delay(&mut self, from: &Endpoint, to: &Endpoint) -> u64 {
        let local = match (self.host_of(from), self.host_of(to)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        if local || *from == harness_endpoint() || *to == harness_endpoint() {
            return 0;
        }
        let jitter_us = to_us(self.params.jitter_ms);
        let jitter = if jitter_us > 0 {
            self.rng.gen_range(0..=jitter_us)
        } else {
            0
        };
        to_us(self.params.latency_ms) + jitter
    }

    /// Arrival time on the `from -> to` link, never earlier than the
    /// previous arrival on that link.
    fn arrival(&mut self, from: &Endpoint, to: &Endpoint) -> u64 {
        let at = self.now_us + self.link_delay(from, to);
        let last = self
            .link_clock
            .entry((from.clone(), to.clone()))
            .or_insert(0);
        let at = at.max(*last);
        *last = at;
        at
    }

    /// Processes the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((at_us, _), ev)) = self.queue.pop_first() else {
            return false;
        };
        self.now_us = at_us;
        let to = ev.to;

        if to == harness_endpoint() {
            if let EventKind::Reply { token, resp } = ev.kind {
                self.harness_replies.insert(token, resp);
            }
            return true;
        }

        let Some(mut svc) = self.slots.get_mut(&to).and_then(|s| s.svc.take()) else {
            if let EventKind::Deliver {
                from,
                token: Some(token),
                ..
            } = ev.kind
            {
                let at = self.arrival(&to, &from);
                self.push(at, Event {
                    to: from,
                    kind: EventKind::Reply {
                        token,
                        resp: Response::unavailable(format!("no service at {to}")),
                    },
                });
            }
            return true;
        };

        let mut ctx = SimCtx {
            now_us: self.now_us,
            me: to.clone(),
            next_token: &mut self.next_token,
            log: &mut self.log,
            out: Vec::new(),
        };
        let mut reply = None;
        match ev.kind {
            EventKind::Start => svc.start(&mut ctx),
            EventKind::Deliver { from, req, token } => {
                if self.trace {
                    ctx.record(
                        "recv",
                        json!({ "from": from, "method": req.method.as_str(), "target": req.target }),
                    );
                }
                let resp = svc.handle(&from, &req, &mut ctx);
                if let Some(token) = token {
                    reply = Some((from, token, resp));
                }
            }
            EventKind::Reply { token, resp } => svc.on_reply(token, resp, &mut ctx),
            EventKind::Timer { tag } => svc.on_timer(tag, &mut ctx),
        }
        let out = std::mem::take(&mut ctx.out);
        drop(ctx);
        if let Some(slot) = self.slots.get_mut(&to) {
            slot.svc = Some(svc);
        }

        if let Some((from, token, resp)) = reply {
            let at = self.arrival(&to, &from);
            self.push(at, Event {
                to: from,
                kind: EventKind::Reply { token, resp },
            });
        }
        for o in out {
            match o {
                Out::Send { to: dst, req, token } => {
                    let at = self.arrival(&to, &dst);
                    self.push(at, Event {
                        to: dst,
                        kind: EventKind::Deliver {
                            from: to.clone(),
                            req,
                            token: Some(token),
                        },
                    });
                }
                Out::Timer { delay_us, tag } => {
                    let at = self.now_us + delay_us;
                    self.push(at, Event {
                        to: to.clone(),
                        kind: EventKind::Timer { tag },
                    });
                }
            }
        }
        true
    }

    /// Runs until the queue drains. Panics after `max_events` events, which
    /// only happens when services keep re-arming timers forever.
    pub fn run_until_idle(&mut self) {
        const MAX_EVENTS: u64 = 50_000_000;
        let mut n = 0;
        while self.step() {
            n += 1;
            assert!(n < MAX_EVENTS, "simulation did not quiesce");
        }
    }

    /// Processes every event scheduled at or before `t_ms`, then advances
    /// the clock to `t_ms`.
    pub fn run_until(&mut self, t_ms: Millis) {
        let limit = to_us(t_ms);
        while let Some((&(at, _), _)) = self.queue.first_key_value() {
            if at > limit {
                break;
            }
            self.step();
        }
        self.now_us = self.now_us.max(limit);
    }

    pub fn inject_at(&mut self, at_ms: Millis, to: &Endpoint, req: Request) -> u64 {
        self.next_token += 1;
        let token = self.next_token;
        let at = to_us(at_ms).max(self.now_us);
        self.push(at, Event {
            to: to.clone(),
            kind: EventKind::Deliver {
                from: harness_endpoint(),
                req,
                token: Some(token),
            },
        });
        token
    }
}

impl Network for SimNet {
    fn endpoint(&mut self, name: &str, host: &str) -> Endpoint {
        let ep = Endpoint::sim(name);
        self.hosts.insert(ep.clone(), host.to_string());
        ep
    }

    fn spawn(&mut self, ep: &Endpoint, svc: Box<dyn Service>) {
        let host = self.hosts.get(ep).cloned().unwrap_or_else(|| ep.to_string());
        self.add_at(ep.clone(), &host, svc);
    }

    fn inject(&mut self, at: Millis, to: &Endpoint, req: Request) -> u64 {
        self.inject_at(at, to, req)
    }

    fn reply(&self, token: u64) -> Option<&Response> {
        SimNet::reply(self, token)
    }

    fn settle(&mut self) {
        self.run_until_idle();
    }

    fn now(&self) -> Millis {
        self.now_ms()
    }

    fn finish(self: Box<Self>) -> Finished {
        let this = *self;
        Finished {
            services: this
                .slots
                .into_iter()
                .filter_map(|(ep, slot)| slot.svc.map(|s| (ep, s)))
                .collect(),
            log: this.log,
            replies: this.harness_replies,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Method;

    /// Echoes requests and, on `/ping?to=..`, pings a peer.
    #[derive(Default)]
    struct Echo {
        replies: Vec<(Millis, u16)>,
        timers: Vec<(Millis, u64)>,
        received: Vec<(Millis, String)>,
    }

    impl Service for Echo {
        fn handle(&mut self, _from: &Endpoint, req: &Request, ctx: &mut dyn Context) -> Response {
            self.received.push((ctx.now(), req.target.clone()));
            if let Some(peer) = req.query("to") {
                for i in 0..req.query("n").and_then(|n| n.parse().ok()).unwrap_or(1) {
                    ctx.send(&Endpoint::new(&peer), Request::get(format!("/echo/{i}")));
                }
            }
            if let Some(t) = req.query("timer") {
                ctx.schedule(t.parse().unwrap(), 7);
            }
            Response::new(200, req.body.clone())
        }

        fn on_reply(&mut self, _token: u64, resp: Response, ctx: &mut dyn Context) {
            self.replies.push((ctx.now(), resp.status));
        }

        fn on_timer(&mut self, tag: u64, ctx: &mut dyn Context) {
            self.timers.push((ctx.now(), tag));
        }
    }

    #[test]
    fn round_trip_takes_two_latencies() {
        let mut net = SimNet::new(SimParams {
            latency_ms: 5.0,
            jitter_ms: 0.0,
            seed: 1,
        });
        let a = net.add("a", "h1", Box::new(Echo::default()));
        let b = net.add("b", "h2", Box::new(Echo::default()));
        let tok = net.inject_at(1.0, &a, Request::get(format!("/ping?to={}", b)));
        net.run_until_idle();
        assert_eq!(net.reply(tok).unwrap().status, 200);
        let b_svc = net.service::<Echo>(&b).unwrap();
        assert_eq!(b_svc.received, vec![(6.0, "/echo/0".to_string())]);
        assert_eq!(net.service::<Echo>(&a).unwrap().replies, vec![(11.0, 200)]);
    }

    #[test]
    fn same_host_is_instant_and_unknown_peer_is_unavailable() {
        let mut net = SimNet::new(SimParams::default());
        let a = net.add("a", "h", Box::new(Echo::default()));
        let b = net.add("b", "h", Box::new(Echo::default()));
        net.inject_at(0.0, &a, Request::get(format!("/ping?to={b}")));
        net.inject_at(0.0, &a, Request::get("/ping?to=sim://nowhere"));
        net.run_until_idle();
        let replies = &net.service::<Echo>(&a).unwrap().replies;
        assert!(replies.contains(&(0.0, 200)));
        assert!(replies.contains(&(10.0, 503)));
    }

    #[test]
    fn links_are_fifo_under_jitter() {
        let mut net = SimNet::new(SimParams {
            latency_ms: 5.0,
            jitter_ms: 3.0,
            seed: 9,
        });
        let a = net.add("a", "h1", Box::new(Echo::default()));
        let b = net.add("b", "h2", Box::new(Echo::default()));
        net.inject_at(0.0, &a, Request::get(format!("/ping?to={b}&n=50")));
        net.run_until_idle();
        let got: Vec<String> = net.service::<Echo>(&b).unwrap().received.iter().map(|r| r.1.clone()).collect();
        let want: Vec<String> = (0..50).map(|i| format!("/echo/{i}")).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn timers_fire_at_deadline() {
        let mut net = SimNet::new(SimParams::default());
        let a = net.add("a", "h", Box::new(Echo::default()));
        net.inject_at(2.0, &a, Request::new(Method::Get, "/x?timer=3.5", ""));
        net.run_until(4.0);
        assert!(net.service::<Echo>(&a).unwrap().timers.is_empty());
        net.run_until_idle();
        assert_eq!(net.service::<Echo>(&a).unwrap().timers, vec![(5.5, 7)]);
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let run = |seed| {
            let mut net = SimNet::new(SimParams {
                latency_ms: 5.0,
                jitter_ms: 1.0,
                seed,
            });
            let a = net.add("a", "h1", Box::new(Echo::default()));
            let b = net.add("b", "h2", Box::new(Echo::default()));
            net.inject_at(0.0, &a, Request::get(format!("/ping?to={b}&n=20")));
            net.run_until_idle();
            serde_json::to_string(net.log()).unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
