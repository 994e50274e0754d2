use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tracing::warn;

use super::{
    harness_endpoint, Context, Endpoint, Finished, LogEntry, Method, Millis, Network, Request,
    Response, Service,
};

const FROM_HEADER: &str = "X-From";

enum Inbound {
    Request {
        from: Endpoint,
        req: Request,
        reply: Sender<Response>,
    },
    Reply {
        token: u64,
        resp: Response,
    },
    Start,
    Stop,
}

/// State shared by every actor of one [`SocketNet`].
struct Shared {
    start: Instant,
    log: Mutex<Vec<LogEntry>>,
    /// Outstanding messages plus armed timers; zero means quiescent.
    busy: AtomicI64,
    next_token: AtomicU64,
    agent: ureq::Agent,
}

impl Shared {
    fn now(&self) -> Millis {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    fn call(&self, from: &Endpoint, to: &Endpoint, req: &Request) -> Response {
        let url = to.uri(&req.target);
        let result = self
            .agent
            .request(req.method.as_str(), &url)
            .set(FROM_HEADER, from.as_str())
            .send_string(&req.body);
        match result {
            Ok(resp) => {
                let status = resp.status();
                Response::new(status, resp.into_string().unwrap_or_default())
            }
            Err(ureq::Error::Status(status, resp)) => {
                Response::new(status, resp.into_string().unwrap_or_default())
            }
            Err(e) => Response::unavailable(e),
        }
    }
}

enum Out {
    Send { to: Endpoint, req: Request, token: u64 },
    Timer { delay: Millis, tag: u64 },
}

struct SockCtx<'a> {
    me: &'a Endpoint,
    shared: &'a Shared,
    out: Vec<Out>,
}

impl Context for SockCtx<'_> {
    fn now(&self) -> Millis {
        self.shared.now()
    }

    fn me(&self) -> &Endpoint {
        self.me
    }

    fn send(&mut self, to: &Endpoint, req: Request) -> u64 {
        let token = self.shared.next_token.fetch_add(1, Ordering::SeqCst) + 1;
        self.out.push(Out::Send {
            to: to.clone(),
            req,
            token,
        });
        token
    }

    fn schedule(&mut self, delay: Millis, tag: u64) {
        self.out.push(Out::Timer { delay, tag });
    }

    fn record(&mut self, kind: &str, data: Value) {
        let entry = LogEntry {
            t_ms: self.shared.now(),
            at: self.me.clone(),
            kind: kind.to_string(),
            data,
        };
        self.shared.log.lock().expect("log lock").push(entry);
    }
}

struct Actor {
    me: Endpoint,
    svc: Box<dyn Service>,
    inbox: Receiver<Inbound>,
    self_tx: Sender<Inbound>,
    shared: Arc<Shared>,
    timers: BinaryHeap<Reverse<(Instant, u64, u64)>>,
    timer_seq: u64,
}

impl Actor {
    fn run(mut self) -> Box<dyn Service> {
        loop {
            let msg = match self.timers.peek() {
                Some(Reverse((deadline, _, _))) => {
                    let wait = deadline.saturating_duration_since(Instant::now());
                    match self.inbox.recv_timeout(wait) {
                        Ok(m) => Some(m),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                }
                None => match self.inbox.recv() {
                    Ok(m) => Some(m),
                    Err(_) => break,
                },
            };
            match msg {
                Some(Inbound::Stop) => break,
                Some(m) => self.dispatch(m),
                None => {}
            }
            self.fire_due_timers();
        }
        self.svc
    }

    fn dispatch(&mut self, msg: Inbound) {
        let shared = Arc::clone(&self.shared);
        let mut ctx = SockCtx {
            me: &self.me,
            shared: &shared,
            out: Vec::new(),
        };
        match msg {
            Inbound::Start => self.svc.start(&mut ctx),
            Inbound::Request { from, req, reply } => {
                ctx.record(
                    "recv",
                    json!({ "from": from, "method": req.method.as_str(), "target": req.target }),
                );
                let resp = self.svc.handle(&from, &req, &mut ctx);
                let _ = reply.send(resp);
            }
            Inbound::Reply { token, resp } => {
                self.svc.on_reply(token, resp, &mut ctx);
                shared.busy.fetch_sub(1, Ordering::SeqCst);
            }
            Inbound::Stop => {}
        }
        let out = ctx.out;
        self.flush(out);
    }

    fn fire_due_timers(&mut self) {
        let now = Instant::now();
        while let Some(Reverse((deadline, _, tag))) = self.timers.peek().copied() {
            if deadline > now {
                break;
            }
            self.timers.pop();
            let shared = Arc::clone(&self.shared);
            let mut ctx = SockCtx {
                me: &self.me,
                shared: &shared,
                out: Vec::new(),
            };
            self.svc.on_timer(tag, &mut ctx);
            let out = ctx.out;
            self.flush(out);
            shared.busy.fetch_sub(1, Ordering::SeqCst);
        }
    }

    fn flush(&mut self, out: Vec<Out>) {
        for o in out {
            self.shared.busy.fetch_add(1, Ordering::SeqCst);
            match o {
                Out::Send { to, req, token } => {
                    let shared = Arc::clone(&self.shared);
                    let me = self.me.clone();
                    let tx = self.self_tx.clone();
                    thread::spawn(move || {
                        let resp = shared.call(&me, &to, &req);
                        if tx.send(Inbound::Reply { token, resp }).is_err() {
                            shared.busy.fetch_sub(1, Ordering::SeqCst);
                        }
                    });
                }
                Out::Timer { delay, tag } => {
                    self.timer_seq += 1;
                    let deadline = Instant::now() + Duration::from_secs_f64(delay.max(0.0) / 1000.0);
                    self.timers.push(Reverse((deadline, self.timer_seq, tag)));
                }
            }
        }
    }
}

fn serve(server: Arc<tiny_http::Server>, tx: Sender<Inbound>) {
    for mut rq in server.incoming_requests() {
        let Some(method) = Method::parse(rq.method().as_str()) else {
            let _ = rq.respond(tiny_http::Response::from_string("").with_status_code(405));
            continue;
        };
        let from = rq
            .headers()
            .iter()
            .find(|h| h.field.equiv(FROM_HEADER))
            .map(|h| Endpoint::new(h.value.as_str()))
            .unwrap_or_else(harness_endpoint);
        let mut body = String::new();
        if rq.as_reader().read_to_string(&mut body).is_err() {
            let _ = rq.respond(tiny_http::Response::from_string("").with_status_code(400));
            continue;
        }
        let req = Request::new(method, rq.url().to_string(), body);
        let (reply_tx, reply_rx) = mpsc::channel();
        if tx.send(Inbound::Request { from, req, reply: reply_tx }).is_err() {
            let _ = rq.respond(tiny_http::Response::from_string("").with_status_code(503));
            continue;
        }
        let resp = reply_rx
            .recv()
            .unwrap_or_else(|_| Response::unavailable("service stopped"));
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
            .expect("static header");
        let out = tiny_http::Response::from_string(resp.body)
            .with_status_code(resp.status)
            .with_header(header);
        if let Err(e) = rq.respond(out) {
            warn!("failed to answer request: {e}");
        }
    }
}

/// Runtime where every service listens on its own localhost HTTP port.
pub struct SocketNet {
    shared: Arc<Shared>,
    reserved: BTreeMap<Endpoint, Arc<tiny_http::Server>>,
    actors: BTreeMap<Endpoint, (Sender<Inbound>, JoinHandle<Box<dyn Service>>)>,
    listeners: Vec<(Arc<tiny_http::Server>, JoinHandle<()>)>,
    replies: BTreeMap<u64, Response>,
    /// How long `busy == 0` must hold before `settle` returns.
    quiet_period: Duration,
    settle_timeout: Duration,
}

impl Default for SocketNet {
    fn default() -> Self {
        Self::new()
    }
}

impl SocketNet {
    pub fn new() -> Self {
        SocketNet {
            shared: Arc::new(Shared {
                start: Instant::now(),
                log: Mutex::new(Vec::new()),
                busy: AtomicI64::new(0),
                next_token: AtomicU64::new(1 << 32),
                agent: ureq::AgentBuilder::new()
                    .timeout(Duration::from_secs(5))
                    .build(),
            }),
            reserved: BTreeMap::new(),
            actors: BTreeMap::new(),
            listeners: Vec::new(),
            replies: BTreeMap::new(),
            quiet_period: Duration::from_millis(50),
            settle_timeout: Duration::from_secs(60),
        }
    }

    pub fn reply(&self, token: u64) -> Option<&Response> {
        self.replies.get(&token)
    }

    fn bind(&mut self) -> std::io::Result<Endpoint> {
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("listener has no IP address"))?;
        let ep = Endpoint::new(format!("http://127.0.0.1:{port}"));
        self.reserved.insert(ep.clone(), Arc::new(server));
        Ok(ep)
    }
}

impl Network for SocketNet {
    fn endpoint(&mut self, _name: &str, _host: &str) -> Endpoint {
        self.bind().expect("bind localhost listener")
    }

    fn spawn(&mut self, ep: &Endpoint, svc: Box<dyn Service>) {
        let server = self
            .reserved
            .remove(ep)
            .unwrap_or_else(|| panic!("endpoint {ep} was not reserved"));
        let (tx, rx) = mpsc::channel();
        let actor = Actor {
            me: ep.clone(),
            svc,
            inbox: rx,
            self_tx: tx.clone(),
            shared: Arc::clone(&self.shared),
            timers: BinaryHeap::new(),
            timer_seq: 0,
        };
        tx.send(Inbound::Start).expect("fresh channel");
        let handle = thread::spawn(move || actor.run());
        let listener_tx = tx.clone();
        let srv = Arc::clone(&server);
        let listener = thread::spawn(move || serve(srv, listener_tx));
        self.listeners.push((server, listener));
        self.actors.insert(ep.clone(), (tx, handle));
    }

    fn inject(&mut self, at: Millis, to: &Endpoint, req: Request) -> u64 {
        let wait = at - self.shared.now();
        if wait > 0.0 {
            thread::sleep(Duration::from_secs_f64(wait / 1000.0));
        }
        let token = self.shared.next_token.fetch_add(1, Ordering::SeqCst) + 1;
        let resp = self.shared.call(&harness_endpoint(), to, &req);
        self.replies.insert(token, resp);
        token
    }

    fn reply(&self, token: u64) -> Option<&Response> {
        SocketNet::reply(self, token)
    }

    fn settle(&mut self) {
        let deadline = Instant::now() + self.settle_timeout;
        let mut quiet_since: Option<Instant> = None;
        while Instant::now() < deadline {
            if self.shared.busy.load(Ordering::SeqCst) == 0 {
                let since = *quiet_since.get_or_insert_with(Instant::now);
                if since.elapsed() >= self.quiet_period {
                    return;
                }
            } else {
                quiet_since = None;
            }
            thread::sleep(Duration::from_millis(2));
        }
        warn!("socket network did not settle within {:?}", self.settle_timeout);
    }

    fn now(&self) -> Millis {
        self.shared.now()
    }

    fn finish(self: Box<Self>) -> Finished {
        let this = *self;
        for (tx, _) in this.actors.values() {
            let _ = tx.send(Inbound::Stop);
        }
        for (server, _) in &this.listeners {
            server.unblock();
        }
        let mut services = BTreeMap::new();
        for (ep, (_, handle)) in this.actors {
            if let Ok(svc) = handle.join() {
                services.insert(ep, svc);
            }
        }
        for (_, handle) in this.listeners {
            let _ = handle.join();
        }
        let mut log = std::mem::take(&mut *this.shared.log.lock().expect("log lock"));
        log.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms));
        Finished {
            services,
            log,
            replies: this.replies,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counter {
        hits: u32,
        peer_status: Vec<u16>,
        fired: bool,
    }

    impl Service for Counter {
        fn handle(&mut self, from: &Endpoint, req: &Request, ctx: &mut dyn Context) -> Response {
            self.hits += 1;
            if let Some(peer) = req.query("to") {
                ctx.send(&Endpoint::new(peer), Request::post("/hit", ""));
                ctx.schedule(5.0, 1);
            }
            Response::new(200, format!("{}:{}", from, req.body))
        }

        fn on_reply(&mut self, _token: u64, resp: Response, _ctx: &mut dyn Context) {
            self.peer_status.push(resp.status);
        }

        fn on_timer(&mut self, _tag: u64, _ctx: &mut dyn Context) {
            self.fired = true;
        }
    }

    #[test]
    fn services_talk_over_localhost() {
        let mut net = Box::new(SocketNet::new());
        let a = net.endpoint("a", "a");
        let b = net.endpoint("b", "b");
        net.spawn(&a, Box::new(Counter { hits: 0, peer_status: vec![], fired: false }));
        net.spawn(&b, Box::new(Counter { hits: 0, peer_status: vec![], fired: false }));
        let tok = net.inject(0.0, &a, Request::post(format!("/go?to={b}"), "x"));
        assert_eq!(net.reply(tok).unwrap().status, 200);
        assert!(net.reply(tok).unwrap().body.ends_with(":x"));
        net.settle();
        let done = net.finish();
        let a_svc = done.service::<Counter>(&a).unwrap();
        assert_eq!(a_svc.peer_status, vec![200]);
        assert!(a_svc.fired);
        assert_eq!(done.service::<Counter>(&b).unwrap().hits, 1);
        assert!(done.log.iter().any(|e| e.kind == "recv" && e.at == b));
    }
}
