//! Flooding P2P overlay used as the comparison baseline.
//!
//! One overlay node is co-hosted with each IaaS node. Publication floods
//! advertisements, discovery floods queries whose hits travel back along
//! the reverse path, and task assignment rides point-to-point pipes routed
//! hop by hop. Every packet a node receives waits `d_proc` before it is
//! processed; the sending node adds nothing.
//!
//! Local API (from the attached IaaS):
//! `POST /overlay/advertise`, `POST /overlay/discover`, `POST /overlay/pipe`.
//! Discovery results are posted back to the IaaS at `/overlay/result`;
//! cached advertisements are pushed to its `/notify`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::warn;

use crate::descriptor::{CapabilitySet, RobotDescriptor, RobotState};
use crate::net::{Context, Endpoint, Method, Millis, Request, Response, Service};
use crate::presence::Notification;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Topology {
    Line,
    Ring,
    /// Random `degree`-regular graph, retried until connected.
    RandomRegular { degree: usize, seed: u64 },
}

impl Default for Topology {
    fn default() -> Self {
        Topology::Ring
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("a {degree}-regular graph on {n} nodes does not exist")]
    NoRegularGraph { n: usize, degree: usize },
    #[error("no connected {degree}-regular graph found on {n} nodes")]
    Disconnected { n: usize, degree: usize },
}

/// Symmetric adjacency sets, one per node.
pub type Adjacency = Vec<BTreeSet<usize>>;

pub fn build_topology(n: usize, topology: Topology) -> Result<Adjacency, TopologyError> {
    let mut adj: Adjacency = vec![BTreeSet::new(); n];
    let link = |adj: &mut Adjacency, a: usize, b: usize| {
        if a != b {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    };
    match topology {
        Topology::Line => {
            for i in 1..n {
                link(&mut adj, i - 1, i);
            }
        }
        Topology::Ring => {
            for i in 1..n {
                link(&mut adj, i - 1, i);
            }
            if n > 2 {
                link(&mut adj, n - 1, 0);
            }
        }
        Topology::RandomRegular { degree, seed } => {
            if n <= 1 {
                return Ok(adj);
            }
            if degree >= n || (n * degree) % 2 != 0 {
                return Err(TopologyError::NoRegularGraph { n, degree });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                if let Some(g) = pairing_model(n, degree, &mut rng) {
                    if diameter(&g).is_some() {
                        return Ok(g);
                    }
                }
            }
            return Err(TopologyError::Disconnected { n, degree });
        }
    }
    Ok(adj)
}

/// One attempt of the configuration (pairing) model; `None` on a
/// self-loop or multi-edge.
fn pairing_model(n: usize, degree: usize, rng: &mut ChaCha8Rng) -> Option<Adjacency> {
    let mut stubs: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(degree)).collect();
    stubs.shuffle(rng);
    let mut adj: Adjacency = vec![BTreeSet::new(); n];
    for pair in stubs.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        if a == b || !adj[a].insert(b) {
            return None;
        }
        adj[b].insert(a);
    }
    Some(adj)
}

/// Hop distances from `src`; `None` for unreachable nodes.
pub fn hop_distances(adj: &Adjacency, src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    let mut queue = VecDeque::from([src]);
    dist[src] = Some(0);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued nodes have a distance");
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Largest hop distance, or `None` if the graph is disconnected.
pub fn diameter(adj: &Adjacency) -> Option<usize> {
    let mut d = 0;
    for src in 0..adj.len() {
        for x in hop_distances(adj, src) {
            d = d.max(x?);
        }
    }
    Some(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayParams {
    /// Per-packet processing delay at every receiving node.
    pub d_proc_ms: Millis,
    /// Lifetime of a cached advertisement.
    pub ttl_ms: Millis,
    /// Time after which a discovery round reports partial results.
    pub query_timeout_ms: Millis,
}

impl Default for OverlayParams {
    fn default() -> Self {
        OverlayParams {
            d_proc_ms: 1.0,
            ttl_ms: 30_000.0,
            query_timeout_ms: 1_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayPeer {
    pub node_id: String,
    pub overlay: Endpoint,
    pub iaas: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub index: usize,
    pub peers: Vec<OverlayPeer>,
    pub adjacency: Adjacency,
    pub params: OverlayParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advertisement {
    #[serde(rename = "robotid")]
    pub robot_id: String,
    pub caps: CapabilitySet,
    pub state: RobotState,
    pub version: u64,
    pub hop_count: usize,
    pub origin: usize,
    /// Endpoint of the owning IaaS node.
    pub owner: String,
    pub descriptor: RobotDescriptor,
}

/// Body of `POST /overlay/advertise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiseBody {
    pub descriptor: RobotDescriptor,
    pub version: u64,
}

/// Body of `POST /overlay/discover`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverBody {
    pub query_id: String,
    #[serde(default)]
    pub caps: Vec<String>,
    /// Skip the local cache and always run a query round.
    #[serde(default)]
    pub force_remote: bool,
}

/// Body of `POST /overlay/pipe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeBody {
    /// Endpoint of the destination IaaS node.
    pub dst: String,
    pub target: String,
    pub body: String,
}

/// Body posted to the IaaS at `/overlay/result`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverResult {
    pub query_id: String,
    pub complete: bool,
    /// Query rounds run: 0 on a warm cache, 1 otherwise.
    pub rounds: u32,
    pub responders: usize,
    pub ads: Vec<Advertisement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OverlayMsg {
    Advert(Advertisement),
    Query {
        query_id: String,
        origin: usize,
        caps: Vec<String>,
        hops: usize,
    },
    Hit {
        query_id: String,
        origin: usize,
        responder: usize,
        ads: Vec<Advertisement>,
    },
    Pipe {
        pipe_id: String,
        src: usize,
        dst: usize,
        hops: usize,
        target: String,
        body: String,
    },
}

#[derive(Debug, Clone)]
struct Cached {
    ad: Advertisement,
    expires_at: Millis,
}

#[derive(Debug, Clone)]
struct OpenQuery {
    caps: CapabilitySet,
    expected: usize,
    responders: BTreeSet<usize>,
    ads: Vec<Advertisement>,
}

enum Pending {
    Process { from: usize, msg: OverlayMsg },
    QueryTimeout(String),
}

/// One overlay node.
pub struct OverlayNode {
    cfg: OverlayConfig,
    diameter: usize,
    /// Next hop towards every destination, by BFS.
    next_hop: Vec<Option<usize>>,
    local: BTreeMap<String, Advertisement>,
    cache: BTreeMap<String, Cached>,
    seen_ads: BTreeSet<(usize, String, u64)>,
    seen_queries: BTreeSet<String>,
    /// Reverse path of each query this node forwarded.
    query_from: BTreeMap<String, usize>,
    open: BTreeMap<String, OpenQuery>,
    pending: BTreeMap<u64, Pending>,
    next_tag: u64,
    next_pipe: u64,
    /// Packets processed (after `d_proc`), the per-node overhead.
    pub processed: u64,
}

impl OverlayNode {
    pub fn new(cfg: OverlayConfig) -> Self {
        let diameter = diameter(&cfg.adjacency).unwrap_or(cfg.adjacency.len());
        let next_hop = (0..cfg.adjacency.len())
            .map(|dst| {
                let dist = hop_distances(&cfg.adjacency, dst);
                let mine = dist[cfg.index]?;
                if mine == 0 {
                    return None;
                }
                cfg.adjacency[cfg.index]
                    .iter()
                    .copied()
                    .find(|&n| dist[n] == Some(mine - 1))
            })
            .collect();
        OverlayNode {
            cfg,
            diameter,
            next_hop,
            local: BTreeMap::new(),
            cache: BTreeMap::new(),
            seen_ads: BTreeSet::new(),
            seen_queries: BTreeSet::new(),
            query_from: BTreeMap::new(),
            open: BTreeMap::new(),
            pending: BTreeMap::new(),
            next_tag: 0,
            next_pipe: 0,
            processed: 0,
        }
    }

    pub fn index(&self) -> usize {
        self.cfg.index
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    /// Live cached advertisements of remote robots.
    pub fn cached(&self, now: Millis) -> Vec<&Advertisement> {
        self.cache
            .values()
            .filter(|c| c.expires_at > now)
            .map(|c| &c.ad)
            .collect()
    }

    pub fn local_ads(&self) -> impl Iterator<Item = &Advertisement> {
        self.local.values()
    }

    fn me(&self) -> &OverlayPeer {
        &self.cfg.peers[self.cfg.index]
    }

    fn index_of_iaas(&self, uri: &str) -> Option<usize> {
        self.cfg.peers.iter().position(|p| p.iaas.as_str() == uri)
    }

    fn send_msg(&self, to: usize, msg: &OverlayMsg, ctx: &mut dyn Context) {
        let ep = self.cfg.peers[to].overlay.clone();
        ctx.send(&ep, Request::json(Method::Post, "/overlay/msg", msg));
    }

    fn flood(&self, except: Option<usize>, msg: &OverlayMsg, ctx: &mut dyn Context) {
        for &n in &self.cfg.adjacency[self.cfg.index] {
            if Some(n) != except {
                self.send_msg(n, msg, ctx);
            }
        }
    }

    fn arm(&mut self, delay: Millis, p: Pending, ctx: &mut dyn Context) {
        self.next_tag += 1;
        self.pending.insert(self.next_tag, p);
        ctx.schedule(delay, self.next_tag);
    }

    fn expire(&mut self, now: Millis) {
        self.cache.retain(|_, c| c.expires_at > now);
    }

    fn push_to_iaas(&self, ad: &Advertisement, ctx: &mut dyn Context) {
        let n = Notification {
            robot_id: ad.robot_id.clone(),
            owner: ad.owner.clone(),
            state: ad.state,
            version: ad.version,
            subscriber_id: format!("overlay-{}", self.me().node_id),
            initial: false,
            descriptor: Some(ad.descriptor.clone()),
        };
        let iaas = self.me().iaas.clone();
        ctx.send(&iaas, Request::json(Method::Post, "/notify", &n));
    }

    fn matching_local(&self, caps: &CapabilitySet) -> Vec<Advertisement> {
        self.local
            .values()
            .filter(|a| a.state != RobotState::Offline && a.caps.is_superset(caps))
            .cloned()
            .collect()
    }

    fn advertise(&mut self, body: AdvertiseBody, ctx: &mut dyn Context) {
        let d = body.descriptor.normalized();
        let ad = Advertisement {
            robot_id: d.robot_id.clone(),
            caps: d.capability_set(),
            state: d.dynamic_ch.state,
            version: body.version,
            hop_count: 0,
            origin: self.cfg.index,
            owner: self.me().iaas.to_string(),
            descriptor: d,
        };
        self.seen_ads
            .insert((ad.origin, ad.robot_id.clone(), ad.version));
        if ad.state == RobotState::Offline {
            self.local.remove(&ad.robot_id);
        } else {
            self.local.insert(ad.robot_id.clone(), ad.clone());
        }
        ctx.record("overlay_advertise", json!({ "robotid": ad.robot_id, "version": ad.version }));
        self.flood(None, &OverlayMsg::Advert(ad), ctx);
    }

    fn discover(&mut self, body: DiscoverBody, ctx: &mut dyn Context) {
        let now = ctx.now();
        self.expire(now);
        let caps: CapabilitySet = body.caps.iter().collect();
        let warm: Vec<Advertisement> = self
            .cached(now)
            .into_iter()
            .filter(|a| a.state != RobotState::Offline && a.caps.is_superset(&caps))
            .cloned()
            .collect();
        if !body.force_remote && !warm.is_empty() {
            let mut ads = self.matching_local(&caps);
            ads.extend(warm);
            self.post_result(
                DiscoverResult {
                    query_id: body.query_id,
                    complete: true,
                    rounds: 0,
                    responders: 0,
                    ads,
                },
                ctx,
            );
            return;
        }
        let reachable = hop_distances(&self.cfg.adjacency, self.cfg.index)
            .iter()
            .filter(|d| matches!(d, Some(h) if *h > 0))
            .count();
        self.seen_queries.insert(body.query_id.clone());
        self.open.insert(
            body.query_id.clone(),
            OpenQuery {
                caps: caps.clone(),
                expected: reachable,
                responders: BTreeSet::new(),
                ads: self.matching_local(&caps),
            },
        );
        ctx.record("overlay_query", json!({ "query_id": body.query_id, "expected": reachable }));
        if reachable == 0 {
            self.finish_query(&body.query_id, true, ctx);
            return;
        }
        let msg = OverlayMsg::Query {
            query_id: body.query_id.clone(),
            origin: self.cfg.index,
            caps: caps.to_vec(),
            hops: 0,
        };
        self.flood(None, &msg, ctx);
        let timeout = self.cfg.params.query_timeout_ms;
        self.arm(timeout, Pending::QueryTimeout(body.query_id), ctx);
    }

    fn post_result(&self, result: DiscoverResult, ctx: &mut dyn Context) {
        let iaas = self.me().iaas.clone();
        ctx.send(&iaas, Request::json(Method::Post, "/overlay/result", &result));
    }

    fn finish_query(&mut self, query_id: &str, complete: bool, ctx: &mut dyn Context) {
        if let Some(q) = self.open.remove(query_id) {
            let mut ads = q.ads;
            ads.sort_by(|a, b| a.robot_id.cmp(&b.robot_id));
            self.post_result(
                DiscoverResult {
                    query_id: query_id.to_string(),
                    complete,
                    rounds: 1,
                    responders: q.responders.len(),
                    ads,
                },
                ctx,
            );
        }
    }

    fn pipe(&mut self, body: PipeBody, ctx: &mut dyn Context) -> Response {
        let Some(dst) = self.index_of_iaas(&body.dst) else {
            return Response::error(404, format!("no overlay node for {}", body.dst));
        };
        self.next_pipe += 1;
        let pipe_id = format!("{}-p{}", self.me().node_id, self.next_pipe);
        if dst == self.cfg.index {
            let iaas = self.me().iaas.clone();
            ctx.send(&iaas, Request::post(body.target, body.body));
            return Response::json(202, &json!({ "pipe_id": pipe_id, "hops": 0 }));
        }
        let Some(next) = self.next_hop[dst] else {
            return Response::error(404, format!("no overlay path to {}", body.dst));
        };
        let msg = OverlayMsg::Pipe {
            pipe_id: pipe_id.clone(),
            src: self.cfg.index,
            dst,
            hops: 0,
            target: body.target,
            body: body.body,
        };
        self.send_msg(next, &msg, ctx);
        Response::json(202, &json!({ "pipe_id": pipe_id }))
    }

    fn process(&mut self, from: usize, msg: OverlayMsg, ctx: &mut dyn Context) {
        self.processed += 1;
        let now = ctx.now();
        match msg {
            OverlayMsg::Advert(mut ad) => {
                ad.hop_count += 1;
                let key = (ad.origin, ad.robot_id.clone(), ad.version);
                if ad.origin == self.cfg.index || !self.seen_ads.insert(key) {
                    return;
                }
                let newer = self
                    .cache
                    .get(&ad.robot_id)
                    .is_none_or(|c| c.ad.version < ad.version);
                if newer {
                    if ad.state == RobotState::Offline {
                        self.cache.remove(&ad.robot_id);
                    } else {
                        self.cache.insert(
                            ad.robot_id.clone(),
                            Cached {
                                ad: ad.clone(),
                                expires_at: now + self.cfg.params.ttl_ms,
                            },
                        );
                    }
                    self.push_to_iaas(&ad, ctx);
                }
                if ad.hop_count < self.diameter {
                    self.flood(Some(from), &OverlayMsg::Advert(ad), ctx);
                }
            }
            OverlayMsg::Query {
                query_id,
                origin,
                caps,
                hops,
            } => {
                if !self.seen_queries.insert(query_id.clone()) {
                    return;
                }
                self.query_from.insert(query_id.clone(), from);
                let set: CapabilitySet = caps.iter().collect();
                let hit = OverlayMsg::Hit {
                    query_id: query_id.clone(),
                    origin,
                    responder: self.cfg.index,
                    ads: self.matching_local(&set),
                };
                self.send_msg(from, &hit, ctx);
                if hops + 1 < self.diameter {
                    let fwd = OverlayMsg::Query {
                        query_id,
                        origin,
                        caps,
                        hops: hops + 1,
                    };
                    self.flood(Some(from), &fwd, ctx);
                }
            }
            OverlayMsg::Hit {
                query_id,
                origin,
                responder,
                ads,
            } => {
                if origin != self.cfg.index {
                    match self.query_from.get(&query_id) {
                        Some(&back) => {
                            let hit = OverlayMsg::Hit {
                                query_id,
                                origin,
                                responder,
                                ads,
                            };
                            self.send_msg(back, &hit, ctx);
                        }
                        None => warn!("hit for unknown query {query_id}"),
                    }
                    return;
                }
                let done = match self.open.get_mut(&query_id) {
                    Some(q) => {
                        if q.responders.insert(responder) {
                            q.ads.extend(ads.into_iter().filter(|a| a.caps.is_superset(&q.caps)));
                        }
                        q.responders.len() >= q.expected
                    }
                    None => false,
                };
                if done {
                    self.finish_query(&query_id, true, ctx);
                }
            }
            OverlayMsg::Pipe {
                pipe_id,
                src,
                dst,
                hops,
                target,
                body,
            } => {
                if dst == self.cfg.index {
                    ctx.record(
                        "pipe_deliver",
                        json!({ "pipe_id": pipe_id, "src": src, "hops": hops + 1 }),
                    );
                    let iaas = self.me().iaas.clone();
                    ctx.send(&iaas, Request::post(target, body));
                    return;
                }
                match self.next_hop[dst] {
                    Some(next) => {
                        let fwd = OverlayMsg::Pipe {
                            pipe_id,
                            src,
                            dst,
                            hops: hops + 1,
                            target,
                            body,
                        };
                        self.send_msg(next, &fwd, ctx);
                    }
                    None => warn!("pipe {pipe_id} has no route to node {dst}"),
                }
            }
        }
    }
}

impl Service for OverlayNode {
    fn handle(&mut self, from: &Endpoint, req: &Request, ctx: &mut dyn Context) -> Response {
        let parse_err = |e: serde_json::Error| Response::error(400, e);
        match (req.method, req.path()) {
            (Method::Post, "/overlay/msg") => {
                let msg: OverlayMsg = match serde_json::from_str(&req.body) {
                    Ok(m) => m,
                    Err(e) => return parse_err(e),
                };
                let Some(peer) = self.cfg.peers.iter().position(|p| &p.overlay == from) else {
                    return Response::error(403, format!("{from} is not an overlay peer"));
                };
                let d_proc = self.cfg.params.d_proc_ms;
                self.arm(d_proc, Pending::Process { from: peer, msg }, ctx);
                Response::new(202, "")
            }
            (Method::Post, "/overlay/advertise") => match serde_json::from_str(&req.body) {
                Ok(body) => {
                    self.advertise(body, ctx);
                    Response::new(202, "")
                }
                Err(e) => parse_err(e),
            },
            (Method::Post, "/overlay/discover") => match serde_json::from_str(&req.body) {
                Ok(body) => {
                    self.discover(body, ctx);
                    Response::new(202, "")
                }
                Err(e) => parse_err(e),
            },
            (Method::Post, "/overlay/pipe") => match serde_json::from_str(&req.body) {
                Ok(body) => self.pipe(body, ctx),
                Err(e) => parse_err(e),
            },
            (Method::Get, "/overlay/cache") => {
                let now = ctx.now();
                Response::json(200, &self.cached(now))
            }
            _ => Response::error(404, format!("no route {} {}", req.method.as_str(), req.path())),
        }
    }

    fn on_timer(&mut self, tag: u64, ctx: &mut dyn Context) {
        match self.pending.remove(&tag) {
            Some(Pending::Process { from, msg }) => self.process(from, msg, ctx),
            Some(Pending::QueryTimeout(id)) => {
                if self.open.contains_key(&id) {
                    ctx.record("overlay_query_timeout", json!({ "query_id": id }));
                    self.finish_query(&id, false, ctx);
                }
            }
            None => {}
        }
    }
}
