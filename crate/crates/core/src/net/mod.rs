//! Pluggable message transport.
//!
//! Every component (marketplace, IaaS node, overlay node) is a [`Service`]:
//! a single-threaded state machine that answers REST-style requests, may
//! send requests of its own, and may arm timers. Two runtimes drive
//! services:
//!
//! * [`SimNet`]: a discrete-event simulator with a virtual clock, a fixed
//!   per-link latency plus seeded jitter, and FIFO links. Runs are
//!   byte-reproducible from the seed.
//! * [`SocketNet`]: one localhost HTTP listener per service, real threads,
//!   wall-clock timestamps.

mod sim;
mod socket;

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use sim::{SimNet, SimParams};
pub use socket::SocketNet;

/// Milliseconds on the runtime's clock.
pub type Millis = f64;

/// Base address of a service: `scheme://host[:port]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Endpoint(String);

impl Endpoint {
    pub fn new(base: impl Into<String>) -> Self {
        Endpoint(base.into().trim_end_matches('/').to_string())
    }

    /// Simulated endpoint `sim://<name>`.
    pub fn sim(name: &str) -> Self {
        Endpoint(format!("sim://{name}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Absolute URI of `target` (path plus optional query) on this endpoint.
    pub fn uri(&self, target: &str) -> String {
        format!("{}{}", self.0, target)
    }

    /// Splits an absolute URI into its endpoint and request target.
    pub fn split_uri(uri: &str) -> Option<(Endpoint, String)> {
        let parsed = url::Url::parse(uri).ok()?;
        let host = parsed.host_str()?;
        let base = match parsed.port() {
            Some(port) => format!("{}://{}:{}", parsed.scheme(), host, port),
            None => format!("{}://{}", parsed.scheme(), host),
        };
        let mut target = parsed.path().to_string();
        if let Some(q) = parsed.query() {
            target.push('?');
            target.push_str(q);
        }
        Some((Endpoint(base), target))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Get,
    Post,
    Put,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "GET" => Some(Method::Get),
            "POST" => Some(Method::Post),
            "PUT" => Some(Method::Put),
            "DELETE" => Some(Method::Delete),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub method: Method,
    /// Path plus optional `?query`.
    pub target: String,
    pub body: String,
}

impl Request {
    pub fn new(method: Method, target: impl Into<String>, body: impl Into<String>) -> Self {
        Request {
            method,
            target: target.into(),
            body: body.into(),
        }
    }

    pub fn get(target: impl Into<String>) -> Self {
        Request::new(Method::Get, target, "")
    }

    pub fn post(target: impl Into<String>, body: impl Into<String>) -> Self {
        Request::new(Method::Post, target, body)
    }

    pub fn put(target: impl Into<String>, body: impl Into<String>) -> Self {
        Request::new(Method::Put, target, body)
    }

    pub fn delete(target: impl Into<String>) -> Self {
        Request::new(Method::Delete, target, "")
    }

    pub fn json(method: Method, target: impl Into<String>, body: &impl Serialize) -> Self {
        Request::new(method, target, serde_json::to_string(body).expect("serializable body"))
    }

    pub fn path(&self) -> &str {
        self.target.split('?').next().unwrap_or("")
    }

    /// Non-empty path segments.
    pub fn segments(&self) -> Vec<&str> {
        self.path().split('/').filter(|s| !s.is_empty()).collect()
    }

    /// Percent-decoded value of the first query parameter named `name`.
    pub fn query(&self, name: &str) -> Option<String> {
        let (_, query) = self.target.split_once('?')?;
        url::form_urlencoded::parse(query.as_bytes())
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.into_owned())
    }
}

/// Percent-encodes a query parameter value.
pub fn encode_query(value: &str) -> String {
    url::form_urlencoded::byte_serialize(value.as_bytes()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    pub body: String,
}

impl Response {
    pub fn new(status: u16, body: impl Into<String>) -> Self {
        Response {
            status,
            body: body.into(),
        }
    }

    pub fn json(status: u16, body: &impl Serialize) -> Self {
        Response::new(status, serde_json::to_string(body).expect("serializable body"))
    }

    pub fn error(status: u16, message: impl fmt::Display) -> Self {
        Response::json(status, &serde_json::json!({ "error": message.to_string() }))
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn unavailable(message: impl fmt::Display) -> Self {
        Response::error(503, message)
    }
}

/// One entry of the runtime's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t_ms: Millis,
    pub at: Endpoint,
    pub kind: String,
    pub data: Value,
}

/// The runtime as seen from inside a service callback.
pub trait Context {
    fn now(&self) -> Millis;
    fn me(&self) -> &Endpoint;
    /// Sends `req` to `to`; the reply comes back through
    /// [`Service::on_reply`] with the returned token.
    fn send(&mut self, to: &Endpoint, req: Request) -> u64;
    /// Fires [`Service::on_timer`] with `tag` after `delay` ms.
    fn schedule(&mut self, delay: Millis, tag: u64);
    fn record(&mut self, kind: &str, data: Value);
}

pub trait Service: Any + Send {
    fn start(&mut self, _ctx: &mut dyn Context) {}
    fn handle(&mut self, from: &Endpoint, req: &Request, ctx: &mut dyn Context) -> Response;
    fn on_reply(&mut self, _token: u64, _resp: Response, _ctx: &mut dyn Context) {}
    fn on_timer(&mut self, _tag: u64, _ctx: &mut dyn Context) {}
}

/// Services and event log left behind by a finished run.
pub struct Finished {
    pub services: BTreeMap<Endpoint, Box<dyn Service>>,
    pub log: Vec<LogEntry>,
    pub replies: BTreeMap<u64, Response>,
}

impl Finished {
    pub fn service<T: Service>(&self, ep: &Endpoint) -> Option<&T> {
        let svc: &dyn Any = self.services.get(ep)?.as_ref();
        svc.downcast_ref::<T>()
    }
}

/// Runtime operations the scenario harness needs from either transport.
pub trait Network {
    /// Allocates the endpoint for a service named `name` running on `host`.
    /// Services on the same host talk with zero latency.
    fn endpoint(&mut self, name: &str, host: &str) -> Endpoint;
    fn spawn(&mut self, ep: &Endpoint, svc: Box<dyn Service>);
    /// Delivers `req` to `to` from the harness at time `at` (no link
    /// latency). Returns a token under which the reply is kept.
    fn inject(&mut self, at: Millis, to: &Endpoint, req: Request) -> u64;
    /// Reply to an injected request, once it has arrived.
    fn reply(&self, token: u64) -> Option<&Response>;
    /// Runs until no message or timer is pending.
    fn settle(&mut self);
    fn now(&self) -> Millis;
    fn finish(self: Box<Self>) -> Finished;
}

/// The harness pseudo-endpoint used as the sender of injected requests.
pub fn harness_endpoint() -> Endpoint {
    Endpoint::sim("harness")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_uri_keeps_query() {
        let (ep, target) = Endpoint::split_uri("http://127.0.0.1:4000/notify?x=1").unwrap();
        assert_eq!(ep.as_str(), "http://127.0.0.1:4000");
        assert_eq!(target, "/notify?x=1");
        let (ep, target) = Endpoint::split_uri("sim://iaas-1/notify").unwrap();
        assert_eq!(ep, Endpoint::sim("iaas-1"));
        assert_eq!(target, "/notify");
    }

    #[test]
    fn query_decoding() {
        let req = Request::post(format!("/robots?fromuri={}", encode_query("sim://iaas-1/notify")), "");
        assert_eq!(req.query("fromuri").as_deref(), Some("sim://iaas-1/notify"));
        assert_eq!(req.path(), "/robots");
        assert_eq!(req.segments(), vec!["robots"]);
        assert_eq!(req.query("owner"), None);
    }
}
