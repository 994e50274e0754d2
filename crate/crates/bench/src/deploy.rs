//! Boots a federation on either transport.

use roboiaas::descriptor::{serialize_descriptor, RobotDescriptor};
use roboiaas::iaas::{Backend, IaasNode, NodeConfig};
use roboiaas::net::{Endpoint, Network, Request, SimNet, SocketNet};
use roboiaas::overlay::{build_topology, OverlayConfig, OverlayNode, OverlayParams, OverlayPeer};
use roboiaas::presence::{Marketplace, MarketplaceService};

use crate::config::{BackendConfig, TransportConfig};
use crate::BenchError;

/// Everything needed to stand up one federation.
#[derive(Debug, Clone)]
pub struct DeploySpec {
    pub backend: BackendConfig,
    pub transport: TransportConfig,
    pub seed: u64,
    pub fleet: Vec<Vec<RobotDescriptor>>,
    /// Fault probability per robot, indexed like `fleet`; missing means 0.
    pub faults: Vec<Vec<f64>>,
}

impl DeploySpec {
    pub fn new(backend: BackendConfig, transport: TransportConfig, seed: u64, fleet: Vec<Vec<RobotDescriptor>>) -> Self {
        DeploySpec {
            backend,
            transport,
            seed,
            fleet,
            faults: Vec::new(),
        }
    }

    pub fn iaas_count(&self) -> usize {
        self.fleet.len()
    }

    fn fault(&self, node: usize, robot: usize) -> f64 {
        self.faults
            .get(node)
            .and_then(|f| f.get(robot))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Endpoints of a booted federation.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub marketplace: Option<Endpoint>,
    pub overlays: Vec<Endpoint>,
    pub nodes: Vec<Endpoint>,
}

pub fn new_network(transport: &TransportConfig, seed: u64) -> Box<dyn Network> {
    match transport.sim_params(seed) {
        Some(p) => Box::new(SimNet::new(p).without_trace()),
        None => Box::new(SocketNet::new()),
    }
}

fn node_name(i: usize) -> String {
    format!("iaas-{}", i + 1)
}

fn host_name(i: usize) -> String {
    format!("host-{}", i + 1)
}

/// Spawns the services, adds every robot and waits for the network to
/// settle. Fails if any robot is refused.
pub fn boot(net: &mut dyn Network, spec: &DeploySpec) -> Result<Deployment, BenchError> {
    let n = spec.iaas_count();
    if n == 0 {
        return Err(BenchError::Usage("a deployment needs at least one IaaS".into()));
    }
    let nodes: Vec<Endpoint> = (0..n).map(|i| net.endpoint(&node_name(i), &host_name(i))).collect();
    let mut deployment = Deployment {
        marketplace: None,
        overlays: Vec::new(),
        nodes: nodes.clone(),
    };
    match spec.backend {
        BackendConfig::Presence => {
            let market = net.endpoint("marketplace", "market-host");
            net.spawn(&market, Box::new(MarketplaceService::new(Marketplace::new())));
            for (i, ep) in nodes.iter().enumerate() {
                let mut cfg = NodeConfig::new(&node_name(i));
                cfg.marketplace = Some(market.clone());
                cfg.seed = spec.seed.wrapping_add(i as u64);
                net.spawn(ep, Box::new(IaasNode::new(cfg).map_err(|e| BenchError::Boot(e.to_string()))?));
            }
            deployment.marketplace = Some(market);
        }
        BackendConfig::Overlay { topology } => {
            let adjacency = build_topology(n, topology.into()).map_err(|e| BenchError::Boot(e.to_string()))?;
            let overlays: Vec<Endpoint> = (0..n)
                .map(|i| net.endpoint(&format!("overlay-{}", i + 1), &host_name(i)))
                .collect();
            let peers: Vec<OverlayPeer> = (0..n)
                .map(|i| OverlayPeer {
                    node_id: node_name(i),
                    overlay: overlays[i].clone(),
                    iaas: nodes[i].clone(),
                })
                .collect();
            let params = OverlayParams {
                d_proc_ms: spec.transport.d_proc_ms(),
                ..OverlayParams::default()
            };
            for i in 0..n {
                let ocfg = OverlayConfig {
                    index: i,
                    peers: peers.clone(),
                    adjacency: adjacency.clone(),
                    params,
                };
                net.spawn(&overlays[i], Box::new(OverlayNode::new(ocfg)));
                let mut cfg = NodeConfig::new(&node_name(i));
                cfg.backend = Backend::Overlay;
                cfg.overlay = Some(overlays[i].clone());
                cfg.seed = spec.seed.wrapping_add(i as u64);
                net.spawn(&nodes[i], Box::new(IaasNode::new(cfg).map_err(|e| BenchError::Boot(e.to_string()))?));
            }
            deployment.overlays = overlays;
        }
    }
    net.settle();

    for (i, robots) in spec.fleet.iter().enumerate() {
        for (j, d) in robots.iter().enumerate() {
            let body = serialize_descriptor(d).map_err(|e| BenchError::Boot(e.to_string()))?;
            let req = Request::post(format!("/admin/robots?fault_p={}", spec.fault(i, j)), body);
            let token = net.inject(net.now(), &nodes[i], req);
            net.settle();
            match net.reply(token) {
                Some(r) if r.is_success() => {}
                Some(r) => {
                    return Err(BenchError::Boot(format!(
                        "{} refused robot {j}: {} {}",
                        node_name(i),
                        r.status,
                        r.body
                    )))
                }
                None => return Err(BenchError::Boot(format!("{} never answered robot {j}", node_name(i)))),
            }
        }
    }
    Ok(deployment)
}
