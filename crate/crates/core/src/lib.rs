//! Federated IaaS-for-robots.
//!
//! Robots are described with an extended-SenML model ([`descriptor`]),
//! published to a presence-based marketplace ([`presence`]), discovered and
//! composed into coalitions by IaaS nodes ([`iaas`]), and driven through
//! protocol gateways ([`gateway`]). A flooding P2P overlay ([`overlay`])
//! provides the comparison baseline. All components run over a pluggable
//! transport ([`net`]): a deterministic simulator or localhost HTTP.

pub mod coalition;
pub mod descriptor;
pub mod exec;
pub mod fleet;
pub mod gateway;
pub mod iaas;
pub mod net;
pub mod overlay;
pub mod presence;

pub use coalition::{Coalition, CoalitionParams};
pub use descriptor::{
    capability_set, merge_descriptors, parse_descriptor, serialize_descriptor, CapabilitySet,
    CompositeDescriptor, RobotDescriptor, RobotState,
};
pub use exec::Execution;
pub use net::{Endpoint, Network, Request, Response, Service, SimNet, SimParams, SocketNet};
