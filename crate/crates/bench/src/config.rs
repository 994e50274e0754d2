//! Scenario files: TOML mirroring [`ScenarioConfig`].
//!
//! ```toml
//! iaas_count = 4
//! seed = 7
//!
//! [transport]
//! kind = "sim"          # or "socket"
//! latency_ms = 5.0
//! jitter_ms = 0.0
//! d_proc_ms = 1.0
//!
//! [backend]
//! kind = "presence"     # or "overlay", with topology = "ring" | "line"
//!
//! # Robots per IaaS: metadata files (relative to the scenario file) or
//! # `builtin:light` / `builtin:arms`. Omitted means one of each per node.
//! robots = [["builtin:light", "builtin:arms"], ...]
//!
//! [[script]]
//! at_ms = 0.0
//! node = 0
//! caps = ["light", "kicking-arm", "movement-motor", "gripper-arm"]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use roboiaas::descriptor::{parse_descriptor, CapabilitySet, Location, RobotDescriptor};
use roboiaas::fleet;
use roboiaas::net::SimParams;
use roboiaas::overlay::Topology;
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransportConfig {
    Sim {
        #[serde(default = "default_latency")]
        latency_ms: f64,
        #[serde(default)]
        jitter_ms: f64,
        #[serde(default = "default_d_proc")]
        d_proc_ms: f64,
    },
    Socket {
        #[serde(default = "default_d_proc")]
        d_proc_ms: f64,
    },
}

fn default_latency() -> f64 {
    5.0
}

fn default_d_proc() -> f64 {
    1.0
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig::Sim {
            latency_ms: default_latency(),
            jitter_ms: 0.0,
            d_proc_ms: default_d_proc(),
        }
    }
}

impl TransportConfig {
    pub fn d_proc_ms(&self) -> f64 {
        match *self {
            TransportConfig::Sim { d_proc_ms, .. } | TransportConfig::Socket { d_proc_ms } => d_proc_ms,
        }
    }

    pub fn sim_params(&self, seed: u64) -> Option<SimParams> {
        match *self {
            TransportConfig::Sim {
                latency_ms,
                jitter_ms,
                ..
            } => Some(SimParams {
                latency_ms,
                jitter_ms,
                seed,
            }),
            TransportConfig::Socket { .. } => None,
        }
    }

    pub fn is_sim(&self) -> bool {
        matches!(self, TransportConfig::Sim { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlayTopology {
    #[default]
    Ring,
    Line,
}

impl From<OverlayTopology> for Topology {
    fn from(t: OverlayTopology) -> Self {
        match t {
            OverlayTopology::Ring => Topology::Ring,
            OverlayTopology::Line => Topology::Line,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Presence,
    Overlay {
        #[serde(default)]
        topology: OverlayTopology,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Presence
    }
}

impl BackendConfig {
    pub fn label(&self) -> &'static str {
        match self {
            BackendConfig::Presence => "presence",
            BackendConfig::Overlay { .. } => "overlay",
        }
    }

    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s.trim() {
            "presence" => Ok(BackendConfig::Presence),
            "overlay" => Ok(BackendConfig::Overlay {
                topology: OverlayTopology::Ring,
            }),
            other => Err(BenchError::Usage(format!("unknown backend `{other}`"))),
        }
    }
}

/// One scripted action, issued `at_ms` after boot completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub at_ms: f64,
    pub node: usize,
    /// A discovery probe instead of a service request.
    #[serde(default)]
    pub probe: bool,
    #[serde(default)]
    pub caps: Vec<String>,
    #[serde(default = "fire_site")]
    pub site: [f64; 2],
    #[serde(default = "fire_kind")]
    pub kind: String,
    #[serde(default = "fire_work")]
    pub duration_ms: f64,
}

fn fire_site() -> [f64; 2] {
    [fleet::FIRE_SITE.x, fleet::FIRE_SITE.y]
}

fn fire_kind() -> String {
    "fire-suppression".into()
}

fn fire_work() -> f64 {
    fleet::FIRE_WORK_MS
}

impl ScriptEntry {
    pub fn request(at_ms: f64, node: usize, caps: &CapabilitySet) -> Self {
        ScriptEntry {
            at_ms,
            node,
            probe: false,
            caps: caps.to_vec(),
            site: fire_site(),
            kind: fire_kind(),
            duration_ms: fire_work(),
        }
    }

    pub fn probe(at_ms: f64, node: usize) -> Self {
        ScriptEntry {
            probe: true,
            caps: Vec::new(),
            ..ScriptEntry::request(at_ms, node, &CapabilitySet::new())
        }
    }

    pub fn site(&self) -> Location {
        Location::new(self.site[0], self.site[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub iaas_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub robots: Vec<Vec<String>>,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
    /// Directory that relative robot paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ScenarioConfig {
    /// Four IaaS nodes with a light and an arms robot each, presence
    /// backend, simulated transport, one fire-suppression request.
    fn default() -> Self {
        ScenarioConfig {
            iaas_count: 4,
            seed: 0,
            transport: TransportConfig::default(),
            backend: BackendConfig::Presence,
            robots: Vec::new(),
            script: vec![ScriptEntry::request(0.0, 0, &fleet::fire_suppression_caps())],
            base_dir: PathBuf::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::Io(path.display().to_string(), e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.iaas_count == 0 {
            return bad("iaas_count must be at least 1".into());
        }
        if let TransportConfig::Sim {
            latency_ms,
            jitter_ms,
            d_proc_ms,
        } = self.transport
        {
            if !(latency_ms > 0.0 && d_proc_ms > 0.0 && jitter_ms >= 0.0) {
                return bad("sim latency_ms and d_proc_ms must be positive, jitter_ms non-negative".into());
            }
        }
        if !self.robots.is_empty() && self.robots.len() != self.iaas_count {
            return bad(format!(
                "robots lists {} nodes but iaas_count is {}",
                self.robots.len(),
                self.iaas_count
            ));
        }
        let mut last = f64::NEG_INFINITY;
        for (i, s) in self.script.iter().enumerate() {
            if !(s.at_ms >= last) {
                return bad(format!("script entry {i}: times must be non-decreasing"));
            }
            last = s.at_ms;
            if s.node >= self.iaas_count {
                return bad(format!("script entry {i}: node {} does not exist", s.node));
            }
            if !s.probe && s.caps.is_empty() {
                return bad(format!("script entry {i}: request has no caps"));
            }
        }
        Ok(())
    }

    /// Robot descriptors per node.
    pub fn fleet(&self) -> Result<Vec<Vec<RobotDescriptor>>, BenchError> {
        if self.robots.is_empty() {
            return Ok(fleet::default_fleet(self.iaas_count));
        }
        self.robots
            .iter()
            .map(|node| node.iter().map(|r| self.load_robot(r)).collect())
            .collect()
    }

    fn load_robot(&self, spec: &str) -> Result<RobotDescriptor, BenchError> {
        match spec {
            "builtin:light" => Ok(fleet::light_robot()),
            "builtin:arms" => Ok(fleet::arms_robot()),
            path => {
                let p = self.base_dir.join(path);
                let text = fs::read_to_string(&p).map_err(|e| BenchError::Io(p.display().to_string(), e))?;
                parse_descriptor(&text).map_err(|e| BenchError::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = ScenarioConfig::parse("iaas_count = 2").unwrap();
        assert_eq!(cfg.transport, TransportConfig::default());
        assert_eq!(cfg.backend, BackendConfig::Presence);
        assert_eq!(cfg.fleet().unwrap().len(), 2);
        assert!(cfg.script.is_empty());
    }

    #[test]
    fn full_file_parses() {
        let cfg = ScenarioConfig::parse(
            r#"
            iaas_count = 3
            seed = 9
            robots = [["builtin:light"], ["builtin:arms"], []]
            [transport]
            kind = "sim"
            latency_ms = 2.0
            jitter_ms = 0.5
            [backend]
            kind = "overlay"
            topology = "line"
            [[script]]
            at_ms = 10.0
            node = 2
            probe = true
            [[script]]
            at_ms = 20.0
            node = 1
            caps = ["light"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.backend, BackendConfig::Overlay { topology: OverlayTopology::Line });
        assert_eq!(cfg.transport.sim_params(1).unwrap().jitter_ms, 0.5);
        assert_eq!(cfg.transport.d_proc_ms(), 1.0);
        assert!(cfg.script[0].probe);
        assert_eq!(cfg.fleet().unwrap()[2].len(), 0);
    }

    #[test]
    fn invariants_are_enforced() {
        for bad in [
            "iaas_count = 0",
            "iaas_count = 1\n[transport]\nkind = \"sim\"\nlatency_ms = 0.0",
            "iaas_count = 1\n[[script]]\nat_ms = 5.0\nnode = 0\nprobe = true\n[[script]]\nat_ms = 1.0\nnode = 0\nprobe = true",
            "iaas_count = 1\n[[script]]\nat_ms = 0.0\nnode = 3\nprobe = true",
            "iaas_count = 2\nrobots = [[]]",
            "iaas_count = 1\ncolour = 3",
        ] {
            assert!(matches!(ScenarioConfig::parse(bad), Err(BenchError::Config(_))), "{bad}");
        }
    }
}
