//! Reference robots and fleets.
//!
//! Two robot types: a `light` robot (light sensor, kicking arm, movement
//! motor) and an `arms` robot (gripper arm, movement motor). Their metadata
//! documents carry no robot id; the marketplace assigns one on publication.

use crate::descriptor::{
    parse_descriptor, ActuatorSpec, CapabilitySet, InfoProperty, Location, RobotDescriptor,
    SensorSpec,
};

pub const LIGHT_ROBOT_DOC: &str = include_str!("../testdata/fleet/light.robot.senml.json");
pub const ARMS_ROBOT_DOC: &str = include_str!("../testdata/fleet/arms.robot.senml.json");

/// Site of the scripted fire, in meters.
pub const FIRE_SITE: Location = Location { x: 2.0, y: 3.0 };
/// Per-member work time of the fire-suppression task.
pub const FIRE_WORK_MS: f64 = 1500.0;

pub fn light_robot() -> RobotDescriptor {
    parse_descriptor(LIGHT_ROBOT_DOC).expect("bundled light robot document")
}

pub fn arms_robot() -> RobotDescriptor {
    parse_descriptor(ARMS_ROBOT_DOC).expect("bundled arms robot document")
}

/// The value of the `type` info property.
pub fn robot_type(d: &RobotDescriptor) -> Option<&str> {
    d.info_value("type")
}

/// Detect the balls with the light sensor, kick them, carry them with the
/// arms, and move to the site.
pub fn fire_suppression_caps() -> CapabilitySet {
    ["light", "kicking-arm", "movement-motor", "gripper-arm"]
        .into_iter()
        .collect()
}

/// One light robot and one arms robot per IaaS node. Node `i` (0-based)
/// keeps its robots around `x = 3i`.
pub fn default_fleet(iaas_count: usize) -> Vec<Vec<RobotDescriptor>> {
    (0..iaas_count)
        .map(|i| {
            let x = 3.0 * i as f64;
            let mut light = light_robot();
            light.dynamic_ch.location = Location::new(x, 0.0);
            let mut arms = arms_robot();
            arms.dynamic_ch.location = Location::new(x, 1.0);
            vec![light, arms]
        })
        .collect()
}

/// Default fleet without light robots.
pub fn fleet_without_light(iaas_count: usize) -> Vec<Vec<RobotDescriptor>> {
    default_fleet(iaas_count)
        .into_iter()
        .map(|robots| {
            robots
                .into_iter()
                .filter(|d| robot_type(d) != Some("light"))
                .collect()
        })
        .collect()
}

fn marker_tag(node: usize) -> String {
    format!("marker-{}", node + 1)
}

/// Fleet for task-assignment delay runs: node 0 hosts a camera robot that
/// no request needs; every other node `k` hosts the only robot with the
/// `marker-<k+1>` actuator.
pub fn tad_fleet(iaas_count: usize) -> Vec<Vec<RobotDescriptor>> {
    (0..iaas_count)
        .map(|i| {
            let mut d = RobotDescriptor::default();
            if i == 0 {
                d.static_ch.sensors.push(SensorSpec::new("camera", "(0,1)", "frame"));
                d.static_ch.info.push(InfoProperty {
                    name: "type".into(),
                    value: "scout".into(),
                });
            } else {
                d.static_ch.actuators.push(ActuatorSpec::new(&marker_tag(i), "", ""));
                d.static_ch.info.push(InfoProperty {
                    name: "type".into(),
                    value: "marker".into(),
                });
            }
            d.dynamic_ch.location = Location::new(3.0 * i as f64, 0.0);
            d.interaction_ch.protocol = "nxt".into();
            vec![d]
        })
        .collect()
}

/// Caps that need one robot from every node except node 0.
pub fn tad_caps(iaas_count: usize) -> CapabilitySet {
    (1..iaas_count).map(marker_tag).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_types() {
        let light: CapabilitySet = ["light", "kicking-arm", "movement-motor"].into_iter().collect();
        let arms: CapabilitySet = ["gripper-arm", "movement-motor"].into_iter().collect();
        assert_eq!(light_robot().capability_set(), light);
        assert_eq!(arms_robot().capability_set(), arms);
        assert_eq!(robot_type(&light_robot()), Some("light"));
    }

    #[test]
    fn no_single_type_covers_fire_suppression() {
        let caps = fire_suppression_caps();
        assert!(!light_robot().capability_set().is_superset(&caps));
        assert!(!arms_robot().capability_set().is_superset(&caps));
    }

    #[test]
    fn tad_fleet_needs_every_other_node() {
        let fleet = tad_fleet(4);
        let caps = tad_caps(4);
        assert_eq!(caps.len(), 3);
        assert!(fleet[0][0].capability_set().intersection(&caps).is_empty());
        for robots in &fleet[1..] {
            assert_eq!(robots[0].capability_set().intersection(&caps).len(), 1);
        }
    }
}
