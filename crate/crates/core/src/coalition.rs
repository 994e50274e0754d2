//! Coalition formation: a minimum-cost capability cover.
//!
//! Each candidate costs `distance(location, site) + engagement_cost`, plus
//! `remote_penalty` when it lives on another IaaS node. Up to
//! `exact_limit` useful candidates the solver enumerates every subset;
//! above that it runs a greedy cover followed by redundancy pruning.
//! Equal-cost covers (within `COST_EPS`) are ordered by their sorted list of
//! robot ids and the lexicographically smallest wins.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{
    merge_descriptors, CapabilitySet, CompositeDescriptor, DescriptorError, Location,
    RobotDescriptor,
};

pub const COST_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoalitionParams {
    /// Fixed cost of engaging one robot, in distance units.
    pub engagement_cost: f64,
    /// Extra cost of a robot hosted by another IaaS node.
    pub remote_penalty: f64,
    /// Largest candidate count solved by exhaustive search.
    pub exact_limit: usize,
}

impl Default for CoalitionParams {
    fn default() -> Self {
        CoalitionParams {
            engagement_cost: 0.5,
            remote_penalty: 0.0,
            exact_limit: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoalitionError {
    #[error("no coalition covers the request; missing {missing}")]
    Unsatisfiable { missing: CapabilitySet },
    #[error("request has no required capabilities")]
    EmptyRequest,
    #[error("a request may name at most 64 capability tags")]
    TooManyTags,
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

/// A robot service that may join a coalition.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub descriptor: RobotDescriptor,
    pub owner_iaas: String,
    pub remote: bool,
}

impl Candidate {
    pub fn robot_id(&self) -> &str {
        &self.descriptor.robot_id
    }

    pub fn cost(&self, site: Location, params: &CoalitionParams) -> f64 {
        let penalty = if self.remote { params.remote_penalty } else { 0.0 };
        self.descriptor.dynamic_ch.location.distance(&site) + params.engagement_cost + penalty
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionMember {
    pub robot_id: String,
    pub owner_iaas: String,
    /// Required tags this member offers.
    pub assigned: CapabilitySet,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coalition {
    /// Ordered by robot id.
    pub members: Vec<CoalitionMember>,
    pub cost: f64,
    pub pattern: CompositeDescriptor,
    /// True when the exhaustive solver produced the result.
    pub exact: bool,
}

impl Coalition {
    pub fn robot_ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.robot_id.as_str()).collect()
    }
}

/// A weighted set-cover instance over at most 64 elements.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverProblem {
    pub ids: Vec<String>,
    pub costs: Vec<f64>,
    pub masks: Vec<u64>,
    pub target: u64,
}

/// Chosen indices, ascending by id, and their total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Cover {
    pub picks: Vec<usize>,
    pub cost: f64,
}

impl CoverProblem {
    fn sorted_ids(&self, picks: &[usize]) -> Vec<&str> {
        let mut ids: Vec<&str> = picks.iter().map(|&i| self.ids[i].as_str()).collect();
        ids.sort_unstable();
        ids
    }

    fn cover(&self, mut picks: Vec<usize>) -> Cover {
        picks.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        let cost = picks.iter().map(|&i| self.costs[i]).sum();
        Cover { picks, cost }
    }

    /// True if `a` is preferred over `b`: cheaper, or tied and
    /// lexicographically smaller by sorted robot ids.
    fn better(&self, a: &Cover, b: &Cover) -> bool {
        if a.cost < b.cost - COST_EPS {
            return true;
        }
        if a.cost > b.cost + COST_EPS {
            return false;
        }
        self.sorted_ids(&a.picks) < self.sorted_ids(&b.picks)
    }

    pub fn covered_by(&self, picks: &[usize]) -> u64 {
        picks.iter().fold(0, |acc, &i| acc | self.masks[i])
    }
}

/// Minimum-cost cover by enumeration of all `2^n` subsets.
pub fn exact_cover(p: &CoverProblem) -> Option<Cover> {
    let n = p.ids.len();
    assert!(n < 32, "exhaustive cover over {n} candidates");
    if p.target == 0 {
        return Some(Cover { picks: Vec::new(), cost: 0.0 });
    }
    let mut best: Option<Cover> = None;
    for subset in 1u32..(1u32 << n) {
        let mut mask = 0u64;
        let mut cost = 0.0;
        for i in 0..n {
            if subset & (1 << i) != 0 {
                mask |= p.masks[i];
                cost += p.costs[i];
            }
        }
        if mask & p.target != p.target {
            continue;
        }
        if let Some(b) = &best {
            if cost > b.cost + COST_EPS {
                continue;
            }
        }
        let picks = (0..n).filter(|i| subset & (1 << i) != 0).collect();
        let cand = p.cover(picks);
        if best.as_ref().is_none_or(|b| p.better(&cand, b)) {
            best = Some(cand);
        }
    }
    best
}

/// Greedy max-new-coverage-per-cost cover, then drops members whose tags
/// the rest already cover (most expensive first).
pub fn greedy_cover(p: &CoverProblem) -> Option<Cover> {
    let n = p.ids.len();
    let mut covered = 0u64;
    let mut picks: Vec<usize> = Vec::new();
    while covered & p.target != p.target {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if picks.contains(&i) {
                continue;
            }
            let gain = (p.masks[i] & p.target & !covered).count_ones();
            if gain == 0 {
                continue;
            }
            let ratio = gain as f64 / p.costs[i].max(COST_EPS);
            let take = match best {
                None => true,
                Some((j, r)) => {
                    ratio > r + COST_EPS || ((ratio - r).abs() <= COST_EPS && p.ids[i] < p.ids[j])
                }
            };
            if take {
                best = Some((i, ratio));
            }
        }
        let (i, _) = best?;
        picks.push(i);
        covered |= p.masks[i];
    }
    let mut order = picks.clone();
    order.sort_by(|&a, &b| {
        p.costs[b]
            .total_cmp(&p.costs[a])
            .then_with(|| p.ids[b].cmp(&p.ids[a]))
    });
    for i in order {
        let rest: Vec<usize> = picks.iter().copied().filter(|&j| j != i).collect();
        if p.covered_by(&rest) & p.target == p.target {
            picks = rest;
        }
    }
    Some(p.cover(picks))
}

/// Selects the minimum-cost coalition of `candidates` covering `required`.
pub fn form_coalition(
    candidates: &[Candidate],
    required: &CapabilitySet,
    site: Location,
    params: &CoalitionParams,
) -> Result<Coalition, CoalitionError> {
    if required.is_empty() {
        return Err(CoalitionError::EmptyRequest);
    }
    let tags = required.to_vec();
    if tags.len() > 64 {
        return Err(CoalitionError::TooManyTags);
    }
    let mask_of = |caps: &CapabilitySet| {
        tags.iter()
            .enumerate()
            .filter(|(_, t)| caps.contains(t))
            .fold(0u64, |m, (i, _)| m | (1 << i))
    };
    let target = if tags.len() == 64 { u64::MAX } else { (1u64 << tags.len()) - 1 };

    let useful: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| mask_of(&c.descriptor.capability_set()) != 0)
        .collect();
    let mut offered = CapabilitySet::new();
    for c in &useful {
        offered.union_with(&c.descriptor.capability_set().intersection(required));
    }
    if !offered.is_superset(required) {
        return Err(CoalitionError::Unsatisfiable {
            missing: required.difference(&offered),
        });
    }

    let problem = CoverProblem {
        ids: useful.iter().map(|c| c.robot_id().to_string()).collect(),
        costs: useful.iter().map(|c| c.cost(site, params)).collect(),
        masks: useful.iter().map(|c| mask_of(&c.descriptor.capability_set())).collect(),
        target,
    };
    let exact = useful.len() <= params.exact_limit;
    let cover = if exact { exact_cover(&problem) } else { greedy_cover(&problem) }
        .expect("offered tags cover the request");

    let chosen: Vec<&Candidate> = cover.picks.iter().map(|&i| useful[i]).collect();
    let members = chosen
        .iter()
        .zip(&cover.picks)
        .map(|(c, &i)| CoalitionMember {
            robot_id: c.robot_id().to_string(),
            owner_iaas: c.owner_iaas.clone(),
            assigned: c.descriptor.capability_set().intersection(required),
            cost: problem.costs[i],
        })
        .collect();
    let descriptors: Vec<RobotDescriptor> = chosen.iter().map(|c| c.descriptor.clone()).collect();
    Ok(Coalition {
        members,
        cost: cover.cost,
        pattern: merge_descriptors(&descriptors)?,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{ActuatorSpec, SensorSpec};

    fn cand(id: &str, sensors: &[&str], actuators: &[&str], at: (f64, f64)) -> Candidate {
        let mut d = RobotDescriptor {
            robot_id: id.into(),
            ..Default::default()
        };
        d.static_ch.sensors = sensors.iter().map(|s| SensorSpec::new(s, "", "")).collect();
        d.static_ch.actuators = actuators.iter().map(|a| ActuatorSpec::new(a, "", "")).collect();
        d.dynamic_ch.location = Location::new(at.0, at.1);
        Candidate {
            descriptor: d,
            owner_iaas: "sim://iaas-1".into(),
            remote: false,
        }
    }

    fn caps(tags: &[&str]) -> CapabilitySet {
        tags.iter().collect()
    }

    #[test]
    fn singleton_dominates_pair() {
        let cs = vec![
            cand("a", &["light"], &["kicking-arm"], (1.0, 0.0)),
            cand("b", &["light"], &[], (1.0, 0.0)),
            cand("c", &[], &["kicking-arm"], (0.0, 1.0)),
        ];
        let c = form_coalition(&cs, &caps(&["light", "kicking-arm"]), Location::default(), &Default::default()).unwrap();
        assert_eq!(c.robot_ids(), vec!["a"]);
        assert!((c.cost - 1.5).abs() < 1e-12);
    }

    #[test]
    fn light_and_arms_types_are_both_needed() {
        let cs = vec![
            cand("r1", &["light"], &["kicking-arm", "movement-motor"], (0.0, 0.0)),
            cand("r2", &[], &["gripper-arm", "movement-motor"], (0.0, 1.0)),
        ];
        let req = caps(&["light", "kicking-arm", "movement-motor", "gripper-arm"]);
        let c = form_coalition(&cs, &req, Location::default(), &Default::default()).unwrap();
        assert_eq!(c.robot_ids(), vec!["r1", "r2"]);
        assert!(c.pattern.capabilities.is_superset(&req));
        assert!(c.members.iter().all(|m| m.assigned.contains("movement-motor")));
    }

    #[test]
    fn missing_tags_are_named() {
        let cs = vec![cand("r2", &[], &["gripper-arm", "movement-motor"], (0.0, 0.0))];
        let err = form_coalition(&cs, &caps(&["light", "movement-motor"]), Location::default(), &Default::default()).unwrap_err();
        assert_eq!(err, CoalitionError::Unsatisfiable { missing: caps(&["light"]) });
    }

    #[test]
    fn ties_go_to_smaller_ids() {
        let cs = vec![
            cand("z", &["light"], &[], (1.0, 0.0)),
            cand("m", &["light"], &[], (0.0, 1.0)),
        ];
        let c = form_coalition(&cs, &caps(&["light"]), Location::default(), &Default::default()).unwrap();
        assert_eq!(c.robot_ids(), vec!["m"]);
    }

    #[test]
    fn remote_penalty_shifts_choice() {
        let mut far = cand("a", &["light"], &[], (1.0, 0.0));
        far.remote = true;
        let near = cand("b", &["light"], &[], (1.2, 0.0));
        let params = CoalitionParams {
            remote_penalty: 1.0,
            ..Default::default()
        };
        let c = form_coalition(&[far, near], &caps(&["light"]), Location::default(), &params).unwrap();
        assert_eq!(c.robot_ids(), vec!["b"]);
    }

    #[test]
    fn greedy_prunes_redundant_members() {
        let p = CoverProblem {
            ids: vec!["a".into(), "b".into(), "c".into()],
            costs: vec![1.0, 1.0, 1.5],
            masks: vec![0b001, 0b010, 0b111],
            target: 0b111,
        };
        let g = greedy_cover(&p).unwrap();
        assert_eq!(g.picks, vec![2]);
        assert_eq!(exact_cover(&p).unwrap().picks, vec![2]);
    }
}
