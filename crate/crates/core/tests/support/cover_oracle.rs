//! Random coalition instances and a 2^n brute-force minimum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roboiaas::coalition::{form_coalition, COST_EPS, Candidate, CoalitionError, CoalitionParams};
use roboiaas::descriptor::{ActuatorSpec, CapabilitySet, Location, RobotDescriptor, SensorSpec};

pub const SENSORS: [&str; 4] = ["light", "camera", "sonar", "touch"];
pub const ACTUATORS: [&str; 4] = ["movement-motor", "kicking-arm", "gripper-arm", "speaker"];

#[derive(Debug, Clone)]
pub struct Instance {
    pub candidates: Vec<Candidate>,
    pub required: CapabilitySet,
    pub site: Location,
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> Instance {
    let n = rng.gen_range(1..=max_n);
    let candidates = (0..n)
        .map(|i| {
            let mut d = RobotDescriptor {
                robot_id: format!("r{:02}", rng.gen_range(0..100) * 100 + i),
                ..Default::default()
            };
            for s in SENSORS {
                if rng.gen_bool(0.3) {
                    d.static_ch.sensors.push(SensorSpec::new(s, "", ""));
                }
            }
            for a in ACTUATORS {
                if rng.gen_bool(0.3) {
                    d.static_ch.actuators.push(ActuatorSpec::new(a, "", ""));
                }
            }
            d.dynamic_ch.location = Location::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
            Candidate {
                descriptor: d,
                owner_iaas: format!("sim://iaas-{}", i % 4),
                remote: rng.gen_bool(0.5),
            }
        })
        .collect();
    let mut required = CapabilitySet::new();
    while required.is_empty() {
        for t in SENSORS.iter().chain(ACTUATORS.iter()) {
            if rng.gen_bool(0.35) {
                required.insert(t);
            }
        }
    }
    Instance {
        candidates,
        required,
        site: Location::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)),
    }
}

pub fn instances(seed: u64, count: usize, max_n: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_instance(&mut rng, max_n)).collect()
}

fn member_cost(c: &Candidate, site: Location, params: &CoalitionParams) -> f64 {
    let d = c.descriptor.dynamic_ch.location;
    let dist = ((d.x - site.x).powi(2) + (d.y - site.y).powi(2)).sqrt();
    dist + params.engagement_cost + if c.remote { params.remote_penalty } else { 0.0 }
}

/// Cheapest covering subset over all 2^n subsets. Costs are compared up to
/// `COST_EPS`, the rounding slack between two ways of summing distances.
/// `None` when nothing covers.
pub fn brute_force(inst: &Instance, params: &CoalitionParams) -> Option<(f64, Vec<String>)> {
    let n = inst.candidates.len();
    let caps: Vec<CapabilitySet> = inst.candidates.iter().map(|c| c.descriptor.capability_set()).collect();
    let mut best: Option<(f64, Vec<String>)> = None;
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let covered = inst
            .required
            .iter()
            .all(|t| members.iter().any(|&i| caps[i].contains(t)));
        if !covered {
            continue;
        }
        let mut sorted = members.clone();
        sorted.sort_by(|&a, &b| inst.candidates[a].robot_id().cmp(inst.candidates[b].robot_id()));
        let cost: f64 = sorted
            .iter()
            .map(|&i| member_cost(&inst.candidates[i], inst.site, params))
            .sum();
        let ids: Vec<String> = sorted.iter().map(|&i| inst.candidates[i].robot_id().to_string()).collect();
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, ids));
        }
    }
    best
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct OptimalityReport {
    pub instances: usize,
    pub satisfiable: usize,
    pub exact_mismatches: usize,
    pub greedy_below_exact: usize,
    pub unsat_mismatches: usize,
    pub invariant_violations: usize,
}

impl OptimalityReport {
    pub fn passed(&self) -> bool {
        self.exact_mismatches == 0
            && self.greedy_below_exact == 0
            && self.unsat_mismatches == 0
            && self.invariant_violations == 0
    }
}

/// Checks exact and greedy solving against the brute-force minimum, plus
/// the coalition invariants on every returned coalition.
pub fn check(instances: &[Instance], params: &CoalitionParams) -> OptimalityReport {
    let greedy_params = CoalitionParams {
        exact_limit: 0,
        ..*params
    };
    let mut r = OptimalityReport {
        instances: instances.len(),
        ..Default::default()
    };
    for inst in instances {
        let oracle = brute_force(inst, params);
        let exact = form_coalition(&inst.candidates, &inst.required, inst.site, params);
        let greedy = form_coalition(&inst.candidates, &inst.required, inst.site, &greedy_params);
        match (&oracle, &exact, &greedy) {
            (None, Err(CoalitionError::Unsatisfiable { .. }), Err(CoalitionError::Unsatisfiable { .. })) => {}
            (Some((cost, _)), Ok(e), Ok(g)) => {
                r.satisfiable += 1;
                if (e.cost - cost).abs() > COST_EPS || !e.exact {
                    r.exact_mismatches += 1;
                }
                if g.cost < e.cost - COST_EPS {
                    r.greedy_below_exact += 1;
                }
                for c in [e, g] {
                    let mut union = CapabilitySet::new();
                    let mut sum = 0.0;
                    for m in &c.members {
                        let cand = inst.candidates.iter().find(|x| x.robot_id() == m.robot_id).unwrap();
                        let caps = cand.descriptor.capability_set();
                        union.union_with(&caps);
                        sum += member_cost(cand, inst.site, params);
                        if caps.intersection(&inst.required).is_empty() || m.assigned != caps.intersection(&inst.required) {
                            r.invariant_violations += 1;
                        }
                    }
                    if !union.is_superset(&inst.required)
                        || (sum - c.cost).abs() > 1e-9
                        || c.pattern.capabilities != union
                    {
                        r.invariant_violations += 1;
                    }
                }
            }
            _ => r.unsat_mismatches += 1,
        }
    }
    r
}
