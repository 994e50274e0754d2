//! Concurrent lease acquisition from several threads, auditing the table
//! after every grant.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roboiaas::iaas::{LeaseKind, LeaseRequest, LeaseTable};

const ROBOTS: usize = 3;
const SENSOR_TAGS: [&str; 2] = ["light", "camera"];
const ACTUATOR_TAGS: [&str; 2] = ["movement-motor", "kicking-arm"];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct FuzzReport {
    pub attempts: usize,
    pub granted: usize,
    pub conflicts: usize,
    pub sensor_only: usize,
    pub sensor_only_rejected: usize,
    pub co_leases: usize,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.co_leases == 0 && self.sensor_only_rejected == 0 && self.attempts > 0
    }
}

/// Number of (robot, tag) pairs where two distinct holders meet and either
/// the tag is an actuator or one of them holds it exclusively.
pub fn co_leased(table: &LeaseTable) -> usize {
    let mut holders: BTreeMap<(String, String), Vec<(String, LeaseKind)>> = BTreeMap::new();
    for l in table.snapshot() {
        holders.entry((l.robot_id, l.tag)).or_default().push((l.holder, l.kind));
    }
    holders
        .iter()
        .filter(|((_, tag), hs)| {
            let distinct: BTreeSet<&str> = hs.iter().map(|(h, _)| h.as_str()).collect();
            let exclusive = hs.iter().any(|(_, k)| *k == LeaseKind::Exclusive);
            distinct.len() > 1 && (exclusive || ACTUATOR_TAGS.contains(&tag.as_str()))
        })
        .count()
}

fn attempt(rng: &mut ChaCha8Rng) -> Vec<LeaseRequest> {
    let sensor_only = rng.gen_bool(0.3);
    let mut out = Vec::new();
    while out.is_empty() {
        for r in 0..ROBOTS {
            let robot = format!("rob-{}", r + 1);
            for tag in SENSOR_TAGS {
                if rng.gen_bool(0.3) {
                    out.push(LeaseRequest::new(&robot, tag, LeaseKind::Shared));
                }
            }
            if !sensor_only {
                for tag in ACTUATOR_TAGS {
                    if rng.gen_bool(0.25) {
                        out.push(LeaseRequest::new(&robot, tag, LeaseKind::Exclusive));
                    }
                }
            }
        }
    }
    out
}

/// `attempts` assignment attempts spread over `threads` threads sharing
/// one table. Granted leases are held for a few attempts, then released.
pub fn fuzz(seed: u64, attempts: usize, threads: usize) -> FuzzReport {
    let table = LeaseTable::new();
    let granted = AtomicUsize::new(0);
    let conflicts = AtomicUsize::new(0);
    let sensor_only = AtomicUsize::new(0);
    let sensor_only_rejected = AtomicUsize::new(0);
    let co_leases = AtomicUsize::new(0);
    thread::scope(|s| {
        for t in 0..threads {
            let per = attempts / threads + usize::from(t < attempts % threads);
            let (table, granted, conflicts) = (&table, &granted, &conflicts);
            let (sensor_only, sensor_only_rejected, co_leases) = (&sensor_only, &sensor_only_rejected, &co_leases);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64 + 1).wrapping_mul(0x9e37_79b9));
                let mut held: Vec<String> = Vec::new();
                for i in 0..per {
                    let holder = format!("t{t}-a{i}");
                    let reqs = attempt(&mut rng);
                    let shared_only = reqs.iter().all(|r| r.kind == LeaseKind::Shared);
                    if shared_only {
                        sensor_only.fetch_add(1, Ordering::Relaxed);
                    }
                    match table.try_acquire(&holder, &reqs) {
                        Ok(()) => {
                            granted.fetch_add(1, Ordering::Relaxed);
                            co_leases.fetch_add(co_leased(table), Ordering::Relaxed);
                            held.push(holder);
                        }
                        Err(_) => {
                            conflicts.fetch_add(1, Ordering::Relaxed);
                            if shared_only {
                                sensor_only_rejected.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                    while held.len() > 2 || (!held.is_empty() && rng.gen_bool(0.3)) {
                        let h = held.remove(rng.gen_range(0..held.len()));
                        table.release(&h);
                    }
                    thread::yield_now();
                }
                for h in held {
                    table.release(&h);
                }
            });
        }
    });
    FuzzReport {
        attempts,
        granted: granted.into_inner(),
        conflicts: conflicts.into_inner(),
        sensor_only: sensor_only.into_inner(),
        sensor_only_rejected: sensor_only_rejected.into_inner(),
        co_leases: co_leases.into_inner() + co_leased(&table),
    }
}
