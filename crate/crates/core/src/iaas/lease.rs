//! Node-level virtualization as leases on (robot, capability tag) pairs.
//!
//! Actuator tags are exclusive: at most one holder per (robot, tag).
//! Sensor tags are shared by any number of holders. Acquisition is
//! all-or-nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeaseKind {
    Exclusive,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LeaseRequest {
    pub robot_id: String,
    pub tag: String,
    pub kind: LeaseKind,
}

impl LeaseRequest {
    pub fn new(robot_id: &str, tag: &str, kind: LeaseKind) -> Self {
        LeaseRequest {
            robot_id: robot_id.to_string(),
            tag: tag.to_string(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{robot_id}/{tag} is held by {holder}")]
pub struct LeaseConflict {
    pub robot_id: String,
    pub tag: String,
    pub holder: String,
}

type Key = (String, String);

#[derive(Debug, Default, Clone)]
struct Leases {
    exclusive: BTreeMap<Key, String>,
    shared: BTreeMap<Key, BTreeSet<String>>,
}

impl Leases {
    fn conflict(&self, holder: &str, r: &LeaseRequest) -> Option<LeaseConflict> {
        let key = (r.robot_id.clone(), r.tag.clone());
        let mk = |h: &str| LeaseConflict {
            robot_id: r.robot_id.clone(),
            tag: r.tag.clone(),
            holder: h.to_string(),
        };
        if let Some(h) = self.exclusive.get(&key) {
            if h != holder {
                return Some(mk(h));
            }
        }
        if r.kind == LeaseKind::Exclusive {
            if let Some(hs) = self.shared.get(&key) {
                if let Some(h) = hs.iter().find(|h| *h != holder) {
                    return Some(mk(h));
                }
            }
        }
        None
    }
}

/// Thread-safe lease table of one IaaS node.
#[derive(Debug, Default)]
pub struct LeaseTable {
    inner: Mutex<Leases>,
}

/// One held lease, as reported by [`LeaseTable::snapshot`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeldLease {
    pub robot_id: String,
    pub tag: String,
    pub kind: LeaseKind,
    pub holder: String,
}

impl LeaseTable {
    pub fn new() -> Self {
        LeaseTable::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Leases> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Grants every request to `holder` or none of them.
    pub fn try_acquire(&self, holder: &str, requests: &[LeaseRequest]) -> Result<(), LeaseConflict> {
        let mut l = self.lock();
        if let Some(c) = requests.iter().find_map(|r| l.conflict(holder, r)) {
            return Err(c);
        }
        for r in requests {
            let key = (r.robot_id.clone(), r.tag.clone());
            match r.kind {
                LeaseKind::Exclusive => {
                    l.exclusive.insert(key, holder.to_string());
                }
                LeaseKind::Shared => {
                    l.shared.entry(key).or_default().insert(holder.to_string());
                }
            }
        }
        Ok(())
    }

    /// True if `try_acquire` would succeed right now.
    pub fn admits(&self, holder: &str, requests: &[LeaseRequest]) -> bool {
        let l = self.lock();
        requests.iter().all(|r| l.conflict(holder, r).is_none())
    }

    /// Releases every lease of `holder`, returning how many were dropped.
    pub fn release(&self, holder: &str) -> usize {
        self.release_where(holder, |_| true)
    }

    /// Releases the leases `holder` has on one robot.
    pub fn release_robot(&self, holder: &str, robot_id: &str) -> usize {
        self.release_where(holder, |k| k.0 == robot_id)
    }

    fn release_where(&self, holder: &str, pick: impl Fn(&Key) -> bool) -> usize {
        let mut l = self.lock();
        let before = l.exclusive.len();
        l.exclusive.retain(|k, h| !(h == holder && pick(k)));
        let mut n = before - l.exclusive.len();
        for (k, hs) in l.shared.iter_mut() {
            if pick(k) && hs.remove(holder) {
                n += 1;
            }
        }
        l.shared.retain(|_, hs| !hs.is_empty());
        n
    }

    pub fn is_leased(&self, robot_id: &str) -> bool {
        let l = self.lock();
        l.exclusive.keys().any(|k| k.0 == robot_id) || l.shared.keys().any(|k| k.0 == robot_id)
    }

    pub fn snapshot(&self) -> Vec<HeldLease> {
        let l = self.lock();
        let ex = l.exclusive.iter().map(|((r, t), h)| HeldLease {
            robot_id: r.clone(),
            tag: t.clone(),
            kind: LeaseKind::Exclusive,
            holder: h.clone(),
        });
        let sh = l.shared.iter().flat_map(|((r, t), hs)| {
            hs.iter().map(move |h| HeldLease {
                robot_id: r.clone(),
                tag: t.clone(),
                kind: LeaseKind::Shared,
                holder: h.clone(),
            })
        });
        ex.chain(sh).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(r: &str, t: &str) -> LeaseRequest {
        LeaseRequest::new(r, t, LeaseKind::Exclusive)
    }

    fn sh(r: &str, t: &str) -> LeaseRequest {
        LeaseRequest::new(r, t, LeaseKind::Shared)
    }

    #[test]
    fn second_mover_conflicts() {
        let t = LeaseTable::new();
        t.try_acquire("a1", &[ex("r1", "movement-motor")]).unwrap();
        let err = t.try_acquire("a2", &[ex("r1", "movement-motor")]).unwrap_err();
        assert_eq!(err.holder, "a1");
    }

    #[test]
    fn sensors_are_shared() {
        let t = LeaseTable::new();
        t.try_acquire("a1", &[sh("r1", "light")]).unwrap();
        t.try_acquire("a2", &[sh("r1", "light")]).unwrap();
        assert_eq!(t.snapshot().len(), 2);
    }

    #[test]
    fn acquisition_is_all_or_nothing() {
        let t = LeaseTable::new();
        t.try_acquire("a1", &[ex("r2", "gripper-arm")]).unwrap();
        assert!(t
            .try_acquire("a2", &[sh("r1", "light"), ex("r2", "gripper-arm")])
            .is_err());
        assert!(!t.is_leased("r1"));
    }

    #[test]
    fn release_frees_everything_of_a_holder() {
        let t = LeaseTable::new();
        t.try_acquire("a1", &[ex("r1", "kicking-arm"), sh("r1", "light"), ex("r2", "x")])
            .unwrap();
        assert_eq!(t.release_robot("a1", "r2"), 1);
        assert_eq!(t.release("a1"), 2);
        assert!(t.snapshot().is_empty());
        t.try_acquire("a2", &[ex("r1", "kicking-arm")]).unwrap();
    }

    #[test]
    fn reacquire_by_same_holder_is_idempotent() {
        let t = LeaseTable::new();
        t.try_acquire("a1", &[ex("r1", "m")]).unwrap();
        t.try_acquire("a1", &[ex("r1", "m")]).unwrap();
        assert_eq!(t.release("a1"), 1);
    }
}
