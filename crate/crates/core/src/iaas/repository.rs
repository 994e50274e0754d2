//! Local robots repository, optionally mirrored one file per robot.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{
    parse_descriptor, serialize_descriptor, DescriptorError, Location, RobotDescriptor, RobotState,
};

pub const FILE_SUFFIX: &str = ".robot.senml.json";

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("robot `{0}` is already in the repository")]
    Duplicate(String),
    #[error("robot `{0}` is not in the repository")]
    NotFound(String),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("storage: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoEntry {
    pub descriptor: RobotDescriptor,
    /// Canonical form of the submitted metadata (id cleared); detects
    /// re-submission of the same robot.
    pub metadata_key: String,
    pub fault_p: f64,
}

impl RepoEntry {
    pub fn state(&self) -> RobotState {
        self.descriptor.dynamic_ch.state
    }
}

/// Canonical form of a metadata document with its robot id cleared.
pub fn metadata_key(d: &RobotDescriptor) -> Result<String, DescriptorError> {
    let mut d = d.clone();
    d.robot_id.clear();
    serialize_descriptor(&d)
}

#[derive(Debug, Default)]
pub struct RobotsRepository {
    entries: BTreeMap<String, RepoEntry>,
    dir: Option<PathBuf>,
}

impl RobotsRepository {
    pub fn new() -> Self {
        RobotsRepository::default()
    }

    /// A repository mirrored in `dir`, loading any documents already there.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, RepoError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut entries = BTreeMap::new();
        for path in Self::files(&dir)? {
            let d = parse_descriptor(&fs::read_to_string(&path)?)?;
            let key = metadata_key(&d)?;
            entries.insert(
                d.robot_id.clone(),
                RepoEntry {
                    descriptor: d,
                    metadata_key: key,
                    fault_p: 0.0,
                },
            );
        }
        Ok(RobotsRepository {
            entries,
            dir: Some(dir),
        })
    }

    fn files(dir: &Path) -> io::Result<Vec<PathBuf>> {
        let mut out: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(FILE_SUFFIX))
            .collect();
        out.sort();
        Ok(out)
    }

    /// Ids of the documents currently on disk.
    pub fn persisted_ids(&self) -> io::Result<Vec<String>> {
        let Some(dir) = &self.dir else {
            return Ok(Vec::new());
        };
        Ok(Self::files(dir)?
            .iter()
            .filter_map(|p| p.file_name()?.to_str()?.strip_suffix(FILE_SUFFIX).map(String::from))
            .collect())
    }

    fn path(&self, robot_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{robot_id}{FILE_SUFFIX}")))
    }

    fn write(&self, d: &RobotDescriptor) -> Result<(), RepoError> {
        if let Some(path) = self.path(&d.robot_id) {
            fs::write(path, serialize_descriptor(d)?)?;
        }
        Ok(())
    }

    pub fn insert(&mut self, descriptor: RobotDescriptor, fault_p: f64) -> Result<(), RepoError> {
        let descriptor = descriptor.normalized();
        let id = descriptor.robot_id.clone();
        if id.is_empty() {
            return Err(DescriptorError::Invalid {
                field: "robotid".into(),
                reason: "repository entries need an id".into(),
            }
            .into());
        }
        if self.entries.contains_key(&id) {
            return Err(RepoError::Duplicate(id));
        }
        let key = metadata_key(&descriptor)?;
        self.write(&descriptor)?;
        self.entries.insert(
            id,
            RepoEntry {
                descriptor,
                metadata_key: key,
                fault_p,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, robot_id: &str) -> Result<RepoEntry, RepoError> {
        let e = self
            .entries
            .remove(robot_id)
            .ok_or_else(|| RepoError::NotFound(robot_id.to_string()))?;
        if let Some(path) = self.path(robot_id) {
            match fs::remove_file(path) {
                Err(err) if err.kind() != io::ErrorKind::NotFound => return Err(err.into()),
                _ => {}
            }
        }
        Ok(e)
    }

    /// Updates the dynamic state; returns true if the state changed.
    pub fn set_dynamic(&mut self, robot_id: &str, state: RobotState, location: Location) -> Result<bool, RepoError> {
        let e = self
            .entries
            .get_mut(robot_id)
            .ok_or_else(|| RepoError::NotFound(robot_id.to_string()))?;
        let changed = e.descriptor.dynamic_ch.state != state;
        e.descriptor.dynamic_ch.state = state;
        e.descriptor.dynamic_ch.location = location;
        let d = e.descriptor.clone();
        self.write(&d)?;
        Ok(changed)
    }

    pub fn get(&self, robot_id: &str) -> Option<&RepoEntry> {
        self.entries.get(robot_id)
    }

    pub fn contains(&self, robot_id: &str) -> bool {
        self.entries.contains_key(robot_id)
    }

    /// Entry submitted with the same metadata, if any.
    pub fn find_metadata(&self, key: &str) -> Option<&RepoEntry> {
        self.entries.values().find(|e| e.metadata_key == key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RepoEntry> {
        self.entries.values()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
