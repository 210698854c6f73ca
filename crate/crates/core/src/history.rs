use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamVector;

/// Past global models, keyed by version, kept while some client may still
/// report an update trained from them.
#[derive(Debug, Clone)]
pub struct VersionHistory {
    entries: BTreeMap<u64, ParamVector>,
    current: u64,
}

impl VersionHistory {
    /// Starts at version 0 holding `initial`.
    pub fn new(initial: ParamVector) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(0, initial);
        VersionHistory {
            entries,
            current: 0,
        }
    }

    pub fn current_version(&self) -> u64 {
        self.current
    }

    pub fn current(&self) -> &ParamVector {
        &self.entries[&self.current]
    }

    pub fn get(&self, version: u64) -> Result<&ParamVector> {
        self.entries
            .get(&version)
            .ok_or(Error::MissingVersion(version))
    }

    pub fn contains(&self, version: u64) -> bool {
        self.entries.contains_key(&version)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn versions(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    /// Stores the next global model and returns its version number.
    pub fn push(&mut self, params: ParamVector) -> u64 {
        self.current += 1;
        self.entries.insert(self.current, params);
        self.current
    }

    /// Drops every version older than the oldest one still referenced by an
    /// in-flight or buffered client. The current version is always kept.
    /// Returns how many versions were removed.
    pub fn prune(&mut self, needed: impl IntoIterator<Item = u64>) -> usize {
        let floor = needed
            .into_iter()
            .fold(self.current, u64::min);
        let keep = self.entries.split_off(&floor);
        let removed = self.entries.len();
        self.entries = keep;
        removed
    }
}
