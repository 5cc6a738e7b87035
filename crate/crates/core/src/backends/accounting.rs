use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Duration;

use crate::clock::Millis;

/// Activity of one reclaimable resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Usage {
    pub active_jobs: u32,
    pub last_used: Millis,
}

impl Usage {
    fn touch(&mut self, now: Millis) {
        self.last_used = self.last_used.max(now);
    }

    fn idle_longer_than(&self, ttl: Duration, now: Millis) -> bool {
        self.active_jobs == 0 && now.saturating_sub(self.last_used) > ttl.as_millis() as Millis
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HostUserKey {
    pub site: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerEntry {
    pub handle: String,
    pub usage: Usage,
    /// Accounts created inside the container.
    pub accounts: BTreeSet<String>,
}

/// What the backends have created on the host and how recently it was used.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct BackendAccounting {
    pub(crate) users: BTreeMap<HostUserKey, Usage>,
    /// Keyed by container specification.
    pub(crate) containers: BTreeMap<String, ContainerEntry>,
    pub(crate) contexts: BTreeSet<PathBuf>,
}

impl BackendAccounting {
    pub fn users(&self) -> impl Iterator<Item = (&HostUserKey, &Usage)> {
        self.users.iter()
    }

    pub fn containers(&self) -> impl Iterator<Item = (&String, &ContainerEntry)> {
        self.containers.iter()
    }

    pub fn contexts(&self) -> impl Iterator<Item = &PathBuf> {
        self.contexts.iter()
    }

    pub fn has_user(&self, site: &str, name: &str) -> bool {
        self.users.contains_key(&HostUserKey {
            site: site.to_owned(),
            name: name.to_owned(),
        })
    }

    pub fn container_for(&self, spec: &str) -> Option<&ContainerEntry> {
        self.containers.get(spec)
    }

    pub(crate) fn touch_user(&mut self, key: HostUserKey, now: Millis) -> bool {
        let created = !self.users.contains_key(&key);
        self.users.entry(key).or_default().touch(now);
        created
    }

    pub(crate) fn touch_container(&mut self, spec: &str, now: Millis) {
        if let Some(c) = self.containers.get_mut(spec) {
            c.usage.touch(now);
        }
    }

    pub(crate) fn user_mut(&mut self, key: &HostUserKey) -> Option<&mut Usage> {
        self.users.get_mut(key)
    }

    pub(crate) fn container_usage_mut(&mut self, spec: &str) -> Option<&mut Usage> {
        self.containers.get_mut(spec).map(|c| &mut c.usage)
    }

    pub(crate) fn idle_containers(&self, ttl: Duration, now: Millis) -> Vec<(String, String)> {
        self.containers
            .iter()
            .filter(|(_, c)| c.usage.idle_longer_than(ttl, now))
            .map(|(spec, c)| (spec.clone(), c.handle.clone()))
            .collect()
    }

    pub(crate) fn idle_users(&self, ttl: Duration, now: Millis) -> Vec<HostUserKey> {
        self.users
            .iter()
            .filter(|(_, u)| u.idle_longer_than(ttl, now))
            .map(|(k, _)| k.clone())
            .collect()
    }
}
