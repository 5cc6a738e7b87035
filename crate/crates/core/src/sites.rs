//! Instructor sites: registration, API-key authentication, origin checks and
//! the per-site disable switch.
//!
//! The registry is a read-mostly snapshot that is swapped atomically on every
//! admin mutation and optionally persisted as a JSON array of [`Site`]
//! records. API keys are stored only as salted SHA-256 digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use url::Url;

use crate::backends::SiteScope;
use crate::executor::ExecutionLimits;
use crate::model::is_valid_login;

pub const MAX_SITE_ID_LEN: usize = 16;
pub const MAX_HOST_USER_LEN: usize = 31;
const HASH_SUFFIX_LEN: usize = 8;

/// Host account name for a site user: `<prefix>-<login>`. Names longer than
/// 31 characters keep their first 23 characters and end in 8 hex digits of
/// the login's SHA-256.
pub fn host_user_name(prefix: &str, login: &str) -> String {
    let full = format!("{prefix}-{login}");
    if full.chars().count() <= MAX_HOST_USER_LEN {
        return full;
    }
    let digest = hex::encode(Sha256::digest(login.as_bytes()));
    let head: String = full.chars().take(MAX_HOST_USER_LEN - HASH_SUFFIX_LEN).collect();
    format!("{head}{}", &digest[..HASH_SUFFIX_LEN])
}

/// `^[a-z][a-z0-9]{0,11}$`
pub fn is_valid_prefix(p: &str) -> bool {
    let mut chars = p.chars();
    matches!(chars.next(), Some('a'..='z'))
        && p.len() <= 12
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9'))
}

fn is_valid_site_id(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_SITE_ID_LEN
        && s.chars()
            .all(|c| matches!(c, 'a'..='z' | '0'..='9' | '-' | '_'))
}

/// A registered site as persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Site {
    pub site_id: String,
    /// `sha256:<salt hex>:<digest hex>`
    pub api_key_hash: String,
    pub user_prefix: String,
    pub enabled: bool,
    #[serde(default)]
    pub origin_allow_list: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_overrides: Option<ExecutionLimits>,
    #[serde(default)]
    pub image_allow_list: Vec<String>,
}

impl Site {
    pub fn scope(&self) -> SiteScope {
        SiteScope::new(&self.site_id, &self.user_prefix)
    }

    pub fn key_matches(&self, key: &str) -> bool {
        verify_key(&self.api_key_hash, key)
    }

    pub fn origin_allowed(&self, origin: &str) -> bool {
        let Some(origin) = normalize_origin(origin) else {
            return false;
        };
        self.origin_allow_list
            .iter()
            .any(|o| o == "*" || normalize_origin(o).as_deref() == Some(origin.as_str()))
    }
}

/// Registration request; carries the plaintext key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SiteRegistration {
    pub site_id: String,
    pub api_key: String,
    pub user_prefix: String,
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub origin_allow_list: Vec<String>,
    #[serde(default)]
    pub limit_overrides: Option<ExecutionLimits>,
    #[serde(default)]
    pub image_allow_list: Vec<String>,
}

fn default_true() -> bool {
    true
}

/// An authenticated student of a site.
#[derive(Debug, Clone)]
pub struct SiteUser {
    pub site_id: String,
    pub login: String,
    pub host_user: String,
    pub site: Arc<Site>,
}

impl SiteUser {
    pub fn scope(&self) -> SiteScope {
        self.site.scope()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SiteError {
    #[error("site id {0:?} is already registered")]
    DuplicateSiteId(String),
    #[error("user prefix {0:?} is already used by another site")]
    DuplicatePrefix(String),
    #[error("invalid user prefix {0:?}")]
    InvalidPrefix(String),
    #[error("invalid site id {0:?}")]
    InvalidSiteId(String),
    #[error("invalid origin {0:?}")]
    InvalidOrigin(String),
    #[error("api key must not be empty")]
    EmptyKey,
    #[error("unknown api key")]
    UnknownKey,
    #[error("site is disabled")]
    SiteDisabled,
    #[error("origin not allowed for this site")]
    OriginRejected,
    #[error("invalid login")]
    BadLogin,
    #[error("unknown site {0:?}")]
    UnknownSite(String),
    #[error("registry persistence failed: {0}")]
    Persist(String),
}

type Snapshot = Arc<BTreeMap<String, Arc<Site>>>;

pub struct SiteRegistry {
    snapshot: RwLock<Snapshot>,
    file: Option<PathBuf>,
    loaded_mtime: Mutex<Option<SystemTime>>,
    admin: Mutex<()>,
}

impl SiteRegistry {
    pub fn in_memory() -> Self {
        Self {
            snapshot: RwLock::new(Arc::default()),
            file: None,
            loaded_mtime: Mutex::new(None),
            admin: Mutex::new(()),
        }
    }

    /// Opens a registry backed by `path`, which need not exist yet.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, SiteError> {
        let reg = Self {
            file: Some(path.into()),
            ..Self::in_memory()
        };
        reg.reload()?;
        Ok(reg)
    }

    fn current(&self) -> Snapshot {
        self.snapshot.read().unwrap().clone()
    }

    pub fn get(&self, site_id: &str) -> Option<Arc<Site>> {
        self.current().get(site_id).cloned()
    }

    pub fn sites(&self) -> Vec<Arc<Site>> {
        self.current().values().cloned().collect()
    }

    /// Whether any enabled site allows `origin`. Used for CORS.
    pub fn origin_known(&self, origin: &str) -> bool {
        self.current()
            .values()
            .any(|s| s.enabled && s.origin_allowed(origin))
    }

    pub fn register_site(&self, reg: SiteRegistration) -> Result<(), SiteError> {
        if !is_valid_site_id(&reg.site_id) {
            return Err(SiteError::InvalidSiteId(reg.site_id));
        }
        if !is_valid_prefix(&reg.user_prefix) {
            return Err(SiteError::InvalidPrefix(reg.user_prefix));
        }
        if reg.api_key.is_empty() {
            return Err(SiteError::EmptyKey);
        }
        if let Some(bad) = reg
            .origin_allow_list
            .iter()
            .find(|o| *o != "*" && normalize_origin(o).is_none())
        {
            return Err(SiteError::InvalidOrigin(bad.clone()));
        }

        let _guard = self.admin.lock().unwrap();
        let snap = self.current();
        if let Some(existing) = snap.get(&reg.site_id) {
            let identical = existing.user_prefix == reg.user_prefix
                && existing.enabled == reg.enabled
                && existing.origin_allow_list == reg.origin_allow_list
                && existing.limit_overrides == reg.limit_overrides
                && existing.image_allow_list == reg.image_allow_list
                && existing.key_matches(&reg.api_key);
            return if identical {
                Ok(())
            } else {
                Err(SiteError::DuplicateSiteId(reg.site_id))
            };
        }
        if snap.values().any(|s| s.user_prefix == reg.user_prefix) {
            return Err(SiteError::DuplicatePrefix(reg.user_prefix));
        }

        let site = Site {
            site_id: reg.site_id.clone(),
            api_key_hash: hash_key(&reg.api_key),
            user_prefix: reg.user_prefix,
            enabled: reg.enabled,
            origin_allow_list: reg.origin_allow_list,
            limit_overrides: reg.limit_overrides,
            image_allow_list: reg.image_allow_list,
        };
        let mut next = (*snap).clone();
        next.insert(reg.site_id, Arc::new(site));
        self.commit(next)
    }

    pub fn set_enabled(&self, site_id: &str, enabled: bool) -> Result<(), SiteError> {
        let _guard = self.admin.lock().unwrap();
        let snap = self.current();
        let site = snap
            .get(site_id)
            .ok_or_else(|| SiteError::UnknownSite(site_id.to_owned()))?;
        let mut next = (*snap).clone();
        next.insert(
            site_id.to_owned(),
            Arc::new(Site {
                enabled,
                ..(**site).clone()
            }),
        );
        self.commit(next)
    }

    /// Resolves a request's key, student login and origin to a site user.
    /// A missing origin means the request did not come from a cross-origin
    /// browser context and is not origin-checked.
    pub fn authenticate(
        &self,
        api_key: &str,
        login: &str,
        origin: Option<&str>,
    ) -> Result<SiteUser, SiteError> {
        let site = self.site_for_key(api_key)?;
        if !site.enabled {
            return Err(SiteError::SiteDisabled);
        }
        if let Some(origin) = origin {
            if !site.origin_allowed(origin) {
                return Err(SiteError::OriginRejected);
            }
        }
        if !is_valid_login(login) {
            return Err(SiteError::BadLogin);
        }
        Ok(SiteUser {
            site_id: site.site_id.clone(),
            login: login.to_owned(),
            host_user: host_user_name(&site.user_prefix, login),
            site,
        })
    }

    /// Looks up the site owning `api_key`, checking every site's digest.
    pub fn site_for_key(&self, api_key: &str) -> Result<Arc<Site>, SiteError> {
        let mut found = None;
        for site in self.current().values() {
            if site.key_matches(api_key) && found.is_none() {
                found = Some(site.clone());
            }
        }
        found.ok_or(SiteError::UnknownKey)
    }

    fn commit(&self, next: BTreeMap<String, Arc<Site>>) -> Result<(), SiteError> {
        if let Some(path) = &self.file {
            let records: Vec<&Site> = next.values().map(|s| s.as_ref()).collect();
            let text = serde_json::to_string_pretty(&records)
                .map_err(|e| SiteError::Persist(e.to_string()))?;
            write_atomic(path, text.as_bytes()).map_err(|e| SiteError::Persist(e.to_string()))?;
            *self.loaded_mtime.lock().unwrap() = mtime(path);
        }
        *self.snapshot.write().unwrap() = Arc::new(next);
        Ok(())
    }

    /// Re-reads the backing file. A missing file yields an empty registry.
    pub fn reload(&self) -> Result<(), SiteError> {
        let Some(path) = &self.file else {
            return Ok(());
        };
        let _guard = self.admin.lock().unwrap();
        let sites: Vec<Site> = match fs::read_to_string(path) {
            Ok(text) => {
                serde_json::from_str(&text).map_err(|e| SiteError::Persist(e.to_string()))?
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(SiteError::Persist(e.to_string())),
        };
        let map = sites
            .into_iter()
            .map(|s| (s.site_id.clone(), Arc::new(s)))
            .collect();
        *self.snapshot.write().unwrap() = Arc::new(map);
        *self.loaded_mtime.lock().unwrap() = mtime(path);
        Ok(())
    }

    /// Reloads when the file's modification time differs from the last
    /// load or write. Returns whether a reload happened.
    pub fn reload_if_changed(&self) -> Result<bool, SiteError> {
        let Some(path) = &self.file else {
            return Ok(false);
        };
        if mtime(path) == *self.loaded_mtime.lock().unwrap() {
            return Ok(false);
        }
        self.reload().map(|_| true)
    }
}

fn mtime(path: &Path) -> Option<SystemTime> {
    fs::metadata(path).and_then(|m| m.modified()).ok()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn normalize_origin(s: &str) -> Option<String> {
    let url = Url::parse(s).ok()?;
    let origin = url.origin();
    origin.is_tuple().then(|| origin.ascii_serialization())
}

pub fn hash_key(key: &str) -> String {
    let mut salt = [0u8; 16];
    rand::rng().fill_bytes(&mut salt);
    format!("sha256:{}:{}", hex::encode(salt), digest(&salt, key))
}

fn digest(salt: &[u8], key: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(key.as_bytes());
    hex::encode(h.finalize())
}

fn verify_key(stored: &str, key: &str) -> bool {
    let mut parts = stored.splitn(3, ':');
    let (Some("sha256"), Some(salt), Some(expected)) = (parts.next(), parts.next(), parts.next())
    else {
        return false;
    };
    let Ok(salt) = hex::decode(salt) else {
        return false;
    };
    digest(&salt, key)
        .as_bytes()
        .ct_eq(expected.as_bytes())
        .into()
}
