use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const MAX_USER_LEN: usize = 32;

/// Container lifecycle strategy requested by a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContainerType {
    /// A fresh container instantiated from an image for every job, run as a
    /// site-scoped host user (the Singularity model).
    ImagePerJob,
    /// One long-lived container per container specification; jobs run as
    /// distinct accounts inside it (the systemd-nspawn / Nix model).
    SharedContainer,
    /// Plain supervised process on the host, confined to the job context.
    LocalSandbox,
}

impl ContainerType {
    pub const ALL: [ContainerType; 3] = [
        ContainerType::ImagePerJob,
        ContainerType::SharedContainer,
        ContainerType::LocalSandbox,
    ];

    /// Record name used after the namespace in the wire `$type` field.
    pub fn wire_name(self) -> &'static str {
        match self {
            ContainerType::ImagePerJob => "Singularity",
            ContainerType::SharedContainer => "SystemdNspawn",
            ContainerType::LocalSandbox => "LocalSandbox",
        }
    }

    pub fn from_wire_name(name: &str) -> Option<Self> {
        match name {
            "Singularity" | "ImagePerJob" => Some(ContainerType::ImagePerJob),
            "SystemdNspawn" | "Nix" | "SharedContainer" => Some(ContainerType::SharedContainer),
            "LocalSandbox" => Some(ContainerType::LocalSandbox),
            _ => None,
        }
    }
}

impl fmt::Display for ContainerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ContainerType::ImagePerJob => "ImagePerJob",
            ContainerType::SharedContainer => "SharedContainer",
            ContainerType::LocalSandbox => "LocalSandbox",
        };
        f.write_str(s)
    }
}

/// A host directory made visible inside the container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MountSpec {
    pub host_path: PathBuf,
    pub container_path: PathBuf,
    #[serde(default)]
    pub read_only: bool,
}

impl MountSpec {
    pub fn new(host: impl Into<PathBuf>, container: impl Into<PathBuf>, read_only: bool) -> Self {
        Self {
            host_path: host.into(),
            container_path: container.into(),
            read_only,
        }
    }
}

/// Everything a page submits to describe where and as whom a job runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobMetadata {
    pub shell: Option<String>,
    pub container_type: ContainerType,
    pub container_id: Option<String>,
    pub image: Option<String>,
    pub binds: Vec<MountSpec>,
    pub overlay: Option<String>,
    pub user: String,
    pub address: Option<String>,
    pub hostname: Option<String>,
    pub url: Option<String>,
}

impl JobMetadata {
    /// Metadata with only the required fields set.
    pub fn new(container_type: ContainerType, user: impl Into<String>) -> Self {
        Self {
            shell: None,
            container_type,
            container_id: None,
            image: None,
            binds: Vec::new(),
            overlay: None,
            user: user.into(),
            address: None,
            hostname: None,
            url: None,
        }
    }

    pub fn shell_or_default(&self) -> &str {
        self.shell.as_deref().unwrap_or("bash")
    }

    /// Checks the structural invariants that hold regardless of server policy.
    pub fn check_invariants(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !is_valid_login(&self.user) {
            out.push(Violation::UserPattern);
        }
        match self.container_type {
            ContainerType::ImagePerJob if self.image.is_none() => out.push(Violation::ImageRequired),
            ContainerType::SharedContainer
                if self.image.is_none() && self.container_id.is_none() =>
            {
                out.push(Violation::ContainerSpecRequired)
            }
            _ => {}
        }
        if let Some(shell) = &self.shell {
            if shell.is_empty() || shell.chars().any(char::is_whitespace) {
                out.push(Violation::ShellName);
            }
        }
        let mut seen = HashSet::new();
        for b in &self.binds {
            if !is_clean_absolute(&b.host_path) || !is_clean_absolute(&b.container_path) {
                out.push(Violation::BindNotAbsolute(b.container_path.clone()));
            }
            if !seen.insert(&b.container_path) {
                out.push(Violation::DuplicateBind(b.container_path.clone()));
            }
        }
        out
    }
}

/// Server- and site-level restrictions applied on top of the invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerPolicy {
    /// Images a job may name. Empty means unrestricted.
    pub allowed_images: Vec<String>,
    /// Host directories under which binds may point.
    pub bind_roots: Vec<PathBuf>,
    pub enabled_backends: BTreeSet<ContainerType>,
}

impl Default for ServerPolicy {
    fn default() -> Self {
        Self {
            allowed_images: Vec::new(),
            bind_roots: Vec::new(),
            enabled_backends: [ContainerType::LocalSandbox].into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UserPattern,
    ImageRequired,
    ContainerSpecRequired,
    ShellName,
    BindNotAbsolute(PathBuf),
    DuplicateBind(PathBuf),
    BindOutsideRoot(PathBuf),
    ImageNotAllowed(String),
    BackendDisabled(ContainerType),
    UnsupportedByBackend(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UserPattern => write!(f, "user fails pattern"),
            Violation::ImageRequired => write!(f, "image required for image-per-job container"),
            Violation::ContainerSpecRequired => {
                write!(f, "shared container needs containerId or image")
            }
            Violation::ShellName => write!(f, "shell must be a single non-empty word"),
            Violation::BindNotAbsolute(p) => {
                write!(f, "bind paths must be absolute and normalized ({})", p.display())
            }
            Violation::DuplicateBind(p) => write!(f, "duplicate bind target {}", p.display()),
            Violation::BindOutsideRoot(p) => {
                write!(f, "bind outside allowed root ({})", p.display())
            }
            Violation::ImageNotAllowed(i) => write!(f, "image not allowed: {i}"),
            Violation::BackendDisabled(t) => write!(f, "container type {t} is not enabled"),
            Violation::UnsupportedByBackend(what) => {
                write!(f, "{what} not supported by the local sandbox")
            }
        }
    }
}

/// Checks invariants plus policy. An empty result means the metadata may run.
pub fn validate_metadata(m: &JobMetadata, policy: &ServerPolicy) -> Result<(), Vec<Violation>> {
    let mut out = m.check_invariants();
    if !policy.enabled_backends.contains(&m.container_type) {
        out.push(Violation::BackendDisabled(m.container_type));
    }
    if let Some(image) = &m.image {
        if !policy.allowed_images.is_empty() && !policy.allowed_images.contains(image) {
            out.push(Violation::ImageNotAllowed(image.clone()));
        }
    }
    for b in &m.binds {
        let inside = is_clean_absolute(&b.host_path)
            && policy.bind_roots.iter().any(|root| b.host_path.starts_with(root));
        if !inside {
            out.push(Violation::BindOutsideRoot(b.host_path.clone()));
        }
    }
    if m.container_type == ContainerType::LocalSandbox {
        if !m.binds.is_empty() {
            out.push(Violation::UnsupportedByBackend("binds"));
        }
        if m.overlay.is_some() {
            out.push(Violation::UnsupportedByBackend("overlay"));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// `^[a-z][a-z0-9_-]*$`, at most 32 characters.
pub fn is_valid_login(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z'))
        && s.len() <= MAX_USER_LEN
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_' | '-'))
}

fn is_clean_absolute(p: &Path) -> bool {
    p.is_absolute()
        && p.components()
            .all(|c| matches!(c, Component::RootDir | Component::Normal(_)))
}
