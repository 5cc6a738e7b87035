use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use ccrs_core::model::ContainerType;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BackendStatus {
    pub name: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HealthReport {
    pub status: &'static str,
    pub backends: Vec<BackendStatus>,
}

impl HealthReport {
    pub fn healthy(&self) -> bool {
        self.status == "ok"
    }
}

/// Checks that each enabled backend has the host tools it shells out to.
#[derive(Debug, Clone)]
pub struct HealthProbe {
    backends: Vec<ContainerType>,
    path_env: String,
    /// Whether container backends can provision real host state.
    live: bool,
    spool_root: PathBuf,
}

fn required_tools(kind: ContainerType) -> &'static [&'static str] {
    match kind {
        ContainerType::ImagePerJob => &["singularity"],
        ContainerType::SharedContainer => &["systemd-run", "systemd-nspawn", "machinectl"],
        ContainerType::LocalSandbox => &["bash"],
    }
}

impl HealthProbe {
    pub fn new(backends: Vec<ContainerType>, path_env: &str, spool_root: &Path) -> Self {
        Self {
            backends,
            path_env: path_env.to_owned(),
            live: cfg!(feature = "live"),
            spool_root: spool_root.to_path_buf(),
        }
    }

    pub fn check(&self) -> HealthReport {
        let spool_ok = self.spool_root.is_dir();
        let backends: Vec<BackendStatus> = self
            .backends
            .iter()
            .map(|&kind| {
                let mut problems: Vec<String> = required_tools(kind)
                    .iter()
                    .filter(|t| find_in_path(t, &self.path_env).is_none())
                    .map(|t| format!("{t} not found on PATH"))
                    .collect();
                if kind != ContainerType::LocalSandbox && !self.live {
                    problems.push("server built without host provisioning".into());
                }
                if !spool_ok {
                    problems.push(format!("spool root {} missing", self.spool_root.display()));
                }
                BackendStatus {
                    name: kind.to_string(),
                    ok: problems.is_empty(),
                    problem: (!problems.is_empty()).then(|| problems.join("; ")),
                }
            })
            .collect();
        let ok = !backends.is_empty() && backends.iter().all(|b| b.ok);
        HealthReport {
            status: if ok { "ok" } else { "degraded" },
            backends,
        }
    }
}

fn find_in_path(tool: &str, path_env: &str) -> Option<PathBuf> {
    path_env
        .split(':')
        .filter(|d| !d.is_empty())
        .map(|d| Path::new(d).join(tool))
        .find(|p| {
            p.metadata()
                .is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_sandbox_is_healthy_with_bash() {
        let dir = std::env::temp_dir();
        let r = HealthProbe::new(vec![ContainerType::LocalSandbox], "/usr/bin:/bin", &dir).check();
        assert!(r.healthy(), "{r:?}");
    }

    #[test]
    fn missing_tool_degrades() {
        let dir = std::env::temp_dir();
        let r = HealthProbe::new(vec![ContainerType::LocalSandbox], "/nonexistent", &dir).check();
        assert!(!r.healthy());
        assert!(r.backends[0].problem.as_deref().unwrap().contains("bash"));
    }
}
