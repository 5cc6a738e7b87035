//! Host-side provisioning used by the container backends.

use std::collections::HashSet;
use std::sync::Mutex;

/// Creates and removes the external state backends depend on: host accounts
/// for image-per-job runs, long-lived containers and the accounts inside them.
pub trait Provisioner: Send + Sync {
    fn image_available(&self, image: &str) -> bool;
    fn create_host_user(&self, name: &str) -> Result<(), String>;
    fn remove_host_user(&self, name: &str) -> Result<(), String>;
    fn start_container(&self, spec: &str, handle: &str) -> Result<(), String>;
    fn stop_container(&self, handle: &str) -> Result<(), String>;
    fn create_container_user(&self, handle: &str, user: &str) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProvisionCall {
    CreateHostUser(String),
    RemoveHostUser(String),
    StartContainer { spec: String, handle: String },
    StopContainer(String),
    CreateContainerUser { handle: String, user: String },
}

/// In-memory provisioner that records every call. Used in tests and when no
/// live adapter is compiled in.
#[derive(Debug, Default)]
pub struct RecordingProvisioner {
    calls: Mutex<Vec<ProvisionCall>>,
    missing_images: Mutex<HashSet<String>>,
    failing: Mutex<bool>,
}

impl RecordingProvisioner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> Vec<ProvisionCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn mark_image_missing(&self, image: &str) {
        self.missing_images.lock().unwrap().insert(image.to_owned());
    }

    /// Makes every mutating call fail (without recording it) until reset.
    pub fn set_failing(&self, failing: bool) {
        *self.failing.lock().unwrap() = failing;
    }

    fn record(&self, call: ProvisionCall) -> Result<(), String> {
        if *self.failing.lock().unwrap() {
            return Err(format!("injected failure: {call:?}"));
        }
        self.calls.lock().unwrap().push(call);
        Ok(())
    }
}

impl Provisioner for RecordingProvisioner {
    fn image_available(&self, image: &str) -> bool {
        !self.missing_images.lock().unwrap().contains(image)
    }

    fn create_host_user(&self, name: &str) -> Result<(), String> {
        self.record(ProvisionCall::CreateHostUser(name.to_owned()))
    }

    fn remove_host_user(&self, name: &str) -> Result<(), String> {
        self.record(ProvisionCall::RemoveHostUser(name.to_owned()))
    }

    fn start_container(&self, spec: &str, handle: &str) -> Result<(), String> {
        self.record(ProvisionCall::StartContainer {
            spec: spec.to_owned(),
            handle: handle.to_owned(),
        })
    }

    fn stop_container(&self, handle: &str) -> Result<(), String> {
        self.record(ProvisionCall::StopContainer(handle.to_owned()))
    }

    fn create_container_user(&self, handle: &str, user: &str) -> Result<(), String> {
        self.record(ProvisionCall::CreateContainerUser {
            handle: handle.to_owned(),
            user: user.to_owned(),
        })
    }
}

#[cfg(feature = "live")]
pub use live::HostProvisioner;

#[cfg(feature = "live")]
mod live {
    use std::path::{Path, PathBuf};
    use std::process::Command;

    use super::Provisioner;

    /// Provisioner that shells out to the host's account and machine tools.
    /// Requires root.
    ///
    /// Shared containers are booted with `systemd-nspawn` from
    /// `container_root/<spec>` with the spool root bound at the same path, so
    /// per-job `BindPaths=` properties resolve inside the machine.
    #[derive(Debug, Clone)]
    pub struct HostProvisioner {
        pub image_dir: PathBuf,
        pub container_root: PathBuf,
        pub spool_root: PathBuf,
    }

    fn run(program: &str, args: &[&str]) -> Result<(), String> {
        let out = Command::new(program)
            .args(args)
            .output()
            .map_err(|e| format!("{program}: {e}"))?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "{program} {}: {}",
                args.join(" "),
                String::from_utf8_lossy(&out.stderr).trim()
            ))
        }
    }

    impl Provisioner for HostProvisioner {
        fn image_available(&self, image: &str) -> bool {
            let p = Path::new(image);
            if p.is_absolute() {
                p.is_file()
            } else {
                self.image_dir.join(p).is_file()
            }
        }

        fn create_host_user(&self, name: &str) -> Result<(), String> {
            if Command::new("id")
                .arg(name)
                .output()
                .is_ok_and(|o| o.status.success())
            {
                return Ok(());
            }
            run(
                "useradd",
                &["--no-create-home", "--shell", "/usr/sbin/nologin", name],
            )
        }

        fn remove_host_user(&self, name: &str) -> Result<(), String> {
            run("userdel", &[name])
        }

        fn start_container(&self, spec: &str, handle: &str) -> Result<(), String> {
            let root = self.container_root.join(spec);
            let spool = self.spool_root.display().to_string();
            run(
                "systemd-run",
                &[
                    &format!("--unit=ccrs-machine-{handle}"),
                    "systemd-nspawn",
                    "--quiet",
                    "--boot",
                    &format!("--machine={handle}"),
                    &format!("--directory={}", root.display()),
                    &format!("--bind={spool}"),
                ],
            )
        }

        fn stop_container(&self, handle: &str) -> Result<(), String> {
            run("machinectl", &["poweroff", handle])
        }

        fn create_container_user(&self, handle: &str, user: &str) -> Result<(), String> {
            run(
                "systemd-run",
                &[
                    "--wait", "--pipe", "--machine", handle, "useradd", "--create-home", user,
                ],
            )
        }
    }
}
