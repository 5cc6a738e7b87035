use std::path::Path;

use sha2::{Digest, Sha256};

use super::{
    base_env, bind_arg, context_mount, BackendConfig, BackendError, ContainerBackend,
    ContainerEntry, PrepareCtx, PreparedEnvironment, SiteScope, Usage, CONTEXT_MOUNT_POINT,
};
use crate::executor::CommandSpec;
use crate::model::{ContainerType, JobMetadata};
use crate::sites::host_user_name;

/// One long-lived container per container specification; every job for that
/// specification runs inside it as a per-user account.
///
/// The container is expected to see the spool root at its host path, so the
/// per-job `BindPaths=` property can remap the job's context to `/work`
/// inside the transient unit's own mount namespace.
#[derive(Debug, Clone, Default)]
pub struct SharedContainerBackend {
    config: BackendConfig,
}

impl SharedContainerBackend {
    pub fn new(config: BackendConfig) -> Self {
        Self { config }
    }
}

/// Machine name for a container specification.
pub fn machine_name(spec: &str) -> String {
    let digest = Sha256::digest(spec.as_bytes());
    format!("ccrs-{}", &hex::encode(digest)[..12])
}

fn container_spec(m: &JobMetadata) -> Option<String> {
    m.image.clone().or_else(|| m.container_id.clone())
}

impl ContainerBackend for SharedContainerBackend {
    fn kind(&self) -> ContainerType {
        ContainerType::SharedContainer
    }

    fn prepare(
        &self,
        m: &JobMetadata,
        scope: &SiteScope,
        context: &Path,
        ctx: PrepareCtx<'_>,
    ) -> Result<PreparedEnvironment, BackendError> {
        let spec = container_spec(m)
            .ok_or_else(|| BackendError::ContainerStartFailed("no container spec".into()))?;
        let account = host_user_name(&scope.user_prefix, &m.user);

        let handle = match ctx.accounting.containers.get(&spec) {
            Some(c) => c.handle.clone(),
            None => {
                let handle = machine_name(&spec);
                ctx.provisioner
                    .start_container(&spec, &handle)
                    .map_err(BackendError::ContainerStartFailed)?;
                ctx.accounting.containers.insert(
                    spec.clone(),
                    ContainerEntry {
                        handle: handle.clone(),
                        usage: Usage::default(),
                        accounts: Default::default(),
                    },
                );
                handle
            }
        };
        let entry = ctx
            .accounting
            .containers
            .get_mut(&spec)
            .expect("inserted above");
        if !entry.accounts.contains(&account) {
            ctx.provisioner
                .create_container_user(&handle, &account)
                .map_err(BackendError::UserProvisionFailed)?;
            entry.accounts.insert(account.clone());
        }
        ctx.accounting.touch_container(&spec, ctx.now);

        Ok(PreparedEnvironment {
            backend_kind: ContainerType::SharedContainer,
            site_id: scope.site_id.clone(),
            host_user: Some(account),
            container_handle: Some(handle),
            context_mount: context_mount(context),
            image_ref: Some(spec),
        })
    }

    fn build_command(
        &self,
        env: &PreparedEnvironment,
        m: &JobMetadata,
        user_command: &str,
    ) -> Result<CommandSpec, BackendError> {
        let handle = env
            .container_handle
            .clone()
            .ok_or_else(|| BackendError::ContainerStartFailed("container not prepared".into()))?;
        let user = env
            .host_user
            .clone()
            .ok_or_else(|| BackendError::UserProvisionFailed("account not prepared".into()))?;
        let mut argv: Vec<String> = vec![
            "systemd-run".into(),
            "--wait".into(),
            "--pipe".into(),
            "--machine".into(),
            handle,
            "--uid".into(),
            user,
            "--property".into(),
            format!(
                "BindPaths={}",
                bind_arg(env.context_path(), Path::new(CONTEXT_MOUNT_POINT), false)
            ),
        ];
        for b in &m.binds {
            let prop = if b.read_only {
                "BindReadOnlyPaths"
            } else {
                "BindPaths"
            };
            argv.push("--property".into());
            argv.push(format!(
                "{prop}={}",
                bind_arg(&b.host_path, &b.container_path, false)
            ));
        }
        argv.extend([
            "--property".into(),
            format!("WorkingDirectory={CONTEXT_MOUNT_POINT}"),
            m.shell_or_default().to_owned(),
            "-c".into(),
            user_command.to_owned(),
        ]);
        let mut spec = CommandSpec::new(argv, env.context_path());
        spec.env = base_env(&self.config);
        Ok(spec)
    }
}
