use std::path::Path;

use super::{
    base_env, bind_arg, context_mount, BackendConfig, BackendError, ContainerBackend, HostUserKey,
    PrepareCtx, PreparedEnvironment, SiteScope, CONTEXT_MOUNT_POINT,
};
use crate::executor::CommandSpec;
use crate::model::{ContainerType, JobMetadata};
use crate::sites::host_user_name;

/// One container per job, instantiated from an image with full isolation
/// (`singularity exec --containall`) and run as a site-scoped host user.
#[derive(Debug, Clone, Default)]
pub struct ImagePerJobBackend {
    config: BackendConfig,
}

impl ImagePerJobBackend {
    pub fn new(config: BackendConfig) -> Self {
        Self { config }
    }
}

impl ContainerBackend for ImagePerJobBackend {
    fn kind(&self) -> ContainerType {
        ContainerType::ImagePerJob
    }

    fn prepare(
        &self,
        m: &JobMetadata,
        scope: &SiteScope,
        context: &Path,
        ctx: PrepareCtx<'_>,
    ) -> Result<PreparedEnvironment, BackendError> {
        let image = m
            .image
            .clone()
            .ok_or_else(|| BackendError::ImageMissing("<none>".into()))?;
        if !ctx.provisioner.image_available(&image) {
            return Err(BackendError::ImageMissing(image));
        }
        let name = host_user_name(&scope.user_prefix, &m.user);
        let key = HostUserKey {
            site: scope.site_id.clone(),
            name: name.clone(),
        };
        if !ctx.accounting.has_user(&key.site, &key.name) {
            ctx.provisioner
                .create_host_user(&name)
                .map_err(BackendError::UserProvisionFailed)?;
        }
        ctx.accounting.touch_user(key, ctx.now);

        Ok(PreparedEnvironment {
            backend_kind: ContainerType::ImagePerJob,
            site_id: scope.site_id.clone(),
            host_user: Some(name),
            container_handle: None,
            context_mount: context_mount(context),
            image_ref: Some(image),
        })
    }

    fn build_command(
        &self,
        env: &PreparedEnvironment,
        m: &JobMetadata,
        user_command: &str,
    ) -> Result<CommandSpec, BackendError> {
        let image = env
            .image_ref
            .clone()
            .ok_or_else(|| BackendError::ImageMissing("<none>".into()))?;
        let mut argv: Vec<String> = ["singularity", "exec", "--containall", "--bind"]
            .map(String::from)
            .into();
        argv.push(bind_arg(
            env.context_path(),
            Path::new(CONTEXT_MOUNT_POINT),
            false,
        ));
        for b in &m.binds {
            argv.push("--bind".into());
            argv.push(bind_arg(&b.host_path, &b.container_path, b.read_only));
        }
        if let Some(overlay) = &m.overlay {
            argv.push("--overlay".into());
            argv.push(overlay.clone());
        }
        argv.push(image);
        argv.push(m.shell_or_default().to_owned());
        argv.push("-c".into());
        argv.push(user_command.to_owned());

        let mut spec = CommandSpec::new(argv, env.context_path());
        spec.env = base_env(&self.config);
        spec.run_as = env.host_user.clone();
        Ok(spec)
    }
}
