use std::path::Path;

use super::{
    base_env, context_mount, BackendConfig, BackendError, ContainerBackend, PrepareCtx,
    PreparedEnvironment, SiteScope,
};
use crate::executor::CommandSpec;
use crate::model::{ContainerType, JobMetadata};

/// Runs the shell directly on the host with the job context as working
/// directory and a scrubbed environment. Isolation comes only from the
/// executor's limits.
#[derive(Debug, Clone, Default)]
pub struct LocalSandboxBackend {
    config: BackendConfig,
}

impl LocalSandboxBackend {
    pub fn new(config: BackendConfig) -> Self {
        Self { config }
    }
}

impl ContainerBackend for LocalSandboxBackend {
    fn kind(&self) -> ContainerType {
        ContainerType::LocalSandbox
    }

    fn prepare(
        &self,
        _m: &JobMetadata,
        scope: &SiteScope,
        context: &Path,
        _ctx: PrepareCtx<'_>,
    ) -> Result<PreparedEnvironment, BackendError> {
        Ok(PreparedEnvironment {
            backend_kind: ContainerType::LocalSandbox,
            site_id: scope.site_id.clone(),
            host_user: None,
            container_handle: None,
            context_mount: context_mount(context),
            image_ref: None,
        })
    }

    fn build_command(
        &self,
        env: &PreparedEnvironment,
        m: &JobMetadata,
        user_command: &str,
    ) -> Result<CommandSpec, BackendError> {
        let argv = vec![
            m.shell_or_default().to_owned(),
            "-c".to_owned(),
            user_command.to_owned(),
        ];
        let mut spec = CommandSpec::new(argv, env.context_path());
        spec.env = base_env(&self.config);
        spec.env
            .insert("HOME".into(), env.context_path().display().to_string());
        Ok(spec)
    }
}
