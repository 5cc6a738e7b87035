//! Domain types shared by every other module.

mod event;
mod job_id;
mod metadata;
pub mod wire;

pub use event::{EventBody, EventKind, JobEvent, KILLED_EXIT_CODE, KILLED_NOTICE_PREFIX};
pub use job_id::{make_job_id, InvalidJobId, JobId, JOB_ID_LEN};
pub use metadata::{
    is_valid_login, validate_metadata, ContainerType, JobMetadata, MountSpec, ServerPolicy,
    Violation, MAX_USER_LEN,
};
pub use wire::{parse_metadata, serialize_metadata, WireCodec, WireError};
