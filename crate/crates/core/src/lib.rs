//! Core of the container runner service: job metadata and its wire codec,
//! supervised execution, container backends, the job lifecycle, site
//! authentication and the audit trail.

pub mod audit;
pub mod backends;
pub mod clock;
pub mod events;
pub mod executor;
pub mod jobs;
pub mod model;
pub mod sites;
