//! JSON wire codec for job metadata.
//!
//! The document shape is the one embedding pages already use:
//!
//! ```json
//! {
//!   "$type": "ccrs.model.SysJobMetaData",
//!   "shell": ["bash"],
//!   "containerType": { "$type": "ccrs.model.Singularity" },
//!   "containerId": [],
//!   "image": ["vsoch-master-latest.simg"],
//!   "binds": [],
//!   "overlay": [],
//!   "user": "ccrsdemo",
//!   "address": [],
//!   "hostname": [],
//!   "url": []
//! }
//! ```
//!
//! Optional values are zero- or one-element arrays. `$type` values are a
//! namespace, a dot, and a record name; only the record name is significant
//! once the namespace is accepted.

use serde::Serialize;
use serde_json::{Map, Value};

use super::metadata::{ContainerType, JobMetadata, MountSpec, Violation};

pub const DEFAULT_NAMESPACE: &str = "ccrs.model";
/// Namespace used by the original client library, accepted on input.
pub const LEGACY_NAMESPACE: &str = "org.xsede.jobrunner.model.ModelApi";
pub const METADATA_RECORD: &str = "SysJobMetaData";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("unknown $type {0:?}")]
    UnknownType(String),
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {field:?} must be {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
    #[error("optional field {0:?} has more than one element")]
    MalformedOptional(&'static str),
    #[error("metadata violates invariants: {}", join(.0))]
    InvariantViolation(Vec<Violation>),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Encoder/decoder bound to one output namespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireCodec {
    namespace: String,
}

impl Default for WireCodec {
    fn default() -> Self {
        Self::new(DEFAULT_NAMESPACE)
    }
}

#[derive(Serialize)]
struct WireType {
    #[serde(rename = "$type")]
    ty: String,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct WireMetadata<'a> {
    #[serde(rename = "$type")]
    ty: String,
    shell: Opt<'a>,
    container_type: WireType,
    container_id: Opt<'a>,
    image: Opt<'a>,
    binds: &'a [MountSpec],
    overlay: Opt<'a>,
    user: &'a str,
    address: Opt<'a>,
    hostname: Opt<'a>,
    url: Opt<'a>,
}

/// An optional string in its array encoding.
#[derive(Serialize)]
#[serde(transparent)]
struct Opt<'a>(Vec<&'a str>);

impl<'a> From<&'a Option<String>> for Opt<'a> {
    fn from(o: &'a Option<String>) -> Self {
        Opt(o.as_deref().into_iter().collect())
    }
}

impl WireCodec {
    pub fn new(namespace: impl Into<String>) -> Self {
        Self {
            namespace: namespace.into(),
        }
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn type_name(&self, record: &str) -> String {
        format!("{}.{}", self.namespace, record)
    }

    pub fn parse(&self, text: &str) -> Result<JobMetadata, WireError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| WireError::InvalidJson(e.to_string()))?;
        self.from_value(&value)
    }

    /// Decodes an already-parsed JSON value.
    pub fn from_value(&self, value: &Value) -> Result<JobMetadata, WireError> {
        let obj = value.as_object().ok_or(WireError::WrongType {
            field: "$root",
            expected: "an object",
        })?;
        let record = self.record_name(obj, "$type")?;
        if record != METADATA_RECORD {
            return Err(WireError::UnknownType(type_string(obj)));
        }

        let ct = obj
            .get("containerType")
            .ok_or(WireError::MissingField("containerType"))?
            .as_object()
            .ok_or(WireError::WrongType {
                field: "containerType",
                expected: "an object",
            })?;
        let ct_name = self.record_name(ct, "containerType.$type")?;
        let container_type = ContainerType::from_wire_name(ct_name)
            .ok_or_else(|| WireError::UnknownType(type_string(ct)))?;

        let user = match obj.get("user") {
            None => return Err(WireError::MissingField("user")),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                return Err(WireError::WrongType {
                    field: "user",
                    expected: "a string",
                })
            }
        };

        let m = JobMetadata {
            shell: optional(obj, "shell")?,
            container_type,
            container_id: optional(obj, "containerId")?,
            image: optional(obj, "image")?,
            binds: binds(obj)?,
            overlay: optional(obj, "overlay")?,
            user,
            address: optional(obj, "address")?,
            hostname: optional(obj, "hostname")?,
            url: optional(obj, "url")?,
        };
        let violations = m.check_invariants();
        if violations.is_empty() {
            Ok(m)
        } else {
            Err(WireError::InvariantViolation(violations))
        }
    }

    fn wire<'a>(&self, m: &'a JobMetadata) -> WireMetadata<'a> {
        WireMetadata {
            ty: self.type_name(METADATA_RECORD),
            shell: (&m.shell).into(),
            container_type: WireType {
                ty: self.type_name(m.container_type.wire_name()),
            },
            container_id: (&m.container_id).into(),
            image: (&m.image).into(),
            binds: &m.binds,
            overlay: (&m.overlay).into(),
            user: &m.user,
            address: (&m.address).into(),
            hostname: (&m.hostname).into(),
            url: (&m.url).into(),
        }
    }

    pub fn to_value(&self, m: &JobMetadata) -> Value {
        serde_json::to_value(self.wire(m)).expect("metadata always serializes")
    }

    /// Pretty-printed document with keys in the conventional field order.
    pub fn serialize(&self, m: &JobMetadata) -> String {
        serde_json::to_string_pretty(&self.wire(m)).expect("metadata always serializes")
    }

    fn record_name<'v>(
        &self,
        obj: &'v Map<String, Value>,
        field: &'static str,
    ) -> Result<&'v str, WireError> {
        let ty = match obj.get("$type") {
            None => return Err(WireError::MissingField(field)),
            Some(Value::String(s)) => s.as_str(),
            Some(_) => {
                return Err(WireError::WrongType {
                    field,
                    expected: "a string",
                })
            }
        };
        match ty.rsplit_once('.') {
            Some((ns, name)) if ns == self.namespace || ns == LEGACY_NAMESPACE => Ok(name),
            _ => Err(WireError::UnknownType(ty.to_owned())),
        }
    }
}

fn type_string(obj: &Map<String, Value>) -> String {
    obj.get("$type")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_owned()
}

fn optional(obj: &Map<String, Value>, field: &'static str) -> Result<Option<String>, WireError> {
    let wrong = WireError::WrongType {
        field,
        expected: "an array of at most one string",
    };
    match obj.get(field) {
        None => Ok(None),
        // The original client fills `url` with a bare string.
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Array(items)) => match items.as_slice() {
            [] => Ok(None),
            [Value::String(s)] => Ok(Some(s.clone())),
            [_] => Err(wrong),
            _ => Err(WireError::MalformedOptional(field)),
        },
        Some(_) => Err(wrong),
    }
}

fn binds(obj: &Map<String, Value>) -> Result<Vec<MountSpec>, WireError> {
    match obj.get("binds") {
        None => Ok(Vec::new()),
        Some(v @ Value::Array(_)) => {
            serde_json::from_value(v.clone()).map_err(|_| WireError::WrongType {
                field: "binds",
                expected: "an array of {hostPath, containerPath, readOnly} objects",
            })
        }
        Some(_) => Err(WireError::WrongType {
            field: "binds",
            expected: "an array",
        }),
    }
}

/// Decodes with the default namespace.
pub fn parse_metadata(text: &str) -> Result<JobMetadata, WireError> {
    WireCodec::default().parse(text)
}

/// Encodes with the default namespace.
pub fn serialize_metadata(m: &JobMetadata) -> String {
    WireCodec::default().serialize(m)
}
