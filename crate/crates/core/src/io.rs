//! Versioned JSON files.
//!
//! Every file is a JSON object carrying `"schema": 1` next to its payload
//! fields. Parse errors name the file and the offending field path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::cluster::{ClusterSpec, WorkloadSpec};
use crate::comm::CommConfig;
use crate::plan::ParallelPlan;
use crate::profile::ProfileTable;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: at `{field}`: {msg}")]
    Parse {
        path: PathBuf,
        field: String,
        msg: String,
    },
    #[error("{path}: unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Schema { path: PathBuf, found: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

impl FileError {
    pub fn path(&self) -> &Path {
        match self {
            FileError::Read { path, .. }
            | FileError::Write { path, .. }
            | FileError::Parse { path, .. }
            | FileError::Schema { path, .. }
            | FileError::Invalid { path, .. } => path,
        }
    }
}

/// Parses a versioned document.
pub fn from_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, FileError> {
    let parse = |field: String, msg: String| FileError::Parse {
        path: path.to_path_buf(),
        field,
        msg,
    };
    let value: Value = serde_json::from_str(text).map_err(|e| parse(".".into(), e.to_string()))?;
    let Value::Object(mut map) = value else {
        return Err(parse(".".into(), "expected a JSON object".into()));
    };
    match map.remove("schema") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(FileError::Schema {
                path: path.to_path_buf(),
                found: v.to_string(),
            })
        }
        None => return Err(parse("schema".into(), "missing field".into())),
    }
    serde_path_to_error::deserialize(Value::Object(map))
        .map_err(|e| parse(e.path().to_string(), e.inner().to_string()))
}

/// Serializes with the schema marker; object keys are sorted, so output is
/// byte-stable.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut map = Map::new();
    map.insert("schema".into(), Value::from(SCHEMA_VERSION));
    match serde_json::to_value(value).expect("plain data serializes") {
        Value::Object(fields) => map.extend(fields),
        other => {
            map.insert("value".into(), other);
        }
    }
    serde_json::to_string_pretty(&Value::Object(map)).expect("plain data serializes") + "\n"
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, FileError> {
    let text = fs::read_to_string(path).map_err(|source| FileError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    from_json(&text, path)
}

pub fn save<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    fs::write(path, to_json(value)).map_err(|source| FileError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> FileError {
    FileError::Invalid {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Loads and validates a cluster; chip types come back in pipeline order.
pub fn load_cluster(path: &Path) -> Result<ClusterSpec, FileError> {
    load::<ClusterSpec>(path)?.validate().map_err(|e| invalid(path, e))
}

pub fn load_workload(path: &Path) -> Result<WorkloadSpec, FileError> {
    load::<WorkloadSpec>(path)?.validate().map_err(|e| invalid(path, e))
}

/// Loads a profile, checking it against `cluster` when given.
pub fn load_profile(path: &Path, cluster: Option<&ClusterSpec>) -> Result<ProfileTable, FileError> {
    let profile: ProfileTable = load(path)?;
    profile.validate(cluster).map_err(|e| invalid(path, e))?;
    Ok(profile)
}

pub fn load_plan(path: &Path) -> Result<ParallelPlan, FileError> {
    load(path)
}

pub fn load_comm(path: &Path) -> Result<CommConfig, FileError> {
    let c: CommConfig = load(path)?;
    c.validate().map_err(|e| invalid(path, e))?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn cluster_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cluster.json");
        let (cluster, profile) = presets::three_type_cluster();
        save(&path, &cluster).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"schema\": 1"));
        assert_eq!(load_cluster(&path).unwrap(), cluster);

        let ppath = dir.path().join("profile.json");
        save(&ppath, &profile).unwrap();
        assert_eq!(load_profile(&ppath, Some(&cluster)).unwrap(), profile);
    }

    #[test]
    fn errors_name_file_and_field() {
        let p = Path::new("w.json");
        let e = from_json::<WorkloadSpec>(r#"{"schema": 1, "total_layers": "x", "global_batch": 4}"#, p)
            .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("w.json") && msg.contains("total_layers"), "{msg}");
        let e = from_json::<WorkloadSpec>(r#"{"schema": 2, "total_layers": 4, "global_batch": 4}"#, p)
            .unwrap_err();
        assert!(matches!(e, FileError::Schema { .. }));
        let e = from_json::<WorkloadSpec>(r#"{"total_layers": 4, "global_batch": 4}"#, p).unwrap_err();
        assert!(e.to_string().contains("schema"));
        let e = from_json::<ClusterSpec>(
            r#"{"schema": 1, "chip_types": [{"name": "A", "count": "many"}]}"#,
            p,
        )
        .unwrap_err();
        assert!(e.to_string().contains("chip_types[0].count"), "{e}");
    }

    #[test]
    fn output_is_stable() {
        let (cluster, _) = presets::four_type_cluster();
        assert_eq!(to_json(&cluster), to_json(&cluster.clone()));
    }
}
