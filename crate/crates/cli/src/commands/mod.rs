pub mod fixtures;
pub mod metrics;
pub mod noise;
pub mod normals;
pub mod refine;
pub mod retarget;
pub mod vq;

use std::path::{Path, PathBuf};

use dexrefine::handmodel::{load_chain, HandTrajectory};
use dexrefine::{io, Error, KinematicChain, OrientedPointCloud, TargetPoseTrajectory};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::CliResult;

/// One JSON document per line.
pub fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Adds `key: value` to a JSON object.
pub fn tagged(record: impl Serialize, fields: &[(&str, Value)]) -> Value {
    let mut v = serde_json::to_value(record).expect("record serializes");
    if let Value::Object(map) = &mut v {
        for (k, val) in fields {
            map.insert(k.to_string(), val.clone());
        }
    }
    v
}

/// Collects a command's output files and writes them together.
pub struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<(String, String)>,
}

impl<'a> Outputs<'a> {
    pub fn new(config: &'a RunConfig, command: &str) -> Self {
        Self {
            dir: &config.out_dir,
            files: vec![(format!("{command}.config.toml"), config.to_toml())],
        }
    }

    pub fn add(&mut self, name: &str, text: String) {
        self.files.push((name.to_string(), text));
    }

    pub fn write(self) -> CliResult<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (name, text) in self.files {
            let path = self.dir.join(name);
            io::write_text(&path, &text)?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn read_chain(path: &Path) -> CliResult<KinematicChain> {
    Ok(load_chain(path)?)
}

/// Reads a cloud, estimating normals with `k` neighbors when absent.
pub fn read_cloud(path: &Path, k: usize) -> CliResult<OrientedPointCloud> {
    let raw = io::read_cloud(path)?;
    let cloud = match raw.normals {
        Some(n) => OrientedPointCloud::new(raw.points, n),
        None => OrientedPointCloud::with_estimated_normals(raw.points, k),
    };
    Ok(cloud.map_err(|e| in_file(path, e))?)
}

/// Sequences checked against `chain`.
pub fn read_sequences(path: &Path, chain: Option<&KinematicChain>) -> CliResult<Vec<HandTrajectory>> {
    let seqs = io::read_qpos(path)?;
    if let Some(chain) = chain {
        for s in &seqs {
            s.check_chain(chain).map_err(|e| in_file(path, e))?;
        }
    }
    Ok(seqs)
}

/// Pose blocks, one per sequence and of matching length.
pub fn read_matching_poses(path: &Path, seqs: &[HandTrajectory]) -> CliResult<Vec<TargetPoseTrajectory>> {
    let poses = io::read_poses(path)?;
    if poses.len() != seqs.len() {
        return Err(in_file(
            path,
            Error::Dimension {
                what: "pose blocks",
                expected: seqs.len(),
                actual: poses.len(),
            },
        )
        .into());
    }
    for (p, s) in poses.iter().zip(seqs) {
        if p.len() != s.len() {
            return Err(in_file(
                path,
                Error::Dimension {
                    what: "pose frames",
                    expected: s.len(),
                    actual: p.len(),
                },
            )
            .into());
        }
    }
    Ok(poses)
}

/// Prefixes an error with the file it concerns.
pub fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Io { .. } | Error::Parse { .. } => e,
        other if other.is_numerical() => other,
        other => Error::Parse {
            context: path.display().to_string(),
            message: other.to_string(),
        },
    }
}

pub fn paths_json(paths: &[PathBuf]) -> Value {
    Value::Array(paths.iter().map(|p| Value::String(p.display().to_string())).collect())
}
