use dexrefine::io;
use dexrefine::pointcloud::estimate_normals;
use nalgebra::Vector3;
use serde_json::{json, Value};

use super::{in_file, paths_json, Outputs};
use crate::config::{required, RunConfig};
use crate::error::CliResult;

/// Estimates normals oriented away from the cloud centroid and writes them
/// with the points as PLY. Stored normals in the input are ignored.
pub fn run(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let s = &config.normals;
    let path = required(&s.input, "normals.input")?;
    let raw = io::read_cloud(path)?;
    if raw.points.is_empty() {
        return Err(in_file(path, dexrefine::Error::EmptyCloud).into());
    }
    if dry_run {
        return Ok(json!({"command": "normals", "dry_run": true, "points": raw.points.len()}));
    }
    let centroid = raw.points.iter().sum::<Vector3<f64>>() / raw.points.len() as f64;
    let est = estimate_normals(&raw.points, s.k_neighbors, &centroid).map_err(|e| in_file(path, e))?;
    let mut out = Outputs::new(config, "normals");
    out.add("normals.ply", io::format_ply(&raw.points, Some(&est.normals)));
    let written = out.write()?;
    Ok(json!({
        "command": "normals",
        "points": raw.points.len(),
        "degenerate": est.degenerate.iter().filter(|d| **d).count(),
        "outputs": paths_json(&written),
    }))
}
