use dexrefine::refiner::{noise_study, CanonicalGrasp};
use dexrefine::{io, Error};
use serde_json::{json, Value};

use super::{in_file, jsonl, paths_json, read_chain, read_cloud, read_sequences, tagged, Outputs};
use crate::config::{required, RunConfig};
use crate::error::CliResult;

pub fn run(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let s = &config.noise_study;
    let chain = read_chain(required(&s.model, "noise_study.model")?)?;
    let traj_path = required(&s.trajectory, "noise_study.trajectory")?;
    let q_gen = read_sequences(traj_path, Some(&chain))?
        .first()
        .map(|t| t.frames()[0].clone())
        .ok_or_else(|| {
            in_file(
                traj_path,
                Error::Invalid {
                    field: "trajectory".into(),
                    message: "file holds no sequence".into(),
                },
            )
        })?;
    let pose_path = required(&s.poses, "noise_study.poses")?;
    let t_tar = io::read_poses(pose_path)?
        .first()
        .and_then(|p| p.get(0).copied())
        .ok_or_else(|| {
            in_file(
                pose_path,
                Error::Invalid {
                    field: "poses".into(),
                    message: "file holds no pose".into(),
                },
            )
        })?;
    let cloud = read_cloud(required(&s.cloud, "noise_study.cloud")?, config.refine.k_neighbors)?;
    let mut refinement = config.refine.refinement();
    refinement.solver.max_inner_iters = s.max_inner_iters;
    refinement.weights.resolve(chain.dof())?;
    if dry_run {
        return Ok(json!({
            "command": "noise-study",
            "dry_run": true,
            "rows": s.sigma.len() * s.seeds * 2,
            "cloud_points": cloud.len(),
        }));
    }

    let grasp = CanonicalGrasp { q_gen, t_tar };
    let report = noise_study(&cloud, &grasp, &s.sigma, s.seeds, &chain, &refinement, config.seed)?;
    let lines = jsonl(
        report
            .rows
            .iter()
            .map(|r| tagged(r, &[("record", json!("row"))]))
            .chain(report.summary.iter().map(|r| tagged(r, &[("record", json!("summary"))]))),
    );
    let mut out = Outputs::new(config, "noise-study");
    out.add("noise_study.jsonl", lines);
    let written = out.write()?;
    Ok(json!({
        "command": "noise-study",
        "rows": report.rows.len(),
        "summary": report.summary,
        "outputs": paths_json(&written),
    }))
}
