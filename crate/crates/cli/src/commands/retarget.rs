use dexrefine::handmodel::{HandConfiguration, HandTrajectory};
use dexrefine::retarget::{align_targets, keypoints_from_configuration, retarget_frame_detailed, RetargetSpec};
use dexrefine::{io, Error};
use serde_json::{json, Value};

use super::{in_file, jsonl, paths_json, read_chain, read_sequences, Outputs};
use crate::config::{required, RunConfig};
use crate::error::CliResult;

pub fn run(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let s = &config.retarget;
    let chain = read_chain(required(&s.model, "retarget.model")?)?;
    let kp_path = required(&s.keypoints, "retarget.keypoints")?;
    let keypoints = io::read_keypoints(kp_path)?;
    let spec_path = required(&s.spec, "retarget.spec")?;
    let mut spec: RetargetSpec = toml::from_str(&io::read_text(spec_path)?).map_err(|e| Error::Parse {
        context: spec_path.display().to_string(),
        message: e.to_string(),
    })?;
    if let Some(l) = s.lambda_smooth {
        spec.lambda_smooth = l;
    }
    spec.validate(&chain).map_err(|e| in_file(spec_path, e))?;
    if let Some(c) = spec.correspondences.iter().find(|c| c.keypoint >= keypoints.names.len()) {
        return Err(in_file(
            kp_path,
            Error::OutOfRange {
                index: c.keypoint,
                len: keypoints.names.len(),
            },
        )
        .into());
    }
    let q_init = match &s.q_init {
        Some(p) => read_sequences(p, Some(&chain))?
            .first()
            .map(|t| t.frames()[0].clone())
            .ok_or_else(|| in_file(p, Error::Invalid {
                field: "q_init".into(),
                message: "file holds no sequence".into(),
            }))?,
        None => chain.clamp_to_limits(&HandConfiguration::zeros(chain.dof()))?,
    };
    if dry_run {
        return Ok(json!({
            "command": "retarget",
            "dry_run": true,
            "frames": keypoints.frames.len(),
            "correspondences": spec.correspondences.len(),
            "dof": chain.dof(),
        }));
    }

    let mut prev = q_init;
    let mut frames = Vec::with_capacity(keypoints.frames.len());
    let mut records = Vec::with_capacity(keypoints.frames.len());
    let mut worst = 0.0f64;
    for (t, frame) in keypoints.frames.iter().enumerate() {
        let targets = align_targets(frame, &spec)?;
        let outcome = retarget_frame_detailed(&targets, &prev, &chain, &spec, &s.solver)?;
        let reached = keypoints_from_configuration(&chain, &spec, &outcome.q)?;
        let err = reached.iter().zip(&targets).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        worst = worst.max(err);
        records.push(json!({
            "frame": t,
            "initial_energy": outcome.initial_energy,
            "final_energy": outcome.final_energy,
            "iterations": outcome.iterations.len(),
            "termination": outcome.termination,
            "max_keypoint_error": err,
        }));
        prev = outcome.q.clone();
        frames.push(outcome.q);
    }
    let traj = HandTrajectory::new(frames)?;

    let mut out = Outputs::new(config, "retarget");
    out.add("retargeted.qpos", io::format_qpos(&[traj]));
    out.add("retarget_trace.jsonl", jsonl(records));
    let written = out.write()?;
    Ok(json!({
        "command": "retarget",
        "frames": keypoints.frames.len(),
        "max_keypoint_error": worst,
        "outputs": paths_json(&written),
    }))
}
