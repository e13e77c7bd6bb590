use dexrefine::handmodel::HandTrajectory;
use dexrefine::refiner::{refine_sequence_indexed, RefinementTrace};
use dexrefine::{io, Error, NeighborIndex};
use rayon::prelude::*;
use serde_json::{json, Value};

use super::{jsonl, paths_json, read_chain, read_cloud, read_matching_poses, read_sequences, tagged, Outputs};
use crate::config::{required, RunConfig};
use crate::error::CliResult;

fn trace_lines(traces: &[(usize, &RefinementTrace)]) -> String {
    jsonl(traces.iter().flat_map(|(s, t)| {
        t.frames.iter().map(move |f| {
            tagged(
                f,
                &[
                    ("sequence", json!(s)),
                    ("max_abs_distance", json!(f.max_abs_distance())),
                ],
            )
        })
    }))
}

pub fn run(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let s = &config.refine;
    let chain = read_chain(required(&s.model, "refine.model")?)?;
    let traj_path = required(&s.trajectory, "refine.trajectory")?;
    let seqs = read_sequences(traj_path, Some(&chain))?;
    let poses = read_matching_poses(required(&s.poses, "refine.poses")?, &seqs)?;
    let cloud = read_cloud(required(&s.cloud, "refine.cloud")?, s.k_neighbors)?;
    let refinement = s.refinement();
    s.weights.resolve(chain.dof())?;
    let frames: usize = seqs.iter().map(HandTrajectory::len).sum();
    if dry_run {
        return Ok(json!({
            "command": "refine",
            "dry_run": true,
            "sequences": seqs.len(),
            "frames": frames,
            "dof": chain.dof(),
            "cloud_points": cloud.len(),
        }));
    }

    let index = NeighborIndex::build(&cloud)?;
    let results: Vec<_> = seqs
        .par_iter()
        .zip(&poses)
        .map(|(g, p)| refine_sequence_indexed(g, &index, p, &chain, &refinement))
        .collect();

    let mut out = Outputs::new(config, "refine");
    let mut refined = Vec::with_capacity(seqs.len());
    let mut traces = Vec::with_capacity(seqs.len());
    let mut failure = None;
    for r in results {
        match r {
            Ok((q, t)) => {
                refined.push(q);
                traces.push(t);
            }
            Err(Error::FrameFailed { frame, source, partial }) => {
                traces.push(*partial);
                failure = Some((traces.len() - 1, Error::FrameFailed {
                    frame,
                    source,
                    partial: Box::default(),
                }));
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let indexed: Vec<(usize, &RefinementTrace)> = traces.iter().enumerate().collect();
    out.add("refine_trace.jsonl", trace_lines(&indexed));
    if let Some((seq, e)) = failure {
        out.write()?;
        eprintln!("sequence {seq} failed; partial trace written");
        return Err(e.into());
    }
    out.add("refined.qpos", io::format_qpos(&refined));
    let written = out.write()?;

    let max_abs = traces.iter().fold(0.0f64, |m, t| m.max(t.max_abs_distance()));
    let max_iters = traces
        .iter()
        .flat_map(|t| t.frames.iter().map(|f| f.iterations.len()))
        .max()
        .unwrap_or(0);
    Ok(json!({
        "command": "refine",
        "sequences": refined.len(),
        "frames": frames,
        "max_abs_distance": max_abs,
        "max_inner_iterations": max_iters,
        "outputs": paths_json(&written),
    }))
}
