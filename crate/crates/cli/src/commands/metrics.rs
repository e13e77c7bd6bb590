use std::path::Path;

use dexrefine::codebook::CodebookArchive;
use dexrefine::handmodel::HandTrajectory;
use dexrefine::metrics::{
    diversity, extract_features, fid, final_palm_pose, fol, fpl, mpjpe, FeatureSet, JointTrajectory, MetricSummary,
};
use dexrefine::{Error, KinematicChain, TargetPoseTrajectory};
use rayon::prelude::*;
use serde_json::{json, Value};

use super::{in_file, jsonl, paths_json, read_chain, read_matching_poses, read_sequences, tagged, Outputs};
use crate::config::{required, RunConfig};
use crate::error::CliResult;

fn roots(path: Option<&Path>, seqs: &[HandTrajectory]) -> CliResult<Option<Vec<TargetPoseTrajectory>>> {
    path.map(|p| read_matching_poses(p, seqs)).transpose()
}

struct SequenceScores {
    mpjpe_mm: f64,
    fpl_mm: f64,
    fol_deg: f64,
}

fn score(
    chain: &KinematicChain,
    pred: &HandTrajectory,
    gt: &HandTrajectory,
    pred_root: Option<&TargetPoseTrajectory>,
    gt_root: Option<&TargetPoseTrajectory>,
) -> dexrefine::Result<SequenceScores> {
    let pj = JointTrajectory::from_configurations(chain, pred, pred_root)?;
    let gj = JointTrajectory::from_configurations(chain, gt, gt_root)?;
    let pp = final_palm_pose(chain, pred, pred_root)?;
    let gp = final_palm_pose(chain, gt, gt_root)?;
    Ok(SequenceScores {
        mpjpe_mm: mpjpe(&pj, &gj)?,
        fpl_mm: fpl(pp.translation(), gp.translation()),
        fol_deg: fol(pp.rotation(), gp.rotation())?,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

pub fn run(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let m = &config.metrics;
    let chain = read_chain(required(&m.model, "metrics.model")?)?;
    let pred_path = required(&m.pred, "metrics.pred")?;
    let gt_path = required(&m.gt, "metrics.gt")?;
    let pred = read_sequences(pred_path, Some(&chain))?;
    let gt = read_sequences(gt_path, Some(&chain))?;
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(in_file(
            pred_path,
            Error::Dimension {
                what: "sequences",
                expected: gt.len(),
                actual: pred.len(),
            },
        )
        .into());
    }
    let pred_roots = roots(m.pred_roots.as_deref(), &pred)?;
    let gt_roots = roots(m.gt_roots.as_deref(), &gt)?;
    let archive = m.archive.as_deref().map(CodebookArchive::load).transpose()?;
    let nets = archive.as_ref().map(|a| a.morphology(&m.morphology)).transpose()?;
    if dry_run {
        return Ok(json!({"command": "metrics", "dry_run": true, "sequences": pred.len(), "features": nets.is_some()}));
    }

    let scores = (0..pred.len())
        .into_par_iter()
        .map(|i| {
            score(
                &chain,
                &pred[i],
                &gt[i],
                pred_roots.as_ref().map(|r| &r[i]),
                gt_roots.as_ref().map(|r| &r[i]),
            )
        })
        .collect::<dexrefine::Result<Vec<_>>>()?;

    let mut summary = MetricSummary {
        sequences: pred.len(),
        mpjpe_mm: mean(scores.iter().map(|s| s.mpjpe_mm)),
        fpl_mm: mean(scores.iter().map(|s| s.fpl_mm)),
        fol_deg: mean(scores.iter().map(|s| s.fol_deg)),
        fid: None,
        diversity: None,
        diversity_reference: None,
        diversity_gap: None,
    };
    if let (Some(archive), Some(nets)) = (&archive, nets) {
        let features = |seqs: &[HandTrajectory]| -> dexrefine::Result<FeatureSet> {
            FeatureSet::new(
                seqs.iter()
                    .map(|s| extract_features(s, nets, &archive.codebook))
                    .collect::<dexrefine::Result<_>>()?,
            )
        };
        let fp = features(&pred).map_err(|e| in_file(pred_path, e))?;
        let fg = features(&gt).map_err(|e| in_file(gt_path, e))?;
        let (d, d_ref) = (diversity(&fp)?, diversity(&fg)?);
        summary.fid = Some(fid(&fg, &fp)?);
        summary.diversity = Some(d);
        summary.diversity_reference = Some(d_ref);
        summary.diversity_gap = Some((d - d_ref).abs());
    }

    let records = scores
        .iter()
        .enumerate()
        .map(|(i, s)| json!({"record": "sequence", "index": i, "mpjpe_mm": s.mpjpe_mm, "fpl_mm": s.fpl_mm, "fol_deg": s.fol_deg}))
        .chain([tagged(&summary, &[("record", json!("summary"))])]);
    let mut out = Outputs::new(config, "metrics");
    out.add("metrics.jsonl", jsonl(records));
    let written = out.write()?;
    Ok(tagged(
        &summary,
        &[("command", json!("metrics")), ("outputs", paths_json(&written))],
    ))
}

