use std::path::Path;

use dexrefine::codebook::{
    reconstruction_mse, train_new_morphology, train_reference, translate, ArchConfig, CodebookArchive, EpochRecord,
    MorphologyNets, PoseChunkSpec,
};
use dexrefine::handmodel::HandTrajectory;
use dexrefine::{io, Error};
use nalgebra::DVector;
use serde_json::{json, Value};

use super::{in_file, jsonl, paths_json, read_sequences, tagged, Outputs};
use crate::config::{required, RunConfig};
use crate::error::{CliError, CliResult};

pub const ARCHIVE_FILE: &str = "archive.json";
pub const HISTORY_FILE: &str = "history.jsonl";

fn history_lines<'a>(stage: &str, records: impl IntoIterator<Item = &'a EpochRecord>) -> String {
    jsonl(records.into_iter().map(|r| tagged(r, &[("stage", json!(stage))])))
}

fn uniform_dof(path: &Path, seqs: &[HandTrajectory]) -> CliResult<usize> {
    let dof = seqs.first().map(HandTrajectory::dof).ok_or_else(|| {
        in_file(
            path,
            Error::Invalid {
                field: "sequences".into(),
                message: "file holds no sequence".into(),
            },
        )
    })?;
    if let Some(s) = seqs.iter().find(|s| s.dof() != dof) {
        return Err(in_file(
            path,
            Error::Dimension {
                what: "sequence dof",
                expected: dof,
                actual: s.dof(),
            },
        )
        .into());
    }
    Ok(dof)
}

/// On divergence the history so far is still written.
fn diverged(config: &RunConfig, stage: &str, e: Error) -> CliError {
    if let Error::Diverged { history, .. } = &e {
        let mut out = Outputs::new(config, "vq");
        out.add(HISTORY_FILE, history_lines(stage, history));
        if let Err(w) = out.write() {
            return w;
        }
    }
    e.into()
}

pub fn train_ref(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let v = &config.vq;
    let path = required(&v.dataset, "vq.dataset")?;
    let seqs = read_sequences(path, None)?;
    let dof = uniform_dof(path, &seqs)?;
    let chunk = PoseChunkSpec::new(v.window, v.stride, dof)?;
    let chunks = chunk.chunks_of_all(&seqs)?;
    if chunks.is_empty() {
        return Err(in_file(
            path,
            Error::InsufficientPoints {
                needed: v.window,
                got: seqs.iter().map(HandTrajectory::len).max().unwrap_or(0),
            },
        )
        .into());
    }
    if dry_run {
        return Ok(json!({"command": "vq train-ref", "dry_run": true, "chunks": chunks.len(), "dof": dof}));
    }

    let model = train_reference(&chunks, &v.arch, &v.train).map_err(|e| diverged(config, "reference", e))?;
    let final_mse = reconstruction_mse(&model.encoder, &model.decoder, &model.codebook, &chunks)?;
    let mut archive = CodebookArchive::new(model.codebook);
    archive.insert(
        &v.name,
        MorphologyNets {
            chunk,
            encoder: model.encoder,
            decoder: model.decoder,
        },
    )?;
    let mut out = Outputs::new(config, "vq-train-ref");
    out.add(ARCHIVE_FILE, archive.to_json());
    out.add(HISTORY_FILE, history_lines("reference", &model.history));
    let written = out.write()?;
    Ok(json!({
        "command": "vq train-ref",
        "chunks": chunks.len(),
        "initial_mse": model.initial_mse,
        "final_mse": final_mse,
        "active_codes": model.history.last().map(|r| r.active_codes),
        "fingerprint": archive.fingerprint(),
        "outputs": paths_json(&written),
    }))
}

fn load_archive(config: &RunConfig) -> CliResult<CodebookArchive> {
    Ok(CodebookArchive::load(required(&config.vq.archive, "vq.archive")?)?)
}

pub fn train_new(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let v = &config.vq;
    if v.name == v.reference {
        return Err(CliError::Config(format!(
            "vq.name: the new morphology must differ from vq.reference (`{}`)",
            v.reference
        )));
    }
    let mut archive = load_archive(config)?;
    let reference = archive.morphology(&v.reference)?.clone();
    let new_path = required(&v.paired_new, "vq.paired_new")?;
    let ref_path = required(&v.paired_ref, "vq.paired_ref")?;
    let new_seqs = read_sequences(new_path, None)?;
    let ref_seqs = read_sequences(ref_path, None)?;
    let new_dof = uniform_dof(new_path, &new_seqs)?;
    if ref_seqs.len() != new_seqs.len() {
        return Err(in_file(
            ref_path,
            Error::Dimension {
                what: "paired sequences",
                expected: new_seqs.len(),
                actual: ref_seqs.len(),
            },
        )
        .into());
    }
    let new_chunk = PoseChunkSpec::new(reference.chunk.window, reference.chunk.stride, new_dof)?;
    let mut pairs = Vec::new();
    for (i, (n, r)) in new_seqs.iter().zip(&ref_seqs).enumerate() {
        if n.len() != r.len() {
            return Err(in_file(
                ref_path,
                Error::Dimension {
                    what: "paired sequence frames",
                    expected: n.len(),
                    actual: r.len(),
                },
            )
            .into());
        }
        let xn = new_chunk.chunks(n)?;
        let xr = reference.chunk.chunks(r).map_err(|e| in_file(ref_path, e))?;
        debug_assert_eq!(xn.len(), xr.len(), "sequence {i}");
        pairs.extend(xn.into_iter().zip(xr));
    }
    if pairs.is_empty() {
        return Err(in_file(
            new_path,
            Error::InsufficientPoints {
                needed: new_chunk.window,
                got: new_seqs.iter().map(HandTrajectory::len).max().unwrap_or(0),
            },
        )
        .into());
    }
    let arch = ArchConfig {
        k: archive.codebook.k(),
        ..v.arch.clone()
    };
    if dry_run {
        return Ok(json!({"command": "vq train-new", "dry_run": true, "pairs": pairs.len(), "dof": new_dof}));
    }

    let nm = train_new_morphology(&pairs, &reference.encoder, &archive.codebook, &arch, &v.train)
        .map_err(|e| diverged(config, "align", e))?;
    archive.codebook = nm.codebook;
    archive.insert(
        &v.name,
        MorphologyNets {
            chunk: new_chunk,
            encoder: nm.encoder,
            decoder: nm.decoder,
        },
    )?;
    let mut out = Outputs::new(config, "vq-train-new");
    out.add(ARCHIVE_FILE, archive.to_json());
    out.add(
        HISTORY_FILE,
        history_lines("align", &nm.align_history) + &history_lines("finetune", &nm.finetune_history),
    );
    let written = out.write()?;
    Ok(json!({
        "command": "vq train-new",
        "pairs": pairs.len(),
        "initial_distill": nm.initial_distill,
        "aligned_distill": nm.aligned_distill,
        "fingerprint": archive.fingerprint(),
        "outputs": paths_json(&written),
    }))
}

pub fn translate_cmd(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let v = &config.vq;
    let archive = load_archive(config)?;
    let from_name = v.from.as_deref().ok_or_else(|| CliError::Config("vq.from: required but not set".into()))?;
    let to_name = v.to.as_deref().ok_or_else(|| CliError::Config("vq.to: required but not set".into()))?;
    let from = archive.morphology(from_name)?;
    let to = archive.morphology(to_name)?;
    if (from.chunk.window, from.chunk.stride) != (to.chunk.window, to.chunk.stride) {
        return Err(Error::Invalid {
            field: "morphology chunking".into(),
            message: format!("`{from_name}` and `{to_name}` use different windows or strides"),
        }
        .into());
    }
    let path = required(&v.input, "vq.input")?;
    let seqs = read_sequences(path, None)?;
    let mut per_seq: Vec<Vec<DVector<f64>>> = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let chunks = from.chunk.chunks(s).map_err(|e| in_file(path, e))?;
        if chunks.is_empty() {
            return Err(in_file(
                path,
                Error::InsufficientPoints {
                    needed: from.chunk.window,
                    got: s.len(),
                },
            )
            .into());
        }
        per_seq.push(chunks);
    }
    if dry_run {
        return Ok(json!({"command": "vq translate", "dry_run": true, "sequences": seqs.len()}));
    }

    let translated = per_seq
        .iter()
        .map(|chunks| {
            let out = chunks
                .iter()
                .map(|x| translate(&from.encoder, &to.decoder, &archive.codebook, x))
                .collect::<dexrefine::Result<Vec<_>>>()?;
            to.chunk.assemble(&out)
        })
        .collect::<dexrefine::Result<Vec<_>>>()?;
    let mut out = Outputs::new(config, "vq-translate");
    out.add("translated.qpos", io::format_qpos(&translated));
    let written = out.write()?;
    Ok(json!({
        "command": "vq translate",
        "sequences": translated.len(),
        "frames": translated.iter().map(HandTrajectory::len).sum::<usize>(),
        "outputs": paths_json(&written),
    }))
}

pub fn refresh_stats(config: &RunConfig, dry_run: bool) -> CliResult<Value> {
    let path = required(&config.vq.history, "vq.history")?;
    let text = io::read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            context: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        if let Some(r) = rec.get("refresh") {
            rows.push(json!({
                "stage": rec.get("stage").cloned().unwrap_or(Value::Null),
                "epoch": rec.get("epoch").cloned().unwrap_or(Value::Null),
                "cold": r.get("cold").cloned().unwrap_or(Value::Null),
                "replaced": r.get("replaced").cloned().unwrap_or(Value::Null),
            }));
        }
    }
    if dry_run {
        return Ok(json!({"command": "vq refresh-stats", "dry_run": true, "refreshes": rows.len()}));
    }
    for r in &rows {
        println!("{r}");
    }
    let mut out = Outputs::new(config, "vq-refresh-stats");
    out.add("refresh_stats.jsonl", jsonl(&rows));
    let written = out.write()?;
    Ok(json!({
        "command": "vq refresh-stats",
        "refreshes": rows.len(),
        "outputs": paths_json(&written),
    }))
}
