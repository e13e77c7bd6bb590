//! Plain-text trajectory, pose, keypoint and point-cloud files.
//!
//! All formats are whitespace separated with `#` comments:
//!
//! ```text
//! qpos <dof>               poses <frames> <rate>      keypoints <name>...
//! sequence <frames>        <16 numbers, row-major>    x y z   (one row per keypoint,
//! <dof numbers per row>    ...                        ...      frames back to back)
//! ```
//!
//! A qpos file may hold several `sequence` blocks and a pose file several
//! `poses` blocks. Clouds are ASCII PLY with `x y z [nx ny nz]` vertex
//! properties, or bare rows of 3 or 6 numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, TargetPoseTrajectory};
use crate::handmodel::{HandConfiguration, HandTrajectory};
use crate::pointcloud::{OrientedPointCloud, DEFAULT_K_NEIGHBORS};
use crate::retarget::KeypointFrame;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    context: &'a str,
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, Vec<&'a str>)> + 'a>>,
}

impl<'a> Lines<'a> {
    fn new(context: &'a str, text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, Vec<&'a str>)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>()))
                .filter(|(_, t)| !t.is_empty()),
        );
        Self {
            context,
            inner: it.peekable(),
        }
    }

    fn err(&self, line: usize, msg: impl std::fmt::Display) -> Error {
        Error::parse(format!("{}:{line}", self.context), msg.to_string())
    }

    fn next(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        self.inner
            .next()
            .ok_or_else(|| Error::parse(self.context.to_string(), format!("unexpected end of file, expected {what}")))
    }

    fn peek_is_done(&mut self) -> bool {
        self.inner.peek().is_none()
    }

    fn numbers(&self, line: usize, tokens: &[&str], count: usize) -> Result<Vec<f64>> {
        if tokens.len() != count {
            return Err(self.err(line, format!("expected {count} numbers, found {}", tokens.len())));
        }
        tokens
            .iter()
            .map(|t| {
                let v: f64 = t.parse().map_err(|_| self.err(line, format!("`{t}` is not a number")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(self.err(line, "non-finite value"))
                }
            })
            .collect()
    }

    fn header(&mut self, keyword: &str, args: usize) -> Result<(usize, Vec<&'a str>)> {
        let (line, tokens) = self.next(keyword)?;
        if tokens[0] != keyword || tokens.len() != args + 1 {
            return Err(self.err(line, format!("expected `{keyword}` header with {args} argument(s)")));
        }
        Ok((line, tokens[1..].to_vec()))
    }

    fn count(&self, line: usize, token: &str) -> Result<usize> {
        token.parse().map_err(|_| self.err(line, format!("`{token}` is not a count")))
    }
}

fn fmt_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v}").unwrap();
    }
    out.push('\n');
}

pub fn parse_qpos(context: &str, text: &str) -> Result<Vec<HandTrajectory>> {
    let mut lines = Lines::new(context, text);
    let (line, args) = lines.header("qpos", 1)?;
    let dof = lines.count(line, args[0])?;
    if dof == 0 {
        return Err(lines.err(line, "dof must be ≥ 1"));
    }
    let mut sequences = Vec::new();
    while !lines.peek_is_done() {
        let (line, args) = lines.header("sequence", 1)?;
        let frames = lines.count(line, args[0])?;
        if frames == 0 {
            return Err(lines.err(line, "sequence has no frames"));
        }
        let mut qs = Vec::with_capacity(frames);
        for _ in 0..frames {
            let (line, tokens) = lines.next("a qpos row")?;
            qs.push(HandConfiguration::from_slice(&lines.numbers(line, &tokens, dof)?));
        }
        sequences.push(HandTrajectory::new(qs)?);
    }
    if sequences.is_empty() {
        return Err(Error::parse(context, "no sequences"));
    }
    Ok(sequences)
}

pub fn format_qpos(sequences: &[HandTrajectory]) -> String {
    let dof = sequences.first().map_or(0, HandTrajectory::dof);
    let mut out = format!("qpos {dof}\n");
    for s in sequences {
        writeln!(out, "sequence {}", s.len()).unwrap();
        for q in s.frames() {
            fmt_row(&mut out, q.as_slice().iter().copied());
        }
    }
    out
}

pub fn read_qpos(path: &Path) -> Result<Vec<HandTrajectory>> {
    parse_qpos(&path.display().to_string(), &read_text(path)?)
}

pub fn write_qpos(path: &Path, sequences: &[HandTrajectory]) -> Result<()> {
    write_text(path, &format_qpos(sequences))
}

pub fn parse_poses(context: &str, text: &str) -> Result<Vec<TargetPoseTrajectory>> {
    let mut lines = Lines::new(context, text);
    let mut blocks = Vec::new();
    while !lines.peek_is_done() {
        let (line, args) = lines.header("poses", 2)?;
        let frames = lines.count(line, args[0])?;
        let rate: f64 = args[1].parse().map_err(|_| lines.err(line, "frame rate is not a number"))?;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(lines.err(line, "frame rate must be > 0"));
        }
        let mut poses = Vec::with_capacity(frames);
        for _ in 0..frames {
            let (line, tokens) = lines.next("a pose row")?;
            let values = lines.numbers(line, &tokens, 16)?;
            poses.push(RigidTransform::from_row_major(&values).map_err(|e| lines.err(line, e))?);
        }
        blocks.push(TargetPoseTrajectory::new(poses, rate).map_err(|e| lines.err(line, e))?);
    }
    if blocks.is_empty() {
        return Err(Error::parse(context, "no pose blocks"));
    }
    Ok(blocks)
}

pub fn format_poses(blocks: &[TargetPoseTrajectory]) -> String {
    let mut out = String::new();
    for b in blocks {
        writeln!(out, "poses {} {}", b.len(), b.frame_rate).unwrap();
        for p in b.frames() {
            fmt_row(&mut out, p.to_row_major());
        }
    }
    out
}

pub fn read_poses(path: &Path) -> Result<Vec<TargetPoseTrajectory>> {
    parse_poses(&path.display().to_string(), &read_text(path)?)
}

pub fn write_poses(path: &Path, blocks: &[TargetPoseTrajectory]) -> Result<()> {
    write_text(path, &format_poses(blocks))
}

/// A keypoint trajectory and its keypoint names.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTrajectory {
    pub names: Vec<String>,
    pub frames: Vec<KeypointFrame>,
}

pub fn parse_keypoints(context: &str, text: &str) -> Result<KeypointTrajectory> {
    let mut lines = Lines::new(context, text);
    let (line, tokens) = lines.next("`keypoints` header")?;
    if tokens[0] != "keypoints" || tokens.len() < 2 {
        return Err(lines.err(line, "expected `keypoints <name>...` header"));
    }
    let names: Vec<String> = tokens[1..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    while !lines.peek_is_done() {
        let (line, tokens) = lines.next("a keypoint row")?;
        let v = lines.numbers(line, &tokens, 3)?;
        rows.push(Vector3::new(v[0], v[1], v[2]));
    }
    if rows.is_empty() || rows.len() % names.len() != 0 {
        return Err(Error::parse(
            context,
            format!("{} rows is not a positive multiple of {} keypoints", rows.len(), names.len()),
        ));
    }
    let frames = rows
        .chunks(names.len())
        .map(|c| KeypointFrame::new(c.to_vec()))
        .collect::<Result<_>>()?;
    Ok(KeypointTrajectory { names, frames })
}

pub fn format_keypoints(traj: &KeypointTrajectory) -> String {
    let mut out = format!("keypoints {}\n", traj.names.join(" "));
    for f in &traj.frames {
        for p in &f.positions {
            fmt_row(&mut out, p.iter().copied());
        }
    }
    out
}

pub fn read_keypoints(path: &Path) -> Result<KeypointTrajectory> {
    parse_keypoints(&path.display().to_string(), &read_text(path)?)
}

pub fn write_keypoints(path: &Path, traj: &KeypointTrajectory) -> Result<()> {
    write_text(path, &format_keypoints(traj))
}

/// Points with optional normals, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl RawCloud {
    /// Uses stored normals, or estimates them when the file has none.
    pub fn into_oriented(self) -> Result<OrientedPointCloud> {
        match self.normals {
            Some(n) => OrientedPointCloud::new(self.points, n),
            None => OrientedPointCloud::with_estimated_normals(self.points, DEFAULT_K_NEIGHBORS),
        }
    }
}

fn parse_ply(context: &str, text: &str) -> Result<RawCloud> {
    let mut lines = Lines::new(context, text);
    let mut vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let (line, tokens) = lines.next("end_header")?;
        match tokens.as_slice() {
            ["ply"] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                if *fmt != "ascii" {
                    return Err(lines.err(line, format!("only ASCII PLY is supported, found {fmt}")));
                }
            }
            ["element", "vertex", n] => {
                vertices = Some(lines.count(line, n)?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] => {}
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(lines.err(line, format!("unrecognized header line `{}`", tokens.join(" ")))),
        }
    }
    let n = vertices.ok_or_else(|| Error::parse(context, "no vertex element"))?;
    let find = |name: &str| props.iter().position(|p| p == name);
    let xyz = ["x", "y", "z"].map(find);
    let nxyz = ["nx", "ny", "nz"].map(find);
    let [Some(x), Some(y), Some(z)] = xyz else {
        return Err(Error::parse(context, "vertex element lacks x/y/z"));
    };
    let normal_idx = match nxyz {
        [Some(a), Some(b), Some(c)] => Some([a, b, c]),
        [None, None, None] => None,
        _ => return Err(Error::parse(context, "vertex element has partial normals")),
    };
    let mut points = Vec::with_capacity(n);
    let mut normals = normal_idx.map(|_| Vec::with_capacity(n));
    for _ in 0..n {
        let (line, tokens) = lines.next("a vertex row")?;
        let v = lines.numbers(line, &tokens, props.len())?;
        points.push(Vector3::new(v[x], v[y], v[z]));
        if let (Some(ns), Some([a, b, c])) = (normals.as_mut(), normal_idx) {
            ns.push(Vector3::new(v[a], v[b], v[c]));
        }
    }
    Ok(RawCloud { points, normals })
}

fn parse_xyz(context: &str, text: &str) -> Result<RawCloud> {
    let mut lines = Lines::new(context, text);
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    while !lines.peek_is_done() {
        let (line, tokens) = lines.next("a point row")?;
        let w = *width.get_or_insert(tokens.len());
        if w != 3 && w != 6 {
            return Err(lines.err(line, "rows must have 3 or 6 numbers"));
        }
        let v = lines.numbers(line, &tokens, w)?;
        points.push(Vector3::new(v[0], v[1], v[2]));
        if w == 6 {
            normals.push(Vector3::new(v[3], v[4], v[5]));
        }
    }
    Ok(RawCloud {
        points,
        normals: (width == Some(6)).then_some(normals),
    })
}

pub fn parse_cloud(context: &str, text: &str) -> Result<RawCloud> {
    if text.trim_start().starts_with("ply") {
        parse_ply(context, text)
    } else {
        parse_xyz(context, text)
    }
}

pub fn read_cloud(path: &Path) -> Result<RawCloud> {
    parse_cloud(&path.display().to_string(), &read_text(path)?)
}

pub fn format_ply(points: &[Vector3<f64>], normals: Option<&[Vector3<f64>]>) -> String {
    let mut out = format!("ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n", points.len());
    if normals.is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        match normals {
            Some(n) => fmt_row(&mut out, p.iter().chain(n[i].iter()).copied()),
            None => fmt_row(&mut out, p.iter().copied()),
        }
    }
    out
}

pub fn write_ply(path: &Path, points: &[Vector3<f64>], normals: Option<&[Vector3<f64>]>) -> Result<()> {
    write_text(path, &format_ply(points, normals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qpos_round_trip() {
        let a = HandTrajectory::new(vec![HandConfiguration::from_slice(&[0.1, -2.5e-7]), HandConfiguration::from_slice(&[1.0 / 3.0, 4.0])]).unwrap();
        let b = HandTrajectory::new(vec![HandConfiguration::from_slice(&[0.0, 1.0])]).unwrap();
        let text = format_qpos(&[a.clone(), b.clone()]);
        assert_eq!(parse_qpos("t", &text).unwrap(), vec![a, b]);
    }

    #[test]
    fn qpos_errors_name_the_line() {
        let err = parse_qpos("f.qpos", "qpos 2\nsequence 1\n0.1 oops\n").unwrap_err().to_string();
        assert!(err.contains("f.qpos:3"), "{err}");
        assert!(parse_qpos("f", "qpos 2\nsequence 2\n0 0\n").is_err());
        assert!(parse_qpos("f", "qpos 2\nsequence 1\n0 NaN\n").is_err());
    }

    #[test]
    fn poses_round_trip() {
        let t = RigidTransform::rot_y(0.3).compose(&RigidTransform::trans(1.0, 2.0, 3.0));
        let traj = TargetPoseTrajectory::new(vec![t, RigidTransform::identity()], 30.0).unwrap();
        let parsed = parse_poses("p", &format_poses(std::slice::from_ref(&traj))).unwrap();
        assert_eq!(parsed, vec![traj]);
    }

    #[test]
    fn keypoints_round_trip() {
        let traj = KeypointTrajectory {
            names: vec!["a".into(), "b".into()],
            frames: vec![KeypointFrame::new(vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.5, 0.0, -1.0)]).unwrap(); 3],
        };
        assert_eq!(parse_keypoints("k", &format_keypoints(&traj)).unwrap(), traj);
        assert!(parse_keypoints("k", "keypoints a b\n0 0 0\n").is_err());
    }

    #[test]
    fn clouds_in_both_formats() {
        let pts = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)];
        let ns = pts.clone();
        let ply = parse_cloud("c", &format_ply(&pts, Some(&ns))).unwrap();
        assert_eq!(ply.points, pts);
        assert_eq!(ply.normals.as_deref(), Some(&ns[..]));
        let bare = parse_cloud("c", &format_ply(&pts, None)).unwrap();
        assert!(bare.normals.is_none());
        let xyz = parse_cloud("c", "0 0 1\n1 0 0 # comment\n").unwrap();
        assert_eq!(xyz.points, pts);
        assert!(parse_cloud("c", "ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }
}
