//! Writes the demo fixture tree and its manifest.

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{clouds, hand20_retarget_spec, interior_configuration, keypoint_arc, linear_pair, models, sinusoid_sequences, sphere_grasp_frame, sphere_grasp_pose, sphere_grasp_trajectory};
use crate::codebook::PoseChunkSpec;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, TargetPoseTrajectory};
use crate::handmodel::{HandConfiguration, HandTrajectory};
use crate::io::{self, KeypointTrajectory};
use crate::retarget::{keypoints_from_configuration, KeypointFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

/// An expected result attached to a fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub criterion: u32,
    pub quantity: String,
    pub value: f64,
    pub tolerance: f64,
    /// How the value is known: `construction`, `oracle` or `measured`.
    pub basis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub name: String,
    pub files: Vec<String>,
    pub params: Value,
    pub expectations: Vec<Expectation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub fixtures: Vec<FixtureEntry>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn fixture(&self, name: &str) -> Option<&FixtureEntry> {
        self.fixtures.iter().find(|f| f.name == name)
    }
}

fn expect(criterion: u32, quantity: &str, value: f64, tolerance: f64, basis: &str) -> Expectation {
    Expectation {
        criterion,
        quantity: quantity.to_string(),
        value,
        tolerance,
        basis: basis.to_string(),
    }
}

struct Writer<'a> {
    root: &'a Path,
    files: Vec<FileEntry>,
}

impl Writer<'_> {
    fn put(&mut self, rel: &str, text: &str) -> Result<String> {
        io::write_text(&self.root.join(rel), text)?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: text.len(),
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        });
        Ok(rel.to_string())
    }
}

/// Sequences, frames and dof of the VQ sinusoid dataset.
pub const SINUSOID_SHAPE: (usize, usize, usize) = (16, 64, 4);
pub const SINUSOID_CHUNK: (usize, usize) = (8, 4);

/// Writes every fixture under `out` and returns the manifest, which is also
/// saved as `manifest.json`.
pub fn generate_fixtures(seed: u64, out: &Path) -> Result<Manifest> {
    let mut w = Writer { root: out, files: Vec::new() };
    let mut fixtures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut model_files = Vec::new();
    for chain in models::all() {
        model_files.push(w.put(&format!("models/{}.toml", chain.name()), &chain.to_toml_string())?);
    }
    fixtures.push(FixtureEntry {
        name: "demo_hands".into(),
        files: model_files,
        params: json!({}),
        expectations: vec![expect(3, "contact_jacobian_rel_err", 0.0, 1e-5, "oracle")],
    });

    let sphere = clouds::unit_sphere(4000);
    let sphere_file = w.put("clouds/unit_sphere.ply", &io::format_ply(sphere.points(), Some(sphere.normals())))?;
    let sparse = clouds::unit_sphere(500);
    let bare_file = w.put("clouds/unit_sphere_points.ply", &io::format_ply(sparse.points(), None))?;
    let cube = clouds::box_surface(Vector3::new(0.05, 0.03, 0.08), 12);
    let box_file = w.put("clouds/box.ply", &io::format_ply(cube.points(), Some(cube.normals())))?;
    fixtures.push(FixtureEntry {
        name: "sphere_cloud".into(),
        files: vec![sphere_file.clone(), bare_file],
        params: json!({"points": 4000, "points_without_normals": 500, "radius": 1.0}),
        expectations: vec![
            expect(6, "point_radius", 1.0, 1e-9, "construction"),
            expect(6, "normal_minus_point", 0.0, 1e-9, "construction"),
        ],
    });
    fixtures.push(FixtureEntry {
        name: "box_cloud".into(),
        files: vec![box_file],
        params: json!({"half_extents": [0.05, 0.03, 0.08], "per_side": 12}),
        expectations: vec![],
    });

    let frames = 5;
    let (gen, poses) = sphere_grasp_trajectory(frames);
    let gen_file = w.put("sphere_grasp/generated.qpos", &io::format_qpos(&[gen]))?;
    let pose_file = w.put("sphere_grasp/target_poses.txt", &io::format_poses(&[TargetPoseTrajectory::new(poses, 30.0)?]))?;
    let single = w.put(
        "sphere_grasp/single_frame.qpos",
        &io::format_qpos(&[HandTrajectory::new(vec![sphere_grasp_frame(0.005).q_gen])?]),
    )?;
    let single_pose = w.put("sphere_grasp/single_pose.txt", &io::format_poses(&[TargetPoseTrajectory::new(vec![sphere_grasp_pose()], 30.0)?]))?;
    fixtures.push(FixtureEntry {
        name: "sphere_grasp".into(),
        files: vec![gen_file, pose_file, single, single_pose, sphere_file],
        params: json!({"model": "gripper3", "frames": frames, "tip_offset_m": 0.005, "sphere_depth_m": super::SPHERE_DEPTH}),
        expectations: vec![
            expect(6, "max_abs_distance_m", 0.0, 1e-3, "measured"),
            expect(6, "max_inner_iterations", 50.0, 0.0, "construction"),
            expect(7, "temporal_energy_at_t0", 0.0, 0.0, "construction"),
        ],
    });
    fixtures.push(FixtureEntry {
        name: "noise_study".into(),
        files: vec!["sphere_grasp/single_frame.qpos".into(), "sphere_grasp/single_pose.txt".into(), "clouds/unit_sphere.ply".into()],
        params: json!({"sigma_m": [0.0, 0.001, 0.002], "seeds": 20, "max_inner_iters": crate::refiner::NOISE_STUDY_MAX_ITERS}),
        expectations: vec![
            expect(8, "rows", 120.0, 0.0, "construction"),
            expect(8, "median_asymmetric_minus_baseline_at_2mm", 0.0, 0.0, "measured"),
        ],
    });

    let hand = models::hand20();
    let spec = hand20_retarget_spec();
    let names: Vec<String> = spec.correspondences.iter().map(|c| c.link.clone()).collect();
    let arc = keypoint_arc(&hand, &spec, 60);
    let kp_file = w.put("retarget/arc_keypoints.txt", &io::format_keypoints(&KeypointTrajectory { names: names.clone(), frames: arc.frames.clone() }))?;
    let arc_q = w.put("retarget/arc_q_true.qpos", &io::format_qpos(&[HandTrajectory::new(arc.q_true.clone())?]))?;
    let spec_file = w.put("retarget/hand20_spec.toml", &toml::to_string(&spec).map_err(|e| Error::parse("retarget spec", e.to_string()))?)?;
    let q_star = interior_configuration(&hand, &mut rng, 0.15);
    let round_kp = KeypointFrame::new(keypoints_from_configuration(&hand, &spec, &q_star)?)?;
    let round_file = w.put("retarget/roundtrip_keypoints.txt", &io::format_keypoints(&KeypointTrajectory { names, frames: vec![round_kp] }))?;
    let q_star_file = w.put("retarget/roundtrip_q_true.qpos", &io::format_qpos(&[HandTrajectory::new(vec![q_star.clone()])?]))?;
    let q_init = HandConfiguration(q_star.0.map(|v| v + 0.03));
    let q_init_file = w.put("retarget/roundtrip_q_init.qpos", &io::format_qpos(&[HandTrajectory::new(vec![hand.clamp_to_limits(&q_init)?])?]))?;
    fixtures.push(FixtureEntry {
        name: "keypoint_arc".into(),
        files: vec![kp_file, arc_q, spec_file.clone()],
        params: json!({"model": "hand20", "frames": 60, "keypoints": spec.correspondences.len()}),
        expectations: vec![expect(9, "trajectory_length", 60.0, 0.0, "construction")],
    });
    fixtures.push(FixtureEntry {
        name: "retarget_roundtrip".into(),
        files: vec![round_file, q_star_file, q_init_file, spec_file],
        params: json!({"model": "hand20", "margin": 0.15, "init_offset_rad": 0.03}),
        expectations: vec![
            expect(9, "max_joint_error_rad", 0.0, 1e-3, "oracle"),
            expect(9, "keypoint_error_m", 0.0, 1e-4, "oracle"),
        ],
    });

    let (n_seq, n_frames, dof) = SINUSOID_SHAPE;
    let (window, stride) = SINUSOID_CHUNK;
    let sinus = sinusoid_sequences(seed, n_seq, n_frames, dof);
    let chunk = PoseChunkSpec::new(window, stride, dof)?;
    let sin_file = w.put("vq/sinusoid.qpos", &io::format_qpos(&sinus))?;
    fixtures.push(FixtureEntry {
        name: "sinusoid_vq".into(),
        files: vec![sin_file],
        params: json!({"sequences": n_seq, "frames": n_frames, "dof": dof, "window": window, "stride": stride, "k": 32, "epochs": 200}),
        expectations: vec![
            expect(12, "chunks_per_sequence", chunk.chunk_count(n_frames) as f64, 0.0, "construction"),
            expect(12, "final_over_initial_mse", 0.0, 0.1, "measured"),
        ],
    });

    let (pr, pn) = linear_pair(seed.wrapping_add(1), 12, 48);
    let (hr, hn) = linear_pair(seed.wrapping_add(2), 4, 48);
    let files = vec![
        w.put("vq/pair_ref.qpos", &io::format_qpos(&pr))?,
        w.put("vq/pair_new.qpos", &io::format_qpos(&pn))?,
        w.put("vq/heldout_ref.qpos", &io::format_qpos(&hr))?,
        w.put("vq/heldout_new.qpos", &io::format_qpos(&hn))?,
    ];
    fixtures.push(FixtureEntry {
        name: "linear_pair".into(),
        files,
        params: json!({"train_sequences": 12, "heldout_sequences": 4, "frames": 48, "ref_dof": 4, "new_dof": 5}),
        expectations: vec![
            expect(14, "aligned_over_initial_distill", 0.0, 0.1, "measured"),
            expect(14, "translation_over_reconstruction", 0.0, 1.2, "measured"),
        ],
    });

    let gt: Vec<HandTrajectory> = (0..3)
        .map(|_| {
            let a = interior_configuration(&hand, &mut rng, 0.1);
            let b = interior_configuration(&hand, &mut rng, 0.1);
            HandTrajectory::new((0..20).map(|t| HandConfiguration(a.0.lerp(&b.0, t as f64 / 19.0))).collect())
        })
        .collect::<Result<_>>()?;
    let offset = Vector3::new(0.003, 0.004, 0.0);
    let roots = |t: RigidTransform| -> Result<Vec<TargetPoseTrajectory>> {
        gt.iter().map(|s| TargetPoseTrajectory::new(vec![t; s.len()], 30.0)).collect()
    };
    let files = vec![
        w.put("metrics/gt.qpos", &io::format_qpos(&gt))?,
        w.put("metrics/gt_roots.txt", &io::format_poses(&roots(RigidTransform::identity())?))?,
        w.put("metrics/offset_roots.txt", &io::format_poses(&roots(RigidTransform::from_translation(offset))?))?,
    ];
    fixtures.push(FixtureEntry {
        name: "metrics_offset".into(),
        files,
        params: json!({"model": "hand20", "sequences": 3, "frames": 20, "offset_m": [0.003, 0.004, 0.0]}),
        expectations: vec![
            expect(16, "mpjpe_mm", 5.0, 1e-9, "construction"),
            expect(16, "fpl_mm", 5.0, 1e-9, "construction"),
            expect(16, "fol_deg", 0.0, 1e-6, "construction"),
        ],
    });

    let manifest = Manifest { seed, fixtures, files: w.files };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    io::write_text(&out.join("manifest.json"), &text)?;
    Ok(manifest)
}
