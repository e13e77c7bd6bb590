use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dexrefine(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dexrefine")).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn summary(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("summary line")).unwrap()
}

fn with_fixtures() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = dexrefine(dir.path(), &["fixtures", "generate", "--out-dir", "fx"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

const REFINE: &[&str] = &[
    "refine",
    "--model",
    "fx/models/gripper3.toml",
    "--trajectory",
    "fx/sphere_grasp/generated.qpos",
    "--cloud",
    "fx/clouds/unit_sphere.ply",
    "--poses",
    "fx/sphere_grasp/target_poses.txt",
];

#[test]
fn refine_writes_outputs_and_dry_run_writes_nothing() {
    let dir = with_fixtures();
    let mut args = REFINE.to_vec();
    args.extend(["--out-dir", "dry", "--dry-run"]);
    let out = dexrefine(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("dry").exists());

    let mut args = REFINE.to_vec();
    args.extend(["--out-dir", "run"]);
    let out = dexrefine(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/refine.config.toml").exists());
    let s = summary(&out);
    assert_eq!(s["command"], "refine");
    assert!(s["outputs"].as_array().unwrap().len() >= 2);
}

#[test]
fn exit_codes_classify_failures() {
    let dir = with_fixtures();

    let out = dexrefine(dir.path(), &["refine", "--bogus-flag"]);
    assert_eq!(code(&out), 1);

    let out = dexrefine(dir.path(), &["refine", "--set", "refine.no_such_key=1"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let mut args = REFINE.to_vec();
    args[2] = "fx/models/missing.toml";
    let out = dexrefine(dir.path(), &args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    // a spec naming a link the model lacks is a data error
    let spec = fs::read_to_string(dir.path().join("fx/retarget/hand20_spec.toml")).unwrap();
    let first_link = spec.lines().find_map(|l| l.trim().strip_prefix("link = ")).unwrap().to_string();
    fs::write(dir.path().join("bad_spec.toml"), spec.replacen(&first_link, "\"no_such_link\"", 1)).unwrap();
    let out = dexrefine(
        dir.path(),
        &[
            "retarget",
            "--model",
            "fx/models/hand20.toml",
            "--keypoints",
            "fx/retarget/arc_keypoints.txt",
            "--spec",
            "bad_spec.toml",
            "--out-dir",
            "rt",
        ],
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("rt").exists());
}

#[test]
fn config_layers_resolve_in_order() {
    let dir = with_fixtures();
    fs::write(dir.path().join("base.toml"), "seed = 5\n[refine.solver]\nmax_inner_iters = 7\n").unwrap();
    fs::write(dir.path().join("run.toml"), "include = \"base.toml\"\n[refine.solver]\nmax_inner_iters = 9\n").unwrap();
    let mut args = vec!["--config", "run.toml", "--set", "refine.kernel.alpha=2.0", "--out-dir", "layered"];
    args.extend(REFINE);
    let out = dexrefine(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let written: toml::Table = fs::read_to_string(dir.path().join("layered/refine.config.toml")).unwrap().parse().unwrap();
    assert_eq!(written["seed"].as_integer(), Some(5));
    assert_eq!(written["refine"]["solver"]["max_inner_iters"].as_integer(), Some(9));
    assert_eq!(written["refine"]["kernel"]["alpha"].as_float(), Some(2.0));
}

#[test]
fn noise_study_reports_every_run() {
    let dir = with_fixtures();
    let out = dexrefine(
        dir.path(),
        &[
            "noise-study",
            "--model",
            "fx/models/gripper3.toml",
            "--cloud",
            "fx/clouds/unit_sphere.ply",
            "--trajectory",
            "fx/sphere_grasp/single_frame.qpos",
            "--poses",
            "fx/sphere_grasp/single_pose.txt",
            "--sigma",
            "0,0.002",
            "--seeds",
            "2",
            "--out-dir",
            "noise",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_dir(dir.path().join("noise"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .map(|p| fs::read_to_string(p).unwrap())
        .flat_map(|t| t.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()).collect::<Vec<_>>())
        .filter(|v| v.get("deviation").is_some())
        .count();
    assert_eq!(rows, 2 * 2 * 2);
}

#[test]
fn metrics_see_the_root_offset() {
    let dir = with_fixtures();
    let out = dexrefine(
        dir.path(),
        &[
            "metrics",
            "--model",
            "fx/models/hand20.toml",
            "--gt",
            "fx/metrics/gt.qpos",
            "--pred",
            "fx/metrics/gt.qpos",
            "--gt-roots",
            "fx/metrics/gt_roots.txt",
            "--pred-roots",
            "fx/metrics/offset_roots.txt",
            "--out-dir",
            "m",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert!((s["mpjpe_mm"].as_f64().unwrap() - 5.0).abs() < 1e-9);
    assert!(s["fol_deg"].as_f64().unwrap().abs() < 1e-6);
    assert!(s["fid"].is_null());
}

#[test]
fn vq_translate_rejects_mismatched_archives() {
    let dir = with_fixtures();
    let train = |k: &str, d_z: &str, out: &str| {
        let d_z = format!("vq.arch.d_z={d_z}");
        let k = format!("vq.arch.k={k}");
        dexrefine(
            dir.path(),
            &[
                "vq", "train-ref", "--dataset", "fx/vq/pair_ref.qpos", "--set", &k, "--set", &d_z, "--set",
                "vq.train.epochs=3", "--set", "vq.arch.hidden=[16]", "--out-dir", out,
            ],
        )
    };
    let out = train("8", "4", "a");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert!(s["chunks"].as_u64().unwrap() > 0);

    let out = dexrefine(dir.path(), &["vq", "refresh-stats", "--history", "a/history.jsonl", "--out-dir", "rs"]);
    assert_eq!(code(&out), 0);
    assert!(summary(&out)["refreshes"].is_u64());

    // an unknown morphology name is a data error
    let out = dexrefine(
        dir.path(),
        &[
            "vq", "translate", "--archive", "a/archive.json", "--input", "fx/vq/heldout_ref.qpos", "--from", "nobody",
            "--to", "reference", "--out-dir", "t",
        ],
    );
    assert_eq!(code(&out), 2);

    // the input dof must match the source encoder
    let out = dexrefine(
        dir.path(),
        &[
            "vq", "translate", "--archive", "a/archive.json", "--input", "fx/vq/heldout_new.qpos", "--from",
            "reference", "--to", "reference", "--out-dir", "t",
        ],
    );
    assert_ne!(code(&out), 0);
    assert!(!dir.path().join("t/translated.qpos").exists());
}
