//! The `marrowcast` binary: exit codes, diagnostics and artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use marrowcast_core::{Geometry, Volume};
use tempfile::TempDir;

fn marrowcast(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marrowcast"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MARROWCAST_JOBS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The diagnostic line, checked for shape.
fn diagnostic(o: &Output) -> String {
    let err = stderr(o);
    let line = err.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with("error kind="), "no diagnostic in {err:?}");
    assert!(line.contains(&format!("code={}", o.status.code().unwrap())), "{line}");
    line
}

const QUICK: [&str; 6] = [
    "--set",
    "bonenet.epochs=1",
    "--set",
    "lesionnet.epochs=1",
    "--set",
    "cohort_size=2",
];

/// A two-patient cohort and nets trained for one epoch, shared by tests.
fn trained() -> &'static (TempDir, PathBuf) {
    static CELL: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        for args in [
            vec!["phantom-gen", "--out", "cohort"],
            vec!["train-bone", "--data", "cohort", "--out", "models"],
            vec!["train-lesion", "--data", "cohort", "--out", "models"],
        ] {
            let mut full = args.clone();
            full.extend(QUICK);
            let o = marrowcast(&full, &root);
            assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        }
        (dir, root)
    })
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = marrowcast(&["evaluate", "--frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage:"));
    assert!(diagnostic(&o).starts_with("error kind=usage code=1 msg=\""));
}

#[test]
fn help_and_version_exit_0() {
    let tmp = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let o = marrowcast(&[flag], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{flag}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn missing_subcommand_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(marrowcast(&[], tmp.path()).status.code(), Some(1));
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("typo.json"), r#"{"profile": "desk_scale", "bonenet": {"epoch": 3}}"#).unwrap();
    fs::write(tmp.path().join("noprofile.json"), r#"{"seed": 3}"#).unwrap();
    fs::write(tmp.path().join("broken.json"), "{").unwrap();
    for args in [
        vec!["evaluate", "--config", "typo.json"],
        vec!["evaluate", "--config", "noprofile.json"],
        vec!["evaluate", "--config", "broken.json"],
        vec!["evaluate", "--set", "cascade.patch_size=48"],
        vec!["evaluate", "--set", "nodots"],
        vec!["phantom-gen", "--out", "c", "--set", "cohort_size=0"],
        vec!["--jobs", "0", "phantom-gen", "--out", "c"],
    ] {
        let o = marrowcast(&args, tmp.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        diagnostic(&o);
    }
    assert!(!tmp.path().join("c").exists());
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("junk.nii"), [0u8; 400]).unwrap();
    let o = marrowcast(&["evaluate", "--data", "absent"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(diagnostic(&o).starts_with("error kind=io"));
    let o = marrowcast(&["predict", "--in", "junk.nii", "--bonenet", "b", "--lesionnet", "l", "--out", "r.nii"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(diagnostic(&o).starts_with("error kind=format"));
}

#[test]
fn corrupted_checkpoint_exits_2() {
    let (_keep, root) = trained();
    let tmp = tempfile::tempdir().unwrap();
    for ext in ["json", "bin"] {
        fs::copy(root.join(format!("models/lesionnet.{ext}")), tmp.path().join(format!("l.{ext}"))).unwrap();
    }
    let mut blob = fs::read(tmp.path().join("l.bin")).unwrap();
    blob[17] ^= 0x40;
    fs::write(tmp.path().join("l.bin"), blob).unwrap();
    let input = root.join("cohort/P000/i_t.nii");
    let bonenet = root.join("models/bonenet");
    let o = marrowcast(
        &["predict", "--in", input.to_str().unwrap(), "--bonenet", bonenet.to_str().unwrap(), "--lesionnet", "l", "--out", "r.nii"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(diagnostic(&o).starts_with("error kind=corruption"));
    assert!(!tmp.path().join("r.nii").exists());
}

#[test]
fn failing_folds_exit_3_after_writing_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["evaluate", "--out", "rep", "--set", "bonenet.lr=1e30", "--set", "eval.folds=1"];
    args.extend(QUICK);
    let o = marrowcast(&args, tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(diagnostic(&o).starts_with("error kind=fold_failed code=3"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("rep/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failed_folds"], 1);
    assert_eq!(summary["folds"][0]["status"], "failed");
    assert_eq!(summary["folds"][0]["failure"]["class"], "numerical");
}

#[test]
fn risk_map_has_the_input_dims() {
    let (_keep, root) = trained();
    let tmp = tempfile::tempdir().unwrap();
    let g = Geometry::new([80, 72, 5], [1.5, 2.5, 3.0]).unwrap();
    Volume::from_fn(g, |x, y, z| ((x * 7 + y * 3 + z) % 11) as f32 / 11.0)
        .unwrap()
        .save_nifti(tmp.path().join("odd.nii"))
        .unwrap();
    let bonenet = root.join("models/bonenet");
    let lesionnet = root.join("models/lesionnet");
    let cases = [
        (root.join("cohort/P001/i_t.nii"), Geometry::new([96, 96, 16], [2.0, 2.0, 4.0]).unwrap()),
        (tmp.path().join("odd.nii"), g),
    ];
    for (input, expected) in cases {
        let o = marrowcast(
            &[
                "predict",
                "--in",
                input.to_str().unwrap(),
                "--bonenet",
                bonenet.to_str().unwrap(),
                "--lesionnet",
                lesionnet.to_str().unwrap(),
                "--out",
                "out/risk.nii",
                "--bone-out",
                "out/bone.nii",
            ],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let risk = Volume::load_nifti(tmp.path().join("out/risk.nii")).unwrap();
        let bone = Volume::load_nifti(tmp.path().join("out/bone.nii")).unwrap();
        assert_eq!(risk.geometry(), expected);
        assert_eq!(bone.geometry(), expected);
        assert!(risk.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(tmp.path().join("out/provenance.json").exists());
    }
}

#[test]
fn bonenet_bone_source_needs_a_checkpoint() {
    let (_keep, root) = trained();
    let o = marrowcast(
        &["train-lesion", "--data", "cohort", "--out", "m2", "--set", "cascade.bone_source=bonenet"],
        root,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(diagnostic(&o).starts_with("error kind=usage"));
}

#[test]
fn preprocess_records_alignment() {
    let (_keep, root) = trained();
    let tmp = tempfile::tempdir().unwrap();
    let data = root.join("cohort");
    let o = marrowcast(&["preprocess", "--data", data.to_str().unwrap(), "--out", "pre"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = marrowcast_core::phantom::read_manifest(tmp.path().join("pre")).unwrap();
    assert_eq!(manifest.cases.len(), 2);
    for c in &manifest.cases {
        assert!(c.provenance.bias_corrected && c.provenance.normalized);
        assert!(c.provenance.alignment.is_some());
    }
    let regs: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("pre/registration.json")).unwrap()).unwrap();
    for r in regs.as_array().unwrap() {
        let reg = &r["registration"];
        assert!(reg["final_objective"].as_f64().unwrap() <= reg["identity_objective"].as_f64().unwrap());
    }
}

#[test]
fn evaluation_is_independent_of_jobs_and_report_rerenders() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = vec!["evaluate", "--set", "eval.folds=2"];
    base.extend(QUICK);
    let mut runs = Vec::new();
    for (jobs, out) in [("1", "a"), ("2", "b")] {
        let mut args = vec!["--jobs", jobs];
        args.extend(&base);
        args.extend(["--out", out]);
        let o = marrowcast(&args, tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(tmp.path().join(out));
    }
    for name in ["summary.json", "provenance.json", "roc_lesion_all.csv", "risk_maps/P001.nii", "folds/fold_01/bonenet.bin"] {
        assert_eq!(fs::read(runs[0].join(name)).unwrap(), fs::read(runs[1].join(name)).unwrap(), "{name}");
    }

    let dir = &runs[0];
    let svg = fs::read(dir.join("roc_bone.svg")).unwrap();
    let md = fs::read(dir.join("report.md")).unwrap();
    fs::remove_file(dir.join("roc_bone.svg")).unwrap();
    fs::remove_file(dir.join("report.md")).unwrap();
    let o = marrowcast(&["report", "--in", dir.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(dir.join("roc_bone.svg")).unwrap(), svg);
    assert_eq!(fs::read(dir.join("report.md")).unwrap(), md);
    assert_eq!(o.stdout, md);
}
