use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_ifa");

fn ifa(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("running ifa")
}

fn ok(args: &[&str]) -> Output {
    let out = ifa(args);
    assert!(
        out.status.success(),
        "ifa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Small dataset, two epochs of training, archive with all gradients.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        ok(&[
            "refnet",
            "gen",
            "--seed",
            "3",
            "--n",
            "96",
            "--out",
            p(&f.path("d.isd")),
        ]);
        ok(&[
            "refnet",
            "train",
            "--data",
            p(&f.path("d.isd")),
            "--epochs",
            "2",
            "--out",
            p(&f.path("m.irn")),
        ]);
        ok(&[
            "refnet",
            "dump",
            "--model",
            p(&f.path("m.irn")),
            "--data",
            p(&f.path("d.isd")),
            "--out",
            p(&f.path("arc")),
        ]);
        f
    })
}

#[test]
fn dumped_archive_validates_clean() {
    let f = fixture();
    let out = ok(&["validate", p(&f.path("arc")), "--json", p(&f.path("validate.json"))]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 findings"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(f.path("validate.json")).unwrap()).unwrap();
    assert_eq!(report["findings"].as_array().unwrap().len(), 0);
}

#[test]
fn unified_im_is_worker_count_invariant() {
    let f = fixture();
    let mut outputs = Vec::new();
    for w in ["1", "8"] {
        let csv = f.path(&format!("im_w{w}.csv"));
        ok(&[
            "--workers",
            w,
            "im",
            "--archive",
            p(&f.path("arc")),
            "--unified",
            "--out",
            p(&csv),
        ]);
        outputs.push(std::fs::read(&csv).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn exact_stats_are_worker_count_invariant() {
    let f = fixture();
    let mut outputs = Vec::new();
    for w in ["1", "3", "8"] {
        let json = f.path(&format!("stats_w{w}.json"));
        ok(&[
            "--workers",
            w,
            "stats",
            "--archive",
            p(&f.path("arc")),
            "--class",
            "true",
            "--out",
            p(&json),
        ]);
        outputs.push(std::fs::read(&json).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn common_scale_without_stats_is_a_usage_error() {
    let f = fixture();
    let out = ifa(&[
        "cam",
        "--archive",
        p(&f.path("arc")),
        "--class",
        "0",
        "--scale",
        "common",
        "--out",
        p(&f.path("nocams")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--stats"));
    assert!(!f.path("nocams").exists());
}

#[test]
fn exit_codes() {
    let f = fixture();
    assert_eq!(ifa(&["--help"]).status.code(), Some(0));
    assert_eq!(
        ifa(&[
            "stats",
            "--archive",
            "x",
            "--class",
            "0",
            "--scheme",
            "nope",
            "--out",
            "y"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(ifa(&["validate", p(&f.path("missing"))]).status.code(), Some(3));
    let missing = ifa(&[
        "stats",
        "--archive",
        p(&f.path("missing")),
        "--class",
        "0",
        "--out",
        p(&f.path("s.json")),
    ]);
    assert_eq!(missing.status.code(), Some(4));

    let bad = f.path("bad_results.json");
    std::fs::write(&bad, r#"[{"sample_id": 0, "Y": 0.0, "O": 0.5}]"#).unwrap();
    let out = ifa(&[
        "eval",
        "incdrop",
        "collect",
        "--results",
        p(&bad),
        "--out",
        p(&f.path("bad.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let f = fixture();
    let arc = f.path("arc");
    let stats = f.path("p_stats.json");
    let cams = f.path("p_cams");
    ok(&[
        "stats",
        "--archive",
        p(&arc),
        "--class",
        "1",
        "--scheme",
        "xgrad-cam",
        "--out",
        p(&stats),
    ]);
    ok(&[
        "im",
        "--archive",
        p(&arc),
        "--unified",
        "--out",
        p(&f.path("p_im.csv")),
        "--top-pct",
        "25",
        "--mask-out",
        p(&f.path("p_mask.json")),
    ]);
    ok(&[
        "cam",
        "--archive",
        p(&arc),
        "--class",
        "1",
        "--scheme",
        "xgrad-cam",
        "--scale",
        "common",
        "--stats",
        p(&stats),
        "--mask",
        p(&f.path("p_mask.json")),
        "--size",
        "32x32",
        "--out",
        p(&cams),
    ]);
    ok(&[
        "eval",
        "consistency",
        "--archive",
        p(&arc),
        "--cams",
        p(&cams),
        "--out",
        p(&f.path("p_cons.json")),
        "--csv",
        p(&f.path("p_cons.csv")),
    ]);
    let csv = std::fs::read_to_string(f.path("p_cons.csv")).unwrap();
    assert!(csv.starts_with("sample_id,cam_sum,logit\n"));
    assert_eq!(csv.lines().count(), 97);

    ok(&[
        "eval",
        "mask-acc",
        "--archive",
        p(&arc),
        "--im",
        p(&f.path("p_im.csv")),
        "--top-pct",
        "25",
        "--rows",
        "union",
        "--out",
        p(&f.path("p_acc.json")),
    ]);
    let acc: serde_json::Value = serde_json::from_slice(&std::fs::read(f.path("p_acc.json")).unwrap()).unwrap();
    assert_eq!(acc["n"], 96);

    let jobs = f.path("p_jobs");
    ok(&[
        "eval",
        "incdrop",
        "emit",
        "--archive",
        p(&arc),
        "--cams",
        p(&cams),
        "--jobs",
        p(&jobs),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(jobs.join("manifest.json")).unwrap()).unwrap();
    let job_list = manifest["jobs"].as_array().unwrap();
    assert_eq!(job_list.len(), 96);
    let mask_file = jobs.join(job_list[0]["mask_file"].as_str().unwrap());
    let mask = ifa_core::campipe::read_cam_file(&mask_file).unwrap();
    assert_eq!(mask.dims, (32, 32));
    assert!(mask.data.iter().all(|v| (0.0..=1.0).contains(v)));

    let results: Vec<serde_json::Value> = (0..96)
        .map(|i| serde_json::json!({"sample_id": i, "Y": 0.5, "O": if i % 2 == 0 { 0.75 } else { 0.25 }}))
        .collect();
    std::fs::write(f.path("p_results.json"), serde_json::to_vec(&results).unwrap()).unwrap();
    ok(&[
        "eval",
        "incdrop",
        "collect",
        "--results",
        p(&f.path("p_results.json")),
        "--jobs",
        p(&jobs),
        "--out",
        p(&f.path("p_incdrop.json")),
    ]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(f.path("p_incdrop.json")).unwrap()).unwrap();
    assert_eq!(r["average_increase"], 50.0);
    assert_eq!(r["average_drop"], 25.0);

    ok(&[
        "render",
        "--cams",
        p(&cams),
        "--out",
        p(&f.path("p_png")),
        "--overlay",
        "--archive",
        p(&arc),
    ]);
    let png = f.path("p_png").join("0_1_xgrad-cam_common.png");
    assert!(std::fs::read(png).unwrap().starts_with(b"\x89PNG"));
}

#[test]
fn config_file_supplies_missing_flags() {
    let f = fixture();
    let cfg = f.path("cfg.toml");
    std::fs::write(
        &cfg,
        "workers = 2\nscheme = \"pixelwise-grad\"\n\n[cam]\nscale = \"raw\"\nclass = 0\n",
    )
    .unwrap();
    let out_dir = f.path("cfg_cams");
    ok(&[
        "--config",
        p(&cfg),
        "cam",
        "--archive",
        p(&f.path("arc")),
        "--out",
        p(&out_dir),
    ]);
    let index = std::fs::read_to_string(out_dir.join("index.json")).unwrap();
    assert!(index.contains("pixelwise-grad"), "{index}");

    // flags on the command line win over the file
    let out_dir2 = f.path("cfg_cams2");
    ok(&[
        "--config",
        p(&cfg),
        "cam",
        "--archive",
        p(&f.path("arc")),
        "--scheme",
        "grad-cam",
        "--out",
        p(&out_dir2),
    ]);
    let index = std::fs::read_to_string(out_dir2.join("index.json")).unwrap();
    assert!(!index.contains("pixelwise-grad"));

    let bad = f.path("bad_cfg.toml");
    std::fs::write(&bad, "[cam]\nbogus = 1\n").unwrap();
    let out = ifa(&[
        "--config",
        p(&bad),
        "cam",
        "--archive",
        "x",
        "--class",
        "0",
        "--out",
        "y",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
