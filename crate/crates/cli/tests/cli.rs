use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn nopvis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nopvis"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn demo_app(dir: &Path) -> PathBuf {
    let app = dir.join("app");
    fs::create_dir_all(&app).unwrap();
    fs::copy(
        fixtures().join("demo_original.smali"),
        app.join("Demo.smali"),
    )
    .unwrap();
    app
}

#[test]
fn parse_reports_methods() {
    let o = nopvis(&["parse", path(&fixtures().join("demo_original.smali"))]);
    assert_eq!(code(&o), 0, "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.to_string().contains("addTwoIntegers"));
}

#[test]
fn missing_input_is_exit_2() {
    let o = nopvis(&["parse", "/nonexistent/x.smali"]);
    assert_eq!(code(&o), 2);
    let o = nopvis(&["inject", "--variant", "bogus", "/tmp"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ccc_from_diff_matches_demo_values() {
    let f = fixtures();
    let o = nopvis(&[
        "ccc",
        "--original",
        path(&f.join("demo_original.smali")),
        "--modified",
        path(&f.join("demo_condition.smali")),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["ccc"].as_f64().unwrap() - 0.6488).abs() < 1e-4);
    assert_eq!(v["c3"], 0.5);
}

#[test]
fn csv_output_gets_json_mirror() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let f = fixtures();
    let o = nopvis(&[
        "ccc",
        "--original",
        path(&f.join("demo_original.smali")),
        "--modified",
        path(&f.join("demo_nops.smali")),
        "--format",
        "csv",
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("# nopvis ccc v1\n"), "{csv}");
    assert!(csv.contains("app_id,sites,c1,c2,c3,ccc"));
    let mirror: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(mirror["ccc"], 1.0);
}

#[test]
fn empty_manifest_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    fs::write(&m, r#"{"app_id": "x", "sites": []}"#).unwrap();
    let o = nopvis(&["ccc", "--manifest", path(&m)]);
    assert_eq!(code(&o), 3, "{o:?}");
}

#[test]
fn invalid_weights_are_exit_2() {
    let f = fixtures();
    let o = nopvis(&[
        "ccc",
        "--original",
        path(&f.join("demo_original.smali")),
        "--modified",
        path(&f.join("demo_nops.smali")),
        "--weights",
        "0.5,0.5,0.5",
    ]);
    assert_eq!(code(&o), 2, "{o:?}");
}

#[test]
fn inject_then_verify_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let app = demo_app(dir.path());
    for variant in ["nop", "sio", "imi"] {
        let out = dir.path().join(variant);
        let o = nopvis(&[
            "inject",
            "--variant",
            variant,
            "--payload",
            "xor-int,mul-int",
            path(&app),
            "--out",
            path(&out),
        ]);
        assert_eq!(code(&o), 0, "{variant}: {o:?}");
        let manifest = out.join("manifest.json");
        assert!(manifest.exists());

        let o = nopvis(&[
            "verify",
            path(&app.join("Demo.smali")),
            path(&out.join("Demo.smali")),
            "--trials",
            "200",
        ]);
        assert_eq!(code(&o), 0, "{variant}: {o:?}");

        let o = nopvis(&["ccc", "--manifest", path(&manifest)]);
        assert_eq!(code(&o), 0, "{variant}: {o:?}");
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        let c = v["ccc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&c));
        if variant == "nop" {
            assert_eq!(c, 1.0);
        }
    }
}

#[test]
fn verify_detects_a_changed_function() {
    let dir = tempfile::tempdir().unwrap();
    let changed = dir.path().join("Changed.smali");
    let text = fs::read_to_string(fixtures().join("demo_original.smali"))
        .unwrap()
        .replace("add-int v0, v1, v2", "sub-int v0, v1, v2");
    fs::write(&changed, text).unwrap();
    let o = nopvis(&[
        "verify",
        path(&fixtures().join("demo_original.smali")),
        path(&changed),
        "--method",
        "addTwoIntegers",
    ]);
    assert_eq!(code(&o), 1, "{o:?}");
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let model = dir.path().join("model.json");
    let o = nopvis(&[
        "gen-corpus",
        "--apps-per-class",
        "30",
        "--methods-per-app",
        "12",
        "--out",
        path(&corpus),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(corpus.join("benign").is_dir() && corpus.join("malware").is_dir());

    let o = nopvis(&[
        "train",
        "--corpus",
        path(&corpus),
        "--epochs",
        "10",
        "--out",
        path(&model),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(model.exists());

    let o = nopvis(&["eval", "--model", path(&model), "--corpus", path(&corpus)]);
    assert_eq!(code(&o), 0, "{o:?}");

    let extracted = nopvis(&[
        "extract",
        path(&corpus.join("malware").join("malware-0000")),
        "--max-len",
        "64",
    ]);
    assert_eq!(code(&extracted), 0, "{extracted:?}");

    let trace = dir.path().join("trace.jsonl");
    let o = nopvis(&[
        "attack",
        "--model",
        path(&model),
        "--corpus",
        path(&corpus),
        "--split",
        "all",
        "--variant",
        "imi",
        "--trace",
        path(&trace),
        "--format",
        "csv",
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).starts_with("# nopvis attack v1"));
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 30);

    let sweep = dir.path().join("sweep.csv");
    let o = nopvis(&[
        "sweep",
        "--model",
        path(&model),
        "--corpus",
        path(&corpus),
        "--split",
        "all",
        "--lengths",
        "1,4,16",
        "--format",
        "csv",
        "--out",
        path(&sweep),
    ]);
    assert!(matches!(code(&o), 0 | 3), "{o:?}");
    let csv = fs::read_to_string(&sweep).unwrap();
    assert!(csv.contains("# seed=7 spearman="), "{csv}");
    assert!(dir.path().join("sweep.json").exists());

    let o = nopvis(&[
        "sweep",
        "--model",
        path(&model),
        "--corpus",
        path(&corpus),
        "--lengths",
        "4,2",
    ]);
    assert_eq!(code(&o), 2, "{o:?}");
}
