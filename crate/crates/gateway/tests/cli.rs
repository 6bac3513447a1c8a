use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pdp(args: &[&str], env_config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pdp"));
    cmd.args(args).env_remove("PDP_CONFIG");
    if let Some(p) = env_config {
        cmd.env("PDP_CONFIG", p);
    }
    cmd.output().unwrap()
}

fn config_file(dir: &Path, storage: &Path) -> PathBuf {
    let path = dir.join(format!(
        "pdp-{}.toml",
        storage.file_name().unwrap().to_string_lossy()
    ));
    fs::write(
        &path,
        format!("storage_dir = {:?}\n", storage.to_str().unwrap()),
    )
    .unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../scanner/tests/fixtures/corpus")
}

#[test]
fn demo_is_deterministic_and_refuses_used_storage() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let cfg = config_file(dir.path(), &dir.path().join(name));
        let out = pdp(
            &["demo", "--seed", "1", "--config", cfg.to_str().unwrap()],
            None,
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        runs.push(stdout(&out));
    }
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].contains("consented->not_consented"), "{}", runs[0]);
    let cfg = config_file(dir.path(), &dir.path().join("a"));
    let out = pdp(
        &["demo", "--seed", "1", "--config", cfg.to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("storage already holds data"));
}

#[test]
fn env_config_takes_precedence_over_flag() {
    let dir = tempfile::tempdir().unwrap();
    let flag = config_file(dir.path(), &dir.path().join("flag"));
    let env = config_file(dir.path(), &dir.path().join("env"));
    let out = pdp(&["demo", "--config", flag.to_str().unwrap()], Some(&env));
    assert!(out.status.success());
    assert!(dir.path().join("env/journal.ndjson").exists());
    assert!(!dir.path().join("flag").exists());
}

#[test]
fn backup_and_restore_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(dir.path(), &dir.path().join("data"));
    let cfg = cfg.to_str().unwrap();
    assert!(pdp(&["demo", "--config", cfg], None).status.success());
    let out = pdp(&["backup", "--config", cfg], None);
    assert!(out.status.success());
    let snap = stdout(&out).trim().to_string();
    assert!(snap.starts_with("snap-"), "{snap}");
    assert!(pdp(&["restore", &snap, "--config", cfg], None)
        .status
        .success());
    let out = pdp(&["restore", "snap-999999", "--config", cfg], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn scan_and_diff_gate_on_added_markers() {
    let dir = tempfile::tempdir().unwrap();
    let old = dir.path().join("old.json");
    let out = pdp(
        &[
            "scan",
            corpus().to_str().unwrap(),
            "--out",
            old.to_str().unwrap(),
        ],
        None,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let map: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&old).unwrap()).unwrap();
    assert_eq!(map.len(), 7);

    // Shifting a file's lines only moves markers.
    let tree = dir.path().join("tree");
    copy_dir(&corpus(), &tree);
    let ts = tree.join("web/profile.ts");
    fs::write(
        &ts,
        format!("// header\n\n{}", fs::read_to_string(&ts).unwrap()),
    )
    .unwrap();
    let shifted = dir.path().join("shifted.json");
    pdp(
        &[
            "scan",
            tree.to_str().unwrap(),
            "--out",
            shifted.to_str().unwrap(),
        ],
        None,
    );
    let out = pdp(
        &["diff", old.to_str().unwrap(), shifted.to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(0));
    let d: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(d["moved"].as_array().unwrap().len(), 3);

    fs::write(
        tree.join("src/new.py"),
        "# @PersonalData(category=\"phone\")\n",
    )
    .unwrap();
    let added = dir.path().join("added.json");
    pdp(
        &[
            "scan",
            tree.to_str().unwrap(),
            "--out",
            added.to_str().unwrap(),
        ],
        None,
    );
    let out = pdp(
        &["diff", old.to_str().unwrap(), added.to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(3));

    let out = pdp(
        &["scan", dir.path().join("nowhere").to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.path().is_dir() {
            copy_dir(&e.path(), &to.join(e.file_name()));
        } else {
            fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}
