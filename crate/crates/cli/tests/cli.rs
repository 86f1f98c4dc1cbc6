use std::path::Path;
use std::process::{Command, Output};

fn kvsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvsim"))
        .args(args)
        .current_dir(cwd)
        .env_remove("KVSIM_OUTPUT_ROOT")
        .output()
        .expect("spawn kvsim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 3
policies = ["recompute", "symphony"]

[cluster]
nodes = 2

[workload]
sessions = 30
users = [4, 8]
"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn validate_config_prints_filled_document() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = kvsim(&["validate-config", &cfg], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("nodes = 2"));
    assert!(text.contains("hbm_capacity"));
    // The printed document parses back to the same settings.
    let again = dir.path().join("again.toml");
    std::fs::write(&again, &text).unwrap();
    let o2 = kvsim(&["validate-config", again.to_str().unwrap()], dir.path());
    assert!(o2.status.success(), "{}", stderr(&o2));
    assert_eq!(stdout(&o2), text);
}

#[test]
fn validate_config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[cluster]\nnodes = 2\nhbm = 3\n").unwrap();
    let o = kvsim(&["validate-config", p.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("hbm"), "{}", stderr(&o));
}

#[test]
fn gen_trace_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let o = kvsim(
        &["gen-trace", "--preset", "single-turn", "--sessions", "40", "--users", "4", "-o", "single.jsonl"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("multi-turn     0.000"), "{}", stdout(&o));
    assert!(dir.path().join("single.jsonl").exists());

    let o = kvsim(&["gen-trace", "--sessions", "1000", "--users", "64", "-o", "chat.jsonl"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("multi-turn     0.734"), "{}", stdout(&o));
}

#[test]
fn run_writes_one_directory_per_cell_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = kvsim(&["run", "-c", &cfg, "-o", "out", "-j", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let cells = ["recompute_4_3", "symphony_4_3", "recompute_8_3", "symphony_8_3"];
    for c in cells {
        for f in ["report.json", "requests.csv", "config.toml"] {
            assert!(dir.path().join("out").join(c).join(f).exists(), "{c}/{f}");
        }
    }
    assert_eq!(std::fs::read_dir(dir.path().join("out")).unwrap().count(), 4);
    let first = std::fs::read(dir.path().join("out/symphony_8_3/report.json")).unwrap();

    let again = kvsim(&["run", "-c", &cfg, "-o", "out"], dir.path());
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));

    let forced = kvsim(&["run", "-c", &cfg, "-o", "out", "--force", "-j", "1"], dir.path());
    assert!(forced.status.success(), "{}", stderr(&forced));
    assert_eq!(std::fs::read(dir.path().join("out/symphony_8_3/report.json")).unwrap(), first);

    // A cell's provenance config reproduces that cell on its own.
    let prov = dir.path().join("out/symphony_8_3/config.toml");
    let o = kvsim(&["run", "-c", prov.to_str().unwrap(), "-o", "replay"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("replay/symphony_8_3/report.json")).unwrap(), first);
}

#[test]
fn flags_override_file_and_env_sets_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_kvsim"))
        .args(["run", "-c", &cfg, "--policies", "swap", "--users", "5", "--seed", "9"])
        .current_dir(dir.path())
        .env("KVSIM_OUTPUT_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let entries: Vec<String> = std::fs::read_dir(dir.path().join("root"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries, vec!["swap_5_9".to_string()]);
}

#[test]
fn failed_cell_gives_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("short.toml");
    // Every cell outlives a one-second guard.
    std::fs::write(
        &p,
        "policies = [\"recompute\"]\n[cluster]\nnodes = 1\nmax_sim_time_s = 1.0\n[workload]\nsessions = 20\nusers = [2]\n",
    )
    .unwrap();
    let o = kvsim(&["run", "-c", p.to_str().unwrap(), "-o", "out"], dir.path());
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAILED"), "{}", stdout(&o));
}

#[test]
fn compare_tables_and_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = kvsim(&["run", "-c", &cfg, "-o", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let o = kvsim(&["compare", "out/recompute_8_3", "out/recompute_8_3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for row in lines {
        for (h, v) in header.iter().zip(row.split(',')) {
            if h.ends_with("_ratio") {
                assert_eq!(v, "1.0", "{h}");
            }
        }
    }

    let o = kvsim(&["compare", "out/recompute_8_3", "out/symphony_8_3", "-o", "table.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("symphony_8_3"));

    let o = kvsim(&["compare", "out/recompute_4_3", "out/symphony_8_3"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("out/symphony_8_3"), "{}", stderr(&o));
}
