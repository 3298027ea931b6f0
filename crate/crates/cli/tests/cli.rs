use std::path::Path;
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard};

use fanout_core::demo::{demo_cards, demo_config};
use fanout_core::registry::Registry;
use fanout_core::shm;
use fanout_core::tensor_arena::{create_arena, ArenaLayout, DType, TensorSpec};

fn fanout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fanout"))
        .args(args)
        .output()
        .expect("fanout binary runs")
}

/// Engine runs share one core; running them one at a time keeps rates exact.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let o = fanout(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(fanout(&[]).status.code(), Some(2));
    assert_eq!(fanout(&["bench", "nonsense"]).status.code(), Some(2));
}

#[test]
fn too_few_frames_is_a_config_error() {
    let o = fanout(&["bench", "backbone", "--frames", "50", "-q"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("100 frames"));
    assert_eq!(fanout(&["bench", "parallel", "--tasks", "9", "-q"]).status.code(), Some(2));
}

#[test]
fn broken_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config");
    std::fs::write(&path, "registry = \"r\"\nbogus = 1\n").unwrap();
    assert_eq!(fanout(&["run", "--config", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(fanout(&["run", "--config", "/nonexistent/config"]).status.code(), Some(2));

    let cfg = demo_config("registry");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    std::fs::create_dir(dir.path().join("registry")).unwrap();
    let o = fanout(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "unregistered cards");
}

#[test]
fn registry_commands_register_list_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry");
    let reg_s = reg.to_str().unwrap();
    assert_eq!(fanout(&["registry", "--registry", reg_s, "register"]).status.code(), Some(2));

    let o = fanout(&["registry", "--registry", reg_s, "register", "--demo"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = fanout(&["registry", "--registry", reg_s, "list"]);
    let listed = stdout(&o);
    for name in ["fm: 1", "depth: 1", "segmentation: 1", "detection: 1"] {
        assert!(listed.contains(name), "{listed}");
    }

    let mut card = demo_cards().into_iter().find(|c| c.name == "depth").unwrap();
    card.version = 0;
    card.backend = fanout_core::pipeline::backend::BackendDescriptor::synthetic(1.0, 0.0);
    let file = dir.path().join("depth.json");
    std::fs::write(&file, serde_json::to_vec(&card).unwrap()).unwrap();
    let o = fanout(&["registry", "--registry", reg_s, "register", file.to_str().unwrap()]);
    assert!(stdout(&o).contains("depth@2"), "{}", stdout(&o));

    let ok = fanout(&["registry", "--registry", reg_s, "validate", "--foundation", "fm", "depth@2", "detection"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("valid"));

    let mut bad = card.clone();
    bad.input_specs[0] = TensorSpec::new("final", DType::F32, &[3, 3]).unwrap();
    bad.name = "mismatched".into();
    std::fs::write(&file, serde_json::to_vec(&bad).unwrap()).unwrap();
    fanout(&["registry", "--registry", reg_s, "register", file.to_str().unwrap()]);
    let o = fanout(&["registry", "--registry", reg_s, "validate", "--foundation", "fm", "mismatched"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("dims mismatch"), "{}", stdout(&o));

    std::fs::write(&file, b"{ not json").unwrap();
    let o = fanout(&["registry", "--registry", reg_s, "register", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rate_csv_has_the_documented_header() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rates.csv");
    let o = fanout(&["bench", "rate", "--rates", "10", "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("rate_hz,head,outputs,expected,delta"));
    assert_eq!(lines.count(), 3);
    assert!(stdout(&o).contains("PASS outputs within tolerance"));
}

#[test]
fn clean_removes_regions_left_by_a_crash() {
    let ns = shm::new_namespace();
    let layout = ArenaLayout::new(vec![(0, TensorSpec::new("a", DType::U8, &[64]).unwrap())]).unwrap();
    // A child that creates a region and dies without cleanup.
    let (arena, _) = create_arena(&layout, &ns, "orphan").unwrap();
    std::mem::forget(arena);
    assert!(shm::namespace_dir(&ns).exists());
    let o = fanout(&["clean", "--namespace", &ns]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("removed"));
    assert!(!shm::namespace_dir(&ns).exists());
    let o = fanout(&["clean", "--namespace", &ns]);
    assert!(stdout(&o).contains("nothing to remove"));
    assert_eq!(fanout(&["clean", "--namespace", "../etc"]).status.code(), Some(2));
}

#[test]
fn clean_after_killed_run_removes_its_namespace() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path().join("registry")).unwrap();
    fanout_core::demo::register_demo(&reg).unwrap();
    let mut cfg = demo_config("registry");
    cfg.namespace = format!("crash-{}", std::process::id());
    cfg.input.frames = None;
    let path = dir.path().join("config");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_fanout"))
        .args(["run", "--config", path.to_str().unwrap()])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let dir_ns = shm::namespace_dir(&cfg.namespace);
    let t = std::time::Instant::now();
    while !dir_ns.join("middle").exists() && t.elapsed().as_secs() < 10 {
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    std::thread::sleep(std::time::Duration::from_millis(500));
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(dir_ns.exists(), "a killed coordinator leaves its regions behind");
    // Orphaned workers notice the dead coordinator or are killed here.
    kill_workers_of(&cfg.namespace);
    let o = fanout(&["clean", "--namespace", &cfg.namespace]);
    assert!(o.status.success());
    assert!(!dir_ns.exists());
}

fn kill_workers_of(namespace: &str) {
    let Ok(procs) = std::fs::read_dir("/proc") else { return };
    for p in procs.flatten() {
        let cmdline = std::fs::read(p.path().join("cmdline")).unwrap_or_default();
        if String::from_utf8_lossy(&cmdline).contains(namespace) {
            if let Ok(pid) = p.file_name().to_string_lossy().parse::<i32>() {
                // SAFETY: plain kill(2) on a pid read from /proc.
                unsafe { libc::kill(pid, libc::SIGKILL) };
            }
        }
    }
}

#[test]
fn run_streams_per_head_rates_and_stops() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path().join("registry")).unwrap();
    fanout_core::demo::register_demo(&reg).unwrap();
    let mut cfg = demo_config("registry");
    cfg.input.frames = Some(90);
    let path = dir.path().join("config");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let o = fanout(&["run", "--config", path.to_str().unwrap(), "--duration", "10"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    let ticks: Vec<&str> = out.lines().filter(|l| l.starts_with("t=")).collect();
    assert!(ticks.len() >= 2, "{out}");
    for head in ["depth=", "segmentation=", "detection="] {
        assert!(ticks[0].contains(head), "{out}");
    }
    assert!(out.contains("stopped cleanly"));
    assert!(Path::new(&dir.path().join("metrics.csv")).exists());
}
