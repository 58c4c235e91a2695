use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[training]
short_horizon = 4
long_horizon = 10
loss_horizon = 3
batch_size = 2
iterations = 3
validation_every = 0

[net]
fc_widths = [16]

[experiment]
horizons = [5]
repetitions = 1
noise = 0.0
validation_states = 4
search_budget = 2
search_samples = 3
clone_samples = 8
clone_epochs = 2
output_dir = "small"
"#;

fn zipmpc(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zipmpc"))
        .args(args)
        .env("ZIPMPC_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn track_check_succeeds_on_builtin_tracks() {
    let dir = tempfile::tempdir().unwrap();
    let out = zipmpc(dir.path(), &["track", "check", "train", "test1", "test2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[train]") && text.contains("[test2]"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[training]\nshort_horizon = 30\nlong_horizon = 10\n").unwrap();
    assert_eq!(code(&zipmpc(dir.path(), &["-c", bad.to_str().unwrap(), "train"])), 1);
    std::fs::write(&bad, "[nonsense]\nx = 1\n").unwrap();
    assert_eq!(code(&zipmpc(dir.path(), &["-c", bad.to_str().unwrap(), "train"])), 1);
    assert_eq!(code(&zipmpc(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&zipmpc(dir.path(), &["track", "check", "nowhere"])), 1);
    assert_eq!(code(&zipmpc(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_checkpoint_is_not_success() {
    let dir = tempfile::tempdir().unwrap();
    let out = zipmpc(dir.path(), &["export-plots"]);
    assert_ne!(code(&out), 0);
}

#[test]
fn train_then_inspect_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    let run = dir.path().join("small");

    let out = zipmpc(dir.path(), &["-c", c, "train"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("best.bin").is_file());
    assert!(run.join("config.toml").is_file());

    let out = zipmpc(dir.path(), &["costnet", "info", run.join("best.bin").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(!out.stdout.is_empty());

    let out = zipmpc(dir.path(), &["-c", c, "evaluate-imitation"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("imitation.csv").is_file());

    let out = zipmpc(dir.path(), &["-c", c, "export-plots"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("plots/summary.json").is_file());
}

#[test]
fn gradcheck_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("g");
    let out = zipmpc(
        dir.path(),
        &["-r", run.to_str().unwrap(), "gradcheck", "--horizon", "3", "--instances", "1", "--entries", "10"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run.join("gradcheck_0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}
