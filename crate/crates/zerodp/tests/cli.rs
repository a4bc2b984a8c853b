use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_zerodp");
const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/fragmentation.trace");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ZERODP_SEED")
        .env_remove("ZERODP_ROSTER")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn digest(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("# digest="))
        .expect("digest line")
        .to_owned()
}

#[test]
fn plan_examples() {
    let o = run(&["plan", "--psi", "1e12", "--dp", "1024", "--stage", "os+g+p"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("\ntotal,15625000000,15.6\n"));
    let o = run(&["plan", "--table", "fig1"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("# schema=1\n"));
}

#[test]
fn plan_usage_errors_exit_2() {
    assert_eq!(run(&["plan"]).status.code(), Some(2));
    assert_eq!(run(&["plan", "--psi", "-5"]).status.code(), Some(2));
    assert_eq!(run(&["plan", "--table", "table9"]).status.code(), Some(2));
}

#[test]
fn train_is_deterministic_across_stages_and_transports() {
    let base = run(&["train", "--steps", "4", "--stage", "base"]);
    assert!(base.status.success());
    let text = stdout(&base);
    assert!(text.contains("step,loss,sent_elements,state_bytes"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert_eq!(
        digest(&run(&["train", "--steps", "4", "--stage", "base"])),
        digest(&base)
    );
    assert_eq!(
        digest(&run(&["train", "--steps", "4", "--stage", "os+g+p"])),
        digest(&base)
    );
    let tcp = run(&[
        "train",
        "--steps",
        "4",
        "--stage",
        "os+g",
        "--transport",
        "tcp",
    ]);
    assert!(
        tcp.status.success(),
        "{}",
        String::from_utf8_lossy(&tcp.stderr)
    );
    assert_eq!(digest(&tcp), digest(&base));
}

#[test]
fn seed_comes_from_environment_unless_flagged() {
    let flag = run(&["train", "--steps", "2", "--seed", "3"]);
    let env = Command::new(BIN)
        .args(["train", "--steps", "2"])
        .env("ZERODP_SEED", "3")
        .output()
        .unwrap();
    assert_eq!(digest(&env), digest(&flag));
    assert_ne!(digest(&run(&["train", "--steps", "2"])), digest(&flag));
}

#[test]
fn config_file_sits_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "steps = 2\nstage = os\nranks = 2\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = run(&["train", "--config", cfg]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o).lines().filter(|l| !l.starts_with('#')).count(),
        3
    );
    let o = run(&["train", "--config", cfg, "--steps", "1"]);
    assert_eq!(
        stdout(&o).lines().filter(|l| !l.starts_with('#')).count(),
        2
    );
    std::fs::write(dir.path().join("bad.cfg"), "colour = red\n").unwrap();
    let bad = dir.path().join("bad.cfg");
    assert_eq!(
        run(&["train", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn train_writes_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("steps.csv");
    let o = run(&["train", "--steps", "2", "--output", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("digest="));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("# schema=1\nstep,"));
}

#[test]
fn verify_exit_codes() {
    assert_eq!(run(&["verify", "--steps", "5"]).status.code(), Some(0));
    assert_eq!(
        run(&["verify", "--steps", "2", "--ranks-list", "1"])
            .status
            .code(),
        Some(0)
    );
    let o = run(&[
        "verify",
        "--steps",
        "5",
        "--ranks-list",
        "4",
        "--fault",
        "3:17:0.5",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("step 3 index 17"), "{err}");
    assert!(stdout(&o).contains("4,os+g,diverged,"));
    assert_eq!(run(&["verify", "--ranks-list", "3"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "--fault", "3:x"]).status.code(), Some(2));
}

#[test]
fn frag_fixture_and_policies() {
    let o = run(&["frag", "--trace", FIXTURE]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("interleaved,49,") && rows[0].contains(",true,"));
    assert!(rows[1].starts_with("md_defrag,49,") && rows[1].contains(",false,"));
    let one = run(&["frag", "--trace", FIXTURE, "--policy", "interleaved"]);
    assert_eq!(stdout(&one).lines().count(), 3);
}

#[test]
fn frag_empty_and_malformed_traces() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.trace");
    std::fs::write(&empty, "").unwrap();
    let o = run(&[
        "frag",
        "--trace",
        empty.to_str().unwrap(),
        "--capacity",
        "64",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("interleaved,64,0,false,"));
    let bad = dir.path().join("bad.trace");
    std::fs::write(&bad, "alloc a 4 short\nfree b\n").unwrap();
    let o = run(&["frag", "--trace", bad.to_str().unwrap(), "--capacity", "64"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&bad, "alloc a four short\n").unwrap();
    let o = run(&["frag", "--trace", bad.to_str().unwrap(), "--capacity", "64"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        run(&[
            "frag",
            "--trace",
            dir.path().join("missing").to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn report_agrees() {
    let o = run(&["report", "--steps", "1", "--ranks-list", "1,2,4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2 + 12);
    assert!(text.lines().skip(2).all(|l| l.ends_with(",true")));
}
