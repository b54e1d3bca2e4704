use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ualangevin"));
    c.env_remove("LANGEVIN_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ualangevin")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

fn header_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .filter_map(|l| l.strip_prefix("# "))
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
}

#[test]
fn table_orth_is_byte_identical_across_runs() {
    let args = ["table-orth", "--m", "2", "--traj", "300", "--seed", "1"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.lines().any(|l| l == "m,dim,codim,J_ref,J_ua,err_ua,J_ec,err_ec"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("2,1,3,"));
}

#[test]
fn thread_count_does_not_change_results() {
    let base = ["table-orth", "--m", "2", "--traj", "200", "--seed", "5"];
    let one = run(&[&base[..], &["--threads", "1"]].concat());
    let three = run(&[&base[..], &["--threads", "3"]].concat());
    assert_eq!(one.stdout, three.stdout);
}

#[test]
fn sweep_eps_emits_one_row_per_eps_and_scheme() {
    let o = run(&["sweep-eps", "--preset", "torus", "--h-exp", "9", "--h-ref-exp", "9", "--traj", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text
        .lines()
        .any(|l| l == "eps,h,scheme,estimate,stderr,error_vs_ref,M,mean_fp_iters,diverged,wall_s"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 21 * 3);
    for r in &rows {
        assert_eq!(r.split(',').count(), 10, "{r}");
    }
    assert!(rows[0].starts_with("1.0000000000000000e0,1.9531250000000000e-2,ua,"));
    assert!(rows.last().unwrap().starts_with("9.5367431640625000e-7,"));
    assert_eq!(header_value(&text, "seed"), Some("0"));
}

#[test]
fn flags_beat_file_and_file_beats_environment() {
    let dir = std::env::temp_dir().join(format!("ualangevin-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "[experiment]\ntraj = 3\neps = 0.25\n[run]\nseed = 11\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    let o = bin().env("LANGEVIN_SEED", "99").args(["simulate", "--config", cfg, "--eps", "0.5"]).output().unwrap();
    let text = stdout(&o);
    assert_eq!(header_value(&text, "eps"), Some("5.0000000000000000e-1"));
    assert_eq!(header_value(&text, "traj"), Some("3"));
    assert_eq!(header_value(&text, "seed"), Some("11"));

    let o = bin().env("LANGEVIN_SEED", "99").args(["simulate", "--traj", "2"]).output().unwrap();
    assert_eq!(header_value(&stdout(&o), "seed"), Some("99"));
    let o = bin().env("LANGEVIN_SEED", "99").args(["simulate", "--traj", "2", "--seed", "7"]).output().unwrap();
    assert_eq!(header_value(&stdout(&o), "seed"), Some("7"));
}

#[test]
fn output_flag_writes_file() {
    let path = std::env::temp_dir().join(format!("ualangevin-out-{}.csv", std::process::id()));
    let o = run(&["simulate", "--traj", "2", "--output", path.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(data_rows(&text).len(), 1);
    std::fs::remove_file(path).ok();
}

#[test]
fn bad_configuration_names_the_key() {
    let o = run(&["simulate", "--scheme", "rk4"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("`scheme`"));

    let dir = std::env::temp_dir().join(format!("ualangevin-bad-{}.cfg", std::process::id()));
    std::fs::write(&dir, "[experiment]\nstepsize = 1\n").unwrap();
    let o = run(&["simulate", "--config", dir.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("`stepsize`"));
    std::fs::remove_file(dir).ok();

    let o = bin().env("LANGEVIN_SEED", "abc").args(["simulate"]).output().unwrap();
    assert!(String::from_utf8_lossy(&o.stderr).contains("LANGEVIN_SEED"));
}

#[test]
fn check_passes() {
    let o = run(&["check"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}
