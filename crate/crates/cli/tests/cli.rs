use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use popbandit::gradcheck::GradInstance;
use popbandit_cli::{gradcheck_with, write_all};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_popbandit"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const LIGHT_GP: &str = r#""gp": {"restarts": 0, "max_iters": 10}, "acquisition": {"n_candidates": 50, "n_refine_steps": 5}"#;

#[test]
fn run_writes_one_csv_per_seed_plus_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let seeds: Vec<String> = (0..20).map(|s| s.to_string()).collect();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &format!(
            r#"{{"strategy": "pbt", "B": 4, "T_rounds": 10, "seeds": [{}], "output": "{}"}}"#,
            seeds.join(","),
            out.display()
        ),
    );
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 21);
    assert!(names.contains(&"pbt_summary.csv".to_string()));

    let text = fs::read_to_string(out.join("pbt_seed3.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,agent,strategy,seed,h,x_0,f,regret,cum_regret"
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&first[..4], &["1", "0", "pbt", "3"]);
    assert!(first[4] == "sin" || first[4] == "cos");
    assert_eq!(text.lines().count(), 1 + 40);

    let summary = fs::read_to_string(out.join("pbt_summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "round,mean,sem");
    assert_eq!(summary.lines().count(), 11);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"strategy": "pbt", "T_rounds": 3, "seeds": [0, 1, 2], "output": "/nonexistent/never"}"#,
    );
    let out = dir.path().join("flagged");
    let o = bin()
        .args([
            "run",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--strategy",
            "random",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("random_seed7.csv").exists());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2);
}

#[test]
fn missing_strategy_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"seeds": [0]}"#);
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("strategy"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "garbled.json", "{not json");
    assert_eq!(
        bin().arg("run").arg(&cfg).output().unwrap().status.code(),
        Some(2)
    );
    let o = bin()
        .arg("run")
        .arg(dir.path().join("absent.json"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &format!(
            r#"{{"strategy": "random", "T_rounds": 2, "seeds": [0], "output": "{}"}}"#,
            blocker.join("sub").display()
        ),
    );
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn failed_writes_leave_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let files = vec![
        ("a.csv".to_string(), b"1\n".to_vec()),
        ("missing/b.csv".to_string(), b"2\n".to_vec()),
    ];
    assert!(write_all(dir.path(), &files).is_err());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn compare_writes_wide_table_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let cfg = write_config(
        dir.path(),
        "cmp.json",
        &format!(
            r#"{{"strategies": ["random", "pbt", "pb2-rand", "pb2-mult", "pb2-mix"], "B": 4, "T_rounds": 6,
                "seeds": [0, 1], {LIGHT_GP}, "output": "{}"}}"#,
            out.display()
        ),
    );
    let o = bin().arg("compare").arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final mean cumulative regret:"));
    let first = fs::read_to_string(out.join("compare.csv")).unwrap();
    let header: Vec<&str> = first.lines().next().unwrap().split(',').collect();
    assert_eq!(
        header,
        ["round", "random", "pbt", "pb2-rand", "pb2-mult", "pb2-mix"]
    );
    assert_eq!(first.lines().count(), 7);

    let o = bin().arg("compare").arg(&cfg).output().unwrap();
    assert!(o.status.success());
    let second = fs::read_to_string(out.join("compare.csv")).unwrap();
    let random_col = |s: &str| {
        s.lines()
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(random_col(&first), random_col(&second));
    assert_eq!(first, second);
}

#[test]
fn compare_with_one_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one");
    let cfg = write_config(
        dir.path(),
        "one.json",
        &format!(
            r#"{{"strategy": "pbt", "T_rounds": 4, "seeds": [0, 1], "output": "{}"}}"#,
            out.display()
        ),
    );
    let o = bin().arg("compare").arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "round,pbt");
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let a = bin().args(["gradcheck", "--seed", "4"]).output().unwrap();
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    let text = stdout(&a);
    assert_eq!(
        text.lines().filter(|l| l.contains("max_rel_err")).count(),
        7
    );
    for name in [
        "eps1",
        "eps2",
        "lengthscale",
        "sigma1",
        "sigma2",
        "lambda",
        "noise",
    ] {
        assert!(text.contains(name));
    }
    let b = bin().args(["gradcheck", "--seed", "4"]).output().unwrap();
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn gradcheck_flags_a_flipped_lambda_partial() {
    let mut buf = Vec::new();
    let code = gradcheck_with(
        0,
        |inst: &GradInstance| {
            let mut g = inst.analytic()?;
            g[5] = -g[5];
            Ok(g)
        },
        &mut buf,
    )
    .unwrap();
    assert_eq!(code, 1);
    let text = String::from_utf8(buf).unwrap();
    assert!(text.contains("FAIL"));
    assert!(text.contains("\"param\": \"lambda\""));
    assert!(text.contains("\"points\""));
}

#[test]
fn bandit_sim_verdicts_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim.csv");
    let o = bin()
        .args([
            "bandit-sim",
            "--arms",
            "2",
            "--plays",
            "1",
            "--horizon",
            "500",
            "--changes",
            "0",
            "--out",
        ])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("sublinear-proxy: pass"),
        "{}",
        stdout(&o)
    );
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "round,regret,cum_regret,uniform_regret,best_inclusion"
    );
    assert_eq!(text.lines().count(), 501);

    let o = bin()
        .args(["bandit-sim", "--C", "2", "--B", "3"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = bin()
        .args(["bandit-sim", "--changes", "1"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("tracking: final-quarter best-arm inclusion"));
}

#[test]
fn thread_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &format!(
            r#"{{"strategy": "random", "T_rounds": 2, "seeds": [0, 1], "output": "{}"}}"#,
            dir.path().join("o").display()
        ),
    );
    let o = bin()
        .arg("run")
        .arg(&cfg)
        .env("POPBANDIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .arg("run")
        .arg(&cfg)
        .env("POPBANDIT_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
}

#[test]
fn unknown_objective_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"strategy": "pbt", "objective": "rosenbrock", "seeds": [0]}"#,
    );
    assert_eq!(
        bin().arg("run").arg(&cfg).output().unwrap().status.code(),
        Some(2)
    );
}

#[test]
fn shared_gp_strategies_reject_per_category_spaces() {
    let dir = tempfile::tempdir().unwrap();
    let space = r#""space": {"continuous": [{"name": "x", "lower": 0.0, "upper": 1.5707963267948966}],
        "categorical": [{"name": "h", "choices": ["sin", "cos"]}],
        "per_category_continuous": [{"assignment": ["cos"], "continuous": [{"name": "y", "lower": 0.0, "upper": 1.0}]}]}"#;
    for strategy in ["pb2-rand", "pb2-mix"] {
        let cfg = write_config(
            dir.path(),
            "run.json",
            &format!(r#"{{"strategy": "{strategy}", {space}, "seeds": [0]}}"#),
        );
        let o = bin().arg("run").arg(&cfg).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    }
}
