use std::path::Path;
use std::process::{Command, Output};

fn distlab(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_distlab"));
    cmd.args(args).env_remove("DISTLAB_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("DISTLAB_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 8] = [
    "--set",
    "train.steps=6",
    "--set",
    "eval.every=3",
    "--set",
    "grpo.steps=4",
    "--set",
    "grpo.eval_every=2",
];

#[test]
fn verify_passes_and_prints_every_check() {
    let o = distlab(&["verify", "--seed", "3", "--decomposition"], None);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() >= 8, "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("forward") && text.contains("reverse"));
}

#[test]
fn flops_text_and_json_agree() {
    let text = stdout(&distlab(&["flops"], None));
    assert!(text.contains("C_on / C_off                 3.62"), "{text}");
    let json = stdout(&distlab(&["flops", "--json"], None));
    assert!(json.trim_start().starts_with('{') && json.contains("\"c_on\""), "{json}");

    let explicit = distlab(
        &["flops", "--student-dims", "1024,3072,28,16,8,128,151936", "-b", "32", "-p", "92", "-r", "128"],
        None,
    );
    assert_eq!(stdout(&explicit), text);
    assert!(!distlab(&["flops", "--student", "gpt-9"], None).status.success());
}

#[test]
fn env_var_sets_output_dir_and_flag_overrides_it() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let mut args = vec!["distill"];
    args.extend(SMALL);
    assert!(distlab(&args, Some(env_dir.path())).status.success());
    assert!(env_dir.path().join("distill.csv").exists());
    assert!(env_dir.path().join("student.policy").exists());

    args.extend(["--out", flag_dir.path().to_str().unwrap()]);
    assert!(distlab(&args, Some(env_dir.path())).status.success());
    assert!(flag_dir.path().join("distill.csv").exists());
}

#[test]
fn grpo_resumes_from_a_distilled_student() {
    let dir = tempfile::tempdir().unwrap();
    let mut distill = vec!["distill"];
    distill.extend(SMALL);
    assert!(distlab(&distill, Some(dir.path())).status.success());
    let student = dir.path().join("student.policy");
    let mut grpo = vec!["grpo", "--student", student.to_str().unwrap()];
    grpo.extend(SMALL);
    let o = distlab(&grpo, Some(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("grpo.csv").exists());
    assert!(dir.path().join("grpo_student.policy").exists());
}

#[test]
fn pipeline_is_reproducible_and_reads_config_files() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg = cfg_dir.path().join("run.toml");
    std::fs::write(&cfg, "[objective]\nsource = \"teacher\"\nlambda = 0.5\n").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let mut args = vec!["pipeline", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
        args.extend(SMALL);
        assert!(distlab(&args, None).status.success());
    }
    for name in ["config.toml", "distill.csv", "grpo.csv", "student.policy", "grpo_student.policy"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let written = std::fs::read_to_string(a.path().join("config.toml")).unwrap();
    assert!(written.contains("source = \"teacher\""), "{written}");
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [["--set", "objective.lambda=1.5"], ["--set", "nope.key=1"], ["--preset", "huge"]] {
        let mut args = vec!["distill", "--out", dir.path().to_str().unwrap()];
        args.extend(bad);
        assert!(!distlab(&args, None).status.success(), "{bad:?}");
    }
}

#[test]
fn curriculum_sim_traces_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let series = dir.path().join("h.txt");
    std::fs::write(&series, "0.9\n0.8\n0.1\n0.7\n").unwrap();
    let args = ["curriculum-sim", series.to_str().unwrap(), "--horizons", "2,4,8", "--h-min", "0.3"];
    let hold = stdout(&distlab(&args, None));
    assert!(hold.contains("final: horizon 8 status Frozen after 3 observation(s)"), "{hold}");
    let mut stop = args.to_vec();
    stop.extend(["--on-fail", "terminate"]);
    let o = distlab(&stop, None);
    assert!(o.status.success());
    assert!(stdout(&o).contains("Terminated"), "{}", stdout(&o));
}

#[test]
fn kernel_bench_reports_json() {
    let o = distlab(
        &["kernel-bench", "--vocab", "2048", "--hidden", "8", "--tile", "100", "--reps", "2", "--direction", "reverse"],
        None,
    );
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["\"loss\"", "\"wall_time\"", "\"peak_transient_floats\":200"] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
    assert!(!distlab(&["kernel-bench", "--vocab", "10", "--tile", "11"], None).status.success());
}
