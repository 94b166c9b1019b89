use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cprc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cprc")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(dir: &Path) -> String {
    let data = dir.join("d.jsonl");
    let data = data.to_str().unwrap().to_string();
    let o = cprc(&["gen-data", "--scenes", "120", "--labeled-ratio", "0.1", "--test-scenes", "8", "--out", &data, "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "N_l=12 N_u=108 N_test=8");
    data
}

fn train_small(data: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["train", "--data", data, "--out", out, "--set", "steps_per_epoch=2", "--seed", "3"];
    if !extra.contains(&"--epochs") {
        args.extend_from_slice(&["--epochs", "2"]);
    }
    args.extend_from_slice(extra);
    cprc(&args)
}

#[test]
fn gen_data_reports_the_default_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus.jsonl");
    let o = cprc(&["gen-data", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("N_l=20 N_u=1980"));
    let header: serde_json::Value = serde_json::from_str(fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["schema_version"], 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let o = cprc(&["gen-data", "--labeled-ratio", "1.5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());

    assert_eq!(cprc(&["no-such-command"]).status.code(), Some(1));

    let data = gen_small(dir.path());
    let o = train_small(&data, &dir.path().join("run"), &["--set", "loss.tua=0.2"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("unknown config key `loss.tua`"), "{err}");
    assert!(err.contains("loss.tau") && err.contains("model.region_count"), "{err}");

    let o = train_small(&data, &dir.path().join("run"), &["--tau", "2.0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let o = train_small(missing.to_str().unwrap(), &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.jsonl"));
}

#[test]
fn train_eval_caption_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let run = dir.path().join("run");
    let o = train_small(&data, &run, &["--lambda2", "5", "--k-augment", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("# resolved config") && err.contains("lambda2 = 5.0") && err.contains("k = 2"), "{err}");
    for f in ["config.json", "record.json", "model.ckpt", "train_log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    assert_eq!(record["schema_version"], 1);
    assert_eq!(record["epochs"].as_array().unwrap().len(), 2);
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["schema_version"], 1);
    assert_eq!(config["config"]["loss"]["lambda2"], 5.0);

    let ckpt = run.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let eval = || cprc(&["eval", "--checkpoint", ckpt, "--data", &data]);
    let (a, b) = (eval(), eval());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let report: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(report["schema_version"], 1);
    let keys: Vec<&String> = report["metrics"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["B@1", "B@2", "B@3", "B@4", "CIDEr-D", "ROUGE-L"]);

    let o = cprc(&["caption", "--checkpoint", ckpt, "--data", &data, "--limit", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    let o = cprc(&["caption", "--checkpoint", ckpt, "--data", &data, "--index", "99"]);
    assert_eq!(o.status.code(), Some(1));

    // two more epochs on top of the first two
    let o = train_small(&data, &run, &["--lambda2", "5", "--k-augment", "2", "--epochs", "4", "--resume", ckpt]);
    assert!(o.status.success(), "{}", stderr(&o));
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    assert_eq!(record["epochs"].as_array().unwrap().len(), 4);
    let o = train_small(&data, &run, &["--resume", ckpt]);
    assert_eq!(o.status.code(), Some(2), "a changed config cannot resume");
}

#[test]
fn toml_config_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let toml = dir.path().join("c.toml");
    fs::write(&toml, "mode = \"supervised-only\"\n[loss]\ntau = 0.3\nlambda1 = 0.5\n").unwrap();
    let run = dir.path().join("run");
    let o = train_small(&data, &run, &["--config", toml.to_str().unwrap(), "--tau", "0.4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["config"]["mode"], "supervised-only");
    assert_eq!(config["config"]["loss"]["tau"], 0.4);
    assert_eq!(config["config"]["loss"]["lambda1"], 0.5);

    fs::write(&toml, "[loss]\ntaw = 0.3\n").unwrap();
    let o = train_small(&data, &run, &["--config", toml.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let out = dir.path().join("abl");
    let o = cprc(&[
        "ablate", "--data", &data, "--out", out.to_str().unwrap(), "--modes", "supervised-only,full", "--epochs", "1",
        "--set", "steps_per_epoch=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,B@1,B@2,B@3,B@4,ROUGE-L,CIDEr-D,wall_s");
    assert!(lines[1].starts_with("supervised-only,") && lines[2].starts_with("full,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let o = cprc(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("PASS gradients/l_rc")));
    assert!(!stdout(&o).contains("FAIL"));

    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("v.json");
    let o = cprc(&["verify", "--only", "invariants", "--inject-fault", "kl-sign-flip", "--out", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL invariants/kl-nonnegative"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["passed"], false);

    assert_eq!(cprc(&["verify", "--only", "nothing"]).status.code(), Some(1));
}
