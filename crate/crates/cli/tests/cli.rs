use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn tunnelsim(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunnelsim"))
        .env("TUNNELSIM_OUT", out_root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn scenario() -> String {
    format!("{}/../../scenarios/lab.toml", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn fano_demo_uniform_bound() {
    let dir = tempfile::tempdir().unwrap();
    let o = tunnelsim(dir.path(), &["run", "FanoDemo", "--nodes", "1024"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&dir.path().join("FanoDemo/fano.json"));
    let pe = v["uniform"]["lower_bound_pe"].as_f64().unwrap();
    assert!((pe - 0.90013).abs() < 1e-4, "{pe}");
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn fano_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = tunnelsim(dir.path(), &["fano", "--entropy", "2", "--mi", "0", "--set", "4"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let pe = v["lower_bound_pe"].as_f64().unwrap();
    assert!((pe - 0.5).abs() < 1e-12, "{pe}");
    let o = tunnelsim(dir.path(), &["fano", "--nodes", "4"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let pe = v["lower_bound_pe"].as_f64().unwrap();
    assert!((pe - 1.0 / 3f64.log2()).abs() < 1e-12, "{pe}");
    let o = tunnelsim(dir.path(), &["fano", "--entropy", "0", "--set", "1"]);
    assert!(!o.status.success());
}

#[test]
fn exp2_without_payload() {
    let dir = tempfile::tempdir().unwrap();
    let o = tunnelsim(dir.path(), &["run", "Exp2", "--variant", "without-payload", "--seed", "7"]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let d = dir.path().join("Exp2_Binary/without-payload");
    let report = read_json(&d.join("report.json"));
    let acc = report["final_validation_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "{acc}");
    let confusion = std::fs::read_to_string(d.join("confusion_validation.csv")).unwrap();
    assert!(confusion.lines().count() >= 3);
    assert!(dir.path().join("Exp2_Binary/summary.json").exists());
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = tunnelsim(dir.path(), &["report", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 3\nrequests = \"many\"\n").unwrap();
    let o = tunnelsim(dir.path(), &["run", "Exp1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");

    std::fs::write(&cfg, "seed = 3\nbogus = 1\n").unwrap();
    let o = tunnelsim(dir.path(), &["run", "Exp1", "--config", cfg.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let o = tunnelsim(dir.path(), &["run", "Exp9"]);
    assert!(!o.status.success());
}

#[test]
fn capture_curate_features_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let sc = scenario();
    let ok = |o: Output| {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o
    };

    ok(tunnelsim(dir.path(), &["simulate", &sc, "-o", &p("sim")]));
    let stats = read_json(&dir.path().join("sim/stats.json"));
    assert!(stats.is_object());
    assert!(dir.path().join("sim/netdb.json").exists());

    ok(tunnelsim(dir.path(), &["capture", "--scenario", &sc, "-o", &p("raw.jsonl"), "--export-pcap", &p("raw.pcap")]));
    ok(tunnelsim(dir.path(), &["capture", "--pcap", &p("raw.pcap"), "-o", &p("back.jsonl")]));
    let count = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!(count("raw.jsonl"), count("back.jsonl"));

    ok(tunnelsim(dir.path(), &["curate", &p("raw.jsonl"), "-o", &p("cur.jsonl")]));
    assert!(count("cur.jsonl") < count("raw.jsonl"));

    ok(tunnelsim(
        dir.path(),
        &["features", &p("cur.jsonl"), "--variant", "without-payload", "--drop", "tcp_ack,tcp_seq", "-o", &p("f.csv")],
    ));
    let header = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(!header.contains("tcp_ack") && !header.contains("tcp_seq") && header.ends_with("class"));

    let o = ok(tunnelsim(dir.path(), &["entropy", &p("cur.jsonl"), "-o", &p("ent")]));
    assert!(stdout(&o).contains("mean payload entropy"));
    assert!(dir.path().join("ent/entropy.svg").exists());

    ok(tunnelsim(dir.path(), &["kmeans", &p("cur.jsonl"), "--max-k", "6", "--restarts", "2", "-o", &p("km")]));
    assert_eq!(count("km/elbow.csv"), 7);

    let hyper = p("hyper.toml");
    std::fs::write(&hyper, "max_epochs = 15\nmax_per_class = 150\n").unwrap();
    ok(tunnelsim(dir.path(), &["train", &p("cur.jsonl"), "--hyper", &hyper, "-o", &p("model.json"), "--report", &p("rep.json")]));
    ok(tunnelsim(dir.path(), &["eval", "--model", &p("model.json"), &p("cur.jsonl"), "-o", &p("eval.json")]));
    let ev = read_json(&dir.path().join("eval.json"));
    assert!(ev["accuracy"].as_f64().unwrap() > 0.8);

    let o = ok(tunnelsim(dir.path(), &["report", &p("km")]));
    assert!(stdout(&o).contains("files written"));
}
