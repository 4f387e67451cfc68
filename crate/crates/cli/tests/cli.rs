use std::path::Path;
use std::process::{Command, Output};

fn plastinet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plastinet"))
        .current_dir(dir)
        .env_remove("PLASTINET_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_CL: &str = r#"{
  "kind": "cl",
  "data": {"num_chunks": 3, "classes_per_chunk": 2, "samples_per_class": 10, "channels": 1, "height": 4, "width": 4},
  "model": {"in_channels": 1, "image_size": 4, "conv_widths": [2], "kernel": 3, "width": 8, "num_classes": 6},
  "method": {"tag": "dynamic_moe", "granularity": 2},
  "budget": 192,
  "steps_per_chunk": 4,
  "eval_every": 2,
  "batch_size": 8,
  "eval_size": 16
}"#;

#[test]
fn budget_writes_report() {
    let d = tempfile::tempdir().unwrap();
    let o = plastinet(d.path(), &["budget", "--out", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(d.path().join("out/budget_report.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["stage", "method", "params", "violation"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 7 * 10);
    assert!(rows.iter().all(|r| &r[3] == "0"));
}

#[test]
fn out_dir_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_plastinet"))
        .current_dir(d.path())
        .env("PLASTINET_OUT", "envout")
        .arg("budget")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(d.path().join("envout/budget_report.csv").exists());
}

#[test]
fn unknown_key_exits_one_and_names_it() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), r#"{"kind":"cl","batch_size":8,"learning_rate":0.1}"#).unwrap();
    let o = plastinet(d.path(), &["run-cl", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn malformed_json_exits_one() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), r#"{"kind":"budget","budget":"#).unwrap();
    let o = plastinet(d.path(), &["budget", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn wrong_kind_exits_one() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), TINY_CL).unwrap();
    let o = plastinet(d.path(), &["budget", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind"));
}

#[test]
fn infeasible_budget_exits_one() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), r#"{"kind":"budget","d":64,"budget":100,"stages":10}"#).unwrap();
    let o = plastinet(d.path(), &["budget", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let o = plastinet(d.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    let o = plastinet(d.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), TINY_CL.replace("\"kind\": \"cl\",", "\"kind\": \"cl\", \"dataset\": \"nowhere\",")).unwrap();
    let o = plastinet(d.path(), &["run-cl", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn run_cl_is_byte_identical_across_invocations() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), TINY_CL).unwrap();
    for out in ["a", "b"] {
        let o = plastinet(d.path(), &["run-cl", "--config", "c.json", "--seeds", "0,1", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for s in [0, 1] {
        let name = format!("cl_dynamic_moe_g2_seed{s}.csv");
        let a = std::fs::read(d.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(d.path().join("b").join(&name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }
    let a0 = std::fs::read(d.path().join("a/cl_dynamic_moe_g2_seed0.csv")).unwrap();
    let a1 = std::fs::read(d.path().join("a/cl_dynamic_moe_g2_seed1.csv")).unwrap();
    assert_ne!(a0, a1);
}

#[test]
fn gen_data_then_train_from_disk_matches_in_memory() {
    let d = tempfile::tempdir().unwrap();
    let data = r#"{"kind":"gen-data","num_chunks":3,"classes_per_chunk":2,"samples_per_class":10,"channels":1,"height":4,"width":4}"#;
    std::fs::write(d.path().join("g.json"), data).unwrap();
    assert!(plastinet(d.path(), &["gen-data", "--config", "g.json", "--out", "ds"]).status.success());
    std::fs::write(d.path().join("c.json"), TINY_CL).unwrap();
    std::fs::write(d.path().join("f.json"), TINY_CL.replace("\"kind\": \"cl\",", "\"kind\": \"cl\", \"dataset\": \"ds\",")).unwrap();
    assert!(plastinet(d.path(), &["run-cl", "--config", "c.json", "--out", "mem"]).status.success());
    let o = plastinet(d.path(), &["run-cl", "--config", "f.json", "--out", "disk"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let name = "cl_dynamic_moe_g2_seed0.csv";
    assert_eq!(std::fs::read(d.path().join("mem").join(name)).unwrap(), std::fs::read(d.path().join("disk").join(name)).unwrap());
}

#[test]
fn plot_data_aggregates_seeds() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.json"), TINY_CL).unwrap();
    assert!(plastinet(d.path(), &["run-cl", "--config", "c.json", "--seeds", "0,1,2"]).status.success());
    let logs: Vec<String> = (0..3).map(|s| format!("cl_dynamic_moe_g2_seed{s}.csv")).collect();
    let mut args = vec!["plot-data"];
    args.extend(logs.iter().map(String::as_str));
    let o = plastinet(d.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(d.path().join("plot_data.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| &r[0] == "cl_dynamic_moe_g2" && &r[4] == "3"));
}

#[test]
fn verify_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = plastinet(d.path(), &["verify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 11);
}
