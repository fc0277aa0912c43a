use std::path::Path;
use std::process::{Command, Output};

fn fedstream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedstream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn example(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("examples")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn bench_quant_prints_the_size_table() {
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("specs/llama3.2-1b.json");
    let out = fedstream(&[
        "bench-quant",
        "--model-spec",
        spec.to_str().unwrap(),
        "--precision",
        "all",
        "--analytic",
    ]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "precision,model_size_mb,meta_size_mb,fp32_percent");
    let percents: Vec<&str> = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(percents, ["100.00", "50.00", "25.03", "14.06"]);

    let one = fedstream(&["bench-quant", "--precision", "float4", "--analytic"]);
    let csv = String::from_utf8(one.stdout).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "float4,714.53,89.33,14.06");
}

#[test]
fn bench_stream_orders_container_below_regular() {
    let out = fedstream(&["bench-stream", "--mode", "all", "--scale", "1/256"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let peak = |setting: &str| -> f64 {
        let line = csv.lines().find(|l| l.starts_with(setting)).unwrap();
        line.split(',').nth(1).unwrap().parse().unwrap()
    };
    assert_eq!(csv.lines().next().unwrap(), "setting,peak_logical_mb,job_time_s");
    assert!(peak("container") < peak("regular"));
    assert!(peak("file") < peak("container"));
}

#[test]
fn simulate_is_reproducible_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = example("quickstart.json");
    let reports: Vec<String> = (0..2)
        .map(|i| {
            let dest = dir.path().join(format!("report{i}.json"));
            let out = fedstream(&["simulate", "--config", &config, "--output", dest.to_str().unwrap()]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            std::fs::read_to_string(dest).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let report: serde_json::Value = serde_json::from_str(&reports[0]).unwrap();
    assert_eq!(report["rounds"].as_array().unwrap().len(), 20);
    assert_eq!(report["config"]["task"]["seed"], 42);
}

#[test]
fn bad_flags_exit_2_and_job_failures_exit_1() {
    let out = fedstream(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(fedstream(&["bench-stream", "--scale", "1/0"]).status.code(), Some(2));
    assert_eq!(fedstream(&["bench-quant", "--precision", "int3"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"clients": 0, "task": {"seed": 1}}"#).unwrap();
    let out = fedstream(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("clients"));
}

#[test]
fn server_and_clients_run_as_separate_processes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("job.json");
    std::fs::write(
        &config,
        r#"{"clients": 2, "rounds": 2, "precision": "fp16", "stream_mode": "container",
            "task": {"seed": 5, "outputs": 256, "dimension": 8, "samples_per_client": 32}}"#,
    )
    .unwrap();
    let config = config.to_str().unwrap();
    // reserve a free port
    let addr = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string();
    let report = dir.path().join("report.json");
    let mut server = Command::new(env!("CARGO_BIN_EXE_fedstream"))
        .args(["server", "--listen", &addr, "--config", config, "--output"])
        .arg(&report)
        .spawn()
        .unwrap();
    let clients: Vec<_> = (0..2)
        .map(|k| {
            let index = k.to_string();
            Command::new(env!("CARGO_BIN_EXE_fedstream"))
                .args(["client", "--connect", &addr, "--config", config, "--index", &index])
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in clients {
        assert!(c.wait().unwrap().success());
    }
    assert!(server.wait().unwrap().success());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["rounds"].as_array().unwrap().len(), 2);
}
