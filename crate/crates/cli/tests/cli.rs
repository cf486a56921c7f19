use std::process::{Command, Output};

use serde_json::Value;

fn lt(args: &[&str]) -> Output {
    lt_env(args, &[])
}

fn lt_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lt"));
    cmd.args(args).env_remove("LT_METRICS").env_remove("LT_DONATION");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("lt runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json_lines(o: &Output) -> Vec<Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).expect("one JSON object per line")).collect()
}

#[test]
fn mlp_train_report_has_the_stable_schema() {
    let o = lt(&["demo", "mlp-train", "--mode", "lazy", "--steps", "10", "--json"]);
    assert!(o.status.success());
    let r = &json_lines(&o)[0];
    let keys: Vec<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["workload", "mode", "wall_ms", "metrics", "checksum"] {
        assert!(keys.contains(&k), "missing {k} in {r}");
    }
    assert_eq!(r["workload"], "mlp-train");
    assert_eq!(r["mode"], "lazy");
    assert_eq!(r["metrics"]["compile_count"], 1);
    assert_eq!(r["metrics"]["graphs_executed"], 10);
    assert_eq!(r["checksum"].as_str().unwrap().len(), 16);
}

#[test]
fn bench_modes_agree() {
    let o = lt(&["--json", "bench", "mlp-train", "--modes", "lazy,eager"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rs = json_lines(&o);
    assert_eq!(rs.len(), 2);
    assert_eq!(rs[0]["checksum"], rs[1]["checksum"]);
    assert_eq!((rs[0]["mode"].as_str(), rs[1]["mode"].as_str()), (Some("lazy"), Some("eager")));
}

#[test]
fn results_depend_only_on_the_seed() {
    let sum = |seed: &str| json_lines(&lt(&["--seed", seed, "--json", "demo", "mlp-train"]))[0]["checksum"].clone();
    assert_eq!(sum("5"), sum("5"));
    assert_ne!(sum("5"), sum("6"));
}

#[test]
fn verify_passes_on_a_correct_build() {
    for w in ["fig1", "loop", "view-update", "mlp-train"] {
        assert!(lt(&["--verify", "demo", w]).status.success(), "{w}");
    }
}

#[test]
fn fuzz_exit_codes() {
    let o = lt(&["fuzz", "--count", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 programs"));

    assert!(lt(&["fuzz", "--seed", "7", "--count", "500"]).status.success());

    let o = lt(&["fuzz", "--seed", "7", "--count", "500", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("# program seed"), "{err}");
    assert!(err.contains("lazy:") && err.contains("eager:"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(lt(&["demo", "no-such-workload"]).status.code(), Some(1));
    assert_eq!(lt(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lt(&["--seed", "x", "demo", "fig1"]).status.code(), Some(1));
    assert!(lt(&["--help"]).status.success());
}

#[test]
fn metrics_env_prints_a_snapshot_at_exit() {
    let o = lt_env(&["demo", "fig1"], &[("LT_METRICS", "json")]);
    let err = String::from_utf8_lossy(&o.stderr);
    let m: Value = serde_json::from_str(err.trim()).expect("metrics JSON on stderr");
    assert_eq!(m["compile_count"], 1);
}

#[test]
fn donation_env_switch() {
    let aliased = |env: &[(&str, &str)]| {
        json_lines(&lt_env(&["--json", "demo", "elementwise-chain"], env))[0]["metrics"]["aliased_outputs"].as_u64().unwrap()
    };
    assert!(aliased(&[]) > 0);
    assert_eq!(aliased(&[("LT_DONATION", "0")]), 0);
}

#[test]
fn dump_plan_lists_fused_steps() {
    let o = lt(&["demo", "fig1", "--dump-plan"]);
    let text = stdout(&o);
    assert!(text.starts_with("step0: fused["), "{text}");
}
