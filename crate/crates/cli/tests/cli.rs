use std::path::Path;
use std::process::{Command, Output};

use winoshare::report::{rows_from_csv, PlanSummary, ReportDocument, Totals, CSV_HEADER};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winoshare")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sensitivity_file(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("sens.json");
    let s = r#"[{"name":"conv1","hessian_trace":4.0},{"name":"conv2","hessian_trace":1.0},
                {"name":"down","hessian_trace":2.5},{"name":"fc","hessian_trace":0.5}]"#;
    std::fs::write(&p, s).unwrap();
    p
}

#[test]
fn bench_conv_reports_and_is_reproducible() {
    let args = ["bench-conv", "--dims", "8,8,4,4", "--quant", "W2A4", "--seed", "3"];
    let a = bin(&args);
    let b = bin(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let doc = ReportDocument::from_json(&String::from_utf8(a.stdout).unwrap()).unwrap();
    assert_eq!(doc.totals.total_bits, doc.predicted_bits);
    assert!(doc.output_checksum.is_some());
}

#[test]
fn bench_conv_validation_errors_exit_2() {
    for args in [
        vec!["bench-conv", "--dims", "8,8,0,4"],
        vec!["bench-conv", "--dims", "8,8,4"],
        vec!["bench-conv", "--dims", "8,8,4,4", "--quant", "A4"],
        vec!["bench-conv", "--dims", "8,8,4,4", "--m", "3"],
        vec!["bench-conv", "--dims", "8,8,4,4", "--lambda", "0"],
        vec!["no-such-verb"],
    ] {
        let o = bin(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn pass_toggles_keep_the_checksum_and_lower_cost() {
    let on = bin(&["run-network", "--preset", "minionn-toy", "--input-seed", "2"]);
    let off = bin(&[
        "run-network",
        "--preset",
        "minionn-toy",
        "--input-seed",
        "2",
        "--no-decompose",
        "--no-fuse-ext-ext",
        "--no-fuse-trunc-ext",
        "--no-simplify-residual",
        "--no-msb",
    ]);
    assert_eq!(code(&on), 0, "{}", stderr(&on));
    let on = ReportDocument::from_json(&String::from_utf8(on.stdout).unwrap()).unwrap();
    let off = ReportDocument::from_json(&String::from_utf8(off.stdout).unwrap()).unwrap();
    assert_eq!(on.output_checksum, off.output_checksum);
    assert!(on.totals.total_bits < off.totals.total_bits);
}

#[test]
fn report_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r.json");
    let o = bin(&["run-network", "--preset", "minionn-toy", "--waterfall", "-o", path(&r)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = ReportDocument::from_json(&std::fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(doc.steps.len(), 5);
    let csv = bin(&["report", path(&r), "--format", "csv"]);
    let rows = rows_from_csv(&String::from_utf8(csv.stdout).unwrap()).unwrap();
    assert_eq!(Totals::of(&rows), doc.totals);
    let json = bin(&["report", path(&r), "--format", "json"]);
    assert_eq!(String::from_utf8(json.stdout).unwrap(), std::fs::read_to_string(&r).unwrap());
}

#[test]
fn report_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r.json");
    bin(&["bench-conv", "--dims", "4,4,2,2", "--predict-only", "-o", path(&r)]);
    let s = std::fs::read_to_string(&r).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 9", 1);
    std::fs::write(&r, s).unwrap();
    let o = bin(&["report", path(&r)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("schema version 9"));
    std::fs::write(&r, "{ not json").unwrap();
    assert_eq!(code(&bin(&["report", path(&r)])), 2);
    assert_eq!(code(&bin(&["report", path(&dir.path().join("missing.json"))])), 2);
}

#[test]
fn empty_network_gives_a_zero_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("empty.toml");
    std::fs::write(&d, "schema_version = 1\nname = \"empty\"\nseed = 1\nlayers = []\n\n[input]\nc = 1\nh = 2\nw = 2\n").unwrap();
    let o = bin(&["run-network", "--desc", path(&d)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = ReportDocument::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(doc.totals.total_bits, 0);
    let r = dir.path().join("r.json");
    std::fs::write(&r, doc.to_json().unwrap()).unwrap();
    let csv = bin(&["report", path(&r)]);
    assert_eq!(String::from_utf8(csv.stdout).unwrap(), format!("{CSV_HEADER}\n"));
}

#[test]
fn plan_closes_the_loop_and_reports_infeasibility() {
    let dir = tempfile::tempdir().unwrap();
    let sens = sensitivity_file(dir.path());
    let plan_path = dir.path().join("plan.json");
    let budget = "12000000";
    let o = bin(&[
        "plan-bits",
        "--preset",
        "minionn-toy",
        "--sensitivity",
        path(&sens),
        "--budget",
        budget,
        "-o",
        path(&plan_path),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan: PlanSummary = serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert!(plan.cost_bits <= plan.budget);
    let o = bin(&["run-network", "--preset", "minionn-toy", "--plan", path(&plan_path)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = ReportDocument::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let metered: u64 = doc
        .rows
        .iter()
        .filter(|r| plan.layers.iter().any(|l| l.name == r.layer))
        .map(|r| r.bits)
        .sum();
    assert_eq!(metered, plan.cost_bits);
    assert_eq!(doc.plan.as_ref(), Some(&plan));

    let o = bin(&["plan-bits", "--preset", "minionn-toy", "--sensitivity", path(&sens), "--budget", "10"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("minimum feasible budget"));
}
