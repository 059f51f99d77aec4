mod common;

use std::path::Path;

use nbgam::data::{load_panel, LoadOptions};
use nbgam::fitter::{build_design, linear_predictor, FitResult};
use nbgam::simulate::{simulate_panel, SimConfig, Surface};
use serde_json::Value;
use sha2::{Digest, Sha256};

use common::{county_panel, read_csv, run_cli, write_panel_file};

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn county_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_panel_file(&county_panel(40, 12, 21), &dir.path().join("panel.csv"));
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const FORMULA_ONE: &str = "deaths ~ s(median_age) + te(ICEraceinc, date, d=c(1,1), k=c(5,5))";

#[test]
fn fit_writes_result_and_manifest() {
    let dir = county_dir();
    let out = run_cli(&["fit", "--data", "panel.csv", "--formula", FORMULA_ONE, "--out", "fit.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out.stdout.is_empty());

    let fit = FitResult::from_json(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert!(fit.converged);
    assert_eq!(fit.log_lambdas.len(), 3);
    assert_eq!(fit.n_obs, 480);

    let manifest = json(&dir.path().join("fit.manifest.json"));
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 1);
    let bytes = std::fs::read(dir.path().join("panel.csv")).unwrap();
    let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(inputs[0]["sha256"], Value::String(hex));
    assert_eq!(manifest["outputs"], serde_json::json!(["fit.json"]));
    assert_eq!(manifest["command_line"][1], "fit");
}

#[test]
fn verbose_progress_goes_to_stdout() {
    let dir = county_dir();
    let args = ["fit", "--verbose", "--data", "panel.csv", "--formula", "deaths ~ median_age", "--out", "f.json"];
    let out = run_cli(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("converged"));
}

#[test]
fn spatiotemporal_template_has_two_smoothing_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        n_units: 64,
        n_months: 8,
        surface: Surface::SeparableSpaceTime,
        surface_params: vec![4.0, 0.6, 0.3],
        seed: 4,
        ..Default::default()
    };
    write_panel_file(&simulate_panel(&cfg).unwrap().panel, &dir.path().join("sim.csv"));
    let formula = "deaths ~ te(latitude, longitude, time, d=c(2,1))";
    let out = run_cli(&["fit", "--data", "sim.csv", "--formula", formula, "--out", "st.json"], dir.path());
    assert!(matches!(out.status.code(), Some(0 | 2)), "{}", stderr(&out));
    let doc = json(&dir.path().join("st.json"));
    assert_eq!(doc["log_lambdas"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_formula_names_byte_offset() {
    let dir = county_dir();
    let out = run_cli(&["fit", "--data", "panel.csv", "--formula", "deaths ~ s(median_age", "--out", "f.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("byte 21"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    assert!(!dir.path().join("f.json").exists());
}

#[test]
fn load_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "fips,month,deaths\n01001,2020-03,1\n").unwrap();
    let out = run_cli(&["fit", "--data", "bad.csv", "--formula", "deaths ~ x", "--out", "f.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("popsize"), "{}", stderr(&out));
    let out = run_cli(&["fit", "--data", "missing.csv", "--formula", "deaths ~ x", "--out", "f.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_cli(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(run_cli(&["--version"], dir.path()).status.code(), Some(0));
    assert_eq!(run_cli(&["fit"], dir.path()).status.code(), Some(1));
    assert_eq!(run_cli(&["frobnicate"], dir.path()).status.code(), Some(1));
    let out = run_cli(&["fit", "--data", "p.csv", "--formula", "y ~ x", "--family", "gaussian", "--out", "f"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("gaussian"));
}

#[test]
fn exhausted_budget_exits_two_with_result() {
    let dir = county_dir();
    let args = ["fit", "--data", "panel.csv", "--formula", FORMULA_ONE, "--max-evals", "4", "--out", "f.json"];
    let out = run_cli(&args, dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("NOT converged"));
    assert_eq!(json(&dir.path().join("f.json"))["converged"], Value::Bool(false));
    assert!(dir.path().join("f.manifest.json").exists());
}

#[test]
fn roster_filters_units() {
    let dir = county_dir();
    std::fs::write(dir.path().join("roster.txt"), "fips\n01001\n01002\n01003\n01004\n01005\n01006\n").unwrap();
    let args = ["fit", "--data", "panel.csv", "--roster", "roster.txt", "--formula", "deaths ~ median_age", "--out", "f.json"];
    let out = run_cli(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(json(&dir.path().join("f.json"))["n_obs"], 72);
    assert_eq!(json(&dir.path().join("f.manifest.json"))["inputs"].as_array().unwrap().len(), 2);
}

fn fit_formula_one(dir: &Path) {
    let out = run_cli(&["fit", "--data", "panel.csv", "--formula", FORMULA_ONE, "--out", "fit.json"], dir);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn predict_surface_with_fixed_age() {
    let dir = county_dir();
    fit_formula_one(dir.path());
    let args = [
        "predict",
        "--fit",
        "fit.json",
        "--grid-spec",
        "ICEraceinc=-0.1:0.2:4,date=2020-03:2021-02:12",
        "--fix",
        "median_age=38.8",
        "--out",
        "surface.csv",
    ];
    let out = run_cli(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("surface.csv"));
    assert_eq!(header, ["ICEraceinc", "date", "median_age", "rate_per_100k_py"]);
    assert_eq!(rows.len(), 48);
    assert_eq!(rows[0][1], "2020-03");
    assert_eq!(rows[11][1], "2021-02");
    assert!(rows.iter().all(|r| r[2] == "38.8" && r[3].parse::<f64>().unwrap() > 0.0));
    assert!(dir.path().join("surface.manifest.json").exists());
}

#[test]
fn predict_on_training_rows_matches_fit() {
    let dir = county_dir();
    fit_formula_one(dir.path());
    let (panel, _) = load_panel(&dir.path().join("panel.csv"), &LoadOptions::default()).unwrap();
    let mut grid = String::from("median_age,ICEraceinc,date\n");
    let age = panel.column("median_age").unwrap();
    let ice = panel.column("ICEraceinc").unwrap();
    for i in 0..panel.len() {
        grid.push_str(&format!("{:?},{:?},{}\n", age[i].unwrap(), ice[i].unwrap(), panel.months()[i]));
    }
    std::fs::write(dir.path().join("grid.csv"), grid).unwrap();
    let out = run_cli(&["predict", "--fit", "fit.json", "--grid", "grid.csv", "--out", "p.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (_, rows) = read_csv(&dir.path().join("p.csv"));

    let fit = FitResult::from_json(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    let design = build_design(&fit.spec, &panel).unwrap();
    let eta = linear_predictor(&design, &fit.coefficients);
    for (row, e) in rows.iter().zip(eta) {
        let rate: f64 = row.last().unwrap().parse().unwrap();
        assert!((rate - e.exp()).abs() <= 1e-10 * e.exp(), "{rate} vs {}", e.exp());
    }
}

#[test]
fn fixed_covariate_grid_is_flat() {
    let dir = county_dir();
    let out = run_cli(&["fit", "--data", "panel.csv", "--formula", "deaths ~ median_age", "--out", "f.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let args = ["predict", "--fit", "f.json", "--grid-spec", "date=0:11:12", "--fix", "median_age=38.8", "--out", "p.csv"];
    let out = run_cli(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (_, rows) = read_csv(&dir.path().join("p.csv"));
    assert_eq!(rows.len(), 12);
    assert!(rows.windows(2).all(|w| w[0].last() == w[1].last()));
}

#[test]
fn predict_outside_domain_lists_rows() {
    let dir = county_dir();
    fit_formula_one(dir.path());
    let args = ["predict", "--fit", "fit.json", "--grid-spec", "median_age=20:40:3,ICEraceinc=0:0:1,date=0:0:1", "--out", "p.csv"];
    let out = run_cli(&args, dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("row 0: median_age=20"), "{err}");
    assert!(!err.contains("row 2"), "{err}");
    let out = run_cli(&["predict", "--fit", "fit.json", "--grid-spec", "median_age=35:40:3", "--out", "p.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("does not cover"));
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

/// Panel with one month whose crude rates are given per unit.
fn rate_panel(dir: &Path, deaths: &[(&str, u64)]) {
    let mut text = String::from("fips,month,deaths,popsize,latitude,longitude\n");
    for (id, d) in deaths {
        text.push_str(&format!("{id},2022-01,{d},100000,40,-100\n"));
    }
    write(dir, "panel.csv", &text);
}

#[test]
fn diagnose_checkerboard() {
    let dir = tempfile::tempdir().unwrap();
    rate_panel(dir.path(), &[("a", 10), ("b", 0), ("c", 0), ("d", 10)]);
    write(dir.path(), "edges.csv", "id_a,id_b\na,b\na,c\nb,d\nc,d\n");
    let out = run_cli(&["diagnose", "--data", "panel.csv", "--edges", "edges.csv", "--month", "2022-01", "--out", "m"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = json(&dir.path().join("m/moran_summary.json"));
    assert_eq!(summary["I"], -1.0);
    assert_eq!(summary["n_used"], 4);
    let (header, rows) = read_csv(&dir.path().join("m/moran.csv"));
    assert_eq!(header, ["id", "value", "neighbor_mean"]);
    assert_eq!(rows.len(), 4);
    assert!(dir.path().join("m/manifest.json").exists());
}

#[test]
fn diagnose_smooth_field_slope_equals_i() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        n_units: 100,
        n_months: 3,
        surface: Surface::GaussianBump2d,
        surface_params: vec![4.0, 1.5, 0.5, 0.5, 0.25],
        popsize_sdlog: 0.1,
        phi: 1e6,
        seed: 8,
        ..Default::default()
    };
    let sim = simulate_panel(&cfg).unwrap();
    write_panel_file(&sim.panel, &dir.path().join("panel.csv"));
    let mut edges = String::from("id_a,id_b\n");
    for (a, b) in sim.rook_edges() {
        edges.push_str(&format!("{a},{b}\n"));
    }
    write(dir.path(), "edges.csv", &edges);
    let out = run_cli(&["diagnose", "--data", "panel.csv", "--edges", "edges.csv", "--month", "2020-04", "--out", "m"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let s = json(&dir.path().join("m/moran_summary.json"));
    let (i, slope) = (s["I"].as_f64().unwrap(), s["slope"].as_f64().unwrap());
    assert!(i > 0.2, "{i}");
    assert!((i - slope).abs() < 1e-10);
}

#[test]
fn diagnose_constant_field_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    rate_panel(dir.path(), &[("a", 5), ("b", 5), ("c", 5)]);
    write(dir.path(), "edges.csv", "id_a,id_b\na,b\nb,c\n");
    let out = run_cli(&["diagnose", "--data", "panel.csv", "--edges", "edges.csv", "--month", "2022-01", "--out", "m"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("constant"), "{}", stderr(&out));
}

#[test]
fn diagnose_unknown_month_and_bad_edges() {
    let dir = tempfile::tempdir().unwrap();
    rate_panel(dir.path(), &[("a", 5), ("b", 7)]);
    write(dir.path(), "edges.csv", "id_a,id_b\na,z\n");
    let out = run_cli(&["diagnose", "--data", "panel.csv", "--edges", "edges.csv", "--month", "2021-01", "--out", "m"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run_cli(&["diagnose", "--data", "panel.csv", "--edges", "edges.csv", "--month", "2022-01", "--out", "m"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("`z`"), "{}", stderr(&out));
}

#[test]
fn diagnose_acf_table() {
    let dir = county_dir();
    let out = run_cli(&["diagnose", "--data", "panel.csv", "--acf-maxlag", "6", "--out", "acf"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("acf/acf.csv"));
    assert_eq!(header, ["lag", "q05", "q25", "q50", "q75", "q95", "n_units"]);
    assert_eq!(rows.len(), 6);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (k + 1).to_string());
        let q: Vec<f64> = row[1..6].iter().map(|v| v.parse().unwrap()).collect();
        assert!(q.windows(2).all(|w| w[0] <= w[1]), "{q:?}");
    }
    let (_, units) = read_csv(&dir.path().join("acf/acf_units.csv"));
    assert_eq!(units.len(), 6 * 40);
}

#[test]
fn simulate_writes_tables_and_rejects_unknown_surface() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "good.conf", "# small run\nn_units = 9\nn_months = 4\nsurface = linear\nparams = 4, 0.5\n");
    let out = run_cli(&["simulate", "--config", "good.conf", "--seed", "3", "--out", "s"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (_, panel) = read_csv(&dir.path().join("s/panel.csv"));
    let (th, truth) = read_csv(&dir.path().join("s/truth.csv"));
    let (eh, edges) = read_csv(&dir.path().join("s/edges.csv"));
    assert_eq!((panel.len(), truth.len(), edges.len()), (36, 36, 12));
    assert_eq!(th, ["unit", "month", "true_link"]);
    assert_eq!(eh, ["id_a", "id_b"]);
    assert_eq!(json(&dir.path().join("s/manifest.json"))["seeds"], serde_json::json!([3]));

    write(dir.path(), "bad.conf", "surface = wobbly\n");
    let out = run_cli(&["simulate", "--config", "bad.conf", "--out", "t"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("wobbly"));
}

#[test]
fn demo_emits_three_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_cli(&["demo-splines", "--out", "demo"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for name in ["demo_data.csv", "demo_basis.csv", "demo_fit.csv", "manifest.json"] {
        assert!(dir.path().join("demo").join(name).exists(), "{name}");
    }
    let (header, _) = read_csv(&dir.path().join("demo/demo_basis.csv"));
    assert_eq!(header.len(), 9);
}
