use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bspcopula::basis::BasisSystem;
use bspcopula::copula::{independence_model, CopulaModel, ModelDocument};
use bspcopula::fixtures::Fixture;
use bspcopula::sample::{generate_study_data, ks_uniform, max_density, SamplerConfig};
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bspcopula"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_rows(path: &Path, header: &str, rows: impl IntoIterator<Item = Vec<f64>>) {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn r1_data(dir: &Path, n: usize) -> PathBuf {
    let model = Fixture::R1.model().unwrap();
    let runs = generate_study_data(&model, n, 1, &SamplerConfig::with_seed(42)).unwrap();
    let path = dir.join("r1.csv");
    write_rows(&path, "u,v", runs[0].points.points().map(<[f64]>::to_vec));
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn write_model(path: &Path, model: &CopulaModel) {
    fs::write(path, serde_json::to_string(&model.to_document()).unwrap()).unwrap();
}

#[test]
fn fit_on_r1_sample_converges_within_constraints() {
    let dir = TempDir::new().unwrap();
    let input = r1_data(dir.path(), 1000);
    let out = dir.path().join("fit");
    let o = run(&[
        "fit", "--input", input.to_str().unwrap(), "--pseudo", "identity", "--degree", "3",
        "--size", "4,5", "--alpha", "0.1", "--beta", "3", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&out.join("fit_report.json"));
    assert_eq!(report["report"]["converged"], true);
    assert!(report["report"]["max_step_residual"].as_f64().unwrap() <= 1e-8);
    assert_eq!(report["config"]["size"], serde_json::json!([[4, 5]]));

    let doc: ModelDocument = serde_json::from_value(json(&out.join("model.json"))).unwrap();
    let model = CopulaModel::from_document(&doc).unwrap();
    assert!(model.validate().max_residual() <= 1e-8);
    assert!(out.join("config.json").exists());
}

#[test]
fn fit_rejects_a_single_row() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("one.csv");
    fs::write(&input, "x,y\n0.2,0.3\n").unwrap();
    let o = run(&["fit", "--input", input.to_str().unwrap(), "--size", "4,4", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("at least 10"), "{}", stderr(&o));
}

#[test]
fn fit_without_penalty_has_equal_trajectories() {
    let dir = TempDir::new().unwrap();
    let input = r1_data(dir.path(), 300);
    let out = dir.path().join("fit");
    let o = run(&[
        "fit", "--input", input.to_str().unwrap(), "--size", "4,5", "--alpha", "0",
        "--max-iters", "200", "--out", out.to_str().unwrap(),
    ]);
    assert!(matches!(code(&o), 0 | 3), "{}", stderr(&o));
    let report = json(&out.join("fit_report.json"));
    let lp = report["report"]["lp_trajectory"].as_array().unwrap();
    let lpstar = report["report"]["lpstar_trajectory"].as_array().unwrap();
    assert!(!lp.is_empty());
    assert_eq!(lp, lpstar);
}

#[test]
fn non_convergence_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let input = r1_data(dir.path(), 300);
    let o = run(&[
        "fit", "--input", input.to_str().unwrap(), "--size", "4,5", "--max-iters", "2",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(json(&dir.path().join("fit_report.json"))["report"]["converged"], false);
}

#[test]
fn bad_cells_are_reported_with_line_numbers() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.csv");
    let mut text = String::from("x,y\n");
    for i in 0..12 {
        text.push_str(&format!("{},{}\n", i, 2 * i));
    }
    text = text.replacen("3,6", "3,abc", 1);
    fs::write(&input, &text).unwrap();
    let o = run(&["fit", "--input", input.to_str().unwrap(), "--size", "4,4"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(":5:") && stderr(&o).contains("abc"), "{}", stderr(&o));

    fs::write(&input, text.replacen("3,abc", "3,", 1)).unwrap();
    let o = run(&["fit", "--input", input.to_str().unwrap(), "--size", "4,4"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(":5:") && stderr(&o).contains("missing"), "{}", stderr(&o));

    let headerless = dir.path().join("headerless.csv");
    fs::write(&headerless, "0.1,0.2\n0.3,0.4\n").unwrap();
    let o = run(&["fit", "--input", headerless.to_str().unwrap(), "--size", "4,4"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("header"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&run(&["fit", "--frobnicate"])), 2);
    assert_eq!(code(&run(&["fit", "--size", "4,x"])), 2);
}

#[test]
fn flags_override_config_file_and_config_is_echoed() {
    let dir = TempDir::new().unwrap();
    let input = r1_data(dir.path(), 200);
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# fit settings\ninput = {}\nsize = 4,5\nalpha = 0.2\nmax_iters = 50\npseudo = identity\n",
            input.display()
        ),
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&["fit", "--config", cfg.to_str().unwrap(), "--alpha", "0.05", "--out", out.to_str().unwrap()]);
    assert!(matches!(code(&o), 0 | 3), "{}", stderr(&o));
    let echoed = json(&out.join("config.json"));
    assert_eq!(echoed["alpha"], serde_json::json!([0.05]));
    assert_eq!(echoed["fit"]["max_outer_iters"], 50);
    assert_eq!(echoed["pseudo"], "identity");
    assert_eq!(json(&out.join("fit_report.json"))["report"]["scad"]["alpha"], 0.05);
}

/// Points at the centres of an `L x L` lattice fill every cell of an
/// `m x n` histogram equally whenever `m` and `n` divide `L`, so the
/// degree-0 fit is the independence copula.
fn lattice(dir: &Path) -> PathBuf {
    let l = 12;
    let rows = (0..l).flat_map(|i| (0..l).map(move |j| vec![(i as f64 + 0.5) / l as f64, (j as f64 + 0.5) / l as f64]));
    let path = dir.join("lattice.csv");
    write_rows(&path, "u,v", rows);
    path
}

#[test]
fn select_aic_on_independence_data_counts_free_parameters() {
    let dir = TempDir::new().unwrap();
    let input = lattice(dir.path());
    let out = dir.path().join("sel");
    let o = run(&[
        "select", "--input", input.to_str().unwrap(), "--pseudo", "identity", "--degree", "0",
        "--size", "2-4,2-4", "--method", "aic", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_table(&out.join("aic.csv"));
    assert_eq!(header, ["size", "alpha", "beta", "aic", "converged", "error"]);
    assert_eq!(rows.len(), 9);
    for r in rows {
        let dims: Vec<f64> = r[0].split('x').map(|v| v.parse().unwrap()).collect();
        let expected = 2.0 * (dims[0] - 1.0) * (dims[1] - 1.0);
        let aic: f64 = r[3].parse().unwrap();
        assert!((aic - expected).abs() < 1e-9, "{}: {aic} vs {expected}", r[0]);
    }
    assert!(!out.join("cv.csv").exists());
}

#[test]
fn seeded_select_rerun_gives_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let input = r1_data(dir.path(), 200);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("sel{k}"));
        let o = run(&[
            "select", "--input", input.to_str().unwrap(), "--size", "4,4;4,5", "--alpha", "0,0.1",
            "--folds", "3", "--seed", "9", "--max-iters", "100", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push((fs::read(out.join("cv.csv")).unwrap(), fs::read(out.join("aic.csv")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let (_, rows) = read_table(&dir.path().join("sel0").join("cv.csv"));
    assert_eq!(rows.len(), 4);
}

fn sample_cmd(model: &Path, out: &Path, count: usize, seed: u64) -> Output {
    run(&[
        "sample", "--model", model.to_str().unwrap(), "--count", &count.to_string(),
        "--seed", &seed.to_string(), "--out", out.to_str().unwrap(),
    ])
}

fn sample_columns(path: &Path) -> Vec<Vec<f64>> {
    let (header, rows) = read_table(path);
    (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].parse().unwrap()).collect())
        .collect()
}

#[test]
fn independence_sample_is_reproducible_and_in_range() {
    let dir = TempDir::new().unwrap();
    let b = BasisSystem::uniform(3, 5).unwrap();
    let model_path = dir.path().join("ind.json");
    write_model(&model_path, &independence_model(&b, &b));
    let (a, c) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&sample_cmd(&model_path, &a, 500, 3)), 0);
    assert_eq!(code(&sample_cmd(&model_path, &c, 500, 3)), 0);
    let bytes = fs::read(a.join("sample.csv")).unwrap();
    assert_eq!(bytes, fs::read(c.join("sample.csv")).unwrap());
    let cols = sample_columns(&a.join("sample.csv"));
    assert_eq!(cols[0].len(), 500);
    assert!(cols.iter().flatten().all(|u| (0.0..=1.0).contains(u)));
}

#[test]
fn r3_sample_has_uniform_margins() {
    let dir = TempDir::new().unwrap();
    let model_path = dir.path().join("r3.json");
    write_model(&model_path, &Fixture::R3.model().unwrap());
    let n = 10_000;
    let o = sample_cmd(&model_path, dir.path(), n, 11);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for col in sample_columns(&dir.path().join("sample.csv")) {
        assert!(ks_uniform(&col) < 1.63 / (n as f64).sqrt());
    }
}

#[test]
fn sample_acceptance_rate_matches_envelope() {
    let dir = TempDir::new().unwrap();
    let model = Fixture::R1.model().unwrap();
    let model_path = dir.path().join("r1.json");
    write_model(&model_path, &model);
    let n = 10_000;
    assert_eq!(code(&sample_cmd(&model_path, dir.path(), n, 5)), 0);
    let stats = json(&dir.path().join("sample_run.json"));
    assert_eq!(stats["restarts"], 0);
    let envelope = stats["envelope"].as_f64().unwrap();
    assert_eq!(envelope, max_density(&model, &SamplerConfig::default()).unwrap());
    let p = 1.0 / envelope;
    let proposals = stats["proposals"].as_f64().unwrap();
    let se = (p * (1.0 - p) / proposals).sqrt();
    assert!((stats["acceptance_rate"].as_f64().unwrap() - p).abs() < 3.0 * se);
}

#[test]
fn independence_density_grid_is_one() {
    let dir = TempDir::new().unwrap();
    let b = BasisSystem::uniform(3, 6).unwrap();
    let model_path = dir.path().join("ind.json");
    write_model(&model_path, &independence_model(&b, &b));
    let o = run(&["density-grid", "--model", model_path.to_str().unwrap(), "--grid", "21", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_table(&dir.path().join("density_grid.csv"));
    assert_eq!(header, ["u", "v", "density"]);
    assert_eq!(rows.len(), 21 * 21);
    for r in rows {
        let c: f64 = r[2].parse().unwrap();
        assert!((c - 1.0).abs() < 1e-12, "{c}");
    }
}

#[test]
fn joint_density_grid_is_nonnegative() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("xy.csv");
    let model = Fixture::R1.model().unwrap();
    let runs = generate_study_data(&model, 200, 1, &SamplerConfig::with_seed(1)).unwrap();
    write_rows(&input, "x,y", runs[0].points.points().map(|p| vec![10.0 * p[0] - 3.0, p[1].powi(2)]));
    let model_path = dir.path().join("r1.json");
    write_model(&model_path, &model);
    let o = run(&[
        "density-grid", "--model", model_path.to_str().unwrap(), "--input", input.to_str().unwrap(),
        "--grid", "15", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_table(&dir.path().join("joint_grid.csv"));
    assert_eq!(header, ["x", "y", "h"]);
    assert_eq!(rows.len(), 15 * 15);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn fitted_model_round_trips_through_density_grid() {
    let dir = TempDir::new().unwrap();
    let input = r1_data(dir.path(), 400);
    let fit_dir = dir.path().join("fit");
    let o = run(&[
        "fit", "--input", input.to_str().unwrap(), "--size", "4,5", "--alpha", "0.1",
        "--max-iters", "300", "--out", fit_dir.to_str().unwrap(),
    ]);
    assert!(matches!(code(&o), 0 | 3), "{}", stderr(&o));
    let model_path = fit_dir.join("model.json");
    let doc: ModelDocument = serde_json::from_value(json(&model_path)).unwrap();
    let model = CopulaModel::from_document(&doc).unwrap();
    let entries: Vec<f64> = serde_json::from_value(json(&fit_dir.join("fit_report.json"))["report"]["params"]["entries"].clone()).unwrap();
    assert_eq!(model.params().entries(), entries.as_slice());

    let o = run(&["density-grid", "--model", model_path.to_str().unwrap(), "--grid", "10", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_table(&dir.path().join("density_grid.csv"));
    assert_eq!(rows.len(), 100);
    for r in rows {
        let u: f64 = r[0].parse().unwrap();
        let v: f64 = r[1].parse().unwrap();
        let c: f64 = r[2].parse().unwrap();
        let direct = model.density(&[u, v]).unwrap();
        assert!((c - direct).abs() <= 1e-14 * direct.abs().max(1.0), "{c} vs {direct}");
    }
}

#[test]
fn reproduce_small_sample_study_writes_summary() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "reproduce", "C", "--fixtures", "R1", "--datasets", "2", "--sample-size", "100,300",
        "--alpha", "0,0.1", "--max-iters", "200", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["study"], "C");
    assert_eq!(summary["patterns"].as_array().unwrap().len(), 1);
    for n in [100, 300] {
        let (header, rows) = read_table(&dir.path().join(format!("mse_R1_n{n}.csv")));
        assert_eq!(header, ["alpha", "beta", "mse", "converged", "failed"]);
        assert_eq!(rows.len(), 2);
    }
}
