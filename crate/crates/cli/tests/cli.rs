//! End-to-end tests of the `galamm` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn galamm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_galamm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GALAMM_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Parsed CSV as header plus rows of strings.
fn csv_rows(path: impl AsRef<Path>) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path.as_ref()).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(path: impl AsRef<Path>, name: &str) -> Vec<String> {
    let (header, rows) = csv_rows(path);
    let j = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.into_iter().map(|r| r[j].clone()).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(dir.join("manifest.json"))).unwrap()
}

/// Simulated ses-like data with both model configurations.
fn simulated(tmp: &TempDir, subjects: &str, seed: &str) -> PathBuf {
    let o = galamm(
        &["simulate", "--design", "ses-like", "--subjects", subjects, "--lambda8", "0", "--seed", seed, "--out", "sim"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    tmp.path().join("sim")
}

fn fitted(tmp: &TempDir, model: &str, out: &str) -> PathBuf {
    let o = galamm(&["fit", "--data", "sim/data.csv", "--model", model, "--out", out], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    tmp.path().join(out)
}

#[test]
fn fit_writes_tables_and_manifest() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "1");
    let dir = fitted(&tmp, "sim/model.toml", "fit");
    for name in ["parameters.csv", "variance_components.csv", "smooths.csv", "fit_summary.csv", "fit.json"] {
        assert!(dir.join(name).exists(), "{name}");
    }
    let m = manifest(&dir);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["converged"], true);
    let outputs: Vec<String> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    for entry in fs::read_dir(&dir).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        assert!(name == "manifest.json" || outputs.contains(&name), "{name} missing from the manifest");
    }
    // Smoothing parameter is the reciprocal of the relative smoothing variance.
    let (_, rows) = csv_rows(dir.join("smooths.csv"));
    let theta: f64 = rows[0][3].parse().unwrap();
    let lambda: f64 = rows[0][5].parse().unwrap();
    assert!((lambda * theta * theta - 1.0).abs() < 1e-12);
}

#[test]
fn console_numbers_are_in_output_files() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "2");
    let o = galamm(&["fit", "--data", "sim/data.csv", "--model", "sim/model.toml", "--out", "fit"], tmp.path());
    assert_eq!(String::from_utf8_lossy(&o.stdout), read(tmp.path().join("fit/fit_summary.csv")));
}

#[test]
fn malformed_config_names_the_section() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "1");
    let bad = read(tmp.path().join("sim/model.toml")).replace("family = \"gaussian\"", "family = \"poisson\"");
    fs::write(tmp.path().join("bad.toml"), bad).unwrap();
    let o = galamm(&["fit", "--data", "sim/data.csv", "--model", "bad.toml", "--out", "bad"], tmp.path());
    assert_eq!(code(&o), 1);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("family_groups"), "{stderr}");
    let m = manifest(&tmp.path().join("bad"));
    assert_eq!(m["status"], "error");
    assert!(m["error"].as_str().unwrap().contains("family_groups"));
}

#[test]
fn missing_data_column_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "1");
    let data = read(tmp.path().join("sim/data.csv")).replacen("item", "thing", 1);
    fs::write(tmp.path().join("bad.csv"), data).unwrap();
    let o = galamm(&["fit", "--data", "bad.csv", "--model", "sim/model.toml", "--out", "bad"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv"));
}

#[test]
fn iteration_cap_gives_partial_results() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "3");
    let o = galamm(
        &["fit", "--data", "sim/data.csv", "--model", "sim/model.toml", "--max-iter", "1", "--out", "cap"],
        tmp.path(),
    );
    assert_eq!(code(&o), 2);
    let dir = tmp.path().join("cap");
    assert_eq!(column(dir.join("fit_summary.csv"), "converged"), vec!["false"]);
    assert!(dir.join("parameters.csv").exists());
    assert_eq!(manifest(&dir)["status"], "not_converged");
}

#[test]
fn single_point_grid_has_equal_bands() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "4");
    fitted(&tmp, "sim/model.toml", "fit");
    let o = galamm(
        &["bands", "--fit", "fit", "--smooth", "f_age", "--grid", "0.3", "--nsim", "5000", "--out", "b"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = csv_rows(tmp.path().join("b/bands.csv"));
    assert_eq!(rows.len(), 1);
    let v: Vec<f64> = rows[0].iter().map(|s| s.parse().unwrap()).collect();
    // Columns: grid, fhat, se, lo_pt, hi_pt, lo_sim, hi_sim.
    assert!((v[3] - v[5]).abs() < 1e-12 * v[1].abs().max(1.0));
    assert!((v[4] - v[6]).abs() < 1e-12 * v[1].abs().max(1.0));
}

#[test]
fn bands_are_deterministic_and_offsets_mode_has_columns_per_curve() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "5");
    fitted(&tmp, "sim/model.toml", "fit");
    let args = |out: &'static str| {
        vec!["bands", "--fit", "fit", "--smooth", "f_age", "--grid=-1:1:11", "--nsim", "3000", "--seed", "9", "--out", out]
    };
    assert_eq!(code(&galamm(&args("a"), tmp.path())), 0);
    assert_eq!(code(&galamm(&args("b"), tmp.path())), 0);
    assert_eq!(fs::read(tmp.path().join("a/bands.csv")).unwrap(), fs::read(tmp.path().join("b/bands.csv")).unwrap());
    let o = galamm(
        &[
            "bands", "--fit", "fit", "--smooth", "f_age", "--grid=-1:1:11", "--latent", "ses", "--offsets=-2,0,2",
            "--nsim", "3000", "--out", "c",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(tmp.path().join("c/bands.csv"));
    assert_eq!(header.len(), 1 + 3 * 6);
    assert_eq!(rows.len(), 11);
    assert!(header.contains(&"lo_pt_-2".to_string()) && header.contains(&"hi_sim_2".to_string()));
    assert_eq!(csv_rows(tmp.path().join("c/bands_meta.csv")).1.len(), 3);
}

#[test]
fn unknown_smooth_is_rejected() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "6");
    fitted(&tmp, "sim/model.toml", "fit");
    let o = galamm(&["bands", "--fit", "fit", "--smooth", "g", "--out", "b"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`g`"));
}

#[test]
fn compare_reports_delta_aic_and_lrt_for_nested_fits() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "7");
    fitted(&tmp, "sim/model.toml", "full");
    fitted(&tmp, "sim/model_reduced.toml", "reduced");
    let o = galamm(&["compare", "full", "reduced", "--out", "cmp"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let path = tmp.path().join("cmp/comparison.csv");
    assert_eq!(column(&path, "model"), vec!["full", "reduced"]);
    assert_eq!(column(&path, "delta_aic")[0], "0.0");
    assert_eq!(column(&path, "lrt_df"), vec!["", "1"]);
    let p: f64 = column(&path, "lrt_p")[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let ll: Vec<f64> = column(&path, "loglik").iter().map(|s| s.parse().unwrap()).collect();
    let delta: f64 = column(&path, "delta_aic")[1].parse().unwrap();
    assert!((delta - (-2.0 * (ll[1] - ll[0]) - 2.0)).abs() < 1e-9);
}

#[test]
fn compare_rejects_fits_on_different_data() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "8");
    fitted(&tmp, "sim/model.toml", "a");
    let o = galamm(
        &["simulate", "--design", "ses-like", "--subjects", "60", "--seed", "9", "--out", "sim2"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let o = galamm(&["fit", "--data", "sim2/data.csv", "--model", "sim2/model.toml", "--out", "b"], tmp.path());
    assert_eq!(code(&o), 0);
    let o = galamm(&["compare", "a", "b", "--out", "cmp"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("different dataset"));
}

#[test]
fn null_simulation_gives_a_small_interaction_estimate() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "150", "10");
    let dir = fitted(&tmp, "sim/model.toml", "fit");
    let (_, rows) = csv_rows(dir.join("parameters.csv"));
    let l8 = rows.iter().find(|r| r[0] == "l8").unwrap();
    let (est, se): (f64, f64) = (l8[2].parse().unwrap(), l8[3].parse().unwrap());
    assert!(est.abs() < 3.5 * se, "l8 = {est} with standard error {se}");
}

#[test]
fn study_tables_do_not_depend_on_threads_and_seeds_reproduce_them() {
    let tmp = TempDir::new().unwrap();
    let run = |threads: &str, out: &str| {
        let o = galamm(
            &[
                "--threads", threads, "simulate", "--design", "ses-like", "--study", "power", "--subjects", "30",
                "--replicates", "3", "--lambda8-grid", "0,0.1", "--seed", "11", "--out", out,
            ],
            tmp.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("1", "t1");
    run("3", "t3");
    run("1", "again");
    for name in ["power.csv", "power_replicates.csv"] {
        let a = fs::read(tmp.path().join("t1").join(name)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("t3").join(name)).unwrap(), "{name}");
        assert_eq!(a, fs::read(tmp.path().join("again").join(name)).unwrap(), "{name}");
    }
    assert_eq!(manifest(&tmp.path().join("t1"))["seed"], 11);
}

#[test]
fn bootstrap_output_does_not_depend_on_threads() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "120", "12");
    fitted(&tmp, "sim/model_reduced.toml", "fit");
    let run = |threads: &str, out: &str| {
        let o = galamm(
            &["--threads", threads, "bootstrap", "--fit", "fit", "--replicates", "3", "--seed", "5", "--out", out],
            tmp.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("1", "b1");
    run("3", "b3");
    for name in ["bootstrap_parameters.csv", "bootstrap_estimates.csv", "bootstrap_replicates.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("b1").join(name)).unwrap(),
            fs::read(tmp.path().join("b3").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn simulate_from_fit_keeps_the_data_layout() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "120", "13");
    fitted(&tmp, "sim/model.toml", "fit");
    let o = galamm(&["simulate", "--from-fit", "fit", "--seed", "2", "--out", "re"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (h0, r0) = csv_rows(tmp.path().join("fit/data.csv"));
    let (h1, r1) = csv_rows(tmp.path().join("re/data.csv"));
    assert_eq!(h0, h1);
    assert_eq!(r0.len(), r1.len());
    assert!(r0.iter().zip(&r1).all(|(a, b)| a[1..] == b[1..]));
    assert!(r0.iter().zip(&r1).any(|(a, b)| a[0] != b[0]));
}

#[test]
fn commands_write_only_under_out() {
    let tmp = TempDir::new().unwrap();
    simulated(&tmp, "60", "14");
    fitted(&tmp, "sim/model.toml", "fit");
    let mut top: Vec<String> =
        fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    top.sort();
    assert_eq!(top, vec!["fit", "sim"]);
    let mut sim: Vec<String> = fs::read_dir(tmp.path().join("sim"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    sim.sort();
    assert_eq!(sim, vec!["data.csv", "design.toml", "manifest.json", "model.toml", "model_reduced.toml", "truth.csv"]);
}
