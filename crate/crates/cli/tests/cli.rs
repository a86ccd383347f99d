use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cellrcov::rng::stream;
use cellrcov::simlab::{gaussian_sample, make_sigma, planted_link, CovModel};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellrcov"))
        .args(args)
        .env("RCOV_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_csv(path: &Path, header: &[String], m: &DMatrix<f64>, missing: &[(usize, usize)]) {
    let mut s = header.join(",");
    s.push('\n');
    for i in 0..m.nrows() {
        let cells: Vec<String> = (0..m.ncols())
            .map(|j| if missing.contains(&(i, j)) { "NA".to_string() } else { format!("{}", m[(i, j)]) })
            .collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    std::fs::write(path, s).unwrap();
}

fn names(prefix: &str, p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("{prefix}{j}")).collect()
}

fn gaussian(p: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let sigma = make_sigma(CovModel::A09, p).unwrap();
    gaussian_sample(&mut stream(seed, 0, 0), n, &DVector::zeros(p), &sigma).unwrap()
}

fn data_file(dir: &TempDir, name: &str, p: usize, n: usize, seed: u64) -> PathBuf {
    let path = dir.path().join(name);
    write_csv(&path, &names("x", p), &gaussian(p, n, seed), &[]);
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn estimate_writes_symmetric_matrix() {
    let dir = TempDir::new().unwrap();
    let input = data_file(&dir, "x.csv", 30, 100, 1);
    let out = dir.path().join("est.json");
    ok(&["estimate", "--input", s(&input), "--output", s(&out), "--rank", "3"]);
    let v = json(&out);
    let sig = matrix(&v["sigma_hat"]);
    assert_eq!(sig.len(), 30);
    for i in 0..30 {
        assert_eq!(sig[i].len(), 30);
        assert!(sig[i][i] > 0.0);
        for j in 0..30 {
            assert!(sig[i][j].is_finite());
            assert!((sig[i][j] - sig[j][i]).abs() <= 1e-12 * sig[i][i].max(sig[j][j]));
        }
    }
    assert_eq!(v["rank_k"], 3);
    assert_eq!(v["columns"][0], "x1");
}

#[test]
fn estimate_accepts_missing_cells() {
    let dir = TempDir::new().unwrap();
    let x = gaussian(8, 80, 2);
    let missing: Vec<(usize, usize)> = (0..80).step_by(4).map(|i| (i, i % 8)).collect();
    let input = dir.path().join("na.csv");
    write_csv(&input, &names("x", 8), &x, &missing);
    let out = dir.path().join("est.json");
    ok(&["estimate", "--input", s(&input), "--output", s(&out), "--rank", "2", "--imputed"]);
    let v = json(&out);
    let imputed = matrix(&v["imputed"]);
    assert_eq!(imputed.len(), 80);
    for &(i, j) in &missing {
        assert!(imputed[i][j].is_finite());
    }
    // full-weight observed cells come back unchanged
    let w = matrix(&v["cell_weights"]);
    let mut checked = 0;
    for i in 0..80 {
        for j in 0..8 {
            if !missing.contains(&(i, j)) && w[i][j] == 1.0 {
                assert!((imputed[i][j] - x[(i, j)]).abs() < 1e-9, "({i}, {j})");
                checked += 1;
            }
        }
    }
    assert!(checked > 300);
}

#[test]
fn constant_column_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    let mut x = gaussian(5, 50, 3);
    x.column_mut(2).fill(1.0);
    let input = dir.path().join("const.csv");
    write_csv(&input, &["a", "b", "flat", "d", "e"].map(String::from), &x, &[]);
    let out = run(&["estimate", "--input", s(&input), "--output", s(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("flat"), "{err}");
}

#[test]
fn unreadable_input_exits_1() {
    let dir = TempDir::new().unwrap();
    let out = run(&["estimate", "--input", s(&dir.path().join("absent.csv")), "--output", s(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_numeric_cell_exits_2() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.csv");
    std::fs::write(&input, "a,b\n1,2\n3,x\n4,5\n6,7\n8,9\n1,1\n").unwrap();
    let out = run(&["estimate", "--input", s(&input), "--output", s(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn json_output_round_trips_exactly() {
    let dir = TempDir::new().unwrap();
    let input = data_file(&dir, "x.csv", 6, 60, 4);
    let js = dir.path().join("est.json");
    let cs = dir.path().join("est.csv");
    ok(&["estimate", "--input", s(&input), "--output", s(&js), "--rank", "2"]);
    ok(&["estimate", "--input", s(&input), "--output", s(&cs), "--rank", "2", "--format", "csv"]);
    let from_json = matrix(&json(&js)["sigma_hat"]);
    let text = std::fs::read_to_string(&cs).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,x2,x3,x4,x5,x6"));
    for (i, line) in lines.enumerate() {
        for (j, cell) in line.split(',').enumerate() {
            let v: f64 = cell.parse().unwrap();
            assert!((v - from_json[i][j]).abs() <= 1e-12 * from_json[i][j].abs().max(1.0));
        }
    }
}

#[test]
fn estimate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let input = data_file(&dir, "x.csv", 10, 60, 5);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["estimate", "--input", s(&input), "--output", s(&a)]);
    ok(&["estimate", "--input", s(&input), "--output", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn detect_keeps_clean_cases_below_cutoff() {
    let dir = TempDir::new().unwrap();
    let input = data_file(&dir, "x.csv", 5, 1000, 6);
    let out = dir.path().join("det.json");
    ok(&["detect", "--train", s(&input), "--output", s(&out), "--rank", "2", "--threshold", "0.99"]);
    let v = json(&out);
    let flagged = v["flagged"].as_array().unwrap().iter().filter(|f| f.as_bool().unwrap()).count();
    assert_eq!(v["distances"].as_array().unwrap().len(), 1000);
    assert!(flagged <= 50, "{flagged} of 1000 clean cases flagged");
}

#[test]
fn detect_reports_auc_with_labels() {
    let dir = TempDir::new().unwrap();
    let mut x = gaussian(5, 200, 7);
    for i in 0..10 {
        x[(i, 0)] += 8.0;
        x[(i, 3)] -= 8.0;
    }
    let mut header = names("x", 5);
    header.push("anomaly".into());
    let labels = DMatrix::from_fn(200, 1, |i, _| if i < 10 { 1.0 } else { 0.0 });
    let input = dir.path().join("lab.csv");
    write_csv(&input, &header, &DMatrix::from_fn(200, 6, |i, j| if j < 5 { x[(i, j)] } else { labels[(i, 0)] }), &[]);
    let out = dir.path().join("det.json");
    ok(&["detect", "--train", s(&input), "--labels", "anomaly", "--output", s(&out), "--rank", "2"]);
    let auc = json(&out)["roc"]["auc"].as_f64().unwrap();
    assert!(auc > 0.95, "auc {auc}");
}

#[test]
fn detect_rejects_column_mismatch() {
    let dir = TempDir::new().unwrap();
    let train = data_file(&dir, "train.csv", 5, 100, 8);
    let score = data_file(&dir, "score.csv", 6, 20, 9);
    let out = run(&["detect", "--train", s(&train), "--score", s(&score), "--output", s(&dir.path().join("d.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_single_scenario() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim.csv");
    ok(&[
        "simulate", "--p", "6", "--n", "60", "--gamma", "4", "--replications", "2", "--estimators", "cellRCov", "--output", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("A09,6,60,cellwise,4,cellRCov,"));
}

#[test]
fn simulate_gamma_sweep_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |o: &Path| {
        vec![
            "simulate".to_string(),
            "--p=5".into(),
            "--n=40".into(),
            "--gamma=0,2,4,6,8,10".into(),
            "--replications=2".into(),
            "--estimators=RCov,Spearman".into(),
            format!("--output={}", o.display()),
        ]
    };
    let run_args = |o: &Path| {
        let v = args(o);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    };
    run_args(&a);
    run_args(&b);
    let text = std::fs::read_to_string(&a).unwrap();
    for est in ["RCov", "Spearman"] {
        assert_eq!(text.lines().filter(|l| l.contains(&format!(",{est},"))).count(), 6);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn cca_of_identical_blocks() {
    let dir = TempDir::new().unwrap();
    let x = data_file(&dir, "x.csv", 4, 100, 10);
    let out = dir.path().join("cca.json");
    ok(&["cca", "--x1", s(&x), "--x2", s(&x), "--k", "1", "--rank", "2", "--output", s(&out)]);
    let rho = json(&out)["correlations"][0].as_f64().unwrap();
    assert!(rho >= 0.99, "{rho}");
}

#[test]
fn cca_cross_validation_finds_planted_link() {
    let dir = TempDir::new().unwrap();
    let (x1, x2) = planted_link(&mut stream(11, 0, 0), 150, 4, 4, 50.0);
    let p1 = dir.path().join("x1.csv");
    let p2 = dir.path().join("x2.csv");
    write_csv(&p1, &names("a", 4), &x1, &[]);
    write_csv(&p2, &names("b", 4), &x2, &[]);
    let out = dir.path().join("cca.json");
    ok(&["cca", "--x1", s(&p1), "--x2", s(&p2), "--k", "1", "--cv", "5", "--rank", "4", "--output", s(&out)]);
    let mcc = json(&out)["cv"]["mean_mcc"].as_f64().unwrap();
    assert!(mcc > 0.9, "{mcc}");
}

#[test]
fn cca_rejects_too_many_pairs() {
    let dir = TempDir::new().unwrap();
    let a = data_file(&dir, "a.csv", 3, 50, 12);
    let b = data_file(&dir, "b.csv", 5, 50, 13);
    let out = run(&["cca", "--x1", s(&a), "--x2", s(&b), "--k", "4", "--output", s(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rank_reports_gaps() {
    let dir = TempDir::new().unwrap();
    let input = data_file(&dir, "x.csv", 8, 80, 14);
    let out = dir.path().join("rank.json");
    ok(&["rank", "--input", s(&input), "--output", s(&out), "--k-max", "3"]);
    let v = json(&out);
    assert!(v["observed_gaps"].as_array().unwrap().len() <= 3);
}

#[test]
fn bad_thread_count_exits_2() {
    let dir = TempDir::new().unwrap();
    let input = data_file(&dir, "x.csv", 4, 30, 15);
    let out = Command::new(env!("CARGO_BIN_EXE_cellrcov"))
        .args(["estimate", "--input", s(&input), "--output", s(&dir.path().join("o.json"))])
        .env("RCOV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
