// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn latsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latsteer"))
        .args(args)
        .env("LATSTEER_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = latsteer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = latsteer(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Rows of a CSV without quoting, header skipped.
fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

/// Smallest distance between language means over pooled RMS spread,
/// computed from a scatter CSV.
fn scatter_separation(p: &Path) -> f64 {
    let rows = csv_rows(p);
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for r in rows {
        let point: Vec<f64> = r[2..].iter().map(|x| x.parse().unwrap()).collect();
        match groups.iter_mut().find(|(l, _)| *l == r[1]) {
            Some((_, pts)) => pts.push(point),
            None => groups.push((r[1].clone(), vec![point])),
        }
    }
    let dim = groups[0].1[0].len();
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, pts)| {
            (0..dim)
                .map(|d| pts.iter().map(|p| p[d]).sum::<f64>() / pts.len() as f64)
                .collect()
        })
        .collect();
    let (mut ss, mut n) = (0.0, 0usize);
    for ((_, pts), m) in groups.iter().zip(&means) {
        for p in pts {
            ss += p.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += dim;
        }
    }
    let spread = (ss / n as f64).sqrt();
    let mut min = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            min = min.min(d.sqrt());
        }
    }
    min / spread
}

fn files_except_meta(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_meta.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn missing_dump_exits_with_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = tmp.path().join("out");
    let err = fails(
        &["fit-directions", "--dump", s(&missing), "--out", s(&out)],
        2,
    );
    assert!(err.contains("dump not found"), "{err}");
    let err = fails(&["classify", "--dump", s(&missing), "--out", s(&out)], 2);
    assert!(err.contains("dump not found"), "{err}");
}

#[test]
fn bad_arguments_exit_with_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    fails(
        &[
            "grid-search",
            "--family",
            s(tmp.path()),
            "--out",
            s(&out),
            "--grid",
            "1:0:0.1",
        ],
        2,
    );
    fails(&["frobnicate"], 2);
}

#[test]
fn dump_to_plots_and_probes() {
    let tmp = tempfile::tempdir().unwrap();
    let dump = tmp.path().join("dump");
    let dirs = tmp.path().join("dirs");
    let plot = tmp.path().join("plot");
    let cls = tmp.path().join("cls");
    ok(&["synth", "--out", s(&dump), "--seed", "3"]);
    ok(&["fit-directions", "--dump", s(&dump), "--out", s(&dirs)]);
    ok(&[
        "plot-data",
        "--dump",
        s(&dump),
        "--directions",
        s(&dirs),
        "--out",
        s(&plot),
        "--strength",
        "1",
    ]);

    assert_eq!(csv_rows(&plot.join("variance.csv")).len(), 8);
    assert!(scatter_separation(&plot.join("scatter_layer_7.csv")) >= 5.0);
    assert!(scatter_separation(&plot.join("scatter_layer_0.csv")) < 1.5);
    assert!(scatter_separation(&plot.join("steered_scatter_layer_7.csv")) < 0.5);
    assert!(!plot.join("steered_scatter_layer_5.csv").exists());
    let header = fs::read_to_string(plot.join("scatter_layer_7.csv")).unwrap();
    assert!(header.starts_with("row,language,pc1,pc2\n"));

    let meta = read_json(&plot.join("run_meta.json"));
    let manifest = dump.join("manifest.json");
    let recorded = meta["inputs"][s(&manifest)].as_str().unwrap();
    assert_eq!(
        recorded,
        latsteer::tensor_store::sha256_file(&manifest).unwrap()
    );
    assert_eq!(meta["config"]["plot-data"]["strength"], 1.0);

    let table = ok(&["classify", "--dump", s(&dump), "--out", s(&cls)]);
    assert_eq!(table.lines().count(), 4);
    for row in csv_rows(&cls.join("accuracy.csv")) {
        assert!(row[0].starts_with("en-"));
        assert!(row[1].parse::<f64>().unwrap() >= 0.99, "{row:?}");
    }
    let probe = fs::read_to_string(cls.join("probe_en-zh.json")).unwrap();
    let probe = latsteer::ProjectionProbe::from_json(&probe).unwrap();
    assert_eq!(probe.languages, ["en", "zh"]);
    assert_eq!(probe.layer_index, 7);
}

#[test]
fn outputs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dump = tmp.path().join("dump");
    ok(&["synth", "--out", s(&dump), "--n", "20"]);
    let mut runs = Vec::new();
    for i in 0..2 {
        let dirs = tmp.path().join(format!("dirs{i}"));
        let plot = tmp.path().join(format!("plot{i}"));
        let cls = tmp.path().join(format!("cls{i}"));
        ok(&["fit-directions", "--dump", s(&dump), "--out", s(&dirs)]);
        ok(&[
            "plot-data",
            "--dump",
            s(&dump),
            "--directions",
            s(&dirs),
            "--out",
            s(&plot),
        ]);
        ok(&[
            "classify",
            "--dump",
            s(&dump),
            "--out",
            s(&cls),
            "--fit",
            "10",
            "--val",
            "10",
        ]);
        runs.push([dirs, plot, cls].map(|d| files_except_meta(&d)));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn stale_directions_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let dirs = tmp.path().join("dirs");
    ok(&["synth", "--out", s(&a), "--n", "10"]);
    ok(&["synth", "--out", s(&b), "--n", "12"]);
    ok(&["fit-directions", "--dump", s(&a), "--out", s(&dirs)]);
    let out = tmp.path().join("out");
    let err = fails(
        &[
            "plot-data",
            "--dump",
            s(&b),
            "--directions",
            s(&dirs),
            "--out",
            s(&out),
        ],
        2,
    );
    assert!(err.contains("different dump"), "{err}");
}

#[test]
fn classify_split_must_fit_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let dump = tmp.path().join("dump");
    ok(&["synth", "--out", s(&dump), "--n", "20"]);
    let out = tmp.path().join("out");
    let err = fails(&["classify", "--dump", s(&dump), "--out", s(&out)], 2);
    assert!(err.contains("insufficient samples"), "{err}");
}

#[test]
fn k_beyond_row_count_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dump = tmp.path().join("dump");
    ok(&["synth", "--out", s(&dump), "--n", "2"]);
    let out = tmp.path().join("out");
    fails(
        &[
            "fit-directions",
            "--dump",
            s(&dump),
            "--out",
            s(&out),
            "--k",
            "20",
        ],
        2,
    );
}

#[test]
fn constant_activations_are_computation_error() {
    use latsteer::tensor_store::{write_dump, CorpusManifest, Pooling};
    let tmp = tempfile::tempdir().unwrap();
    let dump = tmp.path().join("dump");
    let manifest = CorpusManifest {
        languages: vec!["en".into(), "zh".into()],
        samples_per_language: 3,
        layers: 1,
        hidden_dim: 4,
        pooling: Pooling::Mean,
        source: "constant".into(),
    };
    let acts =
        latsteer::ActivationMatrix::new(0, 6, 4, vec![0.5; 24], manifest.row_labels()).unwrap();
    write_dump(&dump, &manifest, &[acts]).unwrap();
    let out = tmp.path().join("out");
    let err = fails(
        &[
            "fit-directions",
            "--dump",
            s(&dump),
            "--out",
            s(&out),
            "--k",
            "1",
        ],
        1,
    );
    assert!(err.contains("rank"), "{err}");
}

#[test]
fn identical_files_have_zero_kl() {
    let tmp = tempfile::tempdir().unwrap();
    let dists = tmp.path().join("ref.jsonl");
    let golden = fs::read_to_string(fixture("golden_dists.jsonl")).unwrap();
    let reference: String = golden
        .lines()
        .filter(|l| l.contains("reference_en"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&dists, reference).unwrap();
    let out = tmp.path().join("out");
    let row = ok(&[
        "evaluate-kl",
        "--reference",
        s(&dists),
        "--candidate",
        s(&dists),
        "--out",
        s(&out),
        "--pair",
        "en-es",
        "--top-k",
        "2",
    ]);
    assert_eq!(row.trim(), "en-es\t0.00");
    let report = read_json(&out.join("kl_report.json"));
    assert_eq!(report["mean_unsteered"], 0.0);
    assert!(report["mean_steered"].is_null());
}

#[test]
fn tagged_fixture_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    ok(&[
        "evaluate-kl",
        "--dists",
        s(&fixture("golden_dists.jsonl")),
        "--out",
        s(&out),
        "--top-k",
        "2",
    ]);
    let report = read_json(&out.join("kl_report.json"));
    // Sample s0: KL((.5,.5) || (.9,.1)) unsteered, identical when steered.
    let s0 = report["samples"][0]["kl_unsteered"].as_f64().unwrap();
    assert!((s0 - 0.5 * (25.0f64 / 9.0).ln()).abs() < 1e-12);
    assert_eq!(report["samples"][0]["kl_steered"], 0.0);
    assert!(out.join("token_shift.csv").exists());
    assert!(out.join("reduction.json").exists());
}

#[test]
fn malformed_jsonl_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let err = fails(
        &[
            "evaluate-kl",
            "--dists",
            s(&fixture("corrupt_dists.jsonl")),
            "--out",
            s(&out),
        ],
        2,
    );
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn grid_search_recovers_planted_strength() {
    let tmp = tempfile::tempdir().unwrap();
    let fam = tmp.path().join("fam");
    let out = tmp.path().join("out");
    ok(&[
        "synth",
        "--family",
        "--s-star",
        "-1.5",
        "--samples",
        "8",
        "--out",
        s(&fam),
    ]);
    let line = ok(&[
        "grid-search",
        "--family",
        s(&fam),
        "--out",
        s(&out),
        "--pair",
        "en-zh",
    ]);
    let (pair, best) = line.trim().split_once('\t').unwrap();
    assert_eq!(pair, "en-zh");
    assert!((best.parse::<f64>().unwrap() + 1.5).abs() <= 0.2);
    assert_eq!(csv_rows(&out.join("grid_curve.csv")).len(), 81);
    let result = read_json(&out.join("grid_result.json"));
    assert!(result["reduction"].as_f64().unwrap() > 0.2);

    fs::remove_file(fam.join("strength_0.jsonl")).unwrap();
    let err = fails(&["grid-search", "--family", s(&fam), "--out", s(&out)], 2);
    assert!(err.contains("strength_0.jsonl"), "{err}");
}
