//! End-to-end tests of the `semcert` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semcert::certainty::{Scorer, ScorerConfig};
use semcert::format::{read_codebook, read_embeddings};
use semcert::{build_index, CertaintyScore};

fn semcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcert")).args(args).arg("--quiet").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = semcert(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Small simulated bundle plus a codebook; returns (bundle dir, codebook path).
fn small_bundle(root: &Path) -> (PathBuf, PathBuf) {
    let sim = root.join("sim");
    ok(&[
        "simulate",
        "--seed",
        "7",
        "--out",
        &s(&sim),
        "--sim.num_wells",
        "6",
        "--sim.docs_per_well",
        "40",
        "--sim.queries_per_well",
        "4",
        "--sim.dim=16",
    ]);
    let pq = root.join("pq");
    ok(&[
        "train-pq",
        "--seed",
        "7",
        "--out",
        &s(&pq),
        "--paths.corpus",
        &s(&sim.join("corpus.scrt")),
        "--pq.num_subspaces",
        "4",
        "--pq.centroids_per_subspace",
        "16",
    ]);
    (sim, pq.join("codebook.scpq"))
}

#[test]
fn train_pq_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cb) = small_bundle(dir.path());
    let again = dir.path().join("pq2");
    ok(&[
        "train-pq",
        "--seed",
        "7",
        "--out",
        &s(&again),
        "--paths.corpus",
        &s(&sim.join("corpus.scrt")),
        "--pq.num_subspaces",
        "4",
        "--pq.centroids_per_subspace",
        "16",
    ]);
    assert_eq!(fs::read(cb).unwrap(), fs::read(again.join("codebook.scpq")).unwrap());
}

#[test]
fn simulate_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["simulate", "--seed", "7", "--out", &s(out), "--sim.num_wells", "6", "--sim.dim", "8"]);
    }
    for f in ["corpus.scrt", "queries.scrt", "qrels.txt", "centroids.scrt", "wells.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let wells: serde_json::Value = serde_json::from_slice(&fs::read(a.join("wells.json")).unwrap()).unwrap();
    assert_eq!(wells["seed"], 7);
    assert_eq!(wells["wells"][1]["centroid_offset"], 16 + 8 * 4);
    assert_eq!(wells["wells"][2]["depth_class"], "shallow");
}

#[test]
fn indivisible_subspaces_is_a_config_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "a 0 0 0\nb 1 1 1\nc 2 2 2\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = semcert(&[
        "train-pq",
        "--out",
        &s(&out_dir),
        "--paths.corpus",
        &s(&corpus),
        "--pq.num_subspaces",
        "2",
        "--pq.centroids_per_subspace",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_subspaces"));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_flags_fail_before_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    for args in [
        vec!["simulate", "--out", out_dir.to_str().unwrap(), "--sim.wells", "3"],
        vec!["simulate", "--out", out_dir.to_str().unwrap(), "--frobnicate"],
        vec!["simulate", "--out", out_dir.to_str().unwrap(), "--sim.variance_bands", "[1, 0.5, 2]"],
    ] {
        assert_eq!(semcert(&args).status.code(), Some(3), "{args:?}");
        assert!(!out_dir.exists(), "{args:?}");
    }
}

#[test]
fn toy_corpus_trains_the_optimal_two_means_codebook() {
    let pts = [("a", [0.0, 0.0]), ("b", [0.1, 0.0]), ("c", [5.0, 5.0]), ("d", [5.1, 5.0])];
    // Optimal 2-means by enumerating every split into two non-empty groups.
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 1u32..15 {
        let mut cost = 0.0;
        let mut means = Vec::new();
        for side in [true, false] {
            let members: Vec<[f64; 2]> =
                (0..4).filter(|i| ((mask >> i) & 1 == 1) == side).map(|i| pts[i].1).collect();
            let n = members.len() as f64;
            let mean = [members.iter().map(|p| p[0]).sum::<f64>() / n, members.iter().map(|p| p[1]).sum::<f64>() / n];
            cost += members.iter().map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)).sum::<f64>();
            means.push(mean);
        }
        if cost < best.0 {
            means.sort_by(|a, b| a[0].total_cmp(&b[0]));
            best = (cost, means);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("toy.txt");
    let text: String = pts.iter().map(|(id, p)| format!("{id} {} {}\n", p[0], p[1])).collect();
    fs::write(&corpus, text).unwrap();
    let out = dir.path().join("out");
    ok(&[
        "train-pq",
        "--out",
        &s(&out),
        "--paths.corpus",
        &s(&corpus),
        "--pq.num_subspaces",
        "1",
        "--pq.centroids_per_subspace",
        "2",
    ]);
    let cb = read_codebook(&out.join("codebook.scpq")).unwrap();
    let mut got: Vec<Vec<f64>> = (0..2).map(|j| cb.centroid(0, j).to_vec()).collect();
    got.sort_by(|a, b| a[0].total_cmp(&b[0]));
    for (g, w) in got.iter().zip(&best.1) {
        // Codebooks are stored as f32.
        assert!((g[0] - w[0]).abs() < 1e-6 && (g[1] - w[1]).abs() < 1e-6, "{g:?} vs {w:?}");
    }
}

#[test]
fn score_matches_library_and_query_order() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cb_path) = small_bundle(dir.path());
    let out = dir.path().join("score");
    ok(&[
        "score",
        "--out",
        &s(&out),
        "--paths.corpus",
        &s(&sim.join("corpus.scrt")),
        "--paths.queries",
        &s(&sim.join("queries.scrt")),
        "--paths.codebook",
        &s(&cb_path),
    ]);
    let lines: Vec<CertaintyScore> = fs::read_to_string(out.join("scores.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let corpus = read_embeddings(&sim.join("corpus.scrt")).unwrap();
    let queries = read_embeddings(&sim.join("queries.scrt")).unwrap();
    assert_eq!(lines.len(), queries.len());
    let cb = read_codebook(&cb_path).unwrap();
    let index = build_index(corpus, None).unwrap();
    let scorer = Scorer::new(&index, &cb, ScorerConfig::default()).unwrap();
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(line, &scorer.assess(queries.id(i), queries.row(i)).unwrap());
    }

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("score.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(!out.join(".lock").exists());
}

#[test]
fn empty_query_file_gives_empty_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cb) = small_bundle(dir.path());
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("score");
    ok(&[
        "score",
        "--out",
        &s(&out),
        "--paths.corpus",
        &s(&sim.join("corpus.scrt")),
        "--paths.queries",
        &s(&empty),
        "--paths.codebook",
        &s(&cb),
    ]);
    assert_eq!(fs::read(out.join("scores.jsonl")).unwrap(), b"");
}

#[test]
fn dimension_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cb) = small_bundle(dir.path());
    let queries = dir.path().join("q.txt");
    fs::write(&queries, "q1 1 2 3\n").unwrap();
    let out = semcert(&[
        "score",
        "--out",
        &s(&dir.path().join("score")),
        "--paths.corpus",
        &s(&sim.join("corpus.scrt")),
        "--paths.queries",
        &s(&queries),
        "--paths.codebook",
        &s(&cb),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

fn monitor(sim: &Path, cb: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "monitor".to_string(),
        "--out".into(),
        s(out),
        "--paths.corpus".into(),
        s(&sim.join("corpus.scrt")),
        "--paths.queries".into(),
        s(&sim.join("queries.scrt")),
        "--paths.codebook".into(),
        s(cb),
    ];
    args.extend(extra.iter().map(|a| a.to_string()));
    semcert(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn monitor_threshold_zero_never_alerts() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cb) = small_bundle(dir.path());
    let out = dir.path().join("mon");
    let res = monitor(&sim, &cb, &out, &["--monitor.threshold", "0", "--max-alert-rate", "0"]);
    assert!(res.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["alerts"], 0);
    let events = fs::read_to_string(out.join("events.jsonl")).unwrap();
    assert_eq!(events.lines().count(), 24);
}

#[test]
fn monitor_budget_violation_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cb) = small_bundle(dir.path());
    let out = dir.path().join("mon");
    let res = monitor(&sim, &cb, &out, &["--monitor.threshold", "1", "--max-alert-rate", "0.5"]);
    assert_eq!(res.status.code(), Some(2));
    // Outputs are still written for inspection.
    assert!(out.join("events.jsonl").exists() && out.join("summary.json").exists());
}

#[test]
fn eval_with_perfect_retrieval_reports_full_recall() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cb) = small_bundle(dir.path());
    let out = dir.path().join("eval");
    ok(&[
        "eval",
        "--out",
        &s(&out),
        "--paths.corpus",
        &s(&sim.join("corpus.scrt")),
        "--paths.queries",
        &s(&sim.join("queries.scrt")),
        "--paths.qrels",
        &s(&sim.join("qrels.txt")),
        "--paths.codebook",
        &s(&cb),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mean_recall"], 1.0);
    assert_eq!(report["queries"], 24);
    assert!(report["spearman"].is_null());
    assert_eq!(report["ablation_rows"].as_array().unwrap().len(), 5);
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("Recall@10: 1.0000"));
}

#[test]
fn search_writes_trec_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cb) = small_bundle(dir.path());
    for (mode, extra) in [("exact", None), ("adc", Some("--adc"))] {
        let out = dir.path().join(mode);
        let mut args = vec![
            "search".to_string(),
            "--out".into(),
            s(&out),
            "--paths.corpus".into(),
            s(&sim.join("corpus.scrt")),
            "--paths.queries".into(),
            s(&sim.join("queries.scrt")),
            "--paths.codebook".into(),
            s(&cb),
            "--search.k".into(),
            "5".into(),
        ];
        args.extend(extra.map(String::from));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        let run = semcert::format::parse_run(fs::File::open(out.join("run.trec")).unwrap()).unwrap();
        assert_eq!(run.len(), 24, "{mode}");
        assert!(run.values().all(|entries| entries.len() == 5), "{mode}");
    }
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("sim");
    fs::write(
        &cfg,
        format!(r#"{{"seed": 3, "paths": {{"out_dir": "{}"}}, "sim": {{"num_wells": 3, "dim": 8}}}}"#, s(&out)),
    )
    .unwrap();
    ok(&["simulate", "--config", &s(&cfg), "--sim.queries_per_well", "2"]);
    let queries = read_embeddings(&out.join("queries.scrt")).unwrap();
    assert_eq!((queries.len(), queries.dim()), (6, 8));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("simulate.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 3);
}
