use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semgraph_core::confusion::ConfusionMatrix;
use semgraph_core::format::{write_feature_rows, FeatureRow};
use semgraph_core::graph::{AtomicGraph, ClassCatalog, NodeRef};
use semgraph_core::simkit::{self, ScenarioSpec};
use tempfile::TempDir;

fn semgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semgraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = semgraph(args);
    assert!(
        out.status.success(),
        "semgraph {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn catalog() -> ClassCatalog {
    ClassCatalog::new(["car", "person", "boat"], ["moving", "parked"]).unwrap()
}

fn pair(component: usize, id: u64, predicate: usize) -> AtomicGraph {
    let (c, q) = (NodeRef::component(component, id), NodeRef::predicate(predicate, id + 50));
    let mut g = AtomicGraph::new();
    g.add_node(c).add_node(q).add_edge(c, q);
    g
}

/// Writes catalog, confusion matrix and a three-change scenario into `dir`.
fn graph_fixture(dir: &Path) -> ScenarioSpec {
    let cat = catalog();
    let labels: Vec<String> = ["car", "person", "boat", "moving", "parked"].map(String::from).into();
    let mut rates = vec![vec![0.0; 5]; 5];
    for (i, row) in rates.iter_mut().enumerate() {
        row[i] = 0.9;
    }
    rates[0][2] = 0.05;
    rates[2][0] = 0.05;
    rates[3][4] = 0.05;
    rates[4][3] = 0.05;
    let cm = ConfusionMatrix::from_rates(labels, 0.5, &rates, 1000).unwrap();
    let mut both = pair(0, 1, 1);
    both.merge(&pair(1, 2, 0));
    let spec = ScenarioSpec {
        catalog: cat.clone(),
        frames: 400,
        script: vec![(0, pair(0, 1, 0)), (120, pair(0, 1, 1)), (250, both)],
        frame_error_rate: Some(0.02),
        false_alarm_rate: 0.0,
        seed: 9,
    };
    fs::write(dir.join("catalog.json"), serde_json::to_string(&cat).unwrap()).unwrap();
    fs::write(dir.join("cm.json"), serde_json::to_string(&cm).unwrap()).unwrap();
    fs::write(dir.join("scenario.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    spec
}

fn graph_stream(dir: &Path) -> PathBuf {
    let stream = dir.join("stream.jsonl");
    ok(&[
        "sim",
        "graphs",
        "--scenario",
        p(&dir.join("scenario.json")),
        "--cm",
        p(&dir.join("cm.json")),
        "--out",
        p(&stream),
    ]);
    ok(&["cm", "costs", "--cm", p(&dir.join("cm.json")), "--out", p(&dir.join("costs.json"))]);
    stream
}

fn pipeline_config(dir: &Path, out: &str) -> PathBuf {
    let catalog: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("catalog.json")).unwrap()).unwrap();
    let config = serde_json::json!({
        "catalog": catalog,
        "stages": ["smooth"],
        "inputs": {"graphs": "stream.jsonl"},
        "output_dir": out,
        "smooth": {"costs": "costs.json", "initial_empty": true},
        "goal": {"components": ["person"], "predicates": ["moving", "parked"], "max_attribute_level": 3}
    });
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, config.to_string()).unwrap();
    path
}

#[test]
fn smoothing_reports_only_scripted_changes() {
    let dir = TempDir::new().unwrap();
    let spec = graph_fixture(dir.path());
    let stream = graph_stream(dir.path());
    let events = dir.path().join("events.jsonl");
    ok(&[
        "ged",
        "--costs",
        p(&dir.path().join("costs.json")),
        "--catalog",
        p(&dir.path().join("catalog.json")),
        "--in",
        p(&stream),
        "--out",
        p(&events),
        "--initial-empty",
    ]);
    let times: Vec<u64> = fs::read_to_string(&events)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["t"].as_u64().unwrap())
        .collect();
    // the person arrives in a bank of its own, so every transition is one event
    let expected = spec.transitions();
    assert_eq!(times.len(), expected.len(), "{times:?}");
    for (t, e) in times.iter().zip(&expected) {
        assert!(t.abs_diff(*e as u64) <= 5, "event at {t}, scripted {e}");
    }
}

#[test]
fn run_equals_piped_stages_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    graph_fixture(dir.path());
    let stream = graph_stream(dir.path());
    let smoothed = dir.path().join("smoothed.jsonl");
    ok(&[
        "ged",
        "--costs",
        p(&dir.path().join("costs.json")),
        "--catalog",
        p(&dir.path().join("catalog.json")),
        "--in",
        p(&stream),
        "--out",
        p(&dir.path().join("events.jsonl")),
        "--smoothed",
        p(&smoothed),
        "--initial-empty",
    ]);
    ok(&["run", "--config", p(&pipeline_config(dir.path(), "a"))]);
    ok(&["run", "--config", p(&pipeline_config(dir.path(), "b"))]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(fs::read(a.join("graphs.jsonl")).unwrap(), fs::read(&smoothed).unwrap());
    assert_eq!(fs::read(a.join("events.jsonl")).unwrap(), fs::read(dir.path().join("events.jsonl")).unwrap());
    for f in ["graphs.jsonl", "events.jsonl", "ledger.json", "rate.json", "innovation.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn rate_command_matches_run() {
    let dir = TempDir::new().unwrap();
    graph_fixture(dir.path());
    graph_stream(dir.path());
    ok(&["run", "--config", p(&pipeline_config(dir.path(), "out"))]);
    let out = dir.path().join("out");
    let from_run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("rate.json")).unwrap()).unwrap();
    let goal = dir.path().join("goal.json");
    fs::write(&goal, from_run["goal"].to_string()).unwrap();
    let stdout = ok(&["rate", "--ledger", p(&out.join("ledger.json")), "--goal", p(&goal)]).stdout;
    let report: serde_json::Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(report["r"], from_run["r"]);
    assert_eq!(report["r_hat"], from_run["r_hat"]);
    let (r, r_hat) = (report["r"].as_f64().unwrap(), report["r_hat"].as_f64().unwrap());
    assert!(r_hat < r && r_hat > 0.0, "{r_hat} vs {r}");
    let universal = ok(&[
        "rate",
        "--ledger",
        p(&out.join("ledger.json")),
        "--catalog",
        p(&dir.path().join("catalog.json")),
    ])
    .stdout;
    let universal: serde_json::Value = serde_json::from_slice(&universal).unwrap();
    assert_eq!(universal["r"], universal["r_hat"]);
}

#[test]
fn confusion_matrix_from_simulated_samples() {
    let dir = TempDir::new().unwrap();
    let d = |f: &str| dir.path().join(f);
    ok(&["sim", "extractor", "--k", "3", "--separability", "3", "--seed", "1", "--out", p(&d("ex.json"))]);
    ok(&["sim", "samples", "--extractor", p(&d("ex.json")), "--n", "600", "--out", p(&d("s.jsonl"))]);
    ok(&[
        "cm",
        "estimate",
        "--tau",
        "0.3",
        "--in",
        p(&d("s.jsonl")),
        "--out",
        p(&d("cm.json")),
        "--prevalence-out",
        p(&d("prev.json")),
    ]);
    let cm: ConfusionMatrix = serde_json::from_str(&fs::read_to_string(d("cm.json")).unwrap()).unwrap();
    assert_eq!(cm.k(), 3);
    assert_eq!(cm.total(), 600);
    let roc = ok(&["cm", "roc", "--taus", "0.1:0.9:0.1", "--in", p(&d("s.jsonl"))]).stdout;
    let roc = String::from_utf8(roc).unwrap();
    assert_eq!(roc.lines().next(), Some("pattern,tau,fpr,tpr"));
    assert_eq!(roc.lines().count(), 1 + 3 * 9);
    ok(&["cm", "costs", "--cm", p(&d("cm.json")), "--prevalence", p(&d("prev.json")), "--out", p(&d("c.json"))]);
    let costs: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("c.json")).unwrap()).unwrap();
    assert_eq!(costs["basis"], "posterior");
}

#[test]
fn integration_of_simulated_scores() {
    let dir = TempDir::new().unwrap();
    let d = |f: &str| dir.path().join(f);
    ok(&["sim", "extractor", "--k", "2", "--seed", "3", "--out", p(&d("ex.json"))]);
    ok(&["sim", "timeline", "--k", "2", "--frames", "200", "--seed", "3", "--out", p(&d("tl.json"))]);
    ok(&["sim", "scores", "--extractor", p(&d("ex.json")), "--timeline", p(&d("tl.json")), "--out", p(&d("s.csv"))]);
    let scores = fs::read_to_string(d("s.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("t,pattern,score"));
    assert_eq!(scores.lines().count(), 1 + 400);
    let det = ok(&["integrate", "--window", "4", "--tau", "0.5", "--in", p(&d("s.csv"))]).stdout;
    let det = String::from_utf8(det).unwrap();
    assert_eq!(det.lines().next(), Some("t,pattern,score,detected"));
    assert_eq!(det.lines().count(), 1 + 400);

    let model = d("model.json");
    fs::write(&model, r#"{"mu0":0.3,"sigma0":0.1,"mu1":0.5,"sigma1":0.1,"rho":0.0}"#).unwrap();
    let report = ok(&["tune", "--model", p(&model), "--target-fpr", "0.1", "--max-window", "5"]).stdout;
    let report = String::from_utf8(report).unwrap();
    assert_eq!(report.lines().next(), Some("T,tau,tpr"));
    assert_eq!(report.lines().count(), 6);
}

#[test]
fn viterbi_and_fit_on_sampled_observations() {
    let dir = TempDir::new().unwrap();
    let d = |f: &str| dir.path().join(f);
    fs::write(
        d("m.json"),
        r#"{"labels":["absent","present"],"A":[[0.9,0.1],[0.1,0.9]],"B":[[0.8,0.2],[0.2,0.8]],"p":[0.5,0.5]}"#,
    )
    .unwrap();
    ok(&["sim", "hmm", "--model", p(&d("m.json")), "--len", "300", "--seed", "5", "--out", p(&d("obs.csv"))]);
    let states = ok(&["viterbi", "--model", p(&d("m.json")), "--in", p(&d("obs.csv"))]).stdout;
    let states = String::from_utf8(states).unwrap();
    assert_eq!(states.lines().next(), Some("t,state,label"));
    assert_eq!(states.lines().count(), 301);
    let beam = ok(&["viterbi", "--model", p(&d("m.json")), "--in", p(&d("obs.csv")), "--beam", "2"]).stdout;
    assert_eq!(beam, states.as_bytes(), "a full beam is exact");
    ok(&["fit", "--init", p(&d("m.json")), "--iters", "20", "--in", p(&d("obs.csv")), "--out", p(&d("fit.json")), "--trace", p(&d("ll.csv"))]);
    let fitted: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("fit.json")).unwrap()).unwrap();
    assert_eq!(fitted["A"].as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(d("ll.csv")).unwrap().starts_with("iteration,log_likelihood"));
}

#[test]
fn feature_streams_give_innovation_and_groups() {
    let dir = TempDir::new().unwrap();
    let d = |f: &str| dir.path().join(f);
    let mut r = simkit::rng(11);
    let objects: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| (0..3).map(|_| simkit::random_unit(32, &mut r)).collect())
        .collect();
    let mut rows = Vec::new();
    for (track, object) in [(1u64, 0usize), (2, 1), (3, 0)] {
        let feats = simkit::object_features(&objects[object], 40, 0.3, 0.01, &mut r);
        for (t, v) in feats.into_iter().enumerate() {
            rows.push(FeatureRow {
                t: t as u64 + 40 * track,
                track_id: track,
                vector: v,
            });
        }
    }
    write_feature_rows(fs::File::create(d("f.csv")).unwrap(), &rows).unwrap();
    let inn = ok(&["pcp", "--buffer", "16", "--lambda", "auto", "--threshold", "2.0", "--in", p(&d("f.csv"))]).stdout;
    let inn = String::from_utf8(inn).unwrap();
    assert_eq!(inn.lines().next(), Some("t,track_id,l1,peak"));
    assert_eq!(inn.lines().count(), 1 + 120);
    let rec = ok(&["reconcile", "--in", p(&d("f.csv"))]).stdout;
    let rec: serde_json::Value = serde_json::from_slice(&rec).unwrap();
    assert_eq!(rec["groups"], serde_json::json!([[1, 3], [2]]));
}

#[test]
fn exit_codes_separate_input_and_stage_failures() {
    let dir = TempDir::new().unwrap();
    let d = |f: &str| dir.path().join(f);
    let missing = semgraph(&["viterbi", "--model", p(&d("nope.json")), "--in", p(&d("nope.csv"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(semgraph(&["integrate", "--bogus"]).status.code(), Some(2));

    fs::write(d("m.json"), r#"{"labels":[],"A":[[1,0],[0,1]],"B":[[1,0],[1,0]],"p":[0.5,0.5]}"#).unwrap();
    fs::write(d("obs.csv"), "t,symbol\n0,0\n1,1\n").unwrap();
    let failed = semgraph(&["viterbi", "--model", p(&d("m.json")), "--in", p(&d("obs.csv"))]);
    assert_eq!(failed.status.code(), Some(3), "{}", String::from_utf8_lossy(&failed.stderr));

    graph_fixture(dir.path());
    let config = serde_json::json!({
        "catalog": catalog(),
        "stages": ["track", "smooth"],
        "inputs": {"graphs": "stream.jsonl"},
        "output_dir": "out",
        "smooth": {"costs": "costs.json"}
    });
    fs::write(d("bad.json"), config.to_string()).unwrap();
    let bad = semgraph(&["run", "--config", p(&d("bad.json"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cannot follow"));
}
