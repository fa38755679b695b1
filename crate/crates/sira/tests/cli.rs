//! Command-line behaviour, driven in-process through `main_with_args`.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use sira::analyze::analyze;
use sira::experiments::metrics_from_runs;
use sira::report::read_sweep_csv;
use sira::trace::{read_runs, TraceRun};
use sira::dataset::read_examples;
use sira::demo::DemoRecipe;
use sira_core::synth::{eval_hallucination, Decoder};

fn sira(args: &[&str]) -> i32 {
    let mut all = vec!["sira"];
    all.extend_from_slice(args);
    sira::cli::main_with_args(all)
}

/// A quickly trained demo directory shared by all tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&dir);
        let code = sira(&["init-demo", "--steps", "30", "--out", dir.to_str().unwrap()]);
        assert_eq!(code, 0);
        dir
    })
}

fn fresh(name: &str) -> PathBuf {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    tempfile::Builder::new().prefix(name).tempdir_in(root).unwrap().keep()
}

fn decode(out: &Path, extra: &[&str]) -> i32 {
    let f = fixture();
    let model = f.join("model.bin");
    let data = f.join("test.jsonl");
    let mut args = vec![
        "decode",
        "--model",
        model.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--limit",
        "24",
    ];
    args.extend_from_slice(extra);
    sira(&args)
}

fn runs(path: &Path) -> Vec<TraceRun> {
    read_runs(BufReader::new(File::open(path).unwrap())).unwrap()
}

#[test]
fn init_demo_writes_artifacts() {
    let f = fixture();
    for name in ["model.bin", "train.jsonl", "test.jsonl", "train.json", "config.toml"] {
        assert!(f.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn decode_writes_both_traces() {
    let out = fresh("decode");
    assert_eq!(decode(&out, &[]), 0);
    let s = runs(&out.join("sira.jsonl"));
    let b = runs(&out.join("baseline.jsonl"));
    assert_eq!(s.len(), 24);
    assert_eq!(b.len(), 24);
    for r in s.iter().chain(&b) {
        assert!(!r.steps.is_empty());
        for st in &r.steps {
            let ids: Vec<_> = st.z_cd_top8.iter().map(|p| p.0).collect();
            assert_eq!(ids.len(), 8);
            assert_eq!(ids, st.z_full_top8.iter().map(|p| p.0).collect::<Vec<_>>());
            assert_eq!(ids, st.delta_top8.iter().map(|p| p.0).collect::<Vec<_>>());
        }
    }
    assert!(out.join("metrics_sira.json").is_file());
    assert!(out.join("metrics_baseline.json").is_file());
}

#[test]
fn reductions_give_identical_tokens() {
    let base = fresh("red-base");
    assert_eq!(decode(&base, &["--K", "0", "--no-timing"]), 0);
    let reference: Vec<_> = runs(&base.join("baseline.jsonl")).iter().map(TraceRun::tokens).collect();
    for extra in [["--alpha", "0"], ["--K", "0"]] {
        let out = fresh("red");
        let mut args = extra.to_vec();
        args.push("--no-timing");
        assert_eq!(decode(&out, &args), 0);
        let got: Vec<_> = runs(&out.join("sira.jsonl")).iter().map(TraceRun::tokens).collect();
        assert_eq!(got, reference, "{extra:?}");
    }
}

#[test]
fn invalid_parameters_exit_one() {
    let out = fresh("invalid");
    let l = DemoRecipe::default().model.num_layers;
    let too_big = (l + 1).to_string();
    assert_eq!(decode(&out, &["--K", &too_big]), 1);
    assert_eq!(decode(&out, &["--alpha", "-0.5"]), 1);
    assert_eq!(decode(&out, &["--T", "0"]), 1);
}

#[test]
fn no_timing_is_byte_deterministic() {
    let a = fresh("det-a");
    let b = fresh("det-b");
    assert_eq!(decode(&a, &["--no-timing", "--seed", "3"]), 0);
    assert_eq!(decode(&b, &["--no-timing", "--seed", "3"]), 0);
    for name in ["sira.jsonl", "baseline.jsonl", "metrics_sira.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn metrics_recomputed_from_traces_match_eval() {
    let out = fresh("metrics");
    assert_eq!(decode(&out, &["--K", "2", "--alpha", "0.5", "--no-timing"]), 0);
    let f = fixture();
    let mut examples = read_examples(BufReader::new(File::open(f.join("test.jsonl")).unwrap())).unwrap();
    examples.truncate(24);
    let vocab = DemoRecipe::default().spec.vocab();
    let model = sira::format::load_model(&f.join("model.bin")).unwrap();
    let direct = eval_hallucination(&model, Decoder::Sira { alpha: 0.5, k: 2 }, &examples, &vocab).unwrap();
    assert_eq!(metrics_from_runs(&examples, &runs(&out.join("sira.jsonl")), &vocab), direct);
}

#[test]
fn malformed_trace_names_the_line() {
    let out = fresh("malformed");
    assert_eq!(decode(&out, &["--no-timing"]), 0);
    let path = out.join("sira.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"step\": \"oops\"}";
    fs::write(&path, lines.join("\n")).unwrap();
    match read_runs(BufReader::new(File::open(&path).unwrap())) {
        Err(sira::CliError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let p = path.to_str().unwrap().to_owned();
    assert_eq!(sira(&["analyze", "--trace", &p, "--out", out.to_str().unwrap()]), 1);
}

#[test]
fn analyzing_a_trace_against_itself_is_zero() {
    let out = fresh("self");
    assert_eq!(decode(&out, &["--states", "--no-timing"]), 0);
    let r = runs(&out.join("sira.jsonl"));
    assert!(r.iter().all(TraceRun::has_states));
    let doc = analyze(&r, Some(&r)).unwrap();
    assert_eq!(doc.median_against_kl, Some(0.0));
    assert!(doc.mean_drift.unwrap().iter().all(|&d| d == 0.0));
    let p = out.join("sira.jsonl");
    let p = p.to_str().unwrap();
    assert_eq!(sira(&["analyze", "--trace", p, "--against", p, "--out", out.to_str().unwrap()]), 0);
    assert!(out.join("analysis.json").is_file());
    assert!(out.join("drift.csv").is_file());
}

#[test]
fn bench_reports_exact_ratio() {
    let out = fresh("bench");
    assert_eq!(sira(&["bench", "--layers", "28", "--K", "14", "--no-timing", "--out", out.to_str().unwrap()]), 0);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(doc["layer_eval_ratio"].as_f64(), Some(1.5));
}

#[test]
fn degenerate_sweep_rows_equal_baseline() {
    let f = fixture();
    let out = fresh("sweep");
    let (m, d) = (f.join("model.bin"), f.join("test.jsonl"));
    let code = sira(&[
        "sweep",
        "--model",
        m.to_str().unwrap(),
        "--dataset",
        d.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--limit",
        "24",
        "--k-list",
        "0,1,2",
        "--alpha-list",
        "0,0.5",
    ]);
    assert_eq!(code, 0);
    let rows = read_sweep_csv(File::open(out.join("sweep.csv")).unwrap()).unwrap();
    let base = rows.iter().find(|r| r.decoder == "baseline").unwrap().metrics();
    let cells: Vec<_> = rows.iter().filter(|r| r.decoder == "sira").collect();
    assert_eq!(cells.len(), 6);
    for r in cells {
        if r.k == 0 || r.alpha == 0.0 {
            assert_eq!(r.metrics(), base, "K={} alpha={}", r.k, r.alpha);
        }
    }
}

#[test]
fn empty_sweep_list_is_rejected() {
    let out = fresh("sweep-empty");
    let f = fixture();
    let cfg = out.join("c.toml");
    fs::write(
        &cfg,
        format!(
            "model = {:?}\ndataset = {:?}\nalpha_list = []\n",
            f.join("model.bin"),
            f.join("test.jsonl")
        ),
    )
    .unwrap();
    assert_eq!(sira(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
}
