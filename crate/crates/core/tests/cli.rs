use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use cxr_dimred::cli::{self, RunManifest, EXIT_BAD_CONFIG, EXIT_MISSING_INPUT, EXIT_USAGE};
use cxr_dimred::synth::{generate_dataset, SynthConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cxr-dimred"))
}

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("cxr-dimred").chain(args.iter().copied()))
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    let manifest: RunManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    manifest.outputs.into_iter().map(|d| (d.path, d.sha256)).collect()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn synth_is_deterministic_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let status = bin().args(["synth", "--n", "10", "--seed", "1", "--side", "64", "--out"]).arg(out).status().unwrap();
        assert!(status.success());
    }
    let (da, db) = (digests(&a), digests(&b));
    assert_eq!(da, db);
    assert!(da.contains_key("metadata.csv") && da.contains_key("outlier_truth.txt"));
    assert_eq!(da.len(), 3 * 10 + 3);
    let manifest: RunManifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "synth");
    assert_eq!(manifest.seeds, vec![1]);
    assert_eq!(manifest.config_hash.len(), 64);
}

#[test]
fn unknown_flag_is_a_usage_error_with_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .args(["synth", "--n", "5", "--frobnicate", "--out", "corpus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(entries(tmp.path()).is_empty());
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
}

#[test]
fn missing_input_and_bad_config_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eda");
    let missing = bin().args(["eda", "--metadata"]).arg(tmp.path().join("absent.csv")).arg("--out").arg(&out).output().unwrap();
    assert_eq!(missing.status.code(), Some(EXIT_MISSING_INPUT));
    let err: serde_json::Value = serde_json::from_slice(missing.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "missing_input");

    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, "{ \"tsne\": { \"perplexity\": \"high\" } }").unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["--config", c, "eda", "--metadata", "x.csv", "--out", out.to_str().unwrap()]), EXIT_BAD_CONFIG);
    fs::write(&cfg, "{ \"unknown_section\": 1 }").unwrap();
    assert_eq!(run(&["--config", c, "eda", "--metadata", "x.csv", "--out", out.to_str().unwrap()]), EXIT_BAD_CONFIG);
    fs::write(&cfg, "{ \"cnn\": { \"input_side\": 30 } }").unwrap();
    assert_eq!(run(&["--config", c, "eda", "--metadata", "x.csv", "--out", out.to_str().unwrap()]), EXIT_BAD_CONFIG);
    assert_eq!(run(&["--config", tmp.path().join("nope.json").to_str().unwrap(), "eda", "--out", "x"]), EXIT_MISSING_INPUT);
    assert!(!out.exists());
    assert_eq!(entries(tmp.path()), vec!["config.json".to_string()]);
}

#[test]
fn eda_balance_matches_generator_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = tmp.path().join("corpus");
    let (n, frac) = (50usize, 0.4);
    assert_eq!(run(&["synth", "--n", "50", "--nodule-frac", "0.4", "--seed", "9", "--side", "32", "--out", corpus_dir.to_str().unwrap()]), 0);
    let eda_dir = tmp.path().join("eda");
    assert_eq!(run(&["eda", "--metadata", corpus_dir.join("metadata.csv").to_str().unwrap(), "--out", eda_dir.to_str().unwrap()]), 0);
    let balance = fs::read_to_string(eda_dir.join("balance.csv")).unwrap();
    let nodules = (frac * n as f64).round() as usize;
    assert_eq!(balance, format!("class,count\nnodule,{nodules}\nnormal,{}\ntotal,{n}\n", n - nodules));

    let truth = generate_dataset(n, frac, 0.05, 9, &SynthConfig { side: 32, ..Default::default() }).unwrap();
    let sizes = fs::read_to_string(eda_dir.join("size_histogram.csv")).unwrap();
    let total: usize = sizes.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, truth.records().iter().filter(|r| r.size_mm.is_some()).count());
    for name in ["subtlety.csv", "combined.csv", "locations.csv", "manifest.json"] {
        assert!(eda_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn output_root_override_and_file_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    assert_eq!(run(&["synth", "--n", "24", "--seed", "2", "--side", "32", "--out", corpus.to_str().unwrap()]), 0);
    let root = tmp.path().join("results");
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, r#"{"mask_side": 16}"#).unwrap();
    let status = bin()
        .env(cli::OUTPUT_ROOT_ENV, &root)
        .arg("--config")
        .arg(&cfg)
        .args(["tsne", "--perplexity", "5", "--seed", "3", "--masks"])
        .arg(corpus.join("masks"))
        .args(["--out", "embedding.csv"])
        .status()
        .unwrap();
    assert!(status.success());
    let embedding = root.join("embedding.csv");
    let header = fs::read_to_string(&embedding).unwrap();
    assert!(header.starts_with("case_id,y1,y2,score\n"));
    assert_eq!(header.lines().count(), 25);
    let manifest: RunManifest = serde_json::from_slice(&fs::read(root.join("embedding.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seeds, vec![3]);
    assert_eq!(manifest.config.tsne.perplexity, 5.0);
    assert_eq!(manifest.inputs.len(), 24);
    assert_eq!(entries(&root), vec!["embedding.csv".to_string(), "embedding.csv.manifest.json".to_string()]);

    let exclude = root.join("exclude.txt");
    assert_eq!(run(&["filter-outliers", "--embedding", embedding.to_str().unwrap(), "--fraction", "0.1", "--out", exclude.to_str().unwrap()]), 0);
    assert_eq!(fs::read_to_string(&exclude).unwrap().lines().count(), 2);
}

#[test]
fn preprocess_train_and_experiment_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |rel: &str| tmp.path().join(rel).to_str().unwrap().to_string();
    assert_eq!(run(&["synth", "--n", "30", "--seed", "4", "--side", "32", "--out", &p("corpus")]), 0);
    fs::write(p("exclude.txt"), "case0003\ncase0007\n").unwrap();
    let common = ["--bse", &p("corpus/bse"), "--masks", &p("corpus/masks"), "--originals", &p("corpus/originals"), "--metadata", &p("corpus/metadata.csv")];
    let (exclude, v05_dir, bad_dir) = (p("exclude.txt"), p("v05"), p("bad"));
    let mut v05 = vec!["preprocess", "--variant", "v05", "--exclude", &exclude, "--out", &v05_dir];
    v05.extend(common);
    assert_eq!(run(&v05), 0);
    let manifest = fs::read_to_string(p("v05/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 28);
    assert!(!manifest.contains("case0003"));
    assert!(manifest.lines().nth(1).unwrap().ends_with(",images/case0000.pgm"));
    let stats = fs::read_to_string(p("v05/mask_stats.csv")).unwrap();
    assert!(stats.lines().nth(1).unwrap().split(',').all(|f| !f.is_empty()));
    let coverage = fs::read_to_string(p("v05/coverage.csv")).unwrap();
    assert!(coverage.starts_with("op,uncovered_count,uncovered_ids\nunion,"));

    let mut v05_missing = vec!["preprocess", "--variant", "v05", "--out", &bad_dir];
    v05_missing.extend(common);
    assert_eq!(run(&v05_missing), EXIT_USAGE);
    assert!(!Path::new(&p("bad")).exists());

    let cfg = p("config.json");
    fs::write(&cfg, r#"{"cnn": {"input_side": 32, "conv_blocks": [{"filters": 2, "kernel": 3}], "dense_units": 4}}"#).unwrap();
    assert_eq!(run(&["--config", &cfg, "train", "--data", &p("v05"), "--epochs", "3", "--seed", "5", "--out", &p("run.csv")]), 0);
    let curve = fs::read_to_string(p("run.csv")).unwrap();
    assert!(curve.starts_with("epoch,train_acc,val_acc,train_loss,val_loss\n"));
    assert_eq!(curve.lines().count(), 4);

    assert_eq!(run(&["--config", &cfg, "experiment", "--variant", "v05", "--data", &p("v05"), "--runs", "2", "--seeds", "1,2", "--epochs", "4", "--out", &p("exp")]), 0);
    assert_eq!(entries(Path::new(&p("exp"))), ["averaged.csv", "manifest.json", "runs", "smoothed.csv", "summary.json"]);
    assert_eq!(entries(Path::new(&p("exp/runs"))), ["seed1.csv", "seed2.csv"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("exp/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variant"], "v05");
    assert_eq!(summary["seeds"], serde_json::json!([1, 2]));
    assert_eq!(summary["config"]["cnn"]["input_side"], 32);
    assert_eq!(summary["crossing_epoch"].is_null(), summary["actual_accuracy"].is_null());
    assert_eq!(run(&["--config", &cfg, "experiment", "--variant", "v05", "--data", &p("v05"), "--runs", "3", "--seeds", "1,2", "--out", &p("exp2")]), EXIT_USAGE);
}

#[test]
fn ingest_converts_listings_and_raw_images() {
    use cxr_dimred::imaging::{encode_raw_image, ByteOrder, ImageGrid};
    let tmp = tempfile::tempdir().unwrap();
    let p = |rel: &str| tmp.path().join(rel).to_str().unwrap().to_string();
    fs::write(p("nodules.txt"), "JPCLN001.IMG 3 12 50 F 1000 900 benign x\n").unwrap();
    fs::write(p("normals.txt"), "JPCNN001.IMG 44 M\n").unwrap();
    fs::create_dir(p("raw")).unwrap();
    let image = ImageGrid::new(16, 16, 12, (0..256).map(|i| i as u16 * 10).collect()).unwrap();
    fs::write(p("raw/JPCLN001.IMG"), encode_raw_image(&image, ByteOrder::BigEndian)).unwrap();
    let cfg = p("config.json");
    fs::write(&cfg, r#"{"raw_layout": {"width": 16, "height": 16}}"#).unwrap();
    let code = run(&["--config", &cfg, "ingest", "--nodule-list", &p("nodules.txt"), "--normal-list", &p("normals.txt"), "--images", &p("raw"), "--side", "8", "--out", &p("ingested")]);
    assert_eq!(code, 0);
    let metadata = fs::read_to_string(p("ingested/metadata.csv")).unwrap();
    assert_eq!(metadata.lines().count(), 3);
    assert!(metadata.contains("JPCLN001,1,1000,900,12"));
    let converted = cxr_dimred::pgm::read_pgm(Path::new(&p("ingested/originals/JPCLN001.pgm"))).unwrap();
    assert_eq!((converted.dims(), converted.bit_depth()), ((8, 8), 12));
}
