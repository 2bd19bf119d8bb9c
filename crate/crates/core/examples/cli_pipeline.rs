// The end-to-end pipeline through the command-line interface.
//
// synth -> eda -> tsne -> filter-outliers -> preprocess v04/v05 ->
// experiment, each step writing a `manifest.json` next to its outputs.
// The same sequence works from a shell with the `cxr-dimred` binary.
//
// ```bash
// cargo run --example cli_pipeline
// ```

use std::error::Error;
use std::path::Path;

use cxr_dimred::cli;

fn step(args: &[&str]) -> Result<(), Box<dyn Error>> {
    println!("$ cxr-dimred {}", args.join(" "));
    let code = cli::run(std::iter::once("cxr-dimred").chain(args.iter().copied()));
    if code != 0 {
        return Err(format!("step failed with exit code {code}").into());
    }
    Ok(())
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let p = |rel: &str| root.join(rel).display().to_string();

    let config = r#"{
        "mask_side": 32,
        "tsne": { "perplexity": 10.0, "iterations": 500 },
        "cnn": { "input_side": 32, "conv_blocks": [{"filters": 4, "kernel": 3}, {"filters": 8, "kernel": 3}], "dense_units": 16 }
    }"#;
    std::fs::write(root.join("config.json"), config)?;
    let cfg = p("config.json");

    step(&["synth", "--n", "40", "--side", "32", "--seed", "3", "--out", &p("corpus")])?;
    step(&["eda", "--metadata", &p("corpus/metadata.csv"), "--out", &p("eda")])?;
    step(&["--config", &cfg, "tsne", "--masks", &p("corpus/masks"), "--seed", "1", "--out", &p("embedding.csv")])?;
    step(&["filter-outliers", "--embedding", &p("embedding.csv"), "--fraction", "0.05", "--out", &p("exclude.txt")])?;
    for (variant, extra) in [("v04", None), ("v05", Some(p("exclude.txt")))] {
        let mut args = vec![
            "preprocess".to_string(),
            "--variant".into(),
            variant.into(),
            "--bse".into(),
            p("corpus/bse"),
            "--masks".into(),
            p("corpus/masks"),
            "--originals".into(),
            p("corpus/originals"),
            "--metadata".into(),
            p("corpus/metadata.csv"),
            "--out".into(),
            p(variant),
        ];
        if let Some(ex) = extra {
            args.extend(["--exclude".to_string(), ex]);
        }
        step(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    step(&["--config", &cfg, "experiment", "--variant", "v05", "--data", &p("v05"), "--seeds", "0,1", "--epochs", "10", "--out", &p("exp-v05")])?;

    println!("\nbalance.csv:\n{}", std::fs::read_to_string(root.join("eda/balance.csv"))?);
    println!("excluded: {}", std::fs::read_to_string(root.join("exclude.txt"))?.split_whitespace().collect::<Vec<_>>().join(", "));
    println!("coverage.csv:\n{}", std::fs::read_to_string(root.join("v04/coverage.csv"))?);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("exp-v05/summary.json"))?)?;
    println!("summary: crossing {} accuracy {}", summary["crossing_epoch"], summary["actual_accuracy"]);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("exp-v05/manifest.json"))?)?;
    println!("experiment manifest lists {} inputs, config hash {}", manifest["inputs"].as_array().map_or(0, Vec::len), manifest["config_hash"]);
    assert!(Path::new(&p("embedding.csv.manifest.json")).exists());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
