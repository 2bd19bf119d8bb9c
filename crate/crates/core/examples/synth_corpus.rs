// Writing a synthetic corpus to disk.
//
// Generates phantoms with originals, bone-suppressed images and lung masks
// and writes them as PGM files together with `metadata.csv`,
// `manifest.csv` and the planted-outlier truth file.
//
// ```bash
// cargo run --example synth_corpus -- /tmp/phantoms
// ```

use std::error::Error;
use std::path::PathBuf;

use cxr_dimred::eda::balance_report;
use cxr_dimred::synth::{generate_dataset, generate_phantom, layout, write_corpus, Nodule, PhantomParams, SynthConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let single = generate_phantom(&PhantomParams {
        nodule: Some(Nodule { x: 40.0, y: 64.0, radius: 6.0, contrast: 1200.0 }),
        ..PhantomParams::new(128, 5)
    })?;
    println!("single phantom: nodule record {:?}/{:?}, size {:?} mm", single.record.nodule_x, single.record.nodule_y, single.record.size_mm);

    let corpus = generate_dataset(30, 0.6, 0.1, 2, &SynthConfig { side: 64, ..Default::default() })?;
    let dir = tempfile::tempdir()?;
    let out: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| dir.path().to_path_buf());
    let written = write_corpus(&corpus, &out)?;
    let b = balance_report(&corpus.records());
    println!("wrote {} files under {}", written.len(), out.display());
    println!("{} nodule / {} normal; outliers {:?}", b.nodule, b.normal, corpus.outlier_ids());
    println!("manifest:\n{}", std::fs::read_to_string(out.join(layout::MANIFEST))?.lines().take(3).collect::<Vec<_>>().join("\n"));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
