// Lung-mask outlier detection with exact t-SNE.
//
// Vectorises the masks of a synthetic corpus with planted small-lung
// cases, embeds them in 2-D, scores each point by its mean distance to the
// five nearest neighbours and excludes the top 5%.
//
// ```bash
// cargo run --example tsne_outliers
// ```

use std::error::Error;

use cxr_dimred::preprocess::OUTLIER_FRACTION;
use cxr_dimred::synth::{generate_dataset, SynthConfig};
use cxr_dimred::tsne::{exclusion_list, mask_to_vector, outlier_scores, run_tsne, write_embedding_csv, TsneConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let corpus = generate_dataset(100, 0.6, 0.05, 11, &SynthConfig { side: 64, ..Default::default() })?;
    let vectors = corpus
        .cases
        .iter()
        .map(|c| mask_to_vector(c.case_id(), &c.phantom.lung_mask, 32))
        .collect::<Result<Vec<_>, _>>()?;

    let embedding = run_tsne(&vectors, 2, &TsneConfig { seed: 1, ..Default::default() })?;
    println!("KL divergence {:.3} -> {:.3}", embedding.kl_initial, embedding.kl_final);

    let scores = outlier_scores(&embedding, 5)?;
    let excluded = exclusion_list(&scores, OUTLIER_FRACTION)?;
    let truth = corpus.outlier_ids();
    let hits = excluded.iter().filter(|id| truth.contains(id)).count();
    println!("excluded {excluded:?}");
    println!("planted  {truth:?}");
    println!("{hits} of {} planted outliers recovered", truth.len());

    let mut csv = Vec::new();
    write_embedding_csv(&embedding, &scores, &mut csv)?;
    let text = String::from_utf8(csv)?;
    println!("embedding.csv starts:\n{}", text.lines().take(3).collect::<Vec<_>>().join("\n"));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
