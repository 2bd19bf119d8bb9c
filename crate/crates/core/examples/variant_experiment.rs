// Comparing dataset variants with the experiment harness.
//
// Builds the lung-masked BSE variant with and without t-SNE outlier
// exclusion, runs several seeded training runs for each, averages and
// LOESS-smooths the curves and reads the accuracy at the point where
// training accuracy overtakes validation accuracy.
//
// ```bash
// cargo run --example variant_experiment
// ```

use std::error::Error;

use cxr_dimred::cnn::{CnnConfig, ConvBlock};
use cxr_dimred::harness::{run_experiment, HarnessConfig};
use cxr_dimred::preprocess::{build_variant, DatasetVariant, VariantInputs, OUTLIER_FRACTION};
use cxr_dimred::synth::{generate_dataset, SynthConfig};
use cxr_dimred::tsne::{exclusion_list, mask_to_vector, outlier_scores, run_tsne, TsneConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let side = 32;
    let corpus = generate_dataset(60, 0.6, 0.05, 4, &SynthConfig { side, ..Default::default() })?;

    let vectors = corpus
        .cases
        .iter()
        .map(|c| mask_to_vector(c.case_id(), &c.phantom.lung_mask, side))
        .collect::<Result<Vec<_>, _>>()?;
    let embedding = run_tsne(&vectors, 2, &TsneConfig { perplexity: 15.0, ..Default::default() })?;
    let excluded = exclusion_list(&outlier_scores(&embedding, 5)?, OUTLIER_FRACTION)?;

    let mut inputs = VariantInputs { exclusions: excluded, ..Default::default() };
    for case in &corpus.cases {
        let id = case.case_id().to_string();
        inputs.bse.insert(id.clone(), case.phantom.bse.clone());
        inputs.lung_masks.insert(id.clone(), case.phantom.lung_mask.clone());
        inputs.labels.insert(id, case.phantom.record.label());
    }

    let cnn = CnnConfig {
        input_side: side,
        conv_blocks: vec![ConvBlock { filters: 4, kernel: 3 }, ConvBlock { filters: 8, kernel: 3 }],
        dense_units: 16,
        ..Default::default()
    };
    let harness = HarnessConfig::default();
    for variant in [DatasetVariant::V04, DatasetVariant::V05] {
        let dataset = build_variant(variant, &inputs)?;
        let experiment = run_experiment(&dataset, &cnn, &harness, 40, &[0, 1, 2])?;
        let s = &experiment.summary;
        let last = s.smoothed.series.last().expect("non-empty curve");
        println!(
            "{variant}: {} cases, crossing epoch {:?}, actual accuracy {:?}, final smoothed train {:.2} / val {:.2}",
            dataset.samples.len(),
            s.crossing_epoch,
            s.actual_accuracy.map(|a| (a * 1000.0).round() / 1000.0),
            last.train_acc,
            last.val_acc
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
