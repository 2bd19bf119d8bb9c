// Lung segmentation by masks and bone-shadow exclusion.
//
// Applies lung masks to phantoms, measures lung and bone fractions,
// combines masks with union/intersection/mean and checks which nodules a
// single universal mask would miss.
//
// ```bash
// cargo run --example lung_and_bone_masks
// ```

use std::error::Error;

use cxr_dimred::imaging::{apply_mask, combine_masks, mask_area_fraction, reduction_factor, MaskOp};
use cxr_dimred::preprocess::{derive_bone_mask, mask_dissimilarity, universal_mask_coverage};
use cxr_dimred::synth::{generate_dataset, SynthConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let corpus = generate_dataset(40, 0.6, 0.05, 3, &SynthConfig { side: 128, ..Default::default() })?;
    let case = &corpus.cases[0].phantom;

    let lung = mask_area_fraction(&case.lung_mask);
    println!("lung fraction {lung:.3}, data reduction factor {:.2}", reduction_factor(lung)?);

    let segmented = apply_mask(&case.bse, &case.lung_mask)?;
    let zeroed = segmented.pixels().iter().filter(|&&p| p == 0).count();
    println!("masked BSE image: {zeroed} of {} pixels zeroed", segmented.pixels().len());

    let bone = derive_bone_mask(&case.original, &case.bse, &case.lung_mask, 200)?;
    println!(
        "bone mask covers {:.3} of the image, {:.3} of the lung field",
        mask_area_fraction(&bone),
        bone.count_ones() as f64 / case.lung_mask.count_ones() as f64
    );

    let masks: Vec<_> = corpus.cases.iter().map(|c| c.phantom.lung_mask.clone()).collect();
    let records = corpus.records();
    for op in MaskOp::ALL {
        let universal = combine_masks(&masks, op)?;
        let missed = universal_mask_coverage(&masks, &records, op)?;
        println!("{op:<12} area {:.3}, nodules outside: {}", mask_area_fraction(&universal), missed.len());
    }

    let outlier = corpus.cases.iter().find(|c| c.outlier).expect("corpus plants an outlier");
    println!(
        "Jaccard distance normal/normal {:.3}, normal/small-lung {:.3}",
        mask_dissimilarity(&masks[0], &masks[1])?,
        mask_dissimilarity(&masks[0], &outlier.phantom.lung_mask)?
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
