// Training the small CNN on lung-masked, bone-suppressed phantoms.
//
// Twenty phantoms train a two-block network at 64x64 while twenty more
// are held out. Training accuracy climbs to 1 while validation accuracy
// stays lower, the overtraining shape the experiment harness looks for.
//
// ```bash
// cargo run --example cnn_training
// ```

use std::error::Error;

use cxr_dimred::cnn::{build_network, forward, train, Batch, CnnConfig, ConvBlock};
use cxr_dimred::imaging::apply_mask;
use cxr_dimred::preprocess::Sample;
use cxr_dimred::synth::{generate_dataset, SynthConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let side = 64;
    let corpus = generate_dataset(40, 0.5, 0.0, 21, &SynthConfig { side, ..Default::default() })?;
    let samples = corpus
        .cases
        .iter()
        .map(|c| {
            Ok(Sample {
                case_id: c.case_id().to_string(),
                image: apply_mask(&c.phantom.bse, &c.phantom.lung_mask)?,
                label: c.phantom.record.label(),
            })
        })
        .collect::<Result<Vec<_>, cxr_dimred::Error>>()?;
    let train_set = Batch::from_samples(&samples[..20], side)?;
    let val_set = Batch::from_samples(&samples[20..], side)?;

    let config = CnnConfig {
        input_side: side,
        conv_blocks: vec![ConvBlock { filters: 4, kernel: 3 }, ConvBlock { filters: 8, kernel: 3 }],
        dense_units: 16,
        ..Default::default()
    };
    let mut net = build_network(&config)?;
    println!("{} layers, {} parameters", config.layer_count(), net.params().len());

    let curve = train(&mut net, &train_set, &val_set, 60)?;
    for (epoch, m) in curve.series.iter().enumerate().step_by(10) {
        println!(
            "epoch {epoch:>3}: train acc {:.2} loss {:.3} | val acc {:.2} loss {:.3}",
            m.train_acc, m.train_loss, m.val_acc, m.val_loss
        );
    }
    let last = curve.series.last().expect("trained for at least one epoch");
    println!("final: train {:.2}, validation {:.2}", last.train_acc, last.val_acc);

    let probs = forward(&net, &val_set)?;
    println!("first validation probabilities {:?}", probs.iter().take(4).map(|p| format!("{p:.2}")).collect::<Vec<_>>());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
