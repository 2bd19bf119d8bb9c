// Exploratory tables over clinical metadata.
//
// Parses a fragment of the JSRT clinical listings, then summarises a
// synthetic corpus: class balance, nodule size histogram, subtlety counts
// and the combined gender/size/subtlety breakdown.
//
// ```bash
// cargo run --example eda_tables
// ```

use std::error::Error;

use cxr_dimred::eda::{
    balance_report, combined_distribution, location_table, parse_jsrt_clinical, size_histogram, subtlety_distribution,
};
use cxr_dimred::synth::{generate_dataset, SynthConfig};

const NODULE_LISTING: &str = "\
JPCLN001.IMG 5 15 53 M 1634 692 malignant lung cancer
JPCLN002.IMG 5 30 63 F 1614 1210 benign pulmonary hamartoma
JPCLN003.IMG 2 ? 42 M 1167 1409 malignant adenocarcinoma
";
const NORMAL_LISTING: &str = "\
JPCNN001.IMG 45 F
JPCNN002.IMG 61 ?
";

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let jsrt = parse_jsrt_clinical(NODULE_LISTING, NORMAL_LISTING)?;
    for r in &jsrt {
        println!("{:<9} nodule={} size={:?} subtlety={:?} gender={}", r.case_id, r.has_nodule, r.size_mm, r.subtlety, r.gender);
    }

    let corpus = generate_dataset(120, 0.6, 0.05, 7, &SynthConfig { side: 64, ..Default::default() })?;
    let records = corpus.records();
    let balance = balance_report(&records);
    println!("\nbalance: {} nodule / {} normal of {}", balance.nodule, balance.normal, balance.total);

    let hist = size_histogram(&records, 5.0)?;
    let mut csv = Vec::new();
    hist.write_csv(&mut csv)?;
    print!("size histogram (mm):\n{}", String::from_utf8(csv)?);

    println!("subtlety 1..5: {:?}", subtlety_distribution(&records));
    for (key, count) in combined_distribution(&records, 10.0)?.iter().take(5) {
        println!("  {} {:>4}-{:<4} mm subtlety {} -> {count}", key.gender, key.size_lo, key.size_hi, key.subtlety);
    }
    println!("{} nodule locations, first {:?}", location_table(&records).len(), location_table(&records).first());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
