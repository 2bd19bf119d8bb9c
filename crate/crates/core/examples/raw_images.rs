// Headerless raw radiographs and PGM conversion.
//
// Builds a JSRT-style 12-bit big-endian raw buffer, decodes it with an
// explicit layout, downsamples it by block averaging and round-trips the
// result through a 16-bit PGM file.
//
// ```bash
// cargo run --example raw_images
// ```

use std::error::Error;

use cxr_dimred::imaging::{encode_raw_image, load_raw_image, resize_image, ByteOrder, ImageGrid, RawLayout};
use cxr_dimred::pgm::{read_pgm, write_pgm};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let layout = RawLayout { width: 256, height: 256, ..RawLayout::JSRT };
    let pixels: Vec<u16> = (0..256 * 256).map(|i| ((i % 256) * 16) as u16).collect();
    let image = ImageGrid::new(256, 256, 12, pixels)?;

    let bytes = encode_raw_image(&image, ByteOrder::BigEndian);
    assert_eq!(bytes.len(), layout.file_size());
    let decoded = load_raw_image(&bytes, &layout)?;
    assert_eq!(decoded, image);
    println!("decoded {}x{} raw image, {} bits, max sample {}", decoded.width(), decoded.height(), decoded.bit_depth(), decoded.pixels().iter().max().unwrap());

    let small = resize_image(&decoded, 64, 64)?;
    println!("downsampled to {}x{}; first row starts {:?}", small.width(), small.height(), &small.pixels()[..4]);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("small.pgm");
    write_pgm(&path, &small)?;
    let back = read_pgm(&path)?;
    assert_eq!(back, small);
    println!("PGM round trip ok ({} bytes)", std::fs::metadata(&path)?.len());

    let truncated = load_raw_image(&bytes[..100], &layout);
    println!("short buffer rejected: {}", truncated.unwrap_err());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
