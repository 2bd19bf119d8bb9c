//! Radiograph and mask grids: raw decoding, mask algebra, box downscaling
//! and area accounting.
//!
//! Everything here is a pure function over immutable grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular grid of unsigned intensities with a declared bit depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    bit_depth: u8,
    pixels: Vec<u16>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, bit_depth: u8, pixels: Vec<u16>) -> Result<Self> {
        check_dims(width, height)?;
        check_bit_depth(bit_depth)?;
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} pixels for a {width}x{height} grid",
                pixels.len()
            )));
        }
        let max = max_value(bit_depth);
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, &v)| u32::from(v) > max)
        {
            return Err(Error::SampleOutOfRange {
                index,
                value: value.into(),
                bit_depth,
            });
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, bit_depth: u8, value: u16) -> Result<Self> {
        Self::new(width, height, bit_depth, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    /// Largest representable sample, `2^bit_depth - 1`.
    pub fn max_value(&self) -> u16 {
        max_value(self.bit_depth) as u16
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u16> {
        self.pixels
    }

    /// Pixel at row `y`, column `x`.
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    /// Intensities scaled into `[0, 1]` by `2^bit_depth - 1`.
    pub fn normalized(&self) -> Vec<f64> {
        let scale = f64::from(self.max_value());
        self.pixels.iter().map(|&p| f64::from(p) / scale).collect()
    }
}

/// Same-shape grid of {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if bits.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(x, y)));
            }
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self> {
        Self::new(width, height, vec![u8::from(value); width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// The mask as an 8-bit image (0 or 255), for writing to disk.
    pub fn to_image(&self) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            bit_depth: 8,
            pixels: self.bits.iter().map(|&b| u16::from(b) * 255).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteOrder {
    BigEndian,
    LittleEndian,
}

/// Layout of a headerless raw image file. Samples are always two bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawLayout {
    pub width: usize,
    pub height: usize,
    pub byte_order: ByteOrder,
    pub bit_depth: u8,
}

impl RawLayout {
    pub const BYTES_PER_SAMPLE: usize = 2;

    /// JSRT distribution convention: 2048x2048, big-endian, 12 significant bits.
    pub const JSRT: RawLayout = RawLayout {
        width: 2048,
        height: 2048,
        byte_order: ByteOrder::BigEndian,
        bit_depth: 12,
    };

    pub fn file_size(&self) -> usize {
        self.width * self.height * Self::BYTES_PER_SAMPLE
    }
}

impl Default for RawLayout {
    fn default() -> Self {
        Self::JSRT
    }
}

pub fn load_raw_image(bytes: &[u8], layout: &RawLayout) -> Result<ImageGrid> {
    check_dims(layout.width, layout.height)?;
    check_bit_depth(layout.bit_depth)?;
    let expected = layout.file_size();
    if bytes.len() != expected {
        return Err(Error::RawSizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let max = max_value(layout.bit_depth);
    let mut pixels = Vec::with_capacity(layout.width * layout.height);
    for (index, pair) in bytes.chunks_exact(2).enumerate() {
        let pair = [pair[0], pair[1]];
        let value = match layout.byte_order {
            ByteOrder::BigEndian => u16::from_be_bytes(pair),
            ByteOrder::LittleEndian => u16::from_le_bytes(pair),
        };
        if u32::from(value) > max {
            return Err(Error::SampleOutOfRange {
                index,
                value: value.into(),
                bit_depth: layout.bit_depth,
            });
        }
        pixels.push(value);
    }
    Ok(ImageGrid {
        width: layout.width,
        height: layout.height,
        bit_depth: layout.bit_depth,
        pixels,
    })
}

/// Inverse of [`load_raw_image`] for the given byte order.
pub fn encode_raw_image(image: &ImageGrid, byte_order: ByteOrder) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.pixels.len() * 2);
    for &p in &image.pixels {
        match byte_order {
            ByteOrder::BigEndian => out.extend_from_slice(&p.to_be_bytes()),
            ByteOrder::LittleEndian => out.extend_from_slice(&p.to_le_bytes()),
        }
    }
    out
}

/// Binarize a mask image: bit is set iff `pixel >= threshold`.
pub fn load_mask(image: &ImageGrid, threshold: u16) -> Result<BinaryMask> {
    if u32::from(threshold) > max_value(image.bit_depth) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} exceeds {}-bit range",
            image.bit_depth
        )));
    }
    Ok(BinaryMask {
        width: image.width,
        height: image.height,
        bits: image.pixels.iter().map(|&p| u8::from(p >= threshold)).collect(),
    })
}

pub fn apply_mask(image: &ImageGrid, mask: &BinaryMask) -> Result<ImageGrid> {
    check_same(image.dims(), mask.dims())?;
    let pixels = image
        .pixels
        .iter()
        .zip(&mask.bits)
        .map(|(&p, &b)| if b == 1 { p } else { 0 })
        .collect();
    Ok(ImageGrid {
        pixels,
        ..image.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOp {
    Union,
    Intersection,
    /// Majority vote: set where at least half of the masks are set.
    Mean,
}

impl MaskOp {
    pub const ALL: [MaskOp; 3] = [MaskOp::Union, MaskOp::Intersection, MaskOp::Mean];
}

impl std::fmt::Display for MaskOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskOp::Union => "union",
            MaskOp::Intersection => "intersection",
            MaskOp::Mean => "mean",
        })
    }
}

pub fn combine_masks(masks: &[BinaryMask], op: MaskOp) -> Result<BinaryMask> {
    let first = masks.first().ok_or(Error::Empty("mask list"))?;
    for m in &masks[1..] {
        check_same(first.dims(), m.dims())?;
    }
    let n = masks.len();
    let mut counts = vec![0usize; first.bits.len()];
    for m in masks {
        for (c, &b) in counts.iter_mut().zip(&m.bits) {
            *c += usize::from(b);
        }
    }
    let bits = counts
        .into_iter()
        .map(|c| {
            u8::from(match op {
                MaskOp::Union => c > 0,
                MaskOp::Intersection => c == n,
                // c / n >= 0.5 without floating point
                MaskOp::Mean => 2 * c >= n,
            })
        })
        .collect();
    Ok(BinaryMask {
        width: first.width,
        height: first.height,
        bits,
    })
}

pub fn mask_area_fraction(mask: &BinaryMask) -> f64 {
    mask.count_ones() as f64 / mask.bits.len() as f64
}

/// How many times fewer pixels remain after keeping `fraction` of them.
pub fn reduction_factor(fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "area fraction {fraction} outside (0, 1]"
        )));
    }
    Ok(1.0 / fraction)
}

/// Integer box downscale; each output pixel is the rounded mean of its block.
pub fn resize_image(image: &ImageGrid, new_w: usize, new_h: usize) -> Result<ImageGrid> {
    check_dims(new_w, new_h)?;
    let (bw, bh) = block_shape(image.dims(), new_w, new_h)?;
    let count = (bw * bh) as u64;
    let mut pixels = Vec::with_capacity(new_w * new_h);
    for oy in 0..new_h {
        for ox in 0..new_w {
            let mut sum = 0u64;
            for y in oy * bh..(oy + 1) * bh {
                let row = &image.pixels[y * image.width + ox * bw..y * image.width + (ox + 1) * bw];
                sum += row.iter().map(|&p| u64::from(p)).sum::<u64>();
            }
            pixels.push(((sum + count / 2) / count) as u16);
        }
    }
    Ok(ImageGrid {
        width: new_w,
        height: new_h,
        bit_depth: image.bit_depth,
        pixels,
    })
}

/// Block fraction of set bits; `side x side` output flattened row-major.
pub(crate) fn mask_block_means(mask: &BinaryMask, side: usize) -> Result<Vec<f64>> {
    let (bw, bh) = block_shape(mask.dims(), side, side)?;
    let count = (bw * bh) as f64;
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        for ox in 0..side {
            let mut ones = 0usize;
            for y in oy * bh..(oy + 1) * bh {
                let start = y * mask.width + ox * bw;
                ones += mask.bits[start..start + bw].iter().map(|&b| usize::from(b)).sum::<usize>();
            }
            out.push(ones as f64 / count);
        }
    }
    Ok(out)
}

pub fn point_in_mask(mask: &BinaryMask, x: usize, y: usize) -> Result<bool> {
    if x >= mask.width || y >= mask.height {
        return Err(Error::OutOfBounds {
            x,
            y,
            width: mask.width,
            height: mask.height,
        });
    }
    Ok(mask.get(x, y))
}

fn block_shape((w, h): (usize, usize), new_w: usize, new_h: usize) -> Result<(usize, usize)> {
    if new_w == 0 || new_w > w || w % new_w != 0 {
        return Err(Error::NotDivisible {
            what: "width",
            size: w,
            by: new_w,
        });
    }
    if new_h == 0 || new_h > h || h % new_h != 0 {
        return Err(Error::NotDivisible {
            what: "height",
            size: h,
            by: new_h,
        });
    }
    Ok((w / new_w, h / new_h))
}

pub(crate) fn check_same(left: (usize, usize), right: (usize, usize)) -> Result<()> {
    if left != right {
        return Err(Error::DimensionMismatch { left, right });
    }
    Ok(())
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidDimensions { width, height });
    }
    Ok(())
}

fn check_bit_depth(bit_depth: u8) -> Result<()> {
    match bit_depth {
        8 | 12 | 16 => Ok(()),
        other => Err(Error::BitDepth(other)),
    }
}

fn max_value(bit_depth: u8) -> u32 {
    (1u32 << bit_depth) - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, px: &[u16]) -> ImageGrid {
        ImageGrid::new(w, h, 16, px.to_vec()).unwrap()
    }

    fn mask(w: usize, h: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(w, h, bits.to_vec()).unwrap()
    }

    fn layout(w: usize, h: usize, byte_order: ByteOrder, bit_depth: u8) -> RawLayout {
        RawLayout {
            width: w,
            height: h,
            byte_order,
            bit_depth,
        }
    }

    #[test]
    fn raw_decode_byte_order() {
        let be = load_raw_image(&[0x01, 0x00], &layout(1, 1, ByteOrder::BigEndian, 16)).unwrap();
        assert_eq!(be.pixels(), &[256]);
        let le = load_raw_image(&[0x01, 0x00], &layout(1, 1, ByteOrder::LittleEndian, 16)).unwrap();
        assert_eq!(le.pixels(), &[1]);
        assert_eq!(le.bit_depth(), 16);
    }

    #[test]
    fn raw_size_mismatch() {
        let err = load_raw_image(&[0, 0, 0], &layout(1, 1, ByteOrder::BigEndian, 16)).unwrap_err();
        assert!(matches!(err, Error::RawSizeMismatch { expected: 2, actual: 3 }));
    }

    #[test]
    fn jsrt_sized_file_with_one_out_of_range_sample() {
        let l = RawLayout::JSRT;
        let mut bytes = vec![0u8; l.file_size()];
        assert_eq!(bytes.len(), 8_388_608);
        // sample index 1_000_000 -> 4096, one past the 12-bit range
        let off = 2 * 1_000_000;
        bytes[off..off + 2].copy_from_slice(&4096u16.to_be_bytes());
        match load_raw_image(&bytes, &l).unwrap_err() {
            Error::SampleOutOfRange { index, value, bit_depth } => {
                assert_eq!((index, value, bit_depth), (1_000_000, 4096, 12));
            }
            e => panic!("unexpected {e}"),
        }
        bytes[off..off + 2].copy_from_slice(&4095u16.to_be_bytes());
        assert_eq!(load_raw_image(&bytes, &l).unwrap().get(1_000_000 % 2048, 1_000_000 / 2048), 4095);
    }

    #[test]
    fn mask_threshold() {
        let m = load_mask(&ImageGrid::new(2, 1, 8, vec![0, 255]).unwrap(), 128).unwrap();
        assert_eq!(m.bits(), &[0, 1]);
        let zero = ImageGrid::filled(3, 3, 8, 0).unwrap();
        assert_eq!(load_mask(&zero, 1).unwrap().count_ones(), 0);
        assert_eq!(load_mask(&zero, 0).unwrap().count_ones(), 9);
        assert!(load_mask(&zero, 256).is_err());
    }

    #[test]
    fn apply_mask_pointwise() {
        let i = img(2, 2, &[5, 7, 1, 3]);
        assert_eq!(apply_mask(&i, &mask(2, 2, &[1, 0, 0, 1])).unwrap().pixels(), &[5, 0, 0, 3]);
        assert_eq!(apply_mask(&i, &BinaryMask::filled(2, 2, true).unwrap()).unwrap(), i);
        assert_eq!(
            apply_mask(&i, &BinaryMask::filled(2, 2, false).unwrap()).unwrap().pixels(),
            &[0, 0, 0, 0]
        );
        assert!(matches!(
            apply_mask(&i, &BinaryMask::filled(1, 2, true).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn combine_rules() {
        let a = mask(2, 1, &[1, 0]);
        let b = mask(2, 1, &[0, 1]);
        let ab = [a.clone(), b];
        assert_eq!(combine_masks(&ab, MaskOp::Union).unwrap().bits(), &[1, 1]);
        assert_eq!(combine_masks(&ab, MaskOp::Intersection).unwrap().bits(), &[0, 0]);
        for op in MaskOp::ALL {
            assert_eq!(combine_masks(&[a.clone(), a.clone()], op).unwrap(), a);
        }
        let three = [mask(2, 1, &[1, 0]), mask(2, 1, &[1, 1]), mask(2, 1, &[0, 0])];
        assert_eq!(combine_masks(&three, MaskOp::Mean).unwrap().bits(), &[1, 0]);
        assert!(matches!(combine_masks(&[], MaskOp::Union), Err(Error::Empty(_))));
        assert!(combine_masks(&[a, mask(1, 2, &[1, 1])], MaskOp::Union).is_err());
    }

    #[test]
    fn area_and_reduction() {
        let mut bits = vec![0u8; 16];
        bits[..5].fill(1);
        assert_eq!(mask_area_fraction(&mask(4, 4, &bits)), 0.3125);
        assert_eq!(mask_area_fraction(&BinaryMask::filled(3, 2, true).unwrap()), 1.0);
        assert_eq!(reduction_factor(0.32).unwrap(), 1.0 / 0.32);
        assert!((reduction_factor(0.32).unwrap() - 3.125).abs() < 1e-12);
        assert_eq!(reduction_factor(1.0).unwrap(), 1.0);
        assert_eq!(reduction_factor(0.5).unwrap(), 2.0);
        assert!(reduction_factor(0.0).is_err());
    }

    #[test]
    fn resize_block_mean() {
        assert_eq!(resize_image(&img(2, 2, &[0, 0, 2, 2]), 1, 1).unwrap().pixels(), &[1]);
        let c = ImageGrid::filled(8, 8, 12, 777).unwrap();
        for side in [1, 2, 4, 8] {
            let r = resize_image(&c, side, side).unwrap();
            assert!(r.pixels().iter().all(|&p| p == 777));
            assert_eq!(r.bit_depth(), 12);
        }
        assert!(matches!(resize_image(&c, 3, 3), Err(Error::NotDivisible { .. })));
        assert!(resize_image(&c, 16, 16).is_err());
    }

    #[test]
    fn resize_jsrt_to_256_uses_8x8_blocks() {
        // 2048/256 = 8; a pixel pattern constant on 8x8 blocks survives exactly
        let px: Vec<u16> = (0..2048 * 2048)
            .map(|i| {
                let (x, y) = (i % 2048, i / 2048);
                ((x / 8 + y / 8) % 4096) as u16
            })
            .collect();
        let big = ImageGrid::new(2048, 2048, 12, px).unwrap();
        let small = resize_image(&big, 256, 256).unwrap();
        assert_eq!(small.get(3, 5), 8);
        assert_eq!(small.get(255, 255), 510);
    }

    #[test]
    fn point_lookup() {
        let m = mask(2, 2, &[1, 0, 0, 0]);
        assert!(point_in_mask(&m, 0, 0).unwrap());
        assert!(!point_in_mask(&m, 1, 0).unwrap());
        assert!(point_in_mask(&BinaryMask::filled(3, 3, true).unwrap(), 2, 1).unwrap());
        assert!(!point_in_mask(&BinaryMask::filled(3, 3, false).unwrap(), 2, 1).unwrap());
        assert!(matches!(point_in_mask(&m, 2, 0), Err(Error::OutOfBounds { .. })));
    }

    fn masks_strategy() -> impl Strategy<Value = (Vec<u16>, Vec<Vec<u8>>)> {
        (
            proptest::collection::vec(0u16..4096, 12),
            proptest::collection::vec(proptest::collection::vec(0u8..2, 12), 1..5),
        )
    }

    proptest! {
        #[test]
        fn union_dominates_and_area_ordering((px, ms) in masks_strategy()) {
            let image = ImageGrid::new(4, 3, 12, px).unwrap();
            let masks: Vec<_> = ms.into_iter().map(|b| BinaryMask::new(4, 3, b).unwrap()).collect();
            let uni = combine_masks(&masks, MaskOp::Union).unwrap();
            let inter = combine_masks(&masks, MaskOp::Intersection).unwrap();
            let through_union = apply_mask(&image, &uni).unwrap();
            for m in &masks {
                let through_m = apply_mask(&image, m).unwrap();
                prop_assert!(through_union.pixels().iter().zip(through_m.pixels()).all(|(u, s)| u >= s));
                let f = mask_area_fraction(m);
                prop_assert!(mask_area_fraction(&inter) <= f && f <= mask_area_fraction(&uni));
            }
        }

        #[test]
        fn raw_round_trip(px in proptest::collection::vec(0u16..4096, 6), big in any::<bool>()) {
            let order = if big { ByteOrder::BigEndian } else { ByteOrder::LittleEndian };
            let l = layout(3, 2, order, 12);
            let image = ImageGrid::new(3, 2, 12, px).unwrap();
            let bytes = encode_raw_image(&image, order);
            let decoded = load_raw_image(&bytes, &l).unwrap();
            prop_assert_eq!(&decoded, &image);
            prop_assert_eq!(encode_raw_image(&decoded, order), bytes);
        }

        #[test]
        fn resize_keeps_mean(px in proptest::collection::vec(0u16..4096, 64), side in prop::sample::select(vec![1usize, 2, 4])) {
            let image = ImageGrid::new(8, 8, 12, px).unwrap();
            let small = resize_image(&image, side, side).unwrap();
            let mean = |p: &[u16]| p.iter().map(|&v| f64::from(v)).sum::<f64>() / p.len() as f64;
            prop_assert!((mean(small.pixels()) - mean(image.pixels())).abs() <= 0.5);
        }
    }
}
