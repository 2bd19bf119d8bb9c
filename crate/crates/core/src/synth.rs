//! Deterministic chest phantoms: two elliptical lung fields, horizontal rib
//! bands that only the original image carries, an optional nodule disc and
//! seeded noise. Small-lung cases stand in for anatomical mask outliers.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eda::{write_metadata_csv, ClinicalRecord, Gender};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ImageGrid};
use crate::pgm::write_pgm;
use crate::preprocess::METADATA_RESOLUTION;

pub const BIT_DEPTH: u8 = 12;
/// Lung scale of planted outlier cases.
pub const OUTLIER_LUNG_SCALE: f64 = 0.4;
/// Range of lung scales for ordinary cases.
pub const NORMAL_LUNG_SCALE: (f64, f64) = (0.8, 1.0);
/// JSRT pixel pitch at 2048 px.
const MM_PER_PIXEL_2048: f64 = 0.175;

const BODY_LEVEL: f64 = 2200.0;
const LUNG_LEVEL: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nodule {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub side: usize,
    pub lung_scale: f64,
    pub nodule: Option<Nodule>,
    pub bone_count: usize,
    pub bone_contrast: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl PhantomParams {
    pub fn new(side: usize, seed: u64) -> Self {
        Self {
            side,
            lung_scale: 1.0,
            nodule: None,
            bone_count: 6,
            bone_contrast: 400.0,
            noise_amplitude: 60.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    /// `< 1` inside, `1` on the boundary.
    fn level(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)
    }
}

fn lung_fields(side: usize, scale: f64) -> [Ellipse; 2] {
    let s = side as f64;
    let (ax, ay) = (0.15 * s * scale, 0.30 * s * scale);
    let cy = 0.50 * s;
    [
        Ellipse { cx: 0.31 * s, cy, ax, ay },
        Ellipse { cx: 0.69 * s, cy, ax, ay },
    ]
}

/// Vertical extents `[y0, y1)` of the rib bands.
fn rib_rows(side: usize, count: usize) -> Vec<(usize, usize)> {
    let s = side as f64;
    let thickness = (s / 40.0).max(1.0);
    let (top, bottom) = (0.18 * s, 0.82 * s);
    (0..count)
        .map(|k| {
            let centre = top + (bottom - top) * (k as f64 + 0.5) / count as f64;
            let y0 = (centre - thickness / 2.0).round().max(0.0) as usize;
            (y0, ((y0 as f64 + thickness) as usize).min(side))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub original: ImageGrid,
    pub bse: ImageGrid,
    pub lung_mask: BinaryMask,
    /// Pixels covered by rib bands; ground truth for bone-mask recovery.
    pub rib_mask: BinaryMask,
    pub record: ClinicalRecord,
}

fn pixel_centre_inside(fields: &[Ellipse; 2], x: f64, y: f64) -> bool {
    fields.iter().any(|e| e.level(x + 0.5, y + 0.5) < 1.0)
}

/// Generates one case. Clinical fields other than the nodule truth are
/// drawn from the seed; `case_id` is left empty.
pub fn generate_phantom(params: &PhantomParams) -> Result<Phantom> {
    let side = params.side;
    if side < 8 {
        return Err(Error::InvalidArgument(format!("phantom side {side} too small")));
    }
    if !(params.lung_scale > 0.0 && params.lung_scale <= 1.0) {
        return Err(Error::InvalidArgument(format!("lung scale {} outside (0, 1]", params.lung_scale)));
    }
    let fields = lung_fields(side, params.lung_scale);
    if let Some(n) = params.nodule {
        let inside_image = n.x - n.radius >= 0.0
            && n.y - n.radius >= 0.0
            && n.x + n.radius <= side as f64
            && n.y + n.radius <= side as f64;
        if !inside_image || !pixel_centre_inside(&fields, n.x.floor(), n.y.floor()) {
            return Err(Error::InvalidArgument(format!("nodule at ({:.1}, {:.1}) is outside the lung fields", n.x, n.y)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut bse_rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);

    let lung_mask = BinaryMask::from_fn(side, side, |x, y| pixel_centre_inside(&fields, x as f64, y as f64))?;
    let mut rib_bits = vec![0u8; side * side];
    for (y0, y1) in rib_rows(side, params.bone_count) {
        rib_bits[y0 * side..y1 * side].fill(1);
    }
    let rib_mask = BinaryMask::new(side, side, rib_bits)?;

    // Smaller lungs are modelled as less aerated: the field is denser and a
    // nodule stands out less, both in proportion to the lung scale.
    let aeration = params.lung_scale;
    let lung_level = BODY_LEVEL - (BODY_LEVEL - LUNG_LEVEL) * aeration;
    let max = f64::from((1u16 << BIT_DEPTH) - 1);
    let mut original = Vec::with_capacity(side * side);
    let mut bse = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut base = if lung_mask.get(x, y) { lung_level } else { BODY_LEVEL };
            if let Some(n) = params.nodule {
                if (px - n.x).powi(2) + (py - n.y).powi(2) <= n.radius * n.radius {
                    base += n.contrast * aeration;
                }
            }
            let bone = if rib_mask.get(x, y) { params.bone_contrast } else { 0.0 };
            let a = params.noise_amplitude;
            let noisy = |v: f64, r: &mut ChaCha8Rng| {
                let noise = if a > 0.0 { r.gen_range(-a..=a) } else { 0.0 };
                (v + noise).round().clamp(0.0, max) as u16
            };
            original.push(noisy(base + bone, &mut rng));
            bse.push(noisy(base, &mut bse_rng));
        }
    }
    if params.bone_count == 0 {
        // without ribs both images are the same acquisition
        bse.clone_from(&original);
    }

    let to_meta = |v: f64| (v * METADATA_RESOLUTION as f64 / side as f64).ceil() as u32;
    let mm_per_px = MM_PER_PIXEL_2048 * METADATA_RESOLUTION as f64 / side as f64;
    let gender = if rng.gen_bool(0.5) { Gender::Male } else { Gender::Female };
    let age = Some(rng.gen_range(25..85));
    let record = match params.nodule {
        Some(n) => ClinicalRecord {
            case_id: String::new(),
            has_nodule: true,
            nodule_x: Some(to_meta(n.x.floor())),
            nodule_y: Some(to_meta(n.y.floor())),
            size_mm: Some((2.0 * n.radius * mm_per_px * 10.0).round() / 10.0),
            subtlety: Some(subtlety(n.contrast * aeration, params.noise_amplitude)),
            malignant: Some(rng.gen_bool(0.6)),
            gender,
            age,
        },
        None => ClinicalRecord::normal("", gender, age),
    };
    Ok(Phantom {
        original: ImageGrid::new(side, side, BIT_DEPTH, original)?,
        bse: ImageGrid::new(side, side, BIT_DEPTH, bse)?,
        lung_mask,
        rib_mask,
        record,
    })
}

/// Corpus-wide generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub side: usize,
    /// Nodule radius range as a fraction of the side.
    pub nodule_radius: (f64, f64),
    pub nodule_contrast: (f64, f64),
    pub bone_count: usize,
    pub bone_contrast: f64,
    pub noise_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 256,
            nodule_radius: (0.05, 0.09),
            nodule_contrast: (300.0, 2500.0),
            bone_count: 6,
            bone_contrast: 400.0,
            noise_amplitude: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub phantom: Phantom,
    pub outlier: bool,
}

impl SynthCase {
    pub fn case_id(&self) -> &str {
        &self.phantom.record.case_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub cases: Vec<SynthCase>,
}

impl SynthCorpus {
    pub fn records(&self) -> Vec<ClinicalRecord> {
        self.cases.iter().map(|c| c.phantom.record.clone()).collect()
    }

    pub fn outlier_ids(&self) -> Vec<String> {
        self.cases.iter().filter(|c| c.outlier).map(|c| c.case_id().to_string()).collect()
    }
}

pub fn case_id(index: usize) -> String {
    format!("case{index:04}")
}

/// Subtlety on the JSRT scale (1 = extremely subtle, 5 = obvious) from the
/// nodule contrast relative to the noise amplitude.
pub fn subtlety(contrast: f64, noise_amplitude: f64) -> u8 {
    if noise_amplitude <= 0.0 {
        return 5;
    }
    (1.0 + (contrast / (8.0 * noise_amplitude)).floor()).clamp(1.0, 5.0) as u8
}

/// Random nodule fully inside the image with its centre well inside a lung.
fn place_nodule(rng: &mut ChaCha8Rng, side: usize, scale: f64, config: &SynthConfig) -> Nodule {
    let s = side as f64;
    let fields = lung_fields(side, scale);
    let radius = (rng.gen_range(config.nodule_radius.0..=config.nodule_radius.1) * s).max(1.0);
    let contrast = rng.gen_range(config.nodule_contrast.0..=config.nodule_contrast.1);
    let lung = fields[rng.gen_range(0..2)];
    loop {
        let (u, v): (f64, f64) = (rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
        if u * u + v * v > 0.49 {
            continue;
        }
        let (x, y) = (lung.cx + u * lung.ax, lung.cy + v * lung.ay);
        if x - radius >= 0.0 && y - radius >= 0.0 && x + radius <= s && y + radius <= s {
            return Nodule { x, y, radius, contrast };
        }
    }
}

pub fn generate_dataset(n: usize, nodule_fraction: f64, outlier_fraction: f64, seed: u64, config: &SynthConfig) -> Result<SynthCorpus> {
    for (name, f) in [("nodule", nodule_fraction), ("outlier", outlier_fraction)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("{name} fraction {f} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nodule = (nodule_fraction * n as f64).round() as usize;
    let n_outlier = (outlier_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut has_nodule = vec![false; n];
    for &i in &order[..n_nodule] {
        has_nodule[i] = true;
    }
    order.shuffle(&mut rng);
    let mut outlier = vec![false; n];
    for &i in &order[..n_outlier] {
        outlier[i] = true;
    }

    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let mut case_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let scale = if outlier[i] {
            OUTLIER_LUNG_SCALE
        } else {
            case_rng.gen_range(NORMAL_LUNG_SCALE.0..=NORMAL_LUNG_SCALE.1)
        };
        let nodule = has_nodule[i].then(|| place_nodule(&mut case_rng, config.side, scale, config));
        let params = PhantomParams {
            side: config.side,
            lung_scale: scale,
            nodule,
            bone_count: config.bone_count,
            bone_contrast: config.bone_contrast,
            noise_amplitude: config.noise_amplitude,
            seed: case_rng.gen(),
        };
        let mut phantom = generate_phantom(&params)?;
        phantom.record.case_id = case_id(i);
        cases.push(SynthCase { phantom, outlier: outlier[i] });
    }
    Ok(SynthCorpus { config: config.clone(), cases })
}

/// Relative paths used by [`write_corpus`].
pub mod layout {
    pub const ORIGINALS: &str = "originals";
    pub const BSE: &str = "bse";
    pub const MASKS: &str = "masks";
    pub const METADATA: &str = "metadata.csv";
    pub const MANIFEST: &str = "manifest.csv";
    pub const OUTLIER_TRUTH: &str = "outlier_truth.txt";
}

/// Writes images, masks, metadata, a manifest of the originals and the
/// planted-outlier truth file under `dir`. Returns the written paths.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    for sub in [layout::ORIGINALS, layout::BSE, layout::MASKS] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest.write_record(["case_id", "label", "path"])?;
    for case in &corpus.cases {
        let id = case.case_id();
        let p = &case.phantom;
        for (sub, image) in [
            (layout::ORIGINALS, &p.original),
            (layout::BSE, &p.bse),
            (layout::MASKS, &p.lung_mask.to_image()),
        ] {
            let rel = format!("{sub}/{id}.pgm");
            write_pgm(&dir.join(&rel), image)?;
            written.push(rel);
        }
        manifest.write_record([id, &p.record.label().to_string(), &format!("{}/{id}.pgm", layout::ORIGINALS)])?;
    }
    let manifest = manifest.into_inner().map_err(|e| Error::malformed("manifest", e.to_string()))?;
    let mut metadata = Vec::new();
    write_metadata_csv(&corpus.records(), &mut metadata)?;
    let mut truth = corpus.outlier_ids().join("\n");
    if !truth.is_empty() {
        truth.push('\n');
    }
    for (name, bytes) in [
        (layout::MANIFEST, manifest),
        (layout::METADATA, metadata),
        (layout::OUTLIER_TRUTH, truth.into_bytes()),
    ] {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(name.to_string());
    }
    Ok(written)
}
