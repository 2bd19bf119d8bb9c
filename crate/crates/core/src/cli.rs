//! Command-line front end. Every subcommand stages its outputs in a sibling
//! temporary directory, writes a run manifest next to the results and only
//! then moves everything into place.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{build_network, train, Batch, CnnConfig};
use crate::eda::{
    balance_report, combined_distribution, location_table, parse_jsrt_clinical, read_metadata_csv, size_histogram,
    subtlety_distribution, write_metadata_csv, ClinicalRecord, Label,
};
use crate::error::Error;
use crate::harness::{run_experiment, split_indices, HarnessConfig};
use crate::imaging::{
    load_mask, mask_area_fraction, resize_image, BinaryMask, ImageGrid, MaskOp, RawLayout,
};
use crate::pgm::{read_image, read_mask, write_pgm};
use crate::preprocess::{
    build_variant, derive_bone_mask, universal_mask_coverage, DatasetVariant, ProcessedDataset, Sample, VariantInputs,
    OUTLIER_FRACTION,
};
use crate::synth::{generate_dataset, write_corpus, SynthConfig};
use crate::tsne::{exclusion_list, mask_to_vector, outlier_scores, read_embedding_scores, run_tsne, write_embedding_csv, TsneConfig};

/// Overrides `paths.output_root` for relative `--out` paths.
pub const OUTPUT_ROOT_ENV: &str = "CXR_DIMRED_OUTPUT_ROOT";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_BAD_CONFIG: i32 = 4;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub originals: Option<PathBuf>,
    pub bse: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
}

/// Everything a stage may need besides its flags. Flags take precedence and
/// the effective configuration is echoed into each manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub raw_layout: RawLayout,
    /// Mask PGM samples at or above this value are foreground.
    pub mask_threshold: u16,
    /// Side of the grid masks are resampled to before t-SNE.
    pub mask_side: usize,
    /// Minimum original-minus-BSE difference counted as bone.
    pub bone_threshold: u16,
    pub outlier_k: usize,
    pub outlier_fraction: f64,
    pub size_bin_width_mm: f64,
    pub tsne: TsneConfig,
    pub cnn: CnnConfig,
    pub harness: HarnessConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            raw_layout: RawLayout::default(),
            mask_threshold: 128,
            mask_side: 64,
            bone_threshold: 200,
            outlier_k: 5,
            outlier_fraction: OUTLIER_FRACTION,
            size_bin_width_mm: 10.0,
            tsne: TsneConfig::default(),
            cnn: CnnConfig::default(),
            harness: HarnessConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    fn validate(&self) -> Result<(), CliError> {
        let bad = |e: Error| CliError::Config(e.to_string());
        self.tsne.validate().map_err(bad)?;
        self.cnn.validate().map_err(bad)?;
        if self.mask_side == 0 || self.outlier_k == 0 {
            return Err(CliError::Config("mask_side and outlier_k must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(CliError::Config(format!("outlier_fraction {} outside [0, 1)", self.outlier_fraction)));
        }
        if !(self.harness.val_fraction > 0.0 && self.harness.val_fraction < 1.0) {
            return Err(CliError::Config(format!("val_fraction {} outside (0, 1)", self.harness.val_fraction)));
        }
        for p in [&self.paths.originals, &self.paths.bse, &self.paths.masks, &self.paths.metadata].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::MissingInput(format!("configured path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingInput(String),
    Config(String),
    Failure(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Config(_) => EXIT_BAD_CONFIG,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingInput(_) => "missing_input",
            CliError::Config(_) => "malformed_config",
            CliError::Failure(_) => "failure",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        let message = match self {
            CliError::Usage(m) | CliError::MissingInput(m) | CliError::Config(m) => m.clone(),
            CliError::Failure(e) => e.to_string(),
        };
        serde_json::json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NotFound(_) | Error::MissingInput { .. } => CliError::MissingInput(e.to_string()),
            other => CliError::Failure(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cxr-dimred", version, about = "Chest radiograph preprocessing, t-SNE mask outlier filtering and CNN experiments")]
pub struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert JSRT clinical listings (and optionally raw images) into the pipeline formats.
    Ingest(IngestArgs),
    /// Class balance, nodule size, subtlety and location tables.
    Eda(EdaArgs),
    /// Build one dataset variant as PGM images plus a manifest.
    Preprocess(PreprocessArgs),
    /// Embed lung masks with t-SNE and score them for outlyingness.
    Tsne(TsneArgs),
    /// Select the most outlying cases from an embedding.
    FilterOutliers(FilterArgs),
    /// Train one CNN run and write its learning curve.
    Train(TrainArgs),
    /// Repeated training runs, averaging, smoothing and accuracy estimate.
    Experiment(ExperimentArgs),
    /// Generate a synthetic phantom corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, value_name = "FILE")]
    pub nodule_list: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub normal_list: PathBuf,
    /// Directory of raw images to convert to PGM.
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Resize converted images to this side.
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EdaArgs {
    #[arg(long, value_name = "FILE")]
    pub metadata: Option<PathBuf>,
    #[arg(long)]
    pub bin_width: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub variant: DatasetVariant,
    #[arg(long, value_name = "DIR")]
    pub originals: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub bse: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub masks: Option<PathBuf>,
    /// Case ids to drop, one per line.
    #[arg(long, value_name = "FILE")]
    pub exclude: Option<PathBuf>,
    /// Metadata CSV providing labels.
    #[arg(long, value_name = "FILE")]
    pub metadata: Option<PathBuf>,
    /// Resample images and masks to this side.
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    #[arg(long, value_name = "DIR")]
    pub masks: Option<PathBuf>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub dims: u8,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long, value_name = "FILE")]
    pub embedding: PathBuf,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory the manifest paths are relative to.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Defaults to `manifest.csv` inside the data directory.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub variant: DatasetVariant,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated run seeds; defaults to `0..runs`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0.6)]
    pub nodule_frac: f64,
    #[arg(long, default_value_t = 0.05)]
    pub outlier_frac: f64,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Written next to every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> CliResult<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr as JSON.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let config = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::MissingInput(format!("config file {} not found", p.display())),
                _ => CliError::Config(format!("{}: {e}", p.display())),
            })?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    config.validate()?;
    Ok(config)
}

pub fn execute(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    let mut config = load_config(cli.config.as_deref())?;
    let ctx = |command: &str| Context { command: command.to_string(), argv: argv.clone() };
    match cli.command {
        Command::Ingest(a) => ingest(ctx("ingest"), &config, a),
        Command::Eda(a) => eda(ctx("eda"), &config, a),
        Command::Preprocess(a) => preprocess(ctx("preprocess"), &config, a),
        Command::Tsne(a) => {
            if let Some(p) = a.perplexity {
                config.tsne.perplexity = p;
            }
            if let Some(s) = a.seed {
                config.tsne.seed = s;
            }
            config.tsne.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            tsne(ctx("tsne"), &config, a)
        }
        Command::FilterOutliers(a) => {
            if let Some(f) = a.fraction {
                config.outlier_fraction = f;
            }
            filter_outliers(ctx("filter-outliers"), &config, a)
        }
        Command::Train(a) => {
            if let Some(s) = a.seed {
                config.cnn.seed = s;
            }
            train_cmd(ctx("train"), &config, a)
        }
        Command::Experiment(a) => experiment(ctx("experiment"), &config, a),
        Command::Synth(a) => {
            if let Some(s) = a.side {
                config.synth.side = s;
            }
            synth(ctx("synth"), &config, a)
        }
    }
}

struct Context {
    command: String,
    argv: Vec<String>,
}

/// Resolves a relative output path against the environment override or the
/// configured output root.
pub fn resolve_output(out: &Path, config: &PipelineConfig) -> PathBuf {
    if out.is_absolute() {
        return out.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).or_else(|| config.paths.output_root.clone()) {
        Some(root) => root.join(out),
        None => out.to_path_buf(),
    }
}

enum Target {
    Dir(PathBuf),
    File(PathBuf),
}

/// A scratch directory next to the final destination. Dropped without
/// `commit`, it is removed and nothing is left behind.
struct Staging {
    dir: PathBuf,
    target: Target,
    committed: bool,
}

impl Staging {
    fn new(target: Target) -> CliResult<Self> {
        let dest = match &target {
            Target::Dir(p) | Target::File(p) => p,
        };
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let dir = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, target, committed: false })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn digests(&self) -> CliResult<Vec<FileDigest>> {
        let mut files = Vec::new();
        collect_files(&self.dir, &mut files)?;
        files.sort();
        files
            .iter()
            .map(|f| {
                let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
                let rel = f.strip_prefix(&self.dir).unwrap_or(f);
                Ok(FileDigest { path: rel.to_string_lossy().replace('\\', "/"), sha256: sha256_hex(&bytes) })
            })
            .collect()
    }

    /// Writes the manifest and moves the staged outputs into place. A
    /// directory target replaces any previous directory of the same name; a
    /// file target gets its manifest at `<file>.manifest.json`.
    fn commit(mut self, ctx: &Context, config: &PipelineConfig, seeds: Vec<u64>, inputs: Vec<FileDigest>) -> CliResult<PathBuf> {
        let outputs = self.digests()?;
        let config_json = serde_json::to_vec(config).map_err(Error::from)?;
        let manifest = RunManifest {
            command: ctx.command.clone(),
            argv: ctx.argv.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: sha256_hex(&config_json),
            config: config.clone(),
            seeds,
            inputs,
            outputs,
        };
        let manifest_bytes = serde_json::to_vec_pretty(&manifest).map_err(Error::from)?;
        self.write(MANIFEST_NAME, &manifest_bytes)?;
        let dest = match &self.target {
            Target::Dir(dest) => {
                if dest.exists() {
                    fs::remove_dir_all(dest).map_err(|e| Error::io(dest, e))?;
                }
                fs::rename(&self.dir, dest).map_err(|e| Error::io(dest, e))?;
                dest.clone()
            }
            Target::File(dest) => {
                let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let manifest_dest = dest.with_file_name(format!("{name}.{MANIFEST_NAME}"));
                let staged_manifest = self.path(MANIFEST_NAME);
                fs::rename(&staged_manifest, &manifest_dest).map_err(|e| Error::io(&manifest_dest, e))?;
                let staged = self.path(&name);
                fs::rename(&staged, dest).map_err(|e| Error::io(dest, e))?;
                let _ = fs::remove_dir_all(&self.dir);
                dest.clone()
            }
        };
        self.committed = true;
        log::info!("{} wrote {}", ctx.command, dest.display());
        Ok(dest)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn file_name_of(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require(path: Option<&PathBuf>, what: &str) -> CliResult<PathBuf> {
    let p = path.ok_or_else(|| CliError::Usage(format!("no {what} given on the command line or in the config")))?;
    if !p.exists() {
        return Err(CliError::MissingInput(format!("{what} {} does not exist", p.display())));
    }
    Ok(p.clone())
}

/// Image-like files in `dir`, keyed by file stem.
fn list_cases(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut cases = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || file_name_of(&path).starts_with('.') {
            continue;
        }
        if let Some(stem) = path.file_stem() {
            cases.insert(stem.to_string_lossy().into_owned(), path);
        }
    }
    if cases.is_empty() {
        return Err(CliError::MissingInput(format!("no images in {}", dir.display())));
    }
    Ok(cases)
}

fn resample_image(image: ImageGrid, side: Option<usize>) -> CliResult<ImageGrid> {
    match side {
        Some(s) if image.dims() != (s, s) => Ok(resize_image(&image, s, s)?),
        _ => Ok(image),
    }
}

/// Block-mean resampling followed by a majority threshold.
fn resample_mask(mask: BinaryMask, side: Option<usize>) -> CliResult<BinaryMask> {
    match side {
        Some(s) if mask.dims() != (s, s) => Ok(load_mask(&resize_image(&mask.to_image(), s, s)?, 128)?),
        _ => Ok(mask),
    }
}

fn read_records(path: &Path) -> CliResult<Vec<ClinicalRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_metadata_csv(file)?)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(Error::from)?;
    for row in rows {
        w.write_record(&row).map_err(Error::from)?;
    }
    w.into_inner().map_err(|e| CliError::Failure(Error::malformed("csv", e.to_string())))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ingest(ctx: Context, config: &PipelineConfig, a: IngestArgs) -> CliResult<()> {
    let nodules = require(Some(&a.nodule_list), "nodule listing")?;
    let normals = require(Some(&a.normal_list), "normal listing")?;
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| CliError::from(Error::io(p, e)));
    let records = parse_jsrt_clinical(&read(&nodules)?, &read(&normals)?)?;
    let mut inputs = vec![digest_file(&nodules)?, digest_file(&normals)?];
    let stage = Staging::new(Target::Dir(resolve_output(&a.out, config)))?;
    let mut metadata = Vec::new();
    write_metadata_csv(&records, &mut metadata)?;
    stage.write("metadata.csv", &metadata)?;
    if let Some(dir) = &a.images {
        let dir = require(Some(dir), "image directory")?;
        for (id, path) in list_cases(&dir)? {
            let image = resample_image(read_image(&path, &config.raw_layout)?, a.side)?;
            let dest = stage.path(&format!("originals/{id}.pgm"));
            fs::create_dir_all(dest.parent().unwrap_or(Path::new("."))).map_err(|e| Error::io(&dest, e))?;
            write_pgm(&dest, &image)?;
            inputs.push(digest_file(&path)?);
        }
    }
    stage.commit(&ctx, config, Vec::new(), inputs)?;
    Ok(())
}

fn eda(ctx: Context, config: &PipelineConfig, a: EdaArgs) -> CliResult<()> {
    let path = require(a.metadata.as_ref().or(config.paths.metadata.as_ref()), "metadata CSV")?;
    let records = read_records(&path)?;
    let width = a.bin_width.unwrap_or(config.size_bin_width_mm);
    let stage = Staging::new(Target::Dir(resolve_output(&a.out, config)))?;

    let b = balance_report(&records);
    let rows = [("nodule", b.nodule), ("normal", b.normal), ("total", b.total)]
        .map(|(k, v)| vec![k.to_string(), v.to_string()]);
    stage.write("balance.csv", &csv_bytes(&["class", "count"], rows)?)?;

    let mut hist = Vec::new();
    size_histogram(&records, width)?.write_csv(&mut hist)?;
    stage.write("size_histogram.csv", &hist)?;

    let subtlety = subtlety_distribution(&records);
    let rows = subtlety.iter().enumerate().map(|(i, c)| vec![(i + 1).to_string(), c.to_string()]);
    stage.write("subtlety.csv", &csv_bytes(&["subtlety", "count"], rows)?)?;

    let rows = combined_distribution(&records, width)?.into_iter().map(|(k, c)| {
        vec![k.gender.to_string(), k.size_lo.to_string(), k.size_hi.to_string(), k.subtlety.to_string(), c.to_string()]
    });
    stage.write("combined.csv", &csv_bytes(&["gender", "size_lo", "size_hi", "subtlety", "count"], rows)?)?;

    let rows = location_table(&records).into_iter().map(|r| vec![r.case_id, opt(r.x), opt(r.y), r.label.to_string()]);
    stage.write("locations.csv", &csv_bytes(&["case_id", "x", "y", "label"], rows)?)?;

    stage.commit(&ctx, config, Vec::new(), vec![digest_file(&path)?])?;
    Ok(())
}

fn read_exclusions(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn preprocess(ctx: Context, config: &PipelineConfig, a: PreprocessArgs) -> CliResult<()> {
    let v = a.variant;
    let metadata = require(a.metadata.as_ref().or(config.paths.metadata.as_ref()), "metadata CSV")?;
    let records = read_records(&metadata)?;
    let mut inputs = vec![digest_file(&metadata)?];
    let mut vi = VariantInputs {
        labels: records.iter().map(|r| (r.case_id.clone(), r.label())).collect(),
        ..Default::default()
    };

    let mut load_images = |dir: Option<&PathBuf>, what: &str| -> CliResult<BTreeMap<String, ImageGrid>> {
        let dir = require(dir, what)?;
        let mut images = BTreeMap::new();
        for (id, path) in list_cases(&dir)? {
            images.insert(id, resample_image(read_image(&path, &config.raw_layout)?, a.side)?);
            inputs.push(digest_file(&path)?);
        }
        Ok(images)
    };
    let originals_dir = a.originals.as_ref().or(config.paths.originals.as_ref());
    let bse_dir = a.bse.as_ref().or(config.paths.bse.as_ref());
    if v.needs_originals() {
        vi.originals = load_images(originals_dir, "originals directory")?;
    }
    if v.needs_bse() {
        vi.bse = load_images(bse_dir, "BSE directory")?;
    }
    let masks_dir = a.masks.as_ref().or(config.paths.masks.as_ref());
    if v.needs_masks() {
        let dir = require(masks_dir, "masks directory")?;
        for (id, path) in list_cases(&dir)? {
            vi.lung_masks.insert(id, resample_mask(read_mask(&path, config.mask_threshold)?, a.side)?);
            inputs.push(digest_file(&path)?);
        }
    }
    if v.needs_exclusions() {
        let path = require(a.exclude.as_ref(), "exclusion list")?;
        vi.exclusions = read_exclusions(&path)?;
        inputs.push(digest_file(&path)?);
    }
    // Only cases present in every required image collection take part.
    let keep: Vec<String> = vi
        .labels
        .keys()
        .filter(|id| {
            (!v.needs_originals() || vi.originals.contains_key(*id))
                && (!v.needs_bse() || vi.bse.contains_key(*id))
                && (!v.needs_masks() || vi.lung_masks.contains_key(*id))
        })
        .cloned()
        .collect();
    let missing: Vec<String> = vi.labels.keys().filter(|id| !keep.contains(id)).cloned().collect();
    if !missing.is_empty() {
        log::warn!("{} cases in the metadata lack images and are skipped", missing.len());
    }
    vi.labels.retain(|id, _| keep.contains(id));
    let dataset = build_variant(v, &vi)?;

    let stage = Staging::new(Target::Dir(resolve_output(&a.out, config)))?;
    let mut rows = Vec::new();
    for s in &dataset.samples {
        let rel = format!("images/{}.pgm", s.case_id);
        let dest = stage.path(&rel);
        fs::create_dir_all(dest.parent().unwrap_or(Path::new("."))).map_err(|e| Error::io(&dest, e))?;
        write_pgm(&dest, &s.image)?;
        rows.push(vec![s.case_id.clone(), s.label.to_string(), rel]);
    }
    stage.write("manifest.csv", &csv_bytes(&["case_id", "label", "path"], rows)?)?;
    stage.write("excluded.txt", dataset.excluded_ids.iter().map(|id| format!("{id}\n")).collect::<String>().as_bytes())?;

    if !vi.lung_masks.is_empty() {
        // Bone fractions are reported whenever both image kinds are at hand.
        let mut originals = vi.originals.clone();
        let mut bse = vi.bse.clone();
        if originals.is_empty() {
            if let Some(dir) = originals_dir.filter(|d| d.exists()) {
                for (id, path) in list_cases(dir)? {
                    originals.insert(id, resample_image(read_image(&path, &config.raw_layout)?, a.side)?);
                }
            }
        }
        if bse.is_empty() {
            if let Some(dir) = bse_dir.filter(|d| d.exists()) {
                for (id, path) in list_cases(dir)? {
                    bse.insert(id, resample_image(read_image(&path, &config.raw_layout)?, a.side)?);
                }
            }
        }
        let mut rows = Vec::new();
        for (id, mask) in &vi.lung_masks {
            let bone = match (originals.get(id), bse.get(id)) {
                (Some(o), Some(b)) => Some(bone_fraction(&derive_bone_mask(o, b, mask, config.bone_threshold)?, mask)),
                _ => None,
            };
            rows.push(vec![id.clone(), mask_area_fraction(mask).to_string(), opt(bone)]);
        }
        stage.write("mask_stats.csv", &csv_bytes(&["case_id", "lung_fraction", "bone_fraction"], rows)?)?;

        let masks: Vec<BinaryMask> = vi.lung_masks.values().cloned().collect();
        let mut rows = Vec::new();
        for op in MaskOp::ALL {
            let uncovered = universal_mask_coverage(&masks, &records, op)?;
            rows.push(vec![op.to_string(), uncovered.len().to_string(), uncovered.join(";")]);
        }
        stage.write("coverage.csv", &csv_bytes(&["op", "uncovered_count", "uncovered_ids"], rows)?)?;
    }
    stage.commit(&ctx, config, Vec::new(), inputs)?;
    Ok(())
}

/// Share of the lung field covered by bone.
pub fn bone_fraction(bone: &BinaryMask, lung: &BinaryMask) -> f64 {
    match lung.count_ones() {
        0 => 0.0,
        n => bone.count_ones() as f64 / n as f64,
    }
}

fn tsne(ctx: Context, config: &PipelineConfig, a: TsneArgs) -> CliResult<()> {
    let dir = require(a.masks.as_ref().or(config.paths.masks.as_ref()), "masks directory")?;
    let mut vectors = Vec::new();
    let mut inputs = Vec::new();
    for (id, path) in list_cases(&dir)? {
        let mask = read_mask(&path, config.mask_threshold)?;
        vectors.push(mask_to_vector(id, &mask, config.mask_side)?);
        inputs.push(digest_file(&path)?);
    }
    let embedding = run_tsne(&vectors, usize::from(a.dims), &config.tsne)?;
    let scores = outlier_scores(&embedding, config.outlier_k)?;
    let out = resolve_output(&a.out, config);
    let stage = Staging::new(Target::File(out.clone()))?;
    let mut bytes = Vec::new();
    write_embedding_csv(&embedding, &scores, &mut bytes)?;
    stage.write(&file_name_of(&out), &bytes)?;
    stage.commit(&ctx, config, vec![config.tsne.seed], inputs)?;
    Ok(())
}

fn filter_outliers(ctx: Context, config: &PipelineConfig, a: FilterArgs) -> CliResult<()> {
    let path = require(Some(&a.embedding), "embedding CSV")?;
    if !(0.0..1.0).contains(&config.outlier_fraction) {
        return Err(CliError::Usage(format!("fraction {} outside [0, 1)", config.outlier_fraction)));
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let scores = read_embedding_scores(file)?;
    let ids = exclusion_list(&scores, config.outlier_fraction)?;
    let out = resolve_output(&a.out, config);
    let stage = Staging::new(Target::File(out.clone()))?;
    stage.write(&file_name_of(&out), ids.iter().map(|id| format!("{id}\n")).collect::<String>().as_bytes())?;
    stage.commit(&ctx, config, Vec::new(), vec![digest_file(&path)?])?;
    Ok(())
}

/// Reads a `case_id,label,path` manifest; paths are relative to `data`.
pub fn load_manifest_dataset(data: &Path, manifest: &Path, variant: DatasetVariant) -> crate::Result<(ProcessedDataset, Vec<PathBuf>)> {
    #[derive(Deserialize)]
    struct Row {
        case_id: String,
        label: String,
        path: String,
    }
    let mut bytes = Vec::new();
    fs::File::open(manifest)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(manifest, e))?;
    let mut samples = Vec::new();
    let mut paths = Vec::new();
    for row in csv::Reader::from_reader(bytes.as_slice()).deserialize() {
        let row: Row = row?;
        let path = data.join(&row.path);
        let image = crate::pgm::read_pgm(&path)?;
        samples.push(Sample { case_id: row.case_id, image, label: row.label.parse::<Label>()? });
        paths.push(path);
    }
    if samples.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    samples.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok((ProcessedDataset { variant, samples, excluded_ids: Vec::new() }, paths))
}

fn dataset_inputs(data: &Path, manifest: Option<&PathBuf>, variant: DatasetVariant) -> CliResult<(ProcessedDataset, Vec<FileDigest>)> {
    let data = require(Some(&data.to_path_buf()), "data directory")?;
    let manifest = manifest.cloned().unwrap_or_else(|| data.join("manifest.csv"));
    let manifest = require(Some(&manifest), "manifest CSV")?;
    let (dataset, paths) = load_manifest_dataset(&data, &manifest, variant)?;
    let mut inputs = vec![digest_file(&manifest)?];
    for p in &paths {
        inputs.push(digest_file(p)?);
    }
    Ok((dataset, inputs))
}

fn train_cmd(ctx: Context, config: &PipelineConfig, a: TrainArgs) -> CliResult<()> {
    let (dataset, inputs) = dataset_inputs(&a.data, a.manifest.as_ref(), DatasetVariant::V01)?;
    let labels: Vec<Label> = dataset.samples.iter().map(|s| s.label).collect();
    let seed = config.cnn.seed;
    let (tr, va) = split_indices(&labels, config.harness.val_fraction, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect::<Vec<_>>();
    let train_set = Batch::from_samples(&pick(&tr), config.cnn.input_side)?;
    let val_set = Batch::from_samples(&pick(&va), config.cnn.input_side)?;
    let mut net = build_network(&config.cnn)?;
    let curve = train(&mut net, &train_set, &val_set, a.epochs)?;
    let out = resolve_output(&a.out, config);
    let stage = Staging::new(Target::File(out.clone()))?;
    let mut bytes = Vec::new();
    curve.write_csv(&mut bytes)?;
    stage.write(&file_name_of(&out), &bytes)?;
    stage.commit(&ctx, config, vec![seed], inputs)?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    variant: DatasetVariant,
    crossing_epoch: Option<usize>,
    actual_accuracy: Option<f64>,
    epochs: usize,
    seeds: &'a [u64],
    samples: usize,
    config: &'a PipelineConfig,
}

fn experiment(ctx: Context, config: &PipelineConfig, a: ExperimentArgs) -> CliResult<()> {
    let seeds: Vec<u64> = match (&a.seeds, a.runs) {
        (Some(s), Some(r)) if s.len() != r => {
            return Err(CliError::Usage(format!("{} seeds given for {r} runs", s.len())));
        }
        (Some(s), _) => s.clone(),
        (None, r) => (0..r.unwrap_or(5) as u64).collect(),
    };
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one run is required".into()));
    }
    let (dataset, inputs) = dataset_inputs(&a.data, a.manifest.as_ref(), a.variant)?;
    let result = run_experiment(&dataset, &config.cnn, &config.harness, a.epochs, &seeds)?;
    let stage = Staging::new(Target::Dir(resolve_output(&a.out, config)))?;
    for (run, seed) in result.runs.iter().zip(&seeds) {
        let mut bytes = Vec::new();
        run.write_csv(&mut bytes)?;
        stage.write(&format!("runs/seed{seed}.csv"), &bytes)?;
    }
    for (name, curve) in [("averaged.csv", &result.summary.averaged), ("smoothed.csv", &result.summary.smoothed)] {
        let mut bytes = Vec::new();
        curve.write_csv(&mut bytes)?;
        stage.write(name, &bytes)?;
    }
    let summary = SummaryJson {
        variant: a.variant,
        crossing_epoch: result.summary.crossing_epoch,
        actual_accuracy: result.summary.actual_accuracy,
        epochs: a.epochs,
        seeds: &seeds,
        samples: dataset.samples.len(),
        config,
    };
    stage.write("summary.json", &serde_json::to_vec_pretty(&summary).map_err(Error::from)?)?;
    stage.commit(&ctx, config, seeds.clone(), inputs)?;
    Ok(())
}

fn synth(ctx: Context, config: &PipelineConfig, a: SynthArgs) -> CliResult<()> {
    for (name, f) in [("nodule-frac", a.nodule_frac), ("outlier-frac", a.outlier_frac)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(CliError::Usage(format!("--{name} {f} outside [0, 1]")));
        }
    }
    let corpus = generate_dataset(a.n, a.nodule_frac, a.outlier_frac, a.seed, &config.synth)?;
    let stage = Staging::new(Target::Dir(resolve_output(&a.out, config)))?;
    write_corpus(&corpus, &stage.dir)?;
    stage.commit(&ctx, config, vec![a.seed], Vec::new())?;
    Ok(())
}
