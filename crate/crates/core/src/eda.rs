//! Exploratory statistics over per-case clinical metadata: class balance,
//! nodule sizes, subtlety grades, their combination, and nodule locations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        })
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            "" | "unknown" | "?" => Ok(Gender::Unknown),
            other => Err(Error::malformed("gender", other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Nodule,
    Normal,
}

impl Label {
    pub fn from_has_nodule(has_nodule: bool) -> Self {
        if has_nodule {
            Label::Nodule
        } else {
            Label::Normal
        }
    }

    /// Classifier target: 1 for nodule, 0 for normal.
    pub fn target(self) -> u8 {
        u8::from(self == Label::Nodule)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Nodule => "nodule",
            Label::Normal => "normal",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nodule" | "1" => Ok(Label::Nodule),
            "normal" | "0" => Ok(Label::Normal),
            other => Err(Error::malformed("label", other.to_string())),
        }
    }
}

/// Per-case metadata. Nodule fields are only ever set on nodule cases; a
/// nodule case may still lack some of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub case_id: String,
    pub has_nodule: bool,
    pub nodule_x: Option<u32>,
    pub nodule_y: Option<u32>,
    pub size_mm: Option<f64>,
    pub subtlety: Option<u8>,
    pub malignant: Option<bool>,
    pub gender: Gender,
    pub age: Option<u32>,
}

impl ClinicalRecord {
    pub fn normal(case_id: impl Into<String>, gender: Gender, age: Option<u32>) -> Self {
        Self {
            case_id: case_id.into(),
            has_nodule: false,
            nodule_x: None,
            nodule_y: None,
            size_mm: None,
            subtlety: None,
            malignant: None,
            gender,
            age,
        }
    }

    pub fn label(&self) -> Label {
        Label::from_has_nodule(self.has_nodule)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::malformed("clinical record", format!("{}: {msg}", self.case_id)));
        if !self.has_nodule
            && (self.nodule_x.is_some()
                || self.nodule_y.is_some()
                || self.size_mm.is_some()
                || self.subtlety.is_some()
                || self.malignant.is_some())
        {
            return bad("nodule fields on a case without nodule");
        }
        if self.subtlety.is_some_and(|s| !(1..=5).contains(&s)) {
            return bad("subtlety outside 1..5");
        }
        if self.size_mm.is_some_and(|s| !(s > 0.0)) {
            return bad("nodule size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BalanceReport {
    pub nodule: usize,
    pub normal: usize,
    pub total: usize,
}

pub fn balance_report(records: &[ClinicalRecord]) -> BalanceReport {
    let nodule = records.iter().filter(|r| r.has_nodule).count();
    BalanceReport {
        nodule,
        normal: records.len() - nodule,
        total: records.len(),
    }
}

/// Half-open bins `[lo, hi)` of equal width starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (edge, count) in self.bin_edges.windows(2).zip(&self.counts) {
            w.write_record([edge[0].to_string(), edge[1].to_string(), count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn size_bin(size: f64, bin_width: f64) -> usize {
    (size / bin_width).floor() as usize
}

pub fn size_histogram(records: &[ClinicalRecord], bin_width: f64) -> Result<Histogram> {
    check_width(bin_width)?;
    let sizes: Vec<f64> = records.iter().filter(|r| r.has_nodule).filter_map(|r| r.size_mm).collect();
    let n_bins = sizes.iter().map(|&s| size_bin(s, bin_width) + 1).max().unwrap_or(1);
    let mut counts = vec![0; n_bins];
    for s in sizes {
        counts[size_bin(s, bin_width)] += 1;
    }
    Ok(Histogram {
        bin_edges: (0..=n_bins).map(|i| i as f64 * bin_width).collect(),
        counts,
    })
}

/// Counts for subtlety grades 1..=5, index 0 holding grade 1.
pub fn subtlety_distribution(records: &[ClinicalRecord]) -> [usize; 5] {
    let mut counts = [0; 5];
    for s in records.iter().filter(|r| r.has_nodule).filter_map(|r| r.subtlety) {
        counts[usize::from(s) - 1] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct CombinedKey {
    pub gender: Gender,
    pub size_lo: f64,
    pub size_hi: f64,
    pub subtlety: u8,
}

/// Group counts over complete nodule records (known gender, size and
/// subtlety). Zero-count groups are absent.
pub fn combined_distribution(records: &[ClinicalRecord], size_bin_width: f64) -> Result<Vec<(CombinedKey, usize)>> {
    check_width(size_bin_width)?;
    let mut groups: BTreeMap<(Gender, usize, u8), usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.has_nodule && r.gender != Gender::Unknown) {
        if let (Some(size), Some(subtlety)) = (r.size_mm, r.subtlety) {
            *groups.entry((r.gender, size_bin(size, size_bin_width), subtlety)).or_default() += 1;
        }
    }
    Ok(groups
        .into_iter()
        .map(|((gender, bin, subtlety), count)| {
            let key = CombinedKey {
                gender,
                size_lo: bin as f64 * size_bin_width,
                size_hi: (bin + 1) as f64 * size_bin_width,
                subtlety,
            };
            (key, count)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocationRow {
    pub case_id: String,
    pub x: Option<u32>,
    pub y: Option<u32>,
    pub label: Label,
}

pub fn location_table(records: &[ClinicalRecord]) -> Vec<LocationRow> {
    records
        .iter()
        .filter(|r| r.has_nodule)
        .map(|r| LocationRow {
            case_id: r.case_id.clone(),
            x: r.nodule_x,
            y: r.nodule_y,
            label: r.label(),
        })
        .collect()
}

fn check_width(w: f64) -> Result<()> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("bin width {w} must be positive")));
    }
    Ok(())
}

pub const METADATA_HEADER: [&str; 9] = [
    "case_id",
    "has_nodule",
    "x",
    "y",
    "size_mm",
    "subtlety",
    "malignant",
    "gender",
    "age",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn bool_cell(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_metadata_csv<W: Write>(records: &[ClinicalRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METADATA_HEADER)?;
    for r in records {
        w.write_record([
            r.case_id.clone(),
            bool_cell(r.has_nodule).to_string(),
            opt(r.nodule_x),
            opt(r.nodule_y),
            opt(r.size_mm),
            opt(r.subtlety),
            opt(r.malignant.map(bool_cell)),
            r.gender.to_string(),
            opt(r.age),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn parse_cell<T: FromStr>(cell: &str, column: &str, line: usize) -> Result<Option<T>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse()
        .map(Some)
        .map_err(|_| Error::malformed("metadata csv", format!("line {line}: bad {column} value {cell:?}")))
}

fn parse_bool(cell: &str, column: &str, line: usize) -> Result<Option<bool>> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "1" | "true" | "yes" | "malignant" => Ok(Some(true)),
        "0" | "false" | "no" | "benign" => Ok(Some(false)),
        other => Err(Error::malformed("metadata csv", format!("line {line}: bad {column} value {other:?}"))),
    }
}

pub fn read_metadata_csv<R: Read>(reader: R) -> Result<Vec<ClinicalRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().map(str::trim).ne(METADATA_HEADER) {
        return Err(Error::malformed(
            "metadata csv",
            format!("expected header {}", METADATA_HEADER.join(",")),
        ));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let record = ClinicalRecord {
            case_id: row[0].trim().to_string(),
            has_nodule: parse_bool(&row[1], "has_nodule", line)?
                .ok_or_else(|| Error::malformed("metadata csv", format!("line {line}: has_nodule missing")))?,
            nodule_x: parse_cell(&row[2], "x", line)?,
            nodule_y: parse_cell(&row[3], "y", line)?,
            size_mm: parse_cell(&row[4], "size_mm", line)?,
            subtlety: parse_cell(&row[5], "subtlety", line)?,
            malignant: parse_bool(&row[6], "malignant", line)?,
            gender: row[7].parse()?,
            age: parse_cell(&row[8], "age", line)?,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Parses the whitespace-separated clinical listings shipped with JSRT.
///
/// Nodule rows: `file subtlety size_mm age sex x y malignant|benign ...`;
/// non-nodule rows: `file age sex ...`. `?` marks a missing value and the
/// file extension is stripped from the case id.
pub fn parse_jsrt_clinical(nodule_listing: &str, normal_listing: &str) -> Result<Vec<ClinicalRecord>> {
    fn case_id(file: &str) -> String {
        file.rsplit_once('.').map_or(file, |(stem, _)| stem).to_string()
    }
    fn field<T: FromStr>(tok: Option<&&str>) -> Option<T> {
        tok.and_then(|t| t.parse().ok())
    }
    let mut records = Vec::new();
    for (ln, line) in nodule_listing.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 8 {
            return Err(Error::malformed("jsrt nodule listing", format!("line {}: {line:?}", ln + 1)));
        }
        let record = ClinicalRecord {
            case_id: case_id(toks[0]),
            has_nodule: true,
            subtlety: field(toks.get(1)),
            size_mm: field::<f64>(toks.get(2)).filter(|&s| s > 0.0),
            age: field(toks.get(3)),
            gender: toks[4].parse()?,
            nodule_x: field(toks.get(5)),
            nodule_y: field(toks.get(6)),
            malignant: match toks[7].to_ascii_lowercase().as_str() {
                "malignant" => Some(true),
                "benign" => Some(false),
                _ => None,
            },
        };
        record.validate()?;
        records.push(record);
    }
    for (ln, line) in normal_listing.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(Error::malformed("jsrt normal listing", format!("line {}: {line:?}", ln + 1)));
        }
        records.push(ClinicalRecord::normal(case_id(toks[0]), toks[2].parse()?, field(toks.get(1))));
    }
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(records)
}
