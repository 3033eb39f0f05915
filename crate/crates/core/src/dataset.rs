//! Sample manifests, feature matrices and participant-level splitting.
//!
//! Splits are always made over participants, never over samples, so that no
//! speaker contributes recordings to more than one of train, validation and
//! test.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 10] = [
    "sample_id",
    "participant_id",
    "recording_date",
    "cohort",
    "label",
    "age",
    "sex",
    "ethnicity",
    "disease_duration",
    "audio_path",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    HomeRecorded,
    ClinicalSetup,
    PdCareFacility,
}

impl Cohort {
    pub const ALL: [Cohort; 3] = [Cohort::HomeRecorded, Cohort::ClinicalSetup, Cohort::PdCareFacility];

    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::HomeRecorded => "home",
            Cohort::ClinicalSetup => "clinic",
            Cohort::PdCareFacility => "care",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Cohort::HomeRecorded => "Home Recorded",
            Cohort::ClinicalSetup => "Clinical Setup",
            Cohort::PdCareFacility => "PD Care Facility",
        }
    }
}

impl FromStr for Cohort {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "home" => Ok(Cohort::HomeRecorded),
            "clinic" => Ok(Cohort::ClinicalSetup),
            "care" => Ok(Cohort::PdCareFacility),
            other => Err(format!("unknown cohort {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Control,
    Pd,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Pd => "pd",
            Label::Control => "control",
        }
    }

    pub fn is_pd(self) -> bool {
        self == Label::Pd
    }

    /// 1 for PD, 0 for control.
    pub fn as_target(self) -> u8 {
        self.is_pd() as u8
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pd" => Ok(Label::Pd),
            "control" => Ok(Label::Control),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
    Nonbinary,
    Unknown,
}

impl Sex {
    pub const ALL: [Sex; 4] = [Sex::Male, Sex::Female, Sex::Nonbinary, Sex::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Nonbinary => "nonbinary",
            Sex::Unknown => "unknown",
        }
    }

    fn parse_lenient(s: &str) -> Sex {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Sex::Male,
            "female" | "f" => Sex::Female,
            "nonbinary" | "non-binary" => Sex::Nonbinary,
            _ => Sex::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ethnicity {
    White,
    Black,
    AmericanIndian,
    Asian,
    Other,
    Unknown,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 6] = [
        Ethnicity::White,
        Ethnicity::Black,
        Ethnicity::AmericanIndian,
        Ethnicity::Asian,
        Ethnicity::Other,
        Ethnicity::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ethnicity::White => "white",
            Ethnicity::Black => "black",
            Ethnicity::AmericanIndian => "american_indian",
            Ethnicity::Asian => "asian",
            Ethnicity::Other => "other",
            Ethnicity::Unknown => "unknown",
        }
    }

    /// Known and not White. `Unknown` is neither White nor Non-White.
    pub fn is_non_white(self) -> bool {
        !matches!(self, Ethnicity::White | Ethnicity::Unknown)
    }

    fn parse_lenient(s: &str) -> Ethnicity {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "white" => Ethnicity::White,
            "black" | "black_or_african_american" => Ethnicity::Black,
            "american_indian" | "american_indian_or_alaska_native" => Ethnicity::AmericanIndian,
            "asian" => Ethnicity::Asian,
            "other" | "others" => Ethnicity::Other,
            _ => Ethnicity::Unknown,
        }
    }
}

/// One recording and the metadata of its speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub participant_id: String,
    pub recording_date: NaiveDate,
    pub cohort: Cohort,
    pub label: Label,
    pub age: Option<f64>,
    pub sex: Option<Sex>,
    pub ethnicity: Option<Ethnicity>,
    pub disease_duration: Option<f64>,
    pub audio_path: Option<String>,
}

impl SampleRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("empty sample_id".into());
        }
        if self.participant_id.is_empty() {
            return Err("empty participant_id".into());
        }
        if let Some(age) = self.age {
            if !(0.0..=130.0).contains(&age) {
                return Err(format!("age {age} outside [0, 130]"));
            }
        }
        if let Some(d) = self.disease_duration {
            if self.label != Label::Pd {
                return Err("disease_duration given for a control sample".into());
            }
            if !d.is_finite() || d < 0.0 {
                return Err(format!("invalid disease_duration {d}"));
            }
        }
        Ok(())
    }
}

fn opt_cell(cell: &str) -> Option<&str> {
    let t = cell.trim();
    (!t.is_empty()).then_some(t)
}

fn parse_opt_f64(cell: &str, name: &str) -> std::result::Result<Option<f64>, String> {
    opt_cell(cell)
        .map(|c| {
            c.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("unparsable {name} {c:?}"))
        })
        .transpose()
}

fn parse_record(row: &csv::StringRecord) -> std::result::Result<SampleRecord, String> {
    if row.len() != MANIFEST_HEADER.len() {
        return Err(format!("expected {} columns, found {}", MANIFEST_HEADER.len(), row.len()));
    }
    let date = NaiveDate::parse_from_str(row[2].trim(), "%Y-%m-%d")
        .map_err(|e| format!("unparsable recording_date {:?}: {e}", &row[2]))?;
    let rec = SampleRecord {
        sample_id: row[0].trim().to_string(),
        participant_id: row[1].trim().to_string(),
        recording_date: date,
        cohort: row[3].parse()?,
        label: row[4].parse()?,
        age: parse_opt_f64(&row[5], "age")?,
        sex: opt_cell(&row[6]).map(Sex::parse_lenient),
        ethnicity: opt_cell(&row[7]).map(Ethnicity::parse_lenient),
        disease_duration: parse_opt_f64(&row[8], "disease_duration")?,
        audio_path: opt_cell(&row[9]).map(str::to_string),
    };
    rec.validate()?;
    Ok(rec)
}

/// Parses manifest CSV text. Row indices in errors are 1-based data rows.
pub fn parse_manifest<R: std::io::Read>(reader: R, context: &str) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::BadHeader(context.to_string()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::MalformedRow {
            context: context.to_string(),
            row: i + 1,
            message: e.to_string(),
        })?;
        let rec = parse_record(&row).map_err(|message| Error::MalformedRow {
            context: context.to_string(),
            row: i + 1,
            message,
        })?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(Error::DuplicateSample(rec.sample_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file, &path.display().to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn manifest_to_csv(records: &[SampleRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        w.write_record([
            r.sample_id.clone(),
            r.participant_id.clone(),
            r.recording_date.format("%Y-%m-%d").to_string(),
            r.cohort.as_str().to_string(),
            r.label.as_str().to_string(),
            fmt_opt(r.age),
            r.sex.map(|s| s.as_str().to_string()).unwrap_or_default(),
            r.ethnicity.map(|s| s.as_str().to_string()).unwrap_or_default(),
            fmt_opt(r.disease_duration),
            r.audio_path.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    crate::io::write_atomic(path, &manifest_to_csv(records)?)
}

/// Keeps the first record for every (participant, recording date) pair.
pub fn deduplicate(records: &[SampleRecord]) -> Vec<SampleRecord> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert((r.participant_id.clone(), r.recording_date)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Acoustic,
    W2v2,
    Wavlm,
    Imagebind,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 4] = [FeatureSet::Acoustic, FeatureSet::W2v2, FeatureSet::Wavlm, FeatureSet::Imagebind];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::Acoustic => "acoustic",
            FeatureSet::W2v2 => "w2v2",
            FeatureSet::Wavlm => "wavlm",
            FeatureSet::Imagebind => "imagebind",
        }
    }

    /// Width produced by the reference extractors.
    pub fn expected_dim(self) -> usize {
        match self {
            FeatureSet::Acoustic => crate::acoustic::ACOUSTIC_DIM,
            FeatureSet::W2v2 => 768,
            FeatureSet::Wavlm | FeatureSet::Imagebind => 1024,
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "acoustic" => Ok(FeatureSet::Acoustic),
            "w2v2" | "wav2vec2" => Ok(FeatureSet::W2v2),
            "wavlm" => Ok(FeatureSet::Wavlm),
            "imagebind" => Ok(FeatureSet::Imagebind),
            other => Err(format!("unknown feature set {other:?}")),
        }
    }
}

/// A named block of fixed-width feature rows keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub name: String,
    pub column_names: Vec<String>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(name: impl Into<String>, column_names: Vec<String>, ids: Vec<String>, values: Array2<f64>) -> Result<Self> {
        let name = name.into();
        if column_names.is_empty() {
            return Err(Error::invalid(format!("feature set {name} has no columns")));
        }
        if values.ncols() != column_names.len() {
            return Err(Error::DimensionMismatch {
                what: "feature columns",
                expected: column_names.len(),
                actual: values.ncols(),
            });
        }
        if values.nrows() != ids.len() {
            return Err(Error::DimensionMismatch {
                what: "feature rows",
                expected: ids.len(),
                actual: values.nrows(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            let row = bad / values.ncols();
            return Err(Error::invalid(format!("non-finite value in {name} for sample {}", ids[row])));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateSample(id.clone()));
            }
        }
        Ok(FeatureMatrix {
            name,
            column_names,
            ids,
            index,
            values,
        })
    }

    pub fn from_rows(name: impl Into<String>, column_names: Vec<String>, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = column_names.len();
        let mut ids = Vec::with_capacity(rows.len());
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for (id, row) in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "feature row length",
                    expected: dim,
                    actual: row.len(),
                });
            }
            ids.push(id);
            flat.extend(row);
        }
        let values = Array2::from_shape_vec((ids.len(), dim), flat).expect("shape checked");
        Self::new(name, column_names, ids, values)
    }

    pub fn dim(&self) -> usize {
        self.column_names.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, sample_id: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(sample_id).map(|&i| self.values.row(i))
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.index.contains_key(sample_id)
    }

    /// Gathers rows for `ids` in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (k, id) in ids.iter().enumerate() {
            let i = *self
                .index
                .get(id)
                .ok_or_else(|| Error::invalid(format!("sample {id} missing from feature set {}", self.name)))?;
            out.row_mut(k).assign(&self.values.row(i));
        }
        Ok(out)
    }

    /// Checks the width against the reference extractor for `set`.
    pub fn check_expected_dim(&self, set: FeatureSet) -> Result<()> {
        if self.dim() != set.expected_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature set width",
                expected: set.expected_dim(),
                actual: self.dim(),
            });
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(self.dim() + 1);
        for (i, id) in self.ids.iter().enumerate() {
            rec.clear();
            rec.push(id.clone());
            // `Display` for f64 is the shortest representation that round-trips.
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_csv()?)
    }

    pub fn parse_csv<R: std::io::Read>(name: &str, reader: R, context: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.is_empty() || header[0].trim() != "sample_id" || header.len() < 2 {
            return Err(Error::BadHeader(context.to_string()));
        }
        let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let malformed = |message: String| Error::MalformedRow {
                context: context.to_string(),
                row: i + 1,
                message,
            };
            let row = row.map_err(|e| malformed(e.to_string()))?;
            if row.len() != header.len() {
                return Err(malformed(format!("expected {} columns, found {}", header.len(), row.len())));
            }
            let vals = row
                .iter()
                .skip(1)
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| malformed(format!("unparsable value {c:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((row[0].trim().to_string(), vals));
        }
        Self::from_rows(name, columns, rows)
    }

    pub fn load_csv(name: &str, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(name, file, &path.display().to_string())
    }
}

/// Participant-level train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

impl Split {
    pub fn sample_ids<'a>(&self, records: &'a [SampleRecord], part: SplitPart) -> Vec<&'a SampleRecord> {
        let set = match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        };
        records.iter().filter(|r| set.contains(&r.participant_id)).collect()
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

/// Participant label: PD if any of their samples is PD.
pub fn participant_labels(records: &[SampleRecord]) -> BTreeMap<String, Label> {
    let mut out: BTreeMap<String, Label> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.participant_id.clone()).or_insert(Label::Control);
        if r.label.is_pd() {
            *e = Label::Pd;
        }
    }
    out
}

/// Shuffled participant lists per label stratum (PD first).
fn shuffled_strata(records: &[SampleRecord], seed: u64) -> [Vec<String>; 2] {
    let labels = participant_labels(records);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pd: Vec<String> = labels.iter().filter(|(_, l)| l.is_pd()).map(|(p, _)| p.clone()).collect();
    let mut ctl: Vec<String> = labels.iter().filter(|(_, l)| !l.is_pd()).map(|(p, _)| p.clone()).collect();
    pd.shuffle(&mut rng);
    ctl.shuffle(&mut rng);
    [pd, ctl]
}

/// Set sizes for `n` participants: validation and test get the floor of their
/// share and training absorbs the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let val = (n as f64 * ratios.1 + 1e-9).floor() as usize;
    let test = (n as f64 * ratios.2 + 1e-9).floor() as usize;
    let val = val.min(n);
    let test = test.min(n - val);
    (n - val - test, val, test)
}

/// Stratified participant split.
///
/// Set sizes come from [`split_sizes`]. Each set's PD count is obtained by
/// rounding the cumulative proportional PD share at the set boundaries
/// (train, then validation, then test), which keeps every set's PD count
/// within one participant of its proportional share. Within each stratum
/// participants are shuffled by a seeded generator.
pub fn split_participants(records: &[SampleRecord], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let [pd, ctl] = shuffled_strata(records, seed);
    let n = pd.len() + ctl.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 participants to split, got {n}")));
    }
    let sizes = split_sizes(n, ratios);
    let pd_counts = stratum_counts(pd.len(), n, [sizes.0, sizes.1, sizes.2]);
    let mut sets: [BTreeSet<String>; 3] = Default::default();
    let (mut ip, mut ic) = (0, 0);
    for (k, set) in sets.iter_mut().enumerate() {
        let size = [sizes.0, sizes.1, sizes.2][k];
        let npd = pd_counts[k];
        set.extend(pd[ip..ip + npd].iter().cloned());
        set.extend(ctl[ic..ic + (size - npd)].iter().cloned());
        ip += npd;
        ic += size - npd;
    }
    let [train, validation, test] = sets;
    Ok(Split {
        train,
        validation,
        test,
        seed,
    })
}

/// PD members per set via cumulative rounding of the proportional share.
/// Halves round up, which favours the earlier set.
fn stratum_counts(n_pd: usize, n: usize, sizes: [usize; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    let mut cum_size = 0usize;
    let mut prev = 0usize;
    for (k, &s) in sizes.iter().enumerate() {
        cum_size += s;
        // Integer arithmetic: round(n_pd * cum_size / n) with halves up.
        let mut cum = (2 * n_pd * cum_size + n) / (2 * n);
        // The control stratum must be able to fill the remainder.
        let n_ctl = n - n_pd;
        cum = cum.max(cum_size.saturating_sub(n_ctl)).min(n_pd).min(cum_size);
        cum = cum.max(prev);
        out[k] = cum - prev;
        prev = cum;
    }
    out
}

/// Stratified participant k-fold: PD participants then controls (each
/// shuffled) are dealt round-robin over the folds. Validation sets are empty.
pub fn kfold_participants(records: &[SampleRecord], k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let [pd, ctl] = shuffled_strata(records, seed);
    let n = pd.len() + ctl.len();
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds participant count {n}")));
    }
    let mut folds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    for (i, p) in pd.iter().chain(ctl.iter()).enumerate() {
        folds[i % k].insert(p.clone());
    }
    Ok((0..k)
        .map(|j| Split {
            train: folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .flat_map(|(_, f)| f.iter().cloned())
                .collect(),
            validation: BTreeSet::new(),
            test: folds[j].clone(),
            seed,
        })
        .collect())
}
