//! Metadata manifest ingestion and the train/validation split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classes::{LesionClass, NUM_CLASSES};
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest has no header or lacks column {0:?}")]
    MissingHeader(String),
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: unknown diagnosis {dx:?}")]
    UnknownClass { dx: String, line: u64 },
    #[error("no record has an age to impute from")]
    AllAgesMissing,
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("split of {total} records leaves {train} for training and {validation} for validation")]
    DegenerateSplit {
        total: usize,
        train: usize,
        validation: usize,
    },
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub lesion_id: String,
    pub image_id: String,
    pub dx: LesionClass,
    pub dx_type: String,
    pub age: Option<f64>,
    pub sex: String,
    pub localization: String,
    pub label_code: Option<u8>,
}

const COLUMNS: [&str; 7] = [
    "lesion_id",
    "image_id",
    "dx",
    "dx_type",
    "age",
    "sex",
    "localization",
];

/// Parses a header-bearing, comma-separated metadata manifest.
///
/// Columns are located by header name; extra columns are ignored. Line
/// numbers in errors are 1-based and count the header.
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<SampleRecord>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|_| DatasetError::MissingHeader(COLUMNS[0].to_string()))?
        .clone();
    let mut index = [0usize; COLUMNS.len()];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingHeader(name.to_string()))?;
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DatasetError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != header.len() {
            return Err(DatasetError::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        let field = |col: usize| row[index[col]].trim();
        let dx = field(2);
        let dx = dx.parse::<LesionClass>().map_err(|_| DatasetError::UnknownClass {
            dx: dx.to_string(),
            line,
        })?;
        let age = match field(4) {
            "" => None,
            raw => {
                let age: f64 = raw.parse().map_err(|_| DatasetError::MalformedRow {
                    line,
                    reason: format!("age {raw:?} is not a number"),
                })?;
                if !age.is_finite() || age < 0.0 {
                    return Err(DatasetError::MalformedRow {
                        line,
                        reason: format!("age {raw:?} is not a non-negative number"),
                    });
                }
                Some(age)
            }
        };
        records.push(SampleRecord {
            lesion_id: field(0).to_string(),
            image_id: field(1).to_string(),
            dx,
            dx_type: field(3).to_string(),
            age,
            sex: field(5).to_string(),
            localization: field(6).to_string(),
            label_code: None,
        });
    }
    Ok(records)
}

/// Sets `label_code` from the fixed lexicographic class mapping.
pub fn encode_labels(mut records: Vec<SampleRecord>) -> Vec<SampleRecord> {
    for r in &mut records {
        r.label_code = Some(r.dx.code());
    }
    records
}

/// Fills absent ages with the mean of the present ones.
pub fn impute_age(mut records: Vec<SampleRecord>) -> Result<Vec<SampleRecord>, DatasetError> {
    let (sum, n) = records
        .iter()
        .filter_map(|r| r.age)
        .fold((0.0f64, 0usize), |(s, n), a| (s + a, n + 1));
    if n == 0 {
        return Err(DatasetError::AllAgesMissing);
    }
    let mean = sum / n as f64;
    for r in &mut records {
        r.age.get_or_insert(mean);
    }
    Ok(records)
}

/// Per-class record counts indexed by label code.
pub fn class_counts(records: &[SampleRecord]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for r in records {
        counts[r.dx.code() as usize] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Vec<SampleRecord>,
    pub validation: Vec<SampleRecord>,
    pub seed: u64,
    pub ratio: f64,
}

fn train_share(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Seeded shuffle-and-partition. With `stratified`, each class is shuffled
/// and partitioned on its own (classes in label order) with the same ratio.
pub fn split(
    records: &[SampleRecord],
    ratio: f64,
    seed: u64,
    stratified: bool,
) -> Result<SplitResult, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let mut rng = rng_from_seed(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut partition = |mut group: Vec<SampleRecord>| {
        group.shuffle(&mut rng);
        let k = train_share(group.len(), ratio);
        validation.extend(group.split_off(k));
        train.extend(group);
    };
    if stratified {
        let mut by_class: BTreeMap<LesionClass, Vec<SampleRecord>> = BTreeMap::new();
        for r in records {
            by_class.entry(r.dx).or_default().push(r.clone());
        }
        for group in by_class.into_values() {
            partition(group);
        }
    } else {
        partition(records.to_vec());
    }
    if train.is_empty() || validation.is_empty() {
        return Err(DatasetError::DegenerateSplit {
            total: records.len(),
            train: train.len(),
            validation: validation.len(),
        });
    }
    Ok(SplitResult {
        train,
        validation,
        seed,
        ratio,
    })
}
