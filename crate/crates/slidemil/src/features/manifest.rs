//! Dataset manifest: a CSV with columns `PATIENT_ID,FEATURE_PATH` followed
//! by one column per prediction target. Target cells are `0`, `1`, or `NA`;
//! NA survives loading as a missing value and is never coerced to a label.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("manifest is missing required column {name}")]
    MissingColumn { name: &'static str },
    #[error("manifest has no target columns")]
    NoTargets,
    #[error("row {row}: patient_id is empty")]
    EmptyPatientId { row: usize },
    #[error("row {row}: duplicate feature_path {path}")]
    DuplicatePath { row: usize, path: String },
    #[error("row {row}, column {column}: target value {value:?} is not 0, 1, or NA")]
    BadTargetValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("unknown target {name}; manifest has {available:?}")]
    UnknownTarget { name: String, available: Vec<String> },
}

/// One slide entry: patient, path to its bag file, and target labels
/// (`None` = NA).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub feature_path: PathBuf,
    pub targets: BTreeMap<String, Option<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub target_names: Vec<String>,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let mut reader = csv::Reader::from_path(path).map_err(|source| ManifestError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let headers = reader
            .headers()
            .map_err(|source| ManifestError::Csv {
                path: path.to_path_buf(),
                source,
            })?
            .clone();
        let idx_of = |name: &'static str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or(ManifestError::MissingColumn { name })
        };
        let patient_idx = idx_of("PATIENT_ID")?;
        let path_idx = idx_of("FEATURE_PATH")?;
        let target_cols: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != patient_idx && *i != path_idx)
            .map(|(i, h)| (i, h.to_string()))
            .collect();
        if target_cols.is_empty() {
            return Err(ManifestError::NoTargets);
        }

        let mut rows = Vec::new();
        let mut seen_paths = HashSet::new();
        for (row_idx, record) in reader.records().enumerate() {
            let record = record.map_err(|source| ManifestError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            // Row numbers in errors are 1-based and skip the header.
            let row = row_idx + 1;
            let patient_id = record.get(patient_idx).unwrap_or("").trim().to_string();
            if patient_id.is_empty() {
                return Err(ManifestError::EmptyPatientId { row });
            }
            let feature_path = record.get(path_idx).unwrap_or("").trim().to_string();
            if !seen_paths.insert(feature_path.clone()) {
                return Err(ManifestError::DuplicatePath {
                    row,
                    path: feature_path,
                });
            }
            let mut targets = BTreeMap::new();
            for (col, name) in &target_cols {
                let raw = record.get(*col).unwrap_or("").trim();
                let value = match raw {
                    "0" => Some(0),
                    "1" => Some(1),
                    "NA" => None,
                    other => {
                        return Err(ManifestError::BadTargetValue {
                            row,
                            column: name.clone(),
                            value: other.to_string(),
                        })
                    }
                };
                targets.insert(name.clone(), value);
            }
            rows.push(ManifestRow {
                patient_id,
                feature_path: PathBuf::from(feature_path),
                targets,
            });
        }
        Ok(Self {
            target_names: target_cols.into_iter().map(|(_, n)| n).collect(),
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut writer = csv::Writer::from_path(path).map_err(|source| ManifestError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let mut header = vec!["PATIENT_ID".to_string(), "FEATURE_PATH".to_string()];
        header.extend(self.target_names.iter().cloned());
        let write_err = |source| ManifestError::Csv {
            path: path.to_path_buf(),
            source,
        };
        writer.write_record(&header).map_err(write_err)?;
        for row in &self.rows {
            let mut record = vec![
                row.patient_id.clone(),
                row.feature_path.display().to_string(),
            ];
            for name in &self.target_names {
                record.push(match row.targets.get(name) {
                    Some(Some(v)) => v.to_string(),
                    _ => "NA".to_string(),
                });
            }
            writer.write_record(&record).map_err(write_err)?;
        }
        writer.flush().map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn require_target(&self, name: &str) -> Result<(), ManifestError> {
        if self.target_names.iter().any(|t| t == name) {
            Ok(())
        } else {
            Err(ManifestError::UnknownTarget {
                name: name.to_string(),
                available: self.target_names.clone(),
            })
        }
    }

    /// Unique patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.patient_id.clone()))
            .map(|r| r.patient_id.clone())
            .collect()
    }

    /// A patient's label for one target. Multiple slides of a patient must
    /// agree; disagreement returns None (treated as unlabeled).
    pub fn patient_label(&self, patient: &str, target: &str) -> Option<u8> {
        let mut label = None;
        for row in self.rows.iter().filter(|r| r.patient_id == patient) {
            match row.targets.get(target).copied().flatten() {
                Some(v) => match label {
                    None => label = Some(v),
                    Some(prev) if prev != v => return None,
                    _ => {}
                },
                None => {}
            }
        }
        label
    }

    /// Rows restricted to a set of patients, preserving order.
    pub fn subset(&self, patients: &HashSet<String>) -> DatasetManifest {
        DatasetManifest {
            target_names: self.target_names.clone(),
            rows: self
                .rows
                .iter()
                .filter(|r| patients.contains(&r.patient_id))
                .cloned()
                .collect(),
        }
    }
}
