use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

/// One row of the labels manifest (`wsi_id,patient_id,label`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub wsi_id: String,
    #[serde(default)]
    pub patient_id: String,
    pub label: String,
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, LabelRow>, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["wsi_id", "patient_id", "label"] {
        return Err(CliError::Data(format!(
            "{}: expected header wsi_id,patient_id,label",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let mut row: LabelRow =
            row.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if row.patient_id.is_empty() {
            row.patient_id = row.wsi_id.clone();
        }
        if out.insert(row.wsi_id.clone(), row.clone()).is_some() {
            return Err(CliError::Data(format!(
                "{}: duplicate wsi_id {}",
                path.display(),
                row.wsi_id
            )));
        }
    }
    Ok(out)
}

pub fn labels_csv(rows: &[LabelRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}
