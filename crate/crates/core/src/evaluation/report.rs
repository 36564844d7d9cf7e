use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BoxMode;
use crate::data::GallerySize;
use crate::error::{Error, Result};

/// Version of the machine-readable metric rows.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub gallery_size: GallerySize,
    pub map: f64,
    pub top1: f64,
    pub num_queries: usize,
}

/// Metrics for one model on one dataset. `map` and `top1` repeat the first
/// table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target_dataset: String,
    pub source_dataset: Option<String>,
    pub mode: BoxMode,
    pub map: f64,
    pub top1: f64,
    pub table: Vec<SizeRow>,
}

/// One flattened, versioned table row as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub dataset: String,
    pub source_dataset: Option<String>,
    pub mode: BoxMode,
    pub gallery_size: GallerySize,
    pub map: f64,
    pub top1: f64,
    pub num_queries: usize,
}

impl MetricsReport {
    pub fn single(dataset: &str, mode: BoxMode, row: SizeRow) -> Self {
        Self {
            target_dataset: dataset.to_string(),
            source_dataset: None,
            mode,
            map: row.map,
            top1: row.top1,
            table: vec![row],
        }
    }

    pub fn rows(&self) -> Vec<MetricsRow> {
        self.table
            .iter()
            .map(|r| MetricsRow {
                schema_version: REPORT_SCHEMA,
                dataset: self.target_dataset.clone(),
                source_dataset: self.source_dataset.clone(),
                mode: self.mode,
                gallery_size: r.gallery_size,
                map: r.map,
                top1: r.top1,
                num_queries: r.num_queries,
            })
            .collect()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.source_dataset {
            Some(src) => writeln!(f, "{src} -> {} ({} boxes)", self.target_dataset, self.mode)?,
            None => writeln!(f, "{} ({} boxes)", self.target_dataset, self.mode)?,
        }
        writeln!(f, "{:>10}  {:>7}  {:>7}  {:>8}", "gallery", "mAP", "top-1", "queries")?;
        for r in &self.table {
            writeln!(
                f,
                "{:>10}  {:>7.2}  {:>7.2}  {:>8}",
                r.gallery_size.to_string(),
                100.0 * r.map,
                100.0 * r.top1,
                r.num_queries
            )?;
        }
        Ok(())
    }
}

/// Appends the reports' rows to `path` as JSON lines.
pub fn write_rows(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for rep in reports {
        for row in rep.rows() {
            writeln!(f, "{}", serde_json::to_string(&row)?)?;
        }
    }
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rows = Vec::new();
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: MetricsRow = serde_json::from_str(line)?;
        if row.schema_version != REPORT_SCHEMA {
            return Err(Error::Config(format!(
                "{} line {}: metrics schema {} (expected {REPORT_SCHEMA})",
                path.display(),
                n + 1,
                row.schema_version
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}
