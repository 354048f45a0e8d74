//! CSV matrices with named columns and the dataset metadata sidecar.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tasks::Task;

pub const DATASET_FORMAT_VERSION: u32 = 1;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

/// Write `data` with a header row. Floats use the shortest round-trip form.
pub fn write_matrix(path: &Path, header: &[String], data: &Array2<f64>) -> Result<()> {
    if header.len() != data.ncols() {
        return Err(Error::Shape(format!("{} column names for {} columns", header.len(), data.ncols())));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in data.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(|s| s.trim().to_string()).collect();
    let mut flat = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for field in rec.iter() {
            flat.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!("{}: row {} has non-numeric value {field:?}", path.display(), i + 1))
            })?);
        }
        rows += 1;
    }
    let data = Array2::from_shape_vec((rows, header.len()), flat)
        .map_err(|_| Error::Data(format!("{}: ragged rows", path.display())))?;
    Ok((header, data))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Metadata written next to a simulated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub task: Task,
    pub seed: u64,
    pub n: usize,
    pub format_version: u32,
}

impl DatasetMeta {
    pub fn render(&self) -> String {
        format!(
            "format_version={}\ntask={}\nseed={}\nn={}\n",
            self.format_version,
            self.task.name(),
            self.seed,
            self.n
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Data(format!("bad metadata line {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Data(format!("metadata key {k} missing")));
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| Error::Data(format!("metadata key {k} is not an integer")));
        Ok(Self {
            task: Task::parse(get("task")?)?,
            seed: num("seed")?,
            n: num("n")? as usize,
            format_version: num("format_version")? as u32,
        })
    }
}

/// Dataset CSV (`theta_1.., y_1..`) plus its `.meta` sidecar.
pub fn write_dataset(path: &Path, task: Task, seed: u64, data: &Array2<f64>) -> Result<()> {
    write_matrix(path, &task.coordinate_names(), data)?;
    let meta = DatasetMeta { task, seed, n: data.nrows(), format_version: DATASET_FORMAT_VERSION };
    std::fs::write(sidecar_path(path), meta.render())?;
    Ok(())
}
