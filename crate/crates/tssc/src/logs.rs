//! CSV training logs and evaluation tables.

use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::Serialize;
use tssc_core::engine::{Stage1LogRow, Stage2LogRow};
use tssc_core::metrics::MetricReport;

use crate::error::{Result, TsscError};

fn csv_err(path: &Path, e: csv::Error) -> TsscError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TsscError::io(path, io),
        other => TsscError::format(path, format!("{other:?}")),
    }
}

/// Appends rows to a CSV file, writing the header only when the file is new
/// or empty.
pub struct CsvLog {
    w: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        Self::open(path, false)
    }

    pub fn append(path: &Path) -> Result<Self> {
        Self::open(path, true)
    }

    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| TsscError::io(dir, e))?;
        }
        let fresh = !append || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| TsscError::io(path, e))?;
        let w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            w,
            path: path.to_path_buf(),
        })
    }

    pub fn row<R: Serialize>(&mut self, r: &R) -> Result<()> {
        self.w.serialize(r).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| TsscError::io(&self.path, e))
    }
}

#[derive(Serialize)]
pub struct Stage1Row {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl From<&Stage1LogRow> for Stage1Row {
    fn from(r: &Stage1LogRow) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
        }
    }
}

#[derive(Serialize)]
pub struct Stage2Row {
    pub step: u64,
    pub mse: f64,
    pub wavelet: f64,
    pub tv: f64,
    pub total: f64,
}

impl From<&Stage2LogRow> for Stage2Row {
    fn from(r: &Stage2LogRow) -> Self {
        Self {
            step: r.step,
            mse: r.mse,
            wavelet: r.wavelet,
            tv: r.tv,
            total: r.total,
        }
    }
}

#[derive(Serialize)]
pub struct ValidationRow {
    pub epoch: u64,
    pub mse: f64,
    pub wavelet: f64,
    pub tv: f64,
    pub total: f64,
}

impl From<&Stage2LogRow> for ValidationRow {
    fn from(r: &Stage2LogRow) -> Self {
        Self {
            epoch: r.step,
            mse: r.mse,
            wavelet: r.wavelet,
            tv: r.tv,
            total: r.total,
        }
    }
}

/// Per-case rows, then a `mean±std` summary row.
pub fn write_metrics(report: &MetricReport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| TsscError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let rec = |w: &mut csv::Writer<File>, r: [String; 4]| w.write_record(&r).map_err(|e| csv_err(path, e));
    rec(&mut w, ["case", "mae", "psnr", "ssim"].map(String::from))?;
    for c in &report.cases {
        rec(&mut w, [c.case.clone(), c.mae.to_string(), c.psnr.to_string(), c.ssim.to_string()])?;
    }
    rec(
        &mut w,
        [
            "mean±std".into(),
            report.mae.to_string(),
            report.psnr.to_string(),
            report.ssim.to_string(),
        ],
    )?;
    w.flush().map_err(|e| TsscError::io(path, e))
}
