//! Deterministic CSV emission for result tables.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Thin wrapper over a CSV writer that remembers its path for error reports.
pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<CsvOut> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        let mut writer = csv::WriterBuilder::new().from_writer(BufWriter::new(file));
        writer.write_record(header).map_err(|e| wrap(&path, e))?;
        Ok(CsvOut { path, writer })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        self.writer.write_record(fields.iter().map(|f| f.as_ref())).map_err(|e| wrap(&self.path, e))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush().map_err(|e| Error::Io { path: self.path.display().to_string(), source: e })?;
        Ok(self.path)
    }
}

fn wrap(path: &Path, e: csv::Error) -> Error {
    Error::Csv { path: path.display().to_string(), message: e.to_string() }
}

/// Formats a float for output; NaN becomes `NA`.
pub fn fmt(x: f64) -> String {
    if x.is_nan() {
        "NA".to_string()
    } else {
        x.to_string()
    }
}
