use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::step::Phase;
use crate::error::{Error, Result};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        phase: Phase,
        lr: f64,
        sup: f64,
        unsup: f64,
        itcl_sup: f64,
        itcl_unsup: f64,
        total: f64,
        n_mixed: usize,
    },
    Val {
        epoch: usize,
        step: u64,
        val_dice: f64,
        val_miou: f64,
    },
}

/// Line-delimited JSON writer, flushed after every record.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    timestamps: bool,
}

impl MetricsLog {
    pub fn create(path: &Path, timestamps: bool) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            timestamps,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        let mut value = serde_json::to_value(record).map_err(|e| Error::Json {
            path: self.path.clone(),
            source: e,
        })?;
        if self.timestamps {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0);
            value["time"] = serde_json::json!(secs);
        }
        let io = |e| Error::io(&self.path, e);
        writeln!(self.out, "{value}").map_err(io)?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a metrics log back, ignoring any timestamp fields.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("time");
            }
            serde_json::from_value(v).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })
        })
        .collect()
}
