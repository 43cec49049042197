//! Checkpoint files: one JSON header line, then for every tensor (sorted by
//! name) a JSON line `{"name", "shape"}` followed by its little-endian `f32`
//! payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::ModelConfig;
use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const STUDENT: &str = "student.";
const TEACHER: &str = "teacher.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Echo of the training configuration.
    pub config: serde_json::Value,
    pub step: u64,
    pub vocabulary: Vec<String>,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub student: ParamSet<f32>,
    pub teacher: Option<ParamSet<f32>>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_string(&self.header).map_err(|e| bad(path, e.to_string()))?;
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(header.as_bytes())?;
        write(b"\n")?;
        let sets = std::iter::once((STUDENT, &self.student))
            .chain(self.teacher.as_ref().map(|t| (TEACHER, t)));
        for (prefix, set) in sets {
            for (name, t) in set.iter() {
                let rec = TensorRecord {
                    name: format!("{prefix}{name}"),
                    shape: t.shape.clone(),
                };
                let line = serde_json::to_string(&rec).map_err(|e| bad(path, e.to_string()))?;
                write(line.as_bytes())?;
                write(b"\n")?;
                let mut buf = Vec::with_capacity(4 * t.data.len());
                for v in &t.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                write(&buf)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| bad(path, format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(
                path,
                format!("unsupported format version {}", header.format_version),
            ));
        }
        let mut student = ParamSet::new();
        let mut teacher = ParamSet::new();
        loop {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                break;
            }
            let rec: TensorRecord = serde_json::from_str(line.trim_end())
                .map_err(|e| bad(path, format!("tensor record: {e}")))?;
            let count: usize = rec.shape.iter().product();
            let mut bytes = vec![0u8; 4 * count];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(path, format!("truncated payload for {}", rec.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::from_vec(&rec.shape, data)?;
            if let Some(name) = rec.name.strip_prefix(STUDENT) {
                student.insert(name, tensor);
            } else if let Some(name) = rec.name.strip_prefix(TEACHER) {
                teacher.insert(name, tensor);
            } else {
                return Err(bad(path, format!("unexpected tensor {}", rec.name)));
            }
        }
        super::network::check_params(&student, &header.model)
            .map_err(|e| bad(path, format!("student: {e}")))?;
        let teacher = if teacher.is_empty() {
            None
        } else {
            super::network::check_params(&teacher, &header.model)
                .map_err(|e| bad(path, format!("teacher: {e}")))?;
            Some(teacher)
        };
        Ok(Self {
            header,
            student,
            teacher,
        })
    }
}
