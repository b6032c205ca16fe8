//! Parameter checkpoints: a text header describing each tensor, then raw
//! little-endian buffers. Values round-trip bit-exactly because they are
//! never formatted as text.
//!
//! Layout:
//! ```text
//! tensors <count>
//! <name> <dtype> <dims, comma separated, or "-" for rank 0> <byte offset>
//! ...
//! data
//! <payload>
//! ```
//! Offsets are relative to the first payload byte.

use super::{Tensor, TensorError};
use crate::scalar::Scalar;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("checkpoint entry {name}: dtype {found} does not match expected {expected}")]
    Dtype {
        name: String,
        found: String,
        expected: &'static str,
    },
    #[error("checkpoint entry {name}: payload out of bounds")]
    Truncated { name: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn dims_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn parse_dims(s: &str, line: usize) -> Result<Vec<usize>, CheckpointError> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|d| {
            d.parse::<usize>().map_err(|_| CheckpointError::Malformed {
                line,
                msg: format!("bad dimension {d:?}"),
            })
        })
        .collect()
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    entries: &[(String, &Tensor<T>)],
) -> Result<(), CheckpointError> {
    let mut header = format!("tensors {}\n", entries.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in entries {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
            return Err(CheckpointError::Malformed {
                line: 0,
                msg: format!("tensor name {name:?} must be non-empty without whitespace"),
            });
        }
        header.push_str(&format!(
            "{} {} {} {}\n",
            name,
            T::DTYPE,
            dims_string(tensor.shape()),
            payload.len()
        ));
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
    }
    header.push_str("data\n");
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut line_no = 0;
    let next_line = |pos: &mut usize, line_no: &mut usize| -> Result<String, CheckpointError> {
        *line_no += 1;
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or(CheckpointError::Malformed {
                line: *line_no,
                msg: "unterminated header".into(),
            })?;
        *pos = end + 1;
        String::from_utf8(bytes[start..end].to_vec()).map_err(|_| CheckpointError::Malformed {
            line: *line_no,
            msg: "header is not UTF-8".into(),
        })
    };

    let first = next_line(&mut pos, &mut line_no)?;
    let count: usize = first
        .strip_prefix("tensors ")
        .and_then(|n| n.parse().ok())
        .ok_or(CheckpointError::Malformed {
            line: line_no,
            msg: format!("expected \"tensors <count>\", got {first:?}"),
        })?;

    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&mut pos, &mut line_no)?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 4 {
            return Err(CheckpointError::Malformed {
                line: line_no,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let name = fields[0].to_string();
        if fields[1] != T::DTYPE {
            return Err(CheckpointError::Dtype {
                name,
                found: fields[1].to_string(),
                expected: T::DTYPE,
            });
        }
        let shape = parse_dims(fields[2], line_no)?;
        let offset: usize = fields[3].parse().map_err(|_| CheckpointError::Malformed {
            line: line_no,
            msg: format!("bad offset {:?}", fields[3]),
        })?;
        specs.push((name, shape, offset));
    }

    let data_line = next_line(&mut pos, &mut line_no)?;
    if data_line != "data" {
        return Err(CheckpointError::Malformed {
            line: line_no,
            msg: format!("expected \"data\", got {data_line:?}"),
        });
    }
    let payload = &bytes[pos..];

    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in specs {
        let numel: usize = shape.iter().product();
        let nbytes = numel * T::WIDTH;
        let end = offset.checked_add(nbytes).filter(|&e| e <= payload.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { name });
        };
        let mut values = Vec::with_capacity(numel);
        for chunk in payload[offset..end].chunks_exact(T::WIDTH) {
            values.push(T::read_le(chunk));
        }
        out.push((name, Tensor::from_vec(shape, values)?));
    }
    Ok(out)
}
