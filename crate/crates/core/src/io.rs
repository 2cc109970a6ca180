//! On-disk formats: `STEM1` matrices, tempogram exports and model checkpoints.
//!
//! A `STEM1` record is the 5-byte magic `STEM1`, little-endian `u32` rows and
//! cols, then `rows * cols` little-endian `f32` values in row-major order. A
//! checkpoint is a sequence of such records followed by nothing else; the
//! TOML manifest next to it names every record and gives its byte offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 5] = b"STEM1";
const HEADER_BYTES: u64 = 13;

/// Size in bytes of the record holding `rows * cols` values.
pub fn record_bytes(rows: usize, cols: usize) -> u64 {
    HEADER_BYTES + 4 * (rows * cols) as u64
}

pub fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> std::io::Result<()> {
    let (rows, cols) = m.dim();
    let too_big = |n: usize| u32::try_from(n).is_err();
    if too_big(rows) || too_big(cols) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "matrix dimension exceeds u32",
        ));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(4 * rows * cols);
    for v in m.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one record; `path` only labels errors.
pub fn read_matrix<R: Read>(r: &mut R, path: &Path) -> Result<Array2<f64>> {
    let mut header = [0u8; HEADER_BYTES as usize];
    r.read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated STEM1 header"))?;
    if &header[..5] != MAGIC {
        return Err(Error::format(path, "missing STEM1 magic"));
    }
    let rows = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(path, "matrix size overflows"))?;
    let mut payload = vec![0u8; 4 * n];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format(path, format!("truncated payload for {rows}x{cols} matrix")))?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).unwrap())
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_matrix(&mut w, m).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let m = read_matrix(&mut r, path)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(m),
        Ok(_) => Err(Error::format(path, "trailing bytes after STEM1 record")),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// `foo.stem` → `foo.axis.csv`.
pub fn axis_sidecar(path: &Path) -> PathBuf {
    path.with_extension("axis.csv")
}

#[derive(Debug, Serialize, Deserialize)]
struct AxisRow {
    index: usize,
    bpm: f64,
}

pub fn write_axis(path: impl AsRef<Path>, axis: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for (index, &bpm) in axis.iter().enumerate() {
        w.serialize(AxisRow { index, bpm })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_axis(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut axis = Vec::new();
    for (i, row) in r.deserialize::<AxisRow>().enumerate() {
        let row = row?;
        if row.index != i {
            return Err(Error::format(
                path,
                format!("axis row {i} has index {}", row.index),
            ));
        }
        axis.push(row.bpm);
    }
    Ok(axis)
}

/// Writes a `frames × tempo` matrix and its tempo axis sidecar.
pub fn save_tempogram(path: impl AsRef<Path>, values: &Array2<f64>, axis: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if values.ncols() != axis.len() {
        return Err(Error::contract(format!(
            "{} tempo columns but {} axis values",
            values.ncols(),
            axis.len()
        )));
    }
    save_matrix(path, values)?;
    write_axis(axis_sidecar(path), axis)
}

pub fn load_tempogram(path: impl AsRef<Path>) -> Result<(Array2<f64>, Vec<f64>)> {
    let path = path.as_ref();
    let values = load_matrix(path)?;
    let axis = read_axis(axis_sidecar(path))?;
    if values.ncols() != axis.len() {
        return Err(Error::format(
            path,
            format!(
                "{} columns but axis sidecar has {} values",
                values.ncols(),
                axis.len()
            ),
        ));
    }
    Ok((values, axis))
}

/// Long-format CSV `frame,time_s,bpm,value`, one row per cell.
pub fn write_tempogram_csv(
    path: impl AsRef<Path>,
    values: &Array2<f64>,
    axis: &[f64],
    frame_rate: f64,
) -> Result<()> {
    let path = path.as_ref();
    if values.ncols() != axis.len() {
        return Err(Error::contract(
            "tempogram columns and axis differ in length",
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "frame,time_s,bpm,value").map_err(io)?;
    for (f, row) in values.outer_iter().enumerate() {
        let time = f as f64 / frame_rate;
        for (bpm, v) in axis.iter().zip(row.iter()) {
            writeln!(w, "{f},{time},{bpm},{v}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of the record (its magic) within the checkpoint file.
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub epoch: usize,
    pub model: ModelConfig,
    pub optimizer: Option<OptimizerEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: Option<AdamState>,
    pub epoch: usize,
}

/// `model.stem` → `model.toml`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Writes parameters, and optionally the Adam moments, as consecutive
/// records, then the manifest. Values are stored as `f32`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    adam: Option<&AdamState>,
    epoch: usize,
) -> Result<()> {
    let path = path.as_ref();
    let names = ModelParams::names(&params.config);
    let mut records: Vec<(String, &Array2<f64>)> =
        names.iter().cloned().zip(params.tensors.iter()).collect();
    if let Some(a) = adam {
        if a.m.len() != names.len() || a.v.len() != names.len() {
            return Err(Error::contract("optimizer state does not match parameters"));
        }
        records.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(a.m.iter()));
        records.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(a.v.iter()));
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(records.len());
    for (name, m) in records {
        write_matrix(&mut w, m).map_err(|e| Error::io(path, e))?;
        tensors.push(TensorEntry {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
            offset,
        });
        offset += record_bytes(m.nrows(), m.ncols());
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let manifest = CheckpointManifest {
        format: "STEM1".into(),
        epoch,
        model: params.config.clone(),
        optimizer: adam.map(|a| OptimizerEntry {
            step: a.step,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::config(e.to_string()))?;
    let mpath = manifest_path(path);
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != "STEM1" {
        return Err(Error::format(
            &mpath,
            format!("unknown format {}", manifest.format),
        ));
    }
    manifest.model.validate()?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;

    let read_named = |name: &str, shape: (usize, usize)| -> Result<Array2<f64>> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(&mpath, format!("tensor {name} not listed")))?;
        if (entry.rows, entry.cols) != shape {
            return Err(Error::format(
                &mpath,
                format!(
                    "tensor {name} is {}x{}, model expects {}x{}",
                    entry.rows, entry.cols, shape.0, shape.1
                ),
            ));
        }
        let start = usize::try_from(entry.offset)
            .ok()
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| Error::format(path, format!("offset of {name} past end of file")))?;
        let m = read_matrix(&mut &bytes[start..], path)?;
        if m.dim() != shape {
            return Err(Error::format(
                path,
                format!("record {name} disagrees with manifest"),
            ));
        }
        Ok(m)
    };

    let names = ModelParams::names(&manifest.model);
    let shapes = ModelParams::shapes(&manifest.model);
    let tensors = names
        .iter()
        .zip(&shapes)
        .map(|(n, &s)| read_named(n, s))
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(manifest.model.clone(), tensors)?;

    let adam = match manifest.optimizer {
        None => None,
        Some(o) => {
            let moments = |prefix: &str| -> Result<Vec<Array2<f64>>> {
                names
                    .iter()
                    .zip(&shapes)
                    .map(|(n, &s)| read_named(&format!("{prefix}.{n}"), s))
                    .collect()
            };
            Some(AdamState {
                m: moments("adam.m")?,
                v: moments("adam.v")?,
                step: o.step,
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            })
        }
    };
    Ok(Checkpoint {
        params,
        adam,
        epoch: manifest.epoch,
    })
}
