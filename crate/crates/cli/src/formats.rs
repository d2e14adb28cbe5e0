//! Binary artifacts. Each file starts with an 8-byte magic, a `u32` format
//! version and a `u64` length of the JSON header that follows. Floats are
//! little-endian binary64 throughout.
//!
//! - dataset: payload is trajectory-major, each trajectory's `(K+1) x m`
//!   states then `K x n` measurements.
//! - checkpoint: payload is the parameters in manifest order, then `mu0`,
//!   `Sigma0` (row-major) and the loss history as `(iteration, objective,
//!   lr)` triples; a SHA-256 of every preceding byte closes the file.
//! - samples: payload is `K x N x m` per trajectory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fbf_core::autodiff::{ParameterStore, Tensor};
use fbf_core::model::{FilterModel, ModelConfig, TrainedFilter};
use fbf_core::systems::{Dataset, DatasetMeta, Trajectory};
use fbf_core::training::{LossRecord, TrainConfig};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 8] = b"FBFDATA\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FBFCKPT\0";
pub const SAMPLES_MAGIC: &[u8; 8] = b"FBFSMPL\0";

fn corrupt(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {what}", path.display()))
}

fn preamble(magic: &[u8; 8], header: &impl Serialize) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn f64s_from(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Splits off and checks the preamble; returns the header and the rest.
fn read_preamble<'a, H: DeserializeOwned>(path: &Path, magic: &[u8; 8], bytes: &'a [u8]) -> CliResult<(H, &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[20..];
    if rest.len() < len {
        return Err(corrupt(path, "truncated header"));
    }
    let header = serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(path, format!("header: {e}")))?;
    Ok((header, &rest[len..]))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(io_at(path))
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(io_at(path))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format_version: u32,
    meta: DatasetMeta,
}

/// Floats in a dataset payload: `N ((K+1) m + K n)`.
pub fn dataset_payload_len(meta: &DatasetMeta) -> usize {
    meta.trajectories * ((meta.steps + 1) * meta.state_dim + meta.steps * meta.meas_dim)
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let mut out = preamble(
        DATASET_MAGIC,
        &DatasetHeader {
            format_version: FORMAT_VERSION,
            meta: data.meta.clone(),
        },
    );
    for t in &data.trajectories {
        push_f64s(&mut out, &t.states);
        push_f64s(&mut out, &t.measurements);
    }
    out
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> CliResult<Dataset> {
    let (h, payload): (DatasetHeader, _) = read_preamble(path, DATASET_MAGIC, bytes)?;
    if h.format_version != FORMAT_VERSION {
        return Err(corrupt(path, "header format version mismatch"));
    }
    let meta = h.meta;
    if payload.len() != dataset_payload_len(&meta) * 8 {
        return Err(corrupt(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), dataset_payload_len(&meta) * 8),
        ));
    }
    let values = f64s_from(payload);
    let (m, n, k) = (meta.state_dim, meta.meas_dim, meta.steps);
    let per = (k + 1) * m + k * n;
    let trajectories = values
        .chunks(per)
        .map(|c| Trajectory::new(m, n, c[..(k + 1) * m].to_vec(), c[(k + 1) * m..].to_vec()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| corrupt(path, e))?;
    Ok(Dataset { meta, trajectories })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> CliResult<u64> {
    let bytes = encode_dataset(data);
    write_file(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    decode_dataset(path, &read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: ModelConfig,
    training: TrainConfig,
    manifest: Vec<ManifestEntry>,
    state_dim: usize,
    history_len: usize,
}

pub fn encode_checkpoint(f: &TrainedFilter) -> Vec<u8> {
    let manifest = f
        .params
        .slots()
        .iter()
        .map(|s| ManifestEntry {
            name: s.name.clone(),
            shape: s.value.shape().to_vec(),
            trainable: s.trainable,
        })
        .collect();
    let m = f.mu0.len();
    let mut out = preamble(
        CHECKPOINT_MAGIC,
        &CheckpointHeader {
            model: f.model.config().clone(),
            training: f.train_config.clone(),
            manifest,
            state_dim: m,
            history_len: f.history.len(),
        },
    );
    for s in f.params.slots() {
        push_f64s(&mut out, s.value.data());
    }
    push_f64s(&mut out, f.mu0.as_slice());
    // nalgebra is column-major; the file is row-major
    push_f64s(&mut out, f.sigma0.transpose().as_slice());
    for r in &f.history {
        push_f64s(&mut out, &[r.iteration as f64, r.objective, r.lr]);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> CliResult<TrainedFilter> {
    if bytes.len() < 32 {
        return Err(corrupt(path, "truncated checkpoint"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let (h, payload): (CheckpointHeader, _) = read_preamble(path, CHECKPOINT_MAGIC, body)?;
    let m = h.state_dim;
    let param_len: usize = h.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let expected = param_len + m + m * m + 3 * h.history_len;
    if payload.len() != expected * 8 {
        return Err(corrupt(path, "payload length disagrees with header"));
    }
    let model = FilterModel::new(h.model).map_err(|e| corrupt(path, e))?;
    if model.state_dim() != m {
        return Err(corrupt(path, "state dimension disagrees with model"));
    }
    let values = f64s_from(payload);
    let mut params = ParameterStore::new();
    let mut at = 0;
    for e in &h.manifest {
        let len: usize = e.shape.iter().product();
        let t = Tensor::new(e.shape.clone(), values[at..at + len].to_vec()).map_err(|e| corrupt(path, e))?;
        params.insert(e.name.clone(), t, e.trainable).map_err(|e| corrupt(path, e))?;
        at += len;
    }
    // every parameter the model expects must be present with its shape
    let reference = model.init_params(0).map_err(|e| corrupt(path, e))?;
    for s in reference.slots() {
        match params.get(&s.name) {
            Some(t) if t.shape() == s.value.shape() => {}
            _ => return Err(corrupt(path, format!("parameter `{}` missing or misshapen", s.name))),
        }
    }
    let mu0 = DVector::from_column_slice(&values[at..at + m]);
    at += m;
    let sigma0 = DMatrix::from_row_slice(m, m, &values[at..at + m * m]);
    at += m * m;
    let history = values[at..]
        .chunks_exact(3)
        .map(|c| LossRecord {
            iteration: c[0] as usize,
            objective: c[1],
            lr: c[2],
        })
        .collect();
    Ok(TrainedFilter {
        model,
        params,
        mu0,
        sigma0,
        train_config: h.training,
        history,
    })
}

pub fn save_checkpoint(path: &Path, f: &TrainedFilter) -> CliResult<u64> {
    let bytes = encode_checkpoint(f);
    write_file(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: &Path) -> CliResult<TrainedFilter> {
    decode_checkpoint(path, &read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesHeader {
    pub format_version: u32,
    /// `fbf`, `fbf_prime` or `pf`.
    pub method: String,
    /// Dataset index of the first trajectory covered.
    pub first_trajectory: usize,
    pub trajectories: usize,
    pub steps: usize,
    pub samples: usize,
    pub state_dim: usize,
    pub seed: u64,
}

impl SamplesHeader {
    pub fn per_trajectory(&self) -> usize {
        self.steps * self.samples * self.state_dim
    }
}

/// Streams one trajectory's samples at a time.
pub struct SampleWriter {
    path: std::path::PathBuf,
    out: BufWriter<File>,
    header: SamplesHeader,
    written: usize,
}

impl SampleWriter {
    pub fn create(path: &Path, header: SamplesHeader) -> CliResult<Self> {
        let mut out = BufWriter::new(File::create(path).map_err(io_at(path))?);
        out.write_all(&preamble(SAMPLES_MAGIC, &header)).map_err(io_at(path))?;
        Ok(SampleWriter {
            path: path.to_path_buf(),
            out,
            header,
            written: 0,
        })
    }

    pub fn write_trajectory(&mut self, values: &[f64]) -> CliResult<()> {
        if values.len() != self.header.per_trajectory() || self.written == self.header.trajectories {
            return Err(CliError::Config(format!(
                "{}: sample block of {} values does not fit the header",
                self.path.display(),
                values.len()
            )));
        }
        let mut buf = Vec::new();
        push_f64s(&mut buf, values);
        self.out.write_all(&buf).map_err(io_at(&self.path))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        if self.written != self.header.trajectories {
            return Err(corrupt(&self.path, "fewer trajectories written than declared"));
        }
        self.out.flush().map_err(io_at(&self.path))
    }
}

pub struct SampleReader {
    path: std::path::PathBuf,
    input: BufReader<File>,
    pub header: SamplesHeader,
    read: usize,
}

impl SampleReader {
    pub fn open(path: &Path) -> CliResult<Self> {
        let mut input = BufReader::new(File::open(path).map_err(io_at(path))?);
        let mut pre = [0u8; 20];
        input.read_exact(&mut pre).map_err(|_| corrupt(path, "truncated preamble"))?;
        let len = u64::from_le_bytes(pre[12..20].try_into().expect("8 bytes")) as usize;
        let mut head = pre.to_vec();
        head.resize(20 + len, 0);
        input.read_exact(&mut head[20..]).map_err(|_| corrupt(path, "truncated header"))?;
        let (header, _): (SamplesHeader, _) = read_preamble(path, SAMPLES_MAGIC, &head)?;
        let size = std::fs::metadata(path).map_err(io_at(path))?.len() as usize;
        if size != 20 + len + header.trajectories * header.per_trajectory() * 8 {
            return Err(corrupt(path, "payload length disagrees with header"));
        }
        Ok(SampleReader {
            path: path.to_path_buf(),
            input,
            header,
            read: 0,
        })
    }

    /// The next trajectory's `K x N x m` block, or `None` at the end.
    pub fn next_trajectory(&mut self) -> CliResult<Option<Vec<f64>>> {
        if self.read == self.header.trajectories {
            return Ok(None);
        }
        let mut buf = vec![0u8; self.header.per_trajectory() * 8];
        self.input.read_exact(&mut buf).map_err(io_at(&self.path))?;
        self.read += 1;
        Ok(Some(f64s_from(&buf)))
    }
}
