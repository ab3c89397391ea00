//! On-disk formats: checkpoints, sample/loss/histogram CSVs and the run
//! manifest.
//!
//! A checkpoint is the 8-byte magic `EDGCKPT1`, a little-endian `u64`
//! header length, a JSON header, then every array named in the header as
//! little-endian `f64`s in header order.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use edg_core::eval::Histogram2d;
use edg_core::loss::TimeProposal;
use edg_core::model::{ModelParams, ModelSpec};
use edg_core::params::{ParamVector, Segment};
use edg_core::train::{AdamState, Checkpoint, LossRecord, RngState, TrainConfig};
use edg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{RunError, RunResult};

const MAGIC: &[u8; 8] = b"EDGCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
    /// Parameter layout; empty for optimiser moments.
    #[serde(default)]
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    experiment: ExperimentConfig,
    config_digest: String,
    spec: ModelSpec,
    train: TrainConfig,
    step: usize,
    rng: RngState,
    proposal: Option<TimeProposal>,
    adam_steps: [u64; 2],
    arrays: Vec<ArrayEntry>,
}

/// Write `header` and `arrays` in the checkpoint container, via a
/// temporary file so a crash never leaves a truncated file behind.
pub fn write_container<H: Serialize>(path: &Path, header: &H, arrays: &[&[f64]]) -> RunResult<()> {
    let json = serde_json::to_vec(header).map_err(|e| RunError::format(path, e))?;
    let tmp = path.with_extension("tmp");
    let io = |e| RunError::io(&tmp, e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for a in arrays {
            for v in *a {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| RunError::io(path, e))
}

/// Header bytes and the flat `f64` payload.
pub fn read_container(path: &Path) -> RunResult<(Vec<u8>, Vec<f64>)> {
    let io = |e| RunError::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(RunError::format(path, "not a checkpoint file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if rest.len() % 8 != 0 {
        return Err(RunError::format(path, "payload is not a whole number of f64s"));
    }
    let data = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, data))
}

pub fn save_checkpoint(path: &Path, experiment: &ExperimentConfig, cp: &Checkpoint) -> RunResult<()> {
    let entry = |name: &str, p: &ParamVector| ArrayEntry {
        name: name.into(),
        len: p.len(),
        segments: p.layout().to_vec(),
    };
    let moment = |name: &str, v: &[f64]| ArrayEntry {
        name: name.into(),
        len: v.len(),
        segments: Vec::new(),
    };
    let header = CheckpointHeader {
        experiment: experiment.clone(),
        config_digest: cp.config_digest.clone(),
        spec: cp.spec.clone(),
        train: cp.config.clone(),
        step: cp.step,
        rng: cp.rng.clone(),
        proposal: cp.proposal.clone(),
        adam_steps: [cp.adam_decoder.t, cp.adam_encoder.t],
        arrays: vec![
            entry("decoder", &cp.params.decoder),
            entry("encoder", &cp.params.encoder),
            moment("adam_decoder.m", &cp.adam_decoder.m),
            moment("adam_decoder.v", &cp.adam_decoder.v),
            moment("adam_encoder.m", &cp.adam_encoder.m),
            moment("adam_encoder.v", &cp.adam_encoder.v),
        ],
    };
    write_container(
        path,
        &header,
        &[
            cp.params.decoder.values(),
            cp.params.encoder.values(),
            &cp.adam_decoder.m,
            &cp.adam_decoder.v,
            &cp.adam_encoder.m,
            &cp.adam_encoder.v,
        ],
    )
}

pub fn load_checkpoint(path: &Path) -> RunResult<(ExperimentConfig, Checkpoint)> {
    let (bytes, data) = read_container(path)?;
    let h: CheckpointHeader =
        serde_json::from_slice(&bytes).map_err(|e| RunError::format(path, e))?;
    let total: usize = h.arrays.iter().map(|a| a.len).sum();
    if total != data.len() {
        return Err(RunError::format(
            path,
            format!("header lists {total} values, payload has {}", data.len()),
        ));
    }
    let mut arrays = BTreeMap::new();
    let mut at = 0;
    for a in &h.arrays {
        arrays.insert(a.name.as_str(), (a, &data[at..at + a.len]));
        at += a.len;
    }
    let get = |name: &str| {
        arrays
            .get(name)
            .copied()
            .ok_or_else(|| RunError::format(path, format!("missing array {name}")))
    };
    let params = |name: &str| -> RunResult<ParamVector> {
        let (entry, values) = get(name)?;
        Ok(ParamVector::from_parts(values.to_vec(), entry.segments.clone())?)
    };
    let adam = |name: &str, t: u64| -> RunResult<AdamState> {
        Ok(AdamState {
            m: get(&format!("{name}.m"))?.1.to_vec(),
            v: get(&format!("{name}.v"))?.1.to_vec(),
            t,
        })
    };
    let cp = Checkpoint {
        spec: h.spec,
        config: h.train,
        params: ModelParams {
            decoder: params("decoder")?,
            encoder: params("encoder")?,
        },
        adam_decoder: adam("adam_decoder", h.adam_steps[0])?,
        adam_encoder: adam("adam_encoder", h.adam_steps[1])?,
        proposal: h.proposal,
        step: h.step,
        rng: h.rng,
        config_digest: h.config_digest,
    };
    Ok((h.experiment, cp))
}

pub fn create_csv(path: &Path) -> RunResult<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
        }
    }
    csv::Writer::from_path(path).map_err(|e| RunError::format(path, e))
}

/// `step,recon,score_term,total`.
pub struct LossCsv {
    path: PathBuf,
    w: csv::Writer<File>,
}

impl LossCsv {
    pub fn create(path: &Path) -> RunResult<Self> {
        let mut w = create_csv(path)?;
        w.write_record(["step", "recon", "score_term", "total"])
            .map_err(|e| RunError::format(path, e))?;
        Ok(LossCsv {
            path: path.to_path_buf(),
            w,
        })
    }

    pub fn push(&mut self, r: &LossRecord) -> RunResult<()> {
        self.w
            .write_record([
                r.step.to_string(),
                r.recon.to_string(),
                r.score_term.to_string(),
                r.total.to_string(),
            ])
            .map_err(|e| RunError::format(&self.path, e))
    }

    pub fn flush(&mut self) -> RunResult<()> {
        self.w.flush().map_err(|e| RunError::io(&self.path, e))
    }
}

pub fn read_loss_csv(path: &Path) -> RunResult<Vec<LossRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| RunError::format(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| RunError::format(path, e)))
        .collect()
}

/// Rows of the `x_*` columns of a sample CSV, in column order.
pub fn read_sample_matrix(path: &Path) -> RunResult<Tensor> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| RunError::format(path, e))?;
    let headers = rdr.headers().map_err(|e| RunError::format(path, e))?.clone();
    let mut cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("x_")?.parse().ok().map(|k: usize| (k, i)))
        .collect();
    cols.sort_unstable();
    if cols.is_empty() || cols.iter().enumerate().any(|(k, &(c, _))| c != k) {
        return Err(RunError::format(path, "expected columns x_0, x_1, …"));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| RunError::format(path, e))?;
        for &(_, i) in &cols {
            let f = rec.get(i).unwrap_or("");
            let v: f64 = f.parse().map_err(|_| {
                RunError::format(path, format!("row {}: {f:?} is not a number", line + 2))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Tensor::from_vec(rows, cols.len(), data))
}

/// Plain sample matrix with `x_0..x_{d−1}` headers.
pub fn write_sample_matrix(path: &Path, x: &Tensor) -> RunResult<()> {
    let mut w = create_csv(path)?;
    let err = |e: csv::Error| RunError::format(path, e);
    w.write_record((0..x.cols()).map(|j| format!("x_{j}"))).map_err(err)?;
    for i in 0..x.rows() {
        w.write_record(x.row(i).iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| RunError::io(path, e))
}

/// One row per cell in row-major order:
/// `ix,iy,x_lo,x_hi,y_lo,y_hi,count`.
pub fn write_histogram(path: &Path, h: &Histogram2d) -> RunResult<()> {
    let mut w = create_csv(path)?;
    let err = |e: csv::Error| RunError::format(path, e);
    w.write_record(["ix", "iy", "x_lo", "x_hi", "y_lo", "y_hi", "count"])
        .map_err(err)?;
    let edge = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / h.bins as f64;
    for i in 0..h.bins {
        for j in 0..h.bins {
            w.write_record([
                i.to_string(),
                j.to_string(),
                edge(h.bounds[0], i).to_string(),
                edge(h.bounds[0], i + 1).to_string(),
                edge(h.bounds[1], j).to_string(),
                edge(h.bounds[1], j + 1).to_string(),
                h.counts[i * h.bins + j].to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| RunError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> RunResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RunError::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
    /// Files written, relative to the output directory when inside it.
    pub files: Vec<String>,
    pub summary: serde_json::Value,
    /// Wall-clock time; the only field that differs between reruns.
    pub elapsed_seconds: f64,
}

/// `manifest.json` in an output directory, one entry per subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn update(dir: &Path, command: &str, entry: ManifestEntry) -> RunResult<()> {
        let path = dir.join("manifest.json");
        let mut m: Manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
            Err(_) => Manifest::default(),
        };
        m.version = env!("CARGO_PKG_VERSION").into();
        m.entries.insert(command.into(), entry);
        write_json(&path, &m)
    }
}
