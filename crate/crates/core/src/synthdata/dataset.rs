//! On-disk dataset formats.
//!
//! - Trace: little-endian binary. `"NSPT"`, version `u16`, channel count
//!   `u16`, sample rate `u32`, sample count `u64`, then sample-major
//!   interleaved `i8` frames.
//! - Labels: JSON lines `{"t":u64,"ch":u16,"nid":u8}`.
//! - Reach session: CSV `bin,vx,vy,c0,c1,...` plus a JSON sidecar (same stem,
//!   `.json`) holding bin width, seed, trials and neuron tuning.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GroundTruthLabels, LabelEvent, RawTrace, ReachBin, ReachSession, SessionNeuron, Trial};

pub const TRACE_MAGIC: &[u8; 4] = b"NSPT";
pub const TRACE_FORMAT_VERSION: u16 = 1;
const SESSION_FORMAT_VERSION: u16 = 1;
const TRACE_HEADER_LEN: usize = 4 + 2 + 2 + 4 + 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot infer dataset kind from {0}")]
    UnknownKind(PathBuf),
}

impl DatasetError {
    fn io(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
        move |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Any of the three persisted dataset kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Trace(RawTrace),
    Labels(GroundTruthLabels),
    Session(ReachSession),
}

/// Writes by variant. Sessions also write their sidecar next to `path`.
pub fn store_dataset(path: &Path, data: &Dataset) -> Result<(), DatasetError> {
    match data {
        Dataset::Trace(t) => store_trace(path, t),
        Dataset::Labels(l) => store_labels(path, l),
        Dataset::Session(s) => store_session(path, s),
    }
}

/// Reads by extension: `.nspt` trace, `.jsonl` labels, `.csv` session.
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nspt") => load_trace(path).map(Dataset::Trace),
        Some("jsonl") => load_labels(path).map(Dataset::Labels),
        Some("csv") => load_session(path).map(Dataset::Session),
        _ => Err(DatasetError::UnknownKind(path.to_path_buf())),
    }
}

pub fn write_trace(w: &mut impl Write, trace: &RawTrace) -> io::Result<()> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(trace.n_channels() as u16).to_le_bytes())?;
    w.write_all(&trace.sample_rate.to_le_bytes())?;
    w.write_all(&(trace.n_samples() as u64).to_le_bytes())?;
    let mut frame = vec![0u8; trace.n_channels()];
    for t in 0..trace.n_samples() {
        for (dst, ch) in frame.iter_mut().zip(trace.channels()) {
            *dst = ch[t] as u8;
        }
        w.write_all(&frame)?;
    }
    Ok(())
}

pub fn read_trace(bytes: &[u8]) -> Result<RawTrace, DatasetError> {
    if bytes.len() < TRACE_HEADER_LEN {
        return Err(DatasetError::Header(format!(
            "{} bytes is shorter than the {TRACE_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != TRACE_MAGIC {
        return Err(DatasetError::Header(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TRACE_FORMAT_VERSION {
        return Err(DatasetError::Version {
            expected: TRACE_FORMAT_VERSION,
            found: version,
        });
    }
    let n_channels = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let sample_rate = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let n_samples = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload = &bytes[TRACE_HEADER_LEN..];
    let expected = n_samples
        .checked_mul(n_channels as u64)
        .ok_or_else(|| DatasetError::Header("sample count overflows".into()))?;
    if (payload.len() as u64) < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(DatasetError::Header(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - expected
        )));
    }
    let n_samples = n_samples as usize;
    let mut channels = vec![Vec::with_capacity(n_samples); n_channels];
    if n_channels > 0 {
        for frame in payload.chunks_exact(n_channels) {
            for (ch, &b) in channels.iter_mut().zip(frame) {
                ch.push(b as i8);
            }
        }
    }
    Ok(RawTrace {
        sample_rate,
        channels,
    })
}

pub fn store_trace(path: &Path, trace: &RawTrace) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(DatasetError::io(path))?;
    let mut w = BufWriter::new(file);
    write_trace(&mut w, trace)
        .and_then(|_| w.flush())
        .map_err(DatasetError::io(path))
}

pub fn load_trace(path: &Path) -> Result<RawTrace, DatasetError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(DatasetError::io(path))?;
    read_trace(&bytes)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(w: &mut impl Write, items: &[T]) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads one JSON object per non-empty line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn store_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(DatasetError::io(path))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, items)
        .and_then(|_| w.flush())
        .map_err(DatasetError::io(path))
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(DatasetError::io(path))?;
    read_jsonl(BufReader::new(file))
}

pub fn store_labels(path: &Path, labels: &GroundTruthLabels) -> Result<(), DatasetError> {
    store_jsonl(path, &labels.events)
}

pub fn load_labels(path: &Path) -> Result<GroundTruthLabels, DatasetError> {
    let events: Vec<LabelEvent> = load_jsonl(path)?;
    Ok(GroundTruthLabels { events })
}

#[derive(Serialize, Deserialize)]
struct SessionSidecar {
    version: u16,
    bin_ms: u32,
    seed: u64,
    trials: Vec<Trial>,
    neurons: Vec<SessionNeuron>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_session_csv(w: &mut impl Write, session: &ReachSession) -> io::Result<()> {
    write!(w, "bin,vx,vy")?;
    for i in 0..session.n_neurons() {
        write!(w, ",c{i}")?;
    }
    writeln!(w)?;
    for b in &session.bins {
        // `{}` on f64 prints the shortest string that parses back exactly.
        write!(w, "{},{},{}", b.bin, b.vx, b.vy)?;
        for c in &b.counts {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn parse_session_csv(r: impl BufRead, n_neurons: usize) -> Result<Vec<ReachBin>, DatasetError> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        _ => return Err(DatasetError::Header("empty session CSV".into())),
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[..3] != ["bin", "vx", "vy"] || cols.len() != 3 + n_neurons {
        return Err(DatasetError::Header(format!(
            "session CSV header {header:?} does not match {n_neurons} neurons"
        )));
    }
    let mut bins = Vec::new();
    for (i, line) in lines {
        let parse_err = |message: String| DatasetError::Parse {
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(format!(
                "{} fields, expected {}",
                fields.len(),
                cols.len()
            )));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("{s:?}: {e}")));
        let bin = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(e.to_string()))?;
        let counts = fields[3..]
            .iter()
            .map(|s| s.parse::<u32>().map_err(|e| parse_err(format!("{s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        bins.push(ReachBin {
            bin,
            vx: num(fields[1])?,
            vy: num(fields[2])?,
            counts,
        });
    }
    Ok(bins)
}

pub fn store_session(path: &Path, session: &ReachSession) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(DatasetError::io(path))?;
    let mut w = BufWriter::new(file);
    write_session_csv(&mut w, session)
        .and_then(|_| w.flush())
        .map_err(DatasetError::io(path))?;
    let side = sidecar_path(path);
    std::fs::write(&side, session_sidecar_json(session)).map_err(DatasetError::io(&side))
}

/// Contents of a session's JSON sidecar.
pub fn session_sidecar_json(session: &ReachSession) -> Vec<u8> {
    let sidecar = SessionSidecar {
        version: SESSION_FORMAT_VERSION,
        bin_ms: session.bin_ms,
        seed: session.seed,
        trials: session.trials.clone(),
        neurons: session.neurons.clone(),
    };
    serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes")
}

pub fn load_session(path: &Path) -> Result<ReachSession, DatasetError> {
    let side = sidecar_path(path);
    let raw = std::fs::read(&side).map_err(DatasetError::io(&side))?;
    let sidecar: SessionSidecar =
        serde_json::from_slice(&raw).map_err(|e| DatasetError::Header(e.to_string()))?;
    if sidecar.version != SESSION_FORMAT_VERSION {
        return Err(DatasetError::Version {
            expected: SESSION_FORMAT_VERSION,
            found: sidecar.version,
        });
    }
    let file = File::open(path).map_err(DatasetError::io(path))?;
    let bins = parse_session_csv(BufReader::new(file), sidecar.neurons.len())?;
    Ok(ReachSession {
        bin_ms: sidecar.bin_ms,
        seed: sidecar.seed,
        bins,
        trials: sidecar.trials,
        neurons: sidecar.neurons,
    })
}
