//! `report`: one JSON + CSV bundle over every artifact in a directory.
//!
//! Artifacts are found through their provenance sidecars. Footprints and
//! operation counts are recomputed from the models and compared with what
//! the artifacts state; any disagreement fails the report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use nsp_core::decode::{count_ops, DecoderModel};
use nsp_core::sim::SimCounters;

use crate::commands::{
    load_json, load_models, op_rows, sorter_footprint, sorter_kind, DecodeMetrics, OpRow, SortEvalRow,
};
use crate::error::CliError;
use crate::output::{content_hash, sha256_hex, ArtifactKind, Inputs, Outputs, Provenance, PROV_SUFFIX};
use crate::ReportArgs;

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    name: String,
    kind: ArtifactKind,
    command: String,
    seed: Option<u64>,
    config_hash: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct ReportProvenance {
    tool: String,
    version: String,
    /// Hash over the names and contents of all reported artifacts.
    config_hash: String,
    seeds: Vec<u64>,
    artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Serialize)]
struct SortingSummary {
    mode: String,
    channels: usize,
    matched: usize,
    mean_accuracy: f64,
    outliers: usize,
}

#[derive(Debug, Serialize)]
struct FootprintSummary {
    mode: String,
    channels: usize,
    bits_per_channel: Option<u32>,
    total_bits: Option<u64>,
}

#[derive(Debug, Serialize)]
struct SimSummary {
    cycles: u64,
    detections: u64,
    sorts: u64,
    decoder_accepts: u64,
    decoder_collisions: u64,
    tokens_lost: u64,
    max_stall: u64,
    input_bits: u64,
    output_bits: u64,
    data_rate_ratio: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    provenance: ReportProvenance,
    sorting: BTreeMap<String, SortingSummary>,
    footprints: BTreeMap<String, FootprintSummary>,
    op_counts: BTreeMap<String, Vec<OpRow>>,
    reconstruction: BTreeMap<String, DecodeMetrics>,
    simulation: BTreeMap<String, SimSummary>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    section: &'a str,
    artifact: &'a str,
    key: String,
    value: String,
}

fn scan(dir: &Path, report_name: &str) -> Result<Vec<(String, PathBuf, Provenance)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut found = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(PROV_SUFFIX)) else {
            continue;
        };
        let name = name.to_string();
        let prov: Provenance = load_json(&p)?;
        let own = name == format!("{report_name}.json") || name == format!("{report_name}.csv");
        if prov.kind == ArtifactKind::Report || own {
            continue;
        }
        found.push((name.clone(), dir.join(&name), prov));
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::schema(path, e))
}

/// The input of `prov` that is an artifact of `kind` in this directory.
fn input_of<'a>(
    prov: &Provenance,
    kind: ArtifactKind,
    all: &'a [(String, PathBuf, Provenance)],
) -> Option<&'a (String, PathBuf, Provenance)> {
    all.iter().find(|(n, _, p)| p.kind == kind && prov.inputs.contains_key(n))
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    if !a.dir.is_dir() {
        return Err(CliError::io(&a.dir, "not a directory"));
    }
    let artifacts = scan(&a.dir, &a.name)?;
    if artifacts.is_empty() {
        return Err(CliError::io(&a.dir, "no artifacts to report"));
    }

    let mut sorting = BTreeMap::new();
    let mut footprints = BTreeMap::new();
    let mut op_counts = BTreeMap::new();
    let mut reconstruction = BTreeMap::new();
    let mut simulation = BTreeMap::new();
    let mut entries = Vec::new();
    let mut inputs = Inputs::default();

    for (name, path, prov) in &artifacts {
        if !path.exists() {
            return Err(CliError::io(path, "listed by its provenance file but missing"));
        }
        inputs.add(path)?;
        entries.push(ArtifactEntry {
            name: name.clone(),
            kind: prov.kind,
            command: prov.command.clone(),
            seed: prov.seed,
            config_hash: prov.config_hash.clone(),
            sha256: content_hash(path)?,
        });
        match prov.kind {
            ArtifactKind::SorterModels => {
                let models = load_models(path)?;
                let modes: BTreeSet<&str> = models.iter().map(|m| sorter_kind(&m.sorter)).collect();
                let bits: Vec<u32> = models.iter().filter_map(|m| sorter_footprint(&m.sorter)).collect();
                let uniform = bits.first().copied().filter(|b| bits.iter().all(|x| x == b));
                footprints.insert(
                    name.clone(),
                    FootprintSummary {
                        mode: modes.into_iter().collect::<Vec<_>>().join("+"),
                        channels: models.len(),
                        bits_per_channel: uniform,
                        total_bits: (!bits.is_empty()).then(|| bits.iter().map(|&b| b as u64).sum()),
                    },
                );
            }
            ArtifactKind::SortEval => {
                let rows: Vec<SortEvalRow> = read_csv(path)?;
                if let Some((_, mpath, _)) = input_of(prov, ArtifactKind::SorterModels, &artifacts) {
                    let models = load_models(mpath)?;
                    for r in rows.iter().filter(|r| r.channel != "all") {
                        let m = models.iter().find(|m| m.channel.to_string() == r.channel);
                        let expected = m.and_then(|m| sorter_footprint(&m.sorter));
                        if m.is_none() || expected != r.footprint_bits {
                            return Err(CliError::schema(
                                path,
                                format!("channel {} footprint {:?} disagrees with its model", r.channel, r.footprint_bits),
                            ));
                        }
                    }
                }
                let per: Vec<&SortEvalRow> = rows.iter().filter(|r| r.channel != "all").collect();
                let modes: BTreeSet<&str> = per.iter().map(|r| r.mode.as_str()).collect();
                sorting.insert(
                    name.clone(),
                    SortingSummary {
                        mode: modes.into_iter().collect::<Vec<_>>().join("+"),
                        channels: per.len(),
                        matched: per.iter().map(|r| r.matched).sum(),
                        mean_accuracy: per.iter().map(|r| r.accuracy).sum::<f64>() / per.len().max(1) as f64,
                        outliers: per.iter().map(|r| r.outliers).sum(),
                    },
                );
            }
            ArtifactKind::OpCounts => {
                let rows: Vec<OpRow> = read_csv(path)?;
                let configs: BTreeSet<_> = rows
                    .iter()
                    .map(|r| (r.filter, r.neurons, r.state_dim, r.method))
                    .collect();
                let mut expected = Vec::new();
                for (f, n, d, m) in configs {
                    expected.extend(op_rows(f, n, d, m)?);
                }
                let mut got = rows.clone();
                let key = |r: &OpRow| (r.filter, r.neurons, r.state_dim, r.method, r.row.clone());
                got.sort_by_key(key);
                expected.sort_by_key(key);
                if got != expected {
                    return Err(CliError::Numerical(format!(
                        "{name}: operation counts differ from the instrumented counters"
                    )));
                }
                op_counts.insert(name.clone(), rows);
            }
            ArtifactKind::DecodeMetrics => {
                let m: DecodeMetrics = load_json(path)?;
                if let Some((_, dpath, _)) = input_of(prov, ArtifactKind::DecoderModel, &artifacts) {
                    let model: DecoderModel = load_json(dpath)?;
                    let step = count_ops(model.kind, model.selected.len(), model.state_dim())?.total();
                    let per = &m.ops_per_step;
                    if (per.mult, per.add, per.div) != (step.mult as f64, step.add as f64, step.div as f64) {
                        return Err(CliError::Numerical(format!(
                            "{name}: per-step operations differ from the instrumented counters"
                        )));
                    }
                }
                reconstruction.insert(name.clone(), m);
            }
            ArtifactKind::SimCounters => {
                let c: SimCounters = load_json(path)?;
                simulation.insert(
                    name.clone(),
                    SimSummary {
                        cycles: c.cycles,
                        detections: c.detections,
                        sorts: c.sorts,
                        decoder_accepts: c.decoder_accepts,
                        decoder_collisions: c.decoder_collisions,
                        tokens_lost: c.tokens_lost,
                        max_stall: c.max_stall,
                        input_bits: c.input_bits,
                        output_bits: c.output_bits,
                        data_rate_ratio: c.data_rate_ratio(),
                    },
                );
            }
            _ => {}
        }
    }

    let mut h = String::new();
    for e in &entries {
        h.push_str(&e.name);
        h.push('\0');
        h.push_str(&e.sha256);
        h.push('\n');
    }
    let seeds: BTreeSet<u64> = entries.iter().filter_map(|e| e.seed).collect();
    let report = Report {
        provenance: ReportProvenance {
            tool: "nsp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: sha256_hex(h.as_bytes()),
            seeds: seeds.into_iter().collect(),
            artifacts: entries,
        },
        sorting,
        footprints,
        op_counts,
        reconstruction,
        simulation,
    };

    let mut rows = Vec::new();
    let mut push = |section: &'static str, artifact: &str, key: &str, value: String| {
        rows.push((section, artifact.to_string(), key.to_string(), value));
    };
    for (n, s) in &report.sorting {
        push("sorting", n, "mode", s.mode.clone());
        push("sorting", n, "mean_accuracy", s.mean_accuracy.to_string());
        push("sorting", n, "channels", s.channels.to_string());
    }
    for (n, f) in &report.footprints {
        push("footprint", n, "mode", f.mode.clone());
        push("footprint", n, "bits_per_channel", f.bits_per_channel.map(|b| b.to_string()).unwrap_or_default());
    }
    for (n, rs) in &report.op_counts {
        for r in rs.iter().filter(|r| r.row == "total") {
            let f = serde_json::to_value(r.filter).expect("enum serializes");
            let k = format!("{}_n{}_total", f.as_str().unwrap_or_default(), r.neurons);
            push("op_counts", n, &k, format!("{}/{}/{}", r.mult, r.add, r.div));
        }
    }
    for (n, m) in &report.reconstruction {
        push("reconstruction", n, "mse", m.mse.to_string());
        push("reconstruction", n, "direction_variance", m.direction_variance.to_string());
    }
    for (n, s) in &report.simulation {
        push("simulation", n, "tokens_lost", s.tokens_lost.to_string());
        push("simulation", n, "max_stall", s.max_stall.to_string());
        push("simulation", n, "data_rate_ratio", s.data_rate_ratio.to_string());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for (section, artifact, key, value) in &rows {
        w.serialize(CsvRow { section, artifact, key: key.clone(), value: value.clone() })
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let csv = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;

    let seed = report.provenance.seeds.first().copied();
    let mut out = Outputs::new("report", a, seed, inputs);
    out.json(&a.dir.join(format!("{}.json", a.name)), ArtifactKind::Report, &report);
    out.file(&a.dir.join(format!("{}.csv", a.name)), ArtifactKind::Report, csv);
    out.commit()
}
