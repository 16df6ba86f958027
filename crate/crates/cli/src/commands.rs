use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nsp_core::decode::eval::direction_stats;
use nsp_core::decode::filter::{eokf_decode, DecodeRun};
use nsp_core::decode::implant::implant_stream;
use nsp_core::decode::{
    bin_spikes, count_ops_with, evaluate_reconstruction, run_decoder, split_trials, train_decoder as fit_decoder,
    DecoderModel, FilterKind, ImplantAccumulator, ImplantMode, InnovationMethod, KinematicState,
    SelectionConfig, TrainingData,
};
use nsp_core::detect::{detect_spikes, estimate_threshold};
use nsp_core::metrics::{confusion, majority_accuracy, match_windows, MATCH_TOLERANCE};
use nsp_core::sim::{fit_channel_sorter, run_simulation, ChannelModel, ChannelSorter, SimConfig, SorterMode};
use nsp_core::sort_offline::{model_footprint, ChannelSorterModel, SortOps, SorterModel};
use nsp_core::synthdata::{
    gen_reach_session, gen_spike_trace, load_labels, load_session, load_trace, read_jsonl, session_sidecar_json,
    sidecar_path, write_jsonl, write_session_csv, write_trace, Difficulty, ReachConfig, ReachSession,
    SpikeTraceConfig,
};
use nsp_core::{SortedEvent, SpikeWindow};

use crate::error::CliError;
use crate::output::{read_file, ArtifactKind, Inputs, Outputs};
use crate::{
    ArithArg, BenchArgs, BenchFilter, DecodeArgs, DetectArgs, DifficultyArg, EvalSortArgs, FilterArg,
    GenSessionArgs, GenTraceArgs, MethodArg, SimulateArgs, SortArgs, SorterModeArg, SplitArg, TrainDecoderArgs,
    TrainSorterArgs,
};

/// Per-channel detector settings written by `detect`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub channel: u16,
    pub threshold: u16,
    pub pre_samples: usize,
}

/// Trial split written by `train-decoder`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub train_fraction: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Reconstruction metrics written by `decode --metrics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub filter: FilterKind,
    pub split: SplitArg,
    pub arith: ArithArg,
    pub bins: usize,
    pub mse: f64,
    pub residual_std: f64,
    pub kurtosis: f64,
    /// Mean residual magnitude of 8 direction sectors (moving bins only).
    pub direction_mean_residual: Vec<f64>,
    pub direction_variance: f64,
    pub ops_per_step: OpsPerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpsPerStep {
    pub mult: f64,
    pub add: f64,
    pub div: f64,
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| CliError::schema(path, e))
}

fn load_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_jsonl(&read_file(path)?[..]).map_err(|e| CliError::schema(path, e))
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items).expect("in-memory write");
    buf
}

fn inputs(paths: &[&Path]) -> Result<Inputs, CliError> {
    let mut i = Inputs::default();
    for p in paths {
        i.add(p)?;
    }
    Ok(i)
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn states_csv(states: &[KinematicState]) -> Result<Vec<u8>, CliError> {
    #[derive(Serialize)]
    struct Row {
        bin: usize,
        vx: f64,
        vy: f64,
    }
    let rows: Vec<Row> = states
        .iter()
        .enumerate()
        .map(|(bin, s)| Row { bin, vx: s[0], vy: s.get(1).copied().unwrap_or(0.0) })
        .collect();
    csv_bytes(&rows)
}

pub fn gen_trace(a: &GenTraceArgs) -> Result<(), CliError> {
    let difficulty = match a.difficulty {
        DifficultyArg::Easy => Difficulty::Easy,
        DifficultyArg::Medium => Difficulty::Medium,
        DifficultyArg::Hard => Difficulty::Hard,
    };
    let preset = SpikeTraceConfig::preset(difficulty);
    let cfg = SpikeTraceConfig {
        n_channels: a.channels,
        neurons_per_channel: a.neurons_per_channel,
        snr_db: a.snr_db.unwrap_or(preset.snr_db),
        firing_rate_hz: a.rate_hz,
        duration_s: a.duration_s,
        sample_rate: a.sample_rate,
        ..preset
    };
    let (trace, labels) = gen_spike_trace(&cfg, a.seed)?;
    let mut bytes = Vec::new();
    write_trace(&mut bytes, &trace).expect("in-memory write");
    let mut out = Outputs::new("gen trace", a, Some(a.seed), Inputs::default());
    out.file(&a.out, ArtifactKind::Trace, bytes);
    out.file(&a.labels, ArtifactKind::Labels, jsonl_bytes(&labels.events));
    out.commit()
}

pub fn gen_session(a: &GenSessionArgs) -> Result<(), CliError> {
    let cfg = ReachConfig {
        n_neurons: a.neurons,
        trials_per_target: a.trials_per_target,
        bin_ms: a.bin_ms,
        ..Default::default()
    };
    let session = gen_reach_session(&cfg, a.seed)?;
    let mut csv = Vec::new();
    write_session_csv(&mut csv, &session).expect("in-memory write");
    let mut out = Outputs::new("gen session", a, Some(a.seed), Inputs::default());
    out.file(&a.out, ArtifactKind::Session, csv);
    out.companion(&sidecar_path(&a.out), session_sidecar_json(&session));
    out.commit()
}

pub fn detect(a: &DetectArgs) -> Result<(), CliError> {
    let trace = load_trace(&a.trace)?;
    let per_channel: Vec<(ThresholdEntry, Vec<SpikeWindow>)> = (0..trace.n_channels())
        .into_par_iter()
        .map(|ch| {
            let samples = trace.channel(ch);
            let threshold = estimate_threshold(samples, a.k)?;
            let windows = detect_spikes(samples, ch as u16, threshold, a.pre)?;
            Ok((ThresholdEntry { channel: ch as u16, threshold, pre_samples: a.pre }, windows))
        })
        .collect::<Result<_, CliError>>()?;
    let thresholds: Vec<ThresholdEntry> = per_channel.iter().map(|(t, _)| *t).collect();
    let windows: Vec<SpikeWindow> = per_channel.into_iter().flat_map(|(_, w)| w).collect();
    eprintln!("detected {} windows on {} channels", windows.len(), thresholds.len());
    let mut out = Outputs::new("detect", a, None, inputs(&[&a.trace])?);
    out.file(&a.out, ArtifactKind::Windows, jsonl_bytes(&windows));
    out.json(&a.thresholds, ArtifactKind::Thresholds, &thresholds);
    out.commit()
}

fn by_channel(windows: Vec<SpikeWindow>) -> BTreeMap<u16, Vec<SpikeWindow>> {
    let mut m: BTreeMap<u16, Vec<SpikeWindow>> = BTreeMap::new();
    for w in windows {
        m.entry(w.channel).or_default().push(w);
    }
    m
}

pub fn model_file_name(channel: u16) -> String {
    format!("ch{channel:03}.json")
}

pub fn train_sorter(a: &TrainSorterArgs) -> Result<(), CliError> {
    let mode = match a.mode {
        SorterModeArg::Online => SorterMode::Online,
        SorterModeArg::Offline => SorterMode::Offline,
        SorterModeArg::L1 => SorterMode::L1,
    };
    let labels = match (&a.labels, mode) {
        (Some(p), _) => Some(load_labels(p)?),
        (None, SorterMode::Online) => None,
        (None, _) => return Err(CliError::Usage("--labels is required for offline and l1 sorters".into())),
    };
    let thresholds: Vec<ThresholdEntry> = load_json(&a.thresholds)?;
    let windows = by_channel(load_lines(&a.windows)?);
    let empty = Vec::new();
    let trained: Vec<Option<ChannelModel>> = thresholds
        .par_iter()
        .map(|t| {
            let w = windows.get(&t.channel).unwrap_or(&empty);
            Ok(fit_channel_sorter(w, labels.as_ref(), mode, a.sweep_features)?.map(|sorter| ChannelModel {
                channel: t.channel,
                threshold: t.threshold,
                pre_samples: t.pre_samples,
                sorter,
            }))
        })
        .collect::<Result<_, CliError>>()?;
    let models: Vec<ChannelModel> = trained.into_iter().flatten().collect();
    eprintln!("trained {} of {} channels", models.len(), thresholds.len());
    if models.is_empty() {
        return Err(CliError::Numerical("no channel had enough spikes to train a sorter".into()));
    }
    let files = models
        .iter()
        .map(|m| {
            let file = ModelFile { packed: packed_of(m), model: m.clone() };
            let mut bytes = serde_json::to_vec_pretty(&file).expect("model serializes");
            bytes.push(b'\n');
            (model_file_name(m.channel), bytes)
        })
        .collect();
    let mut in_paths: Vec<&Path> = vec![&a.windows, &a.thresholds];
    if let Some(p) = &a.labels {
        in_paths.push(p);
    }
    let mut out = Outputs::new("train-sorter", a, None, inputs(&in_paths)?);
    out.dir(&a.out, ArtifactKind::SorterModels, files);
    out.commit()
}

/// One file of a models directory: the channel model plus, for trees, the
/// packed 28-bit encoding of its pattern and boundaries.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(flatten)]
    model: ChannelModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    packed: Option<String>,
}

fn packed_of(m: &ChannelModel) -> Option<String> {
    match &m.sorter {
        ChannelSorter::Offline { model: SorterModel::Tree(t) } => Some(t.packed_hex()),
        _ => None,
    }
}

fn load_model_file(path: &Path) -> Result<ChannelModel, CliError> {
    let f: ModelFile = load_json(path)?;
    if let Some(hex) = &f.packed {
        let decoded = ChannelSorterModel::unpack_hex(hex).map_err(|e| CliError::schema(path, e))?;
        let stored = match &f.model.sorter {
            ChannelSorter::Offline { model: SorterModel::Tree(t) } => Some((t.pattern_id, t.boundaries)),
            _ => None,
        };
        if stored != Some(decoded) {
            return Err(CliError::schema(path, "packed encoding disagrees with the model"));
        }
    }
    Ok(f.model)
}

/// Channel models of a directory written by `train-sorter`.
pub fn load_models(dir: &Path) -> Result<Vec<ChannelModel>, CliError> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let models: Vec<ChannelModel> = paths.iter().map(|p| load_model_file(p)).collect::<Result<_, _>>()?;
    if models.is_empty() {
        return Err(CliError::schema(dir, "no channel models"));
    }
    Ok(models)
}

fn models_by_channel(models: Vec<ChannelModel>) -> BTreeMap<u16, ChannelModel> {
    models.into_iter().map(|m| (m.channel, m)).collect()
}

pub fn sort(a: &SortArgs) -> Result<(), CliError> {
    let models = models_by_channel(load_models(&a.models)?);
    let windows: Vec<SpikeWindow> = load_lines(&a.windows)?;
    let mut events: Vec<SortedEvent> = windows
        .iter()
        .filter_map(|w| {
            let m = models.get(&w.channel)?;
            let unit = m.sorter.sort(w, &mut SortOps::default())?;
            Some(SortedEvent { t: w.t0, channel: w.channel, unit })
        })
        .collect();
    events.sort_by_key(|e| (e.t, e.channel, e.unit));
    eprintln!("sorted {} of {} windows", events.len(), windows.len());
    let mut out = Outputs::new("sort", a, None, inputs(&[&a.models, &a.windows])?);
    out.file(&a.out, ArtifactKind::Events, jsonl_bytes(&events));
    out.commit()
}

/// One row of the `eval-sort` accuracy CSV; `channel` is `all` for the
/// summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortEvalRow {
    pub channel: String,
    pub mode: String,
    pub windows: usize,
    pub matched: usize,
    pub accuracy: f64,
    pub outliers: usize,
    pub footprint_bits: Option<u32>,
}

pub fn sorter_kind(s: &ChannelSorter) -> &'static str {
    match s {
        ChannelSorter::Offline { model: SorterModel::Tree(_) } => "tree",
        ChannelSorter::Offline { model: SorterModel::L1(_) } => "l1",
        ChannelSorter::Online { .. } => "online",
    }
}

pub fn sorter_footprint(s: &ChannelSorter) -> Option<u32> {
    match s {
        ChannelSorter::Offline { model } => Some(model_footprint(model)),
        ChannelSorter::Online { .. } => None,
    }
}

pub fn eval_sort(a: &EvalSortArgs) -> Result<(), CliError> {
    let models = load_models(&a.models)?;
    let labels = load_labels(&a.labels)?;
    let windows = by_channel(load_lines(&a.windows)?);
    #[derive(Serialize)]
    struct ConfusionRow {
        channel: u16,
        predicted: String,
        truth: u8,
        count: usize,
    }
    let mut rows = Vec::new();
    let mut conf_rows = Vec::new();
    let empty = Vec::new();
    for m in &models {
        let w = windows.get(&m.channel).unwrap_or(&empty);
        let truth = match_windows(w, &labels, MATCH_TOLERANCE);
        let (mut predicted, mut expected) = (Vec::new(), Vec::new());
        for (w, t) in w.iter().zip(&truth) {
            if let Some(t) = t {
                predicted.push(m.sorter.sort(w, &mut SortOps::default()));
                expected.push(*t);
            }
        }
        for ((p, t), count) in confusion(&predicted, &expected) {
            conf_rows.push(ConfusionRow {
                channel: m.channel,
                predicted: p.map_or_else(|| "outlier".to_string(), |u| u.to_string()),
                truth: t,
                count,
            });
        }
        rows.push(SortEvalRow {
            channel: m.channel.to_string(),
            mode: sorter_kind(&m.sorter).into(),
            windows: w.len(),
            matched: expected.len(),
            accuracy: majority_accuracy(&predicted, &expected),
            outliers: predicted.iter().filter(|p| p.is_none()).count(),
            footprint_bits: sorter_footprint(&m.sorter),
        });
    }
    let n = rows.len() as f64;
    let footprints: Vec<u32> = rows.iter().filter_map(|r| r.footprint_bits).collect();
    let modes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    let summary = SortEvalRow {
        channel: "all".into(),
        mode: modes.into_iter().collect::<Vec<_>>().join("+"),
        windows: rows.iter().map(|r| r.windows).sum(),
        matched: rows.iter().map(|r| r.matched).sum(),
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        outliers: rows.iter().map(|r| r.outliers).sum(),
        footprint_bits: (!footprints.is_empty()).then(|| footprints.iter().sum()),
    };
    eprintln!("mean accuracy {:.4} over {} channels", summary.accuracy, rows.len());
    rows.push(summary);
    let mut out = Outputs::new("eval-sort", a, None, inputs(&[&a.models, &a.windows, &a.labels])?);
    out.file(&a.out, ArtifactKind::SortEval, csv_bytes(&rows)?);
    if let Some(p) = &a.confusion {
        out.file(p, ArtifactKind::Confusion, csv_bytes(&conf_rows)?);
    }
    out.commit()
}

pub fn train_decoder(a: &TrainDecoderArgs) -> Result<(), CliError> {
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(CliError::Usage(format!("--train-fraction {} must be in (0, 1)", a.train_fraction)));
    }
    let session = load_session(&a.session)?;
    if session.trials.len() < 2 {
        return Err(CliError::Usage("the session needs at least two trials".into()));
    }
    let (train, test) = split_trials(&session, a.train_fraction, a.seed);
    let data = TrainingData::from_session(&session.subset(&train), a.state_dim)?;
    let kind = match a.filter {
        FilterArg::Kf => FilterKind::Kf,
        FilterArg::Eokf => FilterKind::Eokf,
    };
    let model = fit_decoder(&data, kind, &SelectionConfig::default())?;
    eprintln!("{} neurons selected from {} training trials", model.selected.len(), train.len());
    let mut out = Outputs::new("train-decoder", a, Some(a.seed), inputs(&[&a.session])?);
    out.json(&a.out, ArtifactKind::DecoderModel, &model);
    if let Some(p) = &a.split_out {
        let split = SplitFile { seed: a.seed, train_fraction: a.train_fraction, train, test };
        out.json(p, ArtifactKind::Split, &split);
    }
    out.commit()
}

fn implant_mode(a: ArithArg) -> ImplantMode {
    match a {
        ArithArg::Float => ImplantMode::Float,
        ArithArg::Fixed => ImplantMode::Fixed,
    }
}

/// Implant-side accumulation of events followed by the ensemble filter.
fn decode_implant(
    model: &DecoderModel,
    events: &[SortedEvent],
    bin_ms: u32,
    sample_rate: u32,
    n_bins: usize,
    mode: ImplantMode,
) -> Result<DecodeRun, CliError> {
    let e = model.ensemble()?.e;
    let mut acc = ImplantAccumulator::new(&e, &model.selected, mode)?;
    let ez = implant_stream(&mut acc, events, bin_ms, sample_rate, n_bins)?;
    Ok(eokf_decode(model, &ez)?)
}

pub fn decode(a: &DecodeArgs) -> Result<(), CliError> {
    let model: DecoderModel = load_json(&a.model)?;
    if a.split == SplitArg::Implant && model.kind == FilterKind::Kf {
        return Err(CliError::Usage("the standard filter has no implant split; use --split monolithic".into()));
    }
    let mode = implant_mode(a.arith);
    let mut in_paths: Vec<&Path> = vec![&a.model];
    in_paths.extend(a.session.as_deref());
    in_paths.extend(a.trials.as_deref());
    in_paths.extend(a.events.as_deref());
    let ins = inputs(&in_paths)?;
    let seed = a.seed.or(ins.seed()).unwrap_or(0);
    let (run, truth) = if let Some(sp) = &a.session {
        let session = load_session(sp)?;
        let session: ReachSession = match &a.trials {
            Some(tp) => {
                let split: SplitFile = load_json(tp)?;
                if let Some(&bad) = split.test.iter().find(|&&t| t >= session.trials.len()) {
                    return Err(CliError::schema(tp, format!("trial {bad} is not in the session")));
                }
                session.subset(&split.test)
            }
            None => session,
        };
        let data = TrainingData::from_session(&session, model.state_dim())?;
        let run = match a.split {
            SplitArg::Monolithic => run_decoder(&model, &data.counts_for(&model.selected)?, mode)?,
            SplitArg::Implant => {
                let events = nsp_core::synthdata::reach_events(&session, a.sample_rate, seed);
                decode_implant(&model, &events, session.bin_ms, a.sample_rate, session.bins.len(), mode)?
            }
        };
        (run, Some(data.states()))
    } else {
        let ep = a.events.as_ref().expect("clap enforces --events or --session");
        let events: Vec<SortedEvent> = load_lines(ep)?;
        let n_bins = events
            .iter()
            .map(|e| (e.t / nsp_core::decode::implant::bin_samples(a.bin_ms, a.sample_rate)) as usize + 1)
            .max()
            .unwrap_or(0);
        let run = match a.split {
            SplitArg::Monolithic => {
                let counts: Vec<Vec<u32>> = bin_spikes(&events, a.bin_ms, a.sample_rate, &model.selected, n_bins)
                    .into_iter()
                    .map(|b| b.counts)
                    .collect();
                run_decoder(&model, &counts, mode)?
            }
            SplitArg::Implant => decode_implant(&model, &events, a.bin_ms, a.sample_rate, n_bins, mode)?,
        };
        (run, None)
    };
    let mut out = Outputs::new("decode", a, Some(seed), ins);
    out.file(&a.out, ArtifactKind::Decoded, states_csv(&run.states)?);
    if let (Some(mp), Some(truth)) = (&a.metrics, truth) {
        let rec = evaluate_reconstruction(&run.states, &truth)?;
        let dir = direction_stats(&rec, 8, 1.0);
        let steps = run.states.len().max(1) as f64;
        let total = run.ops.total();
        let metrics = DecodeMetrics {
            filter: model.kind,
            split: a.split,
            arith: a.arith,
            bins: run.states.len(),
            mse: rec.mse,
            residual_std: rec.residual_std,
            kurtosis: rec.kurtosis,
            direction_mean_residual: dir.mean_magnitude,
            direction_variance: dir.variance,
            ops_per_step: OpsPerStep {
                mult: total.mult as f64 / steps,
                add: total.add as f64 / steps,
                div: total.div as f64 / steps,
            },
        };
        eprintln!("mse {:.4} over {} bins", metrics.mse, metrics.bins);
        out.json(mp, ArtifactKind::DecodeMetrics, &metrics);
    }
    out.commit()
}

pub fn load_sim_config(path: Option<&Path>) -> Result<SimConfig, CliError> {
    let Some(p) = path else { return Ok(SimConfig::default()) };
    let text = String::from_utf8(read_file(p)?).map_err(|e| CliError::schema(p, e))?;
    toml::from_str(&text).map_err(|e| CliError::schema(p, e))
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let config = load_sim_config(a.config.as_deref())?;
    let trace = load_trace(&a.trace)?;
    let models = load_models(&a.models)?;
    let decoder: DecoderModel = load_json(&a.decoder)?;
    let ensemble = decoder.ensemble()?;
    let sim = run_simulation(&trace, &models, &ensemble, &config)?;
    let c = &sim.counters;
    eprintln!(
        "{} cycles, {} detections, {} accepted, {} lost, data-rate ratio {:.0}",
        c.cycles,
        c.detections,
        c.decoder_accepts,
        c.tokens_lost,
        c.data_rate_ratio()
    );
    let mut in_paths: Vec<&Path> = vec![&a.trace, &a.models, &a.decoder];
    if let Some(p) = &a.config {
        in_paths.push(p);
    }
    let mut out = Outputs::new("simulate", &(a, &config), None, inputs(&in_paths)?);
    out.json(&a.counters, ArtifactKind::SimCounters, c);
    if let Some(p) = &a.decoded {
        let run = eokf_decode(&decoder, &sim.ez)?;
        out.file(p, ArtifactKind::Decoded, states_csv(&run.states)?);
    }
    out.commit()
}

/// One row of the `bench` CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRow {
    pub filter: FilterKind,
    pub neurons: usize,
    pub state_dim: usize,
    pub method: MethodArg,
    pub row: String,
    pub mult: u64,
    pub add: u64,
    pub div: u64,
}

pub fn innovation_method(m: MethodArg) -> InnovationMethod {
    match m {
        MethodArg::Inverse => InnovationMethod::Inverse,
        MethodArg::Substitution => InnovationMethod::Substitution,
    }
}

pub fn op_rows(kind: FilterKind, neurons: usize, state_dim: usize, method: MethodArg) -> Result<Vec<OpRow>, CliError> {
    let ops = count_ops_with(kind, neurons, state_dim, innovation_method(method))?;
    let mut named: Vec<(&str, nsp_core::decode::OpCounts)> = ops.rows().to_vec();
    named.push(("total", ops.total()));
    Ok(named
        .into_iter()
        .map(|(row, o)| OpRow {
            filter: kind,
            neurons,
            state_dim,
            method,
            row: row.into(),
            mult: o.mult,
            add: o.add,
            div: o.div,
        })
        .collect())
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    if a.neurons.iter().any(|&n| n < a.state_dim) || a.state_dim == 0 {
        return Err(CliError::Usage("need state_dim >= 1 and neurons >= state_dim".into()));
    }
    let kinds: &[FilterKind] = match a.filter {
        BenchFilter::Kf => &[FilterKind::Kf],
        BenchFilter::Eokf => &[FilterKind::Eokf],
        BenchFilter::Both => &[FilterKind::Kf, FilterKind::Eokf],
    };
    let mut rows = Vec::new();
    for &n in &a.neurons {
        for &k in kinds {
            rows.extend(op_rows(k, n, a.state_dim, a.method)?);
        }
    }
    println!("{:<6} {:>7} {:<14} {:>9} {:>9} {:>7}", "filter", "neurons", "row", "mult", "add", "div");
    for r in &rows {
        let f = if r.filter == FilterKind::Kf { "kf" } else { "eokf" };
        println!("{f:<6} {:>7} {:<14} {:>9} {:>9} {:>7}", r.neurons, r.row, r.mult, r.add, r.div);
    }
    if a.filter == BenchFilter::Both {
        for &n in &a.neurons {
            let total = |k: FilterKind| {
                rows.iter()
                    .find(|r| r.filter == k && r.neurons == n && r.row == "total")
                    .map(|r| (r.mult + r.add + r.div) as f64)
                    .unwrap_or(f64::NAN)
            };
            println!("n={n}: eokf/kf total ops = {:.4}", total(FilterKind::Eokf) / total(FilterKind::Kf));
        }
    }
    if let Some(p) = &a.out {
        let mut out = Outputs::new("bench", a, None, Inputs::default());
        out.file(p, ArtifactKind::OpCounts, csv_bytes(&rows)?);
        out.commit()?;
    }
    Ok(())
}
