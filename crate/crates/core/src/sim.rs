//! Cycle-level model of the processor: per-channel detectors, sorter
//! groups fed by conveyor queues, and a single decoder port in front of the
//! implant accumulator.
//!
//! One clock cycle is one sample period. Per cycle:
//!
//! 1. every active detector consumes one sample and may complete a window;
//! 2. a waiting token enters its detector's tap slot if that slot is empty,
//!    otherwise it stalls (tokens already on the conveyor have priority);
//! 3. every conveyor advances one slot; the token leaving slot 0 reaches
//!    the group's sorter, which sorts it in the same cycle;
//! 4. sorted events of ensemble neurons contend for the decoder: it accepts
//!    one per cycle, the rest wait in a bounded FIFO (full FIFO = loss);
//! 5. a bin's `E z` is emitted once no token of that bin can still arrive.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::implant::{bin_samples, ensemble_products};
use crate::decode::{bin_spikes, DecodeError, EnsembleModel, ImplantAccumulator, ImplantMode};
use crate::detect::{detect_spikes, estimate_threshold, extract_features, ChannelDetector, DetectError};
use crate::metrics::{match_windows, MATCH_TOLERANCE};
use crate::sort_offline::{
    labeled_points, select_feature_pair, train_channel_model, train_l1, SortError, SortOps, SorterModel,
};
use crate::sort_online::{train_online, OnlineModel, OnlineSorterConfig};
use crate::synthdata::{gen_spike_trace, GroundTruthLabels, SpikeTraceConfig, SynthError};
use crate::{FeatureSpec, NeuronId, RawTrace, SortedEvent, SpikeToken, SpikeWindow, WINDOW_LEN};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("trace has {trace} channels, config expects {config}")]
    ChannelMismatch { trace: usize, config: usize },
    #[error("channel model for channel {0} is out of range or duplicated")]
    BadModel(u16),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Sort(#[from] SortError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_channels: usize,
    pub group_size: usize,
    pub conveyor_slots: usize,
    pub decoder_buffer_depth: usize,
    pub clock_hz: u32,
    pub bin_ms: u32,
    /// Bits per state element of the decoder output.
    pub output_width: u32,
    pub state_dim: usize,
    /// Power down detectors of channels with no ensemble neuron.
    pub channel_gating: bool,
    pub implant_mode: ImplantMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_channels: 96,
            group_size: 32,
            conveyor_slots: 32,
            decoder_buffer_depth: 4,
            clock_hz: 30_000,
            bin_ms: 100,
            output_width: 16,
            state_dim: 2,
            channel_gating: true,
            implant_mode: ImplantMode::Float,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.group_size == 0 || self.n_channels == 0 || !self.n_channels.is_multiple_of(self.group_size) {
            return bad("n_channels must be a positive multiple of group_size");
        }
        if self.conveyor_slots < self.group_size {
            return bad("conveyor_slots must be at least group_size (one tap per detector)");
        }
        if self.clock_hz == 0 || self.bin_ms == 0 || bin_samples(self.bin_ms, self.clock_hz) <= self.bin_grace_cycles()
        {
            return bad("bins must be longer than the grace period");
        }
        if self.state_dim == 0 {
            return bad("state_dim must be positive");
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        self.n_channels / self.group_size
    }

    pub fn bin_cycles(&self) -> u64 {
        bin_samples(self.bin_ms, self.clock_hz)
    }

    /// Cycles after a bin edge before the bin is emitted: window capture,
    /// worst-case stall and conveyor transit (one conveyor length each),
    /// plus the decoder FIFO.
    pub fn bin_grace_cycles(&self) -> u64 {
        (WINDOW_LEN + 2 * self.conveyor_slots + self.decoder_buffer_depth + 1) as u64
    }
}

/// Sorter run on one channel's tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ChannelSorter {
    Offline { model: SorterModel },
    Online { model: OnlineModel },
}

impl ChannelSorter {
    pub fn feature_spec(&self) -> FeatureSpec {
        match self {
            ChannelSorter::Offline { model } => model.feature_spec(),
            ChannelSorter::Online { .. } => FeatureSpec::PeakTrough,
        }
    }

    pub fn sort(&self, window: &SpikeWindow, ops: &mut SortOps) -> Option<u8> {
        let (f1, f2) = extract_features(window, self.feature_spec());
        match self {
            ChannelSorter::Offline { model } => model.classify(f1, f2, ops),
            ChannelSorter::Online { model } => model.classify(f1, f2).unit(),
        }
    }
}

/// Everything the implant stores for one electrode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub channel: u16,
    pub threshold: u16,
    pub pre_samples: usize,
    pub sorter: ChannelSorter,
}

/// How [`fit_channel_models`] trains each channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SorterMode {
    Offline,
    L1,
    Online,
}

/// Trains the sorter of one channel from its detected windows. `labels`
/// is needed for the supervised modes; `sweep_features` lets the tree pick
/// its sample pair. Returns `None` when the channel has too few spikes.
pub fn fit_channel_sorter(
    windows: &[SpikeWindow],
    labels: Option<&GroundTruthLabels>,
    mode: SorterMode,
    sweep_features: bool,
) -> Result<Option<ChannelSorter>, SimError> {
    let peak_trough = FeatureSpec::PeakTrough;
    if mode == SorterMode::Online {
        let tokens: Vec<SpikeToken> = windows.iter().map(|w| SpikeToken::from_window(w, peak_trough)).collect();
        return Ok(train_online(&tokens, OnlineSorterConfig::default()).map(|model| ChannelSorter::Online { model }));
    }
    let Some(labels) = labels else {
        return Err(SimError::Config("supervised sorter modes need labels".into()));
    };
    let matched = match_windows(windows, labels, MATCH_TOLERANCE);
    let (w, l): (Vec<SpikeWindow>, Vec<u8>) =
        windows.iter().zip(&matched).filter_map(|(w, m)| m.map(|l| (*w, l))).unzip();
    let spec = match sweep_features && mode == SorterMode::Offline {
        true => match select_feature_pair(&w, &l) {
            Ok((spec, _)) => spec,
            Err(SortError::SingleLabel) => peak_trough,
            Err(_) => return Ok(None),
        },
        false => peak_trough,
    };
    let points = labeled_points(&w, &l, spec);
    let model = match mode {
        SorterMode::L1 => train_l1(&points, spec).map(SorterModel::L1),
        _ => train_channel_model(&points, spec).map(SorterModel::Tree),
    };
    match model {
        Ok(model) => Ok(Some(ChannelSorter::Offline { model })),
        Err(SortError::EmptyInput | SortError::TooFewSamples { .. } | SortError::TooManyLabels(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Threshold, detection and sorter training for every channel of a
/// labelled trace. Channels whose sorter cannot be trained are skipped.
pub fn fit_channel_models(
    trace: &RawTrace,
    labels: &GroundTruthLabels,
    mode: SorterMode,
    k: f64,
    pre_samples: usize,
) -> Result<Vec<ChannelModel>, SimError> {
    let fitted: Vec<Result<Option<ChannelModel>, SimError>> = (0..trace.n_channels())
        .into_par_iter()
        .map(|ch| {
            let samples = trace.channel(ch);
            let threshold = estimate_threshold(samples, k)?;
            let windows = detect_spikes(samples, ch as u16, threshold, pre_samples)?;
            Ok(fit_channel_sorter(&windows, Some(labels), mode, false)?
                .map(|sorter| ChannelModel { channel: ch as u16, threshold, pre_samples, sorter }))
        })
        .collect();
    let mut out = Vec::new();
    for f in fitted {
        out.extend(f?);
    }
    Ok(out)
}

/// A detected window travelling to its sorter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub window: SpikeWindow,
    /// Cycle at which the detector completed it.
    pub born: u64,
}

/// Conveyor queue of one sorter group with one tap per detector.
#[derive(Debug, Clone, PartialEq)]
pub struct SorterGroup {
    /// `slots[0]` is the head next to the sorter.
    slots: Vec<Option<Token>>,
    /// Token waiting at each detector, with the cycle its wait began.
    pending: Vec<Option<Token>>,
    in_conveyor: usize,
    pub stall_cycles: u64,
    pub max_stall: u64,
    /// Tokens a detector completed while its previous one still waited.
    pub detector_lost: u64,
}

impl SorterGroup {
    pub fn new(group_size: usize, slots: usize) -> Self {
        Self {
            slots: vec![None; slots],
            pending: vec![None; group_size],
            in_conveyor: 0,
            stall_cycles: 0,
            max_stall: 0,
            detector_lost: 0,
        }
    }

    /// Tap slot of local detector `i`.
    pub fn tap(&self, i: usize) -> usize {
        i
    }

    /// A detector completed a token this cycle.
    pub fn offer(&mut self, local: usize, token: Token) {
        match self.pending[local] {
            Some(_) => self.detector_lost += 1,
            None => self.pending[local] = Some(token),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_conveyor + self.pending.iter().filter(|p| p.is_some()).count()
    }

    /// Insertion, one advance, and the token handed to the sorter.
    pub fn cycle(&mut self, now: u64) -> Option<Token> {
        for i in 0..self.pending.len() {
            let Some(tok) = self.pending[i] else { continue };
            let tap = self.tap(i);
            if self.slots[tap].is_none() {
                self.slots[tap] = Some(tok);
                self.pending[i] = None;
                self.in_conveyor += 1;
                self.max_stall = self.max_stall.max(now - tok.born);
            } else {
                self.stall_cycles += 1;
            }
        }
        let head = self.slots[0].take();
        self.slots.rotate_left(1);
        if head.is_some() {
            self.in_conveyor -= 1;
        }
        head
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounters {
    pub detections: u64,
    pub sorts: u64,
    pub stall_cycles: u64,
    pub max_stall: u64,
    pub detector_lost: u64,
}

/// Activity counters of one run. Field names are the JSON schema.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimCounters {
    pub cycles: u64,
    pub samples_in: u64,
    pub detections: u64,
    pub sorts: u64,
    pub sort_outliers: u64,
    /// Sorted events of units outside the ensemble, dropped at the sorter.
    pub sorted_unselected: u64,
    pub decoder_arrivals: u64,
    pub decoder_accepts: u64,
    /// Events that could not be accepted in their arrival cycle.
    pub decoder_collisions: u64,
    pub max_decoder_queue: u64,
    pub stall_cycles: u64,
    pub max_stall: u64,
    pub detector_lost: u64,
    pub decoder_lost: u64,
    pub tokens_lost: u64,
    /// Accepted events whose bin had already been emitted.
    pub late_tokens: u64,
    /// Accepted events whose detection bin differs from the acceptance bin.
    pub bin_crossings: u64,
    pub bins_emitted: u64,
    pub input_bits: u64,
    pub output_bits: u64,
    pub conservation_violations: u64,
    pub groups: Vec<GroupCounters>,
    pub channel_detections: Vec<u64>,
    pub channel_sorts: Vec<u64>,
    pub sorter_ops: SortOps,
}

impl SimCounters {
    pub fn data_rate_ratio(&self) -> f64 {
        self.input_bits as f64 / self.output_bits.max(1) as f64
    }
}

/// Simulator state between cycles.
pub struct Simulator {
    config: SimConfig,
    models: Vec<Option<ChannelModel>>,
    detectors: Vec<Option<ChannelDetector>>,
    groups: Vec<SorterGroup>,
    selected: BTreeSet<NeuronId>,
    fifo: VecDeque<SortedEvent>,
    template: ImplantAccumulator,
    open_bins: BTreeMap<u64, ImplantAccumulator>,
    emitted: Vec<DVector<f64>>,
    cycle: u64,
    counters: SimCounters,
}

impl Simulator {
    pub fn new(config: SimConfig, models: &[ChannelModel], ensemble: &EnsembleModel) -> Result<Self, SimError> {
        config.validate()?;
        if ensemble.e.nrows() != config.state_dim {
            return Err(SimError::Config(format!(
                "ensemble state_dim {} differs from config {}",
                ensemble.e.nrows(),
                config.state_dim
            )));
        }
        let mut slot: Vec<Option<ChannelModel>> = vec![None; config.n_channels];
        for m in models {
            let ch = m.channel as usize;
            if ch >= config.n_channels || slot[ch].is_some() {
                return Err(SimError::BadModel(m.channel));
            }
            slot[ch] = Some(m.clone());
        }
        let selected: BTreeSet<NeuronId> = ensemble.selected.iter().copied().collect();
        let active = |ch: usize| slot[ch].is_some() && (!config.channel_gating || selected.iter().any(|n| n.channel as usize == ch));
        let detectors = (0..config.n_channels)
            .map(|ch| match &slot[ch] {
                Some(m) if active(ch) => ChannelDetector::new(ch as u16, m.threshold, m.pre_samples).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let template = ImplantAccumulator::new(&ensemble.e, &ensemble.selected, config.implant_mode)?;
        let n_groups = config.n_groups();
        Ok(Self {
            groups: (0..n_groups).map(|_| SorterGroup::new(config.group_size, config.conveyor_slots)).collect(),
            counters: SimCounters {
                groups: vec![GroupCounters::default(); n_groups],
                channel_detections: vec![0; config.n_channels],
                channel_sorts: vec![0; config.n_channels],
                ..Default::default()
            },
            config,
            models: slot,
            detectors,
            selected,
            fifo: VecDeque::new(),
            template,
            open_bins: BTreeMap::new(),
            emitted: Vec::new(),
            cycle: 0,
        })
    }

    pub fn counters(&self) -> &SimCounters {
        &self.counters
    }

    pub fn emitted(&self) -> &[DVector<f64>] {
        &self.emitted
    }

    pub fn is_active(&self, channel: usize) -> bool {
        self.detectors[channel].is_some()
    }

    fn in_flight(&self) -> u64 {
        self.groups.iter().map(|g| g.in_flight() as u64).sum()
    }

    /// Advances one cycle. `frame` holds this cycle's sample of every
    /// channel, or `None` once the input has ended.
    pub fn step(&mut self, frame: Option<&[i8]>) -> Result<(), SimError> {
        let now = self.cycle;
        let gs = self.config.group_size;
        if let Some(frame) = frame {
            self.counters.samples_in += 1;
            for (ch, det) in self.detectors.iter_mut().enumerate() {
                let Some(det) = det else { continue };
                if let Some(window) = det.push(frame[ch]) {
                    self.counters.detections += 1;
                    self.counters.channel_detections[ch] += 1;
                    self.counters.groups[ch / gs].detections += 1;
                    self.groups[ch / gs].offer(ch % gs, Token { window, born: now });
                }
            }
        }

        let mut arrivals = Vec::new();
        for g in 0..self.groups.len() {
            let Some(tok) = self.groups[g].cycle(now) else { continue };
            let ch = tok.window.channel as usize;
            self.counters.sorts += 1;
            self.counters.groups[g].sorts += 1;
            self.counters.channel_sorts[ch] += 1;
            let model = self.models[ch].as_ref().expect("active channel has a model");
            let mut ops = SortOps::default();
            let unit = model.sorter.sort(&tok.window, &mut ops);
            self.counters.sorter_ops.comparisons += ops.comparisons;
            self.counters.sorter_ops.add_sub += ops.add_sub;
            self.counters.sorter_ops.lookups += ops.lookups;
            match unit {
                None => self.counters.sort_outliers += 1,
                Some(u) if self.selected.contains(&NeuronId::new(ch as u16, u)) => arrivals.push(SortedEvent {
                    t: tok.window.t0,
                    channel: ch as u16,
                    unit: u,
                }),
                Some(_) => self.counters.sorted_unselected += 1,
            }
        }
        self.decoder_port(arrivals)?;
        self.emit_ready_bins()?;
        self.sync_counters();
        self.check_conservation();
        self.cycle += 1;
        self.counters.cycles = self.cycle;
        Ok(())
    }

    fn decoder_port(&mut self, arrivals: Vec<SortedEvent>) -> Result<(), SimError> {
        self.counters.decoder_arrivals += arrivals.len() as u64;
        let mut arrivals = arrivals.into_iter();
        let accepted = match self.fifo.pop_front() {
            Some(e) => Some(e),
            None => arrivals.next(),
        };
        for e in arrivals {
            self.counters.decoder_collisions += 1;
            if self.fifo.len() < self.config.decoder_buffer_depth {
                self.fifo.push_back(e);
            } else {
                self.counters.decoder_lost += 1;
            }
        }
        self.counters.max_decoder_queue = self.counters.max_decoder_queue.max(self.fifo.len() as u64);
        if let Some(e) = accepted {
            self.counters.decoder_accepts += 1;
            let t = self.config.bin_cycles();
            let bin = e.t / t;
            if bin != self.cycle / t {
                self.counters.bin_crossings += 1;
            }
            if (bin as usize) < self.emitted.len() {
                self.counters.late_tokens += 1;
            } else {
                let template = &self.template;
                let acc = self.open_bins.entry(bin).or_insert_with(|| template.clone());
                acc.accumulate_event(&e)?;
            }
        }
        Ok(())
    }

    fn emit_ready_bins(&mut self) -> Result<(), SimError> {
        let t = self.config.bin_cycles();
        let grace = self.config.bin_grace_cycles();
        loop {
            let k = self.emitted.len() as u64;
            if self.cycle < (k + 1) * t + grace {
                return Ok(());
            }
            self.emit_bin(k)?;
        }
    }

    fn emit_bin(&mut self, k: u64) -> Result<(), SimError> {
        let ez = match self.open_bins.remove(&k) {
            Some(mut acc) => acc.emit_bin()?,
            None => DVector::zeros(self.config.state_dim),
        };
        self.emitted.push(ez);
        self.counters.bins_emitted += 1;
        Ok(())
    }

    fn sync_counters(&mut self) {
        let c = &mut self.counters;
        c.stall_cycles = 0;
        c.max_stall = 0;
        c.detector_lost = 0;
        for (g, gc) in self.groups.iter().zip(c.groups.iter_mut()) {
            gc.stall_cycles = g.stall_cycles;
            gc.max_stall = g.max_stall;
            gc.detector_lost = g.detector_lost;
            c.stall_cycles += g.stall_cycles;
            c.max_stall = c.max_stall.max(g.max_stall);
            c.detector_lost += g.detector_lost;
        }
        c.tokens_lost = c.detector_lost + c.decoder_lost;
        c.input_bits = c.samples_in * self.config.n_channels as u64 * 8;
        c.output_bits = c.bins_emitted * self.config.state_dim as u64 * self.config.output_width as u64;
    }

    /// Generated tokens are sorted, in flight or lost; sorted ensemble events
    /// are accepted, queued or lost.
    fn check_conservation(&mut self) {
        let c = &self.counters;
        let detector_side = c.detections == c.sorts + self.in_flight() + c.detector_lost;
        let decoder_side = c.decoder_arrivals == c.decoder_accepts + self.fifo.len() as u64 + c.decoder_lost;
        let sorter_side = c.sorts == c.sort_outliers + c.sorted_unselected + c.decoder_arrivals;
        if !(detector_side && decoder_side && sorter_side) {
            self.counters.conservation_violations += 1;
        }
    }

    /// Runs without input until every token is consumed and `n_bins` bins
    /// have been emitted.
    pub fn drain(&mut self, n_bins: usize) -> Result<(), SimError> {
        while self.in_flight() > 0 || !self.fifo.is_empty() {
            self.step(None)?;
        }
        while self.emitted.len() < n_bins {
            self.emit_bin(self.emitted.len() as u64)?;
        }
        // Tokens detected past the last whole bin are not reported.
        self.open_bins.retain(|&k, _| (k as usize) < n_bins);
        self.sync_counters();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Emitted `E z` per bin.
    pub ez: Vec<DVector<f64>>,
    pub counters: SimCounters,
}

/// Number of whole or partial bins covering `n_samples`.
pub fn n_bins_for(n_samples: usize, config: &SimConfig) -> usize {
    (n_samples as u64).div_ceil(config.bin_cycles()) as usize
}

/// Runs a whole trace through the simulator and drains it.
pub fn run_simulation(
    trace: &RawTrace,
    models: &[ChannelModel],
    ensemble: &EnsembleModel,
    config: &SimConfig,
) -> Result<SimOutput, SimError> {
    if trace.n_channels() != config.n_channels {
        return Err(SimError::ChannelMismatch { trace: trace.n_channels(), config: config.n_channels });
    }
    if trace.sample_rate != config.clock_hz {
        return Err(SimError::Config(format!(
            "trace sampled at {} Hz, clock is {} Hz",
            trace.sample_rate, config.clock_hz
        )));
    }
    let mut sim = Simulator::new(config.clone(), models, ensemble)?;
    let mut frame = vec![0i8; config.n_channels];
    for t in 0..trace.n_samples() {
        for (ch, v) in frame.iter_mut().enumerate() {
            *v = trace.channel(ch)[t];
        }
        sim.step(Some(&frame))?;
    }
    sim.drain(n_bins_for(trace.n_samples(), config))?;
    Ok(SimOutput { ez: sim.emitted, counters: sim.counters })
}

/// The same computation without the architecture: detect every active
/// channel offline, sort, keep ensemble events and bin them.
pub fn reference_events(
    trace: &RawTrace,
    models: &[ChannelModel],
    ensemble: &EnsembleModel,
    config: &SimConfig,
) -> Result<Vec<SortedEvent>, SimError> {
    let selected: BTreeSet<NeuronId> = ensemble.selected.iter().copied().collect();
    let mut events = Vec::new();
    for m in models {
        let ch = m.channel as usize;
        if config.channel_gating && !selected.iter().any(|n| n.channel == m.channel) {
            continue;
        }
        for w in detect_spikes(trace.channel(ch), m.channel, m.threshold, m.pre_samples)? {
            if let Some(u) = m.sorter.sort(&w, &mut SortOps::default()) {
                if selected.contains(&NeuronId::new(m.channel, u)) {
                    events.push(SortedEvent { t: w.t0, channel: m.channel, unit: u });
                }
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.channel, e.unit));
    Ok(events)
}

pub fn reference_ez(
    trace: &RawTrace,
    models: &[ChannelModel],
    ensemble: &EnsembleModel,
    config: &SimConfig,
) -> Result<Vec<DVector<f64>>, SimError> {
    let events = reference_events(trace, models, ensemble, config)?;
    let n_bins = n_bins_for(trace.n_samples(), config);
    let counts: Vec<Vec<u32>> = bin_spikes(&events, config.bin_ms, config.clock_hz, &ensemble.selected, n_bins)
        .into_iter()
        .map(|b| b.counts)
        .collect();
    Ok(ensemble_products(&ensemble.e, &counts, config.implant_mode))
}

/// Event counts of one rate in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub rate_hz: f64,
    /// Ground-truth spikes in the generated trace.
    pub input_spikes: u64,
    pub detections: u64,
    pub sorts: u64,
    pub decoder_accepts: u64,
    pub gated_channel_sorts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSweep {
    pub rows: Vec<RateRow>,
    /// R² of the linear fit of each stage's count on the input spike rate.
    pub r2_detections: f64,
    pub r2_sorts: f64,
    pub r2_accepts: f64,
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Regenerates the trace at each firing rate (same seed, same templates)
/// and runs it with fixed models. Rates run in parallel; rows keep the
/// input order.
pub fn sweep_spike_rate(
    rates: &[f64],
    trace_config: &SpikeTraceConfig,
    models: &[ChannelModel],
    ensemble: &EnsembleModel,
    config: &SimConfig,
    seed: u64,
) -> Result<RateSweep, SimError> {
    if rates.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(SimError::Config("rates must be finite and non-negative".into()));
    }
    let selected: BTreeSet<u16> = ensemble.selected.iter().map(|n| n.channel).collect();
    let rows = rates
        .par_iter()
        .map(|&rate| {
            let cfg = SpikeTraceConfig { firing_rate_hz: rate, ..trace_config.clone() };
            let (trace, labels) = gen_spike_trace(&cfg, seed)?;
            let out = run_simulation(&trace, models, ensemble, config)?;
            let c = &out.counters;
            Ok(RateRow {
                rate_hz: rate,
                input_spikes: labels.events.len() as u64,
                detections: c.detections,
                sorts: c.sorts,
                decoder_accepts: c.decoder_accepts,
                gated_channel_sorts: (0..config.n_channels)
                    .filter(|ch| !selected.contains(&(*ch as u16)))
                    .map(|ch| c.channel_sorts[ch])
                    .sum(),
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let x: Vec<f64> = rows.iter().map(|r| r.rate_hz).collect();
    let fit = |f: fn(&RateRow) -> u64| linear_r2(&x, &rows.iter().map(|r| f(r) as f64).collect::<Vec<_>>());
    Ok(RateSweep {
        r2_detections: fit(|r| r.detections),
        r2_sorts: fit(|r| r.sorts),
        r2_accepts: fit(|r| r.decoder_accepts),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sort_offline::L1TemplateModel;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    /// Sorter that labels every spike unit 0 and a one-unit-per-channel
    /// ensemble over `channels`.
    fn simple_models(n: usize, threshold: u16) -> Vec<ChannelModel> {
        (0..n)
            .map(|ch| ChannelModel {
                channel: ch as u16,
                threshold,
                pre_samples: 0,
                sorter: ChannelSorter::Offline {
                    model: SorterModel::L1(L1TemplateModel {
                        feature_spec: FeatureSpec::PeakTrough,
                        templates: vec![(0, 0)],
                        labels: vec![0],
                    }),
                },
            })
            .collect()
    }

    fn ensemble(channels: impl Iterator<Item = u16>) -> EnsembleModel {
        let selected: Vec<NeuronId> = channels.map(|c| NeuronId::new(c, 0)).collect();
        let n = selected.len();
        EnsembleModel {
            e: crate::decode::implant::snap_to_exact_grid(&DMatrix::from_fn(2, n, |i, j| {
                (j as f64 + 1.0) * if i == 0 { 0.37 } else { -0.11 }
            })),
            qe: DMatrix::identity(2, 2),
            bias: DVector::zeros(2),
            selected,
        }
    }

    fn small_config(n_channels: usize) -> SimConfig {
        SimConfig {
            n_channels,
            clock_hz: 10_000,
            ..Default::default()
        }
    }

    #[test]
    fn silence_gives_no_activity() {
        let cfg = small_config(96);
        let trace = RawTrace::zeros(96, 5000, cfg.clock_hz);
        let out = run_simulation(&trace, &simple_models(96, 10), &ensemble(0..96), &cfg).unwrap();
        let c = &out.counters;
        assert_eq!((c.detections, c.sorts, c.decoder_accepts, c.stall_cycles), (0, 0, 0, 0));
        assert_eq!(out.ez.len(), 5);
        assert!(out.ez.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_token_latency_equals_tap_distance() {
        let cfg = small_config(32);
        let mut sim = Simulator::new(cfg.clone(), &simple_models(32, 10), &ensemble(0..32)).unwrap();
        let mut frame = vec![0i8; 32];
        // Threshold crossing at cycle 0 with pre = 0: the window completes at
        // cycle 31 and enters tap 7 in that same cycle.
        frame[7] = 100;
        sim.step(Some(&frame)).unwrap();
        frame[7] = 0;
        let mut sorted_at = None;
        for c in 1..200 {
            sim.step(Some(&frame)).unwrap();
            if sim.counters().sorts == 1 && sorted_at.is_none() {
                sorted_at = Some(c);
            }
        }
        assert_eq!(sorted_at, Some(31 + 7));
        assert_eq!(sim.counters().max_stall, 0);
    }

    fn pulses(n_channels: usize, n_samples: usize, period: usize, phase: impl Fn(usize) -> usize) -> RawTrace {
        let channels = (0..n_channels)
            .map(|ch| (0..n_samples).map(|t| if t % period == phase(ch) % period { 100 } else { 0 }).collect())
            .collect();
        RawTrace::new(10_000, channels).unwrap()
    }

    #[test]
    fn whole_group_spiking_at_once_drains_without_loss() {
        let cfg = small_config(32);
        // One simultaneous burst on every channel of the group.
        let channels = (0..32).map(|_| (0..3000).map(|t| if t == 10 { 100 } else { 0 }).collect()).collect();
        let trace = RawTrace::new(10_000, channels).unwrap();
        let out = run_simulation(&trace, &simple_models(32, 50), &ensemble(0..32), &cfg).unwrap();
        let c = &out.counters;
        assert_eq!(c.detections, 32);
        assert_eq!(c.sorts, 32);
        assert_eq!(c.detector_lost, 0);
        assert!(c.max_stall <= 31);
        assert_eq!(c.conservation_violations, 0);
    }

    #[test]
    fn saturating_load_keeps_detector_side_lossless() {
        let cfg = small_config(96);
        let trace = pulses(96, 20_000, 32, |_| 0);
        let out = run_simulation(&trace, &simple_models(96, 50), &ensemble(0..96), &cfg).unwrap();
        let c = &out.counters;
        assert_eq!(c.detector_lost, 0);
        assert!(c.max_stall <= 31, "max stall {}", c.max_stall);
        assert_eq!(c.sorts, c.detections);
        assert_eq!(c.conservation_violations, 0);
        // Three sorters into one decoder port: the FIFO overflows.
        assert!(c.decoder_lost > 0);
    }

    #[test]
    fn functional_output_matches_reference() {
        let cfg = SimConfig { n_channels: 32, ..Default::default() };
        let tc = SpikeTraceConfig { n_channels: 32, duration_s: 4.0, firing_rate_hz: 15.0, ..Default::default() };
        let (trace, labels) = gen_spike_trace(&tc, 5).unwrap();
        let models = fit_channel_models(&trace, &labels, SorterMode::Offline, 4.0, 4).unwrap();
        assert!(models.len() >= 30, "{} models", models.len());
        let ens = ensemble(0..20);
        for mode in [ImplantMode::Float, ImplantMode::Fixed] {
            let cfg = SimConfig { implant_mode: mode, ..cfg.clone() };
            let out = run_simulation(&trace, &models, &ens, &cfg).unwrap();
            assert_eq!(out.counters.tokens_lost, 0);
            assert_eq!(out.counters.late_tokens, 0);
            assert_eq!(out.ez, reference_ez(&trace, &models, &ens, &cfg).unwrap());
            let c = &out.counters;
            for ch in 20..32 {
                assert_eq!(c.channel_detections[ch] + c.channel_sorts[ch], 0);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let ens = ensemble(0..1);
        for cfg in [
            SimConfig { n_channels: 90, ..Default::default() },
            SimConfig { conveyor_slots: 16, ..Default::default() },
            SimConfig { bin_ms: 1, clock_hz: 1000, ..Default::default() },
        ] {
            assert!(matches!(Simulator::new(cfg, &[], &ens), Err(SimError::Config(_))));
        }
        let trace = RawTrace::zeros(8, 10, 30_000);
        assert!(matches!(
            run_simulation(&trace, &[], &ens, &SimConfig::default()),
            Err(SimError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn r2_of_exact_line_is_one() {
        assert!((linear_r2(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!(linear_r2(&[1.0, 2.0, 3.0], &[1.0, 3.0, 1.0]) < 0.01);
    }

    #[test]
    fn realistic_load_is_lossless_and_compresses() {
        let cfg = SimConfig::default();
        let tc = SpikeTraceConfig { duration_s: 2.0, ..Default::default() };
        let (trace, labels) = gen_spike_trace(&tc, 11).unwrap();
        let models = fit_channel_models(&trace, &labels, SorterMode::Offline, 4.0, 4).unwrap();
        let out = run_simulation(&trace, &models, &ensemble((0..96).step_by(2)), &cfg).unwrap();
        let c = &out.counters;
        assert!(c.detections > 0);
        assert_eq!(c.tokens_lost, 0);
        assert_eq!(c.conservation_violations, 0);
        assert!(c.data_rate_ratio() >= 1e4, "ratio {}", c.data_rate_ratio());
        let again = run_simulation(&trace, &models, &ensemble((0..96).step_by(2)), &cfg).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn sweep_is_linear_and_gated_channels_stay_idle() {
        let cfg = SimConfig { n_channels: 32, ..Default::default() };
        let tc = SpikeTraceConfig { n_channels: 32, duration_s: 3.0, ..Default::default() };
        let (trace, labels) = gen_spike_trace(&tc, 3).unwrap();
        let models = fit_channel_models(&trace, &labels, SorterMode::Offline, 4.0, 4).unwrap();
        let ens = ensemble(0..16);
        let sweep = sweep_spike_rate(&[0.0, 5.0, 10.0, 20.0, 40.0], &tc, &models, &ens, &cfg, 3).unwrap();
        // Rate 0 still detects noise crossings of the fixed thresholds.
        assert_eq!(sweep.rows[0].input_spikes, 0);
        assert!(sweep.rows.iter().all(|r| r.gated_channel_sorts == 0));
        for r2 in [sweep.r2_detections, sweep.r2_sorts, sweep.r2_accepts] {
            assert!(r2 >= 0.95, "{sweep:?}");
        }
    }

    #[test]
    fn noiseless_sweep_scales_with_rate() {
        let cfg = SimConfig { n_channels: 32, ..Default::default() };
        let tc = SpikeTraceConfig { n_channels: 32, duration_s: 20.0, snr_db: f64::INFINITY, ..Default::default() };
        let models = simple_models(32, 20);
        let sweep = sweep_spike_rate(&[0.0, 10.0, 20.0], &tc, &models, &ensemble(0..32), &cfg, 8).unwrap();
        let r = &sweep.rows;
        assert_eq!((r[0].detections, r[0].sorts, r[0].decoder_accepts), (0, 0, 0));
        let ratio = r[2].detections as f64 / r[1].detections as f64;
        assert!((ratio - 2.0).abs() <= 0.1, "doubling ratio {ratio}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn counters_are_conserved_on_random_pulse_trains(
            spikes in proptest::collection::vec((0usize..64, 0usize..6000), 0..800),
            depth in 0usize..6,
        ) {
            let mut channels = vec![vec![0i8; 6000]; 64];
            for (ch, t) in spikes {
                channels[ch][t] = 100;
            }
            let trace = RawTrace::new(10_000, channels).unwrap();
            let cfg = SimConfig { n_channels: 64, decoder_buffer_depth: depth, ..small_config(64) };
            let out = run_simulation(&trace, &simple_models(64, 50), &ensemble(0..64), &cfg).unwrap();
            let c = &out.counters;
            prop_assert_eq!(c.conservation_violations, 0);
            prop_assert_eq!(c.detections, c.sorts + c.detector_lost);
            prop_assert_eq!(c.decoder_arrivals, c.decoder_accepts + c.decoder_lost);
            prop_assert_eq!(out.ez.len(), 6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        /// Adversarial completion schedules for one group: each detector
        /// completes at most once per 32 cycles.
        #[test]
        fn one_group_never_loses_at_the_detector(
            gaps in proptest::collection::vec(proptest::collection::vec(0u64..40, 1..40), 32),
        ) {
            let mut group = SorterGroup::new(32, 32);
            let mut next: Vec<u64> = gaps.iter().map(|g| g[0]).collect();
            let mut idx = vec![1usize; 32];
            let mut generated = 0u64;
            let mut sorted = 0u64;
            let window = SpikeWindow { channel: 0, t0: 0, samples: [0; 32] };
            for now in 0..2000u64 {
                for d in 0..32 {
                    if idx[d] <= gaps[d].len() && next[d] == now {
                        group.offer(d, Token { window, born: now });
                        generated += 1;
                        let gap = gaps[d].get(idx[d]).copied().unwrap_or(0);
                        idx[d] += 1;
                        next[d] = now + 32 + gap;
                    }
                }
                if group.cycle(now).is_some() {
                    sorted += 1;
                }
                prop_assert_eq!(generated, sorted + group.in_flight() as u64 + group.detector_lost);
            }
            prop_assert_eq!(group.detector_lost, 0);
            prop_assert!(group.max_stall <= 31, "stall {}", group.max_stall);
        }
    }
}
