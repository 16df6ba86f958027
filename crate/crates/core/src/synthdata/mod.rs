//! Synthetic datasets: extracellular traces with exact spike labels and
//! cosine-tuned center-out reach sessions.
//!
//! Every generator is a pure function of `(config, seed)`. Per-channel and
//! per-neuron randomness is drawn from independent ChaCha streams, so the
//! output does not depend on iteration order.

mod dataset;

pub use dataset::{
    load_dataset, load_jsonl, load_labels, load_session, load_trace, read_jsonl, read_trace,
    session_sidecar_json, sidecar_path, store_dataset, store_jsonl, store_labels, store_session,
    store_trace, write_jsonl, write_session_csv, write_trace, Dataset, DatasetError,
    TRACE_FORMAT_VERSION, TRACE_MAGIC,
};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{MAX_PRE_SAMPLES, WINDOW_LEN};
use crate::{NeuronId, SortedEvent};

/// Minimum gap between two ground-truth spikes on one channel. A window plus
/// the largest crossing offset, so no spike can fall inside the previous
/// spike's detection busy period.
pub const REFRACTORY_SAMPLES: u64 = (WINDOW_LEN + MAX_PRE_SAMPLES) as u64;

/// Spikes are never placed closer than this to either end of a trace, so
/// every detection window fits inside the recording.
pub const EDGE_GUARD_SAMPLES: u64 = 2 * WINDOW_LEN as u64;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error(
        "templates clip the 8-bit range: peak {peak:.1} LSB + 3 x noise sigma {sigma:.1} LSB exceeds 127"
    )]
    TemplateClipping { peak: f64, sigma: f64 },
    #[error("channels have unequal length ({expected} vs {found})")]
    RaggedChannels { expected: usize, found: usize },
}

/// Multi-channel 8-bit voltage recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTrace {
    pub sample_rate: u32,
    channels: Vec<Vec<i8>>,
}

impl RawTrace {
    pub fn new(sample_rate: u32, channels: Vec<Vec<i8>>) -> Result<Self, SynthError> {
        if let Some(first) = channels.first() {
            let expected = first.len();
            if let Some(bad) = channels.iter().find(|c| c.len() != expected) {
                return Err(SynthError::RaggedChannels {
                    expected,
                    found: bad.len(),
                });
            }
        }
        Ok(Self {
            sample_rate,
            channels,
        })
    }

    pub fn zeros(n_channels: usize, n_samples: usize, sample_rate: u32) -> Self {
        Self {
            sample_rate,
            channels: vec![vec![0; n_samples]; n_channels],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn channel(&self, ch: usize) -> &[i8] {
        &self.channels[ch]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [i8] {
        &mut self.channels[ch]
    }

    pub fn channels(&self) -> &[Vec<i8>] {
        &self.channels
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate as f64
    }
}

/// One ground-truth spike: onset sample of the inserted template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelEvent {
    pub t: u64,
    #[serde(rename = "ch")]
    pub channel: u16,
    #[serde(rename = "nid")]
    pub neuron: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruthLabels {
    pub events: Vec<LabelEvent>,
}

impl GroundTruthLabels {
    pub fn for_channel(&self, ch: u16) -> impl Iterator<Item = &LabelEvent> {
        self.events.iter().filter(move |e| e.channel == ch)
    }
}

/// Difficulty presets for [`SpikeTraceConfig`]. These are constructed
/// values (SNR and template separation), not fits to any recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn snr_db(self) -> f64 {
        match self {
            Difficulty::Easy => 30.0,
            Difficulty::Medium => 22.0,
            Difficulty::Hard => 17.0,
        }
    }

    pub fn separation(self) -> f64 {
        match self {
            Difficulty::Easy => 1.0,
            Difficulty::Medium => 0.8,
            Difficulty::Hard => 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTraceConfig {
    pub n_channels: usize,
    pub neurons_per_channel: usize,
    /// `20 log10(amplitude_lsb / noise_sigma)`; `f64::INFINITY` disables noise.
    pub snr_db: f64,
    /// Mean firing rate of every neuron.
    pub firing_rate_hz: f64,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Trough depth of the largest template on each channel.
    pub amplitude_lsb: f64,
    /// Template distinctness in (0, 1]; 1 spreads shapes the furthest.
    pub separation: f64,
}

impl Default for SpikeTraceConfig {
    fn default() -> Self {
        Self {
            n_channels: 96,
            neurons_per_channel: 3,
            snr_db: 22.0,
            firing_rate_hz: 10.0,
            duration_s: 1.0,
            sample_rate: 30_000,
            amplitude_lsb: 80.0,
            separation: 0.8,
        }
    }
}

impl SpikeTraceConfig {
    pub fn preset(difficulty: Difficulty) -> Self {
        Self {
            snr_db: difficulty.snr_db(),
            separation: difficulty.separation(),
            ..Self::default()
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        if self.snr_db.is_infinite() && self.snr_db > 0.0 {
            0.0
        } else {
            self.amplitude_lsb / 10f64.powf(self.snr_db / 20.0)
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(2..=4).contains(&self.neurons_per_channel) {
            return bad("neurons_per_channel must be in 2..=4");
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration_s must be positive");
        }
        if self.n_channels == 0 || self.n_channels > u16::MAX as usize {
            return bad("n_channels must be in 1..=65535");
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if !(self.firing_rate_hz >= 0.0 && self.firing_rate_hz.is_finite()) {
            return bad("firing_rate_hz must be finite and non-negative");
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return bad("snr_db must be a number or +inf");
        }
        if !(self.separation > 0.0 && self.separation <= 1.0) {
            return bad("separation must be in (0, 1]");
        }
        if !(self.amplitude_lsb > 0.0) {
            return bad("amplitude_lsb must be positive");
        }
        let total_rate = self.firing_rate_hz * self.neurons_per_channel as f64;
        if total_rate > 0.0 {
            let mean_gap = self.sample_rate as f64 / total_rate;
            if mean_gap <= 2.0 * REFRACTORY_SAMPLES as f64 {
                return bad("firing rate too high for the refractory floor");
            }
        }
        let sigma = self.noise_sigma();
        if self.amplitude_lsb + 3.0 * sigma > 127.0 {
            return Err(SynthError::TemplateClipping {
                peak: self.amplitude_lsb,
                sigma,
            });
        }
        Ok(())
    }
}

/// Biphasic spike shape: depolarization trough, repolarization peak and an
/// alpha-shaped relaxation tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateShape {
    pub trough_depth: f64,
    pub trough_center: f64,
    pub trough_width: f64,
    pub peak_height: f64,
    pub peak_center: f64,
    pub peak_width: f64,
    pub tail_amplitude: f64,
    pub tail_tau: f64,
}

impl TemplateShape {
    pub fn value(&self, tau: f64) -> f64 {
        let gauss = |c: f64, w: f64| (-(tau - c).powi(2) / (2.0 * w * w)).exp();
        let mut v = -self.trough_depth * gauss(self.trough_center, self.trough_width)
            + self.peak_height * gauss(self.peak_center, self.peak_width);
        let dt = tau - self.peak_center;
        if dt > 0.0 {
            let u = dt / self.tail_tau;
            v += self.tail_amplitude * u * (1.0 - u).exp();
        }
        v
    }

    pub fn samples(&self) -> [f64; WINDOW_LEN] {
        std::array::from_fn(|i| self.value(i as f64))
    }
}

/// Distinct templates for the neurons of one channel.
///
/// Trough depth decreases with the neuron index while the peak/trough ratio
/// follows a shuffled ladder, so shapes differ along both extrema and in the
/// timing of the repolarization peak.
pub fn channel_templates(
    n_neurons: usize,
    amplitude: f64,
    separation: f64,
    rng: &mut impl Rng,
) -> Vec<TemplateShape> {
    let span = (n_neurons.max(2) - 1) as f64;
    let mut ladder: Vec<usize> = (0..n_neurons).collect();
    ladder.shuffle(rng);
    (0..n_neurons)
        .map(|k| {
            let kf = k as f64 / span;
            let rung = ladder[k] as f64 / span;
            let jitter = |rng: &mut dyn rand::RngCore, s: f64| 1.0 + s * (rng.random::<f64>() - 0.5);
            let trough_depth = amplitude * (1.0 - 0.55 * separation * kf) * jitter(rng, 0.02);
            let ratio = (0.2 + 0.7 * separation * rung) * jitter(rng, 0.02);
            let trough_center = 6.0 + 0.3 * rng.random::<f64>();
            let trough_width = 1.3 + 0.5 * rng.random::<f64>();
            let peak_center = trough_center + 5.0 + 4.0 * separation * rung + rng.random::<f64>();
            TemplateShape {
                trough_depth,
                trough_center,
                trough_width,
                peak_height: trough_depth * ratio,
                peak_center,
                peak_width: 2.0 + 1.5 * rng.random::<f64>(),
                tail_amplitude: -trough_depth * (0.05 + 0.15 * separation * kf),
                tail_tau: 4.0 + 3.0 * rng.random::<f64>(),
            }
        })
        .collect()
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws spike onsets for one channel: a renewal process whose intervals are
/// the refractory floor plus an exponential, with the exponential mean
/// shortened so the long-run rate equals `total_rate`.
fn channel_spike_times(
    total_rate: f64,
    sample_rate: f64,
    n_samples: u64,
    rng: &mut impl Rng,
) -> Vec<u64> {
    if total_rate <= 0.0 || n_samples <= 2 * EDGE_GUARD_SAMPLES {
        return Vec::new();
    }
    let mean_gap = sample_rate / total_rate;
    let exp = Exp::new(1.0 / (mean_gap - REFRACTORY_SAMPLES as f64)).expect("positive rate");
    let last = n_samples - EDGE_GUARD_SAMPLES;
    let mut times = Vec::new();
    let mut t = EDGE_GUARD_SAMPLES as f64 + exp.sample(rng);
    while (t as u64) < last {
        times.push(t as u64);
        t = t.floor() + REFRACTORY_SAMPLES as f64 + exp.sample(rng);
    }
    times
}

/// Labelled synthetic trace: per-neuron templates inserted at renewal spike
/// times plus white Gaussian noise, rounded and saturated to 8 bits.
pub fn gen_spike_trace(
    config: &SpikeTraceConfig,
    seed: u64,
) -> Result<(RawTrace, GroundTruthLabels), SynthError> {
    config.validate()?;
    let n_samples = (config.duration_s * config.sample_rate as f64).round() as usize;
    let sigma = config.noise_sigma();
    let mut channels = Vec::with_capacity(config.n_channels);
    let mut events = Vec::new();

    for ch in 0..config.n_channels {
        let mut rng = stream_rng(seed, 2 * ch as u64);
        let templates = channel_templates(
            config.neurons_per_channel,
            config.amplitude_lsb,
            config.separation,
            &mut rng,
        );
        let shapes: Vec<[f64; WINDOW_LEN]> = templates.iter().map(TemplateShape::samples).collect();
        let total_rate = config.firing_rate_hz * config.neurons_per_channel as f64;
        let times = channel_spike_times(
            total_rate,
            config.sample_rate as f64,
            n_samples as u64,
            &mut rng,
        );

        let mut analog = vec![0.0f64; n_samples];
        for &t in &times {
            let nid = rng.random_range(0..config.neurons_per_channel);
            let start = t as usize;
            for (dst, v) in analog[start..start + WINDOW_LEN].iter_mut().zip(&shapes[nid]) {
                *dst += v;
            }
            events.push(LabelEvent {
                t,
                channel: ch as u16,
                neuron: nid as u8,
            });
        }

        if sigma > 0.0 {
            let mut noise_rng = stream_rng(seed, 2 * ch as u64 + 1);
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for v in analog.iter_mut() {
                *v += normal.sample(&mut noise_rng);
            }
        }
        channels.push(analog.iter().map(|&v| quantize_i8(v)).collect());
    }

    events.sort_by_key(|e| (e.t, e.channel));
    let trace = RawTrace::new(config.sample_rate, channels)?;
    Ok((trace, GroundTruthLabels { events }))
}

/// Rounds to the nearest LSB and saturates to the signed 8-bit range.
pub fn quantize_i8(v: f64) -> i8 {
    v.round().clamp(i8::MIN as f64, i8::MAX as f64) as i8
}

/// Cosine tuning: expected rate is `baseline + gain * speed * cos(theta - pd)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningCurve {
    pub baseline_rate: f64,
    pub modulation_gain: f64,
    pub preferred_direction: f64,
}

impl TuningCurve {
    /// Expected firing rate (Hz) for a velocity, clamped at zero.
    pub fn rate(&self, vx: f64, vy: f64) -> f64 {
        let (s, c) = self.preferred_direction.sin_cos();
        (self.baseline_rate + self.modulation_gain * (vx * c + vy * s)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum TuningPolicy {
    /// Draw every neuron's curve from the seed: baseline and gain uniform in
    /// the given ranges, preferred direction uniform on the circle.
    Random {
        baseline_hz: (f64, f64),
        gain_hz_per_mm_s: (f64, f64),
    },
    /// Use these curves verbatim; the length must equal `n_neurons`.
    Fixed { curves: Vec<TuningCurve> },
}

impl Default for TuningPolicy {
    fn default() -> Self {
        TuningPolicy::Random {
            baseline_hz: (5.0, 25.0),
            gain_hz_per_mm_s: (0.05, 0.3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachConfig {
    pub n_neurons: usize,
    /// Repetitions of each of the 8 targets.
    pub trials_per_target: usize,
    pub bin_ms: u32,
    pub tuning: TuningPolicy,
    pub reach_distance_mm: f64,
    pub reach_duration_s: f64,
    pub hold_bins: usize,
    pub rest_bins: usize,
    /// Sorted units recorded on each electrode; neuron `i` sits on channel
    /// `i / units_per_channel`.
    pub units_per_channel: usize,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            n_neurons: 40,
            trials_per_target: 10,
            bin_ms: 100,
            tuning: TuningPolicy::default(),
            reach_distance_mm: 80.0,
            reach_duration_s: 1.0,
            hold_bins: 2,
            rest_bins: 3,
            units_per_channel: 2,
        }
    }
}

pub const N_TARGETS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachBin {
    pub bin: usize,
    pub vx: f64,
    pub vy: f64,
    pub counts: Vec<u32>,
}

/// One reach-and-return trial; `end_bin` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub target_angle: f64,
    pub start_bin: usize,
    pub end_bin: usize,
}

impl Trial {
    pub fn bins(&self) -> std::ops::Range<usize> {
        self.start_bin..self.end_bin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionNeuron {
    pub id: NeuronId,
    pub tuning: TuningCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachSession {
    pub bin_ms: u32,
    pub seed: u64,
    pub bins: Vec<ReachBin>,
    pub trials: Vec<Trial>,
    pub neurons: Vec<SessionNeuron>,
}

impl ReachSession {
    pub fn n_neurons(&self) -> usize {
        self.neurons.len()
    }

    pub fn velocity(&self, bin: usize) -> [f64; 2] {
        let b = &self.bins[bin];
        [b.vx, b.vy]
    }

    /// Restricts the session to a subset of trials, renumbering bins.
    pub fn subset(&self, trial_indices: &[usize]) -> ReachSession {
        let mut bins = Vec::new();
        let mut trials = Vec::new();
        for &ti in trial_indices {
            let trial = self.trials[ti];
            let start = bins.len();
            for b in trial.bins() {
                let mut bin = self.bins[b].clone();
                bin.bin = bins.len();
                bins.push(bin);
            }
            trials.push(Trial {
                target_angle: trial.target_angle,
                start_bin: start,
                end_bin: bins.len(),
            });
        }
        ReachSession {
            bin_ms: self.bin_ms,
            seed: self.seed,
            bins,
            trials,
            neurons: self.neurons.clone(),
        }
    }
}

/// Minimum-jerk speed profile for a point-to-point move of length `distance`
/// over `duration`, evaluated at normalized time `tau` in [0, 1].
pub fn min_jerk_speed(distance: f64, duration: f64, tau: f64) -> f64 {
    if !(0.0..=1.0).contains(&tau) {
        return 0.0;
    }
    distance / duration * 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau)
}

fn reach_tunings(config: &ReachConfig, rng: &mut impl Rng) -> Result<Vec<TuningCurve>, SynthError> {
    match &config.tuning {
        TuningPolicy::Fixed { curves } => {
            if curves.len() != config.n_neurons {
                return Err(SynthError::InvalidConfig(format!(
                    "{} fixed tuning curves for {} neurons",
                    curves.len(),
                    config.n_neurons
                )));
            }
            if curves.iter().any(|c| !(c.baseline_rate >= 0.0)) {
                return Err(SynthError::InvalidConfig(
                    "baseline_rate must be non-negative".into(),
                ));
            }
            Ok(curves.clone())
        }
        TuningPolicy::Random {
            baseline_hz,
            gain_hz_per_mm_s,
        } => {
            if !(0.0 <= baseline_hz.0 && baseline_hz.0 <= baseline_hz.1)
                || !(gain_hz_per_mm_s.0 <= gain_hz_per_mm_s.1)
            {
                return Err(SynthError::InvalidConfig("empty tuning range".into()));
            }
            Ok((0..config.n_neurons)
                .map(|_| TuningCurve {
                    baseline_rate: lerp(baseline_hz, rng.random()),
                    modulation_gain: lerp(gain_hz_per_mm_s, rng.random()),
                    preferred_direction: 2.0 * PI * rng.random::<f64>(),
                })
                .collect())
        }
    }
}

fn lerp(range: &(f64, f64), u: f64) -> f64 {
    range.0 + (range.1 - range.0) * u
}

/// Center-out-and-return session with 8 equidistant targets. Each trial is
/// an outward minimum-jerk reach, a hold, the return reach and a rest
/// period; binned counts are Poisson draws of the cosine-tuned rates.
pub fn gen_reach_session(config: &ReachConfig, seed: u64) -> Result<ReachSession, SynthError> {
    if config.n_neurons == 0 {
        return Err(SynthError::InvalidConfig("n_neurons must be >= 1".into()));
    }
    if config.trials_per_target == 0 {
        return Err(SynthError::InvalidConfig("trials must be >= 1".into()));
    }
    if config.bin_ms == 0 || config.units_per_channel == 0 {
        return Err(SynthError::InvalidConfig(
            "bin_ms and units_per_channel must be positive".into(),
        ));
    }
    if !(config.reach_duration_s > 0.0 && config.reach_distance_mm >= 0.0) {
        return Err(SynthError::InvalidConfig("bad reach geometry".into()));
    }
    let bin_s = config.bin_ms as f64 / 1000.0;
    let mut rng = stream_rng(seed, 0);
    let tunings = reach_tunings(config, &mut rng)?;
    let neurons: Vec<SessionNeuron> = tunings
        .iter()
        .enumerate()
        .map(|(i, &tuning)| SessionNeuron {
            id: NeuronId::new(
                (i / config.units_per_channel) as u16,
                (i % config.units_per_channel) as u8,
            ),
            tuning,
        })
        .collect();

    let mut velocities: Vec<[f64; 2]> = Vec::new();
    let mut trials = Vec::new();
    for _ in 0..config.trials_per_target {
        let mut order: Vec<usize> = (0..N_TARGETS).collect();
        order.shuffle(&mut rng);
        for target in order {
            let angle = 2.0 * PI * target as f64 / N_TARGETS as f64;
            let duration = config.reach_duration_s * rng.random_range(0.9..1.1);
            let distance = config.reach_distance_mm * rng.random_range(0.9..1.1);
            let n_move = ((duration / bin_s).round() as usize).max(1);
            let start = velocities.len();
            for dir in [angle, angle + PI] {
                let (s, c) = dir.sin_cos();
                for b in 0..n_move {
                    let tau = (b as f64 + 0.5) * bin_s / duration;
                    let speed = min_jerk_speed(distance, duration, tau);
                    velocities.push([speed * c, speed * s]);
                }
                if dir == angle {
                    velocities.extend(std::iter::repeat_n([0.0, 0.0], config.hold_bins));
                }
            }
            velocities.extend(std::iter::repeat_n([0.0, 0.0], config.rest_bins));
            trials.push(Trial {
                target_angle: angle,
                start_bin: start,
                end_bin: velocities.len(),
            });
        }
    }

    let mut count_rng = stream_rng(seed, 1);
    let bins = velocities
        .iter()
        .enumerate()
        .map(|(bin, &[vx, vy])| ReachBin {
            bin,
            vx,
            vy,
            counts: tunings
                .iter()
                .map(|t| poisson_draw(t.rate(vx, vy) * bin_s, &mut count_rng))
                .collect(),
        })
        .collect();

    Ok(ReachSession {
        bin_ms: config.bin_ms,
        seed,
        bins,
        trials,
        neurons,
    })
}

/// Sorted events consistent with a session's binned counts: every count
/// becomes one event at a uniformly drawn sample inside its bin. Returned in
/// time order (ties by channel, then unit).
pub fn reach_events(session: &ReachSession, sample_rate: u32, seed: u64) -> Vec<SortedEvent> {
    let bin_samples = (session.bin_ms as u64 * sample_rate as u64 / 1000).max(1);
    let mut rng = stream_rng(seed, 2);
    let mut events = Vec::new();
    for b in &session.bins {
        let t0 = b.bin as u64 * bin_samples;
        for (n, &c) in session.neurons.iter().zip(&b.counts) {
            for _ in 0..c {
                events.push(SortedEvent {
                    t: t0 + rng.random_range(0..bin_samples),
                    channel: n.id.channel,
                    unit: n.id.unit,
                });
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.channel, e.unit));
    events
}

pub(crate) fn poisson_draw(mean: f64, rng: &mut impl Rng) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite mean").sample(rng) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_channel(rate: f64, duration: f64, snr: f64) -> SpikeTraceConfig {
        SpikeTraceConfig {
            n_channels: 1,
            neurons_per_channel: 2,
            snr_db: snr,
            firing_rate_hz: rate,
            duration_s: duration,
            ..SpikeTraceConfig::default()
        }
    }

    #[test]
    fn zero_noise_single_spike_is_confined_to_its_window() {
        // Rate chosen so a 0.05 s trace holds a handful of spikes; pick a
        // seed whose trace has exactly one.
        let cfg = one_channel(4.0, 0.05, f64::INFINITY);
        let (trace, labels) = (0..200)
            .map(|s| gen_spike_trace(&cfg, s).unwrap())
            .find(|(_, l)| l.events.len() == 1)
            .expect("some seed yields one spike");
        let t = labels.events[0].t as usize;
        for (i, &v) in trace.channel(0).iter().enumerate() {
            if !(t..t + WINDOW_LEN).contains(&i) {
                assert_eq!(v, 0, "sample {i} outside the window");
            }
        }
        assert!(trace.channel(0)[t..t + WINDOW_LEN].iter().any(|&v| v != 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SpikeTraceConfig {
            n_channels: 4,
            ..SpikeTraceConfig::default()
        };
        assert_eq!(gen_spike_trace(&cfg, 9).unwrap(), gen_spike_trace(&cfg, 9).unwrap());
        assert_ne!(gen_spike_trace(&cfg, 9).unwrap().0, gen_spike_trace(&cfg, 10).unwrap().0);
        let rc = ReachConfig::default();
        assert_eq!(gen_reach_session(&rc, 3).unwrap(), gen_reach_session(&rc, 3).unwrap());
    }

    #[test]
    fn labels_respect_refractory_and_neuron_range() {
        let cfg = SpikeTraceConfig {
            n_channels: 3,
            neurons_per_channel: 4,
            firing_rate_hz: 60.0,
            duration_s: 2.0,
            ..SpikeTraceConfig::default()
        };
        let (_, labels) = gen_spike_trace(&cfg, 1).unwrap();
        assert!(labels.events.windows(2).all(|w| w[0].t <= w[1].t));
        for ch in 0..3 {
            let ts: Vec<_> = labels.for_channel(ch).collect();
            assert!(ts.windows(2).all(|w| w[1].t - w[0].t >= REFRACTORY_SAMPLES));
            assert!(ts.iter().all(|e| e.neuron < 4));
        }
    }

    #[test]
    fn per_neuron_count_matches_poisson_mean() {
        // 10 Hz for 10 s: mean 100 per neuron. Bounds are the Poisson
        // quantiles at +-3 sigma, computed from the CDF.
        use statrs::distribution::{DiscreteCDF, Poisson as P};
        let p = P::new(100.0).unwrap();
        let lo = p.inverse_cdf(0.00135);
        let hi = p.inverse_cdf(0.99865);
        let cfg = one_channel(10.0, 10.0, 20.0);
        for seed in 0..5 {
            let (_, labels) = gen_spike_trace(&cfg, seed).unwrap();
            for nid in 0..2 {
                let n = labels.events.iter().filter(|e| e.neuron == nid).count() as u64;
                assert!((lo..=hi).contains(&n), "seed {seed} neuron {nid}: {n}");
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = one_channel(10.0, 1.0, 20.0);
        cfg.neurons_per_channel = 5;
        assert!(matches!(gen_spike_trace(&cfg, 0), Err(SynthError::InvalidConfig(_))));
        let mut cfg = one_channel(10.0, 0.0, 20.0);
        cfg.duration_s = 0.0;
        assert!(matches!(gen_spike_trace(&cfg, 0), Err(SynthError::InvalidConfig(_))));
        let cfg = one_channel(10.0, 1.0, 3.0);
        assert!(matches!(
            gen_spike_trace(&cfg, 0),
            Err(SynthError::TemplateClipping { .. })
        ));
    }

    #[test]
    fn templates_put_the_trough_first_and_deepest() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for sep in [0.5, 1.0] {
            for t in channel_templates(4, 60.0, sep, &mut rng) {
                let s = t.samples();
                let (arg, _) = s
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .unwrap();
                assert!(arg <= 8, "extremum at {arg}");
                assert!(s[arg] < 0.0);
            }
        }
    }

    #[test]
    fn reach_session_has_eight_records_per_repetition() {
        let cfg = ReachConfig {
            trials_per_target: 3,
            n_neurons: 5,
            ..ReachConfig::default()
        };
        let s = gen_reach_session(&cfg, 0).unwrap();
        assert_eq!(s.trials.len(), 8 * 3);
        let mut angles: Vec<_> = s.trials.iter().map(|t| (t.target_angle * 1e6) as i64).collect();
        angles.sort();
        angles.dedup();
        assert_eq!(angles.len(), 8);
        assert_eq!(s.trials.last().unwrap().end_bin, s.bins.len());
        assert!(s.bins.iter().all(|b| b.vx.is_finite() && b.vy.is_finite()));
    }

    #[test]
    fn untuned_counts_do_not_depend_on_direction() {
        // Chi-squared homogeneity of total counts across the 8 targets for
        // gain = 0 neurons; each target contributes the same number of bins
        // only approximately, so compare rates per bin.
        let curves = vec![
            TuningCurve {
                baseline_rate: 20.0,
                modulation_gain: 0.0,
                preferred_direction: 0.0,
            };
            4
        ];
        let cfg = ReachConfig {
            n_neurons: 4,
            trials_per_target: 30,
            tuning: TuningPolicy::Fixed { curves },
            ..ReachConfig::default()
        };
        let s = gen_reach_session(&cfg, 11).unwrap();
        let mut totals = [0f64; 8];
        let mut nbins = [0f64; 8];
        for t in &s.trials {
            let k = ((t.target_angle / (2.0 * PI) * 8.0).round() as usize) % 8;
            for b in t.bins() {
                totals[k] += s.bins[b].counts.iter().sum::<u32>() as f64;
                nbins[k] += 1.0;
            }
        }
        let rate: f64 = totals.iter().sum::<f64>() / nbins.iter().sum::<f64>();
        let chi2: f64 = (0..8)
            .map(|k| {
                let e = rate * nbins[k];
                (totals[k] - e).powi(2) / e
            })
            .sum();
        // 7 degrees of freedom, 99.9% quantile is 24.32.
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn preferred_direction_zero_fires_more_rightward() {
        let curves = vec![TuningCurve {
            baseline_rate: 20.0,
            modulation_gain: 0.2,
            preferred_direction: 0.0,
        }];
        let cfg = ReachConfig {
            n_neurons: 1,
            trials_per_target: 20,
            tuning: TuningPolicy::Fixed { curves },
            ..ReachConfig::default()
        };
        let s = gen_reach_session(&cfg, 5).unwrap();
        let (mut right, mut nr, mut left, mut nl) = (0.0, 0.0, 0.0, 0.0);
        for b in &s.bins {
            if b.vx > 20.0 {
                right += b.counts[0] as f64;
                nr += 1.0;
            } else if b.vx < -20.0 {
                left += b.counts[0] as f64;
                nl += 1.0;
            }
        }
        assert!(nr + nl >= 1000.0, "only {} moving bins", nr + nl);
        assert!(right / nr > left / nl);
    }

    #[test]
    fn empirical_bin_mean_tracks_tuning_curve() {
        // Poisson consistency: mean count of a fixed-velocity bin stream is
        // within 3 sigma of rate * bin over >= 1000 bins.
        let tuning = TuningCurve {
            baseline_rate: 12.0,
            modulation_gain: 0.25,
            preferred_direction: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (vx, vy) = (40.0, 25.0);
        let mean = tuning.rate(vx, vy) * 0.1;
        let n = 4000;
        let total: u64 = (0..n).map(|_| poisson_draw(mean, &mut rng) as u64).sum();
        let emp = total as f64 / n as f64;
        assert!((emp - mean).abs() < 3.0 * (mean / n as f64).sqrt());
    }

    #[test]
    fn min_jerk_profile_covers_the_distance() {
        let n = 10_000;
        let dist: f64 = (0..n)
            .map(|i| min_jerk_speed(80.0, 1.0, (i as f64 + 0.5) / n as f64) / n as f64)
            .sum();
        assert!((dist - 80.0).abs() < 1e-6);
    }
}
