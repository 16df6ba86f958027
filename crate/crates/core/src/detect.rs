//! Absolute-threshold spike detection and two-sample feature extraction.
//!
//! A detector fires on the first sample whose magnitude reaches the
//! threshold while idle, captures a 32-sample window starting `pre` samples
//! earlier and then stays busy for 32 samples. Everything here is integer
//! arithmetic on the 8-bit codes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WINDOW_LEN: usize = 32;
pub const MAX_PRE_SAMPLES: usize = 8;
pub const MIN_THRESHOLD_SEGMENT: usize = 1000;
pub const DEFAULT_K: f64 = 4.0;
pub const DEFAULT_PRE_SAMPLES: usize = 4;

/// Scale from median absolute deviation to Gaussian sigma.
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("threshold segment has {0} samples, need at least {MIN_THRESHOLD_SEGMENT}")]
    SegmentTooShort(usize),
    #[error("pre_samples {0} exceeds {MAX_PRE_SAMPLES}")]
    PreSamples(usize),
    #[error("invalid feature indices ({0}, {1})")]
    FeatureIndex(u8, u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpikeWindow {
    #[serde(rename = "ch")]
    pub channel: u16,
    #[serde(rename = "t")]
    pub t0: u64,
    #[serde(rename = "s")]
    pub samples: [i8; WINDOW_LEN],
}

/// Which two samples of a window become the features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FeatureSpec {
    /// `(max, min)` of the window.
    #[default]
    PeakTrough,
    /// The samples at two fixed offsets.
    Indexed { idx_a: u8, idx_b: u8 },
}

impl FeatureSpec {
    pub fn indexed(idx_a: u8, idx_b: u8) -> Result<Self, DetectError> {
        if idx_a == idx_b || idx_a as usize >= WINDOW_LEN || idx_b as usize >= WINDOW_LEN {
            return Err(DetectError::FeatureIndex(idx_a, idx_b));
        }
        Ok(FeatureSpec::Indexed { idx_a, idx_b })
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        match *self {
            FeatureSpec::PeakTrough => Ok(()),
            FeatureSpec::Indexed { idx_a, idx_b } => Self::indexed(idx_a, idx_b).map(|_| ()),
        }
    }
}

/// A detected spike reduced to its two features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpikeToken {
    pub t: u64,
    #[serde(rename = "ch")]
    pub channel: u16,
    pub f1: i8,
    pub f2: i8,
}

impl SpikeToken {
    pub fn from_window(window: &SpikeWindow, spec: FeatureSpec) -> Self {
        let (f1, f2) = extract_features(window, spec);
        SpikeToken {
            t: window.t0,
            channel: window.channel,
            f1,
            f2,
        }
    }
}

fn median_sorted(sorted: &[i32]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// `k * 1.4826 * MAD`, rounded to an integer LSB and floored at 1.
pub fn estimate_threshold(segment: &[i8], k: f64) -> Result<u16, DetectError> {
    if segment.len() < MIN_THRESHOLD_SEGMENT {
        return Err(DetectError::SegmentTooShort(segment.len()));
    }
    let mut v: Vec<i32> = segment.iter().map(|&x| x as i32).collect();
    v.sort_unstable();
    let med = median_sorted(&v);
    // Work in half-LSB units so a half-integer median stays exact.
    let mut dev: Vec<i32> = v.iter().map(|&x| (2 * x - (2.0 * med) as i32).abs()).collect();
    dev.sort_unstable();
    let mad = median_sorted(&dev) / 2.0;
    let th = (k * MAD_TO_SIGMA * mad).round();
    Ok(th.clamp(1.0, u16::MAX as f64) as u16)
}

/// Streaming single-channel detector; one call per sample.
#[derive(Debug, Clone)]
pub struct ChannelDetector {
    channel: u16,
    threshold: u16,
    pre: usize,
    t: u64,
    busy: usize,
    history: VecDeque<i8>,
    window: Vec<i8>,
    window_start: u64,
    collecting: bool,
}

impl ChannelDetector {
    pub fn new(channel: u16, threshold: u16, pre: usize) -> Result<Self, DetectError> {
        if pre > MAX_PRE_SAMPLES {
            return Err(DetectError::PreSamples(pre));
        }
        Ok(Self {
            channel,
            threshold,
            pre,
            t: 0,
            busy: 0,
            history: VecDeque::with_capacity(pre + 1),
            window: Vec::with_capacity(WINDOW_LEN),
            window_start: 0,
            collecting: false,
        })
    }

    pub fn is_busy(&self) -> bool {
        self.busy > 0
    }

    /// Consumes the next sample; returns the window it completes, if any.
    pub fn push(&mut self, v: i8) -> Option<SpikeWindow> {
        let t = self.t;
        self.t += 1;
        let mut done = None;
        if self.collecting {
            self.window.push(v);
            if self.window.len() == WINDOW_LEN {
                self.collecting = false;
                done = Some(SpikeWindow {
                    channel: self.channel,
                    t0: self.window_start,
                    samples: self.window[..].try_into().expect("32 samples"),
                });
            }
        } else if self.busy == 0 && (v as i16).unsigned_abs() >= self.threshold {
            self.busy = WINDOW_LEN;
            // A crossing earlier than `pre` samples into the trace cannot form
            // a full window; the detector still goes busy.
            if t >= self.pre as u64 {
                self.window.clear();
                self.window.extend(self.history.iter());
                self.window.push(v);
                self.window_start = t - self.pre as u64;
                self.collecting = true;
            }
        }
        self.busy = self.busy.saturating_sub(1);
        if self.pre > 0 {
            if self.history.len() == self.pre {
                self.history.pop_front();
            }
            self.history.push_back(v);
        }
        done
    }
}

/// Non-overlapping windows for one channel.
pub fn detect_spikes(
    channel_trace: &[i8],
    channel: u16,
    threshold: u16,
    pre_samples: usize,
) -> Result<Vec<SpikeWindow>, DetectError> {
    let mut det = ChannelDetector::new(channel, threshold, pre_samples)?;
    Ok(channel_trace.iter().filter_map(|&v| det.push(v)).collect())
}

pub fn extract_features(window: &SpikeWindow, spec: FeatureSpec) -> (i8, i8) {
    match spec {
        FeatureSpec::PeakTrough => {
            let max = *window.samples.iter().max().expect("non-empty");
            let min = *window.samples.iter().min().expect("non-empty");
            (max, min)
        }
        FeatureSpec::Indexed { idx_a, idx_b } => {
            (window.samples[idx_a as usize], window.samples[idx_b as usize])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_spike_trace, SpikeTraceConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    /// Brute-force reference: rescan the trace, re-deriving the detector's
    /// busy interval from scratch at each crossing.
    fn scan_oracle(trace: &[i8], threshold: u16, pre: usize) -> Vec<u64> {
        let mut starts = Vec::new();
        let mut next_free = 0usize;
        for (t, &v) in trace.iter().enumerate() {
            if t >= next_free && (v as i32).abs() >= threshold as i32 {
                next_free = t + WINDOW_LEN;
                if t >= pre && t - pre + WINDOW_LEN <= trace.len() {
                    starts.push((t - pre) as u64);
                }
            }
        }
        starts
    }

    fn gaussian(n: usize, sigma: f64, seed: u64) -> Vec<i8> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|_| crate::synthdata::quantize_i8(d.sample(&mut rng)))
            .collect()
    }

    fn sample_std(v: &[i8]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn zero_segment_floors_at_one() {
        assert_eq!(estimate_threshold(&[0; 2000], 4.0), Ok(1));
    }

    #[test]
    fn short_segment_is_rejected() {
        assert_eq!(
            estimate_threshold(&[0; 999], 4.0),
            Err(DetectError::SegmentTooShort(999))
        );
    }

    #[test]
    fn gaussian_threshold_matches_std_oracle() {
        let v = gaussian(100_000, 10.0, 1);
        let oracle = 4.0 * sample_std(&v);
        let th = estimate_threshold(&v, 4.0).unwrap() as f64;
        assert!((oracle - 40.0).abs() < 1.0, "oracle {oracle}");
        assert!((th - oracle).abs() <= 2.0, "{th} vs {oracle}");
    }

    #[test]
    fn mad_threshold_is_robust_to_spike_contamination() {
        let clean = gaussian(100_000, 10.0, 2);
        let mut dirty = clean.clone();
        for (i, v) in dirty.iter_mut().enumerate() {
            if i % 20 == 0 {
                *v = if i % 40 == 0 { -100 } else { 90 };
            }
        }
        let base = estimate_threshold(&clean, 4.0).unwrap() as f64;
        let robust = estimate_threshold(&dirty, 4.0).unwrap() as f64;
        assert!((robust - base).abs() / base < 0.10, "{robust} vs {base}");
        let inflation = sample_std(&dirty) / sample_std(&clean) - 1.0;
        assert!(inflation > 0.25, "std inflated only {inflation}");
    }

    #[test]
    fn zero_trace_has_no_windows() {
        assert!(detect_spikes(&[0; 500], 0, 5, 4).unwrap().is_empty());
    }

    #[test]
    fn single_crossing_opens_window_pre_samples_early() {
        let mut trace = vec![0i8; 1000];
        for (i, v) in [-10, -40, -70, -45, 20, 30, 10].iter().enumerate() {
            trace[499 + i] = *v;
        }
        // First |v| >= 30 is at 500.
        let w = detect_spikes(&trace, 3, 30, 4).unwrap();
        assert_eq!(scan_oracle(&trace, 30, 4), vec![496]);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].t0, 496);
        assert_eq!(w[0].channel, 3);
        assert_eq!(&w[0].samples[..], &trace[496..528]);
    }

    #[test]
    fn crossings_ten_apart_make_one_window() {
        let mut trace = vec![0i8; 200];
        trace[50] = 60;
        trace[60] = -60;
        assert_eq!(detect_spikes(&trace, 0, 30, 4).unwrap().len(), 1);
    }

    #[test]
    fn tie_with_threshold_fires() {
        let mut trace = vec![0i8; 100];
        trace[40] = -25;
        assert_eq!(detect_spikes(&trace, 0, 25, 0).unwrap().len(), 1);
        assert_eq!(detect_spikes(&trace, 0, 26, 0).unwrap().len(), 0);
    }

    #[test]
    fn pre_samples_above_limit_rejected() {
        assert_eq!(detect_spikes(&[0; 10], 0, 1, 9), Err(DetectError::PreSamples(9)));
    }

    #[test]
    fn features_by_definition() {
        let mut s = [7i8; WINDOW_LEN];
        let c = SpikeWindow {
            channel: 0,
            t0: 0,
            samples: s,
        };
        assert_eq!(extract_features(&c, FeatureSpec::PeakTrough), (7, 7));
        s[3] = 57;
        s[9] = -33;
        s[5] = 11;
        s[12] = -2;
        let w = SpikeWindow { samples: s, ..c };
        assert_eq!(extract_features(&w, FeatureSpec::PeakTrough), (57, -33));
        let spec = FeatureSpec::indexed(5, 12).unwrap();
        assert_eq!(extract_features(&w, spec), (11, -2));
        assert!(FeatureSpec::indexed(4, 4).is_err());
        assert!(FeatureSpec::indexed(0, 32).is_err());
    }

    #[test]
    fn zero_noise_recall_is_exact() {
        let cfg = SpikeTraceConfig {
            n_channels: 6,
            neurons_per_channel: 4,
            snr_db: f64::INFINITY,
            firing_rate_hz: 30.0,
            duration_s: 2.0,
            ..SpikeTraceConfig::default()
        };
        let (trace, labels) = gen_spike_trace(&cfg, 3).unwrap();
        for ch in 0..6u16 {
            let truth: Vec<u64> = labels.for_channel(ch).map(|e| e.t).collect();
            // Smallest template trough on the channel bounds the threshold.
            let th = 20;
            let w = detect_spikes(trace.channel(ch as usize), ch, th, 4).unwrap();
            assert_eq!(w.len(), truth.len(), "channel {ch}");
            for (win, t) in w.iter().zip(&truth) {
                assert!(win.t0.abs_diff(*t) <= 4, "window {} label {t}", win.t0);
            }
        }
    }

    proptest! {
        #[test]
        fn windows_never_overlap(
            trace in proptest::collection::vec(any::<i8>(), 0..600),
            th in 1u16..129,
            pre in 0usize..=8,
        ) {
            let w = detect_spikes(&trace, 0, th, pre).unwrap();
            let starts: Vec<u64> = w.iter().map(|w| w.t0).collect();
            prop_assert_eq!(&starts, &scan_oracle(&trace, th, pre));
            for pair in starts.windows(2) {
                prop_assert!(pair[1] - pair[0] >= WINDOW_LEN as u64);
            }
            for win in &w {
                let t0 = win.t0 as usize;
                prop_assert_eq!(&win.samples[..], &trace[t0..t0 + WINDOW_LEN]);
            }
        }
    }
}
