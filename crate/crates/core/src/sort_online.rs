//! Unsupervised, online-trained grid sorter.
//!
//! Training runs in two phases per channel. First the peak and trough
//! values of `spike_budget` spikes fill two histograms whose smoothed
//! valleys become per-axis boundaries. Then each further training spike is
//! located on the resulting grid and its index pair is hit in a small CAM
//! holding a 2-bit status per partition; all statuses decay one step every
//! `decay_period` spikes. Once frozen, a spike is assigned to its own
//! partition if that is a weak or strong cluster, otherwise to the nearest
//! valid partition on the index grid.

use serde::{Deserialize, Serialize};

use crate::detect::SpikeToken;

pub const MAX_BOUNDARIES: usize = 3;
pub const DEFAULT_BIN_WIDTH: u16 = 2;
pub const DEFAULT_DECAY_PERIOD: u32 = 64;
pub const DEFAULT_SPIKE_BUDGET: u32 = 512;
pub const DEFAULT_SMOOTHING_RADIUS: usize = 2;
pub const DEFAULT_CAM_CAPACITY: usize = 16;

/// Inclusive value range and bin width of one feature histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRange {
    pub lo: i16,
    pub hi: i16,
    pub bin_width: u16,
}

impl Default for HistogramRange {
    fn default() -> Self {
        Self {
            lo: i8::MIN as i16,
            hi: i8::MAX as i16,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

impl HistogramRange {
    pub fn n_bins(&self) -> usize {
        ((self.hi - self.lo) as usize) / self.bin_width as usize + 1
    }

    /// Bin of `v`, and whether it had to be clamped to an edge bin.
    pub fn bin_of(&self, v: i16) -> (usize, bool) {
        if v < self.lo {
            (0, true)
        } else if v > self.hi {
            (self.n_bins() - 1, true)
        } else {
            (((v - self.lo) as usize) / self.bin_width as usize, false)
        }
    }

    /// Feature value at the center of bin `b` (rounded down).
    pub fn bin_center(&self, b: f64) -> i16 {
        let w = self.bin_width as f64;
        (self.lo as f64 + b * w + (w - 1.0) / 2.0).floor() as i16
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHistograms {
    pub range: HistogramRange,
    pub counts: [Vec<u32>; 2],
    pub spike_budget: u32,
    pub clamped: u32,
}

impl FeatureHistograms {
    pub fn new(range: HistogramRange, spike_budget: u32) -> Self {
        let n = range.n_bins();
        Self {
            range,
            counts: [vec![0; n], vec![0; n]],
            spike_budget,
            clamped: 0,
        }
    }

    pub fn total(&self) -> u32 {
        self.counts[0].iter().sum()
    }

    pub fn is_full(&self) -> bool {
        self.total() >= self.spike_budget
    }

    /// Adds one spike to both histograms. Out-of-range features land in the
    /// edge bin and bump `clamped`.
    pub fn update(&mut self, f1: i8, f2: i8) {
        for (axis, v) in [f1, f2].into_iter().enumerate() {
            let (b, clamped) = self.range.bin_of(v as i16);
            self.counts[axis][b] += 1;
            self.clamped += clamped as u32;
        }
    }
}

pub fn update_histograms(mut h: FeatureHistograms, f1: i8, f2: i8) -> FeatureHistograms {
    h.update(f1, f2);
    h
}

/// Per-axis sorted boundary values; a feature equal to a boundary counts as
/// above it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBoundaries {
    pub axes: [Vec<i16>; 2],
}

impl GridBoundaries {
    pub fn new(f1: Vec<i16>, f2: Vec<i16>) -> Self {
        let b = Self { axes: [f1, f2] };
        debug_assert!(b.is_valid());
        b
    }

    pub fn is_valid(&self) -> bool {
        self.axes
            .iter()
            .all(|a| a.len() <= MAX_BOUNDARIES && a.windows(2).all(|w| w[0] < w[1]))
    }
}

/// Centered moving average; windows are truncated at the edges.
pub fn smooth(counts: &[u32], radius: usize) -> Vec<f64> {
    let n = counts.len();
    let mut prefix = vec![0u64; n + 1];
    for (i, &c) in counts.iter().enumerate() {
        prefix[i + 1] = prefix[i] + c as u64;
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(n);
            (prefix[hi] - prefix[lo]) as f64 / (hi - lo) as f64
        })
        .collect()
}

/// An interior valley of a 1-D profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Valley {
    /// Center of the minimal plateau, in bin units (may be a half bin).
    pub center: f64,
    /// `min(highest point left, highest point right) - valley value`.
    pub depth: f64,
}

/// Interior local minima: maximal runs of equal values whose neighbours on
/// both sides are strictly higher. Runs touching either end are not
/// interior.
pub fn interior_valleys(profile: &[f64]) -> Vec<Valley> {
    let n = profile.len();
    let mut prefix_max = vec![f64::NEG_INFINITY; n + 1];
    for i in 0..n {
        prefix_max[i + 1] = prefix_max[i].max(profile[i]);
    }
    let mut suffix_max = vec![f64::NEG_INFINITY; n + 1];
    for i in (0..n).rev() {
        suffix_max[i] = suffix_max[i + 1].max(profile[i]);
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && profile[j + 1] == profile[i] {
            j += 1;
        }
        if i > 0 && j + 1 < n && profile[i - 1] > profile[i] && profile[j + 1] > profile[i] {
            let depth = prefix_max[i].min(suffix_max[j + 1]) - profile[i];
            out.push(Valley {
                center: (i + j) as f64 / 2.0,
                depth,
            });
        }
        i = j + 1;
    }
    out
}

/// Keeps the `max` deepest valleys (earlier valley wins a depth tie) and
/// returns them in position order.
pub fn deepest_valleys(valleys: Vec<Valley>, max: usize) -> Vec<Valley> {
    let mut order: Vec<usize> = (0..valleys.len()).collect();
    order.sort_by(|&a, &b| valleys[b].depth.total_cmp(&valleys[a].depth).then(a.cmp(&b)));
    order.truncate(max);
    order.sort_unstable();
    order.into_iter().map(|i| valleys[i]).collect()
}

/// Smoothed-histogram valleys become boundaries, at most three per axis.
pub fn find_boundaries(h: &FeatureHistograms, smoothing_radius: usize) -> GridBoundaries {
    let axes = [0, 1].map(|axis| {
        let s = smooth(&h.counts[axis], smoothing_radius);
        let mut values: Vec<i16> = deepest_valleys(interior_valleys(&s), MAX_BOUNDARIES)
            .iter()
            .map(|v| h.range.bin_center(v.center))
            .collect();
        values.dedup();
        values
    });
    GridBoundaries { axes }
}

/// Partition index pair: the number of boundaries at or below each feature.
/// Comparisons only.
pub fn locate_partition(f1: i8, f2: i8, b: &GridBoundaries) -> (u8, u8) {
    let count = |axis: &[i16], v: i8| axis.iter().filter(|&&bv| v as i16 >= bv).count() as u8;
    (count(&b.axes[0], f1), count(&b.axes[1], f2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterStatus {
    Vacant = 0,
    Outlier = 1,
    Weak = 2,
    Strong = 3,
}

impl ClusterStatus {
    pub fn bits(self) -> u8 {
        self as u8
    }

    fn from_bits(b: u8) -> Self {
        match b {
            0 => ClusterStatus::Vacant,
            1 => ClusterStatus::Outlier,
            2 => ClusterStatus::Weak,
            _ => ClusterStatus::Strong,
        }
    }

    pub fn increment(self) -> Self {
        Self::from_bits((self.bits() + 1).min(3))
    }

    pub fn decrement(self) -> Self {
        Self::from_bits(self.bits().saturating_sub(1))
    }

    pub fn is_cluster(self) -> bool {
        self >= ClusterStatus::Weak
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamEntry {
    pub idx: (u8, u8),
    pub status: ClusterStatus,
    /// Spike count at the entry's most recent hit or insertion.
    pub last_hit: u64,
}

/// What a single [`CamState::update`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamOutcome {
    Hit,
    Inserted,
    Evicted((u8, u8)),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamState {
    pub entries: Vec<CamEntry>,
    pub capacity: usize,
    pub decay_period: u32,
    pub processed: u64,
}

impl CamState {
    pub fn new(capacity: usize, decay_period: u32) -> Self {
        assert!(capacity > 0 && decay_period > 0);
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            decay_period,
            processed: 0,
        }
    }

    pub fn status(&self, idx: (u8, u8)) -> ClusterStatus {
        self.entries
            .iter()
            .find(|e| e.idx == idx)
            .map_or(ClusterStatus::Vacant, |e| e.status)
    }

    /// One training spike located at `idx`.
    ///
    /// Hit: saturating increment. Miss: insert as outlier, evicting the
    /// lowest-status entry (least recently hit among equals) when full.
    /// Every `decay_period` spikes all entries step down once and those
    /// reaching vacant are freed.
    pub fn update(&mut self, idx: (u8, u8)) -> CamOutcome {
        let now = self.processed;
        let outcome = if let Some(e) = self.entries.iter_mut().find(|e| e.idx == idx) {
            e.status = e.status.increment();
            e.last_hit = now;
            CamOutcome::Hit
        } else {
            let fresh = CamEntry {
                idx,
                status: ClusterStatus::Outlier,
                last_hit: now,
            };
            if self.entries.len() < self.capacity {
                self.entries.push(fresh);
                CamOutcome::Inserted
            } else {
                let victim = self
                    .entries
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| (e.status, e.last_hit))
                    .map(|(i, _)| i)
                    .expect("full CAM is non-empty");
                let old = std::mem::replace(&mut self.entries[victim], fresh);
                CamOutcome::Evicted(old.idx)
            }
        };
        self.processed += 1;
        if self.processed.is_multiple_of(self.decay_period as u64) {
            for e in &mut self.entries {
                e.status = e.status.decrement();
            }
            self.entries.retain(|e| e.status != ClusterStatus::Vacant);
        }
        outcome
    }

    /// Valid (weak or strong) partitions in lexicographic order; a
    /// partition's cluster id is its position in this list.
    pub fn valid_partitions(&self) -> Vec<(u8, u8)> {
        let mut v: Vec<(u8, u8)> = self
            .entries
            .iter()
            .filter(|e| e.status.is_cluster())
            .map(|e| e.idx)
            .collect();
        v.sort_unstable();
        v
    }
}

pub fn cam_update(mut cam: CamState, idx: (u8, u8)) -> CamState {
    cam.update(idx);
    cam
}

/// Deployment-phase result of assigning one spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assignment {
    Cluster(u8),
    Outlier,
}

impl Assignment {
    pub fn unit(self) -> Option<u8> {
        match self {
            Assignment::Cluster(u) => Some(u),
            Assignment::Outlier => None,
        }
    }
}

/// Nearest valid partition by L1 distance on the index grid, ties to the
/// lexicographically smallest pair.
pub fn assign_cluster(idx: (u8, u8), cam: &CamState) -> Assignment {
    let valid = cam.valid_partitions();
    let dist = |p: &(u8, u8)| p.0.abs_diff(idx.0) as u16 + p.1.abs_diff(idx.1) as u16;
    valid
        .iter()
        .enumerate()
        .min_by_key(|(_, p)| (dist(p), **p))
        .map_or(Assignment::Outlier, |(rank, _)| Assignment::Cluster(rank as u8))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineSorterConfig {
    pub range: HistogramRange,
    pub spike_budget: u32,
    /// Spikes spent on CAM training after the boundaries are fixed.
    pub cam_training_spikes: u32,
    pub decay_period: u32,
    pub smoothing_radius: usize,
    pub cam_capacity: usize,
}

impl Default for OnlineSorterConfig {
    fn default() -> Self {
        Self {
            range: HistogramRange::default(),
            spike_budget: DEFAULT_SPIKE_BUDGET,
            cam_training_spikes: DEFAULT_SPIKE_BUDGET,
            decay_period: DEFAULT_DECAY_PERIOD,
            smoothing_radius: DEFAULT_SMOOTHING_RADIUS,
            cam_capacity: DEFAULT_CAM_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "kebab-case")]
pub enum Phase {
    Histogram { histograms: FeatureHistograms },
    CamTraining { boundaries: GridBoundaries, cam: CamState, remaining: u32 },
    Deployed(OnlineModel),
}

/// Frozen per-channel model: the model file's content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineModel {
    pub boundaries: GridBoundaries,
    pub cam: CamState,
}

impl OnlineModel {
    pub fn classify(&self, f1: i8, f2: i8) -> Assignment {
        assign_cluster(locate_partition(f1, f2, &self.boundaries), &self.cam)
    }

    pub fn n_clusters(&self) -> usize {
        self.cam.valid_partitions().len()
    }
}

/// Per-channel sorter walking through the histogram, CAM-training and
/// deployed phases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineSorter {
    pub config: OnlineSorterConfig,
    pub phase: Phase,
}

impl OnlineSorter {
    pub fn new(config: OnlineSorterConfig) -> Self {
        Self {
            config,
            phase: Phase::Histogram {
                histograms: FeatureHistograms::new(config.range, config.spike_budget),
            },
        }
    }

    /// Feeds one spike. Returns its assignment once deployed; `None` while
    /// still training.
    pub fn process(&mut self, f1: i8, f2: i8) -> Option<Assignment> {
        let cfg = self.config;
        match &mut self.phase {
            Phase::Histogram { histograms } => {
                histograms.update(f1, f2);
                if histograms.is_full() {
                    self.phase = Phase::CamTraining {
                        boundaries: find_boundaries(histograms, cfg.smoothing_radius),
                        cam: CamState::new(cfg.cam_capacity, cfg.decay_period),
                        remaining: cfg.cam_training_spikes,
                    };
                    self.maybe_deploy();
                }
                None
            }
            Phase::CamTraining {
                boundaries,
                cam,
                remaining,
            } => {
                cam.update(locate_partition(f1, f2, boundaries));
                *remaining = remaining.saturating_sub(1);
                self.maybe_deploy();
                None
            }
            Phase::Deployed(model) => Some(model.classify(f1, f2)),
        }
    }

    fn maybe_deploy(&mut self) {
        if let Phase::CamTraining {
            boundaries,
            cam,
            remaining: 0,
        } = &self.phase
        {
            self.phase = Phase::Deployed(OnlineModel {
                boundaries: boundaries.clone(),
                cam: cam.clone(),
            });
        }
    }

    pub fn model(&self) -> Option<&OnlineModel> {
        match &self.phase {
            Phase::Deployed(m) => Some(m),
            _ => None,
        }
    }
}

/// Trains one channel on a token stream; tokens beyond the training budget
/// are ignored. Returns `None` if the stream is too short to finish
/// training.
pub fn train_online(tokens: &[SpikeToken], config: OnlineSorterConfig) -> Option<OnlineModel> {
    let mut sorter = OnlineSorter::new(config);
    for tok in tokens {
        if sorter.model().is_some() {
            break;
        }
        sorter.process(tok.f1, tok.f2);
    }
    sorter.model().cloned()
}
