//! Binning and the implant-side event accumulator.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DecodeError, FixedPointScales};
use crate::{NeuronId, SortedEvent};

/// Fractional bits kept below the largest weight's leading bit in the exact
/// grid. Headroom above 2^60 leaves room for 2^67 accumulated spikes in i128.
const EXACT_FRACTION_BITS: i32 = 60;
pub const WEIGHT_BITS: u32 = 16;
pub const ACCUMULATOR_BITS: u32 = 32;

/// Spike counts of the selected neurons in one bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinnedRates {
    pub bin: usize,
    pub counts: Vec<u32>,
}

/// Samples per bin at the given rate.
pub fn bin_samples(bin_ms: u32, sample_rate: u32) -> u64 {
    (bin_ms as u64 * sample_rate as u64 / 1000).max(1)
}

/// Counts per half-open bin `[k·T, (k+1)·T)`. Events of non-selected neurons
/// are ignored. At least `n_bins` bins are returned, more if events run past.
pub fn bin_spikes(
    events: &[SortedEvent],
    bin_ms: u32,
    sample_rate: u32,
    selected: &[NeuronId],
    n_bins: usize,
) -> Vec<BinnedRates> {
    let t = bin_samples(bin_ms, sample_rate);
    let lane: HashMap<NeuronId, usize> = selected.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let needed = events
        .iter()
        .filter(|e| lane.contains_key(&NeuronId::new(e.channel, e.unit)))
        .map(|e| (e.t / t) as usize + 1)
        .max()
        .unwrap_or(0);
    let mut bins: Vec<BinnedRates> = (0..n_bins.max(needed))
        .map(|bin| BinnedRates { bin, counts: vec![0; selected.len()] })
        .collect();
    for e in events {
        if let Some(&j) = lane.get(&NeuronId::new(e.channel, e.unit)) {
            bins[(e.t / t) as usize].counts[j] += 1;
        }
    }
    bins
}

fn leading_exponent(m: &DMatrix<f64>) -> Option<i32> {
    let max = m.amax();
    (max > 0.0 && max.is_finite()).then(|| max.log2().floor() as i32 + 1)
}

/// Exponent `g` of the exact grid for `m`: entries are multiples of `2^g`.
pub fn exact_grid_exponent(m: &DMatrix<f64>) -> i32 {
    leading_exponent(m).unwrap_or(0) - EXACT_FRACTION_BITS
}

/// Rounds every entry to the exact grid. Rounded values stay representable
/// in f64, so integer sums over the grid reproduce `E z` exactly.
pub fn snap_to_exact_grid(m: &DMatrix<f64>) -> DMatrix<f64> {
    let g = exact_grid_exponent(m);
    m.map(|v| (v * 2f64.powi(-g)).round() * 2f64.powi(g))
}

/// Power-of-two scale giving the largest weight the widest 16-bit code.
pub fn quant_exponent(m: &DMatrix<f64>) -> i32 {
    match leading_exponent(m) {
        Some(e) => e - (WEIGHT_BITS as i32 - 1),
        None => 0,
    }
}

pub fn fixed_point_scales(e: &DMatrix<f64>) -> FixedPointScales {
    FixedPointScales {
        exact_exp: exact_grid_exponent(e),
        quant_exp: quant_exponent(e),
        weight_bits: WEIGHT_BITS,
        accumulator_bits: ACCUMULATOR_BITS,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImplantMode {
    /// Integer weights on the exact grid with wide accumulators; emits the
    /// float product exactly.
    Float,
    /// 16-bit weights and 32-bit accumulators.
    Fixed,
}

/// Weights of one mode as integers, column per neuron.
#[derive(Debug, Clone, PartialEq)]
struct IntWeights {
    mode: ImplantMode,
    exp: i32,
    /// Neuron-major: `cols[j * d + i]` is `E[i, j]` in grid units.
    cols: Vec<i64>,
    d: usize,
}

impl IntWeights {
    fn new(e: &DMatrix<f64>, mode: ImplantMode) -> Self {
        let exp = match mode {
            ImplantMode::Float => exact_grid_exponent(e),
            ImplantMode::Fixed => quant_exponent(e),
        };
        let scale = 2f64.powi(-exp);
        let d = e.nrows();
        let mut cols = Vec::with_capacity(e.len());
        for j in 0..e.ncols() {
            for i in 0..d {
                let q = (e[(i, j)] * scale).round();
                let q = match mode {
                    ImplantMode::Float => q as i64,
                    ImplantMode::Fixed => q.clamp(i16::MIN as f64, i16::MAX as f64) as i64,
                };
                cols.push(q);
            }
        }
        Self { mode, exp, cols, d }
    }

    fn col(&self, j: usize) -> &[i64] {
        &self.cols[j * self.d..(j + 1) * self.d]
    }

    fn to_float(&self, acc: &[i128]) -> DVector<f64> {
        let s = 2f64.powi(self.exp);
        DVector::from_iterator(self.d, acc.iter().map(|&a| a as f64 * s))
    }
}

/// Event-driven `E z`: each spike adds its neuron's column, and a bin edge
/// emits the sum and clears it.
#[derive(Debug, Clone)]
pub struct ImplantAccumulator {
    weights: IntWeights,
    lane: HashMap<NeuronId, usize>,
    acc: Vec<i128>,
    overflow: bool,
}

impl ImplantAccumulator {
    pub fn new(e: &DMatrix<f64>, selected: &[NeuronId], mode: ImplantMode) -> Result<Self, DecodeError> {
        if e.ncols() != selected.len() {
            return Err(DecodeError::Dimension(format!(
                "E has {} columns for {} selected neurons",
                e.ncols(),
                selected.len()
            )));
        }
        let weights = IntWeights::new(e, mode);
        Ok(Self {
            acc: vec![0; weights.d],
            weights,
            lane: selected.iter().enumerate().map(|(i, &n)| (n, i)).collect(),
            overflow: false,
        })
    }

    pub fn mode(&self) -> ImplantMode {
        self.weights.mode
    }

    /// Value of one least-significant bit of the emitted vector.
    pub fn lsb(&self) -> f64 {
        2f64.powi(self.weights.exp)
    }

    pub fn accumulate(&mut self, neuron: NeuronId) -> Result<(), DecodeError> {
        let j = *self.lane.get(&neuron).ok_or(DecodeError::UnknownNeuron(neuron))?;
        let fixed = self.weights.mode == ImplantMode::Fixed;
        for (a, &w) in self.acc.iter_mut().zip(self.weights.col(j)) {
            *a += w as i128;
            if fixed && (*a > i32::MAX as i128 || *a < i32::MIN as i128) {
                self.overflow = true;
            }
        }
        Ok(())
    }

    pub fn accumulate_event(&mut self, e: &SortedEvent) -> Result<(), DecodeError> {
        self.accumulate(NeuronId::new(e.channel, e.unit))
    }

    /// `E z` for the bin so far; resets the accumulator.
    pub fn emit_bin(&mut self) -> Result<DVector<f64>, DecodeError> {
        if std::mem::take(&mut self.overflow) {
            self.acc.iter_mut().for_each(|a| *a = 0);
            return Err(DecodeError::AccumulatorOverflow);
        }
        let out = self.weights.to_float(&self.acc);
        self.acc.iter_mut().for_each(|a| *a = 0);
        Ok(out)
    }

    /// Raw accumulator contents in LSB units.
    pub fn raw(&self) -> &[i128] {
        &self.acc
    }
}

/// Reference `E z` of one bin's counts in the same arithmetic as the
/// accumulator in `mode`, computed as a batch matrix-vector product.
pub fn ensemble_product(e: &DMatrix<f64>, counts: &[u32], mode: ImplantMode) -> DVector<f64> {
    let w = IntWeights::new(e, mode);
    product_with(&w, counts)
}

fn product_with(w: &IntWeights, counts: &[u32]) -> DVector<f64> {
    let mut acc = vec![0i128; w.d];
    for (j, &c) in counts.iter().enumerate() {
        for (a, &q) in acc.iter_mut().zip(w.col(j)) {
            *a += q as i128 * c as i128;
        }
    }
    w.to_float(&acc)
}

/// Batch `E z` for many bins without rebuilding the integer weights.
pub fn ensemble_products(e: &DMatrix<f64>, bins: &[Vec<u32>], mode: ImplantMode) -> Vec<DVector<f64>> {
    let w = IntWeights::new(e, mode);
    bins.iter().map(|c| product_with(&w, c)).collect()
}

/// Runs events through an accumulator, emitting once per bin. Events are
/// bucketed by timestamp first; order inside a bin is kept as given.
pub fn implant_stream(
    acc: &mut ImplantAccumulator,
    events: &[SortedEvent],
    bin_ms: u32,
    sample_rate: u32,
    n_bins: usize,
) -> Result<Vec<DVector<f64>>, DecodeError> {
    let t = bin_samples(bin_ms, sample_rate);
    let mut buckets: Vec<Vec<&SortedEvent>> = Vec::new();
    for e in events {
        if !acc.lane.contains_key(&NeuronId::new(e.channel, e.unit)) {
            continue;
        }
        let b = (e.t / t) as usize;
        if buckets.len() <= b {
            buckets.resize_with(b + 1, Vec::new);
        }
        buckets[b].push(e);
    }
    buckets.resize_with(buckets.len().max(n_bins), Vec::new);
    buckets
        .into_iter()
        .map(|bucket| {
            for e in bucket {
                acc.accumulate_event(e)?;
            }
            acc.emit_bin()
        })
        .collect()
}
