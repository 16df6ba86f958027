//! Scoring sorter output against ground-truth labels.

use std::collections::BTreeMap;

use crate::detect::SpikeWindow;
use crate::synthdata::GroundTruthLabels;

/// Default window-to-label matching tolerance, in samples.
pub const MATCH_TOLERANCE: u64 = 16;

/// Ground-truth neuron for each window: the closest unused label event on
/// the same channel within `tolerance` samples of the window start.
pub fn match_windows(windows: &[SpikeWindow], labels: &GroundTruthLabels, tolerance: u64) -> Vec<Option<u8>> {
    let mut by_channel: BTreeMap<u16, Vec<(u64, u8, bool)>> = BTreeMap::new();
    for e in &labels.events {
        by_channel.entry(e.channel).or_default().push((e.t, e.neuron, false));
    }
    windows
        .iter()
        .map(|w| {
            let evs = by_channel.get_mut(&w.channel)?;
            let lo = evs.partition_point(|e| e.0 + tolerance < w.t0);
            let best = evs[lo..]
                .iter()
                .enumerate()
                .take_while(|(_, e)| e.0 <= w.t0 + tolerance)
                .filter(|(_, e)| !e.2)
                .min_by_key(|(_, e)| e.0.abs_diff(w.t0))
                .map(|(i, _)| lo + i)?;
            evs[best].2 = true;
            Some(evs[best].1)
        })
        .collect()
}

/// Counts of (predicted unit, true neuron) pairs; `None` is an outlier.
pub fn confusion(predicted: &[Option<u8>], truth: &[u8]) -> BTreeMap<(Option<u8>, u8), usize> {
    let mut m = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *m.entry((p, t)).or_insert(0) += 1;
    }
    m
}

/// Fraction correct after mapping each predicted unit to the true neuron it
/// most often coincides with (lowest neuron id on ties). Outliers count as
/// errors.
pub fn majority_accuracy(predicted: &[Option<u8>], truth: &[u8]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let c = confusion(predicted, truth);
    let mut best: BTreeMap<u8, usize> = BTreeMap::new();
    for (&(p, _), &n) in &c {
        if let Some(u) = p {
            let e = best.entry(u).or_insert(0);
            *e = (*e).max(n);
        }
    }
    best.values().sum::<usize>() as f64 / truth.len() as f64
}

/// Fraction of exact matches between predictions and labels.
pub fn exact_accuracy(predicted: &[Option<u8>], truth: &[u8]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| **p == Some(**t)).count();
    hits as f64 / truth.len() as f64
}
