use nsp_core::detect::{detect_spikes, estimate_threshold, DEFAULT_K, DEFAULT_PRE_SAMPLES};
use nsp_core::metrics::{majority_accuracy, match_windows, MATCH_TOLERANCE};
use nsp_core::sort_online::{OnlineSorter, OnlineSorterConfig};
use nsp_core::synthdata::{gen_spike_trace, Difficulty, SpikeTraceConfig};
use nsp_core::{FeatureSpec, SpikeToken};

#[test]
fn easy_channel_is_sorted_after_training() {
    let cfg = SpikeTraceConfig {
        n_channels: 1,
        neurons_per_channel: 2,
        duration_s: 60.0,
        firing_rate_hz: 25.0,
        ..SpikeTraceConfig::preset(Difficulty::Easy)
    };
    let (trace, labels) = gen_spike_trace(&cfg, 21).unwrap();
    let th = estimate_threshold(trace.channel(0), DEFAULT_K).unwrap();
    let windows = detect_spikes(trace.channel(0), 0, th, DEFAULT_PRE_SAMPLES).unwrap();
    let truth = match_windows(&windows, &labels, MATCH_TOLERANCE);
    let mut sorter = OnlineSorter::new(OnlineSorterConfig::default());
    let (mut predicted, mut expected) = (Vec::new(), Vec::new());
    for (w, t) in windows.iter().zip(&truth) {
        let tok = SpikeToken::from_window(w, FeatureSpec::PeakTrough);
        if let (Some(a), Some(t)) = (sorter.process(tok.f1, tok.f2), t) {
            predicted.push(a.unit());
            expected.push(*t);
        }
    }
    assert!(expected.len() > 500, "{} deployed spikes", expected.len());
    let acc = majority_accuracy(&predicted, &expected);
    assert!(acc >= 0.95, "accuracy {acc}");
}
