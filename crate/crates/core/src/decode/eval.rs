//! Reconstruction error and its distribution over movement directions.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DecodeError, KinematicState, TrainingData, RIDGE};
use crate::NeuronId;

/// Residual of one bin with the true movement it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyedResidual {
    /// Direction of the true velocity, radians in (-π, π].
    pub angle: f64,
    pub speed: f64,
    /// Euclidean norm of the velocity error.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// Mean squared error over bins and velocity components.
    pub mse: f64,
    pub residuals: Vec<Vec<f64>>,
    pub residual_std: f64,
    /// Pearson kurtosis (3 for a Gaussian) of all component residuals.
    pub kurtosis: f64,
    pub keyed: Vec<KeyedResidual>,
}

/// Compares decoded and true velocity streams; only the first two state
/// components (vx, vy) enter the error.
pub fn evaluate_reconstruction(
    decoded: &[KinematicState],
    truth: &[KinematicState],
) -> Result<Reconstruction, DecodeError> {
    if decoded.len() != truth.len() {
        return Err(DecodeError::Dimension(format!("{} decoded bins for {} true bins", decoded.len(), truth.len())));
    }
    if decoded.is_empty() {
        return Err(DecodeError::TooFewBins { need: 1, got: 0 });
    }
    let mut residuals = Vec::with_capacity(decoded.len());
    let mut keyed = Vec::with_capacity(decoded.len());
    for (d, t) in decoded.iter().zip(truth) {
        if d.len() < 2 || t.len() < 2 {
            return Err(DecodeError::Dimension("states need vx and vy".into()));
        }
        let r = vec![d[0] - t[0], d[1] - t[1]];
        keyed.push(KeyedResidual {
            angle: t[1].atan2(t[0]),
            speed: t[0].hypot(t[1]),
            magnitude: r[0].hypot(r[1]),
        });
        residuals.push(r);
    }
    let flat: Vec<f64> = residuals.iter().flatten().copied().collect();
    let n = flat.len() as f64;
    let mse = flat.iter().map(|r| r * r).sum::<f64>() / n;
    let mean = flat.iter().sum::<f64>() / n;
    let m2 = flat.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let m4 = flat.iter().map(|r| (r - mean).powi(4)).sum::<f64>() / n;
    Ok(Reconstruction {
        mse,
        residuals,
        residual_std: m2.sqrt(),
        kurtosis: if m2 > 0.0 { m4 / (m2 * m2) } else { 0.0 },
        keyed,
    })
}

/// Mean residual magnitude per direction sector of moving bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub counts: Vec<usize>,
    pub mean_magnitude: Vec<f64>,
    /// Population variance of `mean_magnitude` across sectors.
    pub variance: f64,
}

/// Groups bins faster than `min_speed` into `n_sectors` equal angular
/// sectors, the first centered on angle 0.
pub fn direction_stats(rec: &Reconstruction, n_sectors: usize, min_speed: f64) -> DirectionStats {
    let width = 2.0 * PI / n_sectors as f64;
    let mut sum = vec![0.0; n_sectors];
    let mut counts = vec![0usize; n_sectors];
    for k in rec.keyed.iter().filter(|k| k.speed > min_speed) {
        let s = ((k.angle + width / 2.0).rem_euclid(2.0 * PI) / width) as usize % n_sectors;
        sum[s] += k.magnitude;
        counts[s] += 1;
    }
    let mean_magnitude: Vec<f64> = sum
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let m = mean_magnitude.iter().sum::<f64>() / n_sectors as f64;
    let variance = mean_magnitude.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n_sectors as f64;
    DirectionStats { counts, mean_magnitude, variance }
}

/// Regression of the state on one neuron's counts: `x ≈ slope·z + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleNeuronModel {
    pub neuron: NeuronId,
    pub slope: DVector<f64>,
    pub offset: DVector<f64>,
    /// Summed per-component mean squared residual on the fitting data.
    pub residual_variance: f64,
}

impl SingleNeuronModel {
    pub fn predict(&self, count: u32) -> KinematicState {
        &self.slope * count as f64 + &self.offset
    }
}

pub fn fit_single_neuron(data: &TrainingData, neuron: NeuronId) -> Result<SingleNeuronModel, DecodeError> {
    let col = data
        .neurons
        .iter()
        .position(|&n| n == neuron)
        .ok_or(DecodeError::UnknownNeuron(neuron))?;
    let z = data.z.column(col);
    let zm = z.mean();
    let zc = z.add_scalar(-zm);
    let szz = zc.norm_squared() + RIDGE;
    let d = data.state_dim();
    let t = data.n_bins() as f64;
    let mut slope = DVector::zeros(d);
    let mut offset = DVector::zeros(d);
    let mut resid = 0.0;
    for c in 0..d {
        let x = data.x.column(c);
        let xm = x.mean();
        let b = zc.dot(&x.add_scalar(-xm)) / szz;
        slope[c] = b;
        offset[c] = xm - b * zm;
        resid += x.iter().zip(z.iter()).map(|(&xv, &zv)| (xv - b * zv - offset[c]).powi(2)).sum::<f64>() / t;
    }
    Ok(SingleNeuronModel { neuron, slope, offset, residual_variance: resid })
}

/// Single-neuron model with the lowest training residual variance.
pub fn best_single_neuron(data: &TrainingData, candidates: &[NeuronId]) -> Result<SingleNeuronModel, DecodeError> {
    let mut best: Option<SingleNeuronModel> = None;
    for &n in candidates {
        let m = fit_single_neuron(data, n)?;
        if best.as_ref().is_none_or(|b| m.residual_variance < b.residual_variance) {
            best = Some(m);
        }
    }
    best.ok_or(DecodeError::TooFewInformative { found: 0, need: 1 })
}

/// Direct regression estimates `E z + e` per bin, without filtering.
pub fn regression_estimates(e: &DMatrix<f64>, bias: &DVector<f64>, counts: &[Vec<u32>]) -> Vec<KinematicState> {
    counts
        .iter()
        .map(|c| e * DVector::from_iterator(c.len(), c.iter().map(|&v| v as f64)) + bias)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(a: f64, b: f64) -> KinematicState {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn perfect_and_offset_reconstructions() {
        let truth: Vec<_> = (0..50).map(|i| v(i as f64, -(i as f64) * 0.5)).collect();
        assert_eq!(evaluate_reconstruction(&truth, &truth).unwrap().mse, 0.0);
        let c = 3.5;
        let shifted: Vec<_> = truth.iter().map(|t| t.add_scalar(c)).collect();
        let r = evaluate_reconstruction(&shifted, &truth).unwrap();
        assert!((r.mse - c * c).abs() < 1e-12);
        assert!(r.residual_std < 1e-12);
    }

    #[test]
    fn misaligned_streams_are_rejected() {
        assert!(evaluate_reconstruction(&[v(0.0, 0.0)], &[]).is_err());
    }

    #[test]
    fn keyed_residuals_and_sectors() {
        let truth = vec![v(10.0, 0.0), v(0.0, 10.0), v(-10.0, 0.0), v(0.0, 0.0)];
        let decoded = vec![v(11.0, 0.0), v(0.0, 13.0), v(-10.0, 0.0), v(5.0, 0.0)];
        let r = evaluate_reconstruction(&decoded, &truth).unwrap();
        assert!((r.keyed[1].angle - PI / 2.0).abs() < 1e-12);
        let s = direction_stats(&r, 4, 1.0);
        assert_eq!(s.counts, vec![1, 1, 1, 0]);
        assert_eq!(s.mean_magnitude, vec![1.0, 3.0, 0.0, 0.0]);
        assert!((s.variance - 1.5).abs() < 1e-12);
    }

    #[test]
    fn kurtosis_of_two_point_distribution() {
        let truth = vec![v(0.0, 0.0); 4];
        let decoded = vec![v(1.0, -1.0), v(-1.0, 1.0), v(1.0, -1.0), v(-1.0, 1.0)];
        let r = evaluate_reconstruction(&decoded, &truth).unwrap();
        assert!((r.kurtosis - 1.0).abs() < 1e-12);
        assert!((r.mse - 1.0).abs() < 1e-12);
    }
}
