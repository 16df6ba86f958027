//! Velocity decoding from binned spike counts.
//!
//! Two filters share one state-transition model `x_{k+1} = A x_k + w`:
//!
//! - the standard Kalman filter observes the full count vector through
//!   `z = H x + d + q`, so every step inverts an `n × n` innovation matrix;
//! - the ensemble-observation filter first reduces the counts to a direct
//!   state estimate `E z + e` and then only handles `state_dim`-sized
//!   matrices. The product `E z` is linear in events, so the implant can
//!   build it by adding one column of `E` per spike ([`ImplantAccumulator`]).

pub mod eval;
pub mod filter;
pub mod implant;
pub mod linalg;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::synthdata::ReachSession;
use crate::NeuronId;

pub use eval::{evaluate_reconstruction, DirectionStats, Reconstruction};
pub use filter::{count_ops, count_ops_with, eokf_step, kf_step, kf_step_with, run_decoder, FilterState, InnovationMethod, StepOps};
pub use implant::{bin_spikes, BinnedRates, ImplantAccumulator, ImplantMode};
pub use linalg::OpCounts;

/// Ridge added to every normal-equation matrix.
pub const RIDGE: f64 = 1e-6;

/// Velocity state: `(vx, vy)` in mm/s, optionally followed by speed.
pub type KinematicState = DVector<f64>;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("{matrix} is singular or not positive definite")]
    Singular { matrix: &'static str },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need at least {need} bins, got {got}")]
    TooFewBins { need: usize, got: usize },
    #[error("only {found} informative neurons, need at least {need}")]
    TooFewInformative { found: usize, need: usize },
    #[error("state_dim must be 2 or 3, got {0}")]
    StateDim(usize),
    #[error("neuron {0:?} is not in the selected ensemble")]
    UnknownNeuron(NeuronId),
    #[error("32-bit implant accumulator overflowed")]
    AccumulatorOverflow,
    #[error("model lacks the {0} matrices")]
    MissingModel(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTransitionModel {
    pub a: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

/// `z = H x + bias + q`; the intercept absorbs baseline firing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardObservationModel {
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// `x = E z + bias + q`. Entries of `E` lie on a power-of-two grid fine
/// enough that `E z` over integer counts is computed exactly
/// (see [`implant::exact_grid_exponent`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub e: DMatrix<f64>,
    pub qe: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub selected: Vec<NeuronId>,
}

/// Regression inputs: one row per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    /// Bins × state_dim.
    pub x: DMatrix<f64>,
    /// Bins × neurons.
    pub z: DMatrix<f64>,
    pub neurons: Vec<NeuronId>,
}

impl TrainingData {
    pub fn from_session(session: &ReachSession, state_dim: usize) -> Result<Self, DecodeError> {
        let n = session.n_neurons();
        let t = session.bins.len();
        let x = DMatrix::from_row_iterator(
            t,
            state_dim,
            session.bins.iter().flat_map(|b| kinematic_row(b.vx, b.vy, state_dim)),
        );
        check_state_dim(state_dim)?;
        let z = DMatrix::from_row_iterator(t, n, session.bins.iter().flat_map(|b| b.counts.iter().map(|&c| c as f64)));
        Ok(Self {
            x,
            z,
            neurons: session.neurons.iter().map(|n| n.id).collect(),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.x.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn states(&self) -> Vec<KinematicState> {
        (0..self.n_bins()).map(|i| self.x.row(i).transpose()).collect()
    }

    /// Count columns of the given neurons, in that order.
    pub fn counts_for(&self, neurons: &[NeuronId]) -> Result<Vec<Vec<u32>>, DecodeError> {
        let cols = neurons.iter().map(|&id| self.column_of(id)).collect::<Result<Vec<_>, _>>()?;
        Ok((0..self.n_bins())
            .map(|r| cols.iter().map(|&c| self.z[(r, c)] as u32).collect())
            .collect())
    }

    fn column_of(&self, id: NeuronId) -> Result<usize, DecodeError> {
        self.neurons.iter().position(|n| *n == id).ok_or(DecodeError::UnknownNeuron(id))
    }

    fn select_columns(&self, neurons: &[NeuronId]) -> Result<DMatrix<f64>, DecodeError> {
        let cols = neurons.iter().map(|&id| self.column_of(id)).collect::<Result<Vec<_>, _>>()?;
        Ok(self.z.select_columns(&cols))
    }
}

fn check_state_dim(d: usize) -> Result<(), DecodeError> {
    if d == 2 || d == 3 {
        Ok(())
    } else {
        Err(DecodeError::StateDim(d))
    }
}

/// State vector of a velocity: `[vx, vy]` or `[vx, vy, |v|]`.
pub fn kinematic_row(vx: f64, vy: f64, state_dim: usize) -> impl Iterator<Item = f64> {
    [vx, vy, vx.hypot(vy)].into_iter().take(state_dim)
}

/// Ridge least squares `Y ≈ B X` for row-sample matrices `x` (T×q) and `y`
/// (T×p). The ridge pulls `B` toward `prior` (p×q).
fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, prior: &DMatrix<f64>) -> Result<DMatrix<f64>, DecodeError> {
    let q = x.ncols();
    let xtx = x.transpose() * x + DMatrix::identity(q, q) * RIDGE;
    let ytx = y.transpose() * x + prior * RIDGE;
    let chol = xtx.cholesky().ok_or(DecodeError::Singular { matrix: "regression normal matrix" })?;
    // B = ytx · xtx⁻¹, solved as xtx · Bᵀ = ytxᵀ.
    Ok(chol.solve(&ytx.transpose()).transpose())
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

fn center(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// Covariance of residual rows (divides by the row count).
fn residual_cov(r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = r.nrows().max(1) as f64;
    let c = r.transpose() * r / n;
    (&c + c.transpose()) * 0.5
}

/// Least-squares transition between consecutive bins. The ridge shrinks `A`
/// toward the identity, which pins the constant-state case to `A = I`.
pub fn train_transition(x: &DMatrix<f64>) -> Result<StateTransitionModel, DecodeError> {
    let d = x.ncols();
    if x.nrows() < d + 1 {
        return Err(DecodeError::TooFewBins { need: d + 1, got: x.nrows() });
    }
    let x0 = x.rows(0, x.nrows() - 1).into_owned();
    let x1 = x.rows(1, x.nrows() - 1).into_owned();
    let a = ridge_fit(&x0, &x1, &DMatrix::identity(d, d))?;
    let resid = &x1 - &x0 * a.transpose();
    Ok(StateTransitionModel { a, w: residual_cov(&resid) })
}

/// Encoding model `z = H x + bias` for the given neurons.
pub fn train_observation_standard(
    data: &TrainingData,
    neurons: &[NeuronId],
) -> Result<StandardObservationModel, DecodeError> {
    let d = data.state_dim();
    if data.n_bins() < d + 1 {
        return Err(DecodeError::TooFewBins { need: d + 1, got: data.n_bins() });
    }
    let z = data.select_columns(neurons)?;
    let (xm, zm) = (column_means(&data.x), column_means(&z));
    let (xc, zc) = (center(&data.x, &xm), center(&z, &zm));
    let h = ridge_fit(&xc, &zc, &DMatrix::zeros(neurons.len(), d))?;
    let bias = &zm - &h * &xm;
    let resid = &zc - &xc * h.transpose();
    Ok(StandardObservationModel { h, q: residual_cov(&resid), bias })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub max_per_channel: usize,
    pub min_neurons: usize,
    pub max_neurons: usize,
    /// Score at or below which a neuron counts as uninformative.
    pub min_score: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            max_per_channel: 3,
            min_neurons: 20,
            max_neurons: 50,
            min_score: 0.01,
        }
    }
}

/// R² of each neuron's counts regressed on the state (with intercept).
pub fn encoding_scores(data: &TrainingData) -> Result<Vec<f64>, DecodeError> {
    let xm = column_means(&data.x);
    let xc = center(&data.x, &xm);
    let d = data.state_dim();
    let xtx = xc.transpose() * &xc + DMatrix::identity(d, d) * RIDGE;
    let chol = xtx.cholesky().ok_or(DecodeError::Singular { matrix: "regression normal matrix" })?;
    Ok(data
        .z
        .column_iter()
        .map(|col| {
            let zc = col.add_scalar(-col.mean());
            let sst = zc.norm_squared();
            if sst == 0.0 {
                return 0.0;
            }
            let beta = chol.solve(&(xc.transpose() * &zc));
            let sse = (&zc - &xc * beta).norm_squared();
            (1.0 - sse / sst).max(0.0)
        })
        .collect())
}

/// Highest-scoring neurons (ties by id) with at most `max_per_channel` per
/// channel and at most `max_neurons` overall. Uninformative neurons are
/// dropped unless needed to reach `min_neurons`.
pub fn select_neurons(data: &TrainingData, config: &SelectionConfig) -> Result<Vec<NeuronId>, DecodeError> {
    let scores = encoding_scores(data)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(data.neurons[a].cmp(&data.neurons[b])));
    let mut per_channel = std::collections::BTreeMap::<u16, usize>::new();
    let mut picked = Vec::new();
    for i in order {
        if picked.len() == config.max_neurons {
            break;
        }
        let slot = per_channel.entry(data.neurons[i].channel).or_insert(0);
        if *slot >= config.max_per_channel {
            continue;
        }
        *slot += 1;
        picked.push(i);
    }
    let informative = picked.iter().filter(|&&i| scores[i] > config.min_score).count();
    let need = data.state_dim();
    if informative < need {
        return Err(DecodeError::TooFewInformative { found: informative, need });
    }
    // Informative neurons come first in `picked`, so truncation drops the rest.
    picked.truncate(informative.max(config.min_neurons.min(picked.len())));
    Ok(picked.into_iter().map(|i| data.neurons[i]).collect())
}

/// Population regression `x = E z + bias` over the selected neurons.
pub fn train_ensemble(data: &TrainingData, config: &SelectionConfig) -> Result<EnsembleModel, DecodeError> {
    let selected = select_neurons(data, config)?;
    fit_ensemble(data, &selected)
}

/// Ensemble regression over a fixed neuron list.
pub fn fit_ensemble(data: &TrainingData, selected: &[NeuronId]) -> Result<EnsembleModel, DecodeError> {
    let d = data.state_dim();
    if data.n_bins() < 2 {
        return Err(DecodeError::TooFewBins { need: 2, got: data.n_bins() });
    }
    let z = data.select_columns(selected)?;
    let (xm, zm) = (column_means(&data.x), column_means(&z));
    let (xc, zc) = (center(&data.x, &xm), center(&z, &zm));
    let raw = ridge_fit(&zc, &xc, &DMatrix::zeros(d, selected.len()))?;
    let e = implant::snap_to_exact_grid(&raw);
    let bias = &xm - &e * &zm;
    let resid = &xc - &zc * e.transpose();
    Ok(EnsembleModel {
        e,
        qe: residual_cov(&resid),
        bias,
        selected: selected.to_vec(),
    })
}

/// Mean squared residual of `x ≈ E z + bias` per state component, summed.
pub fn regression_residual_variance(model: &EnsembleModel, data: &TrainingData) -> Result<f64, DecodeError> {
    let z = data.select_columns(&model.selected)?;
    let pred = &z * model.e.transpose();
    let mut total = 0.0;
    for r in 0..data.n_bins() {
        for c in 0..data.state_dim() {
            total += (data.x[(r, c)] - pred[(r, c)] - model.bias[c]).powi(2);
        }
    }
    Ok(total / data.n_bins() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Kf,
    Eokf,
}

/// Fixed-point formats of the implant-side weights: values are
/// `integer · 2^exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointScales {
    /// Grid exponent of the float-exact accumulator.
    pub exact_exp: i32,
    /// Exponent of the 16-bit quantized weights; the output LSB is `2^quant_exp`.
    pub quant_exp: i32,
    pub weight_bits: u32,
    pub accumulator_bits: u32,
}

/// Everything needed to decode: the on-disk model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderModel {
    pub kind: FilterKind,
    pub selected: Vec<NeuronId>,
    #[serde(rename = "A")]
    pub a: DMatrix<f64>,
    #[serde(rename = "W")]
    pub w: DMatrix<f64>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<DMatrix<f64>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<DMatrix<f64>>,
    #[serde(rename = "d", default, skip_serializing_if = "Option::is_none")]
    pub h_bias: Option<DVector<f64>>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<DMatrix<f64>>,
    #[serde(rename = "Qe", default, skip_serializing_if = "Option::is_none")]
    pub qe: Option<DMatrix<f64>>,
    #[serde(rename = "e", default, skip_serializing_if = "Option::is_none")]
    pub e_bias: Option<DVector<f64>>,
    #[serde(rename = "P0")]
    pub p0: DMatrix<f64>,
    pub x0: DVector<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_point: Option<FixedPointScales>,
}

impl DecoderModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn transition(&self) -> StateTransitionModel {
        StateTransitionModel { a: self.a.clone(), w: self.w.clone() }
    }

    pub fn standard(&self) -> Result<StandardObservationModel, DecodeError> {
        match (&self.h, &self.q, &self.h_bias) {
            (Some(h), Some(q), Some(b)) => Ok(StandardObservationModel { h: h.clone(), q: q.clone(), bias: b.clone() }),
            _ => Err(DecodeError::MissingModel("H/Q")),
        }
    }

    pub fn ensemble(&self) -> Result<EnsembleModel, DecodeError> {
        match (&self.e, &self.qe, &self.e_bias) {
            (Some(e), Some(qe), Some(b)) => Ok(EnsembleModel {
                e: e.clone(),
                qe: qe.clone(),
                bias: b.clone(),
                selected: self.selected.clone(),
            }),
            _ => Err(DecodeError::MissingModel("E/Qe")),
        }
    }

    pub fn initial_state(&self) -> FilterState {
        FilterState::new(self.x0.clone(), self.p0.clone())
    }
}

/// Trains a decoder of the given kind. Both kinds use the same neuron
/// selection, so they see identical inputs.
pub fn train_decoder(
    data: &TrainingData,
    kind: FilterKind,
    config: &SelectionConfig,
) -> Result<DecoderModel, DecodeError> {
    let selected = select_neurons(data, config)?;
    let transition = train_transition(&data.x)?;
    let d = data.state_dim();
    let xm = column_means(&data.x);
    let p0 = residual_cov(&center(&data.x, &xm));
    let mut model = DecoderModel {
        kind,
        selected: selected.clone(),
        a: transition.a,
        w: transition.w,
        h: None,
        q: None,
        h_bias: None,
        e: None,
        qe: None,
        e_bias: None,
        p0,
        x0: DVector::zeros(d),
        fixed_point: None,
    };
    match kind {
        FilterKind::Kf => {
            let obs = train_observation_standard(data, &selected)?;
            model.h = Some(obs.h);
            model.q = Some(obs.q);
            model.h_bias = Some(obs.bias);
        }
        FilterKind::Eokf => {
            let ens = fit_ensemble(data, &selected)?;
            model.fixed_point = Some(implant::fixed_point_scales(&ens.e));
            model.e = Some(ens.e);
            model.qe = Some(ens.qe);
            model.e_bias = Some(ens.bias);
        }
    }
    Ok(model)
}

/// Splits trial indices into (train, test) at random. Both sides keep at
/// least one trial when there are two or more.
pub fn split_trials(session: &ReachSession, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = session.trials.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::synthdata::stream_rng(seed, 7));
    let mut k = ((n as f64 * train_fraction).round() as usize).min(n);
    if n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut test = idx.split_off(k);
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}
