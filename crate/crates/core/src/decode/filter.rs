//! Filter recursions with per-equation operation counts.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::implant::{ensemble_products, ImplantMode};
use super::linalg::{self, OpCounts};
use super::{DecodeError, DecoderModel, FilterKind, KinematicState, StandardObservationModel, StateTransitionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub x: KinematicState,
    pub p: DMatrix<f64>,
    /// Gain of the last update (zeros before the first).
    pub k: DMatrix<f64>,
}

impl FilterState {
    pub fn new(x: KinematicState, p: DMatrix<f64>) -> Self {
        let d = x.len();
        Self { x, p, k: DMatrix::zeros(d, d) }
    }
}

/// Operation counts of one filter step, one field per equation group:
/// state prediction, covariance prediction, gain, state correction,
/// covariance correction (with re-symmetrization) and, for the ensemble
/// filter, forming the observation `E z + e`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOps {
    pub state_predict: OpCounts,
    pub cov_predict: OpCounts,
    pub gain: OpCounts,
    pub state_update: OpCounts,
    pub cov_update: OpCounts,
    pub observation: OpCounts,
}

impl StepOps {
    pub fn rows(&self) -> [(&'static str, OpCounts); 6] {
        [
            ("state_predict", self.state_predict),
            ("cov_predict", self.cov_predict),
            ("gain", self.gain),
            ("state_update", self.state_update),
            ("cov_update", self.cov_update),
            ("observation", self.observation),
        ]
    }

    pub fn total(&self) -> OpCounts {
        self.rows().iter().fold(OpCounts::default(), |acc, (_, o)| acc + *o)
    }
}

impl AddAssign for StepOps {
    fn add_assign(&mut self, o: Self) {
        self.state_predict += o.state_predict;
        self.cov_predict += o.cov_predict;
        self.gain += o.gain;
        self.state_update += o.state_update;
        self.cov_update += o.cov_update;
        self.observation += o.observation;
    }
}

fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<(), DecodeError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DecodeError::NonFinite(what))
    }
}

fn predict(
    fs: &FilterState,
    t: &StateTransitionModel,
    ops: &mut StepOps,
) -> Result<(DVector<f64>, DMatrix<f64>), DecodeError> {
    let d = fs.x.len();
    if t.a.shape() != (d, d) || fs.p.shape() != (d, d) || t.w.shape() != (d, d) {
        return Err(DecodeError::Dimension(format!("state_dim {d} against A {:?}", t.a.shape())));
    }
    let x = linalg::matvec(&t.a, &fs.x, &mut ops.state_predict);
    let ap = linalg::matmul(&t.a, &fs.p, &mut ops.cov_predict);
    let apa = linalg::matmul(&ap, &t.a.transpose(), &mut ops.cov_predict);
    let p = linalg::add_mat(&apa, &t.w, &mut ops.cov_predict);
    Ok((x, p))
}

/// How the standard filter applies the inverse of its innovation matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnovationMethod {
    /// Explicit inverse through the Cholesky factor, then `K = P Hᵀ S⁻¹`.
    #[default]
    Inverse,
    /// `K` from Cholesky forward/back substitution, no explicit inverse.
    Substitution,
}

/// One predict/update cycle of the standard filter on raw counts `z`.
pub fn kf_step(
    fs: &FilterState,
    t: &StateTransitionModel,
    obs: &StandardObservationModel,
    z: &DVector<f64>,
    ops: &mut StepOps,
) -> Result<FilterState, DecodeError> {
    kf_step_with(fs, t, obs, z, InnovationMethod::Inverse, ops)
}

pub fn kf_step_with(
    fs: &FilterState,
    t: &StateTransitionModel,
    obs: &StandardObservationModel,
    z: &DVector<f64>,
    method: InnovationMethod,
    ops: &mut StepOps,
) -> Result<FilterState, DecodeError> {
    let d = fs.x.len();
    let n = z.len();
    if obs.h.shape() != (n, d) || obs.q.shape() != (n, n) || obs.bias.len() != n {
        return Err(DecodeError::Dimension(format!("{n} counts against H {:?}", obs.h.shape())));
    }
    let (x_prior, p_prior) = predict(fs, t, ops)?;

    let g = &mut ops.gain;
    let singular = DecodeError::Singular { matrix: "innovation H P Hᵀ + Q" };
    let ht = obs.h.transpose();
    let hp = linalg::matmul(&obs.h, &p_prior, g);
    let hpht = linalg::matmul(&hp, &ht, g);
    let s = linalg::add_mat(&hpht, &obs.q, g);
    let k = match method {
        InnovationMethod::Inverse => {
            let s_inv = linalg::spd_inverse(&s, g).ok_or(singular)?;
            let pht = linalg::matmul(&p_prior, &ht, g);
            linalg::matmul(&pht, &s_inv, g)
        }
        // S Kᵀ = H P, using the symmetry of P.
        InnovationMethod::Substitution => linalg::spd_solve(&s, &hp, g).ok_or(singular)?.transpose(),
    };

    let u = &mut ops.state_update;
    let hx = linalg::matvec(&obs.h, &x_prior, u);
    let zc = linalg::sub_vec(z, &obs.bias, u);
    let innov = linalg::sub_vec(&zc, &hx, u);
    let corr = linalg::matvec(&k, &innov, u);
    let x = linalg::add_vec(&x_prior, &corr, u);

    let c = &mut ops.cov_update;
    let kh = linalg::matmul(&k, &obs.h, c);
    let ikh = linalg::identity_minus(&kh, c);
    let mut p = linalg::matmul(&ikh, &p_prior, c);
    linalg::symmetrize(&mut p, c);
    check_finite(&x, "KF state")?;
    Ok(FilterState { x, p, k })
}

/// One cycle of the ensemble-observation filter. `y` is the pre-reduced
/// observation `E z + e`; only `state_dim`-sized matrices are involved.
pub fn eokf_step(
    fs: &FilterState,
    t: &StateTransitionModel,
    qe: &DMatrix<f64>,
    y: &DVector<f64>,
    ops: &mut StepOps,
) -> Result<FilterState, DecodeError> {
    let d = fs.x.len();
    if qe.shape() != (d, d) || y.len() != d {
        return Err(DecodeError::Dimension(format!("state_dim {d} against Qe {:?}", qe.shape())));
    }
    let (x_prior, p_prior) = predict(fs, t, ops)?;

    let g = &mut ops.gain;
    let s = linalg::add_mat(&p_prior, qe, g);
    let s_inv = linalg::small_inverse(&s, g).ok_or(DecodeError::Singular { matrix: "P + Qe" })?;
    let k = linalg::matmul(&p_prior, &s_inv, g);

    let u = &mut ops.state_update;
    let innov = linalg::sub_vec(y, &x_prior, u);
    let corr = linalg::matvec(&k, &innov, u);
    let x = linalg::add_vec(&x_prior, &corr, u);

    let c = &mut ops.cov_update;
    let ik = linalg::identity_minus(&k, c);
    let mut p = linalg::matmul(&ik, &p_prior, c);
    linalg::symmetrize(&mut p, c);
    check_finite(&x, "EOKF state")?;
    Ok(FilterState { x, p, k })
}

/// Cost of forming `E z + e` from `n` counts: the matrix-vector product
/// plus the intercept.
pub fn observation_ops(n_neurons: usize, state_dim: usize) -> OpCounts {
    OpCounts {
        mult: (state_dim * n_neurons) as u64,
        add: (state_dim * (n_neurons - 1) + state_dim) as u64,
        div: 0,
    }
}

/// Measures one step of `kind` on a random well-conditioned model with the
/// given sizes. Counts do not depend on the data.
pub fn count_ops(kind: FilterKind, n_neurons: usize, state_dim: usize) -> Result<StepOps, DecodeError> {
    count_ops_with(kind, n_neurons, state_dim, InnovationMethod::Inverse)
}

pub fn count_ops_with(
    kind: FilterKind,
    n_neurons: usize,
    state_dim: usize,
    method: InnovationMethod,
) -> Result<StepOps, DecodeError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(n_neurons as u64 * 31 + state_dim as u64);
    let mut spd = |n: usize| {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n)
    };
    let t = StateTransitionModel {
        a: DMatrix::identity(state_dim, state_dim) * 0.9,
        w: spd(state_dim),
    };
    let fs = FilterState::new(DVector::zeros(state_dim), spd(state_dim));
    let mut ops = StepOps::default();
    match kind {
        FilterKind::Kf => {
            let obs = StandardObservationModel {
                h: DMatrix::from_element(n_neurons, state_dim, 0.5),
                q: spd(n_neurons),
                bias: DVector::from_element(n_neurons, 1.0),
            };
            kf_step_with(&fs, &t, &obs, &DVector::from_element(n_neurons, 2.0), method, &mut ops)?;
        }
        FilterKind::Eokf => {
            let e = DMatrix::from_element(state_dim, n_neurons, 0.25);
            let z = DVector::from_element(n_neurons, 2.0);
            let ez = linalg::matvec(&e, &z, &mut ops.observation);
            let y = linalg::add_vec(&ez, &DVector::from_element(state_dim, 0.1), &mut ops.observation);
            let qe = spd(state_dim);
            eokf_step(&fs, &t, &qe, &y, &mut ops)?;
        }
    }
    Ok(ops)
}

/// Decoded states plus the accumulated operation counts of the run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRun {
    pub states: Vec<KinematicState>,
    pub ops: StepOps,
}

/// Ensemble filter over pre-computed `E z` vectors (the implant's output).
pub fn eokf_decode(model: &DecoderModel, ez: &[DVector<f64>]) -> Result<DecodeRun, DecodeError> {
    let ens = model.ensemble()?;
    let t = model.transition();
    let obs_ops = observation_ops(ens.selected.len().max(1), model.state_dim());
    let mut fs = model.initial_state();
    let mut ops = StepOps::default();
    let mut states = Vec::with_capacity(ez.len());
    for v in ez {
        ops.observation += obs_ops;
        let y = v + &ens.bias;
        fs = eokf_step(&fs, &t, &ens.qe, &y, &mut ops)?;
        states.push(fs.x.clone());
    }
    Ok(DecodeRun { states, ops })
}

/// Decodes bins of counts over `model.selected`. The ensemble filter forms
/// `E z` in the arithmetic of `mode`.
pub fn run_decoder(model: &DecoderModel, counts: &[Vec<u32>], mode: ImplantMode) -> Result<DecodeRun, DecodeError> {
    if let Some(bad) = counts.iter().find(|c| c.len() != model.selected.len()) {
        return Err(DecodeError::Dimension(format!(
            "{} counts per bin for {} selected neurons",
            bad.len(),
            model.selected.len()
        )));
    }
    match model.kind {
        FilterKind::Eokf => {
            let e = model.e.as_ref().ok_or(DecodeError::MissingModel("E/Qe"))?;
            eokf_decode(model, &ensemble_products(e, counts, mode))
        }
        FilterKind::Kf => {
            let obs = model.standard()?;
            let t = model.transition();
            let mut fs = model.initial_state();
            let mut ops = StepOps::default();
            let mut states = Vec::with_capacity(counts.len());
            for c in counts {
                let z = DVector::from_iterator(c.len(), c.iter().map(|&v| v as f64));
                fs = kf_step(&fs, &t, &obs, &z, &mut ops)?;
                states.push(fs.x.clone());
            }
            Ok(DecodeRun { states, ops })
        }
    }
}
