//! Augmented ensemble Kalman filter baseline. The state vector is extended
//! with the unknown parameters, the joint ensemble is propagated through the
//! model with the parameters following the same bounded random walk as the
//! particle filter, and a stochastic (perturbed-observation) Kalman update
//! assimilates each record. The observation operator is linearized at the
//! ensemble mean for the gain while innovations use the full nonlinear
//! operator; parameter components are clipped to their box after every
//! update.
//!
//! Reproducibility contract: randomness derives from the configured seed
//! through the named substreams `augenkf/forecast` and `augenkf/update`,
//! each keyed by the target step.

use faer::linalg::matmul::matmul;
use faer::prelude::Solve;
use faer::{Accum, Mat, Par};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::direct_filter::ParameterNoise;
use crate::error::{check_len, FfError, Result};
use crate::observe::ObservationModel;
use crate::rng::substream;
use crate::stats;
use crate::united::rmse;

/// Joint state-parameter ensemble. Each member stores the state followed by
/// the parameter sub-vector; parameters always sit inside their box.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEnsemble {
    /// Members of length `state_dim + bounds.len()`.
    pub members: Vec<Vec<f64>>,
    /// Length of the state part of every member.
    pub state_dim: usize,
    /// Per-parameter `(lo, hi)` admissible interval.
    pub bounds: Vec<(f64, f64)>,
}

impl AugmentedEnsemble {
    /// Validates member shapes and clips parameter components into the box.
    pub fn new(
        mut members: Vec<Vec<f64>>,
        state_dim: usize,
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(FfError::Config("ensemble must not be empty".into()));
        }
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(FfError::Config(format!(
                    "invalid parameter bounds [{lo}, {hi}]"
                )));
            }
        }
        let dim = state_dim + bounds.len();
        for member in &mut members {
            check_len("augmented member", dim, member.len())?;
            clip_params(member, state_dim, &bounds);
        }
        Ok(AugmentedEnsemble {
            members,
            state_dim,
            bounds,
        })
    }

    /// Builds members as `state ++ guess` from an initial state ensemble.
    pub fn from_states(
        states: &[Vec<f64>],
        guess: &[f64],
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        check_len("parameter guess", bounds.len(), guess.len())?;
        let Some(first) = states.first() else {
            return Err(FfError::Config("ensemble must not be empty".into()));
        };
        let state_dim = first.len();
        let members = states
            .iter()
            .map(|s| {
                let mut m = s.clone();
                m.extend_from_slice(guess);
                m
            })
            .collect();
        Self::new(members, state_dim, bounds)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn param_dim(&self) -> usize {
        self.bounds.len()
    }

    /// Mean over members, state part followed by parameters.
    pub fn mean(&self) -> Vec<f64> {
        stats::mean_vector(&self.members)
    }
}

fn clip_params(member: &mut [f64], state_dim: usize, bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in member[state_dim..].iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

/// Advances every member: the state through `solver(state, own parameters)`
/// plus model noise, the parameters by a clipped Gaussian random walk. Noise
/// draws always consume the stream so member alignment does not depend on
/// the amplitudes.
pub fn forecast(
    ens: &AugmentedEnsemble,
    solver: &mut impl FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
    model_noise_std: f64,
    param_noise: &ParameterNoise,
    rng: &mut impl Rng,
) -> Result<AugmentedEnsemble> {
    check_len("parameter noise", ens.param_dim(), param_noise.gamma.len())?;
    let state_noise = Normal::new(0.0, model_noise_std)
        .map_err(|_| FfError::Config(format!("invalid model noise std {model_noise_std}")))?;
    let walks = param_noise
        .gamma
        .iter()
        .map(|&g| {
            Normal::new(0.0, g)
                .map_err(|_| FfError::Config(format!("invalid parameter noise std {g}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut members = Vec::with_capacity(ens.len());
    for member in &ens.members {
        let (state, params) = member.split_at(ens.state_dim);
        let mut next = solver(state, params)?;
        check_len("forecast state", ens.state_dim, next.len())?;
        for v in &mut next {
            *v += state_noise.sample(rng);
        }
        for ((&p, walk), &(lo, hi)) in params.iter().zip(&walks).zip(&ens.bounds) {
            next.push((p + walk.sample(rng)).clamp(lo, hi));
        }
        members.push(next);
    }
    AugmentedEnsemble::new(members, ens.state_dim, ens.bounds.clone())
}

/// Stochastic Kalman update: gain from the sample covariance with the
/// observation operator linearized at the ensemble mean, innovations from
/// perturbed records and the nonlinear operator, parameters clipped after.
///
/// The gain is applied in ensemble space. With anomalies `A`, linearized
/// observed anomalies `B = H A` and innovation columns `D`, the member
/// updates are `A Bᵀ (B Bᵀ + (N-1) Υ)⁻¹ D`, evaluated through the
/// equivalent `(N-1) I + Bᵀ Υ⁻¹ B` system when there are more observed
/// components than members. `ridge` regularizes the solve.
pub fn kalman_update(
    ens: &AugmentedEnsemble,
    y: &[f64],
    model: &ObservationModel,
    obs_noise_std: f64,
    ridge: f64,
    rng: &mut impl Rng,
) -> Result<AugmentedEnsemble> {
    let n = ens.len();
    if n < 2 {
        return Err(FfError::Config(
            "Kalman update needs at least two members".into(),
        ));
    }
    let m = model.dim();
    check_len("observation record", m, y.len())?;
    let dim = ens.state_dim + ens.param_dim();
    let mean = ens.mean();

    let mut anomalies = Mat::zeros(dim, n);
    for (j, member) in ens.members.iter().enumerate() {
        for (v, (x, mu)) in anomalies
            .col_as_slice_mut(j)
            .iter_mut()
            .zip(member.iter().zip(&mean))
        {
            *v = x - mu;
        }
    }

    // B = H A with H the diagonal linearization at the ensemble mean
    let jac = model.jacobian_diag(&mean[..ens.state_dim]);
    let mut observed = Mat::zeros(m, n);
    for j in 0..n {
        let a = anomalies.col_as_slice(j);
        for ((v, &d), &slope) in observed
            .col_as_slice_mut(j)
            .iter_mut()
            .zip(&model.indices)
            .zip(&jac)
        {
            *v = slope * a[d];
        }
    }

    // innovation columns y + eps_j - g(x_j) with the nonlinear operator
    let noise = Normal::new(0.0, obs_noise_std)
        .map_err(|_| FfError::Config(format!("invalid observation noise std {obs_noise_std}")))?;
    let mut innovations = Mat::zeros(m, n);
    for j in 0..n {
        let g = model.observe(&ens.members[j][..ens.state_dim]);
        for ((v, yi), gi) in innovations
            .col_as_slice_mut(j)
            .iter_mut()
            .zip(y)
            .zip(&g)
        {
            *v = yi + noise.sample(rng) - gi;
        }
    }

    let nf = (n - 1) as f64;
    let s2 = obs_noise_std * obs_noise_std;
    let mut updates = Mat::zeros(dim, n);
    if s2 > 0.0 && m > n {
        // ((N-1) I + Bᵀ B / s2)⁻¹ Bᵀ D / s2, an n-by-n solve
        let mut system = Mat::zeros(n, n);
        matmul(
            &mut system,
            Accum::Replace,
            observed.transpose(),
            &observed,
            1.0 / s2,
            Par::Seq,
        );
        for i in 0..n {
            system[(i, i)] += nf + ridge;
        }
        let mut rhs = Mat::zeros(n, n);
        matmul(
            &mut rhs,
            Accum::Replace,
            observed.transpose(),
            &innovations,
            1.0 / s2,
            Par::Seq,
        );
        let weights = system.partial_piv_lu().solve(&rhs);
        matmul(&mut updates, Accum::Replace, &anomalies, &weights, 1.0, Par::Seq);
    } else {
        // A Bᵀ (B Bᵀ + (N-1) s2 I)⁻¹ D, associating as (A Bᵀ)(T⁻¹ D) so no
        // n-by-n product is ever formed
        let mut system = Mat::zeros(m, m);
        matmul(
            &mut system,
            Accum::Replace,
            &observed,
            observed.transpose(),
            1.0,
            Par::Seq,
        );
        for i in 0..m {
            system[(i, i)] += nf * s2 + ridge;
        }
        let solved = system.partial_piv_lu().solve(&innovations);
        let mut cross = Mat::zeros(dim, m);
        matmul(
            &mut cross,
            Accum::Replace,
            &anomalies,
            observed.transpose(),
            1.0,
            Par::Seq,
        );
        matmul(&mut updates, Accum::Replace, &cross, &solved, 1.0, Par::Seq);
    }
    stats::clear_simd_upper_state();

    let mut members = Vec::with_capacity(n);
    for (j, member) in ens.members.iter().enumerate() {
        let mut next = member.clone();
        for (v, &u) in next.iter_mut().zip(updates.col_as_slice(j)) {
            *v += u;
        }
        members.push(next);
    }
    AugmentedEnsemble::new(members, ens.state_dim, ens.bounds.clone())
}

/// Fixed controls of the baseline filter.
#[derive(Debug, Clone, PartialEq)]
pub struct AugEnkfConfig {
    /// Ensemble size N_e.
    pub ensemble_size: usize,
    /// Standard deviation of the additive state-model noise.
    pub model_noise_std: f64,
    /// Standard deviation of the observation noise.
    pub observation_noise_std: f64,
    /// Diagonal regularization of the gain solve.
    pub ridge: f64,
    /// Master seed; substreams derive from it.
    pub seed: u64,
}

impl AugEnkfConfig {
    pub fn new(
        ensemble_size: usize,
        model_noise_std: f64,
        observation_noise_std: f64,
        seed: u64,
    ) -> Self {
        AugEnkfConfig {
            ensemble_size,
            model_noise_std,
            observation_noise_std,
            ridge: 1e-10,
            seed,
        }
    }
}

/// Per-step summary, schema-compatible with the nested filter's diagnostics
/// so the two runs plot side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct AugStepRecord {
    pub step: usize,
    /// Ensemble mean of the state part.
    pub state_mean: Vec<f64>,
    /// Ensemble mean of the parameter part.
    pub theta_mean: Vec<f64>,
    /// State error vs the reference trajectory, when one is supplied.
    pub rmse: Option<f64>,
    /// Per-component standard deviation of the parameter part.
    pub param_spread: Vec<f64>,
    /// Per-component (5%, 50%, 95%) quantiles of the parameter part.
    pub param_quantiles: Vec<[f64; 3]>,
}

fn record(ens: &AugmentedEnsemble, step: usize, rmse: Option<f64>) -> AugStepRecord {
    let mean = ens.mean();
    let l = ens.state_dim;
    let k = ens.param_dim();
    let spread = (0..k)
        .map(|c| {
            stats::mean(
                &ens.members
                    .iter()
                    .map(|m| (m[l + c] - mean[l + c]) * (m[l + c] - mean[l + c]))
                    .collect::<Vec<_>>(),
            )
            .sqrt()
        })
        .collect();
    let quantiles = (0..k)
        .map(|c| {
            let values: Vec<f64> = ens.members.iter().map(|m| m[l + c]).collect();
            [
                stats::quantile(&values, 0.05),
                stats::quantile(&values, 0.50),
                stats::quantile(&values, 0.95),
            ]
        })
        .collect();
    AugStepRecord {
        step,
        state_mean: mean[..l].to_vec(),
        theta_mean: mean[l..].to_vec(),
        rmse,
        param_spread: spread,
        param_quantiles: quantiles,
    }
}

/// Runs the baseline over all observation records; same conventions as the
/// nested filter's `run`: `observations[i]` belongs to step `i + 1`,
/// `references[i]` fills the RMSE diagnostic, exploration noise shrinks once
/// per step. Returns one record per step, the initial state first.
pub fn run_aug_enkf(
    initial: AugmentedEnsemble,
    observations: &[Vec<f64>],
    references: Option<&[Vec<f64>]>,
    model: &ObservationModel,
    solver: &mut impl FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
    param_noise: &ParameterNoise,
    cfg: &AugEnkfConfig,
) -> Result<Vec<AugStepRecord>> {
    check_len("ensemble size", cfg.ensemble_size, initial.len())?;
    if let Some(refs) = references {
        check_len("reference trajectory", observations.len(), refs.len())?;
    }
    let mut noise = param_noise.clone();
    let mut ens = initial;
    let mut records = Vec::with_capacity(observations.len() + 1);
    records.push(record(&ens, 0, None));
    for (i, y) in observations.iter().enumerate() {
        let step = i + 1;
        let mut forecast_rng = substream(cfg.seed, "augenkf/forecast", &[step as u64]);
        ens = forecast(&ens, solver, cfg.model_noise_std, &noise, &mut forecast_rng)
            .map_err(|e| e.at_step(step, 0))?;
        let mut update_rng = substream(cfg.seed, "augenkf/update", &[step as u64]);
        ens = kalman_update(
            &ens,
            y,
            model,
            cfg.observation_noise_std,
            cfg.ridge,
            &mut update_rng,
        )
        .map_err(|e| e.at_step(step, 0))?;
        let mean = ens.mean();
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(FfError::NonFinite("ensemble mean".into()).at_step(step, 0));
        }
        let err = match references {
            Some(refs) => Some(rmse(&mean[..ens.state_dim], &refs[i])?),
            None => None,
        };
        records.push(record(&ens, step, err));
        noise.shrink();
    }
    Ok(records)
}
