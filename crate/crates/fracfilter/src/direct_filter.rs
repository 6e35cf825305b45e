//! Particle-based recursive Bayesian estimation of model parameters.
//!
//! Parameters evolve as a bounded random walk with decaying exploration
//! noise. Each filter step perturbs the particle cloud, scores every particle
//! by how closely its one-step model prediction matches the current state
//! estimate, resamples with replacement, and reports the post-resampling
//! mean as the committed parameter estimate.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, FfError, Result};
use crate::stats;

/// Cloud of parameter particles with their weights and admissible box.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    /// One parameter vector per particle.
    pub particles: Vec<Vec<f64>>,
    /// Normalized weights over the particles; uniform after resampling.
    pub weights: Vec<f64>,
    /// Per-component `(lo, hi)` admissible interval.
    pub bounds: Vec<(f64, f64)>,
}

impl ParticleSet {
    /// Validates and wraps a cloud; weights start uniform.
    pub fn new(particles: Vec<Vec<f64>>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if particles.is_empty() {
            return Err(FfError::Config("particle set must not be empty".into()));
        }
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(FfError::Config(format!(
                    "invalid parameter bounds [{lo}, {hi}]"
                )));
            }
        }
        for p in &particles {
            check_len("particle components", bounds.len(), p.len())?;
            for (v, &(lo, hi)) in p.iter().zip(&bounds) {
                if !(*v >= lo && *v <= hi) {
                    return Err(FfError::Config(format!(
                        "particle component {v} outside [{lo}, {hi}]"
                    )));
                }
            }
        }
        let m = particles.len();
        Ok(ParticleSet {
            particles,
            weights: vec![1.0 / m as f64; m],
            bounds,
        })
    }

    /// `m` copies of the initial guess; the first perturbation spreads them.
    pub fn from_guess(guess: &[f64], m: usize, bounds: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(vec![guess.to_vec(); m], bounds)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// Random-walk exploration noise for the parameter particles.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterNoise {
    /// Per-component standard deviation of the perturbation.
    pub gamma: Vec<f64>,
    /// Multiplicative shrink applied once per filter step.
    pub decay: f64,
    /// Per-component lower limit that the decay never crosses.
    pub floor: Vec<f64>,
}

impl ParameterNoise {
    /// Defaults: std 5% of the guess magnitude per component, decay 0.98 per
    /// step, floored at 0.1% so exploration never stops entirely.
    pub fn from_guess(guess: &[f64]) -> Self {
        ParameterNoise {
            gamma: guess.iter().map(|g| 0.05 * g.abs()).collect(),
            decay: 0.98,
            floor: guess.iter().map(|g| 0.001 * g.abs()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("noise floor components", self.gamma.len(), self.floor.len())?;
        if self.gamma.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(FfError::Config(
                "perturbation std must be positive and finite".into(),
            ));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(FfError::Config(format!(
                "noise decay {} outside (0, 1]",
                self.decay
            )));
        }
        if self.floor.iter().any(|f| !(*f >= 0.0)) {
            return Err(FfError::Config("noise floor must be nonnegative".into()));
        }
        Ok(())
    }

    /// Applies one step of decay, respecting the floor.
    pub fn shrink(&mut self) {
        for (g, &f) in self.gamma.iter_mut().zip(&self.floor) {
            *g = (*g * self.decay).max(f);
        }
    }
}

/// Settings for the particle likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodConfig {
    /// Standard deviation of the state-model noise; its square is the
    /// nominal comparison variance.
    pub model_noise_std: f64,
    /// Floor on the comparison std. With tiny model noise the likelihood
    /// would concentrate all mass on one particle; the floor tempers it.
    /// Set to zero to compare at the literal model-noise variance.
    pub tempering_floor: f64,
    /// Add model noise to the particle predictions before comparing, the
    /// literal state-model form. Off by default: the noise-free comparison
    /// has lower weight variance.
    pub perturbed_prediction: bool,
}

impl LikelihoodConfig {
    pub fn new(model_noise_std: f64) -> Self {
        LikelihoodConfig {
            model_noise_std,
            tempering_floor: 1e-3,
            perturbed_prediction: false,
        }
    }

    /// Comparison variance after tempering.
    pub fn effective_variance(&self) -> f64 {
        self.model_noise_std
            .powi(2)
            .max(self.tempering_floor.powi(2))
    }
}

/// Outcome of a weighting pass.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightOutcome {
    /// Normalized weights, one per particle.
    pub weights: Vec<f64>,
    /// True when every log-weight was non-finite and the weights were reset
    /// to uniform; signals exploration noise too small or an inconsistent
    /// state estimate.
    pub degenerate: bool,
}

/// Result of one full [`update`] step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Post-resampling particle mean, the committed parameter estimate.
    pub estimate: Vec<f64>,
    /// Carried over from the weighting pass; see [`WeightOutcome`].
    pub degenerate: bool,
}

/// Proposes predicted particles: independent Gaussian noise per component,
/// folded back into the admissible box by mirror reflection at the ends.
pub fn perturb(
    ps: &ParticleSet,
    noise: &ParameterNoise,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    check_len("perturbation std components", ps.bounds.len(), noise.gamma.len())?;
    let mut out = Vec::with_capacity(ps.len());
    for p in &ps.particles {
        let mut q = Vec::with_capacity(p.len());
        for ((&v, &g), &(lo, hi)) in p.iter().zip(&noise.gamma).zip(&ps.bounds) {
            let normal = Normal::new(0.0, g)
                .map_err(|_| FfError::Config(format!("invalid perturbation std {g}")))?;
            let x = v + normal.sample(rng);
            if !x.is_finite() {
                return Err(FfError::NonFinite("parameter perturbation".into()));
            }
            q.push(reflect(x, lo, hi));
        }
        out.push(q);
    }
    Ok(out)
}

/// Folds a value back into `[lo, hi]` by mirror reflection; a value at
/// distance `d` past an end lands at distance `d` inside it.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let mut y = x;
    loop {
        if y < lo {
            y = lo + (lo - y);
        } else if y > hi {
            y = hi - (y - hi);
        } else {
            return y;
        }
    }
}

/// Scores particles by the Gaussian likelihood of their one-step model
/// predictions against the current state estimate.
///
/// `solver(prev_state, theta)` must return the noise-free one-step
/// prediction under parameter `theta`. Weights are computed in the log
/// domain and normalized; particles with non-finite predictions get weight
/// zero. If every log-weight is non-finite the weights reset to uniform and
/// the outcome is flagged degenerate. The RNG is only consumed in the
/// perturbed-prediction mode.
pub fn weight(
    particles: &[Vec<f64>],
    state_estimate: &[f64],
    prev_state: &[f64],
    solver: &mut impl FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
    cfg: &LikelihoodConfig,
    rng: &mut impl Rng,
) -> Result<WeightOutcome> {
    let m = particles.len();
    if m == 0 {
        return Err(FfError::Config("cannot weight an empty cloud".into()));
    }
    let var = cfg.effective_variance();
    if !(var > 0.0) {
        return Err(FfError::Config(format!(
            "comparison variance {var} must be positive"
        )));
    }
    let noise = Normal::new(0.0, cfg.model_noise_std)
        .map_err(|_| FfError::Config("invalid model noise std".into()))?;
    let mut logw = Vec::with_capacity(m);
    for theta in particles {
        let mut pred = solver(prev_state, theta)?;
        check_len("particle prediction", state_estimate.len(), pred.len())?;
        if cfg.perturbed_prediction {
            for v in &mut pred {
                *v += noise.sample(rng);
            }
        }
        let d2 = stats::sum(
            pred.iter()
                .zip(state_estimate)
                .map(|(&a, &b)| (a - b) * (a - b)),
        );
        logw.push(-0.5 * d2 / var);
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Ok(WeightOutcome {
            weights: vec![1.0 / m as f64; m],
            degenerate: true,
        });
    }
    let mut weights: Vec<f64> = logw
        .iter()
        .map(|&l| if l.is_finite() { (l - top).exp() } else { 0.0 })
        .collect();
    let total = stats::sum(weights.iter().copied());
    for w in &mut weights {
        *w /= total;
    }
    Ok(WeightOutcome {
        weights,
        degenerate: false,
    })
}

/// Draws `M` particles with replacement from the categorical distribution
/// given by `weights`.
pub fn resample(
    particles: &[Vec<f64>],
    weights: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    check_len("resampling weights", particles.len(), weights.len())?;
    let dist = WeightedIndex::new(weights)
        .map_err(|e| FfError::Config(format!("invalid resampling weights: {e}")))?;
    Ok((0..particles.len())
        .map(|_| particles[dist.sample(rng)].clone())
        .collect())
}

/// Mean of the post-resampling particles, the committed estimate.
pub fn estimate(particles: &[Vec<f64>]) -> Vec<f64> {
    stats::mean_vector(particles)
}

/// One full parameter-filter step: perturb, weight, resample, estimate.
/// The particle set is replaced by the resampled cloud with uniform weights.
/// Noise decay is the caller's schedule (once per filter step, not per call).
pub fn update(
    ps: &mut ParticleSet,
    noise: &ParameterNoise,
    state_estimate: &[f64],
    prev_state: &[f64],
    solver: &mut impl FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
    cfg: &LikelihoodConfig,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    let predicted = perturb(ps, noise, rng)?;
    let outcome = weight(&predicted, state_estimate, prev_state, solver, cfg, rng)?;
    ps.particles = resample(&predicted, &outcome.weights, rng)?;
    let m = ps.particles.len() as f64;
    ps.weights = vec![1.0 / m; ps.particles.len()];
    Ok(StepOutcome {
        estimate: estimate(&ps.particles),
        degenerate: outcome.degenerate,
    })
}
