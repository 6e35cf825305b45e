//! Observation operators: which state entries are read, how they are
//! transformed, and likelihood quantities for the filters.
//!
//! Three kinds are supported: reading the full state, reading a random
//! subset of fixed fraction, and reading a random subset in which every
//! velocity entry (subdomain edge fluxes and fracture fluxes) passes through
//! arctan before noise is added. The observed index set is drawn once per
//! experiment from its own seed and kept sorted.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::mesh::DofMap;
use crate::rng::substream;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationKind {
    Full,
    RandomMask { fraction: f64 },
    MixedArctan { fraction: f64 },
}

#[derive(Debug, Clone)]
pub struct ObservationModel {
    /// Observed state indices, strictly increasing.
    pub indices: Vec<usize>,
    /// Per observed component: reading is arctan(state) instead of state.
    pub transformed: Vec<bool>,
    /// Observation noise standard deviation used when generating data.
    pub sigma: f64,
}

impl ObservationModel {
    /// Draws the observed index set for a state of dimension `n`. The mask
    /// substream is derived from (seed, "observation/mask"), so the same seed
    /// always selects the same components.
    pub fn build(kind: ObservationKind, dofs: &DofMap, sigma: f64, seed: u64) -> Self {
        let n = dofs.n_dofs;
        let (fraction, arctan) = match kind {
            ObservationKind::Full => (1.0, false),
            ObservationKind::RandomMask { fraction } => (fraction, false),
            ObservationKind::MixedArctan { fraction } => (fraction, true),
        };
        let m = ((n as f64 * fraction).round() as usize).clamp(1, n);
        let indices = if m == n {
            (0..n).collect()
        } else {
            // Partial Fisher-Yates: the first m entries are a uniform sample
            // without replacement.
            let mut rng = substream(seed, "observation/mask", &[]);
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..m {
                let j = rng.random_range(i..n);
                pool.swap(i, j);
            }
            let mut picked = pool[..m].to_vec();
            picked.sort_unstable();
            picked
        };
        let transformed = indices
            .iter()
            .map(|&d| arctan && dofs.is_velocity(d))
            .collect();
        ObservationModel {
            indices,
            transformed,
            sigma,
        }
    }

    /// Number of observed components.
    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    /// Noise-free reading g(z).
    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        self.indices
            .iter()
            .zip(&self.transformed)
            .map(|(&d, &t)| if t { state[d].atan() } else { state[d] })
            .collect()
    }

    /// Noisy observations of a sequence of states. Observation i uses the
    /// substream (seed, "observation/noise", [i]), so regenerating with the
    /// same seed is bit-identical and independent of how many states came
    /// before.
    pub fn generate_data(&self, states: &[Vec<f64>], seed: u64) -> Vec<Vec<f64>> {
        states
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let mut y = self.observe(z);
                if self.sigma > 0.0 {
                    let normal = Normal::new(0.0, self.sigma).expect("valid sigma");
                    let mut rng = substream(seed, "observation/noise", &[i as u64]);
                    for v in &mut y {
                        *v += normal.sample(&mut rng);
                    }
                }
                y
            })
            .collect()
    }

    /// log p(y | z) for independent normal noise of the given variance.
    pub fn log_likelihood(&self, state: &[f64], y: &[f64], variance: f64) -> Result<f64> {
        check_len("observation", self.dim(), y.len())?;
        let g = self.observe(state);
        let ss = stats::sum(g.iter().zip(y).map(|(a, b)| (a - b) * (a - b)));
        Ok(-0.5 * ss / variance)
    }

    /// Gradient of log p(y | z) with respect to the full state:
    /// -J(z)^T (g(z) - y) / variance, zero off the observed indices.
    pub fn log_likelihood_grad(&self, state: &[f64], y: &[f64], variance: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; state.len()];
        self.accumulate_likelihood_grad(state, y, variance, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds scale * grad log p(y | z) into `out` (length of the full state).
    pub fn accumulate_likelihood_grad(
        &self,
        state: &[f64],
        y: &[f64],
        variance: f64,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        check_len("observation", self.dim(), y.len())?;
        check_len("state", state.len(), out.len())?;
        for ((&d, &t), &yj) in self.indices.iter().zip(&self.transformed).zip(y) {
            let (gj, dj) = if t {
                (state[d].atan(), 1.0 / (1.0 + state[d] * state[d]))
            } else {
                (state[d], 1.0)
            };
            out[d] += scale * (-(gj - yj) * dj / variance);
        }
        Ok(())
    }

    /// Diagonal of the observation Jacobian dg/dz at `state`, one entry per
    /// observed component.
    pub fn jacobian_diag(&self, state: &[f64]) -> Vec<f64> {
        self.indices
            .iter()
            .zip(&self.transformed)
            .map(|(&d, &t)| {
                if t {
                    1.0 / (1.0 + state[d] * state[d])
                } else {
                    1.0
                }
            })
            .collect()
    }
}
