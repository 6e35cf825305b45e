//! Model variants and the coefficients they induce for a parameter vector.
//!
//! All variants are driven by a three-component parameter vector theta:
//!
//! * `ContinuousPressure`: theta = (k1, k2, alpha_gamma), subdomain
//!   conductivities and the effective tangential fracture conductivity
//!   (tangential conductivity times aperture). Pressure is continuous across
//!   the fracture.
//! * `GeneralInterface`: theta = (k1, k2, k_f). The fracture is anisotropic
//!   and heterogeneous: segments inside `across_band` conduct in the normal
//!   direction with k_f and block tangentially with 1/k_f; the remaining
//!   segments do the reverse. Subdomain and fracture pressures are coupled
//!   through a Robin condition with parameter `xi`.
//! * `AdvectionDiffusion`: theta = (rho1, rho2, rho_gamma), reciprocals of
//!   the molecular diffusivities (rho_gamma is the reciprocal of the
//!   effective tangential fracture diffusivity). The same mixed operator then
//!   describes diffusive transport; advection on a frozen Darcy field is
//!   added separately.

use serde::{Deserialize, Serialize};

use crate::error::{FfError, Result};
use crate::mesh::Mesh;

/// Porosities and fracture aperture. Zero porosity yields the steady
/// (elliptic) problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Medium {
    /// Subdomain porosities (phi_1, phi_2).
    pub porosity: [f64; 2],
    pub fracture_porosity: f64,
    /// Fracture aperture delta.
    pub delta: f64,
}

impl Medium {
    /// Unit porosities: the classic parabolic model.
    pub fn unit(delta: f64) -> Self {
        Medium {
            porosity: [1.0, 1.0],
            fracture_porosity: 1.0,
            delta,
        }
    }

    /// Zero storage: steady flow.
    pub fn steady(delta: f64) -> Self {
        Medium {
            porosity: [0.0, 0.0],
            fracture_porosity: 0.0,
            delta,
        }
    }
}

/// Robin coupling between subdomain traces and the fracture pressure.
#[derive(Debug, Clone)]
pub struct RobinCoupling {
    /// Averaging weight; must exceed 1/2 for a positive-definite velocity
    /// block. The cross weight is 1 - xi.
    pub xi: f64,
    /// Per-segment coupling coefficient (2 K_f,normal / delta).
    pub kappa: Vec<f64>,
}

/// Flow coefficients for one parameter vector, resolved per mesh entity.
#[derive(Debug, Clone)]
pub struct Coefficients {
    /// Subdomain conductivities (k_1, k_2); the velocity block is weighted by
    /// their reciprocals.
    pub k: [f64; 2],
    /// Per-segment effective tangential fracture conductivity
    /// (K_f,tangential times aperture).
    pub alpha_gamma: Vec<f64>,
    /// Robin coupling, or `None` for a pressure-continuous fracture.
    pub robin: Option<RobinCoupling>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ModelVariant {
    ContinuousPressure,
    GeneralInterface {
        xi: f64,
        /// y-interval of fracture segments that conduct across rather than
        /// along.
        across_band: [f64; 2],
    },
    AdvectionDiffusion,
}

impl ModelVariant {
    /// Resolves theta into per-entity coefficients.
    pub fn coefficients(&self, mesh: &Mesh, theta: &[f64], delta: f64) -> Result<Coefficients> {
        crate::error::check_len("parameter vector", 3, theta.len())?;
        for (i, &t) in theta.iter().enumerate() {
            if !t.is_finite() || t <= 0.0 {
                return Err(FfError::SingularOperator(format!(
                    "parameter {i} must be positive and finite, got {t}"
                )));
            }
        }
        let n_seg = mesh.interface_edges.len();
        Ok(match *self {
            ModelVariant::ContinuousPressure => Coefficients {
                k: [theta[0], theta[1]],
                alpha_gamma: vec![theta[2]; n_seg],
                robin: None,
            },
            ModelVariant::GeneralInterface { xi, across_band } => {
                if !(xi > 0.5 && xi <= 1.0) {
                    return Err(FfError::Config(format!(
                        "Robin weight xi must lie in (1/2, 1], got {xi}"
                    )));
                }
                let k_f = theta[2];
                let mut alpha = Vec::with_capacity(n_seg);
                let mut kappa = Vec::with_capacity(n_seg);
                for &e in &mesh.interface_edges {
                    let y = mesh.edges[e].midpoint[1];
                    if y > across_band[0] && y < across_band[1] {
                        // Conducts across: high normal, low tangential.
                        alpha.push(delta / k_f);
                        kappa.push(2.0 * k_f / delta);
                    } else {
                        // Conducts along: high tangential, low normal.
                        alpha.push(k_f * delta);
                        kappa.push(2.0 / (k_f * delta));
                    }
                }
                Coefficients {
                    k: [theta[0], theta[1]],
                    alpha_gamma: alpha,
                    robin: Some(RobinCoupling { xi, kappa }),
                }
            }
            ModelVariant::AdvectionDiffusion => Coefficients {
                // Reciprocal parameters: the velocity block is weighted by
                // 1/d = rho directly.
                k: [1.0 / theta[0], 1.0 / theta[1]],
                alpha_gamma: vec![1.0 / theta[2]; n_seg],
                robin: Some(RobinCoupling {
                    xi: 1.0,
                    // kappa = 2 d_f / delta with d_f = 1 / (rho_gamma delta).
                    kappa: vec![2.0 / (theta[2] * delta * delta); n_seg],
                }),
            },
        })
    }
}
