//! Verification problems with known solutions.
//!
//! The manufactured case drives the pressure-continuous model with sources
//! and time-dependent boundary data chosen so the exact solution is
//!
//! ```text
//! p(x, y, t) = (1 + t) sin(pi x / 2 + 0.3) cos(pi y + 0.2)
//! ```
//!
//! on the standard domain (0,2) x (0,1) with the fracture at x = 1. The
//! subdomain conductivity is k on both sides; the fracture is passive
//! (tangential conductivity alpha, unit aperture and porosities, and a
//! matching fracture source). The exact flux is continuous across the
//! fracture, so the fracture exchanges no net mass with the subdomains.

use std::sync::Arc;

use crate::bc::{BoundaryData, EdgeBc, FractureBc, Sources};
use crate::error::Result;
use crate::forward::ForwardModel;
use crate::mesh::{build_mesh, CellKind};
use crate::model::{Medium, ModelVariant};

#[derive(Debug, Clone, Copy)]
pub struct ManufacturedCase {
    pub k: f64,
    pub alpha: f64,
}

impl Default for ManufacturedCase {
    fn default() -> Self {
        ManufacturedCase { k: 1.0, alpha: 0.7 }
    }
}

impl ManufacturedCase {
    pub fn exact_pressure(&self, x: f64, y: f64, t: f64) -> f64 {
        (1.0 + t) * shape_x(x) * shape_y(y)
    }

    /// Builds the model at mesh size 1/ny (the domain is 2 x 1, so nx = 2ny).
    pub fn model(&self, ny: usize, kind: CellKind) -> Result<ForwardModel> {
        let mesh = build_mesh(2.0, 1.0, 2 * ny, ny, 1.0, kind)?;
        let k = self.k;
        let alpha = self.alpha;
        let bc = BoundaryData {
            outer: Arc::new(move |_, x, t| {
                EdgeBc::Pressure((1.0 + t) * shape_x(x[0]) * shape_y(x[1]))
            }),
            fracture: [
                FractureBc::Pressure(Arc::new(move |t| (1.0 + t) * shape_x(1.0) * shape_y(0.0))),
                FractureBc::Pressure(Arc::new(move |t| (1.0 + t) * shape_x(1.0) * shape_y(1.0))),
            ],
        };
        // phi dp/dt - div(k grad p) = q with phi = 1:
        // q = S C (1 + k (1 + t) 5 pi^2 / 4).
        let sources = Sources {
            subdomain: Arc::new(move |_, x, t| {
                shape_x(x[0])
                    * shape_y(x[1])
                    * (1.0 + k * (1.0 + t) * 5.0 * std::f64::consts::PI.powi(2) / 4.0)
            }),
            // Along the fracture (aperture and porosity 1):
            // dp/dt - alpha d2p/dy2 = q_gamma.
            fracture: Arc::new(move |y, t| {
                shape_x(1.0)
                    * shape_y(y)
                    * (1.0 + alpha * std::f64::consts::PI.powi(2) * (1.0 + t))
            }),
        };
        Ok(ForwardModel::new(
            mesh,
            ModelVariant::ContinuousPressure,
            Medium::unit(1.0),
            bc,
            sources,
        ))
    }

    /// Initial state: exact pressures sampled at cell centroids and segment
    /// midpoints (velocity entries are irrelevant to the first step).
    pub fn initial_state(&self, model: &ForwardModel) -> Vec<f64> {
        let mut state = vec![0.0; model.n_dofs()];
        for (ci, cell) in model.mesh.cells.iter().enumerate() {
            state[model.dofs.cell_pressure[ci]] =
                self.exact_pressure(cell.centroid[0], cell.centroid[1], 0.0);
        }
        for (seg, &e) in model.mesh.interface_edges.iter().enumerate() {
            state[model.dofs.fracture_pressure[seg]] =
                self.exact_pressure(1.0, model.mesh.edges[e].midpoint[1], 0.0);
        }
        state
    }

    /// L2 error of the cell pressures at the final time after running to
    /// `t_end` in `n_steps` backward-Euler steps.
    pub fn pressure_error(
        &self,
        ny: usize,
        kind: CellKind,
        n_steps: usize,
        t_end: f64,
    ) -> Result<f64> {
        let model = self.model(ny, kind)?;
        let theta = [self.k, self.k, self.alpha];
        let dt = t_end / n_steps as f64;
        let mut state = self.initial_state(&model);
        for n in 1..=n_steps {
            state = model.step(&state, &theta, n as f64 * dt, dt)?;
        }
        let mut err2 = 0.0;
        for (ci, cell) in model.mesh.cells.iter().enumerate() {
            let got = state[model.dofs.cell_pressure[ci]];
            let want = self.exact_pressure(cell.centroid[0], cell.centroid[1], t_end);
            err2 += cell.area * (got - want) * (got - want);
        }
        Ok(err2.sqrt())
    }

    /// Errors on a ladder of meshes with the time step proportional to the
    /// mesh size: ny doubles and n_steps doubles level to level.
    pub fn convergence_errors(
        &self,
        base_ny: usize,
        base_steps: usize,
        levels: usize,
        kind: CellKind,
        t_end: f64,
    ) -> Result<Vec<f64>> {
        (0..levels)
            .map(|l| self.pressure_error(base_ny << l, kind, base_steps << l, t_end))
            .collect()
    }
}

fn shape_x(x: f64) -> f64 {
    (std::f64::consts::PI * x / 2.0 + 0.3).sin()
}

fn shape_y(y: f64) -> f64 {
    (std::f64::consts::PI * y + 0.2).cos()
}
