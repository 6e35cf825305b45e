//! Boundary data and volume sources for the flow and transport problems.
//!
//! Prescribed-scalar (pressure or concentration) conditions are natural in
//! the mixed formulation and enter the right-hand side; no-flow conditions
//! are essential and pin the corresponding velocity unknowns to zero. The
//! type of condition on each edge must not change in time, and strips of
//! different conditions must align with mesh edges.

use std::sync::Arc;

use crate::mesh::BoundarySide;

/// Condition at a point of the outer boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeBc {
    /// Prescribed scalar (pressure, or concentration for transport).
    Pressure(f64),
    /// Zero normal flux.
    NoFlow,
}

/// Evaluates the outer-boundary condition at (side, position, time).
pub type OuterBcFn = Arc<dyn Fn(BoundarySide, [f64; 2], f64) -> EdgeBc + Send + Sync>;

/// Condition at one fracture endpoint.
#[derive(Clone)]
pub enum FractureBc {
    /// Prescribed scalar as a function of time.
    Pressure(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    NoFlow,
}

impl FractureBc {
    pub fn constant(value: f64) -> Self {
        FractureBc::Pressure(Arc::new(move |_| value))
    }
}

#[derive(Clone)]
pub struct BoundaryData {
    pub outer: OuterBcFn,
    /// Conditions at the bottom and top fracture endpoints, in that order.
    pub fracture: [FractureBc; 2],
}

impl BoundaryData {
    /// Prescribes one constant scalar on the whole outer boundary and both
    /// fracture endpoints.
    pub fn uniform_pressure(value: f64) -> Self {
        BoundaryData {
            outer: Arc::new(move |_, _, _| EdgeBc::Pressure(value)),
            fracture: [FractureBc::constant(value), FractureBc::constant(value)],
        }
    }

    /// No-flow everywhere (only meaningful together with storage terms).
    pub fn no_flow() -> Self {
        BoundaryData {
            outer: Arc::new(|_, _, _| EdgeBc::NoFlow),
            fracture: [FractureBc::NoFlow, FractureBc::NoFlow],
        }
    }
}

/// Volume sources: per unit area in the subdomains, per unit fracture length
/// (aperture already folded in) on the fracture.
#[derive(Clone)]
pub struct Sources {
    /// q_i(subdomain, position, time)
    pub subdomain: Arc<dyn Fn(u8, [f64; 2], f64) -> f64 + Send + Sync>,
    /// q_gamma(y, time)
    pub fracture: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl Sources {
    pub fn none() -> Self {
        Sources {
            subdomain: Arc::new(|_, _, _| 0.0),
            fracture: Arc::new(|_, _| 0.0),
        }
    }
}
