//! Steady Darcy flow and the upwind advective operator it induces.
//!
//! For transport problems the flow field is computed once (it does not depend
//! on the estimated parameters), validated for discrete mass conservation,
//! and frozen. Transport then advects cell and fracture concentrations with
//! donor-cell upwinding on that field.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::assemble::{solve_steady, AdvectionOperator, InflowFace};
use crate::bc::{BoundaryData, EdgeBc, FractureBc, Sources};
use crate::error::Result;
use crate::mesh::{DofMap, Mesh};
use crate::model::Coefficients;

/// Solves the steady flow problem; the returned vector is a full state in dof
/// order (velocities, pressures, fracture flux, fracture pressure).
pub fn solve_darcy(
    mesh: &Mesh,
    dofs: &DofMap,
    coeffs: &Coefficients,
    delta: f64,
    bc: &BoundaryData,
) -> Result<Vec<f64>> {
    solve_steady(mesh, dofs, coeffs, delta, bc, &Sources::none(), None, 0.0)
}

/// Velocity dof and outward sign for a (cell, local edge) pair: interface
/// edges use the cell's own trace, which is already outward-oriented.
pub(crate) fn outward_flux_dof(
    mesh: &Mesh,
    dofs: &DofMap,
    cell: usize,
    local: usize,
) -> (usize, f64) {
    let e = mesh.cells[cell].edges[local];
    match mesh.edges[e].interface {
        Some(seg) if mesh.cells[cell].subdomain == 2 => (dofs.side2_flux[seg], 1.0),
        Some(_) => (dofs.edge_flux[e], 1.0),
        None => (dofs.edge_flux[e], mesh.cells[cell].signs[local]),
    }
}

/// Largest violation of discrete mass conservation: the net volumetric
/// outflux of any cell or fracture segment.
pub fn divergence_residual(mesh: &Mesh, dofs: &DofMap, state: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (ci, cell) in mesh.cells.iter().enumerate() {
        let mut net = 0.0;
        for local in 0..cell.edges.len() {
            let (dof, s) = outward_flux_dof(mesh, dofs, ci, local);
            net += s * mesh.edges[cell.edges[local]].length * state[dof];
        }
        worst = worst.max(net.abs());
    }
    for (seg, &e) in mesh.interface_edges.iter().enumerate() {
        let l = mesh.edges[e].length;
        let inflow = l * (state[dofs.edge_flux[e]] + state[dofs.side2_flux[seg]]);
        let along = state[dofs.fracture_flux[seg + 1]] - state[dofs.fracture_flux[seg]];
        worst = worst.max((along - inflow).abs());
    }
    worst
}

/// Adds independent normal noise to every velocity unknown except those
/// sealed by no-flow conditions, modelling an imperfectly known flow field.
pub fn perturb_velocities(
    mesh: &Mesh,
    dofs: &DofMap,
    bc: &BoundaryData,
    state: &[f64],
    sigma: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    let mut out = state.to_vec();
    for (eid, edge) in mesh.edges.iter().enumerate() {
        if let Some(side) = edge.boundary {
            if (bc.outer)(side, edge.midpoint, 0.0) == EdgeBc::NoFlow {
                continue;
            }
        }
        out[dofs.edge_flux[eid]] += normal.sample(rng);
        if let Some(seg) = edge.interface {
            out[dofs.side2_flux[seg]] += normal.sample(rng);
        }
    }
    for (node, &dof) in dofs.fracture_flux.iter().enumerate() {
        let sealed = (node == 0 && matches!(bc.fracture[0], FractureBc::NoFlow))
            || (node + 1 == dofs.fracture_flux.len()
                && matches!(bc.fracture[1], FractureBc::NoFlow));
        if !sealed {
            out[dof] += normal.sample(rng);
        }
    }
    out
}

/// Builds the donor-cell upwind advective operator for a frozen flow field.
///
/// Boundary faces with inflow record the face so the transport right-hand
/// side can evaluate the prescribed boundary concentration at the current
/// time.
pub fn advective_operator(
    mesh: &Mesh,
    dofs: &DofMap,
    state: &[f64],
) -> Result<AdvectionOperator> {
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut inflows: Vec<(usize, InflowFace, f64)> = Vec::new();
    let push = |entries: &mut Vec<(usize, usize, f64)>, r: usize, c: usize, v: f64| {
        if v != 0.0 {
            entries.push((r, c, v));
        }
    };

    for (ci, cell) in mesh.cells.iter().enumerate() {
        let row = dofs.cell_pressure[ci];
        for local in 0..cell.edges.len() {
            let e = cell.edges[local];
            let (dof, s) = outward_flux_dof(mesh, dofs, ci, local);
            let flux = s * mesh.edges[e].length * state[dof];
            if let Some(seg) = mesh.edges[e].interface {
                // Exchange with the fracture segment, one trace per side.
                let other = dofs.fracture_pressure[seg];
                push(&mut entries, row, row, flux.max(0.0));
                push(&mut entries, row, other, flux.min(0.0));
                push(&mut entries, other, other, (-flux).max(0.0));
                push(&mut entries, other, row, (-flux).min(0.0));
            } else if let Some(nb) = mesh.neighbor(ci, e) {
                push(&mut entries, row, row, flux.max(0.0));
                push(&mut entries, row, dofs.cell_pressure[nb], flux.min(0.0));
            } else if flux > 0.0 {
                push(&mut entries, row, row, flux);
            } else if flux < 0.0 {
                let side = mesh.edges[e]
                    .boundary
                    .expect("edge with one cell is a boundary edge");
                inflows.push((
                    row,
                    InflowFace::Outer {
                        side,
                        midpoint: mesh.edges[e].midpoint,
                    },
                    -flux,
                ));
            }
        }
    }

    // Along-fracture transport between adjacent segments.
    let n_seg = mesh.interface_edges.len();
    for node in 1..n_seg {
        let flux = state[dofs.fracture_flux[node]];
        let lo = dofs.fracture_pressure[node - 1];
        let hi = dofs.fracture_pressure[node];
        push(&mut entries, lo, lo, flux.max(0.0));
        push(&mut entries, lo, hi, flux.min(0.0));
        push(&mut entries, hi, hi, (-flux).max(0.0));
        push(&mut entries, hi, lo, (-flux).min(0.0));
    }
    // Fracture endpoints: outward flux is -u at the bottom, +u at the top.
    for (end, node, orient) in [(0usize, 0usize, -1.0f64), (1, n_seg, 1.0)] {
        let flux = orient * state[dofs.fracture_flux[node]];
        let row = dofs.fracture_pressure[if end == 0 { 0 } else { n_seg - 1 }];
        if flux > 0.0 {
            push(&mut entries, row, row, flux);
        } else if flux < 0.0 {
            inflows.push((row, InflowFace::FractureEnd { end }, -flux));
        }
    }

    Ok(AdvectionOperator { entries, inflows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_dof_map, build_mesh, BoundarySide, CellKind, DofKind};
    use crate::model::{Coefficients, RobinCoupling};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn table_coeffs(mesh: &Mesh) -> Coefficients {
        // Conductivity 9.92e-6 in the subdomains; isotropic fracture
        // conductivity 3.15e-5 with aperture 0.1.
        let n_seg = mesh.interface_edges.len();
        Coefficients {
            k: [9.92e-6, 9.92e-6],
            alpha_gamma: vec![3.15e-5 * 0.1; n_seg],
            robin: Some(RobinCoupling {
                xi: 1.0,
                kappa: vec![2.0 * 3.15e-5 / 0.1; n_seg],
            }),
        }
    }

    fn darcy_bc() -> BoundaryData {
        BoundaryData {
            outer: Arc::new(|side, x, _| match side {
                BoundarySide::Bottom => EdgeBc::Pressure(1e4 * (1.0 + 0.05 * (x[0] - 1.0).abs())),
                BoundarySide::Top => EdgeBc::Pressure(0.0),
                _ => EdgeBc::NoFlow,
            }),
            fracture: [FractureBc::constant(1e4), FractureBc::constant(0.0)],
        }
    }

    #[test]
    fn uniform_conductivity_linear_pressure_gives_constant_velocity() {
        // Flow parallel to the fracture: pressure 1 at the bottom, 0 at the
        // top, sealed sides. The exact solution is linear pressure and
        // uniform vertical velocity, reproduced to machine precision.
        let k = 9.92e-6;
        let alpha = 3.15e-6;
        let mesh = build_mesh(2.0, 1.0, 8, 4, 1.0, CellKind::Rectangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let n_seg = mesh.interface_edges.len();
        let coeffs = Coefficients {
            k: [k, k],
            alpha_gamma: vec![alpha; n_seg],
            robin: Some(RobinCoupling {
                xi: 1.0,
                kappa: vec![6.3e-4; n_seg],
            }),
        };
        let bc = BoundaryData {
            outer: Arc::new(|side, _, _| match side {
                BoundarySide::Bottom => EdgeBc::Pressure(1.0),
                BoundarySide::Top => EdgeBc::Pressure(0.0),
                _ => EdgeBc::NoFlow,
            }),
            fracture: [FractureBc::constant(1.0), FractureBc::constant(0.0)],
        };
        let state = solve_darcy(&mesh, &dofs, &coeffs, 0.1, &bc).unwrap();
        for d in 0..dofs.n_dofs {
            let want = match dofs.kind(d) {
                DofKind::EdgeFlux { edge, side } => match side {
                    2 => 0.0,
                    // Upward velocity k against each edge's global normal.
                    _ => k * mesh.edges[edge].normal[1],
                },
                DofKind::CellPressure { cell } => 1.0 - mesh.cells[cell].centroid[1],
                DofKind::FractureFlux { .. } => alpha,
                DofKind::FracturePressure { segment } => {
                    1.0 - mesh.edges[mesh.interface_edges[segment]].midpoint[1]
                }
            };
            assert!(
                (state[d] - want).abs() < 1e-12,
                "dof {d} ({:?}): got {}, want {want}",
                dofs.kind(d),
                state[d]
            );
        }
        assert!(divergence_residual(&mesh, &dofs, &state) < 1e-15);
    }

    #[test]
    fn fracture_dominates_upward_flow() {
        // Pressure drop from bottom to top with the bottom pressure rising
        // away from the fracture: the fracture carries far more than its
        // share of the upward flow.
        let mesh = build_mesh(2.0, 1.0, 40, 20, 1.0, CellKind::Rectangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let state = solve_darcy(&mesh, &dofs, &table_coeffs(&mesh), 0.1, &darcy_bc()).unwrap();

        // Upward flux through the horizontal cut at mid-height.
        let mut matrix_flux = 0.0;
        for (eid, edge) in mesh.edges.iter().enumerate() {
            let horizontal = edge.normal[0].abs() < 1e-12;
            if horizontal && (edge.midpoint[1] - 0.5).abs() < 1e-9 {
                // Global normal of horizontal edges points down.
                matrix_flux += -state[dofs.edge_flux[eid]] * edge.length;
            }
        }
        let mid_node = dofs.fracture_flux.len() / 2;
        let fracture_flux = state[dofs.fracture_flux[mid_node]];
        let total = matrix_flux + fracture_flux;
        assert!(total > 0.0, "net flow should be upward");
        let share = fracture_flux / total;
        let width_share = 0.1 / mesh.width;
        assert!(
            share > 2.0 * width_share,
            "fracture share {share:.3} not dominant (width share {width_share:.3})"
        );
    }

    #[test]
    fn divergence_validator_flags_perturbed_fields() {
        let mesh = build_mesh(2.0, 1.0, 20, 10, 1.0, CellKind::Rectangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let bc = darcy_bc();
        let state = solve_darcy(&mesh, &dofs, &table_coeffs(&mesh), 0.1, &bc).unwrap();
        let clean = divergence_residual(&mesh, &dofs, &state);
        let scale = state
            .iter()
            .take(dofs.n_subdomain_flux)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(clean < 1e-12 * scale.max(1.0), "clean residual {clean}");

        let mut rng = crate::rng::substream(5, "darcy-perturb-test", &[]);
        let noisy = perturb_velocities(&mesh, &dofs, &bc, &state, 1e-4, &mut rng);
        let res = divergence_residual(&mesh, &dofs, &noisy);
        assert!(
            res > 1e3 * clean.max(1e-18) && res > 1e-6,
            "perturbation not flagged: {res} vs clean {clean}"
        );
        // Sealed boundaries stay sealed.
        for (eid, edge) in mesh.edges.iter().enumerate() {
            if matches!(edge.boundary, Some(BoundarySide::Left | BoundarySide::Right)) {
                assert_eq!(noisy[dofs.edge_flux[eid]], 0.0);
            }
        }
    }

    /// Hand-built uniform rightward unit flow on a rectangle mesh.
    fn rightward_field(mesh: &Mesh, dofs: &DofMap) -> Vec<f64> {
        let mut state = vec![0.0; dofs.n_dofs];
        for (eid, edge) in mesh.edges.iter().enumerate() {
            // Vertical edges have normal +x.
            if edge.normal[0].abs() > 0.5 {
                state[dofs.edge_flux[eid]] = 1.0;
            }
        }
        for seg in 0..mesh.interface_edges.len() {
            state[dofs.side2_flux[seg]] = -1.0;
        }
        state
    }

    #[test]
    fn zero_field_gives_empty_operator() {
        let mesh = build_mesh(2.0, 1.0, 4, 2, 1.0, CellKind::Rectangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let adv = advective_operator(&mesh, &dofs, &vec![0.0; dofs.n_dofs]).unwrap();
        assert!(adv.entries.is_empty());
        assert!(adv.inflows.is_empty());
    }

    #[test]
    fn upwinding_takes_the_donor_cell() {
        let mesh = build_mesh(2.0, 1.0, 4, 2, 1.0, CellKind::Rectangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let state = rightward_field(&mesh, &dofs);
        let adv = advective_operator(&mesh, &dofs, &state).unwrap();
        let mut u: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(r, c, v) in &adv.entries {
            *u.entry((r, c)).or_insert(0.0) += v;
        }

        // Cell 1 (second from the left in the bottom row) receives from cell
        // 0 on its left and sends rightward into the fracture.
        let row = dofs.cell_pressure[1];
        let left = dofs.cell_pressure[0];
        let dy = mesh.dy;
        assert!((u[&(row, left)] + dy).abs() < 1e-12, "inflow from donor");
        assert!((u[&(row, row)] - dy).abs() < 1e-12, "outflow on diagonal");
        // No coupling against the flow direction.
        let right = dofs.fracture_pressure[0];
        assert!(!u.contains_key(&(row, right)));

        // The fracture segment passes the flow through: gains from the left
        // cell, drains toward the right cell.
        let fp = dofs.fracture_pressure[0];
        assert!((u[&(fp, row)] + dy).abs() < 1e-12);
        assert!((u[&(fp, fp)] - dy).abs() < 1e-12);
        let right_cell = dofs.cell_pressure[2];
        assert!((u[&(right_cell, fp)] + dy).abs() < 1e-12);

        // Inflow through the left boundary is recorded with its face.
        let left_inflows: Vec<_> = adv
            .inflows
            .iter()
            .filter(|(_, f, _)| matches!(f, InflowFace::Outer { side: BoundarySide::Left, .. }))
            .collect();
        assert_eq!(left_inflows.len(), mesh.ny);
        for (_, _, rate) in &adv.inflows {
            assert!(*rate > 0.0);
        }
    }

    #[test]
    fn row_sums_balance_for_divergence_free_fields() {
        // For a divergence-free field, advecting a constant changes nothing:
        // each row's matrix sum equals its recorded boundary inflow.
        let mesh = build_mesh(2.0, 1.0, 6, 3, 1.0, CellKind::Rectangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let state = rightward_field(&mesh, &dofs);
        assert!(divergence_residual(&mesh, &dofs, &state) < 1e-12);
        let adv = advective_operator(&mesh, &dofs, &state).unwrap();
        let mut row_sum: BTreeMap<usize, f64> = BTreeMap::new();
        for &(r, _, v) in &adv.entries {
            *row_sum.entry(r).or_insert(0.0) += v;
        }
        for &(r, _, rate) in &adv.inflows {
            *row_sum.entry(r).or_insert(0.0) -= rate;
        }
        for (r, s) in row_sum {
            assert!(s.abs() < 1e-12, "row {r} unbalanced: {s}");
        }
    }
}
