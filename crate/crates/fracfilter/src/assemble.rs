//! Mixed finite-element assembly for the reduced fracture flow model.
//!
//! Unknowns are mean normal velocities per edge (lowest-order Raviart-Thomas
//! on triangles or rectangles), cell-average pressures, continuous
//! piecewise-linear tangential flux on the fracture, and per-segment fracture
//! pressures. One backward-Euler step solves
//!
//! ```text
//! [ A        B ] [u^n]   [ G                        ]
//! [ dt*B^T   C ] [p^n] = [ C p^{n-1} - dt L_q       ]
//! ```
//!
//! where `A` couples velocities (conductivity-weighted mass, Robin interface
//! exchange, tangential fracture flow), `B` couples pressures to velocities,
//! and `C` holds the (negated) storage terms. For transport problems an
//! upwind advective operator on a frozen Darcy field is folded into the
//! scalar block.

use std::collections::BTreeMap;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::bc::{BoundaryData, EdgeBc, FractureBc, Sources};
use crate::error::{check_len, FfError, Result};
use crate::mesh::{BoundarySide, CellKind, DofMap, Mesh};
use crate::model::{Coefficients, Medium};

/// Upwind advective coupling on a frozen velocity field, in global dof
/// indices (scalar rows and columns only).
#[derive(Debug, Clone)]
pub struct AdvectionOperator {
    /// Matrix entries (row, col, rate); `rate` multiplies the unknown in the
    /// column and drains (positive diagonal) or feeds (negative off-diagonal)
    /// the row's control volume.
    pub entries: Vec<(usize, usize, f64)>,
    /// Boundary inflow faces: (row dof, face, volumetric inflow rate >= 0).
    /// The prescribed boundary concentration enters the right-hand side as
    /// rate times datum.
    pub inflows: Vec<(usize, InflowFace, f64)>,
}

/// Where an advective inflow enters the domain, so the right-hand side can
/// look up the boundary datum at the current time.
#[derive(Debug, Clone, Copy)]
pub enum InflowFace {
    Outer {
        side: BoundarySide,
        midpoint: [f64; 2],
    },
    /// 0 = bottom endpoint, 1 = top endpoint of the fracture.
    FractureEnd { end: usize },
}

/// Factorized one-step operator.
pub struct Operator {
    pub n: usize,
    pub dt: f64,
    pub matrix: SparseColMat<usize, f64>,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    /// Velocity dofs pinned to zero by no-flow conditions.
    pub constrained: Vec<bool>,
    /// Diagonal of the storage block `C` (zero off the scalar dofs); the
    /// entries are negative, `-phi |K|` and `-phi_gamma delta l`.
    pub storage_diag: Vec<f64>,
}

/// Raw assembly: matrix entries, constrained-dof mask, and the storage
/// diagonal. Exposed separately so structural tests can inspect entries.
pub fn assemble_entries(
    mesh: &Mesh,
    dofs: &DofMap,
    coeffs: &Coefficients,
    medium: &Medium,
    dt: f64,
    bc: &BoundaryData,
    advection: Option<&AdvectionOperator>,
) -> Result<(BTreeMap<(usize, usize), f64>, Vec<bool>, Vec<f64>)> {
    check_len(
        "tangential fracture conductivities",
        mesh.interface_edges.len(),
        coeffs.alpha_gamma.len(),
    )?;
    if let Some(robin) = &coeffs.robin {
        check_len(
            "Robin coefficients",
            mesh.interface_edges.len(),
            robin.kappa.len(),
        )?;
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(FfError::Config(format!("time step must be positive, got {dt}")));
    }

    let n = dofs.n_dofs;
    let mut constrained = vec![false; n];
    for (eid, edge) in mesh.edges.iter().enumerate() {
        if let Some(side) = edge.boundary {
            if (bc.outer)(side, edge.midpoint, 0.0) == EdgeBc::NoFlow {
                constrained[dofs.edge_flux[eid]] = true;
            }
        }
    }
    if matches!(bc.fracture[0], FractureBc::NoFlow) {
        constrained[dofs.fracture_flux[0]] = true;
    }
    if matches!(bc.fracture[1], FractureBc::NoFlow) {
        constrained[*dofs.fracture_flux.last().unwrap()] = true;
    }

    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let add = |acc: &mut BTreeMap<(usize, usize), f64>, r: usize, c: usize, v: f64| {
        if v != 0.0 && !constrained[r] && !constrained[c] {
            *acc.entry((r, c)).or_insert(0.0) += v;
        }
    };

    let mut storage_diag = vec![0.0; n];

    for (ci, cell) in mesh.cells.iter().enumerate() {
        let k = coeffs.k[cell.subdomain as usize - 1];
        let nloc = cell.edges.len();
        // Velocity dof and sign of each local edge relative to the outward
        // basis: interface edges use the subdomain's own trace (oriented
        // outward already), others the shared edge dof with its global sign.
        let mut vdof = Vec::with_capacity(nloc);
        let mut sign = Vec::with_capacity(nloc);
        for (le, &e) in cell.edges.iter().enumerate() {
            match mesh.edges[e].interface {
                Some(seg) if cell.subdomain == 2 => {
                    vdof.push(dofs.side2_flux[seg]);
                    sign.push(1.0);
                }
                Some(_) => {
                    vdof.push(dofs.edge_flux[e]);
                    sign.push(1.0);
                }
                None => {
                    vdof.push(dofs.edge_flux[e]);
                    sign.push(cell.signs[le]);
                }
            }
        }

        let local = local_velocity_mass(mesh, ci);
        let pdof = dofs.cell_pressure[ci];
        for a in 0..nloc {
            for b in 0..nloc {
                let v = sign[a] * sign[b] * local[a][b] / k;
                add(&mut acc, vdof[a], vdof[b], v);
            }
            // Pressure coupling: -(p, div v) with outward flux l per edge.
            let e = cell.edges[a];
            let l = mesh.edges[e].length;
            add(&mut acc, vdof[a], pdof, -sign[a] * l);
            add(&mut acc, pdof, vdof[a], -dt * sign[a] * l);
            // Fracture-pressure coupling on interface traces: +(p_gamma, v.n).
            if let Some(seg) = mesh.edges[e].interface {
                let fp = dofs.fracture_pressure[seg];
                add(&mut acc, vdof[a], fp, l);
                add(&mut acc, fp, vdof[a], dt * l);
            }
        }

        storage_diag[pdof] = -medium.porosity[cell.subdomain as usize - 1] * cell.area;
        add(&mut acc, pdof, pdof, storage_diag[pdof]);
    }

    // Robin interface exchange between the two velocity traces.
    if let Some(robin) = &coeffs.robin {
        let xi = robin.xi;
        let xibar = 1.0 - xi;
        for (seg, &e) in mesh.interface_edges.iter().enumerate() {
            let l = mesh.edges[e].length;
            let kappa = robin.kappa[seg];
            if !(kappa > 0.0) || !kappa.is_finite() {
                return Err(FfError::SingularOperator(format!(
                    "Robin coefficient on segment {seg} must be positive, got {kappa}"
                )));
            }
            let s1 = dofs.edge_flux[e];
            let s2 = dofs.side2_flux[seg];
            let w = l / kappa;
            add(&mut acc, s1, s1, w * xi);
            add(&mut acc, s2, s2, w * xi);
            add(&mut acc, s1, s2, -w * xibar);
            add(&mut acc, s2, s1, -w * xibar);
        }
    }

    // Tangential fracture flow: 1-D mass matrix weighted by 1/alpha, plus the
    // divergence coupling to the segment pressures and the segment storage.
    for (seg, &e) in mesh.interface_edges.iter().enumerate() {
        let l = mesh.edges[e].length;
        let alpha = coeffs.alpha_gamma[seg];
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(FfError::SingularOperator(format!(
                "tangential fracture conductivity on segment {seg} must be positive, got {alpha}"
            )));
        }
        let fb = dofs.fracture_flux[seg];
        let ft = dofs.fracture_flux[seg + 1];
        add(&mut acc, fb, fb, l / (3.0 * alpha));
        add(&mut acc, ft, ft, l / (3.0 * alpha));
        add(&mut acc, fb, ft, l / (6.0 * alpha));
        add(&mut acc, ft, fb, l / (6.0 * alpha));

        let fp = dofs.fracture_pressure[seg];
        // -(p_gamma, d_tau v): the hat at the bottom node has slope -1/l.
        add(&mut acc, fb, fp, 1.0);
        add(&mut acc, fp, fb, dt);
        add(&mut acc, ft, fp, -1.0);
        add(&mut acc, fp, ft, -dt);

        storage_diag[fp] = -medium.fracture_porosity * medium.delta * l;
        add(&mut acc, fp, fp, storage_diag[fp]);
    }

    if let Some(adv) = advection {
        for &(r, c, v) in &adv.entries {
            add(&mut acc, r, c, -dt * v);
        }
    }

    for d in 0..n {
        if constrained[d] {
            acc.insert((d, d), 1.0);
        }
    }

    Ok((acc, constrained, storage_diag))
}

/// Assembles and factorizes the one-step operator.
pub fn assemble_operator(
    mesh: &Mesh,
    dofs: &DofMap,
    coeffs: &Coefficients,
    medium: &Medium,
    dt: f64,
    bc: &BoundaryData,
    advection: Option<&AdvectionOperator>,
) -> Result<Operator> {
    let (acc, constrained, storage_diag) =
        assemble_entries(mesh, dofs, coeffs, medium, dt, bc, advection)?;
    let n = dofs.n_dofs;
    let triplets: Vec<Triplet<usize, usize, f64>> = acc
        .iter()
        .map(|(&(r, c), &v)| Triplet::new(r, c, v))
        .collect();
    let matrix = SparseColMat::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| FfError::SingularOperator(format!("could not build sparse matrix: {e:?}")))?;
    let lu = matrix
        .sp_lu()
        .map_err(|e| FfError::SingularOperator(format!("LU factorization failed: {e:?}")))?;
    Ok(Operator {
        n,
        dt,
        matrix,
        lu,
        constrained,
        storage_diag,
    })
}

/// Local velocity mass matrix in the outward-oriented basis: entries
/// integral of psi_a . psi_b over the cell, where psi_e has unit outward
/// mean normal velocity on edge e and zero on the others.
fn local_velocity_mass(mesh: &Mesh, cell_id: usize) -> Vec<Vec<f64>> {
    let cell = &mesh.cells[cell_id];
    match mesh.kind {
        CellKind::Triangle => {
            let v: Vec<[f64; 2]> = cell.vertices.iter().map(|&i| mesh.vertices[i]).collect();
            let area = cell.area;
            // psi_e(x) = l_e / (2|K|) (x - P_e), P_e the vertex opposite
            // edge e = (v_e, v_{e+1}).
            let psi = |e: usize, x: [f64; 2]| -> [f64; 2] {
                let p = v[(e + 2) % 3];
                let l = mesh.edges[cell.edges[e]].length;
                let s = l / (2.0 * area);
                [s * (x[0] - p[0]), s * (x[1] - p[1])]
            };
            // Midpoint rule on the three edge midpoints is exact for the
            // quadratic integrands.
            let quad: Vec<[f64; 2]> = (0..3)
                .map(|e| {
                    let a = v[e];
                    let b = v[(e + 1) % 3];
                    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
                })
                .collect();
            let mut m = vec![vec![0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let mut s = 0.0;
                    for &q in &quad {
                        let pa = psi(a, q);
                        let pb = psi(b, q);
                        s += pa[0] * pb[0] + pa[1] * pb[1];
                    }
                    m[a][b] = s * area / 3.0;
                }
            }
            m
        }
        CellKind::Rectangle => {
            // Local edges are bottom, right, top, left in construction order;
            // opposite pairs couple with -|K|/6, aligned with +|K|/3.
            let a3 = cell.area / 3.0;
            let a6 = cell.area / 6.0;
            vec![
                vec![a3, 0.0, -a6, 0.0],
                vec![0.0, a3, 0.0, -a6],
                vec![-a6, 0.0, a3, 0.0],
                vec![0.0, -a6, 0.0, a3],
            ]
        }
    }
}

/// Right-hand side of one backward-Euler step ending at time `t`.
pub fn assemble_rhs(
    mesh: &Mesh,
    dofs: &DofMap,
    op: &Operator,
    bc: &BoundaryData,
    sources: &Sources,
    advection: Option<&AdvectionOperator>,
    prev: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_len("previous state", op.n, prev.len())?;
    let mut rhs = vec![0.0; op.n];

    // Natural (prescribed-scalar) outer conditions: -(p_D, v . n_out) on the
    // boundary, two-point Gauss per edge.
    for (eid, edge) in mesh.edges.iter().enumerate() {
        let Some(side) = edge.boundary else { continue };
        let dof = dofs.edge_flux[eid];
        let now = (bc.outer)(side, edge.midpoint, t);
        if op.constrained[dof] {
            if now != EdgeBc::NoFlow {
                return Err(FfError::Config(
                    "boundary condition type may not change in time (no-flow edge became \
                     prescribed-pressure)"
                        .into(),
                ));
            }
            continue;
        }
        let [p0, p1] = [
            mesh.vertices[edge.vertices[0]],
            mesh.vertices[edge.vertices[1]],
        ];
        let half = [(p1[0] - p0[0]) / 2.0, (p1[1] - p0[1]) / 2.0];
        let g = 1.0 / 3.0f64.sqrt();
        let mut mean = 0.0;
        for s in [-g, g] {
            let x = [
                edge.midpoint[0] + s * half[0],
                edge.midpoint[1] + s * half[1],
            ];
            match (bc.outer)(side, x, t) {
                EdgeBc::Pressure(v) => mean += 0.5 * v,
                EdgeBc::NoFlow => {
                    return Err(FfError::Config(format!(
                        "boundary-condition strips must align with mesh edges: edge at \
                         ({:.4}, {:.4}) mixes no-flow and prescribed pressure",
                        edge.midpoint[0], edge.midpoint[1]
                    )))
                }
            }
        }
        let cell = edge.cells[0];
        let le = mesh.cells[cell].edges.iter().position(|&e| e == eid).unwrap();
        let sigma = mesh.cells[cell].signs[le];
        rhs[dof] -= sigma * edge.length * mean;
    }

    // Fracture endpoint conditions.
    let ends = [
        (0usize, dofs.fracture_flux[0], 1.0),
        (1usize, *dofs.fracture_flux.last().unwrap(), -1.0),
    ];
    for (end, dof, s) in ends {
        match &bc.fracture[end] {
            FractureBc::Pressure(f) => {
                if op.constrained[dof] {
                    return Err(FfError::Config(
                        "boundary condition type may not change in time (fracture endpoint)"
                            .into(),
                    ));
                }
                rhs[dof] += s * f(t);
            }
            FractureBc::NoFlow => {}
        }
    }

    // Scalar rows: storage times previous state minus dt times sources.
    for (ci, cell) in mesh.cells.iter().enumerate() {
        let pd = dofs.cell_pressure[ci];
        let q = (sources.subdomain)(cell.subdomain, cell.centroid, t);
        rhs[pd] = op.storage_diag[pd] * prev[pd] - op.dt * q * cell.area;
    }
    for (seg, &e) in mesh.interface_edges.iter().enumerate() {
        let fp = dofs.fracture_pressure[seg];
        let q = (sources.fracture)(mesh.edges[e].midpoint[1], t);
        rhs[fp] = op.storage_diag[fp] * prev[fp] - op.dt * q * mesh.edges[e].length;
    }

    // Advective boundary inflow carries the boundary datum.
    if let Some(adv) = advection {
        for &(row, face, rate) in &adv.inflows {
            let datum = match face {
                InflowFace::Outer { side, midpoint } => match (bc.outer)(side, midpoint, t) {
                    EdgeBc::Pressure(v) => v,
                    EdgeBc::NoFlow => {
                        return Err(FfError::Config(
                            "advective inflow through a no-flow boundary edge".into(),
                        ))
                    }
                },
                InflowFace::FractureEnd { end } => match &bc.fracture[end] {
                    FractureBc::Pressure(f) => f(t),
                    FractureBc::NoFlow => {
                        return Err(FfError::Config(
                            "advective inflow through a no-flow fracture endpoint".into(),
                        ))
                    }
                },
            };
            rhs[row] -= op.dt * rate * datum;
        }
    }

    Ok(rhs)
}

/// Solves one step given an assembled right-hand side.
pub fn step(op: &Operator, rhs: &[f64]) -> Result<Vec<f64>> {
    check_len("right-hand side", op.n, rhs.len())?;
    let b = Mat::from_fn(op.n, 1, |i, _| rhs[i]);
    let x = op.lu.solve(&b);
    let out: Vec<f64> = (0..op.n).map(|i| x[(i, 0)]).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(FfError::NonFinite(
            "time step produced a non-finite state".into(),
        ));
    }
    Ok(out)
}

/// Assembles the right-hand side from `prev` and advances one step to time
/// `t`.
pub fn advance(
    mesh: &Mesh,
    dofs: &DofMap,
    op: &Operator,
    bc: &BoundaryData,
    sources: &Sources,
    advection: Option<&AdvectionOperator>,
    prev: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let rhs = assemble_rhs(mesh, dofs, op, bc, sources, advection, prev, t)?;
    step(op, &rhs)
}

/// Steady (zero-storage) solution of the flow problem at time `t`.
pub fn solve_steady(
    mesh: &Mesh,
    dofs: &DofMap,
    coeffs: &Coefficients,
    delta: f64,
    bc: &BoundaryData,
    sources: &Sources,
    advection: Option<&AdvectionOperator>,
    t: f64,
) -> Result<Vec<f64>> {
    let medium = Medium::steady(delta);
    let op = assemble_operator(mesh, dofs, coeffs, &medium, 1.0, bc, advection)?;
    let zero = vec![0.0; op.n];
    advance(mesh, dofs, &op, bc, sources, advection, &zero, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_dof_map, build_mesh, DofKind};
    use crate::model::{ModelVariant, RobinCoupling};
    use std::sync::Arc;

    fn left_right_flow_bc(p_left: f64, p_right: f64) -> BoundaryData {
        BoundaryData {
            outer: Arc::new(move |side, _, _| match side {
                BoundarySide::Left => EdgeBc::Pressure(p_left),
                BoundarySide::Right => EdgeBc::Pressure(p_right),
                _ => EdgeBc::NoFlow,
            }),
            fracture: [FractureBc::NoFlow, FractureBc::NoFlow],
        }
    }

    /// Exact constant-flux solution for horizontal flow through the fracture:
    /// pressure 1 on the left, 0 on the right, no-flow elsewhere. For Robin
    /// coupling with uniform kappa and conductivities (k1, k2) the flux is
    /// u = kappa / (2 + kappa/k1 + kappa/k2) and the fracture pressure is
    /// u/k2 + u/kappa; the continuous-pressure model is the kappa -> inf
    /// limit.
    fn check_crossflow_solution(
        kind: CellKind,
        k: [f64; 2],
        kappa: Option<f64>,
        tol: f64,
    ) {
        let mesh = build_mesh(2.0, 1.0, 8, 4, 1.0, kind).unwrap();
        let dofs = build_dof_map(&mesh);
        let n_seg = mesh.interface_edges.len();
        let coeffs = Coefficients {
            k,
            alpha_gamma: vec![0.7; n_seg],
            robin: kappa.map(|kp| RobinCoupling {
                xi: 1.0,
                kappa: vec![kp; n_seg],
            }),
        };
        let bc = left_right_flow_bc(1.0, 0.0);
        let state = solve_steady(
            &mesh,
            &dofs,
            &coeffs,
            1e-3,
            &bc,
            &Sources::none(),
            None,
            0.0,
        )
        .unwrap();

        let (u, p_gamma) = match kappa {
            Some(kp) => {
                let u = kp / (2.0 + kp / k[0] + kp / k[1]);
                (u, u / k[1] + u / kp)
            }
            None => {
                let u = 1.0 / (1.0 / k[0] + 1.0 / k[1]);
                (u, u / k[1])
            }
        };
        // Piecewise-linear exact pressure.
        let p_exact = |x: f64| -> f64 {
            if x < 1.0 {
                1.0 - u / k[0] * x
            } else {
                u / k[1] * (2.0 - x)
            }
        };

        for d in 0..dofs.n_dofs {
            let got = state[d];
            let want = match dofs.kind(d) {
                DofKind::EdgeFlux { edge, side } => {
                    let nx = mesh.edges[edge].normal[0];
                    match side {
                        2 => -u, // oriented out of the right subdomain
                        _ => u * nx,
                    }
                }
                DofKind::CellPressure { cell } => p_exact(mesh.cells[cell].centroid[0]),
                DofKind::FractureFlux { .. } => 0.0,
                DofKind::FracturePressure { .. } => p_gamma,
            };
            assert!(
                (got - want).abs() < tol,
                "dof {d} ({:?}): got {got}, want {want}",
                dofs.kind(d)
            );
        }
    }

    #[test]
    fn steady_crossflow_matches_closed_form() {
        for kind in [CellKind::Triangle, CellKind::Rectangle] {
            check_crossflow_solution(kind, [1.0, 1.0], None, 1e-10);
            check_crossflow_solution(kind, [1.0, 1.0], Some(1.0), 1e-10);
            check_crossflow_solution(kind, [1.0, 1.0], Some(4.0), 1e-10);
            check_crossflow_solution(kind, [2.0, 1.0], Some(1.0), 1e-10);
            check_crossflow_solution(kind, [0.5, 3.0], None, 1e-10);
        }
    }

    #[test]
    fn velocity_block_is_symmetric_and_positive_definite() {
        for kind in [CellKind::Triangle, CellKind::Rectangle] {
            for robin in [None, Some(1.0), Some(1e-3)] {
                let mesh = build_mesh(2.0, 1.0, 4, 2, 1.0, kind).unwrap();
                let dofs = build_dof_map(&mesh);
                let n_seg = mesh.interface_edges.len();
                let coeffs = Coefficients {
                    k: [1.0, 3.0],
                    alpha_gamma: vec![2.0; n_seg],
                    robin: robin.map(|kp| RobinCoupling {
                        xi: 1.0,
                        kappa: vec![kp; n_seg],
                    }),
                };
                // All-pressure boundary so no velocity dof is constrained.
                let bc = BoundaryData::uniform_pressure(0.0);
                let (acc, constrained, _) = assemble_entries(
                    &mesh,
                    &dofs,
                    &coeffs,
                    &Medium::unit(1e-3),
                    0.1,
                    &bc,
                    None,
                )
                .unwrap();
                assert!(constrained.iter().all(|&c| !c));

                let is_velocity = |d: usize| {
                    matches!(
                        dofs.kind(d),
                        DofKind::EdgeFlux { .. } | DofKind::FractureFlux { .. }
                    )
                };
                let vel: Vec<usize> = (0..dofs.n_dofs).filter(|&d| is_velocity(d)).collect();
                let index: BTreeMap<usize, usize> =
                    vel.iter().enumerate().map(|(i, &d)| (d, i)).collect();
                let m = vel.len();
                let mut a = vec![vec![0.0; m]; m];
                for (&(r, c), &v) in &acc {
                    if is_velocity(r) && is_velocity(c) {
                        a[index[&r]][index[&c]] = v;
                    }
                }
                for i in 0..m {
                    for j in 0..m {
                        assert!(
                            (a[i][j] - a[j][i]).abs() < 1e-12,
                            "asymmetry at ({i}, {j})"
                        );
                    }
                }
                assert!(cholesky_succeeds(&a), "velocity block not positive definite");
            }
        }
    }

    fn cholesky_succeeds(a: &[Vec<f64>]) -> bool {
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    if s <= 0.0 {
                        return false;
                    }
                    l[i][j] = s.sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        true
    }

    #[test]
    fn zero_data_gives_zero_rhs_and_state() {
        let mesh = build_mesh(2.0, 1.0, 6, 3, 1.0, CellKind::Triangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let coeffs = ModelVariant::ContinuousPressure
            .coefficients(&mesh, &[1.0, 1.0, 2.0], 1e-3)
            .unwrap();
        let bc = BoundaryData::uniform_pressure(0.0);
        let op = assemble_operator(
            &mesh,
            &dofs,
            &coeffs,
            &Medium::unit(1e-3),
            0.01,
            &bc,
            None,
        )
        .unwrap();
        let zero = vec![0.0; op.n];
        let rhs =
            assemble_rhs(&mesh, &dofs, &op, &bc, &Sources::none(), None, &zero, 0.5).unwrap();
        assert!(rhs.iter().all(|&v| v == 0.0));
        let next = step(&op, &rhs).unwrap();
        assert!(next.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn rhs_is_affine_in_previous_pressure() {
        let mesh = build_mesh(2.0, 1.0, 6, 3, 1.0, CellKind::Rectangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let coeffs = ModelVariant::ContinuousPressure
            .coefficients(&mesh, &[1.0, 2.0, 0.5], 1e-3)
            .unwrap();
        let bc = left_right_flow_bc(1.0, 0.0);
        let sources = Sources {
            subdomain: Arc::new(|_, x, _| x[0] + x[1]),
            fracture: Arc::new(|y, _| y),
        };
        let op = assemble_operator(
            &mesh,
            &dofs,
            &coeffs,
            &Medium::unit(1e-3),
            0.05,
            &bc,
            None,
        )
        .unwrap();
        let n = op.n;
        let mk = |seed: u64| -> Vec<f64> {
            use rand::Rng;
            let mut rng = crate::rng::substream(seed, "rhs-linearity", &[]);
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let x1 = mk(1);
        let x2 = mk(2);
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
        let r0 = assemble_rhs(
            &mesh, &dofs, &op, &bc, &sources, None, &vec![0.0; n], 0.3,
        )
        .unwrap();
        let r1 = assemble_rhs(&mesh, &dofs, &op, &bc, &sources, None, &x1, 0.3).unwrap();
        let r2 = assemble_rhs(&mesh, &dofs, &op, &bc, &sources, None, &x2, 0.3).unwrap();
        let rc = assemble_rhs(&mesh, &dofs, &op, &bc, &sources, None, &combo, 0.3).unwrap();
        for i in 0..n {
            let lin = a * (r1[i] - r0[i]) + b * (r2[i] - r0[i]) + r0[i];
            assert!(
                (rc[i] - lin).abs() < 1e-12 * (1.0 + lin.abs()),
                "rhs not affine at dof {i}"
            );
        }
    }

    #[test]
    fn steady_state_is_a_fixed_point_of_stepping() {
        let mesh = build_mesh(2.0, 1.0, 8, 4, 1.0, CellKind::Triangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let coeffs = ModelVariant::GeneralInterface {
            xi: 1.0,
            across_band: [0.25, 0.75],
        }
        .coefficients(&mesh, &[1.0, 1.5, 20.0], 1e-3)
        .unwrap();
        let bc = left_right_flow_bc(1.0, 0.0);
        let steady = solve_steady(
            &mesh,
            &dofs,
            &coeffs,
            1e-3,
            &bc,
            &Sources::none(),
            None,
            0.0,
        )
        .unwrap();
        let op = assemble_operator(
            &mesh,
            &dofs,
            &coeffs,
            &Medium::unit(1e-3),
            0.02,
            &bc,
            None,
        )
        .unwrap();
        let mut state = steady.clone();
        for s in 1..=5 {
            state = advance(
                &mesh,
                &dofs,
                &op,
                &bc,
                &Sources::none(),
                None,
                &state,
                s as f64 * 0.02,
            )
            .unwrap();
        }
        for i in 0..op.n {
            assert!(
                (state[i] - steady[i]).abs() < 1e-8,
                "dof {i} drifted from the steady state"
            );
        }
    }

    #[test]
    fn transient_respects_pressure_bounds() {
        // Lower-fifth lateral strips at pressures 0 and 1, fracture driven
        // from 1 (bottom) to 0 (top): all pressures stay within [0, 1].
        let mesh = build_mesh(2.0, 1.0, 20, 10, 1.0, CellKind::Triangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let coeffs = ModelVariant::ContinuousPressure
            .coefficients(&mesh, &[1.0, 1.0, 2.0], 1e-3)
            .unwrap();
        let bc = BoundaryData {
            outer: Arc::new(|side, x, _| match side {
                BoundarySide::Left if x[1] < 0.2 => EdgeBc::Pressure(0.0),
                BoundarySide::Right if x[1] < 0.2 => EdgeBc::Pressure(1.0),
                _ => EdgeBc::NoFlow,
            }),
            fracture: [FractureBc::constant(1.0), FractureBc::constant(0.0)],
        };
        let op = assemble_operator(
            &mesh,
            &dofs,
            &coeffs,
            &Medium::unit(1e-3),
            1.0 / 800.0,
            &bc,
            None,
        )
        .unwrap();
        let mut state = vec![0.0; op.n];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for n in 1..=800 {
            state = advance(
                &mesh,
                &dofs,
                &op,
                &bc,
                &Sources::none(),
                None,
                &state,
                n as f64 / 800.0,
            )
            .unwrap();
            for d in dofs.pressure_range().chain(dofs.fracture_pressure_range()) {
                lo = lo.min(state[d]);
                hi = hi.max(state[d]);
            }
        }
        assert!(lo >= -1e-8, "pressure undershoot: {lo}");
        assert!(hi <= 1.0 + 1e-8, "pressure overshoot: {hi}");
    }

    #[test]
    fn symmetric_data_gives_mirror_symmetric_solution() {
        // Both lateral strips at pressure 1: the solution must be invariant
        // under x -> width - x.
        let mesh = build_mesh(2.0, 1.0, 8, 4, 1.0, CellKind::Triangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let coeffs = ModelVariant::ContinuousPressure
            .coefficients(&mesh, &[1.0, 1.0, 2.0], 1e-3)
            .unwrap();
        let bc = BoundaryData {
            outer: Arc::new(|side, x, _| match side {
                BoundarySide::Left | BoundarySide::Right if x[1] < 0.25 => EdgeBc::Pressure(1.0),
                _ => EdgeBc::NoFlow,
            }),
            fracture: [FractureBc::constant(1.0), FractureBc::constant(0.0)],
        };
        let op = assemble_operator(
            &mesh,
            &dofs,
            &coeffs,
            &Medium::unit(1e-3),
            0.01,
            &bc,
            None,
        )
        .unwrap();
        let mut state = vec![0.0; op.n];
        for n in 1..=20 {
            state = advance(
                &mesh,
                &dofs,
                &op,
                &bc,
                &Sources::none(),
                None,
                &state,
                n as f64 * 0.01,
            )
            .unwrap();
        }
        // Pair each cell with its mirror image through matching centroids.
        for (ci, cell) in mesh.cells.iter().enumerate() {
            let mx = mesh.width - cell.centroid[0];
            let my = cell.centroid[1];
            let mirror = mesh
                .cells
                .iter()
                .position(|c| {
                    (c.centroid[0] - mx).abs() < 1e-9 && (c.centroid[1] - my).abs() < 1e-9
                })
                .expect("mirror cell exists");
            let a = state[dofs.cell_pressure[ci]];
            let b = state[dofs.cell_pressure[mirror]];
            assert!((a - b).abs() < 1e-10, "cells {ci}/{mirror}: {a} vs {b}");
        }
        // On the interface the two traces coincide under the reflection.
        for seg in 0..mesh.interface_edges.len() {
            let s1 = state[dofs.edge_flux[mesh.interface_edges[seg]]];
            let s2 = state[dofs.side2_flux[seg]];
            assert!((s1 - s2).abs() < 1e-10, "segment {seg}: {s1} vs {s2}");
        }
    }

    #[test]
    fn robin_with_huge_coupling_approaches_continuous_pressure() {
        let mesh = build_mesh(2.0, 1.0, 8, 4, 1.0, CellKind::Triangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let n_seg = mesh.interface_edges.len();
        let base = Coefficients {
            k: [1.0, 2.0],
            alpha_gamma: vec![2.0; n_seg],
            robin: None,
        };
        let penalized = Coefficients {
            robin: Some(RobinCoupling {
                xi: 1.0,
                kappa: vec![1e10; n_seg],
            }),
            ..base.clone()
        };
        let bc = left_right_flow_bc(1.0, 0.0);
        let mut states = Vec::new();
        for coeffs in [&base, &penalized] {
            let op = assemble_operator(
                &mesh,
                &dofs,
                coeffs,
                &Medium::unit(1e-3),
                0.05,
                &bc,
                None,
            )
            .unwrap();
            let mut state = vec![0.0; op.n];
            for n in 1..=10 {
                state = advance(
                    &mesh,
                    &dofs,
                    &op,
                    &bc,
                    &Sources::none(),
                    None,
                    &state,
                    n as f64 * 0.05,
                )
                .unwrap();
            }
            states.push(state);
        }
        for i in 0..dofs.n_dofs {
            assert!(
                (states[0][i] - states[1][i]).abs() < 1e-4,
                "dof {i}: {} vs {}",
                states[0][i],
                states[1][i]
            );
        }
    }

    #[test]
    fn no_flow_everywhere_conserves_mass() {
        // With no-flow conditions and no sources the mean pressure is
        // conserved exactly and nothing moves once uniform.
        let mesh = build_mesh(2.0, 1.0, 4, 2, 1.0, CellKind::Rectangle).unwrap();
        let dofs = build_dof_map(&mesh);
        let coeffs = ModelVariant::ContinuousPressure
            .coefficients(&mesh, &[1.0, 1.0, 1.0], 1e-3)
            .unwrap();
        let bc = BoundaryData::no_flow();
        let op = assemble_operator(
            &mesh,
            &dofs,
            &coeffs,
            &Medium::unit(1e-3),
            0.1,
            &bc,
            None,
        )
        .unwrap();
        let mut state = vec![0.0; op.n];
        for d in dofs.pressure_range() {
            state[d] = 3.5;
        }
        for d in dofs.fracture_pressure_range() {
            state[d] = 3.5;
        }
        let next = advance(
            &mesh,
            &dofs,
            &op,
            &bc,
            &Sources::none(),
            None,
            &state,
            0.1,
        )
        .unwrap();
        for d in 0..op.n {
            let want = state[d];
            assert!(
                (next[d] - want).abs() < 1e-10,
                "dof {d}: {} vs {}",
                next[d],
                want
            );
        }
    }
}
