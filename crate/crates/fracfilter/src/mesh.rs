//! Meshes for a rectangular domain cut by a single vertical fracture.
//!
//! The domain (0, width) x (0, height) is split into two subdomains by the
//! vertical line x = x_gamma: subdomain 1 on the left, subdomain 2 on the
//! right. The fracture is reduced to that line and carries its own 1-D mesh
//! whose nodes coincide with the interface vertices.
//!
//! Velocity unknowns are mean normal velocities per edge. Edges on the
//! interface carry two velocity unknowns, one per subdomain trace, because
//! mass exchange with the fracture makes the normal velocity discontinuous
//! there. The fracture carries a continuous piecewise-linear tangential flux
//! (one unknown per interface node) and a piecewise-constant pressure (one
//! unknown per interface segment).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FfError, Result};

/// Cell shape of the subdomain meshes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Triangle,
    Rectangle,
}

/// Which part of the outer boundary an edge belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySide {
    Left,
    Right,
    Bottom,
    Top,
}

#[derive(Debug, Clone)]
pub struct Cell {
    /// Vertex ids in counter-clockwise order (3 for triangles, 4 for
    /// rectangles).
    pub vertices: Vec<usize>,
    /// Edge ids; edge `i` connects `vertices[i]` and `vertices[(i+1) % n]`.
    pub edges: Vec<usize>,
    /// +1 if the edge's global normal points out of this cell, -1 otherwise;
    /// aligned with `edges`.
    pub signs: Vec<f64>,
    /// Subdomain label, 1 (left of the fracture) or 2 (right).
    pub subdomain: u8,
    pub area: f64,
    pub centroid: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Edge {
    /// Endpoint vertex ids, smaller id first.
    pub vertices: [usize; 2],
    pub length: f64,
    pub midpoint: [f64; 2],
    /// Global unit normal: the tangent from the smaller-id vertex to the
    /// larger, rotated clockwise by 90 degrees.
    pub normal: [f64; 2],
    /// Adjacent cells in construction order; boundary edges have one.
    pub cells: Vec<usize>,
    pub boundary: Option<BoundarySide>,
    /// Index into `Mesh::interface_edges` if this edge lies on the fracture.
    pub interface: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub kind: CellKind,
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    pub x_gamma: f64,
    /// Grid spacings of the underlying rectangular lattice.
    pub dx: f64,
    pub dy: f64,
    /// Mesh-size parameter, max(dx, dy).
    pub h: f64,
    pub vertices: Vec<[f64; 2]>,
    pub cells: Vec<Cell>,
    pub edges: Vec<Edge>,
    /// Edge ids on the fracture line, ordered bottom to top.
    pub interface_edges: Vec<usize>,
    /// Vertex ids on the fracture line, ordered bottom to top; segment `k` of
    /// the fracture spans nodes `k` and `k + 1`.
    pub fracture_nodes: Vec<usize>,
}

impl Mesh {
    /// The cell on the other side of `edge` from `cell`, if any.
    pub fn neighbor(&self, cell: usize, edge: usize) -> Option<usize> {
        self.edges[edge]
            .cells
            .iter()
            .copied()
            .find(|&c| c != cell)
    }

    /// y-coordinate of fracture node `k`.
    pub fn fracture_node_y(&self, k: usize) -> f64 {
        self.vertices[self.fracture_nodes[k]][1]
    }
}

/// Builds the two-subdomain mesh. `x_gamma` must coincide with a vertical
/// grid line strictly inside the domain, which requires `nx` to be even when
/// the fracture bisects the domain.
pub fn build_mesh(
    width: f64,
    height: f64,
    nx: usize,
    ny: usize,
    x_gamma: f64,
    kind: CellKind,
) -> Result<Mesh> {
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(FfError::Mesh(format!(
            "domain must have positive finite extent, got {width} x {height}"
        )));
    }
    if nx < 2 || ny < 1 {
        return Err(FfError::Mesh(format!(
            "grid must be at least 2 x 1 cells, got {nx} x {ny}"
        )));
    }
    if nx % 2 != 0 {
        return Err(FfError::Mesh(format!(
            "nx must be even so the fracture can lie on a grid line, got {nx}"
        )));
    }
    let dx = width / nx as f64;
    let dy = height / ny as f64;
    let col = (x_gamma / dx).round();
    let tol = 1e-9 * width;
    if (col * dx - x_gamma).abs() > tol || col < 1.0 || col > (nx - 1) as f64 {
        return Err(FfError::Mesh(format!(
            "fracture line x = {x_gamma} does not coincide with an interior grid line \
             (dx = {dx})"
        )));
    }

    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([i as f64 * dx, j as f64 * dy]);
        }
    }

    // Cells in raster order; each lattice rectangle yields one rectangle cell
    // or two triangles split along a checkerboard-alternating diagonal. The
    // alternation keeps the triangulation mirror-symmetric about the fracture
    // when nx is even.
    let mut cell_vertex_lists: Vec<Vec<usize>> = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let a = vid(i, j);
            let b = vid(i + 1, j);
            let c = vid(i + 1, j + 1);
            let d = vid(i, j + 1);
            match kind {
                CellKind::Rectangle => cell_vertex_lists.push(vec![a, b, c, d]),
                CellKind::Triangle => {
                    if (i + j) % 2 == 0 {
                        cell_vertex_lists.push(vec![a, b, c]);
                        cell_vertex_lists.push(vec![a, c, d]);
                    } else {
                        cell_vertex_lists.push(vec![a, b, d]);
                        cell_vertex_lists.push(vec![b, c, d]);
                    }
                }
            }
        }
    }

    let mut edges: Vec<Edge> = Vec::new();
    let mut edge_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut cells: Vec<Cell> = Vec::with_capacity(cell_vertex_lists.len());
    for (cell_id, vs) in cell_vertex_lists.iter().enumerate() {
        let n = vs.len();
        let poly: Vec<[f64; 2]> = vs.iter().map(|&v| vertices[v]).collect();
        let area = polygon_area(&poly);
        if area <= 0.0 {
            return Err(FfError::Mesh(format!(
                "cell {cell_id} is not counter-clockwise (signed area {area})"
            )));
        }
        let centroid = polygon_centroid(&poly, area);
        let mut cell_edges = Vec::with_capacity(n);
        let mut signs = Vec::with_capacity(n);
        for k in 0..n {
            let (v0, v1) = (vs[k], vs[(k + 1) % n]);
            let key = (v0.min(v1), v0.max(v1));
            let eid = *edge_ids.entry(key).or_insert_with(|| {
                let p0 = vertices[key.0];
                let p1 = vertices[key.1];
                let tvec = [p1[0] - p0[0], p1[1] - p0[1]];
                let length = (tvec[0] * tvec[0] + tvec[1] * tvec[1]).sqrt();
                edges.push(Edge {
                    vertices: [key.0, key.1],
                    length,
                    midpoint: [(p0[0] + p1[0]) / 2.0, (p0[1] + p1[1]) / 2.0],
                    normal: [tvec[1] / length, -tvec[0] / length],
                    cells: Vec::with_capacity(2),
                    boundary: None,
                    interface: None,
                });
                edges.len() - 1
            });
            edges[eid].cells.push(cell_id);
            let e = &edges[eid];
            let outward = e.normal[0] * (e.midpoint[0] - centroid[0])
                + e.normal[1] * (e.midpoint[1] - centroid[1]);
            cell_edges.push(eid);
            signs.push(if outward > 0.0 { 1.0 } else { -1.0 });
        }
        let subdomain = if centroid[0] < x_gamma { 1 } else { 2 };
        cells.push(Cell {
            vertices: vs.clone(),
            edges: cell_edges,
            signs,
            subdomain,
            area,
            centroid,
        });
    }

    // Classify boundary edges and collect the fracture interface.
    let gtol = 1e-9 * width.max(height);
    let mut interface: Vec<(f64, usize)> = Vec::new();
    for (eid, e) in edges.iter_mut().enumerate() {
        let [p0, p1] = [vertices[e.vertices[0]], vertices[e.vertices[1]]];
        if e.cells.len() == 1 {
            e.boundary = if p0[0].abs() < gtol && p1[0].abs() < gtol {
                Some(BoundarySide::Left)
            } else if (p0[0] - width).abs() < gtol && (p1[0] - width).abs() < gtol {
                Some(BoundarySide::Right)
            } else if p0[1].abs() < gtol && p1[1].abs() < gtol {
                Some(BoundarySide::Bottom)
            } else if (p0[1] - height).abs() < gtol && (p1[1] - height).abs() < gtol {
                Some(BoundarySide::Top)
            } else {
                return Err(FfError::Mesh(format!(
                    "edge {eid} has one adjacent cell but is not on the outer boundary"
                )));
            };
        } else if (p0[0] - x_gamma).abs() < gtol && (p1[0] - x_gamma).abs() < gtol {
            let labels: Vec<u8> = e.cells.iter().map(|&c| cells[c].subdomain).collect();
            if labels == [1, 2] || labels == [2, 1] {
                interface.push((e.midpoint[1], eid));
            }
        }
    }
    interface.sort_by(|a, b| a.0.total_cmp(&b.0));
    let interface_edges: Vec<usize> = interface.iter().map(|&(_, e)| e).collect();
    for (k, &eid) in interface_edges.iter().enumerate() {
        edges[eid].interface = Some(k);
    }
    if interface_edges.len() != ny {
        return Err(FfError::Mesh(format!(
            "expected {ny} interface edges on the fracture line, found {}",
            interface_edges.len()
        )));
    }

    let mut fracture_nodes: Vec<usize> = (0..=ny).map(|j| vid(col as usize, j)).collect();
    fracture_nodes.sort_by(|&a, &b| vertices[a][1].total_cmp(&vertices[b][1]));
    // Each interface segment must span consecutive fracture nodes.
    for (k, &eid) in interface_edges.iter().enumerate() {
        let vs = edges[eid].vertices;
        let want = [
            fracture_nodes[k].min(fracture_nodes[k + 1]),
            fracture_nodes[k].max(fracture_nodes[k + 1]),
        ];
        if vs != want {
            return Err(FfError::Mesh(format!(
                "interface segment {k} does not connect consecutive fracture nodes"
            )));
        }
    }

    Ok(Mesh {
        kind,
        width,
        height,
        nx,
        ny,
        x_gamma,
        dx,
        dy,
        h: dx.max(dy),
        vertices,
        cells,
        edges,
        interface_edges,
        fracture_nodes,
    })
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut twice = 0.0;
    for k in 0..n {
        let [x0, y0] = poly[k];
        let [x1, y1] = poly[(k + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    twice / 2.0
}

fn polygon_centroid(poly: &[[f64; 2]], area: f64) -> [f64; 2] {
    let n = poly.len();
    let mut cx = 0.0;
    let mut cy = 0.0;
    for k in 0..n {
        let [x0, y0] = poly[k];
        let [x1, y1] = poly[(k + 1) % n];
        let cross = x0 * y1 - x1 * y0;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    [cx / (6.0 * area), cy / (6.0 * area)]
}

/// One unknown of the coupled system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofKind {
    /// Mean normal velocity through an edge, in the direction of the edge's
    /// global normal. On interface edges `side` is 1 (left trace, oriented
    /// rightward out of subdomain 1) or 2 (right trace, oriented leftward out
    /// of subdomain 2); elsewhere `side` is 0.
    EdgeFlux { edge: usize, side: u8 },
    /// Cell-average pressure.
    CellPressure { cell: usize },
    /// Tangential fracture flux at interface node `node` (bottom to top),
    /// positive upward.
    FractureFlux { node: usize },
    /// Fracture pressure on interface segment `segment` (bottom to top).
    FracturePressure { segment: usize },
}

/// Maps between mesh entities and positions in the global unknown vector.
///
/// Layout: subdomain edge fluxes (one per edge, then the second trace of each
/// interface edge), subdomain cell pressures, fracture nodal fluxes, fracture
/// segment pressures.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub n_dofs: usize,
    kinds: Vec<DofKind>,
    /// Edge id -> dof of its (first) velocity unknown.
    pub edge_flux: Vec<usize>,
    /// Interface index -> dof of the side-2 velocity unknown.
    pub side2_flux: Vec<usize>,
    pub cell_pressure: Vec<usize>,
    pub fracture_flux: Vec<usize>,
    pub fracture_pressure: Vec<usize>,
    /// Number of subdomain velocity unknowns (the leading block).
    pub n_subdomain_flux: usize,
    pub n_cells: usize,
}

impl DofMap {
    pub fn kind(&self, dof: usize) -> DofKind {
        self.kinds[dof]
    }

    pub fn dof(&self, kind: DofKind) -> Option<usize> {
        match kind {
            DofKind::EdgeFlux { edge, side } => match (self.edge_flux.get(edge), side) {
                (Some(&d), 0) if matches!(self.kinds[d], DofKind::EdgeFlux { side: 0, .. }) => {
                    Some(d)
                }
                (Some(&d), 1) if matches!(self.kinds[d], DofKind::EdgeFlux { side: 1, .. }) => {
                    Some(d)
                }
                (Some(&d), 2) if matches!(self.kinds[d], DofKind::EdgeFlux { side: 1, .. }) => {
                    self.side2_flux.iter().copied().find(|&s| self.kinds[s] == kind)
                }
                _ => None,
            },
            DofKind::CellPressure { cell } => self.cell_pressure.get(cell).copied(),
            DofKind::FractureFlux { node } => self.fracture_flux.get(node).copied(),
            DofKind::FracturePressure { segment } => self.fracture_pressure.get(segment).copied(),
        }
    }

    /// Index ranges of the four blocks, in state-vector order.
    pub fn velocity_range(&self) -> std::ops::Range<usize> {
        0..self.n_subdomain_flux
    }

    pub fn pressure_range(&self) -> std::ops::Range<usize> {
        self.n_subdomain_flux..self.n_subdomain_flux + self.n_cells
    }

    pub fn fracture_flux_range(&self) -> std::ops::Range<usize> {
        let start = self.n_subdomain_flux + self.n_cells;
        start..start + self.fracture_flux.len()
    }

    pub fn fracture_pressure_range(&self) -> std::ops::Range<usize> {
        let start = self.n_subdomain_flux + self.n_cells + self.fracture_flux.len();
        start..start + self.fracture_pressure.len()
    }

    /// Dofs holding a velocity (subdomain edge fluxes and fracture fluxes);
    /// used by observation operators that transform velocity readings.
    pub fn is_velocity(&self, dof: usize) -> bool {
        matches!(
            self.kinds[dof],
            DofKind::EdgeFlux { .. } | DofKind::FractureFlux { .. }
        )
    }
}

/// Enumerates the unknowns of a mesh in state-vector order.
pub fn build_dof_map(mesh: &Mesh) -> DofMap {
    let n_edges = mesh.edges.len();
    let n_if = mesh.interface_edges.len();
    let mut kinds = Vec::new();
    let mut edge_flux = vec![usize::MAX; n_edges];
    for (e, edge) in mesh.edges.iter().enumerate() {
        edge_flux[e] = kinds.len();
        let side = if edge.interface.is_some() { 1 } else { 0 };
        kinds.push(DofKind::EdgeFlux { edge: e, side });
    }
    let mut side2_flux = Vec::with_capacity(n_if);
    for &e in &mesh.interface_edges {
        side2_flux.push(kinds.len());
        kinds.push(DofKind::EdgeFlux { edge: e, side: 2 });
    }
    let n_subdomain_flux = kinds.len();

    let mut cell_pressure = Vec::with_capacity(mesh.cells.len());
    for c in 0..mesh.cells.len() {
        cell_pressure.push(kinds.len());
        kinds.push(DofKind::CellPressure { cell: c });
    }

    let mut fracture_flux = Vec::with_capacity(n_if + 1);
    for node in 0..mesh.fracture_nodes.len() {
        fracture_flux.push(kinds.len());
        kinds.push(DofKind::FractureFlux { node });
    }

    let mut fracture_pressure = Vec::with_capacity(n_if);
    for segment in 0..n_if {
        fracture_pressure.push(kinds.len());
        kinds.push(DofKind::FracturePressure { segment });
    }

    DofMap {
        n_dofs: kinds.len(),
        kinds,
        edge_flux,
        side2_flux,
        cell_pressure,
        fracture_flux,
        fracture_pressure,
        n_subdomain_flux,
        n_cells: mesh.cells.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Closed-form edge count for an nx-by-ny structured grid: horizontal and
    /// vertical lattice edges, plus one diagonal per lattice cell when
    /// triangulated. Independent of the deduplication logic in `build_mesh`.
    fn expected_edges(nx: usize, ny: usize, kind: CellKind) -> usize {
        let lattice = nx * (ny + 1) + ny * (nx + 1);
        match kind {
            CellKind::Rectangle => lattice,
            CellKind::Triangle => lattice + nx * ny,
        }
    }

    fn expected_cells(nx: usize, ny: usize, kind: CellKind) -> usize {
        match kind {
            CellKind::Rectangle => nx * ny,
            CellKind::Triangle => 2 * nx * ny,
        }
    }

    fn expected_dofs(nx: usize, ny: usize, kind: CellKind) -> usize {
        // Velocities: one per edge plus a second trace per interface edge.
        // Pressures: one per cell. Fracture: ny + 1 nodal fluxes and ny
        // segment pressures.
        expected_edges(nx, ny, kind) + ny + expected_cells(nx, ny, kind) + (ny + 1) + ny
    }

    #[test]
    fn triangle_example_counts() {
        let mesh = build_mesh(2.0, 1.0, 4, 2, 1.0, CellKind::Triangle).unwrap();
        assert_eq!(mesh.vertices.len(), 15);
        assert_eq!(mesh.edges.len(), 30);
        assert_eq!(mesh.cells.len(), 16);
        assert_eq!(mesh.interface_edges.len(), 2);
        assert_eq!(mesh.fracture_nodes.len(), 3);
        // Euler characteristic of the planar subdivision (faces include the
        // outer face): V - E + F = 2.
        let v = mesh.vertices.len() as i64;
        let e = mesh.edges.len() as i64;
        let f = mesh.cells.len() as i64 + 1;
        assert_eq!(v - e + f, 2);

        let map = build_dof_map(&mesh);
        assert_eq!(map.n_dofs, expected_dofs(4, 2, CellKind::Triangle));
        assert_eq!(map.n_dofs, 53);
        assert_eq!(map.n_subdomain_flux, 32);
    }

    #[test]
    fn rectangle_example_counts() {
        let mesh = build_mesh(2.0, 1.0, 4, 2, 1.0, CellKind::Rectangle).unwrap();
        assert_eq!(mesh.edges.len(), 22);
        assert_eq!(mesh.cells.len(), 8);
        let map = build_dof_map(&mesh);
        assert_eq!(map.n_dofs, expected_dofs(4, 2, CellKind::Rectangle));
        assert_eq!(map.n_dofs, 37);
    }

    #[test]
    fn block_ranges_partition_state_vector() {
        let mesh = build_mesh(2.0, 1.0, 6, 3, 1.0, CellKind::Triangle).unwrap();
        let map = build_dof_map(&mesh);
        let v = map.velocity_range();
        let p = map.pressure_range();
        let ff = map.fracture_flux_range();
        let fp = map.fracture_pressure_range();
        assert_eq!(v.start, 0);
        assert_eq!(v.end, p.start);
        assert_eq!(p.end, ff.start);
        assert_eq!(ff.end, fp.start);
        assert_eq!(fp.end, map.n_dofs);
        for d in v {
            assert!(matches!(map.kind(d), DofKind::EdgeFlux { .. }));
        }
        for d in p {
            assert!(matches!(map.kind(d), DofKind::CellPressure { .. }));
        }
        for d in ff {
            assert!(matches!(map.kind(d), DofKind::FractureFlux { .. }));
        }
        for d in fp {
            assert!(matches!(map.kind(d), DofKind::FracturePressure { .. }));
        }
    }

    #[test]
    fn interface_edges_separate_subdomains_and_ascend() {
        for kind in [CellKind::Triangle, CellKind::Rectangle] {
            let mesh = build_mesh(2.0, 1.0, 8, 4, 1.0, kind).unwrap();
            assert_eq!(mesh.interface_edges.len(), mesh.ny);
            let mut prev_y = f64::NEG_INFINITY;
            for (k, &eid) in mesh.interface_edges.iter().enumerate() {
                let e = &mesh.edges[eid];
                assert_eq!(e.interface, Some(k));
                assert_eq!(e.cells.len(), 2);
                let mut labels: Vec<u8> =
                    e.cells.iter().map(|&c| mesh.cells[c].subdomain).collect();
                labels.sort();
                assert_eq!(labels, vec![1, 2]);
                assert!((e.midpoint[0] - mesh.x_gamma).abs() < 1e-12);
                assert!(e.midpoint[1] > prev_y);
                prev_y = e.midpoint[1];
            }
        }
    }

    #[test]
    fn boundary_edges_are_classified() {
        let mesh = build_mesh(2.0, 1.0, 6, 3, 1.0, CellKind::Triangle).unwrap();
        let mut counts = [0usize; 4];
        for e in &mesh.edges {
            match (e.cells.len(), e.boundary) {
                (1, Some(side)) => {
                    counts[match side {
                        BoundarySide::Left => 0,
                        BoundarySide::Right => 1,
                        BoundarySide::Bottom => 2,
                        BoundarySide::Top => 3,
                    }] += 1;
                }
                (2, None) => {}
                other => panic!("unexpected adjacency/boundary combination {other:?}"),
            }
        }
        assert_eq!(counts, [3, 3, 6, 6]);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(build_mesh(2.0, 1.0, 5, 2, 1.0, CellKind::Triangle).is_err());
        assert!(build_mesh(2.0, 1.0, 0, 2, 1.0, CellKind::Triangle).is_err());
        assert!(build_mesh(2.0, 1.0, 4, 2, 0.77, CellKind::Triangle).is_err());
        assert!(build_mesh(2.0, 1.0, 4, 2, 0.0, CellKind::Triangle).is_err());
        assert!(build_mesh(2.0, 1.0, 4, 2, 2.0, CellKind::Triangle).is_err());
        assert!(build_mesh(-1.0, 1.0, 4, 2, 1.0, CellKind::Triangle).is_err());
    }

    #[test]
    fn triangulation_is_mirror_symmetric() {
        // Reflecting x -> width - x must map the triangulation onto itself;
        // the solver's symmetry tests rely on this.
        let mesh = build_mesh(2.0, 1.0, 8, 4, 1.0, CellKind::Triangle).unwrap();
        let key = |poly: &mut Vec<(i64, i64)>| {
            poly.sort();
            poly.clone()
        };
        let scale = 1e9;
        let mut originals: Vec<Vec<(i64, i64)>> = mesh
            .cells
            .iter()
            .map(|c| {
                let mut poly: Vec<(i64, i64)> = c
                    .vertices
                    .iter()
                    .map(|&v| {
                        let [x, y] = mesh.vertices[v];
                        ((x * scale).round() as i64, (y * scale).round() as i64)
                    })
                    .collect();
                key(&mut poly)
            })
            .collect();
        originals.sort();
        let mut mirrored: Vec<Vec<(i64, i64)>> = mesh
            .cells
            .iter()
            .map(|c| {
                let mut poly: Vec<(i64, i64)> = c
                    .vertices
                    .iter()
                    .map(|&v| {
                        let [x, y] = mesh.vertices[v];
                        (
                            ((mesh.width - x) * scale).round() as i64,
                            (y * scale).round() as i64,
                        )
                    })
                    .collect();
                key(&mut poly)
            })
            .collect();
        mirrored.sort();
        assert_eq!(originals, mirrored);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mesh_invariants(
            half_nx in 1usize..6,
            ny in 1usize..6,
            triangles in any::<bool>(),
            width in 0.5f64..4.0,
            height in 0.5f64..3.0,
        ) {
            let nx = 2 * half_nx;
            let kind = if triangles { CellKind::Triangle } else { CellKind::Rectangle };
            let mesh = build_mesh(width, height, nx, ny, width / 2.0, kind).unwrap();

            prop_assert_eq!(mesh.edges.len(), expected_edges(nx, ny, kind));
            prop_assert_eq!(mesh.cells.len(), expected_cells(nx, ny, kind));

            // Cell areas are positive and tile the domain.
            let total: f64 = crate::stats::sum(mesh.cells.iter().map(|c| c.area));
            prop_assert!((total - width * height).abs() <= 1e-12 * width * height);
            for c in &mesh.cells {
                prop_assert!(c.area > 0.0);
                let inside = c.centroid[0] > 0.0 && c.centroid[0] < width
                    && c.centroid[1] > 0.0 && c.centroid[1] < height;
                prop_assert!(inside);
                // Outward signs: each cell's signed edge normals integrate the
                // constant field to zero (closed polygon).
                for (k, &e) in c.edges.iter().enumerate() {
                    let edge = &mesh.edges[e];
                    let outward = edge.normal[0] * (edge.midpoint[0] - c.centroid[0])
                        + edge.normal[1] * (edge.midpoint[1] - c.centroid[1]);
                    prop_assert!(outward * c.signs[k] > 0.0);
                }
            }

            // Dof enumeration is a bijection.
            let map = build_dof_map(&mesh);
            prop_assert_eq!(map.n_dofs, expected_dofs(nx, ny, kind));
            for d in 0..map.n_dofs {
                prop_assert_eq!(map.dof(map.kind(d)), Some(d));
            }
            // Invalid kinds have no dof.
            let out_of_range = DofKind::EdgeFlux { edge: mesh.edges.len(), side: 0 };
            prop_assert_eq!(map.dof(out_of_range), None);
            let iface = mesh.interface_edges[0];
            let wrong_side = map.dof(DofKind::EdgeFlux { edge: iface, side: 0 });
            prop_assert_eq!(wrong_side, None);
            let second_trace = map.dof(DofKind::EdgeFlux { edge: iface, side: 2 });
            prop_assert!(second_trace.is_some());
        }
    }
}
