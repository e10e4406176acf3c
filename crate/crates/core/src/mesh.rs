//! Triangulated spatial domain for the SPDE field: staggered-lattice point
//! placement over the study region plus an extension band, Delaunay
//! triangulation, piecewise-linear FEM matrices, and barycentric
//! observation projectors.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::sparse::{SparseMatrix, Triplets};

/// Conforming triangulation with a spatial index for point location.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<(f64, f64)>,
    triangles: Vec<[usize; 3]>,
    boundary_extension: f64,
    index: TriangleIndex,
}

impl Mesh {
    /// Wraps externally provided geometry, validating that triangles are
    /// non-degenerate and conforming (no edge shared by more than two
    /// triangles).
    pub fn from_parts(
        vertices: Vec<(f64, f64)>,
        triangles: Vec<[usize; 3]>,
        boundary_extension: f64,
    ) -> Result<Self> {
        if vertices.len() < 3 || triangles.is_empty() {
            return Err(Error::config("mesh needs at least one triangle"));
        }
        let mut edge_count: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        let mut tris = triangles;
        for t in &mut tris {
            for &v in t.iter() {
                if v >= vertices.len() {
                    return Err(Error::config("triangle references missing vertex"));
                }
            }
            let a = signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            if a.abs() < 1e-12 {
                return Err(Error::config("degenerate (zero-area) triangle in mesh"));
            }
            if a < 0.0 {
                t.swap(1, 2);
            }
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        if edge_count.values().any(|&c| c > 2) {
            return Err(Error::config(
                "non-conforming mesh: an edge is shared by more than two triangles",
            ));
        }
        let index = TriangleIndex::build(&vertices, &tris);
        Ok(Mesh {
            vertices,
            triangles: tris,
            boundary_extension,
            index,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_extension(&self) -> f64 {
        self.boundary_extension
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Locates the triangle containing (x, y) and its barycentric weights.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, [f64; 3])> {
        self.index.locate(&self.vertices, &self.triangles, x, y)
    }

    /// Longest edge among triangles whose vertices all lie inside `bbox`.
    pub fn max_edge_within(&self, bbox: (f64, f64, f64, f64)) -> f64 {
        let inside = |p: (f64, f64)| {
            p.0 >= bbox.0 && p.0 <= bbox.2 && p.1 >= bbox.1 && p.1 <= bbox.3
        };
        let mut m = 0.0f64;
        for t in &self.triangles {
            let ps = [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]];
            if ps.iter().all(|&p| inside(p)) {
                for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                    let d = ((ps[i].0 - ps[j].0).powi(2) + (ps[i].1 - ps[j].1).powi(2)).sqrt();
                    m = m.max(d);
                }
            }
        }
        m
    }
}

fn signed_area(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1))
}

/// Delaunay-based mesh over the study region plus a margin band: a
/// staggered (near-equilateral) lattice at `max_edge_inner` spacing covers
/// the grid extent, a coarser lattice at `max_edge_outer` fills the band,
/// and the union is triangulated.
pub fn build_mesh(
    grid: &GridSpec,
    max_edge_inner: f64,
    max_edge_outer: f64,
    margin: f64,
) -> Result<Mesh> {
    if !(margin > 0.0) {
        return Err(Error::config("mesh margin must be positive"));
    }
    if !(max_edge_inner > 0.0) || !(max_edge_outer > 0.0) {
        return Err(Error::config("mesh edge bounds must be positive"));
    }
    let (xmin, ymin, xmax, ymax) = grid.extent();

    // Edge lengths on the staggered lattice equal the point spacing, so
    // the spacing is the edge bound itself (with a small safety factor for
    // the irregular stitch band).
    let s_in = max_edge_inner * 0.95;
    let s_out = (max_edge_outer * 0.95).min(margin);

    let mut points: Vec<(f64, f64)> = Vec::new();
    // Irrational lattice offsets keep grid-cell centers off mesh edges.
    let off = (s_in * 0.318_309, s_in * 0.271_828);

    // Inner lattice: covers the extent plus one ring.
    staggered_lattice(
        (xmin - s_in - off.0, ymin - s_in - off.1),
        (xmax + s_in, ymax + s_in),
        s_in,
        &mut points,
    );
    let inner_box = (
        xmin - s_in - off.0,
        ymin - s_in * 0.866 * 1.5 - off.1,
        xmax + s_in * 1.5,
        ymax + s_in * 0.866 * 1.5,
    );

    // Outer band lattice, clipped away from the inner region.
    let mut outer: Vec<(f64, f64)> = Vec::new();
    staggered_lattice(
        (xmin - margin, ymin - margin),
        (xmax + margin, ymax + margin),
        s_out,
        &mut outer,
    );
    let clearance = 0.45 * s_out;
    for p in outer {
        let inside_expanded = p.0 > inner_box.0 - clearance
            && p.0 < inner_box.2 + clearance
            && p.1 > inner_box.1 - clearance
            && p.1 < inner_box.3 + clearance;
        if !inside_expanded {
            points.push(p);
        }
    }
    // Extended-box corners pin the hull to the full margin.
    for p in [
        (xmin - margin, ymin - margin),
        (xmax + margin, ymin - margin),
        (xmin - margin, ymax + margin),
        (xmax + margin, ymax + margin),
    ] {
        points.push(p);
    }

    // Exact duplicates would survive as orphan vertices: delaunator skips
    // them in the triangulation but they would stay in the vertex list.
    let mut seen = std::collections::HashSet::new();
    points.retain(|&(x, y)| seen.insert((x.to_bits(), y.to_bits())));

    let dpoints: Vec<delaunator::Point> = points
        .iter()
        .map(|&(x, y)| delaunator::Point { x, y })
        .collect();
    let tri = delaunator::triangulate(&dpoints);
    if tri.triangles.is_empty() {
        return Err(Error::config(
            "degenerate geometry: triangulation produced no triangles",
        ));
    }
    let triangles: Vec<[usize; 3]> = tri
        .triangles
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let mesh = Mesh::from_parts(points, triangles, margin)?;

    // Every active cell center must be locatable.
    for &cell in grid.active_cells() {
        let (x, y) = grid.cell_center(cell);
        if mesh.locate(x, y).is_none() {
            return Err(Error::config(format!(
                "mesh does not cover active cell center ({x}, {y})"
            )));
        }
    }
    Ok(mesh)
}

fn staggered_lattice(
    lo: (f64, f64),
    hi: (f64, f64),
    spacing: f64,
    out: &mut Vec<(f64, f64)>,
) {
    let dy = spacing * 0.866_025_403_784_438_6; // sqrt(3)/2
    let n_rows = ((hi.1 - lo.1) / dy).ceil() as usize + 1;
    let n_cols = ((hi.0 - lo.0) / spacing).ceil() as usize + 2;
    for j in 0..n_rows {
        let y = lo.1 + j as f64 * dy;
        let x0 = lo.0 + if j % 2 == 1 { 0.5 * spacing } else { 0.0 };
        for i in 0..n_cols {
            let x = x0 + i as f64 * spacing;
            if x <= hi.0 + spacing && y <= hi.1 + dy {
                out.push((x, y));
            }
        }
    }
}

/// Piecewise-linear FEM matrices on the mesh: the lumped (diagonal) mass
/// matrix C with entries sum(adjacent triangle areas) / 3, and the
/// stiffness matrix G with G 1 = 0.
pub fn fem_matrices(mesh: &Mesh) -> (Vec<f64>, SparseMatrix) {
    let n = mesh.n_vertices();
    let mut c_diag = vec![0.0f64; n];
    let mut g = Triplets::with_capacity(n, n, mesh.triangles().len() * 9);
    for (t_idx, t) in mesh.triangles().iter().enumerate() {
        let area = mesh.triangle_area(t_idx);
        let p = [
            mesh.vertices()[t[0]],
            mesh.vertices()[t[1]],
            mesh.vertices()[t[2]],
        ];
        for &v in t.iter() {
            c_diag[v] += area / 3.0;
        }
        // Gradient coefficients of the P1 basis: for vertex i with
        // opposite edge (j, k), b_i = y_j - y_k, c_i = x_k - x_j.
        let b = [p[1].1 - p[2].1, p[2].1 - p[0].1, p[0].1 - p[1].1];
        let c = [p[2].0 - p[1].0, p[0].0 - p[2].0, p[1].0 - p[0].0];
        for i in 0..3 {
            for j in 0..3 {
                g.push(t[i], t[j], (b[i] * b[j] + c[i] * c[j]) / (4.0 * area));
            }
        }
    }
    (c_diag, g.to_csr())
}

/// Sparse observation matrix: row i holds the barycentric weights of
/// `points[i]` in its containing triangle. Rows sum to 1 with at most
/// three nonzeros.
pub fn projector(mesh: &Mesh, points: &[(f64, f64)]) -> Result<SparseMatrix> {
    let mut t = Triplets::with_capacity(points.len(), mesh.n_vertices(), points.len() * 3);
    for (i, &(x, y)) in points.iter().enumerate() {
        let Some((tri, w)) = mesh.locate(x, y) else {
            return Err(Error::PointOutsideMesh { x, y });
        };
        let vs = mesh.triangles()[tri];
        for k in 0..3 {
            if w[k] != 0.0 {
                t.push(i, vs[k], w[k]);
            }
        }
    }
    Ok(t.to_csr())
}

/// Uniform-grid spatial index over triangle bounding boxes.
#[derive(Debug, Clone)]
struct TriangleIndex {
    x0: f64,
    y0: f64,
    inv_cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

impl TriangleIndex {
    fn build(vertices: &[(f64, f64)], triangles: &[[usize; 3]]) -> Self {
        let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
        let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in vertices {
            xmin = xmin.min(x);
            ymin = ymin.min(y);
            xmax = xmax.max(x);
            ymax = ymax.max(y);
        }
        let n_target = (triangles.len() as f64).sqrt().ceil().max(1.0) as usize;
        let cell = ((xmax - xmin).max(ymax - ymin) / n_target as f64).max(1e-9);
        let nx = (((xmax - xmin) / cell).ceil() as usize + 1).max(1);
        let ny = (((ymax - ymin) / cell).ceil() as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        for (t_idx, t) in triangles.iter().enumerate() {
            let ps = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
            let bx0 = ps.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let bx1 = ps.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let by0 = ps.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let by1 = ps.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let i0 = (((bx0 - xmin) / cell).floor() as usize).min(nx - 1);
            let i1 = (((bx1 - xmin) / cell).floor() as usize).min(nx - 1);
            let j0 = (((by0 - ymin) / cell).floor() as usize).min(ny - 1);
            let j1 = (((by1 - ymin) / cell).floor() as usize).min(ny - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t_idx as u32);
                }
            }
        }
        TriangleIndex {
            x0: xmin,
            y0: ymin,
            inv_cell: 1.0 / cell,
            nx,
            ny,
            buckets,
        }
    }

    fn locate(
        &self,
        vertices: &[(f64, f64)],
        triangles: &[[usize; 3]],
        x: f64,
        y: f64,
    ) -> Option<(usize, [f64; 3])> {
        let i = (((x - self.x0) * self.inv_cell).floor() as isize).clamp(0, self.nx as isize - 1)
            as usize;
        let j = (((y - self.y0) * self.inv_cell).floor() as isize).clamp(0, self.ny as isize - 1)
            as usize;
        for &t_idx in &self.buckets[j * self.nx + i] {
            let t = &triangles[t_idx as usize];
            if let Some(w) = barycentric(
                vertices[t[0]],
                vertices[t[1]],
                vertices[t[2]],
                (x, y),
            ) {
                return Some((t_idx as usize, w));
            }
        }
        None
    }
}

/// Barycentric coordinates of `p`, or None when outside (tolerance 1e-10).
fn barycentric(
    a: (f64, f64),
    b: (f64, f64),
    c: (f64, f64),
    p: (f64, f64),
) -> Option<[f64; 3]> {
    let area = signed_area(a, b, c);
    if area.abs() < 1e-14 {
        return None;
    }
    let w0 = signed_area(p, b, c) / area;
    let w1 = signed_area(a, p, c) / area;
    let w2 = signed_area(a, b, p) / area;
    let tol = -1e-10;
    if w0 >= tol && w1 >= tol && w2 >= tol {
        let (w0, w1, w2) = (w0.max(0.0), w1.max(0.0), w2.max(0.0));
        let s = w0 + w1 + w2;
        Some([w0 / s, w1 / s, w2 / s])
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_right_triangle() -> Mesh {
        Mesh::from_parts(
            vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)],
            vec![[0, 1, 2]],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn single_triangle_fem_matches_hand_oracle() {
        let mesh = unit_right_triangle();
        let (c, g) = fem_matrices(&mesh);
        // Lumped mass: area / 3 = 1/6 per vertex.
        for v in &c {
            assert_relative_eq!(*v, 1.0 / 6.0, epsilon = 1e-14);
        }
        // Hand-computed stiffness of the unit right triangle.
        let expected = [
            [1.0, -0.5, -0.5],
            [-0.5, 0.5, 0.0],
            [-0.5, 0.0, 0.5],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(g.get(i, j), expected[i][j], epsilon = 1e-14);
            }
        }
    }

    fn demo_grid() -> GridSpec {
        GridSpec::fully_active((0.0, 0.0), 2.0, 10, 10).unwrap()
    }

    #[test]
    fn minimal_mesh_over_tiny_region() {
        let grid = GridSpec::fully_active((0.0, 0.0), 2.0, 2, 2).unwrap();
        let mesh = build_mesh(&grid, 1000.0, 1000.0, 5.0).unwrap();
        assert!(mesh.triangles().len() >= 2);
    }

    #[test]
    fn stiffness_row_sums_vanish() {
        let mesh = build_mesh(&demo_grid(), 6.0, 12.0, 10.0).unwrap();
        let (_, g) = fem_matrices(&mesh);
        let ones = vec![1.0; mesh.n_vertices()];
        for v in g.matvec(&ones) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn lumped_mass_sums_to_total_area() {
        let mesh = build_mesh(&demo_grid(), 6.0, 12.0, 10.0).unwrap();
        let (c, _) = fem_matrices(&mesh);
        let total: f64 = c.iter().sum();
        assert_relative_eq!(total, mesh.total_area(), epsilon = 1e-10, max_relative = 1e-12);
    }

    #[test]
    fn paper_scale_node_count_has_the_right_order() {
        // 200 x 200 km study region, 12.5 km inner edges: node count must
        // land in the hundreds-to-low-thousands range.
        let grid = GridSpec::fully_active((0.0, 0.0), 2.0, 100, 100).unwrap();
        let mesh = build_mesh(&grid, 12.5, 30.0, 40.0).unwrap();
        let n = mesh.n_vertices();
        assert!(
            (100..=3000).contains(&n),
            "expected order 10^2..10^3 nodes, got {n}"
        );
        // Inner edge bound holds for triangles fully inside the extent.
        let max_edge = mesh.max_edge_within(grid.extent());
        assert!(max_edge <= 12.5 + 1e-9, "inner edge {max_edge} > 12.5");
    }

    #[test]
    fn every_active_center_in_exactly_one_triangle() {
        let grid = demo_grid();
        let mesh = build_mesh(&grid, 5.0, 10.0, 8.0).unwrap();
        for &cell in grid.active_cells() {
            let (x, y) = grid.cell_center(cell);
            // Brute force across all triangles.
            let mut hits = 0;
            for t in mesh.triangles() {
                if barycentric(
                    mesh.vertices()[t[0]],
                    mesh.vertices()[t[1]],
                    mesh.vertices()[t[2]],
                    (x, y),
                )
                .is_some()
                {
                    hits += 1;
                }
            }
            assert_eq!(hits, 1, "center ({x}, {y}) found in {hits} triangles");
        }
    }

    #[test]
    fn projector_rows_are_barycentric() {
        let grid = demo_grid();
        let mesh = build_mesh(&grid, 5.0, 10.0, 8.0).unwrap();

        // A vertex maps to a unit row.
        let v3 = mesh.vertices()[3];
        let a = projector(&mesh, &[v3]).unwrap();
        let (cols, vals) = a.row(0);
        let sum: f64 = vals.iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(vals.iter().any(|&w| (w - 1.0).abs() < 1e-9));
        assert!(cols.contains(&3));

        // A centroid maps to three weights of 1/3.
        let t = mesh.triangles()[0];
        let cx = (mesh.vertices()[t[0]].0 + mesh.vertices()[t[1]].0 + mesh.vertices()[t[2]].0) / 3.0;
        let cy = (mesh.vertices()[t[0]].1 + mesh.vertices()[t[1]].1 + mesh.vertices()[t[2]].1) / 3.0;
        let a = projector(&mesh, &[(cx, cy)]).unwrap();
        let (_, vals) = a.row(0);
        assert_eq!(vals.len(), 3);
        for &w in vals {
            assert_relative_eq!(w, 1.0 / 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn projector_reproduces_linear_functions() {
        let grid = demo_grid();
        let mesh = build_mesh(&grid, 5.0, 10.0, 8.0).unwrap();
        let lin = |x: f64, y: f64| 0.7 * x - 1.3 * y + 4.0;
        let nodal: Vec<f64> = mesh.vertices().iter().map(|&(x, y)| lin(x, y)).collect();
        let pts: Vec<(f64, f64)> = grid.active_centers();
        let a = projector(&mesh, &pts).unwrap();
        let interp = a.matvec(&nodal);
        for (k, &(x, y)) in pts.iter().enumerate() {
            assert_relative_eq!(interp[k], lin(x, y), epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn point_outside_mesh_is_reported() {
        let mesh = unit_right_triangle();
        let err = projector(&mesh, &[(5.0, 5.0)]).unwrap_err();
        match err {
            Error::PointOutsideMesh { x, y } => {
                assert_eq!((x, y), (5.0, 5.0));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn nonconforming_mesh_rejected() {
        // Three triangles sharing one edge.
        let r = Mesh::from_parts(
            vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (-1.0, -1.0)],
            vec![[0, 1, 2], [1, 3, 2], [0, 1, 4], [0, 2, 4], [1, 2, 4]],
            1.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let r = Mesh::from_parts(
            vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)],
            vec![[0, 1, 2]],
            1.0,
        );
        assert!(r.is_err());
    }
}
