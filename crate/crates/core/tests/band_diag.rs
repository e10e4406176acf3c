use stlgcp_core::grid::GridSpec;
use stlgcp_core::mesh::build_mesh;
use stlgcp_core::sparse::LdlFactor;
use stlgcp_core::sim::gmrf_factor;
use stlgcp_core::spde::{MaternHyper, SpdeOperators};

#[test]
#[ignore]
fn variance_vs_mesh_resolution() {
    let range = 12.0f64;
    let grid = GridSpec::fully_active((0.0, 0.0), 2.0, 30, 30).unwrap();
    for div in [3.0, 4.0, 6.0, 8.0, 12.0] {
        let mesh = build_mesh(&grid, range / div, range / 2.0, 1.5 * range).unwrap();
        let ops = SpdeOperators::from_mesh(&mesh).unwrap();
        let q = ops.precision(&MaternHyper::new(range, 1.0).unwrap()).unwrap();
        let factor: LdlFactor = gmrf_factor(&q).unwrap();
        // exact marginal variances at interior vertices
        let (xmin, ymin, xmax, ymax) = grid.extent();
        let mut acc = 0.0; let mut cnt = 0;
        for (i, &(x, y)) in mesh.vertices().iter().enumerate() {
            if x >= xmin + range && x <= xmax - range && y >= ymin + range && y <= ymax - range {
                acc += factor.inverse_diagonal_entry(i);
                cnt += 1;
            }
        }
        eprintln!("edge=range/{div}: vertices {}, interior mean var {:.4}", mesh.n_vertices(), acc / cnt as f64);
    }
}
