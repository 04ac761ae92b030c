use std::path::PathBuf;

use gridntk::mesh::{load_mesh, parse_obj, TriangleMesh, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/meshes").join(name)
}

/// Inside test by half-spaces, valid for convex closed meshes only.
fn convex_contains(mesh: &TriangleMesh, p: Vec3) -> bool {
    let n = mesh.vertices.len() as f64;
    let c: Vec3 = [0, 1, 2].map(|a| mesh.vertices.iter().map(|v| v[a]).sum::<f64>() / n);
    mesh.triangles.iter().all(|t| {
        let [a, b, d] = t.map(|i| mesh.vertices[i]);
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
        let nrm = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
        let side = |q: Vec3| (0..3).map(|k| (q[k] - a[k]) * nrm[k]).sum::<f64>();
        side(p) * side(c) > 0.0
    })
}

#[test]
fn record_counts_match_parsed_mesh() {
    for (name, tris_per_face) in [("cube.obj", 2), ("icosphere.obj", 1), ("torus.obj", 1)] {
        let text = std::fs::read_to_string(asset(name)).unwrap();
        let v = text.lines().filter(|l| l.starts_with("v ")).count();
        let f = text.lines().filter(|l| l.starts_with("f ")).count();
        let m = parse_obj(&text).unwrap();
        assert_eq!(m.vertices.len(), v, "{name}");
        assert_eq!(m.triangles.len(), f * tris_per_face, "{name}");
        assert_eq!(m.boundary_edge_count(), 0, "{name} should be closed");
    }
}

#[test]
fn normalized_assets_fill_unit_cube() {
    for name in ["cube.obj", "icosphere.obj", "torus.obj"] {
        let m = load_mesh(asset(name)).unwrap();
        let (lo, hi) = m.bounds();
        assert!(lo.iter().all(|v| *v >= 0.0) && hi.iter().all(|v| *v <= 1.0));
        assert_eq!(hi.iter().cloned().fold(0.0, f64::max), 1.0);
    }
}

#[test]
fn parity_agrees_with_half_spaces_on_convex_assets() {
    for name in ["cube.obj", "icosphere.obj"] {
        let m = load_mesh(asset(name)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let agree = (0..n)
            .filter(|_| {
                let p = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                m.contains(p) == convex_contains(&m, p)
            })
            .count();
        assert!(agree as f64 / n as f64 >= 0.999, "{name}: {agree}/{n}");
    }
}

#[test]
fn sphere_volume_by_monte_carlo() {
    let m = load_mesh(asset("icosphere.obj")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let inside = (0..n)
        .filter(|_| m.contains([rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]))
        .count();
    let vol = inside as f64 / n as f64;
    assert!((vol - std::f64::consts::PI / 6.0).abs() <= 0.02, "{vol}");
}

#[test]
fn torus_hole_is_outside() {
    let m = load_mesh(asset("torus.obj")).unwrap();
    let (lo, hi) = m.bounds();
    let centre = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    assert!(!m.contains(centre));
    assert!(!m.contains([0.99, 0.99, centre[2]]));
}

#[test]
fn missing_mesh_is_an_io_error() {
    assert!(matches!(load_mesh(asset("absent.obj")), Err(gridntk::Error::Io { .. })));
}
