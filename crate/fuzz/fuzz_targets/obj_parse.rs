#![no_main]

use gridntk::mesh::parse_obj;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mesh) = parse_obj(text) {
        for t in &mesh.triangles {
            assert!(t.iter().all(|&i| i < mesh.vertices.len()));
        }
        if let Ok(m) = mesh.normalized() {
            let (lo, hi) = m.bounds();
            assert!(lo.iter().chain(&hi).all(|v| (0.0..=1.0).contains(v)));
            let _ = m.contains([0.5, 0.5, 0.5]);
        }
    }
});
