//! Central finite differences against the analytic parameter Jacobian.

use gridntk::encoding::{EncodingSpec, ResolutionSpec};
use gridntk::network::{init_model, MlpConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;
const CASES: usize = 100;

fn check_encoding(spec: EncodingSpec, seed: u64) {
    let cfg = MlpConfig::new(0, vec![12, 10], 2);
    let mut model = init_model(&spec, 2, &cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        let channel = rng.random_range(0..2);
        let jac = model.param_jacobian(&x, channel).unwrap();
        assert_eq!(jac.len(), model.param_count());
        // Sample MLP parameters uniformly plus grid parameters the point touches.
        let mut indices: Vec<usize> = (0..6).map(|_| rng.random_range(0..model.mlp_param_count())).collect();
        let touched: Vec<usize> = jac
            .iter()
            .enumerate()
            .skip(model.mlp_param_count())
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        if !touched.is_empty() {
            for _ in 0..3 {
                indices.push(touched[rng.random_range(0..touched.len())]);
            }
        }
        for idx in indices {
            model.perturb_param(idx, STEP).unwrap();
            let up = model.forward(&x).unwrap()[channel];
            model.perturb_param(idx, -2.0 * STEP).unwrap();
            let down = model.forward(&x).unwrap()[channel];
            model.perturb_param(idx, STEP).unwrap();
            let fd = (up - down) / (2.0 * STEP);
            let rel = (fd - jac[idx]).abs() / fd.abs().max(jac[idx].abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= TOLERANCE, "{}: worst relative error {worst:e}", spec.label());
}

#[test]
fn jacobian_matches_finite_differences_identity() {
    check_encoding(EncodingSpec::Identity, 1);
}

#[test]
fn jacobian_matches_finite_differences_fourier() {
    check_encoding(EncodingSpec::Fourier { levels: 4 }, 2);
}

#[test]
fn jacobian_matches_finite_differences_multigrid() {
    check_encoding(
        EncodingSpec::Multigrid {
            slots: 3,
            levels: 2,
            resolution: ResolutionSpec::Range([5, 11]),
        },
        3,
    );
}
