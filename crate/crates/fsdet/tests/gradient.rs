mod common;

use fsdet::head::batch_loss;
use fsdet::ClassifierKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_relative_error(kind: ClassifierKind, seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (heads, batch, lw) = common::gradient_instance(&mut rng, kind);
        let (_, analytic) = batch_loss(&heads, &batch, lw).unwrap();
        let numeric = common::numeric_grads(&heads, &batch, lw, 1e-5);
        for (a, n) in analytic.tensors().iter().zip(&numeric) {
            for (x, y) in a.iter().zip(n) {
                // below 1e-4 the difference quotient's roundoff (~1e-10) dominates
                let scale = x.abs().max(y.abs()).max(1e-4);
                worst = worst.max((x - y).abs() / scale);
            }
        }
    }
    worst
}

#[test]
fn fc_gradient_matches_finite_differences() {
    let e = max_relative_error(ClassifierKind::Fc, 11, 100);
    assert!(e < 1e-4, "max relative error {e}");
}

#[test]
fn cosine_gradient_matches_finite_differences() {
    let e = max_relative_error(ClassifierKind::Cosine, 12, 100);
    assert!(e < 1e-4, "max relative error {e}");
}
