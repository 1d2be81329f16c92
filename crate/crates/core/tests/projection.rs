//! Norm-ball projection: exact idempotence, radius bound, interior points
//! untouched, nearest-point optimality.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robex::attacks::{norm_of, project, Norm};

const CASES: usize = 10_000;

fn random_case(rng: &mut ChaCha8Rng) -> (Array2<f64>, f64) {
    let dim = (rng.random_range(1..6), rng.random_range(1..6));
    let scale = 10f64.powf(rng.random_range(-3.0..1.0));
    let delta = Array2::from_shape_fn(dim, |_| scale * rng.random_range(-1.0..1.0));
    (delta, rng.random_range(1e-3..2.0))
}

fn dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_common(norm: Norm, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut interior = 0;
    for _ in 0..CASES {
        let (delta, eps) = random_case(&mut rng);
        let p = project(&delta, norm, eps);
        assert_eq!(project(&p, norm, eps), p, "projection is not idempotent");
        assert!(norm_of(&p, norm) <= eps + 1e-12);
        if norm_of(&delta, norm) <= eps {
            interior += 1;
            assert_eq!(p, delta, "interior point moved");
        }
    }
    assert!(interior > CASES / 10 && interior < CASES * 9 / 10);
}

#[test]
fn l2_properties() {
    check_common(Norm::L2, 1);
}

#[test]
fn linf_properties() {
    check_common(Norm::Linf, 2);
}

#[test]
fn l2_projection_is_nearest_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..CASES {
        let (delta, eps) = random_case(&mut rng);
        let p = project(&delta, Norm::L2, eps);
        let d_p = dist(&delta, &p);
        for _ in 0..5 {
            // candidate inside the ball: random direction and radius
            let z = Array2::from_shape_fn(delta.dim(), |_| rng.random_range(-1.0..1.0));
            let r = eps * rng.random_range(0.0f64..=1.0).sqrt();
            let z = &z * (r / norm_of(&z, Norm::L2).max(1e-300));
            assert!(d_p <= dist(&delta, &z) + 1e-12);
        }
        // perturbing the projection along the boundary does not help
        let nudge =
            Array2::from_shape_fn(delta.dim(), |_| 1e-3 * eps * rng.random_range(-1.0..1.0));
        let q = project(&(&p + &nudge), Norm::L2, eps);
        assert!(d_p <= dist(&delta, &q) + 1e-12);
    }
}

#[test]
fn projection_matches_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..CASES {
        let (delta, eps) = random_case(&mut rng);
        let n = norm_of(&delta, Norm::L2);
        let expected = if n <= eps {
            delta.clone()
        } else {
            &delta * (eps / n)
        };
        for (a, b) in project(&delta, Norm::L2, eps).iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * eps.max(1.0));
        }
        let clamped = delta.mapv(|v| v.clamp(-eps, eps));
        assert_eq!(project(&delta, Norm::Linf, eps), clamped);
    }
}
