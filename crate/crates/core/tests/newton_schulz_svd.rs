//! Newton–Schulz output checked against an SVD computed by nalgebra.

use nalgebra::DMatrix;
use o2olab::numkit::{rng_from_seed, standard_normal_vec, Matrix};
use o2olab::optim::{newton_schulz_orthogonalize, newton_schulz_with, NsSchedule, NS_ITERATIONS};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn singular_values(m: &Matrix) -> Vec<f64> {
    to_na(m).svd(false, false).singular_values.iter().copied().collect()
}

fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    let a = DMatrix::from_row_slice(n, n, &standard_normal_vec(&mut rng, n * n));
    let q = a.qr().q();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(q[(i, j)]);
        }
    }
    Matrix::from_vec(n, n, data).unwrap()
}

#[test]
fn random_tall_matrices_have_unit_like_spectrum() {
    let mut rng = rng_from_seed(2024);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut worst_gram = 0.0f64;
    for _ in 0..100 {
        let g = Matrix::from_vec(16, 8, standard_normal_vec(&mut rng, 128)).unwrap();
        let o = newton_schulz_orthogonalize(&g, NS_ITERATIONS).unwrap();
        for s in singular_values(&o) {
            lo = lo.min(s);
            hi = hi.max(s);
        }
        let gram = o.transpose().matmul(&o).unwrap();
        let dev = gram.lin_comb(1.0, &Matrix::identity(8), -1.0).unwrap().max_abs();
        worst_gram = worst_gram.max(dev);
    }
    assert!(lo >= 0.7 && hi <= 1.3, "singular values in [{lo}, {hi}]");
    assert!(worst_gram <= 0.3, "max |OᵀO − I| = {worst_gram}");
}

#[test]
fn output_matches_svd_polar_factor() {
    let mut rng = rng_from_seed(9);
    let g = Matrix::from_vec(6, 4, standard_normal_vec(&mut rng, 24)).unwrap();
    let svd = to_na(&g).svd(true, true);
    let polar = svd.u.unwrap() * svd.v_t.unwrap();
    let o = newton_schulz_orthogonalize(&g, NS_ITERATIONS).unwrap();
    // Well-conditioned 6x4 Gaussian: the polish steps land close to UVᵀ.
    let cond = svd.singular_values.max() / svd.singular_values.min();
    assert!(cond < 20.0, "unexpectedly ill-conditioned draw: {cond}");
    for i in 0..6 {
        for j in 0..4 {
            assert!((o.get(i, j) - polar[(i, j)]).abs() < 0.05);
        }
    }
}

#[test]
fn orthogonal_inputs_are_fixed_points() {
    for n in [1, 2, 3, 4, 8, 16] {
        let q = random_orthogonal(n, n as u64);
        let o = newton_schulz_orthogonalize(&q, NS_ITERATIONS).unwrap();
        let err = o.lin_comb(1.0, &q, -1.0).unwrap().max_abs();
        assert!(err <= 1e-2, "n={n}: max deviation {err}");
    }
    let i = Matrix::identity(5);
    let o = newton_schulz_orthogonalize(&i, NS_ITERATIONS).unwrap();
    assert!(o.lin_comb(1.0, &i, -1.0).unwrap().max_abs() <= 1e-2);
}

#[test]
fn reference_schedule_alone_misses_unit_spectrum() {
    // Documents why the polished schedule is the default.
    let q = random_orthogonal(4, 4);
    let o = newton_schulz_with(&q, 5, NsSchedule::Reference).unwrap();
    assert!(o.lin_comb(1.0, &q, -1.0).unwrap().max_abs() > 1e-2);
}
