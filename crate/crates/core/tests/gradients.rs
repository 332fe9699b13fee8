mod common;

use common::{max_gradient_error, random_problem, reference_vae_bound};
use mcvi::elbo_batch;
use mcvi::linalg::standard_normal_matrix;
use mcvi::SeededRng;

#[test]
fn analytic_gradient_matches_finite_differences() {
    let cases: [(usize, &[usize], usize); 4] = [(1, &[3], 4), (2, &[2, 5], 6), (3, &[4, 1, 3], 5), (4, &[8], 3)];
    for (seed, (l, dims, n)) in cases.into_iter().enumerate() {
        let (model, batch) = random_problem(seed as u64, l, dims, n);
        for mc in [1, 3] {
            let err = max_gradient_error(&model, &batch, 17 + seed as u64, mc);
            assert!(err < 1e-4, "case {seed}, mc {mc}: relative error {err}");
        }
    }
}

#[test]
fn gradient_of_a_trained_like_model() {
    // small noise variances make the bound sharply curved
    let (mut model, batch) = random_problem(40, 2, &[3, 3], 8);
    for th in model.theta.iter_mut() {
        th.g_logvar.iter_mut().for_each(|v| *v -= 3.0);
    }
    assert!(max_gradient_error(&model, &batch, 5, 2) < 1e-4);
}

#[test]
fn one_channel_bound_is_a_plain_vae() {
    for case in 0..5u64 {
        let (model, batch) = random_problem(100 + case, 1 + case as usize % 3, &[2 + case as usize], 7);
        for mc in [1, 4] {
            let got = elbo_batch(&model, &batch, case, mc).unwrap().total;
            let want = reference_vae_bound(&model, &batch[0], case, mc);
            assert_eq!(got.to_bits(), want.to_bits(), "case {case}: {got} vs {want}");
        }
    }
}

#[test]
fn reference_bound_is_sensitive_to_the_seed() {
    let (model, _) = random_problem(7, 2, &[3], 1);
    let x = standard_normal_matrix(&mut SeededRng::new(8), 5, 3).unwrap();
    assert_ne!(reference_vae_bound(&model, &x, 1, 1), reference_vae_bound(&model, &x, 2, 1));
}
