use knockoff_core::lasso::{self, Family, LassoProblem, PathOptions};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use knockoff_core::rng::rng_from_seed;

fn problem(seed: u64, n: usize, p: usize, family: Family) -> LassoProblem {
    let mut rng = rng_from_seed(seed);
    let x = Array2::from_shape_simple_fn((n, p), || rng.sample::<f64, _>(StandardNormal));
    let eta: Array1<f64> = x.rows().into_iter().map(|r| r[0] * 2.0 - r[p - 1]).collect();
    let y = match family {
        Family::Gaussian => eta.mapv(|e| e + rng.sample::<f64, _>(StandardNormal)),
        Family::Binomial => eta.mapv(|e| f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-e).exp())))),
    };
    LassoProblem::new(x, y, family).unwrap()
}

fn families() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Gaussian), Just(Family::Binomial)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kkt_holds_along_the_path(seed in any::<u64>(), n in 15usize..60, p in 2usize..50, family in families()) {
        let prob = problem(seed, n, p, family);
        let opts = PathOptions { grid_size: 40, ..PathOptions::default() };
        let path = lasso::solve_path(&prob, &opts).unwrap();
        let worst = lasso::kkt_residuals(&prob, &path).into_iter().fold(0.0, f64::max);
        prop_assert!(worst <= 1e-6, "KKT residual {worst}");
        prop_assert!(path.lambdas.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn path_starts_empty_at_lambda_max(seed in any::<u64>(), family in families()) {
        let prob = problem(seed, 40, 10, family);
        let path = lasso::solve_path(&prob, &PathOptions::default()).unwrap();
        prop_assert_eq!(path.lambdas[0], lasso::lambda_max(&prob));
        prop_assert!(path.coefficients.column(0).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn standardised_entries_ignore_column_scale(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let prob = problem(seed, 50, 8, Family::Gaussian);
        let mut x = prob.design.clone();
        x.column_mut(3).mapv_inplace(|v| v * scale);
        let rescaled = LassoProblem::new(x, prob.response.clone(), Family::Gaussian).unwrap();
        let opts = PathOptions { grid_size: 50, ..PathOptions::default() };
        let a = lasso::solve_path(&prob, &opts).unwrap();
        let b = lasso::solve_path(&rescaled, &opts).unwrap();
        for (u, v) in a.entry_lambdas().iter().zip(b.entry_lambdas().iter()) {
            prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0));
        }
        for k in 0..a.lambdas.len().min(b.lambdas.len()) {
            let (u, v) = (a.coefficients[[3, k]], b.coefficients[[3, k]] * scale);
            prop_assert!((u - v).abs() <= 1e-6 * (1.0 + u.abs()));
        }
    }
}

#[test]
fn wide_binomial_problem_finishes() {
    // p > n with a nearly separable response: the deviance stop has to end the path.
    let prob = problem(9, 30, 120, Family::Binomial);
    let path = lasso::solve_path(&prob, &PathOptions::default()).unwrap();
    assert!(path.lambdas.len() <= 200);
    assert!(lasso::kkt_residuals(&prob, &path).into_iter().all(|r| r <= 1e-6));
}
