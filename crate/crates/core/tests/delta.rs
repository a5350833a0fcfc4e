use rand::Rng;

use mom_core::model::{DesignSpec, LinearPredictor};
use mom_core::numeric::rng_from;
use mom_core::regularizer::Regularizer;
use mom_core::verify::{estimate_delta, DeltaBudget};

/// Δ for ℓ1 at a single center `f*` whose nonzero coefficients exceed the
/// ρ/20 zeroing budget, with the L2 constraint inactive.
///
/// The norming functionals of points near `f*` are `sign(f*_i)` on the support
/// and anything in `[-1, 1]` off it, so the best value along `w` is
/// `Σ_S sign(f*_i) w_i + Σ_{S^c} |w_i|`. That is linear on each face of the ℓ1
/// sphere, so its minimum is attained at a vertex `±ρ e_i`.
fn vertex_oracle(f_star: &[f64], rho: f64) -> f64 {
    let value = |w: &[f64]| -> f64 {
        w.iter()
            .zip(f_star)
            .map(|(wi, fi)| if *fi != 0.0 { fi.signum() * wi } else { wi.abs() })
            .sum()
    };
    let d = f_star.len();
    let mut best = f64::INFINITY;
    for i in 0..d {
        for sign in [-1.0, 1.0] {
            let mut w = vec![0.0; d];
            w[i] = sign * rho;
            best = best.min(value(&w));
        }
    }
    best
}

#[test]
fn l1_estimate_brackets_the_vertex_oracle() {
    let mut rng = rng_from(42);
    let budget = DeltaBudget {
        samples: 20_000,
        centers: 1,
    };
    for case in 0..12u64 {
        let d = rng.random_range(1..=4);
        let rho = rng.random_range(0.1..1.0);
        let f_star: Vec<f64> = (0..d)
            .map(|_| {
                if rng.random_bool(0.5) {
                    0.0
                } else {
                    let m = rng.random_range(0.5..2.0);
                    if rng.random_bool(0.5) { m } else { -m }
                }
            })
            .collect();
        let design = DesignSpec::identity(d, 1.0).unwrap();
        let est = estimate_delta(
            &Regularizer::L1,
            &LinearPredictor::new(f_star.clone()).unwrap(),
            rho,
            1e6,
            &design,
            &budget,
            case,
        )
        .unwrap();
        let oracle = vertex_oracle(&f_star, rho);
        let value = est.estimate.expect("feasible");
        assert_eq!(est.feasible_samples, budget.samples);
        // every sampled value dominates the true minimum
        assert!(value >= oracle - 1e-9, "case {case}: {value} < oracle {oracle}");
        assert!(value <= oracle + 0.25 * rho, "case {case}: {value} far above oracle {oracle}");
    }
}

#[test]
fn zero_center_gives_exactly_rho() {
    let design = DesignSpec::identity(3, 1.0).unwrap();
    let budget = DeltaBudget {
        samples: 500,
        centers: 1,
    };
    let est = estimate_delta(&Regularizer::L1, &LinearPredictor::zeros(3), 0.3, 1e6, &design, &budget, 3).unwrap();
    approx::assert_abs_diff_eq!(est.estimate.unwrap(), 0.3, epsilon = 1e-12);
}

#[test]
fn large_support_drives_estimate_toward_minus_rho() {
    let design = DesignSpec::identity(2, 1.0).unwrap();
    let budget = DeltaBudget {
        samples: 20_000,
        centers: 1,
    };
    let f_star = LinearPredictor::new(vec![1.0, 0.0]).unwrap();
    let est = estimate_delta(&Regularizer::L1, &f_star, 0.5, 1e6, &design, &budget, 8).unwrap();
    let value = est.estimate.unwrap();
    assert!(value < -0.45 && value >= -0.5 - 1e-12, "{value}");
}

#[test]
fn estimate_is_nonincreasing_in_r() {
    let design = DesignSpec::new(vec![vec![2.0, 0.3, 0.0], vec![0.3, 1.0, 0.1], vec![0.0, 0.1, 0.5]], 1.0).unwrap();
    let f_star = LinearPredictor::new(vec![0.8, 0.0, -0.01]).unwrap();
    let budget = DeltaBudget {
        samples: 3000,
        centers: 3,
    };
    for reg in [Regularizer::L1, Regularizer::Slope { weights: None }] {
        let mut previous = f64::INFINITY;
        let mut previous_feasible = 0;
        for r in [0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 3.0] {
            let est = estimate_delta(&reg, &f_star, 0.4, r, &design, &budget, 77).unwrap();
            assert!(est.feasible_samples >= previous_feasible);
            previous_feasible = est.feasible_samples;
            if let Some(v) = est.estimate {
                assert!(v <= previous + 1e-12, "{reg:?} r={r}: {v} > {previous}");
                previous = v;
            } else {
                assert!(previous.is_infinite(), "infeasible after a feasible radius");
            }
        }
        assert!(previous.is_finite());
    }
}
