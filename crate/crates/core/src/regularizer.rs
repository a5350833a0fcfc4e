//! Norm penalties `Ψ`: none, ℓ1 and SLOPE (sorted ℓ1).

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    L1,
    /// Sorted ℓ1 norm `Σ w_i |θ|_(i)`. `weights: None` uses [`default_slope_weights`].
    Slope {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
}

/// `w_i = sqrt(log(2d / i))`, `i = 1..d`: positive and nonincreasing.
pub fn default_slope_weights(dim: usize) -> Vec<f64> {
    (1..=dim)
        .map(|i| (2.0 * dim as f64 / i as f64).ln().sqrt())
        .collect()
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Indices sorted by decreasing `|values[i]|`; ties keep index order.
fn order_by_magnitude(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    order
}

impl Regularizer {
    pub fn slope_default() -> Self {
        Regularizer::Slope { weights: None }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Regularizer::None)
    }

    /// SLOPE weights for dimension `dim`, validated.
    pub fn slope_weights(&self, dim: usize) -> Result<Vec<f64>> {
        match self {
            Regularizer::Slope { weights: Some(w) } => {
                check_dim(dim, w.len())?;
                if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                    return Err(config_err("slope weights must be positive"));
                }
                if w.windows(2).any(|p| p[1] > p[0]) {
                    return Err(config_err("slope weights must be nonincreasing"));
                }
                Ok(w.clone())
            }
            Regularizer::Slope { weights: None } => Ok(default_slope_weights(dim)),
            _ => Err(config_err("not a slope regularizer")),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Regularizer::Slope { .. } = self {
            self.slope_weights(dim)?;
        }
        Ok(())
    }

    /// `Ψ(θ)`.
    pub fn psi(&self, theta: &[f64]) -> Result<f64> {
        Ok(match self {
            Regularizer::None => 0.0,
            Regularizer::L1 => theta.iter().map(|v| v.abs()).sum(),
            Regularizer::Slope { .. } => {
                let w = self.slope_weights(theta.len())?;
                let order = order_by_magnitude(theta);
                order.iter().zip(&w).map(|(&i, wi)| wi * theta[i].abs()).sum()
            }
        })
    }

    /// Dual norm `sup { z(x) : Ψ(x) ≤ 1 }`. Undefined (infinite) for `None`.
    pub fn dual_norm(&self, z: &[f64]) -> Result<f64> {
        Ok(match self {
            Regularizer::None => f64::INFINITY,
            Regularizer::L1 => z.iter().fold(0.0, |acc, v| acc.max(v.abs())),
            Regularizer::Slope { .. } => {
                let w = self.slope_weights(z.len())?;
                let order = order_by_magnitude(z);
                let (mut num, mut den, mut best) = (0.0, 0.0, 0.0f64);
                for (&i, wi) in order.iter().zip(&w) {
                    num += z[i].abs();
                    den += wi;
                    best = best.max(num / den);
                }
                best
            }
        })
    }

    /// Proximal map of `threshold * Ψ`.
    pub fn prox(&self, theta: &[f64], threshold: f64) -> Result<Vec<f64>> {
        if threshold <= 0.0 {
            return Ok(theta.to_vec());
        }
        Ok(match self {
            Regularizer::None => theta.to_vec(),
            Regularizer::L1 => theta
                .iter()
                .map(|&v| sign(v) * (v.abs() - threshold).max(0.0))
                .collect(),
            Regularizer::Slope { .. } => {
                let w = self.slope_weights(theta.len())?;
                prox_sorted_l1(theta, &w, threshold)
            }
        })
    }

    /// A unit dual-norm functional `z` with `z(v) = Ψ(v)`, chosen among the
    /// norming functionals of `v` to make `z(direction)` as large as possible.
    ///
    /// Exact for ℓ1. For SLOPE the maximization is over signed permutations of the
    /// weights, which contains every extreme point of the norming set.
    pub fn norming_functional(&self, v: &[f64], direction: &[f64]) -> Result<Vec<f64>> {
        check_dim(v.len(), direction.len())?;
        match self {
            Regularizer::None => Err(config_err("no norming functional without a norm")),
            Regularizer::L1 => Ok(v
                .iter()
                .zip(direction)
                .map(|(&vi, &di)| if vi != 0.0 { sign(vi) } else { sign(di) })
                .collect()),
            Regularizer::Slope { .. } => {
                let w = self.slope_weights(v.len())?;
                Ok(slope_norming(v, direction, &w))
            }
        }
    }
}

fn slope_norming(v: &[f64], direction: &[f64], w: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut z = vec![0.0; d];
    let order = order_by_magnitude(v);
    let support = order.iter().take_while(|&&i| v[i] != 0.0).count();
    // Within a group of tied |v_i| any assignment of the group's weights norms v;
    // rearrangement puts the larger weights where sign(v_i) * direction_i is larger.
    let mut start = 0;
    while start < support {
        let mag = v[order[start]].abs();
        let mut end = start;
        while end < support && v[order[end]].abs() == mag {
            end += 1;
        }
        let mut group: Vec<usize> = order[start..end].to_vec();
        group.sort_by(|&a, &b| {
            (sign(v[b]) * direction[b]).total_cmp(&(sign(v[a]) * direction[a]))
        });
        for (k, &i) in group.iter().enumerate() {
            z[i] = sign(v[i]) * w[start + k];
        }
        start = end;
    }
    let mut free: Vec<usize> = order[support..].to_vec();
    free.sort_by(|&a, &b| direction[b].abs().total_cmp(&direction[a].abs()));
    for (k, &i) in free.iter().enumerate() {
        z[i] = sign(direction[i]) * w[support + k];
    }
    z
}

/// Prox of `t * Σ w_i |x|_(i)` by the stack-based pool-adjacent-violators scheme.
fn prox_sorted_l1(x: &[f64], w: &[f64], t: f64) -> Vec<f64> {
    let order = order_by_magnitude(x);
    let shifted: Vec<f64> = order
        .iter()
        .zip(w)
        .map(|(&i, wi)| x[i].abs() - t * wi)
        .collect();
    // blocks of (start, end, mean) forming a nonincreasing sequence
    let mut blocks: Vec<(usize, usize, f64)> = Vec::with_capacity(shifted.len());
    for (k, &val) in shifted.iter().enumerate() {
        let mut start = k;
        let mut sum = val;
        let mut len = 1.0;
        while let Some(&(s, e, mean)) = blocks.last() {
            if mean > sum / len {
                break;
            }
            let l = (e - s) as f64;
            sum += mean * l;
            len += l;
            start = s;
            blocks.pop();
        }
        blocks.push((start, k + 1, sum / len));
    }
    let mut out = vec![0.0; x.len()];
    for (s, e, mean) in blocks {
        let value = mean.max(0.0);
        for &i in &order[s..e] {
            out[i] = sign(x[i]) * value;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn psi_examples() {
        assert_eq!(Regularizer::L1.psi(&[1.0, -2.0, 0.0]).unwrap(), 3.0);
        let slope = Regularizer::Slope {
            weights: Some(vec![2.0, 1.0]),
        };
        assert_eq!(slope.psi(&[1.0, -3.0]).unwrap(), 7.0);
        for reg in [Regularizer::None, Regularizer::L1, Regularizer::slope_default()] {
            assert_eq!(reg.psi(&[0.0; 4]).unwrap(), 0.0);
        }
    }

    #[test]
    fn slope_weight_validation() {
        let bad = Regularizer::Slope {
            weights: Some(vec![1.0, 2.0]),
        };
        assert!(bad.psi(&[1.0, 1.0]).is_err());
        let nonpositive = Regularizer::Slope {
            weights: Some(vec![1.0, 0.0]),
        };
        assert!(nonpositive.validate(2).is_err());
        let w = default_slope_weights(5);
        assert!(w.iter().all(|&x| x > 0.0));
        assert!(w.windows(2).all(|p| p[1] <= p[0]));
        assert_abs_diff_eq!(w[4], 2f64.ln().sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn soft_threshold() {
        let out = Regularizer::L1.prox(&[3.0, -0.5, -2.0, 0.0], 1.0).unwrap();
        assert_eq!(out, vec![2.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn sorted_l1_prox_with_equal_weights_is_soft_threshold() {
        let slope = Regularizer::Slope {
            weights: Some(vec![1.0; 4]),
        };
        let x = [3.0, -0.5, -2.0, 0.25];
        assert_eq!(
            slope.prox(&x, 0.7).unwrap(),
            Regularizer::L1.prox(&x, 0.7).unwrap()
        );
    }

    #[test]
    fn sorted_l1_prox_pools_violators() {
        // |x| = (3, 2.9), w = (2, 1), t = 1: shifted (1, 1.9) violates order -> pooled 1.45
        let slope = Regularizer::Slope {
            weights: Some(vec![2.0, 1.0]),
        };
        let out = slope.prox(&[3.0, -2.9], 1.0).unwrap();
        assert_abs_diff_eq!(out[0], 1.45, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], -1.45, epsilon = 1e-12);
    }

    /// Brute-force the prox objective over a fine grid in two dimensions.
    #[test]
    fn sorted_l1_prox_matches_grid_minimum() {
        let w = vec![1.5, 0.5];
        let slope = Regularizer::Slope {
            weights: Some(w.clone()),
        };
        for x in [[2.0, 1.0], [0.3, -2.2], [1.0, 1.0], [-0.2, 0.1]] {
            let t = 0.8;
            let objective = |u: [f64; 2]| {
                0.5 * ((u[0] - x[0]).powi(2) + (u[1] - x[1]).powi(2))
                    + t * slope.psi(&u).unwrap()
            };
            let mut best = (f64::INFINITY, [0.0, 0.0]);
            for a in -300..=300 {
                for b in -300..=300 {
                    let u = [a as f64 * 0.01, b as f64 * 0.01];
                    let v = objective(u);
                    if v < best.0 {
                        best = (v, u);
                    }
                }
            }
            let p = slope.prox(&x, t).unwrap();
            assert!(objective([p[0], p[1]]) <= best.0 + 1e-12);
            assert_abs_diff_eq!(p[0], best.1[0], epsilon = 0.011);
            assert_abs_diff_eq!(p[1], best.1[1], epsilon = 0.011);
        }
    }

    #[test]
    fn norming_functionals_norm_their_primal() {
        let v = [0.0, 2.0, -2.0, 0.5, 0.0];
        let dir = [1.0, -1.0, 3.0, 0.0, -4.0];
        for reg in [Regularizer::L1, Regularizer::slope_default()] {
            let z = reg.norming_functional(&v, &dir).unwrap();
            assert_abs_diff_eq!(reg.dual_norm(&z).unwrap(), 1.0, epsilon = 1e-12);
            let zv: f64 = z.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(zv, reg.psi(&v).unwrap(), epsilon = 1e-12);
        }
        let z = Regularizer::L1.norming_functional(&v, &dir).unwrap();
        assert_eq!(z, vec![1.0, 1.0, -1.0, 1.0, -1.0]);
    }

    proptest! {
        #[test]
        fn norm_axioms(
            a in prop::collection::vec(-10.0..10.0f64, 6),
            b in prop::collection::vec(-10.0..10.0f64, 6),
            s in -5.0..5.0f64,
        ) {
            for reg in [Regularizer::L1, Regularizer::slope_default()] {
                let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                let scaled: Vec<f64> = a.iter().map(|x| s * x).collect();
                let pa = reg.psi(&a).unwrap();
                prop_assert!(reg.psi(&sum).unwrap() <= pa + reg.psi(&b).unwrap() + 1e-10);
                prop_assert!((reg.psi(&scaled).unwrap() - s.abs() * pa).abs() <= 1e-10 * (1.0 + pa));
            }
        }

        #[test]
        fn dual_pairing_bounded_by_norms(
            v in prop::collection::vec(-10.0..10.0f64, 5),
            dir in prop::collection::vec(-10.0..10.0f64, 5),
            x in prop::collection::vec(-10.0..10.0f64, 5),
        ) {
            for reg in [Regularizer::L1, Regularizer::slope_default()] {
                let z = reg.norming_functional(&v, &dir).unwrap();
                let zx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
                prop_assert!(zx <= reg.psi(&x).unwrap() + 1e-9);
            }
        }

        #[test]
        fn prox_is_optimal_against_perturbations(
            x in prop::collection::vec(-5.0..5.0f64, 4),
            t in 0.01..2.0f64,
            dirs in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 8),
        ) {
            for reg in [Regularizer::L1, Regularizer::slope_default()] {
                let p = reg.prox(&x, t).unwrap();
                let obj = |u: &[f64]| {
                    0.5 * u.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                        + t * reg.psi(u).unwrap()
                };
                let base = obj(&p);
                for d in &dirs {
                    let q: Vec<f64> = p.iter().zip(d).map(|(a, b)| a + 1e-3 * b).collect();
                    prop_assert!(obj(&q) >= base - 1e-12);
                }
            }
        }
    }
}
