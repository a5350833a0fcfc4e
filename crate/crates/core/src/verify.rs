//! Numerical checks of the block conditions, the risk bounds and the
//! regularization lemma, plus a sampled estimate of `Δ_F(ρ, r)`.
//!
//! Condition and theorem checks are empirical: a finite probe set can only
//! under-verify statements quantified over all of `F`, so reports carry probe
//! counts and make no uniform claim. The lemma check is different: it tests a
//! deterministic implication block by block, and any violation is a bug.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block_stats::{block_increment, median, multiplier_component, quad_component};
use crate::error::{check_dim, config_err, MomError, Result};
use crate::model::{population_l2_distance, BlockPartition, Dataset, DesignSpec, LinearPredictor};
use crate::numeric::{derive_seed, dot, rng_from, sub};
use crate::objective::ConditionParams;
use crate::regularizer::Regularizer;

/// Default fraction of blocks required by a condition check.
pub const DEFAULT_BLOCK_THRESHOLD: f64 = 0.9;

const REL_TOL: f64 = 1e-9;

/// `lhs ≥ rhs` up to a relative tolerance.
fn geq(lhs: f64, rhs: f64) -> bool {
    lhs >= rhs - REL_TOL * lhs.abs().max(rhs.abs()).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// `B_{f,f*}(j) ≥ γ1 ‖f − f*‖²` for far probes.
    Quadratic,
    /// `|M_{f,f*}(j) − E M| ≤ γ2 r²` for near probes.
    Multiplier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub index: usize,
    pub distance: f64,
    /// Fraction of blocks where the inequality holds.
    pub fraction: f64,
    pub passed: bool,
    /// Median over blocks of the margin `lhs − rhs`; nonnegative means the median block satisfies it.
    pub median_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub kind: ConditionKind,
    pub threshold: f64,
    pub probes: Vec<ProbeResult>,
}

impl ConditionReport {
    pub fn probe_count(&self) -> usize {
        self.probes.len()
    }

    pub fn all_passed(&self) -> bool {
        self.probes.iter().all(|p| p.passed)
    }

    pub fn min_fraction(&self) -> f64 {
        self.probes.iter().map(|p| p.fraction).fold(1.0, f64::min)
    }

    pub fn mean_fraction(&self) -> f64 {
        if self.probes.is_empty() {
            return 1.0;
        }
        self.probes.iter().map(|p| p.fraction).sum::<f64>() / self.probes.len() as f64
    }

    /// Whenever more than half of the blocks satisfy the inequality, so does the median.
    pub fn majority_consistent(&self) -> bool {
        self.probes
            .iter()
            .all(|p| p.fraction <= 0.5 || p.median_margin >= 0.0)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(config_err("block threshold must lie in [0, 1]"));
    }
    Ok(())
}

fn probe_result(index: usize, distance: f64, margins: &[f64], threshold: f64) -> Result<ProbeResult> {
    let fraction = margins.iter().filter(|&&m| m >= 0.0).count() as f64 / margins.len() as f64;
    Ok(ProbeResult {
        index,
        distance,
        fraction,
        passed: fraction >= threshold,
        median_margin: median(margins)?,
    })
}

/// Per probe, the fraction of blocks with `B_{f,f*}(j) ≥ γ1 ‖f − f*‖²`.
#[allow(clippy::too_many_arguments)]
pub fn check_condition_one(
    data: &Dataset,
    p: &BlockPartition,
    f_star: &LinearPredictor,
    probes: &[LinearPredictor],
    gamma1: f64,
    r: f64,
    design: &DesignSpec,
    threshold: f64,
) -> Result<ConditionReport> {
    check_threshold(threshold)?;
    let results: Vec<Result<ProbeResult>> = probes
        .par_iter()
        .enumerate()
        .map(|(index, f)| {
            let distance = population_l2_distance(f, f_star, design)?;
            if distance < r * (1.0 - REL_TOL) {
                return Err(MomError::ProbeOutOfRegime {
                    index,
                    distance,
                    regime: format!("quadratic condition needs distance >= {r}"),
                });
            }
            let bound = gamma1 * distance * distance;
            let b = block_increment(f, f_star, data, p)?;
            let margins: Vec<f64> = b.values().iter().map(|v| v - bound).collect();
            probe_result(index, distance, &margins, threshold)
        })
        .collect();
    Ok(ConditionReport {
        kind: ConditionKind::Quadratic,
        threshold,
        probes: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Per probe, the fraction of blocks with `|M_{f,f*}(j) − E M_{f,f*}| ≤ γ2 r²`.
///
/// `expected_multiplier[k]` is `E M` for probe `k`; it is zero in a well-specified
/// model, where `f*` is the regression function.
#[allow(clippy::too_many_arguments)]
pub fn check_condition_two(
    data: &Dataset,
    p: &BlockPartition,
    f_star: &LinearPredictor,
    probes: &[LinearPredictor],
    gamma2: f64,
    r: f64,
    expected_multiplier: &[f64],
    design: &DesignSpec,
    threshold: f64,
) -> Result<ConditionReport> {
    check_threshold(threshold)?;
    check_dim(probes.len(), expected_multiplier.len())?;
    let bound = gamma2 * r * r;
    let results: Vec<Result<ProbeResult>> = probes
        .par_iter()
        .zip(expected_multiplier)
        .enumerate()
        .map(|(index, (f, &em))| {
            let distance = population_l2_distance(f, f_star, design)?;
            if distance >= r {
                return Err(MomError::ProbeOutOfRegime {
                    index,
                    distance,
                    regime: format!("multiplier condition needs distance < {r}"),
                });
            }
            let m = multiplier_component(f, f_star, data, p)?;
            let margins: Vec<f64> = m.values().iter().map(|v| bound - (v - em).abs()).collect();
            probe_result(index, distance, &margins, threshold)
        })
        .collect();
    Ok(ConditionReport {
        kind: ConditionKind::Multiplier,
        threshold,
        probes: results.into_iter().collect::<Result<_>>()?,
    })
}

/// `count` predictors at exact population distance `radius` from `center`.
///
/// Directions are uniform on the whitened sphere: `θ = center + L⁻ᵀ (radius · z/‖z‖)`.
pub fn sphere_probes(
    center: &LinearPredictor,
    design: &DesignSpec,
    radius: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<LinearPredictor>> {
    check_dim(design.dim(), center.dim())?;
    let d = design.dim();
    let lt = design.cholesky().l().transpose();
    let mut rng = rng_from(seed);
    (0..count)
        .map(|_| {
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let w = z.normalize() * radius;
            let v = lt
                .solve_upper_triangular(&w)
                .ok_or_else(|| config_err("singular covariance factor"))?;
            LinearPredictor::new(center.theta().iter().zip(v.iter()).map(|(a, b)| a + b).collect())
        })
        .collect()
}

/// `(θ̂ − θ*)ᵀ Σ (θ̂ − θ*)`, the excess risk in a well-specified linear model.
pub fn excess_risk(theta_hat: &[f64], theta_star: &[f64], design: &DesignSpec) -> Result<f64> {
    check_dim(theta_star.len(), theta_hat.len())?;
    Ok(design.quadratic_form(&sub(theta_hat, theta_star))?.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Diagnostic {
    pub distance: f64,
    pub excess_risk: f64,
    pub radius_bound: f64,
    pub risk_bound: f64,
    pub within_radius: bool,
    pub within_risk: bool,
    pub passed: bool,
    /// Every supplied condition report passed.
    pub conditions_held: bool,
    /// A failure is only informative when the conditions held.
    pub meaningful_failure: bool,
}

/// Checks `‖f̂ − f*‖ ≤ r` and excess risk `≤ (1 + 2γ2) r²`.
pub fn theorem1_check(
    theta_hat: &[f64],
    theta_star: &[f64],
    design: &DesignSpec,
    params: &ConditionParams,
    reports: &[ConditionReport],
) -> Result<Theorem1Diagnostic> {
    params.validate()?;
    if params.gamma1 <= params.gamma2 {
        return Err(MomError::HypothesisViolated(format!(
            "need gamma1 > gamma2, got {} <= {}",
            params.gamma1, params.gamma2
        )));
    }
    let risk = excess_risk(theta_hat, theta_star, design)?;
    let distance = risk.sqrt();
    let radius_bound = params.r;
    let risk_bound = (1.0 + 2.0 * params.gamma2) * params.r * params.r;
    let within_radius = distance <= radius_bound;
    let within_risk = risk <= risk_bound;
    let passed = within_radius && within_risk;
    let conditions_held = reports.iter().all(ConditionReport::all_passed);
    Ok(Theorem1Diagnostic {
        distance,
        excess_risk: risk,
        radius_bound,
        risk_bound,
        within_radius,
        within_risk,
        passed,
        conditions_held,
        meaningful_failure: !passed && conditions_held,
    })
}

/// Slack constants for the regularized bounds, which are only known up to constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for SlackConstants {
    fn default() -> Self {
        Self {
            c1: 10.0,
            c2: 10.0,
            c3: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Diagnostic {
    pub psi_error: f64,
    pub distance: f64,
    pub excess_risk: f64,
    pub within_psi: bool,
    pub within_radius: bool,
    pub within_risk: bool,
    pub passed: bool,
}

/// Checks `Ψ(f̂_λ − f*) ≤ c1 ρ`, `‖f̂_λ − f*‖ ≤ c2 r` and excess risk `≤ c3 r²`.
pub fn theorem2_check(
    theta_hat: &[f64],
    theta_star: &[f64],
    design: &DesignSpec,
    params: &ConditionParams,
    reg: &Regularizer,
    slack: &SlackConstants,
) -> Result<Theorem2Diagnostic> {
    params.validate()?;
    let diff = sub(theta_hat, theta_star);
    let psi_error = reg.psi(&diff)?;
    let risk = excess_risk(theta_hat, theta_star, design)?;
    let distance = risk.sqrt();
    let within_psi = psi_error <= slack.c1 * params.rho;
    let within_radius = distance <= slack.c2 * params.r;
    let within_risk = risk <= slack.c3 * params.r * params.r;
    Ok(Theorem2Diagnostic {
        psi_error,
        distance,
        excess_risk: risk,
        within_psi,
        within_radius,
        within_risk,
        passed: within_psi && within_radius && within_risk,
    })
}

/// A unit dual-norm functional `z` with `z(primal) = Ψ(primal)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormingFunctional {
    pub z: Vec<f64>,
    pub primal: Vec<f64>,
}

impl NormingFunctional {
    /// The norming functional of `primal` that is largest along `direction`.
    pub fn along(reg: &Regularizer, primal: &[f64], direction: &[f64]) -> Result<Self> {
        Ok(Self {
            z: reg.norming_functional(primal, direction)?,
            primal: primal.to_vec(),
        })
    }

    pub fn apply(&self, w: &[f64]) -> f64 {
        dot(&self.z, w)
    }
}

/// Decomposition `center = u + v` with `Ψ(u) ≤ budget` and a norming functional of `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormingWitness {
    pub functional: NormingFunctional,
    pub u: Vec<f64>,
    /// `z(direction)`.
    pub value: f64,
}

/// Searches points `v` with `Ψ(center − v) ≤ budget` for a norming functional
/// maximizing `z(direction)`.
///
/// Candidates are `v = center` and copies of `center` with coordinates zeroed,
/// either greedily by gain per unit cost along `direction` or from the smallest
/// magnitude up.
pub fn best_norming(
    reg: &Regularizer,
    center: &[f64],
    direction: &[f64],
    budget: f64,
) -> Result<NormingWitness> {
    check_dim(center.len(), direction.len())?;
    if reg.is_none() {
        return Err(config_err("norming functionals need a norm"));
    }
    let d = center.len();
    let mut candidates: Vec<Vec<f64>> = vec![center.to_vec()];

    let zeroing = |order: &[usize], keep_prefixes: bool, out: &mut Vec<Vec<f64>>| -> Result<()> {
        let mut v = center.to_vec();
        for &i in order {
            let saved = v[i];
            v[i] = 0.0;
            if reg.psi(&sub(center, &v))? <= budget {
                if keep_prefixes {
                    out.push(v.clone());
                }
            } else {
                v[i] = saved;
            }
        }
        if !keep_prefixes {
            out.push(v);
        }
        Ok(())
    };

    let mut by_ratio: Vec<(usize, f64)> = (0..d)
        .filter(|&i| center[i] != 0.0)
        .map(|i| {
            let gain = direction[i].abs() - center[i].signum() * direction[i];
            (i, gain / center[i].abs())
        })
        .filter(|&(_, ratio)| ratio > 0.0)
        .collect();
    by_ratio.sort_by(|a, b| b.1.total_cmp(&a.1));
    let order: Vec<usize> = by_ratio.iter().map(|&(i, _)| i).collect();
    zeroing(&order, false, &mut candidates)?;

    let mut by_size: Vec<usize> = (0..d).filter(|&i| center[i] != 0.0).collect();
    by_size.sort_by(|&a, &b| center[a].abs().total_cmp(&center[b].abs()));
    zeroing(&by_size, true, &mut candidates)?;

    let mut best: Option<NormingWitness> = None;
    for v in candidates {
        let functional = NormingFunctional::along(reg, &v, direction)?;
        let value = functional.apply(direction);
        if best.as_ref().is_none_or(|b| value > b.value) {
            best = Some(NormingWitness {
                u: sub(center, &v),
                functional,
                value,
            });
        }
    }
    Ok(best.expect("center is always a candidate"))
}

/// A random direction with `Ψ(w) = 1` supported on `k` uniformly chosen coordinates, `k ∈ 1..=d`.
pub fn random_unit_direction<R: Rng>(reg: &Regularizer, dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    loop {
        let k = rng.random_range(1..=dim);
        let support = rand::seq::index::sample(rng, dim, k);
        let mut w = vec![0.0; dim];
        for i in support.iter() {
            w[i] = rng.sample(StandardNormal);
        }
        let norm = reg.psi(&w)?;
        if norm > 0.0 && norm.is_finite() {
            w.iter_mut().for_each(|v| *v /= norm);
            return Ok(w);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBudget {
    /// Directions sampled per center.
    pub samples: usize,
    /// Centers `f`: `f*` itself plus `centers − 1` perturbations with `Ψ(f − f*) ≤ ρ/40`.
    pub centers: usize,
}

impl Default for DeltaBudget {
    fn default() -> Self {
        Self {
            samples: 2000,
            centers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    /// Minimum over feasible samples; `None` when infeasible.
    pub estimate: Option<f64>,
    pub feasible_samples: usize,
    pub attempted: usize,
    pub infeasible: bool,
    /// `h − f` at the minimizing sample.
    pub worst_direction: Option<Vec<f64>>,
}

/// Sampled estimate of `Δ_F(ρ, r)`: the minimum over sampled `f` near `f*` and
/// `h` with `Ψ(h − f) = ρ`, `‖h − f‖ ≤ r` of the best `z(h − f)` over norming
/// functionals of points within `Ψ`-distance `ρ/20` of `f`.
///
/// Samples do not depend on `r`, so estimates with a shared seed are
/// nonincreasing in `r`.
pub fn estimate_delta(
    reg: &Regularizer,
    f_star: &LinearPredictor,
    rho: f64,
    r: f64,
    design: &DesignSpec,
    budget: &DeltaBudget,
    seed: u64,
) -> Result<DeltaEstimate> {
    if reg.is_none() {
        return Err(config_err("estimate_delta needs an l1 or slope regularizer"));
    }
    reg.validate(f_star.dim())?;
    check_dim(design.dim(), f_star.dim())?;
    if budget.samples == 0 || budget.centers == 0 {
        return Err(config_err("delta budget must be positive"));
    }
    let attempted = budget.samples * budget.centers;
    if !(rho > 0.0 && r > 0.0) {
        return Ok(DeltaEstimate {
            estimate: None,
            feasible_samples: 0,
            attempted,
            infeasible: true,
            worst_direction: None,
        });
    }
    let d = f_star.dim();
    let centers: Vec<Vec<f64>> = (0..budget.centers)
        .map(|c| -> Result<Vec<f64>> {
            if c == 0 {
                return Ok(f_star.theta().to_vec());
            }
            let mut rng = rng_from(derive_seed(seed, c as u64));
            let w = random_unit_direction(reg, d, &mut rng)?;
            let t = rng.random::<f64>() * rho / 40.0;
            Ok(f_star.theta().iter().zip(&w).map(|(a, b)| a + t * b).collect())
        })
        .collect::<Result<_>>()?;

    let results: Vec<Result<Option<(f64, Vec<f64>)>>> = (0..attempted)
        .into_par_iter()
        .map(|k| {
            let center = &centers[k / budget.samples];
            let mut rng = rng_from(derive_seed(seed ^ 0x5eed_de17a, k as u64));
            let w: Vec<f64> = random_unit_direction(reg, d, &mut rng)?
                .into_iter()
                .map(|v| v * rho)
                .collect();
            if design.quadratic_form(&w)?.sqrt() > r {
                return Ok(None);
            }
            let witness = best_norming(reg, center, &w, rho / 20.0)?;
            Ok(Some((witness.value, w)))
        })
        .collect();

    let mut feasible = 0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for res in results {
        if let Some((value, w)) = res? {
            feasible += 1;
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, w));
            }
        }
    }
    Ok(DeltaEstimate {
        estimate: best.as_ref().map(|(v, _)| *v),
        feasible_samples: feasible,
        attempted,
        infeasible: best.is_none(),
        worst_direction: best.map(|(_, w)| w),
    })
}

/// Which set of lemma hypotheses a probe `h` is meant to occupy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaRegime {
    /// `Ψ(h − f*) ≤ ρ` and `‖h − f*‖ ≥ r`; per block `B ≥ γ1 ‖h − f*‖²`.
    Far,
    /// `Ψ(h − f*) = ρ` and `‖h − f*‖ < r`; per block `|M − E M| ≤ γ2 r²`, `E M ≥ 0`.
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaProbe {
    pub h: LinearPredictor,
    pub regime: LemmaRegime,
    /// When set, the checked point is `f* + α (h − f*)` with `α > 1`.
    #[serde(default)]
    pub alpha: Option<f64>,
}

/// Fixed inputs of a lemma check.
#[derive(Debug, Clone)]
pub struct LemmaSetup<'a> {
    pub data: &'a Dataset,
    pub partition: &'a BlockPartition,
    pub f_star: &'a LinearPredictor,
    pub design: &'a DesignSpec,
    pub params: ConditionParams,
    pub lambda: f64,
    pub regularizer: &'a Regularizer,
    /// `E M_{h,f*}`; zero in a well-specified model.
    pub expected_multiplier: f64,
    /// Test hook: use `−λ` in every conclusion. A correct checker must then report violations.
    pub flip_regularizer_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaViolation {
    pub probe: usize,
    pub block: usize,
    pub regime: LemmaRegime,
    pub alpha: Option<f64>,
    pub step: String,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub probes: usize,
    /// Probes whose probe-level hypotheses (regime and norming) hold.
    pub probes_in_hypothesis: usize,
    /// (probe, block) pairs where the per-block hypotheses hold and conclusions were checked.
    pub pairs_checked: usize,
    pub violations: Vec<LemmaViolation>,
}

impl LemmaReport {
    pub fn merge(&mut self, other: LemmaReport) {
        let offset = self.probes;
        self.probes += other.probes;
        self.probes_in_hypothesis += other.probes_in_hypothesis;
        self.pairs_checked += other.pairs_checked;
        self.violations.extend(other.violations.into_iter().map(|mut v| {
            v.probe += offset;
            v
        }));
    }
}

struct ProbeOutcome {
    in_hypothesis: bool,
    pairs: usize,
    violations: Vec<LemmaViolation>,
}

/// Checks the regularization lemma on every (probe, block) pair whose hypotheses hold.
///
/// Far probes: `B + λ(Ψ(h) − Ψ(f*)) ≥ (γ1/2)‖h − f*‖²`.
/// Sphere probes (with a norming functional `z` of some `v`, `Ψ(f* − v) ≤ ρ/20`,
/// and `z(h − f*) ≥ 4ρ/5`): the chain `B ≥ M ≥ −γ2 r²`,
/// `Ψ(h) − Ψ(f*) ≥ z(h − f*) − 2Ψ(u) ≥ 7ρ/10` and the conclusion `≥ γ2 r²/2`.
/// Scaled probes `f = f* + α(h − f*)`: `B_f = α² Q_h + α M_h`,
/// `Ψ(f) − Ψ(f*) ≥ α(Ψ(h) − Ψ(f*))`, and the conclusion `≥ α (γ1/2)‖h − f*‖²`
/// (far) or `≥ α γ2 r²` (sphere).
pub fn lemma_reg_check(probes: &[LemmaProbe], setup: &LemmaSetup) -> Result<LemmaReport> {
    let window = setup.params.lambda_window()?;
    if !window.contains(setup.lambda) {
        return Err(config_err(format!(
            "lambda {} outside window [{}, {}]",
            setup.lambda, window.min, window.max
        )));
    }
    if setup.regularizer.is_none() {
        return Err(config_err("lemma check needs a regularizer"));
    }
    check_dim(setup.data.dim(), setup.f_star.dim())?;
    setup.partition.check_dataset(setup.data)?;

    let outcomes: Vec<Result<ProbeOutcome>> = probes
        .par_iter()
        .enumerate()
        .map(|(k, probe)| check_probe(k, probe, setup))
        .collect();
    let mut report = LemmaReport {
        probes: probes.len(),
        ..LemmaReport::default()
    };
    for o in outcomes {
        let o = o?;
        report.probes_in_hypothesis += usize::from(o.in_hypothesis);
        report.pairs_checked += o.pairs;
        report.violations.extend(o.violations);
    }
    Ok(report)
}

fn check_probe(index: usize, probe: &LemmaProbe, s: &LemmaSetup) -> Result<ProbeOutcome> {
    let ConditionParams {
        gamma1,
        gamma2,
        r,
        rho,
    } = s.params;
    let reg = s.regularizer;
    let h = &probe.h;
    let f_star = s.f_star;
    let diff = h.difference(f_star)?;
    let psi_gap = reg.psi(&diff)?;
    let distance = population_l2_distance(h, f_star, s.design)?;
    let out_of_regime = |why: &str| MomError::ProbeOutOfRegime {
        index,
        distance,
        regime: why.to_string(),
    };
    match probe.regime {
        LemmaRegime::Far => {
            if !geq(rho, psi_gap) || !geq(distance, r) {
                return Err(out_of_regime("far probes need psi(h - f*) <= rho and distance >= r"));
            }
        }
        LemmaRegime::Sphere => {
            if (psi_gap - rho).abs() > REL_TOL * rho || distance >= r {
                return Err(out_of_regime("sphere probes need psi(h - f*) = rho and distance < r"));
            }
        }
    }
    if let Some(alpha) = probe.alpha {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(config_err("scaling factor must exceed 1"));
        }
    }

    let psi_h = reg.psi(h.theta())?;
    let psi_star = reg.psi(f_star.theta())?;
    let mut witness = None;
    if probe.regime == LemmaRegime::Sphere {
        let w = best_norming(reg, f_star.theta(), &diff, rho / 20.0)?;
        if w.value < 0.8 * rho {
            return Ok(ProbeOutcome {
                in_hypothesis: false,
                pairs: 0,
                violations: Vec::new(),
            });
        }
        witness = Some(w);
    }

    let lambda = if s.flip_regularizer_sign {
        -s.lambda
    } else {
        s.lambda
    };
    let b = block_increment(h, f_star, s.data, s.partition)?;
    let q = quad_component(h, f_star, s.data, s.partition)?;
    let m = multiplier_component(h, f_star, s.data, s.partition)?;

    let scaled = match probe.alpha {
        Some(alpha) => {
            let f = f_star.combine(1.0 - alpha, h, alpha)?;
            let bf = block_increment(&f, f_star, s.data, s.partition)?;
            Some((alpha, reg.psi(f.theta())?, bf))
        }
        None => None,
    };

    let mut violations = Vec::new();
    let mut pairs = 0;
    let mut check = |block: usize, step: &str, lhs: f64, rhs: f64| {
        if !geq(lhs, rhs) {
            violations.push(LemmaViolation {
                probe: index,
                block,
                regime: probe.regime,
                alpha: probe.alpha,
                step: step.to_string(),
                lhs,
                rhs,
            });
        }
    };

    for j in 0..s.partition.len() {
        let (bj, qj, mj) = (b.values()[j], q.values()[j], m.values()[j]);
        let hypothesis = match probe.regime {
            LemmaRegime::Far => bj >= gamma1 * distance * distance,
            LemmaRegime::Sphere => {
                s.expected_multiplier >= 0.0 && (mj - s.expected_multiplier).abs() <= gamma2 * r * r
            }
        };
        if !hypothesis {
            continue;
        }
        pairs += 1;
        let base_bound = match probe.regime {
            LemmaRegime::Far => {
                check(j, "triangle inequality", psi_h - psi_star, -psi_gap);
                0.5 * gamma1 * distance * distance
            }
            LemmaRegime::Sphere => {
                let w = witness.as_ref().expect("sphere probes carry a witness");
                let psi_u = reg.psi(&w.u)?;
                check(j, "quadratic part nonnegative", bj, mj);
                check(j, "multiplier floor", mj, -gamma2 * r * r);
                check(j, "norming split", psi_h - psi_star, w.value - 2.0 * psi_u);
                check(j, "regularizer gain", psi_h - psi_star, 0.7 * rho);
                gamma2 * r * r
            }
        };
        match &scaled {
            None => {
                let bound = match probe.regime {
                    LemmaRegime::Far => base_bound,
                    LemmaRegime::Sphere => 0.5 * base_bound,
                };
                check(j, "conclusion", bj + lambda * (psi_h - psi_star), bound);
            }
            Some((alpha, psi_f, bf)) => {
                let bfj = bf.values()[j];
                let identity = alpha * alpha * qj + alpha * mj;
                let scale = bfj.abs().max(identity.abs()).max(1.0);
                if (bfj - identity).abs() > REL_TOL * scale {
                    check(j, "scaling identity", -(bfj - identity).abs(), 0.0);
                }
                check(j, "convexity", psi_f - psi_star, alpha * (psi_h - psi_star));
                check(
                    j,
                    "conclusion",
                    bfj + lambda * (psi_f - psi_star),
                    alpha * base_bound,
                );
            }
        }
    }
    Ok(ProbeOutcome {
        in_hypothesis: true,
        pairs,
        violations,
    })
}

/// Random probes for the lemma: far probes by rejection on `Ψ`-directions, sphere
/// probes on `{Ψ(h − f*) = ρ}` inside the radius, each optionally scaled by one of `alphas`.
///
/// Returns fewer than `count` probes when rejection sampling fails repeatedly.
pub fn lemma_probes(
    f_star: &LinearPredictor,
    design: &DesignSpec,
    params: &ConditionParams,
    reg: &Regularizer,
    count: usize,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<LemmaProbe>> {
    let d = f_star.dim();
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 200 * count.max(1) {
        attempts += 1;
        let w = random_unit_direction(reg, d, &mut rng)?;
        let sigma_norm = design.quadratic_form(&w)?.sqrt();
        let regime = if rng.random::<bool>() {
            LemmaRegime::Far
        } else {
            LemmaRegime::Sphere
        };
        let t = match regime {
            LemmaRegime::Far => {
                let t_min = params.r / sigma_norm;
                if t_min > params.rho {
                    continue;
                }
                // stay strictly inside both constraints after rounding
                let t = t_min + rng.random::<f64>() * (params.rho - t_min);
                t.clamp(t_min * (1.0 + 1e-12), params.rho * (1.0 - 1e-12))
            }
            LemmaRegime::Sphere => {
                if params.rho * sigma_norm >= params.r * (1.0 - 1e-9) {
                    continue;
                }
                params.rho
            }
        };
        if regime == LemmaRegime::Far && t * sigma_norm < params.r {
            continue;
        }
        let h = LinearPredictor::new(f_star.theta().iter().zip(&w).map(|(a, b)| a + t * b).collect())?;
        let alpha = if alphas.is_empty() || rng.random::<bool>() {
            None
        } else {
            Some(alphas[rng.random_range(0..alphas.len())])
        };
        out.push(LemmaProbe { h, regime, alpha });
    }
    Ok(out)
}

/// One row of a condition sweep over radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: f64,
    pub quadratic_min_fraction: f64,
    pub quadratic_mean_fraction: f64,
    pub multiplier_min_fraction: f64,
    pub multiplier_mean_fraction: f64,
}

/// Fractions of both conditions over an `r`-grid: far probes at distance `r`,
/// near probes at `r/2`, with directions shared across the grid.
#[allow(clippy::too_many_arguments)]
pub fn condition_sweep(
    data: &Dataset,
    p: &BlockPartition,
    f_star: &LinearPredictor,
    design: &DesignSpec,
    gamma1: f64,
    gamma2: f64,
    r_grid: &[f64],
    probes: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let unit = sphere_probes(&LinearPredictor::zeros(f_star.dim()), design, 1.0, probes, seed)?;
    r_grid
        .iter()
        .map(|&r| {
            let at = |scale: f64| -> Result<Vec<LinearPredictor>> {
                unit.iter()
                    .map(|u| f_star.combine(1.0, u, scale))
                    .collect()
            };
            let far = at(r)?;
            let near = at(0.5 * r)?;
            let one = check_condition_one(data, p, f_star, &far, gamma1, r, design, DEFAULT_BLOCK_THRESHOLD)?;
            let zeros = vec![0.0; near.len()];
            let two = check_condition_two(data, p, f_star, &near, gamma2, r, &zeros, design, DEFAULT_BLOCK_THRESHOLD)?;
            Ok(SweepRow {
                r,
                quadratic_min_fraction: one.min_fraction(),
                quadratic_mean_fraction: one.mean_fraction(),
                multiplier_min_fraction: two.min_fraction(),
                multiplier_mean_fraction: two.mean_fraction(),
            })
        })
        .collect()
}

/// A random setting for the lemma: design, data, `f*`, constants inside the λ-window, and one probe.
#[derive(Debug, Clone)]
pub struct LemmaInstance {
    pub data: Dataset,
    pub partition: BlockPartition,
    pub f_star: LinearPredictor,
    pub design: DesignSpec,
    pub params: ConditionParams,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub probes: Vec<LemmaProbe>,
}

impl LemmaInstance {
    pub fn setup(&self, flip_regularizer_sign: bool) -> LemmaSetup<'_> {
        LemmaSetup {
            data: &self.data,
            partition: &self.partition,
            f_star: &self.f_star,
            design: &self.design,
            params: self.params,
            lambda: self.lambda,
            regularizer: &self.regularizer,
            expected_multiplier: 0.0,
            flip_regularizer_sign,
        }
    }
}

/// Draws a well-specified random instance with `d ∈ 2..=6`, sparse `f*`, ℓ1 or SLOPE,
/// and `λ` uniform in the window. `probes` may be empty when rejection sampling fails.
pub fn random_lemma_instance(seed: u64, alphas: &[f64]) -> Result<LemmaInstance> {
    use crate::datagen::{generate, NoiseSpec};

    let mut rng = rng_from(seed);
    let d = rng.random_range(2..=6usize);
    let regularizer = if rng.random::<bool>() {
        Regularizer::L1
    } else {
        Regularizer::slope_default()
    };
    let mut theta = vec![0.0; d];
    let s = rng.random_range(1..=(d / 2).max(1));
    for i in rand::seq::index::sample(&mut rng, d, s).iter() {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        theta[i] = sign * rng.random_range(0.5..2.0);
    }
    let noise = NoiseSpec::gaussian(rng.random_range(0.05..0.5));
    let design = if rng.random::<bool>() {
        DesignSpec::identity(d, noise.variance())?
    } else {
        let a = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cov = &a * a.transpose() / d as f64 + nalgebra::DMatrix::identity(d, d) * 0.5;
        let cov = (&cov + cov.transpose()) * 0.5;
        DesignSpec::from_matrix(cov, noise.variance())?
    };
    let samples = rng.random_range(100..=600usize);
    let blocks = 2 * rng.random_range(2..=15usize) + 1;
    let data = generate(samples, d, &theta, &design, &noise, derive_seed(seed, 1))?;
    let partition = BlockPartition::new(samples, blocks)?;

    let r = rng.random_range(0.2..1.0);
    let rho = r * rng.random_range(1.0..2.0);
    let gamma1 = rng.random_range(0.05..1.0);
    let gamma2 = gamma1 / 6.0 * rng.random_range(0.1..1.0);
    let params = ConditionParams::new(gamma1, gamma2, r, rho)?;
    let window = params.lambda_window()?;
    let lambda = window.min + rng.random::<f64>() * (window.max - window.min);
    let f_star = LinearPredictor::new(theta)?;
    let probes = lemma_probes(&f_star, &design, &params, &regularizer, 1, alphas, derive_seed(seed, 2))?;
    Ok(LemmaInstance {
        data,
        partition,
        f_star,
        design,
        params,
        lambda,
        regularizer,
        probes,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaSweepReport {
    /// Instances whose probe-level hypotheses held.
    pub instances: usize,
    pub attempts: usize,
    pub scaled_instances: usize,
    pub pairs_checked: usize,
    pub violation_count: usize,
    /// The first few violations, for inspection.
    pub violations: Vec<LemmaViolation>,
}

const KEPT_VIOLATIONS: usize = 50;

/// Runs [`lemma_reg_check`] on random instances until `instances` of them satisfy
/// the probe-level hypotheses (or `50 × instances` attempts were made).
pub fn lemma_sweep(instances: usize, alphas: &[f64], flip_regularizer_sign: bool, seed: u64) -> Result<LemmaSweepReport> {
    let mut report = LemmaSweepReport::default();
    let max_attempts = 50 * instances.max(1);
    let batch = instances.max(16);
    while report.instances < instances && report.attempts < max_attempts {
        let start = report.attempts;
        let outcomes: Vec<Result<(LemmaReport, bool)>> = (start..start + batch)
            .into_par_iter()
            .map(|k| {
                let inst = random_lemma_instance(derive_seed(seed, k as u64), alphas)?;
                let scaled = inst.probes.iter().any(|p| p.alpha.is_some());
                Ok((lemma_reg_check(&inst.probes, &inst.setup(flip_regularizer_sign))?, scaled))
            })
            .collect();
        for outcome in outcomes {
            if report.instances >= instances {
                break;
            }
            report.attempts += 1;
            let (lemma, scaled) = outcome?;
            if lemma.probes_in_hypothesis == 0 {
                continue;
            }
            report.instances += 1;
            report.scaled_instances += usize::from(scaled);
            report.pairs_checked += lemma.pairs_checked;
            report.violation_count += lemma.violations.len();
            let room = KEPT_VIOLATIONS.saturating_sub(report.violations.len());
            report.violations.extend(lemma.violations.into_iter().take(room));
        }
    }
    Ok(report)
}
