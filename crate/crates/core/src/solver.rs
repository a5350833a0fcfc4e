//! Fitting procedures.
//!
//! [`mom_minimax_fit`] runs alternating descent–ascent on the median block:
//! the adversary `g` and the learner `f` each take a gradient step on their own
//! squared loss over the block attaining `Med(B_{f,g})`, followed by the proximal
//! map of `λΨ`. Because the scheme has no monotonicity guarantee, iterates are
//! audited with [`phi_lambda_hat`] and the best audited iterate is returned.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block_stats::{block_losses_unchecked, median_block, BlockLosses};
use crate::error::{check_dim, config_err, MomError, Result};
use crate::model::{BlockPartition, Dataset, LinearPredictor};
use crate::numeric::{derive_seed, dot, l2_norm, rng_from};
use crate::objective::{
    phi_lambda_hat_with, project_ball, Adversary, AdversaryBudget, ObjectiveConfig,
};

/// Step-size multiplier over the iterations of one restart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// Fixed steps.
    Constant,
    /// `1/sqrt(t+1)`.
    InverseSqrt,
    /// Fixed for the first half, then linearly down to 5% of the base step.
    #[default]
    Anneal,
}

impl StepSchedule {
    pub fn scale(self, t: usize, iterations: usize) -> f64 {
        match self {
            StepSchedule::Constant => 1.0,
            StepSchedule::InverseSqrt => 1.0 / ((t + 1) as f64).sqrt(),
            StepSchedule::Anneal => {
                let half = iterations / 2;
                if t < half {
                    1.0
                } else {
                    1.0 - 0.95 * (t - half) as f64 / (iterations - half) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub step_f: f64,
    pub step_g: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// Stop a restart once both iterates move less than this in one step.
    pub tolerance: f64,
    pub seed: u64,
    #[serde(default)]
    pub schedule: StepSchedule,
    /// Audit every k-th iterate (the first and last are always audited).
    pub audit_every: usize,
    /// Adversary used by the audit. Its candidate list is filled in by the solver.
    pub audit: AdversaryBudget,
    /// Optional ℓ2-ball constraint on both players.
    #[serde(default)]
    pub radius: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_f: 0.05,
            step_g: 0.05,
            iterations: 2000,
            restarts: 2,
            tolerance: 1e-9,
            seed: 0,
            schedule: StepSchedule::Anneal,
            audit_every: 20,
            audit: AdversaryBudget {
                restarts: 1,
                iterations: 100,
                include_ols: false,
                ..AdversaryBudget::default()
            },
            radius: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("step_f", self.step_f),
            ("step_g", self.step_g),
            ("tolerance", self.tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.iterations == 0 || self.restarts == 0 || self.audit_every == 0 {
            return Err(config_err(
                "iterations, restarts and audit_every must be positive",
            ));
        }
        self.audit.validate()
    }
}

/// One descent–ascent step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub restart: usize,
    pub iteration: usize,
    pub median_block: usize,
    /// `Med(B_{f,g}) + λ(Ψ(f) − Ψ(g))` before the step.
    pub med_increment: f64,
    pub step_norm_f: f64,
    pub step_norm_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub theta_hat: Vec<f64>,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    /// Audited `φ_λ` lower bound of the returned iterate.
    pub best_surrogate: f64,
    pub best_witness: Vec<f64>,
    pub best_restart: usize,
    pub best_iteration: usize,
}

impl SolverResult {
    pub fn predictor(&self) -> LinearPredictor {
        LinearPredictor::from_vec_unchecked(self.theta_hat.clone())
    }
}

/// Number of leading candidates whose witnesses are reused when re-scoring.
const WITNESS_POOL: usize = 16;
/// Upper bound on strong audits spent certifying the returned iterate.
const MAX_CERTIFICATIONS: usize = 32;

struct Audited {
    value: f64,
    theta: Vec<f64>,
    witness: Vec<f64>,
    iteration: usize,
}

struct RestartOutcome {
    trace: Vec<TraceEntry>,
    audited: Vec<Audited>,
    converged: bool,
}

fn perturbed(base: &[f64], scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    base.iter()
        .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn rms_residual(theta: &[f64], data: &Dataset) -> f64 {
    let ss: f64 = (0..data.len())
        .map(|i| (dot(theta, data.row(i)) - data.response(i)).powi(2))
        .sum();
    (ss / data.len() as f64).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn run_restart(
    restart: usize,
    f0: Vec<f64>,
    g0: Vec<f64>,
    ols: &LinearPredictor,
    data: &Dataset,
    losses: &BlockLosses<'_>,
    obj: &ObjectiveConfig,
    cfg: &SolverConfig,
) -> Result<RestartOutcome> {
    let mut f = f0;
    let mut g = g0;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut audited: Vec<Audited> = Vec::new();
    // witness with the largest audit value so far; a strong start for later audits
    let mut strongest: Option<(f64, Vec<f64>)> = None;
    let mut converged = false;
    let audit_seed = derive_seed(cfg.seed, 1_000_003 + restart as u64);

    let audit = |f: &[f64], g: &[f64], strongest: &Option<(f64, Vec<f64>)>, iteration: usize| -> Result<Audited> {
        let mut candidates = vec![
            LinearPredictor::from_vec_unchecked(g.to_vec()),
            ols.clone(),
        ];
        if let Some((_, w)) = strongest {
            candidates.push(LinearPredictor::from_vec_unchecked(w.clone()));
        }
        let budget = AdversaryBudget {
            seed: derive_seed(audit_seed, iteration as u64),
            include_ols: false,
            radius: cfg.radius,
            ..cfg.audit.clone()
        }
        .with_candidates(candidates);
        let out = phi_lambda_hat_with(
            losses,
            &LinearPredictor::from_vec_unchecked(f.to_vec()),
            data,
            obj,
            &budget,
        )?;
        Ok(Audited {
            value: out.value,
            theta: f.to_vec(),
            witness: out.witness.into_theta(),
            iteration,
        })
    };
    let record = |audited: &mut Vec<Audited>, strongest: &mut Option<(f64, Vec<f64>)>, a: Audited| {
        if strongest.as_ref().is_none_or(|(v, _)| a.value > *v) {
            *strongest = Some((a.value, a.witness.clone()));
        }
        audited.push(a);
    };

    let first = audit(&f, &g, &strongest, 0)?;
    record(&mut audited, &mut strongest, first);

    let penalty = |theta: &[f64]| obj.penalty(theta);
    for t in 0..cfg.iterations {
        let scale = cfg.schedule.scale(t, cfg.iterations);
        let (eta_f, eta_g) = (cfg.step_f * scale, cfg.step_g * scale);

        let f_losses = losses.losses(&f);
        let increments = |g: &[f64]| -> Vec<f64> {
            f_losses
                .iter()
                .zip(losses.losses(g))
                .map(|(a, b)| a - b)
                .collect()
        };
        let b = increments(&g);
        let j_star = median_block(&b)?;
        let med_value = b[j_star] + penalty(&f)? - penalty(&g)?;
        if !med_value.is_finite() {
            return Err(MomError::DivergenceError {
                restart,
                iteration: t,
            });
        }

        // adversary step
        let grad_g = losses.gradient(&g, j_star);
        let moved: Vec<f64> = g.iter().zip(&grad_g).map(|(a, d)| a - eta_g * d).collect();
        let mut g_next = obj.prox(&moved, eta_g)?;
        project_ball(&mut g_next, cfg.radius);

        // learner step on the recomputed median block
        let j_f = median_block(&increments(&g_next))?;
        let grad_f = losses.gradient(&f, j_f);
        let moved: Vec<f64> = f.iter().zip(&grad_f).map(|(a, d)| a - eta_f * d).collect();
        let mut f_next = obj.prox(&moved, eta_f)?;
        project_ball(&mut f_next, cfg.radius);

        if f_next.iter().chain(&g_next).any(|v| !v.is_finite()) {
            return Err(MomError::DivergenceError {
                restart,
                iteration: t,
            });
        }
        let step_norm_f = l2_norm(&crate::numeric::sub(&f_next, &f));
        let step_norm_g = l2_norm(&crate::numeric::sub(&g_next, &g));
        trace.push(TraceEntry {
            restart,
            iteration: t,
            median_block: j_star,
            med_increment: med_value,
            step_norm_f,
            step_norm_g,
        });
        f = f_next;
        g = g_next;

        converged = step_norm_f.max(step_norm_g) < cfg.tolerance;
        let last = converged || t + 1 == cfg.iterations;
        if (t + 1) % cfg.audit_every == 0 || last {
            let a = audit(&f, &g, &strongest, t + 1)?;
            record(&mut audited, &mut strongest, a);
        }
        if converged {
            break;
        }
    }
    Ok(RestartOutcome {
        trace,
        audited,
        converged,
    })
}

/// Median-block descent–ascent for `argmin_f φ_λ(f)`.
///
/// After all restarts finish, every audited iterate is re-scored against the
/// witnesses of the leading candidates from all restarts, so an iterate whose own audit was weak cannot
/// win on an underestimated objective.
pub fn mom_minimax_fit(
    data: &Dataset,
    p: &BlockPartition,
    obj: &ObjectiveConfig,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    cfg.validate()?;
    obj.validate()?;
    obj.regularizer.validate(data.dim())?;
    p.check_dataset(data)?;
    let losses = BlockLosses::new(data, p);

    let ols = erm_fit(data)?;
    let scale = rms_residual(ols.theta(), data).max(1e-12);
    let starts: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.restarts)
        .map(|r| {
            if r == 0 {
                (ols.theta().to_vec(), ols.theta().to_vec())
            } else {
                (
                    perturbed(ols.theta(), scale, derive_seed(cfg.seed, 2 * r as u64)),
                    perturbed(ols.theta(), scale, derive_seed(cfg.seed, 2 * r as u64 + 1)),
                )
            }
        })
        .collect();

    let outcomes: Vec<Result<RestartOutcome>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(r, (f0, g0))| run_restart(r, f0, g0, &ols, data, &losses, obj, cfg))
        .collect();

    let mut trace = Vec::new();
    let mut converged = Vec::new();
    let mut audited: Vec<(usize, Audited)> = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        trace.extend(outcome.trace);
        converged.push(outcome.converged);
        audited.extend(outcome.audited.into_iter().map(|a| (r, a)));
    }

    let mut ranked: Vec<&Audited> = audited.iter().map(|(_, a)| a).collect();
    // witnesses found against the leading candidates sit where the minimizer is contested
    ranked.sort_by(|a, b| a.value.total_cmp(&b.value));
    let pool: Vec<Vec<f64>> = ranked
        .iter()
        .take(WITNESS_POOL)
        .map(|a| a.witness.clone())
        .collect();
    let rescored: Vec<Result<(f64, Vec<f64>)>> = audited
        .par_iter()
        .map(|(_, a)| {
            let adversary = Adversary::new(&a.theta, &losses, obj)?;
            let mut best = (a.value, a.witness.clone());
            for w in &pool {
                let (value, _) = adversary.evaluate(w)?;
                if value > best.0 {
                    best = (value, w.clone());
                }
            }
            Ok(best)
        })
        .collect();

    let mut scores = rescored.into_iter().collect::<Result<Vec<_>>>()?;

    // Lazily certify: the current leader gets a stronger audit seeded with the pool,
    // until the leader is an iterate that has already been certified.
    let mut certified = vec![false; scores.len()];
    let leader = |scores: &[(f64, Vec<f64>)], only_certified: Option<&[bool]>| {
        let mut chosen: Option<(usize, f64)> = None;
        for (k, (value, _)) in scores.iter().enumerate() {
            if only_certified.is_some_and(|c| !c[k]) {
                continue;
            }
            if chosen.is_none_or(|(_, v)| *value < v) {
                chosen = Some((k, *value));
            }
        }
        chosen.map(|(k, _)| k)
    };
    let mut rounds = 0;
    let k = loop {
        let k = leader(&scores, None).expect("at least one audited iterate");
        if certified[k] {
            break k;
        }
        if rounds == MAX_CERTIFICATIONS {
            break leader(&scores, Some(&certified)).unwrap_or(k);
        }
        rounds += 1;
        let mut candidates: Vec<LinearPredictor> = pool
            .iter()
            .map(|w| LinearPredictor::from_vec_unchecked(w.clone()))
            .collect();
        candidates.push(LinearPredictor::from_vec_unchecked(scores[k].1.clone()));
        let budget = AdversaryBudget {
            restarts: cfg.audit.restarts * 4,
            iterations: cfg.audit.iterations * 4,
            seed: derive_seed(cfg.seed, 7_000_001 + k as u64),
            include_ols: true,
            radius: cfg.radius,
            ..cfg.audit.clone()
        }
        .with_candidates(candidates);
        let out = phi_lambda_hat_with(
            &losses,
            &LinearPredictor::from_vec_unchecked(audited[k].1.theta.clone()),
            data,
            obj,
            &budget,
        )?;
        if out.value > scores[k].0 {
            scores[k] = (out.value, out.witness.into_theta());
        }
        certified[k] = true;
    };
    let (best_restart, best) = &audited[k];
    let (value, witness) = scores.swap_remove(k);
    Ok(SolverResult {
        theta_hat: best.theta.clone(),
        trace,
        converged: converged[*best_restart],
        best_surrogate: value,
        best_witness: witness,
        best_restart: *best_restart,
        best_iteration: best.iteration,
    })
}

fn gram(data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    gram_rows(data, 0..data.len())
}

/// `XᵀX` and `Xᵀy` over the given rows.
fn gram_rows(
    data: &Dataset,
    rows: impl IntoIterator<Item = usize>,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = data.dim();
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    for i in rows {
        let x = data.row(i);
        let y = data.response(i);
        for a in 0..d {
            xty[a] += x[a] * y;
            for b in a..d {
                xtx[(a, b)] += x[a] * x[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    (xtx, xty)
}

/// Solves the normal equations: Cholesky, then a `1e-10` ridge, then SVD.
fn solve_normal(xtx: DMatrix<f64>, xty: &DVector<f64>) -> Result<Vec<f64>> {
    let d = xtx.nrows();
    let solution = match xtx.clone().cholesky() {
        Some(ch) => ch.solve(xty),
        None => {
            let mut jittered = xtx.clone();
            for a in 0..d {
                jittered[(a, a)] += 1e-10;
            }
            match jittered.cholesky() {
                Some(ch) => ch.solve(xty),
                None => xtx
                    .svd(true, true)
                    .solve(xty, 1e-12)
                    .map_err(|e| config_err(format!("least squares failed: {e}")))?,
            }
        }
    };
    Ok(solution.iter().copied().collect())
}

/// Ordinary least squares through the normal equations, with a `1e-10` ridge on singular designs.
pub fn erm_fit(data: &Dataset) -> Result<LinearPredictor> {
    let (xtx, xty) = gram(data);
    LinearPredictor::new(solve_normal(xtx, &xty)?)
}

/// Plain penalized least squares `(1/N) Σ (y − ⟨θ,x⟩)² + λΨ(θ)` by accelerated proximal gradient.
pub fn penalized_erm_fit(data: &Dataset, obj: &ObjectiveConfig) -> Result<LinearPredictor> {
    obj.validate()?;
    obj.regularizer.validate(data.dim())?;
    if obj.lambda == 0.0 {
        return erm_fit(data);
    }
    let n = data.len() as f64;
    let (xtx, xty) = gram(data);
    let hessian = xtx * (2.0 / n);
    let linear = xty * (2.0 / n);
    let lipschitz = SymmetricEigen::new(hessian.clone())
        .eigenvalues
        .max()
        .max(1e-12);
    let step = 1.0 / lipschitz;

    let d = data.dim();
    let mut x = DVector::<f64>::zeros(d);
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    for _ in 0..20_000 {
        let grad = &hessian * &y - &linear;
        let moved: Vec<f64> = (&y - grad * step).iter().copied().collect();
        let x_next = DVector::from_vec(obj.prox(&moved, step)?);
        let m_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        y = &x_next + (&x_next - &x) * ((momentum - 1.0) / m_next);
        let change = (&x_next - &x).amax();
        x = x_next;
        momentum = m_next;
        if change < 1e-12 {
            break;
        }
    }
    LinearPredictor::new(x.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.step
    }
}

/// Cartesian product of per-dimension axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        for a in &axes {
            if !(a.lo < a.hi && a.step > 0.0 && a.lo.is_finite() && a.hi.is_finite()) {
                return Err(config_err("grid axis needs lo < hi and step > 0"));
            }
        }
        if axes.is_empty() {
            return Err(config_err("grid needs at least one axis"));
        }
        Ok(Self { axes })
    }

    /// A grid holding exactly one point.
    pub fn singleton(theta: &[f64]) -> Self {
        Self {
            axes: theta
                .iter()
                .map(|&v| GridAxis {
                    lo: v,
                    hi: v,
                    step: 1.0,
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn size(&self) -> u128 {
        self.axes.iter().map(|a| a.len() as u128).product()
    }

    /// Points in lexicographic order (first coordinate most significant).
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..axis.len()).map(move |k| {
                        let mut v = prefix.clone();
                        v.push(axis.point(k));
                        v
                    })
                })
                .collect();
        }
        out
    }
}

pub const DEFAULT_GRID_CAP: u128 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub theta: Vec<f64>,
    /// `max_g Med(B_{f,g}) + λ(Ψ(f) − Ψ(g))` over the adversary grid.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFit {
    pub theta_hat: Vec<f64>,
    pub table: Vec<GridEntry>,
}

/// Exact minimax over finite grids.
pub fn oracle_grid_fit(
    data: &Dataset,
    p: &BlockPartition,
    obj: &ObjectiveConfig,
    grid_f: &GridSpec,
    grid_g: &GridSpec,
    cap: u128,
) -> Result<GridFit> {
    obj.validate()?;
    p.check_dataset(data)?;
    check_dim(data.dim(), grid_f.dim())?;
    check_dim(data.dim(), grid_g.dim())?;
    let required = grid_f.size() * grid_g.size() * p.len() as u128;
    if required > cap {
        return Err(MomError::GridCapExceeded { required, cap });
    }
    let f_points = grid_f.points();
    let g_points = grid_g.points();
    let table_of = |points: &[Vec<f64>]| -> Result<Vec<(Vec<f64>, f64)>> {
        points
            .par_iter()
            .map(|theta| Ok((block_losses_unchecked(theta, data, p), obj.penalty(theta)?)))
            .collect()
    };
    let f_table = table_of(&f_points)?;
    let g_table = table_of(&g_points)?;
    let n = p.len();

    let objective: Vec<f64> = f_table
        .par_iter()
        .map_init(
            || vec![0.0; n],
            |scratch, (lf, pf)| {
                let mut best = f64::NEG_INFINITY;
                for (lg, pg) in &g_table {
                    for j in 0..n {
                        scratch[j] = lf[j] - lg[j];
                    }
                    let (_, med, _) = scratch.select_nth_unstable_by(n / 2, f64::total_cmp);
                    best = best.max(*med + pf - pg);
                }
                best
            },
        )
        .collect();

    let mut arg = 0;
    for (k, v) in objective.iter().enumerate() {
        if *v < objective[arg] {
            arg = k;
        }
    }
    Ok(GridFit {
        theta_hat: f_points[arg].clone(),
        table: f_points
            .into_iter()
            .zip(objective)
            .map(|(theta, objective)| GridEntry { theta, objective })
            .collect(),
    })
}
