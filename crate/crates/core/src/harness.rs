//! Experiment orchestration: configs, seeded trial pipelines and reports.
//!
//! Every per-trial seed is a pure function of the master seed and the trial
//! index, and report assembly is ordered by trial, so a report is reproducible
//! byte for byte apart from its `metadata` field.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{corrupt, CorruptionSpec, GenerationSpec};
use crate::error::{config_err, MomError, Result};
use crate::model::{BlockPartition, Dataset, DesignSpec, LinearPredictor};
use crate::numeric::{derive_seed, quantile};
use crate::objective::{ConditionParams, ObjectiveConfig};
use crate::solver::{erm_fit, mom_minimax_fit, penalized_erm_fit, SolverConfig};
use crate::verify::{
    check_condition_one, check_condition_two, condition_sweep, estimate_delta, excess_risk,
    lemma_sweep, sphere_probes, theorem1_check, theorem2_check, ConditionReport, DeltaBudget,
    DeltaEstimate, LemmaSweepReport, SlackConstants, SweepRow, Theorem1Diagnostic,
    Theorem2Diagnostic, DEFAULT_BLOCK_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Fit,
    Simulate,
    Verify,
    CorruptBench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf },
    Generate(GenerationSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySettings {
    /// Probes per condition.
    #[serde(default = "default_condition_probes")]
    pub condition_probes: usize,
    #[serde(default = "default_lemma_instances")]
    pub lemma_instances: usize,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Radii for the condition sweep table; empty skips the sweep.
    #[serde(default)]
    pub r_grid: Vec<f64>,
    #[serde(default)]
    pub delta_budget: DeltaBudget,
    /// Test hook: flips the sign of the regularizer in every lemma conclusion.
    #[serde(default)]
    pub flip_regularizer_sign: bool,
}

fn default_condition_probes() -> usize {
    200
}

fn default_lemma_instances() -> usize {
    1000
}

fn default_alphas() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            condition_probes: default_condition_probes(),
            lemma_instances: default_lemma_instances(),
            alphas: default_alphas(),
            r_grid: Vec::new(),
            delta_budget: DeltaBudget::default(),
            flip_regularizer_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub data: DataSource,
    pub blocks: usize,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    /// Replace `objective.lambda` by the midpoint of the λ-window of `conditions`.
    #[serde(default)]
    pub lambda_from_window: bool,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub conditions: Option<ConditionParams>,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for trials; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Flat per-trial rows `(trial, estimator, excess_risk, distance, passed)`.
    #[serde(default)]
    pub csv_out: Option<PathBuf>,
    #[serde(default)]
    pub slack: SlackConstants,
    #[serde(default = "default_threshold")]
    pub block_threshold: f64,
    /// Probes per condition in simulation trials; zero skips the per-trial condition reports.
    #[serde(default)]
    pub trial_condition_probes: usize,
    #[serde(default)]
    pub verify: VerifySettings,
}

fn default_trials() -> usize {
    1
}

fn default_threshold() -> f64 {
    DEFAULT_BLOCK_THRESHOLD
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies the CLI-level conveniences (even block counts are decremented)
    /// and validates; returns the resolved config and any warnings.
    pub fn resolve(mut self) -> Result<(Self, Vec<String>)> {
        let mut warnings = Vec::new();
        if self.blocks.is_multiple_of(2) {
            let msg = format!(
                "block count {} is even; using {}",
                self.blocks,
                self.blocks.saturating_sub(1)
            );
            log::warn!("{msg}");
            warnings.push(msg);
            self.blocks = self.blocks.saturating_sub(1);
        }
        if self.blocks == 0 {
            return Err(MomError::OddBlockCountRequired(0));
        }
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.lambda_from_window {
            let params = self
                .conditions
                .ok_or_else(|| config_err("lambda_from_window needs conditions"))?;
            self.objective.lambda = params.lambda_window()?.midpoint();
        }
        self.objective.validate()?;
        self.solver.validate()?;
        if let DataSource::Csv { path } = &self.data {
            if !path.exists() {
                return Err(config_err(format!("data file {} does not exist", path.display())));
            }
        }
        if let DataSource::Generate(spec) = &self.data {
            spec.design()?;
            self.objective.regularizer.validate(spec.dim())?;
        }
        Ok((self, warnings))
    }

    fn generation(&self) -> Result<&GenerationSpec> {
        match &self.data {
            DataSource::Generate(spec) => Ok(spec),
            DataSource::Csv { .. } => Err(config_err("this mode needs a generated data source")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRecord {
    pub name: String,
    pub theta: Vec<f64>,
    pub excess_risk: Option<f64>,
    pub distance: Option<f64>,
    /// Whether the applicable risk bound holds (unregularized or regularized check).
    pub passed: Option<bool>,
    /// Size of the symmetric difference between estimated and true supports.
    pub support_error: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub converged: bool,
    pub best_surrogate: f64,
    pub steps: usize,
    pub best_restart: usize,
    pub best_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub corrupted_indices: Vec<usize>,
    pub estimators: Vec<EstimatorRecord>,
    #[serde(default)]
    pub theorem1: Option<Theorem1Diagnostic>,
    #[serde(default)]
    pub theorem2: Option<Theorem2Diagnostic>,
    #[serde(default)]
    pub conditions: Vec<ConditionReport>,
    pub solver: Vec<SolverSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAggregate {
    pub name: String,
    pub median_excess_risk: Option<f64>,
    pub q25_excess_risk: Option<f64>,
    pub q75_excess_risk: Option<f64>,
    pub q95_excess_risk: Option<f64>,
    pub pass_rate: Option<f64>,
    pub mean_support_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub estimators: Vec<EstimatorAggregate>,
    /// Fraction of trials in which the median-of-means estimate meets its risk bound.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    pub quadratic: ConditionReport,
    pub multiplier: ConditionReport,
    pub majority_consistent: bool,
    pub sweep: Vec<SweepRow>,
    pub lemma: LemmaSweepReport,
    pub delta: Option<DeltaEstimate>,
}

/// Wall-clock information; excluded from reproducibility comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub started_unix_seconds: f64,
    pub elapsed_seconds: f64,
    pub trial_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Aggregates,
    pub verification: Option<VerifyOutput>,
    pub metadata: Option<Metadata>,
}

impl ExperimentReport {
    /// The report as pretty JSON without `metadata`.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.metadata = None;
        Ok(serde_json::to_string_pretty(&copy)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn lemma_violated(&self) -> bool {
        self.verification
            .as_ref()
            .is_some_and(|v| v.lemma.violation_count > 0)
    }

    pub fn aggregate(&self, name: &str) -> Option<&EstimatorAggregate> {
        self.aggregates.estimators.iter().find(|e| e.name == name)
    }

    /// Writes the JSON report and, when configured, the flat CSV.
    pub fn write_outputs(&self) -> Result<()> {
        if let Some(path) = &self.config.out {
            std::fs::write(path, self.to_json()?)?;
        }
        if let Some(path) = &self.config.csv_out {
            self.write_csv(std::fs::File::create(path)?)?;
        }
        Ok(())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["trial", "estimator", "excess_risk", "distance", "passed"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.trials {
            for e in &t.estimators {
                w.write_record([
                    t.trial.to_string(),
                    e.name.clone(),
                    opt(e.excess_risk),
                    opt(e.distance),
                    e.passed.map(|b| b.to_string()).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> MomError {
    MomError::Io(std::io::Error::other(e))
}

fn support(theta: &[f64]) -> Vec<bool> {
    theta.iter().map(|v| v.abs() > 1e-10).collect()
}

fn support_error(theta_hat: &[f64], theta_star: &[f64]) -> usize {
    support(theta_hat)
        .iter()
        .zip(support(theta_star))
        .filter(|(a, b)| **a != *b)
        .count()
}

struct Truth<'a> {
    theta_star: &'a [f64],
    design: &'a DesignSpec,
}

fn record(
    name: &str,
    theta: Vec<f64>,
    truth: Option<&Truth>,
    cfg: &ExperimentConfig,
) -> Result<(EstimatorRecord, Option<Theorem1Diagnostic>, Option<Theorem2Diagnostic>)> {
    let mut rec = EstimatorRecord {
        name: name.to_string(),
        theta,
        excess_risk: None,
        distance: None,
        passed: None,
        support_error: None,
    };
    let (mut t1, mut t2) = (None, None);
    if let Some(truth) = truth {
        let risk = excess_risk(&rec.theta, truth.theta_star, truth.design)?;
        rec.excess_risk = Some(risk);
        rec.distance = Some(risk.sqrt());
        if truth.theta_star.contains(&0.0) {
            rec.support_error = Some(support_error(&rec.theta, truth.theta_star));
        }
        if let Some(params) = &cfg.conditions {
            if cfg.objective.regularizer.is_none() {
                if params.gamma1 > params.gamma2 {
                    let d = theorem1_check(&rec.theta, truth.theta_star, truth.design, params, &[])?;
                    rec.passed = Some(d.passed);
                    t1 = Some(d);
                }
            } else {
                let d = theorem2_check(
                    &rec.theta,
                    truth.theta_star,
                    truth.design,
                    params,
                    &cfg.objective.regularizer,
                    &cfg.slack,
                )?;
                rec.passed = Some(d.passed);
                t2 = Some(d);
            }
        }
    }
    Ok((rec, t1, t2))
}

fn summary(result: &crate::solver::SolverResult) -> SolverSummary {
    SolverSummary {
        converged: result.converged,
        best_surrogate: result.best_surrogate,
        steps: result.trace.len(),
        best_restart: result.best_restart,
        best_iteration: result.best_iteration,
    }
}

/// Fits the configured estimators on `data`; names get `suffix` appended.
fn fit_all(
    data: &Dataset,
    suffix: &str,
    truth: Option<&Truth>,
    cfg: &ExperimentConfig,
    solver_seed: u64,
    trial: &mut TrialRecord,
    primary: bool,
) -> Result<()> {
    let p = BlockPartition::new(data.len(), cfg.blocks)?;
    let solver_cfg = SolverConfig {
        seed: solver_seed,
        ..cfg.solver.clone()
    };
    let fit = mom_minimax_fit(data, &p, &cfg.objective, &solver_cfg)?;
    trial.solver.push(summary(&fit));
    let (rec, t1, t2) = record(&format!("mom{suffix}"), fit.theta_hat, truth, cfg)?;
    trial.estimators.push(rec);
    if primary {
        trial.theorem1 = t1;
        trial.theorem2 = t2;
    }
    let (rec, ..) = record(&format!("ols{suffix}"), erm_fit(data)?.into_theta(), truth, cfg)?;
    trial.estimators.push(rec);
    if !cfg.objective.regularizer.is_none() {
        let lasso = penalized_erm_fit(data, &cfg.objective)?;
        let (rec, ..) = record(&format!("penalized_ls{suffix}"), lasso.into_theta(), truth, cfg)?;
        trial.estimators.push(rec);
    }
    Ok(())
}

fn trial_conditions(
    data: &Dataset,
    theta_star: &[f64],
    design: &DesignSpec,
    cfg: &ExperimentConfig,
    probes: usize,
    seed: u64,
) -> Result<Vec<ConditionReport>> {
    let Some(params) = cfg.conditions else {
        return Ok(Vec::new());
    };
    let p = BlockPartition::new(data.len(), cfg.blocks)?;
    let f_star = LinearPredictor::new(theta_star.to_vec())?;
    let far = sphere_probes(&f_star, design, params.r, probes, derive_seed(seed, 0))?;
    let near = sphere_probes(&f_star, design, 0.5 * params.r, probes, derive_seed(seed, 1))?;
    Ok(vec![
        check_condition_one(data, &p, &f_star, &far, params.gamma1, params.r, design, cfg.block_threshold)?,
        check_condition_two(
            data,
            &p,
            &f_star,
            &near,
            params.gamma2,
            params.r,
            &vec![0.0; probes],
            design,
            cfg.block_threshold,
        )?,
    ])
}

/// One generated trial: generate, optionally corrupt, fit, check.
fn run_trial(cfg: &ExperimentConfig, index: usize) -> Result<TrialRecord> {
    let spec = cfg.generation()?;
    let seed = derive_seed(cfg.seed, index as u64);
    let design = spec.design()?;
    let truth = Truth {
        theta_star: &spec.theta_star,
        design: &design,
    };
    let clean = spec.generate(derive_seed(seed, 0))?;
    let mut trial = TrialRecord {
        trial: index,
        seed,
        corrupted_indices: Vec::new(),
        estimators: Vec::new(),
        theorem1: None,
        theorem2: None,
        conditions: Vec::new(),
        solver: Vec::new(),
    };
    let solver_seed = derive_seed(seed, 2);
    match (&cfg.corruption, cfg.mode) {
        (Some(c), Mode::CorruptBench) => {
            let (bad, idx) = corrupt(&clean, c, derive_seed(seed, 1))?;
            trial.corrupted_indices = idx;
            fit_all(&clean, "_clean", Some(&truth), cfg, solver_seed, &mut trial, false)?;
            fit_all(&bad, "_corrupted", Some(&truth), cfg, solver_seed, &mut trial, true)?;
        }
        (None, Mode::CorruptBench) => {
            return Err(config_err("corrupt-bench needs a corruption spec"));
        }
        (Some(c), _) => {
            let (bad, idx) = corrupt(&clean, c, derive_seed(seed, 1))?;
            trial.corrupted_indices = idx;
            fit_all(&bad, "", Some(&truth), cfg, solver_seed, &mut trial, true)?;
        }
        (None, _) => {
            fit_all(&clean, "", Some(&truth), cfg, solver_seed, &mut trial, true)?;
        }
    }
    if cfg.trial_condition_probes > 0 {
        trial.conditions = trial_conditions(
            &clean,
            &spec.theta_star,
            &design,
            cfg,
            cfg.trial_condition_probes,
            derive_seed(seed, 3),
        )?;
        let held = trial.conditions.iter().all(ConditionReport::all_passed);
        if let Some(t1) = trial.theorem1.as_mut() {
            t1.conditions_held = held;
            t1.meaningful_failure = !t1.passed && held;
        }
    }
    Ok(trial)
}

fn aggregate(trials: &[TrialRecord]) -> Aggregates {
    let mut names: Vec<String> = Vec::new();
    for t in trials {
        for e in &t.estimators {
            if !names.contains(&e.name) {
                names.push(e.name.clone());
            }
        }
    }
    let estimators: Vec<EstimatorAggregate> = names
        .iter()
        .map(|name| {
            let recs: Vec<&EstimatorRecord> = trials
                .iter()
                .flat_map(|t| t.estimators.iter().filter(|e| &e.name == name))
                .collect();
            let risks: Vec<f64> = recs.iter().filter_map(|e| e.excess_risk).collect();
            let q = |level: f64| (!risks.is_empty()).then(|| quantile(&risks, level));
            let passes: Vec<bool> = recs.iter().filter_map(|e| e.passed).collect();
            let supports: Vec<usize> = recs.iter().filter_map(|e| e.support_error).collect();
            EstimatorAggregate {
                name: name.clone(),
                median_excess_risk: q(0.5),
                q25_excess_risk: q(0.25),
                q75_excess_risk: q(0.75),
                q95_excess_risk: q(0.95),
                pass_rate: (!passes.is_empty())
                    .then(|| passes.iter().filter(|&&b| b).count() as f64 / passes.len() as f64),
                mean_support_error: (!supports.is_empty())
                    .then(|| supports.iter().sum::<usize>() as f64 / supports.len() as f64),
            }
        })
        .collect();
    let confidence = ["mom", "mom_corrupted"]
        .iter()
        .find_map(|n| estimators.iter().find(|e| e.name == *n))
        .and_then(|e| e.pass_rate);
    Aggregates {
        estimators,
        confidence,
    }
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w.max(1));
    }
    builder
        .build()
        .map_err(|e| config_err(format!("thread pool: {e}")))
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn run_trials(cfg: ExperimentConfig, warnings: Vec<String>) -> Result<ExperimentReport> {
    let started = now_unix();
    let clock = Instant::now();
    let results: Vec<Result<(TrialRecord, f64)>> = pool(cfg.workers)?.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|i| {
                let t = Instant::now();
                let rec = run_trial(&cfg, i)?;
                Ok((rec, t.elapsed().as_secs_f64()))
            })
            .collect()
    });
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut timings = Vec::with_capacity(cfg.trials);
    for r in results {
        let (rec, secs) = r?;
        trials.push(rec);
        timings.push(secs);
    }
    let aggregates = aggregate(&trials);
    Ok(ExperimentReport {
        config: cfg,
        warnings,
        trials,
        aggregates,
        verification: None,
        metadata: Some(Metadata {
            started_unix_seconds: started,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
            trial_seconds: timings,
        }),
    })
}

/// Fits one dataset. A generated source reproduces trial 0 of [`run_simulate`].
pub fn run_fit(config: ExperimentConfig) -> Result<ExperimentReport> {
    let (cfg, warnings) = config.resolve()?;
    match &cfg.data {
        DataSource::Generate(_) => run_trials(
            ExperimentConfig {
                trials: 1,
                ..cfg
            },
            warnings,
        ),
        DataSource::Csv { path } => {
            let started = now_unix();
            let clock = Instant::now();
            let data = Dataset::read_csv(path)?;
            let mut trial = TrialRecord {
                trial: 0,
                seed: derive_seed(cfg.seed, 0),
                corrupted_indices: Vec::new(),
                estimators: Vec::new(),
                theorem1: None,
                theorem2: None,
                conditions: Vec::new(),
                solver: Vec::new(),
            };
            fit_all(&data, "", None, &cfg, derive_seed(trial.seed, 2), &mut trial, true)?;
            let trials = vec![trial];
            Ok(ExperimentReport {
                aggregates: aggregate(&trials),
                config: cfg,
                warnings,
                trials,
                verification: None,
                metadata: Some(Metadata {
                    started_unix_seconds: started,
                    elapsed_seconds: clock.elapsed().as_secs_f64(),
                    trial_seconds: vec![clock.elapsed().as_secs_f64()],
                }),
            })
        }
    }
}

/// Independent generated trials with per-trial seeds derived from the master seed.
pub fn run_simulate(config: ExperimentConfig) -> Result<ExperimentReport> {
    let (cfg, warnings) = config.resolve()?;
    cfg.generation()?;
    run_trials(cfg, warnings)
}

/// Clean versus corrupted fits of every estimator, trial by trial.
pub fn run_corrupt_bench(config: ExperimentConfig) -> Result<ExperimentReport> {
    let (mut cfg, warnings) = config.resolve()?;
    cfg.generation()?;
    if cfg.corruption.is_none() {
        return Err(config_err("corrupt-bench needs a corruption spec"));
    }
    cfg.mode = Mode::CorruptBench;
    run_trials(cfg, warnings)
}

/// Condition reports, the lemma sweep, the optional condition sweep over radii,
/// and a `Δ` estimate for regularized objectives, all on trial-0 data.
pub fn run_verify(config: ExperimentConfig) -> Result<ExperimentReport> {
    let (cfg, warnings) = config.resolve()?;
    let started = now_unix();
    let clock = Instant::now();
    let spec = cfg.generation()?;
    let params = cfg
        .conditions
        .ok_or_else(|| config_err("verify needs condition parameters"))?;
    let seed = derive_seed(cfg.seed, 0);
    let design = spec.design()?;
    let data = spec.generate(derive_seed(seed, 0))?;
    let settings = &cfg.verify;

    let output = pool(cfg.workers)?.install(|| -> Result<VerifyOutput> {
        let reports = trial_conditions(
            &data,
            &spec.theta_star,
            &design,
            &cfg,
            settings.condition_probes,
            derive_seed(seed, 3),
        )?;
        let [quadratic, multiplier]: [ConditionReport; 2] = reports
            .try_into()
            .map_err(|_| config_err("condition reports missing"))?;
        let p = BlockPartition::new(data.len(), cfg.blocks)?;
        let f_star = LinearPredictor::new(spec.theta_star.clone())?;
        let sweep = condition_sweep(
            &data,
            &p,
            &f_star,
            &design,
            params.gamma1,
            params.gamma2,
            &settings.r_grid,
            settings.condition_probes,
            derive_seed(seed, 4),
        )?;
        let lemma = lemma_sweep(
            settings.lemma_instances,
            &settings.alphas,
            settings.flip_regularizer_sign,
            derive_seed(seed, 5),
        )?;
        let delta = if cfg.objective.regularizer.is_none() {
            None
        } else {
            Some(estimate_delta(
                &cfg.objective.regularizer,
                &f_star,
                params.rho,
                params.r,
                &design,
                &settings.delta_budget,
                derive_seed(seed, 6),
            )?)
        };
        Ok(VerifyOutput {
            majority_consistent: quadratic.majority_consistent() && multiplier.majority_consistent(),
            quadratic,
            multiplier,
            sweep,
            lemma,
            delta,
        })
    })?;
    if output.lemma.violation_count > 0 {
        log::error!("{} lemma violations", output.lemma.violation_count);
    }
    Ok(ExperimentReport {
        config: cfg,
        warnings,
        trials: Vec::new(),
        aggregates: Aggregates {
            estimators: Vec::new(),
            confidence: None,
        },
        verification: Some(output),
        metadata: Some(Metadata {
            started_unix_seconds: started,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
            trial_seconds: Vec::new(),
        }),
    })
}

/// Dispatches on `config.mode`.
pub fn run(config: ExperimentConfig) -> Result<ExperimentReport> {
    match config.mode {
        Mode::Fit => run_fit(config),
        Mode::Simulate => run_simulate(config),
        Mode::Verify => run_verify(config),
        Mode::CorruptBench => run_corrupt_bench(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{CorruptionMode, NoiseSpec};

    fn small_config(mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            data: DataSource::Generate(GenerationSpec {
                samples: 300,
                theta_star: vec![1.0, -0.5],
                covariance: None,
                noise: NoiseSpec::gaussian(1.0),
            }),
            blocks: 15,
            objective: ObjectiveConfig::unregularized(),
            lambda_from_window: false,
            solver: SolverConfig {
                iterations: 60,
                restarts: 1,
                ..SolverConfig::default()
            },
            conditions: Some(ConditionParams::new(0.5, 0.1, 0.6, 1.0).unwrap()),
            corruption: None,
            trials: 3,
            seed: 42,
            workers: Some(2),
            out: None,
            csv_out: None,
            slack: SlackConstants::default(),
            block_threshold: DEFAULT_BLOCK_THRESHOLD,
            trial_condition_probes: 0,
            verify: VerifySettings::default(),
        }
    }

    #[test]
    fn even_blocks_are_decremented_with_warning() {
        let cfg = ExperimentConfig {
            blocks: 16,
            ..small_config(Mode::Simulate)
        };
        let (resolved, warnings) = cfg.resolve().unwrap();
        assert_eq!(resolved.blocks, 15);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = small_config(Mode::Simulate);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let minimal = r#"{
            "mode": "corrupt-bench",
            "data": {"source": "generate", "samples": 100, "theta_star": [1.0],
                     "noise": {"kind": "student_t", "scale": 1.0}},
            "blocks": 11,
            "corruption": {"count": 2, "mode": "huge_response"}
        }"#;
        let parsed = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(parsed.trials, 1);
        assert_eq!(parsed.corruption.unwrap().magnitude, 1e6);
        assert_eq!(parsed.block_threshold, 0.9);
    }

    #[test]
    fn simulate_is_reproducible_and_isolated() {
        let a = run_simulate(small_config(Mode::Simulate)).unwrap();
        let b = run_simulate(ExperimentConfig {
            workers: Some(1),
            ..small_config(Mode::Simulate)
        })
        .unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.trials.len(), 3);
        let conf = a.aggregates.confidence.unwrap();
        assert!((0.0..=1.0).contains(&conf));
        // a longer run shares its first trials
        let longer = run_simulate(ExperimentConfig {
            trials: 5,
            ..small_config(Mode::Simulate)
        })
        .unwrap();
        assert_eq!(&longer.trials[..3], &a.trials[..]);
    }

    #[test]
    fn fit_matches_single_trial_simulation() {
        let fit = run_fit(small_config(Mode::Fit)).unwrap();
        let sim = run_simulate(ExperimentConfig {
            trials: 1,
            ..small_config(Mode::Simulate)
        })
        .unwrap();
        assert_eq!(fit.trials, sim.trials);
    }

    #[test]
    fn corrupt_bench_records_both_versions() {
        let cfg = ExperimentConfig {
            corruption: Some(crate::datagen::CorruptionSpec::new(3, CorruptionMode::HugeResponse, 1e6)),
            trials: 2,
            ..small_config(Mode::CorruptBench)
        };
        let report = run_corrupt_bench(cfg).unwrap();
        let names: Vec<&str> = report.trials[0].estimators.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["mom_clean", "ols_clean", "mom_corrupted", "ols_corrupted"]);
        assert_eq!(report.trials[0].corrupted_indices.len(), 3);
        let ols_bad = report.aggregate("ols_corrupted").unwrap().median_excess_risk.unwrap();
        let ols_clean = report.aggregate("ols_clean").unwrap().median_excess_risk.unwrap();
        assert!(ols_bad > 100.0 * ols_clean);

        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!(text.starts_with("trial,estimator,excess_risk,distance,passed"));
    }

    #[test]
    fn verify_reports_and_flip_hook() {
        let mut cfg = small_config(Mode::Verify);
        cfg.verify.condition_probes = 20;
        cfg.verify.lemma_instances = 40;
        cfg.verify.r_grid = vec![0.3, 0.6];
        let report = run_verify(cfg.clone()).unwrap();
        let v = report.verification.as_ref().unwrap();
        assert_eq!(v.quadratic.probe_count(), 20);
        assert_eq!(v.sweep.len(), 2);
        assert_eq!(v.lemma.instances, 40);
        assert!(!report.lemma_violated());
        cfg.verify.flip_regularizer_sign = true;
        assert!(run_verify(cfg).unwrap().lemma_violated());
    }

    #[test]
    fn csv_fit_without_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x0,y\n1,2\n2,4.1\n3,5.9\n").unwrap();
        let cfg = ExperimentConfig {
            data: DataSource::Csv { path },
            blocks: 3,
            ..small_config(Mode::Fit)
        };
        let report = run_fit(cfg).unwrap();
        let mom = &report.trials[0].estimators[0];
        assert_eq!(mom.name, "mom");
        assert_eq!(mom.theta.len(), 1);
        assert!(mom.excess_risk.is_none());
    }
}
