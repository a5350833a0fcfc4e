//! Synthetic data with heavy-tailed noise, and corruption injection.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config_err, Result};
use crate::model::{BlockPartition, Dataset, DesignSpec};
use crate::numeric::{dot, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    StudentT,
}

/// Additive noise `ε = scale · Z` with `Z` standard normal or Student-t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub scale: f64,
    #[serde(default = "default_dof")]
    pub dof: f64,
}

fn default_dof() -> f64 {
    2.5
}

impl NoiseSpec {
    pub fn gaussian(scale: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            scale,
            dof: default_dof(),
        }
    }

    pub fn student_t(scale: f64, dof: f64) -> Self {
        Self {
            kind: NoiseKind::StudentT,
            scale,
            dof,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(config_err("noise scale must be positive"));
        }
        if self.kind == NoiseKind::StudentT && !(self.dof > 2.0 && self.dof.is_finite()) {
            return Err(config_err("student_t noise needs dof > 2"));
        }
        Ok(())
    }

    /// Population variance of `ε`.
    pub fn variance(&self) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => self.scale * self.scale,
            NoiseKind::StudentT => self.scale * self.scale * self.dof / (self.dof - 2.0),
        }
    }
}

/// `N` samples of `Y = ⟨θ*, X⟩ + ε` with `X ~ N(0, Σ)`.
pub fn generate(
    samples: usize,
    dim: usize,
    theta_star: &[f64],
    design: &DesignSpec,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Dataset> {
    if samples == 0 || dim == 0 {
        return Err(config_err("samples and dim must be positive"));
    }
    check_dim(dim, theta_star.len())?;
    check_dim(dim, design.dim())?;
    noise.validate()?;
    let l = design.cholesky().l();
    let student = match noise.kind {
        NoiseKind::StudentT => Some(
            StudentT::new(noise.dof).map_err(|e| config_err(format!("student_t: {e}")))?,
        ),
        NoiseKind::Gaussian => None,
    };

    let mut rng = rng_from(seed);
    let mut features = Vec::with_capacity(samples * dim);
    let mut responses = Vec::with_capacity(samples);
    for _ in 0..samples {
        let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &l * z;
        let eps: f64 = match &student {
            Some(t) => rng.sample(t),
            None => rng.sample(StandardNormal),
        };
        responses.push(dot(theta_star, x.as_slice()) + noise.scale * eps);
        features.extend(x.iter());
    }
    Dataset::from_flat(features, responses, dim)
}

/// Everything needed to regenerate a clean synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub samples: usize,
    pub theta_star: Vec<f64>,
    /// `Σ`; identity when absent.
    #[serde(default)]
    pub covariance: Option<Vec<Vec<f64>>>,
    pub noise: NoiseSpec,
}

impl GenerationSpec {
    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn design(&self) -> Result<DesignSpec> {
        self.noise.validate()?;
        match &self.covariance {
            Some(c) => DesignSpec::new(c.clone(), self.noise.variance()),
            None => DesignSpec::identity(self.dim(), self.noise.variance()),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        generate(
            self.samples,
            self.dim(),
            &self.theta_star,
            &self.design()?,
            &self.noise,
            seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// `Y_i ← magnitude`.
    HugeResponse,
    /// `Y_i ← −Y_i`.
    SignFlip,
    /// `X_i ← magnitude · u`, `Y_i ← −magnitude`, with `u = (1, …, 1)/√d`.
    AdversarialLeverage,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Uniformly random distinct indices drawn from the corruption seed.
    #[default]
    Random,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub count: usize,
    pub mode: CorruptionMode,
    #[serde(default = "default_magnitude")]
    pub magnitude: f64,
    #[serde(default)]
    pub placement: Placement,
}

fn default_magnitude() -> f64 {
    1e6
}

impl CorruptionSpec {
    pub fn new(count: usize, mode: CorruptionMode, magnitude: f64) -> Self {
        Self {
            count,
            mode,
            magnitude,
            placement: Placement::Random,
        }
    }

    pub fn explicit(mode: CorruptionMode, magnitude: f64, indices: Vec<usize>) -> Self {
        Self {
            count: indices.len(),
            mode,
            magnitude,
            placement: Placement::Explicit(indices),
        }
    }

    /// Whether each corrupted sample can spoil at most a minority of blocks: `count < (n − 1)/2`.
    pub fn within_guarantee(&self, blocks: usize) -> bool {
        2 * self.count + 1 < blocks
    }
}

/// Applies the corruption and returns the sorted list of touched indices.
pub fn corrupt(data: &Dataset, spec: &CorruptionSpec, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let n = data.len();
    if spec.count > n {
        return Err(config_err(format!(
            "cannot corrupt {} of {} samples",
            spec.count, n
        )));
    }
    if spec.mode != CorruptionMode::SignFlip && !spec.magnitude.is_finite() {
        return Err(config_err("corruption magnitude must be finite"));
    }
    let mut indices = match &spec.placement {
        Placement::Random => {
            rand::seq::index::sample(&mut rng_from(seed), n, spec.count).into_vec()
        }
        Placement::Explicit(list) => {
            if list.len() != spec.count {
                return Err(config_err(format!(
                    "explicit placement lists {} indices but count is {}",
                    list.len(),
                    spec.count
                )));
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= n) {
                return Err(config_err(format!("corruption index {bad} out of range 0..{n}")));
            }
            list.clone()
        }
    };
    indices.sort_unstable();
    if indices.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_err("corruption indices must be distinct"));
    }

    let mut out = data.clone();
    let d = data.dim();
    let u = spec.magnitude / (d as f64).sqrt();
    for &i in &indices {
        match spec.mode {
            CorruptionMode::HugeResponse => *out.response_mut(i) = spec.magnitude,
            CorruptionMode::SignFlip => {
                let y = out.response_mut(i);
                *y = -*y;
            }
            CorruptionMode::AdversarialLeverage => {
                out.row_mut(i).iter_mut().for_each(|v| *v = u);
                *out.response_mut(i) = -spec.magnitude;
            }
        }
    }
    Ok((out, indices))
}

/// Number of blocks containing at least one of `indices`.
pub fn corrupted_block_count(indices: &[usize], p: &BlockPartition) -> usize {
    let mut blocks: Vec<usize> = indices.iter().filter_map(|&i| p.block_of(i)).collect();
    blocks.sort_unstable();
    blocks.dedup();
    blocks.len()
}

/// JSON written next to a generated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub generation: GenerationSpec,
    pub seed: u64,
    pub corruption: Option<CorruptionSpec>,
    pub corrupted_indices: Vec<usize>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `data` as CSV to `csv` and the sidecar to `<csv>.json`.
pub fn write_with_sidecar(data: &Dataset, csv: &Path, sidecar: &Sidecar) -> Result<()> {
    data.write_csv(std::fs::File::create(csv)?)?;
    let file = std::fs::File::create(sidecar_path(csv))?;
    serde_json::to_writer_pretty(file, sidecar)?;
    Ok(())
}
