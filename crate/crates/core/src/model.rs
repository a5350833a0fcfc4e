//! Samples, linear predictors, block partitions and synthetic design geometry.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config_err, MomError, Result};
use crate::numeric::{dot, rng_from};

/// A sample `(X_i, Y_i)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    responses: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, responses: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            check_dim(dim, row.len())?;
            features.extend_from_slice(row);
        }
        Self::from_flat(features, responses, dim)
    }

    pub fn from_flat(features: Vec<f64>, responses: Vec<f64>, dim: usize) -> Result<Self> {
        if responses.is_empty() {
            return Err(config_err("dataset needs at least one sample"));
        }
        if dim == 0 {
            return Err(config_err("dataset needs at least one feature"));
        }
        check_dim(responses.len() * dim, features.len())?;
        if features.iter().chain(&responses).any(|v| !v.is_finite()) {
            return Err(config_err("dataset contains non-finite entries"));
        }
        Ok(Self {
            features,
            responses,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn response(&self, i: usize) -> f64 {
        self.responses[i]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn response_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.responses[i]
    }

    /// Returns a copy with rows shuffled by a seeded permutation.
    pub fn permuted(&self, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from(seed));
        let mut features = Vec::with_capacity(self.features.len());
        let mut responses = Vec::with_capacity(self.len());
        for &i in &order {
            features.extend_from_slice(self.row(i));
            responses.push(self.responses[i]);
        }
        Self {
            features,
            responses,
            dim: self.dim,
        }
    }

    /// Parses the `x0,...,x{d-1},y` CSV format. Row numbers in errors are file line numbers.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| MomError::ParseError {
                row: 1,
                message: e.to_string(),
            })?
            .clone();
        let width = header.len();
        if width < 2 || header.get(width - 1) != Some("y") {
            return Err(MomError::ParseError {
                row: 1,
                message: "header must be x0,...,x{d-1},y".into(),
            });
        }
        let dim = width - 1;
        let mut features = Vec::new();
        let mut responses = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| MomError::ParseError {
                row: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let row = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != width {
                return Err(MomError::ParseError {
                    row,
                    message: format!("expected {width} fields, found {}", record.len()),
                });
            }
            for (k, cell) in record.iter().enumerate() {
                let value: f64 = cell.parse().map_err(|_| MomError::ParseError {
                    row,
                    message: format!("column {k}: '{cell}' is not a number"),
                })?;
                if !value.is_finite() {
                    return Err(MomError::ParseError {
                        row,
                        message: format!("column {k}: non-finite value"),
                    });
                }
                if k < dim {
                    features.push(value);
                } else {
                    responses.push(value);
                }
            }
        }
        Self::from_flat(features, responses, dim)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let to_io = |e: csv::Error| MomError::Io(std::io::Error::other(e));
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        wtr.write_record(&header).map_err(to_io)?;
        for i in 0..self.len() {
            // `{}` on f64 is shortest round-trip, so reading back is exact
            let mut fields: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            fields.push(self.responses[i].to_string());
            wtr.write_record(&fields).map_err(to_io)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `f(x) = <theta, x>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinearPredictor {
    theta: Vec<f64>,
}

impl LinearPredictor {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(config_err("predictor coefficients must be finite"));
        }
        Ok(Self { theta })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            theta: vec![0.0; dim],
        }
    }

    pub(crate) fn from_vec_unchecked(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(dot(&self.theta, x))
    }

    /// Coefficient-wise `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self {
            theta: self
                .theta
                .iter()
                .zip(&other.theta)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        })
    }

    /// `self - other`, as a coefficient vector.
    pub fn difference(&self, other: &Self) -> Result<Vec<f64>> {
        check_dim(self.dim(), other.dim())?;
        Ok(crate::numeric::sub(&self.theta, &other.theta))
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// The natural decomposition of `0..N` into `n` contiguous blocks of size `m = floor(N/n)`.
///
/// Indices are 0-based; block `j` covers `j*m .. (j+1)*m`. The trailing `N - n*m`
/// samples belong to no block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    blocks: usize,
    block_size: usize,
    samples: usize,
}

impl BlockPartition {
    pub fn new(samples: usize, blocks: usize) -> Result<Self> {
        if blocks == 0 || blocks.is_multiple_of(2) {
            return Err(MomError::OddBlockCountRequired(blocks));
        }
        if blocks > samples {
            return Err(MomError::TooManyBlocks { samples, blocks });
        }
        Ok(Self {
            blocks,
            block_size: samples / blocks,
            samples,
        })
    }

    /// Number of blocks `n`.
    pub fn len(&self) -> usize {
        self.blocks
    }

    pub fn is_empty(&self) -> bool {
        self.blocks == 0
    }

    /// Block size `m`.
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn used(&self) -> usize {
        self.blocks * self.block_size
    }

    pub fn dropped(&self) -> usize {
        self.samples - self.used()
    }

    pub fn block(&self, j: usize) -> Range<usize> {
        assert!(j < self.blocks, "block index {j} out of range");
        j * self.block_size..(j + 1) * self.block_size
    }

    pub fn blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.blocks).map(|j| self.block(j))
    }

    /// Block containing sample `index`, or `None` for dropped samples.
    pub fn block_of(&self, index: usize) -> Option<usize> {
        (index < self.used()).then(|| index / self.block_size)
    }

    pub(crate) fn check_dataset(&self, data: &Dataset) -> Result<()> {
        check_dim(self.samples, data.len())
    }
}

/// Population geometry of a centered Gaussian design: `X ~ N(0, Σ)` and noise variance `σ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesignRepr", into = "DesignRepr")]
pub struct DesignSpec {
    covariance: DMatrix<f64>,
    noise_variance: f64,
}

#[derive(Serialize, Deserialize)]
struct DesignRepr {
    covariance: Vec<Vec<f64>>,
    noise_variance: f64,
}

impl TryFrom<DesignRepr> for DesignSpec {
    type Error = MomError;

    fn try_from(repr: DesignRepr) -> Result<Self> {
        DesignSpec::new(repr.covariance, repr.noise_variance)
    }
}

impl From<DesignSpec> for DesignRepr {
    fn from(spec: DesignSpec) -> Self {
        let d = spec.dim();
        DesignRepr {
            covariance: (0..d)
                .map(|i| (0..d).map(|j| spec.covariance[(i, j)]).collect())
                .collect(),
            noise_variance: spec.noise_variance,
        }
    }
}

impl DesignSpec {
    pub fn new(covariance: Vec<Vec<f64>>, noise_variance: f64) -> Result<Self> {
        let d = covariance.len();
        if d == 0 {
            return Err(config_err("covariance must be non-empty"));
        }
        for row in &covariance {
            check_dim(d, row.len())?;
        }
        let matrix = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
        Self::from_matrix(matrix, noise_variance)
    }

    pub fn identity(dim: usize, noise_variance: f64) -> Result<Self> {
        Self::from_matrix(DMatrix::identity(dim, dim), noise_variance)
    }

    pub fn from_matrix(covariance: DMatrix<f64>, noise_variance: f64) -> Result<Self> {
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(config_err("noise variance must be finite and nonnegative"));
        }
        if !covariance.is_square() || covariance.iter().any(|v| !v.is_finite()) {
            return Err(config_err("covariance must be a finite square matrix"));
        }
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(config_err("covariance is not symmetric"));
        }
        let eig = SymmetricEigen::new(covariance.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(config_err("covariance is not positive definite"));
        }
        Ok(Self {
            covariance,
            noise_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `vᵀ Σ v`.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64> {
        check_dim(self.dim(), v.len())?;
        let v = DVector::from_column_slice(v);
        Ok(v.dot(&(&self.covariance * &v)))
    }

    /// Lower Cholesky factor `L` with `Σ = L Lᵀ`.
    pub fn cholesky(&self) -> Cholesky<f64, Dyn> {
        Cholesky::new(self.covariance.clone()).expect("covariance validated positive definite")
    }
}

/// Exact `L2(μ)` distance `sqrt((θ_f − θ_h)ᵀ Σ (θ_f − θ_h))` under the synthetic design.
pub fn population_l2_distance(
    f: &LinearPredictor,
    h: &LinearPredictor,
    design: &DesignSpec,
) -> Result<f64> {
    let diff = f.difference(h)?;
    Ok(design.quadratic_form(&diff)?.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn partition_exact_division() {
        let p = BlockPartition::new(10, 5).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p.block_size(), 2);
        // third block is {5,6} in 1-based indexing
        assert_eq!(p.block(2), 4..6);
        assert_eq!(p.dropped(), 0);
    }

    #[test]
    fn partition_drops_remainder() {
        let p = BlockPartition::new(11, 5).unwrap();
        assert_eq!(p.block_size(), 2);
        assert_eq!(p.used(), 10);
        assert_eq!(p.block_of(10), None);
        assert_eq!(p.block_of(9), Some(4));
    }

    #[test]
    fn partition_errors() {
        assert!(matches!(
            BlockPartition::new(10, 4),
            Err(MomError::OddBlockCountRequired(4))
        ));
        assert!(matches!(
            BlockPartition::new(3, 5),
            Err(MomError::TooManyBlocks { .. })
        ));
        assert!(BlockPartition::new(3, 0).is_err());
    }

    #[test]
    fn predict_examples() {
        assert_eq!(
            LinearPredictor::zeros(2).predict(&[3.0, 4.0]).unwrap(),
            0.0
        );
        let f = LinearPredictor::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(f.predict(&[3.0, 4.0]).unwrap(), 11.0);
        let g = LinearPredictor::new(vec![1.0]).unwrap();
        assert!(matches!(
            g.predict(&[1.0, 2.0]),
            Err(MomError::DimensionError { .. })
        ));
    }

    #[test]
    fn distance_examples() {
        let f = LinearPredictor::new(vec![1.0, 1.0]).unwrap();
        let design = DesignSpec::identity(2, 1.0).unwrap();
        assert_eq!(population_l2_distance(&f, &f, &design).unwrap(), 0.0);
        let h = LinearPredictor::zeros(2);
        let e1 = LinearPredictor::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(population_l2_distance(&e1, &h, &design).unwrap(), 1.0);
        let sigma = DesignSpec::new(vec![vec![2.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        assert_relative_eq!(
            population_l2_distance(&f, &h, &sigma).unwrap(),
            3f64.sqrt(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn design_validation() {
        assert!(DesignSpec::new(vec![vec![1.0, 2.0], vec![0.0, 1.0]], 1.0).is_err());
        assert!(DesignSpec::new(vec![vec![1.0, 2.0], vec![2.0, 1.0]], 1.0).is_err());
        assert!(DesignSpec::identity(2, -1.0).is_err());
    }

    #[test]
    fn design_serde_round_trip() {
        let sigma = DesignSpec::new(vec![vec![2.0, 0.5], vec![0.5, 1.0]], 0.25).unwrap();
        let json = serde_json::to_string(&sigma).unwrap();
        let back: DesignSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sigma);
        assert!(serde_json::from_str::<DesignSpec>(
            r#"{"covariance":[[1,0],[0,-1]],"noise_variance":1}"#
        )
        .is_err());
    }

    #[test]
    fn dataset_rejects_ragged_and_nonfinite() {
        assert!(Dataset::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0.0, 0.0]).is_err());
        assert!(Dataset::new(vec![vec![f64::NAN]], vec![0.0]).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let data = Dataset::new(
            vec![vec![1.0, 0.1], vec![-2.5, 1e-300], vec![3.0, 7.0]],
            vec![0.3, 1.0 / 3.0, -4.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,y\n"));
        assert_eq!(Dataset::from_csv_reader(&buf[..]).unwrap(), data);

        let bad = "x0,y\n1,2\n3,abc\n";
        match Dataset::from_csv_reader(bad.as_bytes()) {
            Err(MomError::ParseError { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(Dataset::from_csv_reader("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let data = Dataset::new(
            (0..20).map(|i| vec![i as f64]).collect(),
            (0..20).map(|i| i as f64 * 10.0).collect(),
        )
        .unwrap();
        let p = data.permuted(3);
        assert_ne!(p, data);
        assert_eq!(p, data.permuted(3));
        let mut ys = p.responses().to_vec();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, data.responses());
        for i in 0..20 {
            assert_eq!(p.row(i)[0] * 10.0, p.response(i));
        }
    }

    proptest! {
        #[test]
        fn partition_covers_prefix(samples in 1usize..500, half in 0usize..100) {
            let blocks = 2 * half + 1;
            prop_assume!(blocks <= samples);
            let p = BlockPartition::new(samples, blocks).unwrap();
            let mut seen = vec![false; samples];
            for range in p.blocks() {
                prop_assert_eq!(range.len(), samples / blocks);
                for i in range {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert_eq!(seen.iter().filter(|&&s| s).count(), blocks * (samples / blocks));
        }

        #[test]
        fn distance_is_a_metric(
            a in prop::collection::vec(-5.0..5.0f64, 3),
            b in prop::collection::vec(-5.0..5.0f64, 3),
            c in prop::collection::vec(-5.0..5.0f64, 3),
            off in -0.9..0.9f64,
        ) {
            let design = DesignSpec::new(
                vec![vec![2.0, off, 0.0], vec![off, 1.0, 0.0], vec![0.0, 0.0, 0.5]],
                1.0,
            ).unwrap();
            let (f, g, h) = (
                LinearPredictor::new(a).unwrap(),
                LinearPredictor::new(b).unwrap(),
                LinearPredictor::new(c).unwrap(),
            );
            let fg = population_l2_distance(&f, &g, &design).unwrap();
            let gf = population_l2_distance(&g, &f, &design).unwrap();
            let gh = population_l2_distance(&g, &h, &design).unwrap();
            let fh = population_l2_distance(&f, &h, &design).unwrap();
            prop_assert!((fg - gf).abs() <= 1e-10);
            prop_assert!(fh <= fg + gh + 1e-10);
        }

        #[test]
        fn predict_is_linear(
            a in prop::collection::vec(-5.0..5.0f64, 4),
            b in prop::collection::vec(-5.0..5.0f64, 4),
            x in prop::collection::vec(-5.0..5.0f64, 4),
            alpha in -3.0..3.0f64,
            beta in -3.0..3.0f64,
        ) {
            let f = LinearPredictor::new(a).unwrap();
            let h = LinearPredictor::new(b).unwrap();
            let lhs = f.combine(alpha, &h, beta).unwrap().predict(&x).unwrap();
            let rhs = alpha * f.predict(&x).unwrap() + beta * h.predict(&x).unwrap();
            let scale = 1.0 + lhs.abs().max(rhs.abs());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }
}
