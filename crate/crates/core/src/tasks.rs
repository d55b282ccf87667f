//! Synthetic non-iid federated datasets, losses, gradients, and the
//! closed-form / numeric global optima used as MSD oracles.

use nalgebra::{DMatrix, DVector};
use std::io::BufRead;
use std::path::Path;
use thiserror::Error;

use crate::rng::{stream, DetRng};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("counts must all be at least 1")]
    EmptyCounts,
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv file {path} is empty")]
    EmptyFile { path: String },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("partition assigns no rows to agent (p={unit}, k={agent})")]
    EmptyAgent { unit: usize, agent: usize },
    #[error("partition row counts sum to {assigned} but file has {available} rows")]
    PartitionMismatch { assigned: usize, available: usize },
    #[error("closed-form optimum requires a regression dataset with ground truth")]
    NoGroundTruth,
    #[error("(R_u + rho I) is singular; use rho > 0")]
    SingularSystem,
    #[error("numeric optimum requires rho > 0 for strong convexity")]
    NotStronglyConvex,
    #[error("gradient descent did not converge: gradient norm {0:e} after {1} iterations")]
    NoConvergence(f64, usize),
}

/// One agent's local dataset: feature rows and labels.
/// Labels are real targets for regression, {0, 1} for classification.
#[derive(Clone, Debug)]
pub struct AgentShard {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
}

impl AgentShard {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_row(&self, n: usize) -> DVector<f64> {
        self.features.row(n).transpose()
    }
}

/// Generating model for synthetic regression data; kept so the closed-form
/// optimum can recover the noise realizations v = d - u^T w*.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub w_star: DVector<f64>,
    pub covariances: Vec<Vec<DMatrix<f64>>>,
    pub noise_vars: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification,
}

/// P x K grid of agent shards plus optional generating model and test set.
#[derive(Clone, Debug)]
pub struct FederatedDataset {
    pub units: usize,
    pub agents_per_unit: usize,
    pub dim: usize,
    pub shards: Vec<Vec<AgentShard>>,
    pub task_kind: TaskKind,
    pub ground_truth: Option<GroundTruth>,
    pub test_set: Option<AgentShard>,
}

impl FederatedDataset {
    pub fn shard(&self, unit: usize, agent: usize) -> &AgentShard {
        &self.shards[unit][agent]
    }

    pub fn all_shards(&self) -> impl Iterator<Item = &AgentShard> {
        self.shards.iter().flatten()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Quadratic,
    Logistic,
}

/// Per-sample loss with an L2 regularizer applied inside each sample term.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub kind: LossKind,
    pub rho: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + exp(x)) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Loss {
    pub fn quadratic(rho: f64) -> Self {
        Self { kind: LossKind::Quadratic, rho }
    }

    pub fn logistic(rho: f64) -> Self {
        Self { kind: LossKind::Logistic, rho }
    }

    pub fn per_sample_loss(&self, w: &DVector<f64>, u: &DVector<f64>, d: f64) -> f64 {
        let reg = self.rho * w.norm_squared();
        match self.kind {
            LossKind::Quadratic => {
                let r = d - u.dot(w);
                r * r + reg
            }
            LossKind::Logistic => {
                let gamma = 2.0 * d - 1.0;
                softplus(-gamma * u.dot(w)) + reg
            }
        }
    }

    /// Gradient of the per-sample loss at w.
    pub fn per_sample_gradient(&self, w: &DVector<f64>, u: &DVector<f64>, d: f64) -> DVector<f64> {
        match self.kind {
            LossKind::Quadratic => u * (2.0 * (u.dot(w) - d)) + w * (2.0 * self.rho),
            LossKind::Logistic => {
                let gamma = 2.0 * d - 1.0;
                let s = sigmoid(-gamma * u.dot(w));
                u * (-gamma * s) + w * (2.0 * self.rho)
            }
        }
    }

    /// Lipschitz constant of the per-sample gradient.
    pub fn per_sample_lipschitz(&self, u: &DVector<f64>) -> f64 {
        match self.kind {
            LossKind::Quadratic => 2.0 * (u.norm_squared() + self.rho),
            LossKind::Logistic => 0.25 * u.norm_squared() + 2.0 * self.rho,
        }
    }
}

/// Mean per-sample gradient of one shard at w.
pub fn shard_gradient(loss: &Loss, shard: &AgentShard, w: &DVector<f64>) -> DVector<f64> {
    let n = shard.len();
    let mut g = DVector::zeros(w.len());
    for i in 0..n {
        g += loss.per_sample_gradient(w, &shard.feature_row(i), shard.labels[i]);
    }
    g / n as f64
}

/// Mean per-sample loss of one shard at w.
pub fn shard_risk(loss: &Loss, shard: &AgentShard, w: &DVector<f64>) -> f64 {
    let n = shard.len();
    (0..n)
        .map(|i| loss.per_sample_loss(w, &shard.feature_row(i), shard.labels[i]))
        .sum::<f64>()
        / n as f64
}

/// Random symmetric positive-definite covariance Q diag(lambda) Q^T with
/// log-uniform eigenvalues in [lo, hi].
fn random_covariance(dim: usize, lo: f64, hi: f64, rng: &mut DetRng) -> DMatrix<f64> {
    let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
    let q = gauss.qr().q();
    let eigs = DVector::from_fn(dim, |_, _| {
        (lo.ln() + rng.next_f64() * (hi.ln() - lo.ln())).exp()
    });
    &q * DMatrix::from_diagonal(&eigs) * q.transpose()
}

fn covariance_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    cov.clone()
        .cholesky()
        .expect("covariance is positive definite by construction")
        .l()
}

const COV_EIG_LO: f64 = 0.5;
const COV_EIG_HI: f64 = 2.0;
const NOISE_VAR_LO: f64 = 0.05;
const NOISE_VAR_HI: f64 = 0.5;

/// Linear regression data d = u^T w* + v with per-agent feature covariance
/// and per-agent observation noise variance. Fully determined by `seed`.
pub fn generate_regression(
    units: usize,
    agents_per_unit: usize,
    samples_per_agent: usize,
    dim: usize,
    seed: u64,
) -> Result<FederatedDataset, TaskError> {
    if units == 0 || agents_per_unit == 0 || samples_per_agent == 0 || dim == 0 {
        return Err(TaskError::EmptyCounts);
    }
    let mut gt_rng = DetRng::keyed(seed, &[stream::DATA_GROUND_TRUTH]);
    let w_star = DVector::from_fn(dim, |_, _| gt_rng.normal());

    let mut shards = Vec::with_capacity(units);
    let mut covariances = Vec::with_capacity(units);
    let mut noise_vars = Vec::with_capacity(units);
    for p in 0..units {
        let mut unit_shards = Vec::with_capacity(agents_per_unit);
        let mut unit_covs = Vec::with_capacity(agents_per_unit);
        let mut unit_nv = Vec::with_capacity(agents_per_unit);
        for k in 0..agents_per_unit {
            let mut cov_rng = DetRng::keyed(seed, &[stream::DATA_COVARIANCE, p as u64, k as u64]);
            let cov = random_covariance(dim, COV_EIG_LO, COV_EIG_HI, &mut cov_rng);
            let factor = covariance_factor(&cov);
            let noise_var = (NOISE_VAR_LO.ln()
                + cov_rng.next_f64() * (NOISE_VAR_HI.ln() - NOISE_VAR_LO.ln()))
            .exp();

            let mut feat_rng = DetRng::keyed(seed, &[stream::DATA_FEATURES, p as u64, k as u64]);
            let mut noise_rng = DetRng::keyed(seed, &[stream::DATA_NOISE, p as u64, k as u64]);
            let mut features = DMatrix::zeros(samples_per_agent, dim);
            let mut labels = DVector::zeros(samples_per_agent);
            for n in 0..samples_per_agent {
                let z = DVector::from_fn(dim, |_, _| feat_rng.normal());
                let u = &factor * z;
                let v = noise_rng.normal() * noise_var.sqrt();
                labels[n] = u.dot(&w_star) + v;
                features.row_mut(n).copy_from(&u.transpose());
            }
            unit_shards.push(AgentShard { features, labels });
            unit_covs.push(cov);
            unit_nv.push(noise_var);
        }
        shards.push(unit_shards);
        covariances.push(unit_covs);
        noise_vars.push(unit_nv);
    }
    Ok(FederatedDataset {
        units,
        agents_per_unit,
        dim,
        shards,
        task_kind: TaskKind::Regression,
        ground_truth: Some(GroundTruth { w_star, covariances, noise_vars }),
        test_set: None,
    })
}

const LABEL_NOISE_STD: f64 = 0.3;

/// Binary classification data: clean samples are labelled by the sign of
/// u^T w* + v; each agent's stored features are then shifted by a fixed
/// per-agent offset of magnitude `shift`, making the local distributions
/// non-iid. The test set is generated without any shift.
pub fn generate_classification(
    units: usize,
    agents_per_unit: usize,
    samples_per_agent: usize,
    dim: usize,
    shift: f64,
    test_size: usize,
    seed: u64,
) -> Result<FederatedDataset, TaskError> {
    if units == 0 || agents_per_unit == 0 || samples_per_agent == 0 || dim == 0 {
        return Err(TaskError::EmptyCounts);
    }
    let mut gt_rng = DetRng::keyed(seed, &[stream::DATA_GROUND_TRUTH]);
    let w_star = DVector::from_fn(dim, |_, _| gt_rng.normal());

    let label_of = |u: &DVector<f64>, v: f64| -> f64 {
        if u.dot(&w_star) + v > 0.0 {
            1.0
        } else {
            0.0
        }
    };

    let mut shards = Vec::with_capacity(units);
    for p in 0..units {
        let mut unit_shards = Vec::with_capacity(agents_per_unit);
        for k in 0..agents_per_unit {
            let mut shift_rng = DetRng::keyed(seed, &[stream::DATA_SHIFT, p as u64, k as u64]);
            let offset = DVector::from_fn(dim, |_, _| shift_rng.normal() * shift);
            let mut feat_rng = DetRng::keyed(seed, &[stream::DATA_FEATURES, p as u64, k as u64]);
            let mut noise_rng = DetRng::keyed(seed, &[stream::DATA_NOISE, p as u64, k as u64]);
            let mut features = DMatrix::zeros(samples_per_agent, dim);
            let mut labels = DVector::zeros(samples_per_agent);
            for n in 0..samples_per_agent {
                let u = DVector::from_fn(dim, |_, _| feat_rng.normal());
                let v = noise_rng.normal() * LABEL_NOISE_STD;
                labels[n] = label_of(&u, v);
                let stored = &u + &offset;
                features.row_mut(n).copy_from(&stored.transpose());
            }
            unit_shards.push(AgentShard { features, labels });
        }
        shards.push(unit_shards);
    }

    let test_set = if test_size > 0 {
        let mut test_rng = DetRng::keyed(seed, &[stream::DATA_TEST]);
        let mut features = DMatrix::zeros(test_size, dim);
        let mut labels = DVector::zeros(test_size);
        for n in 0..test_size {
            let u = DVector::from_fn(dim, |_, _| test_rng.normal());
            let v = test_rng.normal() * LABEL_NOISE_STD;
            labels[n] = label_of(&u, v);
            features.row_mut(n).copy_from(&u.transpose());
        }
        Some(AgentShard { features, labels })
    } else {
        None
    };

    Ok(FederatedDataset {
        units,
        agents_per_unit,
        dim,
        shards,
        task_kind: TaskKind::Classification,
        ground_truth: None,
        test_set,
    })
}

/// How CSV rows are split across the P x K agent grid (row ranges are
/// assigned in unit-major order).
#[derive(Clone, Debug)]
pub enum PartitionSpec {
    /// As even as possible; earlier agents get the remainder.
    Equal,
    /// Explicit row count per agent, unit-major, length P*K.
    Counts(Vec<usize>),
    /// Proportions drawn from a symmetric Dirichlet(alpha); each agent is
    /// guaranteed at least one row.
    Dirichlet { alpha: f64, seed: u64 },
}

fn partition_counts(
    spec: &PartitionSpec,
    total_rows: usize,
    units: usize,
    agents_per_unit: usize,
) -> Result<Vec<usize>, TaskError> {
    let slots = units * agents_per_unit;
    let counts = match spec {
        PartitionSpec::Equal => {
            let base = total_rows / slots;
            let rem = total_rows % slots;
            (0..slots).map(|i| base + usize::from(i < rem)).collect()
        }
        PartitionSpec::Counts(c) => c.clone(),
        PartitionSpec::Dirichlet { alpha, seed } => {
            let mut rng = DetRng::keyed(*seed, &[stream::PARTITION]);
            // Gamma(alpha) via Marsaglia-Tsang (with the alpha < 1 boost).
            let mut gamma = |a: f64| -> f64 {
                let boost = if a < 1.0 {
                    rng.next_f64().powf(1.0 / a)
                } else {
                    1.0
                };
                let d = a.max(1.0) - 1.0 / 3.0;
                let c = 1.0 / (9.0 * d).sqrt();
                loop {
                    let x = rng.normal();
                    let vv = (1.0 + c * x).powi(3);
                    if vv <= 0.0 {
                        continue;
                    }
                    let u = rng.next_f64();
                    if u.ln() < 0.5 * x * x + d - d * vv + d * vv.ln() {
                        return boost * d * vv;
                    }
                }
            };
            let weights: Vec<f64> = (0..slots).map(|_| gamma(*alpha)).collect();
            let wsum: f64 = weights.iter().sum();
            let spare = total_rows.saturating_sub(slots);
            let mut counts: Vec<usize> = weights
                .iter()
                .map(|w| 1 + (w / wsum * spare as f64).floor() as usize)
                .collect();
            let mut assigned: usize = counts.iter().sum();
            let mut i = 0;
            while assigned < total_rows {
                counts[i % slots] += 1;
                assigned += 1;
                i += 1;
            }
            counts
        }
    };
    if counts.len() != slots {
        return Err(TaskError::PartitionMismatch {
            assigned: counts.len(),
            available: slots,
        });
    }
    let assigned: usize = counts.iter().sum();
    if assigned != total_rows {
        return Err(TaskError::PartitionMismatch { assigned, available: total_rows });
    }
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(TaskError::EmptyAgent {
                unit: i / agents_per_unit,
                agent: i % agents_per_unit,
            });
        }
    }
    Ok(counts)
}

/// Load header-less "label,f1,...,fM" rows and split them across agents.
pub fn load_csv(
    path: impl AsRef<Path>,
    task_kind: TaskKind,
    units: usize,
    agents_per_unit: usize,
    spec: &PartitionSpec,
) -> Result<FederatedDataset, TaskError> {
    let path_str = path.as_ref().display().to_string();
    let file = std::fs::File::open(path.as_ref()).map_err(|source| TaskError::Io {
        path: path_str.clone(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| TaskError::Io { path: path_str.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(TaskError::MalformedRow {
                line: line_no,
                reason: "expected label plus at least one feature".into(),
            });
        }
        let mut values = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: f64 = f.trim().parse().map_err(|_| TaskError::MalformedRow {
                line: line_no,
                reason: format!("non-numeric field '{}'", f.trim()),
            })?;
            values.push(v);
        }
        let label = values[0];
        let feats = values[1..].to_vec();
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(TaskError::MalformedRow {
                    line: line_no,
                    reason: format!("expected {} features, found {}", d, feats.len()),
                })
            }
            _ => {}
        }
        rows.push((label, feats));
    }
    if rows.is_empty() {
        return Err(TaskError::EmptyFile { path: path_str });
    }
    let dim = dim.unwrap();
    let counts = partition_counts(spec, rows.len(), units, agents_per_unit)?;

    let mut shards = Vec::with_capacity(units);
    let mut cursor = 0usize;
    for p in 0..units {
        let mut unit_shards = Vec::with_capacity(agents_per_unit);
        for k in 0..agents_per_unit {
            let n = counts[p * agents_per_unit + k];
            let mut features = DMatrix::zeros(n, dim);
            let mut labels = DVector::zeros(n);
            for i in 0..n {
                let (label, feats) = &rows[cursor + i];
                labels[i] = *label;
                for (j, &f) in feats.iter().enumerate() {
                    features[(i, j)] = f;
                }
            }
            cursor += n;
            unit_shards.push(AgentShard { features, labels });
        }
        shards.push(unit_shards);
    }
    Ok(FederatedDataset {
        units,
        agents_per_unit,
        dim,
        shards,
        task_kind,
        ground_truth: None,
        test_set: None,
    })
}

/// Closed-form regression optimum and the empirical moments behind it.
#[derive(Clone, Debug)]
pub struct OptimumBundle {
    pub w_o: DVector<f64>,
    pub r_u_hat: DMatrix<f64>,
    pub r_uv_hat: DVector<f64>,
}

/// Empirical second-moment matrix: triple average over units, agents, samples
/// of u u^T (each agent weighted equally regardless of its sample count).
pub fn empirical_feature_moment(data: &FederatedDataset) -> DMatrix<f64> {
    let m = data.dim;
    let mut r = DMatrix::zeros(m, m);
    let mut agents = 0usize;
    for shard in data.all_shards() {
        let n = shard.len();
        let mut local = DMatrix::zeros(m, m);
        for i in 0..n {
            let u = shard.feature_row(i);
            local += &u * u.transpose();
        }
        r += local / n as f64;
        agents += 1;
    }
    r / agents as f64
}

/// w_o = (R_u + rho I)^{-1} (R_u w* + r_uv), with R_u and r_uv the triple
/// averages of u u^T and v u (v recovered as d - u^T w*).
pub fn closed_form_optimum(data: &FederatedDataset, rho: f64) -> Result<OptimumBundle, TaskError> {
    if data.task_kind != TaskKind::Regression {
        return Err(TaskError::NoGroundTruth);
    }
    let gt = data.ground_truth.as_ref().ok_or(TaskError::NoGroundTruth)?;
    let m = data.dim;
    let r_u_hat = empirical_feature_moment(data);
    let mut r_uv_hat = DVector::zeros(m);
    let mut agents = 0usize;
    for shard in data.all_shards() {
        let n = shard.len();
        let mut local = DVector::zeros(m);
        for i in 0..n {
            let u = shard.feature_row(i);
            let v = shard.labels[i] - u.dot(&gt.w_star);
            local += u * v;
        }
        r_uv_hat += local / n as f64;
        agents += 1;
    }
    r_uv_hat /= agents as f64;

    let system = &r_u_hat + DMatrix::identity(m, m) * rho;
    let rhs = &r_u_hat * &gt.w_star + &r_uv_hat;
    let chol = system.clone().cholesky().ok_or(TaskError::SingularSystem)?;
    let w_o = chol.solve(&rhs);
    // Residual guard on the linear solve itself.
    let resid = (&system * &w_o - &rhs).norm();
    if resid > 1e-10 * rhs.norm().max(1.0) {
        return Err(TaskError::SingularSystem);
    }
    Ok(OptimumBundle { w_o, r_u_hat, r_uv_hat })
}

const GD_GRAD_TOL: f64 = 1e-9;
const GD_MAX_ITERS: usize = 2_000_000;

/// Full-batch gradient of the weighted average of shard risks.
pub fn weighted_gradient(
    shards: &[(&AgentShard, f64)],
    loss: &Loss,
    w: &DVector<f64>,
) -> DVector<f64> {
    let mut g = DVector::zeros(w.len());
    for (shard, weight) in shards {
        g += shard_gradient(loss, shard, w) * *weight;
    }
    g
}

/// Deterministic full-batch gradient descent on a weighted average of shard
/// risks, run until the gradient norm drops below 1e-9.
pub fn numeric_optimum_weighted(
    shards: &[(&AgentShard, f64)],
    loss: &Loss,
    dim: usize,
) -> Result<DVector<f64>, TaskError> {
    if loss.rho <= 0.0 {
        return Err(TaskError::NotStronglyConvex);
    }
    // Step size from the curvature of the weighted objective.
    let mut r = DMatrix::zeros(dim, dim);
    for (shard, weight) in shards {
        let n = shard.len();
        let mut local = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let u = shard.feature_row(i);
            local += &u * u.transpose();
        }
        r += local * (*weight / n as f64);
    }
    let lambda_max = r
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |m, &l| m.max(l));
    let lipschitz = match loss.kind {
        LossKind::Quadratic => 2.0 * (lambda_max + loss.rho),
        LossKind::Logistic => 0.25 * lambda_max + 2.0 * loss.rho,
    };
    let step = 1.0 / lipschitz;

    let mut w = DVector::zeros(dim);
    for _ in 0..GD_MAX_ITERS {
        let g = weighted_gradient(shards, loss, &w);
        let gnorm = g.norm();
        if gnorm <= GD_GRAD_TOL {
            return Ok(w);
        }
        w -= g * step;
    }
    let g = weighted_gradient(shards, loss, &w);
    Err(TaskError::NoConvergence(g.norm(), GD_MAX_ITERS))
}

/// Minimizer of the global objective (equal agent weights).
pub fn numeric_optimum(data: &FederatedDataset, loss: &Loss) -> Result<DVector<f64>, TaskError> {
    let agents = (data.units * data.agents_per_unit) as f64;
    let shards: Vec<(&AgentShard, f64)> = data.all_shards().map(|s| (s, 1.0 / agents)).collect();
    numeric_optimum_weighted(&shards, loss, data.dim)
}

/// Minimizer of a single agent's empirical risk.
pub fn numeric_optimum_shard(shard: &AgentShard, loss: &Loss) -> Result<DVector<f64>, TaskError> {
    numeric_optimum_weighted(&[(shard, 1.0)], loss, shard.features.ncols())
}
