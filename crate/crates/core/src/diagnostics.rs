//! Measurable theory constants (gradient-noise moments, Lipschitz and
//! convexity estimates, model drift, gradient bound) and empirical checks of
//! the sensitivity and boundedness claims.

use nalgebra::DVector;
use thiserror::Error;

use crate::engine::{run, AgentSchedule, EngineError, RunOutput, TrainConfig};
use crate::graph::CombinationMatrix;
use crate::privacy::{sensitivity_bound, PerturbationScheme};
use crate::rng::DetRng;
use crate::tasks::{
    empirical_feature_moment, numeric_optimum_shard, FederatedDataset, Loss, LossKind, TaskError,
};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("per-agent optima grid has wrong shape")]
    OptimaShapeMismatch,
    #[error("coupled datasets differ outside agent (p=0, k=0): shard (p={0}, k={1}) changed")]
    DatasetsDifferTooMuch(usize, usize),
    #[error("coupled datasets have different shapes")]
    ShapeMismatch,
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Empirically measured constants of the convergence analysis.
#[derive(Clone, Debug)]
pub struct TheoryConstants {
    /// Per-unit beta_{s,p}^2 = (6 delta^2 / L)(1 + (1/K) sum_k 1/E_pk).
    pub beta_s_p_sq: Vec<f64>,
    /// Per-unit sigma_{s,p}^2: (1/(LK)) sum_k (12/E_pk + 3) times the mean
    /// squared per-sample gradient norm at w_o.
    pub sigma_s_p_sq: Vec<f64>,
    /// (2/P) sum_p beta_{s,p}^2.
    pub beta_s_sq: f64,
    /// (1/P) sum_p sigma_{s,p}^2.
    pub sigma_s_sq: f64,
    /// Max per-sample gradient Lipschitz constant over the dataset.
    pub delta: f64,
    /// Strong-convexity estimate of the empirical risks.
    pub nu: f64,
    /// Model drift: max_{p,k} ||w_o - w_o_pk||.
    pub xi: f64,
    /// Measured gradient-norm bound B (max per-sample gradient norm seen
    /// along a pilot run).
    pub gradient_bound: f64,
}

impl TheoryConstants {
    pub fn report_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("delta            {:.12e}", self.delta),
            format!("nu               {:.12e}", self.nu),
            format!("xi               {:.12e}", self.xi),
            format!("gradient_bound   {:.12e}", self.gradient_bound),
            format!("beta_s_sq        {:.12e}", self.beta_s_sq),
            format!("sigma_s_sq       {:.12e}", self.sigma_s_sq),
        ];
        for (p, (b, s)) in self.beta_s_p_sq.iter().zip(&self.sigma_s_p_sq).enumerate() {
            lines.push(format!("unit_{p}.beta_s_p_sq   {b:.12e}"));
            lines.push(format!("unit_{p}.sigma_s_p_sq  {s:.12e}"));
        }
        lines
    }
}

/// Local optima of every agent's own empirical risk.
pub fn per_agent_optima(
    data: &FederatedDataset,
    loss: &Loss,
) -> Result<Vec<Vec<DVector<f64>>>, TaskError> {
    data.shards
        .iter()
        .map(|unit| {
            unit.iter()
                .map(|shard| numeric_optimum_shard(shard, loss))
                .collect()
        })
        .collect()
}

/// Evaluate the measurable constants over the dataset.
///
/// `measured_b` is the max per-sample gradient norm observed along a pilot
/// noise-free run (see [`measure_gradient_bound`]).
pub fn compute_constants(
    data: &FederatedDataset,
    loss: &Loss,
    w_o: &DVector<f64>,
    per_agent_optima: &[Vec<DVector<f64>>],
    schedule: &AgentSchedule,
    participants_per_unit: usize,
    measured_b: f64,
) -> Result<TheoryConstants, DiagnosticsError> {
    if per_agent_optima.len() != data.units
        || per_agent_optima.iter().any(|u| u.len() != data.agents_per_unit)
    {
        return Err(DiagnosticsError::OptimaShapeMismatch);
    }
    let l = participants_per_unit as f64;
    let k_count = data.agents_per_unit as f64;

    let mut delta = 0.0_f64;
    for shard in data.all_shards() {
        for i in 0..shard.len() {
            delta = delta.max(loss.per_sample_lipschitz(&shard.feature_row(i)));
        }
    }

    let nu = match loss.kind {
        LossKind::Quadratic => {
            let r = empirical_feature_moment(data);
            let lambda_min = r
                .symmetric_eigenvalues()
                .iter()
                .fold(f64::INFINITY, |m, &x| m.min(x));
            2.0 * (lambda_min.max(0.0) + loss.rho)
        }
        LossKind::Logistic => 2.0 * loss.rho,
    };

    let mut beta_s_p_sq = Vec::with_capacity(data.units);
    let mut sigma_s_p_sq = Vec::with_capacity(data.units);
    for p in 0..data.units {
        let inv_e_mean = (0..data.agents_per_unit)
            .map(|k| 1.0 / schedule.epochs[p][k] as f64)
            .sum::<f64>()
            / k_count;
        beta_s_p_sq.push(6.0 * delta * delta / l * (1.0 + inv_e_mean));

        let mut sigma = 0.0;
        for k in 0..data.agents_per_unit {
            let shard = data.shard(p, k);
            let n = shard.len();
            let mean_sq_grad = (0..n)
                .map(|i| {
                    loss.per_sample_gradient(w_o, &shard.feature_row(i), shard.labels[i])
                        .norm_squared()
                })
                .sum::<f64>()
                / n as f64;
            sigma += (12.0 / schedule.epochs[p][k] as f64 + 3.0) * mean_sq_grad;
        }
        sigma_s_p_sq.push(sigma / (l * k_count));
    }
    let units = data.units as f64;
    let beta_s_sq = 2.0 / units * beta_s_p_sq.iter().sum::<f64>();
    let sigma_s_sq = sigma_s_p_sq.iter().sum::<f64>() / units;

    let mut xi = 0.0_f64;
    for unit in per_agent_optima {
        for w_local in unit {
            xi = xi.max((w_o - w_local).norm());
        }
    }

    Ok(TheoryConstants {
        beta_s_p_sq,
        sigma_s_p_sq,
        beta_s_sq,
        sigma_s_sq,
        delta,
        nu,
        xi,
        gradient_bound: measured_b,
    })
}

/// Max per-sample gradient norm along a noise-free pilot run with the given
/// configuration (Lemma-4 style existence witness for B).
pub fn measure_gradient_bound(
    config: &TrainConfig,
    a: &CombinationMatrix,
    data: &FederatedDataset,
    loss: &Loss,
) -> Result<f64, EngineError> {
    let mut pilot = config.clone();
    pilot.scheme = PerturbationScheme::none();
    pilot.record_history = false;
    Ok(run(&pilot, a, data, loss, None)?.max_gradient_norm)
}

/// Per-iteration divergence of two coupled runs plus the 2 mu B i bound.
#[derive(Clone, Debug)]
pub struct SensitivityTrace {
    /// max_p ||w_p,i - w'_p,i|| for i = 1..rounds.
    pub divergence: Vec<f64>,
    /// 2 mu B i at the same iterations.
    pub bound: Vec<f64>,
    /// The measured B used for the bound.
    pub gradient_bound: f64,
}

impl SensitivityTrace {
    pub fn within_bound(&self) -> bool {
        self.divergence
            .iter()
            .zip(&self.bound)
            .all(|(d, b)| d <= b)
    }
}

fn shards_equal(a: &crate::tasks::AgentShard, b: &crate::tasks::AgentShard) -> bool {
    a.features == b.features && a.labels == b.labels
}

/// Run two coupled noise-free trainings on datasets that differ only in
/// agent (0, 0)'s shard, with identical seeds, and record the per-iteration
/// max-over-units model distance.
pub fn sensitivity_experiment(
    config: &TrainConfig,
    a: &CombinationMatrix,
    data: &FederatedDataset,
    data_prime: &FederatedDataset,
    loss: &Loss,
) -> Result<SensitivityTrace, DiagnosticsError> {
    if data.units != data_prime.units
        || data.agents_per_unit != data_prime.agents_per_unit
        || data.dim != data_prime.dim
    {
        return Err(DiagnosticsError::ShapeMismatch);
    }
    for p in 0..data.units {
        for k in 0..data.agents_per_unit {
            if (p, k) != (0, 0) && !shards_equal(data.shard(p, k), data_prime.shard(p, k)) {
                return Err(DiagnosticsError::DatasetsDifferTooMuch(p, k));
            }
        }
    }
    let mut coupled = config.clone();
    coupled.scheme = PerturbationScheme::none();
    coupled.secret_sharing_masks = false;
    coupled.record_history = true;

    let base = run(&coupled, a, data, loss, None)?;
    let prime = run(&coupled, a, data_prime, loss, None)?;
    let b = base.max_gradient_norm.max(prime.max_gradient_norm);

    let base_hist = base.history.expect("history was requested");
    let prime_hist = prime.history.expect("history was requested");
    let mut divergence = Vec::with_capacity(base_hist.len());
    let mut bound = Vec::with_capacity(base_hist.len());
    for (s, s_prime) in base_hist.iter().zip(&prime_hist) {
        let d = s
            .models
            .iter()
            .zip(&s_prime.models)
            .map(|(w, w2)| (w - w2).norm())
            .fold(0.0_f64, f64::max);
        divergence.push(d);
        bound.push(sensitivity_bound(config.mu, b, s.iteration));
    }
    Ok(SensitivityTrace { divergence, bound, gradient_bound: b })
}

/// Post-run boundedness report: largest model error, largest per-sample
/// gradient, and a divergence flag for any non-finite value.
#[derive(Clone, Debug)]
pub struct BoundednessReport {
    pub max_model_error: Option<f64>,
    pub max_gradient_norm: f64,
    pub diverged: bool,
}

pub fn boundedness_check(output: &RunOutput) -> BoundednessReport {
    let mut diverged = !output.max_gradient_norm.is_finite();
    if let Some(e) = output.max_model_error {
        diverged |= !e.is_finite();
    }
    for w in &output.final_state.models {
        if !w.iter().all(|x| x.is_finite()) {
            diverged = true;
        }
    }
    for row in &output.metrics {
        if !row.disagreement.is_finite()
            || row.msd_centroid.is_some_and(|v| !v.is_finite())
            || row.msd_avg.is_some_and(|v| !v.is_finite())
        {
            diverged = true;
        }
    }
    BoundednessReport {
        max_model_error: output.max_model_error,
        max_gradient_norm: output.max_gradient_norm,
        diverged,
    }
}

/// Replace agent (0, 0)'s shard with freshly drawn samples from a different
/// stream; utility for building coupled dataset pairs.
pub fn substitute_first_shard(data: &FederatedDataset, seed: u64) -> FederatedDataset {
    let mut prime = data.clone();
    let shard = &mut prime.shards[0][0];
    let mut rng = DetRng::keyed(seed, &[0xD1FF]);
    let n = shard.len();
    for i in 0..n {
        for j in 0..data.dim {
            shard.features[(i, j)] = rng.normal();
        }
        shard.labels[i] = match data.task_kind {
            crate::tasks::TaskKind::Regression => rng.normal(),
            crate::tasks::TaskKind::Classification => f64::from(rng.next_f64() > 0.5),
        };
    }
    prime
}
