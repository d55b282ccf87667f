//! The privatized GFL training loop: client multi-epoch SGD, masked server
//! aggregation, and inter-server diffusion with link noise.
//!
//! All randomness comes from counter-based streams keyed by (unit, agent,
//! round), so a run is bit-reproducible for a given seed regardless of how
//! many worker threads execute the client updates.

use nalgebra::DVector;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::graph::CombinationMatrix;
use crate::privacy::{
    client_masks, dh_keygen, dh_shared_secret, draw_link_noise, DhParams, PairwiseSeeds,
    PerturbationScheme, PrivacyAccount, PrivacyError,
};
use crate::rng::{stream, DetRng};
use crate::tasks::{AgentShard, FederatedDataset, Loss, TaskKind};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config wants {wanted} participants but units only have {available} agents")]
    TooManyParticipants { wanted: usize, available: usize },
    #[error("combination matrix has {matrix} units but dataset has {data}")]
    UnitMismatch { matrix: usize, data: usize },
    #[error("epoch range ({0}, {1}) is invalid; need 1 <= lo <= hi")]
    BadEpochRange(u64, u64),
    #[error("batch range ({0}, {1}) is invalid; need 1 <= lo <= hi")]
    BadBatchRange(usize, usize),
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("agent shard (p={0}, k={1}) is empty")]
    EmptyShard(usize, usize),
    #[error("test error requested on an empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

/// Full experiment configuration for one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mu: f64,
    pub rounds: u64,
    /// L: participants sampled per unit per round.
    pub participants_per_unit: usize,
    /// Per-agent epoch counts E_pk are drawn once from this inclusive range.
    pub epoch_range: (u64, u64),
    /// Per-agent mini-batch sizes B_pk, drawn once, clamped to the shard size.
    pub batch_range: (usize, usize),
    pub scheme: PerturbationScheme,
    pub secret_sharing_masks: bool,
    pub seed: u64,
    /// Gradient-norm bound fed to the accountant column; None leaves the
    /// epsilon metric empty.
    pub gradient_bound: Option<f64>,
    /// Keep the full per-round model trajectory (used by coupled-run
    /// diagnostics; costs P * M floats per round).
    pub record_history: bool,
}

impl TrainConfig {
    pub fn basic(mu: f64, rounds: u64, participants: usize, seed: u64) -> Self {
        Self {
            mu,
            rounds,
            participants_per_unit: participants,
            epoch_range: (1, 1),
            batch_range: (1, usize::MAX),
            scheme: PerturbationScheme::none(),
            secret_sharing_masks: false,
            seed,
            gradient_bound: None,
            record_history: false,
        }
    }
}

/// Per-agent epoch and batch assignments, fixed at initialization.
#[derive(Clone, Debug)]
pub struct AgentSchedule {
    pub epochs: Vec<Vec<u64>>,
    pub batches: Vec<Vec<usize>>,
}

impl AgentSchedule {
    pub fn build(config: &TrainConfig, data: &FederatedDataset) -> Result<Self, EngineError> {
        let (e_lo, e_hi) = config.epoch_range;
        if e_lo < 1 || e_lo > e_hi {
            return Err(EngineError::BadEpochRange(e_lo, e_hi));
        }
        let (b_lo, b_hi) = config.batch_range;
        if b_lo < 1 || b_lo > b_hi {
            return Err(EngineError::BadBatchRange(b_lo, b_hi));
        }
        let mut epochs = Vec::with_capacity(data.units);
        let mut batches = Vec::with_capacity(data.units);
        for p in 0..data.units {
            let mut unit_epochs = Vec::with_capacity(data.agents_per_unit);
            let mut unit_batches = Vec::with_capacity(data.agents_per_unit);
            for k in 0..data.agents_per_unit {
                let shard_len = data.shard(p, k).len();
                if shard_len == 0 {
                    return Err(EngineError::EmptyShard(p, k));
                }
                let mut rng =
                    DetRng::keyed(config.seed, &[stream::AGENT_SCHEDULE, p as u64, k as u64]);
                unit_epochs.push(rng.range_inclusive(e_lo, e_hi));
                let hi = b_hi.min(shard_len);
                let lo = b_lo.min(hi);
                unit_batches.push(rng.range_inclusive(lo as u64, hi as u64) as usize);
            }
            epochs.push(unit_epochs);
            batches.push(unit_batches);
        }
        Ok(Self { epochs, batches })
    }
}

/// Models held by the P servers after a combination step.
#[derive(Clone, Debug)]
pub struct NetworkState {
    pub models: Vec<DVector<f64>>,
    pub iteration: u64,
}

impl NetworkState {
    pub fn zeros(units: usize, dim: usize) -> Self {
        Self { models: vec![DVector::zeros(dim); units], iteration: 0 }
    }
}

/// One metrics row per combination step.
#[derive(Clone, Debug)]
pub struct RoundMetrics {
    pub iteration: u64,
    pub msd_centroid: Option<f64>,
    pub msd_avg: Option<f64>,
    pub disagreement: f64,
    pub test_error: Option<f64>,
    pub epsilon: Option<f64>,
}

/// Everything a completed run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub final_state: NetworkState,
    /// Max per-sample gradient norm observed over the whole run (the
    /// empirical witness for the bound B).
    pub max_gradient_norm: f64,
    /// Max over rounds and units of ||w_p - w_o||, when an oracle was given.
    pub max_model_error: Option<f64>,
    /// Per-round states, present when `record_history` was set.
    pub history: Option<Vec<NetworkState>>,
}

/// E epochs of mini-batch SGD from `w_start` with effective rate mu / E.
/// Each epoch samples its batch without replacement, fresh per epoch.
/// Returns the final iterate and the max per-sample gradient norm seen.
pub fn client_update(
    w_start: &DVector<f64>,
    shard: &AgentShard,
    loss: &Loss,
    mu: f64,
    epochs: u64,
    batch: usize,
    rng: &mut DetRng,
) -> (DVector<f64>, f64) {
    let n = shard.len();
    let batch = batch.min(n);
    let mut w = w_start.clone();
    let mut max_grad = 0.0_f64;
    for _ in 0..epochs {
        let picks = rng.sample_without_replacement(n, batch);
        let mut g = DVector::zeros(w.len());
        for &idx in &picks {
            let sample_grad = loss.per_sample_gradient(&w, &shard.feature_row(idx), shard.labels[idx]);
            let norm = sample_grad.norm();
            if norm > max_grad {
                max_grad = norm;
            }
            g += sample_grad;
        }
        g /= batch as f64;
        w -= g * (mu / epochs as f64);
    }
    (w, max_grad)
}

/// Per-unit masking context: one DH-derived pairwise seed per agent pair.
struct MaskContext {
    per_unit_seeds: Vec<PairwiseSeeds>,
}

impl MaskContext {
    fn build(config: &TrainConfig, data: &FederatedDataset) -> Result<Self, EngineError> {
        let params = DhParams::default();
        let mut per_unit_seeds = Vec::with_capacity(data.units);
        for p in 0..data.units {
            let k_count = data.agents_per_unit;
            let mut secrets = Vec::with_capacity(k_count);
            let mut publics = Vec::with_capacity(k_count);
            for k in 0..k_count {
                let mut rng =
                    DetRng::keyed(config.seed, &[stream::DH_SECRET, p as u64, k as u64]);
                let secret = rng.range_inclusive(1, params.modulus - 2);
                secrets.push(secret);
                publics.push(dh_keygen(&params, secret)?);
            }
            let mut seeds = PairwiseSeeds::new();
            for a in 0..k_count {
                for b in a + 1..k_count {
                    let shared = dh_shared_secret(&params, secrets[a], publics[b])?;
                    // Mix in the unit index so no two units share a stream.
                    seeds.insert(a, b, shared ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                }
            }
            per_unit_seeds.push(seeds);
        }
        Ok(Self { per_unit_seeds })
    }
}

struct UnitRoundResult {
    psi: DVector<f64>,
    max_gradient_norm: f64,
}

/// One unit's aggregation step: sample L participants, run their local
/// updates, add masks, and average. With secret-sharing masks on, the masks
/// cancel and psi equals the unmasked average up to float summation.
fn unit_round(
    unit: usize,
    round: u64,
    state: &NetworkState,
    data: &FederatedDataset,
    loss: &Loss,
    config: &TrainConfig,
    schedule: &AgentSchedule,
    mask_ctx: Option<&MaskContext>,
) -> Result<UnitRoundResult, EngineError> {
    let l = config.participants_per_unit;
    let mut participant_rng =
        DetRng::keyed(config.seed, &[stream::PARTICIPANTS, unit as u64, round]);
    let participants = participant_rng.sample_without_replacement(data.agents_per_unit, l);

    let masks = match mask_ctx {
        Some(ctx) => Some(client_masks(
            &participants,
            data.dim,
            round,
            &ctx.per_unit_seeds[unit],
        )?),
        None => None,
    };

    let mut psi = DVector::zeros(data.dim);
    let mut max_grad = 0.0_f64;
    for (slot, &agent) in participants.iter().enumerate() {
        let mut batch_rng = DetRng::keyed(
            config.seed,
            &[stream::BATCH, unit as u64, agent as u64, round],
        );
        let (w_local, grad_norm) = client_update(
            &state.models[unit],
            data.shard(unit, agent),
            loss,
            config.mu,
            schedule.epochs[unit][agent],
            schedule.batches[unit][agent],
            &mut batch_rng,
        );
        max_grad = max_grad.max(grad_norm);
        let mut contribution = w_local;
        if let Some(masks) = &masks {
            contribution += &masks[slot];
        }
        psi += contribution;
    }
    psi /= l as f64;
    Ok(UnitRoundResult { psi, max_gradient_norm: max_grad })
}

/// Diffusion combination: w_p = sum_m a_pm (psi_m + g_pm).
pub fn combine(
    a: &CombinationMatrix,
    psi: &[DVector<f64>],
    link_noise: &crate::privacy::LinkNoise,
    iteration: u64,
) -> NetworkState {
    let units = a.units();
    let dim = psi[0].len();
    let mut models = Vec::with_capacity(units);
    for p in 0..units {
        let mut w = DVector::zeros(dim);
        for m in 0..units {
            let weight = a.weight(p, m);
            if weight == 0.0 {
                continue;
            }
            let mut msg = psi[m].clone();
            if let Some(g) = link_noise.get(p, m) {
                msg += g;
            }
            w += msg * weight;
        }
        models.push(w);
    }
    NetworkState { models, iteration }
}

/// Mean of the unit models (ascending unit order).
pub fn centroid(state: &NetworkState) -> DVector<f64> {
    let mut sum = DVector::zeros(state.models[0].len());
    for w in &state.models {
        sum += w;
    }
    sum / state.models.len() as f64
}

/// Misclassification rate of sign(u^T w); u^T w = 0 is classified as class 0.
pub fn test_error(w: &DVector<f64>, test_set: &AgentShard) -> Result<f64, EngineError> {
    let n = test_set.len();
    if n == 0 {
        return Err(EngineError::EmptyTestSet);
    }
    let mut wrong = 0usize;
    for i in 0..n {
        let predicted = if test_set.feature_row(i).dot(w) > 0.0 { 1.0 } else { 0.0 };
        if predicted != test_set.labels[i] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / n as f64)
}

fn round_metrics(
    state: &NetworkState,
    w_o: Option<&DVector<f64>>,
    data: &FederatedDataset,
    account: Option<&PrivacyAccount>,
) -> Result<RoundMetrics, EngineError> {
    let w_c = centroid(state);
    let units = state.models.len() as f64;
    let disagreement = state
        .models
        .iter()
        .map(|w| (w - &w_c).norm_squared())
        .sum::<f64>()
        / units;
    let (msd_centroid, msd_avg) = match w_o {
        Some(w_o) => {
            let msd_c = (&w_c - w_o).norm_squared();
            let msd_a = state
                .models
                .iter()
                .map(|w| (w - w_o).norm_squared())
                .sum::<f64>()
                / units;
            (Some(msd_c), Some(msd_a))
        }
        None => (None, None),
    };
    let test_err = match (&data.task_kind, &data.test_set) {
        (TaskKind::Classification, Some(test)) => Some(test_error(&w_c, test)?),
        _ => None,
    };
    let epsilon = account.map(|acc| acc.epsilon_at(state.iteration));
    Ok(RoundMetrics {
        iteration: state.iteration,
        msd_centroid,
        msd_avg,
        disagreement,
        test_error: test_err,
        epsilon,
    })
}

/// Run the full privatized GFL loop for `config.rounds` iterations.
pub fn run(
    config: &TrainConfig,
    a: &CombinationMatrix,
    data: &FederatedDataset,
    loss: &Loss,
    w_o: Option<&DVector<f64>>,
) -> Result<RunOutput, EngineError> {
    if a.units() != data.units {
        return Err(EngineError::UnitMismatch { matrix: a.units(), data: data.units });
    }
    if config.participants_per_unit > data.agents_per_unit || config.participants_per_unit == 0 {
        return Err(EngineError::TooManyParticipants {
            wanted: config.participants_per_unit,
            available: data.agents_per_unit,
        });
    }
    if config.rounds == 0 {
        return Err(EngineError::NoRounds);
    }
    let schedule = AgentSchedule::build(config, data)?;
    let mask_ctx = if config.secret_sharing_masks {
        Some(MaskContext::build(config, data)?)
    } else {
        None
    };
    let account = config.gradient_bound.map(|b| PrivacyAccount {
        mu: config.mu,
        gradient_bound: b,
        sigma_g: config.scheme.sigma_g,
    });

    let mut state = NetworkState::zeros(data.units, data.dim);
    let mut metrics = Vec::with_capacity(config.rounds as usize);
    let mut max_gradient_norm = 0.0_f64;
    let mut max_model_error: Option<f64> = w_o.map(|_| 0.0);
    let mut history = config.record_history.then(Vec::new);

    for round in 1..=config.rounds {
        let unit_results = run_units(&state, data, loss, config, &schedule, mask_ctx.as_ref(), round)?;
        let mut psi = Vec::with_capacity(data.units);
        for r in unit_results {
            max_gradient_norm = max_gradient_norm.max(r.max_gradient_norm);
            psi.push(r.psi);
        }
        let link_noise = draw_link_noise(&config.scheme, a, data.dim, round, config.seed)?;
        state = combine(a, &psi, &link_noise, round);
        if let (Some(max_err), Some(w_o)) = (max_model_error.as_mut(), w_o) {
            for w in &state.models {
                *max_err = max_err.max((w - w_o).norm());
            }
        }
        metrics.push(round_metrics(&state, w_o, data, account.as_ref())?);
        if let Some(h) = history.as_mut() {
            h.push(state.clone());
        }
    }
    Ok(RunOutput {
        metrics,
        final_state: state,
        max_gradient_norm,
        max_model_error,
        history,
    })
}

#[cfg(feature = "parallel")]
fn run_units(
    state: &NetworkState,
    data: &FederatedDataset,
    loss: &Loss,
    config: &TrainConfig,
    schedule: &AgentSchedule,
    mask_ctx: Option<&MaskContext>,
    round: u64,
) -> Result<Vec<UnitRoundResult>, EngineError> {
    (0..data.units)
        .into_par_iter()
        .map(|p| unit_round(p, round, state, data, loss, config, schedule, mask_ctx))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_units(
    state: &NetworkState,
    data: &FederatedDataset,
    loss: &Loss,
    config: &TrainConfig,
    schedule: &AgentSchedule,
    mask_ctx: Option<&MaskContext>,
    round: u64,
) -> Result<Vec<UnitRoundResult>, EngineError> {
    (0..data.units)
        .map(|p| unit_round(p, round, state, data, loss, config, schedule, mask_ctx))
        .collect()
}
