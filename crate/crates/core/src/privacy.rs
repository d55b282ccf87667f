//! Server-link perturbation schemes, client-side secret-sharing masks with
//! Diffie-Hellman seeded pair streams, and the epsilon(i) accountant.

use nalgebra::DVector;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::graph::CombinationMatrix;
use crate::rng::{stream, DetRng};

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("graph-homomorphic noise requires a_pp > 0, but unit {0} has a_pp = 0")]
    ZeroSelfWeight(usize),
    #[error("missing pairwise seed for agents ({0}, {1})")]
    MissingPairSeed(usize, usize),
    #[error("secret key {key} out of range: need 1 <= key < {max}")]
    SecretOutOfRange { key: u64, max: u64 },
    #[error("public key {key} out of range: need 1 <= key < {max}")]
    PublicOutOfRange { key: u64, max: u64 },
    #[error("epsilon target must be positive, got {0}")]
    NonPositiveEpsilon(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeKind {
    None,
    IndependentLaplace,
    GraphHomomorphic,
}

/// Server-link noise policy. `sigma_g` is the standard deviation; the Laplace
/// scale is sigma_g / sqrt(2) so the per-coordinate variance is sigma_g^2.
#[derive(Clone, Copy, Debug)]
pub struct PerturbationScheme {
    pub kind: SchemeKind,
    pub sigma_g: f64,
}

impl PerturbationScheme {
    pub fn none() -> Self {
        Self { kind: SchemeKind::None, sigma_g: 0.0 }
    }

    pub fn independent_laplace(sigma_g: f64) -> Self {
        Self { kind: SchemeKind::IndependentLaplace, sigma_g }
    }

    pub fn graph_homomorphic(sigma_g: f64) -> Self {
        Self { kind: SchemeKind::GraphHomomorphic, sigma_g }
    }

    pub fn is_active(&self) -> bool {
        self.kind != SchemeKind::None && self.sigma_g > 0.0
    }
}

/// Noise drawn for one combination step. `get(p, m)` is the noise on the
/// message sent by server m to server p (indices follow the combination sum
/// w_p = sum_m a_pm (psi_m + g_pm)).
#[derive(Clone, Debug)]
pub struct LinkNoise {
    units: usize,
    entries: Vec<Option<DVector<f64>>>,
    pub iteration: u64,
}

impl LinkNoise {
    fn zeros(units: usize, iteration: u64) -> Self {
        Self { units, entries: vec![None; units * units], iteration }
    }

    fn set(&mut self, receiver: usize, sender: usize, value: DVector<f64>) {
        self.entries[receiver * self.units + sender] = Some(value);
    }

    pub fn get(&self, receiver: usize, sender: usize) -> Option<&DVector<f64>> {
        self.entries[receiver * self.units + sender].as_ref()
    }

    /// The A-weighted double sum over all links; identically zero for
    /// graph-homomorphic noise.
    pub fn weighted_total(&self, a: &CombinationMatrix, dim: usize) -> DVector<f64> {
        let mut total = DVector::zeros(dim);
        for p in 0..self.units {
            for m in 0..self.units {
                if let Some(g) = self.get(p, m) {
                    total += g * a.weight(p, m);
                }
            }
        }
        total
    }
}

/// Laplace(0, b) sample from an explicit stream (inverse CDF).
pub fn laplace_sample(rng: &mut DetRng, scale_b: f64) -> f64 {
    rng.laplace(scale_b)
}

fn laplace_vector(rng: &mut DetRng, dim: usize, scale_b: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.laplace(scale_b))
}

/// Draw link noise for one combination step.
///
/// independent_laplace: iid per-coordinate Laplace on every directed link
/// with a_pm > 0, self-loops included. graph_homomorphic: one base vector
/// g_p per server; g_mp = g_p for m != p and g_pp = -((1 - a_pp)/a_pp) g_p,
/// so the A-weighted double sum cancels exactly.
pub fn draw_link_noise(
    scheme: &PerturbationScheme,
    a: &CombinationMatrix,
    dim: usize,
    iteration: u64,
    master_seed: u64,
) -> Result<LinkNoise, PrivacyError> {
    let units = a.units();
    let mut noise = LinkNoise::zeros(units, iteration);
    if !scheme.is_active() {
        return Ok(noise);
    }
    let scale = scheme.sigma_g / std::f64::consts::SQRT_2;
    match scheme.kind {
        SchemeKind::None => {}
        SchemeKind::IndependentLaplace => {
            for (receiver, sender) in a.links() {
                let mut rng = DetRng::keyed(
                    master_seed,
                    &[stream::LINK_NOISE, iteration, receiver as u64, sender as u64],
                );
                noise.set(receiver, sender, laplace_vector(&mut rng, dim, scale));
            }
        }
        SchemeKind::GraphHomomorphic => {
            for p in 0..units {
                if a.weight(p, p) <= 0.0 {
                    return Err(PrivacyError::ZeroSelfWeight(p));
                }
            }
            for sender in 0..units {
                let mut rng =
                    DetRng::keyed(master_seed, &[stream::LINK_NOISE, iteration, sender as u64]);
                let base = laplace_vector(&mut rng, dim, scale);
                let app = a.weight(sender, sender);
                for receiver in 0..units {
                    if a.weight(receiver, sender) == 0.0 {
                        continue;
                    }
                    if receiver == sender {
                        noise.set(receiver, sender, &base * (-(1.0 - app) / app));
                    } else {
                        noise.set(receiver, sender, base.clone());
                    }
                }
            }
        }
    }
    Ok(noise)
}

/// Pairwise PRG seeds for secret-sharing masks, keyed by unordered agent pair.
#[derive(Clone, Debug, Default)]
pub struct PairwiseSeeds {
    seeds: BTreeMap<(usize, usize), u64>,
}

impl PairwiseSeeds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: usize, b: usize, seed: u64) {
        self.seeds.insert((a.min(b), a.max(b)), seed);
    }

    pub fn get(&self, a: usize, b: usize) -> Option<u64> {
        self.seeds.get(&(a.min(b), a.max(b))).copied()
    }
}

/// Pairwise antisymmetric masks over the round's participants.
///
/// Mask of agent k is sum_{j > k} PRG(seed_kj, round) - sum_{j < k}
/// PRG(seed_jk, round), ordering by agent id, so the masks telescope to zero
/// over the participant set.
pub fn client_masks(
    participants: &[usize],
    dim: usize,
    round: u64,
    seeds: &PairwiseSeeds,
) -> Result<Vec<DVector<f64>>, PrivacyError> {
    let mut masks = vec![DVector::zeros(dim); participants.len()];
    for (i, &ka) in participants.iter().enumerate() {
        for (j, &kb) in participants.iter().enumerate().skip(i + 1) {
            let seed = seeds
                .get(ka, kb)
                .ok_or(PrivacyError::MissingPairSeed(ka.min(kb), ka.max(kb)))?;
            let lo = ka.min(kb) as u64;
            let hi = ka.max(kb) as u64;
            let mut rng = DetRng::keyed(seed, &[stream::MASK_PRG, round, lo, hi]);
            let noise = DVector::from_fn(dim, |_, _| rng.normal());
            // The lower-id agent adds, the higher-id agent subtracts.
            if ka < kb {
                masks[i] += &noise;
                masks[j] -= &noise;
            } else {
                masks[i] -= &noise;
                masks[j] += &noise;
            }
        }
    }
    Ok(masks)
}

/// Diffie-Hellman group: generator v modulo prime t.
/// Defaults fit in 64-bit arithmetic with 128-bit intermediates.
#[derive(Clone, Copy, Debug)]
pub struct DhParams {
    pub modulus: u64,
    pub generator: u64,
}

impl Default for DhParams {
    fn default() -> Self {
        // t = 2^31 - 1 (prime), v = 7.
        Self { modulus: (1 << 31) - 1, generator: 7 }
    }
}

fn mod_pow(base: u64, mut exp: u64, modulus: u64) -> u64 {
    let m = modulus as u128;
    let mut result: u128 = 1;
    let mut b = base as u128 % m;
    while exp > 0 {
        if exp & 1 == 1 {
            result = result * b % m;
        }
        b = b * b % m;
        exp >>= 1;
    }
    result as u64
}

/// Public key v^c mod t by square-and-multiply.
pub fn dh_keygen(params: &DhParams, secret: u64) -> Result<u64, PrivacyError> {
    if secret == 0 || secret >= params.modulus - 1 {
        return Err(PrivacyError::SecretOutOfRange { key: secret, max: params.modulus - 1 });
    }
    Ok(mod_pow(params.generator, secret, params.modulus))
}

/// Shared value y^c mod t; symmetric in the two parties.
pub fn dh_shared_secret(
    params: &DhParams,
    my_secret: u64,
    their_public: u64,
) -> Result<u64, PrivacyError> {
    if my_secret == 0 || my_secret >= params.modulus - 1 {
        return Err(PrivacyError::SecretOutOfRange { key: my_secret, max: params.modulus - 1 });
    }
    if their_public == 0 || their_public >= params.modulus {
        return Err(PrivacyError::PublicOutOfRange { key: their_public, max: params.modulus });
    }
    Ok(mod_pow(their_public, my_secret, params.modulus))
}

/// (mu, B, sigma_g) bundle relating noise scale and the privacy loss
/// epsilon(i) = sqrt(2) mu B (1 + i) i / sigma_g.
#[derive(Clone, Copy, Debug)]
pub struct PrivacyAccount {
    pub mu: f64,
    pub gradient_bound: f64,
    pub sigma_g: f64,
}

impl PrivacyAccount {
    pub fn epsilon_at(&self, iteration: u64) -> f64 {
        epsilon_of(self, iteration)
    }
}

/// Privacy loss after i iterations; +infinity when sigma_g = 0.
pub fn epsilon_of(account: &PrivacyAccount, iteration: u64) -> f64 {
    if account.sigma_g == 0.0 {
        return f64::INFINITY;
    }
    let i = iteration as f64;
    std::f64::consts::SQRT_2 * account.mu * account.gradient_bound * (1.0 + i) * i
        / account.sigma_g
}

/// Noise scale achieving a target epsilon at iteration i.
pub fn sigma_for_epsilon(
    mu: f64,
    gradient_bound: f64,
    iteration: u64,
    epsilon_target: f64,
) -> Result<f64, PrivacyError> {
    if epsilon_target <= 0.0 {
        return Err(PrivacyError::NonPositiveEpsilon(epsilon_target));
    }
    let i = iteration as f64;
    Ok(std::f64::consts::SQRT_2 * mu * gradient_bound * (1.0 + i) * i / epsilon_target)
}

/// Worst-case trajectory divergence from a one-agent substitution: 2 mu B i.
pub fn sensitivity_bound(mu: f64, gradient_bound: f64, iteration: u64) -> f64 {
    2.0 * mu * gradient_bound * iteration as f64
}
