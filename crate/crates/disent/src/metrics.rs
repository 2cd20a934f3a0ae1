//! Read-only training diagnostics.
//!
//! Everything here is computed over a fixed probe set of states sampled with
//! a dedicated seed, so evaluations of the same checkpoint are directly
//! comparable across runs and never perturb the model.

use crate::env::{self, EnvConfig, GridState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::selectivity::{reward_value, selectivity_value, SelectivityConfig};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Seed of the evaluation probe stream, fixed so metrics from different
/// training runs share one probe set.
pub const PROBE_SEED: u64 = 20_260_81;

/// Default probe size.
pub const DEFAULT_PROBE_SIZE: usize = 256;

/// Sample a probe set by repeated environment resets.
pub fn probe_states<T: Scalar>(
    env_cfg: &EnvConfig,
    seed: u64,
    size: usize,
) -> Result<Vec<GridState<T>>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..size).map(|_| env::reset(env_cfg, &mut rng)).collect()
}

/// The evaluation artifacts: latent-vs-factor slopes, per-policy action
/// distributions, per-(policy, action) selectivity and objective means, and
/// reconstruction quality.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsBundle {
    pub factor_labels: Vec<String>,
    pub action_labels: Vec<String>,
    /// `[latent][factor]` standardized regression slopes (== correlations).
    pub slope_matrix: Vec<Vec<f64>>,
    /// `[latent][factor]` raw slopes of factor regressed on feature.
    pub raw_slope_matrix: Vec<Vec<f64>>,
    /// `[policy][action]` mean action probabilities.
    pub policy_matrix: Vec<Vec<f64>>,
    /// `[policy][action]` mean selectivity.
    pub selectivity_matrix: Vec<Vec<f64>>,
    /// `[policy][action]` mean of `-pi_k(a|s) * reward(sel(s,a,k))`.
    pub objective_matrix: Vec<Vec<f64>>,
    /// Mean per-pixel squared reconstruction error over the probe set.
    pub recon_mse: f64,
    pub probe_set_size: usize,
}

/// Pearson correlation; equals the OLS slope after standardizing both
/// variables to unit variance. Zero-variance inputs give 0.
pub fn standardized_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx.sqrt() * vy.sqrt())
    }
}

/// OLS slope of `ys` regressed on `xs`. Zero-variance `xs` give 0.
pub fn raw_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
    }
    if vx == 0.0 {
        0.0
    } else {
        cov / vx
    }
}

/// Slopes of each true factor against each latent feature over the probe
/// set. Returns `(standardized, raw)`, both indexed `[feature][factor]`.
/// A single-state probe has no variance anywhere, so its slopes are all 0.
pub fn slope_matrices<T: Scalar>(
    model: &Model<T>,
    env_cfg: &EnvConfig,
    probe: &[GridState<T>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if probe.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    let n = model.latent_dim();
    let mut features: Vec<Vec<f64>> = vec![Vec::with_capacity(probe.len()); n];
    let mut factors: Vec<Vec<f64>> = Vec::new();
    for (i, state) in probe.iter().enumerate() {
        let h = model.encode_value(&state.observation)?;
        for (k, v) in h.data().iter().enumerate() {
            features[k].push(v.as_f64());
        }
        let f = env::ground_truth_factors(env_cfg, state);
        if i == 0 {
            factors = vec![Vec::with_capacity(probe.len()); f.len()];
        }
        for (j, v) in f.iter().enumerate() {
            factors[j].push(v.as_f64());
        }
    }
    let std = features
        .iter()
        .map(|xs| factors.iter().map(|ys| standardized_slope(xs, ys)).collect())
        .collect();
    let raw = features
        .iter()
        .map(|xs| factors.iter().map(|ys| raw_slope(xs, ys)).collect())
        .collect();
    Ok((std, raw))
}

/// Mean action distribution of every policy over the probe set.
pub fn policy_matrix<T: Scalar>(
    model: &Model<T>,
    probe: &[GridState<T>],
) -> Result<Vec<Vec<f64>>> {
    let (k_n, a_n) = (model.num_policies(), model.num_actions());
    let mut out = vec![vec![0.0; a_n]; k_n];
    for state in probe {
        for (k, row) in out.iter_mut().enumerate() {
            let probs = model.policy_probs(&state.observation, k)?;
            for (acc, p) in row.iter_mut().zip(probs) {
                *acc += p.as_f64() / probe.len() as f64;
            }
        }
    }
    Ok(out)
}

/// Mean per-policy entropy (nats) over the probe set.
pub fn policy_entropies<T: Scalar>(
    model: &Model<T>,
    probe: &[GridState<T>],
) -> Result<Vec<f64>> {
    let k_n = model.num_policies();
    let mut out = vec![0.0; k_n];
    for state in probe {
        for (k, acc) in out.iter_mut().enumerate() {
            let probs = model.policy_probs(&state.observation, k)?;
            let h: f64 = probs
                .iter()
                .map(|p| {
                    let p = p.as_f64();
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            *acc += h / probe.len() as f64;
        }
    }
    Ok(out)
}

/// Mean selectivity and mean `-pi * reward` per (policy, action) over the
/// probe set.
pub fn selectivity_and_objective_matrices<T: Scalar>(
    model: &Model<T>,
    env_cfg: &EnvConfig,
    probe: &[GridState<T>],
    cfg: &SelectivityConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (k_n, a_n) = (model.num_policies(), model.num_actions());
    let mut sel_m = vec![vec![0.0; a_n]; k_n];
    let mut obj_m = vec![vec![0.0; a_n]; k_n];
    let w = 1.0 / probe.len() as f64;
    for state in probe {
        let h = model.encode_value(&state.observation)?;
        let h_next: Vec<Tensor<T>> = (0..a_n)
            .map(|a| {
                let succ = env::step(env_cfg, state, a)?;
                model.encode_value(&succ.observation)
            })
            .collect::<Result<_>>()?;
        for k in 0..k_n {
            let probs = model.policy_probs(&state.observation, k)?;
            for a in 0..a_n {
                let sel = selectivity_value(&h, &h_next[a], k, cfg);
                sel_m[k][a] += sel.as_f64() * w;
                obj_m[k][a] -= probs[a].as_f64() * reward_value(sel, cfg).as_f64() * w;
            }
        }
    }
    Ok((sel_m, obj_m))
}

/// Reconstruction quality: mean per-pixel squared error, plus paired
/// original/reconstruction images for the first `samples` probe states.
pub struct ReconReport<T> {
    pub recon_mse: f64,
    pub pairs: Vec<(Tensor<T>, Tensor<T>)>,
}

pub fn reconstruction_report<T: Scalar>(
    model: &Model<T>,
    probe: &[GridState<T>],
    samples: usize,
) -> Result<ReconReport<T>> {
    if probe.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    let mut total = 0.0;
    let mut pixels = 0usize;
    let mut pairs = Vec::new();
    for (i, state) in probe.iter().enumerate() {
        let rec = model.reconstruct_value(&state.observation)?;
        for (a, b) in state.observation.data().iter().zip(rec.data()) {
            let d = a.as_f64() - b.as_f64();
            total += d * d;
        }
        pixels += state.observation.numel();
        if i < samples {
            pairs.push((state.observation.clone(), rec));
        }
    }
    Ok(ReconReport {
        recon_mse: total / pixels as f64,
        pairs,
    })
}

/// Does the slope matrix witness a feature-to-factor assignment? True when
/// every factor has at least one feature with `|slope| > threshold` and
/// those per-factor feature sets are pairwise disjoint.
pub fn factor_assignment_ok(slope: &[Vec<f64>], threshold: f64) -> bool {
    if slope.is_empty() {
        return false;
    }
    let factors = slope[0].len();
    let sets: Vec<Vec<usize>> = (0..factors)
        .map(|j| {
            (0..slope.len())
                .filter(|&k| slope[k][j].abs() > threshold)
                .collect()
        })
        .collect();
    if sets.iter().any(|s| s.is_empty()) {
        return false;
    }
    for a in 0..factors {
        for b in (a + 1)..factors {
            if sets[a].iter().any(|k| sets[b].contains(k)) {
                return false;
            }
        }
    }
    true
}

/// True when every policy row puts more than `min_prob` on its argmax and
/// the argmax actions of all policies cover the whole action set.
pub fn policy_concentration_ok(policy: &[Vec<f64>], min_prob: f64) -> bool {
    if policy.is_empty() {
        return false;
    }
    let actions = policy[0].len();
    let mut covered = vec![false; actions];
    for row in policy {
        let (argmax, &max) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty row");
        if max <= min_prob {
            return false;
        }
        covered[argmax] = true;
    }
    covered.into_iter().all(|c| c)
}

/// Are two columns of a matrix equal within `tol`?
pub fn columns_match(matrix: &[Vec<f64>], a: usize, b: usize, tol: f64) -> bool {
    matrix.iter().all(|row| (row[a] - row[b]).abs() <= tol)
}

/// Largest total probability any policy places on the given action subset.
pub fn max_mass_on_actions(policy: &[Vec<f64>], actions: &[usize]) -> f64 {
    policy
        .iter()
        .map(|row| actions.iter().map(|&a| row[a]).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Compute the full bundle over a probe set.
pub fn metrics_bundle<T: Scalar>(
    model: &Model<T>,
    env_cfg: &EnvConfig,
    probe: &[GridState<T>],
    cfg: &SelectivityConfig,
) -> Result<MetricsBundle> {
    let (slope, raw) = slope_matrices(model, env_cfg, probe)?;
    let policy = policy_matrix(model, probe)?;
    let (sel, obj) = selectivity_and_objective_matrices(model, env_cfg, probe, cfg)?;
    let recon = reconstruction_report(model, probe, 0)?;
    Ok(MetricsBundle {
        factor_labels: env_cfg.factor_labels().iter().map(|s| s.to_string()).collect(),
        action_labels: env_cfg.action_labels().iter().map(|s| s.to_string()).collect(),
        slope_matrix: slope,
        raw_slope_matrix: raw,
        policy_matrix: policy,
        selectivity_matrix: sel,
        objective_matrix: obj,
        recon_mse: recon.recon_mse,
        probe_set_size: probe.len(),
    })
}
