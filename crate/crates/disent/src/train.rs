//! The interleaved training loop.
//!
//! Each step samples a fresh state, takes one SGD step on the encoder and
//! one on the decoder for the reconstruction loss, then for every policy
//! ascends the expected selectivity reward: once through the encoder
//! weights and once through the policy's own weights. Every update line
//! evaluates its gradient at the parameters current when that line runs, so
//! the policy lines see the post-reconstruction encoder.
//!
//! The policy-weight gradient can be estimated either by exact enumeration
//! over the action set or by the score-function (REINFORCE) estimator
//! `E_a[R(a) * grad log pi(a|s)]`; the encoder line always uses exact
//! enumeration.

use crate::env::{self, EnvConfig, GridState};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsBundle};
use crate::model::{param_group, Model, ModelConfig, ParamGroup};
use crate::scalar::Scalar;
use crate::selectivity::{
    build_expected_reward, build_recon_loss, joint_objective, reward_value, selectivity_value,
    SelectivityConfig, SelectivityMode,
};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Enumerate the action set exactly.
    Exact,
    /// Monte-Carlo score-function estimator for the policy-weight line.
    Reinforce,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Exact => "exact",
            Estimator::Reinforce => "reinforce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Estimator::Exact),
            "reinforce" => Ok(Estimator::Reinforce),
            other => Err(Error::Config(format!(
                "unknown estimator `{other}` (expected exact|reinforce)"
            ))),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Encoder learning rate.
    pub eta_f: f64,
    /// Decoder learning rate.
    pub eta_g: f64,
    /// Policy learning rate.
    pub eta_k: f64,
    /// Weight of the disentanglement term.
    pub lambda: f64,
    pub estimator: Estimator,
    pub reinforce_samples: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub mode: SelectivityMode,
    pub denom_epsilon: f64,
    pub log_floor_epsilon: f64,
    /// States per step; gradients are averaged across the batch.
    pub batch_size: usize,
    /// Apply the per-policy encoder updates as one summed update instead of
    /// sequentially inside the policy loop.
    pub aggregate_feature_updates: bool,
    /// Shared model only: stop policy gradients at the trunk.
    pub detach_policy_trunk: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            eta_f: 0.01,
            eta_g: 0.01,
            eta_k: 0.01,
            lambda: 0.1,
            estimator: Estimator::Exact,
            reinforce_samples: 1,
            seed: 42,
            eval_interval: 500,
            mode: SelectivityMode::Directed,
            denom_epsilon: 1e-8,
            log_floor_epsilon: 1e-8,
            batch_size: 1,
            aggregate_feature_updates: false,
            detach_policy_trunk: false,
        }
    }
}

impl TrainConfig {
    pub fn selectivity(&self) -> SelectivityConfig {
        SelectivityConfig {
            mode: self.mode,
            denom_epsilon: self.denom_epsilon,
            log_floor_epsilon: self.log_floor_epsilon,
            lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("training.steps must be positive".into()));
        }
        if self.eta_f <= 0.0 || self.eta_g <= 0.0 || self.eta_k <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("training.lambda must be non-negative".into()));
        }
        if self.reinforce_samples == 0 {
            return Err(Error::Config(
                "training.reinforce_samples must be positive".into(),
            ));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("training.eval_interval must be positive".into()));
        }
        if self.denom_epsilon <= 0.0 || self.log_floor_epsilon <= 0.0 {
            return Err(Error::Config("selectivity epsilons must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Optional extrinsic environment reward `r(s, a, s')`, added to the
/// selectivity reward inside the policy updates. Neither shipped
/// environment emits rewards, so the default is none.
pub type RewardHook<T> = dyn Fn(&GridState<T>, usize, &GridState<T>) -> T;

/// What one training step measured, before its updates were applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub recon_loss: f64,
    /// Sum over policies of the expected reward, each measured when its
    /// update line ran.
    pub disent_term: f64,
    /// Transitions in this step's batch that left the state unchanged.
    pub blocked_transitions: usize,
}

/// Periodic evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean per-pixel squared error over the held-out probe set.
    pub recon_mse: f64,
    /// Mean disentanglement term over a probe subset.
    pub disent_term: f64,
    /// Mean entropy of each policy over a probe subset, in nats.
    pub policy_entropy: Vec<f64>,
    /// Seconds since training started. Not serialized: logs must be
    /// byte-identical across reruns.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
    /// Soft check: held-out reconstruction error, averaged over windows of
    /// 1000 steps, never increased. Informational only.
    pub recon_soft_monotone: bool,
    /// Total zero-change transitions encountered during training.
    pub blocked_transitions: usize,
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: TrainLog,
    pub metrics: MetricsBundle,
}

/// Which parameters an update line touches.
fn group_matches(group: ParamGroup, want: &GroupFilter) -> bool {
    match (want, group) {
        (GroupFilter::Encoder, ParamGroup::Encoder) => true,
        (GroupFilter::Decoder, ParamGroup::Decoder) => true,
        (GroupFilter::Policy(k), ParamGroup::Policy(g)) => g == *k,
        _ => false,
    }
}

enum GroupFilter {
    Encoder,
    Decoder,
    Policy(usize),
}

/// Accumulate this tape's gradients for the filtered group into `acc`.
fn collect_group<T: Scalar>(
    model: &Model<T>,
    tape: &Tape<T>,
    reg: &crate::model::Registered,
    want: &GroupFilter,
    acc: &mut [Option<Tensor<T>>],
) {
    for (i, p) in model.params().iter().enumerate() {
        if group_matches(param_group(&p.name), want) {
            let g = tape.grad(reg.0[i]);
            match &mut acc[i] {
                Some(t) => t.axpy(T::one(), g),
                slot => *slot = Some(g.clone()),
            }
        }
    }
}

/// `param += coef * grad` for every accumulated slot.
fn apply_update<T: Scalar>(model: &mut Model<T>, acc: &[Option<Tensor<T>>], coef: T) {
    for (p, g) in model.params_mut().iter_mut().zip(acc) {
        if let Some(g) = g {
            p.value.axpy(coef, g);
        }
    }
}

fn merge_into<T: Scalar>(dst: &mut [Option<Tensor<T>>], src: &[Option<Tensor<T>>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            match d {
                Some(t) => t.axpy(T::one(), s),
                slot => *slot = Some(s.clone()),
            }
        }
    }
}

struct StepData<T> {
    states: Vec<GridState<T>>,
    successors: Vec<Vec<GridState<T>>>,
    extrinsic: Vec<Option<Vec<T>>>,
    blocked: usize,
}

fn sample_step_data<T: Scalar, R: Rng>(
    env_cfg: &EnvConfig,
    batch: usize,
    env_rng: &mut R,
    hook: Option<&RewardHook<T>>,
) -> Result<StepData<T>> {
    let a_n = env_cfg.action_count();
    let mut states = Vec::with_capacity(batch);
    let mut successors = Vec::with_capacity(batch);
    let mut extrinsic = Vec::with_capacity(batch);
    let mut blocked = 0;
    for _ in 0..batch {
        let s: GridState<T> = env::reset(env_cfg, env_rng)?;
        let succ: Vec<GridState<T>> = (0..a_n)
            .map(|a| env::step(env_cfg, &s, a))
            .collect::<Result<_>>()?;
        blocked += succ
            .iter()
            .filter(|n| n.row == s.row && n.col == s.col && n.color == s.color)
            .count();
        extrinsic.push(hook.map(|h| {
            succ.iter()
                .enumerate()
                .map(|(a, n)| h(&s, a, n))
                .collect::<Vec<T>>()
        }));
        states.push(s);
        successors.push(succ);
    }
    Ok(StepData {
        states,
        successors,
        extrinsic,
        blocked,
    })
}

/// One pass of the algorithm's inner body: reconstruction descent for the
/// encoder, then the decoder, then reward ascent for every policy. Returns
/// the pre-update measurements.
pub fn train_step<T: Scalar, R: Rng>(
    model: &mut Model<T>,
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    env_rng: &mut R,
    policy_rng: &mut R,
    hook: Option<&RewardHook<T>>,
) -> Result<StepRecord> {
    let sel_cfg = cfg.selectivity();
    let batch = cfg.batch_size.max(1);
    let scale = 1.0 / batch as f64;
    let data = sample_step_data(env_cfg, batch, env_rng, hook)?;
    let n_params = model.params().len();

    // reconstruction descent, encoder first, then the decoder with the
    // gradient re-evaluated at the updated encoder
    let mut recon_mean = 0.0;
    for (line, filter, eta) in [
        (3, GroupFilter::Encoder, cfg.eta_f),
        (4, GroupFilter::Decoder, cfg.eta_g),
    ] {
        let mut acc: Vec<Option<Tensor<T>>> = vec![None; n_params];
        for s in &data.states {
            let mut tape = Tape::new();
            let reg = model.register(&mut tape);
            let obs = tape.constant(s.observation.clone());
            let loss = build_recon_loss(&mut tape, model, &reg, obs)?;
            if line == 3 {
                recon_mean += tape.value(loss).item().as_f64() * scale;
            }
            tape.backward(loss)?;
            collect_group(model, &tape, &reg, &filter, &mut acc);
        }
        apply_update(model, &acc, T::from_f64(-eta * scale));
    }

    // per-policy reward ascent
    let mut disent_total = 0.0;
    if cfg.lambda != 0.0 {
        let k_n = model.num_policies();
        let mut aggregated: Vec<Option<Tensor<T>>> = vec![None; n_params];
        let encoder_line = |model: &Model<T>, k: usize| -> Result<(Vec<Option<Tensor<T>>>, f64)> {
            let mut acc = vec![None; n_params];
            let mut value = 0.0;
            for (i, s) in data.states.iter().enumerate() {
                let mut tape = Tape::new();
                let reg = model.register(&mut tape);
                let ev = build_expected_reward(
                    &mut tape,
                    model,
                    &reg,
                    s,
                    &data.successors[i],
                    k,
                    &sel_cfg,
                    cfg.detach_policy_trunk,
                    data.extrinsic[i].as_deref(),
                )?;
                value += tape.value(ev).item().as_f64() * scale;
                tape.backward(ev)?;
                collect_group(model, &tape, &reg, &GroupFilter::Encoder, &mut acc);
            }
            Ok((acc, value))
        };

        if cfg.aggregate_feature_updates {
            // all encoder gradients at the same parameters, one summed update
            for k in 0..k_n {
                let (acc, value) = encoder_line(model, k)?;
                disent_total += value;
                merge_into(&mut aggregated, &acc);
            }
            apply_update(model, &aggregated, T::from_f64(cfg.eta_f * cfg.lambda * scale));
            for k in 0..k_n {
                policy_line(model, cfg, &sel_cfg, &data, k, scale, policy_rng)?;
            }
        } else {
            for k in 0..k_n {
                let (acc, value) = encoder_line(model, k)?;
                disent_total += value;
                apply_update(model, &acc, T::from_f64(cfg.eta_f * cfg.lambda * scale));
                policy_line(model, cfg, &sel_cfg, &data, k, scale, policy_rng)?;
            }
        }
    }

    Ok(StepRecord {
        recon_loss: recon_mean,
        disent_term: disent_total,
        blocked_transitions: data.blocked,
    })
}

/// The policy-weight update for policy `k`, exact or REINFORCE.
fn policy_line<T: Scalar, R: Rng>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    sel_cfg: &SelectivityConfig,
    data: &StepData<T>,
    k: usize,
    scale: f64,
    policy_rng: &mut R,
) -> Result<()> {
    let n_params = model.params().len();
    let mut acc: Vec<Option<Tensor<T>>> = vec![None; n_params];
    match cfg.estimator {
        Estimator::Exact => {
            for (i, s) in data.states.iter().enumerate() {
                let mut tape = Tape::new();
                let reg = model.register(&mut tape);
                let ev = build_expected_reward(
                    &mut tape,
                    model,
                    &reg,
                    s,
                    &data.successors[i],
                    k,
                    sel_cfg,
                    cfg.detach_policy_trunk,
                    data.extrinsic[i].as_deref(),
                )?;
                tape.backward(ev)?;
                collect_group(model, &tape, &reg, &GroupFilter::Policy(k), &mut acc);
            }
        }
        Estimator::Reinforce => {
            for (i, s) in data.states.iter().enumerate() {
                let grads = reinforce_gradient_with_successors(
                    model,
                    s,
                    &data.successors[i],
                    k,
                    sel_cfg,
                    data.extrinsic[i].as_deref(),
                    cfg.reinforce_samples,
                    policy_rng,
                )?;
                merge_into(&mut acc, &grads);
            }
        }
    }
    apply_update(model, &acc, T::from_f64(cfg.eta_k * cfg.lambda * scale));
    Ok(())
}

/// Score-function estimate of the gradient of policy `k`'s expected reward
/// with respect to that policy's own weights:
/// `mean over samples of R(a_i) * grad log pi_k(a_i | s)`.
///
/// Returns a full-length parameter-slot vector with entries only for
/// policy `k`'s group. Unbiased for the exact-enumeration gradient because
/// the reward does not depend on the policy weights.
pub fn reinforce_gradient<T: Scalar, R: Rng>(
    model: &Model<T>,
    state: &GridState<T>,
    env_cfg: &EnvConfig,
    k: usize,
    sel_cfg: &SelectivityConfig,
    hook: Option<&RewardHook<T>>,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Option<Tensor<T>>>> {
    let successors: Vec<GridState<T>> = (0..env_cfg.action_count())
        .map(|a| env::step(env_cfg, state, a))
        .collect::<Result<_>>()?;
    let extrinsic: Option<Vec<T>> = hook.map(|h| {
        successors
            .iter()
            .enumerate()
            .map(|(a, n)| h(state, a, n))
            .collect()
    });
    reinforce_gradient_with_successors(
        model,
        state,
        &successors,
        k,
        sel_cfg,
        extrinsic.as_deref(),
        n_samples,
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn reinforce_gradient_with_successors<T: Scalar, R: Rng>(
    model: &Model<T>,
    state: &GridState<T>,
    successors: &[GridState<T>],
    k: usize,
    sel_cfg: &SelectivityConfig,
    extrinsic: Option<&[T]>,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Option<Tensor<T>>>> {
    assert!(n_samples >= 1, "reinforce needs at least one sample");
    let probs = model.policy_probs(&state.observation, k)?;
    let h = model.encode_value(&state.observation)?;
    let rewards: Vec<T> = successors
        .iter()
        .enumerate()
        .map(|(a, succ)| {
            let hn = model.encode_value(&succ.observation)?;
            let mut r = reward_value(selectivity_value(&h, &hn, k, sel_cfg), sel_cfg);
            if let Some(e) = extrinsic {
                r += e[a];
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;

    // score gradients are shared by all samples of the same action
    let n_params = model.params().len();
    let score_grads: Vec<Vec<Option<Tensor<T>>>> = (0..successors.len())
        .map(|a| {
            let mut tape = Tape::new();
            let reg = model.register(&mut tape);
            let obs = tape.constant(state.observation.clone());
            let trunk = match model {
                Model::Shared(_) => Some(model.encode_nodes(&mut tape, &reg, obs)?.trunk.unwrap()),
                Model::Separate(_) => None,
            };
            let p = model.policy_nodes(&mut tape, &reg, obs, trunk, k, false)?;
            let pa = tape.pick(p, a)?;
            let logp = tape.log(pa);
            tape.backward(logp)?;
            let mut acc = vec![None; n_params];
            collect_group(model, &tape, &reg, &GroupFilter::Policy(k), &mut acc);
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut out: Vec<Option<Tensor<T>>> = vec![None; n_params];
    let w = T::from_f64(1.0 / n_samples as f64);
    for _ in 0..n_samples {
        let a = crate::model::sample_index(&probs, rng);
        for (slot, g) in out.iter_mut().zip(&score_grads[a]) {
            if let Some(g) = g {
                match slot {
                    Some(t) => t.axpy(rewards[a] * w, g),
                    empty => {
                        let mut t = Tensor::zeros(g.shape().to_vec());
                        t.axpy(rewards[a] * w, g);
                        *empty = Some(t);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Run the full loop: initialize a model, take `steps` training steps with
/// periodic held-out evaluation, and return the trained model, the log and
/// the final metrics bundle. Deterministic given the config seeds.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    env_cfg: &EnvConfig,
    model_cfg: &ModelConfig,
    hook: Option<&RewardHook<T>>,
    mut on_eval: Option<&mut dyn FnMut(&Model<T>, &EvalRecord) -> Result<()>>,
) -> Result<TrainOutcome<T>> {
    env_cfg.validate()?;
    let sel_cfg = cfg.selectivity();

    // one stream seeds the weights and then drives action sampling; the
    // environment stream is separate so both are reproducible in isolation
    let mut policy_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut env_rng = ChaCha20Rng::seed_from_u64(env_cfg.seed);
    let mut model: Model<T> = Model::new(model_cfg, env_cfg, &mut policy_rng);

    let probe = metrics::probe_states::<T>(env_cfg, metrics::PROBE_SEED, metrics::DEFAULT_PROBE_SIZE)?;
    let sub_probe = &probe[..probe.len().min(32)];

    let start = Instant::now();
    let mut log = TrainLog {
        records: Vec::new(),
        recon_soft_monotone: true,
        blocked_transitions: 0,
    };

    for t in 1..=cfg.steps {
        let rec = train_step(&mut model, env_cfg, cfg, &mut env_rng, &mut policy_rng, hook)?;
        if !rec.recon_loss.is_finite() || !rec.disent_term.is_finite() {
            return Err(Error::Divergence {
                step: t,
                what: "losses".into(),
            });
        }
        if !model.all_finite() {
            return Err(Error::Divergence {
                step: t,
                what: "parameters".into(),
            });
        }
        log.blocked_transitions += rec.blocked_transitions;

        if t % cfg.eval_interval.max(1) == 0 || t == cfg.steps {
            let record = evaluate_snapshot(&model, env_cfg, &sel_cfg, &probe, sub_probe, t, &start)?;
            if let Some(cb) = on_eval.as_mut() {
                cb(&model, &record)?;
            }
            log.records.push(record);
        }
    }

    log.recon_soft_monotone = recon_windows_non_increasing(&log.records);
    let bundle = metrics::metrics_bundle(&model, env_cfg, &probe, &sel_cfg)?;
    Ok(TrainOutcome {
        model,
        log,
        metrics: bundle,
    })
}

fn evaluate_snapshot<T: Scalar>(
    model: &Model<T>,
    env_cfg: &EnvConfig,
    sel_cfg: &SelectivityConfig,
    probe: &[GridState<T>],
    sub_probe: &[GridState<T>],
    step: usize,
    start: &Instant,
) -> Result<EvalRecord> {
    let recon = metrics::reconstruction_report(model, probe, 0)?;
    let mut disent = 0.0;
    for s in sub_probe {
        disent += joint_objective(model, s, env_cfg, sel_cfg)?
            .disent_term
            .as_f64()
            / sub_probe.len() as f64;
    }
    let entropy = metrics::policy_entropies(model, sub_probe)?;
    Ok(EvalRecord {
        step,
        recon_mse: recon.recon_mse,
        disent_term: disent,
        policy_entropy: entropy,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Mean held-out reconstruction error per 1000-step window, compared window
/// to window.
fn recon_windows_non_increasing(records: &[EvalRecord]) -> bool {
    let mut windows: Vec<(usize, f64, usize)> = Vec::new(); // (window, sum, count)
    for r in records {
        let w = (r.step - 1) / 1000;
        match windows.last_mut() {
            Some((lw, sum, n)) if *lw == w => {
                *sum += r.recon_mse;
                *n += 1;
            }
            _ => windows.push((w, r.recon_mse, 1)),
        }
    }
    let means: Vec<f64> = windows.iter().map(|(_, s, n)| s / *n as f64).collect();
    means.windows(2).all(|pair| pair[1] <= pair[0] + 1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Variant;
    use crate::model::ModelVariant;

    fn small_env() -> EnvConfig {
        EnvConfig {
            variant: Variant::Extended,
            grid_height: 5,
            grid_width: 5,
            seed: 11,
            ..EnvConfig::default()
        }
    }

    fn small_model_cfg() -> ModelConfig {
        ModelConfig {
            variant: ModelVariant::Separate,
            latent: 4,
            hidden: 16,
            ..ModelConfig::default()
        }
    }

    fn small_train_cfg() -> TrainConfig {
        TrainConfig {
            steps: 10,
            eval_interval: 5,
            mode: SelectivityMode::Undirected,
            ..TrainConfig::default()
        }
    }

    fn fresh_model(seed: u64) -> Model<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Model::new(&small_model_cfg(), &small_env(), &mut rng)
    }

    fn params_equal(a: &Model<f64>, b: &Model<f64>) -> bool {
        a.params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.value == y.value)
    }

    fn run_one_step(model: &mut Model<f64>, cfg: &TrainConfig) -> StepRecord {
        let env_cfg = small_env();
        let mut env_rng = ChaCha20Rng::seed_from_u64(env_cfg.seed);
        let mut policy_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        train_step(model, &env_cfg, cfg, &mut env_rng, &mut policy_rng, None).unwrap()
    }

    #[test]
    fn zero_learning_rates_leave_parameters_bit_identical() {
        let mut model = fresh_model(1);
        let before = model.clone();
        let cfg = TrainConfig {
            eta_f: 0.0,
            eta_g: 0.0,
            eta_k: 0.0,
            ..small_train_cfg()
        };
        run_one_step(&mut model, &cfg);
        assert!(params_equal(&model, &before));
    }

    #[test]
    fn lambda_zero_reduces_to_pure_autoencoder_sgd() {
        let env_cfg = small_env();
        let cfg = TrainConfig {
            lambda: 0.0,
            ..small_train_cfg()
        };
        let mut model = fresh_model(2);
        let init = model.clone();
        run_one_step(&mut model, &cfg);

        // policies untouched
        for (p, q) in model.params().iter().zip(init.params()) {
            if p.name.starts_with("pol.") {
                assert_eq!(p.value, q.value, "{} moved under lambda = 0", p.name);
            }
        }

        // encoder/decoder follow the two plain reconstruction SGD lines
        let mut expect = init.clone();
        let mut env_rng = ChaCha20Rng::seed_from_u64(env_cfg.seed);
        let state: GridState<f64> = env::reset(&env_cfg, &mut env_rng).unwrap();
        for filter in [GroupFilter::Encoder, GroupFilter::Decoder] {
            let mut tape = Tape::new();
            let reg = expect.register(&mut tape);
            let obs = tape.leaf(state.observation.clone());
            let loss = build_recon_loss(&mut tape, &expect, &reg, obs).unwrap();
            tape.backward(loss).unwrap();
            let mut acc = vec![None; expect.params().len()];
            collect_group(&expect, &tape, &reg, &filter, &mut acc);
            apply_update(&mut expect, &acc, -0.01);
        }
        for (p, q) in model.params().iter().zip(expect.params()) {
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                assert!((a - b).abs() < 1e-12, "{} differs", p.name);
            }
        }
    }

    #[test]
    fn one_step_matches_hand_composed_update_lines() {
        let env_cfg = small_env();
        let cfg = small_train_cfg();
        let mut model = fresh_model(3);
        let mut oracle = model.clone();
        run_one_step(&mut model, &cfg);

        // recompute the same step line by line, each gradient evaluated on
        // the parameters current at that line
        let sel_cfg = cfg.selectivity();
        let mut env_rng = ChaCha20Rng::seed_from_u64(env_cfg.seed);
        let state: GridState<f64> = env::reset(&env_cfg, &mut env_rng).unwrap();
        let successors: Vec<GridState<f64>> = (0..env_cfg.action_count())
            .map(|a| env::step(&env_cfg, &state, a).unwrap())
            .collect();

        let recon_grad = |m: &Model<f64>, filter: &GroupFilter| {
            let mut tape = Tape::new();
            let reg = m.register(&mut tape);
            let obs = tape.leaf(state.observation.clone());
            let loss = build_recon_loss(&mut tape, m, &reg, obs).unwrap();
            tape.backward(loss).unwrap();
            let mut acc = vec![None; m.params().len()];
            collect_group(m, &tape, &reg, filter, &mut acc);
            acc
        };
        let reward_grad = |m: &Model<f64>, k: usize, filter: &GroupFilter| {
            let mut tape = Tape::new();
            let reg = m.register(&mut tape);
            let ev = build_expected_reward(
                &mut tape, m, &reg, &state, &successors, k, &sel_cfg, false, None,
            )
            .unwrap();
            tape.backward(ev).unwrap();
            let mut acc = vec![None; m.params().len()];
            collect_group(m, &tape, &reg, filter, &mut acc);
            acc
        };

        let g = recon_grad(&oracle, &GroupFilter::Encoder);
        apply_update(&mut oracle, &g, -cfg.eta_f);
        let g = recon_grad(&oracle, &GroupFilter::Decoder);
        apply_update(&mut oracle, &g, -cfg.eta_g);
        for k in 0..oracle.num_policies() {
            let g = reward_grad(&oracle, k, &GroupFilter::Encoder);
            apply_update(&mut oracle, &g, cfg.eta_f * cfg.lambda);
            let g = reward_grad(&oracle, k, &GroupFilter::Policy(k));
            apply_update(&mut oracle, &g, cfg.eta_k * cfg.lambda);
        }

        for (p, q) in model.params().iter().zip(oracle.params()) {
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                assert!((a - b).abs() < 1e-12, "{} deviates from composition", p.name);
            }
        }
    }

    #[test]
    fn update_lines_touch_only_their_parameter_groups() {
        // freeze encoder+decoder rates: only policy weights may move
        let mut model = fresh_model(4);
        let init = model.clone();
        let cfg = TrainConfig {
            eta_f: 0.0,
            eta_g: 0.0,
            ..small_train_cfg()
        };
        run_one_step(&mut model, &cfg);
        let mut policy_moved = false;
        for (p, q) in model.params().iter().zip(init.params()) {
            if p.name.starts_with("pol.") {
                policy_moved |= p.value != q.value;
            } else {
                assert_eq!(p.value, q.value, "{} moved with frozen rates", p.name);
            }
        }
        assert!(policy_moved);

        // freeze the policy rate: policy weights must stay
        let mut model = fresh_model(4);
        let cfg = TrainConfig {
            eta_k: 0.0,
            ..small_train_cfg()
        };
        run_one_step(&mut model, &cfg);
        for (p, q) in model.params().iter().zip(init.params()) {
            if p.name.starts_with("pol.") {
                assert_eq!(p.value, q.value, "{} moved with eta_k = 0", p.name);
            }
        }
    }

    #[test]
    fn reinforce_is_exact_for_a_deterministic_policy() {
        let env_cfg = small_env();
        let mut model = fresh_model(5);
        let target = 4;
        {
            let idx = model.param_index("pol.0.w");
            let theta = &mut model.params_mut()[idx].value;
            let a_n = env_cfg.action_count();
            for i in 0..theta.numel() {
                if i % a_n == target {
                    theta.data_mut()[i] = 40.0;
                }
            }
        }
        let mut env_rng = ChaCha20Rng::seed_from_u64(9);
        let state = env::reset(&env_cfg, &mut env_rng).unwrap();
        let sel_cfg = SelectivityConfig {
            mode: SelectivityMode::Undirected,
            ..SelectivityConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let est =
            reinforce_gradient(&model, &state, &env_cfg, 0, &sel_cfg, None, 64, &mut rng).unwrap();

        // the single-term gradient: R(a*) * grad log pi(a*)
        let h = model.encode_value(&state.observation).unwrap();
        let succ = env::step(&env_cfg, &state, target).unwrap();
        let hn = model.encode_value(&succ.observation).unwrap();
        let r = reward_value(selectivity_value(&h, &hn, 0, &sel_cfg), &sel_cfg);
        let mut tape = Tape::new();
        let reg = model.register(&mut tape);
        let obs = tape.leaf(state.observation.clone());
        let p = model.policy_nodes(&mut tape, &reg, obs, None, 0, false).unwrap();
        let pa = tape.pick(p, target).unwrap();
        let logp = tape.log(pa);
        tape.backward(logp).unwrap();

        let idx = model.param_index("pol.0.w");
        let est_g = est[idx].as_ref().unwrap();
        let score = tape.grad(reg.0[idx]);
        for (e, s) in est_g.data().iter().zip(score.data()) {
            assert!((e - r * s).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rewards_give_zero_mean_reinforce_gradient() {
        let env_cfg = small_env();
        // zeroed encoder: every state maps to the same latents, so every
        // action earns the same floored reward
        let mut model = fresh_model(6);
        for p in model.params_mut() {
            if p.name.starts_with("enc.") {
                p.value.fill(0.0);
            }
        }
        let mut env_rng = ChaCha20Rng::seed_from_u64(12);
        let state = env::reset(&env_cfg, &mut env_rng).unwrap();
        let sel_cfg = SelectivityConfig {
            mode: SelectivityMode::Undirected,
            ..SelectivityConfig::default()
        };
        // nonuniform policy so individual samples are far from zero
        {
            let idx = model.param_index("pol.0.w");
            let theta = &mut model.params_mut()[idx].value;
            for i in 0..theta.numel() {
                theta.data_mut()[i] = ((i % 8) as f64) * 0.05;
            }
        }
        let n = 10_000;
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let est =
            reinforce_gradient(&model, &state, &env_cfg, 0, &sel_cfg, None, n, &mut rng).unwrap();
        let idx = model.param_index("pol.0.w");
        let est_g = est[idx].as_ref().unwrap();
        // scale of one sample: |R| * |score|; standard error ~ that / sqrt(n)
        let r: f64 = reward_value(0.0, &sel_cfg);
        let bound = 3.0 * r.abs() / (n as f64).sqrt();
        for (i, &g) in est_g.data().iter().enumerate() {
            assert!(
                g.abs() <= bound.max(1e-12),
                "component {i}: {g} exceeds {bound}"
            );
        }
    }

    #[test]
    fn extrinsic_reward_hook_feeds_the_policy_update() {
        let env_cfg = small_env();
        // constant-selectivity model: only the hook differentiates actions
        let mut model = fresh_model(7);
        for p in model.params_mut() {
            if p.name.starts_with("enc.") {
                p.value.fill(0.0);
            }
        }
        let init = model.clone();
        let hook: Box<RewardHook<f64>> = Box::new(|_, a, _| a as f64);
        let cfg = TrainConfig {
            eta_f: 0.0,
            eta_g: 0.0,
            ..small_train_cfg()
        };
        let mut env_rng = ChaCha20Rng::seed_from_u64(env_cfg.seed);
        let mut policy_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        train_step(
            &mut model,
            &env_cfg,
            &cfg,
            &mut env_rng,
            &mut policy_rng,
            Some(hook.as_ref()),
        )
        .unwrap();
        let idx = model.param_index("pol.0.w");
        assert_ne!(model.params()[idx].value, init.params()[idx].value);

        // without the hook all rewards are equal and the update vanishes
        let mut model = init.clone();
        let mut env_rng = ChaCha20Rng::seed_from_u64(env_cfg.seed);
        let mut policy_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        train_step(&mut model, &env_cfg, &cfg, &mut env_rng, &mut policy_rng, None).unwrap();
        let got = &model.params()[idx].value;
        for (a, b) in got.data().iter().zip(init.params()[idx].value.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_is_deterministic_and_t_zero_returns_init() {
        let env_cfg = small_env();
        let model_cfg = small_model_cfg();
        let cfg = TrainConfig {
            steps: 6,
            eval_interval: 3,
            ..small_train_cfg()
        };
        let a = train::<f64>(&cfg, &env_cfg, &model_cfg, None, None).unwrap();
        let b = train::<f64>(&cfg, &env_cfg, &model_cfg, None, None).unwrap();
        assert!(params_equal(&a.model, &b.model));
        assert_eq!(a.log.records.len(), b.log.records.len());
        assert_eq!(a.metrics, b.metrics);
        for (x, y) in a.log.records.iter().zip(&b.log.records) {
            assert_eq!((x.step, x.recon_mse, x.disent_term), (y.step, y.recon_mse, y.disent_term));
            assert_eq!(x.policy_entropy, y.policy_entropy);
        }

        let cfg0 = TrainConfig { steps: 0, ..cfg };
        let out = train::<f64>(&cfg0, &env_cfg, &model_cfg, None, None).unwrap();
        assert!(out.log.records.is_empty());
        let mut rng = ChaCha20Rng::seed_from_u64(cfg0.seed);
        let init: Model<f64> = Model::new(&model_cfg, &env_cfg, &mut rng);
        assert!(params_equal(&out.model, &init));
    }

    #[test]
    fn divergence_guard_reports_the_failing_step() {
        let env_cfg = small_env();
        let cfg = TrainConfig {
            steps: 10,
            eta_f: 1e300,
            eta_g: 1e300,
            ..small_train_cfg()
        };
        match train::<f64>(&cfg, &env_cfg, &small_model_cfg(), None, None) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1 && step <= 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn aggregated_encoder_updates_stay_finite_and_differ_from_sequential() {
        let cfg_seq = small_train_cfg();
        let cfg_agg = TrainConfig {
            aggregate_feature_updates: true,
            ..small_train_cfg()
        };
        let mut seq = fresh_model(8);
        let mut agg = fresh_model(8);
        run_one_step(&mut seq, &cfg_seq);
        run_one_step(&mut agg, &cfg_agg);
        assert!(seq.all_finite() && agg.all_finite());
        assert!(!params_equal(&seq, &agg));
    }

    #[test]
    fn reinforce_training_step_runs_and_stays_finite() {
        let mut model = fresh_model(14);
        let cfg = TrainConfig {
            estimator: Estimator::Reinforce,
            reinforce_samples: 4,
            ..small_train_cfg()
        };
        let rec = run_one_step(&mut model, &cfg);
        assert!(model.all_finite());
        assert!(rec.recon_loss.is_finite() && rec.disent_term.is_finite());
    }
}
