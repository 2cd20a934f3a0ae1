//! Feature selectivity and the joint training objective.
//!
//! The selectivity of feature `k` under an action is the fraction of the
//! total latent change attributable to that feature:
//! `|h'_k - h_k| / (sum_j |h'_j - h_j| + eps)`. The directed variant drops
//! the absolute value in the numerator, so a policy is rewarded for pushing
//! its feature *up*, not merely for changing it. Per-policy rewards are the
//! log of selectivity (`log(1 + sel)` in the directed case), and the joint
//! objective trades reconstruction error against the expected reward of
//! every policy.
//!
//! Both environments are deterministic, so the expectation over successor
//! states collapses to a single term, and the expectation over actions is
//! enumerated exactly (the action sets are tiny).

use crate::env::{self, EnvConfig, GridState};
use crate::error::Result;
use crate::model::{Encoding, Model, Registered};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectivityMode {
    /// Reward any change of the feature.
    Undirected,
    /// Reward increasing the feature.
    Directed,
}

impl SelectivityMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectivityMode::Undirected => "undirected",
            SelectivityMode::Directed => "directed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "undirected" => Ok(SelectivityMode::Undirected),
            "directed" => Ok(SelectivityMode::Directed),
            other => Err(crate::error::Error::Config(format!(
                "unknown selectivity mode `{other}` (expected undirected|directed)"
            ))),
        }
    }
}

/// Parameters of the selectivity objective.
///
/// `denom_epsilon` keeps the selectivity ratio defined when an action
/// changes nothing (a wall-clamped move), in which case selectivity is 0.
/// `log_floor_epsilon` keeps the log rewards finite at sel = 0 (undirected)
/// and sel = -1 (directed).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectivityConfig {
    pub mode: SelectivityMode,
    pub denom_epsilon: f64,
    pub log_floor_epsilon: f64,
    /// Weight of the disentanglement term in the joint objective.
    pub lambda: f64,
}

impl Default for SelectivityConfig {
    fn default() -> Self {
        SelectivityConfig {
            mode: SelectivityMode::Directed,
            denom_epsilon: 1e-8,
            log_floor_epsilon: 1e-8,
            lambda: 0.1,
        }
    }
}

/// Selectivity of feature `k` for the transition `h -> h_next`, on the tape.
/// Undirected values live in `[0, 1]`, directed in `[-1, 1]`.
pub fn selectivity_node<T: Scalar>(
    tape: &mut Tape<T>,
    h: NodeId,
    h_next: NodeId,
    k: usize,
    cfg: &SelectivityConfig,
) -> Result<NodeId> {
    let delta = tape.sub(h_next, h)?;
    let abs_delta = tape.abs(delta);
    let total = tape.sum(abs_delta);
    let denom = tape.add_const(total, T::from_f64(cfg.denom_epsilon));
    let numer = match cfg.mode {
        SelectivityMode::Undirected => tape.pick(abs_delta, k)?,
        SelectivityMode::Directed => tape.pick(delta, k)?,
    };
    tape.div(numer, denom)
}

/// Value-mode [`selectivity_node`].
pub fn selectivity_value<T: Scalar>(
    h: &Tensor<T>,
    h_next: &Tensor<T>,
    k: usize,
    cfg: &SelectivityConfig,
) -> T {
    debug_assert_eq!(h.numel(), h_next.numel());
    let mut total = T::zero();
    for (a, b) in h.data().iter().zip(h_next.data()) {
        total += (*b - *a).abs();
    }
    let denom = total + T::from_f64(cfg.denom_epsilon);
    let delta_k = h_next.data()[k] - h.data()[k];
    match cfg.mode {
        SelectivityMode::Undirected => delta_k.abs() / denom,
        SelectivityMode::Directed => delta_k / denom,
    }
}

/// Per-transition reward from a selectivity node: `log(sel + eps)` in the
/// undirected mode, `log(max(1 + sel, eps))` in the directed mode.
pub fn reward_node<T: Scalar>(
    tape: &mut Tape<T>,
    sel: NodeId,
    cfg: &SelectivityConfig,
) -> NodeId {
    let eps = T::from_f64(cfg.log_floor_epsilon);
    match cfg.mode {
        SelectivityMode::Undirected => {
            let shifted = tape.add_const(sel, eps);
            tape.log(shifted)
        }
        SelectivityMode::Directed => {
            let shifted = tape.add_const(sel, T::one());
            let floored = tape.clamp_min(shifted, eps);
            tape.log(floored)
        }
    }
}

/// Value-mode [`reward_node`].
pub fn reward_value<T: Scalar>(sel: T, cfg: &SelectivityConfig) -> T {
    let eps = T::from_f64(cfg.log_floor_epsilon);
    match cfg.mode {
        SelectivityMode::Undirected => (sel + eps).ln(),
        SelectivityMode::Directed => (T::one() + sel).max(eps).ln(),
    }
}

/// `0.5 * ||obs - decode(encode(obs))||^2` on the tape.
pub fn build_recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    reg: &Registered,
    obs: NodeId,
) -> Result<NodeId> {
    let enc = model.encode_nodes(tape, reg, obs)?;
    let decoded = model.decode_nodes(tape, reg, enc.h)?;
    tape.half_squared_distance(obs, decoded)
}

/// Expected reward of policy `k` at `state`, enumerated exactly over the
/// action set: `sum_a pi_k(a|s) * (r_a + reward(sel(s, a, k)))`.
///
/// `successors` must hold `env.step(state, a)` for every action in order;
/// `extrinsic`, when present, holds per-action environment rewards `r_a`.
pub fn build_expected_reward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    reg: &Registered,
    state: &GridState<T>,
    successors: &[GridState<T>],
    k: usize,
    cfg: &SelectivityConfig,
    detach_trunk: bool,
    extrinsic: Option<&[T]>,
) -> Result<NodeId> {
    let obs = tape.constant(state.observation.clone());
    let enc = model.encode_nodes(tape, reg, obs)?;
    let h_next: Vec<NodeId> = successors
        .iter()
        .map(|succ| {
            let o = tape.constant(succ.observation.clone());
            Ok(model.encode_nodes(tape, reg, o)?.h)
        })
        .collect::<Result<_>>()?;
    expected_reward_from_encodings(
        tape, model, reg, obs, &enc, &h_next, k, cfg, detach_trunk, extrinsic,
    )
}

#[allow(clippy::too_many_arguments)]
fn expected_reward_from_encodings<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    reg: &Registered,
    obs: NodeId,
    enc: &Encoding,
    h_next: &[NodeId],
    k: usize,
    cfg: &SelectivityConfig,
    detach_trunk: bool,
    extrinsic: Option<&[T]>,
) -> Result<NodeId> {
    let probs = model.policy_nodes(tape, reg, obs, enc.trunk, k, detach_trunk)?;
    let mut acc: Option<NodeId> = None;
    for (a, &hn) in h_next.iter().enumerate() {
        let sel = selectivity_node(tape, enc.h, hn, k, cfg)?;
        let mut reward = reward_node(tape, sel, cfg);
        if let Some(r) = extrinsic {
            reward = tape.add_const(reward, r[a]);
        }
        let pa = tape.pick(probs, a)?;
        let term = tape.mul(pa, reward)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("non-empty action set"))
}

/// Nodes of the joint objective.
pub struct ObjectiveNodes {
    pub recon: NodeId,
    /// Sum over policies of their exactly-enumerated expected reward.
    pub disent: NodeId,
    /// `recon - lambda * disent`.
    pub total: NodeId,
}

/// Build the full joint objective at `state`. Successor encodings are
/// computed once and shared across all policies.
pub fn build_objective<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    reg: &Registered,
    state: &GridState<T>,
    env_cfg: &EnvConfig,
    cfg: &SelectivityConfig,
    detach_trunk: bool,
) -> Result<ObjectiveNodes> {
    let obs = tape.constant(state.observation.clone());
    let enc = model.encode_nodes(tape, reg, obs)?;
    let decoded = model.decode_nodes(tape, reg, enc.h)?;
    let recon = tape.half_squared_distance(obs, decoded)?;

    let h_next: Vec<NodeId> = (0..env_cfg.action_count())
        .map(|a| {
            let succ = env::step(env_cfg, state, a)?;
            let o = tape.constant(succ.observation.clone());
            Ok(model.encode_nodes(tape, reg, o)?.h)
        })
        .collect::<Result<_>>()?;

    let mut disent: Option<NodeId> = None;
    for k in 0..model.num_policies() {
        let term = expected_reward_from_encodings(
            tape, model, reg, obs, &enc, &h_next, k, cfg, detach_trunk, None,
        )?;
        disent = Some(match disent {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    let disent = disent.expect("at least one policy");
    let weighted = tape.scale(disent, T::from_f64(cfg.lambda));
    let total = tape.sub(recon, weighted)?;
    Ok(ObjectiveNodes {
        recon,
        disent,
        total,
    })
}

/// Values of the joint objective at `state`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue<T> {
    pub recon_loss: T,
    pub disent_term: T,
    pub total: T,
}

/// Evaluate the joint objective without keeping the graph around.
pub fn joint_objective<T: Scalar>(
    model: &Model<T>,
    state: &GridState<T>,
    env_cfg: &EnvConfig,
    cfg: &SelectivityConfig,
) -> Result<ObjectiveValue<T>> {
    let mut tape = Tape::new();
    let reg = model.register(&mut tape);
    let nodes = build_objective(&mut tape, model, &reg, state, env_cfg, cfg, false)?;
    Ok(ObjectiveValue {
        recon_loss: tape.value(nodes.recon).item(),
        disent_term: tape.value(nodes.disent).item(),
        total: tape.value(nodes.total).item(),
    })
}
