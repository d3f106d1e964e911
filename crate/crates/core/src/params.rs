//! Tabular parameters, Adam, exponential learning-rate decay and EMA targets.
//!
//! Every learnable tensor is a flat `Vec<f64>`. Edge tables (policy logits and
//! soft Q-values) are laid out row by row following the environment's child or
//! parent order, so a row is a contiguous slice.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use thiserror::Error;

use crate::env::{DagEnv, StateId};
use crate::logspace::{log_softmax, log_softmax_into, log_sum_exp};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ParamError {
    #[error("non-finite gradient in tensor `{tensor}` at index {index}")]
    NonFiniteGradient { tensor: String, index: usize },
    #[error("shape mismatch for tensor `{tensor}`: params {params}, grads {grads}")]
    ShapeMismatch { tensor: String, params: usize, grads: usize },
    #[error("no edge between {from} and {to}")]
    InvalidEdge { from: StateId, to: StateId },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Logits over children; rows of terminal states are empty.
    Forward,
    /// Logits over parents; the initial state's row is empty.
    Backward,
}

/// Softmax policy with one logit per valid edge.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    direction: Direction,
    offsets: Vec<usize>,
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    /// Zero logits, i.e. uniform over children (forward) or parents (backward).
    pub fn uniform(env: &DagEnv, direction: Direction) -> Self {
        let offsets = match direction {
            Direction::Forward => env.child_offsets().to_vec(),
            Direction::Backward => env.parent_offsets().to_vec(),
        };
        let logits = vec![0.0; *offsets.last().unwrap()];
        Self { direction, offsets, logits }
    }

    /// Policy whose logits are the given per-edge values.
    pub fn from_logits(env: &DagEnv, direction: Direction, logits: Vec<f64>) -> Self {
        let mut p = Self::uniform(env, direction);
        assert_eq!(p.logits.len(), logits.len(), "logit table has the wrong length");
        p.logits = logits;
        p
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_states(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.logits[self.offsets[s]..self.offsets[s + 1]]
    }

    pub fn row_mut(&mut self, s: StateId) -> &mut [f64] {
        let (a, b) = (self.offsets[s], self.offsets[s + 1]);
        &mut self.logits[a..b]
    }

    pub fn row_range(&self, s: StateId) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn log_probs(&self, s: StateId) -> Vec<f64> {
        log_softmax(self.row(s))
    }

    pub fn log_probs_into(&self, s: StateId, out: &mut Vec<f64>) {
        log_softmax_into(self.row(s), out);
    }

    /// Probability vector over the row of `s`.
    pub fn distribution(&self, s: StateId) -> Vec<f64> {
        self.log_probs(s).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob_slot(&self, s: StateId, slot: usize) -> f64 {
        self.log_probs(s)[slot]
    }

    /// `log P(other | s)` where `other` is a child (forward) or parent (backward) of `s`.
    pub fn log_prob(&self, env: &DagEnv, s: StateId, other: StateId) -> Result<f64, ParamError> {
        let slot = match self.direction {
            Direction::Forward => env.child_slot(s, other),
            Direction::Backward => env.parent_slot(s, other),
        };
        let slot = slot.ok_or(ParamError::InvalidEdge { from: s, to: other })?;
        Ok(self.log_prob_slot(s, slot))
    }

    /// Log-probabilities of every edge, in the same layout as the logits.
    pub fn all_log_probs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.logits.len());
        let mut buf = Vec::new();
        for s in 0..self.num_states() {
            self.log_probs_into(s, &mut buf);
            out.extend_from_slice(&buf);
        }
        out
    }

    /// Sum over states of the row entropy.
    pub fn total_entropy(&self) -> f64 {
        (0..self.num_states())
            .map(|s| {
                let lp = self.log_probs(s);
                -lp.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>()
            })
            .sum()
    }

    /// Hash of the raw logit bits.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.logits)
    }
}

pub fn fingerprint(values: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    values.len().hash(&mut h);
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Sets every backward logit to zero, making each row uniform over parents.
pub fn init_backward_uniform(pb: &mut TabularPolicy) {
    pb.logits.iter_mut().for_each(|l| *l = 0.0);
}

/// Logits drawn uniformly from `[-scale, scale]`.
pub fn random_policy<R: Rng + ?Sized>(env: &DagEnv, direction: Direction, scale: f64, rng: &mut R) -> TabularPolicy {
    let mut p = TabularPolicy::uniform(env, direction);
    for l in p.logits.iter_mut() {
        *l = rng.gen_range(-scale..=scale);
    }
    p
}

/// `log F(s)` for non-terminal states; terminal queries read the environment reward.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    pub log_flow: Vec<f64>,
}

impl FlowTable {
    pub fn zeros(env: &DagEnv) -> Self {
        Self { log_flow: vec![0.0; env.num_states()] }
    }

    pub fn get(&self, env: &DagEnv, s: StateId) -> f64 {
        if env.is_terminal(s) {
            env.log_reward(s)
        } else {
            self.log_flow[s]
        }
    }
}

/// Soft Q-values, one per forward edge.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    offsets: Vec<usize>,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(env: &DagEnv) -> Self {
        let offsets = env.child_offsets().to_vec();
        let values = vec![0.0; *offsets.last().unwrap()];
        Self { offsets, values }
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.values[self.offsets[s]..self.offsets[s + 1]]
    }

    pub fn value(&self, s: StateId, slot: usize) -> f64 {
        self.values[self.offsets[s] + slot]
    }

    /// `V(s) = log sum exp Q(s, .)`, zero at terminal states.
    pub fn soft_value(&self, s: StateId) -> f64 {
        let row = self.row(s);
        if row.is_empty() {
            0.0
        } else {
            log_sum_exp(row)
        }
    }

    /// Boltzmann policy `softmax(Q(s, .))`.
    pub fn policy(&self, env: &DagEnv) -> TabularPolicy {
        TabularPolicy::from_logits(env, Direction::Forward, self.values.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment accumulators of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam step. The whole step is rejected if any gradient is
/// non-finite.
pub fn adam_step(
    name: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), ParamError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(ParamError::ShapeMismatch {
            tensor: name.to_string(),
            params: params.len(),
            grads: grads.len(),
        });
    }
    if !(lr > 0.0) {
        return Err(ParamError::BadLearningRate(lr));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(ParamError::NonFiniteGradient { tensor: name.to_string(), index });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] + cfg.weight_decay * params[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn ema_update(target: &mut [f64], online: &[f64], tau: f64) {
    debug_assert!(tau > 0.0 && tau <= 1.0);
    debug_assert_eq!(target.len(), online.len());
    if tau == 1.0 {
        target.copy_from_slice(online);
        return;
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}

/// Exponential learning-rate decay `lr0 * gamma^step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpDecay {
    pub lr0: f64,
    pub gamma: f64,
}

impl ExpDecay {
    pub fn constant(lr0: f64) -> Self {
        Self { lr0, gamma: 1.0 }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(step, self.lr0, self.gamma)
    }
}

pub fn lr_schedule(step: u64, lr0: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        lr0
    } else {
        lr0 * gamma.powf(step as f64)
    }
}

/// Forward-side parameters: a policy table (TB/DB/SubTB) or soft Q-values with an
/// EMA target copy (SoftDQN/MunchausenDQN).
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardModel {
    Policy(TabularPolicy),
    SoftQ { q: QTable, q_target: QTable },
}

impl ForwardModel {
    /// The sampling policy: the table itself, or `softmax(Q)`.
    pub fn policy(&self, env: &DagEnv) -> TabularPolicy {
        match self {
            ForwardModel::Policy(p) => p.clone(),
            ForwardModel::SoftQ { q, .. } => q.policy(env),
        }
    }

    /// Forward logits without cloning (Q-values are the logits of the Boltzmann policy).
    pub fn logits(&self) -> &[f64] {
        match self {
            ForwardModel::Policy(p) => &p.logits,
            ForwardModel::SoftQ { q, .. } => &q.values,
        }
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        match self {
            ForwardModel::Policy(p) => &mut p.logits,
            ForwardModel::SoftQ { q, .. } => &mut q.values,
        }
    }

    pub fn tensor_name(&self) -> &'static str {
        match self {
            ForwardModel::Policy(_) => "pf_logits",
            ForwardModel::SoftQ { .. } => "q_values",
        }
    }
}

/// Optimiser state for every trainable tensor of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimStates {
    pub forward: AdamState,
    pub backward: AdamState,
    pub log_flow: Option<AdamState>,
    pub log_z: Option<AdamState>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub forward: ExpDecay,
    pub backward: ExpDecay,
    pub log_z: ExpDecay,
}

/// All learnable state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    pub forward: ForwardModel,
    pub pb: TabularPolicy,
    /// EMA copy of `pb`; only ever changed by [`ema_update`] or a resync.
    pub pb_target: TabularPolicy,
    pub flows: Option<FlowTable>,
    pub log_z: Option<f64>,
    pub optim: OptimStates,
    pub schedules: Schedules,
    pub adam: AdamConfig,
    /// Completed training iterations.
    pub iteration: u64,
}

/// Which auxiliary tensors a bundle carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardLayout {
    /// Policy table plus scalar `log Z`.
    PolicyWithLogZ,
    /// Policy table plus per-state log-flows.
    PolicyWithFlows,
    /// Soft Q-table plus its target copy.
    SoftQ,
}

impl ParamBundle {
    pub fn new(env: &DagEnv, layout: ForwardLayout, schedules: Schedules, adam: AdamConfig) -> Self {
        let forward = match layout {
            ForwardLayout::SoftQ => {
                let q = QTable::zeros(env);
                ForwardModel::SoftQ { q_target: q.clone(), q }
            }
            _ => ForwardModel::Policy(TabularPolicy::uniform(env, Direction::Forward)),
        };
        let pb = TabularPolicy::uniform(env, Direction::Backward);
        let flows = (layout == ForwardLayout::PolicyWithFlows).then(|| FlowTable::zeros(env));
        let log_z = (layout == ForwardLayout::PolicyWithLogZ).then_some(0.0);
        let optim = OptimStates {
            forward: AdamState::new(forward.logits().len()),
            backward: AdamState::new(pb.logits.len()),
            log_flow: flows.as_ref().map(|f| AdamState::new(f.log_flow.len())),
            log_z: log_z.map(|_| AdamState::new(1)),
        };
        Self {
            forward,
            pb_target: pb.clone(),
            pb,
            flows,
            log_z,
            optim,
            schedules,
            adam,
            iteration: 0,
        }
    }

    pub fn forward_policy(&self, env: &DagEnv) -> TabularPolicy {
        self.forward.policy(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_hypergrid, build_micro, HypergridSpec, MicroDag};
    use proptest::prelude::*;

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = [0.0];
        let mut st = AdamState::new(1);
        adam_step("x", &mut p, &[0.5], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut p = [0.3, -1.2];
        let mut st = AdamState::new(2);
        for _ in 0..5 {
            adam_step("x", &mut p, &[0.0, 0.0], &mut st, 1e-2, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, [0.3, -1.2]);
    }

    #[test]
    fn adam_saturated_second_step() {
        let cfg = AdamConfig::default();
        let mut p = [0.0];
        let mut st = AdamState::new(1);
        adam_step("x", &mut p, &[1.0], &mut st, 1e-3, &cfg).unwrap();
        let before = p[0];
        adam_step("x", &mut p, &[1.0], &mut st, 1e-3, &cfg).unwrap();
        // m_hat = v_hat = 1 on a constant unit gradient.
        let expected = 1e-3 / (1.0 + 1e-8);
        assert!(((before - p[0]) - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = [0.0, 0.0];
        let mut st = AdamState::new(2);
        let err = adam_step("pb_logits", &mut p, &[0.0, f64::NAN], &mut st, 1e-3, &AdamConfig::default())
            .unwrap_err();
        assert_eq!(err, ParamError::NonFiniteGradient { tensor: "pb_logits".into(), index: 1 });
        assert_eq!(st.step, 0);
    }

    #[test]
    fn ema_examples() {
        let mut t = [0.0];
        ema_update(&mut t, &[1.0], 0.25);
        assert_eq!(t[0], 0.25);
        ema_update(&mut t, &[1.0], 1.0);
        assert_eq!(t[0], 1.0);

        let mut t = [0.0];
        for k in 1..=20 {
            ema_update(&mut t, &[2.0], 0.1);
            let expected = 2.0 * (1.0 - 0.9f64.powi(k));
            assert!((t[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 1e-3, 0.999), 1e-3);
        assert!((lr_schedule(1000, 1e-3, 0.999) - 3.677e-4).abs() < 1e-7);
        assert_eq!(lr_schedule(12345, 1e-3, 1.0), 1e-3);
    }

    #[test]
    fn uniform_backward_init() {
        let env = build_hypergrid(&HypergridSpec::standard(2, 3), 1000).unwrap();
        let mut pb = TabularPolicy::uniform(&env, Direction::Backward);
        pb.logits.iter_mut().for_each(|l| *l = 1.7);
        init_backward_uniform(&mut pb);
        let expected: f64 = (0..env.num_states())
            .map(|s| (env.parents(s).len().max(1) as f64).ln())
            .sum();
        assert!((pb.total_entropy() - expected).abs() < 1e-12);
        // Cell (1,1) has 2 parents; terminal copies have exactly one.
        let cell = 4;
        assert_eq!(pb.distribution(cell), vec![0.5, 0.5]);
        assert_eq!(pb.distribution(9 + cell), vec![1.0]);
    }

    #[test]
    fn policy_log_prob_and_invalid_edge() {
        let env = build_micro(&MicroDag::Diamond).unwrap();
        let pf = TabularPolicy::uniform(&env, Direction::Forward);
        assert!((pf.log_prob(&env, 0, 1).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert_eq!(
            pf.log_prob(&env, 0, 3),
            Err(ParamError::InvalidEdge { from: 0, to: 3 })
        );
        let pb = TabularPolicy::uniform(&env, Direction::Backward);
        assert!((pb.log_prob(&env, 3, 2).unwrap() + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn flow_table_reads_terminal_rewards() {
        let env = build_micro(&MicroDag::Diamond).unwrap();
        let mut f = FlowTable::zeros(&env);
        f.log_flow[3] = 99.0;
        assert_eq!(f.get(&env, 3), 2f64.ln());
    }

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                xp[i] = x[i] + h;
                let a = f(&xp);
                xp[i] = x[i] - h;
                let b = f(&xp);
                xp[i] = x[i];
                (a - b) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn distributions_sum_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let lp = log_softmax(&logits);
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_softmax_grad_matches_finite_differences(
            logits in proptest::collection::vec(-3.0f64..3.0, 2..8),
            pick in 0usize..8,
        ) {
            let slot = pick % logits.len();
            let mut grad = vec![0.0; logits.len()];
            crate::logspace::add_log_softmax_grad(&log_softmax(&logits), slot, 1.0, &mut grad);
            let fd = finite_diff(|x| log_softmax(x)[slot], &logits, 1e-5);
            for (a, n) in grad.iter().zip(&fd) {
                prop_assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-3));
            }
        }

        #[test]
        fn ema_is_a_contraction(
            target in proptest::collection::vec(-5.0f64..5.0, 4),
            online in proptest::collection::vec(-5.0f64..5.0, 4),
            tau in 0.01f64..1.0,
        ) {
            let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let before = gap(&target, &online);
            let mut t = target.clone();
            ema_update(&mut t, &online, tau);
            prop_assert!((gap(&t, &online) - (1.0 - tau) * before).abs() < 1e-12);
        }
    }
}
