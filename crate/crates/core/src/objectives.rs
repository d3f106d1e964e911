//! Forward training objectives with exact analytic gradients.
//!
//! Trajectory losses (TB, DB, SubTB) and temporal-difference losses (SoftDQN,
//! MunchausenDQN) all take the backward policy through a [`PbView`]. Gradients
//! reach the backward logits only when the view is marked trainable, which the
//! trainer does for the naive strategy alone.

use crate::env::{DagEnv, StateId, Trajectory};
use crate::logspace::{add_log_softmax_grad, log_softmax_into};
use crate::params::{FlowTable, ParamError, QTable, TabularPolicy};
use crate::replay::Transition;

/// Backward policy as seen by a forward loss.
#[derive(Debug, Clone, Copy)]
pub struct PbView<'a> {
    pub policy: &'a TabularPolicy,
    /// Whether gradients flow into `policy`.
    pub trainable: bool,
}

impl<'a> PbView<'a> {
    pub fn frozen(policy: &'a TabularPolicy) -> Self {
        Self { policy, trainable: false }
    }

    pub fn trainable(policy: &'a TabularPolicy) -> Self {
        Self { policy, trainable: true }
    }
}

/// Dense gradients for every tensor a forward loss can touch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Policy logits or Q-values.
    pub forward: Vec<f64>,
    pub backward: Option<Vec<f64>>,
    pub log_flow: Option<Vec<f64>>,
    pub log_z: f64,
}

impl Gradients {
    pub fn zeros(env: &DagEnv, backward: bool, flows: bool) -> Self {
        Self {
            forward: vec![0.0; env.num_forward_edges()],
            backward: backward.then(|| vec![0.0; env.num_backward_edges()]),
            log_flow: flows.then(|| vec![0.0; env.num_states()]),
            log_z: 0.0,
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.forward.iter_mut().for_each(|g| *g *= c);
        if let Some(b) = &mut self.backward {
            b.iter_mut().for_each(|g| *g *= c);
        }
        if let Some(f) = &mut self.log_flow {
            f.iter_mut().for_each(|g| *g *= c);
        }
        self.log_z *= c;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryObjective {
    Tb,
    Db,
    SubTb { lambda: f64 },
}

/// Forward-side tensors read by trajectory losses.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTables<'a> {
    pub pf: &'a TabularPolicy,
    pub log_z: Option<f64>,
    pub flows: Option<&'a FlowTable>,
}

/// Per-step log-probabilities and the softmax rows they came from.
struct StepTerms {
    log_pf: Vec<f64>,
    log_pb: Vec<f64>,
    pf_rows: Vec<Vec<f64>>,
    pb_rows: Vec<Vec<f64>>,
    pb_slots: Vec<usize>,
}

fn step_terms(env: &DagEnv, pf: &TabularPolicy, pb: &TabularPolicy, traj: &Trajectory) -> StepTerms {
    let n = traj.len();
    let mut terms = StepTerms {
        log_pf: Vec::with_capacity(n),
        log_pb: Vec::with_capacity(n),
        pf_rows: Vec::with_capacity(n),
        pb_rows: Vec::with_capacity(n),
        pb_slots: Vec::with_capacity(n),
    };
    for t in 0..n {
        let (s, next, a) = (traj.states[t], traj.states[t + 1], traj.actions[t]);
        let mut row = Vec::new();
        log_softmax_into(pf.row(s), &mut row);
        terms.log_pf.push(row[a]);
        terms.pf_rows.push(row);

        let b = env.parent_slot_of(s, a);
        let mut brow = Vec::new();
        log_softmax_into(pb.row(next), &mut brow);
        terms.log_pb.push(brow[b]);
        terms.pb_rows.push(brow);
        terms.pb_slots.push(b);
    }
    terms
}

/// Pushes `dL/d log PF_t = coef[t]` and `dL/d log PB_t = -coef[t]` through the softmaxes.
fn apply_step_coefs(
    pf: &TabularPolicy,
    pb: PbView<'_>,
    traj: &Trajectory,
    terms: &StepTerms,
    coef: &[f64],
    grads: &mut Gradients,
) {
    for (t, &c) in coef.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let s = traj.states[t];
        let range = pf.row_range(s);
        add_log_softmax_grad(&terms.pf_rows[t], traj.actions[t], c, &mut grads.forward[range]);
        if pb.trainable {
            if let Some(bg) = grads.backward.as_mut() {
                let range = pb.policy.row_range(traj.states[t + 1]);
                add_log_softmax_grad(&terms.pb_rows[t], terms.pb_slots[t], -c, &mut bg[range]);
            }
        }
    }
}

fn accumulate_tb(
    env: &DagEnv,
    pf: &TabularPolicy,
    log_z: f64,
    pb: PbView<'_>,
    traj: &Trajectory,
    scale: f64,
    grads: &mut Gradients,
) -> f64 {
    let terms = step_terms(env, pf, pb.policy, traj);
    let delta = log_z + terms.log_pf.iter().sum::<f64>()
        - traj.log_reward
        - terms.log_pb.iter().sum::<f64>();
    let c = 2.0 * delta * scale;
    grads.log_z += c;
    apply_step_coefs(pf, pb, traj, &terms, &vec![c; traj.len()], grads);
    delta * delta
}

fn accumulate_db(
    env: &DagEnv,
    pf: &TabularPolicy,
    flows: &FlowTable,
    pb: PbView<'_>,
    traj: &Trajectory,
    scale: f64,
    grads: &mut Gradients,
) -> f64 {
    let terms = step_terms(env, pf, pb.policy, traj);
    let mut loss = 0.0;
    let mut coef = vec![0.0; traj.len()];
    for t in 0..traj.len() {
        let (s, next) = (traj.states[t], traj.states[t + 1]);
        let delta = flows.get(env, s) + terms.log_pf[t] - flows.get(env, next) - terms.log_pb[t];
        loss += delta * delta;
        let c = 2.0 * delta * scale;
        coef[t] = c;
        add_flow_grad(env, s, c, grads);
        add_flow_grad(env, next, -c, grads);
    }
    apply_step_coefs(pf, pb, traj, &terms, &coef, grads);
    loss
}

fn add_flow_grad(env: &DagEnv, s: StateId, c: f64, grads: &mut Gradients) {
    if !env.is_terminal(s) {
        if let Some(g) = grads.log_flow.as_mut() {
            g[s] += c;
        }
    }
}

/// Normalised SubTB weights `lambda^(k-j)` over all spans `0 <= j < k <= n`.
pub fn subtb_weights(n: usize, lambda: f64) -> Vec<((usize, usize), f64)> {
    let mut spans = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for k in j + 1..=n {
            spans.push(((j, k), lambda.powi((k - j) as i32)));
        }
    }
    let total: f64 = spans.iter().map(|(_, w)| w).sum();
    spans.iter_mut().for_each(|(_, w)| *w /= total);
    spans
}

fn accumulate_subtb(
    env: &DagEnv,
    pf: &TabularPolicy,
    flows: &FlowTable,
    pb: PbView<'_>,
    traj: &Trajectory,
    lambda: f64,
    scale: f64,
    grads: &mut Gradients,
) -> f64 {
    let n = traj.len();
    let terms = step_terms(env, pf, pb.policy, traj);
    // prefix[t] = sum of (log PF - log PB) over the first t steps.
    let mut prefix = vec![0.0; n + 1];
    for t in 0..n {
        prefix[t + 1] = prefix[t] + terms.log_pf[t] - terms.log_pb[t];
    }
    let log_f: Vec<f64> = traj.states.iter().map(|&s| flows.get(env, s)).collect();
    let mut loss = 0.0;
    // diff[t] accumulates span coefficients so that coef[t] = sum over spans covering step t.
    let mut diff = vec![0.0; n + 1];
    for ((j, k), w) in subtb_weights(n, lambda) {
        let delta = log_f[j] - log_f[k] + prefix[k] - prefix[j];
        loss += w * delta * delta;
        let c = 2.0 * w * delta * scale;
        diff[j] += c;
        diff[k] -= c;
        add_flow_grad(env, traj.states[j], c, grads);
        add_flow_grad(env, traj.states[k], -c, grads);
    }
    let mut coef = vec![0.0; n];
    let mut running = 0.0;
    for t in 0..n {
        running += diff[t];
        coef[t] = running;
    }
    apply_step_coefs(pf, pb, traj, &terms, &coef, grads);
    loss
}

fn fresh_grads(env: &DagEnv, pb: PbView<'_>, flows: bool) -> Gradients {
    Gradients::zeros(env, pb.trainable, flows)
}

/// `(log Z + sum log PF - log R(x) - sum log PB)^2`.
pub fn loss_tb(env: &DagEnv, pf: &TabularPolicy, log_z: f64, pb: PbView<'_>, traj: &Trajectory) -> LossValue {
    let mut grads = fresh_grads(env, pb, false);
    let loss = accumulate_tb(env, pf, log_z, pb, traj, 1.0, &mut grads);
    LossValue { loss, grads }
}

/// Sum over transitions of squared detailed-balance residuals.
pub fn loss_db(env: &DagEnv, pf: &TabularPolicy, flows: &FlowTable, pb: PbView<'_>, traj: &Trajectory) -> LossValue {
    let mut grads = fresh_grads(env, pb, true);
    let loss = accumulate_db(env, pf, flows, pb, traj, 1.0, &mut grads);
    LossValue { loss, grads }
}

/// Weighted sum of squared sub-trajectory residuals.
pub fn loss_subtb(
    env: &DagEnv,
    pf: &TabularPolicy,
    flows: &FlowTable,
    pb: PbView<'_>,
    traj: &Trajectory,
    lambda: f64,
) -> LossValue {
    let mut grads = fresh_grads(env, pb, true);
    let loss = accumulate_subtb(env, pf, flows, pb, traj, lambda, 1.0, &mut grads);
    LossValue { loss, grads }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean loss over the batch.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradients of the mean loss.
    pub grads: Gradients,
}

/// Mean trajectory loss over a batch. Panics if the tables the objective needs are missing.
pub fn trajectory_batch_loss(
    env: &DagEnv,
    objective: TrajectoryObjective,
    tables: ForwardTables<'_>,
    pb: PbView<'_>,
    batch: &[Trajectory],
) -> BatchLoss {
    let uses_flows = !matches!(objective, TrajectoryObjective::Tb);
    let mut grads = fresh_grads(env, pb, uses_flows);
    let scale = 1.0 / batch.len().max(1) as f64;
    let per_sample: Vec<f64> = batch
        .iter()
        .map(|traj| match objective {
            TrajectoryObjective::Tb => {
                let log_z = tables.log_z.expect("TB needs log Z");
                accumulate_tb(env, tables.pf, log_z, pb, traj, scale, &mut grads)
            }
            TrajectoryObjective::Db => {
                let flows = tables.flows.expect("DB needs a flow table");
                accumulate_db(env, tables.pf, flows, pb, traj, scale, &mut grads)
            }
            TrajectoryObjective::SubTb { lambda } => {
                let flows = tables.flows.expect("SubTB needs a flow table");
                accumulate_subtb(env, tables.pf, flows, pb, traj, lambda, scale, &mut grads)
            }
        })
        .collect();
    let loss = per_sample.iter().sum::<f64>() * scale;
    BatchLoss { loss, per_sample, grads }
}

/// Soft-RL reward `r(s, s') = log PB(s | s')`, plus `log R(s')` when `s'` is terminal.
pub fn rl_reward(env: &DagEnv, pb: &TabularPolicy, s: StateId, next: StateId) -> Result<f64, ParamError> {
    let slot = env.parent_slot(next, s).ok_or(ParamError::InvalidEdge { from: s, to: next })?;
    let mut r = pb.log_prob_slot(next, slot);
    if env.is_terminal(next) {
        r += env.log_reward(next);
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdLoss {
    pub loss: f64,
    pub grads: Gradients,
    /// `Q(s, s') - y` per transition, for replay priorities.
    pub td_errors: Vec<f64>,
}

/// Munchausen bonus parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Munchausen {
    pub alpha: f64,
    /// Lower clip of the log-policy term.
    pub l0: f64,
}

fn td_loss(
    env: &DagEnv,
    q: &QTable,
    q_target: &QTable,
    pb: PbView<'_>,
    batch: &[Transition],
    weights: &[f64],
    leaf_coef: f64,
    munchausen: Option<Munchausen>,
) -> TdLoss {
    assert_eq!(batch.len(), weights.len(), "one importance weight per transition");
    let mut grads = Gradients::zeros(env, pb.trainable, false);
    let mut td_errors = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut brow = Vec::new();
    let mut qrow = Vec::new();
    for (tr, &w) in batch.iter().zip(weights) {
        let b = env.parent_slot_of(tr.state, tr.slot);
        log_softmax_into(pb.policy.row(tr.next), &mut brow);
        let mut r = brow[b];
        if tr.terminal {
            r += env.log_reward(tr.next);
        }
        let mut y = r;
        if let Some(m) = munchausen {
            log_softmax_into(q_target.row(tr.state), &mut qrow);
            y += m.alpha * qrow[tr.slot].clamp(m.l0, 0.0);
        }
        y += q_target.soft_value(tr.next);

        let td = q.value(tr.state, tr.slot) - y;
        let c = if tr.terminal { leaf_coef } else { 1.0 } * w;
        loss += c * td * td;
        td_errors.push(td);

        let g = 2.0 * c * td * scale;
        grads.forward[env.forward_edge(tr.state, tr.slot)] += g;
        if let Some(bg) = grads.backward.as_mut() {
            let range = pb.policy.row_range(tr.next);
            add_log_softmax_grad(&brow, b, -g, &mut bg[range]);
        }
    }
    TdLoss { loss: loss * scale, grads, td_errors }
}

/// SoftDQN: `mean c_i w_i (Q(s,s') - r(s,s') - V_target(s'))^2`, `c_i = leaf_coef`
/// on transitions into terminal states.
pub fn loss_softdqn(
    env: &DagEnv,
    q: &QTable,
    q_target: &QTable,
    pb: PbView<'_>,
    batch: &[Transition],
    weights: &[f64],
    leaf_coef: f64,
) -> TdLoss {
    td_loss(env, q, q_target, pb, batch, weights, leaf_coef, None)
}

/// MunchausenDQN: SoftDQN with the bonus `alpha * clip(log softmax(Q_target(s, .))[s'], l0, 0)`.
pub fn loss_mdqn(
    env: &DagEnv,
    q: &QTable,
    q_target: &QTable,
    pb: PbView<'_>,
    batch: &[Transition],
    weights: &[f64],
    munchausen: Munchausen,
    leaf_coef: f64,
) -> TdLoss {
    td_loss(env, q, q_target, pb, batch, weights, leaf_coef, Some(munchausen))
}

/// Every transition of a trajectory, in order.
pub fn transitions_of(env: &DagEnv, traj: &Trajectory) -> Vec<Transition> {
    (0..traj.len())
        .map(|t| Transition {
            state: traj.states[t],
            slot: traj.actions[t],
            next: traj.states[t + 1],
            terminal: env.is_terminal(traj.states[t + 1]),
        })
        .collect()
}
