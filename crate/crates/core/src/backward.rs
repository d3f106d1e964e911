//! Backward-policy approaches behind one strategy type.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::env::{DagEnv, Trajectory};
use crate::logspace::{add_log_softmax_grad, log_softmax_into};
use crate::params::{adam_step, ema_update, Direction, ParamBundle, ParamError, TabularPolicy};
use crate::replay::{ReplayError, TrajectoryBuffer};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BackwardError {
    #[error("non-finite backward loss {0}")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackwardKind {
    Uniform,
    Naive,
    Tlm,
    MaxEnt,
    Pessimistic,
}

impl BackwardKind {
    pub const ALL: [BackwardKind; 5] = [
        BackwardKind::Uniform,
        BackwardKind::Naive,
        BackwardKind::Tlm,
        BackwardKind::MaxEnt,
        BackwardKind::Pessimistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackwardKind::Uniform => "uniform",
            BackwardKind::Naive => "naive",
            BackwardKind::Tlm => "tlm",
            BackwardKind::MaxEnt => "maxent",
            BackwardKind::Pessimistic => "pessimistic",
        }
    }

    /// PB never changes after initialisation.
    pub fn is_frozen(self) -> bool {
        matches!(self, BackwardKind::Uniform | BackwardKind::MaxEnt)
    }
}

impl fmt::Display for BackwardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackwardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackwardKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown backward approach `{s}`"))
    }
}

/// Number of trajectories from `s0` to each state.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCountTable {
    pub log_n: Vec<f64>,
    /// Exact counts while they fit in `u128`.
    pub exact: Option<Vec<u128>>,
}

impl PathCountTable {
    pub fn new(env: &DagEnv) -> Self {
        crate::oracle::count_paths(env)
    }

    /// `PB(s | s') = n(s) / n(s')`, stored as logits `log n(parent)`.
    pub fn maxent_policy(&self, env: &DagEnv) -> TabularPolicy {
        let mut pb = TabularPolicy::uniform(env, Direction::Backward);
        for s in 1..env.num_states() {
            for (slot, &p) in env.parents(s).iter().enumerate() {
                pb.row_mut(s)[slot] = self.log_n[p];
            }
        }
        pb
    }
}

/// Backward loss value with gradients into the backward logits only.
#[derive(Debug, Clone, PartialEq)]
pub struct TlmLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
}

fn accumulate_tlm(env: &DagEnv, pb: &TabularPolicy, traj: &Trajectory, scale: f64, grads: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    let mut row = Vec::new();
    for t in 0..traj.len() {
        let (s, next, a) = (traj.states[t], traj.states[t + 1], traj.actions[t]);
        let slot = env.parent_slot_of(s, a);
        log_softmax_into(pb.row(next), &mut row);
        loss -= row[slot];
        add_log_softmax_grad(&row, slot, -scale, &mut grads[pb.row_range(next)]);
    }
    loss
}

/// `-sum_i log PB(s_{i-1} | s_i)` for one trajectory.
pub fn tlm_loss(env: &DagEnv, pb: &TabularPolicy, traj: &Trajectory) -> TlmLoss {
    let mut grads = vec![0.0; pb.logits.len()];
    let loss = accumulate_tlm(env, pb, traj, 1.0, &mut grads);
    TlmLoss { loss, grads }
}

/// Mean of [`tlm_loss`] over a batch.
pub fn tlm_batch_loss(env: &DagEnv, pb: &TabularPolicy, batch: &[Trajectory]) -> TlmLoss {
    let mut grads = vec![0.0; pb.logits.len()];
    let scale = 1.0 / batch.len().max(1) as f64;
    let total: f64 = batch.iter().map(|t| accumulate_tlm(env, pb, t, scale, &mut grads)).sum();
    TlmLoss { loss: total * scale, grads }
}

/// One Adam step on the mean likelihood loss, at the backward schedule's current rate.
fn likelihood_step(env: &DagEnv, bundle: &mut ParamBundle, batch: &[Trajectory], lr: f64) -> Result<f64, BackwardError> {
    let l = tlm_batch_loss(env, &bundle.pb, batch);
    if !l.loss.is_finite() {
        return Err(BackwardError::NonFiniteLoss(l.loss));
    }
    adam_step("pb_logits", &mut bundle.pb.logits, &l.grads, &mut bundle.optim.backward, lr, &bundle.adam)?;
    Ok(l.loss)
}

/// TLM update: Adam on the decayed backward rate, then `pb_target <- EMA(pb, tau)`.
pub fn tlm_step(env: &DagEnv, bundle: &mut ParamBundle, batch: &[Trajectory], tau: f64) -> Result<f64, BackwardError> {
    let lr = bundle.schedules.backward.lr_at(bundle.optim.backward.step);
    let loss = likelihood_step(env, bundle, batch, lr)?;
    ema_update(&mut bundle.pb_target.logits, &bundle.pb.logits, tau);
    Ok(loss)
}

/// Pessimistic update: `steps` Adam steps on the likelihood of trajectories drawn
/// from the recency buffer, at the undecayed backward rate.
pub fn pessimistic_step<R: Rng + ?Sized>(
    env: &DagEnv,
    bundle: &mut ParamBundle,
    buffer: &TrajectoryBuffer,
    batch_size: usize,
    steps: usize,
    rng: &mut R,
) -> Result<f64, BackwardError> {
    let lr = bundle.schedules.backward.lr0;
    let mut loss = 0.0;
    for _ in 0..steps {
        let batch = buffer.sample(batch_size, rng)?;
        loss = likelihood_step(env, bundle, &batch, lr)?;
    }
    bundle.pb_target.logits.copy_from_slice(&bundle.pb.logits);
    Ok(loss)
}

/// Naive update: the forward loss's own gradient, one Adam step at the forward rate.
pub fn naive_coupling(bundle: &mut ParamBundle, pb_grads: &[f64], forward_lr: f64) -> Result<(), BackwardError> {
    adam_step("pb_logits", &mut bundle.pb.logits, pb_grads, &mut bundle.optim.backward, forward_lr, &bundle.adam)?;
    bundle.pb_target.logits.copy_from_slice(&bundle.pb.logits);
    Ok(())
}

/// Per-run backward state.
#[derive(Debug, Clone)]
pub struct BackwardStrategy {
    pub kind: BackwardKind,
    /// EMA rate for the TLM target.
    pub tau: f64,
    pub buffer: Option<TrajectoryBuffer>,
    pub pessim_batch: usize,
    pub pessim_steps: usize,
    pub path_counts: Option<PathCountTable>,
}

impl BackwardStrategy {
    pub fn new(env: &DagEnv, kind: BackwardKind, tau: f64, pessim_window: usize, pessim_batch: usize, pessim_steps: usize) -> Self {
        Self {
            kind,
            tau,
            buffer: (kind == BackwardKind::Pessimistic).then(|| TrajectoryBuffer::new(pessim_window)),
            pessim_batch,
            pessim_steps,
            path_counts: (kind == BackwardKind::MaxEnt).then(|| PathCountTable::new(env)),
        }
    }

    /// Sets `pb` and `pb_target` to the strategy's starting point: uniform, or the
    /// path-count policy for MaxEnt.
    pub fn initialize(&self, env: &DagEnv, bundle: &mut ParamBundle) {
        bundle.pb = match &self.path_counts {
            Some(table) => table.maxent_policy(env),
            None => TabularPolicy::uniform(env, Direction::Backward),
        };
        bundle.pb_target = bundle.pb.clone();
    }

    /// Which copy of PB the forward loss reads.
    pub fn forward_reads_target(&self) -> bool {
        self.kind == BackwardKind::Tlm
    }

    /// Whether the forward loss differentiates through PB.
    pub fn pb_trainable_in_forward(&self) -> bool {
        self.kind == BackwardKind::Naive
    }

    /// Runs the strategy's own PB update after the forward step. Returns the
    /// backward loss when one was computed.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        env: &DagEnv,
        bundle: &mut ParamBundle,
        batch: &[Trajectory],
        rng: &mut R,
    ) -> Result<Option<f64>, BackwardError> {
        match self.kind {
            BackwardKind::Uniform | BackwardKind::MaxEnt | BackwardKind::Naive => Ok(None),
            BackwardKind::Tlm => tlm_step(env, bundle, batch, self.tau).map(Some),
            BackwardKind::Pessimistic => {
                let buffer = self.buffer.as_mut().expect("pessimistic strategy owns a buffer");
                buffer.push_batch(batch.to_vec());
                pessimistic_step(env, bundle, buffer, self.pessim_batch, self.pessim_steps, rng).map(Some)
            }
        }
    }
}
