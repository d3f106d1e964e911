//! The training loop: sample, update PB, update the forward model, evaluate.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backward::{BackwardError, BackwardKind, BackwardStrategy};
use crate::config::{ConfigError, EnvChoice, ObjectiveKind, RunConfig};
use crate::env::{
    build_bitseq, build_hypergrid, build_micro, count_complete_trajectories, enumerate_trajectories,
    load_edge_list, BitSeqSpec, DagEnv, EnvError, EnvKind, HypergridSpec, MicroDag, StateId, Trajectory,
};
use crate::metrics::{build_bitseq_testset, l1_empirical, l1_exact, mc_log_ptheta, pearson, spearman, ModeTracker, SampleWindow};
use crate::objectives::{
    loss_mdqn, loss_softdqn, trajectory_batch_loss, transitions_of, ForwardTables, Gradients, Munchausen, PbView,
    TrajectoryObjective,
};
use crate::oracle::{exact_marginal, trajectory_log_distributions, PinskerCheck, PinskerTracker};
use crate::params::{
    adam_step, ema_update, AdamConfig, ExpDecay, ForwardLayout, ForwardModel, ParamBundle, ParamError, Schedules,
    TabularPolicy,
};
use crate::replay::{PrioritizedBuffer, ReplayError, Transition};
use crate::report::{MetricsRow, MetricsWriter};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite {tensor} loss ({value}) at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, tensor: String, value: f64 },
    #[error("non-finite gradient in `{tensor}` at index {index}, iteration {iteration}")]
    NonFiniteGradient { iteration: u64, tensor: String, index: usize },
    #[error("parameter update failed at iteration {iteration}: {source}")]
    Param { iteration: u64, source: ParamError },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Whether the run stopped because of a numerical failure.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. })
    }

    fn from_param(iteration: u64, e: ParamError) -> Self {
        match e {
            ParamError::NonFiniteGradient { tensor, index } => TrainError::NonFiniteGradient { iteration, tensor, index },
            source => TrainError::Param { iteration, source },
        }
    }

    fn from_backward(iteration: u64, e: BackwardError) -> Self {
        match e {
            BackwardError::NonFiniteLoss(value) => {
                TrainError::NonFiniteLoss { iteration, tensor: "pb_logits".into(), value }
            }
            BackwardError::Param(p) => Self::from_param(iteration, p),
            BackwardError::Replay(r) => TrainError::Replay(r),
        }
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub sampling: ChaCha8Rng,
    pub replay: ChaCha8Rng,
    pub backward: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self { sampling: stream(1), replay: stream(2), backward: stream(3), eval: stream(4) }
    }
}

/// Builds the environment a config describes.
pub fn build_environment(cfg: &RunConfig) -> Result<DagEnv, EnvError> {
    match cfg.env {
        EnvChoice::Hypergrid => {
            let spec = HypergridSpec { dims: cfg.dims, side: cfg.side, r0: cfg.r0, r1: cfg.r1, r2: cfg.r2 };
            build_hypergrid(&spec, cfg.max_states)
        }
        EnvChoice::BitSeq => {
            let spec = BitSeqSpec {
                n: cfg.bits_n,
                k: cfg.bits_k,
                mode_blocks: cfg.mode_blocks.clone(),
                num_modes: cfg.num_modes,
                threshold: cfg.mode_threshold,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.env_seed);
            build_bitseq(&spec, &mut rng, cfg.max_states).map(|(env, _)| env)
        }
        EnvChoice::Diamond => build_micro(&MicroDag::Diamond),
        EnvChoice::Chain => build_micro(&MicroDag::Chain { length: cfg.chain_length, reward: cfg.chain_reward }),
        EnvChoice::Edges => {
            let path = cfg.edges_path.as_ref().ok_or_else(|| EnvError::InvalidSpec("edges_path is not set".into()))?;
            build_micro(&load_edge_list(path)?)
        }
    }
}

/// Exploration rate at `iteration`: constant, or linear from `epsilon` to 0 over the run.
pub fn anneal_epsilon(iteration: u64, cfg: &RunConfig) -> f64 {
    if !cfg.anneal_epsilon || cfg.iterations == 0 {
        return cfg.epsilon;
    }
    let frac = (iteration as f64 / cfg.iterations as f64).min(1.0);
    cfg.epsilon * (1.0 - frac)
}

/// Samples one trajectory from flat forward log-probabilities, mixing in a uniform
/// child with probability `epsilon`. The recorded `log_pf` are the pure-policy values.
pub fn sample_trajectory_cached<R: Rng + ?Sized>(env: &DagEnv, log_pf: &[f64], epsilon: f64, rng: &mut R) -> Trajectory {
    let offsets = env.child_offsets();
    let mut s = env.initial();
    let mut states = vec![s];
    let mut actions = Vec::new();
    let mut logs = Vec::new();
    while !env.is_terminal(s) {
        let row = &log_pf[offsets[s]..offsets[s + 1]];
        let slot = if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            rng.gen_range(0..row.len())
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, l) in row.iter().enumerate() {
                let p = l.exp();
                acc += p;
                if p > 0.0 {
                    pick = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            pick.expect("every policy row has a positive entry")
        };
        actions.push(slot);
        logs.push(row[slot]);
        s = env.children(s)[slot];
        states.push(s);
    }
    Trajectory { states, actions, log_pf: logs, log_reward: env.log_reward(s) }
}

pub fn sample_trajectory<R: Rng + ?Sized>(env: &DagEnv, pf: &TabularPolicy, epsilon: f64, rng: &mut R) -> Trajectory {
    sample_trajectory_cached(env, &pf.all_log_probs(), epsilon, rng)
}

/// Parameter fingerprints and losses after one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: u64,
    pub loss_forward: f64,
    pub loss_backward: Option<f64>,
    pub forward_fingerprint: u64,
    pub pb_fingerprint: u64,
    pub pb_target_fingerprint: u64,
}

/// A Pinsker check evaluated at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinskerRecord {
    pub iteration: u64,
    pub check: PinskerCheck,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bundle: ParamBundle,
    pub rows: Vec<MetricsRow>,
    pub pinsker: Vec<PinskerRecord>,
    pub trajectories_sampled: u64,
}

fn layout_for(objective: ObjectiveKind) -> ForwardLayout {
    match objective {
        ObjectiveKind::Tb => ForwardLayout::PolicyWithLogZ,
        ObjectiveKind::Db | ObjectiveKind::SubTb => ForwardLayout::PolicyWithFlows,
        ObjectiveKind::SoftDqn | ObjectiveKind::Mdqn => ForwardLayout::SoftQ,
    }
}

pub struct Trainer<'e> {
    env: &'e DagEnv,
    cfg: RunConfig,
    pub bundle: ParamBundle,
    pub strategy: BackwardStrategy,
    rngs: RngStreams,
    transition_replay: Option<PrioritizedBuffer<Transition>>,
    trajectory_replay: Option<PrioritizedBuffer<Trajectory>>,
    window: SampleWindow,
    modes: ModeTracker,
    trajectories_sampled: u64,
    enumerated: Option<Vec<Trajectory>>,
    testset: Option<Vec<StateId>>,
    prev_pb_probs: Option<Vec<f64>>,
    pinsker: PinskerTracker,
    last_loss_forward: Option<f64>,
    last_loss_backward: Option<f64>,
    started: Instant,
}

impl<'e> Trainer<'e> {
    pub fn new(env: &'e DagEnv, cfg: &RunConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let schedules = Schedules {
            forward: ExpDecay { lr0: cfg.lr, gamma: cfg.lr_decay },
            backward: match cfg.backward {
                BackwardKind::Tlm => ExpDecay { lr0: cfg.lr_backward, gamma: cfg.backward_decay },
                _ => ExpDecay::constant(cfg.lr_backward),
            },
            log_z: ExpDecay { lr0: cfg.lr_log_z, gamma: cfg.lr_decay },
        };
        let adam = AdamConfig {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        };
        let mut bundle = ParamBundle::new(env, layout_for(cfg.objective), schedules, adam);
        let strategy = BackwardStrategy::new(env, cfg.backward, cfg.tau, cfg.pessim_window, cfg.pessim_batch, cfg.pessim_steps);
        strategy.initialize(env, &mut bundle);

        let replay = cfg.uses_replay();
        let transition_replay = (replay && cfg.objective.is_dqn())
            .then(|| PrioritizedBuffer::new(cfg.replay_capacity, cfg.replay_alpha, cfg.replay_beta));
        // Trajectory objectives resample uniformly.
        let trajectory_replay =
            (replay && !cfg.objective.is_dqn()).then(|| PrioritizedBuffer::new(cfg.replay_capacity, 0.0, 0.0));

        let enumerated = if count_complete_trajectories(env) <= cfg.enumerate_cap as u128 {
            Some(enumerate_trajectories(env, cfg.enumerate_cap)?)
        } else {
            None
        };
        let testset = match env.kind() {
            EnvKind::BitSeq(layout) => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.env_seed);
                rng.set_stream(1);
                Some(build_bitseq_testset(env, &layout.modes, &mut rng))
            }
            _ => None,
        };
        Ok(Self {
            env,
            cfg: cfg.clone(),
            bundle,
            strategy,
            rngs: RngStreams::new(cfg.seed),
            transition_replay,
            trajectory_replay,
            window: SampleWindow::new(cfg.window),
            modes: ModeTracker::for_env(env),
            trajectories_sampled: 0,
            enumerated,
            testset,
            prev_pb_probs: None,
            pinsker: PinskerTracker::default(),
            last_loss_forward: None,
            last_loss_backward: None,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn trajectories_sampled(&self) -> u64 {
        self.trajectories_sampled
    }

    pub fn modes(&self) -> &ModeTracker {
        &self.modes
    }

    pub fn enumerated(&self) -> Option<&[Trajectory]> {
        self.enumerated.as_deref()
    }

    fn forward_lr(&self) -> f64 {
        self.bundle.schedules.forward.lr_at(self.bundle.iteration)
    }

    fn backward_lr(&self) -> Option<f64> {
        match self.cfg.backward {
            BackwardKind::Uniform | BackwardKind::MaxEnt => None,
            BackwardKind::Naive => Some(self.forward_lr()),
            BackwardKind::Tlm => Some(self.bundle.schedules.backward.lr_at(self.bundle.optim.backward.step)),
            BackwardKind::Pessimistic => Some(self.bundle.schedules.backward.lr0),
        }
    }

    fn sample_batch(&mut self, log_pf: &[f64], epsilon: f64) -> Vec<Trajectory> {
        (0..self.cfg.batch_size)
            .map(|_| sample_trajectory_cached(self.env, log_pf, epsilon, &mut self.rngs.sampling))
            .collect()
    }

    /// One iteration: sample, backward update, forward update.
    pub fn step(&mut self) -> Result<IterationReport, TrainError> {
        let it = self.bundle.iteration;
        let epsilon = anneal_epsilon(it, &self.cfg);
        let log_pf = self.bundle.forward_policy(self.env).all_log_probs();
        let batch = self.sample_batch(&log_pf, epsilon);
        self.trajectories_sampled += batch.len() as u64;
        for t in &batch {
            self.window.push(t.terminal());
            self.modes.update(self.env, t.terminal());
        }

        let pure;
        let pb_batch = if self.cfg.tlm_exclude_exploration && epsilon > 0.0 && self.cfg.backward == BackwardKind::Tlm {
            pure = self.sample_batch(&log_pf, 0.0);
            &pure
        } else {
            &batch
        };
        let loss_backward = self
            .strategy
            .update(self.env, &mut self.bundle, pb_batch, &mut self.rngs.backward)
            .map_err(|e| TrainError::from_backward(it, e))?;

        let loss_forward = if self.cfg.objective.is_dqn() {
            self.forward_step_dqn(&batch)?
        } else {
            self.forward_step_trajectories(batch)?
        };
        self.bundle.iteration += 1;
        self.last_loss_forward = Some(loss_forward);
        self.last_loss_backward = loss_backward;
        Ok(IterationReport {
            iteration: self.bundle.iteration,
            loss_forward,
            loss_backward,
            forward_fingerprint: crate::params::fingerprint(self.bundle.forward.logits()),
            pb_fingerprint: self.bundle.pb.fingerprint(),
            pb_target_fingerprint: self.bundle.pb_target.fingerprint(),
        })
    }

    fn pb_for_forward(&self) -> PbView<'_> {
        let policy = if self.strategy.forward_reads_target() { &self.bundle.pb_target } else { &self.bundle.pb };
        PbView { policy, trainable: self.strategy.pb_trainable_in_forward() }
    }

    fn forward_step_trajectories(&mut self, batch: Vec<Trajectory>) -> Result<f64, TrainError> {
        let it = self.bundle.iteration;
        let train_batch = match self.trajectory_replay.as_mut() {
            Some(buf) => {
                buf.push(batch);
                buf.sample(self.cfg.batch_size, &mut self.rngs.replay)?.items
            }
            None => batch,
        };
        let objective = match self.cfg.objective {
            ObjectiveKind::Tb => TrajectoryObjective::Tb,
            ObjectiveKind::Db => TrajectoryObjective::Db,
            _ => TrajectoryObjective::SubTb { lambda: self.cfg.subtb_lambda },
        };
        let ForwardModel::Policy(pf) = &self.bundle.forward else {
            unreachable!("trajectory objectives use a policy table")
        };
        let tables = ForwardTables { pf, log_z: self.bundle.log_z, flows: self.bundle.flows.as_ref() };
        let loss = trajectory_batch_loss(self.env, objective, tables, self.pb_for_forward(), &train_batch);
        if !loss.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: it, tensor: "pf_logits".into(), value: loss.loss });
        }
        self.apply_forward_grads(&loss.grads)?;
        Ok(loss.loss)
    }

    fn forward_step_dqn(&mut self, batch: &[Trajectory]) -> Result<f64, TrainError> {
        let it = self.bundle.iteration;
        let transitions: Vec<Transition> = batch.iter().flat_map(|t| transitions_of(self.env, t)).collect();
        let (items, weights, indices) = match self.transition_replay.as_mut() {
            Some(buf) => {
                buf.push(transitions);
                let s = buf.sample(self.cfg.replay_batch, &mut self.rngs.replay)?;
                (s.items, s.weights, Some(s.indices))
            }
            None => {
                let w = vec![1.0; transitions.len()];
                (transitions, w, None)
            }
        };
        let ForwardModel::SoftQ { q, q_target } = &self.bundle.forward else {
            unreachable!("DQN objectives use a Q-table")
        };
        let pb = self.pb_for_forward();
        let td = match self.cfg.objective {
            ObjectiveKind::Mdqn => {
                let m = Munchausen { alpha: self.cfg.mdqn_alpha, l0: self.cfg.mdqn_l0 };
                loss_mdqn(self.env, q, q_target, pb, &items, &weights, m, self.cfg.leaf_coef)
            }
            _ => loss_softdqn(self.env, q, q_target, pb, &items, &weights, self.cfg.leaf_coef),
        };
        if !td.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: it, tensor: "q_values".into(), value: td.loss });
        }
        if let (Some(buf), Some(idx)) = (self.transition_replay.as_mut(), indices) {
            buf.update_priorities(&idx, &td.td_errors)?;
        }
        self.apply_forward_grads(&td.grads)?;
        if let ForwardModel::SoftQ { q, q_target } = &mut self.bundle.forward {
            ema_update(&mut q_target.values, &q.values, self.cfg.q_target_tau);
        }
        Ok(td.loss)
    }

    fn apply_forward_grads(&mut self, grads: &Gradients) -> Result<(), TrainError> {
        let it = self.bundle.iteration;
        let lr = self.forward_lr();
        let b = &mut self.bundle;
        let name = b.forward.tensor_name();
        let err = |e| TrainError::from_param(it, e);
        adam_step(name, b.forward.logits_mut(), &grads.forward, &mut b.optim.forward, lr, &b.adam).map_err(err)?;
        if let (Some(flows), Some(g), Some(st)) = (b.flows.as_mut(), grads.log_flow.as_ref(), b.optim.log_flow.as_mut()) {
            adam_step("log_flow", &mut flows.log_flow, g, st, lr, &b.adam).map_err(err)?;
        }
        if let (Some(z), Some(st)) = (b.log_z.as_mut(), b.optim.log_z.as_mut()) {
            let lr_z = b.schedules.log_z.lr_at(it);
            let mut zz = [*z];
            adam_step("log_z", &mut zz, &[grads.log_z], st, lr_z, &b.adam).map_err(err)?;
            *z = zz[0];
        }
        if let Some(pb_grads) = grads.backward.as_ref() {
            crate::backward::naive_coupling(b, pb_grads, lr).map_err(|e| TrainError::from_backward(it, e))?;
        }
        Ok(())
    }

    /// Computes one metrics row for the current parameters.
    pub fn evaluate(&mut self) -> (MetricsRow, Option<PinskerCheck>) {
        let env = self.env;
        let pf = self.bundle.forward_policy(env);
        let it = self.bundle.iteration;

        let marg = exact_marginal(env, &pf);
        let target = env.target_distribution();
        let l1 = crate::oracle::l1_distance(&marg.terminal_marginal, &target);
        debug_assert!((l1 - l1_exact(env, &pf)).abs() < 1e-12);

        let (spearman_v, pearson_v) = self.correlations(&pf, &marg.terminal_marginal);
        let pb = &self.bundle.pb;

        let (kl, pinsker) = match &self.enumerated {
            Some(trajs) => {
                let (lf, lb) = trajectory_log_distributions(env, trajs, &pf, pb);
                let kl: f64 = lf
                    .iter()
                    .zip(&lb)
                    .map(|(&f, &b)| if f == f64::NEG_INFINITY { 0.0 } else { f.exp() * (f - b) })
                    .sum();
                let pf_probs: Vec<f64> = lf.iter().map(|l| l.exp()).collect();
                let pb_probs: Vec<f64> = lb.iter().map(|l| l.exp()).collect();
                let check = self.pinsker.push(&pf_probs, &pb_probs, kl);
                (Some(kl), Some(check))
            }
            None => (None, None),
        };

        let pb_probs: Vec<f64> = pb.all_log_probs().into_iter().map(f64::exp).collect();
        let drift = self.prev_pb_probs.as_ref().map(|prev| crate::oracle::l1_distance(prev, &pb_probs));
        self.prev_pb_probs = Some(pb_probs);

        let row = MetricsRow {
            iteration: it,
            trajectories_sampled: self.trajectories_sampled,
            loss_forward: self.last_loss_forward,
            loss_backward: self.last_loss_backward,
            l1_exact: Some(l1),
            l1_empirical: l1_empirical(env, &self.window).ok(),
            spearman: spearman_v,
            pearson: pearson_v,
            modes_found: (self.modes.num_modes() > 0).then(|| self.modes.found()),
            log_z_estimate: self.bundle.log_z,
            kl_exact: kl,
            pb_drift_l1: drift,
            lr_forward: Some(self.forward_lr()),
            lr_backward: self.backward_lr(),
            epsilon: Some(anneal_epsilon(it, &self.cfg)),
            wall_time_s: self.cfg.log_wall_time.then(|| self.started.elapsed().as_secs_f64()),
            seed: self.cfg.seed,
        };
        (row, pinsker)
    }

    /// Spearman of `R` against `P_theta` and Pearson of `log R` against `log P_theta`:
    /// on the bit-sequence test set with Monte-Carlo estimates, else over all
    /// terminals with the exact marginal.
    fn correlations(&mut self, pf: &TabularPolicy, marginal: &[f64]) -> (Option<f64>, Option<f64>) {
        let env = self.env;
        let (log_r, log_p): (Vec<f64>, Vec<f64>) = match &self.testset {
            Some(test) => {
                let mut pairs = Vec::with_capacity(test.len());
                for &x in test {
                    match mc_log_ptheta(env, pf, &self.bundle.pb, x, self.cfg.mc_samples, &mut self.rngs.eval) {
                        Ok(lp) => pairs.push((env.log_reward(x), lp)),
                        Err(_) => return (None, None),
                    }
                }
                pairs.into_iter().unzip()
            }
            None => (env.terminal_log_rewards().to_vec(), marginal.iter().map(|p| p.ln()).collect()),
        };
        if log_p.iter().any(|l| !l.is_finite()) {
            return (None, None);
        }
        (spearman(&log_r, &log_p).ok(), pearson(&log_r, &log_p).ok())
    }

    fn is_eval_point(&self) -> bool {
        let it = self.bundle.iteration;
        it % self.cfg.eval_every == 0 || it == self.cfg.iterations
    }

    /// Runs all configured iterations, evaluating at iteration 0, every
    /// `eval_every` iterations and at the end. Rows are written and flushed as
    /// they are produced, so a failed run leaves a valid partial CSV.
    pub fn run<W: Write>(mut self, mut writer: Option<&mut MetricsWriter<W>>) -> Result<TrainOutput, TrainError> {
        let mut rows = Vec::new();
        let mut pinsker = Vec::new();
        let mut record = |t: &mut Self, rows: &mut Vec<MetricsRow>, writer: &mut Option<&mut MetricsWriter<W>>| {
            let (row, check) = t.evaluate();
            if let Some(check) = check {
                pinsker.push(PinskerRecord { iteration: row.iteration, check });
            }
            if let Some(w) = writer.as_mut() {
                w.write_row(&row)?;
            }
            rows.push(row);
            Ok::<(), TrainError>(())
        };
        record(&mut self, &mut rows, &mut writer)?;
        while self.bundle.iteration < self.cfg.iterations {
            self.step()?;
            if self.is_eval_point() {
                record(&mut self, &mut rows, &mut writer)?;
            }
        }
        Ok(TrainOutput { trajectories_sampled: self.trajectories_sampled, bundle: self.bundle, rows, pinsker })
    }
}

/// Builds the environment and runs a full training job.
pub fn train<W: Write>(cfg: &RunConfig, writer: Option<&mut MetricsWriter<W>>) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let env = build_environment(cfg)?;
    Trainer::new(&env, cfg)?.run(writer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::optimal_pf_given_pb;
    use crate::params::Direction;

    fn diamond_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.env = EnvChoice::Diamond;
        cfg.objective = ObjectiveKind::Tb;
        cfg.backward = BackwardKind::Uniform;
        cfg
    }

    #[test]
    fn epsilon_schedule() {
        let mut cfg = RunConfig::default();
        cfg.epsilon = 0.1;
        cfg.iterations = 1000;
        assert_eq!(anneal_epsilon(500, &cfg), 0.1);
        cfg.anneal_epsilon = true;
        assert!((anneal_epsilon(500, &cfg) - 0.05).abs() < 1e-15);
        assert_eq!(anneal_epsilon(1000, &cfg), 0.0);
        assert_eq!(anneal_epsilon(0, &cfg), 0.1);
    }

    #[test]
    fn sampling_examples() {
        let env = build_micro(&MicroDag::Diamond).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut skewed = TabularPolicy::uniform(&env, Direction::Forward);
        skewed.row_mut(0)[0] = 30.0;
        let n = 20_000;
        let via_a = (0..n).filter(|_| sample_trajectory(&env, &skewed, 1.0, &mut rng).states[1] == 1).count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((via_a as f64 - n as f64 / 2.0).abs() < 3.0 * sd);
        let t = sample_trajectory(&env, &skewed, 1.0, &mut rng);
        assert_eq!(t.log_pf, vec![skewed.log_probs(0)[t.actions[0]], 0.0]);

        let (proper, _) = optimal_pf_given_pb(&env, &TabularPolicy::uniform(&env, Direction::Backward));
        let via_a = (0..n).filter(|_| sample_trajectory(&env, &proper, 0.0, &mut rng).states[1] == 1).count();
        assert!((via_a as f64 - n as f64 / 2.0).abs() < 3.0 * sd);

        let chain = build_micro(&MicroDag::Chain { length: 3, reward: 1.0 }).unwrap();
        let pf = TabularPolicy::uniform(&chain, Direction::Forward);
        for eps in [0.0, 0.5, 1.0] {
            assert_eq!(sample_trajectory(&chain, &pf, eps, &mut rng).states, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn zero_iterations_give_one_row() {
        let mut cfg = diamond_cfg();
        cfg.iterations = 0;
        let out = train::<Vec<u8>>(&cfg, None).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].iteration, 0);
        assert_eq!(out.rows[0].loss_forward, None);
    }

    #[test]
    fn diamond_tb_converges() {
        let mut cfg = diamond_cfg();
        cfg.lr = 0.1;
        cfg.iterations = 2000;
        let env = build_environment(&cfg).unwrap();
        let out = Trainer::new(&env, &cfg).unwrap().run::<Vec<u8>>(None).unwrap();
        let pf = out.bundle.forward_policy(&env);
        assert!(l1_exact(&env, &pf) < 1e-3);
        assert!((out.bundle.log_z.unwrap() - 2f64.ln()).abs() < 1e-2);
    }

    #[test]
    fn eval_rows_follow_cadence() {
        let mut cfg = diamond_cfg();
        cfg.iterations = 250;
        let out = train::<Vec<u8>>(&cfg, None).unwrap();
        let its: Vec<u64> = out.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 100, 200, 250]);
        assert_eq!(out.rows[3].trajectories_sampled, 250 * 16);
    }

    #[test]
    fn uniform_pb_is_untouched_and_naive_moves() {
        let mut cfg = RunConfig::default();
        cfg.side = 4;
        cfg.iterations = 50;
        cfg.objective = ObjectiveKind::Db;
        let env = build_environment(&cfg).unwrap();
        cfg.backward = BackwardKind::Uniform;
        let t = Trainer::new(&env, &cfg).unwrap();
        let before = t.bundle.pb.fingerprint();
        let out = t.run::<Vec<u8>>(None).unwrap();
        assert_eq!(out.bundle.pb.fingerprint(), before);

        cfg.backward = BackwardKind::Naive;
        let out = Trainer::new(&env, &cfg).unwrap().run::<Vec<u8>>(None).unwrap();
        assert_ne!(out.bundle.pb.fingerprint(), before);
    }

    #[test]
    fn tlm_forward_reads_the_fresh_target() {
        let mut cfg = RunConfig::default();
        cfg.side = 4;
        cfg.objective = ObjectiveKind::Tb;
        let env = build_environment(&cfg).unwrap();
        let mut t = Trainer::new(&env, &cfg).unwrap();
        let initial_target = t.bundle.pb_target.fingerprint();
        let r = t.step().unwrap();
        assert!(r.loss_backward.is_some());
        assert_ne!(r.pb_target_fingerprint, initial_target);
        assert!(t.pb_for_forward().policy.fingerprint() == r.pb_target_fingerprint);
    }

    #[test]
    fn dqn_objectives_run() {
        for objective in [ObjectiveKind::SoftDqn, ObjectiveKind::Mdqn] {
            let mut cfg = RunConfig::default();
            cfg.side = 4;
            cfg.iterations = 30;
            cfg.objective = objective;
            cfg.eval_every = 10;
            let out = train::<Vec<u8>>(&cfg, None).unwrap();
            assert_eq!(out.rows.len(), 4);
            assert!(out.rows.iter().skip(1).all(|r| r.loss_forward.unwrap().is_finite()));
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let mut cfg = diamond_cfg();
        cfg.iterations = 10;
        let env = build_environment(&cfg).unwrap();
        let mut t = Trainer::new(&env, &cfg).unwrap();
        t.bundle.log_z = Some(f64::NAN);
        let err = t.step().unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("iteration 0"));
        assert!(err.to_string().contains("pf_logits"));
    }
}
