//! Exact computations on enumerable environments.
//!
//! Marginals, soft values and proper policies come from dynamic programming in
//! topological order; trajectory-level quantities (KL, balance residuals) come
//! from explicit enumeration. The two routes are independent, which is what
//! lets one check the other.

use crate::backward::PathCountTable;
use crate::env::{enumerate_trajectories, DagEnv, EnvError, StateId, Trajectory, DEFAULT_MAX_TRAJECTORIES};
use crate::logspace::{log_softmax, log_sum_exp};
use crate::params::{Direction, FlowTable, QTable, TabularPolicy};

/// Tolerances shared by oracle-based checks.
pub mod tol {
    /// Value identity `V(s0) = log Z - KL`.
    pub const VALUE_IDENTITY: f64 = 1e-10;
    /// Trajectory-balance log-residual after one exact alternation.
    pub const TB_RESIDUAL: f64 = 1e-9;
    /// Trajectory KL after one exact alternation.
    pub const ALTERNATION_KL: f64 = 1e-12;
    /// Elementwise agreement of two constructions of the same policy.
    pub const POLICY_AGREEMENT: f64 = 1e-12;
    /// Marginals and probability normalisation.
    pub const MARGINAL: f64 = 1e-12;
    /// Cross-check of DP marginals against trajectory enumeration.
    pub const ENUMERATION: f64 = 1e-14;
}

/// Forward visitation probabilities and the induced terminal marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistributions {
    pub log_visit: Vec<f64>,
    pub visit_prob: Vec<f64>,
    /// `P(x)` aligned with `env.terminals()`.
    pub terminal_marginal: Vec<f64>,
    pub log_z: f64,
}

/// Forward DP `p(s') = sum_s p(s) PF(s' | s)` in log space.
pub fn exact_marginal(env: &DagEnv, pf: &TabularPolicy) -> ExactDistributions {
    let n = env.num_states();
    let mut incoming: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut log_visit = vec![f64::NEG_INFINITY; n];
    log_visit[0] = 0.0;
    for s in 0..n {
        if s > 0 {
            log_visit[s] = log_sum_exp(&incoming[s]);
            incoming[s] = Vec::new();
        }
        if env.is_terminal(s) {
            continue;
        }
        let lp = pf.log_probs(s);
        for (j, &c) in env.children(s).iter().enumerate() {
            incoming[c].push(log_visit[s] + lp[j]);
        }
    }
    let visit_prob: Vec<f64> = log_visit.iter().map(|l| l.exp()).collect();
    let terminal_marginal = env.terminals().iter().map(|&x| visit_prob[x]).collect();
    ExactDistributions { log_visit, visit_prob, terminal_marginal, log_z: env.log_partition() }
}

/// `(log PF(tau), log PB(tau | x))` from flat log-probability tables.
pub fn trajectory_log_probs(env: &DagEnv, log_pf: &[f64], log_pb: &[f64], traj: &Trajectory) -> (f64, f64) {
    let mut f = 0.0;
    let mut b = 0.0;
    for t in 0..traj.len() {
        let (s, a) = (traj.states[t], traj.actions[t]);
        f += log_pf[env.forward_edge(s, a)];
        b += log_pb[env.backward_edge(traj.states[t + 1], env.parent_slot_of(s, a))];
    }
    (f, b)
}

/// `log Ptraj_PF(tau)` and `log Ptraj_PB(tau) = log R(x) - log Z + log PB(tau | x)` for
/// every trajectory.
pub fn trajectory_log_distributions(
    env: &DagEnv,
    trajs: &[Trajectory],
    pf: &TabularPolicy,
    pb: &TabularPolicy,
) -> (Vec<f64>, Vec<f64>) {
    let lpf = pf.all_log_probs();
    let lpb = pb.all_log_probs();
    let log_z = env.log_partition();
    trajs
        .iter()
        .map(|t| {
            let (f, b) = trajectory_log_probs(env, &lpf, &lpb, t);
            (f, t.log_reward - log_z + b)
        })
        .unzip()
}

/// `KL(Ptraj_PF || Ptraj_PB)` summed over the given (complete) trajectory set.
pub fn traj_kl_over(env: &DagEnv, trajs: &[Trajectory], pf: &TabularPolicy, pb: &TabularPolicy) -> f64 {
    let (lf, lb) = trajectory_log_distributions(env, trajs, pf, pb);
    lf.iter()
        .zip(&lb)
        .map(|(&f, &b)| if f == f64::NEG_INFINITY { 0.0 } else { f.exp() * (f - b) })
        .sum()
}

/// `KL(Ptraj_PF || Ptraj_PB)` by explicit enumeration of every complete trajectory.
pub fn exact_traj_kl(env: &DagEnv, pf: &TabularPolicy, pb: &TabularPolicy) -> Result<f64, EnvError> {
    let trajs = enumerate_trajectories(env, DEFAULT_MAX_TRAJECTORIES)?;
    Ok(traj_kl_over(env, &trajs, pf, pb))
}

/// Largest `|log Ptraj_PF - log Ptraj_PB|` over the trajectory set.
pub fn max_tb_residual(env: &DagEnv, trajs: &[Trajectory], pf: &TabularPolicy, pb: &TabularPolicy) -> f64 {
    let (lf, lb) = trajectory_log_distributions(env, trajs, pf, pb);
    lf.iter().zip(&lb).map(|(f, b)| (f - b).abs()).fold(0.0, f64::max)
}

/// Entropy-regularised value of `pf` under rewards built from `pb`, for every state.
///
/// `V(x) = 0` at terminals and
/// `V(s) = sum_s' PF(s'|s) (r(s, s') - log PF(s'|s) + V(s'))`.
pub fn soft_policy_eval(env: &DagEnv, pf: &TabularPolicy, pb: &TabularPolicy) -> Vec<f64> {
    let n = env.num_states();
    let mut v = vec![0.0; n];
    for s in (0..n).rev() {
        if env.is_terminal(s) {
            continue;
        }
        let lpf = pf.log_probs(s);
        let mut acc = 0.0;
        for (j, &c) in env.children(s).iter().enumerate() {
            if lpf[j] == f64::NEG_INFINITY {
                continue;
            }
            let r = reward_from_pb(env, pb, s, j, c);
            acc += lpf[j].exp() * (r - lpf[j] + v[c]);
        }
        v[s] = acc;
    }
    v
}

fn reward_from_pb(env: &DagEnv, pb: &TabularPolicy, s: StateId, slot: usize, child: StateId) -> f64 {
    let mut r = pb.log_probs(child)[env.parent_slot_of(s, slot)];
    if env.is_terminal(child) {
        r += env.log_reward(child);
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftOptimal {
    pub q: QTable,
    pub v: Vec<f64>,
    /// `softmax(Q*)`.
    pub policy: TabularPolicy,
}

/// Soft Bellman backup `Q*(s,s') = r(s,s') + V*(s')`, `V*(s) = log sum exp Q*(s, .)`.
pub fn soft_optimal_values(env: &DagEnv, pb: &TabularPolicy) -> SoftOptimal {
    let n = env.num_states();
    let mut q = QTable::zeros(env);
    let mut v = vec![0.0; n];
    for s in (0..n).rev() {
        if env.is_terminal(s) {
            continue;
        }
        for (j, &c) in env.children(s).iter().enumerate() {
            q.values[env.forward_edge(s, j)] = reward_from_pb(env, pb, s, j, c) + v[c];
        }
        v[s] = log_sum_exp(q.row(s));
    }
    let policy = q.policy(env);
    SoftOptimal { q, v, policy }
}

/// The unique forward policy balancing `pb`, built from backward flows:
/// `F(x) = R(x)`, `F(s) = sum_s' PB(s|s') F(s')`, `PF(s'|s) = PB(s|s') F(s') / F(s)`.
///
/// The returned policy's logits are its log-probabilities.
pub fn optimal_pf_given_pb(env: &DagEnv, pb: &TabularPolicy) -> (TabularPolicy, FlowTable) {
    let n = env.num_states();
    let mut log_f = vec![0.0; n];
    let mut logits = vec![0.0; env.num_forward_edges()];
    let mut terms = Vec::new();
    for s in (0..n).rev() {
        if env.is_terminal(s) {
            log_f[s] = env.log_reward(s);
            continue;
        }
        terms.clear();
        for (j, &c) in env.children(s).iter().enumerate() {
            terms.push(pb.log_probs(c)[env.parent_slot_of(s, j)] + log_f[c]);
        }
        log_f[s] = log_sum_exp(&terms);
        for (j, t) in terms.iter().enumerate() {
            logits[env.forward_edge(s, j)] = t - log_f[s];
        }
    }
    (
        TabularPolicy::from_logits(env, Direction::Forward, logits),
        FlowTable { log_flow: log_f },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub pb: TabularPolicy,
    /// Non-initial states never visited under PF; their rows are left uniform.
    pub unvisited: Vec<StateId>,
}

/// Exact minimiser of `KL(Ptraj_PF || Ptraj_PB)` over PB:
/// `PB(s | s') = p(s) PF(s' | s) / p(s')`.
pub fn posterior_pb_given_pf(env: &DagEnv, pf: &TabularPolicy) -> Posterior {
    let marg = exact_marginal(env, pf);
    let mut pb = TabularPolicy::uniform(env, Direction::Backward);
    let mut unvisited = Vec::new();
    for s in 1..env.num_states() {
        if marg.log_visit[s] == f64::NEG_INFINITY {
            unvisited.push(s);
            continue;
        }
        let row: Vec<f64> = env
            .parents(s)
            .iter()
            .enumerate()
            .map(|(p, &parent)| {
                let j = env.child_slot_of(s, p);
                marg.log_visit[parent] + pf.log_probs(parent)[j] - marg.log_visit[s]
            })
            .collect();
        pb.row_mut(s).copy_from_slice(&row);
    }
    Posterior { pb, unvisited }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alternation {
    pub pb1: TabularPolicy,
    pub pf1: TabularPolicy,
    pub unvisited: Vec<StateId>,
}

/// One exact round of the alternating scheme: posterior PB, then its proper PF.
pub fn exact_alternation(env: &DagEnv, pf0: &TabularPolicy) -> Alternation {
    let Posterior { pb, unvisited } = posterior_pb_given_pf(env, pf0);
    let (pf1, _) = optimal_pf_given_pb(env, &pb);
    Alternation { pb1: pb, pf1, unvisited }
}

/// Number of trajectories from `s0` to every state, in log space and exactly
/// (when it fits in `u128`).
pub fn count_paths(env: &DagEnv) -> PathCountTable {
    let n = env.num_states();
    let mut exact: Option<Vec<u128>> = Some(vec![0; n]);
    let mut log_n = vec![f64::NEG_INFINITY; n];
    log_n[0] = 0.0;
    if let Some(e) = exact.as_mut() {
        e[0] = 1;
    }
    let mut terms = Vec::new();
    for s in 1..n {
        terms.clear();
        terms.extend(env.parents(s).iter().map(|&p| log_n[p]));
        log_n[s] = log_sum_exp(&terms);
        if let Some(e) = exact.as_mut() {
            let mut total = 0u128;
            let mut overflow = false;
            for &p in env.parents(s) {
                match total.checked_add(e[p]) {
                    Some(t) => total = t,
                    None => overflow = true,
                }
            }
            if overflow {
                exact = None;
            } else {
                e[s] = total;
            }
        }
    }
    PathCountTable { log_n, exact }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `KL(p || q)` for explicit probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
        .sum()
}

/// Outcome of the averaged Pinsker bound
/// `||avg Ptraj_PF - Ptraj_PB*||_1 <= sqrt(2 avg_regret) + drift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinskerCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn pinsker_gap(avg_pf_traj: &[f64], pb_star_traj: &[f64], avg_regret: f64, avg_pb_drift: f64) -> PinskerCheck {
    let lhs = l1_distance(avg_pf_traj, pb_star_traj);
    let rhs = (2.0 * avg_regret.max(0.0)).sqrt() + avg_pb_drift;
    // Rounding slack for distributions that coincide.
    PinskerCheck { lhs, rhs, holds: lhs <= rhs + 1e-12 }
}

/// Running averages of trajectory distributions across checkpoints, for the
/// averaged Pinsker bound.
#[derive(Debug, Clone, Default)]
pub struct PinskerTracker {
    sum_pf: Vec<f64>,
    sum_pb: Vec<f64>,
    sum_kl: f64,
    count: usize,
}

impl PinskerTracker {
    /// Adds a checkpoint and checks the averaged bound, taking the checkpoint's
    /// own backward trajectory distribution as the reference.
    pub fn push(&mut self, pf: &[f64], pb: &[f64], kl: f64) -> PinskerCheck {
        if self.sum_pf.is_empty() {
            self.sum_pf = vec![0.0; pf.len()];
            self.sum_pb = vec![0.0; pb.len()];
        }
        for (a, b) in self.sum_pf.iter_mut().zip(pf) {
            *a += b;
        }
        for (a, b) in self.sum_pb.iter_mut().zip(pb) {
            *a += b;
        }
        self.sum_kl += kl;
        self.count += 1;
        let n = self.count as f64;
        let avg_pf: Vec<f64> = self.sum_pf.iter().map(|v| v / n).collect();
        let avg_pb: Vec<f64> = self.sum_pb.iter().map(|v| v / n).collect();
        let drift = l1_distance(&avg_pb, pb);
        pinsker_gap(&avg_pf, pb, self.sum_kl / n, drift)
    }
}

/// Softmax rows of a table as dense probabilities, aligned with its logits.
pub fn edge_probabilities(policy: &TabularPolicy) -> Vec<f64> {
    policy.all_log_probs().into_iter().map(f64::exp).collect()
}

/// Proper PF for a backward policy, returned as log-softmax rows for comparisons.
pub fn proper_log_probs(env: &DagEnv, pb: &TabularPolicy) -> Vec<f64> {
    let (pf, _) = optimal_pf_given_pb(env, pb);
    (0..env.num_states()).flat_map(|s| log_softmax(pf.row(s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_hypergrid, build_micro, HypergridSpec, MicroDag};
    use crate::params::random_policy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diamond() -> DagEnv {
        build_micro(&MicroDag::Diamond).unwrap()
    }

    fn chain() -> DagEnv {
        build_micro(&MicroDag::Chain { length: 3, reward: 3.0 }).unwrap()
    }

    fn skewed_diamond_pf(env: &DagEnv, p_a: f64) -> TabularPolicy {
        let mut pf = TabularPolicy::uniform(env, Direction::Forward);
        pf.row_mut(0).copy_from_slice(&[p_a.ln(), (1.0 - p_a).ln()]);
        pf
    }

    #[test]
    fn marginals_on_micro_envs() {
        let d = diamond();
        let m = exact_marginal(&d, &TabularPolicy::uniform(&d, Direction::Forward));
        assert_eq!(m.terminal_marginal, vec![1.0]);
        let c = chain();
        let m = exact_marginal(&c, &TabularPolicy::uniform(&c, Direction::Forward));
        assert_eq!(m.terminal_marginal, vec![1.0]);
    }

    #[test]
    fn marginal_matches_enumeration_on_small_grid() {
        let env = build_hypergrid(&HypergridSpec::standard(2, 2), 100).unwrap();
        let pf = TabularPolicy::uniform(&env, Direction::Forward);
        let m = exact_marginal(&env, &pf);
        let trajs = enumerate_trajectories(&env, 100).unwrap();
        let lpf = pf.all_log_probs();
        let lpb = TabularPolicy::uniform(&env, Direction::Backward).all_log_probs();
        let mut brute = vec![0.0; env.terminals().len()];
        for t in &trajs {
            let (f, _) = trajectory_log_probs(&env, &lpf, &lpb, t);
            brute[env.terminal_index(t.terminal()).unwrap()] += f.exp();
        }
        for (a, b) in m.terminal_marginal.iter().zip(&brute) {
            assert!((a - b).abs() < tol::ENUMERATION);
        }
    }

    #[test]
    fn traj_kl_examples() {
        let env = diamond();
        let pb = TabularPolicy::uniform(&env, Direction::Backward);
        let kl = exact_traj_kl(&env, &skewed_diamond_pf(&env, 0.5), &pb).unwrap();
        assert!(kl.abs() < 1e-15);
        let kl = exact_traj_kl(&env, &skewed_diamond_pf(&env, 0.9), &pb).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn soft_values_on_micro_envs() {
        let d = diamond();
        let pb = TabularPolicy::uniform(&d, Direction::Backward);
        let v = soft_policy_eval(&d, &TabularPolicy::uniform(&d, Direction::Forward), &pb);
        assert!((v[0] - 2f64.ln()).abs() < 1e-15);

        let c = chain();
        let pb = TabularPolicy::uniform(&c, Direction::Backward);
        let v = soft_policy_eval(&c, &TabularPolicy::uniform(&c, Direction::Forward), &pb);
        assert!((v[0] - 3f64.ln()).abs() < 1e-15);
        assert!((v[0] - c.log_partition()).abs() < 1e-15);

        let opt = soft_optimal_values(&d, &TabularPolicy::uniform(&d, Direction::Backward));
        assert!((opt.v[0] - 2f64.ln()).abs() < 1e-15);
        let opt = soft_optimal_values(&c, &TabularPolicy::uniform(&c, Direction::Backward));
        assert!((opt.q.values[0] - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn proper_policy_on_diamond_and_chain() {
        let d = diamond();
        let (pf, flows) = optimal_pf_given_pb(&d, &TabularPolicy::uniform(&d, Direction::Backward));
        assert!((flows.log_flow[0] - 2f64.ln()).abs() < 1e-15);
        assert!((pf.distribution(0)[0] - 0.5).abs() < 1e-15);

        let c = chain();
        let (pf, _) = optimal_pf_given_pb(&c, &TabularPolicy::uniform(&c, Direction::Backward));
        for s in 0..3 {
            assert_eq!(pf.distribution(s), vec![1.0]);
        }
    }

    #[test]
    fn proper_policy_balances_random_pb_on_small_grid() {
        let env = build_hypergrid(&HypergridSpec::standard(2, 2), 100).unwrap();
        let trajs = enumerate_trajectories(&env, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let pb = random_policy(&env, Direction::Backward, 2.0, &mut rng);
            let (pf, _) = optimal_pf_given_pb(&env, &pb);
            assert!(max_tb_residual(&env, &trajs, &pf, &pb) < 1e-12);
        }
    }

    #[test]
    fn posterior_examples() {
        let d = diamond();
        let post = posterior_pb_given_pf(&d, &skewed_diamond_pf(&d, 0.9));
        assert!((post.pb.distribution(3)[0] - 0.9).abs() < 1e-15);
        assert!(post.unvisited.is_empty());

        let c = chain();
        let post = posterior_pb_given_pf(&c, &TabularPolicy::uniform(&c, Direction::Forward));
        for s in 1..c.num_states() {
            assert_eq!(post.pb.distribution(s), vec![1.0]);
        }

        // Fixed point: the proper PF of a PB maps back to that PB.
        let env = build_hypergrid(&HypergridSpec::standard(2, 3), 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pb = random_policy(&env, Direction::Backward, 1.5, &mut rng);
        let (pf, _) = optimal_pf_given_pb(&env, &pb);
        let back = posterior_pb_given_pf(&env, &pf);
        for (a, b) in edge_probabilities(&back.pb).iter().zip(edge_probabilities(&pb)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unvisited_states_are_flagged() {
        let d = diamond();
        let mut pf = TabularPolicy::uniform(&d, Direction::Forward);
        pf.row_mut(0).copy_from_slice(&[0.0, f64::NEG_INFINITY]);
        let post = posterior_pb_given_pf(&d, &pf);
        assert_eq!(post.unvisited, vec![2]);
        assert_eq!(post.pb.distribution(3), vec![1.0, 0.0]);
    }

    #[test]
    fn alternation_converges_in_one_round_on_diamond() {
        let d = diamond();
        let alt = exact_alternation(&d, &skewed_diamond_pf(&d, 0.83));
        let kl = exact_traj_kl(&d, &alt.pf1, &alt.pb1).unwrap();
        assert!(kl.abs() < tol::ALTERNATION_KL);
    }

    #[test]
    fn path_counts() {
        let env = build_hypergrid(&HypergridSpec::standard(2, 8), 1000).unwrap();
        let counts = count_paths(&env);
        let exact = counts.exact.as_ref().unwrap();
        assert_eq!(exact[0], 1);
        // Cell (2, 1) has code 2 + 8.
        assert_eq!(exact[10], 3);
        let d = diamond();
        assert_eq!(count_paths(&d).exact.unwrap()[3], 2);
    }

    #[test]
    fn pinsker_examples() {
        let same = pinsker_gap(&[0.3, 0.7], &[0.3, 0.7], 0.0, 0.0);
        assert!(same.holds && same.lhs == 0.0);
        let p = [0.9, 0.1];
        let q = [0.5, 0.5];
        let kl = kl_divergence(&p, &q);
        let check = pinsker_gap(&p, &q, kl, 0.0);
        assert!((check.lhs - 0.8).abs() < 1e-15);
        assert!((check.rhs - 0.858).abs() < 1e-3);
        assert!(check.holds);
    }
}
