//! Evaluation metrics: L1 distances, Monte-Carlo marginals, rank and linear
//! correlation, and mode discovery.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use thiserror::Error;

use crate::env::{BitString, DagEnv, EnvKind, StateId};
use crate::logspace::log_sum_exp;
use crate::oracle::{exact_marginal, l1_distance};
use crate::params::TabularPolicy;

/// Default window of recent terminal samples.
pub const DEFAULT_WINDOW: usize = 200_000;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sample window is empty")]
    EmptyWindow,
    #[error("state {0} is not terminal")]
    NotTerminal(StateId),
    #[error("backward policy gives zero probability to parent slot {slot} of state {state}")]
    ZeroBackwardProbability { state: StateId, slot: usize },
    #[error("correlation needs equal-length inputs with at least 2 points, got {0} and {1}")]
    BadLength(usize, usize),
    #[error("correlation is undefined for a constant input")]
    ZeroVariance,
}

/// Most recent terminal states, oldest evicted first.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    capacity: usize,
    ring: VecDeque<StateId>,
}

impl SampleWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self { capacity, ring: VecDeque::new() }
    }

    pub fn push(&mut self, x: StateId) {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(x);
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = StateId> + '_ {
        self.ring.iter().copied()
    }
}

/// `sum_x |P_theta(x) - R(x)/Z|` with the exact marginal of `pf`.
pub fn l1_exact(env: &DagEnv, pf: &TabularPolicy) -> f64 {
    l1_distance(&exact_marginal(env, pf).terminal_marginal, &env.target_distribution())
}

/// `sum_x |freq(x) - R(x)/Z|` over the window.
pub fn l1_empirical(env: &DagEnv, window: &SampleWindow) -> Result<f64, MetricsError> {
    if window.is_empty() {
        return Err(MetricsError::EmptyWindow);
    }
    let mut counts = vec![0usize; env.terminals().len()];
    for x in window.iter() {
        let i = env.terminal_index(x).ok_or(MetricsError::NotTerminal(x))?;
        counts[i] += 1;
    }
    let n = window.len() as f64;
    let freq: Vec<f64> = counts.into_iter().map(|c| c as f64 / n).collect();
    Ok(l1_distance(&freq, &env.target_distribution()))
}

/// One backward rollout from `x`: `log PF(tau) - log PB(tau | x)`.
fn backward_log_weight<R: Rng + ?Sized>(
    env: &DagEnv,
    pf: &TabularPolicy,
    pb: &TabularPolicy,
    x: StateId,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    let mut s = x;
    let mut w = 0.0;
    while s != env.initial() {
        let lpb = pb.log_probs(s);
        if let Some(slot) = lpb.iter().position(|&l| l == f64::NEG_INFINITY) {
            return Err(MetricsError::ZeroBackwardProbability { state: s, slot });
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut slot = lpb.len() - 1;
        for (i, l) in lpb.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                slot = i;
                break;
            }
        }
        let parent = env.parents(s)[slot];
        let child_slot = env.child_slot_of(s, slot);
        w += pf.log_probs(parent)[child_slot] - lpb[slot];
        s = parent;
    }
    Ok(w)
}

/// `log` of the importance-sampling estimate `(1/N) sum_i PF(tau_i) / PB(tau_i | x)`,
/// `tau_i ~ PB(. | x)`.
pub fn mc_log_ptheta<R: Rng + ?Sized>(
    env: &DagEnv,
    pf: &TabularPolicy,
    pb: &TabularPolicy,
    x: StateId,
    n: usize,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    if !env.is_terminal(x) {
        return Err(MetricsError::NotTerminal(x));
    }
    let logs = (0..n)
        .map(|_| backward_log_weight(env, pf, pb, x, rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(log_sum_exp(&logs) - (n as f64).ln())
}

pub fn mc_ptheta<R: Rng + ?Sized>(
    env: &DagEnv,
    pf: &TabularPolicy,
    pb: &TabularPolicy,
    x: StateId,
    n: usize,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    mc_log_ptheta(env, pf, pb, x, n, rng).map(f64::exp)
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<(), MetricsError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(MetricsError::BadLength(xs.len(), ys.len()));
    }
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModeSet {
    /// Modes are specific terminal states, matched exactly.
    States(Vec<StateId>),
    /// Modes are bit strings, matched within a Hamming radius.
    Bits { modes: Vec<BitString>, threshold: u32 },
}

/// Latching per-mode discovery flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTracker {
    pub modes: ModeSet,
    discovered: Vec<bool>,
}

impl ModeTracker {
    pub fn new(modes: ModeSet) -> Self {
        let n = match &modes {
            ModeSet::States(s) => s.len(),
            ModeSet::Bits { modes, .. } => modes.len(),
        };
        Self { modes, discovered: vec![false; n] }
    }

    /// Hypergrid: terminal copies of cells in the highest-reward bands. Bit
    /// sequences: the environment's modes with the spec's threshold. Micro: none.
    pub fn for_env(env: &DagEnv) -> Self {
        match env.kind() {
            EnvKind::Hypergrid(spec) => {
                let modes = env
                    .terminals()
                    .iter()
                    .copied()
                    .filter(|&x| spec.is_ring_cell(&env.hypergrid_coords(x).unwrap()))
                    .collect();
                Self::new(ModeSet::States(modes))
            }
            EnvKind::BitSeq(layout) => Self::new(ModeSet::Bits {
                modes: layout.modes.clone(),
                threshold: layout.spec.threshold as u32,
            }),
            EnvKind::Micro(_) => Self::new(ModeSet::States(Vec::new())),
        }
    }

    pub fn num_modes(&self) -> usize {
        self.discovered.len()
    }

    pub fn found(&self) -> usize {
        self.discovered.iter().filter(|&&d| d).count()
    }

    pub fn discovered(&self) -> &[bool] {
        &self.discovered
    }

    pub fn update(&mut self, env: &DagEnv, x: StateId) {
        match &self.modes {
            ModeSet::States(states) => {
                for (flag, &m) in self.discovered.iter_mut().zip(states) {
                    *flag |= m == x;
                }
            }
            ModeSet::Bits { modes, threshold } => {
                let Some(bits) = env.bitstring(x) else { return };
                for (flag, &m) in self.discovered.iter_mut().zip(modes) {
                    *flag |= bits.hamming(m) <= *threshold;
                }
            }
        }
    }
}

/// `bits` with `count` distinct positions among the low `n` flipped.
pub fn flip_random_bits<R: Rng + ?Sized>(bits: BitString, n: usize, count: usize, rng: &mut R) -> BitString {
    let mut out = bits.0;
    for i in sample_indices(rng, n, count).iter() {
        out ^= 1 << i;
    }
    BitString(out)
}

/// For every mode and every `0 <= i < n`, the mode with `i` random bits flipped.
pub fn build_bitseq_testset<R: Rng + ?Sized>(env: &DagEnv, modes: &[BitString], rng: &mut R) -> Vec<StateId> {
    let EnvKind::BitSeq(layout) = env.kind() else {
        panic!("test sets exist only for bit-sequence environments");
    };
    let n = layout.spec.n;
    let mut out = Vec::with_capacity(modes.len() * n);
    for &m in modes {
        for i in 0..n {
            let b = flip_random_bits(m, n, i, rng);
            out.push(env.state_of_bitstring(b).expect("every bit pattern is a terminal"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_bitseq, build_hypergrid, build_micro, BitSeqSpec, HypergridSpec, MicroDag};
    use crate::oracle::optimal_pf_given_pb;
    use crate::params::Direction;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_leaf() -> DagEnv {
        build_micro(&MicroDag::Custom { edges: vec![(0, 1), (0, 2)], rewards: vec![] }).unwrap()
    }

    #[test]
    fn l1_exact_examples() {
        let d = build_micro(&MicroDag::Diamond).unwrap();
        let mut pf = TabularPolicy::uniform(&d, Direction::Forward);
        pf.row_mut(0)[0] = 4.0;
        assert_eq!(l1_exact(&d, &pf), 0.0);

        let env = two_leaf();
        let mut pf = TabularPolicy::uniform(&env, Direction::Forward);
        pf.row_mut(0).copy_from_slice(&[0.0, f64::NEG_INFINITY]);
        assert!((l1_exact(&env, &pf) - 1.0).abs() < 1e-15);

        let grid = build_hypergrid(&HypergridSpec::standard(2, 8), 1000).unwrap();
        let (pf, _) = optimal_pf_given_pb(&grid, &TabularPolicy::uniform(&grid, Direction::Backward));
        assert!(l1_exact(&grid, &pf) < 1e-12);
    }

    #[test]
    fn l1_empirical_examples() {
        let env = two_leaf();
        let mut w = SampleWindow::new(4);
        assert_eq!(l1_empirical(&env, &w), Err(MetricsError::EmptyWindow));
        w.push(1);
        w.push(2);
        assert!(l1_empirical(&env, &w).unwrap().abs() < 1e-15);

        let grid = build_hypergrid(&HypergridSpec::standard(2, 4), 1000).unwrap();
        let x = grid.terminals()[5];
        let mut w = SampleWindow::new(10);
        for _ in 0..10 {
            w.push(x);
        }
        let target = grid.target_distribution()[5];
        assert!((l1_empirical(&grid, &w).unwrap() - 2.0 * (1.0 - target)).abs() < 1e-12);
    }

    #[test]
    fn window_keeps_most_recent() {
        let mut w = SampleWindow::new(3);
        for x in 0..5 {
            w.push(x);
        }
        assert_eq!(w.iter().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn mc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = build_micro(&MicroDag::Chain { length: 3, reward: 1.0 }).unwrap();
        let pf = TabularPolicy::uniform(&c, Direction::Forward);
        let pb = TabularPolicy::uniform(&c, Direction::Backward);
        assert_eq!(mc_ptheta(&c, &pf, &pb, 3, 7, &mut rng).unwrap(), 1.0);

        let d = build_micro(&MicroDag::Diamond).unwrap();
        let pf = TabularPolicy::uniform(&d, Direction::Forward);
        let pb = TabularPolicy::uniform(&d, Direction::Backward);
        for n in [1, 3, 10] {
            assert_eq!(mc_ptheta(&d, &pf, &pb, 3, n, &mut rng).unwrap(), 1.0);
        }

        let mut pb = pb;
        pb.row_mut(3)[1] = f64::NEG_INFINITY;
        assert_eq!(
            mc_ptheta(&d, &pf, &pb, 3, 1, &mut rng),
            Err(MetricsError::ZeroBackwardProbability { state: 3, slot: 1 })
        );
        assert_eq!(mc_ptheta(&d, &pf, &pb, 1, 1, &mut rng), Err(MetricsError::NotTerminal(1)));
    }

    #[test]
    fn correlation_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 4.0], &[-1.0, -2.0, -4.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), Err(MetricsError::ZeroVariance));
        assert_eq!(spearman(&[1.0], &[1.0]), Err(MetricsError::BadLength(1, 1)));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn mode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (env, modes) = build_bitseq(&BitSeqSpec::desk_default(), &mut rng, 1_000_000).unwrap();
        let mut t = ModeTracker::for_env(&env);
        assert_eq!(t.num_modes(), 8);
        t.update(&env, env.state_of_bitstring(modes[2]).unwrap());
        assert!(t.discovered()[2]);

        // Distance threshold + 1 from every mode changes nothing.
        let mut far = None;
        for x in env.terminals() {
            let b = env.bitstring(*x).unwrap();
            if modes.iter().map(|m| b.hamming(*m)).min() == Some(4) {
                far = Some(*x);
                break;
            }
        }
        let before = t.clone();
        t.update(&env, far.expect("some terminal sits at distance 4"));
        assert_eq!(t, before);

        let grid = build_hypergrid(&HypergridSpec::standard(2, 8), 1000).unwrap();
        let g = ModeTracker::for_env(&grid);
        assert_eq!(g.num_modes(), 4);
        let ModeSet::States(states) = &g.modes else { unreachable!() };
        for &x in states {
            assert!((grid.log_reward(x) - 2.501f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn testset_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (env, modes) = build_bitseq(&BitSeqSpec::desk_default(), &mut rng, 1_000_000).unwrap();
        let test = build_bitseq_testset(&env, &modes, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(test.len(), 96);
        for (i, &m) in modes.iter().enumerate() {
            let x = test[i * 12];
            assert_eq!(env.bitstring(x), Some(m));
            assert_eq!(env.log_reward(x), 0.0);
            for flips in 0..12 {
                assert_eq!(env.bitstring(test[i * 12 + flips]).unwrap().hamming(m), flips as u32);
            }
        }
        let again = build_bitseq_testset(&env, &modes, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(test, again);
        assert_eq!(flip_random_bits(BitString(0), 12, 12, &mut rng), BitString(0xfff));
    }

    proptest! {
        #[test]
        fn mode_count_is_monotone(picks in proptest::collection::vec(0usize..64, 1..50)) {
            let grid = build_hypergrid(&HypergridSpec::standard(2, 8), 1000).unwrap();
            let mut t = ModeTracker::for_env(&grid);
            let mut last = 0;
            for p in picks {
                t.update(&grid, grid.terminals()[p]);
                prop_assert!(t.found() >= last);
                last = t.found();
            }
        }

        #[test]
        fn spearman_invariant_to_monotone_maps(
            xs in proptest::collection::vec(-5.0f64..5.0, 3..20),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|x| x + rng.gen_range(-2.0..2.0)).collect();
            if let Ok(base) = spearman(&xs, &ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
                let ty: Vec<f64> = ys.iter().map(|y| y * y * y).collect();
                prop_assert!((spearman(&tx, &ty).unwrap() - base).abs() < 1e-12);
            }
        }
    }
}
