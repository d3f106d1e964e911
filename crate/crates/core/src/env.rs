//! Explicit DAG environments: hypergrids, bit sequences and hand-built micro DAGs.
//!
//! Every environment is materialised as a [`DagEnv`]: states are dense indices in
//! topological order (state `0` is the unique initial state), children are kept in
//! action order (exit first, then coordinate/slot order) and parents in increasing
//! index order. Forward and backward edges are addressed by flat indices so that
//! tabular parameters can be stored contiguously.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::fmt;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::logspace::log_sum_exp;

/// Dense state index. Respects topological order: every edge `s -> s'` has `s < s'`.
pub type StateId = usize;

/// Default bound on the number of materialised states.
pub const DEFAULT_MAX_STATES: usize = 1_000_000;
/// Default bound on the number of complete trajectories an enumeration may produce.
pub const DEFAULT_MAX_TRAJECTORIES: usize = 10_000_000;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EnvError {
    #[error("environment would have {states} states, above the cap of {cap}")]
    StateCapExceeded { states: f64, cap: usize },
    #[error("environment has {count} complete trajectories, above the cap of {cap}")]
    TrajectoryCapExceeded { count: f64, cap: usize },
    #[error("block size {k} does not divide sequence length {n}")]
    BlockDoesNotDivide { n: usize, k: usize },
    #[error("edge list contains a cycle")]
    Cycle,
    #[error("expected exactly one root state, found {0:?}")]
    Roots(Vec<usize>),
    #[error("terminal state {0} has a missing or non-finite log-reward")]
    BadReward(usize),
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Parameters of the hypergrid reward and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergridSpec {
    pub dims: usize,
    pub side: usize,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
}

impl HypergridSpec {
    pub fn standard(dims: usize, side: usize) -> Self {
        Self { dims, side, r0: 1e-3, r1: 0.5, r2: 2.0 }
    }

    pub fn hard(dims: usize, side: usize) -> Self {
        Self { dims, side, r0: 1e-4, r1: 1.0, r2: 3.0 }
    }

    /// Reward of the cell with the given coordinates.
    pub fn reward(&self, coords: &[usize]) -> f64 {
        let scale = (self.side - 1) as f64;
        let offset = |c: usize| (c as f64 / scale - 0.5).abs();
        let outer = coords.iter().all(|&c| 0.25 < offset(c));
        let ring = coords.iter().all(|&c| {
            let o = offset(c);
            0.3 < o && o < 0.4
        });
        self.r0 + if outer { self.r1 } else { 0.0 } + if ring { self.r2 } else { 0.0 }
    }

    /// Whether the cell lies in one of the highest-reward bands.
    pub fn is_ring_cell(&self, coords: &[usize]) -> bool {
        let scale = (self.side - 1) as f64;
        coords.iter().all(|&c| {
            let o = (c as f64 / scale - 0.5).abs();
            0.3 < o && o < 0.4
        })
    }
}

/// Shape and mode construction for the bit-sequence environment.
#[derive(Debug, Clone, PartialEq)]
pub struct BitSeqSpec {
    /// Sequence length in bits.
    pub n: usize,
    /// Word size; the sequence has `n / k` slots.
    pub k: usize,
    /// Words that modes are assembled from.
    pub mode_blocks: Vec<u32>,
    pub num_modes: usize,
    /// Hamming radius used by mode discovery.
    pub threshold: usize,
}

impl BitSeqSpec {
    pub fn desk_default() -> Self {
        Self {
            n: 12,
            k: 3,
            mode_blocks: vec![0b000, 0b111, 0b110, 0b011],
            num_modes: 8,
            threshold: 3,
        }
    }

    pub fn slots(&self) -> usize {
        self.n / self.k
    }
}

/// A terminal bit sequence, slot `i` stored in bits `[i*k, (i+1)*k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitString(pub u64);

impl BitString {
    pub fn hamming(self, other: BitString) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    /// Renders `n` bits, slot 0 first and each word most-significant bit first.
    pub fn render(self, n: usize, k: usize) -> String {
        let mut out = String::with_capacity(n);
        for slot in 0..n / k {
            let word = (self.0 >> (slot * k)) & ((1 << k) - 1);
            for b in (0..k).rev() {
                out.push(if (word >> b) & 1 == 1 { '1' } else { '0' });
            }
        }
        out
    }
}

/// Bit-sequence layout retained by the environment for decoding terminals.
#[derive(Debug, Clone, PartialEq)]
pub struct BitSeqLayout {
    pub spec: BitSeqSpec,
    pub modes: Vec<BitString>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvKind {
    Hypergrid(HypergridSpec),
    BitSeq(BitSeqLayout),
    Micro(String),
}

/// Named micro DAG fixtures.
#[derive(Debug, Clone, PartialEq)]
pub enum MicroDag {
    /// `s0 -> {a, b} -> x` with `R(x) = 2`.
    Diamond,
    /// Linear path with `length` edges ending in a terminal with reward `reward`.
    Chain { length: usize, reward: f64 },
    /// Arbitrary edge list over node labels; terminals default to reward 1.
    Custom { edges: Vec<(usize, usize)>, rewards: Vec<(usize, f64)> },
}

/// An immutable, fully enumerated DAG environment.
#[derive(Clone)]
pub struct DagEnv {
    kind: EnvKind,
    children: Vec<Vec<StateId>>,
    parents: Vec<Vec<StateId>>,
    child_offsets: Vec<usize>,
    parent_offsets: Vec<usize>,
    /// For forward edge `e = (s -> s')`: position of `s` in `parents(s')`.
    fwd_to_parent_slot: Vec<usize>,
    /// For backward edge `e = (s' -> s)`: position of `s'` in `children(s)`.
    bwd_to_child_slot: Vec<usize>,
    terminals: Vec<StateId>,
    terminal_pos: Vec<Option<usize>>,
    terminal_log_reward: Vec<f64>,
    labels: Vec<u64>,
}

impl fmt::Debug for DagEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DagEnv")
            .field("kind", &self.kind)
            .field("num_states", &self.num_states())
            .field("num_terminals", &self.terminals.len())
            .finish()
    }
}

impl DagEnv {
    /// Builds an environment from per-state ordered children lists.
    ///
    /// States may be given in any order; they are re-indexed into the smallest
    /// lexicographic topological order, which is the identity whenever the input
    /// indexing already respects edge direction.
    pub fn from_children(
        kind: EnvKind,
        children: Vec<Vec<usize>>,
        log_reward: impl Fn(usize) -> Option<f64>,
        labels: Vec<u64>,
    ) -> Result<Self> {
        let n = children.len();
        let mut indegree = vec![0usize; n];
        for (s, cs) in children.iter().enumerate() {
            for &c in cs {
                if c >= n {
                    return Err(EnvError::InvalidSpec(format!("edge {s} -> {c} out of range")));
                }
                indegree[c] += 1;
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&s| indegree[s] == 0).collect();
        if roots.len() != 1 {
            return Err(EnvError::Roots(roots));
        }

        let mut order = Vec::with_capacity(n);
        let mut heap: BinaryHeap<Reverse<usize>> = roots.iter().map(|&r| Reverse(r)).collect();
        let mut remaining = indegree.clone();
        while let Some(Reverse(s)) = heap.pop() {
            order.push(s);
            for &c in &children[s] {
                remaining[c] -= 1;
                if remaining[c] == 0 {
                    heap.push(Reverse(c));
                }
            }
        }
        if order.len() != n {
            return Err(EnvError::Cycle);
        }
        let mut new_index = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }

        let mut new_children = vec![Vec::new(); n];
        let mut new_labels = vec![0u64; n];
        for (old, cs) in children.into_iter().enumerate() {
            let s = new_index[old];
            new_children[s] = cs.into_iter().map(|c| new_index[c]).collect();
            new_labels[s] = labels.get(old).copied().unwrap_or(old as u64);
        }
        let mut rewards_by_new = vec![None; n];
        for (old, &new) in new_index.iter().enumerate() {
            if new_children[new].is_empty() {
                let r = log_reward(old);
                match r {
                    Some(v) if v.is_finite() => rewards_by_new[new] = Some(v),
                    _ => return Err(EnvError::BadReward(old)),
                }
            }
        }
        Ok(Self::assemble(kind, new_children, rewards_by_new, new_labels))
    }

    fn assemble(
        kind: EnvKind,
        children: Vec<Vec<StateId>>,
        rewards: Vec<Option<f64>>,
        labels: Vec<u64>,
    ) -> Self {
        let n = children.len();
        let mut parents = vec![Vec::new(); n];
        for (s, cs) in children.iter().enumerate() {
            for &c in cs {
                parents[c].push(s);
            }
        }
        let offsets = |lists: &Vec<Vec<StateId>>| {
            let mut o = Vec::with_capacity(n + 1);
            o.push(0);
            for l in lists {
                o.push(o.last().unwrap() + l.len());
            }
            o
        };
        let child_offsets = offsets(&children);
        let parent_offsets = offsets(&parents);

        let mut fwd_to_parent_slot = vec![0usize; *child_offsets.last().unwrap()];
        let mut bwd_to_child_slot = vec![0usize; *parent_offsets.last().unwrap()];
        for (s, cs) in children.iter().enumerate() {
            for (j, &c) in cs.iter().enumerate() {
                let p = parents[c].iter().position(|&q| q == s).unwrap();
                fwd_to_parent_slot[child_offsets[s] + j] = p;
                bwd_to_child_slot[parent_offsets[c] + p] = j;
            }
        }

        let mut terminals = Vec::new();
        let mut terminal_pos = vec![None; n];
        let mut terminal_log_reward = Vec::new();
        for s in 0..n {
            if children[s].is_empty() {
                terminal_pos[s] = Some(terminals.len());
                terminals.push(s);
                terminal_log_reward.push(rewards[s].expect("validated terminal reward"));
            }
        }

        Self {
            kind,
            children,
            parents,
            child_offsets,
            parent_offsets,
            fwd_to_parent_slot,
            bwd_to_child_slot,
            terminals,
            terminal_pos,
            terminal_log_reward,
            labels,
        }
    }

    pub fn kind(&self) -> &EnvKind {
        &self.kind
    }

    pub fn num_states(&self) -> usize {
        self.children.len()
    }

    pub fn initial(&self) -> StateId {
        0
    }

    pub fn children(&self, s: StateId) -> &[StateId] {
        &self.children[s]
    }

    pub fn parents(&self, s: StateId) -> &[StateId] {
        &self.parents[s]
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.children[s].is_empty()
    }

    /// Terminal states in increasing index order.
    pub fn terminals(&self) -> &[StateId] {
        &self.terminals
    }

    /// Position of `s` within [`terminals`](Self::terminals), if terminal.
    pub fn terminal_index(&self, s: StateId) -> Option<usize> {
        self.terminal_pos[s]
    }

    /// Natural log of the reward at terminal `x`. Panics on non-terminal states.
    pub fn log_reward(&self, x: StateId) -> f64 {
        let i = self.terminal_pos[x].unwrap_or_else(|| panic!("state {x} is not terminal"));
        self.terminal_log_reward[i]
    }

    /// Log-rewards aligned with [`terminals`](Self::terminals).
    pub fn terminal_log_rewards(&self) -> &[f64] {
        &self.terminal_log_reward
    }

    /// `log Z = log sum_x R(x)`.
    pub fn log_partition(&self) -> f64 {
        log_sum_exp(&self.terminal_log_reward)
    }

    /// Target distribution `R(x) / Z` aligned with [`terminals`](Self::terminals).
    pub fn target_distribution(&self) -> Vec<f64> {
        let log_z = self.log_partition();
        self.terminal_log_reward.iter().map(|r| (r - log_z).exp()).collect()
    }

    pub fn num_forward_edges(&self) -> usize {
        *self.child_offsets.last().unwrap()
    }

    pub fn num_backward_edges(&self) -> usize {
        *self.parent_offsets.last().unwrap()
    }

    pub fn child_offsets(&self) -> &[usize] {
        &self.child_offsets
    }

    pub fn parent_offsets(&self) -> &[usize] {
        &self.parent_offsets
    }

    /// Flat index of the forward edge leaving `s` through child slot `slot`.
    pub fn forward_edge(&self, s: StateId, slot: usize) -> usize {
        self.child_offsets[s] + slot
    }

    /// Flat index of the backward edge leaving `s` through parent slot `slot`.
    pub fn backward_edge(&self, s: StateId, slot: usize) -> usize {
        self.parent_offsets[s] + slot
    }

    /// Parent slot, within `parents(child)`, of the forward edge `(s, slot)`.
    pub fn parent_slot_of(&self, s: StateId, slot: usize) -> usize {
        self.fwd_to_parent_slot[self.child_offsets[s] + slot]
    }

    /// Child slot, within `children(parent)`, of the backward edge `(s, slot)`.
    pub fn child_slot_of(&self, s: StateId, parent_slot: usize) -> usize {
        self.bwd_to_child_slot[self.parent_offsets[s] + parent_slot]
    }

    pub fn child_slot(&self, s: StateId, child: StateId) -> Option<usize> {
        self.children.get(s)?.iter().position(|&c| c == child)
    }

    pub fn parent_slot(&self, s: StateId, parent: StateId) -> Option<usize> {
        self.parents.get(s)?.iter().position(|&p| p == parent)
    }

    /// Construction-time label of a state (mixed-radix code or edge-list node id).
    pub fn label(&self, s: StateId) -> u64 {
        self.labels[s]
    }

    /// Coordinates of a hypergrid state (cell or terminal copy).
    pub fn hypergrid_coords(&self, s: StateId) -> Option<Vec<usize>> {
        let EnvKind::Hypergrid(spec) = &self.kind else { return None };
        let cells = spec.side.pow(spec.dims as u32) as u64;
        let mut code = self.labels[s] % cells;
        let mut coords = Vec::with_capacity(spec.dims);
        for _ in 0..spec.dims {
            coords.push((code % spec.side as u64) as usize);
            code /= spec.side as u64;
        }
        Some(coords)
    }

    /// Bit pattern of a complete bit-sequence state.
    pub fn bitstring(&self, s: StateId) -> Option<BitString> {
        let EnvKind::BitSeq(layout) = &self.kind else { return None };
        let slots = decode_slots(self.labels[s], &layout.spec);
        if slots.iter().any(|v| *v == 0) {
            return None;
        }
        Some(slots_to_bits(&slots, layout.spec.k))
    }

    /// Terminal state holding the given bit pattern.
    pub fn state_of_bitstring(&self, bits: BitString) -> Option<StateId> {
        let EnvKind::BitSeq(layout) = &self.kind else { return None };
        let spec = &layout.spec;
        let radix = (1u64 << spec.k) + 1;
        let mask = (1u64 << spec.k) - 1;
        let mut code = 0u64;
        let mut place = 1u64;
        for slot in 0..spec.slots() {
            let word = (bits.0 >> (slot * spec.k)) & mask;
            code += (word + 1) * place;
            place *= radix;
        }
        // Bit-sequence construction keeps labels equal to state indices.
        let s = code as usize;
        (s < self.num_states() && self.labels[s] == code).then_some(s)
    }
}

fn decode_slots(code: u64, spec: &BitSeqSpec) -> Vec<u64> {
    let radix = (1u64 << spec.k) + 1;
    let mut c = code;
    (0..spec.slots())
        .map(|_| {
            let v = c % radix;
            c /= radix;
            v
        })
        .collect()
}

fn slots_to_bits(slots: &[u64], k: usize) -> BitString {
    let mut bits = 0u64;
    for (i, v) in slots.iter().enumerate() {
        bits |= (v - 1) << (i * k);
    }
    BitString(bits)
}

/// Hypergrid with explicit terminal copies: cell `c` has an exit edge to `H^d + c`.
pub fn build_hypergrid(spec: &HypergridSpec, max_states: usize) -> Result<DagEnv> {
    if spec.dims == 0 || spec.side < 2 {
        return Err(EnvError::InvalidSpec(format!(
            "hypergrid needs dims >= 1 and side >= 2, got dims={} side={}",
            spec.dims, spec.side
        )));
    }
    let cells_f = (spec.side as f64).powi(spec.dims as i32);
    if 2.0 * cells_f > max_states as f64 {
        return Err(EnvError::StateCapExceeded { states: 2.0 * cells_f, cap: max_states });
    }
    let cells = cells_f as usize;
    let mut children = Vec::with_capacity(2 * cells);
    let mut coords = vec![0usize; spec.dims];
    for c in 0..cells {
        decode_into(c, spec.side, &mut coords);
        let mut cs = vec![cells + c];
        let mut place = 1;
        for &x in coords.iter() {
            if x + 1 < spec.side {
                cs.push(c + place);
            }
            place *= spec.side;
        }
        children.push(cs);
    }
    children.extend(std::iter::repeat_with(Vec::new).take(cells));
    let labels = (0..2 * cells as u64).collect();
    DagEnv::from_children(
        EnvKind::Hypergrid(spec.clone()),
        children,
        |s| {
            if s < cells {
                return None;
            }
            let mut xs = vec![0usize; spec.dims];
            decode_into(s - cells, spec.side, &mut xs);
            Some(spec.reward(&xs).ln())
        },
        labels,
    )
}

fn decode_into(mut code: usize, side: usize, out: &mut [usize]) {
    for x in out.iter_mut() {
        *x = code % side;
        code /= side;
    }
}

/// Bit-sequence environment with `n / k` slots. Modes are distinct concatenations of
/// `n / k` words drawn from `spec.mode_blocks`; `log R(x) = -2 * min_m hamming(x, m)`.
pub fn build_bitseq<R: Rng + ?Sized>(
    spec: &BitSeqSpec,
    rng: &mut R,
    max_states: usize,
) -> Result<(DagEnv, Vec<BitString>)> {
    if spec.k == 0 || spec.n == 0 || spec.n % spec.k != 0 {
        return Err(EnvError::BlockDoesNotDivide { n: spec.n, k: spec.k });
    }
    if spec.n > 64 || spec.k > 16 {
        return Err(EnvError::InvalidSpec("bit sequences are limited to 64 bits".into()));
    }
    if spec.mode_blocks.is_empty() || spec.mode_blocks.iter().any(|&w| w >= 1 << spec.k) {
        return Err(EnvError::InvalidSpec(format!(
            "mode blocks must be non-empty {}-bit words",
            spec.k
        )));
    }
    let slots = spec.slots();
    let radix = (1usize << spec.k) + 1;
    let states_f = (radix as f64).powi(slots as i32);
    if states_f > max_states as f64 {
        return Err(EnvError::StateCapExceeded { states: states_f, cap: max_states });
    }
    let mut distinct_blocks = spec.mode_blocks.clone();
    distinct_blocks.sort_unstable();
    distinct_blocks.dedup();
    let available = (distinct_blocks.len() as f64).powi(slots as i32);
    if (spec.num_modes as f64) > available {
        return Err(EnvError::InvalidSpec(format!(
            "cannot draw {} distinct modes from {} combinations",
            spec.num_modes, available
        )));
    }

    let mut modes: Vec<BitString> = Vec::with_capacity(spec.num_modes);
    while modes.len() < spec.num_modes {
        let mut bits = 0u64;
        for slot in 0..slots {
            let w = spec.mode_blocks[rng.gen_range(0..spec.mode_blocks.len())] as u64;
            bits |= w << (slot * spec.k);
        }
        let m = BitString(bits);
        if !modes.contains(&m) {
            modes.push(m);
        }
    }

    let num_states = states_f as usize;
    let mut children = Vec::with_capacity(num_states);
    for code in 0..num_states {
        let mut cs = Vec::new();
        let mut c = code;
        let mut place = 1;
        for _ in 0..slots {
            if c % radix == 0 {
                for w in 0..(1usize << spec.k) {
                    cs.push(code + (w + 1) * place);
                }
            }
            c /= radix;
            place *= radix;
        }
        children.push(cs);
    }
    let labels = (0..num_states as u64).collect();
    let layout = BitSeqLayout { spec: spec.clone(), modes: modes.clone() };
    let env = DagEnv::from_children(
        EnvKind::BitSeq(layout),
        children,
        |s| {
            let slots_v = decode_slots(s as u64, spec);
            let bits = slots_to_bits(&slots_v, spec.k);
            let d = modes.iter().map(|m| bits.hamming(*m)).min().unwrap_or(0);
            Some(-2.0 * d as f64)
        },
        labels,
    )?;
    Ok((env, modes))
}

/// Builds one of the named micro fixtures.
pub fn build_micro(dag: &MicroDag) -> Result<DagEnv> {
    match dag {
        MicroDag::Diamond => {
            let children = vec![vec![1, 2], vec![3], vec![3], vec![]];
            DagEnv::from_children(
                EnvKind::Micro("diamond".into()),
                children,
                |_| Some(2f64.ln()),
                (0..4).collect(),
            )
        }
        MicroDag::Chain { length, reward } => {
            if *length == 0 || !(*reward > 0.0) {
                return Err(EnvError::InvalidSpec(
                    "chain needs length >= 1 and a positive reward".into(),
                ));
            }
            let children = (0..=*length)
                .map(|s| if s < *length { vec![s + 1] } else { vec![] })
                .collect();
            let lr = reward.ln();
            DagEnv::from_children(
                EnvKind::Micro(format!("chain{length}")),
                children,
                |_| Some(lr),
                (0..=*length as u64).collect(),
            )
        }
        MicroDag::Custom { edges, rewards } => from_edge_list(edges, rewards),
    }
}

fn from_edge_list(edges: &[(usize, usize)], rewards: &[(usize, f64)]) -> Result<DagEnv> {
    let mut nodes: Vec<usize> = edges.iter().flat_map(|&(u, v)| [u, v]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    if nodes.is_empty() {
        return Err(EnvError::InvalidSpec("empty edge list".into()));
    }
    let pos = |label: usize| nodes.binary_search(&label).unwrap();
    let mut children = vec![Vec::new(); nodes.len()];
    for &(u, v) in edges {
        if u == v {
            return Err(EnvError::Cycle);
        }
        let (pu, pv) = (pos(u), pos(v));
        if children[pu].contains(&pv) {
            return Err(EnvError::InvalidSpec(format!("duplicate edge {u} {v}")));
        }
        children[pu].push(pv);
    }
    let mut reward_of = vec![None; nodes.len()];
    for &(node, r) in rewards {
        let Ok(p) = nodes.binary_search(&node) else {
            return Err(EnvError::InvalidSpec(format!("reward for unknown node {node}")));
        };
        if !(r > 0.0) || !r.is_finite() {
            return Err(EnvError::BadReward(node));
        }
        reward_of[p] = Some(r.ln());
    }
    let labels = nodes.iter().map(|&l| l as u64).collect();
    DagEnv::from_children(
        EnvKind::Micro("custom".into()),
        children,
        |s| Some(reward_of[s].unwrap_or(0.0)),
        labels,
    )
}

/// Parses a plain-text edge list: `u v` per line, optional `reward x value` lines,
/// blank lines and `#` comments ignored.
pub fn parse_edge_list(text: &str) -> Result<MicroDag> {
    let mut edges = Vec::new();
    let mut rewards = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| EnvError::Parse { line: i + 1, msg: msg.to_string() };
        match toks.as_slice() {
            ["reward", x, r] => {
                let x = x.parse().map_err(|_| bad("bad node id"))?;
                let r = r.parse().map_err(|_| bad("bad reward value"))?;
                rewards.push((x, r));
            }
            [u, v] => {
                let u = u.parse().map_err(|_| bad("bad node id"))?;
                let v = v.parse().map_err(|_| bad("bad node id"))?;
                edges.push((u, v));
            }
            _ => return Err(bad("expected `u v` or `reward x value`")),
        }
    }
    Ok(MicroDag::Custom { edges, rewards })
}

pub fn load_edge_list(path: &Path) -> Result<MicroDag> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EnvError::InvalidSpec(format!("{}: {e}", path.display())))?;
    parse_edge_list(&text)
}

/// A complete trajectory `s0 -> ... -> x`.
///
/// `actions[t]` is the child slot taken from `states[t]`. `log_pf` holds the pure
/// forward-policy log-probabilities recorded at sampling time and is empty for
/// enumerated trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateId>,
    pub actions: Vec<usize>,
    pub log_pf: Vec<f64>,
    pub log_reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn terminal(&self) -> StateId {
        *self.states.last().expect("trajectory has at least the initial state")
    }

    /// Builds a trajectory from a state path, validating every edge.
    pub fn from_states(env: &DagEnv, states: Vec<StateId>) -> Option<Self> {
        if states.first() != Some(&env.initial()) || !env.is_terminal(*states.last()?) {
            return None;
        }
        let actions = states
            .windows(2)
            .map(|w| env.child_slot(w[0], w[1]))
            .collect::<Option<Vec<_>>>()?;
        let log_reward = env.log_reward(*states.last().unwrap());
        Some(Self { states, actions, log_pf: Vec::new(), log_reward })
    }
}

/// Exact number of complete trajectories, saturating at `u128::MAX`.
pub fn count_complete_trajectories(env: &DagEnv) -> u128 {
    let mut n = vec![0u128; env.num_states()];
    n[0] = 1;
    for s in 0..env.num_states() {
        for &c in env.children(s) {
            n[c] = n[c].saturating_add(n[s]);
        }
    }
    env.terminals().iter().fold(0u128, |acc, &x| acc.saturating_add(n[x]))
}

/// Every complete trajectory exactly once, in depth-first action order.
pub fn enumerate_trajectories(env: &DagEnv, cap: usize) -> Result<Vec<Trajectory>> {
    let count = count_complete_trajectories(env);
    if count > cap as u128 {
        return Err(EnvError::TrajectoryCapExceeded { count: count as f64, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut states = vec![env.initial()];
    let mut actions: Vec<usize> = Vec::new();
    // Depth-first walk with an explicit action stack.
    loop {
        let s = *states.last().unwrap();
        if env.is_terminal(s) {
            out.push(Trajectory {
                states: states.clone(),
                actions: actions.clone(),
                log_pf: Vec::new(),
                log_reward: env.log_reward(s),
            });
        } else {
            actions.push(0);
            states.push(env.children(s)[0]);
            continue;
        }
        // Backtrack to the deepest state with an untried sibling.
        loop {
            let Some(a) = actions.pop() else { return Ok(out) };
            states.pop();
            let parent = *states.last().unwrap();
            if a + 1 < env.children(parent).len() {
                actions.push(a + 1);
                states.push(env.children(parent)[a + 1]);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(d: usize, h: usize) -> DagEnv {
        build_hypergrid(&HypergridSpec::standard(d, h), DEFAULT_MAX_STATES).unwrap()
    }

    fn reward_at(env: &DagEnv, coords: &[usize]) -> f64 {
        let x = env
            .terminals()
            .iter()
            .copied()
            .find(|&x| env.hypergrid_coords(x).unwrap() == coords)
            .unwrap();
        env.log_reward(x).exp()
    }

    #[test]
    fn hypergrid_reward_values() {
        let env = grid(2, 8);
        assert!((reward_at(&env, &[4, 4]) - 0.001).abs() < 1e-12);
        assert!((reward_at(&env, &[0, 0]) - 0.501).abs() < 1e-12);
        assert!((reward_at(&env, &[1, 6]) - 2.501).abs() < 1e-12);
    }

    #[test]
    fn hypergrid_shape_and_action_order() {
        let env = grid(2, 8);
        assert_eq!(env.num_states(), 128);
        assert_eq!(env.terminals().len(), 64);
        for s in 0..64 {
            // Exit first.
            assert!(env.is_terminal(env.children(s)[0]));
        }
        assert_eq!(env.children(63).len(), 1);
        assert_eq!(env.children(0).len(), 3);
    }

    #[test]
    fn hypergrid_cap() {
        let err = build_hypergrid(&HypergridSpec::standard(4, 20), 100_000).unwrap_err();
        assert!(matches!(err, EnvError::StateCapExceeded { .. }));
    }

    #[test]
    fn two_by_two_grid_has_five_trajectories() {
        let env = grid(2, 2);
        let trajs = enumerate_trajectories(&env, DEFAULT_MAX_TRAJECTORIES).unwrap();
        assert_eq!(trajs.len(), 5);
        assert_eq!(count_complete_trajectories(&env), 5);
    }

    #[test]
    fn hypergrid_paths_follow_multinomial() {
        let env = grid(3, 3);
        let trajs = enumerate_trajectories(&env, DEFAULT_MAX_TRAJECTORIES).unwrap();
        let fact = |n: usize| (1..=n).product::<usize>();
        for &x in env.terminals() {
            let c = env.hypergrid_coords(x).unwrap();
            let expected = fact(c.iter().sum()) / c.iter().map(|&a| fact(a)).product::<usize>();
            let found = trajs.iter().filter(|t| t.terminal() == x).count();
            assert_eq!(found, expected, "cell {c:?}");
        }
    }

    #[test]
    fn micro_fixtures() {
        let d = build_micro(&MicroDag::Diamond).unwrap();
        assert_eq!(d.num_states(), 4);
        assert_eq!(d.terminals(), &[3]);
        assert_eq!(enumerate_trajectories(&d, 10).unwrap().len(), 2);

        let c = build_micro(&MicroDag::Chain { length: 3, reward: 3.0 }).unwrap();
        assert_eq!(enumerate_trajectories(&c, 10).unwrap().len(), 1);

        let cyc = MicroDag::Custom { edges: vec![(0, 1), (1, 2), (2, 1)], rewards: vec![] };
        assert!(build_micro(&cyc).is_err());

        let two_roots = MicroDag::Custom { edges: vec![(0, 2), (1, 2)], rewards: vec![] };
        assert!(matches!(build_micro(&two_roots), Err(EnvError::Roots(_))));
    }

    #[test]
    fn custom_edges_are_reindexed_topologically() {
        let dag = parse_edge_list("# fixture\n10 3\n10 7\n7 3\nreward 3 4.0\n").unwrap();
        let env = build_micro(&dag).unwrap();
        assert_eq!(env.label(0), 10);
        for s in 0..env.num_states() {
            for &c in env.children(s) {
                assert!(s < c);
            }
        }
        assert!((env.log_reward(2) - 4f64.ln()).abs() < 1e-15);
        assert!(parse_edge_list("1 2 3\n").is_err());
    }

    #[test]
    fn trajectory_cap() {
        let env = grid(2, 8);
        assert!(matches!(
            enumerate_trajectories(&env, 100),
            Err(EnvError::TrajectoryCapExceeded { .. })
        ));
    }

    #[test]
    fn bitseq_counts_and_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BitSeqSpec::desk_default();
        let (env, modes) = build_bitseq(&spec, &mut rng, DEFAULT_MAX_STATES).unwrap();
        assert_eq!(env.num_states(), 6561);
        assert_eq!(env.terminals().len(), 4096);
        assert_eq!(modes.len(), 8);
        let m = modes[0];
        let xm = env.state_of_bitstring(m).unwrap();
        assert_eq!(env.log_reward(xm).exp(), 1.0);
        // Flip one bit that takes us away from every mode.
        let near = (0..12)
            .map(|b| BitString(m.0 ^ (1 << b)))
            .find(|x| modes.iter().all(|mm| x.hamming(*mm) >= 1))
            .unwrap();
        let xn = env.state_of_bitstring(near).unwrap();
        assert!((env.log_reward(xn).exp() - (-2f64).exp()).abs() < 1e-15);
        assert!((env.log_reward(xn).exp() - 0.13534).abs() < 1e-5);
        for s in [0usize, 1, 100, 6560] {
            let filled = decode_slots(env.label(s), &spec).iter().filter(|&&v| v != 0).count();
            assert_eq!(env.parents(s).len(), filled);
            assert_eq!(env.children(s).len(), (4 - filled) * 8);
        }
    }

    #[test]
    fn bitseq_rejects_bad_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BitSeqSpec { n: 10, ..BitSeqSpec::desk_default() };
        assert!(matches!(
            build_bitseq(&spec, &mut rng, DEFAULT_MAX_STATES),
            Err(EnvError::BlockDoesNotDivide { .. })
        ));
    }

    #[test]
    fn edge_slot_maps_are_inverse() {
        let env = grid(3, 3);
        for s in 0..env.num_states() {
            for (j, &c) in env.children(s).iter().enumerate() {
                let p = env.parent_slot_of(s, j);
                assert_eq!(env.parents(c)[p], s);
                assert_eq!(env.child_slot_of(c, p), j);
            }
        }
    }
}
