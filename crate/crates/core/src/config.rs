//! Run configuration: a flat `key = value` text format grouped into `[section]`s.
//!
//! Keys are unique across sections, so `--set key=value` overrides need no
//! section prefix. [`RunConfig::to_text`] writes every key and parses back to an
//! equal config.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::backward::BackwardKind;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for key `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("key `{key}` belongs to section [{expected}], found in [{found}]")]
    WrongSection { key: String, expected: String, found: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvChoice {
    Hypergrid,
    BitSeq,
    Diamond,
    Chain,
    /// Custom micro DAG from an edge-list file.
    Edges,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Tb,
    Db,
    SubTb,
    SoftDqn,
    Mdqn,
}

impl ObjectiveKind {
    pub fn is_dqn(self) -> bool {
        matches!(self, ObjectiveKind::SoftDqn | ObjectiveKind::Mdqn)
    }
}

/// Tri-state switch whose `auto` value depends on other keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Switch {
    Auto,
    On,
    Off,
}

macro_rules! named_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("expected one of: {}", [$($name),+].join(", "))),
                }
            }
        }
    };
}

named_enum!(EnvChoice {
    EnvChoice::Hypergrid => "hypergrid",
    EnvChoice::BitSeq => "bitseq",
    EnvChoice::Diamond => "diamond",
    EnvChoice::Chain => "chain",
    EnvChoice::Edges => "edges",
});

named_enum!(ObjectiveKind {
    ObjectiveKind::Tb => "tb",
    ObjectiveKind::Db => "db",
    ObjectiveKind::SubTb => "subtb",
    ObjectiveKind::SoftDqn => "softdqn",
    ObjectiveKind::Mdqn => "mdqn",
});

named_enum!(Switch {
    Switch::Auto => "auto",
    Switch::On => "true",
    Switch::Off => "false",
});

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [env]
    pub env: EnvChoice,
    pub dims: usize,
    pub side: usize,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub bits_n: usize,
    pub bits_k: usize,
    /// Words modes are built from, as `k`-bit strings.
    pub mode_blocks: Vec<u32>,
    pub num_modes: usize,
    pub mode_threshold: usize,
    /// Seed for environment randomness (bit-sequence modes and test set).
    pub env_seed: u64,
    pub chain_length: usize,
    pub chain_reward: f64,
    pub edges_path: Option<PathBuf>,
    pub max_states: usize,
    /// Exact trajectory-level diagnostics run only below this many trajectories.
    pub enumerate_cap: usize,

    // [objective]
    pub objective: ObjectiveKind,
    pub subtb_lambda: f64,
    pub mdqn_alpha: f64,
    pub mdqn_l0: f64,
    pub leaf_coef: f64,
    pub q_target_tau: f64,

    // [backward]
    pub backward: BackwardKind,
    pub lr_backward: f64,
    pub backward_decay: f64,
    pub tau: f64,
    pub tlm_exclude_exploration: bool,
    pub pessim_window: usize,
    pub pessim_batch: usize,
    pub pessim_steps: usize,

    // [optim]
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_log_z: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    // [replay]
    pub replay: Switch,
    pub replay_capacity: usize,
    pub replay_alpha: f64,
    pub replay_beta: f64,
    pub replay_batch: usize,

    // [train]
    pub batch_size: usize,
    pub iterations: u64,
    pub epsilon: f64,
    pub anneal_epsilon: bool,
    pub eval_every: u64,
    pub mc_samples: usize,
    pub window: usize,
    pub log_wall_time: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvChoice::Hypergrid,
            dims: 2,
            side: 8,
            r0: 1e-3,
            r1: 0.5,
            r2: 2.0,
            bits_n: 12,
            bits_k: 3,
            mode_blocks: vec![0b000, 0b111, 0b110, 0b011],
            num_modes: 8,
            mode_threshold: 3,
            env_seed: 0,
            chain_length: 3,
            chain_reward: 3.0,
            edges_path: None,
            max_states: crate::env::DEFAULT_MAX_STATES,
            enumerate_cap: 200_000,

            objective: ObjectiveKind::SubTb,
            subtb_lambda: 0.9,
            mdqn_alpha: 0.15,
            mdqn_l0: -100.0,
            leaf_coef: 5.0,
            q_target_tau: 0.25,

            backward: BackwardKind::Tlm,
            lr_backward: 1e-3,
            backward_decay: 0.999,
            tau: 0.25,
            tlm_exclude_exploration: false,
            pessim_window: 20,
            pessim_batch: 16,
            pessim_steps: 1,

            lr: 1e-3,
            lr_decay: 1.0,
            lr_log_z: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,

            replay: Switch::Auto,
            replay_capacity: 100_000,
            replay_alpha: 0.5,
            replay_beta: 0.0,
            replay_batch: 256,

            batch_size: 16,
            iterations: 20_000,
            epsilon: 0.0,
            anneal_epsilon: false,
            eval_every: 100,
            mc_samples: 10,
            window: crate::metrics::DEFAULT_WINDOW,
            log_wall_time: false,
            seed: 0,
        }
    }
}

const SECTIONS: [(&str, &[&str]); 6] = [
    (
        "env",
        &[
            "env", "dims", "side", "r0", "r1", "r2", "bits_n", "bits_k", "mode_blocks", "num_modes",
            "mode_threshold", "env_seed", "chain_length", "chain_reward", "edges_path", "max_states",
            "enumerate_cap",
        ],
    ),
    ("objective", &["objective", "subtb_lambda", "mdqn_alpha", "mdqn_l0", "leaf_coef", "q_target_tau"]),
    (
        "backward",
        &[
            "backward", "lr_backward", "backward_decay", "tau", "tlm_exclude_exploration", "pessim_window",
            "pessim_batch", "pessim_steps",
        ],
    ),
    ("optim", &["lr", "lr_decay", "lr_log_z", "adam_beta1", "adam_beta2", "adam_eps", "weight_decay"]),
    ("replay", &["replay", "replay_capacity", "replay_alpha", "replay_beta", "replay_batch"]),
    (
        "train",
        &[
            "batch_size", "iterations", "epsilon", "anneal_epsilon", "eval_every", "mc_samples", "window",
            "log_wall_time", "seed",
        ],
    ),
];

/// Section that owns `key`.
pub fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// Integers may be written in scientific notation (`1e5`) as long as they are whole.
fn parse_count<T: TryFrom<u64>>(key: &str, value: &str) -> Result<T, ConfigError> {
    let bad = |reason: &str| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    };
    let n = match value.parse::<u64>() {
        Ok(n) => n,
        Err(_) => {
            let f: f64 = value.parse().map_err(|_| bad("expected a non-negative integer"))?;
            if !(f >= 0.0 && f.fract() == 0.0 && f < 1.8e19) {
                return Err(bad("expected a non-negative integer"));
            }
            f as u64
        }
    };
    T::try_from(n).map_err(|_| bad("integer out of range"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected true or false".into(),
        }),
    }
}

fn parse_blocks(key: &str, value: &str) -> Result<Vec<u32>, ConfigError> {
    value
        .split(',')
        .map(|w| {
            let w = w.trim();
            if w.is_empty() || !w.chars().all(|c| c == '0' || c == '1') {
                return Err(ConfigError::InvalidValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    reason: "expected comma-separated binary words".into(),
                });
            }
            Ok(u32::from_str_radix(w, 2).expect("validated binary word"))
        })
        .collect()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "env" => self.env = parse(key, v)?,
            "dims" => self.dims = parse_count(key, v)?,
            "side" => self.side = parse_count(key, v)?,
            "r0" => self.r0 = parse(key, v)?,
            "r1" => self.r1 = parse(key, v)?,
            "r2" => self.r2 = parse(key, v)?,
            "bits_n" => self.bits_n = parse_count(key, v)?,
            "bits_k" => self.bits_k = parse_count(key, v)?,
            "mode_blocks" => self.mode_blocks = parse_blocks(key, v)?,
            "num_modes" => self.num_modes = parse_count(key, v)?,
            "mode_threshold" => self.mode_threshold = parse_count(key, v)?,
            "env_seed" => self.env_seed = parse_count(key, v)?,
            "chain_length" => self.chain_length = parse_count(key, v)?,
            "chain_reward" => self.chain_reward = parse(key, v)?,
            "edges_path" => self.edges_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "max_states" => self.max_states = parse_count(key, v)?,
            "enumerate_cap" => self.enumerate_cap = parse_count(key, v)?,
            "objective" => self.objective = parse(key, v)?,
            "subtb_lambda" => self.subtb_lambda = parse(key, v)?,
            "mdqn_alpha" => self.mdqn_alpha = parse(key, v)?,
            "mdqn_l0" => self.mdqn_l0 = parse(key, v)?,
            "leaf_coef" => self.leaf_coef = parse(key, v)?,
            "q_target_tau" => self.q_target_tau = parse(key, v)?,
            "backward" => self.backward = parse(key, v)?,
            "lr_backward" => self.lr_backward = parse(key, v)?,
            "backward_decay" => self.backward_decay = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "tlm_exclude_exploration" => self.tlm_exclude_exploration = parse_bool(key, v)?,
            "pessim_window" => self.pessim_window = parse_count(key, v)?,
            "pessim_batch" => self.pessim_batch = parse_count(key, v)?,
            "pessim_steps" => self.pessim_steps = parse_count(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_log_z" => self.lr_log_z = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "replay" => self.replay = parse(key, v)?,
            "replay_capacity" => self.replay_capacity = parse_count(key, v)?,
            "replay_alpha" => self.replay_alpha = parse(key, v)?,
            "replay_beta" => self.replay_beta = parse(key, v)?,
            "replay_batch" => self.replay_batch = parse_count(key, v)?,
            "batch_size" => self.batch_size = parse_count(key, v)?,
            "iterations" => self.iterations = parse_count(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "anneal_epsilon" => self.anneal_epsilon = parse_bool(key, v)?,
            "eval_every" => self.eval_every = parse_count(key, v)?,
            "mc_samples" => self.mc_samples = parse_count(key, v)?,
            "window" => self.window = parse_count(key, v)?,
            "log_wall_time" => self.log_wall_time = parse_bool(key, v)?,
            "seed" => self.seed = parse_count(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Textual value of one key, in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let f = |x: f64| format!("{x:?}");
        Some(match key {
            "env" => self.env.to_string(),
            "dims" => self.dims.to_string(),
            "side" => self.side.to_string(),
            "r0" => f(self.r0),
            "r1" => f(self.r1),
            "r2" => f(self.r2),
            "bits_n" => self.bits_n.to_string(),
            "bits_k" => self.bits_k.to_string(),
            "mode_blocks" => self
                .mode_blocks
                .iter()
                .map(|w| format!("{w:0width$b}", width = self.bits_k))
                .collect::<Vec<_>>()
                .join(","),
            "num_modes" => self.num_modes.to_string(),
            "mode_threshold" => self.mode_threshold.to_string(),
            "env_seed" => self.env_seed.to_string(),
            "chain_length" => self.chain_length.to_string(),
            "chain_reward" => f(self.chain_reward),
            "edges_path" => self.edges_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "max_states" => self.max_states.to_string(),
            "enumerate_cap" => self.enumerate_cap.to_string(),
            "objective" => self.objective.to_string(),
            "subtb_lambda" => f(self.subtb_lambda),
            "mdqn_alpha" => f(self.mdqn_alpha),
            "mdqn_l0" => f(self.mdqn_l0),
            "leaf_coef" => f(self.leaf_coef),
            "q_target_tau" => f(self.q_target_tau),
            "backward" => self.backward.to_string(),
            "lr_backward" => f(self.lr_backward),
            "backward_decay" => f(self.backward_decay),
            "tau" => f(self.tau),
            "tlm_exclude_exploration" => self.tlm_exclude_exploration.to_string(),
            "pessim_window" => self.pessim_window.to_string(),
            "pessim_batch" => self.pessim_batch.to_string(),
            "pessim_steps" => self.pessim_steps.to_string(),
            "lr" => f(self.lr),
            "lr_decay" => f(self.lr_decay),
            "lr_log_z" => f(self.lr_log_z),
            "adam_beta1" => f(self.adam_beta1),
            "adam_beta2" => f(self.adam_beta2),
            "adam_eps" => f(self.adam_eps),
            "weight_decay" => f(self.weight_decay),
            "replay" => self.replay.to_string(),
            "replay_capacity" => self.replay_capacity.to_string(),
            "replay_alpha" => f(self.replay_alpha),
            "replay_beta" => f(self.replay_beta),
            "replay_batch" => self.replay_batch.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "iterations" => self.iterations.to_string(),
            "epsilon" => f(self.epsilon),
            "anneal_epsilon" => self.anneal_epsilon.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "mc_samples" => self.mc_samples.to_string(),
            "window" => self.window.to_string(),
            "log_wall_time" => self.log_wall_time.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                msg: format!("override `{o}` is not key=value"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Does not validate.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    msg: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::Syntax { line: i + 1, msg: format!("unknown section [{name}]") });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            let k = k.trim();
            let owner = section_of(k).ok_or_else(|| ConfigError::UnknownKey(k.to_string()))?;
            if let Some(found) = &section {
                if found != owner {
                    return Err(ConfigError::WrongSection {
                        key: k.to_string(),
                        expected: owner.to_string(),
                        found: found.clone(),
                    });
                }
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every key, grouped by section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (section, keys)) in SECTIONS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for k in *keys {
                let _ = writeln!(out, "{k} = {}", self.get(k).expect("every listed key is readable"));
            }
        }
        out
    }

    /// Whether forward updates draw from a replay buffer.
    pub fn uses_replay(&self) -> bool {
        match self.replay {
            Switch::Auto => self.objective.is_dqn(),
            Switch::On => true,
            Switch::Off => false,
        }
    }

    /// Rejects out-of-range values and unsupported combinations.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        let positive = [
            ("lr", self.lr),
            ("lr_backward", self.lr_backward),
            ("lr_log_z", self.lr_log_z),
            ("subtb_lambda", self.subtb_lambda),
            ("leaf_coef", self.leaf_coef),
            ("adam_eps", self.adam_eps),
            ("chain_reward", self.chain_reward),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{k} must be positive and finite, got {v}"));
            }
        }
        let unit = [
            ("lr_decay", self.lr_decay),
            ("backward_decay", self.backward_decay),
            ("tau", self.tau),
            ("q_target_tau", self.q_target_tau),
        ];
        for (k, v) in unit {
            if !(v > 0.0 && v <= 1.0) {
                return fail(format!("{k} must lie in (0, 1], got {v}"));
            }
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return fail(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if self.weight_decay < 0.0 || self.replay_alpha < 0.0 || self.replay_beta < 0.0 || self.mdqn_alpha < 0.0 {
            return fail("weight_decay, replay_alpha, replay_beta and mdqn_alpha must be non-negative".into());
        }
        if self.mdqn_l0 > 0.0 {
            return fail(format!("mdqn_l0 must be non-positive, got {}", self.mdqn_l0));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every as usize),
            ("mc_samples", self.mc_samples),
            ("window", self.window),
            ("pessim_window", self.pessim_window),
            ("pessim_batch", self.pessim_batch),
            ("pessim_steps", self.pessim_steps),
            ("replay_capacity", self.replay_capacity),
            ("replay_batch", self.replay_batch),
        ];
        for (k, v) in counts {
            if v == 0 {
                return fail(format!("{k} must be at least 1"));
            }
        }
        match self.env {
            EnvChoice::Hypergrid => {
                if self.dims == 0 || self.side < 2 {
                    return fail("hypergrid needs dims >= 1 and side >= 2".into());
                }
                if !(self.r0 > 0.0) || self.r1 < 0.0 || self.r2 < 0.0 {
                    return fail("hypergrid rewards need r0 > 0 and r1, r2 >= 0".into());
                }
            }
            EnvChoice::BitSeq => {
                if self.bits_k == 0 || self.bits_n % self.bits_k != 0 {
                    return fail(format!("bits_k = {} must divide bits_n = {}", self.bits_k, self.bits_n));
                }
                if self.num_modes == 0 {
                    return fail("num_modes must be at least 1".into());
                }
            }
            EnvChoice::Chain => {
                if self.chain_length == 0 {
                    return fail("chain_length must be at least 1".into());
                }
            }
            EnvChoice::Edges => {
                if self.edges_path.is_none() {
                    return fail("env = edges needs edges_path".into());
                }
            }
            EnvChoice::Diamond => {}
        }
        if self.anneal_epsilon && self.epsilon == 0.0 {
            return fail("anneal_epsilon needs a positive epsilon".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse_text(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_win_and_are_recorded() {
        let mut cfg = RunConfig::parse_text("[backward]\nbackward = uniform\n").unwrap();
        cfg.apply_overrides(&["backward=tlm", "lr = 2e-3"]).unwrap();
        assert_eq!(cfg.backward, BackwardKind::Tlm);
        assert!(cfg.to_text().contains("backward = tlm"));
        assert!(cfg.to_text().contains("lr = 0.002"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse_text("[train]\nbatchsize = 3\n").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("batchsize".into()));
        assert!(err.to_string().contains("batchsize"));
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.apply_overrides(&["nope=1"]), Err(ConfigError::UnknownKey("nope".into())));
    }

    #[test]
    fn bad_values_and_sections() {
        assert!(matches!(RunConfig::parse_text("lr = fast"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(
            RunConfig::parse_text("[train]\nlr = 1e-3"),
            Err(ConfigError::WrongSection { .. })
        ));
        assert!(matches!(RunConfig::parse_text("[nope]"), Err(ConfigError::Syntax { line: 1, .. })));
        assert_eq!(RunConfig::parse_text("replay_capacity = 1e5").unwrap().replay_capacity, 100_000);
        assert!(RunConfig::parse_text("iterations = 2.5").is_err());
    }

    #[test]
    fn validation_catches_ranges() {
        let mut cfg = RunConfig::default();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.env = EnvChoice::BitSeq;
        cfg.bits_k = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.env = EnvChoice::Edges;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn replay_switch() {
        let mut cfg = RunConfig::default();
        assert!(!cfg.uses_replay());
        cfg.objective = ObjectiveKind::Mdqn;
        assert!(cfg.uses_replay());
        cfg.replay = Switch::Off;
        assert!(!cfg.uses_replay());
    }

    #[test]
    fn mode_blocks_keep_width() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.get("mode_blocks").unwrap(), "000,111,110,011");
    }
}
