//! Plain-text checkpoints.
//!
//! ```text
//! gflowlab-checkpoint 1
//! counter iteration 2000
//! tensor pf_logits 2 3
//! 0.1 -0.5 0 1 2 3
//! ```
//!
//! `counter` lines carry integers. A `tensor` line gives a name and a row-major
//! shape, and the next line holds the values in shortest round-trip form.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::env::DagEnv;
use crate::params::{AdamState, ForwardModel, ParamBundle};

pub const MAGIC: &str = "gflowlab-checkpoint 1";

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (missing `{MAGIC}` header)")]
    BadHeader,
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing tensor or counter `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has {found} values, expected {expected}")]
    Shape { name: String, expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub counters: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn put(&mut self, name: &str, values: &[f64]) {
        self.tensors
            .insert(name.to_string(), Tensor { shape: vec![values.len()], values: values.to_vec() });
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MAGIC);
        out.push('\n');
        for (k, v) in &self.counters {
            out.push_str(&format!("counter {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            out.push_str(&format!("tensor {name} {}\n", shape.join(" ")));
            let vals: Vec<String> = t.values.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(CheckpointError::BadHeader),
        }
        let syntax = |line: usize, msg: &str| CheckpointError::Syntax { line: line + 1, msg: msg.to_string() };
        let mut ck = Checkpoint::default();
        while let Some((i, line)) = lines.next() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => continue,
                ["counter", name, value] => {
                    let v = value.parse().map_err(|_| syntax(i, "bad counter value"))?;
                    ck.counters.insert(name.to_string(), v);
                }
                ["tensor", name, dims @ ..] => {
                    let shape = dims
                        .iter()
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| syntax(i, "bad tensor shape"))?;
                    let (j, data) = lines.next().ok_or_else(|| syntax(i, "tensor without values"))?;
                    let values = data
                        .split_whitespace()
                        .map(str::parse::<f64>)
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| syntax(j, "bad tensor value"))?;
                    let expected: usize = shape.iter().product();
                    if values.len() != expected {
                        return Err(CheckpointError::Shape { name: name.to_string(), expected, found: values.len() });
                    }
                    ck.tensors.insert(name.to_string(), Tensor { shape, values });
                }
                _ => return Err(syntax(i, "expected `counter` or `tensor`")),
            }
        }
        Ok(ck)
    }

    fn take(&self, name: &str, len: usize) -> Result<Vec<f64>, CheckpointError> {
        let t = self.tensors.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.values.len() != len {
            return Err(CheckpointError::Shape { name: name.to_string(), expected: len, found: t.values.len() });
        }
        Ok(t.values.clone())
    }

    fn counter(&self, name: &str) -> Result<u64, CheckpointError> {
        self.counters.get(name).copied().ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }
}

fn put_adam(ck: &mut Checkpoint, name: &str, st: &AdamState) {
    ck.put(&format!("adam.{name}.m"), &st.m);
    ck.put(&format!("adam.{name}.v"), &st.v);
    ck.counters.insert(format!("adam.{name}.step"), st.step);
}

fn load_adam(ck: &Checkpoint, name: &str, st: &mut AdamState) -> Result<(), CheckpointError> {
    st.m = ck.take(&format!("adam.{name}.m"), st.m.len())?;
    st.v = ck.take(&format!("adam.{name}.v"), st.v.len())?;
    st.step = ck.counter(&format!("adam.{name}.step"))?;
    Ok(())
}

/// Serialises every tensor, optimiser moment and counter of a bundle.
pub fn bundle_to_checkpoint(bundle: &ParamBundle, extra_counters: &[(&str, u64)]) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.counters.insert("iteration".into(), bundle.iteration);
    for (k, v) in extra_counters {
        ck.counters.insert(k.to_string(), *v);
    }
    match &bundle.forward {
        ForwardModel::Policy(p) => ck.put("pf_logits", &p.logits),
        ForwardModel::SoftQ { q, q_target } => {
            ck.put("q_values", &q.values);
            ck.put("q_target_values", &q_target.values);
        }
    }
    ck.put("pb_logits", &bundle.pb.logits);
    ck.put("pb_target_logits", &bundle.pb_target.logits);
    if let Some(f) = &bundle.flows {
        ck.put("log_flow", &f.log_flow);
    }
    if let Some(z) = bundle.log_z {
        ck.put("log_z", &[z]);
    }
    put_adam(&mut ck, bundle.forward.tensor_name(), &bundle.optim.forward);
    put_adam(&mut ck, "pb_logits", &bundle.optim.backward);
    if let Some(st) = &bundle.optim.log_flow {
        put_adam(&mut ck, "log_flow", st);
    }
    if let Some(st) = &bundle.optim.log_z {
        put_adam(&mut ck, "log_z", st);
    }
    ck
}

/// Restores a checkpoint into a bundle with the same layout (as built by
/// [`ParamBundle::new`] for the same environment and objective).
pub fn restore_bundle(env: &DagEnv, ck: &Checkpoint, bundle: &mut ParamBundle) -> Result<(), CheckpointError> {
    bundle.iteration = ck.counter("iteration")?;
    let nf = env.num_forward_edges();
    let nb = env.num_backward_edges();
    match &mut bundle.forward {
        ForwardModel::Policy(p) => p.logits = ck.take("pf_logits", nf)?,
        ForwardModel::SoftQ { q, q_target } => {
            q.values = ck.take("q_values", nf)?;
            q_target.values = ck.take("q_target_values", nf)?;
        }
    }
    bundle.pb.logits = ck.take("pb_logits", nb)?;
    bundle.pb_target.logits = ck.take("pb_target_logits", nb)?;
    if let Some(f) = &mut bundle.flows {
        f.log_flow = ck.take("log_flow", env.num_states())?;
    }
    if let Some(z) = &mut bundle.log_z {
        *z = ck.take("log_z", 1)?[0];
    }
    let name = bundle.forward.tensor_name();
    load_adam(ck, name, &mut bundle.optim.forward)?;
    load_adam(ck, "pb_logits", &mut bundle.optim.backward)?;
    if let Some(st) = &mut bundle.optim.log_flow {
        load_adam(ck, "log_flow", st)?;
    }
    if let Some(st) = &mut bundle.optim.log_z {
        load_adam(ck, "log_z", st)?;
    }
    Ok(())
}
