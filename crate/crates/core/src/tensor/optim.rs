//! Adam optimizer, learning-rate schedule, and named parameter sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Per-parameter Adam moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction. The step counter increments once
/// per call.
pub fn adam_step(param: &mut [f32], grad: &[f32], state: &mut AdamState, lr: f32) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Usage(format!("adam_step requires lr > 0, got {lr}")));
    }
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step size mismatch: param {}, grad {}, state {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - (b1 as f64).powi(state.t as i32);
    let bc2 = 1.0 - (b2 as f64).powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] as f64 / bc1;
        let vhat = state.v[i] as f64 / bc2;
        param[i] -= (lr as f64 * mhat / (vhat.sqrt() + state.epsilon as f64)) as f32;
    }
    Ok(())
}

/// Step decay: base rate until `decay_epoch` epochs have elapsed, then
/// base * gamma. Epochs are counted from zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub decay_gamma: f32,
    pub decay_epoch: usize,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f32 {
        self.base_lr * self.factor(epoch)
    }

    /// Multiplier applied to any group's base rate at this epoch.
    pub fn factor(&self, epoch: usize) -> f32 {
        if epoch < self.decay_epoch {
            1.0
        } else {
            self.decay_gamma
        }
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base_lr: 3e-5, decay_gamma: 0.1, decay_epoch: 10 }
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Registers every parameter on a tape as a requires-grad leaf, in
    /// order. The returned ids align with parameter indices.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect()
    }
}

/// Gradient accumulator for minibatch averaging across per-sample tapes.
#[derive(Debug)]
pub struct GradAccum {
    sums: Vec<Vec<f32>>,
    pub count: usize,
}

impl GradAccum {
    pub fn new(params: &ParamSet) -> Self {
        GradAccum {
            sums: (0..params.len()).map(|i| vec![0.0; params.get(i).numel()]).collect(),
            count: 0,
        }
    }

    /// Adds the gradients a finished tape holds for the bound param nodes.
    /// Parameters untouched by the graph contribute zero.
    pub fn add_from_tape(&mut self, tape: &Tape, bound: &[NodeId]) {
        for (i, &id) in bound.iter().enumerate() {
            if let Some(g) = tape.grad(id) {
                for (s, gv) in self.sums[i].iter_mut().zip(g) {
                    *s += gv;
                }
            }
        }
        self.count += 1;
    }

    /// Mean gradients over the accumulated samples; resets the buffer.
    pub fn take_mean(&mut self) -> Vec<Vec<f32>> {
        let n = self.count.max(1) as f32;
        let mut out: Vec<Vec<f32>> = Vec::with_capacity(self.sums.len());
        for s in &mut self.sums {
            let mut g = vec![0.0; s.len()];
            for (gi, si) in g.iter_mut().zip(s.iter()) {
                *gi = si / n;
            }
            s.fill(0.0);
            out.push(g);
        }
        self.count = 0;
        out
    }
}

/// Adam over a ParamSet with a per-parameter learning rate (dual-rate
/// training gives the finetuned and fresh groups different rates). A rate
/// of exactly zero freezes the parameter bit-for-bit.
#[derive(Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            states: (0..params.len()).map(|i| AdamState::new(params.get(i).numel())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f32>], lrs: &[f32]) -> Result<()> {
        if grads.len() != self.states.len() || lrs.len() != self.states.len() {
            return Err(Error::Shape(format!(
                "optimizer expects {} grads/lrs, got {}/{}",
                self.states.len(),
                grads.len(),
                lrs.len()
            )));
        }
        for i in 0..self.states.len() {
            if lrs[i] == 0.0 {
                continue;
            }
            adam_step(params.get_mut(i).data_mut(), &grads[i], &mut self.states[i], lrs[i])?;
        }
        Ok(())
    }
}
