//! Adam with bias correction, and a step-decay learning-rate schedule.

use std::io::{Read, Write};

use crate::nn::Tensor;

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// Learning rate for the 0-based iteration `it`: one decay per milestone
    /// that is `<= it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= it).count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay per unit learning rate.
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

const STATE_MAGIC: &[u8; 4] = b"UFAD";

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = [usize; 4]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, v: m.clone(), m }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Shape(format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len())));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[k].shape() || g.shape() != self.m[k].shape() {
                return Err(TrainError::Shape(format!("parameter {k}: {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for k in 0..params.len() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, &g), mi), vi) in params[k].data_mut().iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            }
        }
        Ok(())
    }

    /// Step counter and moments, all in f64 so a resumed run continues
    /// exactly.
    pub fn write_state<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for t in self.m.iter().chain(&self.v) {
            for d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_state<R: Read>(mut r: R) -> Result<Self, TrainError> {
        let mut word = [0u8; 8];
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(TrainError::Config("not an optimizer state file".into()));
        }
        let mut u64_ = |r: &mut R| -> Result<u64, TrainError> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let step = u64_(&mut r)?;
        let n = u64_(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = u64_(&mut r)? as usize;
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(u64_(&mut r)?));
            }
            tensors.push(Tensor::from_vec(shape, data).map_err(|e| TrainError::Shape(e.to_string()))?);
        }
        let v = tensors.split_off(n);
        Ok(Adam { step, m: tensors, v, ..Adam::new([]) })
    }
}
