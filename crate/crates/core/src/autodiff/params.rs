use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named trainable tensors with gradient slots and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    /// Round values to single precision after every update.
    f32_storage: bool,
}

/// Tape handles for every parameter of a store, in registration order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Copy with one parameter routed to a different tape value.
    pub fn with(&self, id: ParamId, var: Var) -> Bound {
        let mut vars = self.vars.clone();
        vars[id.0] = var;
        Bound { vars }
    }
}

fn round_f32(t: &mut Tensor) {
    for x in t.data_mut() {
        *x = *x as f32 as f64;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store whose values are kept exactly representable in `f32`, so that
    /// checkpoints (always written as `f32`) reload bit-identically.
    pub fn with_f32_storage() -> Self {
        ParamStore {
            params: Vec::new(),
            f32_storage: true,
        }
    }

    pub fn f32_storage(&self) -> bool {
        self.f32_storage
    }

    pub fn add(&mut self, name: &str, mut value: Tensor) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        if self.f32_storage {
            round_f32(&mut value);
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Replaces a parameter value; shapes must match.
    pub fn set(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::data(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::data(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        if self.f32_storage {
            round_f32(&mut value);
        }
        p.value = value;
        Ok(())
    }

    /// Pushes every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Pushes every parameter as a constant (no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Adds the gradients of a backward pass into the slots (`+=`).
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Self::default()
        }
    }

    /// One update of every parameter from its gradient slot, then zeroes the
    /// slots.
    pub fn step(&self, store: &mut ParamStore) {
        let f32_storage = store.f32_storage;
        for p in &mut store.params {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let g = p.grad.data();
            let (m, v, x) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                x[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if f32_storage {
                round_f32(&mut p.value);
            }
            p.grad.data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorMode {
    /// Larger is better (e.g. validation MRR).
    Max,
    /// Smaller is better (e.g. training loss).
    Min,
}

/// Multiplies the learning rate by `factor` once the monitored value has
/// failed to improve for `patience` consecutive epochs, then restarts the
/// count.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    mode: MonitorMode,
    best: Option<f64>,
    bad_epochs: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(mode: MonitorMode, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            mode,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        let improved = match (self.best, self.mode) {
            (None, _) => true,
            (Some(b), MonitorMode::Max) => metric > b,
            (Some(b), MonitorMode::Min) => metric < b,
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.reductions += 1;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(x)).unwrap();
        (s, id)
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let w = b.var(ParamId(0));
        let l = tape.scale(w, g);
        let grads = tape.backward(l).unwrap();
        s.accumulate(&b, &grads);
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = one_param(0.0);
        assert!(s.add("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn gradients_accumulate() {
        let (mut s, id) = one_param(1.0);
        set_grad(&mut s, 3.0);
        set_grad(&mut s, 3.0);
        assert_eq!(s.grad(id).data(), &[6.0]);
        s.zero_grad();
        assert_eq!(s.grad(id).data(), &[0.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut s, id) = one_param(0.5);
        set_grad(&mut s, 1.0);
        Adam::with_lr(0.001).step(&mut s);
        let delta = 0.5 - s.value(id).data()[0];
        assert!((delta - 0.001).abs() < 1e-8, "{delta}");
        assert_eq!(s.grad(id).data(), &[0.0], "slots zeroed after step");
    }

    #[test]
    fn zero_grad_means_no_change() {
        let (mut s, id) = one_param(0.5);
        Adam::default().step(&mut s);
        assert_eq!(s.value(id).data(), &[0.5]);
    }

    #[test]
    fn repeated_identical_grads_give_steady_steps() {
        // With a constant gradient, m_hat = g and v_hat = g^2 at every step.
        let (mut s, id) = one_param(0.0);
        let adam = Adam::default();
        set_grad(&mut s, 0.3);
        adam.step(&mut s);
        let first = -s.value(id).data()[0];
        set_grad(&mut s, 0.3);
        adam.step(&mut s);
        let second = -s.value(id).data()[0] - first;
        assert!((second / first - 1.0).abs() < 0.05, "{first} {second}");
    }

    #[test]
    fn f32_storage_rounds_values() {
        let mut s = ParamStore::with_f32_storage();
        let id = s.add("w", Tensor::scalar(0.1)).unwrap();
        assert_eq!(s.value(id).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn scheduler_improving_history_keeps_lr() {
        let mut sch = PlateauScheduler::new(MonitorMode::Max, 10, 0.1);
        let mut lr = 1.0;
        for e in 0..50 {
            lr = sch.observe(e as f64, lr);
        }
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn scheduler_flat_history_reductions() {
        let run = |epochs: usize| {
            let mut sch = PlateauScheduler::new(MonitorMode::Max, 10, 0.1);
            let mut lr = 1.0;
            for _ in 0..epochs {
                lr = sch.observe(0.3, lr);
            }
            (sch.reductions(), lr)
        };
        assert_eq!(run(10).0, 0);
        assert_eq!(run(11).0, 1);
        assert_eq!(run(20).0, 1);
        let (n, lr) = run(22);
        assert_eq!(n, 2);
        assert!((lr - 0.01).abs() < 1e-15);
    }

    #[test]
    fn scheduler_min_mode() {
        let mut sch = PlateauScheduler::new(MonitorMode::Min, 2, 0.5);
        let mut lr = 1.0;
        for m in [3.0, 2.0, 2.5, 2.5] {
            lr = sch.observe(m, lr);
        }
        assert_eq!(lr, 0.5);
    }
}
