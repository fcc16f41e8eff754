//! Named parameter tensors, tape binding, initialization, and the AdamW
//! optimizer with the warmup + step-decay learning-rate schedule.

use crate::tape::{Gradients, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Named parameter tensors. BTreeMap keeps iteration order (and therefore
/// optimizer updates and checkpoints) deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Uniform fan-in init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a
    /// `fan_in x fan_out` weight.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| rng.gen_range(-bound..bound));
        let b = ArrayD::from_shape_fn(IxDyn(&[fan_out]), |_| rng.gen_range(-bound..bound));
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), b);
    }

    /// Linear layer whose output starts at zero (residual branches, FiLM).
    pub fn init_linear_zero(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[fan_in, fan_out])));
        self.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])));
    }
}

/// Binds parameters into a tape as gradient-tracked leaves, one leaf per name
/// per forward pass, and maps gradients back to names after the backward sweep.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Bound { store, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn var(&self, tape: &Tape, name: &str) -> Var {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let v = tape.leaf(self.store.get(name).clone());
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// `x @ W + b` with the last axis as features.
    pub fn linear(&self, tape: &Tape, x: Var, name: &str) -> Var {
        let w = self.var(tape, &format!("{name}.w"));
        let b = self.var(tape, &format!("{name}.b"));
        let y = tape.matmul(x, w);
        tape.add_vec(y, b)
    }

    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Sums per-sample gradient maps in index order (deterministic regardless of
/// how the samples were computed).
pub fn sum_grads(per_sample: Vec<BTreeMap<String, ArrayD<f64>>>) -> BTreeMap<String, ArrayD<f64>> {
    let mut total: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for sample in per_sample {
        for (name, g) in sample {
            match total.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    total
}

/// Linear warmup to `base_lr` followed by step decay at the milestones.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base_lr: 2e-4, warmup_steps: 2000, milestones: vec![150_000, 250_000], decay: 0.1 }
    }
}

impl LrSchedule {
    /// Learning rate at a 1-based optimizer step.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base_lr * warm * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *p);
                });
        }
    }
}
