//! Named parameter storage, tape binding, and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, ordered collection of learnable tensors with gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape();
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(Tensor::zeros(shape[0], shape[1]));
        ParamId(self.values.len() - 1)
    }

    /// Xavier-normal initialised `rows×cols` matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(rows, cols, data).expect("sized"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape {
                op: "param_set",
                left: self.values[id.0].shape(),
                right: value.shape(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Record every parameter on the tape as a gradient-carrying leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Record every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self
                .values
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
        }
    }

    /// Sum tape gradients into the accumulators.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (i, v) in bound.vars.iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                self.grads[i].add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn grads_are_zero(&self) -> bool {
        self.grads
            .iter()
            .all(|g| g.data().iter().all(|&x| x == 0.0))
    }

    /// Round every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Parameters of one [`ParamStore`] recorded on a tape.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var>,
}

impl<'t> Bound<'t> {
    /// Wrap externally created leaves, one per stored tensor in store order.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var>) -> Self {
        Self { tape, vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Affine map `x W + b` applied to the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, b: &Bound<'_>, x: Var) -> Result<Var> {
        let y = b.tape.matmul(x, b.var(self.weight))?;
        match self.bias {
            Some(bias) => b.tape.add(y, b.var(bias)),
            None => Ok(y),
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients. Does not zero them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_filtered(store, |_| true);
    }

    /// Update only the parameters accepted by `include`.
    pub fn step_filtered(&mut self, store: &mut ParamStore, include: impl Fn(ParamId) -> bool) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..store.values.len() {
            if !include(ParamId(i)) {
                continue;
            }
            let g = store.grads[i].data();
            let m = self.m[i].data_mut();
            for (mk, gk) in m.iter_mut().zip(g) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
            }
            let v = self.v[i].data_mut();
            for (vk, gk) in v.iter_mut().zip(g) {
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((x, mk), vk) in store.values[i].data_mut().iter_mut().zip(m).zip(v) {
                *x -= self.lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::invalid("optimizer state does not match parameters"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accumulate_then_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(vec![1.0, 2.0]));
        for _ in 0..2 {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let s = tape.sum(tape.square(b.var(w)));
            let g = tape.backward(s).unwrap();
            store.accumulate(&b, &g);
        }
        assert_eq!(store.grad(w).data(), &[4.0, 8.0]);
        store.zero_grad();
        assert!(store.grads_are_zero());
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(vec![1.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        opt.step(&mut store);
        assert_eq!(store.get(w).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        for _ in 0..300 {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let l = tape.square(b.var(w));
            let g = tape.backward(l).unwrap();
            store.accumulate(&b, &g);
            opt.step(&mut store);
            store.zero_grad();
        }
        assert!(store.get(w).item().abs() < 0.05);
    }

    #[test]
    fn linear_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        store
            .set(lin.bias.unwrap(), Tensor::row_vector(vec![0.5, -1.0]))
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 0.5]]).unwrap();
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let y = tape.value(lin.forward(&b, xv).unwrap());
        let w = store.get(lin.weight);
        for r in 0..2 {
            for c in 0..2 {
                let mut e = [0.5, -1.0][c];
                for k in 0..3 {
                    e += x.get(r, k) * w.get(k, c);
                }
                assert!((y.get(r, c) - e).abs() < 1e-12);
            }
        }
    }
}
