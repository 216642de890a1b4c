//! Named weight storage and the dense/conv layers built on the tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// All trainable tensors of a network, keyed by a dotted name.
///
/// Each tensor is initialised from its own stream derived from the seed and
/// its name, so a weight has the same initial value in every network
/// variant that contains it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Stream for `name` under `seed`.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing weight `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing weight `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect(),
        }
    }

    /// Dense layer `prefix.w: [out, inp]`, `prefix.b: [out]`, uniform in
    /// `±gain * sqrt(3 / inp)`, zero bias.
    pub fn add_linear(&mut self, seed: u64, prefix: &str, inp: usize, out: usize, gain: f64) {
        let name = format!("{prefix}.w");
        let mut rng = named_rng(seed, &name);
        let bound = gain * (3.0 / inp as f64).sqrt();
        let w = Tensor::from_fn(&[out, inp], |_| rng.random_range(-bound..=bound));
        self.insert(name, w);
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[out]));
    }

    /// Square convolution `prefix.w: [cout, cin, k, k]`, `prefix.b: [cout]`,
    /// He-uniform.
    pub fn add_conv(&mut self, seed: u64, prefix: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let name = format!("{prefix}.w");
        let mut rng = named_rng(seed, &name);
        let bound = gain * (6.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-bound..=bound));
        self.insert(name, w);
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
    }

    /// Registers every tensor on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of `bound` into `self`, treating missing ones as zero.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, acc) in self.tensors.iter_mut() {
            let Some(&v) = bound.vars.get(name) else { continue };
            if let Some(g) = grads.get(v) {
                if g.shape() != acc.shape() {
                    return Err(shape_err("accumulate", format!("{name}: {:?} vs {:?}", g.shape(), acc.shape())));
                }
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

/// Weights of a [`ParamStore`] recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing weight `{name}`")))
    }

    pub fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.var(&format!("{prefix}.w"))?,
            b: self.var(&format!("{prefix}.b"))?,
        })
    }

    pub fn conv(&self, prefix: &str) -> Result<Conv> {
        Ok(Conv {
            w: self.var(&format!("{prefix}.w"))?,
            b: self.var(&format!("{prefix}.b"))?,
        })
    }

    /// Every dense layer `prefix.0`, `prefix.1`, ... in order.
    pub fn mlp(&self, prefix: &str) -> Result<Vec<Linear>> {
        let mut layers = Vec::new();
        while self.vars.contains_key(&format!("{prefix}.{}.w", layers.len())) {
            layers.push(self.linear(&format!("{prefix}.{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(Error::Config(format!("missing layers under `{prefix}`")));
        }
        Ok(layers)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    /// `w x + b` for a vector `x`.
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).numel();
        let col = tape.reshape(x, &[n, 1])?;
        let y = tape.matmul(self.w, col)?;
        let y = tape.flatten(y)?;
        tape.add(y, self.b)
    }

    /// `x w^T + b` for row-stacked inputs `x: [n, inp]`.
    pub fn apply_rows(&self, tape: &Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.transpose(self.w)?)?;
        tape.add_row(y, self.b)
    }
}

impl Conv {
    pub fn apply(&self, tape: &Tape, x: Var, stride: usize) -> Result<Var> {
        tape.conv2d(x, self.w, self.b, stride)
    }
}

/// Dense layers with ReLU between them (none after the last).
pub fn mlp_forward(tape: &Tape, layers: &[Linear], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = l.apply(tape, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_init_does_not_depend_on_insertion_order() {
        let mut a = ParamStore::new();
        a.add_linear(3, "x", 4, 2, 1.0);
        a.add_conv(3, "y", 2, 3, 3, 1.0);
        let mut b = ParamStore::new();
        b.add_conv(3, "y", 2, 3, 3, 1.0);
        b.add_linear(3, "x", 4, 2, 1.0);
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        c.add_linear(4, "x", 4, 2, 1.0);
        assert_ne!(a.get("x.w").unwrap(), c.get("x.w").unwrap());
    }

    #[test]
    fn linear_matches_explicit_product() {
        let mut s = ParamStore::new();
        s.add_linear(0, "fc", 3, 2, 1.0);
        s.get_mut("fc.b").unwrap().data_mut().copy_from_slice(&[0.5, -1.0]);
        let tape = Tape::new();
        let bound = s.bind(&tape, false);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, -3.0]));
        let y = bound.linear("fc").unwrap().apply(&tape, x).unwrap();
        let w = s.get("fc.w").unwrap().data();
        for r in 0..2 {
            let expect = w[3 * r] - 3.0 * w[3 * r + 2] + 2.0 * w[3 * r + 1] + [0.5, -1.0][r];
            assert!((tape.value(y).data()[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_adds_gradients() {
        let mut s = ParamStore::new();
        s.add_linear(0, "fc", 2, 1, 1.0);
        let mut acc = s.zeros_like();
        for _ in 0..2 {
            let tape = Tape::new();
            let bound = s.bind(&tape, true);
            let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
            let y = bound.linear("fc").unwrap().apply(&tape, x).unwrap();
            let loss = tape.sum(y).unwrap();
            let g = tape.backward(loss).unwrap();
            acc.accumulate(&bound, &g).unwrap();
        }
        assert_eq!(acc.get("fc.w").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(acc.get("fc.b").unwrap().data(), &[2.0]);
    }
}
