use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the DCGAN weight initialization.
pub const INIT_STD: f64 = 0.02;

/// One named parameter with its gradient buffer and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Running statistics are stored here too, with `trainable == false`.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, trainable: bool) -> Self {
        let n = value.numel();
        Self { value, grad: vec![T::zero(); n], m: vec![T::zero(); n], v: vec![T::zero(); n], trainable }
    }
}

/// Declarative description of one layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Kernel `[out, in, k, k]`.
    Conv { name: String, in_ch: usize, out_ch: usize, k: usize },
    /// Kernel `[in, out, k, k]`.
    ConvTranspose { name: String, in_ch: usize, out_ch: usize, k: usize },
    /// Weight `[out, in]`, optional bias `[out]`.
    Dense { name: String, in_f: usize, out_f: usize, bias: bool },
    /// gamma, beta plus running mean/var buffers.
    BatchNorm { name: String, ch: usize },
}

/// Ordered, uniquely named parameters of one network plus the shared Adam
/// step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Param<T>)>,
    index: HashMap<String, usize>,
    /// Adam step count `t`, shared by every parameter of this set.
    pub step: u64,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, param));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.value).ok_or_else(|| Error::Invalid(format!("no parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.entries.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Put every trainable parameter into `g`. With `track` the leaves
    /// receive gradients, otherwise they are constants.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bound {
        let mut vars = HashMap::new();
        for (i, (name, p)) in self.entries.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let mut t = p.value.clone();
            t.grad = None;
            let v = if track { g.variable(t) } else { g.constant(t) };
            vars.insert(name.clone(), (i, v));
        }
        Bound { vars }
    }

    /// Add the leaf gradients accumulated in `g` into the parameter grads.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (i, v) in bound.vars.values() {
            if let Some(gr) = g.grad(*v) {
                let p = &mut self.entries[*i].1;
                p.grad.iter_mut().zip(gr).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }

    /// Snapshot of all values, for "this step did not touch me" checks.
    pub fn values_snapshot(&self) -> Vec<Vec<T>> {
        self.entries.iter().map(|(_, p)| p.value.data().to_vec()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, (usize, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).map(|(_, v)| *v).ok_or_else(|| Error::Invalid(format!("parameter `{name}` not bound")))
    }
}

/// Initialize parameters for `layers`: conv/dense weights ~ N(0, 0.02^2),
/// biases 0, batch norm gamma 1 / beta 0, running mean 0 / var 1.
pub fn init_params<T: Scalar>(layers: &[LayerSpec], seed: u64) -> Result<ParamSet<T>> {
    let mut r = rng::stream(seed, "init");
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut sample = |shape: &[usize]| -> Tensor<T> { Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut r))) };
    let mut ps = ParamSet::new();
    for layer in layers {
        match layer {
            LayerSpec::Conv { name, in_ch, out_ch, k } => {
                ps.insert(format!("{name}.weight"), Param::new(sample(&[*out_ch, *in_ch, *k, *k]), true))?;
            }
            LayerSpec::ConvTranspose { name, in_ch, out_ch, k } => {
                ps.insert(format!("{name}.weight"), Param::new(sample(&[*in_ch, *out_ch, *k, *k]), true))?;
            }
            LayerSpec::Dense { name, in_f, out_f, bias } => {
                ps.insert(format!("{name}.weight"), Param::new(sample(&[*out_f, *in_f]), true))?;
                if *bias {
                    ps.insert(format!("{name}.bias"), Param::new(Tensor::zeros(&[*out_f]), true))?;
                }
            }
            LayerSpec::BatchNorm { name, ch } => {
                ps.insert(format!("{name}.gamma"), Param::new(Tensor::ones(&[*ch]), true))?;
                ps.insert(format!("{name}.beta"), Param::new(Tensor::zeros(&[*ch]), true))?;
                ps.insert(format!("{name}.running_mean"), Param::new(Tensor::zeros(&[*ch]), false))?;
                ps.insert(format!("{name}.running_var"), Param::new(Tensor::ones(&[*ch]), false))?;
            }
        }
    }
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv { name: "c1".into(), in_ch: 3, out_ch: 8, k: 4 },
            LayerSpec::BatchNorm { name: "bn1".into(), ch: 8 },
            LayerSpec::Dense { name: "fc".into(), in_f: 32, out_f: 4, bias: true },
        ]
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params::<f32>(&spec(), 3).unwrap();
        let b = init_params::<f32>(&spec(), 3).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f32>(&spec(), 4).unwrap();
        assert_ne!(a.value("c1.weight").unwrap(), c.value("c1.weight").unwrap());
    }

    #[test]
    fn biases_and_norm_params_start_fixed() {
        let p = init_params::<f32>(&spec(), 1).unwrap();
        assert!(p.value("fc.bias").unwrap().data().iter().all(|&b| b == 0.0));
        assert!(p.value("bn1.gamma").unwrap().data().iter().all(|&b| b == 1.0));
        assert!(p.value("bn1.beta").unwrap().data().iter().all(|&b| b == 0.0));
        assert!(!p.get("bn1.running_var").unwrap().trainable);
    }

    #[test]
    fn weight_statistics_match_dcgan_init() {
        let layers = [LayerSpec::Dense { name: "w".into(), in_f: 100, out_f: 100, bias: false }];
        let p = init_params::<f64>(&layers, 11).unwrap();
        let w = p.value("w.weight").unwrap().data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // 3 sigma of the sample mean
        assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt(), "mean {mean}");
        assert!((std - INIT_STD).abs() < 0.05 * INIT_STD, "std {std}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let layers = [
            LayerSpec::Dense { name: "a".into(), in_f: 2, out_f: 2, bias: false },
            LayerSpec::Dense { name: "a".into(), in_f: 2, out_f: 2, bias: false },
        ];
        assert!(init_params::<f32>(&layers, 0).is_err());
    }

    #[test]
    fn zero_grads_is_idempotent_and_keeps_values() {
        let mut p = init_params::<f32>(&spec(), 2).unwrap();
        for (_, q) in p.iter_mut() {
            q.grad.iter_mut().for_each(|g| *g = 1.5);
        }
        let before = p.values_snapshot();
        p.zero_grads();
        assert!(p.iter().all(|(_, q)| q.grad.iter().all(|&g| g == 0.0)));
        assert_eq!(before, p.values_snapshot());
        let once = p.clone();
        p.zero_grads();
        assert_eq!(once, p);
    }
}
