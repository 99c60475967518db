//! Named parameter storage and the per-forward binding of parameters onto a tape.
//!
//! Parameter names are dotted paths (`backbone.stage1.weight`,
//! `relations.dependency.head.torso.logit.weight`, ...). Each parameter is
//! initialised from its own RNG stream derived from the model seed and the
//! name, so variants sharing a module start from identical weights.

use std::collections::{BTreeMap, BTreeSet};

use hparse_tensor::{Grads, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "parameter {name} registered twice");
        self.entries.insert(name, Param { value, decay });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Tensor<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Parameters in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), decay: p.decay }))
                .collect(),
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic initialiser keyed on `(seed, parameter name)`.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name))
    }

    /// He-normal convolution weights `[out, in, k, k]` plus optional zero bias.
    pub fn conv<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, out_c: usize, in_c: usize, k: usize, bias: bool) {
        let fan_in = (in_c * k * k) as f64;
        self.conv_with_std(store, prefix, out_c, in_c, k, bias, (2.0 / fan_in).sqrt());
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_with_std<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        bias: bool,
        std: f64,
    ) {
        let wname = format!("{prefix}.weight");
        let mut rng = self.rng(&wname);
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Tensor::from_fn(&[out_c, in_c, k, k], |_| T::of(normal.sample(&mut rng)));
        store.insert(wname, w, true);
        if bias {
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_c]), true);
        }
    }
}

/// One forward pass: a tape plus the parameters bound onto it so far.
///
/// Parameters are bound lazily on first use, so the set of bound names is
/// exactly the set of parameters the forward pass touched.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    track_grad: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(params: &'a ParamStore<T>, track_grad: bool) -> Self {
        Session { tape: Tape::new(), params, bound: BTreeMap::new(), track_grad }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn track_grad(&self) -> bool {
        self.track_grad
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self.params.value(name).clone();
        let v = self.tape.leaf(value, self.track_grad);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// `name.bias` if the store has it.
    pub fn opt_param(&mut self, name: &str) -> Option<Var> {
        self.params.contains(name).then(|| self.param(name))
    }

    /// Convolution with `prefix.weight` and optional `prefix.bias`.
    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.opt_param(&format!("{prefix}.bias"));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    pub fn conv_relu(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
        let y = self.conv(prefix, x, stride, pad);
        self.tape.relu(y)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn touched(&self) -> BTreeSet<String> {
        self.bound.keys().cloned().collect()
    }

    /// Gradient for every parameter in the store; untouched ones are zero.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, p)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let init = Init { seed: 5 };
        let mut a = ParamStore::<f32>::new();
        init.conv(&mut a, "x", 2, 3, 3, true);
        init.conv(&mut a, "y", 2, 3, 3, true);
        let mut b = ParamStore::<f32>::new();
        init.conv(&mut b, "y", 2, 3, 3, true);
        init.conv(&mut b, "x", 2, 3, 3, true);
        assert_eq!(a, b);
        assert_ne!(a.value("x.weight"), a.value("y.weight"));
    }

    #[test]
    fn session_binds_lazily() {
        let init = Init { seed: 1 };
        let mut store = ParamStore::<f64>::new();
        init.conv(&mut store, "a", 1, 1, 1, false);
        init.conv(&mut store, "b", 1, 1, 1, false);
        let mut s = Session::new(&store, true);
        let x = s.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = s.conv("a", x, 1, 0);
        let l = s.tape.dot(y, Tensor::full(&[1, 1, 2, 2], 1.0));
        assert_eq!(s.touched().into_iter().collect::<Vec<_>>(), vec!["a.weight".to_string()]);
        let mut g = s.tape.backward(l);
        let grads = s.param_grads(&mut g);
        assert_eq!(grads["a.weight"].item(), 4.0);
        assert_eq!(grads["b.weight"].item(), 0.0);
    }
}
