use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::layers::{Layer, Mode, Param};
use super::scalar::Scalar;
use super::spec::{LayerSpec, NetworkSpec};
use super::tensor::Tensor;

/// A network instance: spec, parameters, running statistics and the
/// forward cache of the last train-mode pass.
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    ready_for_backward: bool,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network. Weights are drawn in double
    /// precision from a generator seeded with `seed`, so both precisions
    /// start from the same values.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, (ls, out)) in spec.layers.iter().zip(shapes).enumerate() {
            let prefix = format!("layer{i}");
            layers.push(Layer::build(ls, input, &prefix, &mut rng));
            input = out;
        }
        for i in 0..layers.len().saturating_sub(1) {
            if matches!(spec.layers[i + 1], LayerSpec::BatchNorm { .. }) {
                if let Some(bias) = layers[i].params_mut().into_iter().find(|p| p.name.ends_with(".bias")) {
                    bias.shadowed = true;
                }
            }
        }
        Ok(Self {
            spec,
            layers,
            ready_for_backward: false,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Runs the stack on an `(N, C, H, W)` batch and returns `(N, classes)`
    /// logits. Train mode normalizes with batch statistics, updates the
    /// running statistics and keeps what `backward` needs.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if batch.shape().len() != 4 || batch.shape()[1] != self.spec.input[0] {
            return Err(Error::ShapeMismatch(format!(
                "network {} expects (N, {}, H, W), got {:?}",
                self.spec.name,
                self.spec.input[0],
                batch.shape()
            )));
        }
        self.ready_for_backward = false;
        let n = batch.batch();
        let mut x = None::<Tensor<T>>;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let y = layer.forward(x.as_ref().unwrap_or(batch), mode)?;
            if cfg!(debug_assertions) && !y.all_finite() {
                return Err(Error::NonFiniteActivation(format!(
                    "layer{i} ({})",
                    self.spec.layers[i].kind()
                )));
            }
            x = Some(y);
        }
        let logits = x.expect("spec has layers").reshape(vec![n, self.spec.classes()])?;
        if !logits.all_finite() {
            return Err(Error::NonFiniteActivation("logits".into()));
        }
        self.ready_for_backward = mode == Mode::Train;
        Ok(logits)
    }

    /// Back-propagates `dlogits` and overwrites every parameter gradient.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<()> {
        if !self.ready_for_backward {
            return Err(Error::StaleCache);
        }
        self.ready_for_backward = false;
        self.zero_grads();
        let n = dlogits.batch();
        let mut g = dlogits.clone().reshape(vec![n, self.spec.classes(), 1, 1])?;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            // the network input needs no gradient
            if let Some(dx) = layer.backward(&g, i > 0)? {
                g = dx;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Hash of the ReLU masks and max-pool winners of the last train-mode
    /// forward.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for l in &self.layers {
            l.hash_branches(&mut h);
        }
        h.finish()
    }

    /// Same network in another precision; caches are dropped.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            ready_for_backward: false,
        }
    }

    /// Named value blocks in declaration order: per layer its parameters,
    /// then batchnorm running mean and variance.
    pub fn blocks(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for p in l.params() {
                out.push((p.name.clone(), p.value.data().to_vec()));
            }
            if let Layer::BatchNorm(bn) = l {
                out.push((format!("layer{i}.running_mean"), bn.running_mean.clone()));
                out.push((format!("layer{i}.running_var"), bn.running_var.clone()));
            }
        }
        out
    }

    /// Overwrites every block; names and lengths must match [`Self::blocks`].
    pub fn load_blocks(&mut self, blocks: &[(String, Vec<T>)]) -> Result<()> {
        let expected: Vec<(String, usize)> =
            self.blocks().into_iter().map(|(n, v)| (n, v.len())).collect();
        if expected.len() != blocks.len() {
            return Err(Error::SpecMismatch(format!(
                "expected {} parameter blocks, got {}",
                expected.len(),
                blocks.len()
            )));
        }
        for ((en, el), (n, v)) in expected.iter().zip(blocks) {
            if en != n || *el != v.len() {
                return Err(Error::SpecMismatch(format!(
                    "block {n} ({} values) where {en} ({el} values) was expected",
                    v.len()
                )));
            }
        }
        let mut it = blocks.iter();
        for l in self.layers.iter_mut() {
            for p in l.params_mut() {
                p.value.data_mut().copy_from_slice(&it.next().expect("checked").1);
            }
            if let Layer::BatchNorm(bn) = l {
                bn.running_mean.copy_from_slice(&it.next().expect("checked").1);
                bn.running_var.copy_from_slice(&it.next().expect("checked").1);
            }
        }
        self.ready_for_backward = false;
        Ok(())
    }
}
